//! Model and run configuration, presets, and the flat `key=value` file format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Everything needed to instantiate one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// action class names, ids are positions; the extra "None" class is implicit
    pub class_names: Vec<String>,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub adapter_dim: usize,
    pub cmib_dim: usize,
    pub cmib_heads: usize,
    pub cmib_depth: usize,
    pub cmib_ffn_dim: usize,
    pub tune_dim: usize,
    pub tune_kernel: usize,
    pub dropout: f64,
    pub num_queries: usize,
    pub query_init: f64,
    pub stub_depth: usize,
    pub stub_heads: usize,
    pub stub_ffn_dim: usize,
    pub vocab_buckets: usize,
    pub rms_eps: f64,
    pub seed: u64,
    pub shared_projections: bool,
    pub shared_past_head: bool,
    pub tuning_residual: bool,
    /// false zeroes the text rows and drops the text segmentation loss
    pub text_stream: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            class_names: Vec::new(),
            feature_dim: 2048,
            embed_dim: 64,
            adapter_dim: 32,
            cmib_dim: 128,
            cmib_heads: 4,
            cmib_depth: 1,
            cmib_ffn_dim: 256,
            tune_dim: 4,
            tune_kernel: 1,
            dropout: 0.1,
            num_queries: 20,
            query_init: 0.5,
            stub_depth: 2,
            stub_heads: 4,
            stub_ffn_dim: 128,
            vocab_buckets: 512,
            rms_eps: 1e-6,
            seed: 0,
            shared_projections: false,
            shared_past_head: false,
            tuning_residual: false,
            text_stream: true,
        }
    }
}

impl ModelConfig {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Tiny dimensions for gradient checks.
    pub fn tiny(num_classes: usize) -> Self {
        ModelConfig {
            class_names: (0..num_classes).map(|i| format!("action_{i}")).collect(),
            feature_dim: 6,
            embed_dim: 8,
            adapter_dim: 4,
            cmib_dim: 4,
            cmib_heads: 2,
            cmib_depth: 1,
            cmib_ffn_dim: 8,
            tune_dim: 2,
            tune_kernel: 1,
            dropout: 0.0,
            num_queries: 2,
            query_init: 0.5,
            stub_depth: 1,
            stub_heads: 2,
            stub_ffn_dim: 8,
            vocab_buckets: 16,
            rms_eps: 1e-6,
            seed: 7,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Input(m));
        if self.class_names.is_empty() {
            return fail("model needs at least one action class".into());
        }
        for (name, v) in [
            ("feature_dim", self.feature_dim),
            ("embed_dim", self.embed_dim),
            ("adapter_dim", self.adapter_dim),
            ("cmib_dim", self.cmib_dim),
            ("cmib_depth", self.cmib_depth),
            ("cmib_ffn_dim", self.cmib_ffn_dim),
            ("tune_dim", self.tune_dim),
            ("num_queries", self.num_queries),
            ("vocab_buckets", self.vocab_buckets),
            ("stub_ffn_dim", self.stub_ffn_dim),
        ] {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        if self.cmib_heads == 0 || self.cmib_dim % self.cmib_heads != 0 {
            return fail(format!(
                "cmib_dim {} not divisible by cmib_heads {}",
                self.cmib_dim, self.cmib_heads
            ));
        }
        if self.stub_heads == 0 || self.embed_dim % self.stub_heads != 0 {
            return fail(format!(
                "embed_dim {} not divisible by stub_heads {}",
                self.embed_dim, self.stub_heads
            ));
        }
        if self.tune_kernel % 2 == 0 {
            return fail(format!("tune_kernel must be odd, got {}", self.tune_kernel));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0,1]", self.dropout));
        }
        if self.rms_eps < 0.0 {
            return fail("rms_eps must be nonnegative".into());
        }
        let mut seen = std::collections::HashSet::new();
        for n in &self.class_names {
            if n.is_empty() || n.contains(|c: char| c == ',' || c.is_whitespace()) {
                return fail(format!("invalid class name {n:?}"));
            }
            if !seen.insert(n) {
                return fail(format!("duplicate class name {n}"));
            }
        }
        Ok(())
    }

    fn write_entries(&self, map: &mut BTreeMap<String, String>) {
        let mut put = |k: &str, v: String| {
            map.insert(k.to_string(), v);
        };
        put("class_names", self.class_names.join(","));
        put("feature_dim", self.feature_dim.to_string());
        put("embed_dim", self.embed_dim.to_string());
        put("adapter_dim", self.adapter_dim.to_string());
        put("cmib_dim", self.cmib_dim.to_string());
        put("cmib_heads", self.cmib_heads.to_string());
        put("cmib_depth", self.cmib_depth.to_string());
        put("cmib_ffn_dim", self.cmib_ffn_dim.to_string());
        put("tune_dim", self.tune_dim.to_string());
        put("tune_kernel", self.tune_kernel.to_string());
        put("dropout", fmt_f64(self.dropout));
        put("num_queries", self.num_queries.to_string());
        put("query_init", fmt_f64(self.query_init));
        put("stub_depth", self.stub_depth.to_string());
        put("stub_heads", self.stub_heads.to_string());
        put("stub_ffn_dim", self.stub_ffn_dim.to_string());
        put("vocab_buckets", self.vocab_buckets.to_string());
        put("rms_eps", fmt_f64(self.rms_eps));
        put("model_seed", self.seed.to_string());
        put("shared_projections", self.shared_projections.to_string());
        put("shared_past_head", self.shared_past_head.to_string());
        put("tuning_residual", self.tuning_residual.to_string());
        put("text_stream", self.text_stream.to_string());
    }

    /// Applies one key; returns false when the key is not a model key.
    fn apply(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        match key {
            "class_names" => {
                self.class_names = if value.is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|s| s.trim().to_string()).collect()
                }
            }
            "feature_dim" => self.feature_dim = parse(value)?,
            "embed_dim" => self.embed_dim = parse(value)?,
            "adapter_dim" => self.adapter_dim = parse(value)?,
            "cmib_dim" => self.cmib_dim = parse(value)?,
            "cmib_heads" => self.cmib_heads = parse(value)?,
            "cmib_depth" => self.cmib_depth = parse(value)?,
            "cmib_ffn_dim" => self.cmib_ffn_dim = parse(value)?,
            "tune_dim" => self.tune_dim = parse(value)?,
            "tune_kernel" => self.tune_kernel = parse(value)?,
            "dropout" => self.dropout = parse(value)?,
            "num_queries" => self.num_queries = parse(value)?,
            "query_init" => self.query_init = parse(value)?,
            "stub_depth" => self.stub_depth = parse(value)?,
            "stub_heads" => self.stub_heads = parse(value)?,
            "stub_ffn_dim" => self.stub_ffn_dim = parse(value)?,
            "vocab_buckets" => self.vocab_buckets = parse(value)?,
            "rms_eps" => self.rms_eps = parse(value)?,
            "model_seed" => self.seed = parse(value)?,
            "shared_projections" => self.shared_projections = parse(value)?,
            "shared_past_head" => self.shared_past_head = parse(value)?,
            "tuning_residual" => self.tuning_residual = parse(value)?,
            "text_stream" => self.text_stream = parse(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Canonical `key=value` text, sorted by key.
    pub fn to_kv(&self) -> String {
        let mut map = BTreeMap::new();
        self.write_entries(&mut map);
        render_kv(&map)
    }

    pub fn from_kv(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (line, key, value) in parse_kv_lines(text, origin)? {
            match cfg.apply(&key, &value) {
                Ok(true) => {}
                Ok(false) => {
                    return Err(Error::Parse {
                        file: origin.to_path_buf(),
                        line,
                        msg: format!("unknown model key {key}"),
                    })
                }
                Err(msg) => {
                    return Err(Error::Parse {
                        file: origin.to_path_buf(),
                        line,
                        msg: format!("{key}: {msg}"),
                    })
                }
            }
        }
        Ok(cfg)
    }

    /// Short hex digest of the canonical text; identifies an architecture and its init.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_kv().as_bytes());
        digest.iter().take(8).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Breakfast,
    Salads50,
    Synthetic,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "breakfast" => Ok(Preset::Breakfast),
            "salads50" => Ok(Preset::Salads50),
            "synthetic" => Ok(Preset::Synthetic),
            other => Err(Error::Input(format!(
                "unknown preset {other} (expected breakfast, salads50 or synthetic)"
            ))),
        }
    }
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Breakfast => "breakfast",
            Preset::Salads50 => "salads50",
            Preset::Synthetic => "synthetic",
        }
    }
}

/// Arithmetic mode: `Test` keeps full double precision, `Run` rounds trainable
/// weights to single precision after every optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Test,
    Run,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "test" | "f64" => Ok(Precision::Test),
            "run" | "f32" => Ok(Precision::Run),
            other => Err(Error::Input(format!("unknown precision {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextSource {
    GroundTruth,
    Predicted,
}

/// Model configuration plus everything a train/eval run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub preset: Preset,
    pub learning_rate: f64,
    /// anneal the step size to zero along a half cosine over all steps
    pub cosine_decay: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// observation windows drawn from each training video per epoch
    pub samples_per_video: usize,
    /// observation ratios drawn from during training
    pub train_alphas: Vec<f64>,
    pub train_beta: f64,
    pub eval_alphas: Vec<f64>,
    pub eval_betas: Vec<f64>,
    pub sample_rate: usize,
    /// training start frames are drawn from 0..=train_start_max
    pub train_start_max: usize,
    pub val_fraction: f64,
    pub noise_p: f64,
    /// corruption rate for the text stream at evaluation (ground-truth source only)
    pub eval_noise_p: f64,
    pub loss_mean: bool,
    pub precision: Precision,
    pub text_source: TextSource,
    pub seed: u64,
    pub data_dir: Option<PathBuf>,
    pub train_split: String,
    pub test_split: String,
    pub out_dir: PathBuf,
    pub freeze_audit: bool,
    /// seeds the synthetic grammar and corpus, independent of the model seed
    pub synth_seed: u64,
    /// per-class segment length range, as fractions of the video
    pub synth_dur_min: f64,
    pub synth_dur_max: f64,
    /// per-entry std of the synthetic feature noise
    pub synth_noise_std: f64,
    pub synth_train_videos: usize,
    pub synth_test_videos: usize,
    pub synth_min_frames: usize,
    pub synth_max_frames: usize,
}

/// Stand-in names sized like the real label sets; a dataset mapping replaces them.
fn placeholder_classes(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("class_{i:02}")).collect()
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::preset(Preset::Synthetic)
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let base = RunConfig {
            model: ModelConfig::default(),
            preset,
            learning_rate: 1e-3,
            cosine_decay: false,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 20,
            batch_size: 1,
            samples_per_video: 1,
            train_alphas: vec![0.2, 0.3],
            train_beta: 0.5,
            eval_alphas: vec![0.2, 0.3],
            eval_betas: vec![0.1, 0.2, 0.3, 0.5],
            sample_rate: 8,
            train_start_max: 0,
            val_fraction: 0.1,
            noise_p: 0.2,
            eval_noise_p: 0.0,
            loss_mean: false,
            precision: Precision::Run,
            text_source: TextSource::GroundTruth,
            seed: 0,
            data_dir: None,
            train_split: "train".into(),
            test_split: "test".into(),
            out_dir: PathBuf::from("runs/default"),
            freeze_audit: false,
            synth_seed: 17,
            synth_dur_min: 0.06,
            synth_dur_max: 0.16,
            synth_noise_std: 0.5,
            synth_train_videos: 60,
            synth_test_videos: 20,
            synth_min_frames: 400,
            synth_max_frames: 640,
        };
        match preset {
            Preset::Breakfast => RunConfig {
                learning_rate: 1e-4,
                sample_rate: 6,
                train_start_max: 0,
                model: ModelConfig {
                    class_names: placeholder_classes(48),
                    num_queries: 8,
                    ..ModelConfig::default()
                },
                ..base
            },
            Preset::Salads50 => RunConfig {
                learning_rate: 1e-3,
                sample_rate: 8,
                train_start_max: 7,
                model: ModelConfig {
                    class_names: placeholder_classes(17),
                    num_queries: 20,
                    ..ModelConfig::default()
                },
                ..base
            },
            Preset::Synthetic => RunConfig {
                learning_rate: 1e-3,
                sample_rate: 8,
                train_start_max: 7,
                cosine_decay: true,
                samples_per_video: 8,
                synth_dur_min: 0.15,
                synth_dur_max: 0.3,
                synth_noise_std: 1.0,
                noise_p: 0.0,
                model: ModelConfig {
                    class_names: crate::datapipe::SynthGrammar::class_names(8),
                    feature_dim: 32,
                    embed_dim: 64,
                    adapter_dim: 32,
                    cmib_dim: 32,
                    cmib_heads: 4,
                    cmib_ffn_dim: 64,
                    num_queries: 8,
                    tune_dim: 32,
                    tuning_residual: true,
                    dropout: 0.0,
                    ..ModelConfig::default()
                },
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Input(m));
        if self.epochs == 0 || self.batch_size == 0 || self.sample_rate == 0 || self.samples_per_video == 0 {
            return fail("epochs, batch_size, samples_per_video and sample_rate must be at least 1".into());
        }
        if self.train_start_max >= self.sample_rate {
            return fail(format!(
                "train_start_max {} must be below the sample rate {}",
                self.train_start_max, self.sample_rate
            ));
        }
        if !(0.0..=1.0).contains(&self.noise_p) || !(0.0..=1.0).contains(&self.eval_noise_p) {
            return fail(format!(
                "noise rates {} / {} outside [0,1]",
                self.noise_p, self.eval_noise_p
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail(format!("val_fraction {} outside [0,1)", self.val_fraction));
        }
        if self.train_alphas.is_empty() || self.eval_alphas.is_empty() || self.eval_betas.is_empty() {
            return fail("alpha and beta lists must be nonempty".into());
        }
        for &a in self.train_alphas.iter().chain(&self.eval_alphas) {
            for &b in self.eval_betas.iter().chain(std::iter::once(&self.train_beta)) {
                if a <= 0.0 || b <= 0.0 || a + b > 1.0 + 1e-12 {
                    return fail(format!("observation/prediction ratios {a}/{b} need 0 < α, β and α+β ≤ 1"));
                }
            }
        }
        if self.eval_betas.iter().any(|&b| b > self.train_beta + 1e-12) {
            return fail(format!(
                "evaluation β values must not exceed the decoding horizon β={}",
                self.train_beta
            ));
        }
        if self.synth_min_frames == 0 || self.synth_min_frames > self.synth_max_frames {
            return fail("synthetic frame range is empty".into());
        }
        if !(self.synth_noise_std >= 0.0 && self.synth_noise_std.is_finite()) {
            return fail(format!("synth_noise_std {} must be finite and non-negative", self.synth_noise_std));
        }
        if !(self.synth_dur_min > 0.0 && self.synth_dur_min <= self.synth_dur_max) {
            return fail("synthetic duration range must be positive and ordered".into());
        }
        self.model.validate()
    }

    pub fn to_kv(&self) -> String {
        let mut map = BTreeMap::new();
        self.model.write_entries(&mut map);
        let mut put = |k: &str, v: String| {
            map.insert(k.to_string(), v);
        };
        put("learning_rate", fmt_f64(self.learning_rate));
        put("cosine_decay", self.cosine_decay.to_string());
        put("beta1", fmt_f64(self.beta1));
        put("beta2", fmt_f64(self.beta2));
        put("adam_eps", fmt_f64(self.adam_eps));
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("samples_per_video", self.samples_per_video.to_string());
        put("train_alphas", join_f64(&self.train_alphas));
        put("train_beta", fmt_f64(self.train_beta));
        put("eval_alphas", join_f64(&self.eval_alphas));
        put("eval_betas", join_f64(&self.eval_betas));
        put("sample_rate", self.sample_rate.to_string());
        put("train_start_max", self.train_start_max.to_string());
        put("val_fraction", fmt_f64(self.val_fraction));
        put("noise_p", fmt_f64(self.noise_p));
        put("eval_noise_p", fmt_f64(self.eval_noise_p));
        put("loss_mean", self.loss_mean.to_string());
        put(
            "precision",
            match self.precision {
                Precision::Test => "test",
                Precision::Run => "run",
            }
            .into(),
        );
        put(
            "text_source",
            match self.text_source {
                TextSource::GroundTruth => "gt",
                TextSource::Predicted => "predicted",
            }
            .into(),
        );
        put("seed", self.seed.to_string());
        put(
            "data_dir",
            self.data_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        put("train_split", self.train_split.clone());
        put("test_split", self.test_split.clone());
        put("out_dir", self.out_dir.display().to_string());
        put("freeze_audit", self.freeze_audit.to_string());
        put("synth_seed", self.synth_seed.to_string());
        put("synth_dur_min", fmt_f64(self.synth_dur_min));
        put("synth_dur_max", fmt_f64(self.synth_dur_max));
        put("synth_noise_std", fmt_f64(self.synth_noise_std));
        put("synth_train_videos", self.synth_train_videos.to_string());
        put("synth_test_videos", self.synth_test_videos.to_string());
        put("synth_min_frames", self.synth_min_frames.to_string());
        put("synth_max_frames", self.synth_max_frames.to_string());
        format!("preset={}\n{}", self.preset.as_str(), render_kv(&map))
    }

    /// Parses a config file. A `preset` key, if present, must come first; it resets
    /// every field to the preset defaults before the remaining keys apply.
    pub fn from_kv(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (idx, (line, key, value)) in parse_kv_lines(text, origin)?.into_iter().enumerate() {
            let perr = |msg: String| Error::Parse {
                file: origin.to_path_buf(),
                line,
                msg,
            };
            if key == "preset" {
                if idx != 0 {
                    return Err(perr("preset must be the first key".into()));
                }
                cfg = RunConfig::preset(value.parse().map_err(|e: Error| perr(e.to_string()))?);
                continue;
            }
            cfg.set(&key, &value).map_err(|msg| perr(format!("{key}: {msg}")))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_kv()).map_err(|e| Error::io(path, e))
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        if self.model.apply(key, value)? {
            return Ok(());
        }
        match key {
            "preset" => {
                let preset: Preset = value.parse().map_err(|e: Error| e.to_string())?;
                self.preset = preset;
            }
            "learning_rate" => self.learning_rate = parse(value)?,
            "cosine_decay" => self.cosine_decay = parse(value)?,
            "beta1" => self.beta1 = parse(value)?,
            "beta2" => self.beta2 = parse(value)?,
            "adam_eps" => self.adam_eps = parse(value)?,
            "epochs" => self.epochs = parse(value)?,
            "batch_size" => self.batch_size = parse(value)?,
            "samples_per_video" => self.samples_per_video = parse(value)?,
            "train_alphas" => self.train_alphas = parse_list(value)?,
            "train_beta" => self.train_beta = parse(value)?,
            "eval_alphas" => self.eval_alphas = parse_list(value)?,
            "eval_betas" => self.eval_betas = parse_list(value)?,
            "sample_rate" => self.sample_rate = parse(value)?,
            "train_start_max" => self.train_start_max = parse(value)?,
            "val_fraction" => self.val_fraction = parse(value)?,
            "noise_p" => self.noise_p = parse(value)?,
            "eval_noise_p" => self.eval_noise_p = parse(value)?,
            "loss_mean" => self.loss_mean = parse(value)?,
            "precision" => self.precision = value.parse().map_err(|e: Error| e.to_string())?,
            "text_source" => {
                self.text_source = match value {
                    "gt" => TextSource::GroundTruth,
                    "predicted" => TextSource::Predicted,
                    other => return Err(format!("unknown text source {other}")),
                }
            }
            "seed" => self.seed = parse(value)?,
            "data_dir" => {
                self.data_dir = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "train_split" => self.train_split = value.to_string(),
            "test_split" => self.test_split = value.to_string(),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "freeze_audit" => self.freeze_audit = parse(value)?,
            "synth_seed" => self.synth_seed = parse(value)?,
            "synth_dur_min" => self.synth_dur_min = parse(value)?,
            "synth_dur_max" => self.synth_dur_max = parse(value)?,
            "synth_noise_std" => self.synth_noise_std = parse(value)?,
            "synth_train_videos" => self.synth_train_videos = parse(value)?,
            "synth_test_videos" => self.synth_test_videos = parse(value)?,
            "synth_min_frames" => self.synth_min_frames = parse(value)?,
            "synth_max_frames" => self.synth_max_frames = parse(value)?,
            other => return Err(format!("unknown key {other}")),
        }
        Ok(())
    }
}

fn parse<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse::<T>().map_err(|e| format!("cannot parse {value:?}: {e}"))
}

fn parse_list(value: &str) -> std::result::Result<Vec<f64>, String> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(parse::<f64>)
        .collect()
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn join_f64(vs: &[f64]) -> String {
    vs.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(",")
}

fn render_kv(map: &BTreeMap<String, String>) -> String {
    map.iter().fold(String::new(), |mut s, (k, v)| {
        let _ = writeln!(s, "{k}={v}");
        s
    })
}

/// `(line number, key, value)` triples; blank lines and `#` comments skipped.
pub(crate) fn parse_kv_lines(text: &str, origin: &Path) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                file: origin.to_path_buf(),
                line: i + 1,
                msg: format!("expected key=value, got {line:?}"),
            });
        };
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
