//! Training loop, optimizer, and the command implementations behind the CLI.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{action_tuning, ParamCounts, TuningWeights};
use crate::cmib::{cmia_forward, cmib_forward, CmiaWeights, CmibParams};
use crate::config::{ModelConfig, Precision, RunConfig, TextSource};
use crate::datapipe::{
    inject_label_noise, load_split, sample_observation, synth_corpus, write_split, DatasetLayout, ObservationSpec,
    SynthGrammar, VideoRecord,
};
use crate::error::{Error, Result};
use crate::evalkit::{
    emit_timeline, evaluate_grid, stable_hash, EvalReport, FrameSequence, Forecaster, GridSpec, ModelForecaster,
};
use crate::model::{load_checkpoint, save_checkpoint, ActionModel, Observation};
use crate::objective::{build_targets, total_loss_var, LossBreakdown, TargetPack};
use crate::par::{self, ExecMode};
use crate::tensorkit::{grad_check, GradCheckReport, Gradients, Matrix, ParamStore};

/// Adam with bias correction over trainable parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Option<Matrix>>,
    v: Vec<Option<Matrix>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn from_config(cfg: &RunConfig) -> Self {
        Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Applies `scale · grads`. Frozen parameters are never touched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, scale: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        for (id, g) in grads.iter() {
            if !store.get(id).trainable {
                continue;
            }
            let i = id.index();
            let shape = g.shape();
            let m = self.m[i].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1));
            let v = self.v[i].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1));
            let p = &mut store.get_mut(id).value;
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                let gv = gv * scale;
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *pv -= self.lr * (*mv / c1) / ((*vv / c2).sqrt() + self.eps);
            }
        }
    }
}

/// One training example drawn from a video.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub video: String,
    pub alpha: f64,
    pub start: usize,
    pub obs: Observation,
    pub targets: TargetPack,
    pub dropout_seed: u64,
}

fn sample_seed(seed: u64, epoch: usize, id: &str) -> u64 {
    seed ^ stable_hash(id) ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Draws α, the start frame and label noise for window `draw` of `video` in `epoch`;
/// `None` if nothing is observable.
pub fn make_sample(cfg: &RunConfig, video: &VideoRecord, epoch: usize, draw: usize) -> Result<Option<TrainSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, epoch * cfg.samples_per_video + draw, &video.id));
    let alpha = cfg.train_alphas[rng.random_range(0..cfg.train_alphas.len())];
    let start = rng.random_range(0..=cfg.train_start_max);
    let spec = ObservationSpec {
        alpha,
        beta: cfg.train_beta,
        sample_rate: cfg.sample_rate,
        start,
    };
    let s = match sample_observation(video, &spec) {
        Ok(s) => s,
        Err(Error::EmptyObservation(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let k = cfg.model.num_classes();
    let text = match cfg.text_source {
        TextSource::GroundTruth => inject_label_noise(&s.labels, cfg.noise_p, k, &mut rng),
        TextSource::Predicted => s
            .predicted
            .clone()
            .ok_or_else(|| Error::Input(format!("video {} has no predicted label track", video.id)))?,
    };
    let targets = build_targets(&s.labels, &s.segments, cfg.model.num_queries, s.horizon, k)?;
    Ok(Some(TrainSample {
        video: video.id.clone(),
        alpha,
        start,
        obs: Observation {
            labels: text,
            features: s.features,
        },
        targets,
        dropout_seed: rng.random(),
    }))
}

/// Deterministic hold-out of `fraction` of the videos (at least one when the fraction is positive).
pub fn split_validation(videos: &[VideoRecord], fraction: f64, seed: u64) -> (Vec<VideoRecord>, Vec<VideoRecord>) {
    let mut idx: Vec<usize> = (0..videos.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7a11_da7e));
    let n_val = if fraction > 0.0 && videos.len() > 1 {
        ((videos.len() as f64 * fraction).round() as usize).clamp(1, videos.len() - 1)
    } else {
        0
    };
    let (val, train) = idx.split_at(n_val);
    let pick = |ix: &[usize]| {
        let mut ix = ix.to_vec();
        ix.sort_unstable();
        ix.into_iter().map(|i| videos[i].clone()).collect()
    };
    (pick(train), pick(val))
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct LossSum {
    text: f64,
    vision: f64,
    class: f64,
    duration: f64,
    total: f64,
    n: usize,
}

impl LossSum {
    fn add(&mut self, b: &LossBreakdown) {
        self.text += b.text;
        self.vision += b.vision;
        self.class += b.class;
        self.duration += b.duration;
        self.total += b.total;
        self.n += 1;
    }

    fn mean(&self) -> LossBreakdown {
        let d = self.n.max(1) as f64;
        LossBreakdown {
            text: self.text / d,
            vision: self.vision / d,
            class: self.class / d,
            duration: self.duration / d,
            total: self.total / d,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ActionModel,
    /// mean training loss per epoch
    pub epoch_losses: Vec<LossBreakdown>,
    /// mean validation L_total per epoch (training loss when nothing is held out)
    pub val_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_model: ActionModel,
    pub final_path: Option<PathBuf>,
    pub best_path: Option<PathBuf>,
}

fn validation_loss(model: &ActionModel, cfg: &RunConfig, val: &[VideoRecord], mode: ExecMode) -> Result<Option<f64>> {
    let opts = model.loss_options(cfg.loss_mean);
    let per = par::map(mode, val, |_, v| -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for &alpha in &cfg.train_alphas {
            let spec = ObservationSpec {
                alpha,
                beta: cfg.train_beta,
                sample_rate: cfg.sample_rate,
                start: 0,
            };
            let s = match sample_observation(v, &spec) {
                Ok(s) => s,
                Err(Error::EmptyObservation(_)) => continue,
                Err(e) => return Err(e),
            };
            let targets = build_targets(&s.labels, &s.segments, cfg.model.num_queries, s.horizon, model.num_classes())?;
            let obs = Observation {
                labels: s.labels,
                features: s.features,
            };
            out.push(model.loss(&obs, &targets, opts)?.total);
        }
        Ok(out)
    });
    let mut sum = 0.0;
    let mut n = 0;
    for r in per {
        for l in r? {
            sum += l;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

fn dump_batch(out: Option<&Path>, epoch: usize, batch: &[TrainSample], err: &Error) -> String {
    let mut text = format!("epoch={epoch}\nerror={err}\n");
    for s in batch {
        let _ = writeln!(
            text,
            "video={} alpha={} start={} observed={} labels={:?} feature_max_abs={}",
            s.video,
            s.alpha,
            s.start,
            s.obs.len(),
            s.obs.labels,
            s.obs.features.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))
        );
    }
    if let Some(dir) = out {
        let path = dir.join("nonfinite_batch.txt");
        if fs::create_dir_all(dir).and_then(|_| fs::write(&path, &text)).is_ok() {
            return format!("batch dump written to {}", path.display());
        }
    }
    text
}

fn frozen_snapshot(store: &ParamStore) -> Vec<(String, Vec<u64>)> {
    store
        .iter()
        .filter(|(_, p)| !p.trainable)
        .map(|(_, p)| (p.name.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

/// Trains a fresh model on `videos`. With `out`, writes config, log and checkpoints there.
pub fn train_model(cfg: &RunConfig, videos: &[VideoRecord], out: Option<&Path>, mode: ExecMode) -> Result<TrainOutcome> {
    cfg.validate()?;
    for v in videos {
        v.check(cfg.model.num_classes())?;
        if v.features.cols() != cfg.model.feature_dim {
            return Err(Error::Consistency(format!(
                "video {} has {}-dim features, model expects {}",
                v.id,
                v.features.cols(),
                cfg.model.feature_dim
            )));
        }
    }
    let (train, val) = split_validation(videos, cfg.val_fraction, cfg.seed);
    if train.is_empty() {
        return Err(Error::Input("no training videos".into()));
    }
    let mut model = ActionModel::new(cfg.model.clone())?;
    if cfg.precision == Precision::Run {
        model.round_params()?;
    }
    let frozen_before = cfg.freeze_audit.then(|| frozen_snapshot(&model.store));
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        cfg.save(&dir.join("config.cfg"))?;
    }
    let opts = model.loss_options(cfg.loss_mean);
    let mut adam = Adam::from_config(cfg);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut val_losses = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ActionModel)> = None;
    let mut log = String::new();

    let total_steps = (cfg.epochs * train.len() * cfg.samples_per_video).div_ceil(cfg.batch_size).max(1);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<(usize, usize)> = (0..train.len())
            .flat_map(|v| (0..cfg.samples_per_video).map(move |d| (v, d)))
            .collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, epoch, "order")));
        let mut sum = LossSum::default();
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &(i, draw) in chunk {
                if let Some(s) = make_sample(cfg, &train[i], epoch, draw)? {
                    batch.push(s);
                }
            }
            if batch.is_empty() {
                continue;
            }
            let results = par::map(mode, &batch, |_, s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s.dropout_seed);
                model.loss_and_grads(&s.obs, &s.targets, opts, Some(&mut rng))
            });
            let mut grads = Gradients::new(model.store.len());
            for r in results {
                match r {
                    Ok((b, g)) => {
                        sum.add(&b);
                        grads.merge(&g);
                    }
                    Err(e @ Error::Numeric(_)) => {
                        let dump = dump_batch(out, epoch + 1, &batch, &e);
                        return Err(Error::Numeric(format!("{e}; {dump}")));
                    }
                    Err(e) => return Err(e),
                }
            }
            if cfg.cosine_decay {
                let t = adam.steps() as f64 / total_steps as f64;
                adam.lr = cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos());
            }
            adam.step(&mut model.store, &grads, 1.0 / batch.len() as f64);
            if cfg.precision == Precision::Run {
                model.round_params()?;
            }
        }
        let mean = sum.mean();
        let val = validation_loss(&model, cfg, &val, mode)?.unwrap_or(mean.total);
        let line = format!(
            "epoch={} text={:.6} vision={:.6} class={:.6} duration={:.6} total={:.6} val_total={:.6}",
            epoch + 1,
            mean.text,
            mean.vision,
            mean.class,
            mean.duration,
            mean.total,
            val
        );
        log::info!("{line}");
        log.push_str(&line);
        log.push('\n');
        epoch_losses.push(mean);
        val_losses.push(val);
        if best.as_ref().is_none_or(|b| val < b.0) {
            best = Some((val, epoch + 1, model.clone()));
        }
    }

    if let Some(before) = frozen_before {
        let after = frozen_snapshot(&model.store);
        if before != after {
            let changed: Vec<&str> = before
                .iter()
                .zip(&after)
                .filter(|(a, b)| a != b)
                .map(|(a, _)| a.0.as_str())
                .collect();
            return Err(Error::Integrity(format!("frozen parameters changed: {}", changed.join(", "))));
        }
        log.push_str("freeze_audit=pass\n");
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    let (mut final_path, mut best_path) = (None, None);
    if let Some(dir) = out {
        let f = dir.join("final.ckpt");
        let b = dir.join("best.ckpt");
        save_checkpoint(&model, &f)?;
        save_checkpoint(&best_model, &b)?;
        let _ = writeln!(log, "best_epoch={best_epoch}\nconfig_hash={}", cfg.model.hash());
        let lp = dir.join("train_log.txt");
        fs::write(&lp, &log).map_err(|e| Error::io(&lp, e))?;
        final_path = Some(f);
        best_path = Some(b);
    }
    Ok(TrainOutcome {
        model,
        epoch_losses,
        val_losses,
        best_epoch,
        best_model,
        final_path,
        best_path,
    })
}

/// The synthetic grammar implied by a config.
pub fn synth_grammar(cfg: &RunConfig) -> SynthGrammar {
    let mut g = SynthGrammar::new(
        cfg.model.num_classes(),
        cfg.model.feature_dim,
        (cfg.synth_dur_min, cfg.synth_dur_max),
        cfg.synth_seed,
    );
    g.noise_std = cfg.synth_noise_std;
    g
}

/// Synthetic train or test corpus for `split`.
pub fn synth_split(cfg: &RunConfig, split: &str) -> Result<Vec<VideoRecord>> {
    let grammar = synth_grammar(cfg);
    let frames = (cfg.synth_min_frames, cfg.synth_max_frames);
    if split == cfg.train_split {
        synth_corpus(&grammar, cfg.synth_train_videos, frames, "train_", cfg.synth_seed ^ 1)
    } else {
        synth_corpus(&grammar, cfg.synth_test_videos, frames, "test_", cfg.synth_seed ^ 2)
    }
}

/// Loads `split` from `data_dir`, or synthesizes it when no directory is configured.
/// Class names from a dataset mapping replace the configured ones.
pub fn resolve_split(cfg: &mut RunConfig, split: &str, mode: ExecMode) -> Result<Vec<VideoRecord>> {
    match &cfg.data_dir {
        Some(dir) => {
            let (names, videos) = load_split(&DatasetLayout::standard(dir, split), mode)?;
            cfg.model.class_names = names;
            Ok(videos)
        }
        None => synth_split(cfg, split),
    }
}

pub fn run_train(cfg: &RunConfig, mode: ExecMode) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    let split = cfg.train_split.clone();
    let videos = resolve_split(&mut cfg, &split, mode)?;
    let out = cfg.out_dir.clone();
    train_model(&cfg, &videos, Some(&out), mode)
}

pub fn grid_spec(cfg: &RunConfig) -> GridSpec {
    GridSpec {
        alphas: cfg.eval_alphas.clone(),
        betas: cfg.eval_betas.clone(),
        decode_beta: cfg.train_beta,
        sample_rate: cfg.sample_rate,
    }
}

pub fn forecaster<'m>(model: &'m ActionModel, cfg: &RunConfig) -> ModelForecaster<'m> {
    ModelForecaster {
        model,
        text_source: cfg.text_source,
        noise_p: cfg.eval_noise_p,
        seed: cfg.seed,
    }
}

/// Grid evaluation with run metadata attached.
pub fn evaluate_model(model: &ActionModel, cfg: &RunConfig, videos: &[VideoRecord], split: &str, mode: ExecMode) -> Result<EvalReport> {
    let report = evaluate_grid(&forecaster(model, cfg), videos, &grid_spec(cfg), mode)?;
    Ok(report
        .with_meta("config_hash", model.config.hash())
        .with_meta("seed", cfg.seed)
        .with_meta("split", split)
        .with_meta("videos", videos.len())
        .with_meta(
            "text_source",
            match cfg.text_source {
                TextSource::GroundTruth => "gt",
                TextSource::Predicted => "predicted",
            },
        )
        .with_meta("eval_noise_p", cfg.eval_noise_p))
}

pub fn run_eval(cfg: &RunConfig, checkpoint: &Path, mode: ExecMode) -> Result<(EvalReport, PathBuf)> {
    let mut cfg = cfg.clone();
    cfg.validate()?;
    let split = cfg.test_split.clone();
    let videos = resolve_split(&mut cfg, &split, mode)?;
    let model = load_checkpoint(checkpoint, Some(&cfg.model))?;
    let report = evaluate_model(&model, &cfg, &videos, &split, mode)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let path = cfg.out_dir.join("report.txt");
    report.write(&path, "ActionLLM-stub")?;
    Ok((report, path))
}

/// Forecast for one test video at the first evaluation α; writes `timeline_<id>.{txt,svg}`.
pub fn run_predict(cfg: &RunConfig, checkpoint: &Path, video_id: &str, mode: ExecMode) -> Result<(PathBuf, PathBuf)> {
    let mut cfg = cfg.clone();
    cfg.validate()?;
    let split = cfg.test_split.clone();
    let videos = resolve_split(&mut cfg, &split, mode)?;
    let video = videos
        .iter()
        .find(|v| v.id == video_id)
        .ok_or_else(|| Error::Input(format!("video {video_id} not in split {split}")))?;
    let model = load_checkpoint(checkpoint, Some(&cfg.model))?;
    let spec = ObservationSpec {
        alpha: cfg.eval_alphas[0],
        beta: cfg.train_beta,
        sample_rate: cfg.sample_rate,
        start: 0,
    };
    let obs = sample_observation(video, &spec)?;
    let pred = forecaster(&model, &cfg).forecast(video, &obs)?;
    let gt = FrameSequence(video.gt_labels[obs.observation_end..obs.observation_end + obs.horizon].to_vec());
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    emit_timeline(&pred, &gt, &cfg.model.class_names, &cfg.out_dir.join(format!("timeline_{video_id}")))
}

/// Writes the synthetic train and test splits under `dir`.
pub fn run_synth(cfg: &RunConfig, dir: &Path) -> Result<(usize, usize)> {
    cfg.validate()?;
    let train = synth_split(cfg, &cfg.train_split)?;
    let test = synth_split(cfg, &cfg.test_split)?;
    write_split(dir, &cfg.train_split, &cfg.model.class_names, &train)?;
    write_split(dir, &cfg.test_split, &cfg.model.class_names, &test)?;
    Ok((train.len(), test.len()))
}

/// Finite-difference check of one component at tiny dimensions.
#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

pub const GRADCHECK_DELTA: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

fn random_target(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::randn(rows, cols, 1.0, rng)
}

/// Gradient checks over the interaction attention, the full interaction block,
/// action tuning, and the end-to-end model loss. All widths are at most 8.
pub fn run_gradcheck(seed: u64, mode: ExecMode) -> Result<Vec<GradCheckCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    let lens = [3usize, 4, 2];

    {
        let mut store = ParamStore::new();
        let w = CmiaWeights::new(&mut store, "cmia", 4, 2, &mut rng)?;
        let ins: Vec<Matrix> = lens.iter().map(|&n| Matrix::randn(n, 4, 1.0, &mut rng)).collect();
        let tg: Vec<Matrix> = lens.iter().map(|&n| random_target(&mut rng, n, 4)).collect();
        let report = grad_check(&store, GRADCHECK_DELTA, mode, |g| {
            let vars = [g.constant(ins[0].clone()), g.constant(ins[1].clone()), g.constant(ins[2].clone())];
            let outs = cmia_forward(g, vars, &w)?;
            let terms = (0..3)
                .map(|i| g.squared_error(outs[i], tg[i].clone(), vec![true; lens[i] * 4]))
                .collect::<Result<Vec<_>>>()?;
            g.sum_scalars(&terms)
        })?;
        cases.push(GradCheckCase { name: "cmia_forward", report });
    }
    {
        let mut store = ParamStore::new();
        let p = CmibParams::new(&mut store, 4, 2, 6, 1, 1e-6, &mut rng)?;
        let ins: Vec<Matrix> = lens.iter().map(|&n| Matrix::randn(n, 4, 1.0, &mut rng)).collect();
        let tg: Vec<Matrix> = lens.iter().map(|&n| random_target(&mut rng, n, 4)).collect();
        let report = grad_check(&store, GRADCHECK_DELTA, mode, |g| {
            let vars = [g.constant(ins[0].clone()), g.constant(ins[1].clone()), g.constant(ins[2].clone())];
            let outs = cmib_forward(g, vars, &p)?;
            let terms = (0..3)
                .map(|i| g.squared_error(outs[i], tg[i].clone(), vec![true; lens[i] * 4]))
                .collect::<Result<Vec<_>>>()?;
            g.sum_scalars(&terms)
        })?;
        cases.push(GradCheckCase { name: "cmib_forward", report });
    }
    {
        let mut store = ParamStore::new();
        let t = TuningWeights::new(&mut store, 6, 3, 3, 0.0, true, &mut rng)?;
        let x = Matrix::randn(5, 6, 1.0, &mut rng);
        let tg = random_target(&mut rng, 5, 6);
        let report = grad_check(&store, GRADCHECK_DELTA, mode, |g| {
            let xv = g.constant(x.clone());
            let y = action_tuning::<ChaCha8Rng>(g, xv, &t, None)?;
            g.squared_error(y, tg.clone(), vec![true; 30])
        })?;
        cases.push(GradCheckCase { name: "action_tuning", report });
    }
    {
        let mut mc = ModelConfig::tiny(3);
        mc.tune_kernel = 3;
        let model = ActionModel::new(mc)?;
        let obs = Observation {
            labels: vec![0, 2, 1],
            features: Matrix::randn(3, model.config.feature_dim, 1.0, &mut rng),
        };
        let targets = build_targets(&obs.labels, &[(1, 3), (0, 5)], model.config.num_queries, 8, 3)?;
        let opts = model.loss_options(false);
        let report = grad_check(&model.store, GRADCHECK_DELTA, mode, |g| {
            let pack = model.forward(g, &obs, None)?;
            Ok(total_loss_var(g, &pack.heads, &targets, opts)?.total)
        })?;
        cases.push(GradCheckCase { name: "model_forward+total_loss", report });
    }
    Ok(cases)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Queries,
    CmibDim,
    TuneDim,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "N" | "queries" => Ok(SweepAxis::Queries),
            "d_c" | "cmib_dim" => Ok(SweepAxis::CmibDim),
            "L_MA" | "tune_dim" => Ok(SweepAxis::TuneDim),
            other => Err(Error::Input(format!("unknown sweep axis {other} (expected N, d_c or L_MA)"))),
        }
    }
}

impl SweepAxis {
    pub fn label(self) -> &'static str {
        match self {
            SweepAxis::Queries => "N",
            SweepAxis::CmibDim => "d_c",
            SweepAxis::TuneDim => "L_MA",
        }
    }

    pub fn apply(self, m: &mut ModelConfig, value: usize) {
        match self {
            SweepAxis::Queries => m.num_queries = value,
            SweepAxis::CmibDim => m.cmib_dim = value,
            SweepAxis::TuneDim => m.tune_dim = value,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub rows: Vec<(usize, EvalReport)>,
}

impl SweepResult {
    /// One row per value; one MoC column per β at the fixed α, then the average.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let Some((_, first)) = self.rows.first() else {
            return s;
        };
        let _ = write!(s, "{}", self.axis.label());
        for b in &first.betas {
            let _ = write!(s, " | b={b}");
        }
        s.push_str(" | Average\n");
        for (v, r) in &self.rows {
            let _ = write!(s, "{v}");
            for b in 0..r.betas.len() {
                let _ = write!(s, " | {:.2}", 100.0 * r.column_average(b));
            }
            let _ = writeln!(s, " | {:.2}", 100.0 * r.average());
        }
        s
    }
}

/// Trains and evaluates one model per value at α = 0.3.
pub fn run_sweep(cfg: &RunConfig, axis: SweepAxis, values: &[usize], mode: ExecMode) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::Input("sweep needs at least one value".into()));
    }
    let mut base = cfg.clone();
    base.eval_alphas = vec![0.3];
    let train_split = base.train_split.clone();
    let test_split = base.test_split.clone();
    let train = resolve_split(&mut base, &train_split, mode)?;
    let test = resolve_split(&mut base, &test_split, mode)?;
    let rows = par::map(mode, values, |_, &v| -> Result<(usize, EvalReport)> {
        let mut c = base.clone();
        axis.apply(&mut c.model, v);
        let out = train_model(&c, &train, None, mode)?;
        Ok((v, evaluate_model(&out.model, &c, &test, &test_split, mode)?))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { axis, rows })
}

pub const PARAMS_REFERENCE: &str = "4.21M learnable / 7B frozen (not reproduced)";

pub fn run_params(cfg: &RunConfig) -> Result<(ParamCounts, String)> {
    let model = ActionModel::new(cfg.model.clone())?;
    let c = model.param_counts();
    let text = format!(
        "config_hash={}\nlearnable={}\nfrozen={}\nreference={PARAMS_REFERENCE}\n",
        cfg.model.hash(),
        c.learnable,
        c.frozen
    );
    Ok((c, text))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorkit::ParamId;

    fn toy_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig::tiny(3);
        cfg.model.class_names = SynthGrammar::class_names(3);
        cfg.epochs = 2;
        cfg.synth_train_videos = 6;
        cfg.synth_test_videos = 2;
        cfg.synth_min_frames = 120;
        cfg.synth_max_frames = 160;
        cfg
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::from_rows(&[vec![1.0, -2.0]]), true);
        let frozen = store.add("f", Matrix::from_rows(&[vec![3.0]]), false);
        let mut g = Gradients::new(2);
        g.add(id, &Matrix::from_rows(&[vec![0.5, -4.0]]));
        g.add(frozen, &Matrix::from_rows(&[vec![1.0]]));
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-12);
        adam.step(&mut store, &g, 1.0);
        let w = store.value(id).data();
        assert!((w[0] - 0.9).abs() < 1e-9 && (w[1] + 1.9).abs() < 1e-9);
        assert_eq!(store.value(ParamId(1)).data(), &[3.0]);
    }

    #[test]
    fn validation_split_is_deterministic_and_disjoint() {
        let cfg = toy_cfg();
        let vids = synth_split(&cfg, "train").unwrap();
        let (a, b) = split_validation(&vids, 0.2, 5);
        let (c, d) = split_validation(&vids, 0.2, 5);
        assert_eq!(a, c);
        assert_eq!(b, d);
        assert_eq!(a.len() + b.len(), vids.len());
        assert!(b.iter().all(|v| !a.iter().any(|w| w.id == v.id)));
    }

    #[test]
    fn training_writes_artifacts_and_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = toy_cfg();
        cfg.freeze_audit = true;
        cfg.out_dir = dir.path().join("a");
        let a = run_train(&cfg, ExecMode::Parallel).unwrap();
        cfg.out_dir = dir.path().join("b");
        let b = run_train(&cfg, ExecMode::Sequential).unwrap();
        let fa = fs::read(a.final_path.unwrap()).unwrap();
        let fb = fs::read(b.final_path.unwrap()).unwrap();
        assert_eq!(fa, fb);
        let log = fs::read_to_string(dir.path().join("a/train_log.txt")).unwrap();
        assert!(log.contains("freeze_audit=pass"));
        assert_eq!(a.epoch_losses.len(), 2);
    }

    #[test]
    fn sweep_axis_parsing() {
        assert_eq!("N".parse::<SweepAxis>().unwrap(), SweepAxis::Queries);
        assert_eq!("L_MA".parse::<SweepAxis>().unwrap(), SweepAxis::TuneDim);
        assert!(matches!("depth".parse::<SweepAxis>(), Err(Error::Input(_))));
    }

    #[test]
    fn params_report_has_reference_line() {
        let (c, text) = run_params(&toy_cfg()).unwrap();
        assert!(c.learnable > 0 && c.frozen > 0);
        assert!(text.contains(PARAMS_REFERENCE));
    }
}
