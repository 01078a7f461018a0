//! Dataset ingestion, observation sampling, label noise, and a deterministic
//! synthetic corpus.
//!
//! On-disk layout of a dataset root:
//!
//! ```text
//! mapping.txt              "id name" per line, ids 0..K-1
//! groundTruth/<id>.txt     one action name per frame
//! features/<id>.feat       "AFV1", u32 rows, u32 cols, rows·cols f32 (little-endian)
//! bundles/<split>.txt      one video id per line
//! predicted/<id>.txt       optional, same shape as groundTruth
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::par::{self, ExecMode};
use crate::tensorkit::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub gt_labels: Vec<usize>,
    /// T×L_D
    pub features: Matrix,
    pub predicted_labels: Option<Vec<usize>>,
}

impl VideoRecord {
    pub fn num_frames(&self) -> usize {
        self.gt_labels.len()
    }

    pub fn check(&self, num_classes: usize) -> Result<()> {
        let t = self.gt_labels.len();
        if t == 0 {
            return Err(Error::Consistency(format!("video {} has no frames", self.id)));
        }
        if self.features.rows() != t {
            return Err(Error::Consistency(format!(
                "video {}: {} label frames but {} feature rows",
                self.id,
                t,
                self.features.rows()
            )));
        }
        if let Some(p) = &self.predicted_labels {
            if p.len() != t {
                return Err(Error::Consistency(format!(
                    "video {}: {} predicted labels for {t} frames",
                    self.id,
                    p.len()
                )));
            }
        }
        let bad = self
            .gt_labels
            .iter()
            .chain(self.predicted_labels.iter().flatten())
            .find(|&&c| c >= num_classes);
        if let Some(c) = bad {
            return Err(Error::Consistency(format!(
                "video {}: label {c} outside {num_classes} classes",
                self.id
            )));
        }
        Ok(())
    }
}

/// Paths that make up one split.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetLayout {
    pub mapping: PathBuf,
    pub bundle: PathBuf,
    pub ground_truth: PathBuf,
    pub features: PathBuf,
    pub predicted: PathBuf,
}

impl DatasetLayout {
    pub fn standard(root: &Path, split: &str) -> Self {
        DatasetLayout {
            mapping: root.join("mapping.txt"),
            bundle: root.join("bundles").join(format!("{split}.txt")),
            ground_truth: root.join("groundTruth"),
            features: root.join("features"),
            predicted: root.join("predicted"),
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(file: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Parses `mapping.txt` into class names ordered by id.
pub fn read_mapping(path: &Path) -> Result<Vec<String>> {
    let text = read_text(path)?;
    let mut entries: Vec<(usize, String, usize)> = Vec::new();
    let mut ids = HashMap::new();
    let mut names = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let (id, name) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| parse_err(path, i + 1, format!("expected \"id name\", got {line:?}")))?;
        let id: usize = id
            .parse()
            .map_err(|_| parse_err(path, i + 1, format!("bad class id {id:?}")))?;
        let name = name.trim().to_string();
        if name.is_empty() || name.contains(char::is_whitespace) || name.contains(',') {
            return Err(parse_err(path, i + 1, format!("bad action name {name:?}")));
        }
        if ids.insert(id, i + 1).is_some() {
            return Err(parse_err(path, i + 1, format!("duplicate class id {id}")));
        }
        if names.insert(name.clone(), i + 1).is_some() {
            return Err(parse_err(path, i + 1, format!("duplicate action name {name}")));
        }
        entries.push((id, name, i + 1));
    }
    entries.sort_by_key(|e| e.0);
    for (expect, (id, _, line)) in entries.iter().enumerate() {
        if *id != expect {
            return Err(parse_err(path, *line, format!("class ids must be dense from 0, missing {expect}")));
        }
    }
    if entries.is_empty() {
        return Err(parse_err(path, 0, "mapping has no classes"));
    }
    Ok(entries.into_iter().map(|e| e.1).collect())
}

fn read_label_file(path: &Path, ids: &HashMap<&str, usize>) -> Result<Vec<usize>> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let name = l.trim();
            ids.get(name)
                .copied()
                .ok_or_else(|| parse_err(path, i + 1, format!("unknown action name {name:?}")))
        })
        .collect()
}

const FEATURE_MAGIC: &[u8; 4] = b"AFV1";

pub fn write_features(path: &Path, m: &Matrix) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + m.len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
        return Err(parse_err(path, 0, "missing AFV1 header"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != rows * cols * 4 {
        return Err(parse_err(
            path,
            0,
            format!("{rows}x{cols} header but {} payload bytes", body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// Loads every video listed in the bundle file. Returns class names and records.
pub fn load_split(layout: &DatasetLayout, mode: ExecMode) -> Result<(Vec<String>, Vec<VideoRecord>)> {
    let classes = read_mapping(&layout.mapping)?;
    let ids: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let bundle = read_text(&layout.bundle)?;
    let video_ids: Vec<String> = bundle
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    let loaded = par::map(mode, &video_ids, |_, id| -> Result<VideoRecord> {
        let gt_labels = read_label_file(&layout.ground_truth.join(format!("{id}.txt")), &ids)?;
        let features = read_features(&layout.features.join(format!("{id}.feat")))?;
        let pred_path = layout.predicted.join(format!("{id}.txt"));
        let predicted_labels = if pred_path.exists() {
            Some(read_label_file(&pred_path, &ids)?)
        } else {
            None
        };
        let rec = VideoRecord {
            id: id.clone(),
            gt_labels,
            features,
            predicted_labels,
        };
        rec.check(classes.len())?;
        Ok(rec)
    });
    let videos = loaded.into_iter().collect::<Result<Vec<_>>>()?;
    Ok((classes, videos))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_labels(path: &Path, labels: &[usize], classes: &[String]) -> Result<()> {
    let mut text = String::with_capacity(labels.len() * 8);
    for &l in labels {
        text.push_str(&classes[l]);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the mapping (if absent or identical), per-video files, and the bundle.
pub fn write_split(root: &Path, split: &str, classes: &[String], videos: &[VideoRecord]) -> Result<()> {
    let layout = DatasetLayout::standard(root, split);
    for dir in [&layout.ground_truth, &layout.features] {
        create_dir(dir)?;
    }
    create_dir(layout.bundle.parent().expect("bundle dir"))?;
    let mapping: String = classes.iter().enumerate().map(|(i, n)| format!("{i} {n}\n")).collect();
    fs::write(&layout.mapping, mapping).map_err(|e| Error::io(&layout.mapping, e))?;
    let mut bundle = String::new();
    for v in videos {
        v.check(classes.len())?;
        write_labels(&layout.ground_truth.join(format!("{}.txt", v.id)), &v.gt_labels, classes)?;
        write_features(&layout.features.join(format!("{}.feat", v.id)), &v.features)?;
        if let Some(p) = &v.predicted_labels {
            create_dir(&layout.predicted)?;
            write_labels(&layout.predicted.join(format!("{}.txt", v.id)), p, classes)?;
        }
        bundle.push_str(&v.id);
        bundle.push('\n');
    }
    fs::write(&layout.bundle, bundle).map_err(|e| Error::io(&layout.bundle, e))
}

/// `⌊x⌋` with a small tolerance for ratios like 0.3·1000 landing just below an integer.
pub fn floor_frames(x: f64) -> usize {
    (x + 1e-9).floor().max(0.0) as usize
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationSpec {
    pub alpha: f64,
    pub beta: f64,
    pub sample_rate: usize,
    pub start: usize,
}

impl ObservationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0 && self.alpha + self.beta <= 1.0 + 1e-12) {
            return Err(Error::Input(format!(
                "need 0 < α, 0 < β, α+β ≤ 1; got α={} β={}",
                self.alpha, self.beta
            )));
        }
        if self.sample_rate == 0 || self.start >= self.sample_rate {
            return Err(Error::Input(format!(
                "start frame {} must lie in [0, {})",
                self.start, self.sample_rate
            )));
        }
        Ok(())
    }

    /// θ₀ = ⌊αT/μ₀⌋.
    pub fn observed_count(&self, frames: usize) -> usize {
        floor_frames(self.alpha * frames as f64 / self.sample_rate as f64)
    }

    /// First unobserved frame, ⌊αT⌋.
    pub fn observation_end(&self, frames: usize) -> usize {
        floor_frames(self.alpha * frames as f64)
    }

    /// Prediction horizon in frames, ⌊βT⌋.
    pub fn horizon(&self, frames: usize) -> usize {
        floor_frames(self.beta * frames as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledObservation {
    /// θ₀×L_D
    pub features: Matrix,
    /// ground-truth labels at the sampled frames
    pub labels: Vec<usize>,
    /// predicted-track labels at the sampled frames, when the video has them
    pub predicted: Option<Vec<usize>>,
    pub frames: Vec<usize>,
    pub observation_end: usize,
    pub horizon: usize,
    /// run-length encoded ground truth over the horizon
    pub segments: Vec<(usize, usize)>,
}

impl SampledObservation {
    pub fn observed(&self) -> usize {
        self.labels.len()
    }
}

/// Samples frames `s, s+μ₀, …` (θ₀ of them) before ⌊αT⌋ and encodes the following ⌊βT⌋ frames.
pub fn sample_observation(v: &VideoRecord, spec: &ObservationSpec) -> Result<SampledObservation> {
    spec.validate()?;
    let t = v.num_frames();
    let observed = spec.observed_count(t);
    if observed == 0 {
        return Err(Error::EmptyObservation(format!(
            "video {} with {t} frames at α={} and sampling rate {} has no observed positions",
            v.id, spec.alpha, spec.sample_rate
        )));
    }
    let obs_end = spec.observation_end(t);
    let frames: Vec<usize> = (0..observed).map(|k| spec.start + k * spec.sample_rate).collect();
    debug_assert!(frames.iter().all(|&f| f < obs_end));
    let horizon = spec.horizon(t);
    if horizon == 0 {
        return Err(Error::Input(format!(
            "video {} with {t} frames has an empty horizon at β={}",
            v.id, spec.beta
        )));
    }
    let mut data = Vec::with_capacity(observed * v.features.cols());
    for &f in &frames {
        data.extend_from_slice(v.features.row(f));
    }
    Ok(SampledObservation {
        features: Matrix::from_vec(observed, v.features.cols(), data)?,
        labels: frames.iter().map(|&f| v.gt_labels[f]).collect(),
        predicted: v
            .predicted_labels
            .as_ref()
            .map(|p| frames.iter().map(|&f| p[f]).collect()),
        frames,
        observation_end: obs_end,
        horizon,
        segments: run_length(&v.gt_labels[obs_end..obs_end + horizon]),
    })
}

pub fn run_length(labels: &[usize]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &l in labels {
        match out.last_mut() {
            Some((c, n)) if *c == l => *n += 1,
            _ => out.push((l, 1)),
        }
    }
    out
}

pub fn expand_segments(segments: &[(usize, usize)]) -> Vec<usize> {
    segments.iter().flat_map(|&(c, n)| std::iter::repeat_n(c, n)).collect()
}

/// Replaces each label, with probability `p`, by a uniformly drawn different class.
pub fn inject_label_noise<R: Rng + ?Sized>(labels: &[usize], p: f64, num_classes: usize, rng: &mut R) -> Vec<usize> {
    labels
        .iter()
        .map(|&l| {
            if num_classes < 2 || p <= 0.0 || rng.random::<f64>() >= p {
                return l;
            }
            let r = rng.random_range(0..num_classes - 1);
            if r >= l {
                r + 1
            } else {
                r
            }
        })
        .collect()
}

/// Deterministic action grammar: a single-cycle successor table and per-class
/// segment lengths expressed as fractions of the video length.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthGrammar {
    pub next: Vec<usize>,
    /// (min, max) fraction of T per class
    pub duration: Vec<(f64, f64)>,
    /// K×L_D class-mean feature directions
    pub means: Matrix,
    pub noise_std: f64,
    pub seed: u64,
}

const VERBS: [&str; 8] = ["cut", "pour", "stir", "crack", "spoon", "fry", "take", "put"];
const NOUNS: [&str; 8] = ["egg", "milk", "bread", "butter", "pan", "bowl", "salt", "cheese"];

impl SynthGrammar {
    /// Human-readable, distinct class names.
    pub fn class_names(k: usize) -> Vec<String> {
        (0..k)
            .map(|i| {
                if i < 64 {
                    format!("{}_{}", VERBS[i % 8], NOUNS[(i / 8 + i) % 8])
                } else {
                    format!("step_{i}")
                }
            })
            .collect()
    }

    /// Fixed per-class durations drawn from `durations` (fractions of the video).
    pub fn new(num_classes: usize, feature_dim: usize, durations: (f64, f64), seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..num_classes).collect();
        order.shuffle(&mut rng);
        let mut next = vec![0; num_classes];
        for i in 0..num_classes {
            next[order[i]] = order[(i + 1) % num_classes];
        }
        let duration = (0..num_classes)
            .map(|_| {
                let f = if durations.1 > durations.0 {
                    rng.random_range(durations.0..durations.1)
                } else {
                    durations.0
                };
                (f, f)
            })
            .collect();
        SynthGrammar {
            next,
            duration,
            means: Matrix::randn(num_classes, feature_dim, 1.0, &mut rng),
            noise_std: 0.5,
            seed,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.next.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes();
        let mut seen = vec![false; k];
        for &n in &self.next {
            if n >= k || std::mem::replace(&mut seen[n], true) {
                return Err(Error::Input("successor table is not a permutation".into()));
            }
        }
        if self.duration.len() != k || self.means.rows() != k {
            return Err(Error::Input("grammar tables disagree on class count".into()));
        }
        if self.duration.iter().any(|&(lo, hi)| !(lo > 0.0 && lo <= hi)) {
            return Err(Error::Input("duration ranges must be positive and ordered".into()));
        }
        Ok(())
    }

    fn segment_len<R: Rng + ?Sized>(&self, class: usize, frames: usize, rng: &mut R) -> usize {
        let (lo, hi) = self.duration[class];
        let f = if hi > lo { rng.random_range(lo..hi) } else { lo };
        ((f * frames as f64).round() as usize).max(1)
    }
}

/// Generates `videos` records with lengths in `frames` (inclusive).
pub fn synth_corpus(
    grammar: &SynthGrammar,
    videos: usize,
    frames: (usize, usize),
    id_prefix: &str,
    seed: u64,
) -> Result<Vec<VideoRecord>> {
    grammar.validate()?;
    if frames.0 == 0 || frames.0 > frames.1 {
        return Err(Error::Input(format!("empty frame range {frames:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ grammar.seed.rotate_left(17));
    let k = grammar.num_classes();
    let width = grammar.means.cols();
    let mut out = Vec::with_capacity(videos);
    for v in 0..videos {
        let t = rng.random_range(frames.0..=frames.1);
        let mut class = rng.random_range(0..k);
        let mut labels = Vec::with_capacity(t);
        // videos open on a segment boundary, so the observation pins down the future
        let first = grammar.segment_len(class, t, &mut rng);
        labels.extend(std::iter::repeat_n(class, first));
        while labels.len() < t {
            class = grammar.next[class];
            let len = grammar.segment_len(class, t, &mut rng);
            labels.extend(std::iter::repeat_n(class, len));
        }
        labels.truncate(t);
        let mut features = Matrix::randn(t, width, grammar.noise_std, &mut rng);
        for (f, &c) in labels.iter().enumerate() {
            for (x, m) in features.row_mut(f).iter_mut().zip(grammar.means.row(c)) {
                // stored as f32 on disk; keep the in-memory copy identical
                *x = (*x + m) as f32 as f64;
            }
        }
        out.push(VideoRecord {
            id: format!("{id_prefix}{v:04}"),
            gt_labels: labels,
            features,
            predicted_labels: None,
        });
    }
    Ok(out)
}
