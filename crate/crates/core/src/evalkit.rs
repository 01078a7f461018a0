//! Frame-level decoding, mean-over-classes accuracy, the α×β evaluation grid,
//! and timeline rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TextSource;
use crate::datapipe::{floor_frames, inject_label_noise, run_length, sample_observation, ObservationSpec, SampledObservation, VideoRecord};
use crate::error::{Error, Result};
use crate::model::{ActionModel, Observation};
use crate::par::{self, ExecMode};
use crate::tensorkit::Matrix;

/// Class id per future frame; never contains the None class.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FrameSequence(pub Vec<usize>);

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn prefix(&self, n: usize) -> FrameSequence {
        FrameSequence(self.0[..n.min(self.0.len())].to_vec())
    }

    /// `(class, start, end)` runs with `end` exclusive.
    pub fn runs(&self) -> Vec<(usize, usize, usize)> {
        let mut start = 0;
        run_length(&self.0)
            .into_iter()
            .map(|(c, n)| {
                let r = (c, start, start + n);
                start += n;
                r
            })
            .collect()
    }
}

/// Expands query logits (N×(K+1), None last) and durations into `horizon` frames.
pub fn decode_predictions(logits: &Matrix, durations: &[f64], horizon: usize) -> Result<FrameSequence> {
    if horizon == 0 {
        return Err(Error::Input("decode horizon must be at least one frame".into()));
    }
    let (n, width) = logits.shape();
    if n == 0 || width < 2 || durations.len() != n {
        return Err(Error::dim(format!(
            "decode needs N×(K+1) logits with K ≥ 1 and N durations; got {n}x{width} and {}",
            durations.len()
        )));
    }
    let none_id = width - 1;
    let kept = (0..n).take_while(|&r| logits.argmax_row(r) != none_id).count();
    if kept == 0 {
        let row = &logits.row(0)[..none_id];
        let best = (0..none_id).fold(0, |b, c| if row[c] > row[b] { c } else { b });
        return Ok(FrameSequence(vec![best; horizon]));
    }
    let d: Vec<f64> = durations[..kept]
        .iter()
        .map(|&x| if x.is_finite() && x > 0.0 { x } else { 0.0 })
        .collect();
    let total: f64 = d.iter().sum();
    let weights: Vec<f64> = if total > 1e-12 {
        d.iter().map(|x| x / total).collect()
    } else {
        vec![1.0 / kept as f64; kept]
    };
    let mut frames = Vec::with_capacity(horizon);
    let mut cum = 0.0;
    for (i, w) in weights.iter().enumerate() {
        cum += w;
        let end = if i + 1 == kept {
            horizon
        } else {
            floor_frames(cum * horizon as f64).min(horizon)
        };
        let class = logits.argmax_row(i);
        while frames.len() < end {
            frames.push(class);
        }
    }
    Ok(FrameSequence(frames))
}

/// Per-class frame accuracy averaged over the classes present in `gt`.
pub fn moc(pred: &FrameSequence, gt: &FrameSequence) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Input(format!(
            "prediction has {} frames, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::Input("cannot score an empty horizon".into()));
    }
    let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&p, &g) in pred.0.iter().zip(&gt.0) {
        let e = per_class.entry(g).or_default();
        e.1 += 1;
        if p == g {
            e.0 += 1;
        }
    }
    let sum: f64 = per_class.values().map(|&(hit, n)| hit as f64 / n as f64).sum();
    Ok(sum / per_class.len() as f64)
}

/// Produces a frame-level forecast of `obs.horizon` frames for one observation.
pub trait Forecaster: Sync {
    fn forecast(&self, video: &VideoRecord, obs: &SampledObservation) -> Result<FrameSequence>;
}

/// Reads the answer off the ground truth; scores 1.0 everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleForecaster;

impl Forecaster for OracleForecaster {
    fn forecast(&self, video: &VideoRecord, obs: &SampledObservation) -> Result<FrameSequence> {
        Ok(FrameSequence(
            video.gt_labels[obs.observation_end..obs.observation_end + obs.horizon].to_vec(),
        ))
    }
}

/// Wraps a trained model. Text labels come from the chosen source, optionally corrupted.
#[derive(Debug, Clone, Copy)]
pub struct ModelForecaster<'m> {
    pub model: &'m ActionModel,
    pub text_source: TextSource,
    pub noise_p: f64,
    pub seed: u64,
}

impl<'m> ModelForecaster<'m> {
    pub fn new(model: &'m ActionModel) -> Self {
        ModelForecaster {
            model,
            text_source: TextSource::GroundTruth,
            noise_p: 0.0,
            seed: 0,
        }
    }

    pub fn observation(&self, video: &VideoRecord, obs: &SampledObservation) -> Result<Observation> {
        let labels = match self.text_source {
            TextSource::GroundTruth => obs.labels.clone(),
            TextSource::Predicted => obs.predicted.clone().ok_or_else(|| {
                Error::Input(format!("video {} has no predicted label track", video.id))
            })?,
        };
        let labels = if self.noise_p > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ stable_hash(&video.id) ^ obs.observed() as u64);
            inject_label_noise(&labels, self.noise_p, self.model.num_classes(), &mut rng)
        } else {
            labels
        };
        Ok(Observation {
            labels,
            features: obs.features.clone(),
        })
    }
}

impl Forecaster for ModelForecaster<'_> {
    fn forecast(&self, video: &VideoRecord, obs: &SampledObservation) -> Result<FrameSequence> {
        let pred = self.model.predict(&self.observation(video, obs)?)?;
        decode_predictions(&pred.future_class, &pred.durations, obs.horizon)
    }
}

/// FNV-1a, used to derive per-video seeds independent of iteration order.
pub fn stable_hash(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// every β is read as a prefix of one decode at this ratio
    pub decode_beta: f64,
    pub sample_rate: usize,
}

impl GridSpec {
    pub fn standard(sample_rate: usize) -> Self {
        GridSpec {
            alphas: vec![0.2, 0.3],
            betas: vec![0.1, 0.2, 0.3, 0.5],
            decode_beta: 0.5,
            sample_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// `cells[a][b]`, mean MoC over evaluated videos
    pub cells: Vec<Vec<f64>>,
    /// videos contributing to each cell
    pub counts: Vec<Vec<usize>>,
    /// per α, videos skipped because no frame could be observed
    pub skipped: Vec<usize>,
    pub meta: Vec<(String, String)>,
}

impl EvalReport {
    pub fn average(&self) -> f64 {
        let all: Vec<f64> = self.cells.iter().flatten().copied().collect();
        all.iter().sum::<f64>() / all.len() as f64
    }

    pub fn row_average(&self, a: usize) -> f64 {
        self.cells[a].iter().sum::<f64>() / self.cells[a].len() as f64
    }

    pub fn column_average(&self, b: usize) -> f64 {
        self.cells.iter().map(|r| r[b]).sum::<f64>() / self.cells.len() as f64
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.push((key.to_string(), value.to_string()));
        self
    }

    /// Header line plus one row: MoC in percent, β columns grouped by α, then the average.
    pub fn table(&self, label: &str) -> String {
        let mut head = String::from("method");
        let mut row = label.to_string();
        for (a, alpha) in self.alphas.iter().enumerate() {
            for (b, beta) in self.betas.iter().enumerate() {
                let _ = write!(head, " | a={alpha} b={beta}");
                let _ = write!(row, " | {:.2}", 100.0 * self.cells[a][b]);
            }
        }
        let _ = write!(head, " | Average");
        let _ = write!(row, " | {:.2}", 100.0 * self.average());
        format!("{head}\n{row}\n")
    }

    pub fn kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.meta {
            let _ = writeln!(s, "{k}={v}");
        }
        for (a, alpha) in self.alphas.iter().enumerate() {
            for (b, beta) in self.betas.iter().enumerate() {
                let _ = writeln!(s, "moc.a{alpha}.b{beta}={:.6}", self.cells[a][b]);
                let _ = writeln!(s, "videos.a{alpha}.b{beta}={}", self.counts[a][b]);
            }
            let _ = writeln!(s, "skipped.a{alpha}={}", self.skipped[a]);
        }
        let _ = writeln!(s, "moc.average={:.6}", self.average());
        s
    }

    pub fn render(&self, label: &str) -> String {
        format!("{}\n{}", self.table(label), self.kv())
    }

    pub fn write(&self, path: &Path, label: &str) -> Result<()> {
        fs::write(path, self.render(label)).map_err(|e| Error::io(path, e))
    }
}

/// Per-video MoC for every β, or `None` when nothing is observable at this α.
fn video_scores(f: &dyn Forecaster, v: &VideoRecord, alpha: f64, grid: &GridSpec) -> Result<Option<Vec<Option<f64>>>> {
    let spec = ObservationSpec {
        alpha,
        beta: grid.decode_beta,
        sample_rate: grid.sample_rate,
        start: 0,
    };
    let obs = match sample_observation(v, &spec) {
        Ok(o) => o,
        Err(Error::EmptyObservation(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let pred = f.forecast(v, &obs)?;
    if pred.len() != obs.horizon {
        return Err(Error::Consistency(format!(
            "forecast for {} has {} frames, expected {}",
            v.id,
            pred.len(),
            obs.horizon
        )));
    }
    let t = v.num_frames();
    let scores = grid
        .betas
        .iter()
        .map(|&beta| {
            let h = floor_frames(beta * t as f64).min(obs.horizon);
            if h == 0 {
                return Ok(None);
            }
            let gt = FrameSequence(v.gt_labels[obs.observation_end..obs.observation_end + h].to_vec());
            moc(&pred.prefix(h), &gt).map(Some)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(scores))
}

/// Scores every video at every (α, β); cells are means over videos.
pub fn evaluate_grid(f: &dyn Forecaster, videos: &[VideoRecord], grid: &GridSpec, mode: ExecMode) -> Result<EvalReport> {
    if grid.alphas.is_empty() || grid.betas.is_empty() {
        return Err(Error::Input("evaluation grid needs at least one α and one β".into()));
    }
    if let Some(b) = grid.betas.iter().find(|&&b| b > grid.decode_beta + 1e-12) {
        return Err(Error::Input(format!("β={b} exceeds the decode ratio {}", grid.decode_beta)));
    }
    let per_video = par::map(mode, videos, |_, v| {
        grid.alphas
            .iter()
            .map(|&a| video_scores(f, v, a, grid))
            .collect::<Result<Vec<_>>>()
    });
    let (na, nb) = (grid.alphas.len(), grid.betas.len());
    let mut sums = vec![vec![0.0; nb]; na];
    let mut counts = vec![vec![0usize; nb]; na];
    let mut skipped = vec![0usize; na];
    for res in per_video {
        for (a, scores) in res?.into_iter().enumerate() {
            let Some(scores) = scores else {
                skipped[a] += 1;
                continue;
            };
            for (b, s) in scores.into_iter().enumerate() {
                if let Some(s) = s {
                    sums[a][b] += s;
                    counts[a][b] += 1;
                }
            }
        }
    }
    let mut cells = sums;
    for a in 0..na {
        for b in 0..nb {
            if counts[a][b] == 0 {
                return Err(Error::EmptyObservation(format!(
                    "no video could be scored at α={} β={}",
                    grid.alphas[a], grid.betas[b]
                )));
            }
            cells[a][b] /= counts[a][b] as f64;
        }
    }
    Ok(EvalReport {
        alphas: grid.alphas.clone(),
        betas: grid.betas.clone(),
        cells,
        counts,
        skipped,
        meta: vec![(
            "aggregation".into(),
            "classes_within_video_then_mean_over_videos".into(),
        )],
    })
}

fn color(class: usize) -> String {
    format!("hsl({},65%,55%)", (class * 137) % 360)
}

fn track_line(label: &str, seq: &FrameSequence, names: &[String]) -> String {
    let mut s = format!("{label}:");
    for (c, start, end) in seq.runs() {
        let name = names.get(c).map(String::as_str).unwrap_or("?");
        let _ = write!(s, " ({name},{start},{end})");
    }
    s
}

/// Writes `<stem>.txt` (one segment list per track) and `<stem>.svg` (one bar per segment).
pub fn emit_timeline(pred: &FrameSequence, gt: &FrameSequence, names: &[String], stem: &Path) -> Result<(PathBuf, PathBuf)> {
    if pred.len() != gt.len() {
        return Err(Error::Input(format!(
            "timeline tracks differ in length: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let txt = stem.with_extension("txt");
    let svg = stem.with_extension("svg");
    let text = format!("{}\n{}\n", track_line("pred", pred, names), track_line("gt", gt, names));
    fs::write(&txt, text).map_err(|e| Error::io(&txt, e))?;

    let width = 800.0;
    let scale = width / gt.len().max(1) as f64;
    let mut body = String::new();
    let _ = writeln!(
        body,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="70" font-family="monospace" font-size="10">"#,
        width + 40.0
    );
    for (row, (label, seq)) in [("pred", pred), ("gt", gt)].into_iter().enumerate() {
        let y = 5 + row * 32;
        let _ = writeln!(body, r#"<text x="0" y="{}">{label}</text>"#, y + 16);
        for (c, start, end) in seq.runs() {
            let name = names.get(c).map(String::as_str).unwrap_or("?");
            let _ = writeln!(
                body,
                r#"<rect x="{:.2}" y="{y}" width="{:.2}" height="24" fill="{}"><title>{name}</title></rect>"#,
                40.0 + start as f64 * scale,
                (end - start) as f64 * scale,
                color(c)
            );
        }
    }
    body.push_str("</svg>\n");
    fs::write(&svg, body).map_err(|e| Error::io(&svg, e))?;
    Ok((txt, svg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits_for(classes: &[usize], width: usize) -> Matrix {
        let mut m = Matrix::zeros(classes.len(), width);
        for (r, &c) in classes.iter().enumerate() {
            m.set(r, c, 5.0);
        }
        m
    }

    #[test]
    fn decode_examples() {
        let l = logits_for(&[0, 1, 2, 2], 3);
        assert_eq!(
            decode_predictions(&l, &[0.6, 0.4, 0.0, 0.0], 10).unwrap().0,
            [vec![0; 6], vec![1; 4]].concat()
        );
        let l = logits_for(&[0, 1, 0, 2], 3);
        let seq = decode_predictions(&l, &[0.33, 0.33, 0.34, 0.9], 10).unwrap();
        let lens: Vec<usize> = run_length(&seq.0).iter().map(|r| r.1).collect();
        assert_eq!(lens, vec![3, 3, 4]);
    }

    #[test]
    fn decode_fallbacks() {
        let mut l = logits_for(&[2, 0], 3);
        l.set(0, 1, 1.0);
        assert_eq!(decode_predictions(&l, &[0.5, 0.5], 7).unwrap().0, vec![1; 7]);
        let l = logits_for(&[0, 1], 3);
        let seq = decode_predictions(&l, &[0.0, -1.0], 4).unwrap();
        assert_eq!(seq.0, vec![0, 0, 1, 1]);
        assert!(decode_predictions(&l, &[0.5, 0.5], 0).is_err());
    }

    #[test]
    fn moc_examples() {
        let gt = FrameSequence(vec![0, 0, 1, 1]);
        assert!((moc(&FrameSequence(vec![0, 1, 1, 1]), &gt).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(moc(&gt, &gt).unwrap(), 1.0);
        assert!(moc(&FrameSequence(vec![0]), &gt).is_err());
        // classes never in gt do not enter the mean
        assert_eq!(moc(&FrameSequence(vec![5, 5]), &FrameSequence(vec![1, 1])).unwrap(), 0.0);
    }

    #[test]
    fn oracle_grid_is_perfect_and_shaped() {
        let mut labels = vec![0; 50];
        labels.extend(vec![1; 70]);
        labels.extend(vec![2; 80]);
        let v = VideoRecord {
            id: "v".into(),
            gt_labels: labels,
            features: Matrix::zeros(200, 2),
            predicted_labels: None,
        };
        let tiny = VideoRecord {
            id: "tiny".into(),
            gt_labels: vec![0; 20],
            features: Matrix::zeros(20, 2),
            predicted_labels: None,
        };
        let r = evaluate_grid(&OracleForecaster, &[v, tiny], &GridSpec::standard(8), ExecMode::Parallel).unwrap();
        assert_eq!((r.cells.len(), r.cells[0].len()), (2, 4));
        assert!(r.cells.iter().flatten().all(|&c| c == 1.0));
        assert_eq!(r.skipped, vec![1, 1]);
        assert_eq!(r.average(), 1.0);
        let table = r.table("oracle");
        assert_eq!(table.lines().count(), 2);
        assert!(r.kv().contains("skipped.a0.2=1"));
    }

    #[test]
    fn timeline_files() {
        let dir = tempfile::tempdir().unwrap();
        let names = vec!["cut".to_string(), "place".to_string()];
        let pred = FrameSequence(vec![0, 1, 1, 1]);
        let gt = FrameSequence(vec![0, 0, 1, 1]);
        let stem = dir.path().join("v1");
        let (txt, svg) = emit_timeline(&pred, &gt, &names, &stem).unwrap();
        let text = fs::read_to_string(&txt).unwrap();
        assert_eq!(text, "pred: (cut,0,1) (place,1,4)\ngt: (cut,0,2) (place,2,4)\n");
        let body = fs::read_to_string(&svg).unwrap();
        assert_eq!(body.matches("<rect").count(), 4);
        emit_timeline(&pred, &gt, &names, &stem).unwrap();
        assert_eq!(fs::read_to_string(&svg).unwrap(), body);
    }
}
