//! Supervision targets and the four-term training loss.
//!
//! Positions follow the 1-based convention of the None index `φ`: the class
//! loss counts queries `i ≤ φ` (the None query included), the duration loss
//! only `i < φ`.

use crate::backbone::HeadOutputs;
use crate::error::{Error, Result};
use crate::tensorkit::{Graph, Matrix, ParamStore, Var};

/// Per-sample supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetPack {
    /// θ₀×K one-hot past labels, shared by both past heads
    pub past: Matrix,
    /// N×(K+1) one-hot future classes; rows after φ are None padding
    pub future: Matrix,
    /// N durations as fractions of the horizon; zero from φ on
    pub durations: Vec<f64>,
    /// 1-based position of the None query, N+1 when every query holds a segment
    pub none_pos: usize,
}

impl TargetPack {
    pub fn num_queries(&self) -> usize {
        self.future.rows()
    }

    /// Future class ids for the queries before φ.
    pub fn future_classes(&self) -> Vec<usize> {
        (0..self.none_pos.saturating_sub(1).min(self.future.rows()))
            .map(|r| self.future.argmax_row(r))
            .collect()
    }
}

fn one_hot_rows(ids: &[usize], width: usize) -> Matrix {
    let mut m = Matrix::zeros(ids.len(), width);
    for (r, &c) in ids.iter().enumerate() {
        m.set(r, c, 1.0);
    }
    m
}

/// Builds targets from clean past labels and the run-length encoded horizon.
pub fn build_targets(
    past: &[usize],
    segments: &[(usize, usize)],
    num_queries: usize,
    horizon: usize,
    num_classes: usize,
) -> Result<TargetPack> {
    if horizon == 0 {
        return Err(Error::Input("prediction horizon must be at least one frame".into()));
    }
    if num_queries == 0 {
        return Err(Error::Input("need at least one query".into()));
    }
    let covered: usize = segments.iter().map(|s| s.1).sum();
    if covered != horizon {
        return Err(Error::Input(format!(
            "segments cover {covered} frames but the horizon is {horizon}"
        )));
    }
    if let Some(&c) = past.iter().chain(segments.iter().map(|(c, _)| c)).find(|&&c| c >= num_classes) {
        return Err(Error::Input(format!("class id {c} out of range for {num_classes} classes")));
    }

    let none_id = num_classes;
    let kept = segments.len().min(num_queries);
    let kept_frames: usize = segments[..kept].iter().map(|s| s.1).sum();
    let mut classes = vec![none_id; num_queries];
    let mut durations = vec![0.0; num_queries];
    for (i, &(c, len)) in segments[..kept].iter().enumerate() {
        classes[i] = c;
        durations[i] = len as f64 / kept_frames as f64;
    }
    Ok(TargetPack {
        past: one_hot_rows(past, num_classes),
        future: one_hot_rows(&classes, num_classes + 1),
        durations,
        none_pos: kept + 1,
    })
}

/// Reduction applied to each loss term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LossOptions {
    /// divide each term by its number of counted positions
    pub mean: bool,
    /// include the text segmentation term
    pub text: bool,
}

impl LossOptions {
    pub fn summed() -> Self {
        LossOptions { mean: false, text: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub text: f64,
    pub vision: f64,
    pub class: f64,
    pub duration: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.text, self.vision, self.class, self.duration, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn class_mask(rows: usize, none_pos: usize) -> Vec<bool> {
    (0..rows).map(|r| r + 1 <= none_pos).collect()
}

fn duration_mask(rows: usize, none_pos: usize) -> Vec<bool> {
    (0..rows).map(|r| r + 1 < none_pos).collect()
}

fn maybe_mean(g: &mut Graph, v: Var, count: usize, mean: bool) -> Var {
    if mean && count > 0 {
        g.scale(v, 1.0 / count as f64)
    } else {
        v
    }
}

/// Segmentation cross-entropy on the tape.
pub fn seg_loss_var(g: &mut Graph, logits: Var, past: &Matrix, mean: bool) -> Result<Var> {
    let rows = past.rows();
    let v = g.cross_entropy(logits, past.clone(), vec![true; rows])?;
    Ok(maybe_mean(g, v, rows, mean))
}

pub fn class_loss_var(g: &mut Graph, logits: Var, future: &Matrix, none_pos: usize, mean: bool) -> Result<Var> {
    let mask = class_mask(future.rows(), none_pos);
    let count = mask.iter().filter(|m| **m).count();
    let v = g.cross_entropy(logits, future.clone(), mask)?;
    Ok(maybe_mean(g, v, count, mean))
}

pub fn dur_loss_var(g: &mut Graph, pred: Var, durations: &[f64], none_pos: usize, mean: bool) -> Result<Var> {
    let (rows, cols) = g.shape(pred);
    let target = Matrix::from_vec(rows, cols, durations.to_vec())?;
    let mask = duration_mask(durations.len(), none_pos);
    let count = mask.iter().filter(|m| **m).count();
    let v = g.squared_error(pred, target, mask)?;
    Ok(maybe_mean(g, v, count, mean))
}

/// Loss nodes on the tape; `total` is the unweighted sum.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub text: Option<Var>,
    pub vision: Var,
    pub class: Var,
    pub duration: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |x: Var| g.value(x).get(0, 0);
        LossBreakdown {
            text: self.text.map(v).unwrap_or(0.0),
            vision: v(self.vision),
            class: v(self.class),
            duration: v(self.duration),
            total: v(self.total),
        }
    }
}

pub fn total_loss_var(g: &mut Graph, out: &HeadOutputs, targets: &TargetPack, opts: LossOptions) -> Result<LossVars> {
    let text = if opts.text {
        Some(seg_loss_var(g, out.past_text, &targets.past, opts.mean)?)
    } else {
        None
    };
    let vision = seg_loss_var(g, out.past_vis, &targets.past, opts.mean)?;
    let class = class_loss_var(g, out.future_class, &targets.future, targets.none_pos, opts.mean)?;
    let duration = dur_loss_var(g, out.durations, &targets.durations, targets.none_pos, opts.mean)?;
    let mut parts = vec![vision, class, duration];
    if let Some(t) = text {
        parts.insert(0, t);
    }
    let total = g.sum_scalars(&parts)?;
    Ok(LossVars {
        text,
        vision,
        class,
        duration,
        total,
    })
}

fn scalar_of(f: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<f64> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let v = f(&mut g)?;
    Ok(g.value(v).get(0, 0))
}

/// `−Σᵢ Σⱼ S_ij log softmax(Ŝ)_ij`.
pub fn seg_loss(logits: &Matrix, past: &Matrix) -> Result<f64> {
    scalar_of(|g| {
        let l = g.constant(logits.clone());
        seg_loss_var(g, l, past, false)
    })
}

/// Cross-entropy summed over query positions `i ≤ φ`.
pub fn class_loss(logits: &Matrix, future: &Matrix, none_pos: usize) -> Result<f64> {
    scalar_of(|g| {
        let l = g.constant(logits.clone());
        class_loss_var(g, l, future, none_pos, false)
    })
}

/// `Σ_{i<φ} (D_i − D̂_i)²`.
pub fn dur_loss(pred: &[f64], durations: &[f64], none_pos: usize) -> Result<f64> {
    if pred.len() != durations.len() {
        return Err(Error::dim(format!(
            "{} predicted durations for {} targets",
            pred.len(),
            durations.len()
        )));
    }
    scalar_of(|g| {
        let p = g.constant(Matrix::from_vec(pred.len(), 1, pred.to_vec())?);
        dur_loss_var(g, p, durations, none_pos, false)
    })
}

/// Plain-matrix head outputs, as returned by an eval-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub past_text: Matrix,
    pub past_vis: Matrix,
    pub future_class: Matrix,
    pub durations: Vec<f64>,
}

pub fn total_loss(pred: &Prediction, targets: &TargetPack, opts: LossOptions) -> Result<LossBreakdown> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let out = HeadOutputs {
        past_text: g.constant(pred.past_text.clone()),
        past_vis: g.constant(pred.past_vis.clone()),
        future_class: g.constant(pred.future_class.clone()),
        durations: g.constant(Matrix::from_vec(pred.durations.len(), 1, pred.durations.clone())?),
    };
    let vars = total_loss_var(&mut g, &out, targets, opts)?;
    Ok(vars.breakdown(&g))
}
