//! Multimodal assembly, the action-tuning bottleneck, the frozen transformer
//! stand-in, and the linear output heads.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensorkit::{
    init_weight, linear, AttentionWeights, FfnWeights, Graph, Matrix, ParamId, ParamStore, RmsNormParams, Var,
};

/// Intermediate features of one forward pass, by stage. Stream order is text, vision, query.
#[derive(Debug, Clone, Copy)]
pub struct ModalityBundle {
    pub text: Var,
    pub vision_adapted: Var,
    pub query_adapted: Var,
    pub down: [Var; 3],
    pub up: [Var; 3],
    pub fused: Var,
}

/// `RMSNorm(Cat(up_T + F_T, up_V + F_V, up_Q + F_Q))`, rows in text → vision → query order.
pub fn assemble(g: &mut Graph, residual: [Var; 3], up: [Var; 3], norm: &RmsNormParams) -> Result<Var> {
    let mut parts = [residual[0]; 3];
    for i in 0..3 {
        if g.shape(residual[i]) != g.shape(up[i]) {
            return Err(Error::dim(format!(
                "residual {:?} and up-projection {:?} differ in stream {i}",
                g.shape(residual[i]),
                g.shape(up[i])
            )));
        }
        parts[i] = g.add(up[i], residual[i])?;
    }
    let cat = g.concat_rows(&parts)?;
    norm.forward(g, cat)
}

/// Position-wise bottleneck `W_C1·Dropout(W_C0·F + b_C0) + b_C1`, realized as a
/// 1-D convolution over the sequence (kernel 1 by default).
#[derive(Debug, Clone, PartialEq)]
pub struct TuningWeights {
    pub w0: Vec<ParamId>,
    pub b0: ParamId,
    pub w1: Vec<ParamId>,
    pub b1: ParamId,
    pub dropout: f64,
    pub residual: bool,
}

impl TuningWeights {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        width: usize,
        bottleneck: usize,
        kernel: usize,
        dropout: f64,
        residual: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Input(format!("tuning kernel must be odd, got {kernel}")));
        }
        let gain0 = 1.0 / (kernel as f64).sqrt();
        let w0 = (0..kernel)
            .map(|j| store.add(format!("tuning.w0.{j}"), init_weight(rng, width, bottleneck, gain0), true))
            .collect();
        let b0 = store.add("tuning.b0", Matrix::zeros(1, bottleneck), true);
        let w1 = (0..kernel)
            .map(|j| store.add(format!("tuning.w1.{j}"), init_weight(rng, bottleneck, width, gain0), true))
            .collect();
        let b1 = store.add("tuning.b1", Matrix::zeros(1, width), true);
        Ok(TuningWeights {
            w0,
            b0,
            w1,
            b1,
            dropout,
            residual,
        })
    }
}

fn conv1d(g: &mut Graph, x: Var, taps: &[ParamId], bias: ParamId) -> Result<Var> {
    let half = (taps.len() / 2) as isize;
    let mut acc: Option<Var> = None;
    for (j, &w) in taps.iter().enumerate() {
        let offset = half - j as isize;
        let src = if offset == 0 { x } else { g.shift_rows(x, offset) };
        let term = linear(g, src, w, None)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    let b = g.param(bias);
    g.add_row(acc.expect("at least one tap"), b)
}

/// Applies the tuning bottleneck. Dropout is active only when `rng` is given (train mode).
pub fn action_tuning<R: Rng + ?Sized>(g: &mut Graph, fused: Var, t: &TuningWeights, rng: Option<&mut R>) -> Result<Var> {
    let mut h = conv1d(g, fused, &t.w0, t.b0)?;
    if let Some(rng) = rng {
        if t.dropout > 0.0 {
            let (rows, cols) = g.shape(h);
            let keep = 1.0 - t.dropout;
            let mut mask = Matrix::zeros(rows, cols);
            for v in mask.data_mut() {
                *v = if keep > 0.0 && rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 };
            }
            h = g.mul_const(h, mask)?;
        }
    }
    let out = conv1d(g, h, &t.w1, t.b1)?;
    if t.residual {
        g.add(out, fused)
    } else {
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StubLayer {
    pub attn_norm: RmsNormParams,
    pub attn: AttentionWeights,
    pub ffn_norm: RmsNormParams,
    pub ffn: FfnWeights,
}

/// Seeded, untrainable pre-norm causal transformer standing in for the language model.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenStub {
    pub layers: Vec<StubLayer>,
    pub width: usize,
}

impl FrozenStub {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        depth: usize,
        width: usize,
        heads: usize,
        ffn_dim: usize,
        eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let gain = 0.5;
        let mut layers = Vec::with_capacity(depth);
        for l in 0..depth {
            let prefix = format!("stub.{l}");
            layers.push(StubLayer {
                attn_norm: RmsNormParams::new(store, &format!("{prefix}.attn_norm"), width, eps, false),
                attn: AttentionWeights::new(store, &format!("{prefix}.attn"), width, heads, false, gain, rng)?,
                ffn_norm: RmsNormParams::new(store, &format!("{prefix}.ffn_norm"), width, eps, false),
                ffn: FfnWeights::new(store, &format!("{prefix}.ffn"), width, ffn_dim, false, gain, rng),
            });
        }
        Ok(FrozenStub { layers, width })
    }
}

/// `h += attn(norm(h))` (causal), then `h += ffn(norm(h))`, per layer.
pub fn stub_forward(g: &mut Graph, x: Var, stub: &FrozenStub) -> Result<Var> {
    if g.shape(x).1 != stub.width {
        return Err(Error::dim(format!(
            "backbone width is {}, input has width {}",
            stub.width,
            g.shape(x).1
        )));
    }
    let mut h = x;
    for layer in &stub.layers {
        let n = layer.attn_norm.forward(g, h)?;
        let a = layer.attn.forward(g, n, n, true)?;
        h = g.add(h, a)?;
        let n = layer.ffn_norm.forward(g, h)?;
        let f = layer.ffn.forward(g, n)?;
        h = g.add(h, f)?;
    }
    Ok(h)
}

/// Linear past classifiers and future predictors. Bias-free.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Heads {
    pub past_text: ParamId,
    pub past_vis: ParamId,
    pub future_class: ParamId,
    pub future_dur: ParamId,
}

impl Heads {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        width: usize,
        num_classes: usize,
        shared_past: bool,
        rng: &mut R,
    ) -> Self {
        let past_text = store.add("heads.past_text", init_weight(rng, width, num_classes, 1.0), true);
        let past_vis = if shared_past {
            past_text
        } else {
            store.add("heads.past_vis", init_weight(rng, width, num_classes, 1.0), true)
        };
        Heads {
            past_text,
            past_vis,
            future_class: store.add("heads.future_class", init_weight(rng, width, num_classes + 1, 1.0), true),
            future_dur: store.add("heads.future_dur", init_weight(rng, width, 1, 1.0), true),
        }
    }
}

/// Head outputs on the tape.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutputs {
    /// θ₀×K
    pub past_text: Var,
    /// θ₀×K
    pub past_vis: Var,
    /// N×(K+1)
    pub future_class: Var,
    /// N×1, nonnegative
    pub durations: Var,
}

/// Text head on rows `[0,θ₀)`, vision head on `[θ₀,2θ₀)`, future heads on the last `N` rows.
pub fn apply_heads(g: &mut Graph, hidden: Var, heads: &Heads, observed: usize, queries: usize) -> Result<HeadOutputs> {
    let rows = g.shape(hidden).0;
    if rows != 2 * observed + queries {
        return Err(Error::dim(format!(
            "hidden states have {rows} rows, expected 2·{observed}+{queries}"
        )));
    }
    let text = g.slice_rows(hidden, 0, observed)?;
    let vis = g.slice_rows(hidden, observed, observed)?;
    let fut = g.slice_rows(hidden, 2 * observed, queries)?;
    let past_text = linear(g, text, heads.past_text, None)?;
    let past_vis = linear(g, vis, heads.past_vis, None)?;
    let future_class = linear(g, fut, heads.future_class, None)?;
    let raw = linear(g, fut, heads.future_dur, None)?;
    let durations = g.softplus(raw);
    Ok(HeadOutputs {
        past_text,
        past_vis,
        future_class,
        durations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub learnable: usize,
    pub frozen: usize,
}

/// Scalar entries partitioned by the trainable flag.
pub fn count_params(store: &ParamStore) -> ParamCounts {
    let (learnable, frozen) = store.count();
    ParamCounts { learnable, frozen }
}
