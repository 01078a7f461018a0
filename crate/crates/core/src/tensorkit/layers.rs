use rand::Rng;

use crate::error::{Error, Result};
use crate::tensorkit::{Graph, Matrix, ParamId, ParamStore, Var};

/// Normal init with std `gain / sqrt(fan_in)`.
pub fn init_weight<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize, gain: f64) -> Matrix {
    Matrix::randn(fan_in, fan_out, gain / (fan_in.max(1) as f64).sqrt(), rng)
}

/// `x·W (+ b)` on the tape.
pub fn linear(g: &mut Graph, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
    let wv = g.param(w);
    let xw = g.matmul(x, wv)?;
    match b {
        Some(b) => {
            let bv = g.param(b);
            g.add_row(xw, bv)
        }
        None => Ok(xw),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmsNormParams {
    pub scale: ParamId,
    pub eps: f64,
}

impl RmsNormParams {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, eps: f64, trainable: bool) -> Self {
        let scale = store.add(name, Matrix::filled(1, width, 1.0), trainable);
        RmsNormParams { scale, eps }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let width = g.store().value(self.scale).cols();
        if g.shape(x).1 != width {
            return Err(Error::dim(format!(
                "rms_norm width {} on input of width {}",
                width,
                g.shape(x).1
            )));
        }
        let normed = g.rms_normalize(x, self.eps);
        let scale = g.param(self.scale);
        g.mul_row(normed, scale)
    }
}

/// Two-layer position-wise network with a SiLU in between.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FfnWeights {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnWeights {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        hidden: usize,
        trainable: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        FfnWeights {
            w1: store.add(format!("{prefix}.w1"), init_weight(rng, width, hidden, gain), trainable),
            b1: store.add(format!("{prefix}.b1"), Matrix::zeros(1, hidden), trainable),
            w2: store.add(format!("{prefix}.w2"), init_weight(rng, hidden, width, gain), trainable),
            b2: store.add(format!("{prefix}.b2"), Matrix::zeros(1, width), trainable),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = linear(g, x, self.w1, Some(self.b1))?;
        let h = g.silu(h);
        linear(g, h, self.w2, Some(self.b2))
    }
}

/// Per-head query/key/value projections plus the shared output map. Bias-free.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub query: Vec<ParamId>,
    pub key: Vec<ParamId>,
    pub value: Vec<ParamId>,
    pub output: ParamId,
    pub heads: usize,
    pub width: usize,
}

impl AttentionWeights {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        heads: usize,
        trainable: bool,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::dim(format!(
                "attention width {width} not divisible by {heads} heads"
            )));
        }
        let head_dim = width / heads;
        let mut proj = |kind: &str| -> Vec<ParamId> {
            (0..heads)
                .map(|i| {
                    store.add(
                        format!("{prefix}.{kind}.{i}"),
                        init_weight(rng, width, head_dim, gain),
                        trainable,
                    )
                })
                .collect()
        };
        let query = proj("q");
        let key = proj("k");
        let value = proj("v");
        let output = store.add(format!("{prefix}.o"), init_weight(rng, width, width, gain), trainable);
        Ok(AttentionWeights {
            query,
            key,
            value,
            output,
            heads,
            width,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Softmax temperature `sqrt(D/h)`.
    pub fn scale(&self) -> f64 {
        (self.head_dim() as f64).sqrt()
    }

    /// Multi-head attention of queries from `x` over keys/values from `y`.
    pub fn forward(&self, g: &mut Graph, x: Var, y: Var, causal: bool) -> Result<Var> {
        let (n, dx) = g.shape(x);
        let (m, dy) = g.shape(y);
        if dx != self.width || dy != self.width {
            return Err(Error::dim(format!(
                "attention of width {} got inputs of width {dx} and {dy}",
                self.width
            )));
        }
        if causal && n != m {
            return Err(Error::dim("causal attention needs equal query and key lengths"));
        }
        let inv_scale = 1.0 / self.scale();
        let mut heads = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let q = linear(g, x, self.query[i], None)?;
            let k = linear(g, y, self.key[i], None)?;
            let v = linear(g, y, self.value[i], None)?;
            let scores = g.matmul_t(q, k)?;
            let scores = g.scale(scores, inv_scale);
            let attn = g.softmax_rows(scores, causal);
            heads.push(g.matmul(attn, v)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        linear(g, cat, self.output, None)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn set_identity(store: &mut ParamStore, w: &AttentionWeights) {
        for ids in [&w.query, &w.key, &w.value] {
            for &id in ids.iter() {
                store.set_value(id, Matrix::identity(w.width)).unwrap();
            }
        }
        store.set_value(w.output, Matrix::identity(w.width)).unwrap();
    }

    #[test]
    fn single_token_identity_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let w = AttentionWeights::new(&mut store, "a", 3, 1, true, 1.0, &mut rng).unwrap();
        set_identity(&mut store, &w);
        let mut g = Graph::new(&store);
        let x = g.constant(Matrix::from_rows(&[[0.3, -1.0, 2.0]]));
        let out = w.forward(&mut g, x, x, false).unwrap();
        assert!(g.value(out).max_abs_diff(&Matrix::from_rows(&[[0.3, -1.0, 2.0]])) < 1e-15);
    }

    #[test]
    fn duplicate_keys_average_to_same_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let w = AttentionWeights::new(&mut store, "a", 2, 1, true, 1.0, &mut rng).unwrap();
        set_identity(&mut store, &w);
        let mut g = Graph::new(&store);
        let x = g.constant(Matrix::from_rows(&[[1.0, 5.0]]));
        let y = g.constant(Matrix::from_rows(&[[0.5, -0.5], [0.5, -0.5]]));
        let out = w.forward(&mut g, x, y, false).unwrap();
        assert!(g.value(out).max_abs_diff(&Matrix::from_rows(&[[0.5, -0.5]])) < 1e-15);
    }

    #[test]
    fn heads_must_divide_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        assert!(AttentionWeights::new(&mut store, "a", 5, 2, true, 1.0, &mut rng).is_err());
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let w = AttentionWeights::new(&mut store, "a", 4, 2, true, 1.0, &mut rng).unwrap();
        let mut g = Graph::new(&store);
        let x = g.constant(Matrix::zeros(1, 3));
        assert!(matches!(w.forward(&mut g, x, x, false), Err(Error::Dimension(_))));
    }
}
