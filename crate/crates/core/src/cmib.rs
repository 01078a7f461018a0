//! Cross-modality interaction block.
//!
//! Each of the text, vision and query streams attends to itself and to the two
//! other streams; the three attention outputs are summed. The block wraps that
//! with positional encoding, pre-norm, residuals and a per-stream FFN.

use rand::Rng;

use crate::adapters::Modality;
use crate::error::{Error, Result};
use crate::tensorkit::{position_encoding, AttentionWeights, FfnWeights, Graph, ParamStore, RmsNormParams, Var};

/// Nine attention blocks indexed `[output stream][source stream]`; the diagonal is self-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct CmiaWeights {
    pub blocks: [[AttentionWeights; 3]; 3],
    pub width: usize,
}

impl CmiaWeights {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut rows = Vec::with_capacity(3);
        for out in Modality::ALL {
            let mut row = Vec::with_capacity(3);
            for src in Modality::ALL {
                row.push(AttentionWeights::new(
                    store,
                    &format!("{prefix}.{out}<-{src}"),
                    width,
                    heads,
                    true,
                    1.0,
                    rng,
                )?);
            }
            let [a, b, c]: [AttentionWeights; 3] = row.try_into().expect("three sources");
            rows.push([a, b, c]);
        }
        let [t, v, q]: [[AttentionWeights; 3]; 3] = rows.try_into().expect("three outputs");
        Ok(CmiaWeights {
            blocks: [t, v, q],
            width,
        })
    }

    pub fn block(&self, out: Modality, src: Modality) -> &AttentionWeights {
        &self.blocks[out.index()][src.index()]
    }
}

/// `O_m = MHA(I_m, I_m) + Σ_{s≠m} MHA(I_m, I_s)` for m ∈ {text, vision, query}.
pub fn cmia_forward(g: &mut Graph, inputs: [Var; 3], w: &CmiaWeights) -> Result<[Var; 3]> {
    for (m, &v) in Modality::ALL.iter().zip(&inputs) {
        if g.shape(v).1 != w.width {
            return Err(Error::dim(format!(
                "{m} stream has width {}, interaction width is {}",
                g.shape(v).1,
                w.width
            )));
        }
    }
    let mut outs = Vec::with_capacity(3);
    for out in Modality::ALL {
        let x = inputs[out.index()];
        let mut acc: Option<Var> = None;
        for src in Modality::ALL {
            let term = w.block(out, src).forward(g, x, inputs[src.index()], false)?;
            acc = Some(match acc {
                Some(a) => g.add(a, term)?,
                None => term,
            });
        }
        outs.push(acc.expect("three terms"));
    }
    Ok([outs[0], outs[1], outs[2]])
}

/// One interaction block with per-stream norms and FFNs.
#[derive(Debug, Clone, PartialEq)]
pub struct CmibBlock {
    pub cmia: CmiaWeights,
    pub pre_norm: [RmsNormParams; 3],
    pub post_norm: [RmsNormParams; 3],
    pub ffn: [FfnWeights; 3],
}

impl CmibBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        heads: usize,
        ffn_dim: usize,
        eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let cmia = CmiaWeights::new(store, &format!("{prefix}.cmia"), width, heads, rng)?;
        let norm = |store: &mut ParamStore, kind: &str| {
            Modality::ALL.map(|m| RmsNormParams::new(store, &format!("{prefix}.{kind}.{m}"), width, eps, true))
        };
        let pre_norm = norm(store, "pre_norm");
        let post_norm = norm(store, "post_norm");
        let ffn = Modality::ALL.map(|m| FfnWeights::new(store, &format!("{prefix}.ffn.{m}"), width, ffn_dim, true, 1.0, rng));
        Ok(CmibBlock {
            cmia,
            pre_norm,
            post_norm,
            ffn,
        })
    }

    /// `O = CMIA(RMSNorm(F + P)) + F`, then `O' = FFN(RMSNorm(O)) + O`, per stream.
    pub fn forward(&self, g: &mut Graph, inputs: [Var; 3]) -> Result<[Var; 3]> {
        let mut normed = [inputs[0]; 3];
        for m in Modality::ALL {
            let x = inputs[m.index()];
            let (n, width) = g.shape(x);
            if width != self.cmia.width {
                return Err(Error::dim(format!(
                    "{m} stream has width {width}, block width is {}",
                    self.cmia.width
                )));
            }
            let p = g.constant(position_encoding(n, width));
            let xp = g.add(x, p)?;
            normed[m.index()] = self.pre_norm[m.index()].forward(g, xp)?;
        }
        let attended = cmia_forward(g, normed, &self.cmia)?;
        let mut outs = [inputs[0]; 3];
        for m in Modality::ALL {
            let i = m.index();
            let o = g.add(attended[i], inputs[i])?;
            let h = self.post_norm[i].forward(g, o)?;
            let h = self.ffn[i].forward(g, h)?;
            outs[i] = g.add(h, o)?;
        }
        Ok(outs)
    }
}

/// A stack of interaction blocks (depth 1 by default).
#[derive(Debug, Clone, PartialEq)]
pub struct CmibParams {
    pub blocks: Vec<CmibBlock>,
}

impl CmibParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        width: usize,
        heads: usize,
        ffn_dim: usize,
        depth: usize,
        eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Input("interaction block depth must be at least 1".into()));
        }
        let blocks = (0..depth)
            .map(|d| CmibBlock::new(store, &format!("cmib.{d}"), width, heads, ffn_dim, eps, rng))
            .collect::<Result<_>>()?;
        Ok(CmibParams { blocks })
    }
}

pub fn cmib_forward(g: &mut Graph, inputs: [Var; 3], p: &CmibParams) -> Result<[Var; 3]> {
    let mut x = inputs;
    for block in &p.blocks {
        x = block.forward(g, x)?;
    }
    Ok(x)
}
