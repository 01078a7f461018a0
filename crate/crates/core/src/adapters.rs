//! Input adaptation: label text → mean token embedding, visual and query
//! features → backbone width, and the per-modality down/up projections.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensorkit::{init_weight, linear, Graph, Matrix, ParamId, ParamStore, Var};

/// Action classes by dense id. Id `K` (one past the last class) is the "None" class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    names: Vec<String>,
    ids: HashMap<String, usize>,
    token_buckets: usize,
}

impl Vocabulary {
    pub fn new(names: Vec<String>, token_buckets: usize) -> Result<Self> {
        if token_buckets == 0 {
            return Err(Error::Input("tokenizer needs at least one bucket".into()));
        }
        let mut ids = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if ids.insert(n.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate action name {n}")));
            }
        }
        Ok(Vocabulary {
            names,
            ids,
            token_buckets,
        })
    }

    /// Number of real action classes, K.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn none_id(&self) -> usize {
        self.names.len()
    }

    pub fn token_buckets(&self) -> usize {
        self.token_buckets
    }

    pub fn name(&self, id: usize) -> &str {
        if id == self.none_id() {
            "None"
        } else {
            &self.names[id]
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.ids.get(name).copied()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercases, splits on whitespace and underscores, and hashes each piece into a token bucket.
pub fn tokenize(label: &str, vocab: &Vocabulary) -> Result<Vec<usize>> {
    let lower = label.to_lowercase();
    let ids: Vec<usize> = lower
        .split(|c: char| c.is_whitespace() || c == '_')
        .filter(|piece| !piece.is_empty())
        .map(|piece| (fnv1a(piece.as_bytes()) % vocab.token_buckets as u64) as usize)
        .collect();
    if ids.is_empty() {
        return Err(Error::Input(format!("label {label:?} has no tokens")));
    }
    Ok(ids)
}

/// Frozen token embedding table, deterministic from its seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingTable {
    pub table: ParamId,
}

impl EmbeddingTable {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, buckets: usize, width: usize, rng: &mut R) -> Self {
        let table = store.add("embedding.table", Matrix::randn(buckets, width, 1.0, rng), false);
        EmbeddingTable { table }
    }
}

/// Mean of the embedding rows of the label's tokens.
pub fn embed_label(label: &str, vocab: &Vocabulary, store: &ParamStore, emb: &EmbeddingTable) -> Result<Vec<f64>> {
    let tokens = tokenize(label, vocab)?;
    let table = store.value(emb.table);
    let mut out = vec![0.0; table.cols()];
    for &t in &tokens {
        for (o, v) in out.iter_mut().zip(table.row(t)) {
            *o += v;
        }
    }
    let n = tokens.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

/// One row per label.
pub fn embed_labels(labels: &[&str], vocab: &Vocabulary, store: &ParamStore, emb: &EmbeddingTable) -> Result<Matrix> {
    let width = store.value(emb.table).cols();
    let mut data = Vec::with_capacity(labels.len() * width);
    for l in labels {
        data.extend(embed_label(l, vocab, store, emb)?);
    }
    Matrix::from_vec(labels.len(), width, data)
}

/// The SiLU feature adapter shared by the vision and query paths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterWeights {
    pub w0: ParamId,
    pub b0: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
}

impl AdapterWeights {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        feature_dim: usize,
        hidden: usize,
        embed_dim: usize,
        rng: &mut R,
    ) -> Self {
        AdapterWeights {
            w0: store.add("adapter.w0", init_weight(rng, feature_dim, hidden, 1.0), true),
            b0: store.add("adapter.b0", Matrix::zeros(1, hidden), true),
            w1: store.add("adapter.w1", init_weight(rng, hidden, embed_dim, 1.0), true),
            b1: store.add("adapter.b1", Matrix::zeros(1, embed_dim), true),
        }
    }
}

/// `W1·SiLU(W0·F + b0) + b1`, row-wise.
pub fn adapt_features(g: &mut Graph, features: Var, w: &AdapterWeights) -> Result<Var> {
    let h = linear(g, features, w.w0, Some(w.b0))?;
    let h = g.silu(h);
    linear(g, h, w.w1, Some(w.b1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Text,
    Vision,
    Query,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Vision, Modality::Query];

    pub fn index(self) -> usize {
        match self {
            Modality::Text => 0,
            Modality::Vision => 1,
            Modality::Query => 2,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Vision => "vision",
            Modality::Query => "query",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Modality::Text),
            "vision" => Ok(Modality::Vision),
            "query" => Ok(Modality::Query),
            other => Err(Error::Input(format!("unknown modality {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Down,
    Up,
}

/// Down (`L_E → d_c`) and up (`d_c → L_E`) maps per modality. When shared, all
/// three slots point at the same parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionPair {
    pub down: [ParamId; 3],
    pub up: [ParamId; 3],
}

impl ProjectionPair {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        embed_dim: usize,
        cmib_dim: usize,
        shared: bool,
        rng: &mut R,
    ) -> Self {
        if shared {
            let d = store.add("proj.shared.down", init_weight(rng, embed_dim, cmib_dim, 1.0), true);
            let u = store.add("proj.shared.up", init_weight(rng, cmib_dim, embed_dim, 1.0), true);
            return ProjectionPair {
                down: [d; 3],
                up: [u; 3],
            };
        }
        let mut down = Vec::new();
        let mut up = Vec::new();
        for m in Modality::ALL {
            down.push(store.add(
                format!("proj.{m}.down"),
                init_weight(rng, embed_dim, cmib_dim, 1.0),
                true,
            ));
            up.push(store.add(
                format!("proj.{m}.up"),
                init_weight(rng, cmib_dim, embed_dim, 1.0),
                true,
            ));
        }
        ProjectionPair {
            down: [down[0], down[1], down[2]],
            up: [up[0], up[1], up[2]],
        }
    }

    pub fn weight(&self, modality: Modality, direction: Direction) -> ParamId {
        match direction {
            Direction::Down => self.down[modality.index()],
            Direction::Up => self.up[modality.index()],
        }
    }
}

pub fn project(
    g: &mut Graph,
    features: Var,
    pair: &ProjectionPair,
    modality: Modality,
    direction: Direction,
) -> Result<Var> {
    let w = pair.weight(modality, direction);
    let expected = g.store().value(w).rows();
    let width = g.shape(features).1;
    if width != expected {
        return Err(Error::dim(format!(
            "{modality} {direction:?} projection expects width {expected}, got {width}"
        )));
    }
    linear(g, features, w, None)
}

/// Trainable action queries, `N×L_D`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryBank {
    pub queries: ParamId,
}

pub fn init_query_bank(store: &mut ParamStore, num_queries: usize, feature_dim: usize, init: f64) -> QueryBank {
    QueryBank {
        queries: store.add("queries", Matrix::filled(num_queries, feature_dim, init), true),
    }
}
