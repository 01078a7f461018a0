//! The end-to-end model: adapters → interaction block → assembly → tuning →
//! frozen stub → heads.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapters::{
    adapt_features, embed_labels, init_query_bank, project, AdapterWeights, Direction, EmbeddingTable, Modality,
    ProjectionPair, QueryBank, Vocabulary,
};
use crate::backbone::{
    action_tuning, apply_heads, assemble, count_params, stub_forward, FrozenStub, HeadOutputs, Heads,
    ModalityBundle, ParamCounts, TuningWeights,
};
use crate::cmib::{cmib_forward, CmibParams};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::objective::{total_loss_var, LossBreakdown, LossOptions, Prediction, TargetPack};
use crate::tensorkit::{Gradients, Graph, Matrix, ParamStore, RmsNormParams};

/// Model input for one sampled observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// class ids fed to the text stream (possibly noisy), θ₀ entries
    pub labels: Vec<usize>,
    /// θ₀×L_D sampled visual features
    pub features: Matrix,
}

impl Observation {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub embedding: EmbeddingTable,
    pub adapter: AdapterWeights,
    pub projections: ProjectionPair,
    pub queries: QueryBank,
    pub cmib: CmibParams,
    pub fuse_norm: RmsNormParams,
    pub tuning: TuningWeights,
    pub stub: FrozenStub,
    pub heads: Heads,
    /// mean token embedding per class, K×L_E
    class_text: Matrix,
}

/// Tape handles produced by [`ActionModel::forward`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardPack {
    pub bundle: ModalityBundle,
    pub tuned: crate::tensorkit::Var,
    pub hidden: crate::tensorkit::Var,
    pub heads: HeadOutputs,
}

impl ActionModel {
    /// Builds a model with weights drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut frozen_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_f00d_cafe_0001);
        let vocab = Vocabulary::new(config.class_names.clone(), config.vocab_buckets)?;
        let mut store = ParamStore::new();
        let c = &config;

        let embedding = EmbeddingTable::new(&mut store, c.vocab_buckets, c.embed_dim, &mut frozen_rng);
        let adapter = AdapterWeights::new(&mut store, c.feature_dim, c.adapter_dim, c.embed_dim, &mut rng);
        let projections = ProjectionPair::new(&mut store, c.embed_dim, c.cmib_dim, c.shared_projections, &mut rng);
        let queries = init_query_bank(&mut store, c.num_queries, c.feature_dim, c.query_init);
        let cmib = CmibParams::new(
            &mut store,
            c.cmib_dim,
            c.cmib_heads,
            c.cmib_ffn_dim,
            c.cmib_depth,
            c.rms_eps,
            &mut rng,
        )?;
        let fuse_norm = RmsNormParams::new(&mut store, "fuse_norm", c.embed_dim, c.rms_eps, true);
        let tuning = TuningWeights::new(
            &mut store,
            c.embed_dim,
            c.tune_dim,
            c.tune_kernel,
            c.dropout,
            c.tuning_residual,
            &mut rng,
        )?;
        let stub = FrozenStub::new(
            &mut store,
            c.stub_depth,
            c.embed_dim,
            c.stub_heads,
            c.stub_ffn_dim,
            c.rms_eps,
            &mut frozen_rng,
        )?;
        let heads = Heads::new(&mut store, c.embed_dim, vocab.len(), c.shared_past_head, &mut rng);

        let names: Vec<&str> = vocab.names().iter().map(String::as_str).collect();
        let class_text = embed_labels(&names, &vocab, &store, &embedding)?;

        Ok(ActionModel {
            config,
            vocab,
            store,
            embedding,
            adapter,
            projections,
            queries,
            cmib,
            fuse_norm,
            tuning,
            stub,
            heads,
            class_text,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.vocab.len()
    }

    /// Rounds all weights to single precision and refreshes derived tables.
    pub fn round_params(&mut self) -> Result<()> {
        round_to_f32(&mut self.store);
        self.refresh_class_text()
    }

    fn refresh_class_text(&mut self) -> Result<()> {
        let names: Vec<&str> = self.vocab.names().iter().map(String::as_str).collect();
        self.class_text = embed_labels(&names, &self.vocab, &self.store, &self.embedding)?;
        Ok(())
    }

    pub fn param_counts(&self) -> ParamCounts {
        count_params(&self.store)
    }

    /// Text features for a label sequence; zero rows when the text stream is disabled.
    pub fn text_features(&self, labels: &[usize]) -> Result<Matrix> {
        let width = self.config.embed_dim;
        let mut out = Matrix::zeros(labels.len(), width);
        if !self.config.text_stream {
            return Ok(out);
        }
        for (r, &l) in labels.iter().enumerate() {
            if l >= self.num_classes() {
                return Err(Error::Input(format!("past label {l} is not a real action class")));
            }
            out.row_mut(r).copy_from_slice(self.class_text.row(l));
        }
        Ok(out)
    }

    /// Records the full forward pass. Passing `dropout_rng` selects train mode.
    pub fn forward(
        &self,
        g: &mut Graph,
        obs: &Observation,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardPack> {
        let observed = obs.len();
        if observed == 0 {
            return Err(Error::EmptyObservation("no observed positions".into()));
        }
        if obs.features.shape() != (observed, self.config.feature_dim) {
            return Err(Error::dim(format!(
                "features are {:?}, expected {observed}x{}",
                obs.features.shape(),
                self.config.feature_dim
            )));
        }
        let text = g.constant(self.text_features(&obs.labels)?);
        let vision_raw = g.constant(obs.features.clone());
        let vision = adapt_features(g, vision_raw, &self.adapter)?;
        let query_raw = g.param(self.queries.queries);
        let query = adapt_features(g, query_raw, &self.adapter)?;
        let residual = [text, vision, query];

        let mut down = residual;
        for m in Modality::ALL {
            down[m.index()] = project(g, residual[m.index()], &self.projections, m, Direction::Down)?;
        }
        let fused_streams = cmib_forward(g, down, &self.cmib)?;
        let mut up = fused_streams;
        for m in Modality::ALL {
            up[m.index()] = project(g, fused_streams[m.index()], &self.projections, m, Direction::Up)?;
        }
        let fused = assemble(g, residual, up, &self.fuse_norm)?;
        let tuned = action_tuning(g, fused, &self.tuning, dropout_rng)?;
        let hidden = stub_forward(g, tuned, &self.stub)?;
        let heads = apply_heads(g, hidden, &self.heads, observed, self.config.num_queries)?;
        Ok(ForwardPack {
            bundle: ModalityBundle {
                text,
                vision_adapted: vision,
                query_adapted: query,
                down,
                up,
                fused,
            },
            tuned,
            hidden,
            heads,
        })
    }

    /// Eval-mode prediction on plain matrices.
    pub fn predict(&self, obs: &Observation) -> Result<Prediction> {
        let mut g = Graph::new(&self.store);
        let pack = self.forward(&mut g, obs, None)?;
        let h = pack.heads;
        Ok(Prediction {
            past_text: g.value(h.past_text).clone(),
            past_vis: g.value(h.past_vis).clone(),
            future_class: g.value(h.future_class).clone(),
            durations: g.value(h.durations).data().to_vec(),
        })
    }

    pub fn loss_options(&self, mean: bool) -> LossOptions {
        LossOptions {
            mean,
            text: self.config.text_stream,
        }
    }

    /// Loss and gradients for one sample.
    pub fn loss_and_grads(
        &self,
        obs: &Observation,
        targets: &TargetPack,
        opts: LossOptions,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(LossBreakdown, Gradients)> {
        let mut g = Graph::new(&self.store);
        let pack = self.forward(&mut g, obs, dropout_rng)?;
        let loss = total_loss_var(&mut g, &pack.heads, targets, opts)?;
        let breakdown = loss.breakdown(&g);
        if !breakdown.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {breakdown:?}")));
        }
        let grads = g.backward(loss.total)?;
        Ok((breakdown, grads))
    }

    /// Eval-mode loss without gradients.
    pub fn loss(&self, obs: &Observation, targets: &TargetPack, opts: LossOptions) -> Result<LossBreakdown> {
        let mut g = Graph::new(&self.store);
        let pack = self.forward(&mut g, obs, None)?;
        let loss = total_loss_var(&mut g, &pack.heads, targets, opts)?;
        Ok(loss.breakdown(&g))
    }
}

const MAGIC: &[u8; 4] = b"ALLM";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Checkpoint layout, little-endian:
/// `"ALLM"`, u32 version, u32 config length, config text (`key=value` lines,
/// including `config_hash`), u32 parameter count, then per parameter
/// u32 name length, name bytes, u32 rows, u32 cols, rows·cols f32.
pub fn write_checkpoint(model: &ActionModel, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    write_u32(w, CHECKPOINT_VERSION)?;
    let config = format!("{}config_hash={}\n", model.config.to_kv(), model.config.hash());
    write_u32(w, config.len() as u32)?;
    w.write_all(config.as_bytes())?;
    write_u32(w, model.store.len() as u32)?;
    for (_, p) in model.store.iter() {
        write_u32(w, p.name.len() as u32)?;
        w.write_all(p.name.as_bytes())?;
        write_u32(w, p.value.rows() as u32)?;
        write_u32(w, p.value.cols() as u32)?;
        for &v in p.value.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_checkpoint(model: &ActionModel, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn integrity(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

/// Reads a checkpoint. With `expected`, the stored config must hash identically.
pub fn read_checkpoint(r: &mut impl Read, expected: Option<&ModelConfig>) -> Result<ActionModel> {
    let trunc = |e: std::io::Error| integrity(format!("truncated checkpoint: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(trunc)?;
    if &magic != MAGIC {
        return Err(integrity(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r).map_err(trunc)?;
    if version != CHECKPOINT_VERSION {
        return Err(integrity(format!("unsupported checkpoint version {version}")));
    }
    let clen = read_u32(r).map_err(trunc)? as usize;
    if clen > 1 << 24 {
        return Err(integrity("config block too large"));
    }
    let mut cbytes = vec![0u8; clen];
    r.read_exact(&mut cbytes).map_err(trunc)?;
    let ctext = String::from_utf8(cbytes).map_err(|_| integrity("config block is not UTF-8"))?;
    let mut stored_hash = None;
    let body: String = ctext
        .lines()
        .filter(|l| match l.strip_prefix("config_hash=") {
            Some(h) => {
                stored_hash = Some(h.to_string());
                false
            }
            None => true,
        })
        .map(|l| format!("{l}\n"))
        .collect();
    let config = ModelConfig::from_kv(&body, Path::new("<checkpoint>"))
        .map_err(|e| integrity(format!("unreadable config block: {e}")))?;
    let hash = config.hash();
    match &stored_hash {
        Some(h) if *h == hash => {}
        Some(h) => {
            return Err(integrity(format!(
                "config block hashes to {hash} but header records {h}"
            )))
        }
        None => return Err(integrity("config block has no config_hash")),
    }
    if let Some(exp) = expected {
        if exp.hash() != hash {
            return Err(integrity(format!(
                "checkpoint config hash {hash} does not match run config hash {}",
                exp.hash()
            )));
        }
    }

    let mut model = ActionModel::new(config).map_err(|e| integrity(format!("cannot rebuild model: {e}")))?;
    let count = read_u32(r).map_err(trunc)? as usize;
    if count != model.store.len() {
        return Err(integrity(format!(
            "checkpoint holds {count} parameters, model has {}",
            model.store.len()
        )));
    }
    for _ in 0..count {
        let nlen = read_u32(r).map_err(trunc)? as usize;
        if nlen > 4096 {
            return Err(integrity("parameter name too long"));
        }
        let mut nb = vec![0u8; nlen];
        r.read_exact(&mut nb).map_err(trunc)?;
        let name = String::from_utf8(nb).map_err(|_| integrity("parameter name is not UTF-8"))?;
        let rows = read_u32(r).map_err(trunc)? as usize;
        let cols = read_u32(r).map_err(trunc)? as usize;
        let id = model
            .store
            .lookup(&name)
            .ok_or_else(|| integrity(format!("unknown parameter {name}")))?;
        if model.store.value(id).shape() != (rows, cols) {
            return Err(integrity(format!(
                "parameter {name} is {rows}x{cols} in checkpoint, {:?} in model",
                model.store.value(id).shape()
            )));
        }
        let mut raw = vec![0u8; rows * cols * 4];
        r.read_exact(&mut raw).map_err(trunc)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        model.store.set_value(id, Matrix::from_vec(rows, cols, data)?)?;
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| integrity(e.to_string()))? != 0 {
        return Err(integrity("trailing bytes after last parameter"));
    }
    model.refresh_class_text()?;
    Ok(model)
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<ActionModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut bytes.as_slice(), expected)
}

/// Rounds every parameter to single precision, the representation checkpoints store.
pub fn round_to_f32(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).value.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}
