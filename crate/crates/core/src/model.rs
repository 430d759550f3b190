//! Learnable components: per-modality transformer encoders, intra- and
//! inter-modal projection heads, and the attention-based transformation
//! predictor that maps a representation plus an augmentation vector to the
//! representation of the augmented input.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::{default_vector, AugmentationVector, Modality, ModalityInput};
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    /// Audio spectrogram time frames.
    pub audio_frames: usize,
    /// Audio spectrogram frequency bins.
    pub audio_bins: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub ln_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch_size: 8,
            embed_dim: 64,
            depth: 3,
            heads: 4,
            mlp_ratio: 4,
            proj_hidden: 64,
            proj_dim: 32,
            audio_frames: 64,
            audio_bins: 16,
            image_height: 32,
            image_width: 32,
            ln_eps: 1e-6,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self, modality: Modality) -> EncoderConfig {
        let input_shape = match modality {
            Modality::Audio => vec![self.audio_frames, self.audio_bins],
            Modality::Visual => vec![self.image_height, self.image_width, 3],
        };
        EncoderConfig {
            modality,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            input_shape,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.patch_size == 0 || self.mlp_ratio == 0 || self.proj_hidden == 0 || self.proj_dim == 0 {
            return Err(Error::config("patch_size, mlp_ratio and projection sizes must be positive"));
        }
        for m in Modality::ALL {
            let e = self.encoder(m);
            let spatial = &e.input_shape[..2];
            if spatial.iter().any(|&a| a == 0 || a % self.patch_size != 0) {
                return Err(Error::config(format!(
                    "{} input {:?} not divisible by patch size {}",
                    m.name(),
                    e.input_shape,
                    self.patch_size
                )));
            }
        }
        if self.ln_eps <= 0.0 || self.init_std <= 0.0 {
            return Err(Error::config("ln_eps and init_std must be positive"));
        }
        Ok(())
    }

    /// `(width, height)` of the planar view of each modality's input.
    pub fn extent(&self, modality: Modality) -> (usize, usize) {
        match modality {
            Modality::Audio => (self.audio_frames, self.audio_bins),
            Modality::Visual => (self.image_width, self.image_height),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub modality: Modality,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub input_shape: Vec<usize>,
}

impl EncoderConfig {
    pub fn tokens(&self) -> usize {
        (self.input_shape[0] / self.patch_size) * (self.input_shape[1] / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        let channels = self.input_shape.get(2).copied().unwrap_or(1);
        self.patch_size * self.patch_size * channels
    }

    /// Flattens non-overlapping patches of a batch into a `(B·tokens)×patch_dim` matrix.
    pub fn patchify(&self, inputs: &[&ModalityInput]) -> Result<Tensor> {
        let p = self.patch_size;
        let (rows, cols) = (self.input_shape[0] / p, self.input_shape[1] / p);
        let ch = self.input_shape.get(2).copied().unwrap_or(1);
        let inner = self.input_shape[1] * ch;
        let mut out = Vec::with_capacity(inputs.len() * self.tokens() * self.patch_dim());
        for x in inputs {
            if x.modality() != self.modality || x.data().shape() != self.input_shape.as_slice() {
                return Err(Error::config(format!(
                    "{} encoder expects {:?}, got {} input {:?}",
                    self.modality.name(),
                    self.input_shape,
                    x.modality().name(),
                    x.data().shape()
                )));
            }
            let v = x.data().values();
            for r in 0..rows {
                for c in 0..cols {
                    for dr in 0..p {
                        let base = (r * p + dr) * inner + c * p * ch;
                        out.extend_from_slice(&v[base..base + p * ch]);
                    }
                }
            }
        }
        Tensor::new(vec![inputs.len() * self.tokens(), self.patch_dim()], out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, eps: f64) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, eps)
    }
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    std: f64,
}

impl Init<'_> {
    /// Normal(0, std) truncated to ±2 std.
    fn trunc_normal(&mut self, name: String, shape: &[usize]) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, self.std).expect("positive std");
        let mut vals = Vec::with_capacity(n);
        while vals.len() < n {
            let v: f64 = dist.sample(&mut self.rng);
            if v.abs() <= 2.0 * self.std {
                vals.push(v);
            }
        }
        self.store.add(name, Tensor::new(shape.to_vec(), vals)?)
    }

    fn constant(&mut self, name: String, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store.add(name, Tensor::full(shape, value))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Linear> {
        let w = self.trunc_normal(format!("{name}.w"), &[fan_in, fan_out])?;
        let b = if bias {
            Some(self.constant(format!("{name}.b"), &[fan_out], 0.0)?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    fn layer_norm(&mut self, name: &str, dim: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gamma: self.constant(format!("{name}.gamma"), &[dim], 1.0)?,
            beta: self.constant(format!("{name}.beta"), &[dim], 0.0)?,
        })
    }
}

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Patch-embedding transformer with learned positional embeddings and no
/// class token.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub patch: Linear,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln_eps: f64,
}

impl Encoder {
    fn build(init: &mut Init, prefix: &str, config: EncoderConfig, ln_eps: f64) -> Result<Self> {
        let d = config.embed_dim;
        let hidden = d * config.mlp_ratio;
        let patch = init.linear(&format!("{prefix}.patch"), config.patch_dim(), d, true)?;
        let pos = init.trunc_normal(format!("{prefix}.pos"), &[config.tokens(), d])?;
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let p = format!("{prefix}.block{i}");
            blocks.push(Block {
                ln1: init.layer_norm(&format!("{p}.ln1"), d)?,
                wq: init.linear(&format!("{p}.attn.wq"), d, d, true)?,
                wk: init.linear(&format!("{p}.attn.wk"), d, d, true)?,
                wv: init.linear(&format!("{p}.attn.wv"), d, d, true)?,
                wo: init.linear(&format!("{p}.attn.wo"), d, d, true)?,
                ln2: init.layer_norm(&format!("{p}.ln2"), d)?,
                fc1: init.linear(&format!("{p}.mlp.fc1"), d, hidden, true)?,
                fc2: init.linear(&format!("{p}.mlp.fc2"), hidden, d, true)?,
            });
        }
        Ok(Encoder {
            config,
            patch,
            pos,
            blocks,
            ln_eps,
        })
    }

    /// Encodes a batch into a `(B·tokens)×d` token matrix.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, inputs: &[&ModalityInput]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Empty("encode"));
        }
        let patches = tape.input(self.config.patchify(inputs)?);
        let mut x = self.patch.forward(tape, store, patches)?;
        let pos = tape.param(store, self.pos);
        x = tape.add_tiled(x, pos)?;
        for blk in &self.blocks {
            let n = blk.ln1.forward(tape, store, x, self.ln_eps)?;
            let q = blk.wq.forward(tape, store, n)?;
            let k = blk.wk.forward(tape, store, n)?;
            let v = blk.wv.forward(tape, store, n)?;
            let a = tape.attention(q, k, v, self.config.heads, inputs.len())?;
            let o = blk.wo.forward(tape, store, a)?;
            x = tape.add(x, o)?;
            let n = blk.ln2.forward(tape, store, x, self.ln_eps)?;
            let f = blk.fc1.forward(tape, store, n)?;
            let f = tape.gelu(f)?;
            let f = blk.fc2.forward(tape, store, f)?;
            x = tape.add(x, f)?;
        }
        Ok(x)
    }

    /// `tokens×d` representation of a single input.
    pub fn encode(&self, store: &ParamStore, input: &ModalityInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let h = self.forward(&mut tape, store, &[input])?;
        Ok(tape.value(h).clone())
    }
}

/// Attention-based transformation predictor:
/// `ĥ = FFN(MHA(f_t(t), h, h) + MeanPool(h))` with a residual, pre-normed FFN.
#[derive(Clone, Debug)]
pub struct TransformationPredictor {
    pub modality: Modality,
    pub aug_dim: usize,
    pub heads: usize,
    /// Augmentation encoder `f_t`.
    pub ft: Linear,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub ln_eps: f64,
}

impl TransformationPredictor {
    fn build(init: &mut Init, prefix: &str, modality: Modality, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        let aug_dim = modality.vector_dim();
        Ok(TransformationPredictor {
            modality,
            aug_dim,
            heads: cfg.heads,
            ft: init.linear(&format!("{prefix}.ft"), aug_dim, d, true)?,
            wq: init.trunc_normal(format!("{prefix}.attn.wq"), &[d, d])?,
            wk: init.trunc_normal(format!("{prefix}.attn.wk"), &[d, d])?,
            wv: init.trunc_normal(format!("{prefix}.attn.wv"), &[d, d])?,
            wo: init.trunc_normal(format!("{prefix}.attn.wo"), &[d, d])?,
            ln: init.layer_norm(&format!("{prefix}.ln"), d)?,
            fc1: init.linear(&format!("{prefix}.mlp.fc1"), d, d * cfg.mlp_ratio, true)?,
            fc2: init.linear(&format!("{prefix}.mlp.fc2"), d * cfg.mlp_ratio, d, true)?,
            ln_eps: cfg.ln_eps,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.ft.params();
        p.extend([self.wq, self.wk, self.wv, self.wo, self.ln.gamma, self.ln.beta]);
        p.extend(self.fc1.params());
        p.extend(self.fc2.params());
        p
    }

    /// Predicts one representation per augmentation vector.
    ///
    /// `h` is `(B·tokens)×d`; `t` is `(B·S)×d_t` with the `S` vectors of
    /// item `b` in rows `b·S..(b+1)·S`. Each vector is an independent
    /// single-token query. Returns `(B·S)×d`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        tokens: usize,
        t: Var,
        per_item: usize,
    ) -> Result<Var> {
        let (y, g) = self.hidden(tape, store, h, tokens, t, per_item)?;
        let f = self.fc2.forward(tape, store, g)?;
        tape.add(y, f)
    }

    /// Mean of the `S` predictions of each item: `B×d`.
    ///
    /// `fc2` is affine, so it is applied once to the averaged hidden units
    /// rather than to every prediction.
    pub fn centroid(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        tokens: usize,
        t: Var,
        per_item: usize,
    ) -> Result<Var> {
        let (y, g) = self.hidden(tape, store, h, tokens, t, per_item)?;
        let y = tape.group_mean(y, per_item)?;
        let g = tape.group_mean(g, per_item)?;
        let f = self.fc2.forward(tape, store, g)?;
        tape.add(y, f)
    }

    /// Attention output plus pooled `h` (`y`) and the activated FFN hidden
    /// layer (`g`), one row per augmentation vector.
    fn hidden(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        tokens: usize,
        t: Var,
        per_item: usize,
    ) -> Result<(Var, Var)> {
        let (trows, tdim) = tape.value(t).as_matrix();
        if tdim != self.aug_dim {
            return Err(Error::contract(format!(
                "{} predictor expects {}-dimensional augmentation vectors, got {tdim}",
                self.modality.name(),
                self.aug_dim
            )));
        }
        if per_item == 0 {
            return Err(Error::contract("at least one augmentation vector per item is required"));
        }
        let batch = tape.value(h).as_matrix().0 / tokens;
        if trows != batch * per_item {
            return Err(Error::contract(format!(
                "{trows} augmentation rows for {batch} items × {per_item}"
            )));
        }
        let query = self.ft.forward(tape, store, t)?;
        let (wq, wk, wv, wo) = (
            tape.param(store, self.wq),
            tape.param(store, self.wk),
            tape.param(store, self.wv),
            tape.param(store, self.wo),
        );
        let q = tape.matmul(query, wq)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;
        let a = tape.attention(q, k, v, self.heads, batch)?;
        let mha = tape.matmul(a, wo)?;
        let pooled = tape.group_mean(h, tokens)?;
        let pooled = tape.repeat_rows(pooled, per_item)?;
        let y = tape.add(mha, pooled)?;
        let n = self.ln.forward(tape, store, y, self.ln_eps)?;
        let f = self.fc1.forward(tape, store, n)?;
        let g = tape.gelu(f)?;
        Ok((y, g))
    }

    /// Equivariant representation `ĥ` for one `tokens×d` representation.
    pub fn predict_equivariant(&self, store: &ParamStore, h: &Tensor, t: &AugmentationVector) -> Result<Tensor> {
        self.centroid_of(store, h, std::slice::from_ref(t))
    }

    /// Centroid of the predictions for `vectors`; at least one is required.
    pub fn compute_centroid(&self, store: &ParamStore, h: &Tensor, vectors: &[AugmentationVector]) -> Result<Tensor> {
        if vectors.is_empty() {
            return Err(Error::contract("centroid needs at least one augmentation vector"));
        }
        self.centroid_of(store, h, vectors)
    }

    fn centroid_of(&self, store: &ParamStore, h: &Tensor, vectors: &[AugmentationVector]) -> Result<Tensor> {
        if h.rank() != 2 {
            return Err(Error::contract(format!("expected tokens×d, got {:?}", h.shape())));
        }
        let mut tape = Tape::new();
        let tokens = h.shape()[0];
        let hv = tape.input(h.clone());
        let t = vectors_tensor(vectors, self.aug_dim)?;
        let tv = tape.input(t);
        let c = self.centroid(&mut tape, store, hv, tokens, tv, vectors.len())?;
        let d = tape.value(c).len();
        tape.value(c).clone().reshape(vec![d])
    }
}

/// Stacks augmentation vectors into a `S×d_t` matrix.
pub fn vectors_tensor(vectors: &[AugmentationVector], dim: usize) -> Result<Tensor> {
    let mut vals = Vec::with_capacity(vectors.len() * dim);
    for v in vectors {
        if v.values.len() != dim {
            return Err(Error::contract(format!(
                "augmentation vector of length {} where {dim} is required",
                v.values.len()
            )));
        }
        vals.extend_from_slice(&v.values);
    }
    if vals.is_empty() {
        return Err(Error::Empty("augmentation vectors"));
    }
    Tensor::new(vec![vectors.len(), dim], vals)
}

/// `n` copies of the identity augmentation vector of `m`.
pub fn default_vector_tensor(m: Modality, n: usize) -> Result<Tensor> {
    vectors_tensor(&vec![default_vector(m); n], m.vector_dim())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Intra,
    Inter,
}

/// Three affine layers with layer normalization and GELU between them.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub modality: Modality,
    pub scope: Scope,
    pub l0: Linear,
    pub ln0: LayerNorm,
    pub l1: Linear,
    pub ln1: LayerNorm,
    pub l2: Linear,
    pub in_dim: usize,
    pub out_dim: usize,
    pub ln_eps: f64,
}

impl ProjectionHead {
    fn build(init: &mut Init, prefix: &str, modality: Modality, scope: Scope, cfg: &ModelConfig) -> Result<Self> {
        let (d, hid, p) = (cfg.embed_dim, cfg.proj_hidden, cfg.proj_dim);
        Ok(ProjectionHead {
            modality,
            scope,
            l0: init.linear(&format!("{prefix}.l0"), d, hid, true)?,
            ln0: init.layer_norm(&format!("{prefix}.ln0"), hid)?,
            l1: init.linear(&format!("{prefix}.l1"), hid, hid, true)?,
            ln1: init.layer_norm(&format!("{prefix}.ln1"), hid)?,
            l2: init.linear(&format!("{prefix}.l2"), hid, p, true)?,
            in_dim: d,
            out_dim: p,
            ln_eps: cfg.ln_eps,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.l0.params();
        p.extend([self.ln0.gamma, self.ln0.beta]);
        p.extend(self.l1.params());
        p.extend([self.ln1.gamma, self.ln1.beta]);
        p.extend(self.l2.params());
        p
    }

    /// Projects a `B×d` batch of representations to `B×out_dim`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (_, d) = tape.value(x).as_matrix();
        if d != self.in_dim {
            return Err(Error::contract(format!(
                "projection head expects {}-dimensional input, got {d}",
                self.in_dim
            )));
        }
        let y = self.l0.forward(tape, store, x)?;
        let y = self.ln0.forward(tape, store, y, self.ln_eps)?;
        let y = tape.gelu(y)?;
        let y = self.l1.forward(tape, store, y)?;
        let y = self.ln1.forward(tape, store, y, self.ln_eps)?;
        let y = tape.gelu(y)?;
        self.l2.forward(tape, store, y)
    }

    pub fn project(&self, store: &ParamStore, rep: &Tensor) -> Result<Tensor> {
        if rep.len() != self.in_dim {
            return Err(Error::contract(format!(
                "projection head expects {}-dimensional input, got {:?}",
                self.in_dim,
                rep.shape()
            )));
        }
        let mut tape = Tape::new();
        let x = tape.input(rep.clone().reshape(vec![1, self.in_dim])?);
        let y = self.forward(&mut tape, store, x)?;
        tape.value(y).clone().reshape(vec![self.out_dim])
    }
}

/// Everything one modality owns.
#[derive(Clone, Debug)]
pub struct Branch {
    pub modality: Modality,
    pub encoder: Encoder,
    pub predictor: TransformationPredictor,
    pub intra: ProjectionHead,
    pub inter: ProjectionHead,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub audio: Branch,
    pub visual: Branch,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            std: config.init_std,
        };
        let mut branch = |m: Modality| -> Result<Branch> {
            let n = m.name();
            Ok(Branch {
                modality: m,
                encoder: Encoder::build(&mut init, &format!("{n}.encoder"), config.encoder(m), config.ln_eps)?,
                predictor: TransformationPredictor::build(&mut init, &format!("{n}.predictor"), m, &config)?,
                intra: ProjectionHead::build(&mut init, &format!("{n}.intra"), m, Scope::Intra, &config)?,
                inter: ProjectionHead::build(&mut init, &format!("{n}.inter"), m, Scope::Inter, &config)?,
            })
        };
        let audio = branch(Modality::Audio)?;
        let visual = branch(Modality::Visual)?;
        Ok(Model {
            config,
            params: store,
            audio,
            visual,
        })
    }

    pub fn branch(&self, m: Modality) -> &Branch {
        match m {
            Modality::Audio => &self.audio,
            Modality::Visual => &self.visual,
        }
    }

    pub fn head(&self, m: Modality, scope: Scope) -> &ProjectionHead {
        let b = self.branch(m);
        match scope {
            Scope::Intra => &b.intra,
            Scope::Inter => &b.inter,
        }
    }

    pub fn encode(&self, m: Modality, input: &ModalityInput) -> Result<Tensor> {
        self.branch(m).encoder.encode(&self.params, input)
    }

    pub fn predict_equivariant(&self, m: Modality, h: &Tensor, t: &AugmentationVector) -> Result<Tensor> {
        self.branch(m).predictor.predict_equivariant(&self.params, h, t)
    }

    pub fn compute_centroid(&self, m: Modality, h: &Tensor, vectors: &[AugmentationVector]) -> Result<Tensor> {
        self.branch(m).predictor.compute_centroid(&self.params, h, vectors)
    }

    pub fn project(&self, m: Modality, scope: Scope, rep: &Tensor) -> Result<Tensor> {
        self.head(m, scope).project(&self.params, rep)
    }
}
