//! Batches, the per-step objective and the training loop.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::data::{PairedDataset, SyntheticPairConfig};
use crate::augment::{
    apply, AugmentationSampler, AugmentationSpec, AugmentationVector, Modality, ModalityInput, SamplerConfig,
};
use crate::error::{Error, Result};
use crate::losses::{
    inter_loss_var, intra_loss_var, total_loss_var, InterAnchor, IntraMode, LossComponents, LossOutput, LossWeights,
};
use crate::model::{vectors_tensor, Model, ModelConfig};
use crate::numerics::{AdamW, CosineSchedule, ParamId, Tape, Var};

/// Everything that describes a run. Serialized as one flat JSON object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Augmentation vectors per item for the centroid anchor.
    pub centroids: usize,
    pub temperature: f64,
    pub weight_inter: f64,
    pub weight_intra_a: f64,
    pub weight_intra_v: f64,
    pub lr_init: f64,
    pub lr_peak: f64,
    pub warmup_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub inter_anchor: InterAnchor,
    pub intra_mode: IntraMode,

    pub classes: usize,
    pub samples_per_class: usize,
    pub noise_std: f64,
    pub latent_dim: usize,
    pub data_seed: u64,

    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub audio_frames: usize,
    pub audio_bins: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub ln_eps: f64,
    pub init_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let d = SyntheticPairConfig::default();
        let opt = AdamW::default();
        let w = LossWeights::default();
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            centroids: 16,
            temperature: crate::losses::TEMPERATURE,
            weight_inter: w.inter,
            weight_intra_a: w.intra_a,
            weight_intra_v: w.intra_v,
            lr_init: 1e-6,
            lr_peak: 1e-4,
            warmup_epochs: 2,
            beta1: opt.beta1,
            beta2: opt.beta2,
            weight_decay: opt.weight_decay,
            adam_eps: opt.eps,
            seed: 0,
            inter_anchor: InterAnchor::Centroid,
            intra_mode: IntraMode::Equivariant,
            classes: d.classes,
            samples_per_class: d.samples_per_class,
            noise_std: d.noise_std,
            latent_dim: d.latent_dim,
            data_seed: d.seed,
            patch_size: m.patch_size,
            embed_dim: m.embed_dim,
            depth: m.depth,
            heads: m.heads,
            mlp_ratio: m.mlp_ratio,
            proj_hidden: m.proj_hidden,
            proj_dim: m.proj_dim,
            audio_frames: m.audio_frames,
            audio_bins: m.audio_bins,
            image_height: m.image_height,
            image_width: m.image_width,
            ln_eps: m.ln_eps,
            init_std: m.init_std,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            proj_hidden: self.proj_hidden,
            proj_dim: self.proj_dim,
            audio_frames: self.audio_frames,
            audio_bins: self.audio_bins,
            image_height: self.image_height,
            image_width: self.image_width,
            ln_eps: self.ln_eps,
            init_std: self.init_std,
        }
    }

    pub fn data_config(&self) -> SyntheticPairConfig {
        SyntheticPairConfig {
            classes: self.classes,
            samples_per_class: self.samples_per_class,
            noise_std: self.noise_std,
            latent_dim: self.latent_dim,
            seed: self.data_seed,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            inter: self.weight_inter,
            intra_a: self.weight_intra_a,
            intra_v: self.weight_intra_v,
        }
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.centroids == 0 {
            return Err(Error::config("epochs, batch_size and centroids must be positive"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.lr_init > 0.0 && self.lr_peak > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::config(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        let unit = |x: f64| (0.0..1.0).contains(&x);
        if !unit(self.beta1) || !unit(self.beta2) || !(self.weight_decay >= 0.0) || !(self.adam_eps > 0.0) {
            return Err(Error::config("optimizer settings out of range"));
        }
        self.weights().validate()?;
        self.data_config().validate()?;
        self.model_config().validate()?;
        if self.batch_size > self.classes * self.samples_per_class {
            return Err(Error::config(format!(
                "batch_size {} exceeds the {} training items",
                self.batch_size,
                self.classes * self.samples_per_class
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: TrainConfig = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Full batches per epoch; the incomplete tail is dropped.
    pub fn steps_per_epoch(&self, items: usize) -> u64 {
        (items / self.batch_size) as u64
    }

    pub fn schedule(&self, items: usize) -> Result<CosineSchedule> {
        let per = self.steps_per_epoch(items);
        CosineSchedule::new(
            per * self.epochs as u64,
            per * self.warmup_epochs as u64,
            self.lr_init,
            self.lr_peak,
        )
    }
}

/// SplitMix64 finalizer over `seed` and a stream tag.
pub(crate) fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_INTRA: u64 = 3;
const TAG_INTER: u64 = 4;

/// One input stream of a batch for a single modality.
#[derive(Clone, Debug)]
pub struct ModalityBatch {
    pub modality: Modality,
    /// Un-augmented inputs, identical to the dataset items.
    pub originals: Vec<ModalityInput>,
    pub augmented: Vec<ModalityInput>,
    pub intra_specs: Vec<AugmentationSpec>,
    pub intra_vectors: Vec<AugmentationVector>,
    /// Second independently augmented view, present in the invariant intra mode.
    pub second_view: Option<Vec<ModalityInput>>,
    /// `per_item` vectors for each item, item-major.
    pub inter_vectors: Vec<AugmentationVector>,
    pub per_item: usize,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub audio: ModalityBatch,
    pub visual: ModalityBatch,
}

impl Batch {
    pub fn get(&self, m: Modality) -> &ModalityBatch {
        match m {
            Modality::Audio => &self.audio,
            Modality::Visual => &self.visual,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Checks index alignment of every stream and that the originals are
    /// exactly the dataset items.
    pub fn validate(&self, dataset: &PairedDataset) -> Result<()> {
        let n = self.indices.len();
        if n == 0 {
            return Err(Error::Empty("batch"));
        }
        for m in Modality::ALL {
            let b = self.get(m);
            let aligned = b.modality == m
                && b.originals.len() == n
                && b.augmented.len() == n
                && b.intra_specs.len() == n
                && b.intra_vectors.len() == n
                && b.second_view.as_ref().is_none_or(|s| s.len() == n)
                && b.per_item > 0
                && b.inter_vectors.len() == n * b.per_item;
            if !aligned {
                return Err(Error::contract(format!("{} batch streams are not index-aligned", m.name())));
            }
            for (k, &i) in self.indices.iter().enumerate() {
                let item = dataset
                    .items
                    .get(i)
                    .ok_or_else(|| Error::Bounds(format!("item {i} of {}", dataset.len())))?;
                if &b.originals[k] != item.input(m) {
                    return Err(Error::contract(format!(
                        "{} original {k} differs from dataset item {i}",
                        m.name()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-modality augmentation samplers. Their state is the draw counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Samplers {
    pub intra: [AugmentationSampler; 2],
    pub inter: [AugmentationSampler; 2],
}

impl Samplers {
    pub fn new(config: &TrainConfig) -> Self {
        let model = config.model_config();
        let make = |tag: u64, m: Modality| {
            let seed = derive_seed(config.seed, tag * 16 + m as u64);
            AugmentationSampler::new(SamplerConfig::default(), m, model.extent(m), seed)
        };
        Samplers {
            intra: Modality::ALL.map(|m| make(TAG_INTRA, m)),
            inter: Modality::ALL.map(|m| make(TAG_INTER, m)),
        }
    }

    pub fn draws(&self) -> [u64; 4] {
        [self.intra[0].draws, self.intra[1].draws, self.inter[0].draws, self.inter[1].draws]
    }

    pub fn set_draws(&mut self, d: [u64; 4]) {
        self.intra[0].draws = d[0];
        self.intra[1].draws = d[1];
        self.inter[0].draws = d[2];
        self.inter[1].draws = d[3];
    }
}

fn modality_batch(
    dataset: &PairedDataset,
    indices: &[usize],
    m: Modality,
    samplers: &mut Samplers,
    config: &TrainConfig,
) -> Result<ModalityBatch> {
    let mi = m as usize;
    let n = indices.len();
    let originals: Vec<ModalityInput> = indices.iter().map(|&i| dataset.items[i].input(m).clone()).collect();
    let mut augmented = Vec::with_capacity(n);
    let mut intra_specs = Vec::with_capacity(n);
    let mut intra_vectors = Vec::with_capacity(n);
    for x in &originals {
        let (spec, vector) = samplers.intra[mi].sample();
        augmented.push(apply(&spec, x)?);
        intra_specs.push(spec);
        intra_vectors.push(vector);
    }
    let second_view = match config.intra_mode {
        IntraMode::Invariant => Some(
            originals
                .iter()
                .map(|x| apply(&samplers.intra[mi].sample_spec(), x))
                .collect::<Result<Vec<_>>>()?,
        ),
        IntraMode::Equivariant => None,
    };
    let per_item = match config.inter_anchor {
        InterAnchor::Centroid => config.centroids,
        _ => 1,
    };
    let inter_vectors = match config.inter_anchor {
        InterAnchor::Centroid => (0..n * per_item).map(|_| samplers.inter[mi].sample().1).collect(),
        // unused by the other anchors; kept so the stream stays aligned
        _ => intra_vectors.clone(),
    };
    Ok(ModalityBatch {
        modality: m,
        originals,
        augmented,
        intra_specs,
        intra_vectors,
        second_view,
        inter_vectors,
        per_item,
    })
}

/// Draws fresh augmentations for the items at `indices`.
pub fn assemble_batch(
    dataset: &PairedDataset,
    indices: &[usize],
    samplers: &mut Samplers,
    config: &TrainConfig,
) -> Result<Batch> {
    if indices.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if let Some(&i) = indices.iter().find(|&&i| i >= dataset.len()) {
        return Err(Error::Bounds(format!("item {i} of {}", dataset.len())));
    }
    Ok(Batch {
        indices: indices.to_vec(),
        audio: modality_batch(dataset, indices, Modality::Audio, samplers, config)?,
        visual: modality_batch(dataset, indices, Modality::Visual, samplers, config)?,
    })
}

/// Scalar nodes of one step's objective.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: Var,
    pub inter: Var,
    pub intra_a: Var,
    pub intra_v: Var,
}

impl LossNodes {
    pub fn output(&self, tape: &Tape) -> LossOutput {
        let v = |x: Var| tape.value(x).values()[0];
        LossOutput {
            total: v(self.total),
            components: LossComponents {
                inter: v(self.inter),
                intra_a: v(self.intra_a),
                intra_v: v(self.intra_v),
            },
        }
    }
}

fn refs(xs: &[ModalityInput]) -> Vec<&ModalityInput> {
    xs.iter().collect()
}

/// Intra-modal loss and inter-modal embeddings of one modality.
fn modality_graph(tape: &mut Tape, model: &Model, b: &ModalityBatch, config: &TrainConfig) -> Result<(Var, Var)> {
    let branch = model.branch(b.modality);
    let store = &model.params;
    let tokens = branch.encoder.config.tokens();
    let n = b.originals.len();

    let h = branch.encoder.forward(tape, store, &refs(&b.originals))?;
    let h_aug = branch.encoder.forward(tape, store, &refs(&b.augmented))?;
    let pooled_aug = tape.group_mean(h_aug, tokens)?;

    let needs_hat = config.intra_mode == IntraMode::Equivariant || config.inter_anchor == InterAnchor::Equivariant;
    let h_hat = if needs_hat {
        let t = tape.input(vectors_tensor(&b.intra_vectors, branch.predictor.aug_dim)?);
        Some(branch.predictor.forward(tape, store, h, tokens, t, 1)?)
    } else {
        None
    };

    let z_aug = branch.intra.forward(tape, store, pooled_aug)?;
    let intra = match config.intra_mode {
        IntraMode::Equivariant => {
            let z_hat = branch.intra.forward(tape, store, h_hat.expect("computed above"))?;
            intra_loss_var(tape, z_hat, z_aug, config.temperature)?
        }
        IntraMode::Invariant => {
            let second = b
                .second_view
                .as_ref()
                .ok_or_else(|| Error::contract("invariant intra mode needs a second augmented view"))?;
            let h2 = branch.encoder.forward(tape, store, &refs(second))?;
            let p2 = tape.group_mean(h2, tokens)?;
            let z2 = branch.intra.forward(tape, store, p2)?;
            intra_loss_var(tape, z_aug, z2, config.temperature)?
        }
    };

    let rep = match config.inter_anchor {
        InterAnchor::Original => tape.group_mean(h, tokens)?,
        InterAnchor::Augmented => pooled_aug,
        InterAnchor::Equivariant => h_hat.expect("computed above"),
        InterAnchor::Centroid => {
            if b.inter_vectors.len() != n * b.per_item {
                return Err(Error::contract("centroid vectors are not aligned with the batch"));
            }
            let t = tape.input(vectors_tensor(&b.inter_vectors, branch.predictor.aug_dim)?);
            branch.predictor.centroid(tape, store, h, tokens, t, b.per_item)?
        }
    };
    let z_inter = branch.inter.forward(tape, store, rep)?;
    Ok((intra, z_inter))
}

/// Records the whole objective of one batch on `tape`.
pub fn build_loss(tape: &mut Tape, model: &Model, batch: &Batch, config: &TrainConfig) -> Result<LossNodes> {
    let (intra_a, za) = modality_graph(tape, model, &batch.audio, config)?;
    let (intra_v, zv) = modality_graph(tape, model, &batch.visual, config)?;
    let inter = inter_loss_var(tape, za, zv, config.temperature)?;
    let total = total_loss_var(tape, inter, intra_a, intra_v, &config.weights())?;
    Ok(LossNodes {
        total,
        inter,
        intra_a,
        intra_v,
    })
}

/// Forward, backward and one AdamW update.
///
/// Only parameters that receive a gradient are updated: a zero loss weight
/// leaves the parameters exclusive to that term untouched.
pub fn train_step(model: &mut Model, optimizer: &AdamW, batch: &Batch, config: &TrainConfig, lr: f64) -> Result<LossOutput> {
    let mut tape = Tape::new();
    let nodes = build_loss(&mut tape, model, batch, config)?;
    let out = nodes.output(&tape);
    if !out.total.is_finite() {
        return Err(Error::contract(format!("non-finite loss {out:?}")));
    }
    let grads = tape.backward(nodes.total)?;
    let active: Vec<ParamId> = grads.params().into_iter().filter(|(_, g)| g.is_some()).map(|(id, _)| id).collect();
    model.params.absorb(&grads);
    optimizer.step_subset(&mut model.params, lr, &active)?;
    Ok(out)
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_inter: f64,
    pub loss_intra_a: f64,
    pub loss_intra_v: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// JSON-lines metrics file; appended to when resuming.
    pub metrics: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Checkpoint every this many steps (0: only at the end of the run).
    pub checkpoint_every: u64,
    /// Stop after this global step instead of the end of the schedule.
    pub stop_at: Option<u64>,
}

/// A model together with everything needed to continue training it.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: AdamW,
    pub schedule: CosineSchedule,
    pub samplers: Samplers,
    /// Completed optimizer steps.
    pub step: u64,
    pub items: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, items: usize) -> Result<Self> {
        config.validate()?;
        if items < config.batch_size {
            return Err(Error::config(format!("{items} items cannot fill a batch of {}", config.batch_size)));
        }
        let model = Model::new(config.model_config(), derive_seed(config.seed, TAG_INIT))?;
        Ok(Trainer {
            optimizer: config.optimizer(),
            schedule: config.schedule(items)?,
            samplers: Samplers::new(&config),
            model,
            config,
            step: 0,
            items,
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.config.steps_per_epoch(self.items)
    }

    pub fn total_steps(&self) -> u64 {
        self.schedule.total_steps
    }

    pub fn epoch(&self) -> u64 {
        self.step / self.steps_per_epoch()
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// Item order of an epoch: a permutation keyed by `(seed, epoch)`.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, TAG_SHUFFLE));
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..self.items).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Dataset indices of the next batch.
    pub fn next_indices(&self) -> Vec<usize> {
        let per = self.steps_per_epoch();
        let pos = (self.step % per) as usize * self.config.batch_size;
        self.epoch_order(self.epoch())[pos..pos + self.config.batch_size].to_vec()
    }

    fn check_dataset(&self, dataset: &PairedDataset) -> Result<()> {
        if dataset.len() != self.items {
            return Err(Error::contract(format!(
                "trainer was set up for {} items, dataset has {}",
                self.items,
                dataset.len()
            )));
        }
        Ok(())
    }

    /// Assembles the next batch and takes one optimizer step.
    pub fn step(&mut self, dataset: &PairedDataset) -> Result<StepRecord> {
        self.check_dataset(dataset)?;
        if self.is_done() {
            return Err(Error::contract("training schedule is complete"));
        }
        let batch = assemble_batch(dataset, &self.next_indices(), &mut self.samplers, &self.config)?;
        let lr = self.schedule.lr(self.step)?;
        let out = train_step(&mut self.model, &self.optimizer, &batch, &self.config, lr)?;
        let record = StepRecord {
            step: self.step,
            epoch: self.epoch(),
            lr,
            loss_total: out.total,
            loss_inter: out.components.inter,
            loss_intra_a: out.components.intra_a,
            loss_intra_v: out.components.intra_v,
        };
        self.step += 1;
        Ok(record)
    }

    /// Steps until the schedule (or `opts.stop_at`) ends.
    pub fn run(&mut self, dataset: &PairedDataset, opts: &RunOptions) -> Result<Vec<StepRecord>> {
        self.check_dataset(dataset)?;
        let end = opts.stop_at.unwrap_or(u64::MAX).min(self.total_steps());
        let mut log = match &opts.metrics {
            Some(path) => Some(open_metrics(path, self.step > 0)?),
            None => None,
        };
        if let Some(dir) = &opts.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut records = Vec::new();
        while self.step < end {
            let r = self.step(dataset)?;
            if let Some((path, w)) = log.as_mut() {
                let line = serde_json::to_string(&r).expect("record serializes");
                writeln!(w, "{line}").map_err(|e| Error::io(&*path, e))?;
            }
            records.push(r);
            let periodic = opts.checkpoint_every > 0 && self.step.is_multiple_of(opts.checkpoint_every);
            if periodic || self.step == end {
                if let Some(dir) = &opts.checkpoint_dir {
                    save_checkpoint(&self.checkpoint(), &checkpoint_path(dir, self.step))?;
                }
            }
        }
        if let Some((path, mut w)) = log {
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(records)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.restore()
    }
}

/// `dir/step-NNNNNN.ckpt`.
pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:06}.ckpt"))
}

fn open_metrics(path: &Path, append: bool) -> Result<(PathBuf, BufWriter<File>)> {
    let f = if append {
        OpenOptions::new().create(true).append(true).open(path)
    } else {
        File::create(path)
    };
    let f = f.map_err(|e| Error::io(path, e))?;
    Ok((path.to_path_buf(), BufWriter::new(f)))
}

/// Generates the configured dataset and trains on it from scratch.
pub fn train_run(config: &TrainConfig, opts: &RunOptions) -> Result<(Trainer, Vec<StepRecord>)> {
    config.validate()?;
    let dataset = super::data::generate_synthetic_pairs(&config.data_config(), &config.model_config())?;
    let mut trainer = Trainer::new(config.clone(), dataset.len())?;
    let records = trainer.run(&dataset, opts)?;
    Ok((trainer, records))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::Scope;
    use crate::pipeline::data::generate_synthetic_pairs;

    /// 64 items, 8 steps per epoch, small model.
    pub(crate) fn tiny() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            warmup_epochs: 1,
            classes: 4,
            samples_per_class: 16,
            centroids: 2,
            embed_dim: 16,
            depth: 1,
            heads: 2,
            proj_hidden: 16,
            proj_dim: 8,
            ..TrainConfig::default()
        }
    }

    pub(crate) fn tiny_data(config: &TrainConfig) -> PairedDataset {
        generate_synthetic_pairs(&config.data_config(), &config.model_config()).unwrap()
    }

    #[test]
    fn config_json_round_trip() {
        let mut c = tiny();
        c.temperature = 0.1 + 0.2;
        c.inter_anchor = InterAnchor::Augmented;
        let back = TrainConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(TrainConfig::from_json("{}").unwrap(), TrainConfig::default());
    }

    #[test]
    fn unknown_or_invalid_keys_are_config_errors() {
        assert!(matches!(TrainConfig::from_json(r#"{"learning_rate": 1}"#), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::from_json(r#"{"epochs": 0}"#), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::from_json(r#"{"weight_inter": -1}"#), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::from_json(r#"{"inter_anchor": "median"}"#), Err(Error::Config(_))));
    }

    #[test]
    fn derived_seeds_differ_per_tag() {
        let seeds: std::collections::BTreeSet<u64> = (1..=4).map(|t| derive_seed(0, t)).collect();
        assert_eq!(seeds.len(), 4);
        assert_ne!(derive_seed(0, 1), derive_seed(1, 1));
    }

    #[test]
    fn one_epoch_visits_every_item_once() {
        let config = tiny();
        let data = tiny_data(&config);
        let mut t = Trainer::new(config, data.len()).unwrap();
        assert_eq!(t.steps_per_epoch(), 8);
        let mut seen = Vec::new();
        let mut records = Vec::new();
        while t.step < 8 {
            seen.extend(t.next_indices());
            records.push(t.step(&data).unwrap());
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..64).collect::<Vec<_>>());
        assert!(records.iter().all(|r| r.epoch == 0));
        assert_eq!(t.epoch(), 1);
        assert_ne!(t.epoch_order(0), t.epoch_order(1));
    }

    #[test]
    fn incomplete_batch_is_dropped() {
        let config = TrainConfig {
            batch_size: 10,
            ..tiny()
        };
        assert_eq!(config.steps_per_epoch(64), 6);
    }

    #[test]
    fn overfits_a_fixed_batch() {
        let config = TrainConfig {
            batch_size: 4,
            ..tiny()
        };
        let data = tiny_data(&config);
        let mut model = Model::new(config.model_config(), 1).unwrap();
        let mut samplers = Samplers::new(&config);
        let batch = assemble_batch(&data, &[0, 1, 2, 3], &mut samplers, &config).unwrap();
        let opt = config.optimizer();
        let losses: Vec<f64> = (0..50)
            .map(|_| train_step(&mut model, &opt, &batch, &config, 3e-4).unwrap().total)
            .collect();
        let smooth: Vec<f64> = losses.chunks(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
        for w in smooth.windows(2) {
            assert!(w[1] < w[0], "{smooth:?}");
        }
        assert!(losses[49] < 0.5 * losses[0], "{} -> {}", losses[0], losses[49]);
    }

    #[test]
    fn zero_intra_weights_leave_intra_heads_alone() {
        let config = TrainConfig {
            weight_intra_a: 0.0,
            weight_intra_v: 0.0,
            batch_size: 4,
            ..tiny()
        };
        let data = tiny_data(&config);
        let mut model = Model::new(config.model_config(), 2).unwrap();
        let batch = assemble_batch(&data, &[3, 7, 9, 12], &mut Samplers::new(&config), &config).unwrap();
        let heads: Vec<ParamId> = Modality::ALL
            .iter()
            .flat_map(|&m| model.head(m, Scope::Intra).params())
            .collect();

        let mut tape = Tape::new();
        let nodes = build_loss(&mut tape, &model, &batch, &config).unwrap();
        let grads = tape.backward(nodes.total).unwrap();
        for (id, g) in grads.params() {
            assert_eq!(g.is_none(), heads.contains(&id), "{}", model.params.get(id).name);
        }

        let before = model.clone();
        let out = train_step(&mut model, &config.optimizer(), &batch, &config, 1e-3).unwrap();
        assert!(out.components.intra_a > 0.0);
        for id in model.params.ids() {
            let same = model.params.get(id).tensor.values() == before.params.get(id).tensor.values();
            assert_eq!(same, heads.contains(&id), "{}", model.params.get(id).name);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let config = tiny();
        let data = tiny_data(&config);
        let run = || {
            let mut t = Trainer::new(config.clone(), data.len()).unwrap();
            let r = t.run(&data, &RunOptions { stop_at: Some(3), ..Default::default() }).unwrap();
            (r, t.model)
        };
        let (ra, ma) = run();
        let (rb, mb) = run();
        assert_eq!(ra, rb);
        for id in ma.params.ids() {
            assert_eq!(ma.params.get(id).tensor.values(), mb.params.get(id).tensor.values());
        }
    }

    #[test]
    fn invariant_mode_and_other_anchors_train() {
        let data = tiny_data(&tiny());
        for (mode, anchor) in [
            (IntraMode::Invariant, InterAnchor::Original),
            (IntraMode::Equivariant, InterAnchor::Equivariant),
            (IntraMode::Invariant, InterAnchor::Augmented),
        ] {
            let config = TrainConfig {
                intra_mode: mode,
                inter_anchor: anchor,
                ..tiny()
            };
            let mut t = Trainer::new(config, data.len()).unwrap();
            let r = t.step(&data).unwrap();
            assert!(r.loss_total.is_finite());
        }
    }

    #[test]
    fn batch_validation() {
        let config = tiny();
        let data = tiny_data(&config);
        let mut samplers = Samplers::new(&config);
        let batch = assemble_batch(&data, &[5, 6, 40], &mut samplers, &config).unwrap();
        batch.validate(&data).unwrap();
        assert_eq!(batch.audio.inter_vectors.len(), 3 * config.centroids);

        let mut swapped = batch.clone();
        swapped.visual.originals.swap(0, 1);
        assert!(matches!(swapped.validate(&data), Err(Error::Contract(_))));
        let mut short = batch.clone();
        short.audio.inter_vectors.pop();
        assert!(matches!(short.validate(&data), Err(Error::Contract(_))));
        assert!(matches!(assemble_batch(&data, &[64], &mut samplers, &config), Err(Error::Bounds(_))));
        assert!(matches!(assemble_batch(&data, &[], &mut samplers, &config), Err(Error::Empty(_))));
    }

    #[test]
    fn finished_schedule_refuses_more_steps() {
        let config = TrainConfig {
            epochs: 1,
            warmup_epochs: 0,
            ..tiny()
        };
        let data = tiny_data(&config);
        let mut t = Trainer::new(config, data.len()).unwrap();
        assert_eq!(t.run(&data, &RunOptions::default()).unwrap().len(), 8);
        assert!(t.is_done());
        assert!(t.step(&data).is_err());
        assert!(t.run(&data, &RunOptions::default()).unwrap().is_empty());
    }
}
