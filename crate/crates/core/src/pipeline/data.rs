//! Synthetic paired audio-visual data.
//!
//! Each class owns a latent code. Audio and visual templates are linear
//! images of that code through fixed smooth random bases, so the two
//! modalities of a class are correlated; items add independent Gaussian
//! noise per modality.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment::{Modality, ModalityInput};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticPairConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    pub noise_std: f64,
    /// Dimension of the per-class latent code.
    pub latent_dim: usize,
    pub seed: u64,
}

impl Default for SyntheticPairConfig {
    fn default() -> Self {
        SyntheticPairConfig {
            classes: 8,
            samples_per_class: 64,
            noise_std: 0.1,
            latent_dim: 6,
            seed: 0,
        }
    }
}

impl SyntheticPairConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.samples_per_class == 0 || self.latent_dim == 0 {
            return Err(Error::config("samples_per_class and latent_dim must be positive"));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::config(format!("noise_std must be non-negative, got {}", self.noise_std)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedItem {
    pub label: usize,
    pub audio: ModalityInput,
    pub visual: ModalityInput,
}

impl PairedItem {
    pub fn input(&self, m: Modality) -> &ModalityInput {
        match m {
            Modality::Audio => &self.audio,
            Modality::Visual => &self.visual,
        }
    }
}

/// Items are ordered so that item `i` belongs to class `i % classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub classes: usize,
    pub audio_templates: Vec<Tensor>,
    pub visual_templates: Vec<Tensor>,
    pub items: Vec<PairedItem>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.label).collect()
    }

    pub fn templates(&self, m: Modality) -> &[Tensor] {
        match m {
            Modality::Audio => &self.audio_templates,
            Modality::Visual => &self.visual_templates,
        }
    }

    /// Class whose template is closest in Euclidean distance.
    pub fn nearest_template(&self, input: &ModalityInput) -> usize {
        let x = input.data().values();
        let dist = |t: &Tensor| -> f64 { t.values().iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum() };
        let templates = self.templates(input.modality());
        (0..templates.len())
            .min_by(|&a, &b| dist(&templates[a]).total_cmp(&dist(&templates[b])))
            .expect("at least two classes")
    }

    /// The items at `indices`, as a new dataset sharing the templates.
    pub fn subset(&self, indices: &[usize]) -> Result<PairedDataset> {
        let mut items = Vec::with_capacity(indices.len());
        for &i in indices {
            let item = self
                .items
                .get(i)
                .ok_or_else(|| Error::Bounds(format!("item {i} of {}", self.items.len())))?;
            items.push(item.clone());
        }
        Ok(PairedDataset {
            classes: self.classes,
            audio_templates: self.audio_templates.clone(),
            visual_templates: self.visual_templates.clone(),
            items,
        })
    }
}

/// One smooth field: `cos(2π(a·u + b·v) + φ)` over the unit square, with a
/// per-channel colour gain.
struct Basis {
    a: f64,
    b: f64,
    phase: f64,
    gain: [f64; 3],
}

impl Basis {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        Basis {
            a: rng.gen_range(0..=3) as f64,
            b: rng.gen_range(0..=3) as f64,
            phase: rng.gen_range(0.0..2.0 * PI),
            gain: [0; 3].map(|_| rng.sample::<f64, _>(StandardNormal)),
        }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        (2.0 * PI * (self.a * u + self.b * v) + self.phase).cos()
    }
}

fn template(m: Modality, shape: &[usize], bases: &[Basis], code: &[f64]) -> Result<Tensor> {
    let norm = 1.0 / (code.len() as f64).sqrt();
    let (rows, cols) = (shape[0], shape[1]);
    let ch = if m == Modality::Visual { 3 } else { 1 };
    let mut vals = Vec::with_capacity(rows * cols * ch);
    for r in 0..rows {
        for c in 0..cols {
            let (u, v) = (r as f64 / rows as f64, c as f64 / cols as f64);
            for k in 0..ch {
                let s: f64 = bases
                    .iter()
                    .zip(code)
                    .map(|(b, z)| z * b.at(u, v) * if ch == 1 { 1.0 } else { b.gain[k] })
                    .sum();
                vals.push(s * norm);
            }
        }
    }
    Tensor::new(shape.to_vec(), vals)
}

pub fn generate_synthetic_pairs(config: &SyntheticPairConfig, model: &ModelConfig) -> Result<PairedDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let shapes = Modality::ALL.map(|m| model.encoder(m).input_shape);
    let bases: Vec<Vec<Basis>> = Modality::ALL
        .iter()
        .map(|_| (0..config.latent_dim).map(|_| Basis::draw(&mut rng)).collect())
        .collect();
    let mut templates: [Vec<Tensor>; 2] = [Vec::new(), Vec::new()];
    for _ in 0..config.classes {
        let code: Vec<f64> = (0..config.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
        for (mi, m) in Modality::ALL.into_iter().enumerate() {
            templates[mi].push(template(m, &shapes[mi], &bases[mi], &code)?);
        }
    }
    let noise = Normal::new(0.0, config.noise_std).map_err(|e| Error::config(e.to_string()))?;
    let n = config.classes * config.samples_per_class;
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % config.classes;
        let mut noisy = |mi: usize| -> Result<ModalityInput> {
            let t = &templates[mi][label];
            let vals = t.values().iter().map(|v| v + noise.sample(&mut rng)).collect();
            ModalityInput::new(Modality::ALL[mi], Tensor::new(t.shape().to_vec(), vals)?)
        };
        let audio = noisy(0)?;
        let visual = noisy(1)?;
        items.push(PairedItem { label, audio, visual });
    }
    let [audio_templates, visual_templates] = templates;
    Ok(PairedDataset {
        classes: config.classes,
        audio_templates,
        visual_templates,
        items,
    })
}

/// `per_class` further items of every class, drawn after the training
/// items of `config` from the same templates.
pub fn held_out_pairs(config: &SyntheticPairConfig, model: &ModelConfig, per_class: usize) -> Result<PairedDataset> {
    let extended = SyntheticPairConfig {
        samples_per_class: config.samples_per_class + per_class,
        ..config.clone()
    };
    let mut all = generate_synthetic_pairs(&extended, model)?;
    all.items.drain(..config.classes * config.samples_per_class);
    Ok(all)
}
