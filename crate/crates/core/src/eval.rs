//! Zero-shot cross-modal retrieval and linear probing of frozen features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentationSampler, Modality, ModalityInput, SamplerConfig};
use crate::error::{Error, Result};
use crate::losses::InterAnchor;
use crate::model::{default_vector_tensor, vectors_tensor, Model};
use crate::numerics::{AdamW, ParamStore, Tape, Tensor};
use crate::pipeline::PairedDataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    VideoToAudio,
    AudioToVideo,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub gallery_size: usize,
}

/// Rank of the true match of every query (0 = retrieved first).
///
/// Gallery items are ordered by descending cosine similarity; equal scores
/// keep index order.
pub fn ranks(queries: &Tensor, gallery: &Tensor) -> Result<Vec<usize>> {
    if queries.rank() != 2 || gallery.rank() != 2 {
        return Err(Error::contract("retrieval expects N×p embeddings"));
    }
    if queries.shape() != gallery.shape() {
        return Err(Error::Shape {
            op: "retrieval",
            lhs: queries.shape().to_vec(),
            rhs: gallery.shape().to_vec(),
        });
    }
    let n = queries.shape()[0];
    let unit = |t: &Tensor, i: usize| -> Result<Vec<f64>> {
        let r = t.row(i);
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateEmbedding(i));
        }
        Ok(r.iter().map(|v| v / norm).collect())
    };
    let q: Vec<Vec<f64>> = (0..n).map(|i| unit(queries, i)).collect::<Result<_>>()?;
    let g: Vec<Vec<f64>> = (0..n).map(|i| unit(gallery, i)).collect::<Result<_>>()?;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    Ok((0..n)
        .map(|i| {
            let s: Vec<f64> = g.iter().map(|gj| dot(&q[i], gj)).collect();
            (0..n).filter(|&j| s[j] > s[i] || (s[j] == s[i] && j < i)).count()
        })
        .collect())
}

/// Fraction of ranks below `k`.
pub fn recall_at(ranks: &[usize], k: usize) -> f64 {
    ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64
}

/// Both directions over one gallery; row `i` of `za` and `zv` is a pair.
pub fn retrieval_from_embeddings(za: &Tensor, zv: &Tensor) -> Result<[RetrievalReport; 2]> {
    if za.rank() != 2 || za.shape()[0] == 0 {
        return Err(Error::Empty("retrieval set"));
    }
    let n = za.shape()[0];
    let report = |direction, r: Vec<usize>| RetrievalReport {
        direction,
        r1: recall_at(&r, 1),
        r5: recall_at(&r, 5),
        r10: recall_at(&r, 10),
        gallery_size: n,
    };
    Ok([
        report(Direction::VideoToAudio, ranks(zv, za)?),
        report(Direction::AudioToVideo, ranks(za, zv)?),
    ])
}

/// How retrieval embeddings are produced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedOptions {
    pub anchor: InterAnchor,
    /// Augmentation vectors per item for the centroid anchor.
    pub centroids: usize,
    /// Seed of the augmentation vectors drawn for the centroid anchor.
    pub seed: u64,
    /// Items per forward pass.
    pub chunk: usize,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        EmbedOptions {
            anchor: InterAnchor::Centroid,
            centroids: 16,
            seed: 0x5eed,
            chunk: 32,
        }
    }
}

/// Inter-modal embeddings of un-augmented inputs, `N×proj_dim`.
///
/// The original and augmented anchors both pool the encoder output here;
/// the equivariant anchor predicts from the identity vector.
pub fn inter_embeddings(model: &Model, inputs: &[&ModalityInput], opts: &EmbedOptions) -> Result<Tensor> {
    let Some(first) = inputs.first() else {
        return Err(Error::Empty("embedding inputs"));
    };
    let m = first.modality();
    let branch = model.branch(m);
    let tokens = branch.encoder.config.tokens();
    let mut sampler = AugmentationSampler::new(SamplerConfig::default(), m, model.config.extent(m), opts.seed);
    let mut rows = Vec::new();
    for chunk in inputs.chunks(opts.chunk.max(1)) {
        let mut tape = Tape::new();
        let store = &model.params;
        let h = branch.encoder.forward(&mut tape, store, chunk)?;
        let rep = match opts.anchor {
            InterAnchor::Original | InterAnchor::Augmented => tape.group_mean(h, tokens)?,
            InterAnchor::Equivariant => {
                let t = tape.input(default_vector_tensor(m, chunk.len())?);
                branch.predictor.forward(&mut tape, store, h, tokens, t, 1)?
            }
            InterAnchor::Centroid => {
                let s = opts.centroids.max(1);
                let vs: Vec<_> = (0..chunk.len() * s).map(|_| sampler.sample().1).collect();
                let t = tape.input(vectors_tensor(&vs, m.vector_dim())?);
                branch.predictor.centroid(&mut tape, store, h, tokens, t, s)?
            }
        };
        let z = branch.inter.forward(&mut tape, store, rep)?;
        rows.extend_from_slice(tape.value(z).values());
    }
    Tensor::new(vec![inputs.len(), model.config.proj_dim], rows)
}

/// Embeds `dataset` and scores retrieval on consecutive disjoint galleries
/// of `gallery_size` items (the whole set when `None`), averaging recalls.
/// A trailing partial gallery is dropped.
pub fn retrieval_eval(
    model: &Model,
    dataset: &PairedDataset,
    gallery_size: Option<usize>,
    opts: &EmbedOptions,
) -> Result<[RetrievalReport; 2]> {
    if dataset.is_empty() {
        return Err(Error::Empty("retrieval set"));
    }
    let g = gallery_size.unwrap_or(dataset.len());
    if g == 0 || g > dataset.len() {
        return Err(Error::contract(format!("gallery of {g} from {} items", dataset.len())));
    }
    let audio: Vec<&ModalityInput> = dataset.items.iter().map(|i| &i.audio).collect();
    let visual: Vec<&ModalityInput> = dataset.items.iter().map(|i| &i.visual).collect();
    let za = inter_embeddings(model, &audio, opts)?;
    let zv = inter_embeddings(model, &visual, opts)?;
    let p = za.shape()[1];
    let galleries = dataset.len() / g;
    let mut sum = [[0.0; 3]; 2];
    for k in 0..galleries {
        let slice = |t: &Tensor| Tensor::new(vec![g, p], t.values()[k * g * p..(k + 1) * g * p].to_vec());
        let reports = retrieval_from_embeddings(&slice(&za)?, &slice(&zv)?)?;
        for (s, r) in sum.iter_mut().zip(reports) {
            s[0] += r.r1;
            s[1] += r.r5;
            s[2] += r.r10;
        }
    }
    let avg = |d: usize, direction| RetrievalReport {
        direction,
        r1: sum[d][0] / galleries as f64,
        r5: sum[d][1] / galleries as f64,
        r10: sum[d][2] / galleries as f64,
        gallery_size: g,
    };
    Ok([avg(0, Direction::VideoToAudio), avg(1, Direction::AudioToVideo)])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    Audio,
    Visual,
    Concatenated,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub source: FeatureSource,
    pub feature_dim: usize,
}

/// Pooled encoder outputs, `N×d` (or `N×2d` concatenated, audio first).
pub fn pooled_features(model: &Model, dataset: &PairedDataset, source: FeatureSource) -> Result<Tensor> {
    if dataset.is_empty() {
        return Err(Error::Empty("feature set"));
    }
    let pooled = |m: Modality| -> Result<Vec<Vec<f64>>> {
        let branch = model.branch(m);
        let tokens = branch.encoder.config.tokens();
        let mut out = Vec::with_capacity(dataset.len());
        for chunk in dataset.items.chunks(32) {
            let inputs: Vec<&ModalityInput> = chunk.iter().map(|i| i.input(m)).collect();
            let mut tape = Tape::new();
            let h = branch.encoder.forward(&mut tape, &model.params, &inputs)?;
            let p = tape.group_mean(h, tokens)?;
            let v = tape.value(p);
            out.extend((0..chunk.len()).map(|i| v.row(i).to_vec()));
        }
        Ok(out)
    };
    let rows = match source {
        FeatureSource::Audio => pooled(Modality::Audio)?,
        FeatureSource::Visual => pooled(Modality::Visual)?,
        FeatureSource::Concatenated => pooled(Modality::Audio)?
            .into_iter()
            .zip(pooled(Modality::Visual)?)
            .map(|(mut a, v)| {
                a.extend(v);
                a
            })
            .collect(),
    };
    Tensor::from_rows(&rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 300,
            lr: 0.05,
            seed: 0,
        }
    }
}

/// Softmax regression on standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weight: Tensor,
    pub bias: Tensor,
}

fn check_labels(features: &Tensor, labels: &[usize]) -> Result<usize> {
    if features.rank() != 2 || features.shape()[0] != labels.len() {
        return Err(Error::contract(format!(
            "{} labels for features of shape {:?}",
            labels.len(),
            features.shape()
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let distinct = {
        let mut seen = vec![false; classes];
        labels.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::DegenerateLabels(format!("{distinct} distinct label(s)")));
    }
    Ok(classes)
}

impl LinearClassifier {
    /// Full-batch training with Adam on the mean cross-entropy.
    pub fn fit(features: &Tensor, labels: &[usize], config: &ProbeConfig) -> Result<Self> {
        let classes = check_labels(features, labels)?;
        let (n, d) = (features.shape()[0], features.shape()[1]);
        let mut mean = vec![0.0; d];
        let mut scale = vec![0.0; d];
        for i in 0..n {
            for (m, x) in mean.iter_mut().zip(features.row(i)) {
                *m += x / n as f64;
            }
        }
        for i in 0..n {
            for ((s, m), x) in scale.iter_mut().zip(&mean).zip(features.row(i)) {
                *s += (x - m) * (x - m) / n as f64;
            }
        }
        for s in &mut scale {
            *s = if *s > 1e-24 { 1.0 / s.sqrt() } else { 1.0 };
        }
        let mut clf = LinearClassifier {
            weight: Tensor::zeros(&[d, classes]),
            bias: Tensor::zeros(&[classes]),
            mean,
            scale,
        };
        let x = clf.standardize(features)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        let w0 = (0..d * classes).map(|_| normal.sample(&mut rng)).collect();
        let wid = store.add("probe.w", Tensor::new(vec![d, classes], w0)?)?;
        let bid = store.add("probe.b", Tensor::zeros(&[classes]))?;
        let opt = AdamW {
            weight_decay: 0.0,
            beta2: 0.999,
            ..AdamW::default()
        };
        let mask = vec![true; n * classes];
        for _ in 0..config.epochs {
            let mut tape = Tape::new();
            let xv = tape.input(x.clone());
            let (w, b) = (tape.param(&store, wid), tape.param(&store, bid));
            let logits = tape.matmul(xv, w)?;
            let logits = tape.add_row_bias(logits, b)?;
            let loss = tape.cross_entropy_rows(logits, labels, &mask)?;
            crate::numerics::backward(&tape, loss, &mut store)?;
            opt.step(&mut store, config.lr)?;
        }
        clf.weight = store.get(wid).tensor.clone();
        clf.bias = store.get(bid).tensor.clone();
        Ok(clf)
    }

    fn standardize(&self, features: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        if features.rank() != 2 || features.shape()[1] != d {
            return Err(Error::contract(format!("classifier expects N×{d} features, got {:?}", features.shape())));
        }
        let vals = features
            .values()
            .chunks(d)
            .flat_map(|r| r.iter().zip(&self.mean).zip(&self.scale).map(|((x, m), s)| (x - m) * s))
            .collect();
        Tensor::new(features.shape().to_vec(), vals)
    }

    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        let x = self.standardize(features)?;
        let logits = x.matmul(&self.weight)?;
        let c = self.bias.len();
        Ok(logits
            .values()
            .chunks(c)
            .map(|row| {
                (0..c)
                    .map(|j| row[j] + self.bias.values()[j])
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (j, v)| if v > best.1 { (j, v) } else { best })
                    .0
            })
            .collect())
    }

    pub fn accuracy(&self, features: &Tensor, labels: &[usize]) -> Result<f64> {
        let p = self.predict(features)?;
        if p.len() != labels.len() || p.is_empty() {
            return Err(Error::contract("label count does not match features"));
        }
        Ok(p.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / p.len() as f64)
    }
}

/// Fits on frozen pooled features of `train` and scores `test`.
pub fn linear_probe(
    model: &Model,
    train: &PairedDataset,
    test: &PairedDataset,
    source: FeatureSource,
    config: &ProbeConfig,
) -> Result<ProbeReport> {
    let ftrain = pooled_features(model, train, source)?;
    let ltrain = train.labels();
    check_labels(&ftrain, &ltrain)?;
    let ftest = pooled_features(model, test, source)?;
    let clf = LinearClassifier::fit(&ftrain, &ltrain, config)?;
    Ok(ProbeReport {
        accuracy: clf.accuracy(&ftest, &test.labels())?,
        train_accuracy: clf.accuracy(&ftrain, &ltrain)?,
        source,
        feature_dim: ftrain.shape()[1],
    })
}
