//! Sampling, application and fixed-length encoding of input augmentations.
//!
//! Both modalities are handled as planar images. A visual frame `H×W×3`
//! is three planes of height `H` and width `W`; an audio spectrogram `T×F`
//! is one plane whose horizontal axis is time (width `T`) and whose
//! vertical axis is frequency (height `F`). "Horizontal" operations (crop
//! x-offset, flip) therefore act on time for audio.
//!
//! Transforms are applied in a fixed order: crop (resized back to the
//! input extent), colour jitter, Gaussian blur, horizontal flip, then
//! grayscale (visual) or time shift (audio), and finally SpecAugment masks.
//!
//! # Vector layout
//!
//! Audio, 24 elements:
//!
//! | index  | content                                             |
//! |--------|-----------------------------------------------------|
//! | 0..4   | crop x/T, y/F, w/T, h/F (all zero when no crop)     |
//! | 4..6   | jitter factors: brightness, contrast (default 1, 1) |
//! | 6..8   | jitter order (default 0, 1)                         |
//! | 8      | jitter applied flag                                 |
//! | 9      | blur sigma (default 0)                              |
//! | 10     | blur applied flag                                   |
//! | 11     | horizontal flip (its own flag)                      |
//! | 12     | time shift / T (default 0)                          |
//! | 13     | time shift applied flag                             |
//! | 14..18 | time mask start/T, end/T, freq mask start/F, end/F  |
//! | 18     | SpecAugment applied flag                            |
//! | 19..24 | reserved, always 0                                  |
//!
//! Visual, 18 elements:
//!
//! | index  | content                                                 |
//! |--------|---------------------------------------------------------|
//! | 0..4   | crop x/W, y/H, w/W, h/H (all zero when no crop)         |
//! | 4..8   | jitter factors: brightness, contrast, saturation, hue   |
//! | 8..12  | jitter order (default 0, 1, 2, 3)                       |
//! | 12     | jitter applied flag                                     |
//! | 13     | blur sigma (default 0)                                  |
//! | 14     | blur applied flag                                       |
//! | 15     | horizontal flip (its own flag)                          |
//! | 16     | grayscale (its own flag)                                |
//! | 17     | reserved, always 0                                      |

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const AUDIO_VECTOR_DIM: usize = 24;
pub const VISUAL_VECTOR_DIM: usize = 18;

/// Value written into SpecAugment-masked cells.
pub const MASK_VALUE: f64 = 0.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Visual,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Audio, Modality::Visual];

    pub fn vector_dim(self) -> usize {
        match self {
            Modality::Audio => AUDIO_VECTOR_DIM,
            Modality::Visual => VISUAL_VECTOR_DIM,
        }
    }

    pub fn jitter_count(self) -> usize {
        match self {
            Modality::Audio => 2,
            Modality::Visual => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Visual => "visual",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audio" | "a" => Ok(Modality::Audio),
            "visual" | "video" | "v" => Ok(Modality::Visual),
            other => Err(Error::config(format!("unknown modality {other:?}"))),
        }
    }
}

/// One input of either modality: audio is `T×F`, visual is `H×W×3`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityInput {
    modality: Modality,
    data: Tensor,
}

impl ModalityInput {
    pub fn new(modality: Modality, data: Tensor) -> Result<Self> {
        let ok = match modality {
            Modality::Audio => data.rank() == 2,
            Modality::Visual => data.rank() == 3 && data.shape()[2] == 3,
        };
        if !ok {
            return Err(Error::contract(format!(
                "{} input must be {}, got {:?}",
                modality.name(),
                if modality == Modality::Audio { "T×F" } else { "H×W×3" },
                data.shape()
            )));
        }
        Ok(ModalityInput { modality, data })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    /// `(width, height)` of the planar view.
    pub fn extent(&self) -> (usize, usize) {
        let s = self.data.shape();
        match self.modality {
            Modality::Audio => (s[0], s[1]),
            Modality::Visual => (s[1], s[0]),
        }
    }

    fn to_planes(&self) -> Planes {
        let (w, h) = self.extent();
        let v = self.data.values();
        match self.modality {
            Modality::Audio => {
                // data[t*F + f] -> plane[f][t]
                let mut p = vec![0.0; w * h];
                for t in 0..w {
                    for f in 0..h {
                        p[f * w + t] = v[t * h + f];
                    }
                }
                Planes { w, h, data: vec![p] }
            }
            Modality::Visual => {
                let mut planes = vec![vec![0.0; w * h]; 3];
                for (i, px) in v.chunks(3).enumerate() {
                    for c in 0..3 {
                        planes[c][i] = px[c];
                    }
                }
                Planes { w, h, data: planes }
            }
        }
    }

    fn from_planes(modality: Modality, p: &Planes) -> Self {
        let (w, h) = (p.w, p.h);
        let (shape, values) = match modality {
            Modality::Audio => {
                let mut v = vec![0.0; w * h];
                for t in 0..w {
                    for f in 0..h {
                        v[t * h + f] = p.data[0][f * w + t];
                    }
                }
                (vec![w, h], v)
            }
            Modality::Visual => {
                let mut v = vec![0.0; w * h * 3];
                for i in 0..w * h {
                    for c in 0..3 {
                        v[i * 3 + c] = p.data[c][i];
                    }
                }
                (vec![h, w, 3], v)
            }
        };
        ModalityInput {
            modality,
            data: Tensor::new(shape, values).expect("plane dimensions are consistent"),
        }
    }
}

#[derive(Clone, Debug)]
struct Planes {
    w: usize,
    h: usize,
    data: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterSpec {
    /// brightness, contrast (audio) or brightness, contrast, saturation, hue (visual)
    pub factors: Vec<f64>,
    /// Application order as indices into `factors`.
    pub order: Vec<usize>,
    pub applied: bool,
}

impl JitterSpec {
    fn identity(modality: Modality) -> Self {
        let n = modality.jitter_count();
        let mut factors = vec![1.0; n];
        if n == 4 {
            factors[3] = 0.0;
        }
        JitterSpec {
            factors,
            order: (0..n).collect(),
            applied: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurSpec {
    pub sigma: f64,
    pub applied: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeShiftSpec {
    /// Circular shift along time, in frames.
    pub shift: i64,
    pub applied: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecAugSpec {
    /// Half-open masked time interval.
    pub time_mask: (usize, usize),
    /// Half-open masked frequency interval.
    pub freq_mask: (usize, usize),
    pub applied: bool,
}

/// A complete description of the augmentation applied to one input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub modality: Modality,
    /// Width of the planar view this was sampled for.
    pub width: usize,
    /// Height of the planar view this was sampled for.
    pub height: usize,
    /// `None` keeps the whole input (identity).
    pub rrc: Option<CropRect>,
    pub jitter: JitterSpec,
    pub blur: BlurSpec,
    pub hflip: bool,
    /// Visual only.
    pub grayscale: bool,
    /// Audio only.
    pub time_shift: Option<TimeShiftSpec>,
    /// Audio only.
    pub specaug: Option<SpecAugSpec>,
}

impl AugmentationSpec {
    /// Identity augmentation for an input of the given planar extent.
    pub fn identity(modality: Modality, width: usize, height: usize) -> Self {
        let audio = modality == Modality::Audio;
        AugmentationSpec {
            modality,
            width,
            height,
            rrc: None,
            jitter: JitterSpec::identity(modality),
            blur: BlurSpec {
                sigma: 0.0,
                applied: false,
            },
            hflip: false,
            grayscale: false,
            time_shift: audio.then_some(TimeShiftSpec {
                shift: 0,
                applied: false,
            }),
            specaug: audio.then_some(SpecAugSpec {
                time_mask: (0, 0),
                freq_mask: (0, 0),
                applied: false,
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bounds = |msg: String| Err(Error::Bounds(msg));
        if let Some(c) = self.rrc {
            if c.w == 0 || c.h == 0 || c.x + c.w > self.width || c.y + c.h > self.height {
                return bounds(format!(
                    "crop {c:?} outside {}×{} extent",
                    self.width, self.height
                ));
            }
        }
        let n = self.modality.jitter_count();
        let mut seen = vec![false; n];
        if self.jitter.factors.len() != n || self.jitter.order.len() != n {
            return bounds(format!("jitter needs {n} factors and {n} order entries"));
        }
        for &o in &self.jitter.order {
            if o >= n || seen[o] {
                return bounds(format!("jitter order {:?} is not a permutation", self.jitter.order));
            }
            seen[o] = true;
        }
        if self.blur.sigma < 0.0 {
            return bounds(format!("negative blur sigma {}", self.blur.sigma));
        }
        match self.modality {
            Modality::Audio => {
                if self.grayscale {
                    return bounds("grayscale is visual-only".into());
                }
                let ts = self.time_shift.as_ref().ok_or_else(|| Error::Bounds("audio spec lacks time shift".into()))?;
                if ts.shift.unsigned_abs() as usize >= self.width.max(1) {
                    return bounds(format!("time shift {} exceeds {} frames", ts.shift, self.width));
                }
                let sa = self.specaug.as_ref().ok_or_else(|| Error::Bounds("audio spec lacks SpecAugment".into()))?;
                let (ts0, ts1) = sa.time_mask;
                let (fs0, fs1) = sa.freq_mask;
                if ts0 > ts1 || ts1 > self.width || fs0 > fs1 || fs1 > self.height {
                    return bounds(format!(
                        "masks {:?}/{:?} outside {}×{}",
                        sa.time_mask, sa.freq_mask, self.width, self.height
                    ));
                }
            }
            Modality::Visual => {
                if self.time_shift.is_some() || self.specaug.is_some() {
                    return bounds("time shift and SpecAugment are audio-only".into());
                }
            }
        }
        Ok(())
    }
}

/// Fixed-length real encoding of an [`AugmentationSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationVector {
    pub modality: Modality,
    pub values: Vec<f64>,
}

/// Encodes a spec using the layout documented at module level.
pub fn parameterize(spec: &AugmentationSpec) -> AugmentationVector {
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    let (w, h) = (spec.width.max(1) as f64, spec.height.max(1) as f64);
    let mut v = Vec::with_capacity(spec.modality.vector_dim());
    match spec.rrc {
        Some(c) => v.extend([c.x as f64 / w, c.y as f64 / h, c.w as f64 / w, c.h as f64 / h]),
        None => v.extend([0.0; 4]),
    }
    v.extend(spec.jitter.factors.iter().copied());
    v.extend(spec.jitter.order.iter().map(|&o| o as f64));
    v.push(flag(spec.jitter.applied));
    v.push(spec.blur.sigma);
    v.push(flag(spec.blur.applied));
    v.push(flag(spec.hflip));
    match spec.modality {
        Modality::Audio => {
            let ts = spec.time_shift.clone().unwrap_or(TimeShiftSpec {
                shift: 0,
                applied: false,
            });
            v.push(ts.shift as f64 / w);
            v.push(flag(ts.applied));
            let sa = spec.specaug.clone().unwrap_or(SpecAugSpec {
                time_mask: (0, 0),
                freq_mask: (0, 0),
                applied: false,
            });
            v.extend([
                sa.time_mask.0 as f64 / w,
                sa.time_mask.1 as f64 / w,
                sa.freq_mask.0 as f64 / h,
                sa.freq_mask.1 as f64 / h,
            ]);
            v.push(flag(sa.applied));
        }
        Modality::Visual => v.push(flag(spec.grayscale)),
    }
    v.resize(spec.modality.vector_dim(), 0.0);
    AugmentationVector {
        modality: spec.modality,
        values: v,
    }
}

/// Encoding of the identity spec.
pub fn default_vector(modality: Modality) -> AugmentationVector {
    parameterize(&AugmentationSpec::identity(modality, 1, 1))
}

/// Indices of elements that are exactly 0 or 1 in every vector.
pub fn flag_indices(modality: Modality) -> &'static [usize] {
    match modality {
        Modality::Audio => &[8, 10, 11, 13, 18],
        Modality::Visual => &[12, 14, 15, 16],
    }
}

/// Application probabilities and parameter ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub p_jitter: f64,
    pub p_blur: f64,
    pub p_hflip: f64,
    pub p_grayscale: f64,
    pub p_time_shift: f64,
    pub p_specaug: f64,
    /// Crop area as a fraction of the input area.
    pub crop_scale: (f64, f64),
    /// Crop aspect ratio (width / height).
    pub crop_ratio: (f64, f64),
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub blur_sigma: (f64, f64),
    /// Largest circular time shift as a fraction of the time axis.
    pub max_time_shift: f64,
    /// Largest time-mask width as a fraction of the time axis.
    pub max_time_mask: f64,
    /// Largest frequency-mask width as a fraction of the frequency axis.
    pub max_freq_mask: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            p_jitter: 0.8,
            p_blur: 0.5,
            p_hflip: 0.5,
            p_grayscale: 0.2,
            p_time_shift: 0.5,
            p_specaug: 0.5,
            crop_scale: (0.25, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            blur_sigma: (0.1, 2.0),
            max_time_shift: 0.25,
            max_time_mask: 0.25,
            max_freq_mask: 0.25,
        }
    }
}

impl SamplerConfig {
    /// Every optional augmentation disabled; only the crop remains.
    pub fn crop_only() -> Self {
        SamplerConfig {
            p_jitter: 0.0,
            p_blur: 0.0,
            p_hflip: 0.0,
            p_grayscale: 0.0,
            p_time_shift: 0.0,
            p_specaug: 0.0,
            ..Self::default()
        }
    }
}

/// Seeded source of augmentation specs for one modality.
///
/// Draw `i` uses its own ChaCha stream keyed by `(seed, i)`, so the sampler
/// state is just the draw counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSampler {
    pub config: SamplerConfig,
    pub modality: Modality,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub draws: u64,
}

impl AugmentationSampler {
    /// `extent` is the planar `(width, height)` of the inputs.
    pub fn new(config: SamplerConfig, modality: Modality, extent: (usize, usize), seed: u64) -> Self {
        AugmentationSampler {
            config,
            modality,
            width: extent.0,
            height: extent.1,
            seed,
            draws: 0,
        }
    }

    pub fn sample_spec(&mut self) -> AugmentationSpec {
        let spec = self.spec_at(self.draws);
        self.draws += 1;
        spec
    }

    pub fn sample(&mut self) -> (AugmentationSpec, AugmentationVector) {
        let spec = self.sample_spec();
        let vec = parameterize(&spec);
        (spec, vec)
    }

    /// Draw `index`, without advancing the counter.
    pub fn spec_at(&self, index: u64) -> AugmentationSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let c = &self.config;
        let (w, h) = (self.width, self.height);
        let mut spec = AugmentationSpec::identity(self.modality, w, h);
        spec.rrc = Some(sample_crop(&mut rng, w, h, c));
        if rng.gen_bool(c.p_jitter) {
            let mut factors = vec![
                rng.gen_range(1.0 - c.brightness..=1.0 + c.brightness),
                rng.gen_range(1.0 - c.contrast..=1.0 + c.contrast),
            ];
            if self.modality == Modality::Visual {
                factors.push(rng.gen_range(1.0 - c.saturation..=1.0 + c.saturation));
                factors.push(rng.gen_range(-c.hue..=c.hue));
            }
            let mut order: Vec<usize> = (0..factors.len()).collect();
            order.shuffle(&mut rng);
            spec.jitter = JitterSpec {
                factors,
                order,
                applied: true,
            };
        }
        if rng.gen_bool(c.p_blur) {
            spec.blur = BlurSpec {
                sigma: rng.gen_range(c.blur_sigma.0..=c.blur_sigma.1),
                applied: true,
            };
        }
        spec.hflip = rng.gen_bool(c.p_hflip);
        match self.modality {
            Modality::Visual => spec.grayscale = rng.gen_bool(c.p_grayscale),
            Modality::Audio => {
                if rng.gen_bool(c.p_time_shift) {
                    let max = ((w as f64 * c.max_time_shift) as i64).clamp(0, w as i64 - 1);
                    spec.time_shift = Some(TimeShiftSpec {
                        shift: rng.gen_range(-max..=max),
                        applied: true,
                    });
                }
                if rng.gen_bool(c.p_specaug) {
                    let tw = rng.gen_range(1..=((w as f64 * c.max_time_mask) as usize).max(1));
                    let fw = rng.gen_range(1..=((h as f64 * c.max_freq_mask) as usize).max(1));
                    let t0 = rng.gen_range(0..=w - tw.min(w));
                    let f0 = rng.gen_range(0..=h - fw.min(h));
                    spec.specaug = Some(SpecAugSpec {
                        time_mask: (t0, t0 + tw.min(w)),
                        freq_mask: (f0, f0 + fw.min(h)),
                        applied: true,
                    });
                }
            }
        }
        spec
    }
}

fn sample_crop(rng: &mut ChaCha8Rng, w: usize, h: usize, c: &SamplerConfig) -> CropRect {
    let area = (w * h) as f64;
    let (lr0, lr1) = (c.crop_ratio.0.ln(), c.crop_ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.gen_range(c.crop_scale.0..=c.crop_scale.1);
        let ratio = rng.gen_range(lr0..=lr1).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let x = rng.gen_range(0..=w - cw);
            let y = rng.gen_range(0..=h - ch);
            return CropRect { x, y, w: cw, h: ch };
        }
    }
    CropRect { x: 0, y: 0, w, h }
}

/// Applies `spec` to `input`; the output keeps the input shape.
pub fn apply(spec: &AugmentationSpec, input: &ModalityInput) -> Result<ModalityInput> {
    if spec.modality != input.modality() {
        return Err(Error::contract(format!(
            "{} spec applied to {} input",
            spec.modality.name(),
            input.modality().name()
        )));
    }
    if (spec.width, spec.height) != input.extent() {
        return Err(Error::Bounds(format!(
            "spec extent {}×{} does not match input extent {:?}",
            spec.width,
            spec.height,
            input.extent()
        )));
    }
    spec.validate()?;
    let mut p = input.to_planes();
    if let Some(c) = spec.rrc {
        p = resized_crop(&p, c);
    }
    if spec.jitter.applied {
        for &op in &spec.jitter.order {
            let f = spec.jitter.factors[op];
            match op {
                0 => brightness(&mut p, f),
                1 => contrast(&mut p, f),
                2 => saturation(&mut p, f),
                _ => hue(&mut p, f),
            }
        }
    }
    if spec.blur.applied && spec.blur.sigma > 0.0 {
        gaussian_blur(&mut p, spec.blur.sigma);
    }
    if spec.hflip {
        for plane in &mut p.data {
            for row in plane.chunks_mut(p.w) {
                row.reverse();
            }
        }
    }
    if spec.grayscale {
        let g = luminance(&p);
        for plane in &mut p.data {
            plane.copy_from_slice(&g);
        }
    }
    if let Some(ts) = spec.time_shift.as_ref().filter(|t| t.applied) {
        let w = p.w as i64;
        for plane in &mut p.data {
            for row in plane.chunks_mut(p.w) {
                let src = row.to_vec();
                for (t, v) in row.iter_mut().enumerate() {
                    *v = src[(t as i64 - ts.shift).rem_euclid(w) as usize];
                }
            }
        }
    }
    if let Some(sa) = spec.specaug.as_ref().filter(|s| s.applied) {
        for plane in &mut p.data {
            for f in 0..p.h {
                for t in 0..p.w {
                    let masked = (sa.time_mask.0..sa.time_mask.1).contains(&t)
                        || (sa.freq_mask.0..sa.freq_mask.1).contains(&f);
                    if masked {
                        plane[f * p.w + t] = MASK_VALUE;
                    }
                }
            }
        }
    }
    Ok(ModalityInput::from_planes(spec.modality, &p))
}

/// Crops and resizes back to the plane extent with bilinear sampling on
/// an align-corners grid, so a full-frame crop is an exact copy.
fn resized_crop(p: &Planes, c: CropRect) -> Planes {
    let coord = |i: usize, out: usize, start: usize, len: usize| -> (usize, usize, f64) {
        if out == 1 || len == 1 {
            return (start, start, 0.0);
        }
        let s = start as f64 + i as f64 * (len - 1) as f64 / (out - 1) as f64;
        let lo = (s.floor() as usize).min(start + len - 1);
        let hi = (lo + 1).min(start + len - 1);
        (lo, hi, s - lo as f64)
    };
    let xs: Vec<_> = (0..p.w).map(|i| coord(i, p.w, c.x, c.w)).collect();
    let ys: Vec<_> = (0..p.h).map(|j| coord(j, p.h, c.y, c.h)).collect();
    let data = p
        .data
        .iter()
        .map(|plane| {
            let mut out = vec![0.0; p.w * p.h];
            for (j, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (i, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let at = |x: usize, y: usize| plane[y * p.w + x];
                    let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                    let bot = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                    out[j * p.w + i] = top * (1.0 - fy) + bot * fy;
                }
            }
            out
        })
        .collect();
    Planes {
        w: p.w,
        h: p.h,
        data,
    }
}

fn luminance(p: &Planes) -> Vec<f64> {
    if p.data.len() == 1 {
        return p.data[0].clone();
    }
    (0..p.w * p.h)
        .map(|i| 0.299 * p.data[0][i] + 0.587 * p.data[1][i] + 0.114 * p.data[2][i])
        .collect()
}

fn brightness(p: &mut Planes, f: f64) {
    for v in p.data.iter_mut().flatten() {
        *v *= f;
    }
}

fn contrast(p: &mut Planes, f: f64) {
    let g = luminance(p);
    let mean = g.iter().sum::<f64>() / g.len() as f64;
    for v in p.data.iter_mut().flatten() {
        *v = (*v - mean) * f + mean;
    }
}

fn saturation(p: &mut Planes, f: f64) {
    let g = luminance(p);
    for plane in &mut p.data {
        for (v, gi) in plane.iter_mut().zip(&g) {
            *v = gi + (*v - gi) * f;
        }
    }
}

/// Rotates chroma in YIQ space by `shift` turns.
fn hue(p: &mut Planes, shift: f64) {
    if p.data.len() != 3 {
        return;
    }
    let (s, c) = (2.0 * std::f64::consts::PI * shift).sin_cos();
    for i in 0..p.w * p.h {
        let (r, g, b) = (p.data[0][i], p.data[1][i], p.data[2][i]);
        let y = 0.299 * r + 0.587 * g + 0.114 * b;
        let ci = 0.596 * r - 0.274 * g - 0.322 * b;
        let cq = 0.211 * r - 0.523 * g + 0.312 * b;
        let (i2, q2) = (ci * c - cq * s, ci * s + cq * c);
        p.data[0][i] = y + 0.956 * i2 + 0.621 * q2;
        p.data[1][i] = y - 0.272 * i2 - 0.647 * q2;
        p.data[2][i] = y - 1.106 * i2 + 1.703 * q2;
    }
}

/// Separable Gaussian blur with edge clamping; radius `ceil(2σ)`.
fn gaussian_blur(p: &mut Planes, sigma: f64) {
    let r = (2.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let (w, h) = (p.w as i64, p.h as i64);
    for plane in &mut p.data {
        let src = plane.clone();
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let xx = (x + j as i64 - r).clamp(0, w - 1);
                    acc += kv * src[(y * w + xx) as usize];
                }
                plane[(y * w + x) as usize] = acc;
            }
        }
        let src = plane.clone();
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let yy = (y + j as i64 - r).clamp(0, h - 1);
                    acc += kv * src[(yy * w + x) as usize];
                }
                plane[(y * w + x) as usize] = acc;
            }
        }
    }
}
