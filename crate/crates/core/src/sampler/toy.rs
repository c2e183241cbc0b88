//! Pixel-space denoiser that paints the sketch wherever the constrained
//! cross-attention of the region-descriptor tokens lands.
//!
//! The clean estimate for the edge-conditioned branches is
//! `(1 - m) * background + m * ink(sketch)`, where `m` is the clamped sum of
//! the carrier-token attention columns produced by [`cross_attention`] over
//! fixed positional queries and hashed token keys. Unconditioned branches
//! see the background only. The returned noise points at that estimate.

use std::collections::BTreeSet;
use std::f64::consts::TAU;
use std::sync::{Arc, Mutex, OnceLock};

use image::RgbImage;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::denoisers::point_mass_eps;
use super::{Concurrency, DenoiseError, Denoiser, LatentTensor, NoisePrediction, NoiseSchedule, PredictRequest};
use crate::attention::{cross_attention, AttentionDirective, AttentionMap, AttentionRecord};
use crate::guidance::ConditionSelector;
use crate::raster::{BBox, SketchImage};
use crate::tokens::{match_wordlist, tokenize, Tokenized};

pub const TOY_CONTEXT_LEN: usize = 16;
const KEY_DIM: usize = 8;
/// Query/key jitter; small enough that the carrier share stays near 0.2.
const POSITIONAL_AMPLITUDE: f32 = 0.02;
/// Carrier logit offset giving a softmax share of 0.2 against 15 other slots.
const CARRIER_SALIENCE: f32 = 3.738;
const LAYER_NAME: &str = "toy.cross";

#[derive(Debug, Clone, PartialEq)]
pub struct ToyGlyphConfig {
    pub prompt: String,
    pub wordlist: Vec<String>,
    pub channels: usize,
    pub background_seed: u64,
    pub constraint_enabled: bool,
    pub record_attention: bool,
}

struct CacheEntry {
    directive: Option<AttentionDirective>,
    mass: Arc<Vec<f32>>,
    map: Arc<AttentionMap>,
    edge_x0: OnceLock<LatentTensor>,
    pip_x0: OnceLock<LatentTensor>,
}

pub struct ToyGlyphDenoiser {
    schedule: NoiseSchedule,
    background: LatentTensor,
    ink: Array2<f32>,
    bbox: BBox,
    tokens: Tokenized,
    carriers: BTreeSet<usize>,
    q: Array2<f32>,
    k: Array2<f32>,
    v: Array2<f32>,
    constraint_enabled: bool,
    cache: Mutex<Vec<Arc<CacheEntry>>>,
    records: Option<Mutex<Vec<AttentionRecord>>>,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Smooth seeded field in [-0.45, 0.45] per channel.
fn background_field(channels: usize, h: usize, w: usize, seed: u64) -> LatentTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Array3::<f32>::zeros((channels, h, w));
    for c in 0..channels {
        let waves: Vec<(f64, f64, f64, f64)> = (0..4)
            .map(|_| {
                (
                    rng.random_range(0.2..1.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(0.0..TAU),
                )
            })
            .collect();
        let mut field = vec![0f64; h * w];
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
                field[y * w + x] = waves
                    .iter()
                    .map(|&(a, fu, fv, ph)| a * (TAU * (fu * u + fv * v) + ph).cos())
                    .sum();
            }
        }
        let lo = field.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = (hi - lo).max(1e-12);
        for y in 0..h {
            for x in 0..w {
                out[[c, y, x]] = ((field[y * w + x] - lo) / range * 0.9 - 0.45) as f32;
            }
        }
    }
    LatentTensor(out)
}

fn positional_queries(h: usize, w: usize) -> Array2<f32> {
    let mut q = Array2::<f32>::zeros((h * w, KEY_DIM));
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f32 / w as f32, y as f32 / h as f32);
            let row = y * w + x;
            let feats = [
                (std::f32::consts::TAU * u).sin(),
                (std::f32::consts::TAU * u).cos(),
                (std::f32::consts::TAU * v).sin(),
                (std::f32::consts::TAU * v).cos(),
                (std::f32::consts::TAU * 2.0 * (u + v)).sin(),
                (std::f32::consts::TAU * 3.0 * u).cos(),
                (std::f32::consts::TAU * 3.0 * v).sin(),
            ];
            q[[row, 0]] = 1.0;
            for (i, f) in feats.into_iter().enumerate() {
                q[[row, i + 1]] = POSITIONAL_AMPLITUDE * f;
            }
        }
    }
    q
}

fn token_keys(tokens: &Tokenized, carriers: &BTreeSet<usize>) -> (Array2<f32>, Array2<f32>) {
    let d_t = tokens.context_len();
    let mut k = Array2::<f32>::zeros((d_t, KEY_DIM));
    let mut v = Array2::<f32>::zeros((d_t, 1));
    for (j, tok) in tokens.tokens.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(tok));
        for d in 1..KEY_DIM {
            k[[j, d]] = rng.random_range(-1.0..1.0);
        }
        if carriers.contains(&j) {
            k[[j, 0]] = CARRIER_SALIENCE;
            v[[j, 0]] = 1.0;
        }
    }
    (k, v)
}

impl ToyGlyphDenoiser {
    pub fn new(
        config: &ToyGlyphConfig,
        sketch: &SketchImage,
        bbox: BBox,
        schedule: NoiseSchedule,
    ) -> Result<Self, DenoiseError> {
        if config.channels == 0 {
            return Err(DenoiseError::Invalid("toy latent needs at least one channel".into()));
        }
        bbox.validate(sketch.canvas())
            .map_err(|e| DenoiseError::Invalid(e.to_string()))?;
        let (w, h) = (sketch.width() as usize, sketch.height() as usize);
        let tokens = tokenize(&config.prompt, TOY_CONTEXT_LEN);
        let carriers = match_wordlist(&tokens, &config.wordlist);
        let (k, v) = token_keys(&tokens, &carriers);
        let ink = Array2::from_shape_fn((h, w), |(y, x)| {
            f32::from(sketch.get(x as u32, y as u32)) / 127.5 - 1.0
        });
        Ok(Self {
            schedule,
            background: background_field(config.channels, h, w, config.background_seed),
            ink,
            bbox,
            tokens,
            carriers,
            q: positional_queries(h, w),
            k,
            v,
            constraint_enabled: config.constraint_enabled,
            cache: Mutex::new(Vec::new()),
            records: config.record_attention.then(|| Mutex::new(Vec::new())),
        })
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        self.background.shape3()
    }

    pub fn background(&self) -> &LatentTensor {
        &self.background
    }

    pub fn tokens(&self) -> &Tokenized {
        &self.tokens
    }

    /// Token slots matched against the wordlist, i.e. the set a session
    /// resolves for this prompt.
    pub fn token_indices(&self) -> &BTreeSet<usize> {
        &self.carriers
    }

    /// Carrier attention mass per position before clamping, and the full map.
    pub fn attention(
        &self,
        directive: Option<&AttentionDirective>,
    ) -> Result<(Arc<Vec<f32>>, Arc<AttentionMap>), DenoiseError> {
        let entry = self.entry(directive)?;
        Ok((entry.mass.clone(), entry.map.clone()))
    }

    fn entry(&self, directive: Option<&AttentionDirective>) -> Result<Arc<CacheEntry>, DenoiseError> {
        let mut cache = self.cache.lock().expect("poisoned");
        if let Some(e) = cache.iter().find(|e| e.directive.as_ref() == directive) {
            return Ok(e.clone());
        }
        let [_, h, w] = self.latent_shape();
        let constraint = match directive {
            Some(d) => {
                d.validate(TOY_CONTEXT_LEN)?;
                Some(d.for_layer(h, w)?)
            }
            None => None,
        };
        let (out, map) = cross_attention(self.q.view(), self.k.view(), self.v.view(), constraint.as_ref())?;
        let entry = Arc::new(CacheEntry {
            directive: directive.cloned(),
            mass: Arc::new(out.column(0).to_vec()),
            map: Arc::new(map),
            edge_x0: OnceLock::new(),
            pip_x0: OnceLock::new(),
        });
        if cache.len() >= 4 {
            cache.remove(0);
        }
        cache.push(entry.clone());
        Ok(entry)
    }

    fn blend(&self, mass: &[f32], outline: bool) -> LatentTensor {
        let [channels, _, w] = self.latent_shape();
        let mut weight: Vec<f32> = mass.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        if outline {
            for (x, y) in self.bbox.perimeter() {
                weight[y as usize * w + x as usize] = 1.0;
            }
        }
        let mut out = self.background.clone();
        for c in 0..channels {
            let mut plane = out.values_mut().index_axis_mut(ndarray::Axis(0), c);
            for ((bg, &a), &ink) in plane.iter_mut().zip(&weight).zip(self.ink.iter()) {
                *bg = (1.0 - a) * *bg + a * ink;
            }
        }
        out
    }

    /// The clean image this denoiser steers toward for one condition.
    pub fn clean_estimate(
        &self,
        cond: ConditionSelector,
        directive: Option<&AttentionDirective>,
        t: usize,
    ) -> Result<LatentTensor, DenoiseError> {
        if !cond.takes_directive() {
            return Ok(self.background.clone());
        }
        if self.constraint_enabled && directive.is_none() {
            return Err(DenoiseError::Invalid(format!(
                "constraint enabled but condition {cond} arrived without an attention directive"
            )));
        }
        let entry = self.entry(directive)?;
        if let Some(records) = &self.records {
            if cond == ConditionSelector::EdgeText {
                let [_, h, w] = self.latent_shape();
                records.lock().expect("poisoned").push(AttentionRecord {
                    layer: LAYER_NAME.into(),
                    timestep: t,
                    height: h,
                    width: w,
                    map: entry.map.clone(),
                });
            }
        }
        let x0 = if cond == ConditionSelector::PipText {
            entry.pip_x0.get_or_init(|| self.blend(&entry.mass, true))
        } else {
            entry.edge_x0.get_or_init(|| self.blend(&entry.mass, false))
        };
        Ok(x0.clone())
    }
}

impl Denoiser for ToyGlyphDenoiser {
    fn predict(&self, req: &PredictRequest<'_>) -> Result<NoisePrediction, DenoiseError> {
        if req.z.shape3() != self.latent_shape() {
            return Err(DenoiseError::Invalid(format!(
                "latent shape {:?} does not match toy shape {:?}",
                req.z.shape3(),
                self.latent_shape()
            )));
        }
        let x0 = self.clean_estimate(req.cond, req.directive, req.t)?;
        point_mass_eps(&x0, req.z, self.schedule.alpha_bar(req.t))
    }

    fn concurrency(&self) -> Concurrency {
        Concurrency::Concurrent
    }

    fn take_attention_records(&self) -> Option<Vec<AttentionRecord>> {
        self.records
            .as_ref()
            .map(|r| std::mem::take(&mut *r.lock().expect("poisoned")))
    }
}

/// Maps a pixel-space latent in [-1, 1] to 8-bit RGB. Single-channel
/// latents are replicated to gray.
pub fn latent_to_rgb(z: &LatentTensor) -> Result<RgbImage, DenoiseError> {
    let [c, h, w] = z.shape3();
    if c != 1 && c != 3 {
        return Err(DenoiseError::Invalid(format!("cannot decode {c} channels to RGB")));
    }
    let to_u8 = |v: f32| (((v + 1.0) / 2.0 * 255.0).round()).clamp(0.0, 255.0) as u8;
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = std::array::from_fn(|i| to_u8(z.values()[[if c == 1 { 0 } else { i }, y, x]]));
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    Ok(img)
}
