//! Contrastive image-level prompt guidance.
//!
//! Four denoiser evaluations are combined per step:
//!
//! ```text
//! e' = e_edge + s_pos (e_pip - e_edge)
//! e  = e_uncond + s_cfg (e_text - e_uncond) + s_neg (e' - e_text)
//! ```
//!
//! which expands to the affine combination with coefficients
//! `(1 - s_cfg, s_cfg - s_neg, s_neg (1 - s_pos), s_neg s_pos)`.

use std::collections::BTreeSet;
use std::fmt;

use ndarray::Zip;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampler::{LatentTensor, NoisePrediction};

#[derive(Debug, Error, PartialEq)]
pub enum GuidanceError {
    #[error("prediction shapes disagree: {0:?} vs {1:?}")]
    Shape([usize; 3], [usize; 3]),
    #[error("guidance scale {name} must be finite, got {value}")]
    NonFinite { name: &'static str, value: f64 },
    #[error("condition {0} has a nonzero coefficient but no prediction")]
    Missing(ConditionSelector),
}

/// Which text/edge pair a denoiser evaluation is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionSelector {
    /// Empty prompt, empty edge image.
    Uncond,
    /// Prompt, empty edge image.
    TextOnly,
    /// Prompt, edge image of the sketch.
    EdgeText,
    /// Prompt, edge image with the box outline drawn in.
    PipText,
}

impl ConditionSelector {
    pub const ALL: [ConditionSelector; 4] = [
        ConditionSelector::Uncond,
        ConditionSelector::TextOnly,
        ConditionSelector::EdgeText,
        ConditionSelector::PipText,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Uncond => "uncond",
            Self::TextOnly => "text_only",
            Self::EdgeText => "edge_text",
            Self::PipText => "pip_text",
        }
    }

    /// Conditions that carry an edge image, and therefore the attention
    /// directive.
    pub fn takes_directive(&self) -> bool {
        matches!(self, Self::EdgeText | Self::PipText)
    }
}

impl fmt::Display for ConditionSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ConditionSelector {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown condition {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceScales {
    pub s_cfg: f64,
    pub s_neg: f64,
    pub s_pos: f64,
}

impl Default for GuidanceScales {
    fn default() -> Self {
        Self {
            s_cfg: 7.5,
            s_neg: 2.0,
            s_pos: 0.1,
        }
    }
}

impl GuidanceScales {
    pub fn new(s_cfg: f64, s_neg: f64, s_pos: f64) -> Result<Self, GuidanceError> {
        let s = Self { s_cfg, s_neg, s_pos };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), GuidanceError> {
        for (name, value) in [("s_cfg", self.s_cfg), ("s_neg", self.s_neg), ("s_pos", self.s_pos)] {
            if !value.is_finite() {
                return Err(GuidanceError::NonFinite { name, value });
            }
        }
        Ok(())
    }

    /// Affine weights for `[uncond, text_only, edge_text, pip_text]`.
    pub fn coefficients(&self) -> [f64; 4] {
        [
            1.0 - self.s_cfg,
            self.s_cfg - self.s_neg,
            self.s_neg * (1.0 - self.s_pos),
            self.s_neg * self.s_pos,
        ]
    }

    pub fn coefficient(&self, cond: ConditionSelector) -> f64 {
        self.coefficients()[cond as usize]
    }
}

/// Conditions whose affine coefficient is nonzero, i.e. the denoiser calls
/// a step cannot skip.
pub fn required_conditions(scales: &GuidanceScales) -> BTreeSet<ConditionSelector> {
    ConditionSelector::ALL
        .into_iter()
        .filter(|&c| scales.coefficient(c) != 0.0)
        .collect()
}

fn check_shapes(preds: &[&LatentTensor]) -> Result<(), GuidanceError> {
    let first = preds[0].shape3();
    match preds.iter().find(|p| p.shape3() != first) {
        Some(p) => Err(GuidanceError::Shape(first, p.shape3())),
        None => Ok(()),
    }
}

/// Nested-form composition, evaluated per element in f64.
pub fn compose(
    e_uncond: &NoisePrediction,
    e_text: &NoisePrediction,
    e_edge: &NoisePrediction,
    e_pip: &NoisePrediction,
    s: &GuidanceScales,
) -> Result<NoisePrediction, GuidanceError> {
    check_shapes(&[e_uncond, e_text, e_edge, e_pip])?;
    let mut out = e_uncond.clone();
    let (s_cfg, s_neg, s_pos) = (s.s_cfg, s.s_neg, s.s_pos);
    Zip::from(out.values_mut())
        .and(e_text.values())
        .and(e_edge.values())
        .and(e_pip.values())
        .for_each(|u, &t, &e, &p| {
            let (uf, tf, ef, pf) = (f64::from(*u), f64::from(t), f64::from(e), f64::from(p));
            let eps_prime = ef + s_pos * (pf - ef);
            *u = (uf + s_cfg * (tf - uf) + s_neg * (eps_prime - tf)) as f32;
        });
    Ok(out)
}

/// The expanded affine form of [`compose`]; kept as an independent path for
/// cross-checking.
pub fn compose_affine(
    e_uncond: &NoisePrediction,
    e_text: &NoisePrediction,
    e_edge: &NoisePrediction,
    e_pip: &NoisePrediction,
    s: &GuidanceScales,
) -> Result<NoisePrediction, GuidanceError> {
    check_shapes(&[e_uncond, e_text, e_edge, e_pip])?;
    let [a, b, c, d] = s.coefficients();
    let mut out = e_uncond.clone();
    Zip::from(out.values_mut())
        .and(e_text.values())
        .and(e_edge.values())
        .and(e_pip.values())
        .for_each(|u, &t, &e, &p| {
            *u = (a * f64::from(*u) + b * f64::from(t) + c * f64::from(e) + d * f64::from(p)) as f32;
        });
    Ok(out)
}

/// Composition over the predictions actually evaluated. Skipped conditions
/// enter the nested form as zero; a condition with a nonzero coefficient
/// must be present.
pub fn compose_partial(
    preds: [Option<&NoisePrediction>; 4],
    s: &GuidanceScales,
) -> Result<NoisePrediction, GuidanceError> {
    for (cond, p) in ConditionSelector::ALL.into_iter().zip(&preds) {
        if p.is_none() && s.coefficient(cond) != 0.0 {
            return Err(GuidanceError::Missing(cond));
        }
    }
    let present: Vec<&LatentTensor> = preds.iter().flatten().copied().collect();
    let Some(&template) = present.first() else {
        // every coefficient is zero, which cannot happen since they sum to 1
        return Err(GuidanceError::Missing(ConditionSelector::Uncond));
    };
    check_shapes(&present)?;
    let zeros = LatentTensor::zeros(template.shape3());
    let [u, t, e, p] = preds.map(|p| p.unwrap_or(&zeros));
    compose(u, t, e, p, s)
}
