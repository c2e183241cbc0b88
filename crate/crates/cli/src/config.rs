//! Run configuration. Files are TOML with one section per concern; every
//! key has a matching command-line flag and flags win.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use difftext::attention::{Branches, DEFAULT_LAMBDA, DEFAULT_WORDLIST};
use difftext::raster::{Canvas, DEFAULT_CANVAS, DEFAULT_FONT_ID};
use difftext::sampler::{DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_INFER_STEPS, DEFAULT_TRAIN_STEPS};
use difftext::{BBox, CannyParams, GlyphAtlas, GuidanceScales};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    ToyGlyph,
    PointMass,
    Remote,
}

impl Backend {
    pub fn as_str(&self) -> &'static str {
        match self {
            Backend::ToyGlyph => "toy_glyph",
            Backend::PointMass => "point_mass",
            Backend::Remote => "remote",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "toy_glyph" | "toy-glyph" => Ok(Backend::ToyGlyph),
            "point_mass" | "point-mass" => Ok(Backend::PointMass),
            "remote" => Ok(Backend::Remote),
            _ => Err(format!("unknown backend {s:?} (expected toy_glyph, point_mass or remote)")),
        }
    }
}

/// Which region the attention constraint receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// The text box.
    Bbox,
    /// Nothing, which suppresses the constrained tokens everywhere.
    Empty,
}

impl FromStr for MaskMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "bbox" => Ok(MaskMode::Bbox),
            "empty" => Ok(MaskMode::Empty),
            _ => Err(format!("unknown mask mode {s:?} (expected bbox or empty)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JobSection {
    pub text: String,
    pub prompt: String,
    pub bbox: Option<BBox>,
    /// `embedded`, an id from `[fonts]`, or `random` for a seeded pick.
    pub font: String,
    pub backend: Backend,
    pub out_dir: PathBuf,
}

impl Default for JobSection {
    fn default() -> Self {
        Self {
            text: String::new(),
            prompt: "a sign".into(),
            bbox: None,
            font: DEFAULT_FONT_ID.into(),
            backend: Backend::ToyGlyph,
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CanvasSection {
    pub width: u32,
    pub height: u32,
}

impl Default for CanvasSection {
    fn default() -> Self {
        Self {
            width: DEFAULT_CANVAS.width,
            height: DEFAULT_CANVAS.height,
        }
    }
}

impl CanvasSection {
    pub fn canvas(&self) -> Canvas {
        Canvas::new(self.width, self.height)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FontEntry {
    pub image: PathBuf,
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintSection {
    pub enabled: bool,
    pub lambda: f32,
    pub wordlist: Vec<String>,
    /// One word per line; replaces `wordlist` when set.
    pub wordlist_file: Option<PathBuf>,
    pub mask: MaskMode,
    pub unet: bool,
    pub control: bool,
}

impl Default for ConstraintSection {
    fn default() -> Self {
        Self {
            enabled: true,
            lambda: DEFAULT_LAMBDA,
            wordlist: DEFAULT_WORDLIST.iter().map(|s| s.to_string()).collect(),
            wordlist_file: None,
            mask: MaskMode::Bbox,
            unet: true,
            control: true,
        }
    }
}

impl ConstraintSection {
    pub fn branches(&self) -> Branches {
        Branches {
            unet: self.unet,
            control: self.control,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgesSection {
    pub low: u8,
    pub high: u8,
    pub sigma: f64,
}

impl Default for EdgesSection {
    fn default() -> Self {
        let p = CannyParams::default();
        Self {
            low: p.low,
            high: p.high,
            sigma: p.sigma,
        }
    }
}

impl EdgesSection {
    pub fn params(&self) -> CannyParams {
        CannyParams {
            low: self.low,
            high: self.high,
            sigma: self.sigma,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub steps: usize,
    pub seed: u64,
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Write every intermediate latent under `latents/`.
    pub dump_latents: bool,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            steps: DEFAULT_INFER_STEPS,
            seed: 0,
            train_steps: DEFAULT_TRAIN_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            dump_latents: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteSection {
    /// `host:port` of a TCP server.
    pub addr: Option<String>,
    /// Program and arguments of a server speaking over stdin/stdout.
    pub command: Vec<String>,
    pub timeout_secs: f64,
    pub retries: u32,
    /// Parallel TCP connections used when the server is concurrent.
    pub connections: usize,
}

impl Default for RemoteSection {
    fn default() -> Self {
        Self {
            addr: None,
            command: Vec::new(),
            timeout_secs: difftext::wire::DEFAULT_TIMEOUT.as_secs_f64(),
            retries: 2,
            connections: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySection {
    pub channels: usize,
    pub background_seed: u64,
}

impl Default for ToySection {
    fn default() -> Self {
        Self {
            channels: 3,
            background_seed: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchSection {
    pub workers: usize,
}

impl Default for BatchSection {
    fn default() -> Self {
        Self { workers: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub job: JobSection,
    pub canvas: CanvasSection,
    pub fonts: BTreeMap<String, FontEntry>,
    pub guidance: GuidanceScales,
    pub constraint: ConstraintSection,
    pub edges: EdgesSection,
    pub sampler: SamplerSection,
    pub remote: RemoteSection,
    pub toy: ToySection,
    pub batch: BatchSection,
}

/// Parses `x,y,w,h`.
pub fn parse_bbox(s: &str) -> Result<BBox, String> {
    let parts: Vec<u32> = s
        .split(',')
        .map(|p| p.trim().parse::<u32>().map_err(|e| format!("bbox {s:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts.as_slice() {
        &[x, y, w, h] => Ok(BBox::new(x, y, w, h)),
        _ => Err(format!("bbox {s:?} needs four comma-separated integers x,y,w,h")),
    }
}

/// Parses `WxH`.
pub fn parse_canvas(s: &str) -> Result<Canvas, String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("canvas {s:?} must look like 512x512"))?;
    let w = w.trim().parse().map_err(|e| format!("canvas width: {e}"))?;
    let h = h.trim().parse().map_err(|e| format!("canvas height: {e}"))?;
    Ok(Canvas::new(w, h))
}

impl Config {
    /// Reads a TOML config, or the `config` object of a `manifest.json`
    /// written by an earlier run.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            let mut v: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
            let inner = v.get_mut("config").map(serde_json::Value::take).unwrap_or(v);
            serde_json::from_value(inner).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
        } else {
            Self::from_toml(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Checks everything a run needs before any work starts.
    pub fn validate(&self) -> Result<()> {
        let c = self.canvas.canvas();
        if c.width == 0 || c.height == 0 {
            return Err(CliError::config(format!("canvas {c} is empty")));
        }
        if let Some(b) = self.job.bbox {
            b.validate(c).map_err(|e| CliError::config(e.to_string()))?;
        }
        self.guidance.validate().map_err(|e| CliError::config(e.to_string()))?;
        if !(self.constraint.lambda.is_finite() && self.constraint.lambda > 0.0) {
            return Err(CliError::config(format!("lambda must be positive, got {}", self.constraint.lambda)));
        }
        if !(self.constraint.unet || self.constraint.control) {
            return Err(CliError::config("constraint must apply to at least one branch"));
        }
        if self.edges.low > self.edges.high {
            return Err(CliError::config(format!(
                "edge thresholds: low {} exceeds high {}",
                self.edges.low, self.edges.high
            )));
        }
        if !(self.edges.sigma.is_finite() && self.edges.sigma > 0.0) {
            return Err(CliError::config(format!("edge sigma must be positive, got {}", self.edges.sigma)));
        }
        if self.sampler.steps == 0 || self.sampler.steps > self.sampler.train_steps {
            return Err(CliError::config(format!(
                "sampler steps {} must lie in 1..={}",
                self.sampler.steps, self.sampler.train_steps
            )));
        }
        if self.job.font != DEFAULT_FONT_ID && self.job.font != "random" && !self.fonts.contains_key(&self.job.font) {
            return Err(CliError::config(format!("font {:?} is not configured", self.job.font)));
        }
        match self.job.backend {
            Backend::ToyGlyph if self.toy.channels != 1 && self.toy.channels != 3 => {
                return Err(CliError::config("toy backend needs 1 or 3 channels"));
            }
            Backend::Remote if self.remote.addr.is_none() && self.remote.command.is_empty() => {
                return Err(CliError::config("remote backend needs remote.addr or remote.command"));
            }
            Backend::Remote if !(self.remote.timeout_secs.is_finite() && self.remote.timeout_secs > 0.0) => {
                return Err(CliError::config("remote.timeout_secs must be positive"));
            }
            _ => {}
        }
        Ok(())
    }

    /// The constraint wordlist, read from `wordlist_file` when given.
    pub fn wordlist(&self) -> Result<Vec<String>> {
        match &self.constraint.wordlist_file {
            Some(path) => read_wordlist(path),
            None => Ok(self.constraint.wordlist.clone()),
        }
    }

    /// Resolves the configured font, drawing from the atlas pool with the
    /// run seed when the font is `random`. Returns the chosen id too.
    pub fn atlas(&self) -> Result<(String, GlyphAtlas)> {
        let id = if self.job.font == "random" {
            let mut pool: Vec<&String> = self.fonts.keys().collect();
            if pool.is_empty() {
                return Ok((DEFAULT_FONT_ID.into(), GlyphAtlas::embedded()));
            }
            pool.sort();
            let mut rng = ChaCha8Rng::seed_from_u64(self.sampler.seed ^ 0xF0E7);
            pool[rng.random_range(0..pool.len())].clone()
        } else {
            self.job.font.clone()
        };
        if id == DEFAULT_FONT_ID {
            return Ok((id, GlyphAtlas::embedded()));
        }
        let entry = self
            .fonts
            .get(&id)
            .ok_or_else(|| CliError::config(format!("font {id:?} is not configured")))?;
        let atlas = GlyphAtlas::load(&entry.image, &entry.manifest).map_err(|e| CliError::config(e.to_string()))?;
        Ok((id, atlas))
    }
}

pub fn read_wordlist(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("wordlist {}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}
