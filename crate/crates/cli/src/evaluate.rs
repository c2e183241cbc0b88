//! Recognition-accuracy harness over a JSONL manifest of generated images.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use difftext::eval::{accuracy, mean_norm_edit, EvalRecord, TextRecognizer};
use difftext::io::read_rgb;
use difftext::raster::{place_bbox, render_sketch, Canvas};
use difftext::GlyphAtlas;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result, Stage};

pub const DEFAULT_LANG: &str = "default";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub ground_truth: String,
    #[serde(default)]
    pub prompt: String,
    #[serde(default)]
    pub lang: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecognizedEntry {
    pub image: PathBuf,
    #[serde(alias = "recognized")]
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub edit_accuracy: f64,
    pub n: usize,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Eval(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Eval(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut entries: Vec<ManifestEntry> = read_jsonl(path)?;
    for e in &mut entries {
        if e.image.is_relative() {
            e.image = base.join(&e.image);
        }
    }
    Ok(entries)
}

/// Recognized strings keyed by image path, resolved like manifest paths.
pub fn read_recognized(path: &Path) -> Result<HashMap<PathBuf, String>> {
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(read_jsonl::<RecognizedEntry>(path)?
        .into_iter()
        .map(|r| {
            let image = if r.image.is_relative() { base.join(&r.image) } else { r.image };
            (image, r.text)
        })
        .collect())
}

/// Where recognized text comes from.
pub enum Recognition<'a, R: TextRecognizer> {
    Precomputed(HashMap<PathBuf, String>),
    /// Recognizes each manifest image.
    Live(&'a R),
    /// Recognizes a clean rendering of each ground truth, giving the
    /// recognizer's own ceiling.
    UpperBound(&'a R, Canvas),
}

fn recognize<R: TextRecognizer>(r: &R, img: &RgbImage) -> Result<String> {
    let texts = r.recognize(img).map_err(|e| CliError::backend(Stage::Evaluate, e.to_string()))?;
    Ok(texts.join(" ").trim().to_string())
}

fn clean_rendering(text: &str, canvas: Canvas) -> Result<RgbImage> {
    let atlas = GlyphAtlas::embedded();
    let bbox = place_bbox(text.chars().count(), canvas, 0, None).map_err(|e| CliError::Eval(e.to_string()))?;
    let sketch = render_sketch(text, &atlas, bbox, canvas).map_err(|e| CliError::Eval(e.to_string()))?;
    let rgb = sketch.pixels().iter().flat_map(|&p| [p, p, p]).collect();
    Ok(RgbImage::from_raw(canvas.width, canvas.height, rgb).expect("sizes agree"))
}

/// Per-language metrics. Scores are fractions in [0, 1], or percentages
/// when `percent` is set.
pub fn evaluate<R: TextRecognizer>(
    manifest: &[ManifestEntry],
    recognition: &Recognition<'_, R>,
    percent: bool,
) -> Result<BTreeMap<String, Metrics>> {
    if manifest.is_empty() {
        return Err(CliError::Eval("manifest has no records".into()));
    }
    let mut groups: BTreeMap<String, Vec<EvalRecord>> = BTreeMap::new();
    for entry in manifest {
        let rec = match recognition {
            Recognition::Precomputed(map) => map.get(&entry.image).cloned().ok_or_else(|| {
                CliError::Eval(format!("no recognized text for {}", entry.image.display()))
            })?,
            Recognition::Live(r) => {
                let img = read_rgb(&entry.image).map_err(|e| CliError::Eval(format!("{}: {e}", entry.image.display())))?;
                recognize(*r, &img)?
            }
            Recognition::UpperBound(r, canvas) => recognize(*r, &clean_rendering(&entry.ground_truth, *canvas)?)?,
        };
        let lang = entry.lang.clone().unwrap_or_else(|| DEFAULT_LANG.to_string());
        groups.entry(lang).or_default().push(EvalRecord::new(entry.ground_truth.clone(), rec));
    }
    let scale = if percent { 100.0 } else { 1.0 };
    groups
        .into_iter()
        .map(|(lang, records)| {
            let acc = accuracy(&records).map_err(|e| CliError::Eval(e.to_string()))?;
            let edit = mean_norm_edit(&records).map_err(|e| CliError::Eval(e.to_string()))?;
            Ok((
                lang,
                Metrics {
                    accuracy: acc * scale,
                    edit_accuracy: edit * scale,
                    n: records.len(),
                },
            ))
        })
        .collect()
}

/// Stand-in recognizer type for runs that never recognize live.
pub struct NoRecognizer;

#[derive(Debug, thiserror::Error)]
#[error("no recognizer configured")]
pub struct NoRecognizerError;

impl TextRecognizer for NoRecognizer {
    type Error = NoRecognizerError;

    fn recognize(&self, _: &RgbImage) -> Result<Vec<String>, NoRecognizerError> {
        Err(NoRecognizerError)
    }
}
