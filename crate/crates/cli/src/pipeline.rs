//! Sketch rendering, generation, batch runs and attention dumps.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use difftext::attention::{average_heatmap, AttentionRecord};
use difftext::edges::canny_with;
use difftext::io::{write_grid, write_rgb, write_sketch};
use difftext::raster::{make_pip_edge, make_region_mask, place_bbox, render_sketch, Canvas};
use difftext::sampler::denoisers::PointMassDenoiser;
use difftext::sampler::{
    latent_to_rgb, make_schedule, sample_observed, Denoiser, ToyGlyphConfig, ToyGlyphDenoiser, TOY_CONTEXT_LEN,
};
use difftext::tokens::{match_wordlist, tokenize};
use difftext::wire::{Client, ClientOptions, Op, RemoteDenoiser};
use difftext::{
    AttentionDirective, BBox, EdgeImage, GuidanceScales, LatentTensor, RegionMask, SketchImage,
};
use image::RgbImage;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{Backend, Config, MaskMode};
use crate::error::{CliError, Result, Stage};

/// Sketch, edge map, outlined edge map and region mask derived from a job.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub font: String,
    pub bbox: BBox,
    pub sketch: SketchImage,
    pub edge: EdgeImage,
    pub pip_edge: EdgeImage,
    pub mask: RegionMask,
}

pub fn preprocess(config: &Config) -> Result<Preprocessed> {
    config.validate()?;
    let canvas = config.canvas.canvas();
    let (font, atlas) = config.atlas()?;
    let text = &config.job.text;
    let bbox = place_bbox(text.chars().count(), canvas, config.sampler.seed, config.job.bbox)
        .map_err(|e| CliError::input(Stage::Render, e))?;
    let sketch = render_sketch(text, &atlas, bbox, canvas).map_err(|e| CliError::input(Stage::Render, e))?;
    let edge = canny_with(&sketch, config.edges.params()).map_err(|e| CliError::input(Stage::Edges, e))?;
    let pip_edge = make_pip_edge(&edge, bbox).map_err(|e| CliError::input(Stage::Edges, e))?;
    let mask = make_region_mask(bbox, canvas).map_err(|e| CliError::input(Stage::Render, e))?;
    Ok(Preprocessed {
        font,
        bbox,
        sketch,
        edge,
        pip_edge,
        mask,
    })
}

fn create_dir(dir: &Path, stage: Stage) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(stage, dir, e))
}

fn write_json(path: &Path, value: &impl Serialize, stage: Stage) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(stage, path, e))
}

fn save<E: std::error::Error + Send + Sync + 'static>(
    path: PathBuf,
    stage: Stage,
    write: impl FnOnce(&Path) -> Result<(), E>,
) -> Result<()> {
    write(&path).map_err(|e| CliError::io(stage, path.clone(), e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderOutput {
    pub bbox: BBox,
    pub font: String,
    pub files: Vec<PathBuf>,
}

/// Writes `sketch.png`, `edge.png`, `pip_edge.png` and `mask.png`.
pub fn run_render(config: &Config) -> Result<RenderOutput> {
    let pre = preprocess(config)?;
    let dir = &config.job.out_dir;
    create_dir(dir, Stage::Output)?;
    let files = vec![dir.join("sketch.png"), dir.join("edge.png"), dir.join("pip_edge.png"), dir.join("mask.png")];
    save(files[0].clone(), Stage::Output, |p| write_sketch(p, &pre.sketch))?;
    save(files[1].clone(), Stage::Output, |p| write_grid(p, &pre.edge))?;
    save(files[2].clone(), Stage::Output, |p| write_grid(p, &pre.pip_edge))?;
    save(files[3].clone(), Stage::Output, |p| write_grid(p, &pre.mask))?;
    write_json(
        &dir.join("manifest.json"),
        &json!({"command": "render", "config": config}),
        Stage::Output,
    )?;
    Ok(RenderOutput {
        bbox: pre.bbox,
        font: pre.font,
        files,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintRecord {
    pub enabled: bool,
    pub mask: MaskMode,
    pub mask_pixels: usize,
    pub unet: bool,
    pub control: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub preprocess_ms: f64,
    pub session_ms: f64,
    pub sample_ms: f64,
    pub decode_ms: f64,
    pub total_ms: f64,
}

/// Contents of `metadata.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub text: String,
    pub prompt: String,
    pub seed: u64,
    pub backend: Backend,
    pub font: String,
    pub canvas: Canvas,
    pub bbox: BBox,
    pub scales: GuidanceScales,
    pub lambda: f32,
    pub token_indices: BTreeSet<usize>,
    pub steps: usize,
    pub latent_shape: [usize; 3],
    pub constraint: ConstraintRecord,
    pub timings: Timings,
}

#[derive(Debug)]
pub struct GenerateOutput {
    pub out_dir: PathBuf,
    pub image: RgbImage,
    pub sketch: SketchImage,
    pub bbox: BBox,
    pub metadata: Metadata,
    pub records: Option<Vec<AttentionRecord>>,
}

type Decoder = Box<dyn Fn(&LatentTensor) -> Result<RgbImage> + Send + Sync>;

struct Prepared {
    denoiser: Box<dyn Denoiser>,
    decode: Decoder,
    token_indices: BTreeSet<usize>,
    latent_shape: [usize; 3],
    session: String,
}

fn sketch_latent(sketch: &SketchImage, channels: usize) -> LatentTensor {
    let (w, h) = (sketch.width() as usize, sketch.height() as usize);
    let plane: Vec<f32> = sketch.pixels().iter().map(|&p| f32::from(p) / 127.5 - 1.0).collect();
    let data = (0..channels).flat_map(|_| plane.iter().copied()).collect();
    LatentTensor::from_vec([channels, h, w], data).expect("sizes agree")
}

fn local_decoder() -> Decoder {
    Box::new(|z| latent_to_rgb(z).map_err(|e| CliError::backend(Stage::Decode, e)))
}

fn connect(config: &Config) -> Result<Vec<Arc<Client>>> {
    let r = &config.remote;
    let opts = ClientOptions {
        timeout: Duration::from_secs_f64(r.timeout_secs),
        retries: r.retries,
    };
    if let Some(addr) = &r.addr {
        (0..r.connections.max(1))
            .map(|_| {
                Client::connect_tcp(addr, opts)
                    .map(Arc::new)
                    .map_err(|e| CliError::backend(Stage::Session, e))
            })
            .collect()
    } else {
        let mut cmd = Command::new(&r.command[0]);
        cmd.args(&r.command[1..]);
        let client = Client::spawn(&mut cmd, opts).map_err(|e| CliError::backend(Stage::Session, e))?;
        Ok(vec![Arc::new(client)])
    }
}

fn prepare(config: &Config, pre: &Preprocessed, wordlist: &[String], record_attention: bool) -> Result<Prepared> {
    let schedule = make_schedule(
        config.sampler.train_steps,
        config.sampler.steps,
        config.sampler.beta_start,
        config.sampler.beta_end,
    )
    .map_err(|e| CliError::config(e.to_string()))?;
    let enabled = config.constraint.enabled;
    match config.job.backend {
        Backend::ToyGlyph => {
            let toy = ToyGlyphConfig {
                prompt: config.job.prompt.clone(),
                wordlist: wordlist.to_vec(),
                channels: config.toy.channels,
                background_seed: config.toy.background_seed,
                constraint_enabled: enabled,
                record_attention,
            };
            let d = ToyGlyphDenoiser::new(&toy, &pre.sketch, pre.bbox, schedule)
                .map_err(|e| CliError::backend(Stage::Session, e))?;
            Ok(Prepared {
                token_indices: d.token_indices().clone(),
                latent_shape: d.latent_shape(),
                denoiser: Box::new(d),
                decode: local_decoder(),
                session: "toy".into(),
            })
        }
        Backend::PointMass => {
            if record_attention {
                return Err(CliError::input(Stage::AttnDump, "point_mass backend records no attention"));
            }
            let tokens = tokenize(&config.job.prompt, TOY_CONTEXT_LEN);
            let x0 = sketch_latent(&pre.sketch, config.toy.channels);
            Ok(Prepared {
                token_indices: match_wordlist(&tokens, wordlist),
                latent_shape: x0.shape3(),
                denoiser: Box::new(PointMassDenoiser::new(x0, schedule)),
                decode: local_decoder(),
                session: "point_mass".into(),
            })
        }
        Backend::Remote => {
            let clients = connect(config)?;
            let caps = clients[0]
                .capabilities()
                .map_err(|e| CliError::backend(Stage::Session, e))?;
            if record_attention && !caps.attention_records {
                return Err(CliError::backend(
                    Stage::AttnDump,
                    "remote backend does not advertise attention records",
                ));
            }
            let session = clients[0]
                .init_session(&config.job.prompt, wordlist, &pre.edge, &pre.pip_edge)
                .map_err(|e| CliError::backend(Stage::Session, e))?;
            if !caps.supports(Op::DecodeLatent) {
                return Err(CliError::backend(Stage::Session, "remote backend cannot decode latents"));
            }
            let decoder = clients[0].clone();
            Ok(Prepared {
                token_indices: session.token_indices.clone(),
                latent_shape: session.latent_shape3(),
                session: session.id.clone(),
                denoiser: Box::new(RemoteDenoiser::new(clients, session).map_err(|e| CliError::backend(Stage::Session, e))?),
                decode: Box::new(move |z| decoder.decode_latent(z).map_err(|e| CliError::backend(Stage::Decode, e))),
            })
        }
    }
}

fn ms(d: Duration) -> f64 {
    (d.as_secs_f64() * 1e6).round() / 1e3
}

fn dump_latent(dir: &Path, step: usize, t: usize, z: &LatentTensor) -> Result<()> {
    let stem = dir.join(format!("step_{step:04}"));
    let raw = stem.with_extension("f32");
    fs::write(&raw, z.to_le_bytes()).map_err(|e| CliError::io(Stage::Output, raw, e))?;
    write_json(
        &stem.with_extension("json"),
        &json!({"step": step, "t": t, "shape": z.shape3()}),
        Stage::Output,
    )
}

/// Runs a full generation: preprocess, session, guided sampling, decode and
/// artifact writing (`image.png`, `metadata.json`, `manifest.json`).
pub fn run_generate(config: &Config) -> Result<GenerateOutput> {
    generate(config, false)
}

fn generate(config: &Config, record_attention: bool) -> Result<GenerateOutput> {
    let start = Instant::now();
    if config.job.text.is_empty() {
        return Err(CliError::config("generation needs a nonempty text"));
    }
    let pre = preprocess(config)?;
    let wordlist = config.wordlist()?;
    let preprocess_done = Instant::now();

    let prepared = prepare(config, &pre, &wordlist, record_attention)?;
    let session_done = Instant::now();

    let c = &config.constraint;
    let mask = match c.mask {
        MaskMode::Bbox => pre.mask.clone(),
        MaskMode::Empty => RegionMask::empty(config.canvas.canvas()),
    };
    let directive = if c.enabled {
        Some(
            AttentionDirective::new(mask.clone(), prepared.token_indices.clone(), c.lambda, c.branches())
                .map_err(|e| CliError::config(e.to_string()))?,
        )
    } else {
        None
    };

    let out_dir = config.job.out_dir.clone();
    create_dir(&out_dir, Stage::Output)?;
    let latent_dir = out_dir.join("latents");
    if config.sampler.dump_latents {
        create_dir(&latent_dir, Stage::Output)?;
    }
    let schedule = make_schedule(
        config.sampler.train_steps,
        config.sampler.steps,
        config.sampler.beta_start,
        config.sampler.beta_end,
    )
    .map_err(|e| CliError::config(e.to_string()))?;
    let noise = LatentTensor::gaussian(prepared.latent_shape, config.sampler.seed);
    let mut dump_error = None;
    let z = sample_observed(
        &noise,
        prepared.denoiser.as_ref(),
        &schedule,
        &config.guidance,
        directive.as_ref(),
        &prepared.session,
        |info| {
            if config.sampler.dump_latents && dump_error.is_none() {
                dump_error = dump_latent(&latent_dir, info.step, info.t, info.latent).err();
            }
        },
    )
    .map_err(|e| CliError::backend(Stage::Sample, e))?;
    if let Some(e) = dump_error {
        return Err(e);
    }
    let sample_done = Instant::now();

    let image = (prepared.decode)(&z)?;
    let decode_done = Instant::now();
    let records = prepared.denoiser.take_attention_records();

    save(out_dir.join("image.png"), Stage::Output, |p| {
        write_rgb(p, image.width(), image.height(), image.as_raw())
    })?;
    save(out_dir.join("sketch.png"), Stage::Output, |p| write_sketch(p, &pre.sketch))?;
    save(out_dir.join("edge.png"), Stage::Output, |p| write_grid(p, &pre.edge))?;
    save(out_dir.join("pip_edge.png"), Stage::Output, |p| write_grid(p, &pre.pip_edge))?;

    let metadata = Metadata {
        text: config.job.text.clone(),
        prompt: config.job.prompt.clone(),
        seed: config.sampler.seed,
        backend: config.job.backend,
        font: pre.font.clone(),
        canvas: config.canvas.canvas(),
        bbox: pre.bbox,
        scales: config.guidance,
        lambda: c.lambda,
        token_indices: prepared.token_indices.clone(),
        steps: config.sampler.steps,
        latent_shape: prepared.latent_shape,
        constraint: ConstraintRecord {
            enabled: c.enabled,
            mask: c.mask,
            mask_pixels: if c.enabled { mask.count_ones() } else { 0 },
            unet: c.unet,
            control: c.control,
        },
        timings: Timings {
            preprocess_ms: ms(preprocess_done - start),
            session_ms: ms(session_done - preprocess_done),
            sample_ms: ms(sample_done - session_done),
            decode_ms: ms(decode_done - sample_done),
            total_ms: ms(start.elapsed()),
        },
    };
    write_json(&out_dir.join("metadata.json"), &metadata, Stage::Output)?;
    write_json(
        &out_dir.join("manifest.json"),
        &json!({"command": "generate", "config": config}),
        Stage::Output,
    )?;

    Ok(GenerateOutput {
        out_dir,
        image,
        sketch: pre.sketch,
        bbox: pre.bbox,
        metadata,
        records,
    })
}

/// One line of a batch file; absent fields fall back to the base config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchJob {
    pub text: Option<String>,
    pub prompt: Option<String>,
    pub seed: Option<u64>,
    pub bbox: Option<BBox>,
    pub font: Option<String>,
    pub out_dir: Option<PathBuf>,
}

pub fn read_batch(path: &Path) -> Result<Vec<BatchJob>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::config(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn job_config(base: &Config, job: &BatchJob, index: usize) -> Config {
    let mut c = base.clone();
    if let Some(t) = &job.text {
        c.job.text = t.clone();
    }
    if let Some(p) = &job.prompt {
        c.job.prompt = p.clone();
    }
    if let Some(s) = job.seed {
        c.sampler.seed = s;
    }
    if job.bbox.is_some() {
        c.job.bbox = job.bbox;
    }
    if let Some(f) = &job.font {
        c.job.font = f.clone();
    }
    c.job.out_dir = job
        .out_dir
        .clone()
        .unwrap_or_else(|| base.job.out_dir.join(format!("job-{index:04}")));
    c
}

/// Runs independent jobs on `base.batch.workers` threads. Results come back
/// in job order.
pub fn run_batch(base: &Config, jobs: &[BatchJob]) -> Vec<Result<GenerateOutput>> {
    let configs: Vec<Config> = jobs.iter().enumerate().map(|(i, j)| job_config(base, j, i)).collect();
    let results: Vec<Mutex<Option<Result<GenerateOutput>>>> = configs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = base.batch.workers.clamp(1, configs.len().max(1));
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(cfg) = configs.get(i) else { break };
                *results[i].lock().expect("poisoned") = Some(run_generate(cfg));
            });
        }
    });
    results
        .into_iter()
        .map(|r| r.into_inner().expect("poisoned").expect("every job ran"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeatmapEntry {
    pub token: usize,
    pub word: String,
    pub file: String,
}

/// Generates with attention recording on, then writes one averaged heatmap
/// per constrained token under `attention/` plus `attention/index.json`.
pub fn run_attn_dump(config: &Config) -> Result<(GenerateOutput, Vec<HeatmapEntry>)> {
    let out = generate(config, true)?;
    let records = out
        .records
        .as_deref()
        .filter(|r| !r.is_empty())
        .ok_or_else(|| CliError::backend(Stage::AttnDump, "backend returned no attention records"))?;
    let dir = out.out_dir.join("attention");
    create_dir(&dir, Stage::AttnDump)?;
    let tokens = tokenize(&config.job.prompt, records[0].map.token_slots());
    let mut index = Vec::new();
    for &token in &out.metadata.token_indices {
        let heat = average_heatmap(records, token, config.canvas.canvas())
            .map_err(|e| CliError::backend(Stage::AttnDump, e))?;
        let file = format!("token_{token:02}.png");
        let path = dir.join(&file);
        save(path, Stage::AttnDump, |p| heat.save(p))?;
        index.push(HeatmapEntry {
            token,
            word: tokens.tokens.get(token).cloned().unwrap_or_default(),
            file,
        });
    }
    write_json(&dir.join("index.json"), &index, Stage::AttnDump)?;
    Ok((out, index))
}

/// Metadata as JSON with the timing block removed, for rerun comparisons.
pub fn metadata_without_timings(m: &Metadata) -> Value {
    let mut v = serde_json::to_value(m).expect("serializable");
    if let Some(o) = v.as_object_mut() {
        o.remove("timings");
    }
    v
}
