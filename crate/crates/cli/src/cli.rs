use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use difftext::edges::canny_with;
use difftext::io::{read_sketch, write_grid};
use difftext::raster::Canvas;
use difftext::wire::{serve_connection, Client, ClientOptions, EpsMode, LoopbackConfig, LoopbackServer, LoopbackState};
use difftext::BBox;

use crate::config::{parse_bbox, parse_canvas, Backend, Config, MaskMode};
use crate::error::{CliError, Result, Stage};
use crate::evaluate::{evaluate, read_manifest, read_recognized, NoRecognizer, Recognition};
use crate::pipeline::{read_batch, run_attn_dump, run_batch, run_generate, run_render};

#[derive(Debug, Parser)]
#[command(name = "difftext", version, about = "Scene-text image generation from a rendered sketch")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Render the sketch, edge map, outlined edge map and region mask.
    Render(JobArgs),
    /// Canny edge detection on a PNG/PGM image.
    Edges(EdgesCmd),
    /// Generate an image, or a batch of images.
    Generate(GenerateArgs),
    /// Score recognized text against ground truth.
    Evaluate(EvaluateArgs),
    /// Generate and write averaged cross-attention heatmaps per constrained token.
    AttnDump(GenerateArgs),
    /// Run the reference loopback denoiser server.
    ServeLoopback(ServeArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct EdgeFlags {
    #[arg(long)]
    pub low: Option<u8>,
    #[arg(long)]
    pub high: Option<u8>,
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct JobArgs {
    /// TOML config, or a manifest.json from an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub text: Option<String>,
    #[arg(long)]
    pub prompt: Option<String>,
    /// Text box as x,y,w,h; placed at random from the seed when absent.
    #[arg(long, value_parser = parse_bbox)]
    pub bbox: Option<BBox>,
    #[arg(long)]
    pub font: Option<String>,
    /// Canvas as WxH.
    #[arg(long, value_parser = parse_canvas)]
    pub canvas: Option<Canvas>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub edges: EdgeFlags,
}

#[derive(Debug, Clone, Args)]
pub struct EdgesCmd {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub edges: EdgeFlags,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub job: JobArgs,
    #[arg(long)]
    pub backend: Option<Backend>,
    #[arg(long)]
    pub s_cfg: Option<f64>,
    #[arg(long)]
    pub s_neg: Option<f64>,
    #[arg(long)]
    pub s_pos: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f32>,
    /// Turn the attention constraint on or off.
    #[arg(long)]
    pub constraint: Option<bool>,
    #[arg(long)]
    pub mask: Option<MaskMode>,
    #[arg(long)]
    pub wordlist_file: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub dump_latents: bool,
    #[arg(long)]
    pub remote_addr: Option<String>,
    /// Server program and arguments, whitespace separated, spoken to over stdio.
    #[arg(long)]
    pub remote_command: Option<String>,
    #[arg(long)]
    pub timeout: Option<f64>,
    #[arg(long)]
    pub retries: Option<u32>,
    #[arg(long)]
    pub connections: Option<usize>,
    /// JSONL file of jobs run against this configuration.
    #[arg(long)]
    pub batch: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    /// JSONL with {image, ground_truth, prompt, lang?} per line.
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSONL with {image, text} per line.
    #[arg(long, conflicts_with = "ocr_addr")]
    pub recognized: Option<PathBuf>,
    /// OCR server address; recognizes the images through the `ocr` op.
    #[arg(long)]
    pub ocr_addr: Option<String>,
    /// Recognize clean renderings of the ground truth instead of the images.
    #[arg(long, requires = "ocr_addr")]
    pub upper_bound: bool,
    /// Report percentages instead of fractions.
    #[arg(long)]
    pub percent: bool,
    #[arg(long, value_parser = parse_canvas, default_value = "512x512")]
    pub canvas: Canvas,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ModeArg {
    Echo,
    Zero,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:0", conflicts_with = "stdio")]
    pub addr: String,
    /// Serve one session over stdin/stdout.
    #[arg(long)]
    pub stdio: bool,
    #[arg(long, value_enum, default_value = "echo")]
    pub mode: ModeArg,
    #[arg(long, value_parser = parse_canvas, default_value = "512x512")]
    pub canvas: Canvas,
    #[arg(long, default_value_t = 77)]
    pub d_t: usize,
    #[arg(long)]
    pub no_batch: bool,
    #[arg(long)]
    pub serial: bool,
}

fn apply_edges(cfg: &mut Config, e: &EdgeFlags) {
    if let Some(v) = e.low {
        cfg.edges.low = v;
    }
    if let Some(v) = e.high {
        cfg.edges.high = v;
    }
    if let Some(v) = e.sigma {
        cfg.edges.sigma = v;
    }
}

impl JobArgs {
    /// Loads the config file (if any) and lays the flags over it.
    pub fn resolve(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(v) = &self.text {
            cfg.job.text = v.clone();
        }
        if let Some(v) = &self.prompt {
            cfg.job.prompt = v.clone();
        }
        if self.bbox.is_some() {
            cfg.job.bbox = self.bbox;
        }
        if let Some(v) = &self.font {
            cfg.job.font = v.clone();
        }
        if let Some(c) = self.canvas {
            cfg.canvas.width = c.width;
            cfg.canvas.height = c.height;
        }
        if let Some(v) = self.seed {
            cfg.sampler.seed = v;
        }
        if let Some(v) = &self.out {
            cfg.job.out_dir = v.clone();
        }
        apply_edges(&mut cfg, &self.edges);
        Ok(cfg)
    }
}

impl GenerateArgs {
    pub fn resolve(&self) -> Result<Config> {
        let mut cfg = self.job.resolve()?;
        if let Some(v) = self.backend {
            cfg.job.backend = v;
        }
        if let Some(v) = self.s_cfg {
            cfg.guidance.s_cfg = v;
        }
        if let Some(v) = self.s_neg {
            cfg.guidance.s_neg = v;
        }
        if let Some(v) = self.s_pos {
            cfg.guidance.s_pos = v;
        }
        if let Some(v) = self.lambda {
            cfg.constraint.lambda = v;
        }
        if let Some(v) = self.constraint {
            cfg.constraint.enabled = v;
        }
        if let Some(v) = self.mask {
            cfg.constraint.mask = v;
        }
        if let Some(v) = &self.wordlist_file {
            cfg.constraint.wordlist_file = Some(v.clone());
        }
        if let Some(v) = self.steps {
            cfg.sampler.steps = v;
        }
        if self.dump_latents {
            cfg.sampler.dump_latents = true;
        }
        if let Some(v) = &self.remote_addr {
            cfg.remote.addr = Some(v.clone());
        }
        if let Some(v) = &self.remote_command {
            cfg.remote.command = v.split_whitespace().map(String::from).collect();
        }
        if let Some(v) = self.timeout {
            cfg.remote.timeout_secs = v;
        }
        if let Some(v) = self.retries {
            cfg.remote.retries = v;
        }
        if let Some(v) = self.connections {
            cfg.remote.connections = v;
        }
        if let Some(v) = self.workers {
            cfg.batch.workers = v;
        }
        Ok(cfg)
    }
}

fn print_json(value: &serde_json::Value) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", serde_json::to_string(value).expect("serializable"));
}

fn edges_cmd(args: &EdgesCmd) -> Result<()> {
    let mut cfg = Config::default();
    apply_edges(&mut cfg, &args.edges);
    let sketch = read_sketch(&args.input).map_err(|e| CliError::io(Stage::Edges, &args.input, e))?;
    let edge = canny_with(&sketch, cfg.edges.params()).map_err(|e| CliError::input(Stage::Edges, e))?;
    write_grid(&args.output, &edge).map_err(|e| CliError::io(Stage::Output, &args.output, e))?;
    print_json(&serde_json::json!({"output": args.output, "edge_pixels": edge.count_ones()}));
    Ok(())
}

fn generate_cmd(args: &GenerateArgs, attn: bool) -> Result<()> {
    let cfg = args.resolve()?;
    if let Some(path) = &args.batch {
        if attn {
            return Err(CliError::config("attn-dump does not take --batch"));
        }
        let jobs = read_batch(path)?;
        let mut first_err = None;
        for (i, r) in run_batch(&cfg, &jobs).into_iter().enumerate() {
            match r {
                Ok(out) => print_json(&serde_json::json!({"job": i, "out_dir": out.out_dir, "bbox": out.bbox})),
                Err(e) => {
                    eprintln!("job {i}: {e}");
                    first_err.get_or_insert(e);
                }
            }
        }
        return first_err.map_or(Ok(()), Err);
    }
    if attn {
        let (out, index) = run_attn_dump(&cfg)?;
        print_json(&serde_json::json!({"out_dir": out.out_dir, "heatmaps": index}));
    } else {
        let out = run_generate(&cfg)?;
        print_json(&serde_json::json!({"out_dir": out.out_dir, "bbox": out.bbox}));
    }
    Ok(())
}

fn evaluate_cmd(args: &EvaluateArgs) -> Result<()> {
    let manifest = read_manifest(&args.manifest)?;
    let metrics = match (&args.recognized, &args.ocr_addr) {
        (Some(path), _) => evaluate::<NoRecognizer>(&manifest, &Recognition::Precomputed(read_recognized(path)?), args.percent)?,
        (None, Some(addr)) => {
            let client = Client::connect_tcp(addr, ClientOptions::default())
                .map_err(|e| CliError::backend(Stage::Evaluate, e))?;
            let how = if args.upper_bound {
                Recognition::UpperBound(&client, args.canvas)
            } else {
                Recognition::Live(&client)
            };
            evaluate(&manifest, &how, args.percent)?
        }
        (None, None) => return Err(CliError::config("evaluate needs --recognized or --ocr-addr")),
    };
    let json = serde_json::to_value(&metrics).expect("serializable");
    if let Some(out) = &args.out {
        let text = serde_json::to_string_pretty(&json).expect("serializable") + "\n";
        std::fs::write(out, text).map_err(|e| CliError::io(Stage::Output, out, e))?;
    }
    print_json(&json);
    Ok(())
}

pub fn loopback_config(args: &ServeArgs) -> LoopbackConfig {
    LoopbackConfig {
        mode: match args.mode {
            ModeArg::Echo => EpsMode::Echo,
            ModeArg::Zero => EpsMode::Zero,
        },
        concurrent: !args.serial,
        batch: !args.no_batch,
        d_t: args.d_t,
        canvas: (args.canvas.width, args.canvas.height),
        ..LoopbackConfig::default()
    }
}

fn serve_cmd(args: &ServeArgs) -> Result<()> {
    let config = loopback_config(args);
    if args.stdio {
        let state = LoopbackState::new(config);
        serve_connection(&state, std::io::stdin().lock(), std::io::stdout().lock())
            .map_err(|e| CliError::backend(Stage::Serve, e))?;
        return Ok(());
    }
    let server = LoopbackServer::spawn(config, &args.addr).map_err(|e| CliError::backend(Stage::Serve, e))?;
    println!("listening on {}", server.addr());
    let _ = std::io::stdout().flush();
    server.wait();
    Ok(())
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Cmd::Render(args) => {
            let out = run_render(&args.resolve()?)?;
            print_json(&serde_json::to_value(out).expect("serializable"));
            Ok(())
        }
        Cmd::Edges(args) => edges_cmd(args),
        Cmd::Generate(args) => generate_cmd(args, false),
        Cmd::AttnDump(args) => generate_cmd(args, true),
        Cmd::Evaluate(args) => evaluate_cmd(args),
        Cmd::ServeLoopback(args) => serve_cmd(args),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
