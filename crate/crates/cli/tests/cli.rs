use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Stdio};

use difftext::io::read_rgb;
use difftext::wire::{LoopbackConfig, LoopbackServer};
use difftext::{BBox, SketchImage};
use difftext_cli::cli::run;
use difftext_cli::pipeline::metadata_without_timings;
use difftext_cli::{run_attn_dump, run_generate, run_render, Backend, Config, MaskMode};
use serde_json::Value;

fn small(text: &str, out: &Path) -> Config {
    let mut cfg = Config::default();
    cfg.job.text = text.into();
    cfg.job.out_dir = out.to_path_buf();
    cfg.canvas.width = 256;
    cfg.canvas.height = 256;
    cfg.sampler.steps = 8;
    cfg.sampler.seed = 11;
    cfg
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn gray(path: &Path) -> image::GrayImage {
    image::open(path).unwrap().to_luma8()
}

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("difftext").chain(args.iter().copied()))
}

#[test]
fn render_empty_text_is_blank() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_render(&small("", dir.path())).unwrap();
    assert_eq!(out.files.len(), 4);
    let sketch = gray(&dir.path().join("sketch.png"));
    assert!(sketch.pixels().all(|p| p.0[0] == 255));
    assert!(gray(&dir.path().join("edge.png")).pixels().all(|p| p.0[0] == 0));
    for f in &out.files {
        assert_eq!(gray(f).dimensions(), (256, 256), "{}", f.display());
    }
}

#[test]
fn render_ascii_text_has_edges() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_render(&small("Ab9", dir.path())).unwrap();
    let edge = gray(&dir.path().join("edge.png"));
    let inside = edge
        .enumerate_pixels()
        .filter(|(x, y, p)| p.0[0] != 0 && out.bbox.contains(*x, *y))
        .count();
    assert!(inside > 0);
    let manifest = read_json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["command"], "render");
}

#[test]
fn edges_command_writes_edge_map() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("step.png");
    let img = image::GrayImage::from_fn(32, 16, |x, _| image::Luma([if x < 16 { 0 } else { 255 }]));
    img.save(&input).unwrap();
    let output = dir.path().join("edges.png");
    assert_eq!(cli(&["edges", "--input", input.to_str().unwrap(), "--output", output.to_str().unwrap()]), 0);
    let edge = gray(&output);
    assert_eq!(edge.dimensions(), (32, 16));
    assert!(edge.enumerate_pixels().filter(|(_, _, p)| p.0[0] != 0).all(|(x, _, _)| (14..=17).contains(&x)));
    assert!(edge.pixels().any(|p| p.0[0] != 0));
}

#[test]
fn generate_records_defaults_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_generate(&small("HI", &dir.path().join("a"))).unwrap();
    let b = run_generate(&small("HI", &dir.path().join("b"))).unwrap();
    let meta = read_json(&dir.path().join("a/metadata.json"));
    assert_eq!(meta["scales"]["s_cfg"], 7.5);
    assert_eq!(meta["scales"]["s_neg"], 2.0);
    assert_eq!(meta["scales"]["s_pos"], 0.1);
    assert_eq!(meta["lambda"], 6.0);
    assert_eq!(meta["text"], "HI");
    assert_eq!(meta["steps"], 8);
    assert!(meta["timings"]["total_ms"].as_f64().unwrap() >= 0.0);
    assert_eq!(metadata_without_timings(&a.metadata), metadata_without_timings(&b.metadata));
    assert_eq!(a.image, b.image);
    assert_eq!(read_rgb(&dir.path().join("a/image.png")).unwrap(), a.image);
    for f in ["image.png", "sketch.png", "edge.png", "pip_edge.png", "manifest.json"] {
        assert!(dir.path().join("a").join(f).exists(), "{f}");
    }
}

#[test]
fn constraint_toggle_changes_only_constraint_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let on = run_generate(&small("HI", &dir.path().join("on"))).unwrap();
    let mut cfg = small("HI", &dir.path().join("off"));
    cfg.constraint.enabled = false;
    let off = run_generate(&cfg).unwrap();
    let (mut a, mut b) = (metadata_without_timings(&on.metadata), metadata_without_timings(&off.metadata));
    assert_ne!(a["constraint"], b["constraint"]);
    assert_eq!(b["constraint"]["mask_pixels"], 0);
    a.as_object_mut().unwrap().remove("constraint");
    b.as_object_mut().unwrap().remove("constraint");
    assert_eq!(a, b);
    assert_ne!(on.image, off.image);
}

#[test]
fn manifest_reproduces_run() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let seed = "23";
    assert_eq!(
        cli(&["generate", "--text", "OK", "--canvas", "256x256", "--steps", "6", "--seed", seed, "--out", first.to_str().unwrap()]),
        0
    );
    let manifest = first.join("manifest.json");
    assert_eq!(read_json(&manifest)["command"], "generate");
    let mut cfg = Config::load(&manifest).unwrap();
    cfg.job.out_dir = dir.path().join("second");
    let again = run_generate(&cfg).unwrap();
    assert_eq!(read_rgb(&first.join("image.png")).unwrap(), again.image);
    let (mut a, b) = (read_json(&first.join("metadata.json")), metadata_without_timings(&again.metadata));
    a.as_object_mut().unwrap().remove("timings");
    assert_eq!(a, b);
}

#[test]
fn batch_runs_every_job_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let jobs = dir.path().join("jobs.jsonl");
    std::fs::write(&jobs, "{\"text\":\"AB\",\"seed\":1}\n\n{\"text\":\"CD\",\"seed\":2}\n{\"text\":\"EF\"}\n").unwrap();
    let out = dir.path().join("batch");
    let args = [
        "generate", "--canvas", "256x256", "--steps", "4", "--text", "ZZ", "--out", out.to_str().unwrap(), "--batch",
        jobs.to_str().unwrap(), "--workers", "2",
    ];
    assert_eq!(cli(&args), 0);
    for (i, text) in ["AB", "CD", "EF"].iter().enumerate() {
        let meta = read_json(&out.join(format!("job-{i:04}/metadata.json")));
        assert_eq!(meta["text"], *text);
    }
    assert_eq!(read_json(&out.join("job-0001/metadata.json"))["seed"], 2);
}

#[test]
fn latent_dumps_one_file_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small("HI", dir.path());
    cfg.sampler.dump_latents = true;
    cfg.sampler.steps = 5;
    let out = run_generate(&cfg).unwrap();
    let shape = out.metadata.latent_shape;
    let bytes = shape.iter().product::<usize>() * 4;
    for k in 0..5 {
        let raw = std::fs::read(dir.path().join(format!("latents/step_{k:04}.f32"))).unwrap();
        assert_eq!(raw.len(), bytes);
        let info = read_json(&dir.path().join(format!("latents/step_{k:04}.json")));
        assert_eq!(info["step"], k);
        assert_eq!(info["shape"], serde_json::json!(shape));
    }
    assert!(!dir.path().join("latents/step_0005.f32").exists());
}

#[test]
fn attn_dump_writes_one_heatmap_per_token() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small("HI", dir.path());
    cfg.job.prompt = "a sign and a logo".into();
    let (out, index) = run_attn_dump(&cfg).unwrap();
    let tokens = &out.metadata.token_indices;
    assert!(!tokens.is_empty());
    assert_eq!(index.len(), tokens.len());
    for (entry, &t) in index.iter().zip(tokens) {
        assert_eq!(entry.token, t);
        let img = gray(&dir.path().join("attention").join(&entry.file));
        assert_eq!(img.dimensions(), (256, 256));
        let max = img.pixels().map(|p| p.0[0]).max().unwrap();
        assert_eq!(max, 255);
    }
    let on_disk = read_json(&dir.path().join("attention/index.json"));
    assert_eq!(on_disk.as_array().unwrap().len(), index.len());
}

#[test]
fn attn_dump_without_constrained_tokens_writes_empty_index() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let code = cli(&["attn-dump", "--text", "HI", "--prompt", "a cat", "--canvas", "256x256", "--steps", "3", "--out", out]);
    assert_eq!(code, 0);
    assert_eq!(read_json(&dir.path().join("attention/index.json")), serde_json::json!([]));
}

fn write_manifest(dir: &Path, rows: &[(&str, &str, Option<&str>)]) -> std::path::PathBuf {
    let path = dir.join("manifest.jsonl");
    let mut f = std::fs::File::create(&path).unwrap();
    for (image, gt, lang) in rows {
        let row = serde_json::json!({"image": image, "ground_truth": gt, "prompt": "p", "lang": lang});
        writeln!(f, "{row}").unwrap();
    }
    path
}

#[test]
fn evaluate_identical_strings_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), &[("a.png", "hello", None), ("b.png", "world", None)]);
    let rec = dir.path().join("rec.jsonl");
    std::fs::write(&rec, "{\"image\":\"a.png\",\"text\":\"hello\"}\n{\"image\":\"b.png\",\"text\":\"world\"}\n").unwrap();
    let out = dir.path().join("metrics.json");
    let code = cli(&[
        "evaluate", "--manifest", manifest.to_str().unwrap(), "--recognized", rec.to_str().unwrap(), "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let metrics = read_json(&out);
    let m = &metrics["default"];
    let keys: Vec<&String> = m.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["accuracy", "edit_accuracy", "n"]);
    assert_eq!(m["accuracy"], 1.0);
    assert_eq!(m["edit_accuracy"], 1.0);
    assert_eq!(m["n"], 2);
}

#[test]
fn evaluate_groups_by_language_and_reports_percent() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), &[("a.png", "kitten", Some("en")), ("b.png", "abc", Some("fr"))]);
    let rec = dir.path().join("rec.jsonl");
    std::fs::write(&rec, "{\"image\":\"a.png\",\"text\":\"sitting\"}\n{\"image\":\"b.png\",\"recognized\":\"abc\"}\n")
        .unwrap();
    let out = dir.path().join("metrics.json");
    let code = cli(&[
        "evaluate", "--manifest", manifest.to_str().unwrap(), "--recognized", rec.to_str().unwrap(), "--percent",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let metrics = read_json(&out);
    assert_eq!(metrics["en"]["accuracy"], 0.0);
    assert!((metrics["en"]["edit_accuracy"].as_f64().unwrap() - 100.0 * 4.0 / 7.0).abs() < 1e-9);
    assert_eq!(metrics["fr"]["accuracy"], 100.0);
}

#[test]
fn evaluate_missing_recognition_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), &[("a.png", "hello", None)]);
    let rec = dir.path().join("rec.jsonl");
    std::fs::write(&rec, "{\"image\":\"other.png\",\"text\":\"hello\"}\n").unwrap();
    let code = cli(&["evaluate", "--manifest", manifest.to_str().unwrap(), "--recognized", rec.to_str().unwrap()]);
    assert_eq!(code, 4);
}

#[test]
fn evaluate_through_ocr_server() {
    let dir = tempfile::tempdir().unwrap();
    let img = image::RgbImage::from_pixel(8, 8, image::Rgb([255, 255, 255]));
    img.save(dir.path().join("a.png")).unwrap();
    let manifest = write_manifest(dir.path(), &[("a.png", "HELLO", None)]);
    let server = LoopbackServer::spawn(
        LoopbackConfig {
            ocr_reply: Some(vec!["HELLO".into()]),
            ..LoopbackConfig::default()
        },
        "127.0.0.1:0",
    )
    .unwrap();
    let addr = server.addr().to_string();
    for extra in [None, Some("--upper-bound")] {
        let out = dir.path().join("m.json");
        let mut args = vec!["evaluate", "--manifest", manifest.to_str().unwrap(), "--ocr-addr", &addr, "--canvas", "256x256"];
        args.extend(extra);
        args.extend(["--out", out.to_str().unwrap()]);
        assert_eq!(cli(&args), 0, "{extra:?}");
        assert_eq!(read_json(&out)["default"]["accuracy"], 1.0);
    }

    let plain = LoopbackServer::spawn(LoopbackConfig::default(), "127.0.0.1:0").unwrap();
    let addr = plain.addr().to_string();
    assert_eq!(cli(&["evaluate", "--manifest", manifest.to_str().unwrap(), "--ocr-addr", &addr]), 3);
}

#[test]
fn remote_backend_over_loopback() {
    let dir = tempfile::tempdir().unwrap();
    let server = LoopbackServer::spawn(LoopbackConfig::default(), "127.0.0.1:0").unwrap();
    let mut cfg = small("HI", &dir.path().join("one"));
    cfg.job.backend = Backend::Remote;
    cfg.remote.addr = Some(server.addr().to_string());
    let a = run_generate(&cfg).unwrap();
    assert_eq!(a.metadata.latent_shape, [3, 256, 256]);
    assert_eq!(a.image.dimensions(), (256, 256));

    cfg.remote.connections = 2;
    cfg.job.out_dir = dir.path().join("two");
    let b = run_generate(&cfg).unwrap();
    assert_eq!(a.image, b.image);
}

#[test]
fn remote_backend_over_spawned_stdio_server() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small("HI", dir.path());
    cfg.job.backend = Backend::Remote;
    cfg.remote.command = vec![env!("CARGO_BIN_EXE_difftext").into(), "serve-loopback".into(), "--stdio".into()];
    let out = run_generate(&cfg).unwrap();
    assert_eq!(out.image.dimensions(), (256, 256));
}

#[test]
fn point_mass_backend_reproduces_sketch() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small("HI", dir.path());
    cfg.job.backend = Backend::PointMass;
    cfg.constraint.mask = MaskMode::Empty;
    let out = run_generate(&cfg).unwrap();
    let mut dark = 0;
    let mut ink = 0;
    for y in 0..256 {
        for x in 0..256 {
            if out.sketch.get(x, y) == SketchImage::INK {
                ink += 1;
                dark += usize::from(out.image.get_pixel(x, y).0[0] < 128);
            }
        }
    }
    assert!(ink > 0);
    assert_eq!(dark, ink);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(cli(&["generate", "--bbox", "1,2,3", "--out", out]), 2);
    assert_eq!(cli(&["generate", "--text", "", "--out", out]), 2);
    assert_eq!(cli(&["generate", "--text", "HI", "--steps", "0", "--out", out]), 2);
    assert_eq!(cli(&["generate", "--text", "HI", "--bbox", "500,0,40,40", "--canvas", "256x256", "--out", out]), 2);
    assert_eq!(cli(&["frobnicate"]), 2);
    assert_eq!(cli(&["--help"]), 0);

    let closed = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().to_string();
    let code = cli(&[
        "generate", "--text", "HI", "--canvas", "256x256", "--backend", "remote", "--remote-addr", &closed,
        "--retries", "0", "--out", out,
    ]);
    assert_eq!(code, 3);
}

#[test]
fn serve_loopback_listens_and_answers() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_difftext"))
        .args(["serve-loopback", "--canvas", "256x256"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect("listening line").to_string();

    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small("HI", dir.path());
    cfg.job.backend = Backend::Remote;
    cfg.job.bbox = Some(BBox::new(8, 8, 40, 20));
    cfg.remote.addr = Some(addr);
    let out = run_generate(&cfg).unwrap();
    assert_eq!(out.bbox, BBox::new(8, 8, 40, 20));
    child.kill().unwrap();
    child.wait().unwrap();
}
