use std::collections::BTreeSet;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use difftext::attention::{Branches, DEFAULT_WORDLIST};
use difftext::raster::{make_pip_edge, make_region_mask, Canvas};
use difftext::sampler::{make_schedule, sample, Concurrency, DenoiseError, Denoiser, PredictRequest};
use difftext::wire::{
    decode_frame, encode_frame, read_frame, serve_connection, write_frame, Client, ClientOptions, EpsMode, Fault,
    Frame, LoopbackConfig, LoopbackServer, LoopbackState, MsgType, RemoteDenoiser, Session, Tensor, WireError,
};
use difftext::{AttentionDirective, BBox, ConditionSelector, EdgeImage, GuidanceScales, LatentTensor, NoisePrediction};
use serde_json::{json, Map};

const CANVAS: Canvas = Canvas::new(16, 12);

fn config() -> LoopbackConfig {
    LoopbackConfig {
        canvas: (CANVAS.width, CANVAS.height),
        ..LoopbackConfig::default()
    }
}

fn opts(timeout_ms: u64, retries: u32) -> ClientOptions {
    ClientOptions {
        timeout: Duration::from_millis(timeout_ms),
        retries,
    }
}

fn connect(server: &LoopbackServer, o: ClientOptions) -> Client {
    Client::connect_tcp(&server.addr().to_string(), o).unwrap()
}

fn wordlist() -> Vec<String> {
    DEFAULT_WORDLIST.iter().map(|s| s.to_string()).collect()
}

fn session(client: &Client, prompt: &str) -> Session {
    let edge = EdgeImage::empty(CANVAS);
    let pip = make_pip_edge(&edge, BBox::new(2, 2, 10, 6)).unwrap();
    client.init_session(prompt, &wordlist(), &edge, &pip).unwrap()
}

fn directive(session: &Session) -> AttentionDirective {
    let mask = make_region_mask(BBox::new(2, 2, 10, 6), CANVAS).unwrap();
    AttentionDirective::new(mask, session.token_indices.clone(), 6.0, Branches::default()).unwrap()
}

fn latent(seed: u64) -> LatentTensor {
    LatentTensor::gaussian([3, CANVAS.height as usize, CANVAS.width as usize], seed)
}

#[test]
fn frames_round_trip_up_to_64_mib() {
    for mib in [0usize, 1, 8, 64] {
        let n = mib * (1 << 20) / 4;
        let values: Vec<f32> = (0..n).map(|i| (i as f32).sin()).collect();
        let mut header = Map::new();
        header.insert("op".into(), json!("predict_noise"));
        header.insert("id".into(), json!(mib));
        let frame = Frame::new(
            MsgType::Request,
            header,
            vec![
                Tensor::from_f32("z", vec![n], &values),
                Tensor::from_u8("mask", vec![2, 3], vec![0, 1, 1, 0, 1, 0]),
            ],
        );
        let bytes = encode_frame(&frame).unwrap();
        assert_eq!(&bytes[..4], b"DTXT");
        assert_eq!(decode_frame(&bytes).unwrap(), frame, "{mib} MiB");

        let mut cursor = std::io::Cursor::new(Vec::new());
        write_frame(&mut cursor, &frame).unwrap();
        assert_eq!(cursor.get_ref(), &bytes);
        cursor.set_position(0);
        assert_eq!(read_frame(&mut cursor).unwrap(), frame);
        assert!(matches!(read_frame(&mut cursor), Err(WireError::Closed)));
    }
}

#[test]
fn truncated_and_corrupt_frames_are_rejected() {
    let frame = Frame::new(MsgType::Response, Map::new(), vec![Tensor::from_u8("x", vec![4], vec![1, 2, 3, 4])]);
    let bytes = encode_frame(&frame).unwrap();
    for cut in 1..bytes.len() {
        assert!(decode_frame(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_frame(&bad), Err(WireError::Protocol { offset: 0, .. })));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(decode_frame(&bad), Err(WireError::Protocol { offset: 4, .. })));
}

#[test]
fn echo_returns_the_request_tensor_exactly() {
    let server = LoopbackServer::spawn(config(), "127.0.0.1:0").unwrap();
    let client = connect(&server, ClientOptions::default());
    let s = session(&client, "a sign on the street");
    let mut z = latent(7);
    z.values_mut()[[0, 0, 0]] = f32::MIN_POSITIVE / 2.0;
    z.values_mut()[[1, 0, 0]] = -0.0;
    let d = directive(&s);
    let eps = client.predict(&s, &z, 981, ConditionSelector::EdgeText, Some(&d)).unwrap();
    assert_eq!(eps.to_le_bytes(), z.to_le_bytes());

    let seen = server.state().predictions();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].t, 981);
    assert_eq!(seen[0].cond, ConditionSelector::EdgeText);
    assert_eq!(seen[0].mask_ones, Some(60));
    let header = seen[0].directive.as_ref().unwrap();
    assert_eq!(header.lambda, 6.0);
    assert_eq!(header.token_indices, s.token_indices.iter().copied().collect::<Vec<_>>());
}

#[test]
fn zero_mode_returns_zeros() {
    let server = LoopbackServer::spawn(
        LoopbackConfig {
            mode: EpsMode::Zero,
            ..config()
        },
        "127.0.0.1:0",
    )
    .unwrap();
    let client = connect(&server, ClientOptions::default());
    let s = session(&client, "plain");
    let eps = client.predict(&s, &latent(1), 10, ConditionSelector::Uncond, None).unwrap();
    assert!(eps.iter().all(|&v| v == 0.0));
}

#[test]
fn mismatched_response_id_is_rejected() {
    let server = LoopbackServer::spawn(
        LoopbackConfig {
            fault: Fault::WrongId,
            ..config()
        },
        "127.0.0.1:0",
    )
    .unwrap();
    let client = connect(&server, ClientOptions::default());
    let s = session(&client, "a logo");
    let err = client.predict(&s, &latent(2), 500, ConditionSelector::TextOnly, None).unwrap_err();
    match err {
        WireError::IdMismatch { expected, got } => assert_eq!(got, expected + 1000),
        other => panic!("expected id mismatch, got {other:?}"),
    }
    assert!(!WireError::IdMismatch { expected: 1, got: 2 }.is_retryable());
}

#[test]
fn wrong_shape_is_rejected() {
    let server = LoopbackServer::spawn(
        LoopbackConfig {
            fault: Fault::WrongShape,
            ..config()
        },
        "127.0.0.1:0",
    )
    .unwrap();
    let client = connect(&server, ClientOptions::default());
    let s = session(&client, "a logo");
    let err = client.predict(&s, &latent(3), 500, ConditionSelector::TextOnly, None).unwrap_err();
    match err {
        WireError::Shape { expected, got } => {
            assert_eq!(expected, vec![3, 12, 16]);
            assert_eq!(got, vec![3, 12, 17]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    let wrong = LatentTensor::zeros([3, 4, 4]);
    assert!(matches!(
        client.predict(&s, &wrong, 500, ConditionSelector::TextOnly, None),
        Err(WireError::Shape { .. })
    ));
}

#[test]
fn timeouts_retry_over_tcp() {
    let server = LoopbackServer::spawn(
        LoopbackConfig {
            fault: Fault::Stall {
                count: 1,
                delay: Duration::from_millis(800),
            },
            ..config()
        },
        "127.0.0.1:0",
    )
    .unwrap();
    let client = connect(&server, opts(200, 2));
    let s = session(&client, "a sign");
    let z = latent(4);
    let eps = client.predict(&s, &z, 100, ConditionSelector::Uncond, None).unwrap();
    assert_eq!(eps.to_le_bytes(), z.to_le_bytes());
}

#[test]
fn retries_are_bounded() {
    let server = LoopbackServer::spawn(
        LoopbackConfig {
            fault: Fault::Stall {
                count: 100,
                delay: Duration::from_millis(500),
            },
            ..config()
        },
        "127.0.0.1:0",
    )
    .unwrap();
    let client = connect(&server, opts(100, 2));
    let s = session(&client, "a sign");
    let start = Instant::now();
    let err = client.predict(&s, &latent(5), 100, ConditionSelector::Uncond, None).unwrap_err();
    assert!(start.elapsed() < Duration::from_secs(5));
    match &err {
        WireError::RetriesExhausted { attempts, source } => {
            assert_eq!(*attempts, 3);
            assert!(matches!(**source, WireError::Timeout { .. }));
        }
        other => panic!("expected exhausted retries, got {other:?}"),
    }
    assert_eq!(err.attempts(), 3);
}

#[test]
fn sessions_report_wordlist_tokens() {
    let server = LoopbackServer::spawn(config(), "127.0.0.1:0").unwrap();
    let client = connect(&server, ClientOptions::default());
    let hit = session(&client, "a sign on the street");
    assert!(!hit.token_indices.is_empty());
    assert_eq!(hit.latent_shape, vec![3, 12, 16]);
    assert_eq!(hit.d_t, 77);
    let miss = session(&client, "a cat on the street");
    assert!(miss.token_indices.is_empty());
    let again = session(&client, "a sign on the street");
    assert_eq!(again.token_indices, hit.token_indices);
    assert_ne!(again.id, hit.id);

    let small = EdgeImage::empty(Canvas::new(8, 4));
    let s = client.init_session("x", &wordlist(), &small, &small).unwrap();
    assert_eq!(s.latent_shape, vec![3, 4, 8]);
    let other = EdgeImage::empty(Canvas::new(8, 8));
    assert!(matches!(
        client.init_session("x", &wordlist(), &small, &other),
        Err(WireError::BadTensor(_))
    ));
}

#[test]
fn uncond_needs_no_directive() {
    let server = LoopbackServer::spawn(config(), "127.0.0.1:0").unwrap();
    let client = connect(&server, ClientOptions::default());
    let s = session(&client, "a sign");
    client.predict(&s, &latent(6), 1, ConditionSelector::Uncond, None).unwrap();
    let seen = server.state().predictions();
    assert_eq!(seen[0].directive, None);
    assert_eq!(seen[0].mask_ones, None);
}

#[test]
fn batches_keep_request_order() {
    let server = LoopbackServer::spawn(config(), "127.0.0.1:0").unwrap();
    let client = connect(&server, ClientOptions::default());
    let s = session(&client, "a sign");
    let d = directive(&s);
    let zs: Vec<LatentTensor> = (0..4).map(|i| latent(10 + i)).collect();
    let reqs: Vec<PredictRequest<'_>> = ConditionSelector::ALL
        .iter()
        .zip(&zs)
        .map(|(&cond, z)| PredictRequest {
            z,
            t: 321,
            cond,
            session: &s.id,
            directive: cond.takes_directive().then_some(&d),
        })
        .collect();
    let out = client.predict_batch(&s, &reqs).unwrap();
    for (eps, z) in out.iter().zip(&zs) {
        assert_eq!(eps.to_le_bytes(), z.to_le_bytes());
    }
    let conds: Vec<ConditionSelector> = server.state().predictions().iter().map(|p| p.cond).collect();
    assert_eq!(conds, ConditionSelector::ALL.to_vec());
}

#[test]
fn encode_decode_round_trip() {
    let server = LoopbackServer::spawn(config(), "127.0.0.1:0").unwrap();
    let client = connect(&server, ClientOptions::default());
    let img = image::RgbImage::from_fn(9, 5, |x, y| image::Rgb([(x * 28) as u8, (y * 50) as u8, ((x + y) * 7) as u8]));
    let z = client.encode_latent(&img).unwrap();
    assert_eq!(z.shape3(), [3, 5, 9]);
    assert!(z.iter().all(|v| (-1.0..=1.0).contains(v)));
    assert_eq!(client.decode_latent(&z).unwrap(), img);
}

#[test]
fn optional_ops_follow_capabilities() {
    let img = image::RgbImage::new(4, 4);
    let plain = LoopbackServer::spawn(config(), "127.0.0.1:0").unwrap();
    let client = connect(&plain, ClientOptions::default());
    assert!(matches!(client.ocr(&img), Err(WireError::Unsupported(_))));
    assert!(matches!(client.clip_score(&img, "x"), Err(WireError::Unsupported(_))));

    let served = LoopbackServer::spawn(
        LoopbackConfig {
            ocr_reply: Some(vec!["HELLO".into()]),
            clip_reply: Some(0.25),
            ..config()
        },
        "127.0.0.1:0",
    )
    .unwrap();
    let client = connect(&served, ClientOptions::default());
    assert_eq!(client.ocr(&img).unwrap(), vec!["HELLO".to_string()]);
    assert_eq!(client.clip_score(&img, "x").unwrap(), 0.25);
}

#[test]
fn stdio_transport() {
    let (client_read, server_write) = std::io::pipe().unwrap();
    let (server_read, client_write) = std::io::pipe().unwrap();
    let state = Arc::new(LoopbackState::new(config()));
    let served = {
        let state = state.clone();
        thread::spawn(move || serve_connection(&state, server_read, server_write))
    };
    let client = Client::from_io(client_read, client_write, ClientOptions::default());
    let caps = client.capabilities().unwrap();
    assert!(caps.concurrent);
    let s = session(&client, "a sign");
    let z = latent(8);
    let eps = client.predict(&s, &z, 42, ConditionSelector::PipText, Some(&directive(&s))).unwrap();
    assert_eq!(eps.to_le_bytes(), z.to_le_bytes());
    client.shutdown().unwrap();
    assert!(served.join().unwrap().unwrap());
    assert_eq!(state.predictions().len(), 1);
    assert!(matches!(
        client.predict(&s, &z, 42, ConditionSelector::Uncond, None),
        Err(WireError::Closed)
    ));
}

#[test]
fn stdio_timeouts_do_not_retry() {
    let (client_read, _server_write) = std::io::pipe().unwrap();
    let (_server_read, client_write) = std::io::pipe().unwrap();
    let client = Client::from_io(client_read, client_write, opts(100, 5));
    assert!(matches!(client.capabilities(), Err(WireError::Timeout { .. })));
}

struct Echo;

impl Denoiser for Echo {
    fn predict(&self, req: &PredictRequest<'_>) -> Result<NoisePrediction, DenoiseError> {
        Ok(req.z.clone())
    }
}

#[test]
fn transport_is_transparent_to_sampling() {
    let schedule = make_schedule(1000, 12, 1e-4, 0.02).unwrap();
    let scales = GuidanceScales::default();
    let z = latent(2345);
    let local = sample(&z, &Echo, &schedule, &scales, None, "local").unwrap();

    for batch in [true, false] {
        let server = LoopbackServer::spawn(LoopbackConfig { batch, ..config() }, "127.0.0.1:0").unwrap();
        let clients: Vec<Arc<Client>> =
            (0..2).map(|_| Arc::new(connect(&server, ClientOptions::default()))).collect();
        let s = session(&clients[0], "a sign on the street");
        let d = directive(&s);
        let remote = RemoteDenoiser::new(clients, s.clone()).unwrap();
        let expected = if batch { Concurrency::Batched } else { Concurrency::Concurrent };
        assert_eq!(remote.concurrency(), expected);
        let out = sample(&z, &remote, &schedule, &scales, Some(&d), &s.id).unwrap();
        assert_eq!(out.to_le_bytes(), local.to_le_bytes(), "batch={batch}");

        let seen = server.state().predictions();
        assert_eq!(seen.len(), 12 * 4);
        let with_directive: BTreeSet<ConditionSelector> =
            seen.iter().filter(|p| p.directive.is_some()).map(|p| p.cond).collect();
        assert_eq!(
            with_directive,
            BTreeSet::from([ConditionSelector::EdgeText, ConditionSelector::PipText])
        );
        assert!(remote.predict(&PredictRequest {
            z: &z,
            t: 1,
            cond: ConditionSelector::Uncond,
            session: "other",
            directive: None,
        })
        .is_err());
    }
}
