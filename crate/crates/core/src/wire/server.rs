//! Reference loopback server returning trivial noise (`eps = z` or
//! `eps = 0`) for protocol conformance and transport tests.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde_json::{json, Map, Value};

use super::frame::{read_frame, write_frame, Frame, MsgType, Tensor};
use super::{Capabilities, DirectiveHeader, Op, Session, WireError};
use crate::guidance::ConditionSelector;
use crate::tokens::{match_wordlist, tokenize};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpsMode {
    /// `eps = z`
    Echo,
    /// `eps = 0`
    Zero,
}

/// Deliberate misbehaviour of prediction responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    None,
    /// Answers with the wrong request id.
    WrongId,
    /// Answers with one extra column.
    WrongShape,
    /// Sleeps before answering the first `count` predictions.
    Stall { count: u32, delay: Duration },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopbackConfig {
    pub mode: EpsMode,
    pub fault: Fault,
    pub concurrent: bool,
    pub batch: bool,
    pub d_t: usize,
    pub channels: usize,
    pub canvas: (u32, u32),
    /// Fixed `ocr` answer; the op is unsupported when absent.
    pub ocr_reply: Option<Vec<String>>,
    /// Fixed `clip_score` answer; the op is unsupported when absent.
    pub clip_reply: Option<f64>,
}

impl Default for LoopbackConfig {
    fn default() -> Self {
        Self {
            mode: EpsMode::Echo,
            fault: Fault::None,
            concurrent: true,
            batch: true,
            d_t: 77,
            channels: 3,
            canvas: (512, 512),
            ocr_reply: None,
            clip_reply: None,
        }
    }
}

/// A prediction the server saw, kept for inspection by tests.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordedPredict {
    pub session: String,
    pub t: usize,
    pub cond: ConditionSelector,
    pub directive: Option<DirectiveHeader>,
    pub mask_ones: Option<usize>,
}

struct SessionState {
    session: Session,
    canvas: (usize, usize),
}

pub struct LoopbackState {
    config: LoopbackConfig,
    sessions: Mutex<HashMap<String, SessionState>>,
    next_session: AtomicU64,
    stalls: AtomicU32,
    log: Mutex<Vec<RecordedPredict>>,
}

type Reply = Result<(Map<String, Value>, Vec<Tensor>), (&'static str, String)>;

fn obj(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => unreachable!("object literal"),
    }
}

fn bad(code: &'static str, msg: impl Into<String>) -> (&'static str, String) {
    (code, msg.into())
}

fn get<'f>(frame: &'f Frame, name: &str) -> Result<&'f Tensor, (&'static str, String)> {
    frame
        .tensor(name)
        .ok_or_else(|| bad("bad_request", format!("missing tensor {name}")))
}

impl LoopbackState {
    pub fn new(config: LoopbackConfig) -> Self {
        Self {
            config,
            sessions: Mutex::new(HashMap::new()),
            next_session: AtomicU64::new(1),
            stalls: AtomicU32::new(0),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn config(&self) -> &LoopbackConfig {
        &self.config
    }

    pub fn predictions(&self) -> Vec<RecordedPredict> {
        self.log.lock().expect("poisoned").clone()
    }

    pub fn capabilities(&self) -> Capabilities {
        let mut supports: Vec<String> = Op::ALL
            .into_iter()
            .filter(|op| match op {
                Op::Ocr => self.config.ocr_reply.is_some(),
                Op::ClipScore => self.config.clip_reply.is_some(),
                Op::PredictNoiseBatch => self.config.batch,
                _ => true,
            })
            .map(|op| op.as_str().to_string())
            .collect();
        supports.sort();
        let (w, h) = self.config.canvas;
        Capabilities {
            concurrent: self.config.concurrent,
            latent_shape: vec![self.config.channels, h as usize, w as usize],
            d_t_max: self.config.d_t,
            supports,
            attention_records: false,
        }
    }

    fn stall(&self) {
        if let Fault::Stall { count, delay } = self.config.fault {
            if self.stalls.fetch_add(1, Ordering::SeqCst) < count {
                thread::sleep(delay);
            }
        }
    }

    fn init_session(&self, req: &Frame) -> Reply {
        let prompt = req.header.get("prompt").and_then(Value::as_str).unwrap_or_default();
        let wordlist: Vec<String> = req
            .header
            .get("wordlist")
            .cloned()
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| bad("bad_request", format!("wordlist: {e}")))?
            .unwrap_or_default();
        let canvas: (usize, usize) = req
            .header
            .get("canvas")
            .cloned()
            .map(serde_json::from_value::<(usize, usize)>)
            .transpose()
            .map_err(|e| bad("bad_request", format!("canvas: {e}")))?
            .ok_or_else(|| bad("bad_request", "missing canvas"))?;
        for name in ["edge", "pip_edge"] {
            let t = get(req, name)?;
            t.as_u8().map_err(|e| bad("bad_request", e.to_string()))?;
            if t.shape != [canvas.1, canvas.0] {
                return Err(bad("bad_shape", format!("{name} has shape {:?}", t.shape)));
            }
        }
        let tokens = tokenize(prompt, self.config.d_t);
        let n = self.next_session.fetch_add(1, Ordering::Relaxed);
        let session = Session {
            id: format!("loop-{n}"),
            prompt: prompt.to_string(),
            token_indices: match_wordlist(&tokens, &wordlist),
            d_t: self.config.d_t,
            latent_shape: vec![self.config.channels, canvas.1, canvas.0],
        };
        let reply = obj(json!({ "session": session }));
        self.sessions.lock().expect("poisoned").insert(
            session.id.clone(),
            SessionState {
                session,
                canvas,
            },
        );
        Ok((reply, vec![]))
    }

    fn predict_one(
        &self,
        session_id: &str,
        item: &Map<String, Value>,
        z: &Tensor,
        mask: Option<&Tensor>,
        out_name: String,
    ) -> Result<Tensor, (&'static str, String)> {
        let sessions = self.sessions.lock().expect("poisoned");
        let state = sessions
            .get(session_id)
            .ok_or_else(|| bad("unknown_session", format!("no session {session_id:?}")))?;
        let t = item
            .get("t")
            .and_then(Value::as_u64)
            .ok_or_else(|| bad("bad_request", "missing t"))? as usize;
        let cond: ConditionSelector = item
            .get("cond")
            .cloned()
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| bad("bad_request", format!("cond: {e}")))?
            .ok_or_else(|| bad("bad_request", "missing cond"))?;
        if z.shape != state.session.latent_shape {
            return Err(bad(
                "bad_shape",
                format!("z has shape {:?}, session expects {:?}", z.shape, state.session.latent_shape),
            ));
        }
        let values = z.to_f32().map_err(|e| bad("bad_request", e.to_string()))?;
        let directive: Option<DirectiveHeader> = item
            .get("directive")
            .cloned()
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| bad("bad_request", format!("directive: {e}")))?;
        let mut mask_ones = None;
        if let Some(d) = &directive {
            let mask = mask.ok_or_else(|| bad("bad_request", "directive without mask tensor"))?;
            let (w, h) = state.canvas;
            if mask.shape != [h, w] {
                return Err(bad("bad_shape", format!("mask has shape {:?}", mask.shape)));
            }
            let bits = mask.as_u8().map_err(|e| bad("bad_request", e.to_string()))?;
            mask_ones = Some(bits.iter().filter(|&&b| b != 0).count());
            if let Some(i) = d.token_indices.iter().find(|&&i| i >= state.session.d_t) {
                return Err(bad("bad_request", format!("token index {i} outside 0..{}", state.session.d_t)));
            }
        }
        self.log.lock().expect("poisoned").push(RecordedPredict {
            session: session_id.to_string(),
            t,
            cond,
            directive,
            mask_ones,
        });
        let mut shape = z.shape.clone();
        let mut eps = match self.config.mode {
            EpsMode::Echo => values,
            EpsMode::Zero => vec![0.0; values.len()],
        };
        if self.config.fault == Fault::WrongShape {
            let rows: usize = shape[..shape.len() - 1].iter().product();
            *shape.last_mut().expect("3-d") += 1;
            eps.extend(std::iter::repeat_n(0.0, rows));
        }
        Ok(Tensor::from_f32(out_name, shape, &eps))
    }

    fn predict(&self, req: &Frame) -> Reply {
        self.stall();
        let session = req.header.get("session").and_then(Value::as_str).unwrap_or_default();
        let eps = self.predict_one(session, &req.header, get(req, "z")?, req.tensor("mask"), "eps".into())?;
        Ok((Map::new(), vec![eps]))
    }

    fn predict_batch(&self, req: &Frame) -> Reply {
        self.stall();
        let session = req.header.get("session").and_then(Value::as_str).unwrap_or_default();
        let items = req
            .header
            .get("items")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("bad_request", "missing items"))?;
        let mut out = Vec::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            let item = item.as_object().ok_or_else(|| bad("bad_request", "item is not an object"))?;
            let z_name = item.get("z").and_then(Value::as_str).unwrap_or_default();
            let mask = match item.get("mask").and_then(Value::as_str) {
                Some(name) => Some(get(req, name)?),
                None => None,
            };
            out.push(self.predict_one(session, item, get(req, z_name)?, mask, format!("eps_{i}"))?);
        }
        Ok((Map::new(), out))
    }

    fn encode(&self, req: &Frame) -> Reply {
        let img = get(req, "image")?;
        let bytes = img.as_u8().map_err(|e| bad("bad_request", e.to_string()))?;
        let &[h, w, 3] = img.shape.as_slice() else {
            return Err(bad("bad_shape", format!("image has shape {:?}", img.shape)));
        };
        let mut latent = vec![0f32; 3 * h * w];
        for (i, px) in bytes.chunks_exact(3).enumerate() {
            for c in 0..3 {
                latent[c * h * w + i] = f32::from(px[c]) / 127.5 - 1.0;
            }
        }
        Ok((Map::new(), vec![Tensor::from_f32("latent", vec![3, h, w], &latent)]))
    }

    fn decode(&self, req: &Frame) -> Reply {
        let z = get(req, "latent")?;
        let values = z.to_f32().map_err(|e| bad("bad_request", e.to_string()))?;
        let &[3, h, w] = z.shape.as_slice() else {
            return Err(bad("bad_shape", format!("latent has shape {:?}", z.shape)));
        };
        let mut img = vec![0u8; h * w * 3];
        for i in 0..h * w {
            for c in 0..3 {
                img[i * 3 + c] = ((values[c * h * w + i] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
            }
        }
        Ok((Map::new(), vec![Tensor::from_u8("image", vec![h, w, 3], img)]))
    }

    fn handle(&self, op: Option<Op>, req: &Frame) -> Reply {
        match op {
            Some(Op::Capabilities) => Ok((obj(json!({ "capabilities": self.capabilities() })), vec![])),
            Some(Op::InitSession) => self.init_session(req),
            Some(Op::PredictNoise) => self.predict(req),
            Some(Op::PredictNoiseBatch) if self.config.batch => self.predict_batch(req),
            Some(Op::EncodeLatent) => self.encode(req),
            Some(Op::DecodeLatent) => self.decode(req),
            Some(Op::Ocr) => match &self.config.ocr_reply {
                Some(texts) => Ok((obj(json!({ "texts": texts })), vec![])),
                None => Err(bad("unsupported", "ocr is not served")),
            },
            Some(Op::ClipScore) => match self.config.clip_reply {
                Some(score) => Ok((obj(json!({ "score": score })), vec![])),
                None => Err(bad("unsupported", "clip_score is not served")),
            },
            Some(Op::Shutdown) => Ok((obj(json!({ "ok": true })), vec![])),
            Some(other) => Err(bad("unsupported", format!("{} is not served", other.as_str()))),
            None => Err(bad("unknown_op", "unknown op")),
        }
    }
}

/// Serves one connection until EOF or a `shutdown` request. Returns true
/// when shutdown was requested.
pub fn serve_connection(state: &LoopbackState, reader: impl Read, writer: impl Write) -> Result<bool, WireError> {
    let mut reader = BufReader::new(reader);
    let mut writer = BufWriter::new(writer);
    loop {
        let req = match read_frame(&mut reader) {
            Ok(f) => f,
            Err(WireError::Closed) => return Ok(false),
            Err(e) => {
                let header = obj(json!({"id": null, "code": "protocol", "message": e.to_string()}));
                let _ = write_frame(&mut writer, &Frame::new(MsgType::Error, header, vec![]));
                return Err(e);
            }
        };
        let id = req.header.get("id").cloned().unwrap_or(Value::Null);
        let op = req.header.get("op").and_then(Value::as_str).and_then(Op::parse);
        let frame = if req.msg_type != MsgType::Request {
            let header = obj(json!({"id": id, "code": "bad_request", "message": "expected a request frame"}));
            Frame::new(MsgType::Error, header, vec![])
        } else {
            match state.handle(op, &req) {
                Ok((mut header, tensors)) => {
                    let mut reply_id = id;
                    if state.config.fault == Fault::WrongId
                        && matches!(op, Some(Op::PredictNoise | Op::PredictNoiseBatch))
                    {
                        reply_id = json!(reply_id.as_u64().unwrap_or(0) + 1000);
                    }
                    header.insert("id".into(), reply_id);
                    Frame::new(MsgType::Response, header, tensors)
                }
                Err((code, message)) => Frame::new(
                    MsgType::Error,
                    obj(json!({"id": id, "code": code, "message": message})),
                    vec![],
                ),
            }
        };
        write_frame(&mut writer, &frame)?;
        if op == Some(Op::Shutdown) {
            return Ok(true);
        }
    }
}

/// Loopback server listening on TCP, one thread per connection.
pub struct LoopbackServer {
    addr: SocketAddr,
    state: Arc<LoopbackState>,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl LoopbackServer {
    pub fn spawn(config: LoopbackConfig, addr: &str) -> Result<Self, WireError> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let state = Arc::new(LoopbackState::new(config));
        let stop = Arc::new(AtomicBool::new(false));
        let accept = {
            let state = state.clone();
            let stop = stop.clone();
            thread::spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let state = state.clone();
                    let stop = stop.clone();
                    thread::spawn(move || {
                        let _ = stream.set_nodelay(true);
                        let Ok(reader) = stream.try_clone() else { return };
                        if let Ok(true) = serve_connection(&state, reader, &stream) {
                            stop.store(true, Ordering::SeqCst);
                            let _ = TcpStream::connect(addr);
                        }
                    });
                }
            })
        };
        Ok(Self {
            addr,
            state,
            stop,
            accept: Some(accept),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn state(&self) -> &LoopbackState {
        &self.state
    }

    /// Blocks until a client sends `shutdown`.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for LoopbackServer {
    fn drop(&mut self) {
        if let Some(h) = self.accept.take() {
            self.stop.store(true, Ordering::SeqCst);
            let _ = TcpStream::connect(self.addr);
            let _ = h.join();
        }
    }
}
