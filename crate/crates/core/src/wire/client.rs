use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use image::RgbImage;
use serde_json::{json, Map, Value};

use super::frame::{read_frame, write_frame, Frame, MsgType, Tensor};
use super::{Capabilities, DirectiveHeader, Op, Session, WireError, DEFAULT_TIMEOUT};
use crate::attention::{AttentionDirective, AttentionRecord};
use crate::edges::EdgeImage;
use crate::guidance::ConditionSelector;
use crate::sampler::{Concurrency, DenoiseError, Denoiser, LatentTensor, NoisePrediction, PredictRequest};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClientOptions {
    pub timeout: Duration,
    /// Extra attempts after a timeout; only reconnectable transports retry.
    pub retries: u32,
}

impl Default for ClientOptions {
    fn default() -> Self {
        Self {
            timeout: DEFAULT_TIMEOUT,
            retries: 2,
        }
    }
}

enum Endpoint {
    Tcp(String),
    Fixed,
}

enum Closer {
    Tcp(TcpStream),
    Child(Child),
    None,
}

struct Conn {
    writer: Box<dyn Write + Send>,
    rx: Receiver<Result<Frame, WireError>>,
    closer: Closer,
}

impl Drop for Conn {
    fn drop(&mut self) {
        match &mut self.closer {
            Closer::Tcp(s) => {
                let _ = s.shutdown(Shutdown::Both);
            }
            Closer::Child(c) => {
                let _ = c.kill();
                let _ = c.wait();
            }
            Closer::None => {}
        }
    }
}

impl Conn {
    fn new(reader: Box<dyn Read + Send>, writer: Box<dyn Write + Send>, closer: Closer) -> Self {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut reader = BufReader::new(reader);
            loop {
                let frame = read_frame(&mut reader);
                let stop = frame.is_err();
                if tx.send(frame).is_err() || stop {
                    break;
                }
            }
        });
        Self { writer, rx, closer }
    }
}

/// Protocol client. One request is in flight per connection; calls from
/// several threads are serialized.
pub struct Client {
    endpoint: Endpoint,
    opts: ClientOptions,
    conn: Mutex<Option<Conn>>,
    next_id: AtomicU64,
    caps: Mutex<Option<Capabilities>>,
}

fn tcp_conn(addr: &str, timeout: Duration) -> Result<Conn, WireError> {
    let mut last = None;
    for sa in addr.to_socket_addrs()? {
        match TcpStream::connect_timeout(&sa, timeout) {
            Ok(stream) => {
                stream.set_nodelay(true)?;
                let reader = stream.try_clone()?;
                let writer = BufWriter::new(stream.try_clone()?);
                return Ok(Conn::new(Box::new(reader), Box::new(writer), Closer::Tcp(stream)));
            }
            Err(e) => last = Some(e),
        }
    }
    Err(last
        .map(WireError::Io)
        .unwrap_or_else(|| WireError::Malformed {
            what: "address",
            reason: format!("{addr} resolves to nothing"),
        }))
}

fn obj(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => unreachable!("object literal"),
    }
}

fn header_str(frame: &Frame, key: &str) -> String {
    frame
        .header
        .get(key)
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string()
}

fn field<T: serde::de::DeserializeOwned>(frame: &Frame, key: &'static str) -> Result<T, WireError> {
    let v = frame.header.get(key).cloned().ok_or_else(|| WireError::Malformed {
        what: key,
        reason: "missing from response".into(),
    })?;
    serde_json::from_value(v).map_err(|e| WireError::Malformed {
        what: key,
        reason: e.to_string(),
    })
}

fn tensor<'f>(frame: &'f Frame, name: &str) -> Result<&'f Tensor, WireError> {
    frame
        .tensor(name)
        .ok_or_else(|| WireError::BadTensor(format!("response lacks tensor {name}")))
}

fn latent_tensor(name: &str, z: &LatentTensor) -> Tensor {
    Tensor::from_f32(name, z.shape3().to_vec(), z.as_slice())
}

fn expect_latent(t: &Tensor, expected: [usize; 3]) -> Result<LatentTensor, WireError> {
    if t.shape != expected {
        return Err(WireError::Shape {
            expected: expected.to_vec(),
            got: t.shape.clone(),
        });
    }
    LatentTensor::from_vec(expected, t.to_f32()?).map_err(|e| WireError::BadTensor(e.to_string()))
}

fn edge_tensor(name: &str, e: &EdgeImage) -> Tensor {
    Tensor::from_u8(
        name,
        vec![e.height() as usize, e.width() as usize],
        e.bits().iter().map(|&b| u8::from(b)).collect(),
    )
}

fn image_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    Tensor::from_u8("image", vec![h as usize, w as usize, 3], img.as_raw().clone())
}

fn directive_parts(name: &str, d: &AttentionDirective) -> (Value, Tensor) {
    let header = DirectiveHeader {
        token_indices: d.token_indices.iter().copied().collect(),
        lambda: d.lambda,
        apply_to: d.apply_to,
    };
    let mask = Tensor::from_u8(
        name,
        vec![d.mask.height() as usize, d.mask.width() as usize],
        d.mask.bits().iter().map(|&b| u8::from(b)).collect(),
    );
    (serde_json::to_value(header).expect("serializable"), mask)
}

impl Client {
    pub fn connect_tcp(addr: &str, opts: ClientOptions) -> Result<Self, WireError> {
        let conn = tcp_conn(addr, opts.timeout)?;
        Ok(Self::with_conn(Endpoint::Tcp(addr.to_string()), opts, conn))
    }

    /// Starts `cmd` and speaks the protocol over its stdin/stdout.
    pub fn spawn(cmd: &mut Command, opts: ClientOptions) -> Result<Self, WireError> {
        let mut child = cmd.stdin(Stdio::piped()).stdout(Stdio::piped()).spawn()?;
        let stdin = child.stdin.take().expect("piped");
        let stdout = child.stdout.take().expect("piped");
        let conn = Conn::new(Box::new(stdout), Box::new(BufWriter::new(stdin)), Closer::Child(child));
        Ok(Self::with_conn(Endpoint::Fixed, opts, conn))
    }

    /// Speaks the protocol over an arbitrary byte stream pair.
    pub fn from_io(
        reader: impl Read + Send + 'static,
        writer: impl Write + Send + 'static,
        opts: ClientOptions,
    ) -> Self {
        let conn = Conn::new(Box::new(reader), Box::new(BufWriter::new(writer)), Closer::None);
        Self::with_conn(Endpoint::Fixed, opts, conn)
    }

    fn with_conn(endpoint: Endpoint, opts: ClientOptions, conn: Conn) -> Self {
        Self {
            endpoint,
            opts,
            conn: Mutex::new(Some(conn)),
            next_id: AtomicU64::new(1),
            caps: Mutex::new(None),
        }
    }

    pub fn options(&self) -> ClientOptions {
        self.opts
    }

    fn call(&self, op: Op, header: Map<String, Value>, tensors: &[Tensor]) -> Result<Frame, WireError> {
        let reconnectable = matches!(self.endpoint, Endpoint::Tcp(_));
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.call_once(op, header.clone(), tensors) {
                Ok(f) => return Ok(f),
                Err(e) if e.is_retryable() && reconnectable && attempt <= self.opts.retries => continue,
                Err(e) if attempt > 1 => {
                    return Err(WireError::RetriesExhausted {
                        attempts: attempt,
                        source: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn call_once(&self, op: Op, mut header: Map<String, Value>, tensors: &[Tensor]) -> Result<Frame, WireError> {
        let mut guard = self.conn.lock().expect("poisoned");
        if guard.is_none() {
            match &self.endpoint {
                Endpoint::Tcp(addr) => *guard = Some(tcp_conn(addr, self.opts.timeout)?),
                Endpoint::Fixed => return Err(WireError::Closed),
            }
        }
        let conn = guard.as_mut().expect("connected above");
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        header.insert("op".into(), op.as_str().into());
        header.insert("id".into(), id.into());
        let request = Frame::new(MsgType::Request, header, tensors.to_vec());
        if let Err(e) = write_frame(&mut conn.writer, &request) {
            *guard = None;
            return Err(e);
        }
        let response = match conn.rx.recv_timeout(self.opts.timeout) {
            Ok(Ok(f)) => f,
            Ok(Err(e)) => {
                *guard = None;
                return Err(e);
            }
            Err(RecvTimeoutError::Timeout) => {
                *guard = None;
                return Err(WireError::Timeout {
                    op: op.as_str().into(),
                    after: self.opts.timeout,
                });
            }
            Err(RecvTimeoutError::Disconnected) => {
                *guard = None;
                return Err(WireError::Closed);
            }
        };
        let got = response.header.get("id").and_then(Value::as_u64);
        if response.msg_type == MsgType::Error && got.is_none_or(|g| g == id) {
            return Err(WireError::Remote {
                code: header_str(&response, "code"),
                message: header_str(&response, "message"),
            });
        }
        if got != Some(id) {
            *guard = None;
            return Err(WireError::IdMismatch {
                expected: id,
                got: got.unwrap_or(u64::MAX),
            });
        }
        match response.msg_type {
            MsgType::Response => Ok(response),
            MsgType::Error => unreachable!("handled above"),
            MsgType::Request => {
                *guard = None;
                Err(WireError::Protocol {
                    offset: 5,
                    reason: "server sent a request frame".into(),
                })
            }
        }
    }

    pub fn capabilities(&self) -> Result<Capabilities, WireError> {
        if let Some(c) = self.caps.lock().expect("poisoned").clone() {
            return Ok(c);
        }
        let resp = self.call(Op::Capabilities, Map::new(), &[])?;
        let caps: Capabilities = field(&resp, "capabilities")?;
        *self.caps.lock().expect("poisoned") = Some(caps.clone());
        Ok(caps)
    }

    pub fn init_session(
        &self,
        prompt: &str,
        wordlist: &[String],
        edge: &EdgeImage,
        pip_edge: &EdgeImage,
    ) -> Result<Session, WireError> {
        if edge.canvas() != pip_edge.canvas() {
            return Err(WireError::BadTensor(format!(
                "edge {} and pip edge {} differ in size",
                edge.canvas(),
                pip_edge.canvas()
            )));
        }
        let header = obj(json!({
            "prompt": prompt,
            "wordlist": wordlist,
            "canvas": [edge.width(), edge.height()],
        }));
        let resp = self.call(
            Op::InitSession,
            header,
            &[edge_tensor("edge", edge), edge_tensor("pip_edge", pip_edge)],
        )?;
        let session: Session = field(&resp, "session")?;
        session.validate()?;
        Ok(session)
    }

    fn check_latent(session: &Session, z: &LatentTensor) -> Result<(), WireError> {
        if z.shape3().as_slice() != session.latent_shape.as_slice() {
            return Err(WireError::Shape {
                expected: session.latent_shape.clone(),
                got: z.shape3().to_vec(),
            });
        }
        Ok(())
    }

    pub fn predict(
        &self,
        session: &Session,
        z: &LatentTensor,
        t: usize,
        cond: ConditionSelector,
        directive: Option<&AttentionDirective>,
    ) -> Result<NoisePrediction, WireError> {
        Self::check_latent(session, z)?;
        let mut header = obj(json!({"session": session.id, "t": t, "cond": cond}));
        let mut tensors = vec![latent_tensor("z", z)];
        if let Some(d) = directive {
            let (h, mask) = directive_parts("mask", d);
            header.insert("directive".into(), h);
            tensors.push(mask);
        }
        let resp = self.call(Op::PredictNoise, header, &tensors)?;
        expect_latent(tensor(&resp, "eps")?, z.shape3())
    }

    /// All requests in one frame; predictions come back in request order.
    pub fn predict_batch(
        &self,
        session: &Session,
        reqs: &[PredictRequest<'_>],
    ) -> Result<Vec<NoisePrediction>, WireError> {
        let mut items = Vec::with_capacity(reqs.len());
        let mut tensors = Vec::new();
        for (i, r) in reqs.iter().enumerate() {
            Self::check_latent(session, r.z)?;
            let mut item = obj(json!({"t": r.t, "cond": r.cond, "z": format!("z_{i}")}));
            tensors.push(latent_tensor(&format!("z_{i}"), r.z));
            if let Some(d) = r.directive {
                let (h, mask) = directive_parts(&format!("mask_{i}"), d);
                item.insert("directive".into(), h);
                item.insert("mask".into(), format!("mask_{i}").into());
                tensors.push(mask);
            }
            items.push(Value::Object(item));
        }
        let header = obj(json!({"session": session.id, "items": items}));
        let resp = self.call(Op::PredictNoiseBatch, header, &tensors)?;
        reqs.iter()
            .enumerate()
            .map(|(i, r)| expect_latent(tensor(&resp, &format!("eps_{i}"))?, r.z.shape3()))
            .collect()
    }

    pub fn encode_latent(&self, image: &RgbImage) -> Result<LatentTensor, WireError> {
        let resp = self.call(Op::EncodeLatent, Map::new(), &[image_tensor(image)])?;
        let t = tensor(&resp, "latent")?;
        let shape: [usize; 3] = t.shape.clone().try_into().map_err(|s: Vec<usize>| WireError::Shape {
            expected: vec![0; 3],
            got: s,
        })?;
        expect_latent(t, shape)
    }

    pub fn decode_latent(&self, z: &LatentTensor) -> Result<RgbImage, WireError> {
        let resp = self.call(Op::DecodeLatent, Map::new(), &[latent_tensor("latent", z)])?;
        let t = tensor(&resp, "image")?;
        match t.shape.as_slice() {
            &[h, w, 3] => RgbImage::from_raw(w as u32, h as u32, t.as_u8()?.to_vec())
                .ok_or_else(|| WireError::BadTensor("image bytes do not match shape".into())),
            other => Err(WireError::Shape {
                expected: vec![0, 0, 3],
                got: other.to_vec(),
            }),
        }
    }

    fn require(&self, op: Op) -> Result<(), WireError> {
        if self.capabilities()?.supports(op) {
            Ok(())
        } else {
            Err(WireError::Unsupported(op.as_str().into()))
        }
    }

    pub fn ocr(&self, image: &RgbImage) -> Result<Vec<String>, WireError> {
        self.require(Op::Ocr)?;
        let resp = self.call(Op::Ocr, Map::new(), &[image_tensor(image)])?;
        field(&resp, "texts")
    }

    pub fn clip_score(&self, image: &RgbImage, prompt: &str) -> Result<f64, WireError> {
        self.require(Op::ClipScore)?;
        let resp = self.call(Op::ClipScore, obj(json!({"prompt": prompt})), &[image_tensor(image)])?;
        field(&resp, "score")
    }

    /// Asks the server to stop and closes this connection.
    pub fn shutdown(&self) -> Result<(), WireError> {
        let result = self.call(Op::Shutdown, Map::new(), &[]).map(|_| ());
        *self.conn.lock().expect("poisoned") = None;
        result
    }
}

/// Denoiser backed by one or more protocol connections sharing a session.
pub struct RemoteDenoiser {
    clients: Vec<Arc<Client>>,
    session: Session,
    concurrency: Concurrency,
}

impl RemoteDenoiser {
    /// Picks batched calls when the server offers them, parallel calls when
    /// it is concurrent and several connections are available, and serial
    /// calls otherwise.
    pub fn new(clients: Vec<Arc<Client>>, session: Session) -> Result<Self, WireError> {
        let first = clients.first().ok_or(WireError::Closed)?;
        let caps = first.capabilities()?;
        let concurrency = if caps.supports(Op::PredictNoiseBatch) {
            Concurrency::Batched
        } else if caps.concurrent && clients.len() > 1 {
            Concurrency::Concurrent
        } else {
            Concurrency::Serial
        };
        Ok(Self {
            clients,
            session,
            concurrency,
        })
    }

    pub fn with_concurrency(mut self, concurrency: Concurrency) -> Self {
        self.concurrency = concurrency;
        self
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    fn check_session(&self, id: &str) -> Result<(), DenoiseError> {
        if id != self.session.id {
            return Err(DenoiseError::Invalid(format!(
                "request for session {id:?} on a denoiser bound to {:?}",
                self.session.id
            )));
        }
        Ok(())
    }
}

impl Denoiser for RemoteDenoiser {
    fn predict(&self, req: &PredictRequest<'_>) -> Result<NoisePrediction, DenoiseError> {
        self.check_session(req.session)?;
        let client = &self.clients[req.cond as usize % self.clients.len()];
        Ok(client.predict(&self.session, req.z, req.t, req.cond, req.directive)?)
    }

    fn predict_batch(&self, reqs: &[PredictRequest<'_>]) -> Result<Vec<NoisePrediction>, DenoiseError> {
        for r in reqs {
            self.check_session(r.session)?;
        }
        Ok(self.clients[0].predict_batch(&self.session, reqs)?)
    }

    fn concurrency(&self) -> Concurrency {
        self.concurrency
    }

    fn take_attention_records(&self) -> Option<Vec<AttentionRecord>> {
        None
    }
}
