use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::WireError;

pub const MAGIC: [u8; 4] = *b"DTXT";
pub const VERSION: u8 = 1;
/// Upper bound on accepted header sizes.
pub const MAX_HEADER_LEN: u32 = 16 << 20;
/// Upper bound on accepted payload sizes.
pub const MAX_PAYLOAD_LEN: u64 = 1 << 32;

const PREFIX_LEN: usize = 4 + 1 + 1 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MsgType {
    Request = 1,
    Response = 2,
    Error = 3,
}

impl MsgType {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            1 => Some(Self::Request),
            2 => Some(Self::Response),
            3 => Some(Self::Error),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    U8,
}

impl DType {
    pub fn size(&self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorDescriptor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

/// Named tensor with its raw little-endian bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl Tensor {
    pub fn from_f32(name: impl Into<String>, shape: Vec<usize>, values: &[f32]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len(), "shape/value count");
        Self {
            name: name.into(),
            dtype: DType::F32,
            shape,
            data: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn from_u8(name: impl Into<String>, shape: Vec<usize>, values: Vec<u8>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len(), "shape/value count");
        Self {
            name: name.into(),
            dtype: DType::U8,
            shape,
            data: values,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn to_f32(&self) -> Result<Vec<f32>, WireError> {
        if self.dtype != DType::F32 {
            return Err(WireError::BadTensor(format!("{} is {:?}, expected f32", self.name, self.dtype)));
        }
        Ok(self
            .data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn as_u8(&self) -> Result<&[u8], WireError> {
        if self.dtype != DType::U8 {
            return Err(WireError::BadTensor(format!("{} is {:?}, expected u8", self.name, self.dtype)));
        }
        Ok(&self.data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub msg_type: MsgType,
    /// JSON object; the `tensors` key is reserved for descriptors.
    pub header: Map<String, Value>,
    pub tensors: Vec<Tensor>,
}

impl Frame {
    pub fn new(msg_type: MsgType, header: Map<String, Value>, tensors: Vec<Tensor>) -> Self {
        Self {
            msg_type,
            header,
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::new();
    write_frame(&mut out, frame)?;
    Ok(out)
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> Result<(), WireError> {
    if frame.header.contains_key("tensors") {
        return Err(WireError::BadTensor("header key `tensors` is reserved".into()));
    }
    let mut offset = 0u64;
    let mut descriptors = Vec::with_capacity(frame.tensors.len());
    for t in &frame.tensors {
        let expected = t.numel() * t.dtype.size();
        if t.data.len() != expected {
            return Err(WireError::BadTensor(format!(
                "{}: shape {:?} needs {expected} bytes, has {}",
                t.name,
                t.shape,
                t.data.len()
            )));
        }
        descriptors.push(TensorDescriptor {
            name: t.name.clone(),
            dtype: t.dtype,
            shape: t.shape.clone(),
            offset,
            length: t.data.len() as u64,
        });
        offset += t.data.len() as u64;
    }
    let mut header = frame.header.clone();
    header.insert("tensors".into(), serde_json::to_value(&descriptors).expect("serializable"));
    let header_bytes = serde_json::to_vec(&Value::Object(header)).expect("serializable");

    let mut prefix = Vec::with_capacity(PREFIX_LEN);
    prefix.extend_from_slice(&MAGIC);
    prefix.push(VERSION);
    prefix.push(frame.msg_type as u8);
    prefix.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    w.write_all(&prefix)?;
    w.write_all(&header_bytes)?;
    w.write_all(&offset.to_le_bytes())?;
    for t in &frame.tensors {
        w.write_all(&t.data)?;
    }
    w.flush()?;
    Ok(())
}

pub fn decode_frame(bytes: &[u8]) -> Result<Frame, WireError> {
    let mut cursor = bytes;
    let frame = read_frame(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(WireError::Protocol {
            offset: bytes.len() - cursor.len(),
            reason: format!("{} trailing bytes after frame", cursor.len()),
        });
    }
    Ok(frame)
}

fn read_exact_at(r: &mut impl Read, buf: &mut [u8], offset: usize) -> Result<(), WireError> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 && offset == 0 => return Err(WireError::Closed),
            Ok(0) => {
                return Err(WireError::Protocol {
                    offset: offset + filled,
                    reason: format!("truncated frame: needed {} more bytes", buf.len() - filled),
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

/// Reads one frame; error offsets are relative to the frame start.
pub fn read_frame(r: &mut impl Read) -> Result<Frame, WireError> {
    let mut prefix = [0u8; PREFIX_LEN];
    read_exact_at(r, &mut prefix, 0)?;
    if prefix[..4] != MAGIC {
        return Err(WireError::Protocol {
            offset: 0,
            reason: format!("bad magic {:02x?}", &prefix[..4]),
        });
    }
    if prefix[4] != VERSION {
        return Err(WireError::Protocol {
            offset: 4,
            reason: format!("unsupported version {}", prefix[4]),
        });
    }
    let msg_type = MsgType::from_byte(prefix[5]).ok_or_else(|| WireError::Protocol {
        offset: 5,
        reason: format!("unknown message type {}", prefix[5]),
    })?;
    let header_len = u32::from_le_bytes(prefix[6..10].try_into().expect("4 bytes"));
    if header_len > MAX_HEADER_LEN {
        return Err(WireError::Protocol {
            offset: 6,
            reason: format!("header length {header_len} exceeds {MAX_HEADER_LEN}"),
        });
    }
    let mut header_bytes = vec![0u8; header_len as usize];
    read_exact_at(r, &mut header_bytes, PREFIX_LEN)?;
    let header_value: Value = serde_json::from_slice(&header_bytes).map_err(|e| WireError::Protocol {
        offset: PREFIX_LEN,
        reason: format!("header is not JSON: {e}"),
    })?;
    let Value::Object(mut header) = header_value else {
        return Err(WireError::Protocol {
            offset: PREFIX_LEN,
            reason: "header is not a JSON object".into(),
        });
    };
    let descriptors: Vec<TensorDescriptor> = match header.remove("tensors") {
        Some(v) => serde_json::from_value(v).map_err(|e| WireError::Protocol {
            offset: PREFIX_LEN,
            reason: format!("bad tensor descriptors: {e}"),
        })?,
        None => Vec::new(),
    };

    let len_at = PREFIX_LEN + header_len as usize;
    let mut len_bytes = [0u8; 8];
    read_exact_at(r, &mut len_bytes, len_at)?;
    let payload_len = u64::from_le_bytes(len_bytes);
    if payload_len > MAX_PAYLOAD_LEN {
        return Err(WireError::Protocol {
            offset: len_at,
            reason: format!("payload length {payload_len} exceeds {MAX_PAYLOAD_LEN}"),
        });
    }
    let mut expected_offset = 0u64;
    for d in &descriptors {
        let numel = d.shape.iter().try_fold(1u64, |acc, &s| acc.checked_mul(s as u64));
        let want = numel.and_then(|n| n.checked_mul(d.dtype.size() as u64));
        if want != Some(d.length) {
            return Err(WireError::Protocol {
                offset: PREFIX_LEN,
                reason: format!("tensor {}: length {} does not match shape {:?}", d.name, d.length, d.shape),
            });
        }
        if d.offset != expected_offset {
            return Err(WireError::Protocol {
                offset: PREFIX_LEN,
                reason: format!(
                    "tensor {}: offset {} breaks in-order layout (expected {expected_offset})",
                    d.name, d.offset
                ),
            });
        }
        expected_offset += d.length;
    }
    if expected_offset != payload_len {
        return Err(WireError::Protocol {
            offset: len_at,
            reason: format!("payload length {payload_len} but descriptors cover {expected_offset} bytes"),
        });
    }
    let payload_at = len_at + 8;
    let mut tensors = Vec::with_capacity(descriptors.len());
    for d in descriptors {
        let mut data = vec![0u8; d.length as usize];
        read_exact_at(r, &mut data, payload_at + d.offset as usize)?;
        tensors.push(Tensor {
            name: d.name,
            dtype: d.dtype,
            shape: d.shape,
            data,
        });
    }
    Ok(Frame {
        msg_type,
        header,
        tensors,
    })
}
