//! Binary frame codec for out-of-process backends.
//!
//! All integers are little-endian. A frame is
//!
//! ```text
//! magic "LSB1" | opcode u8 | request id u64 | body length u32 | body
//! ```
//!
//! Tensors are `rank u32, dims u32×rank, f32×Π dims`; strings are
//! `length u32, UTF-8 bytes`. Responses echo the request's opcode and id,
//! or carry opcode 255 with an error string.

use std::io::{self, Read, Write};

use crate::backend::BackendInfo;
use crate::error::{Error, Result};
use crate::latent::Codebook;
use crate::tensor::Tensor3;

pub const MAGIC: [u8; 4] = *b"LSB1";
pub const HEADER_LEN: usize = 17;
pub const MAX_BODY: u32 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Opcode {
    Metadata = 0,
    EmbedText = 1,
    EmbedImage = 2,
    EmbedImageVjp = 3,
    Decode = 4,
    DecodeVjp = 5,
    Encode = 6,
    Error = 255,
}

impl Opcode {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => Opcode::Metadata,
            1 => Opcode::EmbedText,
            2 => Opcode::EmbedImage,
            3 => Opcode::EmbedImageVjp,
            4 => Opcode::Decode,
            5 => Opcode::DecodeVjp,
            6 => Opcode::Encode,
            255 => Opcode::Error,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub opcode: Opcode,
    pub request_id: u64,
    pub body: Vec<u8>,
}

impl Frame {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.body.len());
        out.extend_from_slice(&MAGIC);
        out.push(self.opcode as u8);
        out.extend_from_slice(&self.request_id.to_le_bytes());
        out.extend_from_slice(&(self.body.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.body);
        out
    }

    /// Parses one frame from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn parse(bytes: &[u8]) -> Result<(Frame, usize)> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::protocol(
                bytes.len(),
                format!("truncated header ({} of {HEADER_LEN} bytes)", bytes.len()),
            ));
        }
        let (opcode, request_id, len) = parse_header(bytes[..HEADER_LEN].try_into().unwrap())?;
        let end = HEADER_LEN + len as usize;
        if bytes.len() < end {
            return Err(Error::protocol(
                bytes.len(),
                format!("truncated body ({} of {len} bytes)", bytes.len() - HEADER_LEN),
            ));
        }
        Ok((
            Frame {
                opcode,
                request_id,
                body: bytes[HEADER_LEN..end].to_vec(),
            },
            end,
        ))
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    /// Reads one frame. Returns `Ok(None)` on a clean end of stream before
    /// the first header byte.
    pub fn read_from(r: &mut impl Read) -> Result<Option<Frame>> {
        let mut header = [0u8; HEADER_LEN];
        let got = read_full(r, &mut header)?;
        if got == 0 {
            return Ok(None);
        }
        if got < HEADER_LEN {
            return Err(Error::protocol(got, "stream ended inside a frame header"));
        }
        let (opcode, request_id, len) = parse_header(&header)?;
        let mut body = vec![0u8; len as usize];
        let got = read_full(r, &mut body)?;
        if got < body.len() {
            return Err(Error::protocol(HEADER_LEN + got, "stream ended inside a frame body"));
        }
        Ok(Some(Frame {
            opcode,
            request_id,
            body,
        }))
    }
}

fn read_full(r: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

fn parse_header(h: &[u8; HEADER_LEN]) -> Result<(Opcode, u64, u32)> {
    if h[..4] != MAGIC {
        return Err(Error::protocol(0, format!("bad magic {:02x?}", &h[..4])));
    }
    let opcode = Opcode::from_u8(h[4]).ok_or_else(|| Error::protocol(4, format!("unknown opcode {}", h[4])))?;
    let request_id = u64::from_le_bytes(h[5..13].try_into().unwrap());
    let len = u32::from_le_bytes(h[13..17].try_into().unwrap());
    if len > MAX_BODY {
        return Err(Error::protocol(13, format!("body length {len} exceeds limit")));
    }
    Ok((opcode, request_id, len))
}

/// A tensor as carried on the wire: single precision, arbitrary rank.
#[derive(Debug, Clone, PartialEq)]
pub struct WireTensor {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl WireTensor {
    pub fn from_tensor(t: &Tensor3) -> Self {
        let (r, c, k) = t.dims();
        Self {
            dims: vec![r as u32, c as u32, k as u32],
            data: t.as_slice().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_vector(v: &[f64]) -> Self {
        Self {
            dims: vec![v.len() as u32],
            data: v.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor3> {
        match self.dims[..] {
            [r, c, k] => Tensor3::from_vec(
                r as usize,
                c as usize,
                k as usize,
                self.data.iter().map(|&v| v as f64).collect(),
            ),
            _ => Err(Error::backend(format!(
                "expected a rank-3 tensor, got dims {:?}",
                self.dims
            ))),
        }
    }

    pub fn to_vector(&self) -> Result<Vec<f64>> {
        if self.dims.len() != 1 {
            return Err(Error::backend(format!(
                "expected a rank-1 tensor, got dims {:?}",
                self.dims
            )));
        }
        Ok(self.data.iter().map(|&v| v as f64).collect())
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, t: &WireTensor) {
        self.u32(t.dims.len() as u32);
        for &d in &t.dims {
            self.u32(d);
        }
        for &v in &t.data {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    /// Offset of `buf` within the whole frame, for error reporting.
    base: usize,
}

impl<'a> Reader<'a> {
    fn new(body: &'a [u8]) -> Self {
        Self {
            buf: body,
            pos: 0,
            base: HEADER_LEN,
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::protocol(self.base + self.pos, msg)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("need {n} bytes, {} remain", self.buf.len() - self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let start = self.pos;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|e| Error::protocol(self.base + start + e.utf8_error().valid_up_to(), "invalid UTF-8"))
    }

    fn tensor(&mut self) -> Result<WireTensor> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(self.err(format!("tensor rank {rank} is too large")));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for _ in 0..rank {
            let d = self.u32()?;
            count = count
                .checked_mul(d as usize)
                .ok_or_else(|| self.err("tensor element count overflows"))?;
            dims.push(d);
        }
        let bytes = self.take(
            count
                .checked_mul(4)
                .ok_or_else(|| self.err("tensor byte count overflows"))?,
        )?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(WireTensor { dims, data })
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!("{} trailing bytes after message", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    Metadata,
    EmbedText(String),
    EmbedImage(WireTensor),
    EmbedImageVjp { image: WireTensor, cotangent: WireTensor },
    Decode(WireTensor),
    DecodeVjp { latent: WireTensor, cotangent: WireTensor },
    Encode(WireTensor),
}

impl Request {
    pub fn opcode(&self) -> Opcode {
        match self {
            Request::Metadata => Opcode::Metadata,
            Request::EmbedText(_) => Opcode::EmbedText,
            Request::EmbedImage(_) => Opcode::EmbedImage,
            Request::EmbedImageVjp { .. } => Opcode::EmbedImageVjp,
            Request::Decode(_) => Opcode::Decode,
            Request::DecodeVjp { .. } => Opcode::DecodeVjp,
            Request::Encode(_) => Opcode::Encode,
        }
    }

    pub fn to_frame(&self, request_id: u64) -> Frame {
        let mut w = Writer(Vec::new());
        match self {
            Request::Metadata => {}
            Request::EmbedText(s) => w.string(s),
            Request::EmbedImage(t) | Request::Decode(t) | Request::Encode(t) => w.tensor(t),
            Request::EmbedImageVjp { image: a, cotangent: b }
            | Request::DecodeVjp {
                latent: a,
                cotangent: b,
            } => {
                w.tensor(a);
                w.tensor(b);
            }
        }
        Frame {
            opcode: self.opcode(),
            request_id,
            body: w.0,
        }
    }

    pub fn from_frame(frame: &Frame) -> Result<Self> {
        let mut r = Reader::new(&frame.body);
        let req = match frame.opcode {
            Opcode::Metadata => Request::Metadata,
            Opcode::EmbedText => Request::EmbedText(r.string()?),
            Opcode::EmbedImage => Request::EmbedImage(r.tensor()?),
            Opcode::EmbedImageVjp => Request::EmbedImageVjp {
                image: r.tensor()?,
                cotangent: r.tensor()?,
            },
            Opcode::Decode => Request::Decode(r.tensor()?),
            Opcode::DecodeVjp => Request::DecodeVjp {
                latent: r.tensor()?,
                cotangent: r.tensor()?,
            },
            Opcode::Encode => Request::Encode(r.tensor()?),
            Opcode::Error => return Err(Error::protocol(4, "error opcode in a request")),
        };
        r.finish()?;
        Ok(req)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Metadata(BackendInfo),
    /// Result of any tensor-valued call; `opcode` names which.
    Tensor {
        opcode: Opcode,
        tensor: WireTensor,
    },
    Error(String),
}

impl Response {
    pub fn opcode(&self) -> Opcode {
        match self {
            Response::Metadata(_) => Opcode::Metadata,
            Response::Tensor { opcode, .. } => *opcode,
            Response::Error(_) => Opcode::Error,
        }
    }

    pub fn to_frame(&self, request_id: u64) -> Frame {
        let mut w = Writer(Vec::new());
        match self {
            Response::Metadata(info) => {
                w.string(&info.name);
                w.string(&info.version);
                for d in [
                    info.embed_dim,
                    info.input_res,
                    info.latent_rows,
                    info.latent_cols,
                    info.image_rows,
                    info.image_cols,
                ] {
                    w.u32(d as u32);
                }
                w.tensor(&WireTensor {
                    dims: vec![info.codebook.len() as u32, info.codebook.dim() as u32],
                    data: info.codebook.as_slice().iter().map(|&v| v as f32).collect(),
                });
            }
            Response::Tensor { tensor, .. } => w.tensor(tensor),
            Response::Error(msg) => w.string(msg),
        }
        Frame {
            opcode: self.opcode(),
            request_id,
            body: w.0,
        }
    }

    pub fn from_frame(frame: &Frame) -> Result<Self> {
        let mut r = Reader::new(&frame.body);
        let resp = match frame.opcode {
            Opcode::Metadata => {
                let name = r.string()?;
                let version = r.string()?;
                let mut dims = [0usize; 6];
                for d in &mut dims {
                    *d = r.u32()? as usize;
                }
                let at = r.pos;
                let cb = r.tensor()?;
                if cb.dims.len() != 2 {
                    return Err(Error::protocol(HEADER_LEN + at, "codebook must be rank 2"));
                }
                let codebook = Codebook::new(cb.dims[1] as usize, cb.data.iter().map(|&v| v as f64).collect())
                    .map_err(|e| Error::protocol(HEADER_LEN + at, e.to_string()))?;
                Response::Metadata(BackendInfo {
                    name,
                    version,
                    embed_dim: dims[0],
                    input_res: dims[1],
                    latent_rows: dims[2],
                    latent_cols: dims[3],
                    image_rows: dims[4],
                    image_cols: dims[5],
                    codebook,
                })
            }
            Opcode::Error => Response::Error(r.string()?),
            op => Response::Tensor {
                opcode: op,
                tensor: r.tensor()?,
            },
        };
        r.finish()?;
        Ok(resp)
    }
}
