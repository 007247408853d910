//! Attaching a backend through the wire protocol: a lockstep client that
//! implements [`Backend`], and a server loop that exposes any backend.

use std::io::{BufReader, BufWriter, Read, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use crate::backend::wire::{Frame, Opcode, Request, Response, WireTensor};
use crate::backend::{Backend, BackendInfo};
use crate::error::{Error, Result};
use crate::tensor::{Image, LatentGrid, Tensor3};

fn dispatch(backend: &dyn Backend, req: Request) -> Result<Response> {
    let op = req.opcode();
    let tensor = match req {
        Request::Metadata => return Ok(Response::Metadata(backend.info().clone())),
        Request::EmbedText(text) => WireTensor::from_vector(&backend.embed_text(&text)?),
        Request::EmbedImage(img) => WireTensor::from_vector(&backend.embed_image(&img.to_tensor()?)?),
        Request::EmbedImageVjp { image, cotangent } => {
            WireTensor::from_tensor(&backend.embed_image_vjp(&image.to_tensor()?, &cotangent.to_vector()?)?)
        }
        Request::Decode(z) => WireTensor::from_tensor(&backend.decode(&z.to_tensor()?)?),
        Request::DecodeVjp { latent, cotangent } => {
            WireTensor::from_tensor(&backend.decode_vjp(&latent.to_tensor()?, &cotangent.to_tensor()?)?)
        }
        Request::Encode(img) => WireTensor::from_tensor(&backend.encode(&img.to_tensor()?)?),
    };
    Ok(Response::Tensor { opcode: op, tensor })
}

/// Serves one connection until the peer closes it. The first request must
/// be a metadata request; anything else is answered with an error and the
/// connection is dropped.
pub fn serve_connection(backend: &dyn Backend, reader: impl Read, writer: impl Write) -> Result<()> {
    let mut reader = BufReader::new(reader);
    let mut writer = BufWriter::new(writer);
    let mut handshaken = false;
    while let Some(frame) = Frame::read_from(&mut reader)? {
        let id = frame.request_id;
        if !handshaken && frame.opcode != Opcode::Metadata {
            Response::Error("metadata request must come first".into())
                .to_frame(id)
                .write_to(&mut writer)?;
            writer.flush()?;
            return Err(Error::protocol(4, "connection did not start with metadata"));
        }
        handshaken = true;
        let resp = Request::from_frame(&frame)
            .and_then(|req| dispatch(backend, req))
            .unwrap_or_else(|e| Response::Error(e.to_string()));
        resp.to_frame(id).write_to(&mut writer)?;
        writer.flush()?;
    }
    Ok(())
}

/// Accepts connections on a Unix socket forever, one thread per connection.
pub fn serve_unix(backend: Arc<dyn Backend>, path: &Path) -> Result<()> {
    let listener = UnixListener::bind(path)?;
    for stream in listener.incoming() {
        let stream = stream?;
        let backend = Arc::clone(&backend);
        thread::spawn(move || {
            let read = match stream.try_clone() {
                Ok(s) => s,
                Err(_) => return,
            };
            let _ = serve_connection(backend.as_ref(), read, stream);
        });
    }
    Ok(())
}

struct Connection {
    reader: BufReader<Box<dyn Read + Send>>,
    writer: BufWriter<Box<dyn Write + Send>>,
    next_id: u64,
}

impl Connection {
    fn call(&mut self, req: &Request) -> Result<Response> {
        let id = self.next_id;
        self.next_id += 1;
        req.to_frame(id).write_to(&mut self.writer)?;
        self.writer.flush()?;
        let frame =
            Frame::read_from(&mut self.reader)?.ok_or_else(|| Error::backend("backend closed the connection"))?;
        if frame.request_id != id {
            return Err(Error::protocol(
                5,
                format!("response id {} does not match request {id}", frame.request_id),
            ));
        }
        let resp = Response::from_frame(&frame)?;
        match resp {
            Response::Error(msg) => Err(Error::backend(msg)),
            r if r.opcode() != req.opcode() => Err(Error::protocol(
                4,
                format!("response opcode {:?} for request {:?}", r.opcode(), req.opcode()),
            )),
            r => Ok(r),
        }
    }
}

/// A backend reached over one or more wire connections. Each connection
/// carries one outstanding request at a time; concurrent callers spread
/// across connections.
pub struct WireBackend {
    info: BackendInfo,
    conns: Vec<Mutex<Connection>>,
    cursor: AtomicUsize,
}

type Stream = (Box<dyn Read + Send>, Box<dyn Write + Send>);

impl WireBackend {
    pub fn from_streams(streams: Vec<Stream>) -> Result<Self> {
        if streams.is_empty() {
            return Err(Error::backend("no connections"));
        }
        let mut conns: Vec<Connection> = streams
            .into_iter()
            .map(|(r, w)| Connection {
                reader: BufReader::new(r),
                writer: BufWriter::new(w),
                next_id: 0,
            })
            .collect();
        let mut info = None;
        for c in &mut conns {
            match c.call(&Request::Metadata)? {
                Response::Metadata(i) => info = Some(i),
                _ => unreachable!("opcode checked in call"),
            }
        }
        let info = info.expect("at least one connection");
        info.validate()?;
        Ok(Self {
            info,
            conns: conns.into_iter().map(Mutex::new).collect(),
            cursor: AtomicUsize::new(0),
        })
    }

    pub fn connect_unix(path: &Path, connections: usize) -> Result<Self> {
        let mut streams: Vec<Stream> = Vec::new();
        for _ in 0..connections.max(1) {
            let s =
                UnixStream::connect(path).map_err(|e| Error::backend(format!("connect {}: {e}", path.display())))?;
            streams.push((Box::new(s.try_clone()?), Box::new(s)));
        }
        Self::from_streams(streams)
    }

    /// Serves `backend` on background threads over socket pairs and
    /// connects to it; the threads exit when this client is dropped.
    pub fn loopback(backend: Arc<dyn Backend>, connections: usize) -> Result<Self> {
        let mut streams: Vec<Stream> = Vec::new();
        for _ in 0..connections.max(1) {
            let (client, server) = UnixStream::pair()?;
            let b = Arc::clone(&backend);
            let server_read = server.try_clone()?;
            thread::spawn(move || {
                let _ = serve_connection(b.as_ref(), server_read, server);
            });
            streams.push((Box::new(client.try_clone()?), Box::new(client)));
        }
        Self::from_streams(streams)
    }

    fn call(&self, req: Request) -> Result<WireTensor> {
        let n = self.conns.len();
        let start = self.cursor.fetch_add(1, Ordering::Relaxed) % n;
        let mut guard = None;
        for i in 0..n {
            if let Ok(g) = self.conns[(start + i) % n].try_lock() {
                guard = Some(g);
                break;
            }
        }
        let mut conn = match guard {
            Some(g) => g,
            None => self.conns[start]
                .lock()
                .map_err(|_| Error::backend("connection poisoned"))?,
        };
        match conn.call(&req)? {
            Response::Tensor { tensor, .. } => Ok(tensor),
            other => Err(Error::backend(format!("unexpected response {:?}", other.opcode()))),
        }
    }
}

impl Backend for WireBackend {
    fn info(&self) -> &BackendInfo {
        &self.info
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        self.call(Request::EmbedText(text.to_owned()))?.to_vector()
    }

    fn embed_image(&self, image: &Tensor3) -> Result<Vec<f64>> {
        self.call(Request::EmbedImage(WireTensor::from_tensor(image)))?
            .to_vector()
    }

    fn embed_image_vjp(&self, image: &Tensor3, cotangent: &[f64]) -> Result<Tensor3> {
        self.call(Request::EmbedImageVjp {
            image: WireTensor::from_tensor(image),
            cotangent: WireTensor::from_vector(cotangent),
        })?
        .to_tensor()
    }

    fn decode(&self, z: &LatentGrid) -> Result<Image> {
        self.call(Request::Decode(WireTensor::from_tensor(z)))?.to_tensor()
    }

    fn decode_vjp(&self, z: &LatentGrid, cotangent: &Image) -> Result<LatentGrid> {
        self.call(Request::DecodeVjp {
            latent: WireTensor::from_tensor(z),
            cotangent: WireTensor::from_tensor(cotangent),
        })?
        .to_tensor()
    }

    fn encode(&self, image: &Image) -> Result<LatentGrid> {
        self.call(Request::Encode(WireTensor::from_tensor(image)))?.to_tensor()
    }
}
