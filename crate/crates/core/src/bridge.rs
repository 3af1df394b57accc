//! Length-prefixed binary protocol for evaluating losses on an external
//! model.
//!
//! Every frame is `u32 len · "MPX1" · u8 type · u64 request_id · payload`,
//! little-endian, where `len` counts the bytes after the prefix.
//!
//! | type | frame        | payload                                        |
//! |------|--------------|------------------------------------------------|
//! | 1    | EvalRequest  | `u16 count` · `count ×` MPXT body              |
//! | 2    | EvalResponse | `u16 count` · `count × (u16 item, f64 loss)`   |
//! | 3    | Error        | `u32 len` · UTF-8 message                      |
//! | 4    | Hello        | `u16 protocol_version`                         |
//! | 5    | HelloAck     | `u16 protocol_version` · `u32 max_batch`       |

use std::io::{self, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::models::{check_shape, LossValue, ModelError, Predictor};
use crate::tensor::{InputTensor, TensorError};

pub mod server;

pub const FRAME_MAGIC: &[u8; 4] = b"MPX1";
pub const PROTOCOL_VERSION: u16 = 1;
pub const DEFAULT_PORT: u16 = 7341;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const TIMEOUT_ENV: &str = "MUPAX_BRIDGE_TIMEOUT_MS";
const MAX_FRAME_LEN: u32 = 1 << 30;

pub const EVAL_REQUEST: u8 = 1;
pub const EVAL_RESPONSE: u8 = 2;
pub const ERROR: u8 = 3;
pub const HELLO: u8 = 4;
pub const HELLO_ACK: u8 = 5;

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("connection lost: {0}")]
    ConnectionLost(String),
    #[error("server error: {0}")]
    ServerError(String),
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch mixes tensor shapes")]
    MixedShapes,
    #[error("batch of {0} exceeds the 65535-item frame limit")]
    BatchTooLarge(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    EvalRequest { id: u64, batch: Vec<InputTensor> },
    /// `(item index within the request, loss)`, in any order.
    EvalResponse { id: u64, losses: Vec<(u16, f64)> },
    Error { id: u64, message: String },
    Hello { id: u64, version: u16 },
    HelloAck { id: u64, version: u16, max_batch: u32 },
}

impl Frame {
    pub fn id(&self) -> u64 {
        match self {
            Frame::EvalRequest { id, .. }
            | Frame::EvalResponse { id, .. }
            | Frame::Error { id, .. }
            | Frame::Hello { id, .. }
            | Frame::HelloAck { id, .. } => *id,
        }
    }

    fn type_byte(&self) -> u8 {
        match self {
            Frame::EvalRequest { .. } => EVAL_REQUEST,
            Frame::EvalResponse { .. } => EVAL_RESPONSE,
            Frame::Error { .. } => ERROR,
            Frame::Hello { .. } => HELLO,
            Frame::HelloAck { .. } => HELLO_ACK,
        }
    }
}

/// Encodes an eval request; the batch must be nonempty and single-shaped.
pub fn encode_eval_request(id: u64, batch: &[InputTensor]) -> Result<Vec<u8>, BridgeError> {
    encode(&Frame::EvalRequest {
        id,
        batch: batch.to_vec(),
    })
}

pub fn encode(frame: &Frame) -> Result<Vec<u8>, BridgeError> {
    let mut body = Vec::new();
    body.extend_from_slice(FRAME_MAGIC);
    body.push(frame.type_byte());
    body.write_u64::<LittleEndian>(frame.id())?;
    match frame {
        Frame::EvalRequest { batch, .. } => {
            let first = batch.first().ok_or(BridgeError::EmptyBatch)?;
            if batch.iter().any(|t| t.shape() != first.shape()) {
                return Err(BridgeError::MixedShapes);
            }
            let count = u16::try_from(batch.len()).map_err(|_| BridgeError::BatchTooLarge(batch.len()))?;
            body.write_u16::<LittleEndian>(count)?;
            for t in batch {
                t.write_body(&mut body)?;
            }
        }
        Frame::EvalResponse { losses, .. } => {
            let count = u16::try_from(losses.len()).map_err(|_| BridgeError::BatchTooLarge(losses.len()))?;
            body.write_u16::<LittleEndian>(count)?;
            for &(item, mu) in losses {
                body.write_u16::<LittleEndian>(item)?;
                body.write_f64::<LittleEndian>(mu)?;
            }
        }
        Frame::Error { message, .. } => {
            body.write_u32::<LittleEndian>(message.len() as u32)?;
            body.extend_from_slice(message.as_bytes());
        }
        Frame::Hello { version, .. } => body.write_u16::<LittleEndian>(*version)?,
        Frame::HelloAck {
            version, max_batch, ..
        } => {
            body.write_u16::<LittleEndian>(*version)?;
            body.write_u32::<LittleEndian>(*max_batch)?;
        }
    }
    let mut out = Vec::with_capacity(4 + body.len());
    out.write_u32::<LittleEndian>(body.len() as u32)?;
    out.extend_from_slice(&body);
    Ok(out)
}

fn protocol(msg: impl Into<String>) -> BridgeError {
    BridgeError::Protocol(msg.into())
}

/// Decodes the part of a frame after the length prefix.
pub fn decode_body(body: &[u8]) -> Result<Frame, BridgeError> {
    if body.len() < 13 {
        return Err(protocol(format!("frame body of {} bytes is too short", body.len())));
    }
    if &body[..4] != FRAME_MAGIC {
        return Err(protocol(format!("bad frame magic {:?}", &body[..4])));
    }
    let kind = body[4];
    let mut r = &body[5..];
    let id = r.read_u64::<LittleEndian>()?;
    let truncated = |_| protocol("truncated payload");
    let frame = match kind {
        EVAL_REQUEST => {
            let count = r.read_u16::<LittleEndian>().map_err(truncated)? as usize;
            let mut batch = Vec::with_capacity(count);
            for _ in 0..count {
                batch.push(
                    InputTensor::read_body(&mut r, false)
                        .map_err(|e| protocol(format!("tensor body: {e}")))?,
                );
            }
            if batch.is_empty() {
                return Err(BridgeError::EmptyBatch);
            }
            if batch.iter().any(|t| t.shape() != batch[0].shape()) {
                return Err(BridgeError::MixedShapes);
            }
            Frame::EvalRequest { id, batch }
        }
        EVAL_RESPONSE => {
            let count = r.read_u16::<LittleEndian>().map_err(truncated)? as usize;
            let mut losses = Vec::with_capacity(count);
            for _ in 0..count {
                let item = r.read_u16::<LittleEndian>().map_err(truncated)?;
                let mu = r.read_f64::<LittleEndian>().map_err(truncated)?;
                losses.push((item, mu));
            }
            Frame::EvalResponse { id, losses }
        }
        ERROR => {
            let len = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
            if r.len() < len {
                return Err(protocol("truncated error message"));
            }
            let message = String::from_utf8_lossy(&r[..len]).into_owned();
            r = &r[len..];
            Frame::Error { id, message }
        }
        HELLO => Frame::Hello {
            id,
            version: r.read_u16::<LittleEndian>().map_err(truncated)?,
        },
        HELLO_ACK => Frame::HelloAck {
            id,
            version: r.read_u16::<LittleEndian>().map_err(truncated)?,
            max_batch: r.read_u32::<LittleEndian>().map_err(truncated)?,
        },
        other => return Err(protocol(format!("unknown frame type {other}"))),
    };
    if !r.is_empty() {
        return Err(protocol(format!("{} trailing bytes in frame", r.len())));
    }
    Ok(frame)
}

/// Decodes one complete frame including its length prefix.
pub fn decode(bytes: &[u8]) -> Result<Frame, BridgeError> {
    if bytes.len() < 4 {
        return Err(protocol("missing length prefix"));
    }
    let len = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if bytes.len() - 4 != len {
        return Err(protocol(format!(
            "length prefix says {len} bytes, frame has {}",
            bytes.len() - 4
        )));
    }
    decode_body(&bytes[4..])
}

fn map_io(e: io::Error, timeout: Duration) -> BridgeError {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => BridgeError::Timeout(timeout),
        io::ErrorKind::UnexpectedEof
        | io::ErrorKind::ConnectionReset
        | io::ErrorKind::ConnectionAborted
        | io::ErrorKind::BrokenPipe => BridgeError::ConnectionLost(e.to_string()),
        _ => BridgeError::Io(e),
    }
}

pub fn read_frame<R: Read>(r: &mut R, timeout: Duration) -> Result<Frame, BridgeError> {
    let len = r.read_u32::<LittleEndian>().map_err(|e| map_io(e, timeout))?;
    if len > MAX_FRAME_LEN {
        return Err(protocol(format!("frame length {len} exceeds limit")));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body).map_err(|e| map_io(e, timeout))?;
    decode_body(&body)
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame, timeout: Duration) -> Result<(), BridgeError> {
    let bytes = encode(frame)?;
    w.write_all(&bytes).map_err(|e| map_io(e, timeout))?;
    w.flush().map_err(|e| map_io(e, timeout))
}

/// Timeout from `MUPAX_BRIDGE_TIMEOUT_MS`, else 30 s.
pub fn timeout_from_env() -> Duration {
    std::env::var(TIMEOUT_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<u64>().ok())
        .map(Duration::from_millis)
        .unwrap_or(DEFAULT_TIMEOUT)
}

struct Connection {
    stream: TcpStream,
    max_batch: usize,
}

/// Pooled client. Each connection carries one request at a time; concurrent
/// callers each check out their own connection.
pub struct BridgeClient {
    endpoint: String,
    timeout: Duration,
    idle: Mutex<Vec<Connection>>,
    next_id: AtomicU64,
    requests: AtomicU64,
}

impl BridgeClient {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout,
            idle: Mutex::new(Vec::new()),
            next_id: AtomicU64::new(1),
            requests: AtomicU64::new(0),
        }
    }

    /// Connects once to validate the endpoint and learn the batch limit.
    pub fn connect(endpoint: impl Into<String>, timeout: Duration) -> Result<Self, BridgeError> {
        let client = Self::new(endpoint, timeout);
        let conn = client.open()?;
        client.idle.lock().expect("pool lock").push(conn);
        Ok(client)
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    /// Eval requests sent so far.
    pub fn requests_sent(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    fn open(&self) -> Result<Connection, BridgeError> {
        let addr = self
            .endpoint
            .to_socket_addrs()
            .map_err(|e| BridgeError::ConnectionLost(format!("{}: {e}", self.endpoint)))?
            .next()
            .ok_or_else(|| BridgeError::ConnectionLost(format!("{}: no address", self.endpoint)))?;
        let mut stream = TcpStream::connect_timeout(&addr, self.timeout)
            .map_err(|e| BridgeError::ConnectionLost(format!("{}: {e}", self.endpoint)))?;
        stream.set_read_timeout(Some(self.timeout))?;
        stream.set_write_timeout(Some(self.timeout))?;
        stream.set_nodelay(true)?;
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        write_frame(
            &mut stream,
            &Frame::Hello {
                id,
                version: PROTOCOL_VERSION,
            },
            self.timeout,
        )?;
        match read_frame(&mut stream, self.timeout)? {
            Frame::HelloAck {
                id: rid, max_batch, ..
            } if rid == id => {
                if max_batch == 0 {
                    return Err(protocol("server advertised max batch 0"));
                }
                Ok(Connection {
                    stream,
                    max_batch: max_batch as usize,
                })
            }
            Frame::Error { message, .. } => Err(BridgeError::ServerError(message)),
            other => Err(protocol(format!("expected HelloAck for {id}, got {other:?}"))),
        }
    }

    fn checkout(&self) -> Result<Connection, BridgeError> {
        if let Some(c) = self.idle.lock().expect("pool lock").pop() {
            return Ok(c);
        }
        self.open()
    }

    fn roundtrip(&self, conn: &mut Connection, batch: &[InputTensor]) -> Result<Vec<f64>, BridgeError> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        write_frame(
            &mut conn.stream,
            &Frame::EvalRequest {
                id,
                batch: batch.to_vec(),
            },
            self.timeout,
        )?;
        self.requests.fetch_add(1, Ordering::Relaxed);
        match read_frame(&mut conn.stream, self.timeout)? {
            Frame::EvalResponse { id: rid, losses } if rid == id => {
                let mut out = vec![None; batch.len()];
                for (item, mu) in losses {
                    let slot = out
                        .get_mut(item as usize)
                        .ok_or_else(|| protocol(format!("item index {item} out of range")))?;
                    if slot.replace(mu).is_some() {
                        return Err(protocol(format!("duplicate item index {item}")));
                    }
                }
                out.into_iter()
                    .enumerate()
                    .map(|(i, v)| v.ok_or_else(|| protocol(format!("missing loss for item {i}"))))
                    .collect()
            }
            Frame::EvalResponse { id: rid, .. } => {
                Err(protocol(format!("response id {rid} does not match request {id}")))
            }
            Frame::Error { message, .. } => Err(BridgeError::ServerError(message)),
            other => Err(protocol(format!("unexpected frame {other:?}"))),
        }
    }

    /// Losses for `batch` in request order. Batches larger than the server
    /// limit are split; a failed request is an error, never retried.
    pub fn eval(&self, batch: &[InputTensor]) -> Result<Vec<f64>, BridgeError> {
        if batch.is_empty() {
            return Err(BridgeError::EmptyBatch);
        }
        let mut conn = self.checkout()?;
        let mut out = Vec::with_capacity(batch.len());
        for part in batch.chunks(conn.max_batch.min(u16::MAX as usize)) {
            // a failed connection is dropped instead of returned to the pool
            out.extend(self.roundtrip(&mut conn, part)?);
        }
        self.idle.lock().expect("pool lock").push(conn);
        Ok(out)
    }

    /// Server batch limit, handshaking if no connection is open yet.
    pub fn max_batch(&self) -> Result<usize, BridgeError> {
        let conn = self.checkout()?;
        let b = conn.max_batch;
        self.idle.lock().expect("pool lock").push(conn);
        Ok(b)
    }
}

/// `μ` evaluated by a remote model over the bridge.
pub struct BridgePredictor {
    client: BridgeClient,
    shape: Vec<usize>,
}

impl BridgePredictor {
    pub fn new(client: BridgeClient, shape: Vec<usize>) -> Self {
        Self { client, shape }
    }

    pub fn client(&self) -> &BridgeClient {
        &self.client
    }
}

impl Predictor for BridgePredictor {
    fn input_shape(&self) -> &[usize] {
        &self.shape
    }

    fn description(&self) -> String {
        format!("bridge:{}", self.client.endpoint)
    }

    fn evaluate(&self, batch: &[InputTensor]) -> Result<Vec<LossValue>, ModelError> {
        for x in batch {
            check_shape(&self.shape, x)?;
        }
        self.client
            .eval(batch)?
            .into_iter()
            .map(LossValue::new)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ConformanceReport {
    pub endpoint: String,
    pub max_batch: u32,
    pub checks: Vec<(String, bool)>,
    pub conformant: bool,
}

/// Golden Hello and EvalRequest byte sequences, built field by field.
pub fn golden_hello(id: u64) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(&15u32.to_le_bytes());
    b.extend_from_slice(FRAME_MAGIC);
    b.push(HELLO);
    b.extend_from_slice(&id.to_le_bytes());
    b.extend_from_slice(&PROTOCOL_VERSION.to_le_bytes());
    b
}

/// EvalRequest with id 0 carrying one rank-1, single-element zero tensor.
pub fn golden_eval_request_zero() -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(&25u32.to_le_bytes());
    b.extend_from_slice(FRAME_MAGIC);
    b.push(EVAL_REQUEST);
    b.extend_from_slice(&0u64.to_le_bytes());
    b.extend_from_slice(&1u16.to_le_bytes());
    b.push(1); // MPXT version
    b.push(1); // rank
    b.extend_from_slice(&1u32.to_le_bytes());
    b.extend_from_slice(&0f32.to_le_bytes());
    b
}

/// Sends the golden frames to a live endpoint and checks the replies.
/// With `expect_echo`, the zero tensor must come back with loss 0.
pub fn conformance_check(
    endpoint: &str,
    timeout: Duration,
    expect_echo: bool,
) -> Result<ConformanceReport, BridgeError> {
    let addr = endpoint
        .to_socket_addrs()
        .map_err(|e| BridgeError::ConnectionLost(format!("{endpoint}: {e}")))?
        .next()
        .ok_or_else(|| BridgeError::ConnectionLost(format!("{endpoint}: no address")))?;
    let mut stream = TcpStream::connect_timeout(&addr, timeout)
        .map_err(|e| BridgeError::ConnectionLost(format!("{endpoint}: {e}")))?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_write_timeout(Some(timeout))?;
    let mut checks = Vec::new();

    stream.write_all(&golden_hello(0)).map_err(|e| map_io(e, timeout))?;
    let ack = read_frame(&mut stream, timeout)?;
    let max_batch = match ack {
        Frame::HelloAck {
            id: 0,
            version,
            max_batch,
        } => {
            checks.push(("hello_ack".to_string(), true));
            checks.push(("protocol_version".to_string(), version == PROTOCOL_VERSION));
            checks.push(("max_batch_positive".to_string(), max_batch >= 1));
            max_batch
        }
        _ => {
            checks.push(("hello_ack".to_string(), false));
            0
        }
    };

    stream
        .write_all(&golden_eval_request_zero())
        .map_err(|e| map_io(e, timeout))?;
    match read_frame(&mut stream, timeout)? {
        Frame::EvalResponse { id, losses } => {
            checks.push(("eval_response_id".to_string(), id == 0));
            checks.push(("eval_response_count".to_string(), losses.len() == 1));
            let finite = losses.iter().all(|&(i, mu)| i == 0 && mu.is_finite() && mu >= 0.0);
            checks.push(("eval_response_loss_valid".to_string(), finite));
            if expect_echo {
                checks.push((
                    "echo_sum_zero".to_string(),
                    losses.first().map(|&(_, mu)| mu) == Some(0.0),
                ));
            }
        }
        _ => checks.push(("eval_response".to_string(), false)),
    }

    let conformant = checks.iter().all(|(_, ok)| *ok);
    Ok(ConformanceReport {
        endpoint: endpoint.to_string(),
        max_batch,
        checks,
        conformant,
    })
}
