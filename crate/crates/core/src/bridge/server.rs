//! Minimal in-process bridge server: loopback tests, the `bridge-serve`
//! subcommand and conformance fixtures. One thread per connection, one
//! request in flight per connection.

use std::io::{self, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::{encode, read_frame, write_frame, BridgeError, Frame, PROTOCOL_VERSION};
use crate::models::{sum_loss, Predictor};
use crate::tensor::InputTensor;

pub type Handler = Arc<dyn Fn(&[InputTensor]) -> Result<Vec<f64>, String> + Send + Sync>;

#[derive(Debug, Clone, Copy)]
pub struct ServerOptions {
    pub max_batch: u32,
    /// Answer items in reverse order (exercises client-side re-sequencing).
    pub reverse_responses: bool,
}

impl Default for ServerOptions {
    fn default() -> Self {
        Self {
            max_batch: 64,
            reverse_responses: false,
        }
    }
}

/// `μ = Σ X`, the adapter's echo mode.
pub fn echo_handler() -> Handler {
    Arc::new(|batch: &[InputTensor]| Ok(batch.iter().map(sum_loss).collect()))
}

pub fn predictor_handler<P: Predictor + 'static>(predictor: P) -> Handler {
    Arc::new(move |batch: &[InputTensor]| {
        predictor
            .evaluate(batch)
            .map(|ls| ls.into_iter().map(|l| l.get()).collect())
            .map_err(|e| e.to_string())
    })
}

pub struct BridgeServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    requests: Arc<AtomicU64>,
    accept: Option<JoinHandle<()>>,
}

impl BridgeServer {
    /// Binds `bind` (use port 0 for an ephemeral port) and serves in the
    /// background until [`BridgeServer::shutdown`] or drop.
    pub fn spawn(bind: &str, options: ServerOptions, handler: Handler) -> io::Result<Self> {
        let listener = TcpListener::bind(bind)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let requests = Arc::new(AtomicU64::new(0));
        let accept = {
            let stop = stop.clone();
            let requests = requests.clone();
            thread::spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let handler = handler.clone();
                    let requests = requests.clone();
                    thread::spawn(move || {
                        let _ = serve_connection(stream, options, &handler, &requests);
                    });
                }
            })
        };
        Ok(Self {
            addr,
            stop,
            requests,
            accept: Some(accept),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> String {
        self.addr.to_string()
    }

    /// Eval requests received across all connections.
    pub fn eval_requests(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn shutdown(&mut self) {
        if let Some(handle) = self.accept.take() {
            self.stop.store(true, Ordering::SeqCst);
            let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
            let _ = handle.join();
        }
    }

    /// Blocks until the accept loop ends.
    pub fn join(mut self) {
        if let Some(handle) = self.accept.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for BridgeServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn send_error(stream: &mut TcpStream, id: u64, message: &str) {
    if let Ok(bytes) = encode(&Frame::Error {
        id,
        message: message.to_string(),
    }) {
        let _ = stream.write_all(&bytes);
    }
}

pub fn serve_connection(
    mut stream: TcpStream,
    options: ServerOptions,
    handler: &Handler,
    requests: &AtomicU64,
) -> Result<(), BridgeError> {
    let timeout = Duration::from_secs(3600);
    stream.set_nodelay(true)?;
    loop {
        let frame = match read_frame(&mut stream, timeout) {
            Ok(f) => f,
            Err(BridgeError::ConnectionLost(_)) => return Ok(()),
            Err(e) => {
                send_error(&mut stream, 0, &e.to_string());
                return Err(e);
            }
        };
        match frame {
            Frame::Hello { id, .. } => write_frame(
                &mut stream,
                &Frame::HelloAck {
                    id,
                    version: PROTOCOL_VERSION,
                    max_batch: options.max_batch,
                },
                timeout,
            )?,
            Frame::EvalRequest { id, batch } => {
                requests.fetch_add(1, Ordering::SeqCst);
                if batch.len() > options.max_batch as usize {
                    send_error(&mut stream, id, "batch too large");
                    return Ok(());
                }
                match handler(&batch) {
                    Ok(losses) if losses.len() == batch.len() => {
                        let mut items: Vec<(u16, f64)> =
                            losses.into_iter().enumerate().map(|(i, mu)| (i as u16, mu)).collect();
                        if options.reverse_responses {
                            items.reverse();
                        }
                        write_frame(&mut stream, &Frame::EvalResponse { id, losses: items }, timeout)?;
                    }
                    Ok(losses) => send_error(
                        &mut stream,
                        id,
                        &format!("model returned {} losses for {} inputs", losses.len(), batch.len()),
                    ),
                    Err(message) => send_error(&mut stream, id, &message),
                }
            }
            other => {
                send_error(&mut stream, other.id(), "unexpected frame type");
                return Ok(());
            }
        }
    }
}
