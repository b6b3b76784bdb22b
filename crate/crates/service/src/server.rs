//! Inference server.
//!
//! One thread per connection. Inference jobs go through a bounded queue to
//! a fixed set of workers (one by default, so model access is serialized).

use crate::error::{Result, ServiceError};
use crate::protocol::{
    read_message, status, write_message, ErrorReply, Message, OptimizeRequest, OptimizeResponse,
    ReadError,
};
use crate::storage::store_result;
use bsonet_core::Image;
use bsonet_model::{full_pipeline_infer, BSoNet};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, SyncSender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

pub const DEFAULT_BIND: &str = "127.0.0.1:7878";
pub const PORT_ENV: &str = "BSONET_PORT";

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub bind: String,
    pub storage_root: PathBuf,
    /// Concurrent inference workers.
    pub workers: usize,
    /// Pending inference jobs before connection threads block.
    pub queue_depth: usize,
    /// Largest accepted payload in bytes.
    pub max_payload: u32,
    /// Idle read timeout per connection; `None` waits forever.
    pub read_timeout: Option<Duration>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            bind: DEFAULT_BIND.into(),
            storage_root: PathBuf::from("results"),
            workers: 1,
            queue_depth: 16,
            max_payload: 256 << 20,
            read_timeout: Some(Duration::from_secs(300)),
        }
    }
}

impl ServerConfig {
    /// The bind address with the port replaced by `BSONET_PORT` when set.
    pub fn effective_bind(&self) -> Result<String> {
        match std::env::var(PORT_ENV) {
            Ok(p) => override_port(&self.bind, &p),
            Err(_) => Ok(self.bind.clone()),
        }
    }
}

/// Replaces the port of `bind` with `port`.
pub fn override_port(bind: &str, port: &str) -> Result<String> {
    let port: u16 = port
        .trim()
        .parse()
        .map_err(|_| ServiceError::Config(format!("invalid port {port:?}")))?;
    let host = match bind.rsplit_once(':') {
        Some((h, _)) => h,
        None => bind,
    };
    Ok(format!("{host}:{port}"))
}

struct Job {
    image: Image,
    reply: mpsc::Sender<std::result::Result<(Image, u64), String>>,
}

/// Handle to a running server. Dropping it stops accepting connections.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting new connections. Open connections finish on their own.
    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    /// Blocks until the accept loop exits.
    pub fn join(mut self) {
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.acceptor.is_some() {
            self.stop_accepting();
        }
    }
}

/// Binds and starts serving in background threads.
pub fn serve(model: BSoNet, config: ServerConfig) -> Result<ServerHandle> {
    if config.workers == 0 || config.queue_depth == 0 {
        return Err(ServiceError::Config("workers and queue_depth must be positive".into()));
    }
    std::fs::create_dir_all(&config.storage_root)?;
    let bind = config.effective_bind()?;
    let addr = bind
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| ServiceError::Config(format!("cannot resolve {bind}")))?;
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    log::info!("listening on {addr}");

    let (jobs, queue) = mpsc::sync_channel::<Job>(config.queue_depth);
    let queue = Arc::new(Mutex::new(queue));
    let model = Arc::new(model);
    for i in 0..config.workers {
        let queue = Arc::clone(&queue);
        let model = Arc::clone(&model);
        thread::Builder::new()
            .name(format!("infer-{i}"))
            .spawn(move || worker(&model, &queue))?;
    }

    let stop = Arc::new(AtomicBool::new(false));
    let config = Arc::new(config);
    let acceptor = {
        let stop = Arc::clone(&stop);
        thread::Builder::new()
            .name("accept".into())
            .spawn(move || accept_loop(listener, jobs, config, stop))?
    };
    Ok(ServerHandle { addr, stop, acceptor: Some(acceptor) })
}

fn worker(model: &BSoNet, queue: &Mutex<Receiver<Job>>) {
    loop {
        let job = match queue.lock() {
            Ok(rx) => rx.recv(),
            Err(_) => return,
        };
        let Ok(job) = job else { return };
        let start = Instant::now();
        let out = full_pipeline_infer(&job.image, model)
            .map(|img| (img, start.elapsed().as_micros() as u64))
            .map_err(|e| e.to_string());
        let _ = job.reply.send(out);
    }
}

fn accept_loop(
    listener: TcpListener,
    jobs: SyncSender<Job>,
    config: Arc<ServerConfig>,
    stop: Arc<AtomicBool>,
) {
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let jobs = jobs.clone();
        let config = Arc::clone(&config);
        let spawned = thread::Builder::new()
            .name("conn".into())
            .spawn(move || {
                let peer = stream.peer_addr().ok();
                if let Err(e) = handle_connection(stream, &jobs, &config) {
                    log::debug!("connection {peer:?} closed: {e}");
                }
            });
        if let Err(e) = spawned {
            log::warn!("cannot spawn connection thread: {e}");
        }
    }
}

fn error_reply(request_id: u64, status: u8, message: impl Into<String>) -> Message {
    Message::Error(ErrorReply { request_id, status, message: message.into() })
}

fn handle_connection(
    stream: TcpStream,
    jobs: &SyncSender<Job>,
    config: &ServerConfig,
) -> std::io::Result<()> {
    stream.set_read_timeout(config.read_timeout)?;
    stream.set_nodelay(true)?;
    let mut reader = std::io::BufReader::new(stream.try_clone()?);
    let mut writer = stream;
    loop {
        let reply = match read_message(&mut reader, config.max_payload) {
            Ok(Message::Ping) => Message::Pong,
            Ok(Message::Request(req)) => optimize(req, jobs, config),
            Ok(other) => error_reply(
                0,
                status::UNEXPECTED_MESSAGE,
                format!("server does not accept {:?} messages", other.msg_type()),
            ),
            Err(ReadError::Payload(e)) => error_reply(0, e.status(), e.to_string()),
            Err(ReadError::Header(e)) => {
                // Frame boundaries are lost; report and hang up.
                write_message(&mut writer, &error_reply(0, e.status(), e.to_string()))?;
                let _ = writer.shutdown(Shutdown::Both);
                return Ok(());
            }
            Err(ReadError::Io(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                return Ok(())
            }
            Err(ReadError::Io(e)) => return Err(e),
        };
        write_message(&mut writer, &reply)?;
    }
}

fn optimize(req: OptimizeRequest, jobs: &SyncSender<Job>, config: &ServerConfig) -> Message {
    let id = req.request_id;
    let image = match Image::from_u16(req.width as usize, req.height as usize, &req.pixels) {
        Ok(img) => img,
        Err(e) => return error_reply(id, status::MALFORMED_FRAME, e.to_string()),
    };
    let (tx, rx) = mpsc::channel();
    if jobs.send(Job { image, reply: tx }).is_err() {
        return error_reply(id, status::INFERENCE_FAILED, "inference workers are gone");
    }
    let (out, micros) = match rx.recv() {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => return error_reply(id, status::INFERENCE_FAILED, e),
        Err(_) => return error_reply(id, status::INFERENCE_FAILED, "inference worker died"),
    };
    let response = OptimizeResponse {
        request_id: id,
        status: status::OK,
        inference_micros: micros,
        width: out.width() as u32,
        height: out.height() as u32,
        pixels: out.to_u16(),
    };
    match store_result(&req, &response, &config.storage_root) {
        Ok(paths) => log::info!(
            "request {id}: {}x{} in {micros} us, stored {}",
            req.width,
            req.height,
            paths.raw.display()
        ),
        Err(e) => return error_reply(id, status::STORAGE_FAILED, e.to_string()),
    }
    Message::Response(response)
}
