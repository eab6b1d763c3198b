use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::wire::{decode, encode_correction, encode_error, read_frame, write_frame, WireMessage};
use crate::gcn::{CorrectionBundle, GcnModel};
use crate::{Error, Result};

/// Stateless request handler around a correction network.
#[derive(Debug)]
pub struct CloudService {
    gcn: GcnModel,
}

impl CloudService {
    pub fn new(gcn: GcnModel) -> Self {
        Self { gcn }
    }

    pub fn model(&self) -> &GcnModel {
        &self.gcn
    }

    fn correct(&self, request: &[u8]) -> Result<Vec<u8>> {
        let WireMessage::Upload { heads, hidden } = decode(request)? else {
            return Err(Error::protocol("request is not an upload"));
        };
        let cfg = &self.gcn.config;
        if heads != cfg.heads || hidden.shape() != [cfg.seq_len, cfg.model_dim] {
            return Err(Error::protocol(format!(
                "upload is {:?} with {heads} heads, model expects [{}, {}] with {} heads",
                hidden.shape(),
                cfg.seq_len,
                cfg.model_dim,
                cfg.heads
            )));
        }
        let flat = self.gcn.correct_flat(&hidden)?;
        encode_correction(&CorrectionBundle::from_flat(cfg, &flat, 0.0, 0.0)?)
    }

    /// Answers one encoded request; failures become error messages.
    pub fn handle(&self, request: &[u8]) -> Vec<u8> {
        self.correct(request).unwrap_or_else(|e| {
            log::debug!("rejecting request: {e}");
            encode_error(&e.to_string())
        })
    }
}

fn serve_connection(stream: TcpStream, service: &CloudService) -> Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    while let Some(request) = read_frame(&mut reader)? {
        write_frame(&mut writer, &service.handle(&request))?;
    }
    Ok(())
}

/// Accepts connections until `stop` is set, one thread per connection.
pub fn serve_cloud(listener: TcpListener, service: Arc<CloudService>, stop: Arc<AtomicBool>) -> Result<()> {
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
        let service = Arc::clone(&service);
        thread::spawn(move || {
            if let Err(e) = serve_connection(stream, &service) {
                log::debug!("connection closed: {e}");
            }
        });
    }
    Ok(())
}

/// A cloud service running on a background thread.
pub struct CloudHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<Result<()>>>,
}

impl CloudHandle {
    pub fn spawn(addr: impl ToSocketAddrs, service: Arc<CloudService>) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let thread = thread::spawn(move || serve_cloud(listener, service, flag));
        Ok(Self {
            addr,
            stop,
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) -> Result<()> {
        self.stop_and_join()
    }

    fn stop_and_join(&mut self) -> Result<()> {
        let Some(thread) = self.thread.take() else {
            return Ok(());
        };
        self.stop.store(true, Ordering::SeqCst);
        // Wakes the blocking accept.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
        thread.join().map_err(|_| Error::protocol("cloud service thread panicked"))?
    }
}

impl Drop for CloudHandle {
    fn drop(&mut self) {
        let _ = self.stop_and_join();
    }
}

/// Blocking client holding one connection to the cloud service.
pub struct CloudClient {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl CloudClient {
    pub fn connect(addr: SocketAddr, timeout: Duration) -> Result<Self> {
        let stream = TcpStream::connect_timeout(&addr, timeout)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        })
    }

    pub fn send(&mut self, message: &[u8]) -> Result<()> {
        Ok(write_frame(&mut self.writer, message)?)
    }

    pub fn receive(&mut self) -> Result<Vec<u8>> {
        read_frame(&mut self.reader)?.ok_or_else(|| Error::protocol("connection closed before a response"))
    }

    pub fn request(&mut self, message: &[u8]) -> Result<Vec<u8>> {
        self.send(message)?;
        self.receive()
    }

    pub fn close(self) {
        let _ = self.writer.get_ref().shutdown(Shutdown::Both);
    }
}
