//! TCP transport for the scoring service.

use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use crate::error::{Result, ServeError};
use crate::protocol::{decode_request, decode_response, encode_error, encode_request, encode_response, read_frame, write_frame, ScoreRequest, ScoreResponse};
use crate::service::Service;

fn handle_connection(stream: TcpStream, service: Arc<Service>) -> Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    while let Some(body) = read_frame(&mut reader)? {
        let req = match decode_request(&body) {
            Ok(r) => r,
            Err(e) => {
                // Malformed frames end the connection.
                write_frame(&mut writer, &encode_error(&e.to_string())?)?;
                return Err(e);
            }
        };
        let out = match service.score(req) {
            Ok(resp) => encode_response(&resp)?,
            Err(e) => encode_error(&e.to_string())?,
        };
        write_frame(&mut writer, &out)?;
    }
    Ok(())
}

pub struct Server {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl Server {
    /// Binds and starts accepting; each connection gets its own thread.
    pub fn start(addr: impl ToSocketAddrs, service: Arc<Service>) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let accept = std::thread::Builder::new().name("mixlm-accept".into()).spawn(move || {
            for conn in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                match conn {
                    Ok(stream) => {
                        let svc = service.clone();
                        std::thread::spawn(move || {
                            if let Err(e) = handle_connection(stream, svc) {
                                log::warn!("connection closed: {e}");
                            }
                        });
                    }
                    Err(e) => log::warn!("accept failed: {e}"),
                }
            }
        })?;
        Ok(Self {
            addr,
            stop,
            accept: Some(accept),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the accept loop ends.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if self.accept.is_some() {
            self.stop_accepting();
        }
    }
}

pub struct Client {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        })
    }

    /// Sends all items of one query as a single frame.
    pub fn score(&mut self, req: &ScoreRequest) -> Result<ScoreResponse> {
        write_frame(&mut self.writer, &encode_request(req)?)?;
        self.read_response()
    }

    /// Sends a raw body, for protocol tests.
    pub fn send_raw(&mut self, body: &[u8]) -> Result<ScoreResponse> {
        write_frame(&mut self.writer, body)?;
        self.read_response()
    }

    fn read_response(&mut self) -> Result<ScoreResponse> {
        let body = read_frame(&mut self.reader)?.ok_or_else(|| ServeError::Protocol("connection closed".into()))?;
        decode_response(&body)
    }
}
