use crate::error::{Result, ServiceError};
use crate::protocol::{
    read_message, write_message, Message, OptimizeRequest, ReadError,
};
use bsonet_core::Image;
use std::io::BufReader;
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// Result of one optimization round trip.
#[derive(Debug, Clone)]
pub struct Optimized {
    pub request_id: u64,
    pub image: Image,
    pub round_trip_micros: u64,
    pub inference_micros: u64,
}

/// A connection to an inference server. Requests on one client are
/// sequential.
pub struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    next_id: u64,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Self> {
        let addrs: Vec<SocketAddr> = addr.to_socket_addrs()?.collect();
        let mut last = None;
        for a in addrs {
            match TcpStream::connect_timeout(&a, timeout) {
                Ok(stream) => {
                    stream.set_read_timeout(Some(timeout))?;
                    stream.set_write_timeout(Some(timeout))?;
                    stream.set_nodelay(true)?;
                    return Ok(Self {
                        reader: BufReader::new(stream.try_clone()?),
                        writer: stream,
                        next_id: 1,
                    });
                }
                Err(e) => last = Some(e),
            }
        }
        Err(match last {
            Some(e) => ServiceError::from_io(e),
            None => ServiceError::Config("address resolved to nothing".into()),
        })
    }

    fn exchange(&mut self, msg: &Message) -> Result<Message> {
        write_message(&mut self.writer, msg).map_err(ServiceError::from_io)?;
        match read_message(&mut self.reader, u32::MAX) {
            Ok(Message::Error(e)) => Err(ServiceError::Server { status: e.status, message: e.message }),
            Ok(m) => Ok(m),
            Err(ReadError::Io(e)) => Err(ServiceError::from_io(e)),
            Err(ReadError::Header(e) | ReadError::Payload(e)) => Err(e.into()),
        }
    }

    pub fn ping(&mut self) -> Result<()> {
        match self.exchange(&Message::Ping)? {
            Message::Pong => Ok(()),
            _ => Err(ServiceError::Unexpected("non-pong")),
        }
    }

    /// Sends `img` with the next sequential request id.
    pub fn optimize(&mut self, img: &Image) -> Result<Optimized> {
        let id = self.next_id;
        self.next_id += 1;
        self.optimize_with_id(img, id)
    }

    pub fn optimize_with_id(&mut self, img: &Image, request_id: u64) -> Result<Optimized> {
        let req = Message::Request(OptimizeRequest {
            request_id,
            width: img.width() as u32,
            height: img.height() as u32,
            pixels: img.to_u16(),
        });
        let start = Instant::now();
        let reply = self.exchange(&req)?;
        let round_trip_micros = start.elapsed().as_micros() as u64;
        let Message::Response(resp) = reply else {
            return Err(ServiceError::Unexpected("non-response"));
        };
        if resp.request_id != request_id {
            return Err(ServiceError::Correlation { expected: request_id, got: resp.request_id });
        }
        if resp.status != crate::protocol::status::OK {
            return Err(ServiceError::Server {
                status: resp.status,
                message: "response carries a failure status".into(),
            });
        }
        let image = Image::from_u16(resp.width as usize, resp.height as usize, &resp.pixels)?;
        Ok(Optimized { request_id, image, round_trip_micros, inference_micros: resp.inference_micros })
    }
}

/// Connects, sends one image and waits for its result.
pub fn client_optimize(img: &Image, addr: impl ToSocketAddrs, timeout: Duration) -> Result<Optimized> {
    Client::connect(addr, timeout)?.optimize(img)
}
