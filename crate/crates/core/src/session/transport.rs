//! Ordered, reliable message delivery between the two parties.

use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::thread;
use std::time::{Duration, Instant};

use super::wire::{read_frame, write_frame, Message};
use super::SessionError;

pub trait Transport {
    fn send(&mut self, msg: &Message) -> Result<(), SessionError>;
    fn recv(&mut self) -> Result<Message, SessionError>;
}

/// In-process queue pair. Frames are encoded and decoded exactly as on a
/// socket.
pub struct ChannelTransport {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

impl ChannelTransport {
    pub fn pair() -> (ChannelTransport, ChannelTransport) {
        let (a_tx, b_rx) = channel();
        let (b_tx, a_rx) = channel();
        (ChannelTransport { tx: a_tx, rx: a_rx }, ChannelTransport { tx: b_tx, rx: b_rx })
    }
}

impl Transport for ChannelTransport {
    fn send(&mut self, msg: &Message) -> Result<(), SessionError> {
        self.tx
            .send(msg.encode())
            .map_err(|_| SessionError::Disconnected)
    }

    fn recv(&mut self) -> Result<Message, SessionError> {
        let frame = self.rx.recv().map_err(|_| SessionError::Disconnected)?;
        Message::decode(&frame)
    }
}

/// Byte-stream transport over TCP.
pub struct TcpTransport {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl TcpTransport {
    pub fn from_stream(stream: TcpStream) -> Result<Self, SessionError> {
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        Ok(Self {
            reader,
            writer: BufWriter::new(stream),
        })
    }

    /// Accepts a single peer on `listener`.
    pub fn accept(listener: &TcpListener) -> Result<Self, SessionError> {
        let (stream, _) = listener.accept()?;
        Self::from_stream(stream)
    }

    pub fn listen(addr: impl ToSocketAddrs) -> Result<Self, SessionError> {
        Self::accept(&TcpListener::bind(addr)?)
    }

    /// Connects, retrying until `timeout` so the peer may start second.
    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Self, SessionError> {
        let addrs: Vec<SocketAddr> = addr.to_socket_addrs()?.collect();
        let deadline = Instant::now() + timeout;
        loop {
            match TcpStream::connect(&addrs[..]) {
                Ok(s) => return Self::from_stream(s),
                Err(e) if Instant::now() >= deadline => return Err(e.into()),
                Err(_) => thread::sleep(Duration::from_millis(50)),
            }
        }
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, msg: &Message) -> Result<(), SessionError> {
        write_frame(&mut self.writer, &msg.encode())?;
        Ok(())
    }

    fn recv(&mut self) -> Result<Message, SessionError> {
        let frame = read_frame(&mut self.reader)?;
        Message::decode(&frame)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_pair_delivers_in_order() {
        let (mut a, mut b) = ChannelTransport::pair();
        for ok in [true, false, true] {
            a.send(&Message::VerifyVerdict { ok }).unwrap();
        }
        for ok in [true, false, true] {
            assert_eq!(b.recv().unwrap(), Message::VerifyVerdict { ok });
        }
        drop(a);
        assert!(matches!(b.recv(), Err(SessionError::Disconnected)));
    }

    #[test]
    fn tcp_round_trip() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let h = thread::spawn(move || {
            let mut t = TcpTransport::accept(&listener).unwrap();
            let m = t.recv().unwrap();
            t.send(&m).unwrap();
        });
        let mut c = TcpTransport::connect(addr, Duration::from_secs(5)).unwrap();
        let msg = Message::FinalKeyDigest { digest: [7; 32] };
        c.send(&msg).unwrap();
        assert_eq!(c.recv().unwrap(), msg);
        h.join().unwrap();
    }
}
