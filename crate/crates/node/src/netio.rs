//! Connections between nodes: TCP for live runs, in-memory pipes for
//! virtual-time runs. Either way, the write half goes through the link
//! emulator and the read half through the frame decoder.

use std::collections::HashMap;
use std::io;
use std::sync::{Arc, Mutex};

use edgegrid_transport::link::{Direction, LinkProfile};
use edgegrid_transport::messages::Message;
use edgegrid_transport::net::{FramedReader, LinkClock, LinkSender, NetError};
use edgegrid_transport::wire::RunId;
use tokio::io::{AsyncRead, AsyncWrite, DuplexStream};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;

pub type BoxRead = Box<dyn AsyncRead + Send + Unpin>;
pub type BoxWrite = Box<dyn AsyncWrite + Send + Unpin>;

const PIPE_CAPACITY: usize = 1 << 20;

/// Registry of in-memory listeners keyed by address.
#[derive(Clone, Default)]
pub struct MemNet {
    listeners: Arc<Mutex<HashMap<String, mpsc::UnboundedSender<DuplexStream>>>>,
}

#[derive(Clone)]
pub enum Net {
    Tcp,
    Mem(MemNet),
}

pub enum Listener {
    Tcp(TcpListener),
    Mem {
        addr: String,
        rx: mpsc::UnboundedReceiver<DuplexStream>,
    },
}

fn split<S: AsyncRead + AsyncWrite + Send + 'static>(s: S) -> (BoxRead, BoxWrite) {
    let (r, w) = tokio::io::split(s);
    (Box::new(r), Box::new(w))
}

impl Net {
    pub async fn listen(&self, addr: &str) -> io::Result<Listener> {
        match self {
            Net::Tcp => Ok(Listener::Tcp(TcpListener::bind(addr).await?)),
            Net::Mem(mem) => {
                let (tx, rx) = mpsc::unbounded_channel();
                let mut map = mem.listeners.lock().expect("memnet lock");
                if map.contains_key(addr) {
                    return Err(io::Error::new(io::ErrorKind::AddrInUse, addr.to_string()));
                }
                map.insert(addr.to_string(), tx);
                Ok(Listener::Mem {
                    addr: addr.to_string(),
                    rx,
                })
            }
        }
    }

    pub async fn connect(&self, addr: &str) -> io::Result<(BoxRead, BoxWrite)> {
        match self {
            Net::Tcp => {
                let s = TcpStream::connect(addr).await?;
                s.set_nodelay(true)?;
                Ok(split(s))
            }
            Net::Mem(mem) => {
                let tx = mem
                    .listeners
                    .lock()
                    .expect("memnet lock")
                    .get(addr)
                    .cloned()
                    .ok_or_else(|| io::Error::new(io::ErrorKind::ConnectionRefused, addr.to_string()))?;
                let (a, b) = tokio::io::duplex(PIPE_CAPACITY);
                tx.send(b)
                    .map_err(|_| io::Error::new(io::ErrorKind::ConnectionRefused, addr.to_string()))?;
                Ok(split(a))
            }
        }
    }
}

impl Listener {
    pub fn local_addr(&self) -> String {
        match self {
            Listener::Tcp(l) => l.local_addr().map(|a| a.to_string()).unwrap_or_default(),
            Listener::Mem { addr, .. } => addr.clone(),
        }
    }

    pub async fn accept(&mut self) -> io::Result<(BoxRead, BoxWrite)> {
        match self {
            Listener::Tcp(l) => {
                let (s, _) = l.accept().await?;
                s.set_nodelay(true)?;
                Ok(split(s))
            }
            Listener::Mem { rx, .. } => rx
                .recv()
                .await
                .map(split)
                .ok_or_else(|| io::Error::new(io::ErrorKind::BrokenPipe, "listener closed")),
        }
    }
}

/// Typed send half.
#[derive(Clone)]
pub struct MsgSender {
    inner: LinkSender,
}

impl MsgSender {
    pub fn new(w: BoxWrite, profile: LinkProfile, dir: Direction, clock: LinkClock) -> Result<Self, NetError> {
        Ok(Self {
            inner: LinkSender::spawn(w, profile, dir, clock)?,
        })
    }

    /// Returns the scheduled delivery time, or `None` if the link dropped it.
    pub fn send(&self, run_id: RunId, msg: &Message) -> Result<Option<f64>, NetError> {
        self.inner.send(&msg.to_envelope(run_id))
    }
}

/// Typed receive half.
pub struct MsgReader {
    inner: FramedReader<BoxRead>,
}

#[derive(Debug)]
pub enum Incoming {
    Msg(RunId, Message),
    /// A frame that decoded but whose payload did not match its type.
    Malformed(RunId, String),
}

impl MsgReader {
    pub fn new(r: BoxRead) -> Self {
        Self {
            inner: FramedReader::new(r),
        }
    }

    /// `Ok(None)` on a clean close; framing errors end the connection.
    pub async fn recv(&mut self) -> Result<Option<Incoming>, NetError> {
        let Some(env) = self.inner.recv().await? else {
            return Ok(None);
        };
        Ok(Some(match Message::from_envelope(&env) {
            Ok(m) => Incoming::Msg(env.run_id, m),
            Err(e) => Incoming::Malformed(env.run_id, e.to_string()),
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use edgegrid_transport::messages::Ack;

    #[tokio::test(start_paused = true)]
    async fn memnet_roundtrip() {
        let net = Net::Mem(MemNet::default());
        let mut l = net.listen("mem:cloud").await.unwrap();
        assert!(net.listen("mem:cloud").await.is_err());
        assert!(net.connect("mem:nowhere").await.is_err());
        let (_r, w) = net.connect("mem:cloud").await.unwrap();
        let (r2, _w2) = l.accept().await.unwrap();
        let clock = LinkClock::start();
        let tx = MsgSender::new(w, LinkProfile::zero_impairment(), Direction::Up, clock).unwrap();
        tx.send(RunId::NIL, &Message::Ack(Ack { of: Some(3) })).unwrap();
        let mut rx = MsgReader::new(r2);
        match rx.recv().await.unwrap().unwrap() {
            Incoming::Msg(_, Message::Ack(a)) => assert_eq!(a.of, Some(3)),
            other => panic!("{other:?}"),
        }
    }
}
