//! Async framed streams with link emulation on the write side.
//!
//! Works over any `AsyncRead`/`AsyncWrite` pair (TCP sockets for live
//! runs, in-memory duplex pipes for virtual-time runs). All timing goes
//! through `tokio::time`, so a paused runtime clock makes delivery
//! schedules fully deterministic.

use std::sync::{Arc, Mutex};

use thiserror::Error;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};
use tokio::sync::mpsc;
use tokio::time::{Duration, Instant};

use crate::link::{Delivery, Direction, LinkError, LinkProfile, LinkScheduler};
use crate::wire::{encode, Envelope, FrameDecoder, WireError};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("connection closed")]
    Closed,
}

pub struct FramedReader<R> {
    inner: R,
    decoder: FrameDecoder,
    chunk: Vec<u8>,
}

impl<R: AsyncRead + Unpin> FramedReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            decoder: FrameDecoder::new(),
            chunk: vec![0; 64 * 1024],
        }
    }

    /// Next frame, or `None` on a clean end of stream.
    pub async fn recv(&mut self) -> Result<Option<Envelope>, NetError> {
        loop {
            if let Some(env) = self.decoder.next_frame()? {
                return Ok(Some(env));
            }
            let n = self.inner.read(&mut self.chunk).await?;
            if n == 0 {
                return if self.decoder.buffered() == 0 {
                    Ok(None)
                } else {
                    Err(NetError::Wire(WireError::Framing("stream ended inside a frame".into())))
                };
            }
            self.decoder.push(&self.chunk[..n]);
        }
    }
}

/// Shared clock origin for every link of one node or one harness run.
#[derive(Debug, Clone, Copy)]
pub struct LinkClock {
    epoch: Instant,
}

impl LinkClock {
    pub fn start() -> Self {
        Self { epoch: Instant::now() }
    }

    pub fn now_s(&self) -> f64 {
        self.epoch.elapsed().as_secs_f64()
    }

    pub fn instant_at(&self, t: f64) -> Instant {
        self.epoch + Duration::from_secs_f64(t.max(0.0))
    }
}

/// Write half of an emulated link. Frames are scheduled at submission and
/// written by a background task once their delivery instant arrives.
#[derive(Clone)]
pub struct LinkSender {
    tx: mpsc::UnboundedSender<(f64, Vec<u8>)>,
    scheduler: Arc<Mutex<LinkScheduler>>,
    clock: LinkClock,
    dir: Direction,
}

impl LinkSender {
    pub fn spawn<W>(writer: W, profile: LinkProfile, dir: Direction, clock: LinkClock) -> Result<Self, NetError>
    where
        W: AsyncWrite + Unpin + Send + 'static,
    {
        let scheduler = Arc::new(Mutex::new(LinkScheduler::new(profile)?));
        let (tx, mut rx) = mpsc::unbounded_channel::<(f64, Vec<u8>)>();
        tokio::spawn(async move {
            let mut writer = writer;
            while let Some((at, bytes)) = rx.recv().await {
                tokio::time::sleep_until(clock.instant_at(at)).await;
                if writer.write_all(&bytes).await.is_err() || writer.flush().await.is_err() {
                    break;
                }
            }
            let _ = writer.shutdown().await;
        });
        Ok(Self {
            tx,
            scheduler,
            clock,
            dir,
        })
    }

    /// Queues a frame; returns its scheduled delivery time on the link
    /// clock, or `None` if the link dropped it.
    pub fn send(&self, env: &Envelope) -> Result<Option<f64>, NetError> {
        let bytes = encode(env)?;
        let now = self.clock.now_s();
        let delivery = self
            .scheduler
            .lock()
            .expect("scheduler lock")
            .schedule(bytes.len(), self.dir, now)?;
        match delivery {
            Delivery::Dropped => Ok(None),
            Delivery::Delivered(s) => {
                self.tx.send((s.at, bytes)).map_err(|_| NetError::Closed)?;
                Ok(Some(s.at))
            }
        }
    }

    pub fn clock(&self) -> LinkClock {
        self.clock
    }
}
