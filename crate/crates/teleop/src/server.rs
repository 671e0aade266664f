//! Network front end: one simulation task owns the session, connection
//! tasks forward inbound messages to it and relay broadcast frames.

use std::collections::VecDeque;
use std::io;
use std::net::SocketAddr;
use std::time::{Duration, Instant};

use bytes::Bytes;
use futures::{SinkExt, StreamExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{broadcast, mpsc, oneshot, watch};
use tokio::task::JoinHandle;
use tokio::time::MissedTickBehavior;
use tokio_util::codec::Framed;

use crate::protocol::{codec, Inbound, Outbound};
use crate::session::LiveSession;

/// How the loop advances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TickMode {
    /// Fixed wall-clock rate derived from the session's tick period.
    RealTime,
    /// One tick per received command; for scripted clients and tests.
    Lockstep,
}

#[derive(Debug, Clone)]
pub struct ServerOptions {
    pub listen: SocketAddr,
    pub mode: TickMode,
    /// Frames buffered per subscriber before the oldest are dropped.
    pub broadcast_capacity: usize,
}

impl Default for ServerOptions {
    fn default() -> Self {
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], 0)),
            mode: TickMode::RealTime,
            broadcast_capacity: 256,
        }
    }
}

/// Tick timing samples kept for the report.
const TIMING_WINDOW: usize = 1 << 16;

#[derive(Debug, Default)]
pub struct LoopReport {
    pub ticks: u64,
    /// Wall time of recent ticks: filter, integration and serialisation.
    pub tick_times: Vec<Duration>,
    pub log: Option<io::Result<()>>,
}

impl LoopReport {
    /// Nearest-rank percentile of the recorded tick times.
    pub fn percentile(&self, p: f64) -> Option<Duration> {
        if self.tick_times.is_empty() {
            return None;
        }
        let mut v = self.tick_times.clone();
        v.sort_unstable();
        let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
        Some(v[rank.min(v.len()) - 1])
    }
}

enum Event {
    Message(Inbound, mpsc::Sender<Bytes>),
    Disconnected,
}

pub struct ServerHandle {
    local_addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    sim: JoinHandle<LoopReport>,
    accept: JoinHandle<()>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// Stops the loop, closes the session log and returns the report.
    pub async fn shutdown(mut self) -> LoopReport {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        self.accept.abort();
        self.sim.await.unwrap_or_default()
    }

    /// Resolves when the loop ends on its own, which only happens on panic.
    pub async fn join(self) -> LoopReport {
        self.sim.await.unwrap_or_default()
    }
}

/// Binds the listener and starts the simulation loop.
pub async fn start(session: LiveSession, opts: ServerOptions) -> io::Result<ServerHandle> {
    let listener = TcpListener::bind(opts.listen).await?;
    let local_addr = listener.local_addr()?;
    let (frames, _) = broadcast::channel::<Bytes>(opts.broadcast_capacity.max(1));
    let (hello_tx, hello_rx) = watch::channel(session.hello().encode());
    let (events_tx, events_rx) = mpsc::channel::<Event>(1024);
    let (stop_tx, stop_rx) = oneshot::channel();

    let accept_frames = frames.clone();
    let accept = tokio::spawn(async move {
        loop {
            let (stream, peer) = match listener.accept().await {
                Ok(x) => x,
                Err(e) => {
                    log::warn!("accept: {e}");
                    continue;
                }
            };
            log::info!("client {peer} connected");
            let _ = stream.set_nodelay(true);
            let conn = Connection {
                frames: accept_frames.subscribe(),
                hello: hello_rx.clone(),
                events: events_tx.clone(),
            };
            tokio::spawn(async move {
                if let Err(e) = conn.run(stream).await {
                    log::info!("client {peer}: {e}");
                }
                log::info!("client {peer} disconnected");
            });
        }
    });

    let sim = tokio::spawn(run_loop(session, opts.mode, frames, hello_tx, events_rx, stop_rx));
    Ok(ServerHandle { local_addr, stop: Some(stop_tx), sim, accept })
}

struct Connection {
    frames: broadcast::Receiver<Bytes>,
    hello: watch::Receiver<Bytes>,
    events: mpsc::Sender<Event>,
}

impl Connection {
    async fn run(mut self, stream: TcpStream) -> io::Result<()> {
        let mut framed = Framed::new(stream, codec());
        let (reply_tx, mut reply_rx) = mpsc::channel::<Bytes>(16);
        let hello = self.hello.borrow().clone();
        framed.send(hello).await?;
        let result = loop {
            tokio::select! {
                incoming = framed.next() => match incoming {
                    None => break Ok(()),
                    Some(Err(e)) => break Err(e),
                    Some(Ok(bytes)) => match Inbound::decode(&bytes) {
                        Ok(msg) => {
                            if self.events.send(Event::Message(msg, reply_tx.clone())).await.is_err() {
                                break Ok(());
                            }
                        }
                        Err(e) => {
                            let err = Outbound::Error { message: format!("bad message: {e}") };
                            framed.send(err.encode()).await?;
                        }
                    },
                },
                frame = self.frames.recv() => match frame {
                    Ok(bytes) => framed.send(bytes).await?,
                    Err(broadcast::error::RecvError::Lagged(n)) => log::debug!("subscriber dropped {n} frames"),
                    Err(broadcast::error::RecvError::Closed) => break Ok(()),
                },
                Some(reply) = reply_rx.recv() => framed.send(reply).await?,
            }
        };
        let _ = self.events.send(Event::Disconnected).await;
        result
    }
}

async fn run_loop(
    mut session: LiveSession,
    mode: TickMode,
    frames: broadcast::Sender<Bytes>,
    hello: watch::Sender<Bytes>,
    mut events: mpsc::Receiver<Event>,
    mut stop: oneshot::Receiver<()>,
) -> LoopReport {
    let mut report = LoopReport::default();
    let mut times = VecDeque::with_capacity(1024);
    let period = Duration::from_secs_f64(session.config().tick_period());
    let mut interval = tokio::time::interval(period);
    interval.set_missed_tick_behavior(MissedTickBehavior::Burst);

    let tick = |session: &mut LiveSession, times: &mut VecDeque<Duration>| {
        let start = Instant::now();
        let out = session.tick();
        let encoded: Vec<Bytes> = out.messages.iter().map(Outbound::encode).collect();
        let elapsed = start.elapsed();
        if times.len() == TIMING_WINDOW {
            times.pop_front();
        }
        times.push_back(elapsed);
        session.log_messages(&encoded);
        for bytes in encoded {
            // No subscribers is fine: the vehicle keeps simulating.
            let _ = frames.send(bytes);
        }
    };

    let handle = |session: &mut LiveSession, event: Event| -> bool {
        match event {
            Event::Message(msg, reply) => {
                let is_command = matches!(msg, Inbound::Command { .. });
                if let Some(r) = session.apply(msg) {
                    let _ = reply.try_send(r.encode());
                }
                if !is_command {
                    hello.send_replace(session.hello().encode());
                }
                is_command
            }
            Event::Disconnected => {
                session.flush_log();
                false
            }
        }
    };

    loop {
        match mode {
            TickMode::RealTime => {
                tokio::select! {
                    _ = &mut stop => break,
                    _ = interval.tick() => {
                        while let Ok(event) = events.try_recv() {
                            handle(&mut session, event);
                        }
                        tick(&mut session, &mut times);
                    }
                }
            }
            TickMode::Lockstep => {
                tokio::select! {
                    _ = &mut stop => break,
                    event = events.recv() => match event {
                        Some(event) => {
                            if handle(&mut session, event) {
                                tick(&mut session, &mut times);
                            }
                        }
                        None => break,
                    },
                }
            }
        }
    }
    report.ticks = session.tick_index();
    report.tick_times = times.into_iter().collect();
    report.log = session.finish_log();
    report
}
