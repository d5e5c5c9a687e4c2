//! TCP session service: one thread per connection, one JSON message per line.
//!
//! In real-time mode each session ticks every `dt` on a monotonic clock and
//! applies whatever control arrived last. In fast mode the service is in
//! lockstep with the client: every `control` message advances exactly one
//! tick and is answered by the new state. The tick that ends a session is
//! answered by the summary instead of a state message.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{info, warn};

use super::protocol::{ClientMsg, ServerMsg, Summary};
use super::{Control, EpisodeStore, Registry, Session, Status};
use crate::error::{Error, Result};
use crate::scenario::ScenarioConfig;

/// Ticks of lag after which real-time pacing resynchronizes instead of
/// bursting to catch up.
const MAX_LAG_TICKS: u32 = 5;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub scenario: ScenarioConfig,
    pub store_dir: PathBuf,
    pub fast: bool,
    /// Seed for sessions whose start message carries none; incremented per
    /// such session.
    pub base_seed: u64,
}

struct Shared {
    cfg: ServerConfig,
    store: EpisodeStore,
    registry: Registry,
    next_seed: AtomicU64,
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the accept loop ends.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    /// Stops accepting connections. Running sessions end with their clients.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Binds `addr` and serves sessions on a background thread.
pub fn serve(addr: &str, cfg: ServerConfig) -> Result<ServerHandle> {
    cfg.scenario.validate()?;
    let store = EpisodeStore::open(&cfg.store_dir)?;
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let shared = Arc::new(Shared {
        next_seed: AtomicU64::new(cfg.base_seed),
        cfg,
        store,
        registry: Registry::default(),
    });
    let stop_flag = Arc::clone(&stop);
    let thread = thread::spawn(move || {
        for conn in listener.incoming() {
            if stop_flag.load(Ordering::SeqCst) {
                break;
            }
            match conn {
                Ok(stream) => {
                    let shared = Arc::clone(&shared);
                    thread::spawn(move || {
                        let peer = stream.peer_addr().ok();
                        if let Err(e) = handle_connection(stream, &shared) {
                            warn!("connection {peer:?} ended with error: {e}");
                        }
                    });
                }
                Err(e) => warn!("accept failed: {e}"),
            }
        }
    });
    info!("session service listening on {local}");
    Ok(ServerHandle {
        addr: local,
        stop,
        thread: Some(thread),
    })
}

enum Incoming {
    Msg(ClientMsg),
    Malformed(String),
    Closed,
}

struct Conn {
    out: TcpStream,
    rx: Receiver<Incoming>,
}

impl Conn {
    fn send(&mut self, msg: &ServerMsg) -> Result<()> {
        self.out.write_all(msg.to_line().as_bytes())?;
        Ok(())
    }

    fn send_error(&mut self, code: &str, message: impl Into<String>) -> Result<()> {
        self.send(&ServerMsg::Error {
            code: code.into(),
            message: message.into(),
        })
    }
}

fn spawn_reader(stream: TcpStream) -> Receiver<Incoming> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let reader = BufReader::new(stream);
        for line in reader.lines() {
            let Ok(line) = line else { break };
            if line.trim().is_empty() {
                continue;
            }
            let item = match serde_json::from_str::<ClientMsg>(&line) {
                Ok(m) => Incoming::Msg(m),
                Err(e) => Incoming::Malformed(e.to_string()),
            };
            if tx.send(item).is_err() {
                return;
            }
        }
        let _ = tx.send(Incoming::Closed);
    });
    rx
}

fn handle_connection(stream: TcpStream, shared: &Shared) -> Result<()> {
    stream.set_nodelay(true)?;
    let rx = spawn_reader(stream.try_clone()?);
    let mut conn = Conn { out: stream, rx };
    loop {
        let msg = match conn.rx.recv() {
            Ok(Incoming::Msg(m)) => m,
            Ok(Incoming::Malformed(e)) => {
                conn.send_error("parse", e)?;
                continue;
            }
            Ok(Incoming::Closed) | Err(_) => return Ok(()),
        };
        let ClientMsg::Start {
            driver_id,
            seed,
            session_id,
        } = msg
        else {
            conn.send(&ServerMsg::reject("no running session"))?;
            continue;
        };
        let seed = seed.unwrap_or_else(|| shared.next_seed.fetch_add(1, Ordering::SeqCst));
        let session_id = session_id.unwrap_or_else(|| format!("{driver_id}-{seed}"));
        let session = match Session::start(&session_id, &driver_id, seed, &shared.cfg.scenario) {
            Ok(s) => s,
            Err(e) => {
                conn.send_error("config", e.to_string())?;
                continue;
            }
        };
        if let Err(e) = shared.registry.claim(&session_id) {
            conn.send_error("conflict", e.to_string())?;
            continue;
        }
        let outcome = run_session(&mut conn, session, shared);
        shared.registry.release(&session_id);
        match outcome? {
            Flow::Continue => {}
            Flow::Closed => return Ok(()),
        }
    }
}

enum Flow {
    Continue,
    Closed,
}

enum Step {
    Running,
    Finished,
    Aborted(String),
    Closed,
}

/// Applies one client message to a running session.
fn apply(conn: &mut Conn, session: &mut Session, item: Incoming, fast: bool) -> Result<Step> {
    match item {
        Incoming::Msg(ClientMsg::Control { throttle, brake }) => {
            match session.set_control(Control { throttle, brake }) {
                Ok(()) => {}
                Err(Error::Rejected(r)) => {
                    conn.send(&ServerMsg::reject(r))?;
                    return Ok(Step::Running);
                }
                Err(e) => return Err(e),
            }
            if fast {
                session.tick()?;
                if session.status() == Status::Finished {
                    return Ok(Step::Finished);
                }
                conn.send(&session.state_msg())?;
            }
            Ok(Step::Running)
        }
        Incoming::Msg(ClientMsg::Decision { choice }) => {
            match session.decide(choice) {
                Ok(()) => conn.send(&ServerMsg::ack())?,
                Err(Error::Rejected(r)) => conn.send(&ServerMsg::reject(r))?,
                Err(e) => return Err(e),
            }
            Ok(Step::Running)
        }
        Incoming::Msg(ClientMsg::Abort) => Ok(Step::Aborted("aborted by client".into())),
        Incoming::Msg(ClientMsg::Start { .. }) => {
            conn.send(&ServerMsg::reject("a session is already running"))?;
            Ok(Step::Running)
        }
        Incoming::Malformed(e) => {
            conn.send_error("parse", e)?;
            Ok(Step::Running)
        }
        Incoming::Closed => Ok(Step::Closed),
    }
}

fn run_session(conn: &mut Conn, mut session: Session, shared: &Shared) -> Result<Flow> {
    conn.send(&session.state_msg())?;
    let fast = shared.cfg.fast;
    let dt = Duration::from_secs_f64(session.scenario().dt_s);
    let mut next = Instant::now() + dt;
    let step = loop {
        let item = if fast {
            conn.rx.recv().unwrap_or(Incoming::Closed)
        } else {
            let now = Instant::now();
            if now >= next {
                session.tick()?;
                if session.status() == Status::Finished {
                    break Step::Finished;
                }
                conn.send(&session.state_msg())?;
                next += dt;
                if now > next + dt * MAX_LAG_TICKS {
                    next = now + dt;
                }
                continue;
            }
            match conn.rx.recv_timeout(next - now) {
                Ok(item) => item,
                Err(RecvTimeoutError::Timeout) => continue,
                Err(RecvTimeoutError::Disconnected) => Incoming::Closed,
            }
        };
        match apply(conn, &mut session, item, fast)? {
            Step::Running => {}
            other => break other,
        }
    };
    let id = session.session_id().to_string();
    let driver = session.driver_id().to_string();
    let seed = session.scenario().seed;
    let ticks = session.samples().len();
    let discarded = |reason: String, ticks: usize| Summary {
        session_id: id.clone(),
        driver_id: driver.clone(),
        seed,
        stored: false,
        decision: None,
        decision_t_s: None,
        ran_red: None,
        crossed_line_t_s: None,
        ticks,
        reason: Some(reason),
    };
    match step {
        Step::Finished => {
            let summary = match session.finish() {
                Ok(ep) => {
                    shared.store.append(&ep)?;
                    info!("session {id}: stored {} episode for {driver}", ep.decision.as_str());
                    Summary::stored(&id, &ep)
                }
                Err(_) => {
                    warn!("session {id}: ended without a decision; discarded");
                    discarded("no decision was made".into(), ticks)
                }
            };
            conn.send(&ServerMsg::Summary(summary))?;
            Ok(Flow::Continue)
        }
        Step::Aborted(reason) => {
            warn!("session {id}: {reason}; discarded");
            conn.send(&ServerMsg::Summary(discarded(reason, ticks)))?;
            Ok(Flow::Continue)
        }
        Step::Closed => {
            warn!("session {id}: client disconnected; discarded");
            Ok(Flow::Closed)
        }
        Step::Running => unreachable!("loop exits only on a terminal step"),
    }
}
