//! Single-operator WebSocket endpoint for the session loop.
//!
//! One episode runs at a time on its own thread. A connected client
//! receives the episode's state, cue and ack frames and may send command
//! and control frames; with no client the episode keeps running and its
//! telemetry is dropped.

use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use log::{info, warn};
use teleop_core::bridge::{
    decode, encode, AckPayload, AckStatus, Bridge, ControlAction, ControlPayload, Payload, WireMessage, DEFAULT_PORT,
};
use teleop_core::session::{run_episode, EpisodeLog, FeedbackFlags, ScenarioKind, SessionConfig};
use tungstenite::{Message, WebSocket};

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub port: u16,
    pub bind: String,
    pub telemetry_capacity: usize,
    /// Pace episodes at 50 Hz wall-clock.
    pub realtime: bool,
    pub scenario: ScenarioKind,
    pub seed: u64,
    pub flags: FeedbackFlags,
    pub max_duration: Option<f64>,
    /// Finished episodes are written here as `episode_<n>.jsonl`.
    pub log_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            port: DEFAULT_PORT,
            bind: "127.0.0.1".into(),
            telemetry_capacity: 64,
            realtime: true,
            scenario: ScenarioKind::Idle,
            seed: 0,
            flags: FeedbackFlags::all(),
            max_duration: None,
            log_dir: None,
        }
    }
}

struct Episode {
    bridge: Bridge,
    handle: JoinHandle<teleop_core::Result<EpisodeLog>>,
}

struct Engine {
    cfg: ServerConfig,
    current: Option<Episode>,
    last_bridge: Option<Bridge>,
    last_control: Option<ControlPayload>,
    finished: usize,
}

impl Engine {
    fn session_config(&self, c: &ControlPayload) -> SessionConfig {
        let mut s = SessionConfig::new(
            c.scenario.unwrap_or(self.cfg.scenario),
            c.seed.unwrap_or(self.cfg.seed),
            c.flags.unwrap_or(self.cfg.flags),
        );
        s.max_duration = self.cfg.max_duration;
        s
    }

    fn stop(&mut self) {
        if let Some(ep) = self.current.take() {
            ep.bridge.request_stop();
            ep.bridge.close();
            self.collect(ep);
        }
    }

    fn collect(&mut self, ep: Episode) {
        match ep.handle.join() {
            Ok(Ok(log)) => {
                self.finished += 1;
                if let Some(dir) = &self.cfg.log_dir {
                    let path = dir.join(format!("episode_{}.jsonl", self.finished));
                    if let Err(e) = std::fs::create_dir_all(dir).map_err(teleop_core::Error::from).and_then(|_| log.save(&path)) {
                        warn!("could not save {}: {e}", path.display());
                    }
                }
            }
            Ok(Err(e)) => warn!("episode failed: {e}"),
            Err(_) => warn!("episode thread panicked"),
        }
    }

    fn start(&mut self, c: &ControlPayload) -> Bridge {
        self.stop();
        let scfg = self.session_config(c);
        let bridge = Bridge::new(self.cfg.telemetry_capacity);
        let mut op = bridge.operator();
        if self.cfg.realtime {
            op = op.realtime();
        }
        info!("starting {} seed {}", scfg.scenario.as_str(), scfg.seed);
        let handle = std::thread::spawn(move || run_episode(&scfg, &mut op));
        self.current = Some(Episode { bridge: bridge.clone(), handle });
        self.last_bridge = Some(bridge.clone());
        self.last_control = Some(c.clone());
        bridge
    }

    /// Queues of the running episode, or of the last one until the next start.
    fn bridge(&mut self) -> Option<Bridge> {
        if self.current.as_ref().is_some_and(|ep| ep.handle.is_finished()) {
            let ep = self.current.take().unwrap();
            self.collect(ep);
        }
        self.last_bridge.clone()
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
    engine: Arc<Mutex<Engine>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("ws://{}", self.addr)
    }

    /// Episodes written to disk or otherwise completed so far.
    pub fn finished_episodes(&self) -> usize {
        self.engine.lock().unwrap().finished
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        self.engine.lock().unwrap().stop();
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Binds and serves in background threads. Port 0 picks a free port.
pub fn serve(cfg: ServerConfig) -> std::io::Result<ServerHandle> {
    let listener = TcpListener::bind((cfg.bind.as_str(), cfg.port))?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let shutdown = Arc::new(AtomicBool::new(false));
    let engine = Arc::new(Mutex::new(Engine { cfg, current: None, last_bridge: None, last_control: None, finished: 0 }));
    let busy = Arc::new(AtomicBool::new(false));
    let accept = {
        let shutdown = shutdown.clone();
        let engine = engine.clone();
        std::thread::spawn(move || accept_loop(listener, shutdown, engine, busy))
    };
    info!("listening on ws://{addr}");
    Ok(ServerHandle { addr, shutdown, accept: Some(accept), engine })
}

fn accept_loop(listener: TcpListener, shutdown: Arc<AtomicBool>, engine: Arc<Mutex<Engine>>, busy: Arc<AtomicBool>) {
    let mut clients = Vec::new();
    while !shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let _ = stream.set_nonblocking(false);
                if busy.swap(true, Ordering::SeqCst) {
                    std::thread::spawn(move || reject_busy(stream));
                    continue;
                }
                info!("operator connected from {peer}");
                let (engine, busy, shutdown) = (engine.clone(), busy.clone(), shutdown.clone());
                clients.push(std::thread::spawn(move || {
                    if let Err(e) = client_loop(stream, &engine, &shutdown) {
                        info!("operator {peer} left: {e}");
                    }
                    busy.store(false, Ordering::SeqCst);
                }));
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(10)),
            Err(e) => warn!("accept failed: {e}"),
        }
    }
    for c in clients {
        let _ = c.join();
    }
}

fn reject_busy(stream: TcpStream) {
    if let Ok(mut ws) = tungstenite::accept(stream) {
        let ack = AckPayload {
            status: AckStatus::Busy,
            of_tick: None,
            applied_tick: None,
            message: Some("another operator is connected".into()),
        };
        if let Ok(text) = encode(&WireMessage::new(0, Payload::Ack(ack))) {
            let _ = ws.send(Message::text(text));
        }
        let _ = ws.close(None);
        let _ = ws.flush();
    }
}

fn send(ws: &mut WebSocket<TcpStream>, msg: &WireMessage) -> tungstenite::Result<()> {
    match encode(msg) {
        Ok(text) => ws.send(Message::text(text)),
        Err(e) => {
            warn!("dropping unencodable {} frame: {e}", msg.kind());
            Ok(())
        }
    }
}

fn ack(of_tick: u64, status: AckStatus, message: Option<String>) -> WireMessage {
    WireMessage::new(of_tick, Payload::Ack(AckPayload { status, of_tick: Some(of_tick), applied_tick: None, message }))
}

fn client_loop(stream: TcpStream, engine: &Mutex<Engine>, shutdown: &AtomicBool) -> tungstenite::Result<()> {
    let mut ws = tungstenite::accept(stream).map_err(|e| match e {
        tungstenite::HandshakeError::Failure(e) => e,
        tungstenite::HandshakeError::Interrupted(_) => tungstenite::Error::Io(ErrorKind::WouldBlock.into()),
    })?;
    ws.get_ref().set_read_timeout(Some(Duration::from_millis(5)))?;
    while !shutdown.load(Ordering::SeqCst) {
        if let Some(b) = engine.lock().unwrap().bridge() {
            while let Some(m) = b.acks.try_pop() {
                send(&mut ws, &m)?;
            }
            while let Some(m) = b.telemetry.try_pop() {
                send(&mut ws, &m)?;
            }
        }
        match ws.read() {
            Ok(Message::Text(t)) => {
                if let Some(reply) = handle_frame(t.as_str(), engine) {
                    send(&mut ws, &reply)?;
                }
            }
            Ok(Message::Binary(_)) => send(&mut ws, &WireMessage::new(0, Payload::Ack(AckPayload::error("binary frames are not supported"))))?,
            Ok(Message::Close(_)) => break,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(e) => return Err(e),
        }
    }
    let _ = ws.close(None);
    let _ = ws.flush();
    Ok(())
}

/// Applies one client frame; returns an immediate reply if any.
fn handle_frame(text: &str, engine: &Mutex<Engine>) -> Option<WireMessage> {
    let msg = match decode(text) {
        Ok(m) => m,
        Err(e) => return Some(WireMessage::new(0, Payload::Ack(AckPayload::error(e.to_string())))),
    };
    let mut eng = engine.lock().unwrap();
    match msg.payload {
        Payload::Command(cmd) => match &eng.current {
            Some(ep) => {
                ep.bridge.submit(msg.tick, cmd);
                None
            }
            None => Some(ack(msg.tick, AckStatus::Error, Some("no episode running".into()))),
        },
        Payload::Control(c) => {
            match c.action {
                ControlAction::Start => {
                    eng.start(&c);
                }
                ControlAction::Reset => {
                    let base = eng.last_control.clone().unwrap_or(c.clone());
                    let merged = ControlPayload {
                        action: ControlAction::Start,
                        scenario: c.scenario.or(base.scenario),
                        seed: c.seed.or(base.seed),
                        flags: c.flags.or(base.flags),
                    };
                    eng.start(&merged);
                }
                ControlAction::Stop => {
                    if let Some(ep) = &eng.current {
                        ep.bridge.request_stop();
                    }
                }
            }
            Some(ack(msg.tick, AckStatus::Ok, None))
        }
        other => {
            let kind = WireMessage::new(msg.tick, other).kind();
            Some(ack(msg.tick, AckStatus::Error, Some(format!("clients may not send {kind} frames"))))
        }
    }
}
