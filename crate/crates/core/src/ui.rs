//! Server side of the intervention UI: a WebSocket session that streams
//! point-mass rollouts to a browser and accepts takeover, steering, release
//! and outcome labels.
//!
//! The controlling client is the first connection; later connections are
//! observers that receive the same server messages and whose control
//! messages are rejected. Every message carries `schema_version` and a
//! `kind` tag.
//!
//! Control is decided per step. While the policy holds control the server
//! waits `step_period_ms` for messages after sending a frame; a takeover
//! received in that window makes the current step human-controlled. While the
//! human holds control the server waits up to `human_timeout_ms` for a
//! `human_action` referencing the current step or one of the
//! [`STALE_WINDOW`] steps before it; a release hands the current step back
//! to the policy, and a timeout releases control. Acks for takeover and
//! release carry the step they took effect at, so the stored intervention
//! segment runs from the takeover ack to the release ack.

use std::collections::BTreeSet;
use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tungstenite::{Message, WebSocket};

use crate::envs::pointmass::{
    PointMass, PointMassLayout, COLLAR_BACK_EDGE, CORRIDOR_BACK_EDGE, CORRIDOR_HALF_WIDTH,
    CORRIDOR_X, GOAL_RADIUS, HORIZON, OBSTACLE_CENTER, OBSTACLE_RADIUS,
};
use crate::envs::{ActionChunk, Env, Outcome};
use crate::orchestrator::{
    EpisodeClose, OrchestratorError, StepControl, StepView, Supervisor, UiConfig,
};

pub const UI_SCHEMA_VERSION: u32 = 1;
/// Human actions referencing a step more than this many steps back are dropped.
pub const STALE_WINDOW: usize = 5;
const ARENA_HALF_WIDTH: f64 = 1.0;

#[derive(Debug, thiserror::Error)]
pub enum UiError {
    #[error("no client connected within {0:?}")]
    NoClient(Duration),
    #[error("the intervention UI supports point-mass tasks only")]
    UnsupportedTask,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("websocket: {0}")]
    WebSocket(String),
}

impl From<UiError> for OrchestratorError {
    fn from(e: UiError) -> Self {
        OrchestratorError::Ui(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlHolder {
    Policy,
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Region {
    /// Axis-aligned box.
    Rect {
        x: [f64; 2],
        y: [f64; 2],
    },
    Circle {
        center: [f64; 2],
        radius: f64,
    },
    /// Everything with x beyond `x`.
    Beyond {
        x: f64,
    },
    /// Everything outside the square of half-width `half_width`.
    OutsideArena {
        half_width: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    InvalidMessage,
    UnsupportedVersion,
    NotHumanControlled,
    AlreadyHumanControlled,
    NotTerminal,
    AlreadyLabeled,
    UnknownEpisode,
    StaleAction,
    ObserverOnly,
    NoActiveEpisode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello {
        role: Role,
    },
    Frame {
        episode_id: u64,
        t: usize,
        position: [f64; 2],
        velocity: [f64; 2],
        goal: Goal,
        failure_regions: Vec<Region>,
        value: Option<f64>,
        control_holder: ControlHolder,
    },
    EpisodeEnd {
        episode_id: u64,
        steps: usize,
        outcome: Outcome,
        awaiting_label: bool,
    },
    Ack {
        of: AckKind,
        episode_id: u64,
        t: usize,
    },
    Error {
        code: ErrorCode,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Controller,
    Observer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AckKind {
    Takeover,
    Release,
    Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelOutcome {
    Success,
    Failure,
}

impl From<LabelOutcome> for Outcome {
    fn from(l: LabelOutcome) -> Self {
        match l {
            LabelOutcome::Success => Outcome::Success,
            LabelOutcome::Failure => Outcome::Failure,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClientMessage {
    Takeover,
    HumanAction {
        t: usize,
        action: [f64; 2],
    },
    Release,
    Label {
        episode_id: u64,
        outcome: LabelOutcome,
    },
}

/// Wire envelope: the message plus its schema version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<M> {
    pub schema_version: u32,
    #[serde(flatten)]
    pub message: M,
}

impl<M> Envelope<M> {
    pub fn new(message: M) -> Self {
        Self {
            schema_version: UI_SCHEMA_VERSION,
            message,
        }
    }
}

pub fn encode<M: Serialize>(message: M) -> String {
    serde_json::to_string(&Envelope::new(message)).expect("ui messages serialize")
}

/// Parses a client message, checking the schema version.
pub fn decode_client(text: &str) -> Result<ClientMessage, (ErrorCode, String)> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| (ErrorCode::InvalidMessage, e.to_string()))?;
    match value
        .get("schema_version")
        .and_then(serde_json::Value::as_u64)
    {
        Some(v) if v == UI_SCHEMA_VERSION as u64 => {}
        Some(v) => return Err((ErrorCode::UnsupportedVersion, format!("schema_version {v}"))),
        None => return Err((ErrorCode::InvalidMessage, "missing schema_version".into())),
    }
    let mut value = value;
    if let Some(obj) = value.as_object_mut() {
        obj.remove("schema_version");
    }
    let message: ClientMessage = serde_json::from_value(value.clone())
        .map_err(|e| (ErrorCode::InvalidMessage, e.to_string()))?;
    // Tagged unit variants ignore extra fields, so compare key sets directly.
    let canonical = serde_json::to_value(&message).expect("client messages serialize");
    let keys = |v: &serde_json::Value| {
        v.as_object()
            .map(|o| o.keys().cloned().collect::<BTreeSet<_>>())
    };
    if keys(&value) != keys(&canonical) {
        return Err((ErrorCode::InvalidMessage, "unexpected fields".into()));
    }
    Ok(message)
}

/// Static geometry of a point-mass layout.
pub fn scene(layout: PointMassLayout) -> (Goal, Vec<Region>) {
    let goal = Goal {
        center: [0.0, 0.0],
        radius: GOAL_RADIUS,
    };
    let mut regions = vec![Region::OutsideArena {
        half_width: ARENA_HALF_WIDTH,
    }];
    match layout {
        PointMassLayout::Corridor => {
            let x = [CORRIDOR_X.0, CORRIDOR_X.1];
            regions.push(Region::Rect {
                x,
                y: [CORRIDOR_HALF_WIDTH, ARENA_HALF_WIDTH],
            });
            regions.push(Region::Rect {
                x,
                y: [-ARENA_HALF_WIDTH, -CORRIDOR_HALF_WIDTH],
            });
            regions.push(Region::Beyond {
                x: CORRIDOR_BACK_EDGE,
            });
        }
        PointMassLayout::Collar => {
            regions.push(Region::Circle {
                center: OBSTACLE_CENTER,
                radius: OBSTACLE_RADIUS,
            });
            regions.push(Region::Beyond {
                x: COLLAR_BACK_EDGE,
            });
        }
    }
    (goal, regions)
}

fn point_mass(env: &Env) -> Result<&PointMass, UiError> {
    env.as_point_mass().ok_or(UiError::UnsupportedTask)
}

/// Counters over a session's lifetime.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionStats {
    pub frames: usize,
    pub human_steps: usize,
    pub stale_dropped: usize,
    pub rejected: usize,
    pub labels: usize,
    pub disconnects: usize,
}

type Socket = WebSocket<TcpStream>;

enum Incoming {
    Message(ClientMessage),
    Invalid(ErrorCode, String),
    Timeout,
    Closed,
}

/// A [`Supervisor`] driven by a connected browser client.
pub struct UiSession {
    config: UiConfig,
    listener: TcpListener,
    controller: Option<Socket>,
    observers: Vec<Socket>,
    holder: ControlHolder,
    episode: Option<u64>,
    dropped: bool,
    labeled: BTreeSet<u64>,
    /// Terminal episodes that may still receive a label.
    finished: BTreeSet<u64>,
    pub stats: SessionStats,
}

impl UiSession {
    /// Binds the configured address. Port 0 picks a free port.
    pub fn bind(config: UiConfig) -> Result<Self, UiError> {
        let listener = TcpListener::bind(&config.address)?;
        Ok(Self {
            config,
            listener,
            controller: None,
            observers: Vec::new(),
            holder: ControlHolder::Policy,
            episode: None,
            dropped: false,
            labeled: BTreeSet::new(),
            finished: BTreeSet::new(),
            stats: SessionStats::default(),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, UiError> {
        Ok(self.listener.local_addr()?)
    }

    /// Blocks until a controlling client connects or the accept timeout passes.
    pub fn wait_for_controller(&mut self) -> Result<(), UiError> {
        if self.controller.is_some() {
            return Ok(());
        }
        let timeout = Duration::from_millis(self.config.accept_timeout_ms);
        let deadline = Instant::now() + timeout;
        self.listener.set_nonblocking(true)?;
        loop {
            match self.listener.accept() {
                Ok((stream, _)) => {
                    let mut ws = handshake(stream)?;
                    send(
                        &mut ws,
                        ServerMessage::Hello {
                            role: Role::Controller,
                        },
                    )
                    .ok();
                    self.controller = Some(ws);
                    self.holder = ControlHolder::Policy;
                    return Ok(());
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(UiError::NoClient(timeout));
                    }
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Accepts pending connections as observers.
    fn accept_observers(&mut self) -> Result<(), UiError> {
        self.listener.set_nonblocking(true)?;
        loop {
            match self.listener.accept() {
                Ok((stream, _)) => {
                    let mut ws = handshake(stream)?;
                    if send(
                        &mut ws,
                        ServerMessage::Hello {
                            role: Role::Observer,
                        },
                    )
                    .is_ok()
                    {
                        self.observers.push(ws);
                    }
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => return Ok(()),
                Err(e) => return Err(e.into()),
            }
        }
    }

    fn broadcast(&mut self, message: ServerMessage) {
        if let Some(ws) = self.controller.as_mut() {
            if send(ws, message.clone()).is_err() {
                self.drop_controller();
            }
        }
        self.observers
            .retain_mut(|ws| send(ws, message.clone()).is_ok());
    }

    fn reply(&mut self, message: ServerMessage) {
        if let Some(ws) = self.controller.as_mut() {
            if send(ws, message).is_err() {
                self.drop_controller();
            }
        }
    }

    fn reject(&mut self, code: ErrorCode, message: impl Into<String>) {
        self.stats.rejected += 1;
        self.reply(ServerMessage::Error {
            code,
            message: message.into(),
        });
    }

    fn drop_controller(&mut self) {
        if self.controller.take().is_some() {
            self.stats.disconnects += 1;
            if self.episode.is_some() {
                self.dropped = true;
            }
            self.holder = ControlHolder::Policy;
        }
    }

    /// Rejects any control traffic from observers.
    fn police_observers(&mut self) {
        let mut keep = Vec::with_capacity(self.observers.len());
        for mut ws in self.observers.drain(..) {
            let mut alive = true;
            loop {
                match read(&mut ws, Duration::ZERO) {
                    Incoming::Timeout => break,
                    Incoming::Closed => {
                        alive = false;
                        break;
                    }
                    Incoming::Message(_) | Incoming::Invalid(..) => {
                        let msg = ServerMessage::Error {
                            code: ErrorCode::ObserverOnly,
                            message: "observers cannot send control messages".into(),
                        };
                        if send(&mut ws, msg).is_err() {
                            alive = false;
                            break;
                        }
                    }
                }
            }
            if alive {
                keep.push(ws);
            }
        }
        self.observers = keep;
    }

    fn next_message(&mut self, deadline: Instant) -> Incoming {
        let Some(ws) = self.controller.as_mut() else {
            return Incoming::Closed;
        };
        let wait = deadline.saturating_duration_since(Instant::now());
        let incoming = read(ws, wait);
        if let Incoming::Closed = incoming {
            self.drop_controller();
        }
        incoming
    }

    /// Handles a label for episode `id`; anything that is not a finished,
    /// unlabeled episode is rejected.
    fn handle_label(&mut self, id: u64, outcome: LabelOutcome) -> Option<Outcome> {
        if self.labeled.contains(&id) {
            self.reject(
                ErrorCode::AlreadyLabeled,
                format!("episode {id} is already labeled"),
            );
        } else if self.episode == Some(id) {
            self.reject(
                ErrorCode::NotTerminal,
                format!("episode {id} is still running"),
            );
        } else if !self.finished.contains(&id) {
            self.reject(
                ErrorCode::UnknownEpisode,
                format!("episode {id} is not awaiting a label"),
            );
        } else {
            self.finished.remove(&id);
            self.labeled.insert(id);
            self.stats.labels += 1;
            self.reply(ServerMessage::Ack {
                of: AckKind::Label,
                episode_id: id,
                t: 0,
            });
            return Some(outcome.into());
        }
        None
    }
}

fn handshake(stream: TcpStream) -> Result<Socket, UiError> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    tungstenite::accept(stream).map_err(|e| UiError::WebSocket(e.to_string()))
}

fn send(ws: &mut Socket, message: ServerMessage) -> tungstenite::Result<()> {
    ws.send(Message::text(encode(message)))
}

fn read(ws: &mut Socket, wait: Duration) -> Incoming {
    // A zero read timeout means "block forever" to the OS, so poll instead.
    let timeout = wait.max(Duration::from_millis(1));
    if ws.get_mut().set_read_timeout(Some(timeout)).is_err() {
        return Incoming::Closed;
    }
    loop {
        match ws.read() {
            Ok(Message::Text(text)) => {
                return match decode_client(&text) {
                    Ok(m) => Incoming::Message(m),
                    Err((code, msg)) => Incoming::Invalid(code, msg),
                }
            }
            Ok(Message::Binary(_)) => {
                return Incoming::Invalid(
                    ErrorCode::InvalidMessage,
                    "binary frames are not accepted".into(),
                )
            }
            Ok(Message::Close(_)) => return Incoming::Closed,
            Ok(_) => continue,
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) =>
            {
                return Incoming::Timeout
            }
            Err(_) => return Incoming::Closed,
        }
    }
}

impl Supervisor for UiSession {
    fn begin_episode(&mut self, episode: u64, env: &Env) -> crate::orchestrator::Result<()> {
        point_mass(env)?;
        self.wait_for_controller()?;
        self.episode = Some(episode);
        self.dropped = false;
        self.holder = ControlHolder::Policy;
        Ok(())
    }

    fn control(&mut self, view: &StepView<'_>) -> crate::orchestrator::Result<StepControl> {
        let pm = point_mass(view.env)?;
        let t = view.observation.t;
        self.accept_observers()?;
        self.police_observers();
        let (goal, failure_regions) = scene(pm.layout());
        let state = pm.state();
        self.broadcast(ServerMessage::Frame {
            episode_id: view.episode,
            t,
            position: state.position,
            velocity: state.velocity,
            goal,
            failure_regions,
            value: view.value,
            control_holder: self.holder,
        });
        self.stats.frames += 1;
        if self.controller.is_none() {
            return Ok(StepControl::Policy);
        }

        // Policy holds control: listen for a takeover during the step period.
        if self.holder == ControlHolder::Policy {
            let deadline = Instant::now() + Duration::from_millis(self.config.step_period_ms);
            loop {
                match self.next_message(deadline) {
                    Incoming::Timeout | Incoming::Closed => return Ok(StepControl::Policy),
                    Incoming::Invalid(code, msg) => self.reject(code, msg),
                    Incoming::Message(ClientMessage::Takeover) => {
                        self.holder = ControlHolder::Human;
                        self.reply(ServerMessage::Ack {
                            of: AckKind::Takeover,
                            episode_id: view.episode,
                            t,
                        });
                        break;
                    }
                    Incoming::Message(ClientMessage::HumanAction { .. }) => self.reject(
                        ErrorCode::NotHumanControlled,
                        "take over before sending actions",
                    ),
                    Incoming::Message(ClientMessage::Release) => self.reject(
                        ErrorCode::NotHumanControlled,
                        "the policy already holds control",
                    ),
                    Incoming::Message(ClientMessage::Label {
                        episode_id,
                        outcome,
                    }) => {
                        self.handle_label(episode_id, outcome);
                    }
                }
            }
        }

        // Human holds control: wait for this step's command.
        let deadline = Instant::now() + Duration::from_millis(self.config.human_timeout_ms);
        loop {
            match self.next_message(deadline) {
                Incoming::Closed => return Ok(StepControl::Policy),
                Incoming::Timeout => {
                    log::warn!(
                        "episode {}: no human command for t={t}; releasing control",
                        view.episode
                    );
                    self.holder = ControlHolder::Policy;
                    self.reply(ServerMessage::Ack {
                        of: AckKind::Release,
                        episode_id: view.episode,
                        t,
                    });
                    return Ok(StepControl::Policy);
                }
                Incoming::Invalid(code, msg) => self.reject(code, msg),
                Incoming::Message(ClientMessage::Takeover) => self.reject(
                    ErrorCode::AlreadyHumanControlled,
                    "the human already holds control",
                ),
                Incoming::Message(ClientMessage::Release) => {
                    self.holder = ControlHolder::Policy;
                    self.reply(ServerMessage::Ack {
                        of: AckKind::Release,
                        episode_id: view.episode,
                        t,
                    });
                    return Ok(StepControl::Policy);
                }
                Incoming::Message(ClientMessage::HumanAction { t: at, action }) => {
                    if at > t {
                        self.reject(
                            ErrorCode::InvalidMessage,
                            format!("action for future step {at} at t={t}"),
                        );
                    } else if t - at > STALE_WINDOW {
                        self.stats.stale_dropped += 1;
                        self.reject(
                            ErrorCode::StaleAction,
                            format!("action for step {at} is stale at t={t}"),
                        );
                    } else if action.iter().any(|a| !a.is_finite()) {
                        self.reject(ErrorCode::InvalidMessage, "non-finite action");
                    } else {
                        self.stats.human_steps += 1;
                        let u = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
                        return Ok(StepControl::Override(ActionChunk::constant(HORIZON, &u)));
                    }
                }
                Incoming::Message(ClientMessage::Label {
                    episode_id,
                    outcome,
                }) => {
                    self.handle_label(episode_id, outcome);
                }
            }
        }
    }

    fn end_episode(
        &mut self,
        episode: u64,
        env: &Env,
    ) -> crate::orchestrator::Result<EpisodeClose> {
        self.episode = None;
        self.holder = ControlHolder::Policy;
        let ui_dropped = std::mem::take(&mut self.dropped);
        if ui_dropped || self.controller.is_none() {
            return Ok(EpisodeClose {
                label: None,
                ui_dropped,
            });
        }
        self.finished.insert(episode);
        self.broadcast(ServerMessage::EpisodeEnd {
            episode_id: episode,
            steps: env.t(),
            outcome: env.outcome(),
            awaiting_label: true,
        });
        let deadline = Instant::now() + Duration::from_millis(self.config.label_timeout_ms);
        let mut label = None;
        while label.is_none() {
            match self.next_message(deadline) {
                Incoming::Timeout | Incoming::Closed => break,
                Incoming::Invalid(code, msg) => self.reject(code, msg),
                Incoming::Message(ClientMessage::Label {
                    episode_id,
                    outcome,
                }) => {
                    label = self.handle_label(episode_id, outcome);
                }
                Incoming::Message(_) => {
                    self.reject(ErrorCode::NoActiveEpisode, "the episode has ended")
                }
            }
        }
        self.finished.remove(&episode);
        Ok(EpisodeClose { label, ui_dropped })
    }
}
