//! Deterministic network simulation for the handshake.
//!
//! Both handshake machines run on one thread against a [`VirtualClock`].
//! Messages cross a [`SimTransport`] with per-direction latency and can be
//! dropped or have one byte flipped, chosen by their global send index
//! (0 = CLIENT_HELLO, 1 = SERVER_CHALLENGE, 2 = CLIENT_PROOF,
//! 3 = SERVER_RESULT on the normal path). Events at the same instant run
//! deliveries first, then timers, so a message arriving exactly at a
//! deadline still counts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{self, ErrorKind};
use std::time::Duration;

use rand::rngs::StdRng;
use rand::{RngCore, SeedableRng};
use thiserror::Error;

use crate::aes::{Block, Key128};
use crate::clock::ManualClock;
use crate::tunnel::frame::{encode_frame, FrameDecoder, FrameType};
use crate::tunnel::{
    ClientHandshake, Frame, HandshakeError, Phase, ServerHandshake, Transport, CONTACTING_MESSAGE,
};
use crate::vault::{password_verifier, HandshakeMaterial};

/// XOR mask applied to a corrupted byte.
pub const CORRUPT_MASK: u8 = 0xff;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Endpoint {
    Client,
    Server,
}

impl Endpoint {
    pub fn name(self) -> &'static str {
        match self {
            Endpoint::Client => "client",
            Endpoint::Server => "server",
        }
    }

    /// Direction label for messages this endpoint sends.
    pub fn direction(self) -> &'static str {
        match self {
            Endpoint::Client => "c2s",
            Endpoint::Server => "s2c",
        }
    }
}

/// Virtual time plus one pending timer per endpoint.
#[derive(Debug, Clone, Default)]
pub struct VirtualClock {
    now: Duration,
    timers: BTreeMap<Endpoint, Duration>,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> Duration {
        self.now
    }

    pub fn set_timer(&mut self, owner: Endpoint, at: Duration) {
        self.timers.insert(owner, at);
    }

    pub fn cancel_timer(&mut self, owner: Endpoint) {
        self.timers.remove(&owner);
    }

    pub fn timer(&self, owner: Endpoint) -> Option<Duration> {
        self.timers.get(&owner).copied()
    }

    /// Earliest timer; ties go to the client.
    pub fn next_timer(&self) -> Option<(Duration, Endpoint)> {
        self.timers.iter().map(|(&e, &t)| (t, e)).min()
    }

    fn advance_to(&mut self, t: Duration) {
        if t > self.now {
            self.now = t;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InFlight {
    pub index: usize,
    pub from: Endpoint,
    pub deliver_at: Duration,
    pub bytes: Vec<u8>,
    pub corrupted: bool,
}

/// What happened to a message at send time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fate {
    Queued { deliver_at: Duration },
    Corrupted { deliver_at: Duration, offset: usize },
    Dropped,
}

/// The simulated duplex link.
#[derive(Debug, Clone, Default)]
pub struct SimTransport {
    latency_c2s: Duration,
    latency_s2c: Duration,
    drops: BTreeSet<usize>,
    corruptions: BTreeMap<usize, usize>,
    sent: usize,
    // keyed by (delivery time, send index): per-direction order is kept
    // because latency is fixed per direction
    queue: BTreeMap<(Duration, usize), InFlight>,
}

impl SimTransport {
    pub fn new(latency_c2s: Duration, latency_s2c: Duration) -> Self {
        SimTransport {
            latency_c2s,
            latency_s2c,
            ..Default::default()
        }
    }

    pub fn drop_message(&mut self, index: usize) {
        self.drops.insert(index);
    }

    pub fn corrupt_message(&mut self, index: usize, offset: usize) {
        self.corruptions.insert(index, offset);
    }

    pub fn messages_sent(&self) -> usize {
        self.sent
    }

    pub fn latency(&self, from: Endpoint) -> Duration {
        match from {
            Endpoint::Client => self.latency_c2s,
            Endpoint::Server => self.latency_s2c,
        }
    }

    pub fn send(&mut self, from: Endpoint, now: Duration, mut bytes: Vec<u8>) -> Fate {
        let index = self.sent;
        self.sent += 1;
        if self.drops.contains(&index) {
            return Fate::Dropped;
        }
        let deliver_at = now + self.latency(from);
        let mut fate = Fate::Queued { deliver_at };
        if let Some(&offset) = self.corruptions.get(&index) {
            if let Some(b) = bytes.get_mut(offset) {
                *b ^= CORRUPT_MASK;
                fate = Fate::Corrupted { deliver_at, offset };
            }
        }
        let corrupted = matches!(fate, Fate::Corrupted { .. });
        self.queue.insert(
            (deliver_at, index),
            InFlight {
                index,
                from,
                deliver_at,
                bytes,
                corrupted,
            },
        );
        fate
    }

    pub fn next_delivery(&self) -> Option<Duration> {
        self.queue.keys().next().map(|&(t, _)| t)
    }

    /// Removes the earliest message due at or before `now`.
    pub fn pop_due(&mut self, now: Duration) -> Option<InFlight> {
        let key = *self.queue.keys().next()?;
        if key.0 > now {
            return None;
        }
        self.queue.remove(&key)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct ScenarioError {
    pub line: usize,
    pub message: String,
}

/// A parsed scenario file.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub latency_c2s: Duration,
    pub latency_s2c: Duration,
    pub drop: Vec<usize>,
    pub corrupt: Vec<(usize, usize)>,
    pub timeout: Duration,
    pub seed: u64,
    pub user: String,
    /// The password the gateway holds.
    pub password: String,
    /// The password the client types; defaults to `password`.
    pub client_password: Option<String>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: "unnamed".into(),
            latency_c2s: Duration::ZERO,
            latency_s2c: Duration::ZERO,
            drop: Vec::new(),
            corrupt: Vec::new(),
            timeout: Duration::from_secs(30),
            seed: 0,
            user: "vpncustomer".into(),
            password: "correct horse".into(),
            client_password: None,
        }
    }
}

fn parse_secs(v: &str) -> Result<Duration, String> {
    let s: f64 = v
        .parse()
        .map_err(|_| format!("expected seconds, got {v:?}"))?;
    if !s.is_finite() || s < 0.0 {
        return Err(format!("seconds must be finite and non-negative, got {v}"));
    }
    Ok(Duration::from_secs_f64(s))
}

fn parse_index_list(v: &str) -> Result<Vec<usize>, String> {
    let inner = v
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| format!("expected [i, j, ...], got {v:?}"))?;
    inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| format!("bad index {s:?}")))
        .collect()
}

impl Scenario {
    /// Parses `key: value` lines. `#` starts a comment; `corrupt` may repeat.
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let mut sc = Scenario::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |message: String| ScenarioError { line, message };
            let content = raw.split('#').next().unwrap().trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once(':')
                .ok_or_else(|| err("expected `key: value`".into()))?;
            let (key, value) = (key.trim(), value.trim());
            if key != "corrupt" && !seen.insert(key.to_owned()) {
                return Err(err(format!("duplicate key {key:?}")));
            }
            match key {
                "name" => sc.name = value.to_owned(),
                "latency_c2s" => sc.latency_c2s = parse_secs(value).map_err(err)?,
                "latency_s2c" => sc.latency_s2c = parse_secs(value).map_err(err)?,
                "timeout_secs" => {
                    sc.timeout = parse_secs(value).map_err(err)?;
                    if sc.timeout.is_zero() {
                        return Err(err("timeout_secs must be positive".into()));
                    }
                }
                "drop" => sc.drop = parse_index_list(value).map_err(err)?,
                "corrupt" => {
                    let (idx, off) = value
                        .split_once(',')
                        .ok_or_else(|| err("expected `index,offset`".into()))?;
                    let idx = idx
                        .trim()
                        .parse()
                        .map_err(|_| err(format!("bad index {idx:?}")))?;
                    let off = off
                        .trim()
                        .parse()
                        .map_err(|_| err(format!("bad offset {off:?}")))?;
                    sc.corrupt.push((idx, off));
                }
                "seed" => {
                    sc.seed = value
                        .parse()
                        .map_err(|_| err(format!("bad seed {value:?}")))?
                }
                "user" => sc.user = value.to_owned(),
                "password" => sc.password = value.to_owned(),
                "client_password" => sc.client_password = Some(value.to_owned()),
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        Ok(sc)
    }
}

/// Final state of a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub client: Phase,
    pub server: Phase,
    pub client_error: Option<HandshakeError>,
    pub finished_at: Duration,
    /// User-facing strings the client printed.
    pub emitted: Vec<String>,
}

impl Outcome {
    /// The tunnel is up only once the client has verified the server; the
    /// server alone may believe it is established if SERVER_RESULT is lost.
    pub fn established(&self) -> bool {
        self.client == Phase::Established && self.server == Phase::Established
    }

    pub fn label(&self) -> &'static str {
        match (&self.client_error, self.client) {
            _ if self.established() => "ESTABLISHED",
            (Some(HandshakeError::TimedOut), _) => "TIMED_OUT",
            (Some(HandshakeError::Protocol(_)), _) => "PROTOCOL_ERROR",
            (Some(_), _) => "FAILED",
            (None, Phase::Established) => "HALF_OPEN",
            (None, _) => "STALLED",
        }
    }
}

/// Ordered, line-oriented event log.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub lines: Vec<String>,
}

impl fmt::Display for Transcript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.lines {
            writeln!(f, "{l}")?;
        }
        Ok(())
    }
}

fn fmt_t(t: Duration) -> String {
    format!("{}.{:03}", t.as_secs(), t.subsec_millis())
}

/// Client and server handshakes joined by a [`SimTransport`].
pub struct Simulation {
    clock: VirtualClock,
    net: SimTransport,
    client: ClientHandshake,
    server: ServerHandshake,
    material: HandshakeMaterial,
    unknown: HandshakeMaterial,
    user: String,
    decoders: [FrameDecoder; 2],
    // a framing error kills an endpoint outside its state machine
    broken: [Option<HandshakeError>; 2],
    client_error: Option<HandshakeError>,
    emitted: Vec<String>,
    transcript: Transcript,
    phases: [Phase; 2],
}

fn slot(e: Endpoint) -> usize {
    e as usize
}

impl Simulation {
    pub fn new(sc: &Scenario) -> Self {
        let mut rng = StdRng::seed_from_u64(sc.seed);
        let mut block = || {
            let mut b: Block = [0; 16];
            rng.fill_bytes(&mut b);
            b
        };
        let (cn, sn, salt, dummy_salt, dummy_secret) =
            (block(), block(), block(), block(), block());
        let verifier =
            password_verifier(&sc.user, sc.password.as_bytes(), &salt).expect("non-empty password");
        let client_pw = sc.client_password.as_deref().unwrap_or(&sc.password);
        let mut net = SimTransport::new(sc.latency_c2s, sc.latency_s2c);
        for &i in &sc.drop {
            net.drop_message(i);
        }
        for &(i, off) in &sc.corrupt {
            net.corrupt_message(i, off);
        }
        Simulation {
            clock: VirtualClock::new(),
            net,
            client: ClientHandshake::new(&sc.user, client_pw.as_bytes(), cn, sc.timeout),
            server: ServerHandshake::new(sn, sc.timeout, Duration::ZERO),
            material: HandshakeMaterial {
                salt,
                secret: Key128::new(verifier),
                known: true,
            },
            unknown: HandshakeMaterial {
                salt: dummy_salt,
                secret: Key128::new(dummy_secret),
                known: false,
            },
            user: sc.user.clone(),
            decoders: [FrameDecoder::new(), FrameDecoder::new()],
            broken: [None, None],
            client_error: None,
            emitted: Vec::new(),
            transcript: Transcript::default(),
            phases: [Phase::Init, Phase::Init],
        }
    }

    pub fn now(&self) -> Duration {
        self.clock.now()
    }

    pub fn clock(&self) -> &VirtualClock {
        &self.clock
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn client_phase(&self) -> Phase {
        self.phase(Endpoint::Client)
    }

    pub fn server_phase(&self) -> Phase {
        self.phase(Endpoint::Server)
    }

    fn phase(&self, e: Endpoint) -> Phase {
        if self.broken[slot(e)].is_some() {
            return Phase::Failed;
        }
        match e {
            Endpoint::Client => self.client.phase(),
            Endpoint::Server => self.server.phase(),
        }
    }

    fn log(&mut self, line: String) {
        self.transcript
            .lines
            .push(format!("t={} {line}", fmt_t(self.clock.now())));
    }

    fn emit(&mut self, s: &str) {
        self.emitted.push(s.to_owned());
        self.log(format!("client emit {s:?}"));
    }

    /// Logs phase changes and re-arms the endpoint's timer.
    fn sync(&mut self, e: Endpoint) {
        let phase = self.phase(e);
        let old = self.phases[slot(e)];
        if phase != old {
            self.phases[slot(e)] = phase;
            self.log(format!(
                "{} state {} -> {}",
                e.name(),
                old.name(),
                phase.name()
            ));
        }
        let deadline = match (e, self.broken[slot(e)].is_some()) {
            (_, true) => None,
            (Endpoint::Client, _) => self.client.deadline(),
            (Endpoint::Server, _) => self.server.deadline(),
        };
        match deadline {
            Some(t) => self.clock.set_timer(e, t),
            None => self.clock.cancel_timer(e),
        }
    }

    fn send(&mut self, from: Endpoint, frame: &Frame) {
        let bytes = encode_frame(frame).expect("handshake frames are small");
        let index = self.net.messages_sent();
        self.log(format!(
            "send #{index} {} {} {} bytes {}",
            from.direction(),
            frame.ftype.name(),
            bytes.len(),
            hex::encode(&bytes)
        ));
        match self.net.send(from, self.clock.now(), bytes) {
            Fate::Dropped => self.log(format!("drop #{index}")),
            Fate::Corrupted { offset, .. } => self.log(format!("corrupt #{index} offset {offset}")),
            Fate::Queued { .. } => {}
        }
    }

    fn fail_client(&mut self, err: HandshakeError) {
        if err != HandshakeError::TimedOut {
            self.log(format!("client error {err}"));
        }
        self.emit(err.status_message());
        self.client_error = Some(err);
    }

    /// Sends CLIENT_HELLO at the current time.
    pub fn start(&mut self) {
        self.emit(CONTACTING_MESSAGE);
        let result = self.client.start(self.clock.now());
        match result {
            Ok(hello) => self.send(Endpoint::Client, &hello),
            Err(e) => self.fail_client(e),
        }
        self.sync(Endpoint::Client);
        self.sync(Endpoint::Server);
    }

    fn deliver(&mut self, msg: InFlight) {
        let to = match msg.from {
            Endpoint::Client => Endpoint::Server,
            Endpoint::Server => Endpoint::Client,
        };
        let mark = if msg.corrupted { " (corrupted)" } else { "" };
        self.log(format!(
            "deliver #{} {}{mark}",
            msg.index,
            msg.from.direction()
        ));
        if self.phase(to).is_terminal() {
            self.log(format!(
                "{} ignores #{} after {}",
                to.name(),
                msg.index,
                self.phase(to).name()
            ));
            return;
        }
        self.decoders[slot(to)].push(&msg.bytes);
        loop {
            if self.phase(to).is_terminal() {
                break;
            }
            let frame = match self.decoders[slot(to)].next_frame() {
                Ok(Some(f)) => f,
                Ok(None) => break,
                Err(e) => {
                    let err = HandshakeError::Protocol(e.to_string());
                    self.log(format!("{} framing error {e}", to.name()));
                    if to == Endpoint::Client {
                        self.fail_client(err.clone());
                    }
                    self.broken[slot(to)] = Some(err);
                    break;
                }
            };
            self.handle(to, &frame);
        }
        self.sync(to);
    }

    fn handle(&mut self, at: Endpoint, frame: &Frame) {
        let now = self.clock.now();
        match at {
            Endpoint::Client => match self.client.handle(frame, now) {
                Ok(Some(reply)) => self.send(Endpoint::Client, &reply),
                Ok(None) => {}
                Err(e) => self.fail_client(e),
            },
            Endpoint::Server => {
                let (known, unknown, user) = (&self.material, &self.unknown, &self.user);
                let result = self.server.handle(frame, now, |u| {
                    if u == user {
                        known.clone()
                    } else {
                        unknown.clone()
                    }
                });
                match result {
                    Ok((reply, event)) => {
                        self.log(format!("server event {event:?}"));
                        if let Some(reply) = reply {
                            self.send(Endpoint::Server, &reply);
                        }
                    }
                    Err(e) => self.log(format!("server error {e}")),
                }
            }
        }
    }

    fn fire_timer(&mut self, owner: Endpoint) {
        let now = self.clock.now();
        self.log(format!("{} timer", owner.name()));
        match owner {
            Endpoint::Client => {
                if let Err(e) = self.client.poll_timeout(now) {
                    self.fail_client(e);
                }
            }
            Endpoint::Server => {
                if let Err(e) = self.server.poll_timeout(now) {
                    self.log(format!("server error {e}"));
                }
            }
        }
        self.sync(owner);
    }

    /// The next event time, if anything is pending.
    pub fn next_event(&self) -> Option<Duration> {
        match (self.net.next_delivery(), self.clock.next_timer()) {
            (Some(d), Some((t, _))) => Some(d.min(t)),
            (d, t) => d.or(t.map(|(t, _)| t)),
        }
    }

    /// Processes everything due within `dt`, in timestamp order, then sets
    /// the clock to `now + dt`.
    pub fn advance(&mut self, dt: Duration) {
        let until = self.clock.now() + dt;
        while let Some(t) = self.next_event().filter(|&t| t <= until) {
            self.clock.advance_to(t);
            if let Some(msg) = self.net.pop_due(t) {
                self.deliver(msg);
                continue;
            }
            if let Some((at, owner)) = self.clock.next_timer() {
                if at <= t {
                    self.fire_timer(owner);
                }
            }
        }
        self.clock.advance_to(until);
    }

    /// Runs until no deliveries or timers remain.
    pub fn run_to_completion(&mut self) -> Outcome {
        while let Some(t) = self.next_event() {
            self.advance(t - self.clock.now());
        }
        let outcome = self.outcome();
        self.log(format!(
            "outcome {} client {} server {}",
            outcome.label(),
            outcome.client.name(),
            outcome.server.name()
        ));
        outcome
    }

    pub fn outcome(&self) -> Outcome {
        Outcome {
            client: self.client_phase(),
            server: self.server_phase(),
            client_error: self.client_error.clone(),
            finished_at: self.clock.now(),
            emitted: self.emitted.clone(),
        }
    }
}

/// Runs a whole scenario from a fresh simulation.
pub fn run_scenario(sc: &Scenario) -> (Outcome, Transcript) {
    let mut sim = Simulation::new(sc);
    sim.log(format!(
        "scenario {} latency_c2s={} latency_s2c={} timeout={}",
        sc.name,
        fmt_t(sc.latency_c2s),
        fmt_t(sc.latency_s2c),
        fmt_t(sc.timeout)
    ));
    sim.start();
    let outcome = sim.run_to_completion();
    (outcome, sim.transcript)
}

/// Parses and runs scenario text.
pub fn run_scenario_text(text: &str) -> Result<(Outcome, Transcript), ScenarioError> {
    Ok(run_scenario(&Scenario::parse(text)?))
}

/// A transport whose peer never answers. Each receive moves a shared
/// [`ManualClock`] forward by the full wait, so blocking drivers can be
/// timed out on virtual time.
#[derive(Debug, Clone)]
pub struct StalledTransport {
    clock: ManualClock,
    pub sent: Vec<Vec<u8>>,
}

impl StalledTransport {
    pub fn new(clock: ManualClock) -> Self {
        StalledTransport {
            clock,
            sent: Vec::new(),
        }
    }
}

impl Transport for StalledTransport {
    fn send(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.sent.push(bytes.to_vec());
        Ok(())
    }

    fn recv(&mut self, _buf: &mut [u8], timeout: Option<Duration>) -> io::Result<usize> {
        match timeout {
            Some(t) => {
                self.clock.advance(t);
                Err(ErrorKind::TimedOut.into())
            }
            None => Err(io::Error::new(
                ErrorKind::WouldBlock,
                "stalled transport without a timeout",
            )),
        }
    }
}

/// Frame type expected at each normal-path message index.
pub const HANDSHAKE_MESSAGES: [FrameType; 4] = [
    FrameType::ClientHello,
    FrameType::ServerChallenge,
    FrameType::ClientProof,
    FrameType::ServerResult,
];
