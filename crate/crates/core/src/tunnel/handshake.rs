//! Four-message challenge–response handshake, as I/O-free state machines.
//!
//! ```text
//! client                                             server
//!   CLIENT_HELLO     { client_nonce, username }   -->
//!                <-- SERVER_CHALLENGE { server_nonce, salt }
//!   CLIENT_PROOF     { cmac(K, "client" || cn || sn || username) } -->
//!                <-- SERVER_RESULT { ok, cmac(K, "server" || sn || cn) }
//! ```
//!
//! `K` is the user's vault verifier, which the client recomputes from the
//! password and the salt in the challenge. Neither proof reveals `K`, and
//! fresh nonces on both sides make recorded proofs useless.
//!
//! Every wait for the next message carries a deadline of `timeout` past the
//! moment the wait began. A message that arrives exactly at the deadline is
//! still accepted; [`ClientHandshake::poll_timeout`] at or past the deadline
//! aborts.

use std::time::Duration;

use thiserror::Error;

use super::frame::{Frame, FrameType};
use crate::aes::{Block, Key128};
use crate::cipher::{derive_key, Cmac, KeyPairSym, Label};
use crate::vault::{self, HandshakeMaterial, MAX_USERNAME_LEN};

/// Shown while the first handshake message is outstanding.
pub const CONTACTING_MESSAGE: &str = "contacting the security gateway";
/// The client's abort message when the gateway does not answer in time.
pub const TIMEOUT_MESSAGE: &str = "Secure VPN Connection terminated locally by the client";
/// The client's message for any other handshake failure.
pub const FAIL_MESSAGE: &str = "the connection is fail";

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

const RESULT_OK: u8 = 0x00;
const RESULT_FAIL: u8 = 0x01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Init,
    HelloSent,
    Challenged,
    ProofSent,
    Established,
    Failed,
    TimedOut,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Init => "INIT",
            Phase::HelloSent => "HELLO_SENT",
            Phase::Challenged => "CHALLENGED",
            Phase::ProofSent => "PROOF_SENT",
            Phase::Established => "ESTABLISHED",
            Phase::Failed => "FAILED",
            Phase::TimedOut => "TIMED_OUT",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Established | Phase::Failed | Phase::TimedOut)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HandshakeError {
    #[error("{TIMEOUT_MESSAGE}")]
    TimedOut,
    #[error("gateway rejected the credentials")]
    Rejected,
    #[error("gateway failed to prove knowledge of the credentials")]
    BadServerProof,
    #[error("client proof did not verify")]
    BadClientProof,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("peer closed the connection during the handshake")]
    PeerClosed,
    #[error("handshake is not expecting input in phase {0:?}")]
    WrongPhase(Phase),
}

impl HandshakeError {
    /// The user-facing line for this failure.
    pub fn status_message(&self) -> &'static str {
        match self {
            HandshakeError::TimedOut => TIMEOUT_MESSAGE,
            _ => FAIL_MESSAGE,
        }
    }
}

fn protocol(msg: impl Into<String>) -> HandshakeError {
    HandshakeError::Protocol(msg.into())
}

/// The four per-session keys.
#[derive(Clone, PartialEq, Eq)]
pub struct SessionKeys {
    pub enc_c2s: Key128,
    pub enc_s2c: Key128,
    pub mac_c2s: Key128,
    pub mac_s2c: Key128,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Client,
    Server,
}

impl SessionKeys {
    pub fn derive(secret: &Key128, client_nonce: &Block, server_nonce: &Block) -> Self {
        let d = |label: Label| derive_key(secret, &label, client_nonce, server_nonce);
        SessionKeys {
            enc_c2s: d(Label::EncC2s),
            enc_s2c: d(Label::EncS2c),
            mac_c2s: d(Label::MacC2s),
            mac_s2c: d(Label::MacS2c),
        }
    }

    /// `(send, receive)` key pairs for one side of the channel.
    pub fn directional(&self, role: Role) -> (KeyPairSym, KeyPairSym) {
        let c2s = KeyPairSym::new(self.enc_c2s, self.mac_c2s).expect("labels differ");
        let s2c = KeyPairSym::new(self.enc_s2c, self.mac_s2c).expect("labels differ");
        match role {
            Role::Client => (c2s, s2c),
            Role::Server => (s2c, c2s),
        }
    }

    pub fn all(&self) -> [Key128; 4] {
        [self.enc_c2s, self.enc_s2c, self.mac_c2s, self.mac_s2c]
    }
}

impl std::fmt::Debug for SessionKeys {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SessionKeys(..)")
    }
}

pub fn client_proof(
    secret: &Key128,
    client_nonce: &Block,
    server_nonce: &Block,
    username: &str,
) -> Block {
    Cmac::new(secret).mac_parts(&[b"client", client_nonce, server_nonce, username.as_bytes()])
}

pub fn server_proof(secret: &Key128, client_nonce: &Block, server_nonce: &Block) -> Block {
    Cmac::new(secret).mac_parts(&[b"server", server_nonce, client_nonce])
}

pub fn encode_hello(client_nonce: &Block, username: &str) -> Vec<u8> {
    let mut out = client_nonce.to_vec();
    out.push(username.len() as u8);
    out.extend_from_slice(username.as_bytes());
    out
}

pub fn decode_hello(payload: &[u8]) -> Result<(Block, String), HandshakeError> {
    if payload.len() < 17 {
        return Err(protocol("short CLIENT_HELLO"));
    }
    let nonce: Block = payload[..16].try_into().unwrap();
    let len = payload[16] as usize;
    if len == 0 || len > MAX_USERNAME_LEN || payload.len() != 17 + len {
        return Err(protocol("bad username length in CLIENT_HELLO"));
    }
    let username = std::str::from_utf8(&payload[17..])
        .map_err(|_| protocol("username is not UTF-8"))?
        .to_owned();
    Ok((nonce, username))
}

fn expect(frame: &Frame, ftype: FrameType, len: usize) -> Result<(), HandshakeError> {
    if frame.ftype == FrameType::Close {
        return Err(HandshakeError::PeerClosed);
    }
    if frame.ftype != ftype {
        return Err(protocol(format!(
            "expected {}, got {}",
            ftype.name(),
            frame.ftype.name()
        )));
    }
    if frame.payload.len() != len {
        return Err(protocol(format!(
            "{} payload of {} bytes",
            ftype.name(),
            frame.payload.len()
        )));
    }
    Ok(())
}

/// Client side of the handshake.
pub struct ClientHandshake {
    phase: Phase,
    username: String,
    password: Vec<u8>,
    client_nonce: Block,
    server_nonce: Block,
    secret: Option<Key128>,
    timeout: Duration,
    wait_started: Duration,
    keys: Option<SessionKeys>,
}

impl ClientHandshake {
    pub fn new(username: &str, password: &[u8], client_nonce: Block, timeout: Duration) -> Self {
        ClientHandshake {
            phase: Phase::Init,
            username: username.to_owned(),
            password: password.to_vec(),
            client_nonce,
            server_nonce: [0; 16],
            secret: None,
            timeout,
            wait_started: Duration::ZERO,
            keys: None,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn username(&self) -> &str {
        &self.username
    }

    pub fn client_nonce(&self) -> &Block {
        &self.client_nonce
    }

    pub fn server_nonce(&self) -> &Block {
        &self.server_nonce
    }

    pub fn keys(&self) -> Option<&SessionKeys> {
        self.keys.as_ref()
    }

    /// When the current wait expires, if one is in progress.
    pub fn deadline(&self) -> Option<Duration> {
        matches!(self.phase, Phase::HelloSent | Phase::ProofSent)
            .then(|| self.wait_started + self.timeout)
    }

    fn fail(&mut self, err: HandshakeError) -> HandshakeError {
        self.phase = match err {
            HandshakeError::TimedOut => Phase::TimedOut,
            _ => Phase::Failed,
        };
        self.password.clear();
        err
    }

    pub fn start(&mut self, now: Duration) -> Result<Frame, HandshakeError> {
        if self.phase != Phase::Init {
            return Err(HandshakeError::WrongPhase(self.phase));
        }
        if self.username.is_empty() || self.username.len() > MAX_USERNAME_LEN {
            return Err(self.fail(protocol("username must be 1..=64 bytes")));
        }
        if self.password.is_empty() {
            return Err(self.fail(protocol("password must not be empty")));
        }
        self.phase = Phase::HelloSent;
        self.wait_started = now;
        Ok(Frame::new(
            FrameType::ClientHello,
            encode_hello(&self.client_nonce, &self.username),
        ))
    }

    /// Aborts if the current wait has run its full length.
    pub fn poll_timeout(&mut self, now: Duration) -> Result<(), HandshakeError> {
        match self.deadline() {
            Some(deadline) if now >= deadline => Err(self.fail(HandshakeError::TimedOut)),
            _ => Ok(()),
        }
    }

    /// Feeds one received frame. Returns the frame to send in reply, if any.
    pub fn handle(
        &mut self,
        frame: &Frame,
        now: Duration,
    ) -> Result<Option<Frame>, HandshakeError> {
        if let Some(deadline) = self.deadline() {
            if now > deadline {
                return Err(self.fail(HandshakeError::TimedOut));
            }
        }
        match self.phase {
            Phase::HelloSent => {
                expect(frame, FrameType::ServerChallenge, 32).map_err(|e| self.fail(e))?;
                self.phase = Phase::Challenged;
                self.server_nonce = frame.payload[..16].try_into().unwrap();
                let salt: Block = frame.payload[16..].try_into().unwrap();
                let verifier = vault::password_verifier(&self.username, &self.password, &salt)
                    .map_err(|e| self.fail(protocol(e.to_string())))?;
                self.password.clear();
                let secret = Key128::new(verifier);
                let proof = client_proof(
                    &secret,
                    &self.client_nonce,
                    &self.server_nonce,
                    &self.username,
                );
                self.secret = Some(secret);
                self.phase = Phase::ProofSent;
                self.wait_started = now;
                Ok(Some(Frame::new(FrameType::ClientProof, proof.to_vec())))
            }
            Phase::ProofSent => {
                if frame.ftype == FrameType::ServerResult && frame.payload == [RESULT_FAIL] {
                    return Err(self.fail(HandshakeError::Rejected));
                }
                expect(frame, FrameType::ServerResult, 17).map_err(|e| self.fail(e))?;
                let secret = self.secret.expect("set when the proof was sent");
                let expected = server_proof(&secret, &self.client_nonce, &self.server_nonce);
                if frame.payload[0] != RESULT_OK
                    || !crate::cipher::ct_eq(&frame.payload[1..], &expected)
                {
                    return Err(self.fail(HandshakeError::BadServerProof));
                }
                self.keys = Some(SessionKeys::derive(
                    &secret,
                    &self.client_nonce,
                    &self.server_nonce,
                ));
                self.phase = Phase::Established;
                Ok(None)
            }
            other => Err(HandshakeError::WrongPhase(other)),
        }
    }
}

/// What the server learned from a message, for auditing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServerEvent {
    Hello { username: String },
    Authenticated { username: String },
    Rejected { username: String },
}

/// Server side of the handshake.
pub struct ServerHandshake {
    phase: Phase,
    server_nonce: Block,
    client_nonce: Block,
    username: String,
    material: Option<HandshakeMaterial>,
    timeout: Duration,
    wait_started: Duration,
    keys: Option<SessionKeys>,
}

impl ServerHandshake {
    /// Starts waiting for CLIENT_HELLO at `now`.
    pub fn new(server_nonce: Block, timeout: Duration, now: Duration) -> Self {
        ServerHandshake {
            phase: Phase::Init,
            server_nonce,
            client_nonce: [0; 16],
            username: String::new(),
            material: None,
            timeout,
            wait_started: now,
            keys: None,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn username(&self) -> &str {
        &self.username
    }

    pub fn keys(&self) -> Option<&SessionKeys> {
        self.keys.as_ref()
    }

    pub fn deadline(&self) -> Option<Duration> {
        matches!(self.phase, Phase::Init | Phase::Challenged)
            .then(|| self.wait_started + self.timeout)
    }

    pub fn poll_timeout(&mut self, now: Duration) -> Result<(), HandshakeError> {
        match self.deadline() {
            Some(deadline) if now >= deadline => {
                self.phase = Phase::TimedOut;
                Err(HandshakeError::TimedOut)
            }
            _ => Ok(()),
        }
    }

    fn fail(&mut self, err: HandshakeError) -> HandshakeError {
        self.phase = if err == HandshakeError::TimedOut {
            Phase::TimedOut
        } else {
            Phase::Failed
        };
        err
    }

    /// Feeds one received frame; `lookup` supplies salt and secret for the
    /// claimed username. Returns the reply frame and an audit-worthy event.
    /// A rejected proof still yields a reply (SERVER_RESULT fail) and leaves
    /// the machine in `Failed`.
    pub fn handle(
        &mut self,
        frame: &Frame,
        now: Duration,
        lookup: impl FnOnce(&str) -> HandshakeMaterial,
    ) -> Result<(Option<Frame>, ServerEvent), HandshakeError> {
        if let Some(deadline) = self.deadline() {
            if now > deadline {
                return Err(self.fail(HandshakeError::TimedOut));
            }
        }
        match self.phase {
            Phase::Init => {
                if frame.ftype != FrameType::ClientHello {
                    return Err(self.fail(protocol(format!(
                        "expected CLIENT_HELLO, got {}",
                        frame.ftype.name()
                    ))));
                }
                let (nonce, username) = decode_hello(&frame.payload).map_err(|e| self.fail(e))?;
                let material = lookup(&username);
                let mut payload = self.server_nonce.to_vec();
                payload.extend_from_slice(&material.salt);
                self.client_nonce = nonce;
                self.username = username.clone();
                self.material = Some(material);
                self.phase = Phase::Challenged;
                self.wait_started = now;
                Ok((
                    Some(Frame::new(FrameType::ServerChallenge, payload)),
                    ServerEvent::Hello { username },
                ))
            }
            Phase::Challenged => {
                expect(frame, FrameType::ClientProof, 16).map_err(|e| self.fail(e))?;
                let material = self.material.take().expect("set on hello");
                let expected = client_proof(
                    &material.secret,
                    &self.client_nonce,
                    &self.server_nonce,
                    &self.username,
                );
                let username = self.username.clone();
                if !material.known || !crate::cipher::ct_eq(&expected, &frame.payload) {
                    self.phase = Phase::Failed;
                    let reply = Frame::new(FrameType::ServerResult, vec![RESULT_FAIL]);
                    return Ok((Some(reply), ServerEvent::Rejected { username }));
                }
                let mut payload = vec![RESULT_OK];
                payload.extend_from_slice(&server_proof(
                    &material.secret,
                    &self.client_nonce,
                    &self.server_nonce,
                ));
                self.keys = Some(SessionKeys::derive(
                    &material.secret,
                    &self.client_nonce,
                    &self.server_nonce,
                ));
                self.phase = Phase::Established;
                Ok((
                    Some(Frame::new(FrameType::ServerResult, payload)),
                    ServerEvent::Authenticated { username },
                ))
            }
            other => Err(HandshakeError::WrongPhase(other)),
        }
    }
}
