//! The authenticated tunnel: framing, the handshake machines, the sealed
//! record layer, and blocking drivers that run them over a [`Transport`].

pub mod channel;
pub mod frame;
pub mod handshake;
pub mod transport;

use std::io::{self, ErrorKind};
use std::sync::Mutex;
use std::time::Duration;

use log::{debug, info, warn};
use rand::rngs::OsRng;
use rand::RngCore;
use thiserror::Error;

use crate::clock::Clock;
use crate::vault::{AuditAction, Vault};

pub use channel::{ChannelError, Inbound, SecureChannel};
pub use frame::{decode_frame, encode_frame, Decoded, Frame, FrameDecoder, FrameError, FrameType};
pub use handshake::{
    ClientHandshake, HandshakeError, Phase, Role, ServerEvent, ServerHandshake, SessionKeys,
    CONTACTING_MESSAGE, DEFAULT_TIMEOUT, FAIL_MESSAGE, TIMEOUT_MESSAGE,
};
pub use transport::{memory_pair, Direction, MemoryTransport, Sniffer, Transport, WireLog};

/// Largest plaintext that fits in one sealed frame.
pub const MAX_RECORD_PLAINTEXT: usize = frame::MAX_PAYLOAD - 64;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("peer closed the session")]
    PeerClosed,
    #[error("protocol error: {0}")]
    Frame(#[from] FrameError),
    #[error("record of {0} bytes exceeds the frame limit")]
    TooLarge(usize),
    #[error("transport: {0}")]
    Io(#[from] io::Error),
}

enum ReadResult {
    Frame(Frame),
    TimedOut,
    Closed,
}

/// Reads the next whole frame, waiting until `deadline` on `clock`.
fn read_frame<T: Transport>(
    transport: &mut T,
    decoder: &mut FrameDecoder,
    deadline: Option<Duration>,
    clock: &dyn Clock,
) -> Result<ReadResult, SessionError> {
    let mut buf = [0u8; 16 * 1024];
    loop {
        if let Some(frame) = decoder.next_frame()? {
            return Ok(ReadResult::Frame(frame));
        }
        let wait = match deadline {
            Some(d) => match d.checked_sub(clock.now()) {
                Some(left) if !left.is_zero() => Some(left),
                _ => return Ok(ReadResult::TimedOut),
            },
            None => None,
        };
        match transport.recv(&mut buf, wait) {
            Ok(0) => return Ok(ReadResult::Closed),
            Ok(n) => decoder.push(&buf[..n]),
            Err(e) if e.kind() == ErrorKind::TimedOut => return Ok(ReadResult::TimedOut),
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) if is_disconnect(&e) => return Ok(ReadResult::Closed),
            Err(e) => return Err(e.into()),
        }
    }
}

fn is_disconnect(e: &io::Error) -> bool {
    matches!(
        e.kind(),
        ErrorKind::ConnectionReset
            | ErrorKind::ConnectionAborted
            | ErrorKind::BrokenPipe
            | ErrorKind::UnexpectedEof
    )
}

fn send_frame<T: Transport>(transport: &mut T, frame: &Frame) -> Result<(), SessionError> {
    transport.send(&encode_frame(frame)?)?;
    Ok(())
}

/// Unauthenticated close notice, used when no channel keys exist (yet).
fn send_plain_close<T: Transport>(transport: &mut T) {
    let _ = send_frame(transport, &Frame::new(FrameType::Close, Vec::new()));
    transport.close();
}

/// An established tunnel over a blocking transport.
pub struct Session<T: Transport> {
    transport: T,
    decoder: FrameDecoder,
    channel: SecureChannel,
    username: String,
    role: Role,
}

impl<T: Transport> std::fmt::Debug for Session<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("username", &self.username)
            .field("role", &self.role)
            .field("send_seq", &self.channel.send_seq())
            .field("recv_seq", &self.channel.recv_seq())
            .finish()
    }
}

impl<T: Transport> Session<T> {
    pub fn new(
        transport: T,
        decoder: FrameDecoder,
        keys: &SessionKeys,
        role: Role,
        username: String,
    ) -> Self {
        Session {
            transport,
            decoder,
            channel: SecureChannel::new(keys, role),
            username,
            role,
        }
    }

    /// Stage-one identity.
    pub fn username(&self) -> &str {
        &self.username
    }

    pub fn channel(&self) -> &SecureChannel {
        &self.channel
    }

    pub fn send_data(&mut self, plaintext: &[u8]) -> Result<(), SessionError> {
        if plaintext.len() > MAX_RECORD_PLAINTEXT {
            return Err(SessionError::TooLarge(plaintext.len()));
        }
        let frame = self
            .channel
            .seal(FrameType::AppData, plaintext, &mut OsRng)?;
        send_frame(&mut self.transport, &frame)
    }

    pub fn recv_data(&mut self) -> Result<Vec<u8>, SessionError> {
        loop {
            if let Some(data) = self.recv_data_timeout(None)? {
                return Ok(data);
            }
        }
    }

    /// Like [`Session::recv_data`] but gives up after `timeout`, returning
    /// `None`. A partially received frame stays buffered.
    pub fn recv_data_timeout(
        &mut self,
        timeout: Option<Duration>,
    ) -> Result<Option<Vec<u8>>, SessionError> {
        let clock = crate::clock::SystemClock::new();
        let result = read_frame(&mut self.transport, &mut self.decoder, timeout, &clock);
        let frame = match result {
            Ok(ReadResult::Frame(f)) => f,
            Ok(ReadResult::TimedOut) => return Ok(None),
            Ok(ReadResult::Closed) => return Err(SessionError::PeerClosed),
            Err(e) => {
                self.abort();
                return Err(e);
            }
        };
        if frame.ftype == FrameType::Close && frame.payload.is_empty() {
            self.transport.close();
            return Err(SessionError::PeerClosed);
        }
        match self.channel.open(&frame) {
            Ok(Inbound::Data(d)) => Ok(Some(d)),
            Ok(Inbound::Close) => {
                self.transport.close();
                Err(SessionError::PeerClosed)
            }
            Err(e) => {
                warn!("terminating session for {}: {e}", self.username);
                self.abort();
                Err(e.into())
            }
        }
    }

    fn abort(&mut self) {
        send_plain_close(&mut self.transport);
    }

    /// Sends an authenticated CLOSE and shuts the transport.
    pub fn close(mut self) -> Result<(), SessionError> {
        let result = if self.channel.is_terminated() {
            Ok(())
        } else {
            self.channel
                .seal(FrameType::Close, &[], &mut OsRng)
                .map_err(SessionError::from)
                .and_then(|f| send_frame(&mut self.transport, &f))
        };
        self.transport.close();
        result
    }

    pub fn into_transport(self) -> T {
        self.transport
    }
}

/// Runs the client handshake. `status` receives user-facing progress lines.
pub fn client_connect<T: Transport>(
    mut transport: T,
    username: &str,
    password: &[u8],
    clock: &dyn Clock,
    timeout: Duration,
    status: &mut dyn FnMut(&str),
) -> Result<Session<T>, HandshakeError> {
    let mut nonce = [0u8; 16];
    OsRng.fill_bytes(&mut nonce);
    let mut hs = ClientHandshake::new(username, password, nonce, timeout);
    status(CONTACTING_MESSAGE);
    let hello = hs.start(clock.now())?;
    if send_frame(&mut transport, &hello).is_err() {
        return Err(HandshakeError::PeerClosed);
    }
    let mut decoder = FrameDecoder::new();
    while hs.phase() != Phase::Established {
        let outcome = read_frame(&mut transport, &mut decoder, hs.deadline(), clock);
        let result = match outcome {
            Ok(ReadResult::Frame(frame)) => hs.handle(&frame, clock.now()),
            Ok(ReadResult::TimedOut) => {
                let deadline = hs.deadline().unwrap_or_default();
                hs.poll_timeout(clock.now().max(deadline)).map(|_| None)
            }
            Ok(ReadResult::Closed) => Err(HandshakeError::PeerClosed),
            Err(e) => Err(HandshakeError::Protocol(e.to_string())),
        };
        match result {
            Ok(Some(reply)) => {
                if send_frame(&mut transport, &reply).is_err() {
                    return Err(HandshakeError::PeerClosed);
                }
            }
            Ok(None) => {}
            Err(err) => {
                debug!("client handshake for {username} failed: {err}");
                send_plain_close(&mut transport);
                return Err(err);
            }
        }
    }
    let keys = hs.keys().expect("established").clone();
    Ok(Session::new(
        transport,
        decoder,
        &keys,
        Role::Client,
        username.to_owned(),
    ))
}

/// Runs the gateway side of the handshake against `vault`, auditing the
/// connection attempt and its outcome.
pub fn server_accept<T: Transport>(
    mut transport: T,
    vault: &Mutex<Vault>,
    clock: &dyn Clock,
    timeout: Duration,
) -> Result<Session<T>, HandshakeError> {
    let mut nonce = [0u8; 16];
    OsRng.fill_bytes(&mut nonce);
    let mut hs = ServerHandshake::new(nonce, timeout, clock.now());
    let mut decoder = FrameDecoder::new();
    let audit = |actor: &str, action: AuditAction, detail: &str| {
        let mut v = vault.lock().unwrap();
        if let Err(e) = v
            .audit_mut()
            .record(clock.unix_time(), actor, action, detail)
        {
            warn!("audit append failed: {e}");
        }
    };
    while hs.phase() != Phase::Established {
        let outcome = read_frame(&mut transport, &mut decoder, hs.deadline(), clock);
        let result = match outcome {
            Ok(ReadResult::Frame(frame)) => hs.handle(&frame, clock.now(), |u| {
                vault.lock().unwrap().handshake_material(u)
            }),
            Ok(ReadResult::TimedOut) => {
                let deadline = hs.deadline().unwrap_or_default();
                hs.poll_timeout(clock.now().max(deadline))
                    .map(|_| unreachable!())
            }
            Ok(ReadResult::Closed) => Err(HandshakeError::PeerClosed),
            Err(e) => Err(HandshakeError::Protocol(e.to_string())),
        };
        match result {
            Ok((reply, event)) => {
                match &event {
                    ServerEvent::Hello { username } => {
                        audit(username, AuditAction::Connect, "stage-1 hello")
                    }
                    ServerEvent::Authenticated { username } => {
                        info!("stage-1 authenticated {username}");
                        audit(username, AuditAction::Auth1Ok, "tunnel established")
                    }
                    ServerEvent::Rejected { username } => {
                        info!("stage-1 rejected {username}");
                        audit(username, AuditAction::Auth1Fail, "bad proof")
                    }
                }
                if let Some(reply) = reply {
                    let _ = send_frame(&mut transport, &reply);
                }
                if hs.phase() == Phase::Failed {
                    transport.close();
                    return Err(HandshakeError::BadClientProof);
                }
            }
            Err(err) => {
                let who = if hs.username().is_empty() {
                    "-"
                } else {
                    hs.username()
                };
                if hs.phase() != Phase::Init || !hs.username().is_empty() {
                    audit(who, AuditAction::Auth1Fail, &err.to_string());
                }
                debug!("server handshake failed: {err}");
                send_plain_close(&mut transport);
                return Err(err);
            }
        }
    }
    let keys = hs.keys().expect("established").clone();
    let username = hs.username().to_owned();
    Ok(Session::new(
        transport,
        decoder,
        &keys,
        Role::Server,
        username,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aes::Key128;
    use crate::clock::SystemClock;
    use crate::vault::AuthzLevel;
    use std::sync::Arc;
    use std::thread;

    fn shared_vault() -> Arc<Mutex<Vault>> {
        let mut v = Vault::create(&Key128::new([3; 16]));
        v.add_user("admin", "alice", b"pw", AuthzLevel::Admin, 0)
            .unwrap();
        Arc::new(Mutex::new(v))
    }

    #[test]
    fn loopback_echo() {
        let vault = shared_vault();
        let (c, s) = memory_pair();
        let v2 = vault.clone();
        let server = thread::spawn(move || {
            let mut session = server_accept(s, &v2, &SystemClock::new(), DEFAULT_TIMEOUT).unwrap();
            while let Ok(msg) = session.recv_data() {
                session.send_data(&msg).unwrap();
            }
        });
        let mut lines = Vec::new();
        let mut session = client_connect(
            c,
            "alice",
            b"pw",
            &SystemClock::new(),
            DEFAULT_TIMEOUT,
            &mut |s| lines.push(s.to_owned()),
        )
        .unwrap();
        assert_eq!(lines, [CONTACTING_MESSAGE]);
        for i in 0..50u32 {
            let msg = vec![i as u8; i as usize * 7];
            session.send_data(&msg).unwrap();
            assert_eq!(session.recv_data().unwrap(), msg);
        }
        session.close().unwrap();
        server.join().unwrap();
        let actions: Vec<_> = vault
            .lock()
            .unwrap()
            .audit()
            .entries()
            .iter()
            .map(|e| e.fields.action)
            .collect();
        assert_eq!(
            actions,
            [
                AuditAction::AddUser,
                AuditAction::Connect,
                AuditAction::Auth1Ok
            ]
        );
    }

    #[test]
    fn wrong_password_fails_and_is_audited() {
        let vault = shared_vault();
        let (c, s) = memory_pair();
        let v2 = vault.clone();
        let server = thread::spawn(move || {
            server_accept(s, &v2, &SystemClock::new(), DEFAULT_TIMEOUT).map(|_| ())
        });
        let err = client_connect(
            c,
            "alice",
            b"bad",
            &SystemClock::new(),
            DEFAULT_TIMEOUT,
            &mut |_| {},
        )
        .unwrap_err();
        assert_eq!(err, HandshakeError::Rejected);
        assert_eq!(err.status_message(), FAIL_MESSAGE);
        assert_eq!(
            server.join().unwrap().unwrap_err(),
            HandshakeError::BadClientProof
        );
        let last = vault
            .lock()
            .unwrap()
            .audit()
            .entries()
            .last()
            .unwrap()
            .fields
            .action;
        assert_eq!(last, AuditAction::Auth1Fail);
    }

    #[test]
    fn unknown_user_looks_like_wrong_password() {
        let vault = shared_vault();
        let (c, s) = memory_pair();
        let v2 = vault.clone();
        let server = thread::spawn(move || {
            server_accept(s, &v2, &SystemClock::new(), DEFAULT_TIMEOUT).map(|_| ())
        });
        let err = client_connect(
            c,
            "ghost",
            b"pw",
            &SystemClock::new(),
            DEFAULT_TIMEOUT,
            &mut |_| {},
        )
        .unwrap_err();
        assert_eq!(err, HandshakeError::Rejected);
        assert!(server.join().unwrap().is_err());
    }

    #[test]
    fn real_clock_timeout_against_silent_peer() {
        let (c, _s) = memory_pair();
        let err = client_connect(
            c,
            "alice",
            b"pw",
            &SystemClock::new(),
            Duration::from_millis(50),
            &mut |_| {},
        )
        .unwrap_err();
        assert_eq!(err, HandshakeError::TimedOut);
        assert_eq!(err.to_string(), TIMEOUT_MESSAGE);
    }
}
