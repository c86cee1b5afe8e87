//! Post-handshake record layer. Every frame is an envelope whose
//! associated data is `seq(8, BE) || ftype`, so a replayed, dropped or
//! reordered frame fails authentication at the receiver.

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use super::frame::{Frame, FrameType};
use super::handshake::{Role, SessionKeys};
use crate::cipher::{self, KeyPairSym};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChannelError {
    #[error("session terminated: {0}")]
    Terminated(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Inbound {
    Data(Vec<u8>),
    Close,
}

#[derive(Debug)]
pub struct SecureChannel {
    send_keys: KeyPairSym,
    recv_keys: KeyPairSym,
    send_seq: u64,
    recv_seq: u64,
    terminated: bool,
}

fn aad(seq: u64, ftype: FrameType) -> [u8; 9] {
    let mut out = [0u8; 9];
    out[..8].copy_from_slice(&seq.to_be_bytes());
    out[8] = ftype as u8;
    out
}

impl SecureChannel {
    pub fn new(keys: &SessionKeys, role: Role) -> Self {
        let (send_keys, recv_keys) = keys.directional(role);
        SecureChannel {
            send_keys,
            recv_keys,
            send_seq: 0,
            recv_seq: 0,
            terminated: false,
        }
    }

    pub fn send_seq(&self) -> u64 {
        self.send_seq
    }

    pub fn recv_seq(&self) -> u64 {
        self.recv_seq
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    /// Seals `plaintext` into an APP_DATA (or CLOSE) frame.
    pub fn seal<R: RngCore + CryptoRng>(
        &mut self,
        ftype: FrameType,
        plaintext: &[u8],
        rng: &mut R,
    ) -> Result<Frame, ChannelError> {
        if self.terminated {
            return Err(ChannelError::Terminated("channel already closed"));
        }
        if !ftype.is_sealed() {
            return Err(ChannelError::Terminated(
                "handshake frame type on an established channel",
            ));
        }
        let env = cipher::seal(plaintext, &self.send_keys, &aad(self.send_seq, ftype), rng);
        self.send_seq += 1;
        if ftype == FrameType::Close {
            self.terminated = true;
        }
        Ok(Frame::new(ftype, env.to_bytes()))
    }

    /// Opens a received frame. Any failure terminates the channel.
    pub fn open(&mut self, frame: &Frame) -> Result<Inbound, ChannelError> {
        if self.terminated {
            return Err(ChannelError::Terminated("channel already closed"));
        }
        if !frame.ftype.is_sealed() {
            self.terminated = true;
            return Err(ChannelError::Terminated("unexpected handshake frame"));
        }
        match cipher::open_bytes(
            &frame.payload,
            &self.recv_keys,
            &aad(self.recv_seq, frame.ftype),
        ) {
            Ok(plain) => {
                self.recv_seq += 1;
                if frame.ftype == FrameType::Close {
                    self.terminated = true;
                    Ok(Inbound::Close)
                } else {
                    Ok(Inbound::Data(plain))
                }
            }
            Err(_) => {
                self.terminated = true;
                Err(ChannelError::Terminated("frame failed authentication"))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aes::Key128;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn pair() -> (SecureChannel, SecureChannel) {
        let keys = SessionKeys::derive(&Key128::new([8; 16]), &[1; 16], &[2; 16]);
        (
            SecureChannel::new(&keys, Role::Client),
            SecureChannel::new(&keys, Role::Server),
        )
    }

    #[test]
    fn replay_is_fatal() {
        let mut rng = StdRng::seed_from_u64(1);
        let (mut c, mut s) = pair();
        let f = c.seal(FrameType::AppData, b"hello", &mut rng).unwrap();
        assert_eq!(s.open(&f).unwrap(), Inbound::Data(b"hello".to_vec()));
        assert!(s.open(&f).is_err());
        assert!(s.is_terminated());
    }

    #[test]
    fn directions_are_separate() {
        let mut rng = StdRng::seed_from_u64(2);
        let (mut c, _) = pair();
        let f = c.seal(FrameType::AppData, b"x", &mut rng).unwrap();
        // a client frame reflected back to the client does not open
        let (mut c2, _) = pair();
        assert!(c2.open(&f).is_err());
    }

    #[test]
    fn type_is_bound() {
        let mut rng = StdRng::seed_from_u64(3);
        let (mut c, mut s) = pair();
        let mut f = c.seal(FrameType::AppData, b"x", &mut rng).unwrap();
        f.ftype = FrameType::Close;
        assert!(s.open(&f).is_err());
    }

    #[test]
    fn close_terminates_both_ends() {
        let mut rng = StdRng::seed_from_u64(4);
        let (mut c, mut s) = pair();
        let f = c.seal(FrameType::Close, b"", &mut rng).unwrap();
        assert!(c.is_terminated());
        assert_eq!(s.open(&f).unwrap(), Inbound::Close);
        assert!(s.seal(FrameType::AppData, b"late", &mut rng).is_err());
    }
}
