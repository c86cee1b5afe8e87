//! Wire framing: `"CG" || 0x01 || ftype || length(4, BE) || payload`.

use thiserror::Error;

pub const FRAME_MAGIC: [u8; 2] = *b"CG";
pub const FRAME_VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 8;
pub const MAX_PAYLOAD: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameType {
    ClientHello = 0x01,
    ServerChallenge = 0x02,
    ClientProof = 0x03,
    ServerResult = 0x04,
    AppData = 0x81,
    Close = 0x82,
}

impl FrameType {
    pub fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            0x01 => FrameType::ClientHello,
            0x02 => FrameType::ServerChallenge,
            0x03 => FrameType::ClientProof,
            0x04 => FrameType::ServerResult,
            0x81 => FrameType::AppData,
            0x82 => FrameType::Close,
            _ => return None,
        })
    }

    /// Types at or above 0x80 carry an envelope.
    pub fn is_sealed(self) -> bool {
        self as u8 >= 0x80
    }

    pub fn name(self) -> &'static str {
        match self {
            FrameType::ClientHello => "CLIENT_HELLO",
            FrameType::ServerChallenge => "SERVER_CHALLENGE",
            FrameType::ClientProof => "CLIENT_PROOF",
            FrameType::ServerResult => "SERVER_RESULT",
            FrameType::AppData => "APP_DATA",
            FrameType::Close => "CLOSE",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("bad frame magic {0:02x?}")]
    BadMagic([u8; 2]),
    #[error("unsupported frame version {0:#04x}")]
    BadVersion(u8),
    #[error("unknown frame type {0:#04x}")]
    UnknownType(u8),
    #[error("frame payload of {0} bytes exceeds the 1 MiB limit")]
    TooLong(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub ftype: FrameType,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(ftype: FrameType, payload: Vec<u8>) -> Self {
        Frame { ftype, payload }
    }
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, FrameError> {
    if frame.payload.len() > MAX_PAYLOAD {
        return Err(FrameError::TooLong(frame.payload.len()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + frame.payload.len());
    out.extend_from_slice(&FRAME_MAGIC);
    out.push(FRAME_VERSION);
    out.push(frame.ftype as u8);
    out.extend_from_slice(&(frame.payload.len() as u32).to_be_bytes());
    out.extend_from_slice(&frame.payload);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decoded {
    /// A frame and the number of input bytes it used.
    Frame(Frame, usize),
    NeedMore,
}

/// Decodes one frame from the front of `bytes`. Header errors are reported
/// as soon as the offending byte is available.
pub fn decode_frame(bytes: &[u8]) -> Result<Decoded, FrameError> {
    if bytes.len() >= 2 && bytes[..2] != FRAME_MAGIC {
        return Err(FrameError::BadMagic([bytes[0], bytes[1]]));
    }
    if bytes.len() >= 3 && bytes[2] != FRAME_VERSION {
        return Err(FrameError::BadVersion(bytes[2]));
    }
    if bytes.len() < HEADER_LEN {
        return Ok(Decoded::NeedMore);
    }
    let ftype = FrameType::from_u8(bytes[3]).ok_or(FrameError::UnknownType(bytes[3]))?;
    let len = u32::from_be_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(FrameError::TooLong(len));
    }
    if bytes.len() < HEADER_LEN + len {
        return Ok(Decoded::NeedMore);
    }
    let payload = bytes[HEADER_LEN..HEADER_LEN + len].to_vec();
    Ok(Decoded::Frame(Frame { ftype, payload }, HEADER_LEN + len))
}

/// Accumulates stream bytes and yields whole frames.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn next_frame(&mut self) -> Result<Option<Frame>, FrameError> {
        match decode_frame(&self.buf)? {
            Decoded::Frame(frame, used) => {
                self.buf.drain(..used);
                Ok(Some(frame))
            }
            Decoded::NeedMore => Ok(None),
        }
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn close_frame_bytes() {
        let bytes = encode_frame(&Frame::new(FrameType::Close, vec![])).unwrap();
        assert_eq!(bytes, [0x43, 0x47, 0x01, 0x82, 0, 0, 0, 0]);
    }

    #[test]
    fn short_input_needs_more() {
        let bytes = encode_frame(&Frame::new(FrameType::ClientProof, vec![1; 16])).unwrap();
        assert_eq!(decode_frame(&bytes[..7]), Ok(Decoded::NeedMore));
        assert_eq!(decode_frame(&bytes[..20]), Ok(Decoded::NeedMore));
        let mut dec = FrameDecoder::new();
        dec.push(&bytes[..7]);
        assert_eq!(dec.next_frame(), Ok(None));
        assert_eq!(dec.buffered(), 7);
        dec.push(&bytes[7..]);
        assert_eq!(dec.next_frame().unwrap().unwrap().payload, vec![1; 16]);
        assert_eq!(dec.buffered(), 0);
    }

    #[test]
    fn header_errors() {
        assert_eq!(decode_frame(b"XG"), Err(FrameError::BadMagic(*b"XG")));
        assert_eq!(
            decode_frame(&[0x43, 0x47, 0x02]),
            Err(FrameError::BadVersion(2))
        );
        assert_eq!(
            decode_frame(&[0x43, 0x47, 1, 0x05, 0, 0, 0, 0]),
            Err(FrameError::UnknownType(5))
        );
        let too_long = [0x43, 0x47, 1, 0x81, 0x00, 0x10, 0x00, 0x01];
        assert_eq!(
            decode_frame(&too_long),
            Err(FrameError::TooLong(MAX_PAYLOAD + 1))
        );
        assert!(encode_frame(&Frame::new(FrameType::AppData, vec![0; MAX_PAYLOAD + 1])).is_err());
    }

    fn any_type() -> impl Strategy<Value = FrameType> {
        prop::sample::select(vec![
            FrameType::ClientHello,
            FrameType::ServerChallenge,
            FrameType::ClientProof,
            FrameType::ServerResult,
            FrameType::AppData,
            FrameType::Close,
        ])
    }

    proptest! {
        #[test]
        fn roundtrip_with_trailing_bytes(
            ftype in any_type(),
            payload in prop::collection::vec(any::<u8>(), 0..600),
            tail in prop::collection::vec(any::<u8>(), 0..10),
        ) {
            let frame = Frame::new(ftype, payload);
            let mut bytes = encode_frame(&frame).unwrap();
            let n = bytes.len();
            bytes.extend_from_slice(&tail);
            prop_assert_eq!(decode_frame(&bytes).unwrap(), Decoded::Frame(frame, n));
        }
    }
}
