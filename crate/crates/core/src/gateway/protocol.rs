//! Command messages carried inside APP_DATA records.
//!
//! Requests start with an opcode byte. Responses are
//! `status(1) || body_len(4, BE) || body`. Object contents move in
//! [`Request::Data`] chunks (client to gateway) or in `Ok` responses whose
//! body is the chunk (gateway to client), at most [`CHUNK_SIZE`] each.

use thiserror::Error;

use crate::vault::AuthzLevel;

pub const CHUNK_SIZE: usize = 64 * 1024;
pub const MAX_OBJECT_NAME: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Status {
    Ok = 0x00,
    NotAuthorized = 0x01,
    NotFound = 0x02,
    Conflict = 0x03,
    TooLarge = 0x04,
    Locked = 0x05,
    BadRequest = 0x06,
}

impl Status {
    pub fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            0x00 => Status::Ok,
            0x01 => Status::NotAuthorized,
            0x02 => Status::NotFound,
            0x03 => Status::Conflict,
            0x04 => Status::TooLarge,
            0x05 => Status::Locked,
            0x06 => Status::BadRequest,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Status::Ok => "OK",
            Status::NotAuthorized => "NOT_AUTHORIZED",
            Status::NotFound => "NOT_FOUND",
            Status::Conflict => "CONFLICT",
            Status::TooLarge => "TOO_LARGE",
            Status::Locked => "LOCKED",
            Status::BadRequest => "BAD_REQUEST",
        }
    }
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("malformed message: {0}")]
pub struct DecodeError(pub &'static str);

mod op {
    pub const AUTH2: u8 = 0x01;
    pub const PUT: u8 = 0x02;
    pub const GET: u8 = 0x03;
    pub const LIST: u8 = 0x04;
    pub const ADD_USER: u8 = 0x05;
    pub const DATA: u8 = 0x10;
}

#[derive(Clone, PartialEq, Eq)]
pub enum Request {
    Auth2 {
        username: String,
        password: Vec<u8>,
    },
    /// Announces an upload of `size` bytes that follows as `Data` chunks.
    Put {
        name: String,
        size: u64,
    },
    Get {
        name: String,
    },
    List,
    AddUser {
        username: String,
        password: Vec<u8>,
        level: u8,
    },
    Data(Vec<u8>),
}

impl std::fmt::Debug for Request {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // passwords stay out of logs
        match self {
            Request::Auth2 { username, .. } => write!(f, "Auth2({username})"),
            Request::Put { name, size } => write!(f, "Put({name}, {size})"),
            Request::Get { name } => write!(f, "Get({name})"),
            Request::List => f.write_str("List"),
            Request::AddUser {
                username, level, ..
            } => write!(f, "AddUser({username}, {level})"),
            Request::Data(d) => write!(f, "Data({} bytes)", d.len()),
        }
    }
}

/// The command class a request belongs to, for authorization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Command {
    Get,
    Put,
    List,
    AddUser,
}

impl Command {
    pub const ALL: [Command; 4] = [Command::Get, Command::Put, Command::List, Command::AddUser];

    pub fn required_level(self) -> AuthzLevel {
        match self {
            Command::Get | Command::List => AuthzLevel::Read,
            Command::Put => AuthzLevel::ReadWrite,
            Command::AddUser => AuthzLevel::Admin,
        }
    }

    pub fn allowed(self, level: AuthzLevel) -> bool {
        level >= self.required_level()
    }
}

fn put_str8(out: &mut Vec<u8>, s: &[u8]) {
    out.push(s.len() as u8);
    out.extend_from_slice(s);
}

fn put_bytes16(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u16).to_be_bytes());
    out.extend_from_slice(b);
}

struct Cursor<'a>(&'a [u8]);

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.0.len() < n {
            return Err(DecodeError("truncated"));
        }
        let (h, t) = self.0.split_at(n);
        self.0 = t;
        Ok(h)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str8(&mut self) -> Result<String, DecodeError> {
        let n = self.u8()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| DecodeError("string is not UTF-8"))
    }

    fn bytes16(&mut self) -> Result<Vec<u8>, DecodeError> {
        let n = u16::from_be_bytes(self.take(2)?.try_into().unwrap()) as usize;
        Ok(self.take(n)?.to_vec())
    }

    fn finish(self) -> Result<(), DecodeError> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(DecodeError("trailing bytes"))
        }
    }
}

impl Request {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Request::Auth2 { username, password } => {
                out.push(op::AUTH2);
                put_str8(&mut out, username.as_bytes());
                put_bytes16(&mut out, password);
            }
            Request::Put { name, size } => {
                out.push(op::PUT);
                put_str8(&mut out, name.as_bytes());
                out.extend_from_slice(&size.to_be_bytes());
            }
            Request::Get { name } => {
                out.push(op::GET);
                put_str8(&mut out, name.as_bytes());
            }
            Request::List => out.push(op::LIST),
            Request::AddUser {
                username,
                password,
                level,
            } => {
                out.push(op::ADD_USER);
                put_str8(&mut out, username.as_bytes());
                put_bytes16(&mut out, password);
                out.push(*level);
            }
            Request::Data(chunk) => {
                out.reserve(chunk.len());
                out.push(op::DATA);
                out.extend_from_slice(chunk);
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let (&opcode, rest) = bytes.split_first().ok_or(DecodeError("empty request"))?;
        let mut c = Cursor(rest);
        let req = match opcode {
            op::AUTH2 => Request::Auth2 {
                username: c.str8()?,
                password: c.bytes16()?,
            },
            op::PUT => Request::Put {
                name: c.str8()?,
                size: c.u64()?,
            },
            op::GET => Request::Get { name: c.str8()? },
            op::LIST => Request::List,
            op::ADD_USER => Request::AddUser {
                username: c.str8()?,
                password: c.bytes16()?,
                level: c.u8()?,
            },
            op::DATA => return Ok(Request::Data(rest.to_vec())),
            _ => return Err(DecodeError("unknown opcode")),
        };
        c.finish()?;
        Ok(req)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: Status,
    pub body: Vec<u8>,
}

impl Response {
    pub fn new(status: Status, body: Vec<u8>) -> Self {
        Response { status, body }
    }

    pub fn status(status: Status) -> Self {
        Response {
            status,
            body: Vec::new(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + self.body.len());
        out.push(self.status as u8);
        out.extend_from_slice(&(self.body.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.body);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        if bytes.len() < 5 {
            return Err(DecodeError("short response"));
        }
        let status = Status::from_u8(bytes[0]).ok_or(DecodeError("unknown status"))?;
        let len = u32::from_be_bytes(bytes[1..5].try_into().unwrap()) as usize;
        if bytes.len() != 5 + len {
            return Err(DecodeError("response length mismatch"));
        }
        Ok(Response {
            status,
            body: bytes[5..].to_vec(),
        })
    }
}

/// Listing entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectInfo {
    pub name: String,
    pub size: u64,
}

pub fn encode_listing(items: &[ObjectInfo]) -> Vec<u8> {
    let mut out = (items.len() as u32).to_be_bytes().to_vec();
    for item in items {
        put_str8(&mut out, item.name.as_bytes());
        out.extend_from_slice(&item.size.to_be_bytes());
    }
    out
}

pub fn decode_listing(bytes: &[u8]) -> Result<Vec<ObjectInfo>, DecodeError> {
    let mut c = Cursor(bytes);
    let n = u32::from_be_bytes(c.take(4)?.try_into().unwrap());
    let mut items = Vec::new();
    for _ in 0..n {
        items.push(ObjectInfo {
            name: c.str8()?,
            size: c.u64()?,
        });
    }
    c.finish()?;
    Ok(items)
}

/// Object names: 1..=128 bytes, no path separators, not `.` or `..`.
pub fn valid_object_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= MAX_OBJECT_NAME
        && !name.contains(['/', '\\', '\0'])
        && name != "."
        && name != ".."
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn response_layout() {
        assert_eq!(
            Response::new(Status::NotFound, vec![9]).encode(),
            [0x02, 0, 0, 0, 1, 9]
        );
        assert!(Response::decode(&[0x07, 0, 0, 0, 0]).is_err());
        assert!(Response::decode(&[0x00, 0, 0, 0, 2, 1]).is_err());
    }

    #[test]
    fn authorization_table() {
        use AuthzLevel::*;
        let table = [
            (Read, [true, false, true, false]),
            (ReadWrite, [true, true, true, false]),
            (Admin, [true, true, true, true]),
        ];
        for (level, allowed) in table {
            for (cmd, expect) in Command::ALL.iter().zip(allowed) {
                assert_eq!(cmd.allowed(level), expect, "{level:?} {cmd:?}");
            }
        }
    }

    #[test]
    fn names() {
        assert!(valid_object_name("report.pdf"));
        assert!(!valid_object_name("a/b"));
        assert!(!valid_object_name(".."));
        assert!(!valid_object_name(""));
        assert!(!valid_object_name(&"n".repeat(129)));
    }

    #[test]
    fn request_decode_rejects_garbage() {
        assert!(Request::decode(&[]).is_err());
        assert!(Request::decode(&[0x7f]).is_err());
        let mut list = Request::List.encode();
        list.push(0);
        assert!(Request::decode(&list).is_err());
        assert!(Request::decode(&[op::GET, 5, b'a']).is_err());
    }

    proptest! {
        #[test]
        fn requests_roundtrip(
            name in "[a-z0-9.]{1,40}",
            pw in prop::collection::vec(any::<u8>(), 0..64),
            size in any::<u64>(),
            level in any::<u8>(),
        ) {
            for req in [
                Request::Auth2 { username: name.clone(), password: pw.clone() },
                Request::Put { name: name.clone(), size },
                Request::Get { name: name.clone() },
                Request::List,
                Request::AddUser { username: name.clone(), password: pw.clone(), level },
                Request::Data(pw.clone()),
            ] {
                prop_assert_eq!(Request::decode(&req.encode()).unwrap(), req);
            }
            let items = vec![ObjectInfo { name: name.clone(), size }];
            prop_assert_eq!(decode_listing(&encode_listing(&items)).unwrap(), items);
        }
    }
}
