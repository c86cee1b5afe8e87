//! Blocking byte-stream transports.

use std::io::{self, ErrorKind, Read, Write};
use std::net::{Shutdown, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::time::Duration;

pub trait Transport: Send {
    fn send(&mut self, bytes: &[u8]) -> io::Result<()>;

    /// Reads whatever is available, waiting at most `timeout` (forever if
    /// `None`). `Ok(0)` means the peer closed; a wait that runs out fails
    /// with [`ErrorKind::TimedOut`].
    fn recv(&mut self, buf: &mut [u8], timeout: Option<Duration>) -> io::Result<usize>;

    fn close(&mut self) {}
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn send(&mut self, bytes: &[u8]) -> io::Result<()> {
        (**self).send(bytes)
    }

    fn recv(&mut self, buf: &mut [u8], timeout: Option<Duration>) -> io::Result<usize> {
        (**self).recv(buf, timeout)
    }

    fn close(&mut self) {
        (**self).close()
    }
}

impl Transport for TcpStream {
    fn send(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.write_all(bytes)?;
        self.flush()
    }

    fn recv(&mut self, buf: &mut [u8], timeout: Option<Duration>) -> io::Result<usize> {
        // a zero read timeout is rejected by the OS
        let timeout = timeout.map(|t| t.max(Duration::from_millis(1)));
        self.set_read_timeout(timeout)?;
        match self.read(buf) {
            Err(e) if e.kind() == ErrorKind::WouldBlock => Err(ErrorKind::TimedOut.into()),
            other => other,
        }
    }

    fn close(&mut self) {
        let _ = self.shutdown(Shutdown::Both);
    }
}

/// One end of an in-process duplex pipe.
pub struct MemoryTransport {
    tx: Option<Sender<Vec<u8>>>,
    rx: Receiver<Vec<u8>>,
    pending: Vec<u8>,
}

/// A connected pair of in-memory transports.
pub fn memory_pair() -> (MemoryTransport, MemoryTransport) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    (
        MemoryTransport {
            tx: Some(a_tx),
            rx: a_rx,
            pending: Vec::new(),
        },
        MemoryTransport {
            tx: Some(b_tx),
            rx: b_rx,
            pending: Vec::new(),
        },
    )
}

impl Transport for MemoryTransport {
    fn send(&mut self, bytes: &[u8]) -> io::Result<()> {
        match &self.tx {
            Some(tx) => tx
                .send(bytes.to_vec())
                .map_err(|_| ErrorKind::BrokenPipe.into()),
            None => Err(ErrorKind::BrokenPipe.into()),
        }
    }

    fn recv(&mut self, buf: &mut [u8], timeout: Option<Duration>) -> io::Result<usize> {
        if self.pending.is_empty() {
            let chunk = match timeout {
                None => self.rx.recv().ok(),
                Some(t) => match self.rx.recv_timeout(t) {
                    Ok(c) => Some(c),
                    Err(RecvTimeoutError::Timeout) => return Err(ErrorKind::TimedOut.into()),
                    Err(RecvTimeoutError::Disconnected) => None,
                },
            };
            match chunk {
                Some(c) => self.pending = c,
                None => return Ok(0),
            }
        }
        let n = buf.len().min(self.pending.len());
        buf[..n].copy_from_slice(&self.pending[..n]);
        self.pending.drain(..n);
        Ok(n)
    }

    fn close(&mut self) {
        self.tx = None;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

type Chunks = Arc<Mutex<Vec<(Direction, Vec<u8>)>>>;

/// Shared record of everything a [`Sniffer`] saw.
#[derive(Debug, Clone, Default)]
pub struct WireLog {
    inner: Chunks,
}

impl WireLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn chunks(&self) -> Vec<(Direction, Vec<u8>)> {
        self.inner.lock().unwrap().clone()
    }

    /// All bytes seen in one direction, concatenated.
    pub fn stream(&self, dir: Direction) -> Vec<u8> {
        self.inner
            .lock()
            .unwrap()
            .iter()
            .filter(|(d, _)| *d == dir)
            .flat_map(|(_, b)| b.iter().copied())
            .collect()
    }

    pub fn contains(&self, needle: &[u8]) -> bool {
        [Direction::Sent, Direction::Received]
            .iter()
            .any(|&d| self.stream(d).windows(needle.len()).any(|w| w == needle))
    }

    fn push(&self, dir: Direction, bytes: &[u8]) {
        self.inner.lock().unwrap().push((dir, bytes.to_vec()));
    }
}

/// Wraps a transport and records both directions into a [`WireLog`].
pub struct Sniffer<T> {
    inner: T,
    log: WireLog,
}

impl<T: Transport> Sniffer<T> {
    pub fn new(inner: T, log: WireLog) -> Self {
        Sniffer { inner, log }
    }
}

impl<T: Transport> Transport for Sniffer<T> {
    fn send(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.log.push(Direction::Sent, bytes);
        self.inner.send(bytes)
    }

    fn recv(&mut self, buf: &mut [u8], timeout: Option<Duration>) -> io::Result<usize> {
        let n = self.inner.recv(buf, timeout)?;
        self.log.push(Direction::Received, &buf[..n]);
        Ok(n)
    }

    fn close(&mut self) {
        self.inner.close()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn memory_pair_delivers_and_closes() {
        let (mut a, mut b) = memory_pair();
        a.send(b"hello").unwrap();
        let mut buf = [0u8; 3];
        assert_eq!(b.recv(&mut buf, None).unwrap(), 3);
        assert_eq!(&buf, b"hel");
        assert_eq!(b.recv(&mut buf, None).unwrap(), 2);
        let err = b
            .recv(&mut buf, Some(Duration::from_millis(5)))
            .unwrap_err();
        assert_eq!(err.kind(), ErrorKind::TimedOut);
        a.close();
        drop(a);
        assert_eq!(b.recv(&mut buf, None).unwrap(), 0);
    }

    #[test]
    fn sniffer_records_both_directions() {
        let (a, mut b) = memory_pair();
        let log = WireLog::new();
        let mut a = Sniffer::new(a, log.clone());
        a.send(b"ping").unwrap();
        b.send(b"pong").unwrap();
        let mut buf = [0u8; 8];
        let mut got = [0u8; 8];
        let n = b.recv(&mut got, None).unwrap();
        assert_eq!(&got[..n], b"ping");
        a.recv(&mut buf, None).unwrap();
        assert_eq!(log.stream(Direction::Sent), b"ping");
        assert_eq!(log.stream(Direction::Received), b"pong");
        assert!(log.contains(b"pon"));
    }
}
