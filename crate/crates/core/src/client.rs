//! The customer side: a typed gateway client and the command-line flow
//! built on it (stage-one credentials, connect, stage-two login, then
//! object commands from a prompt or a script).

use std::io::{self, BufRead, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::path::Path;
use std::time::Duration;

use log::debug;
use thiserror::Error;

use crate::clock::Clock;
use crate::gateway::protocol::{decode_listing, ObjectInfo, Request, Response, Status, CHUNK_SIZE};
use crate::tunnel::{
    client_connect, HandshakeError, Session, SessionError, Transport, CONTACTING_MESSAGE,
    TIMEOUT_MESSAGE,
};
use crate::vault::AuthzLevel;

pub const PASSWORD_ENV: &str = "CLOUDGATE_PASSWORD";
pub const SERVICE_PASSWORD_ENV: &str = "CLOUDGATE_PASSWORD2";

/// Stage-two attempts per session; the gateway closes after this many.
pub const STAGE2_ATTEMPTS: u32 = 3;

const RETRY_INTERVAL: Duration = Duration::from_millis(500);

pub mod exit {
    pub const OK: i32 = 0;
    pub const ERROR: i32 = 1;
    pub const TIMEOUT: i32 = 3;
    pub const STAGE1_FAIL: i32 = 4;
    pub const STAGE2_FAIL: i32 = 5;
    pub const NOT_AUTHORIZED: i32 = 6;
    pub const NOT_FOUND: i32 = 7;
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("{0}")]
    Refused(Status),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("unexpected reply: {0}")]
    Protocol(String),
    #[error("{0}")]
    Io(#[from] io::Error),
}

impl ClientError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ClientError::Refused(Status::NotAuthorized) => exit::NOT_AUTHORIZED,
            ClientError::Refused(Status::NotFound) => exit::NOT_FOUND,
            _ => exit::ERROR,
        }
    }
}

/// Typed requests over an established tunnel.
pub struct GatewayClient<T: Transport> {
    session: Session<T>,
}

impl<T: Transport> GatewayClient<T> {
    pub fn new(session: Session<T>) -> Self {
        GatewayClient { session }
    }

    pub fn session(&self) -> &Session<T> {
        &self.session
    }

    fn send(&mut self, req: &Request) -> Result<(), ClientError> {
        Ok(self.session.send_data(&req.encode())?)
    }

    fn recv(&mut self) -> Result<Response, ClientError> {
        let bytes = self.session.recv_data()?;
        Response::decode(&bytes).map_err(|e| ClientError::Protocol(e.to_string()))
    }

    fn recv_ok(&mut self) -> Result<Vec<u8>, ClientError> {
        let resp = self.recv()?;
        match resp.status {
            Status::Ok => Ok(resp.body),
            other => Err(ClientError::Refused(other)),
        }
    }

    /// Stage-two login; returns the granted level.
    pub fn login(&mut self, username: &str, password: &[u8]) -> Result<AuthzLevel, ClientError> {
        self.send(&Request::Auth2 {
            username: username.to_owned(),
            password: password.to_vec(),
        })?;
        let body = self.recv_ok()?;
        body.first()
            .and_then(|&b| AuthzLevel::try_from(b).ok())
            .ok_or_else(|| ClientError::Protocol("missing level".into()))
    }

    pub fn put(&mut self, name: &str, data: &[u8]) -> Result<(), ClientError> {
        self.send(&Request::Put {
            name: name.to_owned(),
            size: data.len() as u64,
        })?;
        self.recv_ok()?;
        for chunk in data.chunks(CHUNK_SIZE) {
            self.send(&Request::Data(chunk.to_vec()))?;
        }
        self.recv_ok()?;
        Ok(())
    }

    pub fn get(&mut self, name: &str) -> Result<Vec<u8>, ClientError> {
        self.send(&Request::Get {
            name: name.to_owned(),
        })?;
        let header = self.recv_ok()?;
        let size: [u8; 8] = header
            .try_into()
            .map_err(|_| ClientError::Protocol("bad size header".into()))?;
        let size = u64::from_be_bytes(size) as usize;
        let mut data = Vec::with_capacity(size);
        while data.len() < size {
            let chunk = self.recv_ok()?;
            if chunk.is_empty() || data.len() + chunk.len() > size {
                return Err(ClientError::Protocol("chunk overruns object size".into()));
            }
            data.extend_from_slice(&chunk);
        }
        Ok(data)
    }

    pub fn list(&mut self) -> Result<Vec<ObjectInfo>, ClientError> {
        self.send(&Request::List)?;
        let body = self.recv_ok()?;
        decode_listing(&body).map_err(|e| ClientError::Protocol(e.to_string()))
    }

    pub fn add_user(
        &mut self,
        username: &str,
        password: &[u8],
        level: AuthzLevel,
    ) -> Result<(), ClientError> {
        self.send(&Request::AddUser {
            username: username.to_owned(),
            password: password.to_vec(),
            level: level as u8,
        })?;
        self.recv_ok()?;
        Ok(())
    }

    pub fn close(self) -> Result<(), ClientError> {
        Ok(self.session.close()?)
    }
}

/// Terminal access for the CLI flow, swappable for scripted tests.
pub trait Console {
    fn print(&mut self, line: &str);
    fn eprint(&mut self, line: &str);
    /// `None` at end of input.
    fn prompt_line(&mut self, prompt: &str) -> Option<String>;
    /// Reads without echo.
    fn prompt_password(&mut self, prompt: &str) -> Option<String>;
    fn env(&self, key: &str) -> Option<String>;
}

/// The real terminal.
#[derive(Debug, Default)]
pub struct StdConsole;

impl Console for StdConsole {
    fn print(&mut self, line: &str) {
        println!("{line}");
    }

    fn eprint(&mut self, line: &str) {
        eprintln!("{line}");
    }

    fn prompt_line(&mut self, prompt: &str) -> Option<String> {
        print!("{prompt}");
        io::stdout().flush().ok()?;
        let mut line = String::new();
        match io::stdin().lock().read_line(&mut line) {
            Ok(0) | Err(_) => None,
            Ok(_) => Some(line.trim_end_matches(['\r', '\n']).to_owned()),
        }
    }

    fn prompt_password(&mut self, prompt: &str) -> Option<String> {
        rpassword::prompt_password(prompt).ok()
    }

    fn env(&self, key: &str) -> Option<String> {
        std::env::var(key).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientConfig {
    pub gateway: String,
    pub username: String,
    pub timeout_secs: u64,
    /// Stage-two user; prompted for when absent.
    pub service_user: Option<String>,
}

impl ClientConfig {
    pub fn new(gateway: impl Into<String>, username: impl Into<String>) -> Self {
        ClientConfig {
            gateway: gateway.into(),
            username: username.into(),
            timeout_secs: 30,
            service_user: None,
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }
}

/// Opens a transport, given the time left before the connect deadline.
pub type Connector<'a> = dyn FnMut(Duration) -> io::Result<Box<dyn Transport>> + 'a;

/// TCP connector for `addr`.
pub fn tcp_connector(addr: String) -> impl FnMut(Duration) -> io::Result<Box<dyn Transport>> {
    move |left| {
        let mut last = io::Error::new(io::ErrorKind::NotFound, format!("{addr} did not resolve"));
        for sa in addr.to_socket_addrs()? {
            match TcpStream::connect_timeout(&sa, left.max(Duration::from_millis(1))) {
                Ok(s) => {
                    s.set_nodelay(true)?;
                    return Ok(Box::new(s) as Box<dyn Transport>);
                }
                Err(e) => last = e,
            }
        }
        Err(last)
    }
}

/// Where commands come from after login.
pub enum Mode<'a> {
    Interactive,
    /// Script text; stops at the first failing command.
    Script(&'a str),
}

fn secret(console: &mut dyn Console, env_key: &str, prompt: &str) -> Option<String> {
    if let Some(v) = console.env(env_key) {
        console.eprint(&format!(
            "warning: using password from {env_key}; meant for test automation only"
        ));
        return Some(v);
    }
    console.prompt_password(prompt)
}

/// Connects with retries until the timeout, then runs the handshake.
pub fn connect_tunnel(
    config: &ClientConfig,
    password: &[u8],
    connector: &mut Connector<'_>,
    clock: &dyn Clock,
    console: &mut dyn Console,
) -> Result<Session<Box<dyn Transport>>, HandshakeError> {
    console.print(CONTACTING_MESSAGE);
    let deadline = clock.now() + config.timeout();
    let transport = loop {
        let left = deadline.saturating_sub(clock.now());
        if left.is_zero() {
            return Err(HandshakeError::TimedOut);
        }
        match connector(left) {
            Ok(t) => break t,
            Err(e) => {
                debug!("connect to {} failed: {e}", config.gateway);
                clock.sleep(RETRY_INTERVAL.min(deadline.saturating_sub(clock.now())));
            }
        }
    };
    // the contacting line is already out
    client_connect(
        transport,
        &config.username,
        password,
        clock,
        config.timeout(),
        &mut |_| {},
    )
}

/// The whole client flow; returns the process exit code.
pub fn run_client(
    config: &ClientConfig,
    mode: Mode<'_>,
    console: &mut dyn Console,
    connector: &mut Connector<'_>,
    clock: &dyn Clock,
) -> i32 {
    let Some(password) = secret(
        console,
        PASSWORD_ENV,
        &format!("VPN password for {}: ", config.username),
    ) else {
        console.eprint("no password given");
        return exit::ERROR;
    };
    let session = match connect_tunnel(config, password.as_bytes(), connector, clock, console) {
        Ok(s) => s,
        Err(HandshakeError::TimedOut) => {
            console.print(TIMEOUT_MESSAGE);
            return exit::TIMEOUT;
        }
        Err(e) => {
            debug!("stage-1 failed: {e}");
            console.print(e.status_message());
            return exit::STAGE1_FAIL;
        }
    };
    console.print("secure tunnel established");
    let mut client = GatewayClient::new(session);
    if let Err(code) = stage2(config, &mut client, console) {
        let _ = client.close();
        return code;
    }
    let code = match mode {
        Mode::Interactive => interactive(&mut client, console),
        Mode::Script(text) => script(&mut client, text, console),
    };
    let _ = client.close();
    console.print("disconnected");
    code
}

fn stage2<T: Transport>(
    config: &ClientConfig,
    client: &mut GatewayClient<T>,
    console: &mut dyn Console,
) -> Result<(), i32> {
    for _ in 0..STAGE2_ATTEMPTS {
        let user = match &config.service_user {
            Some(u) => u.clone(),
            None => console
                .prompt_line("Service user: ")
                .ok_or(exit::STAGE2_FAIL)?,
        };
        let pw =
            secret(console, SERVICE_PASSWORD_ENV, "Service password: ").ok_or(exit::STAGE2_FAIL)?;
        match client.login(&user, pw.as_bytes()) {
            Ok(level) => {
                console.print(&format!("logged in as {user} (level {})", level as u8));
                return Ok(());
            }
            Err(ClientError::Refused(Status::Locked)) => {
                console.print("LOCKED");
                return Err(exit::STAGE2_FAIL);
            }
            Err(ClientError::Refused(status)) => {
                console.print(&format!("stage-2 login failed: {status}"))
            }
            Err(e) => {
                console.print(&format!("stage-2 login failed: {e}"));
                return Err(exit::STAGE2_FAIL);
            }
        }
    }
    console.print("too many failed logins, session closed");
    Err(exit::STAGE2_FAIL)
}

fn interactive<T: Transport>(client: &mut GatewayClient<T>, console: &mut dyn Console) -> i32 {
    console.print("commands: put NAME FILE | get NAME FILE | ls | adduser NAME LEVEL | quit");
    let mut code = exit::OK;
    while let Some(line) = console.prompt_line("cloudgate> ") {
        match line.trim() {
            "" => continue,
            "quit" | "exit" => break,
            cmd => match execute(client, cmd, console) {
                Ok(()) => code = exit::OK,
                Err(e) => {
                    code = e.exit_code();
                    if matches!(e, ClientError::Session(_)) {
                        break;
                    }
                }
            },
        }
    }
    code
}

fn script<T: Transport>(
    client: &mut GatewayClient<T>,
    text: &str,
    console: &mut dyn Console,
) -> i32 {
    for line in text.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line == "quit" || line == "exit" {
            break;
        }
        if let Err(e) = execute(client, line, console) {
            return e.exit_code();
        }
    }
    exit::OK
}

/// Runs one command line, printing its result or error.
pub fn execute<T: Transport>(
    client: &mut GatewayClient<T>,
    line: &str,
    console: &mut dyn Console,
) -> Result<(), ClientError> {
    let result = run_command(client, line, console);
    if let Err(e) = &result {
        console.print(&e.to_string());
    }
    result
}

fn usage(msg: &str) -> ClientError {
    ClientError::Io(io::Error::new(io::ErrorKind::InvalidInput, msg.to_owned()))
}

fn run_command<T: Transport>(
    client: &mut GatewayClient<T>,
    line: &str,
    console: &mut dyn Console,
) -> Result<(), ClientError> {
    let args: Vec<&str> = line.split_whitespace().collect();
    match args.as_slice() {
        ["put", name, file] => {
            let data = std::fs::read(file)?;
            client.put(name, &data)?;
            console.print(&format!("stored {name} ({} bytes)", data.len()));
        }
        ["get", name, file] => {
            let data = client.get(name)?;
            write_atomic(Path::new(file), &data)?;
            console.print(&format!("saved {name} to {file} ({} bytes)", data.len()));
        }
        ["ls"] => {
            for item in client.list()? {
                console.print(&format!("{} {}", item.name, item.size));
            }
        }
        ["adduser", name, level] => {
            let level = level
                .parse::<u8>()
                .ok()
                .and_then(|l| AuthzLevel::try_from(l).ok())
                .ok_or_else(|| usage("level must be 1, 2 or 3"))?;
            let pw = console
                .prompt_password(&format!("Password for {name}: "))
                .ok_or_else(|| usage("no password given"))?;
            client.add_user(name, pw.as_bytes(), level)?;
            console.print(&format!("added {name} (level {})", level as u8));
        }
        _ => return Err(usage(&format!("unknown command: {line}"))),
    }
    Ok(())
}

fn write_atomic(path: &Path, data: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("part");
    std::fs::write(&tmp, data)?;
    std::fs::rename(&tmp, path)
}

/// Scripted console for tests and examples: canned input lines and
/// passwords, captured output.
#[derive(Debug, Default, Clone)]
pub struct ScriptedConsole {
    pub lines: std::collections::VecDeque<String>,
    pub passwords: std::collections::VecDeque<String>,
    pub env: std::collections::HashMap<String, String>,
    pub out: Vec<String>,
    pub err: Vec<String>,
    /// Prompts in the order they were shown.
    pub prompts: Vec<String>,
}

impl ScriptedConsole {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_lines<I: IntoIterator<Item = S>, S: Into<String>>(mut self, lines: I) -> Self {
        self.lines.extend(lines.into_iter().map(Into::into));
        self
    }

    pub fn with_passwords<I: IntoIterator<Item = S>, S: Into<String>>(mut self, pws: I) -> Self {
        self.passwords.extend(pws.into_iter().map(Into::into));
        self
    }
}

impl Console for ScriptedConsole {
    fn print(&mut self, line: &str) {
        self.out.push(line.to_owned());
    }

    fn eprint(&mut self, line: &str) {
        self.err.push(line.to_owned());
    }

    fn prompt_line(&mut self, prompt: &str) -> Option<String> {
        self.prompts.push(prompt.to_owned());
        self.lines.pop_front()
    }

    fn prompt_password(&mut self, prompt: &str) -> Option<String> {
        self.prompts.push(prompt.to_owned());
        self.passwords.pop_front()
    }

    fn env(&self, key: &str) -> Option<String> {
        self.env.get(key).cloned()
    }
}
