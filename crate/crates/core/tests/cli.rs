mod common;

use std::io::{BufRead, BufReader};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use cloudgate::client::{exit, run_client, tcp_connector, ClientConfig, Mode, ScriptedConsole};
use cloudgate::clock::SystemClock;
use cloudgate::tunnel::{CONTACTING_MESSAGE, TIMEOUT_MESSAGE};
use common::*;

fn run(gw: &LiveGateway, console: &mut ScriptedConsole, script: Option<&str>) -> i32 {
    let config = ClientConfig::new(gw.addr.clone(), TUNNEL_USER.0);
    let mut connector = tcp_connector(gw.addr.clone());
    let mode = match script {
        Some(s) => Mode::Script(s),
        None => Mode::Interactive,
    };
    run_client(&config, mode, console, &mut connector, &SystemClock::new())
}

fn login_as((user, pw): (&str, &str)) -> ScriptedConsole {
    ScriptedConsole::new()
        .with_passwords([TUNNEL_USER.1, pw])
        .with_lines([user])
}

#[test]
fn interactive_happy_path() {
    let gw = LiveGateway::start();
    let file = gw.path("in.txt");
    std::fs::write(&file, b"hello gateway").unwrap();
    let out = gw.path("out.txt");
    let mut console = login_as(WRITER).with_lines([
        format!("put note {}", file.display()),
        "ls".into(),
        format!("get note {}", out.display()),
        "quit".into(),
    ]);
    assert_eq!(run(&gw, &mut console, None), exit::OK);
    assert_eq!(std::fs::read(&out).unwrap(), b"hello gateway");
    assert_eq!(
        &console.prompts[..3],
        [
            "VPN password for vpncustomer: ",
            "Service user: ",
            "Service password: "
        ]
    );
    assert_eq!(console.out[0], CONTACTING_MESSAGE);
    assert_eq!(console.out[1], "secure tunnel established");
    assert_eq!(console.out[2], "logged in as writer (level 2)");
    assert!(console.out.contains(&"note 13".to_string()));
    assert_eq!(console.out.last().unwrap(), "disconnected");
    assert!(console.err.is_empty());
}

#[test]
fn wrong_tunnel_password_fails_stage_one() {
    let gw = LiveGateway::start();
    let mut console = ScriptedConsole::new().with_passwords(["not it"]);
    assert_eq!(run(&gw, &mut console, Some("ls")), exit::STAGE1_FAIL);
    assert_eq!(console.out.last().unwrap(), "the connection is fail");
}

#[test]
fn three_wrong_service_passwords_exit_five() {
    let gw = LiveGateway::start();
    let mut console = ScriptedConsole::new()
        .with_passwords([TUNNEL_USER.1, "x", "y", "z"])
        .with_lines([READER.0, READER.0, READER.0]);
    assert_eq!(run(&gw, &mut console, Some("ls")), exit::STAGE2_FAIL);
    assert_eq!(
        console.out.last().unwrap(),
        "too many failed logins, session closed"
    );
    let fails = console
        .out
        .iter()
        .filter(|l| l.starts_with("stage-2 login failed"))
        .count();
    assert_eq!(fails, 3);
}

#[test]
fn script_exit_codes_follow_first_failure() {
    let gw = LiveGateway::start();
    let file = gw.path("f");
    std::fs::write(&file, b"x").unwrap();

    let mut console = login_as(READER);
    let code = run(
        &gw,
        &mut console,
        Some(&format!("ls\nput a {}\nls", file.display())),
    );
    assert_eq!(code, exit::NOT_AUTHORIZED);
    assert!(console.out.contains(&"NOT_AUTHORIZED".to_string()));

    let mut console = login_as(READER);
    let code = run(
        &gw,
        &mut console,
        Some(&format!("get ghost {}", gw.path("g").display())),
    );
    assert_eq!(code, exit::NOT_FOUND);
    assert!(!gw.path("g").exists());

    let mut console = login_as(READER);
    assert_eq!(run(&gw, &mut console, Some("frobnicate")), exit::ERROR);
}

#[test]
fn listing_after_two_puts() {
    let gw = LiveGateway::start();
    let (a, b) = (gw.path("a"), gw.path("b"));
    std::fs::write(&a, vec![1; 100]).unwrap();
    std::fs::write(&b, vec![2; 70_000]).unwrap();
    let mut console = login_as(WRITER);
    let script = format!("put alpha {}\nput beta {}\nls\n", a.display(), b.display());
    assert_eq!(run(&gw, &mut console, Some(&script)), exit::OK);
    let i = console.out.iter().position(|l| l == "alpha 100").unwrap();
    assert_eq!(console.out[i + 1], "beta 70000");
}

#[test]
fn env_passwords_skip_prompts_with_warning() {
    let gw = LiveGateway::start();
    let mut console = ScriptedConsole::new().with_lines([ADMIN.0]);
    console
        .env
        .insert("CLOUDGATE_PASSWORD".into(), TUNNEL_USER.1.into());
    console
        .env
        .insert("CLOUDGATE_PASSWORD2".into(), ADMIN.1.into());
    assert_eq!(run(&gw, &mut console, Some("ls")), exit::OK);
    assert_eq!(console.prompts, ["Service user: "]);
    assert_eq!(console.err.len(), 2);
    assert!(console.err.iter().all(|l| l.starts_with("warning:")));
}

#[test]
fn unreachable_gateway_times_out() {
    // a bound but never-accepting address would hang in the kernel backlog;
    // a closed port refuses immediately and exercises the retry loop
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let addr = format!("127.0.0.1:{port}");
    let mut config = ClientConfig::new(addr.clone(), TUNNEL_USER.0);
    config.timeout_secs = 1;
    let mut console = ScriptedConsole::new().with_passwords(["pw"]);
    let mut connector = tcp_connector(addr);
    let start = Instant::now();
    let code = run_client(
        &config,
        Mode::Script("ls"),
        &mut console,
        &mut connector,
        &SystemClock::new(),
    );
    assert_eq!(code, exit::TIMEOUT);
    assert_eq!(console.out, [CONTACTING_MESSAGE, TIMEOUT_MESSAGE]);
    assert!(start.elapsed() < Duration::from_secs(3));
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cloudgate"))
}

#[test]
fn gateway_binary_exits_two_on_missing_vault() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["gateway", "--listen", "127.0.0.1:0", "--vault"])
        .arg(dir.path().join("absent.bin"))
        .arg("--audit")
        .arg(dir.path().join("audit.log"))
        .env("CLOUDGATE_MASTER_KEY_HEX", MASTER_HEX)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn gateway_binary_reports_ready_and_serves_a_script() {
    let dir = tempfile::tempdir().unwrap();
    let vault = dir.path().join("vault.bin");
    provisioned_vault().save(&vault).unwrap();
    let mut child = bin()
        .args(["gateway", "--listen", "127.0.0.1:0", "--vault"])
        .arg(&vault)
        .arg("--audit")
        .arg(dir.path().join("audit.log"))
        .env("CLOUDGATE_MASTER_KEY_HEX", MASTER_HEX)
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stderr = BufReader::new(child.stderr.take().unwrap());
    let mut line = String::new();
    let addr = loop {
        line.clear();
        assert!(
            stderr.read_line(&mut line).unwrap() > 0,
            "gateway exited early"
        );
        if let Some(rest) = line.split("listening on ").nth(1) {
            break rest.trim().to_owned();
        }
    };

    let file = dir.path().join("payload");
    std::fs::write(&file, b"through the binary").unwrap();
    let script = dir.path().join("script.txt");
    let fetched = dir.path().join("fetched");
    std::fs::write(
        &script,
        format!(
            "put p {}\nls\nget p {}\n",
            file.display(),
            fetched.display()
        ),
    )
    .unwrap();
    let out = bin()
        .args(["client", "run", "--gateway", &addr, "--user", TUNNEL_USER.0])
        .args(["--service-user", WRITER.0, "--script"])
        .arg(&script)
        .env("CLOUDGATE_PASSWORD", TUNNEL_USER.1)
        .env("CLOUDGATE_PASSWORD2", WRITER.1)
        .output()
        .unwrap();
    let _ = child.kill();
    let _ = child.wait();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}");
    assert!(stdout.contains("p 18"));
    assert_eq!(std::fs::read(&fetched).unwrap(), b"through the binary");
}

#[test]
fn simulate_subcommand_prints_transcript() {
    let dir = tempfile::tempdir().unwrap();
    let sc = dir.path().join("slow.txt");
    std::fs::write(&sc, "name: slow\nlatency_c2s: 31\n").unwrap();
    let out = bin().arg("simulate").arg(&sc).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("TIMED_OUT"), "{stdout}");
    assert!(stdout.contains(TIMEOUT_MESSAGE));
}
