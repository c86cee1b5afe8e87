mod common;

use std::time::Duration;

use cloudgate::netsim::{run_scenario, run_scenario_text, Scenario, Simulation};
use cloudgate::tunnel::Phase;
use common::fixture;

fn scenario(name: &str) -> String {
    fixture(&format!("scenarios/{name}.txt"))
}

/// Byte lengths of the messages sent in a run, from its transcript.
fn sent_lengths(transcript: &str) -> Vec<usize> {
    transcript
        .lines()
        .filter(|l| l.contains(" send #"))
        .map(|l| {
            let words: Vec<&str> = l.split_whitespace().collect();
            let at = words.iter().position(|w| *w == "bytes").unwrap();
            words[at - 1].parse().unwrap()
        })
        .collect()
}

#[test]
fn golden_transcripts() {
    for (name, label) in [
        ("happy", "ESTABLISHED"),
        ("slow", "TIMED_OUT"),
        ("corrupt_proof", "FAILED"),
    ] {
        let (outcome, transcript) = run_scenario_text(&scenario(name)).unwrap();
        assert_eq!(outcome.label(), label, "{name}");
        assert_eq!(
            transcript.to_string(),
            fixture(&format!("scenarios/{name}.golden")),
            "{name} transcript drifted"
        );
    }
}

#[test]
fn identical_inputs_give_identical_transcripts() {
    for name in ["happy", "slow", "corrupt_proof"] {
        let a = run_scenario_text(&scenario(name)).unwrap();
        let b = run_scenario_text(&scenario(name)).unwrap();
        assert_eq!(a, b);
    }
    let sc = Scenario::parse(&scenario("happy")).unwrap();
    let other = Scenario {
        seed: 99,
        ..sc.clone()
    };
    assert_ne!(
        run_scenario(&sc).1.to_string(),
        run_scenario(&other).1.to_string()
    );
    assert_eq!(run_scenario(&other).0.label(), "ESTABLISHED");
}

#[test]
fn happy_path_finishes_in_four_legs() {
    let (outcome, _) = run_scenario_text(&scenario("happy")).unwrap();
    assert!(outcome.established());
    assert_eq!(outcome.finished_at, Duration::from_millis(400));
    assert_eq!(outcome.emitted, ["contacting the security gateway"]);
}

#[test]
fn no_single_drop_or_corruption_establishes() {
    let base = Scenario::parse(&scenario("happy")).unwrap();
    let (clean, transcript) = run_scenario(&base);
    assert!(clean.established());
    let lengths = sent_lengths(&transcript.to_string());
    assert_eq!(lengths.len(), 4);

    let mut runs = 0;
    for (index, &len) in lengths.iter().enumerate() {
        let dropped = Scenario {
            drop: vec![index],
            ..base.clone()
        };
        let (o, _) = run_scenario(&dropped);
        assert!(!o.established(), "drop #{index}: {}", o.label());
        runs += 1;
        for offset in 0..len {
            let sc = Scenario {
                corrupt: vec![(index, offset)],
                ..base.clone()
            };
            let (o, t) = run_scenario(&sc);
            assert!(!o.established(), "corrupt #{index} offset {offset}:\n{t}");
            assert!(o.finished_at <= base.timeout + base.latency_c2s + base.latency_s2c);
            runs += 1;
        }
    }
    assert_eq!(runs, 4 + lengths.iter().sum::<usize>());
}

#[test]
fn wrong_password_fails_without_timeout() {
    let text = format!("{}client_password: battery staple\n", scenario("happy"));
    let (o, _) = run_scenario_text(&text).unwrap();
    assert_eq!(o.label(), "FAILED");
    assert!(o.emitted.contains(&"the connection is fail".to_string()));
    assert!(o.finished_at < Duration::from_secs(1));
}

#[test]
fn stepping_matches_running_to_completion() {
    let sc = Scenario::parse(&scenario("happy")).unwrap();
    let mut sim = Simulation::new(&sc);
    sim.start();
    let mut phases = vec![sim.client_phase()];
    for _ in 0..8 {
        sim.advance(Duration::from_millis(50));
        if phases.last() != Some(&sim.client_phase()) {
            phases.push(sim.client_phase());
        }
    }
    assert_eq!(
        phases,
        [Phase::HelloSent, Phase::ProofSent, Phase::Established]
    );
    assert_eq!(sim.outcome(), run_scenario(&sc).0);
}

#[test]
fn malformed_scenarios_report_line_numbers() {
    for (text, line) in [
        ("latency_c2s: 1\nlatency_c2s: 2\n", 2),
        ("# comment\n\nbogus: 1\n", 3),
        ("no colon here\n", 1),
        ("latency_s2c: -1\n", 1),
        ("timeout_secs: 0\n", 1),
        ("name: x\ncorrupt: 1\n", 2),
        ("drop: 1,2\n", 1),
    ] {
        let e = Scenario::parse(text).unwrap_err();
        assert_eq!(e.line, line, "{text:?}: {e}");
        assert!(e.to_string().starts_with(&format!("line {line}: ")));
    }
}
