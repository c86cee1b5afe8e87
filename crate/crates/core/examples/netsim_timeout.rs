//! Replays the handshake on virtual time with slow links either side of the
//! 30 s timeout, and with a corrupted proof.

use cloudgate::netsim::run_scenario_text;

fn main() {
    let scenarios = [
        "name: slow-but-ok\nlatency_c2s: 29\n",
        "name: slow-both-ways\nlatency_c2s: 29\nlatency_s2c: 29\n",
        "name: too-slow\nlatency_c2s: 31\n",
        "name: bad-proof\nlatency_c2s: 0.02\nlatency_s2c: 0.02\ncorrupt: 2,8\n",
    ];
    for text in scenarios {
        let (outcome, transcript) = run_scenario_text(text).unwrap();
        print!("{transcript}");
        println!("=> {}\n", outcome.label());
    }
}
