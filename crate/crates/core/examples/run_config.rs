//! Runs the command-line front end in-process: loads a shipped config and
//! writes the trace outputs into a temporary directory.

use twistray::cli;

fn main() {
    let dir = std::env::temp_dir().join("twistray-example");
    let config = dir.join("flat_annulus.json");
    std::fs::create_dir_all(&dir).expect("temporary directory");
    std::fs::write(&config, twistray::suite::FLAT_ANNULUS).expect("writable");
    let code = cli::run_in("trace", &config, &dir.join("trace"), &["--seed", "3"]);
    println!("exit code {code}");
    let summary = std::fs::read_to_string(dir.join("trace").join("trace_summary.json")).expect("summary written");
    println!("{summary}");
}
