//! One PASS/FAIL line per acceptance criterion; exits nonzero if any fails.

fn main() {
    let scratch = tempfile::tempdir().expect("temporary directory");
    let checks = twistray::suite::run_all(scratch.path());
    for c in &checks {
        println!("{}", c.line());
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
