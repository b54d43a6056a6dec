use std::io::Write;

use gemuco::scenarios::{Lab, Settings, SCENARIOS};

/// Runs every acceptance study with the default settings and reports one
/// line per criterion before asserting. Lines go straight to stderr so they
/// show up without `--nocapture`.
#[test]
fn acceptance() {
    let lab = Lab::new(Settings::default());
    let mut failed = Vec::new();
    let mut err = std::io::stderr().lock();
    writeln!(err).unwrap();
    for criterion in 1..=SCENARIOS.len() as u32 {
        let outcome = lab.run(criterion);
        writeln!(err, "{}", outcome.line()).unwrap();
        if !outcome.passed {
            failed.push(outcome.name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
