//! Acceptance criteria, one report line each. Exits nonzero if any fails.
//!
//! `cargo test -p tmamba --test acceptance`

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::Outcome;

fn main() -> ExitCode {
    let scratch = tempfile::tempdir().expect("temporary directory");
    type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;
    let criteria: Vec<(&str, Check)> = vec![
        (
            "1 gradients match finite differences",
            Box::new(|| common::gradient_criterion(tmamba::gradcheck::SUITE_CASES)),
        ),
        ("2 selective scan and cross-scan match oracles", Box::new(|| common::scan_criterion(100, 100))),
        ("3 channel attention and cross-modal chain match oracles", Box::new(|| common::attention_criterion(100, 1000))),
        ("4 both token mixers cost linear in token count", Box::new(common::complexity_criterion)),
        (
            "5 branch interaction bounds, convex weighting, ablations train",
            Box::new(|| common::interaction_criterion(50, &scratch.path().join("ablations"))),
        ),
        ("6 desk toy run learns to fuse", Box::new(common::toy_criterion)),
        ("7 metrics closed forms and bounds", Box::new(|| common::metrics_criterion(500))),
        (
            "8 seeded runs and checkpoint round trip are reproducible",
            Box::new(|| common::reproducibility_criterion(&scratch.path().join("repro"))),
        ),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let t0 = Instant::now();
        let o = check();
        if !o.passed {
            failed += 1;
        }
        println!(
            "{} criterion {name}: {} [{:.1?}]",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail,
            t0.elapsed()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
