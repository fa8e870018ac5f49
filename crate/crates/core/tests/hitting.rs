//! Hitting probabilities of a plain (unconditioned) critical snake.
//!
//! The distance law is a lower-bound-only claim, so the frequency ratio is
//! held to a plausibility factor rather than an equality. The run uses two
//! truncation radii so the box effect is reported alongside.

use brwre::environment::EnvSpec;
use brwre::experiments::{hitting_study, McParams};
use brwre::genealogy::OffspringLaw;

#[test]
fn d5_hitting_ratio_tracks_distance_power() {
    let report = hitting_study(
        &EnvSpec::homogeneous(),
        5,
        &OffspringLaw::binary(),
        &[vec![4, 0, 0, 0, 0], vec![8, 0, 0, 0, 0]],
        &[12, 20],
        &McParams::new(1_000_000, 9),
    )
    .unwrap();
    for note in &report.notes {
        println!("{note}");
    }
    let v = report.verdicts.iter().find(|v| v.name == "hitting_ratio_plausible").unwrap();
    assert!(v.pass, "hit-frequency ratio off by factor {:.3}: {}", v.observed, v.detail);
    // The larger box can only help the far target; check the reported
    // truncation direction at |x| = 8.
    let p8_small = report.per_m[1].mean;
    let p8_large = report.per_m[3].mean;
    assert!(
        p8_large >= p8_small * 0.8,
        "far-target frequency should not collapse as the box grows: {p8_small} -> {p8_large}"
    );
}
