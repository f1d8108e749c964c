use std::sync::Arc;

use regstab::certify::{fit_rate_gamma, ProbeOptions, Region};
use regstab::mrf::Potential;
use regstab::regularize::{build_semiconcave_mrf, RegularizeOptions};
use regstab::systems::{unit_speed_line, ScaledAbs};

#[test]
fn truncated_level_scan_matches_full_minimum() {
    let sys = unit_speed_line(true);
    let w: Arc<dyn Potential> = Arc::new(ScaledAbs { scale: 1.0 });
    let gamma =
        fit_rate_gamma(&sys, w.as_ref(), 0.5, Region::Distance { lo: 0.025, hi: 40.0 }, None, &ProbeOptions::default())
            .unwrap();
    let opts = RegularizeOptions { n_max: 6, ..Default::default() };
    let wbar = build_semiconcave_mrf(&sys, w, 0.5, &gamma, &opts).unwrap();
    assert_eq!(wbar.achieved_n(), 6);
    let mut skipped = 0;
    for i in 1..400 {
        let x = [0.003 * i as f64 * if i % 2 == 0 { 1.0 } else { -1.0 } * (1.0 + 0.02 * i as f64)];
        let full = wbar.all_level_values(&x);
        let fast = wbar.level_values(&x);
        skipped += full.len() - fast.len();
        let min = |v: &[regstab::regularize::LevelValue]| v.iter().map(|l| l.value).fold(f64::INFINITY, f64::min);
        assert!((min(&full) - min(&fast)).abs() <= 1e-12, "x = {x:?}");
    }
    assert!(skipped > 0);
}
