use proptest::prelude::*;

use regstab::cli::Num;
use regstab::feedback::{ConstantControl, Feedback, CACHE_CELL};
use regstab::mrf::RateFunction;
use regstab::nhi;
use regstab::partition::{make_partition, PartitionMode};
use regstab::simulate::{sampling_trajectory, stable_entry_time, SimOptions};
use regstab::systems::{unit_speed_line, ScaledAbs};

fn coord() -> impl Strategy<Value = f64> {
    -3.0..3.0f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn partition_gaps_stay_within_diameter(delta in 1e-3..1.0f64, seed in any::<u64>(), jitter in any::<bool>()) {
        let mode = if jitter { PartitionMode::Jittered { seed } } else { PartitionMode::Uniform };
        let pi = make_partition(delta, mode).unwrap();
        let times = pi.times_until(50.0 * delta);
        prop_assert_eq!(times[0], 0.0);
        for w in times.windows(2) {
            let gap = w[1] - w[0];
            prop_assert!(gap > 0.0 && gap <= delta * (1.0 + 1e-12));
            if jitter {
                prop_assert!(gap >= delta / 2.0 * (1.0 - 1e-12));
            }
        }
        prop_assert_eq!(pi.times_until(50.0 * delta), times);
    }

    #[test]
    fn disk_minimum_is_below_every_control(
        x in prop::array::uniform3(coord()),
        p in prop::array::uniform3(coord()),
        theta in 0.0..std::f64::consts::TAU,
        radius in 0.0..=1.0f64,
    ) {
        let (m, u) = nhi::min_inner(&x, &p);
        let inner = |u: &[f64]| nhi::dynamics(&x, u).iter().zip(&p).map(|(a, b)| a * b).sum::<f64>();
        prop_assert!(m <= inner(&[radius * theta.cos(), radius * theta.sin()]) + 1e-12);
        prop_assert!((inner(&u) - m).abs() <= 1e-12 * m.abs().max(1.0));
        prop_assert!(u[0].hypot(u[1]) <= 1.0 + 1e-12);
    }

    #[test]
    fn w2_is_positively_homogeneous(x in prop::array::uniform3(coord()), s in 0.01..10.0f64) {
        let y: Vec<f64> = x.iter().map(|c| s * c).collect();
        prop_assert!((nhi::w2(&y) - s * nhi::w2(&x)).abs() <= 1e-12 * (1.0 + s * nhi::w2(&x)));
    }

    #[test]
    fn quantized_representative_is_within_half_a_cell(x in prop::collection::vec(-100.0..100.0f64, 1..4)) {
        let (key, rep) = Feedback::quantize(&x);
        prop_assert_eq!(key.len(), x.len());
        for (a, b) in x.iter().zip(&rep) {
            prop_assert!((a - b).abs() <= CACHE_CELL / 2.0 + 1e-15);
        }
        prop_assert_eq!(Feedback::quantize(&rep).1, rep);
    }

    #[test]
    fn tabulated_rates_are_increasing(steps in prop::collection::vec((0.01..1.0f64, 0.01..1.0f64), 2..12), a in 0.0..20.0f64, b in 0.0..20.0f64) {
        let (mut w, mut g) = (vec![], vec![]);
        let (mut wc, mut gc) = (0.0, 0.0);
        for (dw, dg) in steps {
            wc += dw;
            gc += dg;
            w.push(wc);
            g.push(gc);
        }
        let rate = RateFunction::from_table(w, g).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(rate.eval(lo) <= rate.eval(hi));
        prop_assert!(rate.eval(lo) >= 0.0);
    }

    #[test]
    fn numbers_round_trip_through_json(v in any::<f64>()) {
        let text = serde_json::to_string(&Num(v)).unwrap();
        if v.is_finite() {
            prop_assert_eq!(text.parse::<f64>().unwrap(), v);
        } else {
            prop_assert!(text == "\"inf\"" || text == "\"-inf\"" || text == "\"nan\"");
        }
    }

    #[test]
    fn trajectory_stays_inside_after_entry(z in 0.2..2.0f64, r in 0.05..0.15f64, delta in 0.01..0.3f64) {
        let sys = unit_speed_line(true);
        let pi = make_partition(delta, PartitionMode::Uniform).unwrap();
        let run = sampling_trajectory(&sys, &ConstantControl(vec![-1.0]), &ScaledAbs { scale: 2.0 }, &pi, &[z], 4.0, &SimOptions::default()).unwrap();
        let t = stable_entry_time(&run, r);
        prop_assert!(t.is_finite());
        prop_assert!(run.samples.iter().filter(|s| s.t >= t).all(|s| s.dist <= r));
        // unit speed: contact within d_tol of the target is contact within d_tol in time
        prop_assert!((run.exit_time - z).abs() <= SimOptions::default().d_tol_rel * z + 1e-12);
    }
}
