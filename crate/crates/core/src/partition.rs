//! Partitions `0 = t⁰ < t¹ < …` of the half line.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PartitionMode {
    #[default]
    Uniform,
    /// Gaps drawn in `[diameter/2, diameter]` from a seeded stream.
    Jittered { seed: u64 },
}

/// A partition is fully determined by its diameter and mode; the times are
/// generated on demand so it can be extended past any horizon.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    diameter: f64,
    mode: PartitionMode,
}

impl Partition {
    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    pub fn mode(&self) -> PartitionMode {
        self.mode
    }

    /// The infinite sequence of partition times, starting at 0.
    pub fn times(&self) -> PartitionTimes {
        PartitionTimes {
            next: 0.0,
            index: 0,
            diameter: self.diameter,
            rng: match self.mode {
                PartitionMode::Uniform => None,
                PartitionMode::Jittered { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            },
        }
    }

    /// All times up to and including the first one `>= horizon`.
    pub fn times_until(&self, horizon: f64) -> Vec<f64> {
        let mut out = Vec::new();
        for t in self.times() {
            out.push(t);
            if t >= horizon {
                break;
            }
        }
        out
    }
}

pub struct PartitionTimes {
    next: f64,
    index: u64,
    diameter: f64,
    rng: Option<ChaCha8Rng>,
}

impl Iterator for PartitionTimes {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        let t = self.next;
        self.index += 1;
        self.next = match &mut self.rng {
            // Multiplying avoids drift from repeated addition.
            None => self.index as f64 * self.diameter,
            Some(rng) => {
                let u: f64 = rng.random();
                t + self.diameter * (0.5 + 0.5 * u)
            }
        };
        Some(t)
    }
}

pub fn make_partition(diameter: f64, mode: PartitionMode) -> Result<Partition> {
    if !(diameter > 0.0) || !diameter.is_finite() {
        return Err(Error::invalid(format!("partition diameter must be positive, got {diameter}")));
    }
    Ok(Partition { diameter, mode })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_is_arithmetic() {
        let p = make_partition(0.5, PartitionMode::Uniform).unwrap();
        let t: Vec<f64> = p.times().take(4).collect();
        assert_eq!(t, vec![0.0, 0.5, 1.0, 1.5]);
    }

    #[test]
    fn jittered_gaps_bounded_and_reproducible() {
        let p = make_partition(0.5, PartitionMode::Jittered { seed: 7 }).unwrap();
        let a = p.times_until(50.0);
        assert_eq!(a[0], 0.0);
        let mut diam: f64 = 0.0;
        for w in a.windows(2) {
            let gap = w[1] - w[0];
            assert!((0.25..=0.5).contains(&gap), "gap {gap}");
            diam = diam.max(gap);
        }
        assert!(diam <= 0.5);
        assert_eq!(a, p.times_until(50.0));
        let other = make_partition(0.5, PartitionMode::Jittered { seed: 8 }).unwrap();
        assert_ne!(a, other.times_until(50.0));
    }

    #[test]
    fn rejects_nonpositive_diameter() {
        assert!(make_partition(0.0, PartitionMode::Uniform).is_err());
        assert!(make_partition(-1.0, PartitionMode::Uniform).is_err());
        assert!(make_partition(f64::NAN, PartitionMode::Uniform).is_err());
    }

    #[test]
    fn extends_past_horizon() {
        let p = make_partition(0.3, PartitionMode::Jittered { seed: 1 }).unwrap();
        for h in [0.0, 1.0, 17.3] {
            assert!(*p.times_until(h).last().unwrap() >= h);
        }
    }
}
