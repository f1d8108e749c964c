//! Deterministic low-discrepancy point sets used for probing regions of the
//! state space. Everything here is reproducible bit-for-bit: no RNG state.

use std::f64::consts::PI;

const PRIMES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

/// Radical inverse of `index` in `base` (van der Corput).
pub fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut out = 0.0;
    while index > 0 {
        out += (index % base) as f64 * f;
        index /= base;
        f *= inv;
    }
    out
}

/// Point `i` of the Halton sequence in `[0,1)^dim`, skipping index 0.
pub fn halton(i: usize, dim: usize) -> Vec<f64> {
    assert!(dim <= PRIMES.len(), "halton dimension {dim} unsupported");
    (0..dim).map(|k| radical_inverse(i as u64 + 1, PRIMES[k])).collect()
}

/// Unit direction number `i` in `dim` dimensions. Area-uniform for dim 3.
pub fn direction(i: usize, dim: usize) -> Vec<f64> {
    match dim {
        0 => Vec::new(),
        1 => vec![if i.is_multiple_of(2) { 1.0 } else { -1.0 }],
        2 => {
            let a = 2.0 * PI * radical_inverse(i as u64 + 1, 2);
            vec![a.cos(), a.sin()]
        }
        3 => {
            let z = 2.0 * radical_inverse(i as u64 + 1, 2) - 1.0;
            let phi = 2.0 * PI * radical_inverse(i as u64 + 1, 3);
            let s = (1.0 - z * z).max(0.0).sqrt();
            vec![s * phi.cos(), s * phi.sin(), z]
        }
        _ => {
            // Rejection from the cube, then normalise.
            let mut j = i * 7;
            loop {
                let p: Vec<f64> = halton(j, dim).iter().map(|c| 2.0 * c - 1.0).collect();
                let n = norm(&p);
                if n > 1e-3 && n <= 1.0 {
                    return p.iter().map(|c| c / n).collect();
                }
                j += 1;
            }
        }
    }
}

/// `count` points in the spherical shell `r_lo <= |x - center| <= r_hi`.
/// Even-indexed points sit exactly on the inner sphere.
pub fn shell_points(center: &[f64], r_lo: f64, r_hi: f64, count: usize) -> Vec<Vec<f64>> {
    let dim = center.len();
    (0..count)
        .map(|i| {
            let dir = direction(i, dim);
            let r = if i % 2 == 0 { r_lo } else { r_lo + (r_hi - r_lo) * radical_inverse(i as u64 + 1, 5) };
            center.iter().zip(&dir).map(|(c, d)| c + r * d).collect()
        })
        .collect()
}

/// `count` points in the closed ball of `radius` around `center`, filled with
/// volume-uniform radii; every fourth point lies on the bounding sphere.
pub fn ball_points(center: &[f64], radius: f64, count: usize) -> Vec<Vec<f64>> {
    let dim = center.len().max(1);
    (0..count)
        .map(|i| {
            let dir = direction(i, center.len());
            let r = if i % 4 == 0 { radius } else { radius * radical_inverse(i as u64 + 1, 7).powf(1.0 / dim as f64) };
            center.iter().zip(&dir).map(|(c, d)| c + r * d).collect()
        })
        .collect()
}

/// `count` Halton points in the axis-aligned cube of half-width `half` around `center`.
pub fn cube_points(center: &[f64], half: f64, count: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|i| halton(i, center.len()).iter().zip(center).map(|(h, c)| c + half * (2.0 * h - 1.0)).collect())
        .collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn van_der_corput_base_two() {
        assert_eq!(radical_inverse(1, 2), 0.5);
        assert_eq!(radical_inverse(2, 2), 0.25);
        assert_eq!(radical_inverse(3, 2), 0.75);
    }

    #[test]
    fn shell_points_respect_radii() {
        let pts = shell_points(&[0.0, 0.0, 0.0], 1.0, 1.1, 500);
        for p in &pts {
            let r = norm(p);
            assert!((1.0 - 1e-12..=1.1 + 1e-12).contains(&r));
        }
        assert!(pts.iter().step_by(2).all(|p| (norm(p) - 1.0).abs() < 1e-12));
    }

    #[test]
    fn ball_points_inside() {
        for dim in 1..=4 {
            let c = vec![0.5; dim];
            for p in ball_points(&c, 2.0, 200) {
                assert!(dist(&p, &c) <= 2.0 + 1e-12);
            }
        }
    }
}
