//! Seeded synthetic fields for tests, benches and the CLI generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decomposer::Grid;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldKind {
    /// Sum of a few low-frequency sinusoids.
    Smooth,
    /// Uniform noise on [-1, 1).
    Noise,
    /// Smooth plus small noise.
    Mixed,
}

impl FieldKind {
    pub const ALL: [FieldKind; 3] = [FieldKind::Smooth, FieldKind::Noise, FieldKind::Mixed];
}

impl std::str::FromStr for FieldKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smooth" => Ok(FieldKind::Smooth),
            "noise" => Ok(FieldKind::Noise),
            "mixed" => Ok(FieldKind::Mixed),
            _ => Err(Error::Config(format!("unknown field kind '{s}'"))),
        }
    }
}

struct Wave {
    freq: Vec<f64>,
    phase: f64,
    amp: f64,
}

fn smooth(grid: &Grid, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let waves: Vec<Wave> = (0..4)
        .map(|i| Wave {
            freq: (0..grid.ndims()).map(|_| rng.gen_range(0.5..3.0)).collect(),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            amp: 1.0 / (1 + i) as f64,
        })
        .collect();
    let dims = grid.dims();
    let mut coord = vec![0usize; dims.len()];
    let mut out = Vec::with_capacity(grid.len());
    for _ in 0..grid.len() {
        let v = waves
            .iter()
            .map(|w| {
                let arg: f64 = coord
                    .iter()
                    .zip(dims)
                    .zip(&w.freq)
                    .map(|((&c, &n), f)| std::f64::consts::TAU * f * c as f64 / n.max(2) as f64)
                    .sum();
                w.amp * (arg + w.phase).sin()
            })
            .sum();
        out.push(v);
        for d in (0..dims.len()).rev() {
            coord[d] += 1;
            if coord[d] < dims[d] {
                break;
            }
            coord[d] = 0;
        }
    }
    out
}

/// Deterministic field of `kind` on `dims`.
pub fn generate(kind: FieldKind, dims: &[usize], seed: u64) -> Result<Vec<f64>> {
    let grid = Grid::new(dims.to_vec())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match kind {
        FieldKind::Smooth => smooth(&grid, &mut rng),
        FieldKind::Noise => (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        FieldKind::Mixed => {
            let base = smooth(&grid, &mut rng);
            base.into_iter().map(|v| v + 0.05 * rng.gen_range(-1.0..1.0)).collect()
        }
    })
}

/// Three smooth components scaled to peak magnitude 0.9.
pub fn velocity_field(dims: &[usize], seed: u64) -> Result<Vec<Vec<f64>>> {
    (0..3)
        .map(|c| {
            let v = generate(FieldKind::Mixed, dims, seed.wrapping_mul(31).wrapping_add(c))?;
            let peak = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let scale = if peak > 0.0 { 0.9 / peak } else { 1.0 };
            Ok(v.into_iter().map(|x| x * scale).collect())
        })
        .collect()
}

pub fn value_range(values: &[f64]) -> f64 {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if lo > hi {
        0.0
    } else {
        hi - lo
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_shaped() {
        for kind in FieldKind::ALL {
            let a = generate(kind, &[7, 5], 3).unwrap();
            assert_eq!(a.len(), 35);
            assert_eq!(a, generate(kind, &[7, 5], 3).unwrap());
            assert_ne!(a, generate(kind, &[7, 5], 4).unwrap());
            assert!(a.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn velocity_components_share_scale() {
        let v = velocity_field(&[16, 16], 1).unwrap();
        for c in &v {
            let peak = c.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            assert!((peak - 0.9).abs() < 1e-12);
        }
        assert_eq!(value_range(&[1.0, -2.0, 0.5]), 3.0);
        assert_eq!(value_range(&[]), 0.0);
    }
}
