//! Readouts collapsing a final-layer tensor to a scalar kernel value.
//!
//! * FC: the trace `sum_{i,j} T[i,j,i,j]`.
//! * GAP: the mean of all `P^2 Q^2` entries.
//! * LAP(c): the trace averaged over all independent shifts of the two
//!   index pairs within `[-c, c]^2`, i.e. local translation averaging.
//!   The weight of entry `(i,j,i',j')` factorizes into a row multiplicity
//!   `u_row[i,i']` times a column multiplicity `u_col[j,j']`, so the weights
//!   are never materialized as a full tensor.

use crate::error::{Error, Result};
use crate::tensor::{trace4, KernelTensor4, PaddingScheme, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Readout {
    Fc,
    Gap,
    Lap { c: usize, padding: PaddingScheme },
}

impl Readout {
    pub fn lap(c: usize, padding: PaddingScheme) -> Self {
        Readout::Lap { c, padding }
    }

    /// Evaluates the readout; LAP weights are built on the fly.
    pub fn apply<T: Real>(&self, t: &KernelTensor4<T>) -> f64 {
        match *self {
            Readout::Fc => readout_fc(t),
            Readout::Gap => readout_gap(t),
            Readout::Lap { c, padding } => {
                let w = lap_weights(t.p(), t.q(), c, padding);
                readout_lap(t, &w).expect("weights built for this shape")
            }
        }
    }
}

impl std::fmt::Display for Readout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Readout::Fc => f.write_str("fc"),
            Readout::Gap => f.write_str("gap"),
            Readout::Lap { c, padding } => write!(f, "lap{c}-{padding}"),
        }
    }
}

pub fn readout_fc<T: Real>(t: &KernelTensor4<T>) -> f64 {
    trace4(t)
}

pub fn readout_gap<T: Real>(t: &KernelTensor4<T>) -> f64 {
    let n = (t.p() * t.q()) as f64;
    let sum: f64 = t.values().iter().map(|v| v.as_f64()).sum();
    sum / (n * n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LapWeights {
    pub p: usize,
    pub q: usize,
    pub c: usize,
    /// Row multiplicities, `P x P` row-major.
    pub u_row: Vec<f64>,
    /// Column multiplicities, `Q x Q` row-major.
    pub u_col: Vec<f64>,
    /// `1 / (2c + 1)^4`.
    pub scale: f64,
}

impl LapWeights {
    /// Full weight of entry `(i, j, i', j')` (0-based).
    pub fn weight(&self, i: usize, j: usize, i2: usize, j2: usize) -> f64 {
        self.scale * self.u_row[i * self.p + i2] * self.u_col[j * self.q + j2]
    }
}

fn axis_multiplicity(n: usize, c: usize, padding: PaddingScheme) -> Vec<f64> {
    let mut u = vec![0.0; n * n];
    let c = c as i64;
    match padding {
        PaddingScheme::Zero => {
            let n = n as i64;
            for r in 1..=n {
                for r2 in 1..=n {
                    let hi = n.min(r + c).min(r2 + c);
                    let lo = 1.max(r - c).max(r2 - c);
                    u[((r - 1) * n + (r2 - 1)) as usize] = (hi - lo + 1).max(0) as f64;
                }
            }
        }
        PaddingScheme::Circular => {
            // One base position per (delta, delta') with delta - delta' = r - r' (mod n).
            let m = n as i64;
            for d in -c..=c {
                for d2 in -c..=c {
                    let diff = (d - d2).rem_euclid(m);
                    for r in 0..m {
                        let r2 = (r - diff).rem_euclid(m);
                        u[(r * m + r2) as usize] += 1.0;
                    }
                }
            }
        }
    }
    u
}

pub fn lap_weights(p: usize, q: usize, c: usize, padding: PaddingScheme) -> LapWeights {
    let side = (2 * c + 1) as f64;
    LapWeights {
        p,
        q,
        c,
        u_row: axis_multiplicity(p, c, padding),
        u_col: axis_multiplicity(q, c, padding),
        scale: 1.0 / side.powi(4),
    }
}

/// `scale * sum u_row[i,i'] u_col[j,j'] T[i,j,i',j']`. Terms are accumulated
/// in storage order, so with `c = 0` the result is bitwise the trace.
pub fn readout_lap<T: Real>(t: &KernelTensor4<T>, w: &LapWeights) -> Result<f64> {
    if (t.p(), t.q()) != (w.p, w.q) {
        return Err(Error::ShapeMismatch(format!(
            "LAP weights for {}x{} applied to a {}x{} tensor",
            w.p,
            w.q,
            t.p(),
            t.q()
        )));
    }
    let (p, q) = (w.p, w.q);
    let v = t.values();
    let mut total = 0.0;
    for i in 0..p {
        for i2 in 0..p {
            let ur = w.u_row[i * p + i2];
            if ur == 0.0 {
                continue;
            }
            for j in 0..q {
                let base = ((i * q + j) * p + i2) * q;
                let ucol = &w.u_col[j * q..(j + 1) * q];
                for (j2, &uc) in ucol.iter().enumerate() {
                    total += ur * uc * v[base + j2].as_f64();
                }
            }
        }
    }
    Ok(w.scale * total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::resolve0;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(p: usize, q: usize, seed: u64) -> KernelTensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        KernelTensor4::from_fn(p, q, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    /// The literal shift-averaged trace with out-of-range entries read as 0.
    fn lap_brute(t: &KernelTensor4, c: usize, padding: PaddingScheme) -> f64 {
        let (p, q) = (t.p(), t.q());
        let c = c as i64;
        let mut acc = 0.0;
        for di in -c..=c {
            for dj in -c..=c {
                for di2 in -c..=c {
                    for dj2 in -c..=c {
                        for i in 0..p as i64 {
                            for j in 0..q as i64 {
                                let idx = (
                                    resolve0(i + di, p, padding),
                                    resolve0(j + dj, q, padding),
                                    resolve0(i + di2, p, padding),
                                    resolve0(j + dj2, q, padding),
                                );
                                if let (Some(a), Some(b), Some(a2), Some(b2)) = idx {
                                    acc += t.get(a, b, a2, b2);
                                }
                            }
                        }
                    }
                }
            }
        }
        acc / ((2 * c + 1) as f64).powi(4)
    }

    #[test]
    fn fc_and_gap_examples() {
        let diag = KernelTensor4::<f64>::from_fn(2, 2, |i, j, a, b| ((i, j) == (a, b)) as u8 as f64);
        assert_eq!(readout_fc(&diag), 4.0);
        let ones = KernelTensor4::<f64>::from_fn(2, 2, |_, _, _, _| 1.0);
        assert_eq!(readout_gap(&ones), 1.0);
        assert_eq!(readout_gap(&KernelTensor4::<f64>::zeros(2, 2)), 0.0);
    }

    #[test]
    fn fc_and_gap_match_loops() {
        let t = random_tensor(3, 2, 1);
        let (mut tr, mut all) = (0.0, 0.0);
        for i in 0..3 {
            for j in 0..2 {
                tr += t.get(i, j, i, j);
                for i2 in 0..3 {
                    for j2 in 0..2 {
                        all += t.get(i, j, i2, j2);
                    }
                }
            }
        }
        assert!((readout_fc(&t) - tr).abs() < 1e-14);
        assert!((readout_gap(&t) - all / 36.0).abs() < 1e-14);
    }

    #[test]
    fn lap_weight_examples() {
        for padding in [PaddingScheme::Zero, PaddingScheme::Circular] {
            let w = lap_weights(3, 4, 0, padding);
            for i in 0..3 {
                for i2 in 0..3 {
                    assert_eq!(w.u_row[i * 3 + i2], (i == i2) as u8 as f64);
                }
            }
        }
        let w = lap_weights(2, 2, 1, PaddingScheme::Zero);
        assert!(w.u_row.iter().chain(&w.u_col).all(|&u| u == 2.0));
        assert!((w.weight(0, 1, 1, 0) - 4.0 / 81.0).abs() < 1e-15);

        let w = lap_weights(4, 4, 4, PaddingScheme::Zero);
        assert!(w.u_row.iter().all(|&u| u == 4.0));
    }

    #[test]
    fn zero_padding_weights_vanish_beyond_reach() {
        let w = lap_weights(9, 9, 2, PaddingScheme::Zero);
        for i in 0..9usize {
            for i2 in 0..9usize {
                let u = w.u_row[i * 9 + i2];
                assert_eq!(u == 0.0, i.abs_diff(i2) > 4);
                assert_eq!(u, w.u_row[i2 * 9 + i]);
            }
        }
    }

    #[test]
    fn lap_matches_literal_sum() {
        for seed in 0..20 {
            let t = random_tensor(4, 4, 100 + seed);
            for padding in [PaddingScheme::Zero, PaddingScheme::Circular] {
                for c in [0, 1, 2, 4] {
                    let w = lap_weights(4, 4, c, padding);
                    let fast = readout_lap(&t, &w).unwrap();
                    let slow = lap_brute(&t, c, padding);
                    assert!((fast - slow).abs() <= 1e-12, "c={c} {padding}: {fast} vs {slow}");
                }
            }
        }
        let t = random_tensor(3, 5, 7);
        for padding in [PaddingScheme::Zero, PaddingScheme::Circular] {
            let fast = readout_lap(&t, &lap_weights(3, 5, 1, padding)).unwrap();
            assert!((fast - lap_brute(&t, 1, padding)).abs() <= 1e-12);
        }
    }

    #[test]
    fn lap_c0_is_fc() {
        let t = random_tensor(4, 3, 2);
        for padding in [PaddingScheme::Zero, PaddingScheme::Circular] {
            assert_eq!(readout_lap(&t, &lap_weights(4, 3, 0, padding)).unwrap(), readout_fc(&t));
        }
    }

    #[test]
    fn wide_zero_lap_is_proportional_to_gap() {
        let t = random_tensor(4, 4, 3);
        for c in [3, 4, 6] {
            let w = lap_weights(4, 4, c, PaddingScheme::Zero);
            let lap = readout_lap(&t, &w).unwrap();
            let expected = readout_gap(&t) * 256.0 * 16.0 * w.scale;
            assert!((lap - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn gap_is_mean_of_shifted_traces() {
        let t = random_tensor(3, 4, 9);
        let (p, q) = (3usize, 4usize);
        let mut acc = 0.0;
        for di in 0..p {
            for dj in 0..q {
                for di2 in 0..p {
                    for dj2 in 0..q {
                        for i in 0..p {
                            for j in 0..q {
                                acc += t.get((i + di) % p, (j + dj) % q, (i + di2) % p, (j + dj2) % q);
                            }
                        }
                    }
                }
            }
        }
        let n = (p * q) as f64;
        let mean_shifted_trace = acc / (n * n);
        assert!((readout_gap(&t) - mean_shifted_trace / n).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let t = random_tensor(3, 3, 0);
        assert!(readout_lap(&t, &lap_weights(4, 3, 1, PaddingScheme::Zero)).is_err());
    }
}
