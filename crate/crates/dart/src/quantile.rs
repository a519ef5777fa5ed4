//! Piecewise-constant 1D distributions and differentiable uniform quantiles.
//!
//! A distribution of length `n` assigns mass `m[i]` uniformly to the interval
//! `(i, i+1]`. Its CDF is piecewise linear, so uniform quantiles are found by
//! linear inversion inside the containing bin and carry analytic derivatives
//! with respect to the bin masses almost everywhere. At a kink (a quantile
//! sitting exactly on a bin edge) the right-hand segment's derivative is used.

use crate::error::{DartError, Result};

/// Quantiles closer than this to a bin edge are flagged as sitting on a
/// subgradient kink.
pub const BOUNDARY_TOL: f64 = 1e-12;

/// Nonnegative bin masses over `(i, i+1]`, total mass > 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseDistribution {
    masses: Vec<f64>,
    total: f64,
}

impl PiecewiseDistribution {
    pub fn new(masses: Vec<f64>) -> Result<Self> {
        if masses.is_empty() {
            return Err(DartError::Empty { what: "bin masses" });
        }
        for (i, &m) in masses.iter().enumerate() {
            if !m.is_finite() || m < 0.0 {
                return Err(DartError::NonFinite {
                    row: 0,
                    col: i,
                    value: m,
                });
            }
        }
        let total: f64 = masses.iter().sum();
        if total <= 0.0 {
            return Err(DartError::invalid("total mass", format!("{total} <= 0")));
        }
        Ok(Self { masses, total })
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn total_mass(&self) -> f64 {
        self.total
    }

    /// CDF value `F(x) = sum_{i < floor(x)} m[i] + frac(x) * m[floor(x)]`
    /// for `x` in `[0, n]`.
    pub fn cdf(&self, x: f64) -> Result<f64> {
        let n = self.masses.len() as f64;
        if !x.is_finite() || x < 0.0 || x > n {
            return Err(DartError::OutOfRange {
                what: "cdf argument",
                value: x,
                lo: 0.0,
                hi: n,
            });
        }
        let ix = x.floor() as usize;
        let acc: f64 = self.masses[..ix.min(self.masses.len())].iter().sum();
        if ix >= self.masses.len() {
            return Ok(acc);
        }
        Ok(acc + (x - ix as f64) * self.masses[ix])
    }

    /// The `K-1` points splitting the distribution into `K` segments of equal
    /// integrated mass.
    pub fn uniform_quantiles(&self, segments: usize) -> Result<QuantileSet> {
        let solve = self.solve_quantiles(segments)?;
        Ok(QuantileSet {
            points: solve.iter().map(|r| r.point).collect(),
            segments,
        })
    }

    fn solve_quantiles(&self, segments: usize) -> Result<Vec<QuantileRecord>> {
        if segments == 0 {
            return Err(DartError::invalid("segment count", "0"));
        }
        if self.total <= 0.0 {
            return Err(DartError::invalid("total mass", "<= 0"));
        }
        let n = self.masses.len();
        let mut records = Vec::with_capacity(segments - 1);
        // Containing bin j satisfies C_{j-1} <= t < C_j (half-open, matching
        // the (i, i+1] bin convention); targets are increasing so the scan
        // advances monotonically.
        let mut bin = 0usize;
        let mut cum_before = 0.0f64;
        for k in 1..segments {
            let target = (k as f64 / segments as f64) * self.total;
            while bin < n && cum_before + self.masses[bin] <= target {
                cum_before += self.masses[bin];
                bin += 1;
            }
            if bin >= n {
                // Rounding pushed the target to >= total mass: back into the
                // last positive bin and clamp.
                bin = n - 1;
                cum_before -= self.masses[bin];
                while self.masses[bin] == 0.0 && bin > 0 {
                    bin -= 1;
                    cum_before -= self.masses[bin];
                }
            }
            let mass = self.masses[bin];
            let offset = target - cum_before;
            let frac = (offset / mass).min(1.0);
            records.push(QuantileRecord {
                bin,
                offset,
                mass,
                target_fraction: k as f64 / segments as f64,
                point: bin as f64 + frac,
                boundary: frac <= BOUNDARY_TOL || 1.0 - frac <= BOUNDARY_TOL,
            });
        }
        Ok(records)
    }

    /// Dense matrix of `dq_k / dm_i`.
    pub fn quantile_jacobian(&self, segments: usize, mode: MassMode) -> Result<QuantileJacobian> {
        let records = self.solve_quantiles(segments)?;
        let n = self.masses.len();
        let rows = records.len();
        let mut values = vec![0.0; rows * n];
        let mut boundary = Vec::with_capacity(rows);
        for (r, rec) in records.iter().enumerate() {
            let tgrad = match mode {
                MassMode::Free => rec.target_fraction,
                MassMode::Fixed => 0.0,
            };
            let row = &mut values[r * n..(r + 1) * n];
            for (i, slot) in row.iter_mut().enumerate() {
                let blocked = if i < rec.bin { 1.0 } else { 0.0 };
                *slot = (tgrad - blocked) / rec.mass;
            }
            row[rec.bin] = tgrad / rec.mass - rec.offset / (rec.mass * rec.mass);
            boundary.push(rec.boundary);
        }
        Ok(QuantileJacobian {
            rows,
            cols: n,
            values,
            boundary,
        })
    }

    /// `upstream^T * jacobian` computed in O(n + K) without the dense matrix.
    pub fn quantile_vjp(
        &self,
        segments: usize,
        mode: MassMode,
        upstream: &[f64],
    ) -> Result<Vec<f64>> {
        let records = self.solve_quantiles(segments)?;
        if upstream.len() != records.len() {
            return Err(DartError::DimMismatch {
                what: "quantile upstream",
                expected: records.len().to_string(),
                actual: upstream.len().to_string(),
            });
        }
        let n = self.masses.len();
        // dq_k/dm_i = (t'_k - [i < j_k]) / m_{j_k} - [i == j_k] o_k / m_{j_k}^2,
        // so the contraction splits into a scalar, a suffix sum over
        // containing bins, and a per-bin diagonal term.
        let mut shared = 0.0f64;
        let mut per_bin = vec![0.0f64; n];
        let mut diag = vec![0.0f64; n];
        for (rec, &u) in records.iter().zip(upstream) {
            let tgrad = match mode {
                MassMode::Free => rec.target_fraction,
                MassMode::Fixed => 0.0,
            };
            shared += u * tgrad / rec.mass;
            per_bin[rec.bin] += u / rec.mass;
            diag[rec.bin] += u * rec.offset / (rec.mass * rec.mass);
        }
        let mut out = vec![0.0f64; n];
        let mut suffix = 0.0f64;
        for i in (0..n).rev() {
            out[i] = shared - suffix - diag[i];
            suffix += per_bin[i];
        }
        Ok(out)
    }
}

/// Whether the total mass is free to move with a perturbed bin or held fixed
/// (pre-normalized input whose quantile targets are constants).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MassMode {
    Free,
    Fixed,
}

#[derive(Debug, Clone)]
struct QuantileRecord {
    bin: usize,
    /// Mass between the start of the containing bin and the target.
    offset: f64,
    mass: f64,
    target_fraction: f64,
    point: f64,
    boundary: bool,
}

/// Uniform quantile points in `(0, n)`, strictly increasing for strictly
/// positive masses.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileSet {
    points: Vec<f64>,
    segments: usize,
}

impl QuantileSet {
    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn segments(&self) -> usize {
        self.segments
    }
}

/// Dense `(K-1) x n` matrix of quantile derivatives, with per-row flags for
/// quantiles that sit on a bin edge (one-sided derivative in use).
#[derive(Debug, Clone)]
pub struct QuantileJacobian {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    boundary: Vec<bool>,
}

impl QuantileJacobian {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }

    pub fn boundary_flags(&self) -> &[bool] {
        &self.boundary
    }

    pub fn vjp(&self, upstream: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, &u) in upstream.iter().enumerate() {
            for (i, o) in out.iter_mut().enumerate() {
                *o += u * self.at(r, i);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn dist(masses: &[f64]) -> PiecewiseDistribution {
        PiecewiseDistribution::new(masses.to_vec()).unwrap()
    }

    fn points(masses: &[f64], k: usize) -> Vec<f64> {
        dist(masses).uniform_quantiles(k).unwrap().points().to_vec()
    }

    #[test]
    fn cdf_uniform_density() {
        assert_eq!(dist(&[1.0, 1.0, 1.0, 1.0]).cdf(2.5).unwrap(), 2.5);
    }

    #[test]
    fn cdf_hand_value() {
        // F(x) = 3x on (0, 1]
        assert_eq!(dist(&[3.0, 1.0]).cdf(0.5).unwrap(), 1.5);
    }

    #[test]
    fn cdf_at_right_end_is_total_mass() {
        let d = dist(&[0.3, 2.0, 0.7]);
        assert!((d.cdf(3.0).unwrap() - d.total_mass()).abs() < 1e-15);
        assert_eq!(d.cdf(0.0).unwrap(), 0.0);
    }

    #[test]
    fn cdf_rejects_out_of_range() {
        assert!(dist(&[1.0]).cdf(-0.1).is_err());
        assert!(dist(&[1.0]).cdf(1.1).is_err());
    }

    #[test]
    fn quantiles_uniform() {
        assert_eq!(points(&[1.0, 1.0, 1.0, 1.0], 4), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn quantiles_hand_inversions() {
        // t = 2 inside bin 0 with density 3
        let q = points(&[3.0, 1.0], 2);
        assert!((q[0] - 2.0 / 3.0).abs() < 1e-15);
        // t = 2 at offset 1 into bin 1 with density 3
        let q = points(&[1.0, 3.0], 2);
        assert!((q[0] - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn quantiles_skip_zero_mass_bins() {
        // Mass only in bins 0 and 3; the median must land on the edge shared
        // with the zero-mass run, assigned by the half-open convention.
        let q = points(&[1.0, 0.0, 0.0, 1.0], 2);
        assert_eq!(q[0], 3.0);
    }

    #[test]
    fn quantile_count_and_errors() {
        assert!(dist(&[1.0]).uniform_quantiles(0).is_err());
        assert!(dist(&[1.0]).uniform_quantiles(1).unwrap().points().is_empty());
        assert!(PiecewiseDistribution::new(vec![0.0, 0.0]).is_err());
        assert!(PiecewiseDistribution::new(vec![]).is_err());
        assert!(PiecewiseDistribution::new(vec![-1.0, 2.0]).is_err());
    }

    #[test]
    fn jacobian_hand_values() {
        let j = dist(&[3.0, 1.0])
            .quantile_jacobian(2, MassMode::Free)
            .unwrap();
        assert!((j.at(0, 0) - (-1.0 / 18.0)).abs() < 1e-15);
        assert!((j.at(0, 1) - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn jacobian_right_of_bin_through_target_only() {
        // q_2 = 2 for uniform masses; perturbing m_3 moves only the target.
        let j = dist(&[1.0, 1.0, 1.0, 1.0])
            .quantile_jacobian(4, MassMode::Free)
            .unwrap();
        assert!((j.at(1, 3) - 0.5).abs() < 1e-15);
        // offset-0 quantiles are boundary cases
        assert!(j.boundary_flags().iter().all(|&b| b));
    }

    #[test]
    fn fixed_mass_rows_vanish_right_of_containing_bin() {
        let d = dist(&[0.5, 1.5, 0.75, 1.25, 0.5]);
        let j = d.quantile_jacobian(3, MassMode::Fixed).unwrap();
        let recs = d.solve_quantiles(3).unwrap();
        for (r, rec) in recs.iter().enumerate() {
            for i in rec.bin + 1..d.len() {
                assert_eq!(j.at(r, i), 0.0);
            }
        }
    }

    fn fd_quantile(masses: &[f64], k: usize, i: usize, h: f64) -> Vec<f64> {
        let mut plus = masses.to_vec();
        plus[i] += h;
        let mut minus = masses.to_vec();
        minus[i] -= h;
        let qp = points(&plus, k);
        let qm = points(&minus, k);
        qp.iter().zip(&qm).map(|(p, m)| (p - m) / (2.0 * h)).collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(7);
        let mut checked = 0usize;
        while checked < 40 {
            let n = rng.gen_range(2..=16);
            let k = rng.gen_range(2..=n);
            let masses: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..10.0)).collect();
            let d = dist(&masses);
            let q = d.uniform_quantiles(k).unwrap();
            // skip near-kink samples: one-sided derivatives there
            if q.points()
                .iter()
                .any(|p| (p - p.round()).abs() < 1e-4)
            {
                continue;
            }
            let jac = d.quantile_jacobian(k, MassMode::Free).unwrap();
            for i in 0..n {
                let fd = fd_quantile(&masses, k, i, 1e-6);
                for r in 0..k - 1 {
                    assert!(
                        rel_err(jac.at(r, i), fd[r]) < 1e-5,
                        "n={n} k={k} i={i} r={r}: {} vs {}",
                        jac.at(r, i),
                        fd[r]
                    );
                }
            }
            checked += 1;
        }
    }

    #[test]
    fn vjp_matches_dense_product() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..20 {
            let masses: Vec<f64> = (0..8).map(|_| rng.gen_range(0.1..10.0)).collect();
            let d = dist(&masses);
            let upstream: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for mode in [MassMode::Free, MassMode::Fixed] {
                let dense = d.quantile_jacobian(4, mode).unwrap().vjp(&upstream);
                let fast = d.quantile_vjp(4, mode, &upstream).unwrap();
                for (a, b) in dense.iter().zip(&fast) {
                    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn vjp_unit_vector_recovers_row() {
        let d = dist(&[2.0, 1.0, 3.0, 0.5]);
        let jac = d.quantile_jacobian(4, MassMode::Free).unwrap();
        for k in 0..3 {
            let mut e = vec![0.0; 3];
            e[k] = 1.0;
            let row = d.quantile_vjp(4, MassMode::Free, &e).unwrap();
            for i in 0..4 {
                assert!((row[i] - jac.at(k, i)).abs() < 1e-14);
            }
        }
        let zero = d.quantile_vjp(4, MassMode::Free, &[0.0; 3]).unwrap();
        assert!(zero.iter().all(|&g| g == 0.0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn mass_vec() -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(0.01f64..10.0, 1..32)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(128))]

            #[test]
            fn cdf_of_quantile_hits_target(masses in mass_vec(), k in 2usize..12) {
                let d = dist(&masses);
                let q = d.uniform_quantiles(k).unwrap();
                for (idx, &p) in q.points().iter().enumerate() {
                    let target = (idx + 1) as f64 / k as f64 * d.total_mass();
                    let f = d.cdf(p).unwrap();
                    prop_assert!((f - target).abs() <= 1e-12 * d.total_mass().max(1.0));
                }
            }

            #[test]
            fn quantiles_strictly_increasing(masses in mass_vec(), k in 2usize..12) {
                let q = dist(&masses).uniform_quantiles(k).unwrap();
                for w in q.points().windows(2) {
                    prop_assert!(w[0] < w[1]);
                }
            }

            #[test]
            fn scale_invariance(masses in mass_vec(), k in 2usize..12, c in 0.01f64..100.0) {
                let base = points(&masses, k);
                let scaled: Vec<f64> = masses.iter().map(|m| m * c).collect();
                let got = points(&scaled, k);
                for (a, b) in base.iter().zip(&got) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }

            #[test]
            fn uniform_masses_give_even_grid(n in 1usize..32, k in 2usize..12, m in 0.01f64..10.0) {
                let q = points(&vec![m; n], k);
                for (idx, &p) in q.iter().enumerate() {
                    let expect = (idx + 1) as f64 * n as f64 / k as f64;
                    prop_assert!((p - expect).abs() < 1e-9);
                }
            }
        }
    }
}
