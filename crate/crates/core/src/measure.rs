//! Atomic measures on the real line and their quantile calculus.
//!
//! A measure here is a finite sum of point masses, kept as a sorted list of
//! `(position, mass)` atoms. This is the natural state space for the sticky
//! particle machinery: every object the optimization ultimately touches
//! (clusters, empirical measures of the particle system) is atomic, and the
//! CDF/quantile formulas below are exact on atoms.
//!
//! Conventions:
//!
//! - `cdf_at(x)` is the right-continuous CDF `λ((-∞, x])`.
//! - `quantile(a)` is the generalized inverse `inf{x : a ≤ F(x)}`; at `a = 0`
//!   it returns the leftmost atom position (the essential infimum of the
//!   support) rather than `-∞`.
//! - `sgn_drift(x)` is the net pairwise drift felt at `x`:
//!   `(mass right of x − mass left of x)/2`, mass at `x` itself excluded.

use serde::{Deserialize, Serialize};

use crate::cluster::ClusteringDeviation;
use crate::{Error, Result};

/// Atom positions closer than this are coalesced at construction.
pub const COALESCE_TOL: f64 = 1e-12;

/// Relative tolerance for mass comparisons.
pub const MASS_REL_TOL: f64 = 1e-12;

/// Default truncation depth `K` of the weak-distance series.
pub const WEAK_DISTANCE_DEPTH: u32 = 64;

/// A finite positive measure on ℝ stored as sorted atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MeasureJson", into = "MeasureJson")]
pub struct AtomicMeasure {
    atoms: Vec<(f64, f64)>,
    total_mass: f64,
}

/// Wire form: `{"atoms": [[x, mass], ...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct MeasureJson {
    atoms: Vec<(f64, f64)>,
}

impl TryFrom<MeasureJson> for AtomicMeasure {
    type Error = Error;
    fn try_from(j: MeasureJson) -> Result<Self> {
        AtomicMeasure::new(j.atoms)
    }
}

impl From<AtomicMeasure> for MeasureJson {
    fn from(m: AtomicMeasure) -> Self {
        MeasureJson { atoms: m.atoms }
    }
}

impl AtomicMeasure {
    /// Builds a measure from `(position, mass)` pairs.
    ///
    /// Atoms are sorted; positions within [`COALESCE_TOL`] of each other are
    /// merged by summing masses, which keeps the strictly-increasing invariant
    /// robust under float noise.
    pub fn new(mut atoms: Vec<(f64, f64)>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::EmptyMeasure);
        }
        for &(x, m) in &atoms {
            if !x.is_finite() {
                return Err(Error::NonFinitePosition(x));
            }
            if !m.is_finite() || m <= 0.0 {
                return Err(Error::NonPositiveMass(m));
            }
        }
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(atoms.len());
        for (x, m) in atoms {
            match merged.last_mut() {
                Some(last) if (x - last.0).abs() <= COALESCE_TOL => last.1 += m,
                _ => merged.push((x, m)),
            }
        }
        let total_mass = merged.iter().map(|&(_, m)| m).sum();
        Ok(AtomicMeasure {
            atoms: merged,
            total_mass,
        })
    }

    /// Unit point mass at `x`.
    pub fn dirac(x: f64) -> Self {
        AtomicMeasure::new(vec![(x, 1.0)]).expect("unit dirac is valid")
    }

    /// Point mass `m` at `x`.
    pub fn weighted_dirac(x: f64, m: f64) -> Result<Self> {
        AtomicMeasure::new(vec![(x, m)])
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    pub fn support_min(&self) -> f64 {
        self.atoms[0].0
    }

    pub fn support_max(&self) -> f64 {
        self.atoms[self.atoms.len() - 1].0
    }

    /// Cumulative masses after each atom; last entry equals the total mass.
    fn cumulative(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.atoms
            .iter()
            .map(|&(_, m)| {
                acc += m;
                acc
            })
            .collect()
    }

    /// Right-continuous CDF `λ((-∞, x])`.
    pub fn cdf_at(&self, x: f64) -> f64 {
        self.atoms
            .iter()
            .take_while(|&&(p, _)| p <= x)
            .map(|&(_, m)| m)
            .sum()
    }

    /// Generalized inverse CDF `inf{x : a ≤ F(x)}`.
    ///
    /// `a = 0` returns the leftmost atom position. Levels outside
    /// `[0, total_mass]` (beyond a small tolerance) are rejected.
    pub fn quantile(&self, a: f64) -> Result<f64> {
        let tol = MASS_REL_TOL * self.total_mass.max(1.0);
        if !a.is_finite() || a < -tol || a > self.total_mass + tol {
            return Err(Error::QuantileOutOfRange {
                level: a,
                total_mass: self.total_mass,
            });
        }
        Ok(self.quantile_clamped(a))
    }

    /// Quantile with the level clamped into `[0, total_mass]`.
    pub(crate) fn quantile_clamped(&self, a: f64) -> f64 {
        let a = a.clamp(0.0, self.total_mass);
        if a <= 0.0 {
            return self.atoms[0].0;
        }
        let mut acc = 0.0;
        for &(x, m) in &self.atoms {
            acc += m;
            if a <= acc {
                return x;
            }
        }
        self.atoms[self.atoms.len() - 1].0
    }

    /// Net pairwise drift felt at `x`: `(mass in (x,∞) − mass in (-∞,x))/2`.
    ///
    /// Mass located exactly at `x` is excluded, matching `sgn(0) = 0`.
    pub fn sgn_drift(&self, x: f64) -> f64 {
        let mut left = 0.0;
        let mut right = 0.0;
        for &(p, m) in &self.atoms {
            if p < x {
                left += m;
            } else if p > x {
                right += m;
            }
        }
        0.5 * (right - left)
    }

    /// Pair energy `Σ_{c<c'} m_c m_{c'} |x_c − x_{c'}|`.
    pub fn pair_energy(&self) -> f64 {
        let mut mass_left = 0.0;
        let mut weighted_left = 0.0;
        let mut total = 0.0;
        for &(x, m) in &self.atoms {
            total += m * (x * mass_left - weighted_left);
            mass_left += m;
            weighted_left += m * x;
        }
        total
    }

    /// Mass-weighted mean position.
    pub fn barycenter(&self) -> f64 {
        self.atoms.iter().map(|&(x, m)| x * m).sum::<f64>() / self.total_mass
    }

    fn check_equal_mass(&self, other: &AtomicMeasure) -> Result<()> {
        let scale = self.total_mass.max(1.0);
        if (self.total_mass - other.total_mass).abs() > MASS_REL_TOL * scale {
            return Err(Error::MassMismatch(self.total_mass, other.total_mass));
        }
        Ok(())
    }

    /// 1-Wasserstein distance via the inverse-CDF formula,
    /// `∫_0^m |Q[λ](a) − Q[λ'](a)| da`, computed exactly over the merged
    /// slab partition of the two quantile functions.
    pub fn w1_distance(&self, other: &AtomicMeasure) -> Result<f64> {
        self.check_equal_mass(other)?;
        let m = self.total_mass.min(other.total_mass);
        let cum_a = self.cumulative();
        let cum_b = other.cumulative();
        let mut i = 0;
        let mut j = 0;
        let mut level = 0.0;
        let mut total = 0.0;
        while level < m {
            let next = cum_a[i].min(cum_b[j]).min(m);
            total += (next - level) * (self.atoms[i].0 - other.atoms[j].0).abs();
            level = next;
            if next >= m {
                break;
            }
            if i + 1 < cum_a.len() && cum_a[i] <= next {
                i += 1;
            }
            if j + 1 < cum_b.len() && cum_b[j] <= next {
                j += 1;
            }
        }
        Ok(total)
    }

    /// `∫_a^b |F[self] − F[other]| dx`, exact for step CDFs.
    fn cdf_l1_on_window(&self, other: &AtomicMeasure, a: f64, b: f64) -> f64 {
        let mut xs: Vec<f64> = Vec::with_capacity(self.atoms.len() + other.atoms.len() + 2);
        xs.push(a);
        for &(x, _) in self.atoms.iter().chain(other.atoms.iter()) {
            if x > a && x < b {
                xs.push(x);
            }
        }
        xs.push(b);
        xs.sort_by(f64::total_cmp);
        let mut total = 0.0;
        for w in xs.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            if hi <= lo {
                continue;
            }
            let mid = 0.5 * (lo + hi);
            total += (hi - lo) * (self.cdf_at(mid) - other.cdf_at(mid)).abs();
        }
        total
    }

    /// Weak-topology metric `Σ_{k≥1} 2^{-k} min{1, ∫_{-k}^{k} |F − F'| dx}`,
    /// truncated at the default depth [`WEAK_DISTANCE_DEPTH`].
    pub fn weak_distance(&self, other: &AtomicMeasure) -> Result<f64> {
        Ok(self
            .weak_distance_truncated(other, WEAK_DISTANCE_DEPTH)?
            .value)
    }

    /// Truncated weak distance together with the series tail bound `2^{-K}`.
    pub fn weak_distance_truncated(
        &self,
        other: &AtomicMeasure,
        depth: u32,
    ) -> Result<WeakDistance> {
        self.check_equal_mass(other)?;
        let mut value = 0.0;
        let mut weight = 1.0;
        for k in 1..=depth {
            weight *= 0.5;
            let integral = self.cdf_l1_on_window(other, -(k as f64), k as f64);
            value += weight * integral.min(1.0);
        }
        Ok(WeakDistance {
            value,
            tail_bound: weight,
        })
    }

    /// Splits the measure into CDF slabs of prescribed masses.
    ///
    /// Piece `c` carries the mass between cumulative levels
    /// `m_1 + … + m_{c-1}` and `m_1 + … + m_c`; adjacent pieces may share an
    /// atom position. The pieces recompose to the original measure atom-wise.
    pub fn divide(&self, masses: &[f64]) -> Result<Vec<AtomicMeasure>> {
        if masses.is_empty() {
            return Err(Error::EmptyClusterList);
        }
        for &m in masses {
            if !m.is_finite() || m <= 0.0 {
                return Err(Error::NonPositiveMass(m));
            }
        }
        let got: f64 = masses.iter().sum();
        if (got - self.total_mass).abs() > MASS_REL_TOL * self.total_mass.max(1.0) {
            return Err(Error::MassSumMismatch {
                got,
                expected: self.total_mass,
            });
        }
        let cum = self.cumulative();
        let mut pieces = Vec::with_capacity(masses.len());
        let mut level = 0.0;
        for (c, &mc) in masses.iter().enumerate() {
            // Snap the last upper level to the exact total mass.
            let upper = if c + 1 == masses.len() {
                self.total_mass
            } else {
                level + mc
            };
            let mut atoms = Vec::new();
            let mut prev = 0.0f64;
            for (k, &(x, _)) in self.atoms.iter().enumerate() {
                let lo = prev.max(level);
                let hi = cum[k].min(upper);
                if hi > lo {
                    atoms.push((x, hi - lo));
                }
                prev = cum[k];
                if prev >= upper {
                    break;
                }
            }
            if atoms.is_empty() {
                // Zero-width slab from float round-off: pin it to the quantile.
                atoms.push((self.quantile_clamped(upper), mc.max(f64::MIN_POSITIVE)));
            }
            pieces.push(AtomicMeasure::new(atoms)?);
            level = upper;
        }
        Ok(pieces)
    }

    /// Multiplies every atom position by `factor > 0`.
    pub fn scale_positions(&self, factor: f64) -> Result<AtomicMeasure> {
        if !factor.is_finite() || factor <= 0.0 {
            return Err(Error::NonPositiveFactor(factor));
        }
        AtomicMeasure::new(self.atoms.iter().map(|&(x, m)| (x * factor, m)).collect())
    }

    /// Multiplies every atom mass by `factor > 0`.
    pub fn scale_masses(&self, factor: f64) -> Result<AtomicMeasure> {
        if !factor.is_finite() || factor <= 0.0 {
            return Err(Error::NonPositiveFactor(factor));
        }
        AtomicMeasure::new(self.atoms.iter().map(|&(x, m)| (x, m * factor)).collect())
    }

    /// Quantile-coordinate view: constant slabs of the quantile function.
    pub fn quantile_view(&self) -> QuantileView {
        let mut breakpoints = Vec::with_capacity(self.atoms.len() + 1);
        breakpoints.push(0.0);
        breakpoints.extend(self.cumulative());
        let values = self.atoms.iter().map(|&(x, _)| x).collect();
        QuantileView {
            breakpoints,
            values,
        }
    }
}

/// Truncated weak distance and the bound on the discarded series tail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakDistance {
    pub value: f64,
    pub tail_bound: f64,
}

/// The quantile function of an atomic measure as constant slabs:
/// `Q(a) = values[i]` for `a ∈ (breakpoints[i], breakpoints[i+1]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileView {
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
}

impl QuantileView {
    /// Rebuilds the measure; inverse of [`AtomicMeasure::quantile_view`].
    pub fn to_measure(&self) -> Result<AtomicMeasure> {
        if self.values.len() + 1 != self.breakpoints.len() {
            return Err(Error::invalid(
                "quantile view needs one more breakpoint than values",
            ));
        }
        if self.values.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("quantile view values must be nondecreasing"));
        }
        let atoms = self
            .values
            .iter()
            .zip(self.breakpoints.windows(2))
            .map(|(&x, w)| (x, w[1] - w[0]))
            .collect();
        AtomicMeasure::new(atoms)
    }
}

/// Approximates a measure path by a clustering deviation with `n` clusters of
/// equal mass, placed at the barycenters of the `n` equal-mass CDF slabs of
/// each snapshot.
///
/// The total-variation gap to the input at each sample is at most
/// `total_mass / n`.
pub fn cluster_approximate(
    times: &[f64],
    snapshots: &[AtomicMeasure],
    n: usize,
) -> Result<ClusteringDeviation> {
    if snapshots.is_empty() || times.is_empty() {
        return Err(Error::EmptyPath);
    }
    if times.len() != snapshots.len() {
        return Err(Error::LengthMismatch(times.len(), snapshots.len()));
    }
    if n == 0 {
        return Err(Error::invalid("cluster count must be at least 1"));
    }
    if times[0] != 0.0 || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::BadSnapshotTimes);
    }
    let total = snapshots[0].total_mass();
    for s in snapshots {
        if (s.total_mass() - total).abs() > MASS_REL_TOL * total.max(1.0) {
            return Err(Error::MassMismatch(total, s.total_mass()));
        }
    }
    let horizon = *times.last().unwrap();
    if times.len() == 1 {
        return Err(Error::BadSnapshotTimes);
    }
    let piece_mass = total / n as f64;
    let masses = vec![piece_mass; n];
    let mut knots: Vec<Vec<(f64, f64)>> = vec![Vec::with_capacity(times.len()); n];
    for (&s, snap) in times.iter().zip(snapshots) {
        let pieces = snap.divide(&masses)?;
        for (c, piece) in pieces.iter().enumerate() {
            knots[c].push((s, piece.barycenter()));
        }
    }
    ClusteringDeviation::new(masses, knots, horizon)
}
