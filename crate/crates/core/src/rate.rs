//! Rate and moment functionals on clustering deviations.
//!
//! On a clustering deviation `ν = Σ_c m_c δ_{ν_c}` the quantile-form rate
//! functional reduces to
//!
//! ```text
//! rateq_[s',s''](ν) = ∫_{s'}^{s''} Σ_c (m_c/2) (ν̇_c − Sgn[ν](ν_c))² ds,
//! ```
//!
//! and the moment functional to
//!
//! ```text
//! mom_[s1,s2](ν) = ∫_{s1}^{s2} ( Σ_atoms mass³/24 − Σ_c (m_c/2) ν̇_c² ) ds.
//! ```
//!
//! Both integrands are constant between knot/merge events of the piecewise
//! linear trajectories, so every integral here is evaluated in closed form
//! per segment; there is no quadrature error budget.
//!
//! The moment Lyapunov exponent `L_SHE` is the moment functional evaluated at
//! the optimal deviation of the 1-to-n endpoint problem.

use serde::{Deserialize, Serialize};

use crate::cluster::{optimal_deviation, ClusteringDeviation, MergeTree};
use crate::measure::AtomicMeasure;
use crate::{Error, Result};

/// One time segment's contribution to a functional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentValue {
    pub start: f64,
    pub end: f64,
    pub value: f64,
}

/// Exact per-segment breakdown of the rate functional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateBreakdown {
    pub total: f64,
    pub per_segment: Vec<SegmentValue>,
    pub per_cluster: Vec<f64>,
}

/// Per-segment breakdown of the moment functional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomBreakdown {
    pub total: f64,
    pub per_segment: Vec<SegmentValue>,
}

/// Both sides of the moment-representation identity, computed independently.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub lhs: f64,
    pub rhs: f64,
}

fn clip_interval(dev: &ClusteringDeviation, interval: (f64, f64)) -> Result<(f64, f64)> {
    let (a, b) = interval;
    let tol = 1e-12 * dev.horizon().max(1.0);
    if !a.is_finite() || !b.is_finite() || a < -tol || b > dev.horizon() + tol || a > b + tol {
        return Err(Error::IntervalOutOfRange(a, b));
    }
    Ok((a.clamp(0.0, dev.horizon()), b.clamp(0.0, dev.horizon())))
}

/// Segment times of the deviation restricted to `[a, b]`.
fn segment_times(dev: &ClusteringDeviation, a: f64, b: f64) -> Vec<f64> {
    let mut times = vec![a];
    times.extend(
        dev.knot_times()
            .into_iter()
            .filter(|&t| t > a + 1e-15 && t < b - 1e-15),
    );
    times.push(b);
    times
}

/// Cluster velocities and coincidence grouping on one segment.
///
/// Returns `(velocities, group index per cluster, group masses)`; clusters
/// whose positions agree at the segment midpoint (to coalescing accuracy)
/// form one atom.
fn segment_kinematics(
    dev: &ClusteringDeviation,
    t0: f64,
    t1: f64,
) -> (Vec<f64>, Vec<usize>, Vec<f64>) {
    let n = dev.n_clusters();
    let mid = 0.5 * (t0 + t1);
    let pos = dev.positions(mid);
    let mut velocities = Vec::with_capacity(n);
    for c in 0..n {
        velocities.push(dev.trajectory(c).slope_between(t0, t1));
    }
    let mut group = vec![0usize; n];
    let mut group_mass = vec![dev.masses()[0]];
    for c in 1..n {
        if (pos[c] - pos[c - 1]).abs() <= 1e-12 * (1.0 + pos[c].abs()) {
            group[c] = group[c - 1];
            group_mass[group[c]] += dev.masses()[c];
        } else {
            group[c] = group[c - 1] + 1;
            group_mass.push(dev.masses()[c]);
        }
    }
    (velocities, group, group_mass)
}

/// Drift felt by each coincidence group: `(mass right − mass left)/2`,
/// the group's own mass excluded.
fn group_sgn(group_mass: &[f64]) -> Vec<f64> {
    let total: f64 = group_mass.iter().sum();
    let mut below = 0.0;
    group_mass
        .iter()
        .map(|&m| {
            let above = total - below - m;
            let sgn = 0.5 * (above - below);
            below += m;
            sgn
        })
        .collect()
}

/// Rate functional of a clustering deviation over `interval`, with the exact
/// per-segment and per-cluster breakdown.
pub fn rateq_clustering(dev: &ClusteringDeviation, interval: (f64, f64)) -> Result<RateBreakdown> {
    let (a, b) = clip_interval(dev, interval)?;
    let times = segment_times(dev, a, b);
    let mut per_segment = Vec::with_capacity(times.len().saturating_sub(1));
    let mut per_cluster = vec![0.0; dev.n_clusters()];
    let mut total = 0.0;
    for w in times.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        if t1 <= t0 {
            continue;
        }
        let len = t1 - t0;
        let (velocities, group, group_mass) = segment_kinematics(dev, t0, t1);
        let sgn = group_sgn(&group_mass);
        let mut value = 0.0;
        for c in 0..dev.n_clusters() {
            let dev_c = velocities[c] - sgn[group[c]];
            let contrib = len * 0.5 * dev.masses()[c] * dev_c * dev_c;
            per_cluster[c] += contrib;
            value += contrib;
        }
        per_segment.push(SegmentValue {
            start: t0,
            end: t1,
            value,
        });
        total += value;
    }
    Ok(RateBreakdown {
        total,
        per_segment,
        per_cluster,
    })
}

/// Closed-form rate of an optimal deviation: `Σ_b horizon (m_b/2) d_b²`.
pub fn rateq_optimal(
    tree: &MergeTree,
    masses: &[f64],
    horizon: f64,
    drifts: &[f64],
) -> Result<f64> {
    if drifts.len() != tree.branches.len() {
        return Err(Error::InconsistentTree(masses.len()));
    }
    let mut total = 0.0;
    for (branch, &d) in tree.branches.iter().zip(drifts) {
        let mass: f64 = branch
            .iter()
            .map(|&c| {
                masses
                    .get(c)
                    .copied()
                    .ok_or(Error::InconsistentTree(masses.len()))
            })
            .sum::<Result<f64>>()?;
        total += horizon * 0.5 * mass * d * d;
    }
    Ok(total)
}

/// Moment functional over `interval` with its per-segment breakdown.
pub fn mom_breakdown(dev: &ClusteringDeviation, interval: (f64, f64)) -> Result<MomBreakdown> {
    let (a, b) = clip_interval(dev, interval)?;
    let times = segment_times(dev, a, b);
    let mut per_segment = Vec::with_capacity(times.len().saturating_sub(1));
    let mut total = 0.0;
    for w in times.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        if t1 <= t0 {
            continue;
        }
        let len = t1 - t0;
        let (velocities, _, group_mass) = segment_kinematics(dev, t0, t1);
        let cubes: f64 = group_mass.iter().map(|&m| m * m * m / 24.0).sum();
        let kinetic: f64 = dev
            .masses()
            .iter()
            .zip(&velocities)
            .map(|(&m, &v)| 0.5 * m * v * v)
            .sum();
        let value = len * (cubes - kinetic);
        per_segment.push(SegmentValue {
            start: t0,
            end: t1,
            value,
        });
        total += value;
    }
    Ok(MomBreakdown { total, per_segment })
}

/// Moment functional `mom_[s1,s2]`: atom-cube gain minus quantile kinetic cost.
pub fn mom_functional(dev: &ClusteringDeviation, interval: (f64, f64)) -> Result<f64> {
    Ok(mom_breakdown(dev, interval)?.total)
}

/// Cross-checks the moment representation over the full horizon.
///
/// Both sides are computed along independent routes:
/// `lhs = horizon·m³/24 + (E(horizon) − E(0))/2 − rateq` with the pair energy
/// `E(s) = Σ_{c<c'} m_c m_{c'} |x_c(s) − x_{c'}(s)|`, and `rhs` is the direct
/// segment evaluation of the moment functional.
pub fn mom_identity_check(dev: &ClusteringDeviation) -> Result<IdentityCheck> {
    let horizon = dev.horizon();
    let m = dev.total_mass();
    let e_start = dev.snapshot(0.0)?.pair_energy();
    let e_end = dev.snapshot(horizon)?.pair_energy();
    let rate = rateq_clustering(dev, (0.0, horizon))?.total;
    let lhs = horizon * m * m * m / 24.0 + 0.5 * (e_end - e_start) - rate;
    let rhs = mom_functional(dev, (0.0, horizon))?;
    Ok(IdentityCheck { lhs, rhs })
}

/// Suboptimal transition cost between two measures over a time window:
/// `((s''−s')/2) ∫ (|Q[λ'] − Q[λ]| / (s''−s') + 1/2)² da`,
/// evaluated exactly over the merged slab partition.
pub fn transition_cost(
    start: &AtomicMeasure,
    end: &AtomicMeasure,
    interval: (f64, f64),
) -> Result<f64> {
    let (s0, s1) = interval;
    if !s0.is_finite() || !s1.is_finite() || s1 <= s0 {
        return Err(Error::EmptyInterval(s0, s1));
    }
    let scale = start.total_mass().max(1.0);
    if (start.total_mass() - end.total_mass()).abs() > 1e-12 * scale {
        return Err(Error::MassMismatch(start.total_mass(), end.total_mass()));
    }
    let len = s1 - s0;
    let mass = start.total_mass();
    // Walk the merged cumulative partition of the two quantile functions.
    let cum_a: Vec<f64> = {
        let mut acc = 0.0;
        start
            .atoms()
            .iter()
            .map(|&(_, m)| {
                acc += m;
                acc
            })
            .collect()
    };
    let cum_b: Vec<f64> = {
        let mut acc = 0.0;
        end.atoms()
            .iter()
            .map(|&(_, m)| {
                acc += m;
                acc
            })
            .collect()
    };
    let mut i = 0;
    let mut j = 0;
    let mut level = 0.0;
    let mut integral = 0.0;
    while level < mass {
        let next = cum_a[i].min(cum_b[j]).min(mass);
        let gap = (end.atoms()[j].0 - start.atoms()[i].0).abs();
        let speed = gap / len + 0.5;
        integral += (next - level) * speed * speed;
        level = next;
        if i + 1 < cum_a.len() && cum_a[i] <= next {
            i += 1;
        }
        if j + 1 < cum_b.len() && cum_b[j] <= next {
            j += 1;
        }
        if next >= mass {
            break;
        }
    }
    Ok(0.5 * len * integral)
}

/// The moment Lyapunov exponent `L_SHE(terminal_point → (xs, ms))` over the
/// given horizon: the moment functional evaluated at the optimal deviation.
///
/// The deviation runs in the reversed time `s`: it starts at `Σ m_c δ_{x_c}`
/// and ends at `m δ_{terminal_point}`.
pub fn lyapunov_exponent(
    terminal_point: f64,
    horizon: f64,
    start_positions: &[f64],
    masses: &[f64],
) -> Result<f64> {
    let opt = optimal_deviation(start_positions, masses, terminal_point, horizon)?;
    mom_functional(&opt.deviation, (0.0, horizon))
}
