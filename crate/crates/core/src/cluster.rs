//! Event-driven inertia-cluster (sticky particle) dynamics.
//!
//! Point masses `m_1, …, m_n` start from strictly increasing positions with
//! the inertia velocities `φ_c = (Σ_{c'>c} m_{c'} − Σ_{c'<c} m_{c'})/2`.
//! They travel at constant velocity until they meet, and on meeting merge
//! with momentum conserved. Event times are computed in closed form from the
//! linear trajectories, so the evolution is exact and bit-deterministic.
//!
//! The optimal deviation for the 1-to-n endpoint condition is obtained from
//! the inertia clusters by adding, per branch (a maximal set of clusters that
//! merged strictly inside `(0, horizon)`), the constant corrective drift
//! `d_b = (terminal_point − branch_end)/horizon`.

use serde::{Deserialize, Serialize};

use crate::measure::AtomicMeasure;
use crate::{Error, Result};

/// Relative tolerance for grouping simultaneous merge events.
const EVENT_TIME_REL_TOL: f64 = 1e-10;

/// A piecewise-linear function given by `(time, value)` knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinear {
    knots: Vec<(f64, f64)>,
}

impl PiecewiseLinear {
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.len() < 2 || knots.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::BadTrajectoryKnots);
        }
        if knots.iter().any(|&(t, x)| !t.is_finite() || !x.is_finite()) {
            return Err(Error::BadTrajectoryKnots);
        }
        Ok(PiecewiseLinear { knots })
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    pub fn start_time(&self) -> f64 {
        self.knots[0].0
    }

    pub fn end_time(&self) -> f64 {
        self.knots[self.knots.len() - 1].0
    }

    /// Linear interpolation; clamps outside the knot span.
    pub fn eval(&self, t: f64) -> f64 {
        if t <= self.knots[0].0 {
            return self.knots[0].1;
        }
        let last = self.knots.len() - 1;
        if t >= self.knots[last].0 {
            return self.knots[last].1;
        }
        let i = self.knots.partition_point(|&(s, _)| s <= t);
        let (t0, x0) = self.knots[i - 1];
        let (t1, x1) = self.knots[i];
        x0 + (x1 - x0) * (t - t0) / (t1 - t0)
    }

    /// Average slope over `[t0, t1]`.
    pub fn slope_between(&self, t0: f64, t1: f64) -> f64 {
        (self.eval(t1) - self.eval(t0)) / (t1 - t0)
    }
}

/// A finite measure path that is a sum of moving point masses with
/// piecewise-linear trajectories on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DeviationJson", into = "DeviationJson")]
pub struct ClusteringDeviation {
    masses: Vec<f64>,
    trajectories: Vec<PiecewiseLinear>,
    horizon: f64,
}

/// Wire form: `{"masses": [...], "horizon": t, "trajectories": [[[s,x],...],...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct DeviationJson {
    masses: Vec<f64>,
    horizon: f64,
    trajectories: Vec<Vec<(f64, f64)>>,
}

impl TryFrom<DeviationJson> for ClusteringDeviation {
    type Error = Error;
    fn try_from(j: DeviationJson) -> Result<Self> {
        ClusteringDeviation::new(j.masses, j.trajectories, j.horizon)
    }
}

impl From<ClusteringDeviation> for DeviationJson {
    fn from(d: ClusteringDeviation) -> Self {
        DeviationJson {
            masses: d.masses,
            horizon: d.horizon,
            trajectories: d.trajectories.into_iter().map(|t| t.knots).collect(),
        }
    }
}

impl ClusteringDeviation {
    /// Validates masses, knot spans, and the ordering invariant
    /// `x_1(s) ≤ … ≤ x_n(s)`; with linear segments it suffices to check the
    /// ordering at the merged knot times.
    pub fn new(masses: Vec<f64>, knots: Vec<Vec<(f64, f64)>>, horizon: f64) -> Result<Self> {
        if masses.is_empty() {
            return Err(Error::EmptyClusterList);
        }
        if masses.len() != knots.len() {
            return Err(Error::LengthMismatch(masses.len(), knots.len()));
        }
        if !horizon.is_finite() || horizon <= 0.0 {
            return Err(Error::BadHorizon(horizon));
        }
        for &m in &masses {
            if !m.is_finite() || m <= 0.0 {
                return Err(Error::NonPositiveMass(m));
            }
        }
        let trajectories: Vec<PiecewiseLinear> = knots
            .into_iter()
            .map(PiecewiseLinear::new)
            .collect::<Result<_>>()?;
        for tr in &trajectories {
            if tr.start_time() != 0.0 || (tr.end_time() - horizon).abs() > 1e-12 * horizon.max(1.0)
            {
                return Err(Error::BadTrajectoryKnots);
            }
        }
        let dev = ClusteringDeviation {
            masses,
            trajectories,
            horizon,
        };
        let times = dev.knot_times();
        for w in times.windows(2) {
            for s in [w[0], w[1]] {
                let xs = dev.positions(s);
                for c in 1..xs.len() {
                    if xs[c] < xs[c - 1] - 1e-9 * (1.0 + xs[c].abs()) {
                        return Err(Error::TrajectoriesCross(c - 1, c));
                    }
                }
            }
        }
        Ok(dev)
    }

    pub fn n_clusters(&self) -> usize {
        self.masses.len()
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn trajectory(&self, c: usize) -> &PiecewiseLinear {
        &self.trajectories[c]
    }

    pub fn position(&self, c: usize, s: f64) -> f64 {
        self.trajectories[c].eval(s)
    }

    pub fn positions(&self, s: f64) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.eval(s)).collect()
    }

    /// Sorted union of all knot times.
    pub fn knot_times(&self) -> Vec<f64> {
        let mut times: Vec<f64> = self
            .trajectories
            .iter()
            .flat_map(|t| t.knots().iter().map(|&(s, _)| s))
            .collect();
        times.sort_by(f64::total_cmp);
        times.dedup_by(|a, b| (*a - *b).abs() <= 1e-15 * (1.0 + a.abs()));
        times
    }

    /// The measure at time `s`, with coincident clusters coalesced.
    pub fn snapshot(&self, s: f64) -> Result<AtomicMeasure> {
        let atoms = self
            .trajectories
            .iter()
            .zip(&self.masses)
            .map(|(t, &m)| (t.eval(s), m))
            .collect();
        AtomicMeasure::new(atoms)
    }

    /// Sup over merged knot times and clusters of the position gap.
    pub fn sup_distance(&self, other: &ClusteringDeviation) -> f64 {
        let mut times = self.knot_times();
        times.extend(other.knot_times());
        times.sort_by(f64::total_cmp);
        let mut sup: f64 = 0.0;
        for &s in &times {
            for c in 0..self.n_clusters().min(other.n_clusters()) {
                sup = sup.max((self.position(c, s) - other.position(c, s)).abs());
            }
        }
        sup
    }

    /// Evaluates all trajectories on `samples` as CSV-ready rows `(s, x_1..x_n)`.
    pub fn sample_rows(&self, samples: usize) -> Vec<Vec<f64>> {
        let n = samples.max(2);
        (0..n)
            .map(|i| {
                let s = self.horizon * i as f64 / (n - 1) as f64;
                let mut row = Vec::with_capacity(self.n_clusters() + 1);
                row.push(s);
                row.extend(self.positions(s));
                row
            })
            .collect()
    }
}

/// One momentum-conserving merge: the named clusters coincide from `time` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeEvent {
    pub time: f64,
    /// Original cluster indices participating (the union after the merge).
    pub clusters: Vec<usize>,
    pub mass: f64,
    pub velocity: f64,
    pub position: f64,
}

/// Ordered record of merge events plus the branch partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeTree {
    pub events: Vec<MergeEvent>,
    /// Partition of `{0..n}` into intervals of clusters that merged strictly
    /// inside `(0, horizon)`.
    pub branches: Vec<Vec<usize>>,
}

/// Inertia velocities `φ_c = (Σ_{c'>c} m_{c'} − Σ_{c'<c} m_{c'})/2`.
///
/// The mass-weighted sum `Σ m_c φ_c` vanishes.
pub fn inertia_velocities(masses: &[f64]) -> Result<Vec<f64>> {
    if masses.is_empty() {
        return Err(Error::EmptyClusterList);
    }
    for &m in masses {
        if !m.is_finite() || m <= 0.0 {
            return Err(Error::NonPositiveMass(m));
        }
    }
    let total: f64 = masses.iter().sum();
    let mut below = 0.0;
    Ok(masses
        .iter()
        .map(|&m| {
            let above = total - below - m;
            let v = 0.5 * (above - below);
            below += m;
            v
        })
        .collect())
}

struct ActiveCluster {
    members: Vec<usize>,
    mass: f64,
    velocity: f64,
    position: f64,
}

fn validate_start(start_positions: &[f64], masses: &[f64]) -> Result<()> {
    if start_positions.is_empty() {
        return Err(Error::EmptyClusterList);
    }
    if start_positions.len() != masses.len() {
        return Err(Error::LengthMismatch(start_positions.len(), masses.len()));
    }
    if start_positions.windows(2).any(|w| w[1] <= w[0])
        || start_positions.iter().any(|x| !x.is_finite())
    {
        return Err(Error::NonIncreasingPositions);
    }
    Ok(())
}

/// Runs the event-driven evolution from the given initial velocities.
///
/// Simultaneous meets (within [`EVENT_TIME_REL_TOL`] relative) are processed
/// in one event step; clusters linked by coinciding adjacent meets merge as a
/// single k-fold event.
fn evolve_with_velocities(
    start_positions: &[f64],
    masses: &[f64],
    velocities: &[f64],
    horizon: f64,
) -> Result<(ClusteringDeviation, Vec<MergeEvent>)> {
    let n = masses.len();
    let mut active: Vec<ActiveCluster> = (0..n)
        .map(|c| ActiveCluster {
            members: vec![c],
            mass: masses[c],
            velocity: velocities[c],
            position: start_positions[c],
        })
        .collect();
    let mut knots: Vec<Vec<(f64, f64)>> = (0..n).map(|c| vec![(0.0, start_positions[c])]).collect();
    let mut events: Vec<MergeEvent> = Vec::new();
    let mut now = 0.0;

    loop {
        // Closed-form meet time of each adjacent pair.
        let mut next: f64 = f64::INFINITY;
        let mut meet_times: Vec<f64> = Vec::with_capacity(active.len().saturating_sub(1));
        for i in 0..active.len().saturating_sub(1) {
            let gap = (active[i + 1].position - active[i].position).max(0.0);
            let closing = active[i].velocity - active[i + 1].velocity;
            let t = if closing > 0.0 {
                now + gap / closing
            } else {
                f64::INFINITY
            };
            meet_times.push(t);
            if t < next {
                next = t;
            }
        }
        if next > horizon || !next.is_finite() {
            break;
        }
        let next = next.max(now);
        let tol = EVENT_TIME_REL_TOL * next.max(1.0);
        // Chains of adjacent pairs meeting at this event time merge together.
        let mut groups: Vec<(usize, usize)> = Vec::new(); // inclusive cluster ranges
        let mut i = 0;
        while i < meet_times.len() {
            if meet_times[i] - next <= tol {
                let start = i;
                while i < meet_times.len() && meet_times[i] - next <= tol {
                    i += 1;
                }
                // Meeting pairs start..=i-1 involve clusters start..=i.
                groups.push((start, i));
            } else {
                i += 1;
            }
        }
        // Advance every cluster to the event time.
        let dt = next - now;
        for cl in active.iter_mut() {
            cl.position += cl.velocity * dt;
        }
        now = next;
        // Merge groups right-to-left so indices stay valid.
        for &(lo, hi) in groups.iter().rev() {
            let chunk: Vec<ActiveCluster> = active.drain(lo..=hi).collect();
            let mass: f64 = chunk.iter().map(|c| c.mass).sum();
            let velocity = chunk.iter().map(|c| c.mass * c.velocity).sum::<f64>() / mass;
            let position = chunk[0].position;
            let members: Vec<usize> = chunk.iter().flat_map(|c| c.members.clone()).collect();
            for &m in &members {
                // A degenerate zero-dt follow-up merge reuses the last knot.
                match knots[m].last_mut() {
                    Some(last) if last.0 >= now => *last = (last.0, position),
                    _ => knots[m].push((now, position)),
                }
            }
            events.push(MergeEvent {
                time: now,
                clusters: members.clone(),
                mass,
                velocity,
                position,
            });
            active.insert(
                lo,
                ActiveCluster {
                    members,
                    mass,
                    velocity,
                    position,
                },
            );
        }
        events.sort_by(|a, b| {
            a.time
                .total_cmp(&b.time)
                .then_with(|| a.clusters[0].cmp(&b.clusters[0]))
        });
        if now >= horizon {
            break;
        }
    }
    // Extend every cluster to the horizon.
    for cl in &active {
        let terminal = cl.position + cl.velocity * (horizon - now);
        for &m in &cl.members {
            if knots[m].last().map(|&(t, _)| t < horizon).unwrap_or(true) {
                knots[m].push((horizon, terminal));
            }
        }
    }
    let dev = ClusteringDeviation::new(masses.to_vec(), knots, horizon)?;
    Ok((dev, events))
}

/// Evolves the inertia clusters exactly over `[0, horizon]`.
pub fn evolve_inertia_clusters(
    start_positions: &[f64],
    masses: &[f64],
    horizon: f64,
) -> Result<(ClusteringDeviation, MergeTree)> {
    validate_start(start_positions, masses)?;
    if !horizon.is_finite() || horizon <= 0.0 {
        return Err(Error::BadHorizon(horizon));
    }
    let velocities = inertia_velocities(masses)?;
    let (dev, events) = evolve_with_velocities(start_positions, masses, &velocities, horizon)?;
    let branches = branches_from_events(&events, masses.len(), horizon);
    Ok((dev, MergeTree { events, branches }))
}

fn branches_from_events(events: &[MergeEvent], n: usize, horizon: f64) -> Vec<Vec<usize>> {
    // Union of clusters merged strictly inside (0, horizon); merges exactly at
    // the horizon do not count (open-interval reading).
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], i: usize) -> usize {
        let mut root = i;
        while parent[root] != root {
            root = parent[root];
        }
        let mut cur = i;
        while parent[cur] != root {
            let next = parent[cur];
            parent[cur] = root;
            cur = next;
        }
        root
    }
    for ev in events {
        if ev.time > 0.0 && ev.time < horizon {
            let first = ev.clusters[0];
            for &c in &ev.clusters[1..] {
                let (a, b) = (find(&mut parent, first), find(&mut parent, c));
                if a != b {
                    parent[b] = a;
                }
            }
        }
    }
    let mut branches: Vec<Vec<usize>> = Vec::new();
    let mut seen = vec![false; n];
    for c in 0..n {
        if seen[c] {
            continue;
        }
        let root = find(&mut parent, c);
        let members: Vec<usize> = (0..n).filter(|&d| find(&mut parent, d) == root).collect();
        for &d in &members {
            seen[d] = true;
        }
        branches.push(members);
    }
    branches.sort_by_key(|b| b[0]);
    branches
}

/// Extracts the branch partition from a merge tree: `c` and `c'` belong to
/// the same branch iff their clusters merged strictly inside `(0, horizon)`.
pub fn branch_partition(tree: &MergeTree, n: usize, horizon: f64) -> Result<Vec<Vec<usize>>> {
    for ev in &tree.events {
        if ev.clusters.iter().any(|&c| c >= n) {
            return Err(Error::InconsistentTree(n));
        }
    }
    Ok(branches_from_events(&tree.events, n, horizon))
}

/// The optimal deviation together with its merge tree and branch drifts.
#[derive(Debug, Clone, Serialize)]
pub struct OptimalDeviation {
    pub deviation: ClusteringDeviation,
    pub tree: MergeTree,
    /// Corrective drift `d_b` per branch, in branch order.
    pub drifts: Vec<f64>,
    /// Constant branch center-of-mass velocity `φ_b + d_b` per branch.
    pub branch_velocities: Vec<f64>,
}

/// Builds the optimal deviation: inertia clusters plus, per branch, the
/// constant drift `d_b = (terminal_point − branch_end)/horizon` that brings
/// every cluster to `terminal_point` at the horizon.
///
/// The merge pattern inside `(0, horizon)` is identical to the inertia
/// clusters' by construction: members of a branch share the same drift, and
/// distinct branches have strictly decreasing drifts, meeting only at the
/// horizon itself.
pub fn optimal_deviation(
    start_positions: &[f64],
    masses: &[f64],
    terminal_point: f64,
    horizon: f64,
) -> Result<OptimalDeviation> {
    validate_start(start_positions, masses)?;
    if !horizon.is_finite() || horizon <= 0.0 {
        return Err(Error::BadHorizon(horizon));
    }
    if !terminal_point.is_finite() {
        return Err(Error::NonFinitePosition(terminal_point));
    }
    let n = masses.len();
    let (inertia, tree) = evolve_inertia_clusters(start_positions, masses, horizon)?;
    let branches = tree.branches.clone();

    // Per-branch drift from the branch's common inertia terminal position.
    let mut drift_of_cluster = vec![0.0; n];
    let mut drifts = Vec::with_capacity(branches.len());
    let mut branch_velocities = Vec::with_capacity(branches.len());
    let phis = inertia_velocities(masses)?;
    for b in &branches {
        let end = inertia.position(b[0], horizon);
        let d = (terminal_point - end) / horizon;
        for &c in b {
            drift_of_cluster[c] = d;
        }
        let mass_b: f64 = b.iter().map(|&c| masses[c]).sum();
        let phi_b = b.iter().map(|&c| masses[c] * phis[c]).sum::<f64>() / mass_b;
        drifts.push(d);
        branch_velocities.push(phi_b + d);
    }

    let knots: Vec<Vec<(f64, f64)>> = (0..n)
        .map(|c| {
            inertia
                .trajectory(c)
                .knots()
                .iter()
                .map(|&(s, x)| (s, x + drift_of_cluster[c] * s))
                .collect()
        })
        .collect();
    let deviation = ClusteringDeviation::new(masses.to_vec(), knots, horizon)?;

    let events = tree
        .events
        .iter()
        .map(|ev| {
            let d = drift_of_cluster[ev.clusters[0]];
            MergeEvent {
                time: ev.time,
                clusters: ev.clusters.clone(),
                mass: ev.mass,
                velocity: ev.velocity + d,
                position: ev.position + d * ev.time,
            }
        })
        .collect();
    Ok(OptimalDeviation {
        deviation,
        tree: MergeTree { events, branches },
        drifts,
        branch_velocities,
    })
}
