//! Euler–Maruyama simulation of the attractive particle system.
//!
//! `N·m` particles evolve by
//! `dX_i = Σ_j (1/2) sgn(X_j − X_i) ds + noise_scale · dB_i` with
//! `sgn(0) = 0`, so coincident particles exert no drift on each other. The
//! scaled empirical measure places mass `1/N` at `X_i/(NT)` and is compared
//! against clustering deviations through the assignment of particles to
//! clusters by index order.
//!
//! Randomness comes from one counter-mode generator (ChaCha8) with a
//! dedicated stream per particle and per replica, so replica parallelism
//! cannot change results: every `(seed, replica, particle)` triple addresses
//! its own independent stream.
//!
//! The drift is bounded by `N/2`, so stability wants `dt ≪ 2/N`; the harness
//! default is `dt = 1e-3/N`. No weak-order accuracy claim is made near
//! collisions, where the discontinuous drift makes any fixed-step scheme
//! biased; desk-scale checks are distance- and spread-based only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::ClusteringDeviation;
use crate::measure::AtomicMeasure;
use crate::{Error, Result};

/// Particle positions in microscopic units, with the scale parameters that
/// map them to the macroscopic picture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleState {
    pub positions: Vec<f64>,
    pub micro_time: f64,
    /// Scale `N` (mass per particle is `1/N`).
    pub n_scale: usize,
    /// Scale `T`; macroscopic positions are `X_i/(N T)`, macroscopic time is
    /// `micro_time / T`.
    pub t_scale: f64,
}

impl ParticleState {
    pub fn new(mut positions: Vec<f64>, n_scale: usize, t_scale: f64) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::EmptyClusterList);
        }
        if positions.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinitePosition(f64::NAN));
        }
        if n_scale == 0 || !t_scale.is_finite() || t_scale <= 0.0 {
            return Err(Error::invalid("scales must satisfy N >= 1 and T > 0"));
        }
        // Index order is fixed at initialization with sorted positions;
        // later positions may cross.
        positions.sort_by(f64::total_cmp);
        Ok(ParticleState {
            positions,
            micro_time: 0.0,
            n_scale,
            t_scale,
        })
    }

    pub fn macro_time(&self) -> f64 {
        self.micro_time / self.t_scale
    }

    pub fn macro_positions(&self) -> Vec<f64> {
        let scale = 1.0 / (self.n_scale as f64 * self.t_scale);
        self.positions.iter().map(|&x| x * scale).collect()
    }
}

/// Time step, seed, and noise amplitude of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub seed: u64,
    /// 1 = standard Brownian noise, 0 = deterministic drift flow.
    pub noise_scale: f64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.dt.is_finite() || self.dt <= 0.0 {
            return Err(Error::BadTimeStep(self.dt));
        }
        if !(0.0..=1.0).contains(&self.noise_scale) {
            return Err(Error::invalid("noise_scale must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Pairwise drift `Σ_{j≠i} (1/2) sgn(X_j − X_i)` for every particle,
/// computed rank-wise in `O(N log N)`; ties contribute zero.
pub fn drift_vector(state: &ParticleState) -> Vec<f64> {
    let n = state.positions.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| state.positions[a].total_cmp(&state.positions[b]));
    let mut drift = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && state.positions[order[end]] == state.positions[order[start]] {
            end += 1;
        }
        let below = start as f64;
        let above = (n - end) as f64;
        for &i in &order[start..end] {
            drift[i] = 0.5 * (above - below);
        }
        start = end;
    }
    drift
}

fn per_particle_rngs(seed: u64, n: usize, stream_base: u64) -> Vec<ChaCha8Rng> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream_base.wrapping_add(i as u64));
            rng
        })
        .collect()
}

/// Euler–Maruyama run over `[0, horizon_micro]` with snapshots linearly
/// interpolated to the requested micro times (returned in ascending order).
pub fn simulate(
    initial: &ParticleState,
    config: &SimConfig,
    horizon_micro: f64,
    snapshot_times: &[f64],
) -> Result<Vec<ParticleState>> {
    simulate_with_streams(initial, config, horizon_micro, snapshot_times, 0)
}

fn simulate_with_streams(
    initial: &ParticleState,
    config: &SimConfig,
    horizon_micro: f64,
    snapshot_times: &[f64],
    stream_base: u64,
) -> Result<Vec<ParticleState>> {
    config.validate()?;
    if !horizon_micro.is_finite() || horizon_micro < 0.0 {
        return Err(Error::BadHorizon(horizon_micro));
    }
    let mut wanted: Vec<f64> = snapshot_times.to_vec();
    wanted.sort_by(f64::total_cmp);
    for &t in &wanted {
        if !(0.0..=horizon_micro * (1.0 + 1e-12) + 1e-300).contains(&t) {
            return Err(Error::SnapshotOutOfHorizon(t, horizon_micro));
        }
    }
    let n = initial.positions.len();
    let mut rngs = per_particle_rngs(config.seed, n, stream_base);
    let mut state = initial.clone();
    state.micro_time = 0.0;
    let mut snapshots: Vec<ParticleState> = Vec::with_capacity(wanted.len());
    let mut next_snapshot = 0;
    while next_snapshot < wanted.len() && wanted[next_snapshot] <= 0.0 {
        snapshots.push(state.clone());
        next_snapshot += 1;
    }
    let mut t = 0.0;
    while t < horizon_micro {
        let step = config.dt.min(horizon_micro - t);
        let drift = drift_vector(&state);
        let sqrt_step = step.sqrt();
        let prev = state.positions.clone();
        for i in 0..n {
            let g: f64 = rngs[i].sample(StandardNormal);
            state.positions[i] += drift[i] * step + config.noise_scale * sqrt_step * g;
        }
        let t_new = t + step;
        while next_snapshot < wanted.len() && wanted[next_snapshot] <= t_new + 1e-15 {
            let tau = wanted[next_snapshot];
            let frac = ((tau - t) / step).clamp(0.0, 1.0);
            let mut snap = state.clone();
            for (pos, &old) in snap.positions.iter_mut().zip(&prev) {
                *pos = old + (*pos - old) * frac;
            }
            snap.micro_time = tau;
            snapshots.push(snap);
            next_snapshot += 1;
        }
        t = t_new;
        state.micro_time = t;
    }
    Ok(snapshots)
}

/// Scaled empirical measure: mass `1/N` at every `X_i/(NT)`.
pub fn empirical_measure(state: &ParticleState) -> AtomicMeasure {
    let scale = 1.0 / (state.n_scale as f64 * state.t_scale);
    let mass = 1.0 / state.n_scale as f64;
    AtomicMeasure::new(state.positions.iter().map(|&x| (x * scale, mass)).collect())
        .expect("particle state yields a valid measure")
}

/// Assigns particle `i` (0-based, position-ordered) to the cluster whose
/// cumulative mass interval contains `(i+1)/n_particles` of the total.
pub fn assign_clusters(n_particles: usize, masses: &[f64]) -> Vec<usize> {
    let total: f64 = masses.iter().sum();
    let mut assignment = Vec::with_capacity(n_particles);
    let mut cum: Vec<f64> = Vec::with_capacity(masses.len());
    let mut acc = 0.0;
    for &m in masses {
        acc += m;
        cum.push(acc);
    }
    for i in 0..n_particles {
        let level = (i + 1) as f64 / n_particles as f64 * total;
        let c = cum
            .iter()
            .position(|&cm| cm >= level - 1e-9 * total)
            .unwrap_or(masses.len() - 1);
        assignment.push(c);
    }
    assignment
}

/// Distances between a simulated trajectory and a clustering deviation:
/// the fine per-particle sup `max_{s,i} |X_i/(NT) − ξ_{c(i)}(s)|` and the
/// weak-metric sup over the same snapshots.
pub fn deviation_distance(
    trajectory: &[ParticleState],
    dev: &ClusteringDeviation,
    assignment: &[usize],
) -> Result<(f64, f64)> {
    let mut sup_fine: f64 = 0.0;
    let mut sup_weak: f64 = 0.0;
    for state in trajectory {
        let s = state.macro_time();
        if s > dev.horizon() * (1.0 + 1e-9) {
            return Err(Error::HorizonMismatch(dev.horizon(), s));
        }
        if assignment.len() != state.positions.len() {
            return Err(Error::LengthMismatch(
                assignment.len(),
                state.positions.len(),
            ));
        }
        let macro_pos = state.macro_positions();
        for (i, &x) in macro_pos.iter().enumerate() {
            sup_fine = sup_fine.max((x - dev.position(assignment[i], s)).abs());
        }
        let weak = empirical_measure(state).weak_distance(&dev.snapshot(s)?)?;
        sup_weak = sup_weak.max(weak);
    }
    Ok((sup_fine, sup_weak))
}

/// Per-replica outcome of the clustering experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicaOutcome {
    pub replica: usize,
    pub seed: u64,
    pub sup_fine: f64,
    pub sup_weak: f64,
    /// `(max_i X_i − min_i X_i)/(NT)` at the final time.
    pub scaled_terminal_spread: f64,
}

/// Empirical quantiles of one statistic across replicas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
}

fn quantiles(mut values: Vec<f64>) -> Quantiles {
    if values.is_empty() {
        return Quantiles {
            q25: f64::NAN,
            median: f64::NAN,
            q75: f64::NAN,
        };
    }
    values.sort_by(f64::total_cmp);
    let at = |q: f64| -> f64 {
        let pos = q * (values.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        values[lo] * (1.0 - frac) + values[hi] * frac
    };
    Quantiles {
        q25: at(0.25),
        median: at(0.5),
        q75: at(0.75),
    }
}

/// Monte Carlo clustering report: per-replica outcomes, quantiles, and the
/// configuration echo (the seed ledger).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub n_scale: usize,
    pub t_scale: f64,
    pub n_squared_t: f64,
    /// True when `N²T ≥ 1`, the regime where the drift dominates diffusion.
    pub clustering_regime: bool,
    pub base_seed: u64,
    pub dt: f64,
    pub noise_scale: f64,
    pub macro_horizon: f64,
    pub replicas: Vec<ReplicaOutcome>,
    pub spread_quantiles: Quantiles,
    pub sup_fine_quantiles: Quantiles,
    pub sup_weak_quantiles: Quantiles,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs `n_replicas` independent simulations from the cluster initial
/// condition and reports distances to the optimal deviation plus the scaled
/// terminal spread. Cluster masses are normalized to total mass 1 (particle
/// counts follow the mass proportions), matching the unit-mass empirical
/// measure.
///
/// Replicas run in parallel; each one derives its own seed from the base
/// seed, so the outcome is independent of scheduling and merged by replica
/// index.
#[allow(clippy::too_many_arguments)]
pub fn mc_clustering_experiment(
    n_replicas: usize,
    n_scale: usize,
    t_scale: f64,
    start_positions: &[f64],
    masses: &[f64],
    terminal_point: f64,
    macro_horizon: f64,
    config: &SimConfig,
) -> Result<McReport> {
    config.validate()?;
    if n_scale == 0 || !t_scale.is_finite() || t_scale <= 0.0 {
        return Err(Error::invalid("scales must satisfy N >= 1 and T > 0"));
    }
    let total: f64 = masses.iter().sum();
    let unit_masses: Vec<f64> = masses.iter().map(|&m| m / total).collect();
    let scaled_xs: Vec<f64> = start_positions.to_vec();
    let opt =
        crate::cluster::optimal_deviation(&scaled_xs, &unit_masses, terminal_point, macro_horizon)?;
    let assignment = assign_clusters(n_scale, &unit_masses);
    let nt = n_scale as f64 * t_scale;
    let initial_positions: Vec<f64> = assignment.iter().map(|&c| scaled_xs[c] * nt).collect();
    let initial = ParticleState::new(initial_positions, n_scale, t_scale)?;
    let horizon_micro = macro_horizon * t_scale;
    let n_snapshots = 33usize;
    let snapshot_times: Vec<f64> = (0..n_snapshots)
        .map(|k| horizon_micro * k as f64 / (n_snapshots - 1) as f64)
        .collect();

    let outcomes: Vec<ReplicaOutcome> = (0..n_replicas)
        .into_par_iter()
        .map(|r| -> Result<ReplicaOutcome> {
            let replica_seed = splitmix64(config.seed ^ splitmix64(r as u64 + 1));
            let cfg = SimConfig {
                seed: replica_seed,
                ..*config
            };
            let traj = simulate_with_streams(
                &initial,
                &cfg,
                horizon_micro,
                &snapshot_times,
                (r as u64) << 32,
            )?;
            let (sup_fine, sup_weak) = deviation_distance(&traj, &opt.deviation, &assignment)?;
            let last = traj.last().expect("snapshots nonempty");
            let spread = (last
                .positions
                .iter()
                .fold(f64::NEG_INFINITY, |a, &b| a.max(b))
                - last.positions.iter().fold(f64::INFINITY, |a, &b| a.min(b)))
                / nt;
            Ok(ReplicaOutcome {
                replica: r,
                seed: replica_seed,
                sup_fine,
                sup_weak,
                scaled_terminal_spread: spread,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let n2t = (n_scale as f64) * (n_scale as f64) * t_scale;
    Ok(McReport {
        n_scale,
        t_scale,
        n_squared_t: n2t,
        clustering_regime: n2t >= 1.0,
        base_seed: config.seed,
        dt: config.dt,
        noise_scale: config.noise_scale,
        macro_horizon,
        spread_quantiles: quantiles(outcomes.iter().map(|o| o.scaled_terminal_spread).collect()),
        sup_fine_quantiles: quantiles(outcomes.iter().map(|o| o.sup_fine).collect()),
        sup_weak_quantiles: quantiles(outcomes.iter().map(|o| o.sup_weak).collect()),
        replicas: outcomes,
    })
}
