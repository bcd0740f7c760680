//! Mixed charged/uncharged particle simulation.
//!
//! Charged particles interact pairwise through clipped Coulomb forces while
//! uncharged ones drift in straight lines. Trajectories are integrated with a
//! kick-drift-kick leapfrog scheme and subsampled into history and future
//! frames, together with the ground-truth interaction graph.

mod dataset;

pub use dataset::{generate_dataset, DatasetHandle, DatasetSizes, Split, Standardizer};

use ndarray::{Array2, Array3, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ensure, RainError, Result};
use crate::graph::RelationGraph;
use crate::kv::KvDoc;
use crate::rng::{indexed_substream, Stream};

/// Position and velocity in two dimensions.
pub const STATE_DIM: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleConfig {
    pub n_charged: usize,
    pub n_uncharged: usize,
    pub charge_magnitude: f64,
    pub coulomb_constant: f64,
    pub dt_sim: f64,
    pub subsample_stride: usize,
    /// Number of subsampled frames kept per sample.
    pub total_steps: usize,
    pub history_steps: usize,
    pub future_steps: usize,
    pub force_clip: f64,
    pub init_pos_std: f64,
    pub init_vel_scale: f64,
    /// Pair distances below this are clamped before evaluating forces.
    pub min_separation: f64,
    /// Any state component above this magnitude counts as a blow-up.
    pub overflow_bound: f64,
    pub seed: u64,
}

impl Default for ParticleConfig {
    fn default() -> Self {
        ParticleConfig {
            n_charged: 3,
            n_uncharged: 3,
            charge_magnitude: 1.0,
            coulomb_constant: 1.0,
            dt_sim: 0.001,
            subsample_stride: 100,
            total_steps: 80,
            history_steps: 30,
            future_steps: 50,
            force_clip: 10.0,
            init_pos_std: 0.5,
            init_vel_scale: 0.5,
            min_separation: 1e-3,
            overflow_bound: 1e4,
            seed: 0,
        }
    }
}

impl ParticleConfig {
    pub fn n_agents(&self) -> usize {
        self.n_charged + self.n_uncharged
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.n_agents() >= 2, || {
            format!("need at least two particles, got {}", self.n_agents())
        })?;
        let reals = [
            ("charge_magnitude", self.charge_magnitude),
            ("coulomb_constant", self.coulomb_constant),
            ("dt_sim", self.dt_sim),
            ("force_clip", self.force_clip),
            ("init_pos_std", self.init_pos_std),
            ("init_vel_scale", self.init_vel_scale),
            ("min_separation", self.min_separation),
            ("overflow_bound", self.overflow_bound),
        ];
        for (name, v) in reals {
            ensure(v.is_finite() && v > 0.0, || format!("{name} must be > 0, got {v}"))?;
        }
        ensure(self.subsample_stride >= 1, || "subsample_stride must be >= 1".into())?;
        ensure(self.history_steps >= 1 && self.future_steps >= 1, || {
            "history and future horizons must be >= 1".into()
        })?;
        ensure(
            self.total_steps >= self.history_steps + self.future_steps,
            || {
                format!(
                    "total_steps {} < history {} + future {}",
                    self.total_steps, self.history_steps, self.future_steps
                )
            },
        )
    }

    pub fn to_kv(&self, doc: &mut KvDoc) {
        doc.set("n_charged", self.n_charged);
        doc.set("n_uncharged", self.n_uncharged);
        doc.set("charge_magnitude", self.charge_magnitude);
        doc.set("coulomb_constant", self.coulomb_constant);
        doc.set("dt_sim", self.dt_sim);
        doc.set("subsample_stride", self.subsample_stride);
        doc.set("total_steps", self.total_steps);
        doc.set("history_steps", self.history_steps);
        doc.set("future_steps", self.future_steps);
        doc.set("force_clip", self.force_clip);
        doc.set("init_pos_std", self.init_pos_std);
        doc.set("init_vel_scale", self.init_vel_scale);
        doc.set("min_separation", self.min_separation);
        doc.set("overflow_bound", self.overflow_bound);
        doc.set("seed", self.seed);
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let d = ParticleConfig::default();
        Ok(ParticleConfig {
            n_charged: doc.parse_or("n_charged", d.n_charged)?,
            n_uncharged: doc.parse_or("n_uncharged", d.n_uncharged)?,
            charge_magnitude: doc.parse_or("charge_magnitude", d.charge_magnitude)?,
            coulomb_constant: doc.parse_or("coulomb_constant", d.coulomb_constant)?,
            dt_sim: doc.parse_or("dt_sim", d.dt_sim)?,
            subsample_stride: doc.parse_or("subsample_stride", d.subsample_stride)?,
            total_steps: doc.parse_or("total_steps", d.total_steps)?,
            history_steps: doc.parse_or("history_steps", d.history_steps)?,
            future_steps: doc.parse_or("future_steps", d.future_steps)?,
            force_clip: doc.parse_or("force_clip", d.force_clip)?,
            init_pos_std: doc.parse_or("init_pos_std", d.init_pos_std)?,
            init_vel_scale: doc.parse_or("init_vel_scale", d.init_vel_scale)?,
            min_separation: doc.parse_or("min_separation", d.min_separation)?,
            overflow_bound: doc.parse_or("overflow_bound", d.overflow_bound)?,
            seed: doc.parse_or("seed", d.seed)?,
        })
    }
}

/// One simulated case.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySample {
    /// `[N × T × 4]`, state = (px, py, vx, vy).
    pub states: Array3<f64>,
    /// Each entry is `+q`, `-q` or `0`.
    pub charges: Vec<f64>,
    pub truth_graph: RelationGraph,
}

impl TrajectorySample {
    pub fn n_agents(&self) -> usize {
        self.charges.len()
    }

    pub fn n_steps(&self) -> usize {
        self.states.shape()[1]
    }
}

/// Result of [`simulate`]: the accepted sample plus how many attempts were
/// discarded because of numerical blow-up.
#[derive(Debug, Clone)]
pub struct SimulationRun {
    pub sample: TrajectorySample,
    pub regenerations: u32,
}

/// Coulomb force exerted on particle `i` by particle `j`, before clipping.
///
/// Distances below `min_separation` are clamped to it; coincident points
/// exert no force since their direction is undefined.
pub fn pair_force(ri: [f64; 2], rj: [f64; 2], qi: f64, qj: f64, c: f64, min_separation: f64) -> [f64; 2] {
    if qi == 0.0 || qj == 0.0 {
        return [0.0, 0.0];
    }
    let dx = ri[0] - rj[0];
    let dy = ri[1] - rj[1];
    let dist = (dx * dx + dy * dy).sqrt();
    if dist == 0.0 {
        return [0.0, 0.0];
    }
    let d = dist.max(min_separation);
    let s = c * qi * qj / (d * d * d);
    [s * dx, s * dy]
}

/// Summed pairwise forces without clipping, written into `out`.
fn accumulate_forces(
    positions: ArrayView2<f64>,
    charges: &[f64],
    c: f64,
    min_separation: f64,
    out: &mut Array2<f64>,
) {
    out.fill(0.0);
    let n = charges.len();
    for i in 0..n {
        if charges[i] == 0.0 {
            continue;
        }
        for j in (i + 1)..n {
            if charges[j] == 0.0 {
                continue;
            }
            let f = pair_force(
                [positions[[i, 0]], positions[[i, 1]]],
                [positions[[j, 0]], positions[[j, 1]]],
                charges[i],
                charges[j],
                c,
                min_separation,
            );
            out[[i, 0]] += f[0];
            out[[i, 1]] += f[1];
            out[[j, 0]] -= f[0];
            out[[j, 1]] -= f[1];
        }
    }
}

fn clip_forces(forces: &mut Array2<f64>, f_max: f64) {
    forces.mapv_inplace(|f| f.clamp(-f_max, f_max));
}

/// Clipped Coulomb forces on every particle.
///
/// `positions` is `[N × 2]`. The returned array holds, for each particle,
/// `Σ_j C·q_i·q_j·(r_i − r_j)/‖r_i − r_j‖³` with each component clipped to
/// `[-f_max, f_max]`.
pub fn coulomb_forces(positions: ArrayView2<f64>, charges: &[f64], c: f64, f_max: f64) -> Result<Array2<f64>> {
    let n = charges.len();
    ensure(positions.shape() == [n, 2], || {
        format!("positions shape {:?} does not match {n} charges", positions.shape())
    })?;
    if positions.iter().chain(charges.iter()).any(|v| !v.is_finite()) || !c.is_finite() {
        return Err(RainError::NonFinite("coulomb_forces input".into()));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if positions[[i, 0]] == positions[[j, 0]] && positions[[i, 1]] == positions[[j, 1]] {
                return Err(RainError::DegenerateGeometry(format!(
                    "particles {i} and {j} share a position"
                )));
            }
        }
    }
    let mut out = Array2::zeros((n, 2));
    accumulate_forces(positions, charges, c, 0.0, &mut out);
    clip_forces(&mut out, f_max);
    Ok(out)
}

/// Edge `(i, j)` exists iff both particles carry a charge.
pub fn ground_truth_graph(charges: &[f64]) -> RelationGraph {
    RelationGraph::from_fn(charges.len(), |i, j| charges[i] != 0.0 && charges[j] != 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlowUp {
    pub frame: usize,
}

/// Leapfrog integration from explicit initial conditions.
///
/// Returns `[N × total_steps × 4]` subsampled frames, frame 0 being the
/// initial state.
pub fn integrate(
    config: &ParticleConfig,
    init_positions: ArrayView2<f64>,
    init_velocities: ArrayView2<f64>,
    charges: &[f64],
) -> std::result::Result<Array3<f64>, BlowUp> {
    let n = charges.len();
    let dt = config.dt_sim;
    let half = 0.5 * dt;
    let mut pos = init_positions.to_owned();
    let mut vel = init_velocities.to_owned();
    let mut force = Array2::zeros((n, 2));
    let mut frames = Array3::zeros((n, config.total_steps, STATE_DIM));

    let record = |frames: &mut Array3<f64>, k: usize, pos: &Array2<f64>, vel: &Array2<f64>| {
        for i in 0..n {
            frames[[i, k, 0]] = pos[[i, 0]];
            frames[[i, k, 1]] = pos[[i, 1]];
            frames[[i, k, 2]] = vel[[i, 0]];
            frames[[i, k, 3]] = vel[[i, 1]];
        }
    };
    record(&mut frames, 0, &pos, &vel);

    accumulate_forces(pos.view(), charges, config.coulomb_constant, config.min_separation, &mut force);
    clip_forces(&mut force, config.force_clip);
    for frame in 1..config.total_steps {
        for _ in 0..config.subsample_stride {
            vel.scaled_add(half, &force);
            pos.scaled_add(dt, &vel);
            accumulate_forces(pos.view(), charges, config.coulomb_constant, config.min_separation, &mut force);
            clip_forces(&mut force, config.force_clip);
            vel.scaled_add(half, &force);
        }
        let bound = config.overflow_bound;
        if pos.iter().chain(vel.iter()).any(|v| !v.is_finite() || v.abs() > bound) {
            return Err(BlowUp { frame });
        }
        record(&mut frames, frame, &pos, &vel);
    }
    Ok(frames)
}

fn draw_initial_conditions(
    config: &ParticleConfig,
    rng: &mut impl Rng,
) -> (Array2<f64>, Array2<f64>, Vec<f64>) {
    let n = config.n_agents();
    let normal = Normal::new(0.0, config.init_pos_std).expect("validated std");
    let pos = Array2::from_shape_fn((n, 2), |_| normal.sample(rng));
    let mut vel = Array2::zeros((n, 2));
    for i in 0..n {
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        vel[[i, 0]] = config.init_vel_scale * theta.cos();
        vel[[i, 1]] = config.init_vel_scale * theta.sin();
    }
    let q = config.charge_magnitude;
    let mut charges: Vec<f64> = (0..config.n_charged)
        .map(|_| if rng.gen_bool(0.5) { q } else { -q })
        .chain(std::iter::repeat_n(0.0, config.n_uncharged))
        .collect();
    charges.shuffle(rng);
    (pos, vel, charges)
}

/// Simulates one case deterministically from `config.seed`.
///
/// An attempt that blows up is discarded and the next attempt uses the
/// incremented seed; the number of discarded attempts is reported.
pub fn simulate(config: &ParticleConfig) -> Result<SimulationRun> {
    config.validate()?;
    const MAX_ATTEMPTS: u32 = 1000;
    for attempt in 0..MAX_ATTEMPTS {
        let seed = config.seed.wrapping_add(attempt as u64);
        let mut rng = indexed_substream(seed, Stream::Sim, 0);
        let (pos, vel, charges) = draw_initial_conditions(config, &mut rng);
        match integrate(config, pos.view(), vel.view(), &charges) {
            Ok(states) => {
                let truth_graph = ground_truth_graph(&charges);
                return Ok(SimulationRun {
                    sample: TrajectorySample {
                        states,
                        charges,
                        truth_graph,
                    },
                    regenerations: attempt,
                });
            }
            Err(b) => log::debug!("seed {seed}: blow-up at frame {}", b.frame),
        }
    }
    Err(RainError::NonFinite(format!(
        "simulation kept blowing up after {MAX_ATTEMPTS} attempts from seed {}",
        config.seed
    )))
}
