//! Fixed-step RK4 simulation of the centralized and distributed closed loops,
//! the performance index, invariant-set radii and θ sweeps.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coverage::CoverAssignment;
use crate::error::{Error, Result};
use crate::gains::{synthesize, ControllerGains, GammaPolicy, ObserverDesign, WeightSimilarity};
use crate::linalg::{lyapunov, spectral_norm};
use crate::netgraph::NetworkPair;
use crate::observer::{error_groupings, ObserverSystem};
use crate::plant::BlockPlant;

/// State or error norms above this abort the run.
pub const DIVERGENCE_LIMIT: f64 = 1e9;
/// `h ≤ STIFFNESS_SAFETY / ω_max` is the step heuristic.
pub const STIFFNESS_SAFETY: f64 = 0.5;
/// Records kept per run when no stride is configured.
const DEFAULT_RECORDS: usize = 2000;

fn default_horizon() -> f64 {
    10.0
}

fn default_step() -> f64 {
    1e-3
}

fn default_observer_init() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_step")]
    pub step: f64,
    /// Used when the CLI synthesises a design from this config.
    #[serde(default)]
    pub theta: Option<f64>,
    #[serde(default)]
    pub gamma_policy: GammaPolicy,
    /// `ℳ`; defaults to `10·max(1, ‖x0‖_∞)`. Infinity disables saturation.
    #[serde(default)]
    pub sat_level: Option<f64>,
    /// Initial plant state; drawn uniformly from `[0, 1]` when absent.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    /// Every observer scalar starts at this value.
    #[serde(default = "default_observer_init")]
    pub observer_init: f64,
    #[serde(default)]
    pub seed: u64,
    /// Keep every k-th step; defaults to about 2000 records per run.
    #[serde(default)]
    pub record_stride: Option<usize>,
    /// Evaluate both error stackings at every recorded step.
    #[serde(default)]
    pub check_stacking: bool,
    /// Run even when `γ` does not clear the lower bound.
    #[serde(default)]
    pub force: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            horizon: default_horizon(),
            step: default_step(),
            theta: None,
            gamma_policy: GammaPolicy::default(),
            sat_level: None,
            x0: None,
            observer_init: default_observer_init(),
            seed: 0,
            record_stride: None,
            check_stacking: false,
            force: false,
        }
    }
}

impl SimConfig {
    fn validate(&self) -> Result<usize> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Config(format!("step must be positive, got {}", self.step)));
        }
        if !(self.horizon >= self.step && self.horizon.is_finite()) {
            return Err(Error::Config(format!(
                "horizon {} must be at least one step ({})",
                self.horizon, self.step
            )));
        }
        Ok((self.horizon / self.step).round().max(1.0) as usize)
    }

    /// `x0`, either given or drawn from the seed.
    pub fn initial_state(&self, dim: usize) -> Result<Vec<f64>> {
        match &self.x0 {
            Some(x0) if x0.len() == dim => Ok(x0.clone()),
            Some(x0) => Err(Error::Dimension {
                block: "x0".into(),
                expected: dim.to_string(),
                got: x0.len().to_string(),
            }),
            None => Ok(uniform_state(dim, self.seed)),
        }
    }

    /// `ℳ` resolved against `x0`.
    pub fn resolved_sat_level(&self, x0: &[f64]) -> f64 {
        self.sat_level.unwrap_or_else(|| default_sat_level(x0))
    }
}

/// `10·max(1, ‖x0‖_∞)`.
pub fn default_sat_level(x0: &[f64]) -> f64 {
    10.0 * x0.iter().fold(1.0_f64, |m, v| m.max(v.abs()))
}

/// Seeded draw from `[0, 1]^dim`.
pub fn uniform_state(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| rng.gen_range(0.0..=1.0)).collect()
}

/// Summary of the stacking identity over a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StackingSummary {
    pub checks: usize,
    pub max_identity_gap: f64,
    /// Steps where `Σ‖e_{⋆i}^(p)‖ ≤ √2‖e‖` failed.
    pub sqrt2_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimResult {
    pub step: f64,
    pub steps: usize,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// `‖e‖` at each record; zero for the centralized loop.
    pub err_norm: Vec<f64>,
    /// `‖e_{i⋆}‖` per record and agent; empty for the centralized loop.
    pub agent_err: Vec<Vec<f64>>,
    pub sat_flags: Vec<bool>,
    /// `[start, end]` of every interval where saturation was active.
    pub saturation_intervals: Vec<(f64, f64)>,
    /// Full-resolution trapezoid of `‖x‖²`.
    pub performance_index: f64,
    /// `max ‖x(t)‖` over `[0.9T, T]`.
    pub steady_state_error: f64,
    /// `max ‖x(t)‖` over the run (observed `W_{T1}`).
    pub max_state_norm: f64,
    /// Observed `max ‖ū_i‖` per agent (`‖u_i‖` for the centralized loop).
    pub max_control: Vec<f64>,
    /// Largest fused estimate magnitude fed to the controller.
    pub peak_estimate: f64,
    pub sat_level: f64,
    pub stacking: Option<StackingSummary>,
    pub warnings: Vec<String>,
    pub final_state: Vec<f64>,
    pub final_error: f64,
}

/// Classical RK4 with reusable stage buffers.
#[derive(Debug, Clone)]
pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub fn new(dim: usize) -> Self {
        Self {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }

    /// Advances an autonomous system `y' = f(y)` by `h`.
    pub fn step(&mut self, y: &mut [f64], h: f64, mut f: impl FnMut(&[f64], &mut [f64])) {
        f(y, &mut self.k1);
        for ((t, y), k) in self.tmp.iter_mut().zip(y.iter()).zip(&self.k1) {
            *t = y + 0.5 * h * k;
        }
        f(&self.tmp, &mut self.k2);
        for ((t, y), k) in self.tmp.iter_mut().zip(y.iter()).zip(&self.k2) {
            *t = y + 0.5 * h * k;
        }
        f(&self.tmp, &mut self.k3);
        for ((t, y), k) in self.tmp.iter_mut().zip(y.iter()).zip(&self.k3) {
            *t = y + h * k;
        }
        f(&self.tmp, &mut self.k4);
        for (i, yi) in y.iter_mut().enumerate() {
            *yi += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn stride_for(config: &SimConfig, steps: usize) -> usize {
    config
        .record_stride
        .unwrap_or_else(|| steps.div_ceil(DEFAULT_RECORDS))
        .max(1)
}

/// Running accumulators shared by both loops.
struct Tracker {
    h: f64,
    horizon: f64,
    index: f64,
    last_sq: f64,
    steady: f64,
    max_norm: f64,
}

impl Tracker {
    fn new(h: f64, horizon: f64, x0: &[f64]) -> Self {
        let sq = x0.iter().map(|v| v * v).sum::<f64>();
        Self { h, horizon, index: 0.0, last_sq: sq, steady: 0.0, max_norm: sq.sqrt() }
    }

    fn advance(&mut self, t: f64, x: &[f64]) {
        let sq = x.iter().map(|v| v * v).sum::<f64>();
        self.index += 0.5 * self.h * (self.last_sq + sq);
        self.last_sq = sq;
        let n = sq.sqrt();
        self.max_norm = self.max_norm.max(n);
        if t >= 0.9 * self.horizon - 1e-12 {
            self.steady = self.steady.max(n);
        }
    }
}

/// Integrates `ẋ = (A + BK) x`.
pub fn run_centralized(plant: &BlockPlant, gains: &ControllerGains, config: &SimConfig) -> Result<SimResult> {
    let steps = config.validate()?;
    let h = config.horizon / steps as f64;
    let (a, b, _) = plant.assemble();
    let (n, m, _) = plant.orders();
    let big_n = plant.subsystems();
    let k = gains.assemble(big_n, n, m);
    let closed = &a + &b * &k;
    let dim = closed.nrows();
    let mut x = config.initial_state(dim)?;
    let stride = stride_for(config, steps);
    let mut rk = Rk4::new(dim);
    let mut tracker = Tracker::new(h, config.horizon, &x);
    let control = |x: &[f64]| -> Vec<f64> {
        let u = &k * DVector::from_column_slice(x);
        (0..big_n).map(|i| norm(&u.as_slice()[i * m..(i + 1) * m])).collect()
    };
    let mut max_control = control(&x);
    let mut result = empty_result(h, steps, config.sat_level.unwrap_or(f64::INFINITY));
    record(&mut result, 0.0, &x, 0.0, Vec::new(), false);
    let rhs = |y: &[f64], dy: &mut [f64]| {
        for (r, d) in dy.iter_mut().enumerate() {
            *d = closed.row(r).iter().zip(y).map(|(c, v)| c * v).sum();
        }
    };
    for s in 1..=steps {
        rk.step(&mut x, h, rhs);
        let t = s as f64 * h;
        check_finite(&x, s, t, "state")?;
        tracker.advance(t, &x);
        if s % stride == 0 || s == steps {
            for (mc, c) in max_control.iter_mut().zip(control(&x)) {
                *mc = mc.max(c);
            }
            record(&mut result, t, &x, 0.0, Vec::new(), false);
        }
    }
    finish(&mut result, tracker, x, 0.0);
    result.max_control = max_control;
    Ok(result)
}

fn empty_result(h: f64, steps: usize, sat_level: f64) -> SimResult {
    SimResult {
        step: h,
        steps,
        times: Vec::new(),
        states: Vec::new(),
        err_norm: Vec::new(),
        agent_err: Vec::new(),
        sat_flags: Vec::new(),
        saturation_intervals: Vec::new(),
        performance_index: 0.0,
        steady_state_error: 0.0,
        max_state_norm: 0.0,
        max_control: Vec::new(),
        peak_estimate: 0.0,
        sat_level,
        stacking: None,
        warnings: Vec::new(),
        final_state: Vec::new(),
        final_error: 0.0,
    }
}

fn record(result: &mut SimResult, t: f64, x: &[f64], err: f64, agent_err: Vec<f64>, sat: bool) {
    result.times.push(t);
    result.states.push(x.to_vec());
    result.err_norm.push(err);
    if !agent_err.is_empty() {
        result.agent_err.push(agent_err);
    }
    result.sat_flags.push(sat);
}

fn finish(result: &mut SimResult, tracker: Tracker, x: Vec<f64>, err: f64) {
    result.performance_index = tracker.index;
    result.steady_state_error = tracker.steady;
    result.max_state_norm = tracker.max_norm;
    result.final_state = x;
    result.final_error = err;
}

fn check_all_finite(v: &[f64], step: usize, time: f64, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged { step, time, reason: format!("{what} is not finite") })
    }
}

fn check_finite(v: &[f64], step: usize, time: f64, what: &str) -> Result<()> {
    let n = norm(v);
    if !n.is_finite() {
        return Err(Error::Diverged { step, time, reason: format!("{what} is not finite") });
    }
    if n > DIVERGENCE_LIMIT {
        return Err(Error::Diverged {
            step,
            time,
            reason: format!("{what} norm {n:.3e} exceeds {DIVERGENCE_LIMIT:.0e}"),
        });
    }
    Ok(())
}

/// `ω_max` of the distributed loop and the largest step the heuristic allows.
pub fn stiffness_step(system: &ObserverSystem) -> (f64, f64) {
    let omega = system.stiffness();
    (omega, STIFFNESS_SAFETY / omega.max(f64::MIN_POSITIVE))
}

/// Builds the observer system and integrates the distributed closed loop.
pub fn run_distributed(
    plant: &BlockPlant,
    assignment: &CoverAssignment,
    pair: &NetworkPair,
    design: &ObserverDesign,
    gains: &ControllerGains,
    config: &SimConfig,
) -> Result<SimResult> {
    let system = ObserverSystem::new(plant, assignment, pair, design, gains)?;
    run_distributed_with(system, design, config)
}

/// Integrates plant and observer banks under the saturated control `ū`.
pub fn run_distributed_with(
    mut system: ObserverSystem,
    design: &ObserverDesign,
    config: &SimConfig,
) -> Result<SimResult> {
    let steps = config.validate()?;
    if design.gamma <= design.gamma_lower_bound && !config.force {
        return Err(Error::GammaTooSmall { gamma: design.gamma, bound: design.gamma_lower_bound });
    }
    let h = config.horizon / steps as f64;
    let nx = system.plant_dimension();
    let x0 = config.initial_state(nx)?;
    let sat_level = config.resolved_sat_level(&x0);
    system.set_sat_level(sat_level);
    let (omega, h_max) = stiffness_step(&system);
    let mut result = empty_result(h, steps, sat_level);
    if h > h_max {
        result.warnings.push(format!(
            "step {h:.3e} exceeds {STIFFNESS_SAFETY}/ω_max = {h_max:.3e} (ω_max = {omega:.3e}); expect stiffness trouble"
        ));
    }
    if design.gamma <= design.gamma_lower_bound {
        result.warnings.push(format!(
            "γ = {:.4e} does not exceed the lower bound {:.4e}; convergence is not guaranteed",
            design.gamma, design.gamma_lower_bound
        ));
    }
    let layout = system.layout().clone();
    let (_, m, _) = system.orders();
    let mut y = x0.clone();
    y.extend(layout.constant_state(config.observer_init));
    let dim = y.len();
    let stride = stride_for(config, steps);
    let mut rk = Rk4::new(dim);
    let mut ws = system.workspace();
    let mut tracker = Tracker::new(h, config.horizon, &x0);
    let mut stacking = config.check_stacking.then_some(StackingSummary {
        checks: 0,
        max_identity_gap: 0.0,
        sqrt2_violations: 0,
    });
    let mut max_control = vec![0.0_f64; layout.subsystems()];
    let mut sat_open: Option<f64> = None;
    let mut peak = 0.0_f64;

    let observe = |y: &[f64], stacking: &mut Option<StackingSummary>| {
        let groups = error_groupings(&layout, &y[nx..], &y[..nx]);
        if let Some(summary) = stacking.as_mut() {
            let check = groups.check();
            summary.checks += 1;
            summary.max_identity_gap = summary.max_identity_gap.max(check.identity_gap);
            summary.sqrt2_violations += usize::from(!check.sqrt2_holds);
        }
        let agents: Vec<f64> = groups.by_agent.iter().map(DVector::norm).collect();
        (groups.total, agents)
    };
    let track_control = |y: &[f64], max_control: &mut Vec<f64>| {
        let u = system.applied_controls(&y[nx..]);
        for (i, mc) in max_control.iter_mut().enumerate() {
            *mc = mc.max(norm(&u[i * m..(i + 1) * m]));
        }
    };

    let (e0, a0) = observe(&y, &mut stacking);
    track_control(&y, &mut max_control);
    let mut first_flags = {
        let (mut dx, mut dxh) = (vec![0.0; nx], vec![0.0; dim - nx]);
        system.closed_loop_rhs(&y[..nx], &y[nx..], &mut dx, &mut dxh, &mut ws)
    };
    if first_flags.clipped {
        sat_open = Some(0.0);
    }
    peak = peak.max(first_flags.peak);
    record(&mut result, 0.0, &x0, e0, a0, first_flags.clipped);
    let mut err = e0;

    for s in 1..=steps {
        let mut stage = 0;
        rk.step(&mut y, h, |state, d| {
            let (dx, dxh) = d.split_at_mut(nx);
            let flags = system.closed_loop_rhs(&state[..nx], &state[nx..], dx, dxh, &mut ws);
            if stage == 0 {
                first_flags = flags;
            }
            stage += 1;
        });
        let t = s as f64 * h;
        let checked = check_finite(&y[..nx], s, t, "plant state")
            .and_then(|_| check_all_finite(&y[nx..], s, t, "observer bank"));
        if let Err(Error::Diverged { step, time, reason }) = checked {
            return Err(Error::Diverged {
                step,
                time,
                reason: format!(
                    "{reason}; γ = {:.3e} vs bound {:.3e}, h = {h:.3e} vs {STIFFNESS_SAFETY}/ω_max = {h_max:.3e}",
                    design.gamma, design.gamma_lower_bound
                ),
            });
        }
        tracker.advance(t, &y[..nx]);
        peak = peak.max(first_flags.peak);
        match (first_flags.clipped, sat_open) {
            (true, None) => sat_open = Some(t - h),
            (false, Some(start)) => {
                result.saturation_intervals.push((start, t - h));
                sat_open = None;
            }
            _ => {}
        }
        if s % stride == 0 || s == steps {
            let (e, agents) = observe(&y, &mut stacking);
            err = e;
            track_control(&y, &mut max_control);
            record(&mut result, t, &y[..nx], e, agents, first_flags.clipped);
        }
    }
    if let Some(start) = sat_open {
        result.saturation_intervals.push((start, config.horizon));
    }
    if sat_level.is_finite() && peak > 0.8 * sat_level {
        result.warnings.push(format!(
            "a fused estimate reached {peak:.3e}, above 0.8·ℳ = {:.3e}",
            0.8 * sat_level
        ));
    }
    result.peak_estimate = peak;
    result.max_control = max_control;
    result.stacking = stacking;
    let x = y[..nx].to_vec();
    finish(&mut result, tracker, x, err);
    Ok(result)
}

/// Trapezoid of `Σ_ij x_ij(t)²` over the recorded grid.
pub fn performance_index(result: &SimResult) -> f64 {
    trapezoid(&result.times, &result.states)
}

/// Trapezoid of the squared norm of `states` sampled at `times`.
pub fn trapezoid(times: &[f64], states: &[Vec<f64>]) -> f64 {
    let sq: Vec<f64> = states.iter().map(|x| x.iter().map(|v| v * v).sum()).collect();
    times
        .windows(2)
        .zip(sq.windows(2))
        .map(|(t, q)| 0.5 * (t[1] - t[0]) * (q[0] + q[1]))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InvariantSetReport {
    pub c_theta: f64,
    pub c_k: f64,
    /// Observed `W_{T1}`.
    pub w_t1: f64,
    pub kappa: f64,
    pub omega_e_radius: f64,
    pub omega_x_radius: f64,
    pub qb_norm: f64,
    pub k_norm: f64,
    pub steady_state_error: f64,
    /// `steady_state_error ≤ omega_x_radius`.
    pub contains_steady_state: bool,
}

/// Radii of `Ω_e` and `Ω_x` from the design constants and run observations.
///
/// `c_2 = 1`. `κ` uses the observed `max ‖ū_i‖`, `‖u_i‖ ≤ ‖K_i‖ W_{T1}` and the
/// truncation term `√|O(P_l) \ (N_i ∪ {i})| ‖K_i‖ W_{T1}` over every agent `l`
/// estimating `i`.
pub fn invariant_set_report(
    design: &ObserverDesign,
    gains: &ControllerGains,
    plant: &BlockPlant,
    assignment: &CoverAssignment,
    pair: &NetworkPair,
    result: &SimResult,
) -> Result<InvariantSetReport> {
    let bounds = TransientBounds {
        w_t1: result.max_state_norm,
        max_control: result.max_control.clone(),
    };
    invariant_set_radii(design, gains, plant, assignment, pair, &bounds, result.steady_state_error)
}

/// `W_{T1}` and the per-agent `max ‖ū_i‖` that enter `κ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransientBounds {
    pub w_t1: f64,
    pub max_control: Vec<f64>,
}

impl TransientBounds {
    /// Componentwise maximum, a bound valid for every run it covers.
    pub fn merge(&self, other: &TransientBounds) -> TransientBounds {
        let len = self.max_control.len().max(other.max_control.len());
        let at = |v: &[f64], i: usize| v.get(i).copied().unwrap_or(0.0);
        TransientBounds {
            w_t1: self.w_t1.max(other.w_t1),
            max_control: (0..len)
                .map(|i| at(&self.max_control, i).max(at(&other.max_control, i)))
                .collect(),
        }
    }
}

/// [`invariant_set_report`] with explicit transient bounds, so radii at
/// different `θ` can be compared under one `W_{T1}`.
pub fn invariant_set_radii(
    design: &ObserverDesign,
    gains: &ControllerGains,
    plant: &BlockPlant,
    assignment: &CoverAssignment,
    pair: &NetworkPair,
    bounds: &TransientBounds,
    steady_state_error: f64,
) -> Result<InvariantSetReport> {
    let (n, m, _) = plant.orders();
    let big_n = plant.subsystems();
    let w = bounds.w_t1;
    let mut kappa = 0.0_f64;
    for i in 0..big_n {
        let k_i = gains.row_norm(i, big_n, n, m);
        let m_bar = bounds.max_control.get(i).copied().unwrap_or(0.0);
        let m_u = k_i * w;
        let mut truncation = 0.0_f64;
        for l in 0..big_n {
            if l == i || !assignment.union_of(l).contains(&i) {
                continue;
            }
            let missing = assignment
                .union_of(l)
                .into_iter()
                .filter(|&j| j != i && !pair.has_phys(i, j))
                .count();
            truncation = truncation.max((missing as f64).sqrt() * k_i * w);
        }
        kappa = kappa.max(m_bar + m_u + truncation);
    }
    let c = &design.constants;
    let c_k = 2.0 * c.lambda_p_unit * c.lambda_bar * (c.norm_a * w + c.norm_b * kappa);
    let c_theta = design.c_theta();
    let (a, b, _) = plant.assemble();
    let k = gains.assemble(big_n, n, m);
    let closed = &a + &b * &k;
    let q = lyapunov(&closed, &DMatrix::identity(closed.nrows(), closed.nrows()))?;
    let qb_norm = spectral_norm(&(&q * &b));
    let k_norm = spectral_norm(&k);
    let (omega_e_radius, omega_x_radius) = if c_theta > 0.0 {
        let e = c_k / c_theta;
        (e, 4.0 * e * qb_norm * k_norm)
    } else {
        (f64::INFINITY, f64::INFINITY)
    };
    Ok(InvariantSetReport {
        c_theta,
        c_k,
        w_t1: w,
        kappa,
        omega_e_radius,
        omega_x_radius,
        qb_norm,
        k_norm,
        steady_state_error,
        contains_steady_state: steady_state_error <= omega_x_radius,
    })
}

/// How the sweep picks its step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepPolicy {
    Fixed { step: f64 },
    /// `min(max_step, safety / ω_max)`.
    Auto { safety: f64, max_step: f64 },
}

impl Default for StepPolicy {
    fn default() -> Self {
        StepPolicy::Auto { safety: STIFFNESS_SAFETY, max_step: 1e-3 }
    }
}

impl StepPolicy {
    pub fn resolve(&self, omega: f64) -> f64 {
        match *self {
            StepPolicy::Fixed { step } => step,
            StepPolicy::Auto { safety, max_step } => max_step.min(safety / omega.max(f64::MIN_POSITIVE)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub gamma_policy: GammaPolicy,
    /// Observer poles in the scaled coordinates; `None` uses `{−1, …, −n}`.
    #[serde(default)]
    pub observer_poles: Option<Vec<f64>>,
    #[serde(default)]
    pub sat_level: Option<f64>,
    #[serde(default = "default_observer_init")]
    pub observer_init: f64,
    #[serde(default)]
    pub step: StepPolicy,
    #[serde(default)]
    pub similarity: WeightSimilarity,
    #[serde(default)]
    pub force: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            horizon: default_horizon(),
            gamma_policy: GammaPolicy::default(),
            observer_poles: None,
            sat_level: None,
            observer_init: default_observer_init(),
            step: StepPolicy::default(),
            similarity: WeightSimilarity::default(),
            force: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub theta: f64,
    pub gamma: f64,
    pub gamma_bound: f64,
    pub step: f64,
    /// `I_{x_r} − I_{x_c}` per successful repeat.
    pub diffs: Vec<f64>,
    /// Repeats that diverged.
    pub failures: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub seconds: f64,
}

/// Repeats at every θ with `x0` drawn from `seed + repeat` (the same draws
/// at every θ), reporting `I_{x_r} − I_{x_c}`.
#[allow(clippy::too_many_arguments)]
pub fn theta_sweep(
    plant: &BlockPlant,
    assignment: &CoverAssignment,
    pair: &NetworkPair,
    gains: &ControllerGains,
    thetas: &[f64],
    repeats: usize,
    seed: u64,
    config: &SweepConfig,
) -> Result<Vec<SweepRow>> {
    if repeats == 0 || thetas.is_empty() {
        return Err(Error::Config("sweep needs at least one θ and one repeat".into()));
    }
    let mut designs = Vec::with_capacity(thetas.len());
    for &theta in thetas {
        let mut design = synthesize(
            plant,
            assignment,
            pair,
            theta,
            gains,
            config.gamma_policy,
            config.observer_poles.as_deref(),
            config.force,
        )?;
        design.set_similarity(config.similarity)?;
        let system = ObserverSystem::new(plant, assignment, pair, &design, gains)?;
        let step = config.step.resolve(system.stiffness());
        designs.push((design, system, step));
    }
    let dim = plant.state_dim();
    let jobs: Vec<(usize, usize)> = (0..thetas.len())
        .flat_map(|t| (0..repeats).map(move |r| (t, r)))
        .collect();
    let outcomes: Vec<(usize, f64, Result<f64>)> = jobs
        .par_iter()
        .map(|&(t, r)| {
            let started = std::time::Instant::now();
            let (design, system, step) = &designs[t];
            let x0 = uniform_state(dim, seed.wrapping_add(r as u64));
            let sim = SimConfig {
                horizon: config.horizon,
                step: *step,
                theta: Some(design.theta),
                gamma_policy: config.gamma_policy,
                sat_level: config.sat_level,
                x0: Some(x0),
                observer_init: config.observer_init,
                seed: seed.wrapping_add(r as u64),
                record_stride: Some(usize::MAX),
                check_stacking: false,
                force: config.force,
            };
            let diff = run_centralized(plant, gains, &SimConfig { step: *step, ..sim.clone() })
                .and_then(|c| {
                    run_distributed_with(system.clone(), design, &sim)
                        .map(|d| d.performance_index - c.performance_index)
                });
            (t, started.elapsed().as_secs_f64(), diff)
        })
        .collect();
    let mut rows = Vec::with_capacity(thetas.len());
    for (t, (design, _, step)) in designs.iter().enumerate() {
        let mut diffs = Vec::new();
        let mut failures = 0;
        let mut seconds = 0.0;
        for (_, secs, outcome) in outcomes.iter().filter(|o| o.0 == t) {
            seconds += secs;
            match outcome {
                Ok(d) => diffs.push(*d),
                Err(Error::Diverged { .. }) => failures += 1,
                Err(e) => return Err(Error::Numeric(format!("sweep at θ = {}: {e}", design.theta))),
            }
        }
        let mean = if diffs.is_empty() { f64::NAN } else { diffs.iter().sum::<f64>() / diffs.len() as f64 };
        rows.push(SweepRow {
            theta: design.theta,
            gamma: design.gamma,
            gamma_bound: design.gamma_lower_bound,
            step: *step,
            min: diffs.iter().copied().fold(f64::INFINITY, f64::min),
            max: diffs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean,
            diffs,
            failures,
            seconds,
        });
    }
    Ok(rows)
}

/// Writes `t, x..., err_norm, sat_flag`, one row per record. A leading
/// `# manifest` comment carries the run hash when given.
pub fn write_csv(result: &SimResult, out: &mut impl Write, manifest: Option<&str>, block_order: usize) -> Result<()> {
    if let Some(hash) = manifest {
        writeln!(out, "# manifest {hash}")?;
    }
    let dim = result.states.first().map_or(0, Vec::len);
    let mut header = vec!["t".to_string()];
    for k in 0..dim {
        header.push(format!("x{}_{}", k / block_order + 1, k % block_order + 1));
    }
    header.push("err_norm".into());
    header.push("sat_flag".into());
    writeln!(out, "{}", header.join(","))?;
    for (r, t) in result.times.iter().enumerate() {
        let mut row = vec![format!("{t}")];
        row.extend(result.states[r].iter().map(|v| format!("{v:e}")));
        row.push(format!("{:e}", result.err_norm[r]));
        row.push(u8::from(result.sat_flags[r]).to_string());
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Sweep table as CSV.
pub fn write_sweep_csv(rows: &[SweepRow], out: &mut impl Write, manifest: Option<&str>) -> Result<()> {
    if let Some(hash) = manifest {
        writeln!(out, "# manifest {hash}")?;
    }
    writeln!(out, "theta,gamma,gamma_bound,step,repeats,failures,mean,min,max")?;
    for r in rows {
        writeln!(
            out,
            "{},{:e},{:e},{:e},{},{},{:e},{:e},{:e}",
            r.theta,
            r.gamma,
            r.gamma_bound,
            r.step,
            r.diffs.len(),
            r.failures,
            r.mean,
            r.min,
            r.max
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coverage::solve;
    use crate::gains::{design_controller_microgrid, CrossGain};
    use crate::plant::build_microgrid;

    fn scalar_plant(a: f64) -> (BlockPlant, ControllerGains) {
        let mut blocks = std::collections::BTreeMap::new();
        blocks.insert((0, 0), DMatrix::from_element(1, 1, a));
        let plant = BlockPlant::new(
            1,
            1,
            1,
            blocks,
            vec![DMatrix::from_element(1, 1, 1.0)],
            vec![DMatrix::from_element(1, 1, 1.0)],
        )
        .unwrap();
        let mut k = std::collections::BTreeMap::new();
        k.insert((0, 0), DMatrix::from_element(1, 1, 0.0));
        (plant, ControllerGains { k_blocks: k, sat_level: 10.0 })
    }

    #[test]
    fn scalar_decay_matches_exponential() {
        let (plant, gains) = scalar_plant(-1.0);
        let cfg = SimConfig { horizon: 1.0, step: 0.01, x0: Some(vec![1.5]), ..SimConfig::default() };
        let r = run_centralized(&plant, &gains, &cfg).unwrap();
        assert!((r.final_state[0] - 1.5 * (-1.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn zero_initial_state_stays_zero() {
        let pair = NetworkPair::star(4).unwrap();
        let plant = build_microgrid(&pair, 1, 2.5e8).unwrap();
        let gains = design_controller_microgrid(&plant, &[-3.0, -4.0], CrossGain::Cancel, 10.0).unwrap();
        let cfg = SimConfig { horizon: 0.5, step: 1e-3, x0: Some(vec![0.0; 8]), ..SimConfig::default() };
        let r = run_centralized(&plant, &gains, &cfg).unwrap();
        assert!(r.states.iter().all(|x| x.iter().all(|v| *v == 0.0)));
        assert_eq!(r.performance_index, 0.0);
    }

    #[test]
    fn stable_microgrid_decays() {
        let pair = NetworkPair::star(5).unwrap();
        let plant = build_microgrid(&pair, 2, 2.5e8).unwrap();
        let gains = design_controller_microgrid(&plant, &[-3.0, -4.0], CrossGain::Cancel, 10.0).unwrap();
        let cfg = SimConfig { horizon: 2.0, step: 1e-3, seed: 4, ..SimConfig::default() };
        let r = run_centralized(&plant, &gains, &cfg).unwrap();
        assert!(norm(&r.final_state) < norm(&r.states[0]));
    }

    #[test]
    fn centralized_matches_matrix_exponential() {
        let pair = NetworkPair::star(3).unwrap();
        let plant = build_microgrid(&pair, 5, 2.5e8).unwrap();
        let gains = design_controller_microgrid(&plant, &[-3.0, -4.0], CrossGain::Cancel, 10.0).unwrap();
        let cfg = SimConfig { horizon: 1.0, step: 1e-4, seed: 8, ..SimConfig::default() };
        let r = run_centralized(&plant, &gains, &cfg).unwrap();
        let (a, b, _) = plant.assemble();
        let closed = a + b * gains.assemble(3, 2, 1);
        let exact = closed.exp() * DVector::from_vec(r.states[0].clone());
        for (got, want) in r.final_state.iter().zip(exact.iter()) {
            assert!((got - want).abs() < 1e-8 * (1.0 + want.abs()), "{got} vs {want}");
        }
    }

    #[test]
    fn performance_index_rectangle_and_exponential() {
        let times: Vec<f64> = (0..=100).map(|k| k as f64 * 0.01).collect();
        let states = vec![vec![2.0, 1.0]; times.len()];
        assert!((trapezoid(&times, &states) - 5.0).abs() < 1e-9);
        let (plant, gains) = scalar_plant(-1.0);
        let cfg = SimConfig { horizon: 10.0, step: 1e-3, x0: Some(vec![1.0]), record_stride: Some(1), ..SimConfig::default() };
        let r = run_centralized(&plant, &gains, &cfg).unwrap();
        let exact = (1.0 - (-20.0f64).exp()) / 2.0;
        assert!((r.performance_index - exact).abs() < 1e-6);
        assert!((performance_index(&r) - r.performance_index).abs() < 1e-12);
        assert!(trapezoid(&[0.0, 1.0], &[vec![0.0], vec![0.0]]) == 0.0);
    }

    #[test]
    fn config_rejects_bad_steps() {
        let (plant, gains) = scalar_plant(-1.0);
        let bad = SimConfig { step: 0.0, ..SimConfig::default() };
        assert!(matches!(run_centralized(&plant, &gains, &bad), Err(Error::Config(_))));
        let short = SimConfig { horizon: 1e-4, step: 1e-3, ..SimConfig::default() };
        assert!(matches!(run_centralized(&plant, &gains, &short), Err(Error::Config(_))));
    }

    #[test]
    fn unstable_run_reports_divergence() {
        let (plant, gains) = scalar_plant(5.0);
        let cfg = SimConfig { horizon: 10.0, step: 1e-2, x0: Some(vec![1.0]), ..SimConfig::default() };
        let err = run_centralized(&plant, &gains, &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
    }

    fn star_design(theta: f64) -> (NetworkPair, BlockPlant, CoverAssignment, ControllerGains, ObserverDesign) {
        let pair = NetworkPair::star(4).unwrap();
        let plant = build_microgrid(&pair, 3, 2.5e8).unwrap();
        let cover = solve(&pair);
        let gains = design_controller_microgrid(&plant, &[-3.0, -4.0], CrossGain::Cancel, 10.0).unwrap();
        let design = synthesize(
            &plant,
            &cover,
            &pair,
            theta,
            &gains,
            GammaPolicy::default(),
            Some(&[-12.0, -13.0]),
            false,
        )
        .unwrap();
        (pair, plant, cover, gains, design)
    }

    #[test]
    fn distributed_run_is_deterministic_and_converges() {
        let (pair, plant, cover, gains, design) = star_design(6.0);
        let sys = ObserverSystem::new(&plant, &cover, &pair, &design, &gains).unwrap();
        let (_, h_max) = stiffness_step(&sys);
        let cfg = SimConfig { horizon: 1.0, step: h_max.min(1e-3), seed: 2, check_stacking: true, ..SimConfig::default() };
        let a = run_distributed(&plant, &cover, &pair, &design, &gains, &cfg).unwrap();
        let b = run_distributed(&plant, &cover, &pair, &design, &gains, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.final_error < 5e-2 * a.err_norm[0]);
        let stacking = a.stacking.unwrap();
        assert!(stacking.max_identity_gap <= 1e-12);
        assert_eq!(stacking.checks, a.times.len());
    }

    #[test]
    fn without_clipping_saturation_changes_nothing() {
        let (pair, plant, cover, gains, design) = star_design(6.0);
        let x0 = vec![0.2; 8];
        let base = SimConfig {
            horizon: 0.2,
            step: 1e-4,
            x0: Some(x0),
            observer_init: 0.2,
            sat_level: Some(1e6),
            ..SimConfig::default()
        };
        let a = run_distributed(&plant, &cover, &pair, &design, &gains, &base).unwrap();
        assert!(a.saturation_intervals.is_empty());
        let b = run_distributed(
            &plant,
            &cover,
            &pair,
            &design,
            &gains,
            &SimConfig { sat_level: Some(f64::INFINITY), ..base },
        )
        .unwrap();
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn small_gamma_needs_force() {
        let pair = NetworkPair::star(4).unwrap();
        let plant = build_microgrid(&pair, 3, 2.5e8).unwrap();
        let cover = solve(&pair);
        let gains = design_controller_microgrid(&plant, &[-3.0, -4.0], CrossGain::Cancel, 10.0).unwrap();
        let design =
            synthesize(&plant, &cover, &pair, 2.0, &gains, GammaPolicy::Fixed { gamma: 1.0 }, None, true).unwrap();
        let cfg = SimConfig { horizon: 0.01, step: 1e-3, ..SimConfig::default() };
        let err = run_distributed(&plant, &cover, &pair, &design, &gains, &cfg).unwrap_err();
        assert!(matches!(err, Error::GammaTooSmall { .. }));
    }

    #[test]
    fn csv_layout() {
        let (plant, gains) = scalar_plant(-1.0);
        let cfg = SimConfig { horizon: 0.02, step: 0.01, x0: Some(vec![1.0]), record_stride: Some(1), ..SimConfig::default() };
        let r = run_centralized(&plant, &gains, &cfg).unwrap();
        let mut buf = Vec::new();
        write_csv(&r, &mut buf, Some("abc"), 1).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# manifest abc");
        assert_eq!(lines[1], "t,x1_1,err_norm,sat_flag");
        assert_eq!(lines.len(), 5);
    }

    #[test]
    fn single_theta_single_repeat_gives_one_row() {
        let (pair, plant, cover, gains, _) = star_design(6.0);
        let cfg = SweepConfig {
            horizon: 0.2,
            observer_poles: Some(vec![-12.0, -13.0]),
            ..SweepConfig::default()
        };
        let rows = theta_sweep(&plant, &cover, &pair, &gains, &[6.0], 1, 3, &cfg).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].diffs.len() + rows[0].failures, 1);
    }

    #[test]
    fn radii_shrink_with_theta_under_fixed_bounds() {
        let pair = NetworkPair::star(4).unwrap();
        let plant = build_microgrid(&pair, 1, 2.5e8).unwrap();
        let cover = solve(&pair);
        let gains = design_controller_microgrid(&plant, &[-3.0, -4.0], CrossGain::Cancel, f64::INFINITY).unwrap();
        let bounds = TransientBounds { w_t1: 10.0, max_control: vec![100.0; 4] };
        let mut last = (0.0, f64::INFINITY);
        for theta in [5.0, 10.0, 20.0] {
            let design = synthesize(&plant, &cover, &pair, theta, &gains, GammaPolicy::Quadratic, Some(&[-8.0, -9.0]), true)
                .unwrap();
            let r = invariant_set_radii(&design, &gains, &plant, &cover, &pair, &bounds, 0.0).unwrap();
            assert!(r.c_theta > last.0, "c(θ) not increasing at θ={theta}");
            assert!(r.omega_x_radius < last.1, "radius not shrinking at θ={theta}");
            last = (r.c_theta, r.omega_x_radius);
        }
    }

    #[test]
    fn merged_bounds_dominate_both() {
        let a = TransientBounds { w_t1: 2.0, max_control: vec![1.0, 5.0] };
        let b = TransientBounds { w_t1: 3.0, max_control: vec![4.0] };
        let m = a.merge(&b);
        assert_eq!(m.w_t1, 3.0);
        assert_eq!(m.max_control, vec![4.0, 5.0]);
    }
}
