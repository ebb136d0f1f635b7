//! Observer and controller synthesis.
//!
//! Observer gains live in high-gain coordinates: with
//! `Γ_θ = diag(θ^{n-1}, …, θ, 1)` the block pair becomes
//! `Ā = Γ_θ A Γ_θ⁻¹ / θ^{n-1}`, `C̄ = C Γ_θ⁻¹`, a gain `H̄` is placed on it,
//! and the injected gain is `θ Γ_θ⁻¹ H` with `H = θ^{n-2} H̄`. The weight `P`
//! solves `sym{P (Ā − H̄C̄)} = −2γ I` and the consensus gain `γ` must clear a
//! lower bound built from graph and plant constants.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::coverage::CoverAssignment;
use crate::error::{Error, Result};
use crate::linalg::{
    ackermann, check_poles, is_hurwitz, lyapunov, min_symmetric_eigenvalue, numeric_rank,
    observability_matrix, spectral_abscissa, spectral_norm, sym,
};
use crate::netgraph::{grounded_spectrum, NetworkPair};
use crate::plant::{BlockPlant, MatrixData, RANK_TOL};

/// Default observer poles `{−1, …, −n}`.
pub fn default_observer_poles(n: usize) -> Vec<f64> {
    (1..=n).map(|k| -(k as f64)).collect()
}

/// Default local controller poles `{−3, −4, …}`.
pub fn default_controller_poles(n: usize) -> Vec<f64> {
    (0..n).map(|k| -(k as f64) - 3.0).collect()
}

/// `Γ_θ = diag(θ^{n-1}, …, θ, 1)`.
pub fn gamma_theta(n: usize, theta: f64) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_iterator(
        n,
        (0..n).map(|k| theta.powi((n - 1 - k) as i32)),
    ))
}

fn gamma_theta_inv(n: usize, theta: f64) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_iterator(
        n,
        (0..n).map(|k| theta.powi(-((n - 1 - k) as i32))),
    ))
}

/// `(Ā, C̄)` for a block pair.
pub fn transformed_pair(a: &DMatrix<f64>, c: &DMatrix<f64>, theta: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let g = gamma_theta(n, theta);
    let gi = gamma_theta_inv(n, theta);
    let abar = &g * a * &gi / theta.powi(n as i32 - 1);
    let cbar = c * gi;
    (abar, cbar)
}

/// `H̄` placing the eigenvalues of `Ā − H̄C̄` at `poles`.
///
/// With several outputs the first output row that alone makes the pair
/// observable carries the whole gain.
pub fn design_observer_gain(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    theta: f64,
    poles: &[f64],
) -> Result<DMatrix<f64>> {
    if !(theta >= 1.0 && theta.is_finite()) {
        return Err(Error::Config(format!("theta must be at least 1, got {theta}")));
    }
    check_poles(poles)?;
    let n = a.nrows();
    if numeric_rank(&observability_matrix(a, c), RANK_TOL) < n {
        return Err(Error::Unobservable(format!("(C, A) has rank below {n}")));
    }
    let (abar, cbar) = transformed_pair(a, c, theta);
    for r in 0..cbar.nrows() {
        let row = DMatrix::from_row_slice(1, n, cbar.row(r).transpose().as_slice());
        if numeric_rank(&observability_matrix(&abar, &row), RANK_TOL) < n {
            continue;
        }
        // dual placement on (Āᵀ, c̄ᵀ)
        let k = ackermann(&abar.transpose(), &DVector::from_column_slice(row.as_slice()), poles)?;
        let mut hbar = DMatrix::zeros(n, cbar.nrows());
        hbar.set_column(r, &k.transpose().column(0));
        let closed = &abar - &hbar * &cbar;
        if !is_hurwitz(&closed) {
            return Err(Error::Placement(format!(
                "placed observer is not Hurwitz (abscissa {:.3e})",
                spectral_abscissa(&closed)
            )));
        }
        return Ok(hbar);
    }
    Err(Error::Unobservable(
        "no single output row observes the block; multi-output placement is not supported".into(),
    ))
}

/// Solves `P M + Mᵀ P = −2γ I` for a Hurwitz `M`.
pub fn solve_weight(m: &DMatrix<f64>, gamma: f64) -> Result<DMatrix<f64>> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
    }
    let n = m.nrows();
    let p = lyapunov(m, &(DMatrix::identity(n, n) * (2.0 * gamma)))?;
    if min_symmetric_eigenvalue(&p) <= 0.0 {
        return Err(Error::Numeric("observer weight is not positive definite".into()));
    }
    Ok(p)
}

/// Relative residual `‖sym{P M} + 2γ I‖_F / (2‖P‖_F‖M‖_F + 2γ√n)`.
///
/// Normalised as a backward error so that badly conditioned placements with
/// large weights are judged on solver accuracy, not on their scale.
pub fn weight_residual(p: &DMatrix<f64>, m: &DMatrix<f64>, gamma: f64) -> f64 {
    let n = p.nrows();
    let raw = (sym(&(p * m)) + DMatrix::identity(n, n) * (2.0 * gamma)).norm();
    raw / (2.0 * p.norm() * m.norm() + 2.0 * gamma * (n as f64).sqrt())
}

/// How off-diagonal controller blocks treat the physical coupling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossGain {
    /// `K_ij = −B_i⁺ A_ij`: the input channel cancels the coupling.
    #[default]
    Cancel,
    /// `K_ij = +B_i⁺ A_ij`, which reinforces the coupling instead of cancelling it.
    Reinforce,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerGains {
    /// `K_ij` (m×n), present only for `j ∈ N_i ∪ {i}`.
    pub k_blocks: BTreeMap<(usize, usize), DMatrix<f64>>,
    /// Saturation level `ℳ` of the applied control.
    pub sat_level: f64,
}

impl ControllerGains {
    pub fn k(&self, i: usize, j: usize) -> Option<&DMatrix<f64>> {
        self.k_blocks.get(&(i, j))
    }

    /// Dense `K` (mN×nN).
    pub fn assemble(&self, subsystems: usize, n: usize, m: usize) -> DMatrix<f64> {
        let mut k = DMatrix::zeros(m * subsystems, n * subsystems);
        for (&(i, j), blk) in &self.k_blocks {
            k.view_mut((i * m, j * n), (m, n)).copy_from(blk);
        }
        k
    }

    /// `‖K_i‖`: spectral norm of agent `i`'s block row.
    pub fn row_norm(&self, i: usize, subsystems: usize, n: usize, m: usize) -> f64 {
        let mut row = DMatrix::zeros(m, n * subsystems);
        for (&(r, j), blk) in self.k_blocks.range((i, 0)..(i + 1, 0)) {
            debug_assert_eq!(r, i);
            row.view_mut((0, j * n), (m, n)).copy_from(blk);
        }
        spectral_norm(&row)
    }
}

/// Coupling-compensating controller for single-input blocks: off-diagonal
/// gains from the plant blocks and `K_ii` placing `A_ii + B_i K_ii` at
/// `poles`. The assembled `A + BK` must be Hurwitz.
pub fn design_controller_microgrid(
    plant: &BlockPlant,
    poles: &[f64],
    cross: CrossGain,
    sat_level: f64,
) -> Result<ControllerGains> {
    let (n, m, _) = plant.orders();
    if m != 1 {
        return Err(Error::Placement(format!("single-input blocks required, got m = {m}")));
    }
    if !(sat_level > 0.0) {
        return Err(Error::Config(format!("saturation level must be positive, got {sat_level}")));
    }
    check_poles(poles)?;
    let mut k_blocks = BTreeMap::new();
    for i in 0..plant.subsystems() {
        let b = plant.b(i);
        // (BᵀB)⁻¹Bᵀ; exact for unit input columns such as [0; 1]
        let pinv = (b.transpose() * b)
            .try_inverse()
            .ok_or_else(|| Error::Uncontrollable(format!("B_{} has dependent columns", i + 1)))?
            * b.transpose();
        for (&(r, j), a_ij) in plant.a_blocks().range((i, 0)..(i + 1, 0)) {
            debug_assert_eq!(r, i);
            if j == i {
                continue;
            }
            let k = &pinv * a_ij;
            let k = match cross {
                CrossGain::Cancel => -k,
                CrossGain::Reinforce => k,
            };
            k_blocks.insert((i, j), k);
        }
        let k = ackermann(plant.a_diag(i), &b.column(0).into_owned(), poles)
            .map_err(|e| Error::Placement(format!("block {}: {e}", i + 1)))?;
        k_blocks.insert((i, i), -k);
    }
    let gains = ControllerGains { k_blocks, sat_level };
    let (a, b, _) = plant.assemble();
    let closed = a + b * gains.assemble(plant.subsystems(), n, m);
    let abscissa = spectral_abscissa(&closed);
    if !(abscissa < 0.0) {
        return Err(Error::NotHurwitz { abscissa });
    }
    Ok(gains)
}

/// Graph and plant constants entering the coupling-gain bound.
///
/// `lambda_p_unit` is the largest `σ̄(P_i)` for `γ = 1`; the weight scales
/// linearly in `γ`, so the bound is written with unit weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralConstants {
    pub lambda_min_cover: f64,
    pub lambda_a: f64,
    pub lambda_p_unit: f64,
    pub lambda_bar: f64,
    pub rho: f64,
    pub norm_a: f64,
    pub norm_b: f64,
}

impl SpectralConstants {
    /// The bound `(λ_A + 2λ_P λ̄ (‖A‖ + ρ‖B‖)) / (2θ^{n-1} λ̲)`.
    pub fn gamma_bound(&self, theta: f64, n: usize) -> f64 {
        (self.lambda_a + 2.0 * self.lambda_p_unit * self.lambda_bar * (self.norm_a + self.rho * self.norm_b))
            / (2.0 * theta.powi(n as i32 - 1) * self.lambda_min_cover)
    }

    /// `c(θ) = 2γθ^{n-1}λ̲ − λ_A − 2λ_P λ̄ (‖A‖ + ρ‖B‖)`; positive exactly when
    /// `γ` clears the bound.
    pub fn c_theta(&self, theta: f64, gamma: f64, n: usize) -> f64 {
        2.0 * gamma * theta.powi(n as i32 - 1) * self.lambda_min_cover
            - self.lambda_a
            - 2.0 * self.lambda_p_unit * self.lambda_bar * (self.norm_a + self.rho * self.norm_b)
    }
}

/// Smallest grounded-Laplacian eigenvalue over every set and every member
/// of it taken as the measuring node.
pub fn min_cover_eigenvalue(assignment: &CoverAssignment, pair: &NetworkPair) -> Result<f64> {
    let mut lowest = f64::INFINITY;
    for set in assignment.active_sets() {
        for &anchor in &set.members {
            let spec = grounded_spectrum(pair, &set.members, anchor)?;
            lowest = lowest.min(spec.grounded_min_eig);
        }
    }
    if lowest.is_infinite() {
        return Err(Error::InvalidCover("assignment has no sets".into()));
    }
    Ok(lowest)
}

pub fn spectral_constants(
    plant: &BlockPlant,
    assignment: &CoverAssignment,
    pair: &NetworkPair,
    theta: f64,
    gains: &ControllerGains,
    poles: &[f64],
) -> Result<SpectralConstants> {
    let (n, m, _) = plant.orders();
    let big = plant.subsystems();
    if assignment.node_count() != big {
        return Err(Error::Dimension {
            block: "cover".into(),
            expected: format!("{big} nodes"),
            got: format!("{} nodes", assignment.node_count()),
        });
    }
    let lambda_min_cover = min_cover_eigenvalue(assignment, pair)?;
    let mut lambda_a: f64 = 0.0;
    let mut lambda_p_unit: f64 = 0.0;
    let mut lambda_bar: f64 = 0.0;
    let mut rho: f64 = 0.0;
    for i in 0..big {
        let a = plant.a_diag(i);
        lambda_a = lambda_a.max(spectral_norm(&sym(a)));
        let hbar = design_observer_gain(a, plant.c(i), theta, poles)?;
        let (abar, cbar) = transformed_pair(a, plant.c(i), theta);
        let p1 = solve_weight(&(abar - hbar * cbar), 1.0)?;
        lambda_p_unit = lambda_p_unit.max(spectral_norm(&p1));
        let largest = assignment
            .membership(i)
            .iter()
            .map(|&p| assignment.set(p).members.len())
            .max()
            .unwrap_or(0);
        lambda_bar = lambda_bar.max((assignment.membership(i).len() * largest) as f64);
        rho = rho.max(2f64.sqrt() * gains.row_norm(i, big, n, m));
    }
    let (a, b, _) = plant.assemble();
    Ok(SpectralConstants {
        lambda_min_cover,
        lambda_a,
        lambda_p_unit,
        lambda_bar,
        rho,
        norm_a: spectral_norm(&a),
        norm_b: spectral_norm(&b),
    })
}

/// Coupling-gain lower bound at `theta`.
pub fn gamma_lower_bound(
    plant: &BlockPlant,
    assignment: &CoverAssignment,
    pair: &NetworkPair,
    theta: f64,
    gains: &ControllerGains,
) -> Result<f64> {
    let (n, _, _) = plant.orders();
    let poles = default_observer_poles(n);
    Ok(spectral_constants(plant, assignment, pair, theta, gains, &poles)?.gamma_bound(theta, n))
}

/// How `γ` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum GammaPolicy {
    /// `max(factor × bound, floor)`.
    Bound { factor: f64, floor: f64 },
    /// `100 θ²`.
    Quadratic,
    Fixed { gamma: f64 },
}

impl Default for GammaPolicy {
    fn default() -> Self {
        GammaPolicy::Bound {
            factor: 1.1,
            floor: 0.0,
        }
    }
}

impl GammaPolicy {
    pub fn resolve(&self, theta: f64, bound: f64) -> f64 {
        match *self {
            GammaPolicy::Bound { factor, floor } => (factor * bound).max(floor),
            GammaPolicy::Quadratic => 100.0 * theta * theta,
            GammaPolicy::Fixed { gamma } => gamma,
        }
    }
}

/// Per-agent observer quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentObserverGains {
    pub hbar: DMatrix<f64>,
    /// `Ā − H̄C̄`.
    pub closed: DMatrix<f64>,
    /// `P_i` at the design `γ`.
    pub weight: DMatrix<f64>,
    /// `θ Γ_θ⁻¹ H_i`, the gain multiplying the output error.
    pub injection: DMatrix<f64>,
    /// `P̃_i⁻¹`, see [`WeightSimilarity`].
    pub ptilde_inv: DMatrix<f64>,
}

/// Which similarity `Γ_ε` shapes the own-slot consensus weight
/// `P̃_i = Γ_ε P_i Γ_ε⁻¹`.
///
/// `Inverse` (`Γ_ε = Γ_θ⁻¹`) is what the stability argument needs: in the
/// scaled coordinates `η = Γ_θ e` the own-slot consensus term becomes
/// `P_i⁻¹ Γ_θ⁻¹ (·)`, a damped version of the cross-slot term. `Direct`
/// (`Γ_ε = Γ_θ`) amplifies the fast components instead and can leave the
/// closed loop unstable for moderate `θ`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSimilarity {
    #[default]
    Inverse,
    Direct,
}

impl WeightSimilarity {
    /// `P̃⁻¹` from `P⁻¹`.
    pub fn apply(self, weight_inv: &DMatrix<f64>, n: usize, theta: f64) -> DMatrix<f64> {
        let g = gamma_theta(n, theta);
        let gi = gamma_theta_inv(n, theta);
        match self {
            WeightSimilarity::Inverse => gi * weight_inv * g,
            WeightSimilarity::Direct => g * weight_inv * gi,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObserverDesign {
    pub theta: f64,
    pub gamma: f64,
    pub n: usize,
    pub poles: Vec<f64>,
    pub gamma_theta: DMatrix<f64>,
    pub agents: Vec<AgentObserverGains>,
    pub constants: SpectralConstants,
    pub gamma_lower_bound: f64,
    pub similarity: WeightSimilarity,
}

impl ObserverDesign {
    /// Recomputes every `P̃_i⁻¹` under `similarity`.
    pub fn set_similarity(&mut self, similarity: WeightSimilarity) -> Result<()> {
        for agent in &mut self.agents {
            let weight_inv = agent
                .weight
                .clone()
                .try_inverse()
                .ok_or_else(|| Error::Numeric("singular observer weight".into()))?;
            agent.ptilde_inv = similarity.apply(&weight_inv, self.n, self.theta);
        }
        self.similarity = similarity;
        Ok(())
    }

    /// `γ θ^{n-1}`, the consensus gain.
    pub fn consensus_gain(&self) -> f64 {
        self.gamma * self.theta.powi(self.n as i32 - 1)
    }

    pub fn c_theta(&self) -> f64 {
        self.constants.c_theta(self.theta, self.gamma, self.n)
    }
}

/// Synthesises every observer quantity at `theta`. Fails with
/// [`Error::GammaTooSmall`] when the resolved `γ` does not clear the bound,
/// unless `force` is set.
#[allow(clippy::too_many_arguments)]
pub fn synthesize(
    plant: &BlockPlant,
    assignment: &CoverAssignment,
    pair: &NetworkPair,
    theta: f64,
    gains: &ControllerGains,
    policy: GammaPolicy,
    poles: Option<&[f64]>,
    force: bool,
) -> Result<ObserverDesign> {
    let (n, _, _) = plant.orders();
    let poles = poles.map(<[f64]>::to_vec).unwrap_or_else(|| default_observer_poles(n));
    let constants = spectral_constants(plant, assignment, pair, theta, gains, &poles)?;
    let bound = constants.gamma_bound(theta, n);
    let gamma = policy.resolve(theta, bound);
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("resolved gamma {gamma} is not positive")));
    }
    if gamma <= bound && !force {
        return Err(Error::GammaTooSmall { gamma, bound });
    }
    let g = gamma_theta(n, theta);
    let gi = gamma_theta_inv(n, theta);
    let similarity = WeightSimilarity::default();
    let mut agents = Vec::with_capacity(plant.subsystems());
    for i in 0..plant.subsystems() {
        let a = plant.a_diag(i);
        let hbar = design_observer_gain(a, plant.c(i), theta, &poles)?;
        let (abar, cbar) = transformed_pair(a, plant.c(i), theta);
        let closed = abar - &hbar * cbar;
        let weight = solve_weight(&closed, gamma)?;
        let h = &hbar * theta.powi(n as i32 - 2);
        let injection = &gi * h * theta;
        let weight_inv = weight
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numeric("singular observer weight".into()))?;
        let ptilde_inv = similarity.apply(&weight_inv, n, theta);
        agents.push(AgentObserverGains {
            hbar,
            closed,
            weight,
            injection,
            ptilde_inv,
        });
    }
    Ok(ObserverDesign {
        theta,
        gamma,
        n,
        poles,
        gamma_theta: g,
        agents,
        constants,
        gamma_lower_bound: bound,
        similarity,
    })
}

/// Serialized synthesis result. Loading re-runs [`synthesize`] with the
/// recorded parameters; the matrices are kept for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignFile {
    pub theta: f64,
    pub gamma: f64,
    pub gamma_lower_bound: f64,
    pub gamma_policy: GammaPolicy,
    pub observer_poles: Vec<f64>,
    pub controller_poles: Vec<f64>,
    pub cross_gain: CrossGain,
    /// `ℳ` fixed at synthesis; `None` leaves it to the run (`10·max(1, ‖x0‖_∞)`).
    pub sat_level: Option<f64>,
    /// Similarity used for the own-slot consensus weight.
    pub similarity: WeightSimilarity,
    pub constants: SpectralConstants,
    pub agents: Vec<AgentEntry>,
    pub controller: Vec<GainEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentEntry {
    pub node: usize,
    pub hbar: MatrixData,
    pub weight: MatrixData,
    pub injection: MatrixData,
    pub weight_residual: f64,
    pub observer_abscissa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainEntry {
    pub i: usize,
    pub j: usize,
    pub k: MatrixData,
}

impl DesignFile {
    pub fn new(
        design: &ObserverDesign,
        gains: &ControllerGains,
        policy: GammaPolicy,
        controller_poles: &[f64],
        cross_gain: CrossGain,
    ) -> Self {
        Self {
            theta: design.theta,
            gamma: design.gamma,
            gamma_lower_bound: design.gamma_lower_bound,
            gamma_policy: policy,
            observer_poles: design.poles.clone(),
            controller_poles: controller_poles.to_vec(),
            cross_gain,
            sat_level: gains.sat_level.is_finite().then_some(gains.sat_level),
            similarity: design.similarity,
            constants: design.constants,
            agents: design
                .agents
                .iter()
                .enumerate()
                .map(|(i, a)| AgentEntry {
                    node: i + 1,
                    hbar: MatrixData::from_matrix(&a.hbar),
                    weight: MatrixData::from_matrix(&a.weight),
                    injection: MatrixData::from_matrix(&a.injection),
                    weight_residual: weight_residual(&a.weight, &a.closed, design.gamma),
                    observer_abscissa: spectral_abscissa(&a.closed),
                })
                .collect(),
            controller: gains
                .k_blocks
                .iter()
                .map(|(&(i, j), k)| GainEntry {
                    i: i + 1,
                    j: j + 1,
                    k: MatrixData::from_matrix(k),
                })
                .collect(),
        }
    }

    /// Rebuilds controller and observer from the recorded parameters.
    pub fn rebuild(
        &self,
        plant: &BlockPlant,
        assignment: &CoverAssignment,
        pair: &NetworkPair,
    ) -> Result<(ObserverDesign, ControllerGains)> {
        let gains =
            design_controller_microgrid(
            plant,
            &self.controller_poles,
            self.cross_gain,
            self.sat_level.unwrap_or(f64::INFINITY),
        )?;
        let mut design = synthesize(
            plant,
            assignment,
            pair,
            self.theta,
            &gains,
            GammaPolicy::Fixed { gamma: self.gamma },
            Some(&self.observer_poles),
            true,
        )?;
        design.set_similarity(self.similarity)?;
        Ok((design, gains))
    }
}
