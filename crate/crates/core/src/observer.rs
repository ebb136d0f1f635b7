//! Cover-based distributed observer bank.
//!
//! Agent `l` keeps one estimate `x̂_li^(p)` for every set `O_p` it belongs to
//! and every target `i ∈ O_p`. Estimates are stored in one flat vector in
//! agent-major, set-major, target-major order, `n` scalars per slot.
//!
//! Errors are reported as `x̂ − x` for every slot. The self-estimate error is
//! defined with the opposite sign in the error dynamics; norms are unaffected.

use std::collections::HashMap;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::coverage::CoverAssignment;
use crate::error::{Error, Result};
use crate::gains::{ControllerGains, ObserverDesign};
use crate::netgraph::NetworkPair;
use crate::plant::BlockPlant;

/// One estimate `x̂_{agent,target}^(set)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Slot {
    pub agent: usize,
    pub set: usize,
    pub target: usize,
}

#[derive(Debug, Clone)]
struct Fused {
    agent: usize,
    target: usize,
    slots: Vec<usize>,
}

/// Slot bookkeeping derived from a cover assignment.
#[derive(Debug, Clone)]
pub struct BankLayout {
    n: usize,
    subsystems: usize,
    slots: Vec<Slot>,
    index: HashMap<(usize, usize, usize), usize>,
    agent_slots: Vec<Range<usize>>,
    fused: Vec<Fused>,
    fused_index: HashMap<(usize, usize), usize>,
    /// `(target, set, slots of every member's estimate of target)`.
    by_target: Vec<(usize, usize, Vec<usize>)>,
}

impl BankLayout {
    pub fn new(assignment: &CoverAssignment, n: usize) -> Self {
        let subsystems = assignment.node_count();
        let mut slots = Vec::new();
        let mut index = HashMap::new();
        let mut agent_slots = Vec::with_capacity(subsystems);
        let mut fused = Vec::new();
        let mut fused_index = HashMap::new();
        for l in 0..subsystems {
            let start = slots.len();
            let mut sets = assignment.membership(l).to_vec();
            sets.sort_unstable();
            for p in sets {
                for &i in &assignment.set(p).members {
                    let s = slots.len();
                    slots.push(Slot { agent: l, set: p, target: i });
                    index.insert((l, p, i), s);
                    let f = *fused_index.entry((l, i)).or_insert_with(|| {
                        fused.push(Fused { agent: l, target: i, slots: Vec::new() });
                        fused.len() - 1
                    });
                    fused[f].slots.push(s);
                }
            }
            agent_slots.push(start..slots.len());
        }
        let mut by_target = Vec::new();
        for i in 0..subsystems {
            let mut sets = assignment.membership(i).to_vec();
            sets.sort_unstable();
            for p in sets {
                let group = assignment.set(p).members.iter().map(|&j| index[&(j, p, i)]).collect();
                by_target.push((i, p, group));
            }
        }
        Self { n, subsystems, slots, index, agent_slots, fused, fused_index, by_target }
    }

    pub fn block_order(&self) -> usize {
        self.n
    }

    pub fn subsystems(&self) -> usize {
        self.subsystems
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    /// Total scalar dimension of all banks.
    pub fn dimension(&self) -> usize {
        self.slots.len() * self.n
    }

    /// Number of estimates held by agent `l`, i.e. `D(P_l)`.
    pub fn state_count(&self, l: usize) -> usize {
        self.agent_slots[l].len()
    }

    pub fn slot_index(&self, agent: usize, set: usize, target: usize) -> Option<usize> {
        self.index.get(&(agent, set, target)).copied()
    }

    /// Scalar range of a slot in the flat state vector.
    pub fn range(&self, slot: usize) -> Range<usize> {
        slot * self.n..(slot + 1) * self.n
    }

    /// `N_{j,P_l}`: how many of agent `l`'s sets contain `j` (0 if none).
    pub fn occurrences(&self, l: usize, j: usize) -> usize {
        self.fused_index.get(&(l, j)).map_or(0, |&f| self.fused[f].slots.len())
    }

    /// Broadcast initial bank with every scalar equal to `value`.
    pub fn constant_state(&self, value: f64) -> Vec<f64> {
        vec![value; self.dimension()]
    }
}

fn not_estimated(node: usize, target: usize) -> Error {
    Error::NotEstimated { node: node + 1, target: target + 1 }
}

/// `x̄_lj`: mean of agent `l`'s estimates of `j` over the sets holding one.
pub fn fuse(layout: &BankLayout, states: &[f64], l: usize, j: usize) -> Result<DVector<f64>> {
    let f = *layout
        .fused_index
        .get(&(l, j))
        .ok_or_else(|| not_estimated(l, j))?;
    let mut out = DVector::zeros(layout.n);
    fuse_into(layout, states, f, out.as_mut_slice());
    Ok(out)
}

fn fuse_into(layout: &BankLayout, states: &[f64], f: usize, out: &mut [f64]) {
    let entry = &layout.fused[f];
    out.fill(0.0);
    for &s in &entry.slots {
        for (o, v) in out.iter_mut().zip(&states[layout.range(s)]) {
            *o += v;
        }
    }
    let scale = 1.0 / entry.slots.len() as f64;
    out.iter_mut().for_each(|o| *o *= scale);
}

/// Componentwise `M·sat(v/M)`.
pub fn saturate(v: &DVector<f64>, m: f64) -> DVector<f64> {
    v.map(|x| x.clamp(-m, m))
}

/// `û_ii = Σ_{j ∈ N_i ∪ {i}} K_ij x̄_ij`.
pub fn control_self(
    gains: &ControllerGains,
    layout: &BankLayout,
    states: &[f64],
    i: usize,
) -> Result<DVector<f64>> {
    control_sum(gains, layout, states, i, i, false, f64::INFINITY)
}

/// `û_li = Σ_{j ∈ O(P_l) ∩ N_i} K_ij x̄_lj`; the `K_ii` term is left out.
pub fn control_cross(
    gains: &ControllerGains,
    layout: &BankLayout,
    states: &[f64],
    l: usize,
    i: usize,
) -> Result<DVector<f64>> {
    if layout.occurrences(l, i) == 0 {
        return Err(not_estimated(l, i));
    }
    control_sum(gains, layout, states, l, i, true, f64::INFINITY)
}

/// `ū_i`: as [`control_self`] with every fused estimate saturated at `ℳ`.
pub fn control_applied(
    gains: &ControllerGains,
    layout: &BankLayout,
    states: &[f64],
    i: usize,
) -> Result<DVector<f64>> {
    control_sum(gains, layout, states, i, i, false, gains.sat_level)
}

fn control_sum(
    gains: &ControllerGains,
    layout: &BankLayout,
    states: &[f64],
    l: usize,
    i: usize,
    truncate: bool,
    sat: f64,
) -> Result<DVector<f64>> {
    let mut out: Option<DVector<f64>> = None;
    for (&(_, j), k) in gains.k_blocks.range((i, 0)..(i + 1, 0)) {
        if truncate && (j == i || layout.occurrences(l, j) == 0) {
            continue;
        }
        let xbar = saturate(&fuse(layout, states, l, j)?, sat);
        let term = k * xbar;
        out = Some(match out {
            Some(acc) => acc + term,
            None => term,
        });
    }
    let m = gains.k_blocks.values().next().map_or(0, |k| k.nrows());
    Ok(out.unwrap_or_else(|| DVector::zeros(m)))
}

/// Both stackings of the estimation error.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorGroupings {
    /// `e_{⋆i}^(p)`, keyed by `(target i, set p)`.
    pub by_target: Vec<((usize, usize), DVector<f64>)>,
    /// `e_{i⋆}` per agent.
    pub by_agent: Vec<DVector<f64>>,
    /// `‖e‖`.
    pub total: f64,
}

/// Sum-of-squares identity across the two stackings, plus the square-root-two
/// norm-sum claim evaluated as a diagnostic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StackingCheck {
    pub sum_sq_by_target: f64,
    pub sum_sq_by_agent: f64,
    pub total_sq: f64,
    /// Largest relative gap among the three sums of squares.
    pub identity_gap: f64,
    /// `Σ_i Σ_p ‖e_{⋆i}^(p)‖`.
    pub norm_sum_by_target: f64,
    /// `√2 ‖e‖`.
    pub sqrt2_bound: f64,
    pub sqrt2_holds: bool,
    /// `√(number of groups) ‖e‖`, the bound Cauchy–Schwarz does give.
    pub cauchy_schwarz_bound: f64,
}

impl ErrorGroupings {
    pub fn check(&self) -> StackingCheck {
        let sum_sq_by_target: f64 = self.by_target.iter().map(|(_, e)| e.norm_squared()).sum();
        let sum_sq_by_agent: f64 = self.by_agent.iter().map(DVector::norm_squared).sum();
        let total_sq = self.total * self.total;
        let scale = sum_sq_by_target.max(sum_sq_by_agent).max(total_sq);
        let identity_gap = if scale == 0.0 {
            0.0
        } else {
            [
                (sum_sq_by_target - sum_sq_by_agent).abs(),
                (sum_sq_by_target - total_sq).abs(),
                (sum_sq_by_agent - total_sq).abs(),
            ]
            .into_iter()
            .fold(0.0, f64::max)
                / scale
        };
        let norm_sum_by_target: f64 = self.by_target.iter().map(|(_, e)| e.norm()).sum();
        let sqrt2_bound = std::f64::consts::SQRT_2 * self.total;
        StackingCheck {
            sum_sq_by_target,
            sum_sq_by_agent,
            total_sq,
            identity_gap,
            norm_sum_by_target,
            sqrt2_bound,
            sqrt2_holds: norm_sum_by_target <= sqrt2_bound * (1.0 + 1e-12),
            cauchy_schwarz_bound: (self.by_target.len() as f64).sqrt() * self.total,
        }
    }
}

/// Builds `e_{⋆i}^(p)`, `e_{i⋆}` and `‖e‖` from the bank and the true state.
pub fn error_groupings(layout: &BankLayout, states: &[f64], x: &[f64]) -> ErrorGroupings {
    let n = layout.n;
    let slot_error = |s: usize| -> Vec<f64> {
        let target = layout.slots[s].target;
        states[layout.range(s)]
            .iter()
            .zip(&x[target * n..(target + 1) * n])
            .map(|(h, t)| h - t)
            .collect()
    };
    let by_target = layout
        .by_target
        .iter()
        .map(|(i, p, group)| {
            let data: Vec<f64> = group.iter().flat_map(|&s| slot_error(s)).collect();
            ((*i, *p), DVector::from_vec(data))
        })
        .collect();
    let by_agent: Vec<DVector<f64>> = layout
        .agent_slots
        .iter()
        .map(|r| DVector::from_vec(r.clone().flat_map(&slot_error).collect()))
        .collect();
    let total = (0..layout.slots.len())
        .flat_map(&slot_error)
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    ErrorGroupings { by_target, by_agent, total }
}

/// `y += M v` for a dense block and slices.
fn gemv_acc(m: &DMatrix<f64>, v: &[f64], y: &mut [f64], scale: f64) {
    for c in 0..m.ncols() {
        let vc = v[c] * scale;
        if vc == 0.0 {
            continue;
        }
        for (r, yr) in y.iter_mut().enumerate() {
            *yr += m[(r, c)] * vc;
        }
    }
}

#[derive(Debug, Clone)]
struct SlotPlan {
    target: usize,
    own: bool,
    /// `(A_ij block id, fused id)`.
    coupling: Vec<(usize, usize)>,
    /// Index into the control plans.
    control: usize,
    /// Slots of communication neighbours in the same set estimating the same target.
    consensus: Vec<usize>,
}

#[derive(Debug, Clone)]
struct ControlPlan {
    /// `(K_ij block id, fused id)`.
    terms: Vec<(usize, usize)>,
}

/// Saturation bookkeeping of one derivative evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepFlags {
    /// Some fused estimate entering `ū` was clipped.
    pub clipped: bool,
    /// Largest magnitude among the fused estimates entering `ū`.
    pub peak: f64,
}

/// Scratch buffers reused across derivative evaluations.
#[derive(Debug, Clone, Default)]
pub struct Workspace {
    fused: Vec<f64>,
    controls: Vec<f64>,
    applied: Vec<f64>,
    sat_buf: Vec<f64>,
    outputs: Vec<f64>,
    scratch: Vec<f64>,
}

/// Precompiled observer bank and closed loop for fast repeated evaluation.
#[derive(Debug, Clone)]
pub struct ObserverSystem {
    layout: BankLayout,
    n: usize,
    m: usize,
    p: usize,
    blocks: Vec<DMatrix<f64>>,
    /// Plant rows: per subsystem `(A_ij block id, j)`.
    plant_rows: Vec<Vec<(usize, usize)>>,
    a_diag: Vec<usize>,
    b: Vec<usize>,
    c: Vec<usize>,
    injection: Vec<usize>,
    ptilde_inv: Vec<usize>,
    plans: Vec<SlotPlan>,
    controls: Vec<ControlPlan>,
    /// Per subsystem the `(K_ij block id, fused id of (i, j))` terms of `ū_i`.
    applied: Vec<Vec<(usize, usize)>>,
    consensus_gain: f64,
    sat_level: f64,
}

impl ObserverSystem {
    pub fn new(
        plant: &BlockPlant,
        assignment: &CoverAssignment,
        pair: &NetworkPair,
        design: &ObserverDesign,
        gains: &ControllerGains,
    ) -> Result<Self> {
        let (n, m, p) = plant.orders();
        let big_n = plant.subsystems();
        if assignment.node_count() != big_n || pair.len() != big_n || design.agents.len() != big_n {
            return Err(Error::Dimension {
                block: "observer system".into(),
                expected: format!("{big_n} subsystems"),
                got: format!(
                    "cover {} / network {} / design {}",
                    assignment.node_count(),
                    pair.len(),
                    design.agents.len()
                ),
            });
        }
        let layout = BankLayout::new(assignment, n);
        let mut blocks = Vec::new();
        let mut push = |mat: &DMatrix<f64>| {
            blocks.push(mat.clone());
            blocks.len() - 1
        };
        let mut a_ids = HashMap::new();
        for (&key, blk) in plant.a_blocks() {
            a_ids.insert(key, push(blk));
        }
        let mut k_ids = HashMap::new();
        for (&key, blk) in &gains.k_blocks {
            k_ids.insert(key, push(blk));
        }
        let b: Vec<usize> = (0..big_n).map(|i| push(plant.b(i))).collect();
        let c: Vec<usize> = (0..big_n).map(|i| push(plant.c(i))).collect();
        let injection: Vec<usize> = design.agents.iter().map(|a| push(&a.injection)).collect();
        let ptilde_inv: Vec<usize> = design.agents.iter().map(|a| push(&a.ptilde_inv)).collect();

        let a_diag: Vec<usize> = (0..big_n).map(|i| a_ids[&(i, i)]).collect();
        let plant_rows = (0..big_n)
            .map(|i| {
                let mut row: Vec<(usize, usize)> = a_ids
                    .iter()
                    .filter(|(&(r, _), _)| r == i)
                    .map(|(&(_, j), &id)| (id, j))
                    .collect();
                row.sort_unstable_by_key(|&(_, j)| j);
                row
            })
            .collect();

        let fused_id = |l: usize, j: usize| -> Result<usize> {
            layout
                .fused_index
                .get(&(l, j))
                .copied()
                .ok_or_else(|| not_estimated(l, j))
        };

        let mut controls = Vec::new();
        let mut control_index = HashMap::new();
        for f in &layout.fused {
            let (l, i) = (f.agent, f.target);
            let mut terms = Vec::new();
            for (&(_, j), _) in gains.k_blocks.range((i, 0)..(i + 1, 0)) {
                // Other agents drop the K_ii term and any target they do not estimate.
                if l == i || (j != i && layout.occurrences(l, j) > 0) {
                    terms.push((k_ids[&(i, j)], fused_id(l, j)?));
                }
            }
            control_index.insert((l, i), controls.len());
            controls.push(ControlPlan { terms });
        }

        let mut plans = Vec::with_capacity(layout.slots.len());
        for slot in &layout.slots {
            let (l, set, i) = (slot.agent, slot.set, slot.target);
            let own = l == i;
            let mut coupling = Vec::new();
            for &j in pair.physical_neighbors(i) {
                let Some(&id) = a_ids.get(&(i, j)) else { continue };
                if own || layout.occurrences(l, j) > 0 {
                    coupling.push((id, fused_id(l, j)?));
                }
            }
            let mut consensus = Vec::new();
            for &j in &assignment.set(set).members {
                if j != l && pair.has_comm(l, j) {
                    let s = layout
                        .slot_index(j, set, i)
                        .ok_or_else(|| not_estimated(j, i))?;
                    consensus.push(s);
                }
            }
            plans.push(SlotPlan { target: i, own, coupling, control: control_index[&(l, i)], consensus });
        }

        let applied = (0..big_n)
            .map(|i| {
                gains
                    .k_blocks
                    .range((i, 0)..(i + 1, 0))
                    .map(|(&(_, j), _)| Ok((k_ids[&(i, j)], fused_id(i, j)?)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(Self {
            layout,
            n,
            m,
            p,
            blocks,
            plant_rows,
            a_diag,
            b,
            c,
            injection,
            ptilde_inv,
            plans,
            controls,
            applied,
            consensus_gain: design.consensus_gain(),
            sat_level: gains.sat_level,
        })
    }

    pub fn layout(&self) -> &BankLayout {
        &self.layout
    }

    pub fn sat_level(&self) -> f64 {
        self.sat_level
    }

    /// Overrides `ℳ`; `f64::INFINITY` disables saturation.
    pub fn set_sat_level(&mut self, level: f64) {
        self.sat_level = level;
    }

    pub fn orders(&self) -> (usize, usize, usize) {
        (self.n, self.m, self.p)
    }

    pub fn plant_dimension(&self) -> usize {
        self.n * self.layout.subsystems
    }

    pub fn workspace(&self) -> Workspace {
        Workspace {
            fused: vec![0.0; self.layout.fused.len() * self.n],
            controls: vec![0.0; self.controls.len() * self.m],
            applied: vec![0.0; self.layout.subsystems * self.m],
            sat_buf: vec![0.0; self.n],
            outputs: vec![0.0; self.p * self.layout.subsystems],
            scratch: vec![0.0; self.n + self.p],
        }
    }

    /// Largest stiffness scale `γθ^{n-1}·(max consensus degree) + max ‖θΓ⁻¹H_i‖`.
    pub fn stiffness(&self) -> f64 {
        let degree = self.plans.iter().map(|p| p.consensus.len()).max().unwrap_or(0) as f64;
        let inj = self
            .injection
            .iter()
            .map(|&id| crate::linalg::spectral_norm(&self.blocks[id]))
            .fold(0.0, f64::max);
        self.consensus_gain * degree + inj
    }

    /// Output `y = C x` stacked per subsystem.
    pub fn outputs(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.p * self.layout.subsystems];
        self.outputs_into(x, &mut y);
        y
    }

    fn outputs_into(&self, x: &[f64], y: &mut [f64]) {
        y.fill(0.0);
        let (n, p) = (self.n, self.p);
        for i in 0..self.layout.subsystems {
            gemv_acc(&self.blocks[self.c[i]], &x[i * n..(i + 1) * n], &mut y[i * p..(i + 1) * p], 1.0);
        }
    }

    fn fill_fused(&self, xhat: &[f64], ws: &mut Workspace) {
        let n = self.n;
        for f in 0..self.layout.fused.len() {
            fuse_into(&self.layout, xhat, f, &mut ws.fused[f * n..(f + 1) * n]);
        }
        let m = self.m;
        ws.controls.fill(0.0);
        for (ci, plan) in self.controls.iter().enumerate() {
            let out = &mut ws.controls[ci * m..(ci + 1) * m];
            for &(k, f) in &plan.terms {
                gemv_acc(&self.blocks[k], &ws.fused[f * n..(f + 1) * n], out, 1.0);
            }
        }
    }

    /// Derivatives of every estimate given stacked outputs `y`.
    pub fn observer_rhs(&self, xhat: &[f64], y: &[f64]) -> Vec<f64> {
        let mut ws = self.workspace();
        let mut out = vec![0.0; xhat.len()];
        self.fill_fused(xhat, &mut ws);
        let mut scratch = std::mem::take(&mut ws.scratch);
        self.observer_into(xhat, y, &ws, &mut scratch, &mut out);
        out
    }

    fn observer_into(&self, xhat: &[f64], y: &[f64], ws: &Workspace, scratch: &mut [f64], out: &mut [f64]) {
        let (n, m, p) = (self.n, self.m, self.p);
        let (consensus, innovation) = scratch.split_at_mut(n);
        for (s, plan) in self.plans.iter().enumerate() {
            let i = plan.target;
            let own_state = &xhat[s * n..(s + 1) * n];
            let d = &mut out[s * n..(s + 1) * n];
            d.fill(0.0);
            gemv_acc(&self.blocks[self.a_diag[i]], own_state, d, 1.0);
            for &(a, f) in &plan.coupling {
                gemv_acc(&self.blocks[a], &ws.fused[f * n..(f + 1) * n], d, 1.0);
            }
            gemv_acc(&self.blocks[self.b[i]], &ws.controls[plan.control * m..(plan.control + 1) * m], d, 1.0);
            if plan.own {
                innovation.copy_from_slice(&y[i * p..(i + 1) * p]);
                gemv_acc(&self.blocks[self.c[i]], own_state, innovation, -1.0);
                gemv_acc(&self.blocks[self.injection[i]], innovation, d, 1.0);
            }
            if !plan.consensus.is_empty() {
                consensus.fill(0.0);
                for &q in &plan.consensus {
                    for k in 0..n {
                        consensus[k] += xhat[q * n + k] - own_state[k];
                    }
                }
                if plan.own {
                    gemv_acc(&self.blocks[self.ptilde_inv[i]], consensus, d, self.consensus_gain);
                } else {
                    for k in 0..n {
                        d[k] += self.consensus_gain * consensus[k];
                    }
                }
            }
        }
    }

    /// Applied controls `ū` (stacked) from the current bank.
    fn fill_applied(&self, ws: &mut Workspace) -> StepFlags {
        let (n, m) = (self.n, self.m);
        let mut flags = StepFlags::default();
        ws.applied.fill(0.0);
        for (i, terms) in self.applied.iter().enumerate() {
            for &(k, f) in terms {
                for (dst, v) in ws.sat_buf.iter_mut().zip(&ws.fused[f * n..(f + 1) * n]) {
                    let c = v.clamp(-self.sat_level, self.sat_level);
                    flags.clipped |= c != *v;
                    flags.peak = flags.peak.max(v.abs());
                    *dst = c;
                }
                let (lo, hi) = (i * m, (i + 1) * m);
                gemv_acc(&self.blocks[k], &ws.sat_buf, &mut ws.applied[lo..hi], 1.0);
            }
        }
        flags
    }

    /// Full closed loop `ẋ = A x + B ū` with the observer bank.
    pub fn closed_loop_rhs(
        &self,
        x: &[f64],
        xhat: &[f64],
        dx: &mut [f64],
        dxhat: &mut [f64],
        ws: &mut Workspace,
    ) -> StepFlags {
        let (n, m) = (self.n, self.m);
        let mut y = std::mem::take(&mut ws.outputs);
        let mut scratch = std::mem::take(&mut ws.scratch);
        self.outputs_into(x, &mut y);
        self.fill_fused(xhat, ws);
        let flags = self.fill_applied(ws);
        for i in 0..self.layout.subsystems {
            let d = &mut dx[i * n..(i + 1) * n];
            d.fill(0.0);
            for &(a, j) in &self.plant_rows[i] {
                gemv_acc(&self.blocks[a], &x[j * n..(j + 1) * n], d, 1.0);
            }
            gemv_acc(&self.blocks[self.b[i]], &ws.applied[i * m..(i + 1) * m], d, 1.0);
        }
        self.observer_into(xhat, &y, ws, &mut scratch, dxhat);
        ws.outputs = y;
        ws.scratch = scratch;
        flags
    }

    /// `ū` for the given bank (stacked, `m` per subsystem).
    pub fn applied_controls(&self, xhat: &[f64]) -> Vec<f64> {
        let mut ws = self.workspace();
        self.fill_fused(xhat, &mut ws);
        self.fill_applied(&mut ws);
        ws.applied
    }
}
