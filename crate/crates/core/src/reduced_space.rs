//! Reduced-space OPF/SCOPF over the controls, with adjoint gradients,
//! constraint lumping and an L-BFGS Hessian.

use std::collections::{HashSet, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector, Dyn, LU};
use rayon::prelude::*;
use rayon::ThreadPool;
use thiserror::Error;

use crate::grid_model::{apply_contingency, build_admittance, AdmittanceMatrix, Contingency, GridCase};
use crate::ipm_core::{solve_from, Backend, HessianMode, IpmOptions, IpmResult};
use crate::kkt_linalg::build_pool;
use crate::opf_problems::{EvalError, NlpProblem, ProblemError, Triplets};
use crate::powerflow::{
    control_jacobian, jacobian_blocks, line_flow_h, line_flow_h_grad, newton_pf_part, setpoint_controls, PfError,
    PfPartition, PfSolution, PfState,
};

/// Limited-memory BFGS approximation of a Hessian, kept in unrolled form:
/// `B v = γv − Σ (bᵢᵀv / sᵢᵀbᵢ) bᵢ + Σ (yᵢᵀv / yᵢᵀsᵢ) yᵢ` with `bᵢ = Bᵢ sᵢ`.
#[derive(Debug, Clone)]
pub struct LbfgsHistory {
    m: usize,
    damping: bool,
    s: VecDeque<DVector<f64>>,
    y: VecDeque<DVector<f64>>,
    b: Vec<DVector<f64>>,
    gamma: f64,
}

impl LbfgsHistory {
    pub fn new(m: usize, damping: bool) -> Self {
        LbfgsHistory {
            m: m.max(1),
            damping,
            s: VecDeque::new(),
            y: VecDeque::new(),
            b: Vec::new(),
            gamma: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn clear(&mut self) {
        self.s.clear();
        self.y.clear();
        self.b.clear();
        self.gamma = 1.0;
    }

    fn rebuild(&mut self) {
        self.b.clear();
        for i in 0..self.s.len() {
            let bi = self.apply_first(i, &self.s[i]);
            self.b.push(bi);
        }
    }

    /// `B v` using only the first `k` pairs.
    fn apply_first(&self, k: usize, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v * self.gamma;
        for i in 0..k {
            let (s, y, b) = (&self.s[i], &self.y[i], &self.b[i]);
            out -= b * (b.dot(v) / s.dot(b));
            out += y * (y.dot(v) / y.dot(s));
        }
        out
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.apply_first(self.s.len(), v)
    }

    /// Adds a correction pair; returns false when the curvature guard
    /// rejects it, leaving the history unchanged.
    pub fn update(&mut self, s: &DVector<f64>, y: &DVector<f64>) -> bool {
        let mut y = y.clone();
        if self.damping {
            let bs = self.apply(s);
            let sbs = s.dot(&bs);
            let sy = s.dot(&y);
            if sbs > 0.0 && sy < 0.2 * sbs {
                let t = 0.8 * sbs / (sbs - sy);
                y = &y * t + bs * (1.0 - t);
            }
        }
        let sy = s.dot(&y);
        if !(sy > 1e-12 * s.norm() * y.norm()) || !sy.is_finite() {
            return false;
        }
        if self.s.len() == self.m {
            self.s.pop_front();
            self.y.pop_front();
        }
        self.gamma = y.dot(&y) / sy;
        self.s.push_back(s.clone());
        self.y.push_back(y);
        self.rebuild();
        true
    }

    pub fn dense(&self, n: usize) -> DMatrix<f64> {
        let mut m = DMatrix::identity(n, n) * self.gamma;
        for i in 0..self.s.len() {
            let (s, y, b) = (&self.s[i], &self.y[i], &self.b[i]);
            m -= b * b.transpose() / s.dot(b);
            m += y * y.transpose() / y.dot(s);
        }
        (&m + m.transpose()) * 0.5
    }
}

pub fn lbfgs_apply(history: &LbfgsHistory, v: &DVector<f64>) -> DVector<f64> {
    history.apply(v)
}

pub fn lbfgs_update(history: &mut LbfgsHistory, s: &DVector<f64>, y: &DVector<f64>) -> bool {
    history.update(s, y)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReducedError {
    #[error(transparent)]
    Pf(#[from] PfError),
    #[error("power flow diverged in scenario {0}")]
    PfDivergence(usize),
    #[error("lumped constraint has no members")]
    EmptyLumpSet,
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Shift-stable smooth maximum `α ln Σ exp(h_l / α)`.
pub fn lumped_value(h: &[f64], alpha: f64) -> Result<f64, ReducedError> {
    if h.is_empty() {
        return Err(ReducedError::EmptyLumpSet);
    }
    let m = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let q: f64 = h.iter().map(|v| ((v - m) / alpha).exp()).sum();
    Ok(m + alpha * q.ln())
}

/// Softmax weights `exp(h_l/α) / Q`, the derivative of the lumped value.
pub fn lumped_weights(h: &[f64], alpha: f64) -> Vec<f64> {
    let m = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = h.iter().map(|v| ((v - m) / alpha).exp()).collect();
    let q: f64 = e.iter().sum();
    e.into_iter().map(|v| v / q).collect()
}

/// Smoothing scale for rate-scaled flows: `smoothing`, or `smoothing · max`
/// once the largest scaled value exceeds `threshold`.
pub fn select_alpha(h_scaled: &[f64], smoothing: f64, threshold: f64) -> f64 {
    let m = h_scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m > threshold {
        smoothing * m
    } else {
        smoothing
    }
}

/// A group of rated branch ends lumped into one smooth-max constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct LumpedConstraint {
    pub scenario: usize,
    pub rate_mva: f64,
    /// Indices into the scenario's rated-end list.
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReducedConfig {
    pub lump: bool,
    pub smoothing: f64,
    pub threshold: f64,
    pub pf_tol: f64,
    pub pf_max_iter: usize,
    pub workers: usize,
}

impl Default for ReducedConfig {
    fn default() -> Self {
        ReducedConfig {
            lump: false,
            smoothing: 0.1,
            threshold: 5.0,
            pf_tol: 1e-10,
            pf_max_iter: 30,
            workers: 1,
        }
    }
}

/// Adjoint work counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AdjointCounts {
    pub pf_solves: usize,
    pub factorizations: usize,
    pub backsolves: usize,
}

#[derive(Default)]
struct Counters {
    pf_solves: AtomicUsize,
    factorizations: AtomicUsize,
    backsolves: AtomicUsize,
}

/// Factorized `g11ᵀ` and the derivative blocks needed by adjoint solves.
pub struct AdjointWorkspace {
    g11t: LU<f64, Dyn, Dyn>,
    g21: DMatrix<f64>,
    g1u: DMatrix<f64>,
    g2u: DMatrix<f64>,
}

impl AdjointWorkspace {
    /// Solves `g11ᵀ Λ1 = −(F_x1 + g21ᵀ F_x2)` column-wise and returns the
    /// state contribution `Λ1ᵀ g1u + F_x2ᵀ g2u`, one row per column.
    fn total_derivatives(&self, fx1: &DMatrix<f64>, fx2: &DMatrix<f64>) -> Result<DMatrix<f64>, PfError> {
        let rhs = -(fx1 + self.g21.transpose() * fx2);
        let lam1 = self.g11t.solve(&rhs).ok_or(PfError::SingularJacobian)?;
        Ok(lam1.transpose() * &self.g1u + fx2.transpose() * &self.g2u)
    }
}

struct ScenarioData {
    grid: GridCase,
    y: AdmittanceMatrix,
    part: PfPartition,
    ends: Vec<(usize, crate::powerflow::Side)>,
    rate_sq: Vec<f64>,
}

struct StateCache {
    u: Vec<f64>,
    sols: Vec<PfSolution>,
    work: Vec<Option<std::sync::Arc<AdjointWorkspace>>>,
}

/// Bounded state entry: index into `(x1, x2)`, and its bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
struct StateBound {
    index: usize,
    lo: f64,
    hi: f64,
}

/// The OPF/SCOPF over the controls `u = (v at REF and PV buses, p of PV-bus
/// generators)`, with states obtained from a power flow per scenario.
/// Inequalities per scenario: line limits (explicit per rated end, or lumped
/// per rating class) followed by state bounds (upper, then lower).
pub struct ReducedProblem {
    base: GridCase,
    scen: Vec<ScenarioData>,
    config: ReducedConfig,
    lo: Vec<f64>,
    hi: Vec<f64>,
    u0: Vec<f64>,
    bounds: Vec<StateBound>,
    lumps: Vec<LumpedConstraint>,
    alphas: Mutex<Vec<Option<f64>>>,
    cache: Mutex<Option<StateCache>>,
    counters: Counters,
    pool: ThreadPool,
    n_h_scen: usize,
}

impl ReducedProblem {
    pub fn new(grid: &GridCase, contingencies: &[Contingency], config: ReducedConfig) -> Result<Self, ReducedError> {
        grid.validate().map_err(ProblemError::from)?;
        if !(config.smoothing > 0.0) || config.workers == 0 {
            return Err(ReducedError::InvalidConfig("smoothing and workers must be positive".into()));
        }
        let mut seen = HashSet::new();
        for c in contingencies {
            if !seen.insert(c.outaged_branch) {
                return Err(ProblemError::DuplicateContingency(c.outaged_branch).into());
            }
        }
        let mut grids = vec![grid.clone()];
        for c in contingencies {
            grids.push(apply_contingency(grid, c).map_err(ProblemError::from)?);
        }
        let scen: Vec<ScenarioData> = grids
            .into_iter()
            .map(|g| {
                let y = build_admittance(&g);
                let part = PfPartition::new(&g);
                let ends = crate::powerflow::rated_ends(&g);
                let rate_sq = ends.iter().map(|&(l, _)| g.rate_pu(l).powi(2)).collect();
                ScenarioData {
                    grid: g,
                    y,
                    part,
                    ends,
                    rate_sq,
                }
            })
            .collect();
        let part = &scen[0].part;
        let base = grid.clone();
        let nu = part.n_u();
        let mut lo = vec![0.0; nu];
        let mut hi = vec![0.0; nu];
        for i in 0..base.n_b() {
            if let Some(k) = part.u_v[i] {
                lo[k] = base.buses[i].vmin;
                hi[k] = base.buses[i].vmax;
            }
        }
        for &g in &part.pv_gens {
            let k = part.u_p[g].unwrap();
            lo[k] = base.generators[g].pmin / base.base_mva;
            hi[k] = base.generators[g].pmax / base.base_mva;
        }
        let u0: Vec<f64> = setpoint_controls(&base, part)
            .iter()
            .enumerate()
            .map(|(k, v)| v.clamp(lo[k], hi[k]))
            .collect();
        let mut bounds = Vec::new();
        for &i in &part.pq {
            bounds.push(StateBound {
                index: part.x1_v[i].unwrap(),
                lo: base.buses[i].vmin,
                hi: base.buses[i].vmax,
            });
        }
        let n1 = part.n_x1();
        let sum = |gens: &[usize], f: &dyn Fn(usize) -> f64| gens.iter().map(|&g| f(g)).sum::<f64>() / base.base_mva;
        let gm = &base.generators;
        bounds.push(StateBound {
            index: n1,
            lo: sum(&part.ref_gens, &|g| gm[g].pmin),
            hi: sum(&part.ref_gens, &|g| gm[g].pmax),
        });
        bounds.push(StateBound {
            index: n1 + 1,
            lo: sum(&part.ref_gens, &|g| gm[g].qmin),
            hi: sum(&part.ref_gens, &|g| gm[g].qmax),
        });
        for &i in &part.pv {
            let gens = &part.gens_at_bus[i];
            bounds.push(StateBound {
                index: n1 + part.x2_q[i].unwrap(),
                lo: sum(gens, &|g| gm[g].qmin),
                hi: sum(gens, &|g| gm[g].qmax),
            });
        }
        let mut lumps = Vec::new();
        if config.lump {
            for (c, s) in scen.iter().enumerate() {
                let mut classes: Vec<(u64, Vec<usize>)> = Vec::new();
                for (k, &(l, _)) in s.ends.iter().enumerate() {
                    let key = s.grid.branches[l].rate_a.to_bits();
                    match classes.iter_mut().find(|(r, _)| *r == key) {
                        Some((_, m)) => m.push(k),
                        None => classes.push((key, vec![k])),
                    }
                }
                for (key, members) in classes {
                    lumps.push(LumpedConstraint {
                        scenario: c,
                        rate_mva: f64::from_bits(key),
                        members,
                    });
                }
            }
        }
        let n_bound_rows: usize = bounds
            .iter()
            .map(|b| b.hi.is_finite() as usize + b.lo.is_finite() as usize)
            .sum();
        let pool = build_pool(config.workers).map_err(|e| ReducedError::InvalidConfig(e.to_string()))?;
        let n_lumps = lumps.len();
        Ok(ReducedProblem {
            base,
            scen,
            config,
            lo,
            hi,
            u0,
            bounds,
            lumps,
            alphas: Mutex::new(vec![None; n_lumps]),
            cache: Mutex::new(None),
            counters: Counters::default(),
            pool,
            n_h_scen: n_bound_rows,
        })
    }

    pub fn n_scenarios(&self) -> usize {
        self.scen.len()
    }

    pub fn partition(&self) -> &PfPartition {
        &self.scen[0].part
    }

    pub fn base_grid(&self) -> &GridCase {
        &self.base
    }

    pub fn config(&self) -> &ReducedConfig {
        &self.config
    }

    /// Number of states `n_x1 + n_x2` per scenario.
    pub fn n_x(&self) -> usize {
        self.partition().n_x1() + self.partition().n_x2()
    }

    /// Number of rated branch ends of a scenario.
    pub fn n_rated_ends(&self, scenario: usize) -> usize {
        self.scen[scenario].ends.len()
    }

    pub fn lumped_constraints(&self) -> &[LumpedConstraint] {
        &self.lumps
    }

    pub fn counts(&self) -> AdjointCounts {
        AdjointCounts {
            pf_solves: self.counters.pf_solves.load(Ordering::Relaxed),
            factorizations: self.counters.factorizations.load(Ordering::Relaxed),
            backsolves: self.counters.backsolves.load(Ordering::Relaxed),
        }
    }

    pub fn reset_counts(&self) {
        self.counters.pf_solves.store(0, Ordering::Relaxed);
        self.counters.factorizations.store(0, Ordering::Relaxed);
        self.counters.backsolves.store(0, Ordering::Relaxed);
    }

    fn line_rows(&self, scenario: usize) -> usize {
        if self.config.lump {
            self.lumps.iter().filter(|l| l.scenario == scenario).count()
        } else {
            self.scen[scenario].ends.len()
        }
    }

    fn row_offset(&self, scenario: usize) -> usize {
        (0..scenario).map(|c| self.line_rows(c) + self.n_h_scen).sum()
    }

    /// Power-flow states of every scenario at `u`, reusing the cache when
    /// `u` is unchanged.
    pub fn evaluate_states(&self, u: &[f64]) -> Result<Vec<PfSolution>, ReducedError> {
        self.ensure_states(u)?;
        Ok(self.cache.lock().unwrap().as_ref().unwrap().sols.clone())
    }

    fn ensure_states(&self, u: &[f64]) -> Result<(), ReducedError> {
        let mut cache = self.cache.lock().unwrap();
        if let Some(c) = cache.as_ref() {
            if c.u == u {
                return Ok(());
            }
        }
        let starts: Vec<PfState> = match cache.as_ref() {
            Some(c) => c.sols.iter().map(|s| s.state.clone()).collect(),
            None => self.scen.iter().map(|s| PfState::from_case(&s.grid)).collect(),
        };
        let (tol, maxit) = (self.config.pf_tol, self.config.pf_max_iter);
        let results: Vec<Result<PfSolution, ReducedError>> = self.pool.install(|| {
            self.scen
                .par_iter()
                .zip(starts.par_iter())
                .enumerate()
                .map(|(c, (s, start))| {
                    let warm = newton_pf_part(&s.grid, &s.y, &s.part, u, start, tol, maxit);
                    let sol = match warm {
                        Ok(sol) => Ok(sol),
                        Err(_) => {
                            newton_pf_part(&s.grid, &s.y, &s.part, u, &PfState::from_case(&s.grid), tol, maxit)
                        }
                    };
                    sol.map_err(|e| match e {
                        PfError::PfDivergence { .. } | PfError::SingularJacobian => ReducedError::PfDivergence(c),
                        other => ReducedError::Pf(other),
                    })
                })
                .collect()
        });
        self.counters.pf_solves.fetch_add(self.scen.len(), Ordering::Relaxed);
        let sols = results.into_iter().collect::<Result<Vec<_>, _>>()?;
        *cache = Some(StateCache {
            u: u.to_vec(),
            work: vec![None; sols.len()],
            sols,
        });
        Ok(())
    }

    /// Adjoint workspace of a scenario at `u`; `g11` is factorized at most
    /// once per scenario and control vector.
    pub fn workspace(&self, u: &[f64], scenario: usize) -> Result<std::sync::Arc<AdjointWorkspace>, ReducedError> {
        if scenario >= self.scen.len() {
            return Err(PfError::IndexOutOfRange(scenario).into());
        }
        self.ensure_states(u)?;
        let mut cache = self.cache.lock().unwrap();
        let c = cache.as_mut().unwrap();
        if let Some(w) = &c.work[scenario] {
            return Ok(w.clone());
        }
        let s = &self.scen[scenario];
        let st = &c.sols[scenario].state;
        let blocks = jacobian_blocks(&s.grid, &s.y, &s.part, &st.vm, &st.va);
        let (g1u, g2u) = control_jacobian(&s.grid, &s.y, &s.part, &st.vm, &st.va);
        let g11t = blocks.g11.transpose().lu();
        self.counters.factorizations.fetch_add(1, Ordering::Relaxed);
        if !g11t.is_invertible() {
            return Err(PfError::SingularJacobian.into());
        }
        let w = std::sync::Arc::new(AdjointWorkspace {
            g11t,
            g21: blocks.g21,
            g1u,
            g2u,
        });
        c.work[scenario] = Some(w.clone());
        Ok(w)
    }

    fn state(&self, u: &[f64], scenario: usize) -> Result<PfSolution, ReducedError> {
        self.ensure_states(u)?;
        Ok(self.cache.lock().unwrap().as_ref().unwrap().sols[scenario].clone())
    }

    /// Nominal generation cost at `u`.
    pub fn objective_value(&self, u: &[f64]) -> Result<f64, ReducedError> {
        let sol = self.state(u, 0)?;
        let g = &self.base;
        Ok((0..g.n_g())
            .filter(|&k| g.generators[k].in_service)
            .map(|k| g.gen_cost_pu(k, sol.state.pg[k]))
            .sum())
    }

    fn adjoint(
        &self,
        w: &AdjointWorkspace,
        fx1: &DMatrix<f64>,
        fx2: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>, ReducedError> {
        self.counters.backsolves.fetch_add(fx1.ncols(), Ordering::Relaxed);
        Ok(w.total_derivatives(fx1, fx2)?)
    }

    /// Objective gradient; one adjoint solve on the nominal scenario.
    pub fn objective_gradient_adjoint(&self, u: &[f64]) -> Result<Vec<f64>, ReducedError> {
        let (g, _) = self.objective_gradient_with_multipliers(u)?;
        Ok(g)
    }

    /// Objective gradient together with the adjoint multipliers `(λ1, λ2)`.
    pub fn objective_gradient_with_multipliers(&self, u: &[f64]) -> Result<(Vec<f64>, (Vec<f64>, Vec<f64>)), ReducedError> {
        let sol = self.state(u, 0)?;
        let w = self.workspace(u, 0)?;
        let part = self.partition();
        let g = &self.base;
        let mut fu = vec![0.0; part.n_u()];
        for &k in &part.pv_gens {
            fu[part.u_p[k].unwrap()] = g.gen_cost_deriv_pu(k, sol.state.pg[k]);
        }
        let share = crate::powerflow::p_share(g, &part.ref_gens);
        let mut fx2 = DMatrix::zeros(part.n_x2(), 1);
        fx2[(0, 0)] = part
            .ref_gens
            .iter()
            .zip(&share)
            .map(|(&k, w)| w * g.gen_cost_deriv_pu(k, sol.state.pg[k]))
            .sum();
        let fx1 = DMatrix::zeros(part.n_x1(), 1);
        let rhs = -(&fx1 + w.g21.transpose() * &fx2);
        let lam1 = w.g11t.solve(&rhs).ok_or(PfError::SingularJacobian)?;
        self.counters.backsolves.fetch_add(1, Ordering::Relaxed);
        let d = lam1.transpose() * &w.g1u + fx2.transpose() * &w.g2u;
        let grad = (0..part.n_u()).map(|k| fu[k] + d[(0, k)]).collect();
        Ok((grad, (lam1.column(0).iter().copied().collect(), fx2.column(0).iter().copied().collect())))
    }

    /// Partial derivatives of rated-end flow limits: columns of `∂h/∂x1`
    /// and rows of `∂h/∂u`.
    fn flow_partials(
        &self,
        scenario: usize,
        st: &PfState,
        idx: &[usize],
        weights: &[f64],
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), ReducedError> {
        let s = &self.scen[scenario];
        let part = &s.part;
        let mut fx1 = DMatrix::zeros(part.n_x1(), idx.len());
        let mut fu = DMatrix::zeros(idx.len(), part.n_u());
        for (col, &k) in idx.iter().enumerate() {
            let gr = line_flow_h_grad(&s.grid, &s.y, &st.vm, &st.va, k)?;
            for (i, v) in gr.x1.iter().enumerate() {
                fx1[(i, col)] = v * weights[col];
            }
            for (i, v) in gr.v_ctrl.iter().enumerate() {
                fu[(col, i)] = v * weights[col];
            }
        }
        Ok((fx1, fu))
    }

    /// Gradient of the `line_index`-th rated-end limit `|S|² − F̄²`.
    pub fn constraint_gradient_adjoint(&self, u: &[f64], scenario: usize, line_index: usize) -> Result<Vec<f64>, ReducedError> {
        if scenario >= self.scen.len() {
            return Err(PfError::IndexOutOfRange(scenario).into());
        }
        if line_index >= self.scen[scenario].ends.len() {
            return Err(PfError::IndexOutOfRange(line_index).into());
        }
        let m = self.line_jacobian(u, scenario, &[line_index], &[1.0])?;
        Ok(m.row(0).iter().copied().collect())
    }

    /// Adjoint multipliers `(λ1, λ2)` of one rated-end limit; `λ2` is zero
    /// since the limits do not depend on `x2`.
    pub fn constraint_multipliers(&self, u: &[f64], scenario: usize, line_index: usize) -> Result<(Vec<f64>, Vec<f64>), ReducedError> {
        if scenario >= self.scen.len() || line_index >= self.scen[scenario].ends.len() {
            return Err(PfError::IndexOutOfRange(line_index).into());
        }
        let sol = self.state(u, scenario)?;
        let w = self.workspace(u, scenario)?;
        let (fx1, _) = self.flow_partials(scenario, &sol.state, &[line_index], &[1.0])?;
        let lam1 = w.g11t.solve(&(-fx1)).ok_or(PfError::SingularJacobian)?;
        self.counters.backsolves.fetch_add(1, Ordering::Relaxed);
        Ok((lam1.column(0).iter().copied().collect(), vec![0.0; self.partition().n_x2()]))
    }

    /// Rows `d h_k / du` for the given rated ends, each scaled by a weight.
    fn line_jacobian(&self, u: &[f64], scenario: usize, idx: &[usize], weights: &[f64]) -> Result<DMatrix<f64>, ReducedError> {
        let sol = self.state(u, scenario)?;
        let w = self.workspace(u, scenario)?;
        let (fx1, fu) = self.flow_partials(scenario, &sol.state, idx, weights)?;
        let fx2 = DMatrix::zeros(self.partition().n_x2(), idx.len());
        Ok(fu + self.adjoint(&w, &fx1, &fx2)?)
    }

    /// Sensitivities of every state `(x1, x2)` to the controls, one row per
    /// state, from `n_x` adjoint backsolves.
    pub fn bound_gradients_adjoint(&self, u: &[f64], scenario: usize) -> Result<DMatrix<f64>, ReducedError> {
        if scenario >= self.scen.len() {
            return Err(PfError::IndexOutOfRange(scenario).into());
        }
        let w = self.workspace(u, scenario)?;
        let part = self.partition();
        let (n1, n2) = (part.n_x1(), part.n_x2());
        let mut fx1 = DMatrix::zeros(n1, n1 + n2);
        let mut fx2 = DMatrix::zeros(n2, n1 + n2);
        for i in 0..n1 {
            fx1[(i, i)] = 1.0;
        }
        for j in 0..n2 {
            fx2[(j, n1 + j)] = 1.0;
        }
        self.adjoint(&w, &fx1, &fx2)
    }

    fn scaled_flows(&self, u: &[f64], scenario: usize) -> Result<Vec<f64>, ReducedError> {
        let sol = self.state(u, scenario)?;
        let s = &self.scen[scenario];
        let flows = line_flow_h(&s.grid, &s.y, &sol.state.vm, &sol.state.va);
        Ok(flows.h.iter().zip(&s.rate_sq).map(|(h, r)| h / r).collect())
    }

    fn lump_members(&self, lump: usize) -> Result<&LumpedConstraint, ReducedError> {
        self.lumps.get(lump).ok_or(ReducedError::Pf(PfError::IndexOutOfRange(lump)))
    }

    /// Lumped value of one (scenario, rating class) group at `u` for a
    /// given smoothing scale.
    pub fn lumped_constraint_value(&self, u: &[f64], lump: usize, alpha: f64) -> Result<f64, ReducedError> {
        let l = self.lump_members(lump)?;
        let h = self.scaled_flows(u, l.scenario)?;
        let hm: Vec<f64> = l.members.iter().map(|&k| h[k]).collect();
        lumped_value(&hm, alpha)
    }

    /// Gradient of the lumped value; a single adjoint solve.
    pub fn lumped_gradient(&self, u: &[f64], lump: usize, alpha: f64) -> Result<Vec<f64>, ReducedError> {
        let l = self.lump_members(lump)?;
        if l.members.is_empty() {
            return Err(ReducedError::EmptyLumpSet);
        }
        let h = self.scaled_flows(u, l.scenario)?;
        let hm: Vec<f64> = l.members.iter().map(|&k| h[k]).collect();
        let wts = lumped_weights(&hm, alpha);
        let s = &self.scen[l.scenario];
        let sol = self.state(u, l.scenario)?;
        let w = self.workspace(u, l.scenario)?;
        let scaled: Vec<f64> = l.members.iter().zip(&wts).map(|(&k, wt)| wt / s.rate_sq[k]).collect();
        let (fx1_cols, fu_rows) = self.flow_partials(l.scenario, &sol.state, &l.members, &scaled)?;
        let fx1 = DMatrix::from_fn(fx1_cols.nrows(), 1, |i, _| fx1_cols.row(i).sum());
        let fu = DMatrix::from_fn(1, fu_rows.ncols(), |_, j| fu_rows.column(j).sum());
        let fx2 = DMatrix::zeros(self.partition().n_x2(), 1);
        let d = fu + self.adjoint(&w, &fx1, &fx2)?;
        Ok(d.row(0).iter().copied().collect())
    }

    /// Smoothing scale of a lumped group, frozen until the next barrier
    /// update.
    pub fn current_alpha(&self, u: &[f64], lump: usize) -> Result<f64, ReducedError> {
        if let Some(a) = self.alphas.lock().unwrap()[lump] {
            return Ok(a);
        }
        let l = self.lump_members(lump)?;
        let h = self.scaled_flows(u, l.scenario)?;
        let hm: Vec<f64> = l.members.iter().map(|&k| h[k]).collect();
        let a = select_alpha(&hm, self.config.smoothing, self.config.threshold);
        self.alphas.lock().unwrap()[lump] = Some(a);
        Ok(a)
    }

    fn constraints(&self, u: &[f64]) -> Result<Vec<f64>, ReducedError> {
        let mut out = Vec::with_capacity(self.n_h());
        for c in 0..self.scen.len() {
            let sol = self.state(u, c)?;
            if self.config.lump {
                for k in (0..self.lumps.len()).filter(|&k| self.lumps[k].scenario == c) {
                    let a = self.current_alpha(u, k)?;
                    out.push(self.lumped_constraint_value(u, k, a)?);
                }
            } else {
                let s = &self.scen[c];
                out.extend(line_flow_h(&s.grid, &s.y, &sol.state.vm, &sol.state.va).h);
            }
            let x: Vec<f64> = sol.x1.iter().chain(&sol.x2).copied().collect();
            for b in &self.bounds {
                if b.hi.is_finite() {
                    out.push(x[b.index] - b.hi);
                }
            }
            for b in &self.bounds {
                if b.lo.is_finite() {
                    out.push(b.lo - x[b.index]);
                }
            }
        }
        Ok(out)
    }

    fn constraint_jacobian(&self, u: &[f64]) -> Result<DMatrix<f64>, ReducedError> {
        let nu = self.partition().n_u();
        let mut j = DMatrix::zeros(self.n_h(), nu);
        for c in 0..self.scen.len() {
            let mut row = self.row_offset(c);
            if self.config.lump {
                for (k, l) in self.lumps.iter().enumerate() {
                    if l.scenario != c {
                        continue;
                    }
                    let a = self.current_alpha(u, k)?;
                    let g = self.lumped_gradient(u, k, a)?;
                    for (col, v) in g.iter().enumerate() {
                        j[(row, col)] = *v;
                    }
                    row += 1;
                }
            } else {
                let n = self.scen[c].ends.len();
                if n > 0 {
                    let idx: Vec<usize> = (0..n).collect();
                    let m = self.line_jacobian(u, c, &idx, &vec![1.0; n])?;
                    j.view_mut((row, 0), (n, nu)).copy_from(&m);
                    row += n;
                }
            }
            let sens = self.bound_gradients_adjoint(u, c)?;
            for b in &self.bounds {
                if b.hi.is_finite() {
                    j.row_mut(row).copy_from(&sens.row(b.index));
                    row += 1;
                }
            }
            for b in &self.bounds {
                if b.lo.is_finite() {
                    j.row_mut(row).copy_from(&(-sens.row(b.index)));
                    row += 1;
                }
            }
        }
        Ok(j)
    }
}

fn to_eval(e: ReducedError) -> EvalError {
    EvalError::Failed(e.to_string())
}

impl NlpProblem for ReducedProblem {
    fn n(&self) -> usize {
        self.partition().n_u()
    }
    fn n_g(&self) -> usize {
        0
    }
    fn n_h(&self) -> usize {
        (0..self.scen.len()).map(|c| self.line_rows(c) + self.n_h_scen).sum()
    }
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (self.lo.clone(), self.hi.clone())
    }
    fn initial_point(&self) -> Vec<f64> {
        self.u0.clone()
    }
    fn objective(&self, x: &[f64]) -> Result<f64, EvalError> {
        self.objective_value(x).map_err(to_eval)
    }
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        self.objective_gradient_adjoint(x).map_err(to_eval)
    }
    fn eq_constraints(&self, _x: &[f64]) -> Result<Vec<f64>, EvalError> {
        Ok(Vec::new())
    }
    fn ineq_constraints(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        self.constraints(x).map_err(to_eval)
    }
    fn eq_jacobian(&self, _x: &[f64]) -> Result<Triplets, EvalError> {
        Ok(Vec::new())
    }
    fn ineq_jacobian(&self, x: &[f64]) -> Result<Triplets, EvalError> {
        let j = self.constraint_jacobian(x).map_err(to_eval)?;
        let mut t = Vec::new();
        for r in 0..j.nrows() {
            for c in 0..j.ncols() {
                if j[(r, c)] != 0.0 {
                    t.push((r, c, j[(r, c)]));
                }
            }
        }
        Ok(t)
    }
    fn hessian(&self, _x: &[f64], _s: f64, _lg: &[f64], _lh: &[f64]) -> Result<Triplets, EvalError> {
        Err(EvalError::Failed("the reduced problem has no exact Hessian".into()))
    }
    fn exact_hessian_available(&self) -> bool {
        false
    }
    fn on_barrier_update(&self, _mu: f64) {
        for a in self.alphas.lock().unwrap().iter_mut() {
            *a = None;
        }
    }
}

/// Reduced-space solution: IPM result over the controls and the scenario
/// states at the final controls.
#[derive(Debug, Clone)]
pub struct ReducedSolution {
    pub ipm: IpmResult,
    pub u: Vec<f64>,
    pub states: Vec<PfState>,
    pub counts: AdjointCounts,
}

/// Solves the reduced problem with an L-BFGS Hessian.
pub fn reduced_solve(
    rp: &ReducedProblem,
    options: &IpmOptions,
    backend: &Backend,
) -> Result<ReducedSolution, ReducedError> {
    if matches!(backend, Backend::SchurArrowhead { .. }) {
        return Err(ReducedError::InvalidConfig("the reduced KKT system is solved directly".into()));
    }
    let mut opts = options.clone();
    if opts.hessian == HessianMode::Exact {
        opts.hessian = HessianMode::Lbfgs { history: 20 };
    }
    rp.on_barrier_update(opts.mu0);
    let ipm = solve_from(rp, &opts, backend, None);
    let u = ipm.iterate.x.clone();
    let states = rp
        .evaluate_states(&u)
        .map(|s| s.into_iter().map(|s| s.state).collect())
        .unwrap_or_default();
    Ok(ReducedSolution {
        ipm,
        u,
        states,
        counts: rp.counts(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_follow_the_shifted_exponentials() {
        let w = lumped_weights(&[0.0, 0.0], 0.5);
        assert_eq!(w, vec![0.5, 0.5]);
        let w = lumped_weights(&[1000.0, 0.0], 0.1);
        assert_eq!(w[0], 1.0);
    }

    #[test]
    fn alpha_scales_with_large_flows() {
        assert_eq!(select_alpha(&[10.0], 0.1, 5.0), 1.0);
        assert_eq!(select_alpha(&[-3.0], 0.2, 5.0), 0.2);
    }

    #[test]
    fn history_is_bounded_by_memory() {
        let mut h = LbfgsHistory::new(2, false);
        for k in 0..4 {
            let mut s = DVector::zeros(3);
            s[k % 3] = 1.0;
            assert!(h.update(&s, &(&s * 2.0)));
        }
        assert_eq!(h.len(), 2);
    }
}
