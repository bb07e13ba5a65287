//! OPF and SCOPF as nonlinear programs with block-structure metadata.

use std::collections::HashSet;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::grid_model::{apply_contingency, build_admittance, AdmittanceMatrix, BusKind, Contingency, GridCase, GridError};
use crate::powerflow::{bus_injections, end_flow, end_flow_limit, injection_hessian, injection_jacobian, rated_ends, Side};

/// Sparse matrix entries; repeated positions add up.
pub type Triplets = Vec<(usize, usize, f64)>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("evaluation failed: {0}")]
    Failed(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("contingency on branch {0} listed twice")]
    DuplicateContingency(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Callback bundle of `min f(x) s.t. g(x) = 0, h(x) ≤ 0, x_L ≤ x ≤ x_U`.
pub trait NlpProblem {
    fn n(&self) -> usize;
    fn n_g(&self) -> usize;
    fn n_h(&self) -> usize;
    /// Lower and upper variable bounds; infinite entries mean unbounded.
    fn bounds(&self) -> (Vec<f64>, Vec<f64>);
    fn initial_point(&self) -> Vec<f64>;
    fn objective(&self, x: &[f64]) -> Result<f64, EvalError>;
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, EvalError>;
    fn eq_constraints(&self, x: &[f64]) -> Result<Vec<f64>, EvalError>;
    fn ineq_constraints(&self, x: &[f64]) -> Result<Vec<f64>, EvalError>;
    fn eq_jacobian(&self, x: &[f64]) -> Result<Triplets, EvalError>;
    fn ineq_jacobian(&self, x: &[f64]) -> Result<Triplets, EvalError>;
    /// `∇²(σ f − λgᵀg − λhᵀh)` with entries of both triangles.
    fn hessian(&self, x: &[f64], obj_factor: f64, lam_g: &[f64], lam_h: &[f64]) -> Result<Triplets, EvalError>;

    fn exact_hessian_available(&self) -> bool {
        true
    }

    fn layout(&self) -> Option<&ArrowheadLayout> {
        None
    }

    /// Called by the solver whenever the barrier parameter changes.
    fn on_barrier_update(&self, _mu: f64) {}
}

pub fn triplets_to_dense(rows: usize, cols: usize, t: &Triplets) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    for &(i, j, v) in t {
        m[(i, j)] += v;
    }
    m
}

/// Index sets of one scenario: its local variables and constraint rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioBlock {
    pub x: Vec<usize>,
    pub g_rows: Vec<usize>,
    pub h_rows: Vec<usize>,
}

/// Variable partition into per-scenario local slices and one global slice.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrowheadLayout {
    pub blocks: Vec<ScenarioBlock>,
    pub global_x: Vec<usize>,
}

impl ArrowheadLayout {
    /// KKT index sets for the `[x, s, λg, λh]` ordering.
    pub fn kkt_blocks_full(&self, n: usize, n_g: usize, n_h: usize) -> (Vec<Vec<usize>>, Vec<usize>) {
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let mut idx = b.x.clone();
                idx.extend(b.h_rows.iter().map(|&r| n + r));
                idx.extend(b.g_rows.iter().map(|&r| n + n_h + r));
                idx.extend(b.h_rows.iter().map(|&r| n + n_h + n_g + r));
                idx
            })
            .collect();
        (blocks, self.global_x.clone())
    }

    /// KKT index sets for the slack-reduced `[x, λg, λh]` ordering.
    pub fn kkt_blocks_reduced(&self, n: usize, n_g: usize) -> (Vec<Vec<usize>>, Vec<usize>) {
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let mut idx = b.x.clone();
                idx.extend(b.g_rows.iter().map(|&r| n + r));
                idx.extend(b.h_rows.iter().map(|&r| n + n_g + r));
                idx
            })
            .collect();
        (blocks, self.global_x.clone())
    }

    /// True when the slices partition `[0, n)` and the rows partition
    /// `[0, n_g)` and `[0, n_h)`.
    pub fn is_partition(&self, n: usize, n_g: usize, n_h: usize) -> bool {
        fn covers<'a>(sets: impl Iterator<Item = &'a Vec<usize>>, len: usize) -> bool {
            let mut seen = vec![false; len];
            for s in sets {
                for &i in s {
                    if i >= len || seen[i] {
                        return false;
                    }
                    seen[i] = true;
                }
            }
            seen.into_iter().all(|v| v)
        }
        covers(self.blocks.iter().map(|b| &b.x).chain(std::iter::once(&self.global_x)), n)
            && covers(self.blocks.iter().map(|b| &b.g_rows), n_g)
            && covers(self.blocks.iter().map(|b| &b.h_rows), n_h)
    }
}

#[derive(Debug, Clone)]
struct Scenario {
    grid: GridCase,
    y: AdmittanceMatrix,
    /// Position in `x` of each slot of the OPF ordering (θ, v, p, q).
    map: Vec<usize>,
    ends: Vec<(usize, Side)>,
    g_off: usize,
    h_off: usize,
    contingency: Option<Contingency>,
}

/// Full-space OPF or SCOPF instance.
#[derive(Debug, Clone)]
pub struct OpfProblem {
    base: GridCase,
    gens: Vec<usize>,
    gen_bus: Vec<usize>,
    scenarios: Vec<Scenario>,
    n: usize,
    n_g: usize,
    n_h: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
    x0: Vec<f64>,
    layout: ArrowheadLayout,
}

/// Per-scenario network state extracted from a solution vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioState {
    pub va: Vec<f64>,
    pub vm: Vec<f64>,
    /// Active and reactive dispatch of the in-service generators, per unit.
    pub pg: Vec<f64>,
    pub qg: Vec<f64>,
}

fn clip(v: f64, lo: f64, hi: f64) -> f64 {
    v.max(lo).min(hi)
}

fn opf_slot_bounds(grid: &GridCase, gens: &[usize]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let nb = grid.n_b();
    let ng = gens.len();
    let base = grid.base_mva;
    let r = grid.ref_bus();
    let gab = grid.gens_at_bus();
    let mut lo = vec![f64::NEG_INFINITY; 2 * nb + 2 * ng];
    let mut hi = vec![f64::INFINITY; 2 * nb + 2 * ng];
    let mut x0 = vec![0.0; 2 * nb + 2 * ng];
    lo[r] = grid.buses[r].va0;
    hi[r] = grid.buses[r].va0;
    for (i, b) in grid.buses.iter().enumerate() {
        x0[i] = b.va0;
        lo[nb + i] = b.vmin;
        hi[nb + i] = b.vmax;
        let v = gab[i].first().map_or(b.vm0, |&g| grid.generators[g].vg);
        x0[nb + i] = clip(v, b.vmin, b.vmax);
    }
    for (j, &g) in gens.iter().enumerate() {
        let gen = &grid.generators[g];
        lo[2 * nb + j] = gen.pmin / base;
        hi[2 * nb + j] = gen.pmax / base;
        x0[2 * nb + j] = clip(gen.pg0 / base, gen.pmin / base, gen.pmax / base);
        lo[2 * nb + ng + j] = gen.qmin / base;
        hi[2 * nb + ng + j] = gen.qmax / base;
        x0[2 * nb + ng + j] = clip(gen.qg0 / base, gen.qmin / base, gen.qmax / base);
    }
    (lo, hi, x0)
}

/// Which OPF slots are global (shared across scenarios): v at generator
/// buses and p of generators away from the reference bus.
fn global_slots(grid: &GridCase, gens: &[usize]) -> Vec<bool> {
    let nb = grid.n_b();
    let ng = gens.len();
    let gab = grid.gens_at_bus();
    let mut out = vec![false; 2 * nb + 2 * ng];
    for i in 0..nb {
        out[nb + i] = !gab[i].is_empty();
    }
    for (j, &g) in gens.iter().enumerate() {
        out[2 * nb + j] = grid.buses[grid.generators[g].bus].kind != BusKind::Ref;
    }
    out
}

/// Builds the OPF over variables ordered (θ, v, p, q).
pub fn build_opf(grid: &GridCase) -> Result<OpfProblem, ProblemError> {
    grid.validate()?;
    let slots = 2 * grid.n_b() + 2 * grid.in_service_gens().len();
    let map: Vec<usize> = (0..slots).collect();
    assemble(grid, vec![(grid.clone(), None, map)], slots)
}

/// Builds the SCOPF: local blocks of the nominal and each contingency case,
/// followed by the shared global slice.
pub fn build_scopf(grid: &GridCase, contingencies: &[Contingency]) -> Result<OpfProblem, ProblemError> {
    grid.validate()?;
    let mut seen = HashSet::new();
    for c in contingencies {
        if !seen.insert(c.outaged_branch) {
            return Err(ProblemError::DuplicateContingency(c.outaged_branch));
        }
    }
    let gens = grid.in_service_gens();
    let is_global = global_slots(grid, &gens);
    let slots = is_global.len();
    let local: Vec<usize> = (0..slots).filter(|&k| !is_global[k]).collect();
    let global: Vec<usize> = (0..slots).filter(|&k| is_global[k]).collect();
    let n_sc = contingencies.len() + 1;
    let global_off = n_sc * local.len();
    let mut scenarios = Vec::with_capacity(n_sc);
    for c in 0..n_sc {
        let mut map = vec![0; slots];
        for (k, &s) in local.iter().enumerate() {
            map[s] = c * local.len() + k;
        }
        for (k, &s) in global.iter().enumerate() {
            map[s] = global_off + k;
        }
        let (g, cont) = if c == 0 {
            (grid.clone(), None)
        } else {
            let cont = contingencies[c - 1].clone();
            (apply_contingency(grid, &cont)?, Some(cont))
        };
        scenarios.push((g, cont, map));
    }
    assemble(grid, scenarios, global_off + global.len())
}

fn assemble(
    grid: &GridCase,
    scenarios: Vec<(GridCase, Option<Contingency>, Vec<usize>)>,
    n: usize,
) -> Result<OpfProblem, ProblemError> {
    let gens = grid.in_service_gens();
    let gen_bus: Vec<usize> = gens.iter().map(|&g| grid.generators[g].bus).collect();
    let nb = grid.n_b();
    let (slo, shi, sx0) = opf_slot_bounds(grid, &gens);
    let is_global = global_slots(grid, &gens);
    let mut lower = vec![f64::NEG_INFINITY; n];
    let mut upper = vec![f64::INFINITY; n];
    let mut x0 = vec![0.0; n];
    let mut out = Vec::with_capacity(scenarios.len());
    let mut blocks = Vec::new();
    let mut global_x = Vec::new();
    let (mut g_off, mut h_off) = (0, 0);
    for (c, (g, cont, map)) in scenarios.into_iter().enumerate() {
        for (s, &xi) in map.iter().enumerate() {
            lower[xi] = slo[s];
            upper[xi] = shi[s];
            x0[xi] = sx0[s];
        }
        let ends = rated_ends(&g);
        let n_ends = ends.len();
        let mut bx: Vec<usize> = (0..map.len()).filter(|&s| !is_global[s]).map(|s| map[s]).collect();
        bx.sort_unstable();
        if c == 0 {
            global_x = (0..map.len()).filter(|&s| is_global[s]).map(|s| map[s]).collect();
            global_x.sort_unstable();
        }
        blocks.push(ScenarioBlock {
            x: bx,
            g_rows: (g_off..g_off + 2 * nb).collect(),
            h_rows: (h_off..h_off + n_ends).collect(),
        });
        out.push(Scenario {
            y: build_admittance(&g),
            grid: g,
            map,
            ends,
            g_off,
            h_off,
            contingency: cont,
        });
        g_off += 2 * nb;
        h_off += n_ends;
    }
    let layout = ArrowheadLayout { blocks, global_x };
    debug_assert!(layout.is_partition(n, g_off, h_off));
    Ok(OpfProblem {
        base: grid.clone(),
        gens,
        gen_bus,
        scenarios: out,
        n,
        n_g: g_off,
        n_h: h_off,
        lower,
        upper,
        x0,
        layout,
    })
}

impl OpfProblem {
    pub fn grid(&self) -> &GridCase {
        &self.base
    }

    pub fn n_scenarios(&self) -> usize {
        self.scenarios.len()
    }

    /// Generator positions (in `grid().generators`) of the dispatch slots.
    pub fn generators(&self) -> &[usize] {
        &self.gens
    }

    pub fn contingency(&self, scenario: usize) -> Option<&Contingency> {
        self.scenarios[scenario].contingency.as_ref()
    }

    pub fn scenario_grid(&self, scenario: usize) -> &GridCase {
        &self.scenarios[scenario].grid
    }

    /// Position in `x` of each OPF slot (θ, v, p, q) of a scenario.
    pub fn scenario_map(&self, scenario: usize) -> &[usize] {
        &self.scenarios[scenario].map
    }

    /// Rated branch ends behind the inequality rows of a scenario.
    pub fn scenario_ends(&self, scenario: usize) -> (&[(usize, Side)], usize) {
        let s = &self.scenarios[scenario];
        (&s.ends, s.h_off)
    }

    pub fn scenario_state(&self, x: &[f64], scenario: usize) -> ScenarioState {
        let loc = self.local(x, scenario);
        let nb = self.base.n_b();
        let ng = self.gens.len();
        ScenarioState {
            va: loc[..nb].to_vec(),
            vm: loc[nb..2 * nb].to_vec(),
            pg: loc[2 * nb..2 * nb + ng].to_vec(),
            qg: loc[2 * nb + ng..].to_vec(),
        }
    }

    fn local(&self, x: &[f64], c: usize) -> Vec<f64> {
        self.scenarios[c].map.iter().map(|&i| x[i]).collect()
    }

    fn check(&self, x: &[f64]) -> Result<(), EvalError> {
        if x.len() != self.n {
            return Err(EvalError::Failed(format!("x has length {}, expected {}", x.len(), self.n)));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::NonFinite("x"));
        }
        Ok(())
    }

    fn p_slot(&self, j: usize) -> usize {
        2 * self.base.n_b() + j
    }
}

fn finite(v: Vec<f64>, what: &'static str) -> Result<Vec<f64>, EvalError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(EvalError::NonFinite(what))
    }
}

impl NlpProblem for OpfProblem {
    fn n(&self) -> usize {
        self.n
    }

    fn n_g(&self) -> usize {
        self.n_g
    }

    fn n_h(&self) -> usize {
        self.n_h
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (self.lower.clone(), self.upper.clone())
    }

    fn initial_point(&self) -> Vec<f64> {
        self.x0.clone()
    }

    fn objective(&self, x: &[f64]) -> Result<f64, EvalError> {
        self.check(x)?;
        let map = &self.scenarios[0].map;
        let f: f64 = self
            .gens
            .iter()
            .enumerate()
            .map(|(j, &g)| self.base.gen_cost_pu(g, x[map[self.p_slot(j)]]))
            .sum();
        if f.is_finite() {
            Ok(f)
        } else {
            Err(EvalError::NonFinite("objective"))
        }
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        self.check(x)?;
        let map = &self.scenarios[0].map;
        let mut grad = vec![0.0; self.n];
        for (j, &g) in self.gens.iter().enumerate() {
            let i = map[self.p_slot(j)];
            grad[i] += self.base.gen_cost_deriv_pu(g, x[i]);
        }
        finite(grad, "gradient")
    }

    fn eq_constraints(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        self.check(x)?;
        let nb = self.base.n_b();
        let ng = self.gens.len();
        let mut out = vec![0.0; self.n_g];
        for (c, sc) in self.scenarios.iter().enumerate() {
            let loc = self.local(x, c);
            let (p, q) = bus_injections(&sc.y, &loc[nb..2 * nb], &loc[..nb]);
            let gg = &mut out[sc.g_off..sc.g_off + 2 * nb];
            for i in 0..nb {
                gg[i] = p[i] + sc.grid.pd_pu(i);
                gg[nb + i] = q[i] + sc.grid.qd_pu(i);
            }
            for (j, &b) in self.gen_bus.iter().enumerate() {
                gg[b] -= loc[2 * nb + j];
                gg[nb + b] -= loc[2 * nb + ng + j];
            }
        }
        finite(out, "equality constraints")
    }

    fn ineq_constraints(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        self.check(x)?;
        let nb = self.base.n_b();
        let mut out = vec![0.0; self.n_h];
        for (c, sc) in self.scenarios.iter().enumerate() {
            let loc = self.local(x, c);
            for (k, &(l, side)) in sc.ends.iter().enumerate() {
                let f = end_flow(&sc.grid, &sc.y, l, side, &loc[nb..2 * nb], &loc[..nb]);
                out[sc.h_off + k] = end_flow_limit(&f, sc.grid.rate_pu(l)).0;
            }
        }
        finite(out, "inequality constraints")
    }

    fn eq_jacobian(&self, x: &[f64]) -> Result<Triplets, EvalError> {
        self.check(x)?;
        let nb = self.base.n_b();
        let ng = self.gens.len();
        let mut out = Vec::new();
        for (c, sc) in self.scenarios.iter().enumerate() {
            let loc = self.local(x, c);
            for (r, col, v) in injection_jacobian(&sc.y, &loc[nb..2 * nb], &loc[..nb]) {
                out.push((sc.g_off + r, sc.map[col], v));
            }
            for (j, &b) in self.gen_bus.iter().enumerate() {
                out.push((sc.g_off + b, sc.map[2 * nb + j], -1.0));
                out.push((sc.g_off + nb + b, sc.map[2 * nb + ng + j], -1.0));
            }
        }
        if out.iter().any(|t| !t.2.is_finite()) {
            return Err(EvalError::NonFinite("equality Jacobian"));
        }
        Ok(out)
    }

    fn ineq_jacobian(&self, x: &[f64]) -> Result<Triplets, EvalError> {
        self.check(x)?;
        let nb = self.base.n_b();
        let mut out = Vec::new();
        for (c, sc) in self.scenarios.iter().enumerate() {
            let loc = self.local(x, c);
            for (k, &(l, side)) in sc.ends.iter().enumerate() {
                let f = end_flow(&sc.grid, &sc.y, l, side, &loc[nb..2 * nb], &loc[..nb]);
                let (_, grad, _) = end_flow_limit(&f, sc.grid.rate_pu(l));
                let cols = [f.near, f.far, nb + f.near, nb + f.far];
                for a in 0..4 {
                    out.push((sc.h_off + k, sc.map[cols[a]], grad[a]));
                }
            }
        }
        if out.iter().any(|t| !t.2.is_finite()) {
            return Err(EvalError::NonFinite("inequality Jacobian"));
        }
        Ok(out)
    }

    fn hessian(&self, x: &[f64], obj_factor: f64, lam_g: &[f64], lam_h: &[f64]) -> Result<Triplets, EvalError> {
        self.check(x)?;
        if lam_g.len() != self.n_g || lam_h.len() != self.n_h {
            return Err(EvalError::Failed("multiplier length mismatch".into()));
        }
        let nb = self.base.n_b();
        let mut out = Vec::new();
        let map0 = &self.scenarios[0].map;
        for (j, &g) in self.gens.iter().enumerate() {
            let i = map0[self.p_slot(j)];
            let v = obj_factor * self.base.gen_cost_curv_pu(g);
            if v != 0.0 {
                out.push((i, i, v));
            }
        }
        for (c, sc) in self.scenarios.iter().enumerate() {
            let loc = self.local(x, c);
            let (vm, va) = (&loc[nb..2 * nb], &loc[..nb]);
            let lp: Vec<f64> = lam_g[sc.g_off..sc.g_off + nb].iter().map(|v| -v).collect();
            let lq: Vec<f64> = lam_g[sc.g_off + nb..sc.g_off + 2 * nb].iter().map(|v| -v).collect();
            for (r, col, v) in injection_hessian(&sc.y, vm, va, &lp, &lq) {
                out.push((sc.map[r], sc.map[col], v));
            }
            for (k, &(l, side)) in sc.ends.iter().enumerate() {
                let w = -lam_h[sc.h_off + k];
                if w == 0.0 {
                    continue;
                }
                let f = end_flow(&sc.grid, &sc.y, l, side, vm, va);
                let (_, _, h) = end_flow_limit(&f, sc.grid.rate_pu(l));
                let cols = [f.near, f.far, nb + f.near, nb + f.far];
                for a in 0..4 {
                    for b in 0..4 {
                        if h[a][b] != 0.0 {
                            out.push((sc.map[cols[a]], sc.map[cols[b]], w * h[a][b]));
                        }
                    }
                }
            }
        }
        if out.iter().any(|t| !t.2.is_finite()) {
            return Err(EvalError::NonFinite("Hessian"));
        }
        Ok(out)
    }

    fn layout(&self) -> Option<&ArrowheadLayout> {
        Some(&self.layout)
    }
}

/// Dense Lagrangian Hessian `∇²(f − λgᵀg − λhᵀh)`.
pub fn lagrangian_hessian(
    problem: &dyn NlpProblem,
    x: &[f64],
    lam_g: &[f64],
    lam_h: &[f64],
) -> Result<DMatrix<f64>, ProblemError> {
    let n = problem.n();
    if x.len() != n || lam_g.len() != problem.n_g() || lam_h.len() != problem.n_h() {
        return Err(ProblemError::DimensionMismatch(format!(
            "x {} / λg {} / λh {} against n {} / n_g {} / n_h {}",
            x.len(),
            lam_g.len(),
            lam_h.len(),
            n,
            problem.n_g(),
            problem.n_h()
        )));
    }
    let t = problem
        .hessian(x, 1.0, lam_g, lam_h)
        .map_err(|e| ProblemError::DimensionMismatch(e.to_string()))?;
    Ok(triplets_to_dense(n, n, &t))
}
