//! AC power flow in polar coordinates: mismatch equations, Jacobian blocks
//! in the (x1, x2) partition, Newton solver and squared branch-flow limits.
//!
//! Bus injections are sums of pair terms `v_i v_k (G cos a + B sin a)` and
//! `v_i v_k (G sin a - B cos a)` with `a = θ_i - θ_k`, plus the diagonal
//! terms `v_i² G_ii` and `-v_i² B_ii`. The same terms describe branch-end
//! flows, so one set of derivative formulas serves the power flow, the OPF
//! callbacks and the adjoint gradients.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

use crate::grid_model::{AdmittanceMatrix, GridCase};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PfError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("power flow did not converge in {iterations} iterations (residual {residual:e})")]
    PfDivergence { iterations: usize, residual: f64 },
    #[error("power flow Jacobian block g11 is singular")]
    SingularJacobian,
    #[error("index {0} out of range")]
    IndexOutOfRange(usize),
}

/// Values and derivatives of one pair term over `(θ_i, θ_k, v_i, v_k)`.
#[derive(Debug, Clone, Copy)]
pub struct PairTerm {
    pub p: f64,
    pub q: f64,
    pub dp: [f64; 4],
    pub dq: [f64; 4],
    pub hp: [[f64; 4]; 4],
    pub hq: [[f64; 4]; 4],
}

pub fn pair_term(g: f64, b: f64, vi: f64, vk: f64, ti: f64, tk: f64) -> PairTerm {
    let (s, c) = (ti - tk).sin_cos();
    let tp = g * c + b * s;
    let tq = g * s - b * c;
    let vv = vi * vk;
    let p = vv * tp;
    let q = vv * tq;
    let dp = [-vv * tq, vv * tq, vk * tp, vi * tp];
    let dq = [vv * tp, -vv * tp, vk * tq, vi * tq];
    let hp = [
        [-vv * tp, vv * tp, -vk * tq, -vi * tq],
        [vv * tp, -vv * tp, vk * tq, vi * tq],
        [-vk * tq, vk * tq, 0.0, tp],
        [-vi * tq, vi * tq, tp, 0.0],
    ];
    let hq = [
        [-vv * tq, vv * tq, vk * tp, vi * tp],
        [vv * tq, -vv * tq, -vk * tp, -vi * tp],
        [vk * tp, -vk * tp, 0.0, tq],
        [vi * tp, -vi * tp, tq, 0.0],
    ];
    PairTerm { p, q, dp, dq, hp, hq }
}

/// Branch end whose flow is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    From,
    To,
}

/// Complex flow leaving one branch end, with derivatives over
/// `(θ_near, θ_far, v_near, v_far)`.
#[derive(Debug, Clone, Copy)]
pub struct EndFlow {
    pub near: usize,
    pub far: usize,
    pub term: PairTerm,
}

pub fn end_flow(grid: &GridCase, y: &AdmittanceMatrix, branch: usize, side: Side, vm: &[f64], va: &[f64]) -> EndFlow {
    let br = &grid.branches[branch];
    let [yff, yft, ytf, ytt] = y.branch_y[branch];
    let (near, far, ynn, ynf) = match side {
        Side::From => (br.from, br.to, yff, yft),
        Side::To => (br.to, br.from, ytt, ytf),
    };
    let mut t = pair_term(ynf.re, ynf.im, vm[near], vm[far], va[near], va[far]);
    let v = vm[near];
    t.p += v * v * ynn.re;
    t.q -= v * v * ynn.im;
    t.dp[2] += 2.0 * v * ynn.re;
    t.dq[2] -= 2.0 * v * ynn.im;
    t.hp[2][2] += 2.0 * ynn.re;
    t.hq[2][2] -= 2.0 * ynn.im;
    EndFlow { near, far, term: t }
}

/// Squared apparent flow minus squared rating, with gradient and Hessian
/// over `(θ_near, θ_far, v_near, v_far)`.
pub fn end_flow_limit(f: &EndFlow, rate_pu: f64) -> (f64, [f64; 4], [[f64; 4]; 4]) {
    let t = &f.term;
    let h = t.p * t.p + t.q * t.q - rate_pu * rate_pu;
    let mut grad = [0.0; 4];
    let mut hess = [[0.0; 4]; 4];
    for a in 0..4 {
        grad[a] = 2.0 * (t.p * t.dp[a] + t.q * t.dq[a]);
        for b in 0..4 {
            hess[a][b] = 2.0 * (t.dp[a] * t.dp[b] + t.p * t.hp[a][b] + t.dq[a] * t.dq[b] + t.q * t.hq[a][b]);
        }
    }
    (h, grad, hess)
}

/// Bus injections `S = diag(V) conj(Y V)` split into (P, Q).
pub fn bus_injections(y: &AdmittanceMatrix, vm: &[f64], va: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let v: Vec<Complex64> = vm.iter().zip(va).map(|(&m, &a)| Complex64::from_polar(m, a)).collect();
    let mut p = vec![0.0; vm.len()];
    let mut q = vec![0.0; vm.len()];
    for (i, row) in y.ybus.outer_iterator().enumerate() {
        let mut cur = Complex64::new(0.0, 0.0);
        for (k, yik) in row.iter() {
            cur += yik * v[k];
        }
        let s = v[i] * cur.conj();
        p[i] = s.re;
        q[i] = s.im;
    }
    (p, q)
}

/// Visits every injection term: `f(i, k, term)` for pair terms (k ≠ i) and
/// `f(i, i, term)` for the diagonal term, whose derivatives sit in slots 0/2.
fn for_each_injection_term(y: &AdmittanceMatrix, vm: &[f64], va: &[f64], mut f: impl FnMut(usize, usize, &PairTerm)) {
    for (i, row) in y.ybus.outer_iterator().enumerate() {
        for (k, yik) in row.iter() {
            if k == i {
                let v = vm[i];
                let mut t = PairTerm {
                    p: v * v * yik.re,
                    q: -v * v * yik.im,
                    dp: [0.0; 4],
                    dq: [0.0; 4],
                    hp: [[0.0; 4]; 4],
                    hq: [[0.0; 4]; 4],
                };
                t.dp[2] = 2.0 * v * yik.re;
                t.dq[2] = -2.0 * v * yik.im;
                t.hp[2][2] = 2.0 * yik.re;
                t.hq[2][2] = -2.0 * yik.im;
                f(i, i, &t);
            } else {
                let t = pair_term(yik.re, yik.im, vm[i], vm[k], va[i], va[k]);
                f(i, k, &t);
            }
        }
    }
}

/// Jacobian of (P, Q) injections over (θ, v): rows `i` (P) and `nb + i` (Q),
/// columns `k` (θ) and `nb + k` (v). Entries are returned as triplets and
/// may repeat.
pub fn injection_jacobian(y: &AdmittanceMatrix, vm: &[f64], va: &[f64]) -> Vec<(usize, usize, f64)> {
    let nb = vm.len();
    let mut out = Vec::new();
    for_each_injection_term(y, vm, va, |i, k, t| {
        let cols = [i, k, nb + i, nb + k];
        let slots: &[usize] = if i == k { &[2] } else { &[0, 1, 2, 3] };
        for &a in slots {
            out.push((i, cols[a], t.dp[a]));
            out.push((nb + i, cols[a], t.dq[a]));
        }
    });
    out
}

/// Hessian of `Σ lp_i P_i + lq_i Q_i` over (θ, v) as symmetric triplets.
pub fn injection_hessian(
    y: &AdmittanceMatrix,
    vm: &[f64],
    va: &[f64],
    lp: &[f64],
    lq: &[f64],
) -> Vec<(usize, usize, f64)> {
    let nb = vm.len();
    let mut out = Vec::new();
    for_each_injection_term(y, vm, va, |i, k, t| {
        let cols = [i, k, nb + i, nb + k];
        let slots: &[usize] = if i == k { &[2] } else { &[0, 1, 2, 3] };
        for &a in slots {
            for &b in slots {
                let v = lp[i] * t.hp[a][b] + lq[i] * t.hq[a][b];
                if v != 0.0 {
                    out.push((cols[a], cols[b], v));
                }
            }
        }
    });
    out
}

/// Bus classification and slot maps for the reduced power-flow variables.
///
/// A non-reference bus counts as PV when it hosts an in-service generator.
/// Controls are `u = (v_REF, v_PV, p_PV-gens)`; states are
/// `x1 = (θ_PV, θ_PQ, v_PQ)` and `x2 = (p_REF, q_REF, q_PV)` where the x2
/// entries are bus totals over the generators connected there. Mismatch rows
/// follow `g1 = (Re g_PV, Re g_PQ, Im g_PQ)` and `g2 = (Re g_REF, Im g_REF,
/// Im g_PV)`.
#[derive(Debug, Clone)]
pub struct PfPartition {
    pub ref_bus: usize,
    pub pv: Vec<usize>,
    pub pq: Vec<usize>,
    pub pv_gens: Vec<usize>,
    pub ref_gens: Vec<usize>,
    pub gens_at_bus: Vec<Vec<usize>>,
    pub x1_theta: Vec<Option<usize>>,
    pub x1_v: Vec<Option<usize>>,
    pub row_p: Vec<usize>,
    pub row_q: Vec<usize>,
    pub u_v: Vec<Option<usize>>,
    pub u_p: Vec<Option<usize>>,
    pub x2_q: Vec<Option<usize>>,
}

impl PfPartition {
    pub fn new(grid: &GridCase) -> Self {
        let nb = grid.n_b();
        let ref_bus = grid.ref_bus();
        let gens_at_bus = grid.gens_at_bus();
        let mut pv = Vec::new();
        let mut pq = Vec::new();
        for i in 0..nb {
            if i == ref_bus {
                continue;
            }
            if gens_at_bus[i].is_empty() {
                pq.push(i);
            } else {
                pv.push(i);
            }
        }
        let (npv, npq) = (pv.len(), pq.len());
        let mut x1_theta = vec![None; nb];
        let mut x1_v = vec![None; nb];
        let mut row_p = vec![0; nb];
        let mut row_q = vec![0; nb];
        let mut u_v = vec![None; nb];
        let mut x2_q = vec![None; nb];
        let n1 = npv + 2 * npq;
        u_v[ref_bus] = Some(0);
        row_p[ref_bus] = n1;
        row_q[ref_bus] = n1 + 1;
        for (k, &i) in pv.iter().enumerate() {
            x1_theta[i] = Some(k);
            row_p[i] = k;
            row_q[i] = n1 + 2 + k;
            u_v[i] = Some(1 + k);
            x2_q[i] = Some(2 + k);
        }
        for (k, &i) in pq.iter().enumerate() {
            x1_theta[i] = Some(npv + k);
            x1_v[i] = Some(npv + npq + k);
            row_p[i] = npv + k;
            row_q[i] = npv + npq + k;
        }
        let pv_gens: Vec<usize> = pv.iter().flat_map(|&i| gens_at_bus[i].iter().copied()).collect();
        let ref_gens = gens_at_bus[ref_bus].clone();
        let mut u_p = vec![None; grid.n_g()];
        for (k, &g) in pv_gens.iter().enumerate() {
            u_p[g] = Some(1 + npv + k);
        }
        PfPartition {
            ref_bus,
            pv,
            pq,
            pv_gens,
            ref_gens,
            gens_at_bus,
            x1_theta,
            x1_v,
            row_p,
            row_q,
            u_v,
            u_p,
            x2_q,
        }
    }

    pub fn n_x1(&self) -> usize {
        self.pv.len() + 2 * self.pq.len()
    }

    pub fn n_x2(&self) -> usize {
        2 + self.pv.len()
    }

    pub fn n_u(&self) -> usize {
        1 + self.pv.len() + self.pv_gens.len()
    }

    /// Number of voltage-magnitude controls (reference bus first).
    pub fn n_v_ctrl(&self) -> usize {
        1 + self.pv.len()
    }

    pub fn is_pv(&self, bus: usize) -> bool {
        self.x2_q[bus].is_some()
    }
}

/// Bus voltages and per-generator injections (per unit).
#[derive(Debug, Clone, PartialEq)]
pub struct PfState {
    pub vm: Vec<f64>,
    pub va: Vec<f64>,
    pub pg: Vec<f64>,
    pub qg: Vec<f64>,
}

impl PfState {
    /// Voltages and dispatch stored in the case file.
    pub fn from_case(grid: &GridCase) -> Self {
        let mut vm: Vec<f64> = grid.buses.iter().map(|b| b.vm0).collect();
        for g in grid.generators.iter().filter(|g| g.in_service) {
            vm[g.bus] = g.vg;
        }
        PfState {
            vm,
            va: grid.buses.iter().map(|b| b.va0).collect(),
            pg: grid
                .generators
                .iter()
                .map(|g| if g.in_service { g.pg0 / grid.base_mva } else { 0.0 })
                .collect(),
            qg: grid
                .generators
                .iter()
                .map(|g| if g.in_service { g.qg0 / grid.base_mva } else { 0.0 })
                .collect(),
        }
    }
}

/// Controls realising the case's generator setpoints.
pub fn setpoint_controls(grid: &GridCase, part: &PfPartition) -> Vec<f64> {
    let st = PfState::from_case(grid);
    let mut u = vec![0.0; part.n_u()];
    for i in 0..grid.n_b() {
        if let Some(k) = part.u_v[i] {
            u[k] = st.vm[i];
        }
    }
    for &g in &part.pv_gens {
        u[part.u_p[g].unwrap()] = st.pg[g];
    }
    u
}

fn weights(gens: &[usize], cap: impl Fn(usize) -> f64) -> Vec<f64> {
    let caps: Vec<f64> = gens.iter().map(|&g| cap(g).max(0.0)).collect();
    let total: f64 = caps.iter().sum();
    if total > 0.0 && total.is_finite() {
        caps.iter().map(|c| c / total).collect()
    } else {
        vec![1.0 / gens.len() as f64; gens.len()]
    }
}

/// Splits bus totals across the generators at a bus in proportion to their
/// capacity (`pmax` for active, `qmax - qmin` for reactive power).
pub fn p_share(grid: &GridCase, gens: &[usize]) -> Vec<f64> {
    weights(gens, |g| grid.generators[g].pmax)
}

pub fn q_share(grid: &GridCase, gens: &[usize]) -> Vec<f64> {
    weights(gens, |g| grid.generators[g].qmax - grid.generators[g].qmin)
}

fn check_dims(grid: &GridCase, vm: &[f64], va: &[f64]) -> Result<(), PfError> {
    if vm.len() != grid.n_b() || va.len() != grid.n_b() {
        return Err(PfError::DimensionMismatch(format!(
            "expected {} bus values, got {}/{}",
            grid.n_b(),
            vm.len(),
            va.len()
        )));
    }
    Ok(())
}

/// Per-bus active and reactive mismatch `S + S^d - C_g S^g`.
pub fn bus_mismatch(
    grid: &GridCase,
    y: &AdmittanceMatrix,
    vm: &[f64],
    va: &[f64],
    pg: &[f64],
    qg: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), PfError> {
    check_dims(grid, vm, va)?;
    if pg.len() != grid.n_g() || qg.len() != grid.n_g() {
        return Err(PfError::DimensionMismatch(format!(
            "expected {} generator values",
            grid.n_g()
        )));
    }
    let (mut p, mut q) = bus_injections(y, vm, va);
    for i in 0..grid.n_b() {
        p[i] += grid.pd_pu(i);
        q[i] += grid.qd_pu(i);
    }
    for (k, g) in grid.generators.iter().enumerate() {
        if g.in_service {
            p[g.bus] -= pg[k];
            q[g.bus] -= qg[k];
        }
    }
    Ok((p, q))
}

/// Mismatch ordered as `(g1, g2)`, length `2 N_B`.
pub fn mismatch(
    grid: &GridCase,
    y: &AdmittanceMatrix,
    vm: &[f64],
    va: &[f64],
    pg: &[f64],
    qg: &[f64],
) -> Result<Vec<f64>, PfError> {
    let part = PfPartition::new(grid);
    let (p, q) = bus_mismatch(grid, y, vm, va, pg, qg)?;
    Ok(order_mismatch(&part, &p, &q))
}

fn order_mismatch(part: &PfPartition, p: &[f64], q: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; 2 * p.len()];
    for i in 0..p.len() {
        g[part.row_p[i]] = p[i];
        g[part.row_q[i]] = q[i];
    }
    g
}

#[derive(Debug, Clone)]
pub struct PfJacobianBlocks {
    pub g11: DMatrix<f64>,
    pub g21: DMatrix<f64>,
}

/// Dense Jacobian of the ordered mismatch over all (θ, v) columns.
pub fn polar_jacobian(grid: &GridCase, y: &AdmittanceMatrix, part: &PfPartition, vm: &[f64], va: &[f64]) -> DMatrix<f64> {
    let nb = grid.n_b();
    let mut j = DMatrix::zeros(2 * nb, 2 * nb);
    for (r, c, v) in injection_jacobian(y, vm, va) {
        let row = if r < nb { part.row_p[r] } else { part.row_q[r - nb] };
        j[(row, c)] += v;
    }
    j
}

pub fn pf_jacobian(grid: &GridCase, y: &AdmittanceMatrix, vm: &[f64], va: &[f64]) -> Result<PfJacobianBlocks, PfError> {
    check_dims(grid, vm, va)?;
    let part = PfPartition::new(grid);
    Ok(jacobian_blocks(grid, y, &part, vm, va))
}

pub fn jacobian_blocks(grid: &GridCase, y: &AdmittanceMatrix, part: &PfPartition, vm: &[f64], va: &[f64]) -> PfJacobianBlocks {
    let nb = grid.n_b();
    let n1 = part.n_x1();
    let n2 = part.n_x2();
    let mut g11 = DMatrix::zeros(n1, n1);
    let mut g21 = DMatrix::zeros(n2, n1);
    for (r, c, v) in injection_jacobian(y, vm, va) {
        let row = if r < nb { part.row_p[r] } else { part.row_q[r - nb] };
        let col = if c < nb { part.x1_theta[c] } else { part.x1_v[c - nb] };
        let Some(col) = col else { continue };
        if row < n1 {
            g11[(row, col)] += v;
        } else {
            g21[(row - n1, col)] += v;
        }
    }
    PfJacobianBlocks { g11, g21 }
}

/// Derivatives of `(g1, g2)` with respect to `x2` (the `[0; -I]` blocks).
pub fn state2_jacobian(part: &PfPartition) -> (DMatrix<f64>, DMatrix<f64>) {
    let n1 = part.n_x1();
    let n2 = part.n_x2();
    (DMatrix::zeros(n1, n2), -DMatrix::identity(n2, n2))
}

/// Derivatives of `(g1, g2)` with respect to the controls `u`.
pub fn control_jacobian(
    grid: &GridCase,
    y: &AdmittanceMatrix,
    part: &PfPartition,
    vm: &[f64],
    va: &[f64],
) -> (DMatrix<f64>, DMatrix<f64>) {
    let nb = grid.n_b();
    let n1 = part.n_x1();
    let n2 = part.n_x2();
    let nu = part.n_u();
    let mut d1 = DMatrix::zeros(n1, nu);
    let mut d2 = DMatrix::zeros(n2, nu);
    let mut put = |row: usize, col: usize, v: f64| {
        if row < n1 {
            d1[(row, col)] += v;
        } else {
            d2[(row - n1, col)] += v;
        }
    };
    for (r, c, v) in injection_jacobian(y, vm, va) {
        if c < nb {
            continue;
        }
        let Some(col) = part.u_v[c - nb] else { continue };
        let row = if r < nb { part.row_p[r] } else { part.row_q[r - nb] };
        put(row, col, v);
    }
    for &g in &part.pv_gens {
        put(part.row_p[grid.generators[g].bus], part.u_p[g].unwrap(), -1.0);
    }
    (d1, d2)
}

#[derive(Debug, Clone)]
pub struct PfSolution {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub iterations: usize,
    pub state: PfState,
    /// Infinity norm of the mismatch before each Newton step and at exit.
    pub residuals: Vec<f64>,
}

/// Writes controls and states into a full bus/generator state.
pub fn assemble_state(grid: &GridCase, part: &PfPartition, u: &[f64], x1: &[f64], x2: &[f64], st: &mut PfState) {
    for i in 0..grid.n_b() {
        if let Some(k) = part.u_v[i] {
            st.vm[i] = u[k];
        }
        if let Some(k) = part.x1_theta[i] {
            st.va[i] = x1[k];
        }
        if let Some(k) = part.x1_v[i] {
            st.vm[i] = x1[k];
        }
    }
    st.va[part.ref_bus] = grid.buses[part.ref_bus].va0;
    for (k, g) in grid.generators.iter().enumerate() {
        if !g.in_service {
            st.pg[k] = 0.0;
            st.qg[k] = 0.0;
        }
    }
    for &g in &part.pv_gens {
        st.pg[g] = u[part.u_p[g].unwrap()];
    }
    let split = |gens: &[usize], total: f64, share: Vec<f64>, out: &mut Vec<f64>| {
        for (&g, w) in gens.iter().zip(share) {
            out[g] = total * w;
        }
    };
    split(&part.ref_gens, x2[0], p_share(grid, &part.ref_gens), &mut st.pg);
    split(&part.ref_gens, x2[1], q_share(grid, &part.ref_gens), &mut st.qg);
    for &i in &part.pv {
        let gens = &part.gens_at_bus[i];
        split(gens, x2[part.x2_q[i].unwrap()], q_share(grid, gens), &mut st.qg);
    }
}

/// Extracts `(x1, x2)` from a full state.
pub fn extract_states(grid: &GridCase, part: &PfPartition, st: &PfState) -> (Vec<f64>, Vec<f64>) {
    let mut x1 = vec![0.0; part.n_x1()];
    for i in 0..grid.n_b() {
        if let Some(k) = part.x1_theta[i] {
            x1[k] = st.va[i];
        }
        if let Some(k) = part.x1_v[i] {
            x1[k] = st.vm[i];
        }
    }
    let mut x2 = vec![0.0; part.n_x2()];
    x2[0] = part.ref_gens.iter().map(|&g| st.pg[g]).sum();
    x2[1] = part.ref_gens.iter().map(|&g| st.qg[g]).sum();
    for &i in &part.pv {
        x2[part.x2_q[i].unwrap()] = part.gens_at_bus[i].iter().map(|&g| st.qg[g]).sum();
    }
    (x1, x2)
}

/// Newton power flow from the voltages stored in the case.
pub fn newton_pf(grid: &GridCase, y: &AdmittanceMatrix, u: &[f64], tol: f64, max_iter: usize) -> Result<PfSolution, PfError> {
    newton_pf_from(grid, y, u, &PfState::from_case(grid), tol, max_iter)
}

/// Newton power flow warm-started from `start`.
pub fn newton_pf_from(
    grid: &GridCase,
    y: &AdmittanceMatrix,
    u: &[f64],
    start: &PfState,
    tol: f64,
    max_iter: usize,
) -> Result<PfSolution, PfError> {
    let part = PfPartition::new(grid);
    newton_pf_part(grid, y, &part, u, start, tol, max_iter)
}

pub fn newton_pf_part(
    grid: &GridCase,
    y: &AdmittanceMatrix,
    part: &PfPartition,
    u: &[f64],
    start: &PfState,
    tol: f64,
    max_iter: usize,
) -> Result<PfSolution, PfError> {
    check_dims(grid, &start.vm, &start.va)?;
    if u.len() != part.n_u() {
        return Err(PfError::DimensionMismatch(format!(
            "expected {} controls, got {}",
            part.n_u(),
            u.len()
        )));
    }
    let n1 = part.n_x1();
    let (mut x1, mut x2) = extract_states(grid, part, start);
    let mut st = start.clone();
    let mut residuals = Vec::new();
    for it in 0..=max_iter {
        assemble_state(grid, part, u, &x1, &x2, &mut st);
        let (p, q) = bus_mismatch(grid, y, &st.vm, &st.va, &st.pg, &st.qg)?;
        let g = order_mismatch(part, &p, &q);
        let norm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        residuals.push(norm);
        if norm <= tol {
            return Ok(PfSolution {
                x1,
                x2,
                iterations: it,
                state: st,
                residuals,
            });
        }
        if it == max_iter || !norm.is_finite() {
            return Err(PfError::PfDivergence {
                iterations: it,
                residual: norm,
            });
        }
        let blocks = jacobian_blocks(grid, y, part, &st.vm, &st.va);
        let rhs = -DVector::from_column_slice(&g[..n1]);
        let dx1 = blocks.g11.lu().solve(&rhs).ok_or(PfError::SingularJacobian)?;
        let dx2 = DVector::from_column_slice(&g[n1..]) + &blocks.g21 * &dx1;
        for k in 0..n1 {
            x1[k] += dx1[k];
        }
        for k in 0..x2.len() {
            x2[k] += dx2[k];
        }
    }
    unreachable!()
}

/// Rated, in-service branch ends in limit order: every from end, then every
/// to end.
pub fn rated_ends(grid: &GridCase) -> Vec<(usize, Side)> {
    let rated: Vec<usize> = (0..grid.n_l())
        .filter(|&l| grid.branches[l].in_service && grid.branches[l].is_rated())
        .collect();
    rated
        .iter()
        .map(|&l| (l, Side::From))
        .chain(rated.iter().map(|&l| (l, Side::To)))
        .collect()
}

#[derive(Debug, Clone)]
pub struct LineFlows {
    pub h: Vec<f64>,
    pub index: Vec<(usize, Side)>,
}

/// `|S|² - F̄²` (per unit) for every rated branch end.
pub fn line_flow_h(grid: &GridCase, y: &AdmittanceMatrix, vm: &[f64], va: &[f64]) -> LineFlows {
    let index = rated_ends(grid);
    let h = index
        .iter()
        .map(|&(l, side)| {
            let f = end_flow(grid, y, l, side, vm, va);
            f.term.p * f.term.p + f.term.q * f.term.q - grid.rate_pu(l).powi(2)
        })
        .collect();
    LineFlows { h, index }
}

/// Gradient of one flow limit split into x1, x2 and voltage-control slots.
#[derive(Debug, Clone)]
pub struct FlowGradient {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub v_ctrl: Vec<f64>,
}

pub fn line_flow_h_grad(
    grid: &GridCase,
    y: &AdmittanceMatrix,
    vm: &[f64],
    va: &[f64],
    line_index: usize,
) -> Result<FlowGradient, PfError> {
    check_dims(grid, vm, va)?;
    let index = rated_ends(grid);
    let &(l, side) = index.get(line_index).ok_or(PfError::IndexOutOfRange(line_index))?;
    let part = PfPartition::new(grid);
    let f = end_flow(grid, y, l, side, vm, va);
    let (_, grad, _) = end_flow_limit(&f, grid.rate_pu(l));
    let mut out = FlowGradient {
        x1: vec![0.0; part.n_x1()],
        x2: vec![0.0; part.n_x2()],
        v_ctrl: vec![0.0; part.n_v_ctrl()],
    };
    for (slot, bus) in [(0, f.near), (1, f.far)] {
        if let Some(k) = part.x1_theta[bus] {
            out.x1[k] += grad[slot];
        }
        if let Some(k) = part.x1_v[bus] {
            out.x1[k] += grad[slot + 2];
        }
        if let Some(k) = part.u_v[bus] {
            out.v_ctrl[k] += grad[slot + 2];
        }
    }
    Ok(out)
}
