//! Filter line-search primal-dual interior-point method.
//!
//! Problems are posed as `min f(x)` subject to `g(x) = 0`, `h(x) ≤ 0` and
//! variable bounds. Internally the inequalities are written `c(x) = −h(x) = s`
//! with `s > 0` and multipliers `λc = −λh > 0`; the iterate stores `λh` in the
//! problem's convention. Newton systems are assembled in the symmetrized
//! 4-block form ordered `[x, s, λg, λh]`:
//!
//! ```text
//! [ −W−Σ−δw   0      Jgᵀ   Jcᵀ ] [Δx ]   [ l_a + D_L⁻¹l_eL − D_U⁻¹l_eU ]
//! [  0       L_s−δw   0    −I  ] [Δs ] = [ S⁻¹ l_b                      ]
//! [  Jg       0      δc     0  ] [Δλg]   [ −l_c                         ]
//! [  Jc      −I       0    δc  ] [Δλc]   [ −l_d                         ]
//! ```
//!
//! with `L_s = −S⁻¹Λc`, so a usable factorization has inertia
//! `(n_g + n_h, n + n_h, 0)`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::ThreadPool;
use thiserror::Error;

use crate::kkt_linalg::{
    build_pool, equilibrate, ldlt_factor, permute_to_arrowhead, recover_slack_step, reduce_slack_system, Inertia,
    KktSystem, LinalgError, LocalSchurMethod, SchurFactor, SlackElimination, SymIndefFactor,
};
use crate::opf_problems::{triplets_to_dense, ArrowheadLayout, EvalError, NlpProblem, Triplets};
use crate::reduced_space::LbfgsHistory;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IpmError {
    #[error("callback failed: {0}")]
    CallbackFailure(#[from] EvalError),
    #[error("step computation failed: {0}")]
    StepComputationFailed(#[from] LinalgError),
    #[error("inertia correction failed")]
    InertiaCorrectionFailed,
    #[error("warm start mapping: {0}")]
    MappingError(String),
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BarrierStrategy {
    Monotone,
    Mehrotra,
    QualityFunction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InertiaMode {
    InertiaDetection,
    CurvatureTest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HessianMode {
    Exact,
    Lbfgs { history: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    DirectFull,
    DirectSlackReduced,
    SchurArrowhead { method: LocalSchurMethod, workers: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct IpmOptions {
    pub tol: f64,
    pub kappa_eps: f64,
    pub kappa_mu: f64,
    pub theta_mu: f64,
    pub mu0: f64,
    pub tau_min: f64,
    pub theta_max_factor: f64,
    pub theta_min_factor: f64,
    pub kappa_curv: f64,
    pub delta_min: f64,
    pub delta_0: f64,
    pub delta_growth: f64,
    pub delta_decrease: f64,
    pub delta_max: f64,
    pub delta_c: f64,
    pub kappa_c: f64,
    pub s_max: f64,
    pub g_max: f64,
    pub barrier: BarrierStrategy,
    pub inertia_mode: InertiaMode,
    pub hessian: HessianMode,
    pub lbfgs_damping: bool,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub max_iter: usize,
    pub max_backtracks: usize,
    pub pivot_tol: f64,
    pub bound_push: f64,
    pub bound_frac: f64,
    pub kappa_sigma: f64,
    pub acceptable_iter: usize,
    pub acceptable_obj_change: f64,
    pub acceptable_inf_pr: f64,
    pub restoration: bool,
    pub rho_resto: f64,
    pub zeta_resto: f64,
    pub max_resto_iter: usize,
}

impl Default for IpmOptions {
    fn default() -> Self {
        IpmOptions {
            tol: 1e-8,
            kappa_eps: 10.0,
            kappa_mu: 0.2,
            theta_mu: 1.5,
            mu0: 0.1,
            tau_min: 0.99,
            theta_max_factor: 1e4,
            theta_min_factor: 1e-4,
            kappa_curv: 1e-8,
            delta_min: 1e-20,
            delta_0: 1e-4,
            delta_growth: 8.0,
            delta_decrease: 1.0 / 3.0,
            delta_max: 1e40,
            delta_c: 1e-8,
            kappa_c: 0.25,
            s_max: 100.0,
            g_max: 100.0,
            barrier: BarrierStrategy::Monotone,
            inertia_mode: InertiaMode::InertiaDetection,
            hessian: HessianMode::Exact,
            lbfgs_damping: false,
            sigma_min: 0.01,
            sigma_max: 100.0,
            max_iter: 500,
            max_backtracks: 40,
            pivot_tol: 1e-12,
            bound_push: 1e-2,
            bound_frac: 1e-2,
            kappa_sigma: 1e10,
            acceptable_iter: 10,
            acceptable_obj_change: 1e-8,
            acceptable_inf_pr: 1e-6,
            restoration: true,
            rho_resto: 1000.0,
            zeta_resto: 1e-8,
            max_resto_iter: 300,
        }
    }
}

impl IpmOptions {
    pub fn validate(&self) -> Result<(), IpmError> {
        let bad = |m: &str| Err(IpmError::InvalidOptions(m.into()));
        if !(self.tol > 0.0) {
            return bad("tol must be positive");
        }
        if !(self.kappa_mu > 0.0 && self.kappa_mu < 1.0) {
            return bad("kappa_mu must lie in (0, 1)");
        }
        if !(self.theta_mu > 1.0 && self.theta_mu < 2.0) {
            return bad("theta_mu must lie in (1, 2)");
        }
        if !(self.tau_min > 0.0 && self.tau_min < 1.0) {
            return bad("tau_min must lie in (0, 1)");
        }
        if !(self.mu0 > 0.0 && self.kappa_eps > 0.0 && self.kappa_curv > 0.0) {
            return bad("mu0, kappa_eps and kappa_curv must be positive");
        }
        if !(self.delta_growth > 1.0 && self.delta_0 > 0.0 && self.delta_max > self.delta_0) {
            return bad("regularization schedule must grow");
        }
        if !(self.sigma_min > 0.0 && self.sigma_max > self.sigma_min) {
            return bad("need 0 < sigma_min < sigma_max");
        }
        if !(self.s_max >= 1.0 && self.g_max > 0.0) {
            return bad("s_max must be ≥ 1 and g_max positive");
        }
        if let HessianMode::Lbfgs { history } = self.hessian {
            if history == 0 {
                return bad("L-BFGS history must be positive");
            }
        }
        Ok(())
    }

    /// Sets one option from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), IpmError> {
        let num = || {
            value
                .parse::<f64>()
                .map_err(|_| IpmError::InvalidOptions(format!("{key}: '{value}' is not a number")))
        };
        let int = || {
            value
                .parse::<usize>()
                .map_err(|_| IpmError::InvalidOptions(format!("{key}: '{value}' is not an integer")))
        };
        let flag = || match value {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            _ => Err(IpmError::InvalidOptions(format!("{key}: '{value}' is not a boolean"))),
        };
        match key {
            "tol" => self.tol = num()?,
            "kappa_eps" => self.kappa_eps = num()?,
            "kappa_mu" => self.kappa_mu = num()?,
            "theta_mu" => self.theta_mu = num()?,
            "mu0" | "mu_init" => self.mu0 = num()?,
            "tau_min" => self.tau_min = num()?,
            "kappa_curv" => self.kappa_curv = num()?,
            "delta_0" => self.delta_0 = num()?,
            "delta_growth" => self.delta_growth = num()?,
            "delta_max" => self.delta_max = num()?,
            "s_max" => self.s_max = num()?,
            "g_max" => self.g_max = num()?,
            "sigma_min" => self.sigma_min = num()?,
            "sigma_max" => self.sigma_max = num()?,
            "max_iter" => self.max_iter = int()?,
            "max_backtracks" => self.max_backtracks = int()?,
            "pivot_tol" => self.pivot_tol = num()?,
            "acceptable_iter" => self.acceptable_iter = int()?,
            "restoration" => self.restoration = flag()?,
            "lbfgs_damping" => self.lbfgs_damping = flag()?,
            "barrier" => {
                self.barrier = match value {
                    "monotone" => BarrierStrategy::Monotone,
                    "mehrotra" => BarrierStrategy::Mehrotra,
                    "quality" | "quality_function" => BarrierStrategy::QualityFunction,
                    _ => return Err(IpmError::InvalidOptions(format!("unknown barrier strategy '{value}'"))),
                }
            }
            "inertia" => {
                self.inertia_mode = match value {
                    "detection" => InertiaMode::InertiaDetection,
                    "curvature" => InertiaMode::CurvatureTest,
                    _ => return Err(IpmError::InvalidOptions(format!("unknown inertia mode '{value}'"))),
                }
            }
            "hessian" => {
                self.hessian = match value {
                    "exact" => HessianMode::Exact,
                    "lbfgs" => HessianMode::Lbfgs { history: 20 },
                    _ => return Err(IpmError::InvalidOptions(format!("unknown hessian mode '{value}'"))),
                }
            }
            "lbfgs_history" => self.hessian = HessianMode::Lbfgs { history: int()? },
            _ => return Err(IpmError::InvalidOptions(format!("unknown option '{key}'"))),
        }
        self.validate()
    }
}

/// Primal-dual point. `lam_h ≤ 0` follows the problem's Lagrangian
/// `f − λgᵀg − λhᵀh`; `z_l`, `z_u` are zero for absent bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct IpmIterate {
    pub x: Vec<f64>,
    pub s: Vec<f64>,
    pub lam_g: Vec<f64>,
    pub lam_h: Vec<f64>,
    pub z_l: Vec<f64>,
    pub z_u: Vec<f64>,
    pub mu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    pub dx: Vec<f64>,
    pub ds: Vec<f64>,
    pub dlam_g: Vec<f64>,
    pub dlam_h: Vec<f64>,
    pub dz_l: Vec<f64>,
    pub dz_u: Vec<f64>,
}

impl Direction {
    /// `self + t · other`.
    fn plus(&self, t: f64, o: &Direction) -> Direction {
        let f = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + t * y).collect();
        Direction {
            dx: f(&self.dx, &o.dx),
            ds: f(&self.ds, &o.ds),
            dlam_g: f(&self.dlam_g, &o.dlam_g),
            dlam_h: f(&self.dlam_h, &o.dlam_h),
            dz_l: f(&self.dz_l, &o.dz_l),
            dz_u: f(&self.dz_u, &o.dz_u),
        }
    }

    fn minus(&self, o: &Direction) -> Direction {
        o.plus(-1.0, self).scaled(-1.0)
    }

    fn scaled(&self, t: f64) -> Direction {
        let f = |a: &[f64]| a.iter().map(|x| x * t).collect();
        Direction {
            dx: f(&self.dx),
            ds: f(&self.ds),
            dlam_g: f(&self.dlam_g),
            dlam_h: f(&self.dlam_h),
            dz_l: f(&self.dz_l),
            dz_u: f(&self.dz_u),
        }
    }
}

/// Residuals of the perturbed KKT conditions; `le_l`/`le_u` are zero at
/// indices without the corresponding bound.
#[derive(Debug, Clone, PartialEq)]
pub struct KktResiduals {
    pub la: Vec<f64>,
    pub lb: Vec<f64>,
    pub lc: Vec<f64>,
    pub ld: Vec<f64>,
    pub le_l: Vec<f64>,
    pub le_u: Vec<f64>,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn one_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

impl KktResiduals {
    pub fn primal_inf(&self) -> f64 {
        inf_norm(&self.lc).max(inf_norm(&self.ld))
    }

    pub fn dual_inf(&self) -> f64 {
        inf_norm(&self.la)
    }
}

/// Variable bound classification.
#[derive(Debug, Clone)]
pub struct BoundInfo {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub has_lo: Vec<bool>,
    pub has_hi: Vec<bool>,
    pub fixed: Vec<bool>,
}

impl BoundInfo {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, IpmError> {
        let n = lo.len();
        if hi.len() != n {
            return Err(IpmError::InvalidProblem("bound vectors differ in length".into()));
        }
        let mut has_lo = vec![false; n];
        let mut has_hi = vec![false; n];
        let mut fixed = vec![false; n];
        for i in 0..n {
            if lo[i] > hi[i] || lo[i].is_nan() || hi[i].is_nan() {
                return Err(IpmError::InvalidProblem(format!("empty bound interval at {i}")));
            }
            if lo[i] == hi[i] {
                fixed[i] = true;
            } else {
                has_lo[i] = lo[i].is_finite();
                has_hi[i] = hi[i].is_finite();
            }
        }
        Ok(BoundInfo {
            lo,
            hi,
            has_lo,
            has_hi,
            fixed,
        })
    }

    pub fn n_bounds(&self) -> usize {
        self.has_lo.iter().filter(|&&b| b).count() + self.has_hi.iter().filter(|&&b| b).count()
    }

    /// Moves `x` into the strict interior by the usual push/fraction rule.
    pub fn push_interior(&self, x: &mut [f64], push: f64, frac: f64) {
        for i in 0..x.len() {
            if self.fixed[i] {
                x[i] = self.lo[i];
                continue;
            }
            let (lo, hi) = (self.lo[i], self.hi[i]);
            let range = hi - lo;
            if self.has_lo[i] {
                let p = if self.has_hi[i] {
                    (push * lo.abs().max(1.0)).min(frac * range)
                } else {
                    push * lo.abs().max(1.0)
                };
                x[i] = x[i].max(lo + p);
            }
            if self.has_hi[i] {
                let p = if self.has_lo[i] {
                    (push * hi.abs().max(1.0)).min(frac * range)
                } else {
                    push * hi.abs().max(1.0)
                };
                x[i] = x[i].min(hi - p);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Scaling

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingFactors {
    pub s_f: f64,
    pub s_g: Vec<f64>,
    pub s_h: Vec<f64>,
}

impl ScalingFactors {
    pub fn identity(n_g: usize, n_h: usize) -> Self {
        ScalingFactors {
            s_f: 1.0,
            s_g: vec![1.0; n_g],
            s_h: vec![1.0; n_h],
        }
    }
}

fn gradient_factor(norm: f64, g_max: f64) -> f64 {
    if norm > 0.0 && norm.is_finite() {
        (g_max / norm).min(1.0)
    } else {
        1.0
    }
}

fn row_norms(rows: usize, t: &Triplets) -> Vec<f64> {
    let mut acc = vec![std::collections::HashMap::<usize, f64>::new(); rows];
    for &(r, c, v) in t {
        *acc[r].entry(c).or_insert(0.0) += v;
    }
    acc.iter().map(|m| m.values().fold(0.0f64, |a, v| a.max(v.abs()))).collect()
}

/// `s = min(1, g_max / ‖∇·‖∞)` for the objective and every constraint row.
pub fn compute_scaling(problem: &dyn NlpProblem, x0: &[f64], g_max: f64) -> Result<ScalingFactors, IpmError> {
    let grad = problem.gradient(x0)?;
    let s_f = gradient_factor(inf_norm(&grad), g_max);
    let jg = problem.eq_jacobian(x0)?;
    let jh = problem.ineq_jacobian(x0)?;
    Ok(ScalingFactors {
        s_f,
        s_g: row_norms(problem.n_g(), &jg).into_iter().map(|v| gradient_factor(v, g_max)).collect(),
        s_h: row_norms(problem.n_h(), &jh).into_iter().map(|v| gradient_factor(v, g_max)).collect(),
    })
}

/// A problem with objective and constraint rows multiplied by constant
/// factors.
pub struct ScaledNlp<'a> {
    inner: &'a dyn NlpProblem,
    pub scaling: ScalingFactors,
}

impl<'a> ScaledNlp<'a> {
    pub fn new(inner: &'a dyn NlpProblem, scaling: ScalingFactors) -> Self {
        ScaledNlp { inner, scaling }
    }
}

impl NlpProblem for ScaledNlp<'_> {
    fn n(&self) -> usize {
        self.inner.n()
    }
    fn n_g(&self) -> usize {
        self.inner.n_g()
    }
    fn n_h(&self) -> usize {
        self.inner.n_h()
    }
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        self.inner.bounds()
    }
    fn initial_point(&self) -> Vec<f64> {
        self.inner.initial_point()
    }
    fn objective(&self, x: &[f64]) -> Result<f64, EvalError> {
        Ok(self.scaling.s_f * self.inner.objective(x)?)
    }
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        Ok(self.inner.gradient(x)?.into_iter().map(|v| v * self.scaling.s_f).collect())
    }
    fn eq_constraints(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        Ok(self.inner.eq_constraints(x)?.iter().zip(&self.scaling.s_g).map(|(v, s)| v * s).collect())
    }
    fn ineq_constraints(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        Ok(self.inner.ineq_constraints(x)?.iter().zip(&self.scaling.s_h).map(|(v, s)| v * s).collect())
    }
    fn eq_jacobian(&self, x: &[f64]) -> Result<Triplets, EvalError> {
        Ok(self.inner.eq_jacobian(x)?.into_iter().map(|(r, c, v)| (r, c, v * self.scaling.s_g[r])).collect())
    }
    fn ineq_jacobian(&self, x: &[f64]) -> Result<Triplets, EvalError> {
        Ok(self.inner.ineq_jacobian(x)?.into_iter().map(|(r, c, v)| (r, c, v * self.scaling.s_h[r])).collect())
    }
    fn hessian(&self, x: &[f64], obj_factor: f64, lam_g: &[f64], lam_h: &[f64]) -> Result<Triplets, EvalError> {
        let lg: Vec<f64> = lam_g.iter().zip(&self.scaling.s_g).map(|(l, s)| l * s).collect();
        let lh: Vec<f64> = lam_h.iter().zip(&self.scaling.s_h).map(|(l, s)| l * s).collect();
        self.inner.hessian(x, obj_factor * self.scaling.s_f, &lg, &lh)
    }
    fn exact_hessian_available(&self) -> bool {
        self.inner.exact_hessian_available()
    }
    fn layout(&self) -> Option<&ArrowheadLayout> {
        self.inner.layout()
    }
    fn on_barrier_update(&self, mu: f64) {
        self.inner.on_barrier_update(mu)
    }
}

fn to_scaled(it: &IpmIterate, sc: &ScalingFactors) -> IpmIterate {
    IpmIterate {
        x: it.x.clone(),
        s: it.s.iter().zip(&sc.s_h).map(|(v, s)| v * s).collect(),
        lam_g: it.lam_g.iter().zip(&sc.s_g).map(|(v, s)| v * sc.s_f / s).collect(),
        lam_h: it.lam_h.iter().zip(&sc.s_h).map(|(v, s)| v * sc.s_f / s).collect(),
        z_l: it.z_l.iter().map(|v| v * sc.s_f).collect(),
        z_u: it.z_u.iter().map(|v| v * sc.s_f).collect(),
        mu: it.mu,
    }
}

fn to_unscaled(it: &IpmIterate, sc: &ScalingFactors) -> IpmIterate {
    IpmIterate {
        x: it.x.clone(),
        s: it.s.iter().zip(&sc.s_h).map(|(v, s)| v / s).collect(),
        lam_g: it.lam_g.iter().zip(&sc.s_g).map(|(v, s)| v * s / sc.s_f).collect(),
        lam_h: it.lam_h.iter().zip(&sc.s_h).map(|(v, s)| v * s / sc.s_f).collect(),
        z_l: it.z_l.iter().map(|v| v / sc.s_f).collect(),
        z_u: it.z_u.iter().map(|v| v / sc.s_f).collect(),
        mu: it.mu,
    }
}

// ---------------------------------------------------------------------------
// Evaluations and residuals

#[derive(Debug, Clone)]
struct Evals {
    f: f64,
    grad: Vec<f64>,
    g: Vec<f64>,
    /// `c = −h`.
    c: Vec<f64>,
    jg: DMatrix<f64>,
    /// `Jc = −Jh`.
    jc: DMatrix<f64>,
}

fn eval_values(p: &dyn NlpProblem, x: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>), EvalError> {
    let f = p.objective(x)?;
    let g = p.eq_constraints(x)?;
    let c = p.ineq_constraints(x)?.into_iter().map(|v| -v).collect();
    Ok((f, g, c))
}

fn eval_all(p: &dyn NlpProblem, x: &[f64]) -> Result<Evals, EvalError> {
    let (f, g, c) = eval_values(p, x)?;
    let n = p.n();
    let grad = p.gradient(x)?;
    let jg = triplets_to_dense(p.n_g(), n, &p.eq_jacobian(x)?);
    let jc = -triplets_to_dense(p.n_h(), n, &p.ineq_jacobian(x)?);
    Ok(Evals { f, grad, g, c, jg, jc })
}

fn residuals_from(ev: &Evals, it: &IpmIterate, b: &BoundInfo, mu: f64) -> KktResiduals {
    let n = it.x.len();
    let lc_mult: Vec<f64> = it.lam_h.iter().map(|v| -v).collect();
    let jt_lg = ev.jg.tr_mul(&DVector::from_column_slice(&it.lam_g));
    let jt_lc = ev.jc.tr_mul(&DVector::from_column_slice(&lc_mult));
    let mut la = vec![0.0; n];
    let mut le_l = vec![0.0; n];
    let mut le_u = vec![0.0; n];
    for i in 0..n {
        if b.fixed[i] {
            continue;
        }
        la[i] = ev.grad[i] - jt_lg[i] - jt_lc[i] - it.z_l[i] + it.z_u[i];
        if b.has_lo[i] {
            le_l[i] = (it.x[i] - b.lo[i]) * it.z_l[i] - mu;
        }
        if b.has_hi[i] {
            le_u[i] = (b.hi[i] - it.x[i]) * it.z_u[i] - mu;
        }
    }
    KktResiduals {
        la,
        lb: it.s.iter().zip(&lc_mult).map(|(s, l)| s * l - mu).collect(),
        lc: ev.g.clone(),
        ld: ev.c.iter().zip(&it.s).map(|(c, s)| c - s).collect(),
        le_l,
        le_u,
    }
}

/// Perturbed KKT residuals of `problem` at `iterate` (using `iterate.mu`).
pub fn kkt_residuals(problem: &dyn NlpProblem, iterate: &IpmIterate) -> Result<KktResiduals, IpmError> {
    let (lo, hi) = problem.bounds();
    let b = BoundInfo::new(lo, hi)?;
    let ev = eval_all(problem, &iterate.x)?;
    Ok(residuals_from(&ev, iterate, &b, iterate.mu))
}

/// Multiplier-based scaling `(s_1, s_2)` of the optimality error.
pub fn dual_scaling(iterate: &IpmIterate, s_max: f64) -> (f64, f64) {
    let n = iterate.x.len().max(1);
    let z1 = one_norm(&iterate.z_l) + one_norm(&iterate.z_u);
    let m = iterate.lam_g.len() + iterate.lam_h.len() + iterate.x.len();
    let lam1 = one_norm(&iterate.lam_g) + one_norm(&iterate.lam_h) + z1;
    let s1 = if m > 0 { (lam1 / m as f64).max(s_max) / s_max } else { 1.0 };
    let s2 = (z1 / n as f64).max(s_max) / s_max;
    (s1, s2)
}

/// Maximum of the residual ∞-norms; with `scaled`, the dual and slack
/// complementarity blocks are divided by `s_1` and the bound
/// complementarity by `s_2`.
pub fn optimality_error(iterate: &IpmIterate, r: &KktResiduals, s_max: f64, scaled: bool) -> f64 {
    let (s1, s2) = if scaled { dual_scaling(iterate, s_max) } else { (1.0, 1.0) };
    (inf_norm(&r.la) / s1)
        .max(inf_norm(&r.lb) / s1)
        .max(inf_norm(&r.lc))
        .max(inf_norm(&r.ld))
        .max(inf_norm(&r.le_l).max(inf_norm(&r.le_u)) / s2)
}

// ---------------------------------------------------------------------------
// KKT assembly

/// A KKT matrix in the symmetrized 4-block form with its dimensions.
#[derive(Debug, Clone)]
pub struct KktMatrix {
    pub n: usize,
    pub n_g: usize,
    pub n_h: usize,
    pub matrix: DMatrix<f64>,
}

impl KktMatrix {
    pub fn dim(&self) -> usize {
        self.n + 2 * self.n_h + self.n_g
    }
}

/// Barrier terms `Σ = Z_L D_L⁻¹ + Z_U D_U⁻¹` for the free variables.
fn sigma_x(it: &IpmIterate, b: &BoundInfo) -> Vec<f64> {
    (0..it.x.len())
        .map(|i| {
            let mut v = 0.0;
            if b.has_lo[i] {
                v += it.z_l[i] / (it.x[i] - b.lo[i]);
            }
            if b.has_hi[i] {
                v += it.z_u[i] / (b.hi[i] - it.x[i]);
            }
            v
        })
        .collect()
}

/// Builds the paper-form KKT matrix from the Hessian-like block `w`
/// (Lagrangian Hessian or its approximation).
#[allow(clippy::too_many_arguments)]
fn assemble_matrix(
    w: &DMatrix<f64>,
    it: &IpmIterate,
    ev: &Evals,
    b: &BoundInfo,
    delta_w: f64,
    delta_c: f64,
) -> KktMatrix {
    let n = it.x.len();
    let (ng, nh) = (it.lam_g.len(), it.lam_h.len());
    let dim = n + nh + ng + nh;
    let mut k = DMatrix::zeros(dim, dim);
    let sig = sigma_x(it, b);
    k.view_mut((0, 0), (n, n)).copy_from(&(-w));
    for i in 0..n {
        k[(i, i)] -= sig[i] + delta_w;
    }
    let (og, oh) = (n + nh, n + nh + ng);
    for r in 0..ng {
        for c in 0..n {
            let v = ev.jg[(r, c)];
            k[(og + r, c)] = v;
            k[(c, og + r)] = v;
        }
        k[(og + r, og + r)] = delta_c;
    }
    for r in 0..nh {
        for c in 0..n {
            let v = ev.jc[(r, c)];
            k[(oh + r, c)] = v;
            k[(c, oh + r)] = v;
        }
        let lc = -it.lam_h[r];
        k[(n + r, n + r)] = -lc / it.s[r] - delta_w;
        k[(oh + r, n + r)] = -1.0;
        k[(n + r, oh + r)] = -1.0;
        k[(oh + r, oh + r)] = delta_c;
    }
    for i in 0..n {
        if b.fixed[i] {
            for j in 0..dim {
                k[(i, j)] = 0.0;
                k[(j, i)] = 0.0;
            }
            k[(i, i)] = -1.0;
        }
    }
    KktMatrix { n, n_g: ng, n_h: nh, matrix: k }
}

fn assemble_rhs(r: &KktResiduals, it: &IpmIterate, b: &BoundInfo) -> DVector<f64> {
    let n = it.x.len();
    let (ng, nh) = (it.lam_g.len(), it.lam_h.len());
    let mut rhs = DVector::zeros(n + nh + ng + nh);
    for i in 0..n {
        if b.fixed[i] {
            continue;
        }
        let mut v = r.la[i];
        if b.has_lo[i] {
            v += r.le_l[i] / (it.x[i] - b.lo[i]);
        }
        if b.has_hi[i] {
            v -= r.le_u[i] / (b.hi[i] - it.x[i]);
        }
        rhs[i] = v;
    }
    for j in 0..nh {
        rhs[n + j] = r.lb[j] / it.s[j];
        rhs[n + nh + ng + j] = -r.ld[j];
    }
    for j in 0..ng {
        rhs[n + nh + j] = -r.lc[j];
    }
    rhs
}

/// `Δz_L = −D_L⁻¹(l_eL + Z_L Δx)` and `Δz_U = −D_U⁻¹(l_eU − Z_U Δx)`.
pub fn recover_dz(
    lo: &[f64],
    hi: &[f64],
    iterate: &IpmIterate,
    le_l: &[f64],
    le_u: &[f64],
    dx: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = dx.len();
    let mut dzl = vec![0.0; n];
    let mut dzu = vec![0.0; n];
    for i in 0..n {
        if lo[i].is_finite() && lo[i] < hi[i] {
            dzl[i] = -(le_l[i] + iterate.z_l[i] * dx[i]) / (iterate.x[i] - lo[i]);
        }
        if hi[i].is_finite() && lo[i] < hi[i] {
            dzu[i] = -(le_u[i] - iterate.z_u[i] * dx[i]) / (hi[i] - iterate.x[i]);
        }
    }
    (dzl, dzu)
}

fn direction_from(sol: &DVector<f64>, r: &KktResiduals, it: &IpmIterate, b: &BoundInfo) -> Direction {
    let n = it.x.len();
    let (ng, nh) = (it.lam_g.len(), it.lam_h.len());
    let dx: Vec<f64> = sol.rows(0, n).iter().copied().collect();
    let (dz_l, dz_u) = recover_dz(&b.lo, &b.hi, it, &r.le_l, &r.le_u, &dx);
    Direction {
        dx,
        ds: sol.rows(n, nh).iter().copied().collect(),
        dlam_g: sol.rows(n + nh, ng).iter().copied().collect(),
        dlam_h: sol.rows(n + nh + ng, nh).iter().map(|v| -v).collect(),
        dz_l,
        dz_u,
    }
}

/// The symmetrized Newton system of `problem` at `iterate` with the exact
/// Hessian and no regularization.
pub fn assemble_kkt(problem: &dyn NlpProblem, iterate: &IpmIterate) -> Result<KktSystem, IpmError> {
    let (lo, hi) = problem.bounds();
    let b = BoundInfo::new(lo, hi)?;
    let ev = eval_all(problem, &iterate.x)?;
    let n = problem.n();
    let w = triplets_to_dense(n, n, &problem.hessian(&iterate.x, 1.0, &iterate.lam_g, &iterate.lam_h)?);
    let k = assemble_matrix(&w, iterate, &ev, &b, 0.0, 0.0);
    let r = residuals_from(&ev, iterate, &b, iterate.mu);
    Ok(KktSystem {
        n,
        n_g: k.n_g,
        n_h: k.n_h,
        matrix: k.matrix,
        rhs: assemble_rhs(&r, iterate, &b),
    })
}

/// Splits a KKT solution into a full step, recovering the bound duals.
pub fn direction_from_solution(
    problem: &dyn NlpProblem,
    iterate: &IpmIterate,
    solution: &DVector<f64>,
) -> Result<Direction, IpmError> {
    let (lo, hi) = problem.bounds();
    let b = BoundInfo::new(lo, hi)?;
    let ev = eval_all(problem, &iterate.x)?;
    let r = residuals_from(&ev, iterate, &b, iterate.mu);
    Ok(direction_from(solution, &r, iterate, &b))
}

// ---------------------------------------------------------------------------
// Linear solvers

/// Factorizes and solves KKT systems in the 4-block form. `factor` returns
/// the inertia of the whole 4-block matrix.
pub trait KktSolver {
    fn factor(&mut self, kkt: &KktMatrix) -> Result<Inertia, LinalgError>;
    fn solve(&mut self, rhs: &DVector<f64>) -> Result<DVector<f64>, LinalgError>;
    fn name(&self) -> String;
}

fn scale_sym(m: &DMatrix<f64>, d: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| d[i] * m[(i, j)] * d[j])
}

fn singular_inertia(dim: usize) -> Inertia {
    Inertia::new(0, 0, dim)
}

/// Dense LDLᵀ of the whole 4-block matrix.
pub struct DirectFullSolver {
    pivot_tol: f64,
    scale: Vec<f64>,
    factor: Option<SymIndefFactor>,
}

impl DirectFullSolver {
    pub fn new(pivot_tol: f64) -> Self {
        DirectFullSolver {
            pivot_tol,
            scale: Vec::new(),
            factor: None,
        }
    }
}

impl KktSolver for DirectFullSolver {
    fn factor(&mut self, kkt: &KktMatrix) -> Result<Inertia, LinalgError> {
        self.scale = equilibrate(&kkt.matrix);
        let f = ldlt_factor(&scale_sym(&kkt.matrix, &self.scale), self.pivot_tol)?;
        let inertia = f.inertia;
        self.factor = Some(f);
        Ok(inertia)
    }

    fn solve(&mut self, rhs: &DVector<f64>) -> Result<DVector<f64>, LinalgError> {
        let f = self.factor.as_ref().ok_or(LinalgError::SingularSystem)?;
        let d = &self.scale;
        let y = f.solve(&DVector::from_fn(rhs.len(), |i, _| rhs[i] * d[i]))?;
        Ok(DVector::from_fn(y.len(), |i, _| y[i] * d[i]))
    }

    fn name(&self) -> String {
        "direct".into()
    }
}

/// Eliminates the slack block and factorizes the 3-block system.
pub struct DirectSlackReducedSolver {
    inner: DirectFullSolver,
    dims: (usize, usize, usize),
    ls: Vec<f64>,
}

impl DirectSlackReducedSolver {
    pub fn new(pivot_tol: f64) -> Self {
        DirectSlackReducedSolver {
            inner: DirectFullSolver::new(pivot_tol),
            dims: (0, 0, 0),
            ls: Vec::new(),
        }
    }

    /// Dimension of the last reduced system.
    pub fn reduced_dim(&self) -> usize {
        self.dims.0 + self.dims.1 + self.dims.2
    }
}

impl KktSolver for DirectSlackReducedSolver {
    fn factor(&mut self, kkt: &KktMatrix) -> Result<Inertia, LinalgError> {
        let sys = KktSystem {
            n: kkt.n,
            n_g: kkt.n_g,
            n_h: kkt.n_h,
            matrix: kkt.matrix.clone(),
            rhs: DVector::zeros(kkt.dim()),
        };
        let (red, rec) = reduce_slack_system(&sys)?;
        self.dims = (kkt.n, kkt.n_g, kkt.n_h);
        self.ls = rec.ls.clone();
        let inertia = self.inner.factor(&KktMatrix {
            n: kkt.n,
            n_g: kkt.n_g + kkt.n_h,
            n_h: 0,
            matrix: red.matrix,
        })?;
        Ok(inertia + rec.inertia())
    }

    fn solve(&mut self, rhs: &DVector<f64>) -> Result<DVector<f64>, LinalgError> {
        let (n, ng, nh) = self.dims;
        let mut r = DVector::zeros(n + ng + nh);
        for i in 0..n {
            r[i] = rhs[i];
        }
        for j in 0..ng {
            r[n + j] = rhs[n + nh + j];
        }
        for j in 0..nh {
            r[n + ng + j] = rhs[n + nh + ng + j] + rhs[n + j] / self.ls[j];
        }
        let y = self.inner.solve(&r)?;
        let rec = SlackElimination {
            ls: self.ls.clone(),
            rhs_s: (0..nh).map(|j| rhs[n + j]).collect(),
        };
        let ds = recover_slack_step(&rec, y.rows(n + ng, nh).as_slice());
        let mut out = DVector::zeros(n + 2 * nh + ng);
        for i in 0..n {
            out[i] = y[i];
        }
        for j in 0..nh {
            out[n + j] = ds[j];
            out[n + nh + ng + j] = y[n + ng + j];
        }
        for j in 0..ng {
            out[n + nh + j] = y[n + j];
        }
        Ok(out)
    }

    fn name(&self) -> String {
        "direct-reduced".into()
    }
}

/// Block-arrowhead Schur-complement solver on the 4-block system.
pub struct SchurKktSolver {
    blocks: Vec<Vec<usize>>,
    corner: Vec<usize>,
    method: LocalSchurMethod,
    workers: usize,
    pool: ThreadPool,
    pivot_tol: f64,
    scale: Vec<f64>,
    scaled: DMatrix<f64>,
    factor: Option<SchurFactor>,
}

const MAX_REFINEMENT_STEPS: usize = 10;

impl SchurKktSolver {
    pub fn new(
        layout: &ArrowheadLayout,
        n: usize,
        n_g: usize,
        n_h: usize,
        method: LocalSchurMethod,
        workers: usize,
        pivot_tol: f64,
    ) -> Result<Self, LinalgError> {
        if !layout.is_partition(n, n_g, n_h) {
            return Err(LinalgError::LayoutMismatch("layout does not partition the problem".into()));
        }
        let (blocks, corner) = layout.kkt_blocks_full(n, n_g, n_h);
        Ok(SchurKktSolver {
            blocks,
            corner,
            method,
            workers,
            pool: build_pool(workers)?,
            pivot_tol,
            scale: Vec::new(),
            scaled: DMatrix::zeros(0, 0),
            factor: None,
        })
    }

    fn solve_scaled(&self, f: &SchurFactor, r: &DVector<f64>) -> Result<DVector<f64>, LinalgError> {
        let gather = |idx: &[usize]| DVector::from_iterator(idx.len(), idx.iter().map(|&i| r[i]));
        let rb: Vec<DVector<f64>> = self.blocks.iter().map(|b| gather(b)).collect();
        let sol = f.solve(&rb, &gather(&self.corner), &self.pool)?;
        let mut out = DVector::zeros(r.len());
        for (idx, xb) in self.blocks.iter().zip(&sol.blocks) {
            for (k, &i) in idx.iter().enumerate() {
                out[i] = xb[k];
            }
        }
        for (k, &i) in self.corner.iter().enumerate() {
            out[i] = sol.global[k];
        }
        Ok(out)
    }
}

impl KktSolver for SchurKktSolver {
    fn factor(&mut self, kkt: &KktMatrix) -> Result<Inertia, LinalgError> {
        self.scale = equilibrate(&kkt.matrix);
        let m = scale_sym(&kkt.matrix, &self.scale);
        let sys = permute_to_arrowhead(&m, &DVector::zeros(m.nrows()), &self.blocks, &self.corner)?;
        self.scaled = m;
        match SchurFactor::new(&sys, self.method, &self.pool, self.pivot_tol) {
            Ok(f) => {
                let inertia = f.inertia;
                self.factor = Some(f);
                Ok(inertia)
            }
            Err(LinalgError::SingularBlock(_)) | Err(LinalgError::SingularSchur) => {
                self.factor = None;
                Ok(singular_inertia(kkt.dim()))
            }
            Err(e) => Err(e),
        }
    }

    /// Iterative refinement on the whole system makes the step independent
    /// of how accurately the local contributions were formed.
    fn solve(&mut self, rhs: &DVector<f64>) -> Result<DVector<f64>, LinalgError> {
        let f = self.factor.as_ref().ok_or(LinalgError::SingularSystem)?;
        let d = &self.scale;
        let rs = DVector::from_iterator(rhs.len(), rhs.iter().zip(d).map(|(r, d)| r * d));
        let mut x = self.solve_scaled(f, &rs)?;
        let norm_m = self.scaled.camax();
        for _ in 0..MAX_REFINEMENT_STEPS {
            let res = &rs - &self.scaled * &x;
            if res.amax() <= 1e-15 * (norm_m * x.amax() + rs.amax()) {
                break;
            }
            let dx = self.solve_scaled(f, &res)?;
            x += dx;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::SingularSystem);
        }
        Ok(DVector::from_iterator(x.len(), x.iter().zip(d).map(|(x, d)| x * d)))
    }

    fn name(&self) -> String {
        match self.method {
            LocalSchurMethod::Backsolve => format!("schur-std/{}", self.workers),
            LocalSchurMethod::AugmentedPartial => format!("schur-aug/{}", self.workers),
        }
    }
}

/// Builds the linear solver for a backend.
pub fn make_solver(backend: &Backend, problem: &dyn NlpProblem, pivot_tol: f64) -> Result<Box<dyn KktSolver>, IpmError> {
    Ok(match *backend {
        Backend::DirectFull => Box::new(DirectFullSolver::new(pivot_tol)),
        Backend::DirectSlackReduced => Box::new(DirectSlackReducedSolver::new(pivot_tol)),
        Backend::SchurArrowhead { method, workers } => {
            let layout = problem
                .layout()
                .ok_or_else(|| IpmError::InvalidProblem("Schur backend needs a block layout".into()))?;
            Box::new(SchurKktSolver::new(
                layout,
                problem.n(),
                problem.n_g(),
                problem.n_h(),
                method,
                workers,
                pivot_tol,
            )?)
        }
    })
}

// ---------------------------------------------------------------------------
// Inertia correction and curvature test

/// Regularization schedule; `last_delta_w` carries over between iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSchedule {
    pub delta_min: f64,
    pub delta_0: f64,
    pub growth: f64,
    pub decrease: f64,
    pub delta_max: f64,
    pub delta_c: f64,
    pub kappa_c: f64,
    pub last_delta_w: f64,
}

impl DeltaSchedule {
    pub fn from_options(o: &IpmOptions) -> Self {
        DeltaSchedule {
            delta_min: o.delta_min,
            delta_0: o.delta_0,
            growth: o.delta_growth,
            decrease: o.delta_decrease,
            delta_max: o.delta_max,
            delta_c: o.delta_c,
            kappa_c: o.kappa_c,
            last_delta_w: 0.0,
        }
    }

    fn first_trial(&self) -> f64 {
        if self.last_delta_w == 0.0 {
            self.delta_0
        } else {
            (self.last_delta_w * self.decrease).max(self.delta_min)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InertiaOutcome {
    pub inertia: Inertia,
    pub delta_w: f64,
    pub delta_c: f64,
    pub factorizations: usize,
}

/// Refactorizes with growing `δw` (and `δc` when zero eigenvalues appear)
/// until the negated matrix has inertia `(n + n_h, n_g + n_h, 0)`.
/// `factor_fn` reports the inertia of the assembled (paper-form) matrix.
pub fn correct_inertia<M>(
    mut assemble: impl FnMut(f64, f64) -> M,
    mut factor_fn: impl FnMut(&M) -> Result<Inertia, LinalgError>,
    n: usize,
    n_g: usize,
    n_h: usize,
    schedule: &mut DeltaSchedule,
    mu: f64,
) -> Result<InertiaOutcome, IpmError> {
    let target = Inertia::new(n + n_h, n_g + n_h, 0);
    let mut count = 0;
    let mut try_once = |dw: f64, dc: f64, count: &mut usize| -> Result<Inertia, IpmError> {
        *count += 1;
        let m = assemble(dw, dc);
        Ok(factor_fn(&m)?.negated())
    };
    let inertia = try_once(0.0, 0.0, &mut count)?;
    if inertia == target {
        return Ok(InertiaOutcome {
            inertia,
            delta_w: 0.0,
            delta_c: 0.0,
            factorizations: count,
        });
    }
    let mut dc = 0.0;
    if inertia.zero > 0 {
        dc = schedule.delta_c * mu.max(0.0).powf(schedule.kappa_c);
        let inertia = try_once(0.0, dc, &mut count)?;
        if inertia == target {
            return Ok(InertiaOutcome {
                inertia,
                delta_w: 0.0,
                delta_c: dc,
                factorizations: count,
            });
        }
    }
    let mut dw = schedule.first_trial();
    loop {
        if dw > schedule.delta_max {
            return Err(IpmError::InertiaCorrectionFailed);
        }
        let inertia = try_once(dw, dc, &mut count)?;
        if inertia == target {
            schedule.last_delta_w = dw;
            return Ok(InertiaOutcome {
                inertia,
                delta_w: dw,
                delta_c: dc,
                factorizations: count,
            });
        }
        if inertia.zero > 0 && dc == 0.0 {
            dc = schedule.delta_c * mu.max(0.0).powf(schedule.kappa_c);
        }
        dw *= schedule.growth;
    }
}

/// `dᵀ(W + δI)d ≥ κ dᵀd`.
pub fn curvature_test(w: &DMatrix<f64>, delta: f64, d: &DVector<f64>, kappa: f64) -> bool {
    let dd = d.dot(d);
    d.dot(&(w * d)) + delta * dd >= kappa * dd
}

// ---------------------------------------------------------------------------
// Step length

/// Largest `α ∈ (0, 1]` with `v + α dv ≥ (1 − τ) v` for all entries.
pub fn max_step(v: &[f64], dv: &[f64], tau: f64) -> f64 {
    let mut a: f64 = 1.0;
    for (x, d) in v.iter().zip(dv) {
        if *d < 0.0 {
            a = a.min(-tau * x / d);
        }
    }
    a
}

/// Primal (`x` bound distances and `s`) and dual (`z`, `λc`) step caps.
pub fn fraction_to_boundary(iterate: &IpmIterate, bounds: &BoundInfo, d: &Direction, tau: f64) -> (f64, f64) {
    let mut pv = Vec::new();
    let mut pd = Vec::new();
    let mut dv = Vec::new();
    let mut dd = Vec::new();
    for i in 0..iterate.x.len() {
        if bounds.has_lo[i] {
            pv.push(iterate.x[i] - bounds.lo[i]);
            pd.push(d.dx[i]);
            dv.push(iterate.z_l[i]);
            dd.push(d.dz_l[i]);
        }
        if bounds.has_hi[i] {
            pv.push(bounds.hi[i] - iterate.x[i]);
            pd.push(-d.dx[i]);
            dv.push(iterate.z_u[i]);
            dd.push(d.dz_u[i]);
        }
    }
    pv.extend_from_slice(&iterate.s);
    pd.extend_from_slice(&d.ds);
    dv.extend(iterate.lam_h.iter().map(|v| -v));
    dd.extend(d.dlam_h.iter().map(|v| -v));
    (max_step(&pv, &pd, tau), max_step(&dv, &dd, tau))
}

// ---------------------------------------------------------------------------
// Filter line search

#[derive(Debug, Clone, PartialEq)]
pub struct Filter {
    entries: Vec<(f64, f64)>,
    pub theta_max: f64,
}

impl Filter {
    pub fn new(theta_max: f64) -> Self {
        Filter {
            entries: Vec::new(),
            theta_max,
        }
    }

    pub fn entries(&self) -> &[(f64, f64)] {
        &self.entries
    }

    pub fn is_acceptable(&self, theta: f64, phi: f64) -> bool {
        theta <= self.theta_max && !self.entries.iter().any(|&(t, p)| theta >= t && phi >= p)
    }

    /// Adds an entry, dropping the entries it dominates.
    pub fn add(&mut self, theta: f64, phi: f64) {
        if self.entries.iter().any(|&(t, p)| t <= theta && p <= phi) {
            return;
        }
        self.entries.retain(|&(t, p)| !(t >= theta && p >= phi));
        self.entries.push((theta, phi));
    }

    pub fn reset(&mut self) {
        self.entries.clear();
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchParams {
    pub gamma_theta: f64,
    pub gamma_phi: f64,
    pub eta_phi: f64,
    pub s_theta: f64,
    pub s_phi: f64,
    pub delta: f64,
    pub gamma_alpha: f64,
    pub theta_min: f64,
    pub max_backtracks: usize,
}

impl LineSearchParams {
    pub fn new(theta_min: f64, max_backtracks: usize) -> Self {
        LineSearchParams {
            gamma_theta: 1e-5,
            gamma_phi: 1e-5,
            eta_phi: 1e-4,
            s_theta: 1.1,
            s_phi: 2.3,
            delta: 1.0,
            gamma_alpha: 0.05,
            theta_min,
            max_backtracks,
        }
    }
}

/// Constraint violation θ and barrier objective φ of a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LsPoint {
    pub theta: f64,
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LineSearchOutcome<T> {
    Accepted {
        alpha: f64,
        trials: usize,
        point: LsPoint,
        filter_augmented: bool,
        trial: T,
    },
    RestorationNeeded {
        trials: usize,
    },
}

/// Backtracking filter line search over `α = α_max 2^{-i}`. `trial(α)`
/// evaluates the trial point; `None` marks an evaluation failure, which is
/// treated as a rejection.
pub fn filter_line_search<T>(
    current: LsPoint,
    dphi: f64,
    alpha_max: f64,
    filter: &mut Filter,
    params: &LineSearchParams,
    mut trial: impl FnMut(f64) -> Option<(LsPoint, T)>,
) -> LineSearchOutcome<T> {
    let (theta, phi) = (current.theta, current.phi);
    let p = params;
    let alpha_min = p.gamma_alpha
        * if dphi < 0.0 {
            let mut a = p.gamma_theta.min(p.gamma_phi * theta / -dphi);
            if theta <= p.theta_min {
                a = a.min(p.delta * theta.powf(p.s_theta) / (-dphi).powf(p.s_phi));
            }
            a
        } else {
            p.gamma_theta
        };
    let mut alpha = alpha_max;
    let mut trials = 0;
    for _ in 0..=p.max_backtracks {
        if alpha < alpha_min && trials > 0 {
            break;
        }
        trials += 1;
        if let Some((pt, t)) = trial(alpha) {
            if pt.theta.is_finite() && pt.phi.is_finite() && filter.is_acceptable(pt.theta, pt.phi) {
                let switching = dphi < 0.0 && alpha * (-dphi).powf(p.s_phi) > p.delta * theta.powf(p.s_theta);
                if switching && theta <= p.theta_min {
                    if pt.phi <= phi + p.eta_phi * alpha * dphi {
                        return LineSearchOutcome::Accepted {
                            alpha,
                            trials,
                            point: pt,
                            filter_augmented: false,
                            trial: t,
                        };
                    }
                } else if pt.theta <= (1.0 - p.gamma_theta) * theta || pt.phi <= phi - p.gamma_phi * theta {
                    filter.add((1.0 - p.gamma_theta) * theta, phi - p.gamma_phi * theta);
                    return LineSearchOutcome::Accepted {
                        alpha,
                        trials,
                        point: pt,
                        filter_augmented: true,
                        trial: t,
                    };
                }
            }
        }
        alpha *= 0.5;
    }
    LineSearchOutcome::RestorationNeeded { trials }
}

// ---------------------------------------------------------------------------
// Barrier updates

/// `μ⁺ = max(ε/10, min(κ_μ μ, μ^θ_μ))`.
pub fn update_barrier_monotone(mu: f64, tol: f64, kappa_mu: f64, theta_mu: f64) -> f64 {
    (tol / 10.0).max((kappa_mu * mu).min(mu.powf(theta_mu)))
}

/// Cubed ratio of affine-step to current complementarity, capped at
/// `sigma_max`.
pub fn mehrotra_sigma(comp: f64, comp_affine: f64, sigma_max: f64) -> f64 {
    if !(comp > 0.0) {
        return 1.0f64.min(sigma_max);
    }
    let ratio = (comp_affine / comp).max(0.0);
    ratio.powi(3).min(sigma_max)
}

/// Golden-section minimization of `q(σ) = max(probe(σ))` over
/// `[σ_min, σ_max]`: both endpoints plus twelve interior evaluations.
/// Returns the chosen σ and the number of probe calls.
pub fn quality_function_sigma(
    mut probe: impl FnMut(f64) -> (f64, f64, f64),
    sigma_min: f64,
    sigma_max: f64,
) -> (f64, usize) {
    let mut calls = 0;
    let mut q = |s: f64| {
        calls += 1;
        let (a, b, c) = probe(s);
        a.max(b).max(c)
    };
    let gr = (5f64.sqrt() - 1.0) / 2.0;
    let q_lo = q(sigma_min);
    let q_hi = q(sigma_max);
    let (mut a, mut b) = (sigma_min, sigma_max);
    let mut x1 = b - gr * (b - a);
    let mut x2 = a + gr * (b - a);
    let mut f1 = q(x1);
    let mut f2 = q(x2);
    let mut best_interior = f1.min(f2);
    for _ in 0..10 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - gr * (b - a);
            f1 = q(x1);
            best_interior = best_interior.min(f1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + gr * (b - a);
            f2 = q(x2);
            best_interior = best_interior.min(f2);
        }
    }
    let sigma = if q_lo < best_interior && q_lo <= q_hi {
        sigma_min
    } else if q_hi < best_interior {
        sigma_max
    } else {
        0.5 * (a + b)
    };
    (sigma, calls)
}

// ---------------------------------------------------------------------------
// Warm start

/// Slot correspondence from a previous problem into a new one; `None`
/// entries are initialized by default.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStartMap {
    pub x: Vec<Option<usize>>,
    pub g: Vec<Option<usize>>,
    pub h: Vec<Option<usize>>,
}

impl WarmStartMap {
    pub fn identity(n: usize, n_g: usize, n_h: usize) -> Self {
        WarmStartMap {
            x: (0..n).map(Some).collect(),
            g: (0..n_g).map(Some).collect(),
            h: (0..n_h).map(Some).collect(),
        }
    }
}

/// Builds a starting point from a previous solution. The returned `mu` is
/// used as the solver's barrier parameter.
pub fn warm_start(
    problem: &dyn NlpProblem,
    previous: &IpmIterate,
    map: Option<&WarmStartMap>,
    mu_ws: f64,
    init_duals: bool,
) -> Result<IpmIterate, IpmError> {
    let (n, ng, nh) = (problem.n(), problem.n_g(), problem.n_h());
    let ident;
    let map = match map {
        Some(m) => m,
        None => {
            if previous.x.len() != n || previous.lam_g.len() != ng || previous.lam_h.len() != nh {
                return Err(IpmError::MappingError("dimensions differ and no mapping given".into()));
            }
            ident = WarmStartMap::identity(n, ng, nh);
            &ident
        }
    };
    if map.x.len() != n || map.g.len() != ng || map.h.len() != nh {
        return Err(IpmError::MappingError("mapping length does not match the problem".into()));
    }
    let check = |slots: &[Option<usize>], len: usize, what: &str| {
        if slots.iter().flatten().any(|&i| i >= len) {
            Err(IpmError::MappingError(format!("{what} slot out of range")))
        } else {
            Ok(())
        }
    };
    check(&map.x, previous.x.len(), "x")?;
    check(&map.g, previous.lam_g.len(), "g")?;
    check(&map.h, previous.s.len(), "h")?;
    let (lo, hi) = problem.bounds();
    let b = BoundInfo::new(lo, hi)?;
    let mut x0 = problem.initial_point();
    b.push_interior(&mut x0, 1e-2, 1e-2);
    let mut x = x0.clone();
    for i in 0..n {
        if let Some(j) = map.x[i] {
            let v = previous.x[j];
            x[i] = v;
            if b.fixed[i] {
                x[i] = b.lo[i];
                continue;
            }
            let range = b.hi[i] - b.lo[i];
            let p = if range.is_finite() { (1e-2 * range).min(1e-2) } else { 1e-2 };
            if b.has_lo[i] && v <= b.lo[i] {
                x[i] = b.lo[i] + p;
            }
            if b.has_hi[i] && v >= b.hi[i] {
                x[i] = b.hi[i] - p;
            }
        }
    }
    let c: Vec<f64> = problem.ineq_constraints(&x)?.into_iter().map(|v| -v).collect();
    let mut s: Vec<f64> = c.iter().map(|v| v.max(1e-2)).collect();
    let mut lam_h: Vec<f64> = s.iter().map(|v| -(mu_ws / v).clamp(1e-6, 1e6)).collect();
    let mut lam_g = vec![0.0; ng];
    let mut z_l = vec![0.0; n];
    let mut z_u = vec![0.0; n];
    for i in 0..n {
        if b.has_lo[i] {
            z_l[i] = (mu_ws / (x[i] - b.lo[i])).clamp(1e-6, 1e6);
        }
        if b.has_hi[i] {
            z_u[i] = (mu_ws / (b.hi[i] - x[i])).clamp(1e-6, 1e6);
        }
    }
    for j in 0..nh {
        if let Some(k) = map.h[j] {
            if previous.s[k] > 0.0 {
                s[j] = previous.s[k];
            }
            if init_duals && previous.lam_h[k] < 0.0 {
                lam_h[j] = previous.lam_h[k];
            }
        }
    }
    if init_duals {
        for j in 0..ng {
            if let Some(k) = map.g[j] {
                lam_g[j] = previous.lam_g[k];
            }
        }
        for i in 0..n {
            if let Some(k) = map.x[i] {
                if b.has_lo[i] && previous.z_l[k] > 0.0 {
                    z_l[i] = previous.z_l[k];
                }
                if b.has_hi[i] && previous.z_u[k] > 0.0 {
                    z_u[i] = previous.z_u[k];
                }
            }
        }
    }
    Ok(IpmIterate {
        x,
        s,
        lam_g,
        lam_h,
        z_l,
        z_u,
        mu: mu_ws,
    })
}

// ---------------------------------------------------------------------------
// Driver

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IpmStatus {
    Optimal,
    Acceptable,
    MaxIter,
    RestorationFailure,
    StepFailure,
}

impl IpmStatus {
    pub fn is_success(self) -> bool {
        matches!(self, IpmStatus::Optimal | IpmStatus::Acceptable)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            IpmStatus::Optimal => "optimal",
            IpmStatus::Acceptable => "acceptable",
            IpmStatus::MaxIter => "max_iter",
            IpmStatus::RestorationFailure => "restoration_failure",
            IpmStatus::StepFailure => "step_failure",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub obj: f64,
    pub inf_pr: f64,
    pub inf_du: f64,
    pub mu: f64,
    pub alpha: f64,
    pub backtracks: usize,
    pub delta_w: f64,
}

pub const ITERATION_CSV_HEADER: &str = "iter,obj,inf_pr,inf_du,mu,alpha,backtracks,delta_w";

pub fn iteration_csv(log: &[IterationRecord]) -> String {
    let mut s = String::from(ITERATION_CSV_HEADER);
    s.push('\n');
    for r in log {
        s.push_str(&format!(
            "{},{:.12e},{:.6e},{:.6e},{:.6e},{:.6e},{},{:.6e}\n",
            r.iter, r.obj, r.inf_pr, r.inf_du, r.mu, r.alpha, r.backtracks, r.delta_w
        ));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SolveStats {
    pub total_s: f64,
    /// Assembly, factorization and backsolves of KKT systems.
    pub kkt_s: f64,
    /// Factorizations only (for the Schur backend: local contributions and
    /// the Schur complement).
    pub factor_s: f64,
    pub solve_s: f64,
    pub eval_s: f64,
    pub factorizations: usize,
    pub restorations: usize,
}

#[derive(Debug, Clone)]
pub struct IpmResult {
    pub status: IpmStatus,
    /// Final point in problem units.
    pub iterate: IpmIterate,
    pub objective: f64,
    pub iterations: usize,
    /// Scaled optimality error `E_0` at the final point.
    pub error: f64,
    pub log: Vec<IterationRecord>,
    pub stats: SolveStats,
    pub scaling: ScalingFactors,
    pub message: Option<String>,
}

pub fn solve(problem: &dyn NlpProblem, options: &IpmOptions, backend: &Backend) -> IpmResult {
    solve_from(problem, options, backend, None)
}

/// Solves from an optional starting point given in problem units.
pub fn solve_from(
    problem: &dyn NlpProblem,
    options: &IpmOptions,
    backend: &Backend,
    start: Option<&IpmIterate>,
) -> IpmResult {
    match make_solver(backend, problem, options.pivot_tol) {
        Ok(mut s) => solve_with_solver(problem, options, s.as_mut(), start),
        Err(e) => failed_result(problem, e.to_string()),
    }
}

/// Solves with a caller-supplied linear solver.
pub fn solve_with_solver(
    problem: &dyn NlpProblem,
    options: &IpmOptions,
    solver: &mut dyn KktSolver,
    start: Option<&IpmIterate>,
) -> IpmResult {
    let mut hook = |_: &[f64]| false;
    Driver::run(problem, options, solver, start, &mut hook, 0)
}

fn failed_result(problem: &dyn NlpProblem, msg: String) -> IpmResult {
    let (n, ng, nh) = (problem.n(), problem.n_g(), problem.n_h());
    IpmResult {
        status: IpmStatus::StepFailure,
        iterate: IpmIterate {
            x: problem.initial_point(),
            s: vec![0.0; nh],
            lam_g: vec![0.0; ng],
            lam_h: vec![0.0; nh],
            z_l: vec![0.0; n],
            z_u: vec![0.0; n],
            mu: 0.0,
        },
        objective: f64::NAN,
        iterations: 0,
        error: f64::INFINITY,
        log: Vec::new(),
        stats: SolveStats::default(),
        scaling: ScalingFactors::identity(ng, nh),
        message: Some(msg),
    }
}

struct Driver<'a> {
    p: ScaledNlp<'a>,
    o: IpmOptions,
    b: BoundInfo,
    n: usize,
    ng: usize,
    nh: usize,
    stats: SolveStats,
}

enum StepOutcome {
    Continue,
    Stop(IpmStatus, Option<String>),
}

impl<'a> Driver<'a> {
    fn run(
        problem: &'a dyn NlpProblem,
        options: &IpmOptions,
        solver: &mut dyn KktSolver,
        start: Option<&IpmIterate>,
        hook: &mut dyn FnMut(&[f64]) -> bool,
        depth: usize,
    ) -> IpmResult {
        let t0 = Instant::now();
        if let Err(e) = options.validate() {
            return failed_result(problem, e.to_string());
        }
        let (lo, hi) = problem.bounds();
        let b = match BoundInfo::new(lo, hi) {
            Ok(b) => b,
            Err(e) => return failed_result(problem, e.to_string()),
        };
        let mut x0 = match start {
            Some(s) => s.x.clone(),
            None => problem.initial_point(),
        };
        if start.is_none() {
            b.push_interior(&mut x0, options.bound_push, options.bound_frac);
        } else {
            for i in 0..x0.len() {
                if b.fixed[i] {
                    x0[i] = b.lo[i];
                }
            }
        }
        let scaling = match compute_scaling(problem, &x0, options.g_max) {
            Ok(s) => s,
            Err(e) => return failed_result(problem, e.to_string()),
        };
        let mut d = Driver {
            p: ScaledNlp::new(problem, scaling),
            o: options.clone(),
            b,
            n: problem.n(),
            ng: problem.n_g(),
            nh: problem.n_h(),
            stats: SolveStats::default(),
        };
        let mut res = d.main_loop(solver, x0, start, hook, depth);
        d.stats.total_s = t0.elapsed().as_secs_f64();
        res.stats = d.stats;
        res
    }

    fn eval(&mut self, x: &[f64]) -> Result<Evals, EvalError> {
        let t = Instant::now();
        let r = eval_all(&self.p, x);
        self.stats.eval_s += t.elapsed().as_secs_f64();
        r
    }

    fn theta(&self, g: &[f64], c: &[f64], s: &[f64]) -> f64 {
        one_norm(g) + c.iter().zip(s).map(|(c, s)| (c - s).abs()).sum::<f64>()
    }

    fn phi(&self, f: f64, x: &[f64], s: &[f64], mu: f64) -> f64 {
        let mut v = f;
        for i in 0..self.n {
            if self.b.has_lo[i] {
                v -= mu * (x[i] - self.b.lo[i]).ln();
            }
            if self.b.has_hi[i] {
                v -= mu * (self.b.hi[i] - x[i]).ln();
            }
        }
        v - mu * s.iter().map(|v| v.ln()).sum::<f64>()
    }

    fn dphi(&self, ev: &Evals, it: &IpmIterate, d: &Direction, mu: f64) -> f64 {
        let mut v = 0.0;
        for i in 0..self.n {
            if self.b.fixed[i] {
                continue;
            }
            let mut gi = ev.grad[i];
            if self.b.has_lo[i] {
                gi -= mu / (it.x[i] - self.b.lo[i]);
            }
            if self.b.has_hi[i] {
                gi += mu / (self.b.hi[i] - it.x[i]);
            }
            v += gi * d.dx[i];
        }
        v - it.s.iter().zip(&d.ds).map(|(s, ds)| mu * ds / s).sum::<f64>()
    }

    fn complementarity(&self, it: &IpmIterate, d: Option<(&Direction, f64, f64)>) -> (f64, usize) {
        let mut total = 0.0;
        let mut count = 0;
        let step = |v: f64, dv: f64, a: f64| v + a * dv;
        for i in 0..self.n {
            if self.b.has_lo[i] {
                let (dist, z) = match d {
                    Some((d, ap, ad)) => (step(it.x[i] - self.b.lo[i], d.dx[i], ap), step(it.z_l[i], d.dz_l[i], ad)),
                    None => (it.x[i] - self.b.lo[i], it.z_l[i]),
                };
                total += dist * z;
                count += 1;
            }
            if self.b.has_hi[i] {
                let (dist, z) = match d {
                    Some((d, ap, ad)) => (step(self.b.hi[i] - it.x[i], -d.dx[i], ap), step(it.z_u[i], d.dz_u[i], ad)),
                    None => (self.b.hi[i] - it.x[i], it.z_u[i]),
                };
                total += dist * z;
                count += 1;
            }
        }
        for j in 0..self.nh {
            let (s, l) = match d {
                Some((d, ap, ad)) => (step(it.s[j], d.ds[j], ap), -step(it.lam_h[j], d.dlam_h[j], ad)),
                None => (it.s[j], -it.lam_h[j]),
            };
            total += s * l;
            count += 1;
        }
        (total, count)
    }

    /// Default duals for a primal point: `z = μ/d`, `λc = μ/s` clipped, and
    /// least-squares equality multipliers.
    fn init_duals(&mut self, it: &mut IpmIterate, ev: &Evals, solver_tol: f64) {
        let mu = it.mu;
        for i in 0..self.n {
            it.z_l[i] = if self.b.has_lo[i] {
                (mu / (it.x[i] - self.b.lo[i])).clamp(1e-6, 1e6)
            } else {
                0.0
            };
            it.z_u[i] = if self.b.has_hi[i] {
                (mu / (self.b.hi[i] - it.x[i])).clamp(1e-6, 1e6)
            } else {
                0.0
            };
        }
        for j in 0..self.nh {
            it.lam_h[j] = -(mu / it.s[j]).clamp(1e-6, 1e6);
        }
        it.lam_g = self.ls_multipliers(it, ev, solver_tol);
    }

    fn ls_multipliers(&mut self, it: &IpmIterate, ev: &Evals, pivot_tol: f64) -> Vec<f64> {
        let (n, ng) = (self.n, self.ng);
        if ng == 0 {
            return Vec::new();
        }
        let lc: Vec<f64> = it.lam_h.iter().map(|v| -v).collect();
        let jt_lc = ev.jc.tr_mul(&DVector::from_column_slice(&lc));
        let mut m = DMatrix::zeros(n + ng, n + ng);
        let mut rhs = DVector::zeros(n + ng);
        for i in 0..n {
            m[(i, i)] = 1.0;
            if self.b.fixed[i] {
                continue;
            }
            rhs[i] = ev.grad[i] - jt_lc[i] - it.z_l[i] + it.z_u[i];
            for r in 0..ng {
                m[(n + r, i)] = ev.jg[(r, i)];
                m[(i, n + r)] = ev.jg[(r, i)];
            }
        }
        for r in 0..ng {
            m[(n + r, n + r)] = -1e-8;
        }
        let t = Instant::now();
        let d = equilibrate(&m);
        let sol = ldlt_factor(&scale_sym(&m, &d), pivot_tol).and_then(|f| {
            f.solve(&DVector::from_fn(n + ng, |i, _| rhs[i] * d[i]))
                .map(|y| DVector::from_fn(n + ng, |i, _| y[i] * d[i]))
        });
        self.stats.factor_s += t.elapsed().as_secs_f64();
        match sol {
            Ok(y) => {
                let lam: Vec<f64> = (0..ng).map(|r| y[n + r]).collect();
                if inf_norm(&lam) > 1e3 || lam.iter().any(|v| !v.is_finite()) {
                    vec![0.0; ng]
                } else {
                    lam
                }
            }
            Err(_) => vec![0.0; ng],
        }
    }

    fn unscaled_inf_pr(&self, ev: &Evals, s: &[f64]) -> f64 {
        let sc = &self.p.scaling;
        let g = ev.g.iter().zip(&sc.s_g).map(|(v, k)| (v / k).abs()).fold(0.0, f64::max);
        let h = ev
            .c
            .iter()
            .zip(s)
            .zip(&sc.s_h)
            .map(|((c, s), k)| ((c - s) / k).abs())
            .fold(0.0, f64::max);
        g.max(h)
    }

    fn hessian_block(&mut self, it: &IpmIterate, lbfgs: &Option<LbfgsHistory>) -> Result<DMatrix<f64>, EvalError> {
        match lbfgs {
            Some(h) => Ok(h.dense(self.n)),
            None => {
                let t = Instant::now();
                let w = triplets_to_dense(self.n, self.n, &self.p.hessian(&it.x, 1.0, &it.lam_g, &it.lam_h)?);
                self.stats.eval_s += t.elapsed().as_secs_f64();
                Ok(w)
            }
        }
    }

    fn factorize(
        &mut self,
        solver: &mut dyn KktSolver,
        w: &DMatrix<f64>,
        it: &IpmIterate,
        ev: &Evals,
        schedule: &mut DeltaSchedule,
        delta_w_override: Option<f64>,
    ) -> Result<InertiaOutcome, IpmError> {
        let t = Instant::now();
        let b = self.b.clone();
        let mut count = 0;
        let out = match delta_w_override {
            Some(dw) => {
                let k = assemble_matrix(w, it, ev, &b, dw, 0.0);
                count += 1;
                let mut inertia = solver.factor(&k)?.negated();
                let mut dc = 0.0;
                if inertia.zero > 0 {
                    dc = schedule.delta_c * it.mu.powf(schedule.kappa_c);
                    let k = assemble_matrix(w, it, ev, &b, dw, dc);
                    count += 1;
                    inertia = solver.factor(&k)?.negated();
                }
                Ok(InertiaOutcome {
                    inertia,
                    delta_w: dw,
                    delta_c: dc,
                    factorizations: count,
                })
            }
            None => {
                let (n, ng, nh) = (self.n, self.ng, self.nh);
                correct_inertia(
                    |dw, dc| assemble_matrix(w, it, ev, &b, dw, dc),
                    |k| {
                        count += 1;
                        solver.factor(k)
                    },
                    n,
                    ng,
                    nh,
                    schedule,
                    it.mu,
                )
            }
        };
        let dt = t.elapsed().as_secs_f64();
        self.stats.factor_s += dt;
        self.stats.kkt_s += dt;
        self.stats.factorizations += count;
        out
    }

    fn direction(
        &mut self,
        solver: &mut dyn KktSolver,
        it: &IpmIterate,
        ev: &Evals,
        mu: f64,
    ) -> Result<(Direction, KktResiduals), IpmError> {
        let t = Instant::now();
        let r = residuals_from(ev, it, &self.b, mu);
        let rhs = assemble_rhs(&r, it, &self.b);
        let sol = solver.solve(&rhs)?;
        let dt = t.elapsed().as_secs_f64();
        self.stats.solve_s += dt;
        self.stats.kkt_s += dt;
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(IpmError::StepComputationFailed(LinalgError::SingularSystem));
        }
        Ok((direction_from(&sol, &r, it, &self.b), r))
    }

    fn tau(&self, mu: f64) -> f64 {
        self.o.tau_min.max(1.0 - mu)
    }

    fn choose_adaptive_mu(
        &mut self,
        solver: &mut dyn KktSolver,
        it: &IpmIterate,
        ev: &Evals,
    ) -> Result<f64, IpmError> {
        let floor = self.o.tol / 10.0;
        let (comp, count) = self.complementarity(it, None);
        if count == 0 {
            return Ok(floor);
        }
        let avg = comp / count as f64;
        let (aff, r0) = self.direction(solver, it, ev, 0.0)?;
        let tau = self.tau(it.mu);
        let mu = match self.o.barrier {
            BarrierStrategy::Mehrotra => {
                let (ap, ad) = fraction_to_boundary(it, &self.b, &aff, tau);
                let (comp_aff, _) = self.complementarity(it, Some((&aff, ap, ad)));
                mehrotra_sigma(comp, comp_aff, self.o.sigma_max) * avg
            }
            _ => {
                let (cen_full, _) = self.direction(solver, it, ev, avg)?;
                let cen = cen_full.minus(&aff);
                let (s1, s2) = dual_scaling(it, self.o.s_max);
                let du = inf_norm(&r0.la) / s1;
                let pr = inf_norm(&r0.lc).max(inf_norm(&r0.ld));
                let b = self.b.clone();
                let (sigma, _) = quality_function_sigma(
                    |sigma| {
                        let d = aff.plus(sigma, &cen);
                        let (ap, ad) = fraction_to_boundary(it, &b, &d, tau);
                        let (c, _) = self.complementarity(it, Some((&d, ap, ad)));
                        ((1.0 - ad) * du, (1.0 - ap) * pr, c / count as f64 / s2)
                    },
                    self.o.sigma_min,
                    self.o.sigma_max,
                );
                sigma * avg
            }
        };
        Ok(mu.max(floor).min(1e5))
    }

    #[allow(clippy::too_many_arguments)]
    fn main_loop(
        &mut self,
        solver: &mut dyn KktSolver,
        x0: Vec<f64>,
        start: Option<&IpmIterate>,
        hook: &mut dyn FnMut(&[f64]) -> bool,
        depth: usize,
    ) -> IpmResult {
        let (n, ng, nh) = (self.n, self.ng, self.nh);
        let mut log = Vec::new();
        let mut ev = match self.eval(&x0) {
            Ok(e) => e,
            Err(e) => return self.finish(None, IpmStatus::StepFailure, 0, log, Some(e.to_string())),
        };
        let mut it = match start {
            Some(s) => {
                let mut sc = to_scaled(s, &self.p.scaling);
                sc.x = x0.clone();
                for j in 0..nh {
                    if !(sc.s[j] > 0.0) {
                        sc.s[j] = ev.c[j].max(1e-2);
                    }
                    if !(sc.lam_h[j] < 0.0) {
                        sc.lam_h[j] = -(sc.mu / sc.s[j]).clamp(1e-6, 1e6);
                    }
                }
                for i in 0..n {
                    if !self.b.has_lo[i] {
                        sc.z_l[i] = 0.0;
                    } else if !(sc.z_l[i] > 0.0) {
                        sc.z_l[i] = (sc.mu / (sc.x[i] - self.b.lo[i])).clamp(1e-6, 1e6);
                    }
                    if !self.b.has_hi[i] {
                        sc.z_u[i] = 0.0;
                    } else if !(sc.z_u[i] > 0.0) {
                        sc.z_u[i] = (sc.mu / (self.b.hi[i] - sc.x[i])).clamp(1e-6, 1e6);
                    }
                }
                sc
            }
            None => {
                let mut it = IpmIterate {
                    x: x0.clone(),
                    s: ev.c.iter().map(|v| v.max(1e-2)).collect(),
                    lam_g: vec![0.0; ng],
                    lam_h: vec![0.0; nh],
                    z_l: vec![0.0; n],
                    z_u: vec![0.0; n],
                    mu: self.o.mu0,
                };
                let tol = self.o.pivot_tol;
                self.init_duals(&mut it, &ev, tol);
                it
            }
        };
        let theta0 = self.theta(&ev.g, &ev.c, &it.s);
        let mut filter = Filter::new(self.o.theta_max_factor * theta0.max(1.0));
        let ls_params = LineSearchParams::new(self.o.theta_min_factor * theta0.max(1.0), self.o.max_backtracks);
        let mut schedule = DeltaSchedule::from_options(&self.o);
        let mut lbfgs = match self.o.hessian {
            HessianMode::Lbfgs { history } => Some(LbfgsHistory::new(history, self.o.lbfgs_damping)),
            HessianMode::Exact => None,
        };
        if lbfgs.is_none() && !self.p.exact_hessian_available() {
            lbfgs = Some(LbfgsHistory::new(20, self.o.lbfgs_damping));
        }
        self.p.on_barrier_update(it.mu);
        let (mut last_alpha, mut last_bt, mut last_dw) = (0.0, 0, 0.0);
        let mut acceptable_count = 0;
        let mut prev_obj = f64::NAN;
        for k in 0..=self.o.max_iter {
            let r0 = residuals_from(&ev, &it, &self.b, 0.0);
            let e0 = optimality_error(&it, &r0, self.o.s_max, true);
            let obj = ev.f / self.p.scaling.s_f;
            log.push(IterationRecord {
                iter: k,
                obj,
                inf_pr: self.unscaled_inf_pr(&ev, &it.s),
                inf_du: inf_norm(&r0.la),
                mu: it.mu,
                alpha: last_alpha,
                backtracks: last_bt,
                delta_w: last_dw,
            });
            if e0 <= self.o.tol {
                return self.finish(Some((&it, &ev, e0)), IpmStatus::Optimal, k, log, None);
            }
            if lbfgs.is_some() && k > 0 {
                let inf_pr = self.unscaled_inf_pr(&ev, &it.s);
                let rel = (obj - prev_obj).abs() / obj.abs().max(1.0);
                if inf_pr <= self.o.acceptable_inf_pr && rel <= self.o.acceptable_obj_change {
                    acceptable_count += 1;
                } else {
                    acceptable_count = 0;
                }
                if acceptable_count >= self.o.acceptable_iter {
                    return self.finish(Some((&it, &ev, e0)), IpmStatus::Acceptable, k, log, None);
                }
            }
            prev_obj = obj;
            if k == self.o.max_iter {
                return self.finish(Some((&it, &ev, e0)), IpmStatus::MaxIter, k, log, None);
            }
            match self.iteration(solver, &mut it, &mut ev, &mut filter, &ls_params, &mut schedule, &mut lbfgs, hook, depth)
            {
                Ok((StepOutcome::Continue, a, bt, dw)) => {
                    last_alpha = a;
                    last_bt = bt;
                    last_dw = dw;
                }
                Ok((StepOutcome::Stop(status, msg), _, _, _)) => {
                    let r0 = residuals_from(&ev, &it, &self.b, 0.0);
                    let e0 = optimality_error(&it, &r0, self.o.s_max, true);
                    return self.finish(Some((&it, &ev, e0)), status, k + 1, log, msg);
                }
                Err(e) => {
                    let r0 = residuals_from(&ev, &it, &self.b, 0.0);
                    let e0 = optimality_error(&it, &r0, self.o.s_max, true);
                    return self.finish(Some((&it, &ev, e0)), IpmStatus::StepFailure, k, log, Some(e.to_string()));
                }
            }
        }
        unreachable!()
    }

    #[allow(clippy::too_many_arguments)]
    fn iteration(
        &mut self,
        solver: &mut dyn KktSolver,
        it: &mut IpmIterate,
        ev: &mut Evals,
        filter: &mut Filter,
        ls: &LineSearchParams,
        schedule: &mut DeltaSchedule,
        lbfgs: &mut Option<LbfgsHistory>,
        hook: &mut dyn FnMut(&[f64]) -> bool,
        depth: usize,
    ) -> Result<(StepOutcome, f64, usize, f64), IpmError> {
        let floor = self.o.tol / 10.0;
        if self.o.barrier == BarrierStrategy::Monotone {
            loop {
                let r = residuals_from(ev, it, &self.b, it.mu);
                let e_mu = optimality_error(it, &r, self.o.s_max, true);
                if e_mu > self.o.kappa_eps * it.mu || it.mu <= floor {
                    break;
                }
                it.mu = update_barrier_monotone(it.mu, self.o.tol, self.o.kappa_mu, self.o.theta_mu);
                filter.reset();
                self.p.on_barrier_update(it.mu);
                self.refresh(ev, it)?;
            }
        }
        let w = self.hessian_block(it, lbfgs)?;
        let mut fact = match self.factorize_step(solver, &w, it, ev, schedule) {
            Ok(f) => f,
            Err(IpmError::InertiaCorrectionFailed) => {
                return self.restore(it, ev, filter, lbfgs, depth).map(|o| (o, 1.0, 0, 0.0));
            }
            Err(e) => return Err(e),
        };
        if self.o.barrier != BarrierStrategy::Monotone {
            let mu = self.choose_adaptive_mu(solver, it, ev)?;
            if mu != it.mu {
                it.mu = mu;
                filter.reset();
                self.p.on_barrier_update(mu);
                if self.refresh(ev, it)? {
                    fact = match self.factorize_step(solver, &w, it, ev, schedule) {
                        Ok(f) => f,
                        Err(IpmError::InertiaCorrectionFailed) => {
                            return self.restore(it, ev, filter, lbfgs, depth).map(|o| (o, 1.0, 0, 0.0));
                        }
                        Err(e) => return Err(e),
                    };
                }
            }
        }
        let (d, _) = self.direction(solver, it, ev, it.mu)?;
        let tau = self.tau(it.mu);
        let (alpha_max, alpha_z) = fraction_to_boundary(it, &self.b, &d, tau);
        let cur = LsPoint {
            theta: self.theta(&ev.g, &ev.c, &it.s),
            phi: self.phi(ev.f, &it.x, &it.s, it.mu),
        };
        let dphi = self.dphi(ev, it, &d, it.mu);
        let tiny = (0..self.n).all(|i| d.dx[i].abs() <= 1e-14 * (1.0 + it.x[i].abs()))
            && (0..self.nh).all(|j| d.ds[j].abs() <= 1e-14 * (1.0 + it.s[j].abs()));
        let mu = it.mu;
        let b = self.b.clone();
        let p: &dyn NlpProblem = &self.p;
        let outcome = if tiny {
            LineSearchOutcome::Accepted {
                alpha: alpha_max,
                trials: 1,
                point: cur,
                filter_augmented: false,
                trial: (),
            }
        } else {
            let t = Instant::now();
            let out = filter_line_search(cur, dphi, alpha_max, filter, ls, |alpha| {
                let x: Vec<f64> = it.x.iter().zip(&d.dx).map(|(x, dx)| x + alpha * dx).collect();
                let s: Vec<f64> = it.s.iter().zip(&d.ds).map(|(s, ds)| s + alpha * ds).collect();
                let (f, g, c) = eval_values(p, &x).ok()?;
                let theta = one_norm(&g) + c.iter().zip(&s).map(|(c, s)| (c - s).abs()).sum::<f64>();
                let mut phi = f - mu * s.iter().map(|v| v.ln()).sum::<f64>();
                for i in 0..x.len() {
                    if b.has_lo[i] {
                        phi -= mu * (x[i] - b.lo[i]).ln();
                    }
                    if b.has_hi[i] {
                        phi -= mu * (b.hi[i] - x[i]).ln();
                    }
                }
                Some((LsPoint { theta, phi }, ()))
            });
            self.stats.eval_s += t.elapsed().as_secs_f64();
            out
        };
        let (alpha, trials) = match outcome {
            LineSearchOutcome::Accepted { alpha, trials, .. } => (alpha, trials),
            LineSearchOutcome::RestorationNeeded { trials } => {
                let o = self.restore(it, ev, filter, lbfgs, depth)?;
                return Ok((o, 0.0, trials, fact.delta_w));
            }
        };
        let x_old = it.x.clone();
        let grad_lag_old = self.lagrangian_gradient_with(ev, &it.lam_g, &it.lam_h, &d, alpha, alpha_z);
        for i in 0..self.n {
            it.x[i] += alpha * d.dx[i];
            it.z_l[i] += alpha_z * d.dz_l[i];
            it.z_u[i] += alpha_z * d.dz_u[i];
        }
        for j in 0..self.nh {
            it.s[j] += alpha * d.ds[j];
            it.lam_h[j] += alpha_z * d.dlam_h[j];
        }
        for j in 0..self.ng {
            it.lam_g[j] += alpha * d.dlam_g[j];
        }
        self.safeguard_duals(it);
        *ev = self.eval(&it.x)?;
        if let Some(h) = lbfgs.as_mut() {
            let s = DVector::from_iterator(self.n, it.x.iter().zip(&x_old).map(|(a, b)| a - b));
            let g_new = self.lagrangian_gradient(ev, &it.lam_g, &it.lam_h);
            let y = DVector::from_vec(g_new) - DVector::from_vec(grad_lag_old);
            h.update(&s, &y);
        }
        if depth > 0 && hook(&it.x) {
            return Ok((StepOutcome::Stop(IpmStatus::Optimal, Some("restoration target reached".into())), alpha, trials - 1, fact.delta_w));
        }
        Ok((StepOutcome::Continue, alpha, trials - 1, fact.delta_w))
    }

    fn lagrangian_gradient(&self, ev: &Evals, lam_g: &[f64], lam_h: &[f64]) -> Vec<f64> {
        let lc: Vec<f64> = lam_h.iter().map(|v| -v).collect();
        let a = ev.jg.tr_mul(&DVector::from_column_slice(lam_g));
        let b = ev.jc.tr_mul(&DVector::from_column_slice(&lc));
        (0..self.n)
            .map(|i| if self.b.fixed[i] { 0.0 } else { ev.grad[i] - a[i] - b[i] })
            .collect()
    }

    /// Lagrangian gradient at the current point with the multipliers of the
    /// accepted step, for the quasi-Newton secant pair.
    fn lagrangian_gradient_with(
        &self,
        ev: &Evals,
        lam_g: &[f64],
        lam_h: &[f64],
        d: &Direction,
        alpha: f64,
        alpha_z: f64,
    ) -> Vec<f64> {
        let lg: Vec<f64> = lam_g.iter().zip(&d.dlam_g).map(|(l, dl)| l + alpha * dl).collect();
        let lh: Vec<f64> = lam_h.iter().zip(&d.dlam_h).map(|(l, dl)| l + alpha_z * dl).collect();
        self.lagrangian_gradient(ev, &lg, &lh)
    }

    fn safeguard_duals(&self, it: &mut IpmIterate) {
        let (k, mu) = (self.o.kappa_sigma, it.mu);
        for i in 0..self.n {
            if self.b.has_lo[i] {
                let d = it.x[i] - self.b.lo[i];
                it.z_l[i] = it.z_l[i].min(k * mu / d).max(mu / (k * d));
            }
            if self.b.has_hi[i] {
                let d = self.b.hi[i] - it.x[i];
                it.z_u[i] = it.z_u[i].min(k * mu / d).max(mu / (k * d));
            }
        }
        for j in 0..self.nh {
            let l = (-it.lam_h[j]).min(k * mu / it.s[j]).max(mu / (k * it.s[j]));
            it.lam_h[j] = -l;
        }
    }

    fn factorize_step(
        &mut self,
        solver: &mut dyn KktSolver,
        w: &DMatrix<f64>,
        it: &IpmIterate,
        ev: &Evals,
        schedule: &mut DeltaSchedule,
    ) -> Result<InertiaOutcome, IpmError> {
        match self.o.inertia_mode {
            InertiaMode::InertiaDetection => self.factorize(solver, w, it, ev, schedule, None),
            InertiaMode::CurvatureTest => self.curvature_factorize(solver, w, it, ev, schedule),
        }
    }

    /// Re-evaluates after a barrier update; problems may change their
    /// smoothing with μ. Returns whether constraint data changed.
    fn refresh(&mut self, ev: &mut Evals, it: &IpmIterate) -> Result<bool, IpmError> {
        let fresh = self.eval(&it.x)?;
        let changed = fresh.c != ev.c || fresh.jc != ev.jc || fresh.f != ev.f;
        *ev = fresh;
        Ok(changed)
    }

    fn curvature_factorize(
        &mut self,
        solver: &mut dyn KktSolver,
        w: &DMatrix<f64>,
        it: &IpmIterate,
        ev: &Evals,
        schedule: &mut DeltaSchedule,
    ) -> Result<InertiaOutcome, IpmError> {
        let sig = sigma_x(it, &self.b);
        let sig_s: Vec<f64> = it.lam_h.iter().zip(&it.s).map(|(l, s)| -l / s).collect();
        let mut wfull = DMatrix::zeros(self.n + self.nh, self.n + self.nh);
        wfull.view_mut((0, 0), (self.n, self.n)).copy_from(w);
        for i in 0..self.n {
            wfull[(i, i)] += sig[i];
        }
        for j in 0..self.nh {
            wfull[(self.n + j, self.n + j)] = sig_s[j];
        }
        let mut dw = 0.0;
        loop {
            if dw > schedule.delta_max {
                return Err(IpmError::InertiaCorrectionFailed);
            }
            let out = self.factorize(solver, w, it, ev, schedule, Some(dw))?;
            if out.inertia.zero == 0 {
                if let Ok((d, _)) = self.direction(solver, it, ev, it.mu) {
                    let mut v = DVector::zeros(self.n + self.nh);
                    for i in 0..self.n {
                        if !self.b.fixed[i] {
                            v[i] = d.dx[i];
                        }
                    }
                    for j in 0..self.nh {
                        v[self.n + j] = d.ds[j];
                    }
                    if curvature_test(&wfull, dw, &v, self.o.kappa_curv) {
                        if dw > 0.0 {
                            schedule.last_delta_w = dw;
                        }
                        return Ok(out);
                    }
                }
            }
            dw = if dw == 0.0 { schedule.first_trial() } else { dw * schedule.growth };
        }
    }

    /// Feasibility restoration: minimizes the constraint violation from the
    /// current point until the original filter accepts the result.
    fn restore(
        &mut self,
        it: &mut IpmIterate,
        ev: &mut Evals,
        filter: &mut Filter,
        lbfgs: &mut Option<LbfgsHistory>,
        depth: usize,
    ) -> Result<StepOutcome, IpmError> {
        if !self.o.restoration || depth > 0 {
            return Ok(StepOutcome::Stop(
                IpmStatus::RestorationFailure,
                Some("line search failed".into()),
            ));
        }
        self.stats.restorations += 1;
        let mu = it.mu;
        let theta_r = self.theta(&ev.g, &ev.c, &it.s);
        let phi_r = self.phi(ev.f, &it.x, &it.s, mu);
        filter.add(theta_r, phi_r);
        let resto = RestorationNlp::new(&self.p, &it.x, self.o.rho_resto, self.o.zeta_resto);
        let c_inf = inf_norm(&ev.g).max(inf_norm(&ev.c.iter().map(|c| c.min(0.0)).collect::<Vec<_>>()));
        let mut ropts = self.o.clone();
        ropts.mu0 = mu.max(c_inf).min(1e3);
        ropts.max_iter = self.o.max_resto_iter;
        ropts.barrier = BarrierStrategy::Monotone;
        ropts.tol = self.o.tol.max(1e-9);
        let filt = filter.clone();
        let b = self.b.clone();
        let n = self.n;
        let p: &dyn NlpProblem = &self.p;
        let outer_point = |x: &[f64]| -> Option<(Vec<f64>, f64, f64)> {
            let (f, g, c) = eval_values(p, x).ok()?;
            let s: Vec<f64> = c.iter().map(|v| v.max(mu)).collect();
            let theta = one_norm(&g) + c.iter().zip(&s).map(|(c, s)| (c - s).abs()).sum::<f64>();
            let mut phi = f - mu * s.iter().map(|v| v.ln()).sum::<f64>();
            for i in 0..n {
                if b.has_lo[i] {
                    phi -= mu * (x[i] - b.lo[i]).ln();
                }
                if b.has_hi[i] {
                    phi -= mu * (b.hi[i] - x[i]).ln();
                }
            }
            Some((s, theta, phi))
        };
        let mut hook = |xr: &[f64]| -> bool {
            match outer_point(&xr[..n]) {
                Some((_, theta, phi)) => theta <= 0.9 * theta_r && filt.is_acceptable(theta, phi),
                None => false,
            }
        };
        let mut rsolver = DirectFullSolver::new(self.o.pivot_tol);
        let res = Driver::run(&resto, &ropts, &mut rsolver, None, &mut hook, depth + 1);
        let xr: Vec<f64> = res.iterate.x[..n].to_vec();
        let accepted = res.status == IpmStatus::Optimal
            && outer_point(&xr).is_some_and(|(_, theta, phi)| theta <= 0.9 * theta_r && filter.is_acceptable(theta, phi));
        self.stats.factorizations += res.stats.factorizations;
        self.stats.factor_s += res.stats.factor_s;
        self.stats.solve_s += res.stats.solve_s;
        self.stats.kkt_s += res.stats.kkt_s;
        if !accepted {
            return Ok(StepOutcome::Stop(
                IpmStatus::RestorationFailure,
                Some(format!("restoration ended with status {}", res.status.as_str())),
            ));
        }
        let (s, _, _) = outer_point(&xr).expect("checked above");
        let mut x = xr;
        for i in 0..n {
            if b.fixed[i] {
                x[i] = b.lo[i];
            }
        }
        it.x = x;
        it.s = s;
        *ev = self.eval(&it.x)?;
        let tol = self.o.pivot_tol;
        let mut fresh = it.clone();
        self.init_duals(&mut fresh, ev, tol);
        *it = fresh;
        if let Some(h) = lbfgs.as_mut() {
            h.clear();
        }
        Ok(StepOutcome::Continue)
    }

    fn finish(
        &self,
        state: Option<(&IpmIterate, &Evals, f64)>,
        status: IpmStatus,
        iterations: usize,
        log: Vec<IterationRecord>,
        message: Option<String>,
    ) -> IpmResult {
        let sc = self.p.scaling.clone();
        match state {
            Some((it, ev, e0)) => IpmResult {
                status,
                iterate: to_unscaled(it, &sc),
                objective: ev.f / sc.s_f,
                iterations,
                error: e0,
                log,
                stats: self.stats,
                scaling: sc,
                message,
            },
            None => {
                let mut r = failed_result(self.p.inner, message.unwrap_or_default());
                r.status = status;
                r.log = log;
                r
            }
        }
    }
}

/// Minimizes `ρ Σ(p + n + t) + ζ/2 ‖D_R (x − x_R)‖²` subject to
/// `g(x) − p + n = 0`, `h(x) − t ≤ 0`, `p, n, t ≥ 0`.
pub struct RestorationNlp<'a> {
    inner: &'a dyn NlpProblem,
    x_r: Vec<f64>,
    d_r: Vec<f64>,
    rho: f64,
    zeta: f64,
}

impl<'a> RestorationNlp<'a> {
    pub fn new(inner: &'a dyn NlpProblem, x_r: &[f64], rho: f64, zeta: f64) -> Self {
        RestorationNlp {
            inner,
            x_r: x_r.to_vec(),
            d_r: x_r.iter().map(|v| 1.0 / v.abs().max(1.0)).collect(),
            rho,
            zeta,
        }
    }

    fn split<'b>(&self, x: &'b [f64]) -> (&'b [f64], &'b [f64], &'b [f64], &'b [f64]) {
        let (n, ng) = (self.inner.n(), self.inner.n_g());
        (&x[..n], &x[n..n + ng], &x[n + ng..n + 2 * ng], &x[n + 2 * ng..])
    }
}

impl NlpProblem for RestorationNlp<'_> {
    fn n(&self) -> usize {
        self.inner.n() + 2 * self.inner.n_g() + self.inner.n_h()
    }
    fn n_g(&self) -> usize {
        self.inner.n_g()
    }
    fn n_h(&self) -> usize {
        self.inner.n_h()
    }
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let (mut lo, mut hi) = self.inner.bounds();
        let extra = 2 * self.inner.n_g() + self.inner.n_h();
        lo.extend(std::iter::repeat(0.0).take(extra));
        hi.extend(std::iter::repeat(f64::INFINITY).take(extra));
        (lo, hi)
    }
    fn initial_point(&self) -> Vec<f64> {
        let mut x = self.x_r.clone();
        let g = self.inner.eq_constraints(&self.x_r).unwrap_or_else(|_| vec![0.0; self.inner.n_g()]);
        let h = self.inner.ineq_constraints(&self.x_r).unwrap_or_else(|_| vec![0.0; self.inner.n_h()]);
        let eps = 1e-2;
        x.extend(g.iter().map(|v| v.max(0.0) + eps));
        x.extend(g.iter().map(|v| (-v).max(0.0) + eps));
        x.extend(h.iter().map(|v| v.max(0.0) + eps));
        x
    }
    fn objective(&self, x: &[f64]) -> Result<f64, EvalError> {
        let (xx, p, nn, t) = self.split(x);
        let prox: f64 = xx
            .iter()
            .zip(&self.x_r)
            .zip(&self.d_r)
            .map(|((x, r), d)| (d * (x - r)).powi(2))
            .sum();
        Ok(self.rho * (p.iter().sum::<f64>() + nn.iter().sum::<f64>() + t.iter().sum::<f64>()) + 0.5 * self.zeta * prox)
    }
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        let (xx, ..) = self.split(x);
        let mut g: Vec<f64> = xx
            .iter()
            .zip(&self.x_r)
            .zip(&self.d_r)
            .map(|((x, r), d)| self.zeta * d * d * (x - r))
            .collect();
        g.extend(std::iter::repeat(self.rho).take(x.len() - xx.len()));
        Ok(g)
    }
    fn eq_constraints(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        let (xx, p, nn, _) = self.split(x);
        let g = self.inner.eq_constraints(xx)?;
        Ok(g.iter().zip(p).zip(nn).map(|((g, p), n)| g - p + n).collect())
    }
    fn ineq_constraints(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        let (xx, _, _, t) = self.split(x);
        let h = self.inner.ineq_constraints(xx)?;
        Ok(h.iter().zip(t).map(|(h, t)| h - t).collect())
    }
    fn eq_jacobian(&self, x: &[f64]) -> Result<Triplets, EvalError> {
        let (xx, ..) = self.split(x);
        let (n, ng) = (self.inner.n(), self.inner.n_g());
        let mut j = self.inner.eq_jacobian(xx)?;
        for r in 0..ng {
            j.push((r, n + r, -1.0));
            j.push((r, n + ng + r, 1.0));
        }
        Ok(j)
    }
    fn ineq_jacobian(&self, x: &[f64]) -> Result<Triplets, EvalError> {
        let (xx, ..) = self.split(x);
        let (n, ng, nh) = (self.inner.n(), self.inner.n_g(), self.inner.n_h());
        let mut j = self.inner.ineq_jacobian(xx)?;
        for r in 0..nh {
            j.push((r, n + 2 * ng + r, -1.0));
        }
        Ok(j)
    }
    fn hessian(&self, x: &[f64], obj_factor: f64, lam_g: &[f64], lam_h: &[f64]) -> Result<Triplets, EvalError> {
        let (xx, ..) = self.split(x);
        let mut h = self.inner.hessian(xx, 0.0, lam_g, lam_h)?;
        for (i, d) in self.d_r.iter().enumerate() {
            h.push((i, i, obj_factor * self.zeta * d * d));
        }
        Ok(h)
    }
    fn exact_hessian_available(&self) -> bool {
        self.inner.exact_hessian_available()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounds_reject_empty_intervals() {
        assert!(BoundInfo::new(vec![1.0], vec![0.0]).is_err());
        assert!(BoundInfo::new(vec![0.0], vec![]).is_err());
    }

    #[test]
    fn push_interior_keeps_fixed_values() {
        let b = BoundInfo::new(vec![2.0, 0.0], vec![2.0, f64::INFINITY]).unwrap();
        let mut x = vec![5.0, -1.0];
        b.push_interior(&mut x, 1e-2, 1e-2);
        assert_eq!(x[0], 2.0);
        assert!((x[1] - 1e-2).abs() < 1e-15);
    }

    #[test]
    fn mehrotra_sigma_is_capped() {
        assert_eq!(mehrotra_sigma(1.0, 0.5, 100.0), 0.125);
        assert_eq!(mehrotra_sigma(1.0, 10.0, 100.0), 100.0);
        assert_eq!(mehrotra_sigma(0.0, 1.0, 0.5), 0.5);
    }

    #[test]
    fn unknown_option_is_rejected() {
        let mut o = IpmOptions::default();
        assert!(o.set("no_such_key", "1").is_err());
        assert!(o.set("tol", "abc").is_err());
        o.set("tol", "1e-6").unwrap();
        assert_eq!(o.tol, 1e-6);
    }
}
