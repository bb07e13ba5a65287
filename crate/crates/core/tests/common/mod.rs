#![allow(dead_code)]

use gridopt::grid_model::{parse_matpower, GridCase};

pub fn case_path(name: &str) -> String {
    format!("{}/../../data/{name}.m", env!("CARGO_MANIFEST_DIR"))
}

pub fn load(name: &str) -> GridCase {
    let text = std::fs::read_to_string(case_path(name)).expect("case file");
    parse_matpower(&text).expect("valid case")
}

/// Gives every in-service branch the same rating, for tests that need flow
/// limits on cases that ship without them.
pub fn with_uniform_rating(mut grid: GridCase, rate_mva: f64) -> GridCase {
    for br in &mut grid.branches {
        br.rate_a = rate_mva;
    }
    grid
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

pub const TWO_BUS: &str = "
mpc.baseMVA = 100;
mpc.bus = [
  1 3 0  0 0 0 1 1 0 230 1 1.1 0.9;
  2 1 10 0 0 0 1 1 0 230 1 1.1 0.9;
];
mpc.gen = [
  1 0 0 100 -100 1 100 1 200 0;
];
mpc.branch = [
  1 2 0 0.1 0 0 0 0 0 0 1 -360 360;
];
mpc.gencost = [
  2 0 0 3 0.01 10 0;
];
";

pub const RING3: &str = "
mpc.baseMVA = 100;
mpc.bus = [
  1 3 0  0 0 0 1 1 0 230 1 1.1 0.9;
  2 2 0  0 0 0 1 1 0 230 1 1.1 0.9;
  3 1 20 5 0 0 1 1 0 230 1 1.1 0.9;
];
mpc.gen = [
  1 10 0 100 -100 1 100 1 200 0;
  2 10 0 100 -100 1 100 1 200 0;
];
mpc.branch = [
  1 2 0.01 0.1 0.02 100 100 100 0 0 1 -360 360;
  2 3 0.01 0.1 0.02 100 100 100 0 0 1 -360 360;
  1 3 0.01 0.1 0.02 100 100 100 0 0 1 -360 360;
];
mpc.gencost = [
  2 0 0 3 0.01 10 0;
  2 0 0 3 0.02 12 0;
];
";

use gridopt::opf_problems::{EvalError, NlpProblem, Triplets};

type Dense = Vec<Vec<f64>>;

/// Small dense test problem built from plain functions.
pub struct Toy {
    pub n: usize,
    pub n_g: usize,
    pub n_h: usize,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub x0: Vec<f64>,
    pub f: fn(&[f64]) -> f64,
    pub df: fn(&[f64]) -> Vec<f64>,
    pub g: fn(&[f64]) -> Vec<f64>,
    pub jg: fn(&[f64]) -> Dense,
    pub h: fn(&[f64]) -> Vec<f64>,
    pub jh: fn(&[f64]) -> Dense,
    pub hess: fn(&[f64], f64, &[f64], &[f64]) -> Dense,
}

fn to_triplets(m: Dense) -> Triplets {
    let mut t = Vec::new();
    for (r, row) in m.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            if v != 0.0 {
                t.push((r, c, v));
            }
        }
    }
    t
}

impl NlpProblem for Toy {
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
        (self.lo.clone(), self.hi.clone())
    }
    fn initial_point(&self) -> Vec<f64> {
        self.x0.clone()
    }
    fn objective(&self, x: &[f64]) -> Result<f64, EvalError> {
        Ok((self.f)(x))
    }
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        Ok((self.df)(x))
    }
    fn eq_constraints(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        Ok((self.g)(x))
    }
    fn ineq_constraints(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        Ok((self.h)(x))
    }
    fn eq_jacobian(&self, x: &[f64]) -> Result<Triplets, EvalError> {
        Ok(to_triplets((self.jg)(x)))
    }
    fn ineq_jacobian(&self, x: &[f64]) -> Result<Triplets, EvalError> {
        Ok(to_triplets((self.jh)(x)))
    }
    fn hessian(&self, x: &[f64], s: f64, lg: &[f64], lh: &[f64]) -> Result<Triplets, EvalError> {
        Ok(to_triplets((self.hess)(x, s, lg, lh)))
    }
}

fn none(_: &[f64]) -> Vec<f64> {
    Vec::new()
}

fn none_j(_: &[f64]) -> Dense {
    Vec::new()
}

/// min x² s.t. x ≥ 1.
pub fn square_above_one() -> Toy {
    Toy {
        n: 1,
        n_g: 0,
        n_h: 0,
        lo: vec![1.0],
        hi: vec![f64::INFINITY],
        x0: vec![3.0],
        f: |x| x[0] * x[0],
        df: |x| vec![2.0 * x[0]],
        g: none,
        jg: none_j,
        h: none,
        jh: none_j,
        hess: |_, s, _, _| vec![vec![2.0 * s]],
    }
}

/// min x s.t. x ≥ 1.
pub fn linear_above_one() -> Toy {
    Toy {
        n: 1,
        n_g: 0,
        n_h: 0,
        lo: vec![1.0],
        hi: vec![f64::INFINITY],
        x0: vec![2.0],
        f: |x| x[0],
        df: |_| vec![1.0],
        g: none,
        jg: none_j,
        h: none,
        jh: none_j,
        hess: |_, _, _, _| vec![vec![0.0]],
    }
}

/// min ½‖x‖² s.t. x₁ + x₂ = 1, no bounds.
pub fn projection_qp() -> Toy {
    Toy {
        n: 2,
        n_g: 1,
        n_h: 0,
        lo: vec![f64::NEG_INFINITY; 2],
        hi: vec![f64::INFINITY; 2],
        x0: vec![0.0, 0.0],
        f: |x| 0.5 * (x[0] * x[0] + x[1] * x[1]),
        df: |x| x.to_vec(),
        g: |x| vec![x[0] + x[1] - 1.0],
        jg: |_| vec![vec![1.0, 1.0]],
        h: none,
        jh: none_j,
        hess: |_, s, _, _| vec![vec![s, 0.0], vec![0.0, s]],
    }
}

/// The classic four-variable test problem with one product inequality and
/// one sphere equality; optimum 17.014017289.
pub fn hs071() -> Toy {
    Toy {
        n: 4,
        n_g: 1,
        n_h: 1,
        lo: vec![1.0; 4],
        hi: vec![5.0; 4],
        x0: vec![1.0, 5.0, 5.0, 1.0],
        f: |x| x[0] * x[3] * (x[0] + x[1] + x[2]) + x[2],
        df: |x| {
            vec![
                x[3] * (2.0 * x[0] + x[1] + x[2]),
                x[0] * x[3],
                x[0] * x[3] + 1.0,
                x[0] * (x[0] + x[1] + x[2]),
            ]
        },
        g: |x| vec![x.iter().map(|v| v * v).sum::<f64>() - 40.0],
        jg: |x| vec![x.iter().map(|v| 2.0 * v).collect()],
        h: |x| vec![25.0 - x[0] * x[1] * x[2] * x[3]],
        jh: |x| vec![vec![-x[1] * x[2] * x[3], -x[0] * x[2] * x[3], -x[0] * x[1] * x[3], -x[0] * x[1] * x[2]]],
        hess: |x, s, lg, lh| {
            let mut m = vec![vec![0.0; 4]; 4];
            let mut put = |i: usize, j: usize, v: f64| {
                m[i][j] += v;
                if i != j {
                    m[j][i] += v;
                }
            };
            put(0, 0, s * 2.0 * x[3]);
            put(0, 1, s * x[3]);
            put(0, 2, s * x[3]);
            put(0, 3, s * (2.0 * x[0] + x[1] + x[2]));
            put(1, 3, s * x[0]);
            put(2, 3, s * x[0]);
            for i in 0..4 {
                put(i, i, -lg[0] * 2.0);
            }
            let l = lh[0];
            put(0, 1, l * x[2] * x[3]);
            put(0, 2, l * x[1] * x[3]);
            put(0, 3, l * x[1] * x[2]);
            put(1, 2, l * x[0] * x[3]);
            put(1, 3, l * x[0] * x[2]);
            put(2, 3, l * x[0] * x[1]);
            m
        },
    }
}

/// Two variables with lower bounds, one equality and one inequality, all
/// nonlinear.
pub fn mixed_toy() -> Toy {
    Toy {
        n: 2,
        n_g: 1,
        n_h: 1,
        lo: vec![0.0, 0.0],
        hi: vec![f64::INFINITY, 3.0],
        x0: vec![0.5, 0.5],
        f: |x| (x[0] - 1.0).powi(2) + (x[1] - 2.0).powi(2) + x[0] * x[1],
        df: |x| vec![2.0 * (x[0] - 1.0) + x[1], 2.0 * (x[1] - 2.0) + x[0]],
        g: |x| vec![x[0] * x[0] + x[1] - 1.5],
        jg: |x| vec![vec![2.0 * x[0], 1.0]],
        h: |x| vec![x[0] + x[1] * x[1] - 2.0],
        jh: |x| vec![vec![1.0, 2.0 * x[1]]],
        hess: |_, s, lg, lh| {
            vec![
                vec![2.0 * s - 2.0 * lg[0], s],
                vec![s, 2.0 * s - 2.0 * lh[0]],
            ]
        },
    }
}

/// Multiplies another problem's objective by a constant.
pub struct ObjectiveScaled<'a, P: NlpProblem> {
    pub inner: &'a P,
    pub factor: f64,
}

impl<P: NlpProblem> NlpProblem for ObjectiveScaled<'_, P> {
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
        Ok(self.factor * self.inner.objective(x)?)
    }
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        Ok(self.inner.gradient(x)?.into_iter().map(|v| v * self.factor).collect())
    }
    fn eq_constraints(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        self.inner.eq_constraints(x)
    }
    fn ineq_constraints(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        self.inner.ineq_constraints(x)
    }
    fn eq_jacobian(&self, x: &[f64]) -> Result<Triplets, EvalError> {
        self.inner.eq_jacobian(x)
    }
    fn ineq_jacobian(&self, x: &[f64]) -> Result<Triplets, EvalError> {
        self.inner.ineq_jacobian(x)
    }
    fn hessian(&self, x: &[f64], s: f64, lg: &[f64], lh: &[f64]) -> Result<Triplets, EvalError> {
        self.inner.hessian(x, s * self.factor, lg, lh)
    }
}
