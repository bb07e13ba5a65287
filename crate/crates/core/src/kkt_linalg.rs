//! Dense symmetric indefinite linear algebra for KKT systems: Bunch-Kaufman
//! LDLᵀ with inertia, slack elimination, arrowhead permutation and the
//! block Schur-complement solve.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use rayon::ThreadPool;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not symmetric")]
    NotSymmetric,
    #[error("system is singular")]
    SingularSystem,
    #[error("slack block entry {0} is degenerate")]
    DegenerateSlack(usize),
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("diagonal block {0} is singular")]
    SingularBlock(usize),
    #[error("Schur complement is singular")]
    SingularSchur,
    #[error("could not build worker pool: {0}")]
    Pool(String),
}

/// Counts of positive, negative and zero eigenvalues.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Inertia {
    pub pos: usize,
    pub neg: usize,
    pub zero: usize,
}

impl Inertia {
    pub fn new(pos: usize, neg: usize, zero: usize) -> Self {
        Inertia { pos, neg, zero }
    }

    /// Inertia of the negated matrix.
    pub fn negated(self) -> Self {
        Inertia {
            pos: self.neg,
            neg: self.pos,
            zero: self.zero,
        }
    }

    pub fn dim(&self) -> usize {
        self.pos + self.neg + self.zero
    }
}

impl std::ops::Add for Inertia {
    type Output = Inertia;
    fn add(self, o: Inertia) -> Inertia {
        Inertia {
            pos: self.pos + o.pos,
            neg: self.neg + o.neg,
            zero: self.zero + o.zero,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Pivot {
    One(f64),
    /// `[d11, d21, d22]` of a 2×2 block starting at this index.
    Two([f64; 3]),
    /// Second row of a 2×2 block.
    Skip,
}

/// `P A Pᵀ = L D Lᵀ` with unit lower `L` and 1×1 / 2×2 blocks in `D`.
#[derive(Debug, Clone)]
pub struct SymIndefFactor {
    l: DMatrix<f64>,
    pivots: Vec<Pivot>,
    perm: Vec<usize>,
    a: DMatrix<f64>,
    pub inertia: Inertia,
}

pub const DEFAULT_PIVOT_TOL: f64 = 1e-12;

fn inf_norm(a: &DMatrix<f64>) -> f64 {
    (0..a.nrows())
        .map(|i| a.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn check_symmetric(a: &DMatrix<f64>) -> Result<(), LinalgError> {
    if a.nrows() != a.ncols() {
        return Err(LinalgError::NotSymmetric);
    }
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    for j in 0..a.ncols() {
        for i in j + 1..a.nrows() {
            if (a[(i, j)] - a[(j, i)]).abs() > 1e-14 * scale {
                return Err(LinalgError::NotSymmetric);
            }
        }
    }
    Ok(())
}

fn count_eig(v: f64, tol: f64, inertia: &mut Inertia) {
    if v > tol {
        inertia.pos += 1;
    } else if v < -tol {
        inertia.neg += 1;
    } else {
        inertia.zero += 1;
    }
}

/// Symmetric swap of indices `p < q` in a lower-stored matrix.
fn swap_lower(w: &mut DMatrix<f64>, p: usize, q: usize) {
    if p == q {
        return;
    }
    let n = w.nrows();
    for j in 0..p {
        w.swap((p, j), (q, j));
    }
    for i in p + 1..q {
        w.swap((i, p), (q, i));
    }
    for i in q + 1..n {
        w.swap((i, p), (i, q));
    }
    w.swap((p, p), (q, q));
}

struct Partial {
    w: DMatrix<f64>,
    pivots: Vec<Pivot>,
    perm: Vec<usize>,
    inertia: Inertia,
}

/// Bunch-Kaufman elimination of the first `n_elim` pivots of `a`, with
/// pivot search restricted to that leading block. The trailing block of the
/// result holds the Schur complement of the eliminated part.
fn bunch_kaufman(a: &DMatrix<f64>, n_elim: usize, tol: f64) -> Partial {
    let n = a.nrows();
    let alpha = (1.0 + 17f64.sqrt()) / 8.0;
    let mut w = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut pivots = Vec::with_capacity(n_elim);
    let mut inertia = Inertia::default();
    let mut k = 0;
    while k < n_elim {
        let absakk = w[(k, k)].abs();
        let (mut imax, mut colmax) = (k, 0.0);
        for i in k + 1..n_elim {
            let v = w[(i, k)].abs();
            if v > colmax {
                colmax = v;
                imax = i;
            }
        }
        if absakk.max(colmax) <= tol {
            pivots.push(Pivot::One(w[(k, k)]));
            inertia.zero += 1;
            for i in k + 1..n {
                w[(i, k)] = 0.0;
            }
            k += 1;
            continue;
        }
        let mut two = false;
        let mut kp = k;
        if absakk < alpha * colmax {
            let mut rowmax: f64 = 0.0;
            for j in k..imax {
                rowmax = rowmax.max(w[(imax, j)].abs());
            }
            for j in imax + 1..n_elim {
                rowmax = rowmax.max(w[(j, imax)].abs());
            }
            if absakk >= alpha * colmax * (colmax / rowmax) {
                kp = k;
            } else if w[(imax, imax)].abs() >= alpha * rowmax {
                kp = imax;
            } else {
                kp = imax;
                two = true;
            }
        }
        if !two {
            swap_lower(&mut w, k, kp);
            perm.swap(k, kp);
            let d = w[(k, k)];
            count_eig(d, tol, &mut inertia);
            if d.abs() <= tol {
                pivots.push(Pivot::One(d));
                for i in k + 1..n {
                    w[(i, k)] = 0.0;
                }
                k += 1;
                continue;
            }
            if k + 1 < n {
                let c: DVector<f64> = w.view((k + 1, k), (n - k - 1, 1)).column(0).into_owned();
                let mut trail = w.view_mut((k + 1, k + 1), (n - k - 1, n - k - 1));
                trail.syger(-1.0 / d, &c, &c, 1.0);
                let mut col = w.view_mut((k + 1, k), (n - k - 1, 1));
                col /= d;
            }
            pivots.push(Pivot::One(d));
            k += 1;
        } else {
            swap_lower(&mut w, k + 1, kp);
            perm.swap(k + 1, kp);
            let (d11, d21, d22) = (w[(k, k)], w[(k + 1, k)], w[(k + 1, k + 1)]);
            let half_tr = 0.5 * (d11 + d22);
            let rad = (0.25 * (d11 - d22).powi(2) + d21 * d21).sqrt();
            count_eig(half_tr + rad, tol, &mut inertia);
            count_eig(half_tr - rad, tol, &mut inertia);
            let det = d11 * d22 - d21 * d21;
            if k + 2 < n {
                let m = n - k - 2;
                let c0: DVector<f64> = w.view((k + 2, k), (m, 1)).column(0).into_owned();
                let c1: DVector<f64> = w.view((k + 2, k + 1), (m, 1)).column(0).into_owned();
                let (i00, i01, i11) = (d22 / det, -d21 / det, d11 / det);
                let mut trail = w.view_mut((k + 2, k + 2), (m, m));
                trail.syger(-i00, &c0, &c0, 1.0);
                trail.syger(-i11, &c1, &c1, 1.0);
                trail.syger(-i01, &c0, &c1, 1.0);
                trail.syger(-i01, &c1, &c0, 1.0);
                let l0 = &c0 * i00 + &c1 * i01;
                let l1 = &c0 * i01 + &c1 * i11;
                w.view_mut((k + 2, k), (m, 1)).copy_from(&l0);
                w.view_mut((k + 2, k + 1), (m, 1)).copy_from(&l1);
            }
            pivots.push(Pivot::Two([d11, d21, d22]));
            pivots.push(Pivot::Skip);
            k += 2;
        }
    }
    Partial {
        w,
        pivots,
        perm,
        inertia,
    }
}

fn factor_from_partial(p: &Partial, ne: usize, a: DMatrix<f64>) -> SymIndefFactor {
    let mut l = DMatrix::identity(ne, ne);
    for j in 0..ne {
        let second_of_two = matches!(p.pivots[j], Pivot::Skip);
        for i in j + 1..ne {
            if second_of_two || !(i == j + 1 && matches!(p.pivots[j], Pivot::Two(_))) {
                l[(i, j)] = p.w[(i, j)];
            }
        }
    }
    SymIndefFactor {
        l,
        pivots: p.pivots.clone(),
        perm: p.perm[..ne].to_vec(),
        a,
        inertia: p.inertia,
    }
}

/// Factorizes a symmetric matrix; pivots with magnitude at most
/// `pivot_tol · ‖A‖∞` count as zero eigenvalues.
pub fn ldlt_factor(a: &DMatrix<f64>, pivot_tol: f64) -> Result<SymIndefFactor, LinalgError> {
    check_symmetric(a)?;
    let n = a.nrows();
    let tol = pivot_tol * inf_norm(a);
    let p = bunch_kaufman(a, n, tol);
    Ok(factor_from_partial(&p, n, a.clone()))
}

impl SymIndefFactor {
    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    pub fn is_singular(&self) -> bool {
        self.inertia.zero > 0
    }

    fn apply_inverse(&self, b: &DVector<f64>) -> Result<DVector<f64>, LinalgError> {
        let n = self.dim();
        let mut y = DVector::from_iterator(n, self.perm.iter().map(|&p| b[p]));
        for j in 0..n {
            let yj = y[j];
            if yj != 0.0 {
                for i in j + 1..n {
                    y[i] -= self.l[(i, j)] * yj;
                }
            }
        }
        let mut k = 0;
        while k < n {
            match self.pivots[k] {
                Pivot::One(d) => {
                    if d == 0.0 || self.inertia.zero > 0 {
                        return Err(LinalgError::SingularSystem);
                    }
                    y[k] /= d;
                    k += 1;
                }
                Pivot::Two([d11, d21, d22]) => {
                    let det = d11 * d22 - d21 * d21;
                    let (a, b) = (y[k], y[k + 1]);
                    y[k] = (d22 * a - d21 * b) / det;
                    y[k + 1] = (d11 * b - d21 * a) / det;
                    k += 2;
                }
                Pivot::Skip => unreachable!(),
            }
        }
        for j in (0..n).rev() {
            let mut acc = y[j];
            for i in j + 1..n {
                acc -= self.l[(i, j)] * y[i];
            }
            y[j] = acc;
        }
        let mut x = DVector::zeros(n);
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = y[i];
        }
        Ok(x)
    }

    /// Solves with one step of iterative refinement.
    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>, LinalgError> {
        if self.is_singular() {
            return Err(LinalgError::SingularSystem);
        }
        let mut x = self.apply_inverse(b)?;
        let r = b - &self.a * &x;
        x += self.apply_inverse(&r)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::SingularSystem);
        }
        Ok(x)
    }

    pub fn solve_many(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
        let mut out = DMatrix::zeros(b.nrows(), b.ncols());
        for j in 0..b.ncols() {
            let x = self.solve(&b.column(j).clone_owned())?;
            out.set_column(j, &x);
        }
        Ok(out)
    }

    /// Reassembles `P A Pᵀ` from the factors, for diagnostics.
    pub fn reconstruct_permuted(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut d = DMatrix::zeros(n, n);
        for (k, p) in self.pivots.iter().enumerate() {
            match *p {
                Pivot::One(v) => d[(k, k)] = v,
                Pivot::Two([a, b, c]) => {
                    d[(k, k)] = a;
                    d[(k + 1, k)] = b;
                    d[(k, k + 1)] = b;
                    d[(k + 1, k + 1)] = c;
                }
                Pivot::Skip => {}
            }
        }
        &self.l * d * self.l.transpose()
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }
}

pub fn ldlt_solve(factor: &SymIndefFactor, rhs: &DVector<f64>) -> Result<DVector<f64>, LinalgError> {
    factor.solve(rhs)
}

/// Symmetric Ruiz equilibration: returns `d` such that `diag(d) A diag(d)`
/// has rows of unit infinity norm (approximately).
pub fn equilibrate(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut d = vec![1.0; n];
    for _ in 0..10 {
        let mut r = vec![0.0f64; n];
        for j in 0..n {
            for i in 0..n {
                let v = (d[i] * a[(i, j)] * d[j]).abs();
                if v > r[i] {
                    r[i] = v;
                }
            }
        }
        let mut done = true;
        for i in 0..n {
            if r[i] > 0.0 {
                if (1.0 - r[i]).abs() > 1e-2 {
                    done = false;
                }
                d[i] /= r[i].sqrt();
            }
        }
        if done {
            break;
        }
    }
    d
}

/// Symmetrized 4-block Newton system ordered `[x, s, λg, λh]`.
#[derive(Debug, Clone)]
pub struct KktSystem {
    pub n: usize,
    pub n_g: usize,
    pub n_h: usize,
    pub matrix: DMatrix<f64>,
    pub rhs: DVector<f64>,
}

/// Slack-reduced 3-block system ordered `[x, λg, λh]`.
#[derive(Debug, Clone)]
pub struct ReducedKkt {
    pub n: usize,
    pub n_g: usize,
    pub n_h: usize,
    pub matrix: DMatrix<f64>,
    pub rhs: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct SlackElimination {
    pub ls: Vec<f64>,
    pub rhs_s: Vec<f64>,
}

impl SlackElimination {
    /// Inertia contributed by the eliminated diagonal block.
    pub fn inertia(&self) -> Inertia {
        let mut i = Inertia::default();
        for &v in &self.ls {
            count_eig(v, 0.0, &mut i);
        }
        i
    }
}

fn reduced_index(n: usize, n_h: usize, n_g: usize) -> Vec<usize> {
    (0..n).chain(n + n_h..n + n_h + n_g + n_h).collect()
}

/// Eliminates the diagonal slack block: the λh diagonal gains `-L_s⁻¹` and
/// the λh right-hand side gains `L_s⁻¹ r_s`.
pub fn reduce_slack_system(kkt: &KktSystem) -> Result<(ReducedKkt, SlackElimination), LinalgError> {
    let (n, n_g, n_h) = (kkt.n, kkt.n_g, kkt.n_h);
    let keep = reduced_index(n, n_h, n_g);
    let dim = keep.len();
    let mut matrix = DMatrix::zeros(dim, dim);
    for (jj, &j) in keep.iter().enumerate() {
        for (ii, &i) in keep.iter().enumerate() {
            matrix[(ii, jj)] = kkt.matrix[(i, j)];
        }
    }
    let mut rhs = DVector::from_iterator(dim, keep.iter().map(|&i| kkt.rhs[i]));
    let mut ls = Vec::with_capacity(n_h);
    let mut rhs_s = Vec::with_capacity(n_h);
    for j in 0..n_h {
        let v = kkt.matrix[(n + j, n + j)];
        if v.abs() < 1e-300 {
            return Err(LinalgError::DegenerateSlack(j));
        }
        ls.push(v);
        rhs_s.push(kkt.rhs[n + j]);
        let r = n + n_g + j;
        matrix[(r, r)] -= 1.0 / v;
        rhs[r] += kkt.rhs[n + j] / v;
    }
    Ok((ReducedKkt { n, n_g, n_h, matrix, rhs }, SlackElimination { ls, rhs_s }))
}

/// `Δs = L_s⁻¹ (r_s + Δλh)`.
pub fn recover_slack_step(rec: &SlackElimination, d_lam_h: &[f64]) -> Vec<f64> {
    rec.ls
        .iter()
        .zip(&rec.rhs_s)
        .zip(d_lam_h)
        .map(|((l, r), d)| (r + d) / l)
        .collect()
}

/// Diagonal blocks, couplings and corner of an arrowhead system.
/// `b[i]` has shape `|corner| × |block i|`.
#[derive(Debug, Clone)]
pub struct ArrowheadSystem {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub c: DMatrix<f64>,
    pub rhs: Vec<DVector<f64>>,
    pub rhs_c: DVector<f64>,
    pub blocks: Vec<Vec<usize>>,
    pub corner: Vec<usize>,
}

fn submatrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

/// Symmetrically permutes a matrix into arrowhead blocks. Every index must
/// belong to exactly one block or the corner, and distinct blocks must not
/// couple.
pub fn permute_to_arrowhead(
    matrix: &DMatrix<f64>,
    rhs: &DVector<f64>,
    blocks: &[Vec<usize>],
    corner: &[usize],
) -> Result<ArrowheadSystem, LinalgError> {
    let n = matrix.nrows();
    if rhs.len() != n {
        return Err(LinalgError::LayoutMismatch("rhs length".into()));
    }
    let mut owner = vec![usize::MAX; n];
    let tag_corner = blocks.len();
    for (bi, idx) in blocks.iter().enumerate().chain(std::iter::once((tag_corner, &corner.to_vec()))) {
        for &i in idx {
            if i >= n || owner[i] != usize::MAX {
                return Err(LinalgError::LayoutMismatch(format!("index {i} repeated or out of range")));
            }
            owner[i] = bi;
        }
    }
    if owner.iter().any(|&o| o == usize::MAX) {
        return Err(LinalgError::LayoutMismatch("layout does not cover the matrix".into()));
    }
    for j in 0..n {
        for i in 0..n {
            let (oi, oj) = (owner[i], owner[j]);
            if oi != oj && oi != tag_corner && oj != tag_corner && matrix[(i, j)] != 0.0 {
                return Err(LinalgError::LayoutMismatch(format!("blocks {oi} and {oj} couple at ({i},{j})")));
            }
        }
    }
    Ok(ArrowheadSystem {
        a: blocks.iter().map(|b| submatrix(matrix, b, b)).collect(),
        b: blocks.iter().map(|b| submatrix(matrix, corner, b)).collect(),
        c: submatrix(matrix, corner, corner),
        rhs: blocks
            .iter()
            .map(|b| DVector::from_iterator(b.len(), b.iter().map(|&i| rhs[i])))
            .collect(),
        rhs_c: DVector::from_iterator(corner.len(), corner.iter().map(|&i| rhs[i])),
        blocks: blocks.to_vec(),
        corner: corner.to_vec(),
    })
}

impl ArrowheadSystem {
    pub fn dim(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum::<usize>() + self.corner.len()
    }

    /// The system in original index order.
    pub fn assemble(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        let mut r = DVector::zeros(n);
        for (k, idx) in self.blocks.iter().enumerate() {
            for (jj, &j) in idx.iter().enumerate() {
                r[j] = self.rhs[k][jj];
                for (ii, &i) in idx.iter().enumerate() {
                    m[(i, j)] = self.a[k][(ii, jj)];
                }
                for (cc, &c) in self.corner.iter().enumerate() {
                    m[(c, j)] = self.b[k][(cc, jj)];
                    m[(j, c)] = self.b[k][(cc, jj)];
                }
            }
        }
        for (jj, &j) in self.corner.iter().enumerate() {
            r[j] = self.rhs_c[jj];
            for (ii, &i) in self.corner.iter().enumerate() {
                m[(i, j)] = self.c[(ii, jj)];
            }
        }
        (m, r)
    }

    /// Scatters block solutions back to original index order.
    pub fn scatter(&self, sol: &ArrowheadSolution) -> DVector<f64> {
        let mut x = DVector::zeros(self.dim());
        for (idx, xb) in self.blocks.iter().zip(&sol.blocks) {
            for (k, &i) in idx.iter().enumerate() {
                x[i] = xb[k];
            }
        }
        for (k, &i) in self.corner.iter().enumerate() {
            x[i] = sol.global[k];
        }
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalSchurMethod {
    Backsolve,
    AugmentedPartial,
}

/// Factor of `A_i` and its Schur contribution `B_i A_i⁻¹ B_iᵀ`.
fn local_factor(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    method: LocalSchurMethod,
    pivot_tol: f64,
    block: usize,
) -> Result<(SymIndefFactor, DMatrix<f64>), LinalgError> {
    let na = a.nrows();
    let nc = b.nrows();
    match method {
        LocalSchurMethod::Backsolve => {
            let f = ldlt_factor(a, pivot_tol)?;
            if f.is_singular() {
                return Err(LinalgError::SingularBlock(block));
            }
            let x = f.solve_many(&b.transpose()).map_err(|_| LinalgError::SingularBlock(block))?;
            let s = b * x;
            Ok((f, symmetrize(s)))
        }
        LocalSchurMethod::AugmentedPartial => {
            let mut m = DMatrix::zeros(na + nc, na + nc);
            m.view_mut((0, 0), (na, na)).copy_from(a);
            m.view_mut((na, 0), (nc, na)).copy_from(b);
            m.view_mut((0, na), (na, nc)).copy_from(&b.transpose());
            let tol = pivot_tol * inf_norm(a);
            let p = bunch_kaufman(&m, na, tol);
            if p.inertia.zero > 0 {
                return Err(LinalgError::SingularBlock(block));
            }
            let mut s = DMatrix::zeros(nc, nc);
            for j in 0..nc {
                for i in j..nc {
                    let v = -p.w[(na + i, na + j)];
                    s[(i, j)] = v;
                    s[(j, i)] = v;
                }
            }
            Ok((factor_from_partial(&p, na, a.clone()), s))
        }
    }
}

fn symmetrize(s: DMatrix<f64>) -> DMatrix<f64> {
    let t = s.transpose();
    (s + t) * 0.5
}

/// `S_i = B_i A_i⁻¹ B_iᵀ` by the chosen method.
pub fn local_schur_contribution(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    method: LocalSchurMethod,
) -> Result<DMatrix<f64>, LinalgError> {
    local_factor(a, b, method, DEFAULT_PIVOT_TOL, 0).map(|(_, s)| s)
}

#[derive(Debug, Clone)]
pub struct ArrowheadSolution {
    pub blocks: Vec<DVector<f64>>,
    pub global: DVector<f64>,
}

/// Factorized arrowhead system, reusable for several right-hand sides.
#[derive(Debug)]
pub struct SchurFactor {
    locals: Vec<SymIndefFactor>,
    b: Vec<DMatrix<f64>>,
    schur: Option<SymIndefFactor>,
    /// Inertia of the whole system by additivity over blocks and `S`.
    pub inertia: Inertia,
}

pub fn build_pool(workers: usize) -> Result<ThreadPool, LinalgError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| LinalgError::Pool(e.to_string()))
}

impl SchurFactor {
    pub fn new(
        sys: &ArrowheadSystem,
        method: LocalSchurMethod,
        pool: &ThreadPool,
        pivot_tol: f64,
    ) -> Result<Self, LinalgError> {
        let results: Vec<Result<(SymIndefFactor, DMatrix<f64>), LinalgError>> = pool.install(|| {
            sys.a
                .par_iter()
                .zip(sys.b.par_iter())
                .enumerate()
                .map(|(i, (a, b))| local_factor(a, b, method, pivot_tol, i))
                .collect()
        });
        let mut s = sys.c.clone();
        let mut locals = Vec::with_capacity(results.len());
        let mut inertia = Inertia::default();
        for r in results {
            let (f, si) = r?;
            s -= si;
            inertia = inertia + f.inertia;
            locals.push(f);
        }
        let schur = if s.nrows() > 0 {
            let f = ldlt_factor(&s, pivot_tol)?;
            inertia = inertia + f.inertia;
            Some(f)
        } else {
            None
        };
        Ok(SchurFactor {
            locals,
            b: sys.b.clone(),
            schur,
            inertia,
        })
    }

    pub fn is_singular(&self) -> bool {
        self.inertia.zero > 0
    }

    pub fn solve(
        &self,
        rhs: &[DVector<f64>],
        rhs_c: &DVector<f64>,
        pool: &ThreadPool,
    ) -> Result<ArrowheadSolution, LinalgError> {
        let local_rhs: Vec<Result<DVector<f64>, LinalgError>> = pool.install(|| {
            self.locals
                .par_iter()
                .zip(rhs.par_iter())
                .zip(self.b.par_iter())
                .enumerate()
                .map(|(i, ((f, r), b))| {
                    f.solve(r)
                        .map(|t| b * t)
                        .map_err(|_| LinalgError::SingularBlock(i))
                })
                .collect()
        });
        let mut rc = rhs_c.clone();
        for t in local_rhs {
            rc -= t?;
        }
        let global = match &self.schur {
            Some(f) => f.solve(&rc).map_err(|_| LinalgError::SingularSchur)?,
            None => DVector::zeros(0),
        };
        let blocks: Vec<Result<DVector<f64>, LinalgError>> = pool.install(|| {
            self.locals
                .par_iter()
                .zip(rhs.par_iter())
                .zip(self.b.par_iter())
                .enumerate()
                .map(|(i, ((f, r), b))| {
                    let r = r - b.transpose() * &global;
                    f.solve(&r).map_err(|_| LinalgError::SingularBlock(i))
                })
                .collect()
        });
        Ok(ArrowheadSolution {
            blocks: blocks.into_iter().collect::<Result<_, _>>()?,
            global,
        })
    }
}

/// Solves an arrowhead system through its Schur complement on `workers`
/// threads. Reductions run in ascending block order.
pub fn schur_solve(
    sys: &ArrowheadSystem,
    method: LocalSchurMethod,
    workers: usize,
) -> Result<ArrowheadSolution, LinalgError> {
    let pool = build_pool(workers)?;
    let f = SchurFactor::new(sys, method, &pool, DEFAULT_PIVOT_TOL)?;
    if let Some(s) = &f.schur {
        if s.is_singular() {
            return Err(LinalgError::SingularSchur);
        }
    }
    f.solve(&sys.rhs, &sys.rhs_c, &pool)
}

/// Symmetric coordinate dump: header `dim nnz`, then `i j value` for the
/// nonzero lower triangle (0-based).
pub fn write_sym_coordinate(m: &DMatrix<f64>) -> String {
    let mut entries = Vec::new();
    for j in 0..m.ncols() {
        for i in j..m.nrows() {
            if m[(i, j)] != 0.0 {
                entries.push((i, j, m[(i, j)]));
            }
        }
    }
    let mut s = format!("{} {}\n", m.nrows(), entries.len());
    for (i, j, v) in entries {
        let _ = writeln!(s, "{i} {j} {v:e}");
    }
    s
}

pub fn read_sym_coordinate(text: &str) -> Option<DMatrix<f64>> {
    let mut lines = text.lines();
    let mut head = lines.next()?.split_whitespace();
    let dim: usize = head.next()?.parse().ok()?;
    let mut m = DMatrix::zeros(dim, dim);
    for line in lines {
        let mut t = line.split_whitespace();
        let i: usize = t.next()?.parse().ok()?;
        let j: usize = t.next()?.parse().ok()?;
        let v: f64 = t.next()?.parse().ok()?;
        m[(i, j)] = v;
        m[(j, i)] = v;
    }
    Some(m)
}
