//! Power network data: MATPOWER case parsing, admittance assembly and
//! line-outage contingencies.
//!
//! Quantities are stored in the units of the case file (MW, MVAr, MVA) with
//! angles in radians. Per-unit values are obtained through the `*_pu`
//! helpers, which divide by `base_mva`.

use std::collections::{HashMap, HashSet};
use std::f64::consts::PI;
use std::fmt::Write as _;

use num_complex::Complex64;
use sprs::{CsMat, TriMat};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("malformed case file: {0}")]
    MalformedFile(String),
    #[error("invalid case data: {0}")]
    ValidationError(String),
    #[error("unsupported cost model: {0}")]
    UnsupportedCost(String),
    #[error("branch outage islands the grid: {0}")]
    IslandingError(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BusKind {
    Ref,
    Pv,
    Pq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: u32,
    pub kind: BusKind,
    pub pd: f64,
    pub qd: f64,
    pub gs: f64,
    pub bs: f64,
    pub vm0: f64,
    pub va0: f64,
    pub base_kv: f64,
    pub vmin: f64,
    pub vmax: f64,
}

/// A π-model branch. `from` and `to` are positions in `GridCase::buses`.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    pub b: f64,
    pub rate_a: f64,
    pub tap: f64,
    pub shift: f64,
    pub in_service: bool,
}

impl Branch {
    /// Tap ratio with the stored-zero convention resolved.
    pub fn ratio(&self) -> f64 {
        if self.tap == 0.0 {
            1.0
        } else {
            self.tap
        }
    }

    pub fn is_rated(&self) -> bool {
        self.rate_a > 0.0
    }
}

/// Quadratic cost `a p^2 + b p + c` with `p` in MW.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cost {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Cost {
    pub fn eval(&self, p_mw: f64) -> f64 {
        (self.a * p_mw + self.b) * p_mw + self.c
    }

    pub fn deriv(&self, p_mw: f64) -> f64 {
        2.0 * self.a * p_mw + self.b
    }
}

/// A generator. `bus` is a position in `GridCase::buses`.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub bus: usize,
    pub pg0: f64,
    pub qg0: f64,
    pub qmax: f64,
    pub qmin: f64,
    pub vg: f64,
    pub pmax: f64,
    pub pmin: f64,
    pub in_service: bool,
    pub cost: Cost,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCase {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
}

impl GridCase {
    pub fn n_b(&self) -> usize {
        self.buses.len()
    }

    pub fn n_l(&self) -> usize {
        self.branches.len()
    }

    pub fn n_g(&self) -> usize {
        self.generators.len()
    }

    pub fn ref_bus(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.kind == BusKind::Ref)
            .expect("validated case has a reference bus")
    }

    pub fn bus_index(&self, id: u32) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    /// In-service generators grouped by bus position.
    pub fn gens_at_bus(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_b()];
        for (k, g) in self.generators.iter().enumerate() {
            if g.in_service {
                out[g.bus].push(k);
            }
        }
        out
    }

    pub fn in_service_gens(&self) -> Vec<usize> {
        (0..self.n_g())
            .filter(|&k| self.generators[k].in_service)
            .collect()
    }

    pub fn pd_pu(&self, bus: usize) -> f64 {
        self.buses[bus].pd / self.base_mva
    }

    pub fn qd_pu(&self, bus: usize) -> f64 {
        self.buses[bus].qd / self.base_mva
    }

    pub fn rate_pu(&self, branch: usize) -> f64 {
        self.branches[branch].rate_a / self.base_mva
    }

    /// Generator cost in $/h for an active injection given in per unit.
    pub fn gen_cost_pu(&self, gen: usize, p_pu: f64) -> f64 {
        self.generators[gen].cost.eval(p_pu * self.base_mva)
    }

    /// Derivative of `gen_cost_pu` with respect to the per-unit injection.
    pub fn gen_cost_deriv_pu(&self, gen: usize, p_pu: f64) -> f64 {
        self.generators[gen].cost.deriv(p_pu * self.base_mva) * self.base_mva
    }

    /// Second derivative of `gen_cost_pu`.
    pub fn gen_cost_curv_pu(&self, gen: usize) -> f64 {
        2.0 * self.generators[gen].cost.a * self.base_mva * self.base_mva
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if !(self.base_mva > 0.0) {
            return Err(GridError::ValidationError("baseMVA must be positive".into()));
        }
        let n_ref = self.buses.iter().filter(|b| b.kind == BusKind::Ref).count();
        if n_ref != 1 {
            return Err(GridError::ValidationError(format!(
                "expected exactly one reference bus, found {n_ref}"
            )));
        }
        let mut ids = HashSet::new();
        for b in &self.buses {
            if !ids.insert(b.id) {
                return Err(GridError::ValidationError(format!("duplicate bus id {}", b.id)));
            }
            if !(b.vmin > 0.0) || b.vmin > b.vmax {
                return Err(GridError::ValidationError(format!(
                    "bus {} has invalid voltage limits",
                    b.id
                )));
            }
            if b.kind == BusKind::Ref && (b.vm0 < b.vmin || b.vm0 > b.vmax) {
                return Err(GridError::ValidationError(format!(
                    "reference bus {} starts outside its voltage limits",
                    b.id
                )));
            }
        }
        for (k, br) in self.branches.iter().enumerate() {
            if br.from >= self.n_b() || br.to >= self.n_b() {
                return Err(GridError::ValidationError(format!("branch {k} has a dangling endpoint")));
            }
            if br.from == br.to {
                return Err(GridError::ValidationError(format!("branch {k} is a self loop")));
            }
            if br.in_service && br.r * br.r + br.x * br.x <= 0.0 {
                return Err(GridError::ValidationError(format!("branch {k} has zero impedance")));
            }
        }
        for (k, g) in self.generators.iter().enumerate() {
            if g.bus >= self.n_b() {
                return Err(GridError::ValidationError(format!("generator {k} references a missing bus")));
            }
            if g.pmin > g.pmax || g.qmin > g.qmax {
                return Err(GridError::ValidationError(format!("generator {k} has inverted limits")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AdmittanceMatrix {
    pub ybus: CsMat<Complex64>,
    pub yf: CsMat<Complex64>,
    pub yt: CsMat<Complex64>,
    pub cf: CsMat<f64>,
    pub ct: CsMat<f64>,
    /// Per-branch `[y_ff, y_ft, y_tf, y_tt]`; zero for out-of-service branches.
    pub branch_y: Vec<[Complex64; 4]>,
}

/// A single branch outage. `outaged_branch` is a position in
/// `GridCase::branches`; labels use the 1-based row number of the case file.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Contingency {
    pub outaged_branch: usize,
    pub label: String,
}

impl Contingency {
    pub fn line(branch: usize) -> Self {
        Contingency {
            outaged_branch: branch,
            label: format!("L{}", branch + 1),
        }
    }
}

fn strip_comments(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for line in text.lines() {
        let mut in_str = false;
        for ch in line.chars() {
            match ch {
                '\'' => in_str = !in_str,
                '%' if !in_str => break,
                _ => {}
            }
            out.push(ch);
        }
        out.push('\n');
    }
    out
}

fn find_assignment<'a>(text: &'a str, name: &str) -> Option<&'a str> {
    let key = format!("mpc.{name}");
    let mut from = 0;
    while let Some(pos) = text[from..].find(&key) {
        let start = from + pos + key.len();
        let rest = &text[start..];
        let trimmed = rest.trim_start();
        if let Some(after_eq) = trimmed.strip_prefix('=') {
            return Some(after_eq);
        }
        from = start;
    }
    None
}

fn parse_scalar(text: &str, name: &str) -> Result<f64, GridError> {
    let rest = find_assignment(text, name)
        .ok_or_else(|| GridError::MalformedFile(format!("missing mpc.{name}")))?;
    let end = rest.find(';').unwrap_or(rest.len());
    rest[..end]
        .trim()
        .parse::<f64>()
        .map_err(|_| GridError::MalformedFile(format!("mpc.{name} is not a number")))
}

fn parse_matrix(text: &str, name: &str) -> Result<Option<Vec<Vec<f64>>>, GridError> {
    let Some(rest) = find_assignment(text, name) else {
        return Ok(None);
    };
    let rest = rest.trim_start();
    let body = rest
        .strip_prefix('[')
        .ok_or_else(|| GridError::MalformedFile(format!("mpc.{name} is not a matrix")))?;
    let end = body
        .find(']')
        .ok_or_else(|| GridError::MalformedFile(format!("mpc.{name} is not terminated")))?;
    let mut rows = Vec::new();
    for chunk in body[..end].split(|c| c == ';' || c == '\n') {
        let tokens: Vec<&str> = chunk
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty() && *t != "...")
            .collect();
        if tokens.is_empty() {
            continue;
        }
        let row = tokens
            .iter()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| GridError::MalformedFile(format!("bad number {t:?} in mpc.{name}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    if let Some(first) = rows.first() {
        let w = first.len();
        if rows.iter().any(|r| r.len() != w) {
            return Err(GridError::MalformedFile(format!("ragged rows in mpc.{name}")));
        }
    }
    Ok(Some(rows))
}

fn require(rows: Option<Vec<Vec<f64>>>, name: &str, min_cols: usize) -> Result<Vec<Vec<f64>>, GridError> {
    let rows = rows.ok_or_else(|| GridError::MalformedFile(format!("missing mpc.{name}")))?;
    if let Some(r) = rows.first() {
        if r.len() < min_cols {
            return Err(GridError::MalformedFile(format!(
                "mpc.{name} needs at least {min_cols} columns"
            )));
        }
    }
    Ok(rows)
}

fn as_id(v: f64, what: &str) -> Result<u32, GridError> {
    if v.fract() != 0.0 || v < 0.0 || v > u32::MAX as f64 {
        return Err(GridError::MalformedFile(format!("{what} {v} is not an integer id")));
    }
    Ok(v as u32)
}

/// Parses a MATPOWER version 2 case file.
pub fn parse_matpower(text: &str) -> Result<GridCase, GridError> {
    let text = strip_comments(text);
    let base_mva = parse_scalar(&text, "baseMVA")?;
    let bus_rows = require(parse_matrix(&text, "bus")?, "bus", 13)?;
    let gen_rows = require(parse_matrix(&text, "gen")?, "gen", 10)?;
    let branch_rows = require(parse_matrix(&text, "branch")?, "branch", 11)?;
    let cost_rows = parse_matrix(&text, "gencost")?
        .ok_or_else(|| GridError::UnsupportedCost("missing mpc.gencost".into()))?;

    let mut buses = Vec::with_capacity(bus_rows.len());
    for r in &bus_rows {
        let id = as_id(r[0], "bus")?;
        let kind = match r[1] as i64 {
            1 => BusKind::Pq,
            2 => BusKind::Pv,
            3 => BusKind::Ref,
            t => {
                return Err(GridError::ValidationError(format!(
                    "bus {id} has unsupported type {t}"
                )))
            }
        };
        buses.push(Bus {
            id,
            kind,
            pd: r[2],
            qd: r[3],
            gs: r[4],
            bs: r[5],
            vm0: r[7],
            va0: r[8].to_radians(),
            base_kv: r[9],
            vmax: r[11],
            vmin: r[12],
        });
    }
    let index: HashMap<u32, usize> = buses.iter().enumerate().map(|(k, b)| (b.id, k)).collect();
    let lookup = |v: f64, what: &str| -> Result<usize, GridError> {
        let id = as_id(v, what)?;
        index
            .get(&id)
            .copied()
            .ok_or_else(|| GridError::ValidationError(format!("{what} references unknown bus {id}")))
    };

    if cost_rows.len() < gen_rows.len() {
        return Err(GridError::UnsupportedCost(format!(
            "{} cost rows for {} generators",
            cost_rows.len(),
            gen_rows.len()
        )));
    }
    let mut generators = Vec::with_capacity(gen_rows.len());
    for (r, c) in gen_rows.iter().zip(&cost_rows) {
        generators.push(Generator {
            bus: lookup(r[0], "generator")?,
            pg0: r[1],
            qg0: r[2],
            qmax: r[3],
            qmin: r[4],
            vg: r[5],
            in_service: r[7] > 0.0,
            pmax: r[8],
            pmin: r[9],
            cost: parse_cost(c)?,
        });
    }

    let mut branches = Vec::with_capacity(branch_rows.len());
    for r in &branch_rows {
        branches.push(Branch {
            from: lookup(r[0], "branch")?,
            to: lookup(r[1], "branch")?,
            r: r[2],
            x: r[3],
            b: r[4],
            rate_a: r[5],
            tap: r[8],
            shift: r[9].to_radians(),
            in_service: r[10] > 0.0,
        });
    }

    let grid = GridCase {
        base_mva,
        buses,
        branches,
        generators,
    };
    grid.validate()?;
    Ok(grid)
}

fn parse_cost(row: &[f64]) -> Result<Cost, GridError> {
    if row.len() < 4 {
        return Err(GridError::UnsupportedCost("short gencost row".into()));
    }
    if row[0] != 2.0 {
        return Err(GridError::UnsupportedCost(format!("cost model {} is not polynomial", row[0])));
    }
    let n = row[3] as usize;
    if n > 3 {
        return Err(GridError::UnsupportedCost(format!("polynomial degree {} exceeds 2", n - 1)));
    }
    if row.len() < 4 + n {
        return Err(GridError::UnsupportedCost("gencost row shorter than its degree".into()));
    }
    let mut coef = [0.0; 3];
    for k in 0..n {
        coef[3 - n + k] = row[4 + k];
    }
    Ok(Cost {
        a: coef[0],
        b: coef[1],
        c: coef[2],
    })
}

/// Shortest decimal degree value whose conversion back to radians is exact.
fn degrees_exact(rad: f64) -> f64 {
    let deg = rad.to_degrees();
    if deg.to_radians() == rad {
        return deg;
    }
    let mut lo = deg;
    let mut hi = deg;
    for _ in 0..64 {
        lo = next_toward(lo, f64::NEG_INFINITY);
        hi = next_toward(hi, f64::INFINITY);
        if lo.to_radians() == rad {
            return lo;
        }
        if hi.to_radians() == rad {
            return hi;
        }
    }
    rad * 180.0 / PI
}

fn next_toward(x: f64, dir: f64) -> f64 {
    if x == dir {
        return x;
    }
    if x == 0.0 {
        let tiny = f64::from_bits(1);
        return if dir > 0.0 { tiny } else { -tiny };
    }
    let bits = x.to_bits();
    let up = (dir > x) == (x > 0.0);
    f64::from_bits(if up { bits + 1 } else { bits - 1 })
}

/// Writes a case back in MATPOWER version 2 layout.
pub fn to_matpower(grid: &GridCase) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "function mpc = case_export\nmpc.version = '2';");
    let _ = writeln!(s, "mpc.baseMVA = {};", grid.base_mva);
    s.push_str("mpc.bus = [\n");
    for b in &grid.buses {
        let t = match b.kind {
            BusKind::Pq => 1,
            BusKind::Pv => 2,
            BusKind::Ref => 3,
        };
        let _ = writeln!(
            s,
            "\t{}\t{}\t{}\t{}\t{}\t{}\t1\t{}\t{}\t{}\t1\t{}\t{};",
            b.id,
            t,
            b.pd,
            b.qd,
            b.gs,
            b.bs,
            b.vm0,
            degrees_exact(b.va0),
            b.base_kv,
            b.vmax,
            b.vmin
        );
    }
    s.push_str("];\nmpc.gen = [\n");
    for g in &grid.generators {
        let _ = writeln!(
            s,
            "\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{};",
            grid.buses[g.bus].id,
            g.pg0,
            g.qg0,
            g.qmax,
            g.qmin,
            g.vg,
            grid.base_mva,
            u8::from(g.in_service),
            g.pmax,
            g.pmin
        );
    }
    s.push_str("];\nmpc.branch = [\n");
    for br in &grid.branches {
        let _ = writeln!(
            s,
            "\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t-360\t360;",
            grid.buses[br.from].id,
            grid.buses[br.to].id,
            br.r,
            br.x,
            br.b,
            br.rate_a,
            br.rate_a,
            br.rate_a,
            br.tap,
            degrees_exact(br.shift),
            u8::from(br.in_service)
        );
    }
    s.push_str("];\nmpc.gencost = [\n");
    for g in &grid.generators {
        let _ = writeln!(s, "\t2\t0\t0\t3\t{}\t{}\t{};", g.cost.a, g.cost.b, g.cost.c);
    }
    s.push_str("];\n");
    s
}

/// Branch π-model admittances `[y_ff, y_ft, y_tf, y_tt]`.
pub fn branch_admittance(br: &Branch) -> [Complex64; 4] {
    if !br.in_service {
        return [Complex64::new(0.0, 0.0); 4];
    }
    let ys = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
    let t = Complex64::from_polar(br.ratio(), br.shift);
    let ytt = ys + Complex64::new(0.0, br.b / 2.0);
    let yff = ytt / (t * t.conj()).re;
    let yft = -ys / t.conj();
    let ytf = -ys / t;
    [yff, yft, ytf, ytt]
}

pub fn build_admittance(grid: &GridCase) -> AdmittanceMatrix {
    let nb = grid.n_b();
    let nl = grid.n_l();
    let branch_y: Vec<[Complex64; 4]> = grid.branches.iter().map(branch_admittance).collect();
    let mut yf = TriMat::new((nl, nb));
    let mut yt = TriMat::new((nl, nb));
    let mut cf = TriMat::new((nl, nb));
    let mut ct = TriMat::new((nl, nb));
    let mut ybus = TriMat::new((nb, nb));
    for (l, (br, y)) in grid.branches.iter().zip(&branch_y).enumerate() {
        cf.add_triplet(l, br.from, 1.0);
        ct.add_triplet(l, br.to, 1.0);
        if !br.in_service {
            continue;
        }
        let [yff, yft, ytf, ytt] = *y;
        yf.add_triplet(l, br.from, yff);
        yf.add_triplet(l, br.to, yft);
        yt.add_triplet(l, br.from, ytf);
        yt.add_triplet(l, br.to, ytt);
        ybus.add_triplet(br.from, br.from, yff);
        ybus.add_triplet(br.from, br.to, yft);
        ybus.add_triplet(br.to, br.from, ytf);
        ybus.add_triplet(br.to, br.to, ytt);
    }
    for (k, b) in grid.buses.iter().enumerate() {
        ybus.add_triplet(k, k, Complex64::new(b.gs, b.bs) / grid.base_mva);
    }
    AdmittanceMatrix {
        ybus: ybus.to_csr(),
        yf: yf.to_csr(),
        yt: yt.to_csr(),
        cf: cf.to_csr(),
        ct: ct.to_csr(),
        branch_y,
    }
}

fn find(parent: &mut [usize], mut a: usize) -> usize {
    while parent[a] != a {
        parent[a] = parent[parent[a]];
        a = parent[a];
    }
    a
}

/// True when all buses are joined by in-service branches.
pub fn is_connected(grid: &GridCase) -> bool {
    let n = grid.n_b();
    let mut parent: Vec<usize> = (0..n).collect();
    let mut components = n;
    for br in grid.branches.iter().filter(|b| b.in_service) {
        let (a, b) = (find(&mut parent, br.from), find(&mut parent, br.to));
        if a != b {
            parent[a] = b;
            components -= 1;
        }
    }
    components <= 1
}

/// Returns a copy of `grid` with the contingency's branch switched out.
pub fn apply_contingency(grid: &GridCase, c: &Contingency) -> Result<GridCase, GridError> {
    let br = grid.branches.get(c.outaged_branch).ok_or_else(|| {
        GridError::ValidationError(format!("contingency {} names a missing branch", c.label))
    })?;
    if !br.in_service {
        return Err(GridError::ValidationError(format!(
            "contingency {} names an out-of-service branch",
            c.label
        )));
    }
    let mut out = grid.clone();
    out.branches[c.outaged_branch].in_service = false;
    if !is_connected(&out) {
        return Err(GridError::IslandingError(c.label.clone()));
    }
    Ok(out)
}

/// One contingency per in-service branch.
pub fn all_line_contingencies(grid: &GridCase) -> Vec<Contingency> {
    (0..grid.n_l())
        .filter(|&l| grid.branches[l].in_service)
        .map(Contingency::line)
        .collect()
}

/// Keeps the candidates that leave the grid connected, admit a power flow
/// at the case's stored dispatch and violate generator reactive limits by
/// at most `q_viol_tol` MVAr in total.
pub fn screen_contingencies(
    grid: &GridCase,
    candidates: &[Contingency],
    q_viol_tol: f64,
) -> Vec<Contingency> {
    use crate::powerflow::{newton_pf, setpoint_controls, PfPartition};

    candidates
        .iter()
        .filter(|c| {
            let Ok(post) = apply_contingency(grid, c) else {
                return false;
            };
            let y = build_admittance(&post);
            let part = PfPartition::new(&post);
            let u = setpoint_controls(&post, &part);
            let Ok(sol) = newton_pf(&post, &y, &u, 1e-10, 30) else {
                return false;
            };
            let mut viol = 0.0;
            for (k, g) in post.generators.iter().enumerate() {
                if !g.in_service {
                    continue;
                }
                let q = sol.state.qg[k] * post.base_mva;
                viol += (q - g.qmax).max(0.0) + (g.qmin - q).max(0.0);
            }
            viol <= q_viol_tol
        })
        .cloned()
        .collect()
}
