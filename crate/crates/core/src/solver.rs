//! Primal-dual interior point solver for [`ConicProblem`]s.
//!
//! The problem is put in the form
//!
//! ```text
//! minimize  c'x   s.t.  A x = b,   s = h + F x,   s in K
//! ```
//!
//! where `K` is a product of PSD cones (one per block) and a nonnegative
//! orthant (the affine inequalities). It is solved through the homogeneous
//! self-dual embedding with Nesterov-Todd scaling and a Mehrotra
//! predictor-corrector, so infeasibility shows up as a certificate instead
//! of a diverging iterate.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sdpbuild::ConicProblem;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub tol_gap: f64,
    pub tol_feas: f64,
    pub max_iters: usize,
    pub step_fraction: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            tol_gap: 1e-8,
            tol_feas: 1e-8,
            max_iters: 200,
            step_fraction: 0.98,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<(), SolveError> {
        let ok = self.tol_gap > 0.0
            && self.tol_feas > 0.0
            && self.max_iters >= 1
            && self.step_fraction > 0.0
            && self.step_fraction < 1.0;
        if ok {
            Ok(())
        } else {
            Err(SolveError::Settings)
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SolveError {
    #[error("invalid solver settings")]
    Settings,
    #[error("primal vector has {got} entries, problem has {expected} variables")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    PrimalInfeasible,
    DualInfeasibleOrUnbounded,
    MaxIters,
    NumericalFailure,
}

impl SolveStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::PrimalInfeasible => "primal_infeasible",
            SolveStatus::DualInfeasibleOrUnbounded => "dual_infeasible_or_unbounded",
            SolveStatus::MaxIters => "max_iters",
            SolveStatus::NumericalFailure => "numerical_failure",
        }
    }
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Relative residuals of the last iterate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Residuals {
    pub primal_eq: f64,
    pub dual: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub status: SolveStatus,
    /// Objective in original units (respecting the problem direction).
    pub value: Option<f64>,
    /// Dual objective in the same units.
    pub dual_value: Option<f64>,
    pub primal: Vec<f64>,
    pub residuals: Residuals,
    pub iterations: usize,
    /// Set on `NumericalFailure`.
    pub diagnostics: Option<String>,
}

/// Constraint violations of a point, computed directly from the problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub max_eq_violation: f64,
    pub block_min_eigs: Vec<f64>,
    pub min_psd_eig: f64,
    pub min_ineq_slack: f64,
}

impl ResidualReport {
    pub fn feasible_within(&self, tol: f64) -> bool {
        self.max_eq_violation <= tol && self.min_psd_eig >= -tol && self.min_ineq_slack >= -tol
    }
}

pub fn residual_report(p: &ConicProblem, x: &[f64]) -> Result<ResidualReport, SolveError> {
    if x.len() != p.n_vars() {
        return Err(SolveError::Dimension {
            expected: p.n_vars(),
            got: x.len(),
        });
    }
    let max_eq_violation = p
        .equalities
        .iter()
        .map(|r| r.expr.eval(x).abs())
        .fold(0.0, f64::max);
    let block_min_eigs: Vec<f64> = p
        .psd_blocks
        .iter()
        .map(|b| min_eig(&b.eval(x)))
        .collect();
    let min_psd_eig = block_min_eigs.iter().copied().fold(f64::INFINITY, f64::min);
    let min_ineq_slack = p
        .inequalities
        .iter()
        .map(|e| e.eval(x))
        .fold(f64::INFINITY, f64::min);
    Ok(ResidualReport {
        max_eq_violation,
        block_min_eigs,
        min_psd_eig,
        min_ineq_slack,
    })
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

// ---------------------------------------------------------------------------
// block vectors

#[derive(Debug, Clone)]
enum Blk {
    S(DMatrix<f64>),
    V(DVector<f64>),
}

type Bv = Vec<Blk>;

impl Blk {
    fn dot(&self, o: &Blk) -> f64 {
        match (self, o) {
            (Blk::S(a), Blk::S(b)) => a.dot(b),
            (Blk::V(a), Blk::V(b)) => a.dot(b),
            _ => unreachable!("block kinds differ"),
        }
    }

    fn axpy(&mut self, alpha: f64, o: &Blk) {
        match (self, o) {
            (Blk::S(a), Blk::S(b)) => a.zip_apply(b, |x, y| *x += alpha * y),
            (Blk::V(a), Blk::V(b)) => a.axpy(alpha, b, 1.0),
            _ => unreachable!("block kinds differ"),
        }
    }

    fn scaled(&self, f: f64) -> Blk {
        match self {
            Blk::S(a) => Blk::S(a * f),
            Blk::V(a) => Blk::V(a * f),
        }
    }

    fn add_identity(&mut self, t: f64) {
        match self {
            Blk::S(a) => {
                for i in 0..a.nrows() {
                    a[(i, i)] += t;
                }
            }
            Blk::V(a) => a.add_scalar_mut(t),
        }
    }

    fn min_eig(&self) -> f64 {
        match self {
            Blk::S(a) => min_eig(a),
            Blk::V(a) if a.is_empty() => f64::INFINITY,
            Blk::V(a) => a.min(),
        }
    }
}

fn bv_dot(a: &Bv, b: &Bv) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

fn bv_norm(a: &Bv) -> f64 {
    bv_dot(a, a).sqrt()
}

fn bv_axpy(y: &mut Bv, alpha: f64, x: &Bv) {
    for (u, v) in y.iter_mut().zip(x) {
        u.axpy(alpha, v);
    }
}

fn bv_scaled(a: &Bv, f: f64) -> Bv {
    a.iter().map(|b| b.scaled(f)).collect()
}

fn bv_sub(a: &Bv, b: &Bv) -> Bv {
    let mut out = a.clone();
    bv_axpy(&mut out, -1.0, b);
    out
}

// ---------------------------------------------------------------------------
// problem data

#[derive(Clone)]
struct Entry {
    a: usize,
    b: usize,
    /// svec weight: sqrt(2) off the diagonal, 1/sqrt(2) on it
    w: f64,
    terms: Vec<(usize, f64)>,
}

#[derive(Clone)]
struct Cone {
    psd: bool,
    dim: usize,
    h: Blk,
    entries: Vec<Entry>,
}

impl Cone {
    fn degree(&self) -> usize {
        self.dim
    }

    /// `F x` for this cone.
    fn apply(&self, x: &DVector<f64>) -> Blk {
        if !self.psd {
            let mut u = DVector::zeros(self.dim);
            for e in &self.entries {
                u[e.a] = e.terms.iter().map(|&(k, c)| c * x[k]).sum();
            }
            return Blk::V(u);
        }
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for e in &self.entries {
            let v: f64 = e.terms.iter().map(|&(k, c)| c * x[k]).sum();
            m[(e.a, e.b)] = v;
            m[(e.b, e.a)] = v;
        }
        Blk::S(m)
    }

    /// `out += F' z`.
    fn apply_t(&self, z: &Blk, out: &mut DVector<f64>) {
        for e in &self.entries {
            let w = match z {
                Blk::S(m) if e.a == e.b => m[(e.a, e.a)],
                Blk::S(m) => m[(e.a, e.b)] + m[(e.b, e.a)],
                Blk::V(u) => u[e.a],
            };
            for &(k, c) in &e.terms {
                out[k] += c * w;
            }
        }
    }

    /// `M += F' (Q (.) Q) F`.
    fn schur_add(&self, nt: &Nt, m: &mut DMatrix<f64>) {
        match nt {
            Nt::S { q, .. } => {
                let n = self.entries.len();
                for i in 0..n {
                    let ei = &self.entries[i];
                    if ei.terms.is_empty() {
                        continue;
                    }
                    for j in i..n {
                        let ej = &self.entries[j];
                        if ej.terms.is_empty() {
                            continue;
                        }
                        let (a, b, c, d) = (ei.a, ei.b, ej.a, ej.b);
                        let t = (q[(a, c)] * q[(b, d)] + q[(a, d)] * q[(b, c)]) * ei.w * ej.w;
                        if t == 0.0 {
                            continue;
                        }
                        for &(k, ck) in &ei.terms {
                            for &(l, cl) in &ej.terms {
                                let v = ck * cl * t;
                                m[(k, l)] += v;
                                if i != j {
                                    m[(l, k)] += v;
                                }
                            }
                        }
                    }
                }
            }
            Nt::V { d, .. } => {
                for e in &self.entries {
                    let qi = 1.0 / (d[e.a] * d[e.a]);
                    for &(k, ck) in &e.terms {
                        for &(l, cl) in &e.terms {
                            m[(k, l)] += ck * cl * qi;
                        }
                    }
                }
            }
        }
    }

}

struct Standard {
    n: usize,
    c: DVector<f64>,
    a: DMatrix<f64>,
    b: DVector<f64>,
    cones: Vec<Cone>,
    /// `A' = Q1 R`; columns of `null` complete `Q1` to an orthonormal basis
    q1: DMatrix<f64>,
    r: DMatrix<f64>,
    null: DMatrix<f64>,
}

impl Standard {
    fn from_problem(p: &ConicProblem, red: &Reduction) -> Result<Standard, ()> {
        let n = red.vars.len();
        let mut index = vec![usize::MAX; p.n_vars()];
        for (i, &v) in red.vars.iter().enumerate() {
            index[v] = i;
        }
        let remap = |terms: &[(usize, f64)]| -> Vec<(usize, f64)> {
            terms
                .iter()
                .filter(|t| index[t.0] != usize::MAX)
                .map(|&(k, c)| (index[k], c))
                .collect()
        };
        let mut c = DVector::zeros(n);
        for &(k, v) in &p.objective {
            c[index[k]] += v;
        }
        let (a, b) = reduce_equalities(p, &index, n)?;

        let mut cones = Vec::new();
        for (blk, rows) in p.psd_blocks.iter().zip(&red.rows) {
            let d = rows.len();
            if d == 0 {
                continue;
            }
            let mut h = DMatrix::zeros(d, d);
            let mut entries = Vec::new();
            for i in 0..d {
                for j in i..d {
                    let e = blk.entry(rows[i], rows[j]);
                    h[(i, j)] = e.constant;
                    h[(j, i)] = e.constant;
                    let w = if i == j {
                        std::f64::consts::FRAC_1_SQRT_2
                    } else {
                        std::f64::consts::SQRT_2
                    };
                    entries.push(Entry {
                        a: i,
                        b: j,
                        w,
                        terms: remap(&e.terms),
                    });
                }
            }
            cones.push(Cone {
                psd: true,
                dim: d,
                h: Blk::S(h),
                entries,
            });
        }
        if !p.inequalities.is_empty() {
            let m = p.inequalities.len();
            cones.push(Cone {
                psd: false,
                dim: m,
                h: Blk::V(DVector::from_iterator(m, p.inequalities.iter().map(|e| e.constant))),
                entries: p
                    .inequalities
                    .iter()
                    .enumerate()
                    .map(|(i, e)| Entry {
                        a: i,
                        b: i,
                        w: 1.0,
                        terms: remap(&e.terms),
                    })
                    .collect(),
            });
        }
        Ok(Standard::new(c, a, b, cones))
    }

    fn new(c: DVector<f64>, a: DMatrix<f64>, b: DVector<f64>, cones: Vec<Cone>) -> Standard {
        let n = c.len();
        let p = a.nrows();
        let mut aug = DMatrix::zeros(n, p + n);
        aug.view_mut((0, 0), (n, p)).copy_from(&a.transpose());
        aug.view_mut((0, p), (n, n)).fill_with_identity();
        let qr = aug.qr();
        let q = qr.q();
        let r = qr.r().view((0, 0), (p, p)).into_owned();
        let q1 = q.columns(0, p).into_owned();
        let null = q.columns(p, n - p).into_owned();
        Standard {
            n,
            c,
            a,
            b,
            cones,
            q1,
            r,
            null,
        }
    }

    fn f(&self, x: &DVector<f64>) -> Bv {
        self.cones.iter().map(|c| c.apply(x)).collect()
    }

    fn ft(&self, z: &Bv) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        for (c, zb) in self.cones.iter().zip(z) {
            c.apply_t(zb, &mut out);
        }
        out
    }

    fn h(&self) -> Bv {
        self.cones.iter().map(|c| c.h.clone()).collect()
    }

    fn degree(&self) -> usize {
        self.cones.iter().map(Cone::degree).sum()
    }
}

/// Rows of each PSD block and variables that survive presolve.
///
/// A variable that enters no equality, inequality or the objective and sits
/// only on block diagonals with positive sign can grow without bound at no
/// cost, which leaves the optimal face unbounded and stalls the interior
/// point iteration. Dropping the rows whose diagonal holds such a variable
/// only loosens the problem (principal submatrices of a PSD matrix are PSD)
/// and keeps its optimal value, because a strictly feasible reduced point
/// extends to the full blocks once those diagonals are large enough.
struct Reduction {
    rows: Vec<Vec<usize>>,
    vars: Vec<usize>,
    /// free diagonal variables and block rows, grouped by the round that released them
    rounds: Vec<(Vec<usize>, Vec<(usize, usize)>)>,
}

fn facial_reduction(p: &ConicProblem) -> Reduction {
    let n = p.n_vars();
    let mut pinned = vec![false; n];
    for &(k, _) in &p.objective {
        pinned[k] = true;
    }
    for e in p.equalities.iter().map(|r| &r.expr).chain(&p.inequalities) {
        for &(k, _) in &e.terms {
            pinned[k] = true;
        }
    }
    let mut active: Vec<Vec<bool>> = p.psd_blocks.iter().map(|b| vec![true; b.dim]).collect();
    let mut rounds = Vec::new();
    loop {
        let mut bad = pinned.clone();
        let mut diag: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for (bi, b) in p.psd_blocks.iter().enumerate() {
            for i in (0..b.dim).filter(|&i| active[bi][i]) {
                for j in (i..b.dim).filter(|&j| active[bi][j]) {
                    for &(k, c) in &b.entry(i, j).terms {
                        if i == j && c > 0.0 {
                            diag[k].push((bi, i));
                        } else {
                            bad[k] = true;
                        }
                    }
                }
            }
        }
        let vars: Vec<usize> = (0..n).filter(|&k| !bad[k] && !diag[k].is_empty()).collect();
        if vars.is_empty() {
            break;
        }
        let mut cells = Vec::new();
        for &k in &vars {
            for &(bi, i) in &diag[k] {
                active[bi][i] = false;
                cells.push((bi, i));
            }
        }
        rounds.push((vars, cells));
    }
    let rows: Vec<Vec<usize>> = active
        .iter()
        .map(|a| (0..a.len()).filter(|&i| a[i]).collect())
        .collect();
    let mut used = pinned;
    for (b, r) in p.psd_blocks.iter().zip(&rows) {
        for (x, &i) in r.iter().enumerate() {
            for &j in &r[x..] {
                for &(k, _) in &b.entry(i, j).terms {
                    used[k] = true;
                }
            }
        }
    }
    Reduction {
        rows,
        vars: (0..n).filter(|&k| used[k]).collect(),
        rounds,
    }
}

/// Lift a reduced solution back to all variables, raising the dropped
/// diagonals round by round, last released first, until each enlarged
/// principal submatrix is as close to PSD as the reduced one.
fn lift(p: &ConicProblem, red: &Reduction, xr: &DVector<f64>) -> Vec<f64> {
    let mut x = vec![0.0; p.n_vars()];
    for (i, &v) in red.vars.iter().enumerate() {
        x[v] = xr[i];
    }
    let mut rows = red.rows.clone();
    let worst = |x: &[f64], rows: &[Vec<usize>]| {
        p.psd_blocks
            .iter()
            .zip(rows)
            .filter(|(_, r)| !r.is_empty())
            .map(|(b, r)| {
                let m = b.eval(x);
                let sub = DMatrix::from_fn(r.len(), r.len(), |i, j| m[(r[i], r[j])]);
                min_eig(&sub) / sub.amax().max(1.0)
            })
            .fold(0.0f64, f64::min)
    };
    let target = worst(&x, &rows) - 1e-12;
    let mut t = 1.0 + xr.amax();
    for (vars, cells) in red.rounds.iter().rev() {
        for &(bi, i) in cells {
            rows[bi].push(i);
        }
        for _ in 0..60 {
            for &k in vars {
                x[k] = t;
            }
            if worst(&x, &rows) >= target {
                break;
            }
            t *= 4.0;
        }
        t *= 4.0;
    }
    x
}

/// Row-equilibrate the equalities and drop linearly dependent rows.
/// Fails if a dependent row is inconsistent with the rest.
fn reduce_equalities(p: &ConicProblem, index: &[usize], n: usize) -> Result<(DMatrix<f64>, DVector<f64>), ()> {
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    let mut basis: Vec<(DVector<f64>, f64)> = Vec::new();
    for row in &p.equalities {
        let mut a: DVector<f64> = DVector::zeros(n);
        for &(k, v) in &row.expr.terms {
            a[index[k]] += v;
        }
        let b = -row.expr.constant;
        let nrm = a.norm();
        if nrm == 0.0 {
            if b.abs() > 1e-12 {
                return Err(());
            }
            continue;
        }
        let a = a / nrm;
        let b = b / nrm;
        let mut v = a.clone();
        let mut beta = b;
        for _ in 0..2 {
            for (q, qb) in &basis {
                let c = v.dot(q);
                v.axpy(-c, q, 1.0);
                beta -= c * qb;
            }
        }
        let vn = v.norm();
        if vn <= 1e-10 {
            if beta.abs() > 1e-8 * (1.0 + b.abs()) {
                return Err(());
            }
            continue;
        }
        basis.push((v / vn, beta / vn));
        rows.push((a, b));
    }
    let m = rows.len();
    let mut a = DMatrix::zeros(m, n);
    let mut b = DVector::zeros(m);
    for (i, (r, v)) in rows.into_iter().enumerate() {
        a.set_row(i, &r.transpose());
        b[i] = v;
    }
    Ok((a, b))
}

// ---------------------------------------------------------------------------
// Nesterov-Todd scaling

enum Nt {
    /// `W(z) = R' z R`, `W^{-T}(s) = R^{-1} s R^{-T}`, `q = (R R')^{-1}`
    S {
        r: DMatrix<f64>,
        rinv: DMatrix<f64>,
        q: DMatrix<f64>,
        lam: DVector<f64>,
    },
    /// `W(z) = d z`, `W^{-T}(s) = s / d`
    V { d: DVector<f64>, lam: DVector<f64> },
}

impl Nt {
    fn identity(c: &Cone) -> Nt {
        if c.psd {
            let i = DMatrix::identity(c.dim, c.dim);
            Nt::S {
                r: i.clone(),
                rinv: i.clone(),
                q: i,
                lam: DVector::from_element(c.dim, 1.0),
            }
        } else {
            Nt::V {
                d: DVector::from_element(c.dim, 1.0),
                lam: DVector::from_element(c.dim, 1.0),
            }
        }
    }

    /// Scaling for the pair `(s, z)` given as `W_old^T(st)`, `W_old^{-1}(zt)`.
    fn rescaled(&self, st: &Blk, zt: &Blk) -> Option<Nt> {
        match (self, st, zt) {
            (Nt::S { r, rinv, .. }, Blk::S(st), Blk::S(zt)) => {
                let l1 = Cholesky::new(st.clone())?.unpack();
                let l2 = Cholesky::new(zt.clone())?.unpack();
                let svd = (l2.transpose() * &l1).svd(true, true);
                let u = svd.u?;
                let vt = svd.v_t?;
                let lam = svd.singular_values;
                if lam.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                    return None;
                }
                let isq = lam.map(|v| 1.0 / v.sqrt());
                let mut rv = r * l1 * vt.transpose();
                for (j, mut col) in rv.column_iter_mut().enumerate() {
                    col *= isq[j];
                }
                let mut ri = u.transpose() * l2.transpose() * rinv;
                for (i, mut row) in ri.row_iter_mut().enumerate() {
                    row *= isq[i];
                }
                let q = ri.transpose() * &ri;
                Some(Nt::S {
                    r: rv,
                    rinv: ri,
                    q,
                    lam,
                })
            }
            (Nt::V { d, .. }, Blk::V(st), Blk::V(zt)) => {
                if st.iter().chain(zt.iter()).any(|&v| !(v > 0.0)) {
                    return None;
                }
                let nd = d.component_mul(&st.zip_map(zt, |a, b| (a / b).sqrt()));
                let lam = st.zip_map(zt, |a, b| (a * b).sqrt());
                Some(Nt::V { d: nd, lam })
            }
            _ => unreachable!("block kinds differ"),
        }
    }

    /// `W^T u`
    fn wt(&self, u: &Blk) -> Blk {
        match (self, u) {
            (Nt::S { r, .. }, Blk::S(u)) => Blk::S(r * u * r.transpose()),
            (Nt::V { d, .. }, Blk::V(u)) => Blk::V(d.component_mul(u)),
            _ => unreachable!(),
        }
    }

    /// `W^{-T} s`
    fn winv_t(&self, s: &Blk) -> Blk {
        match (self, s) {
            (Nt::S { rinv, .. }, Blk::S(s)) => Blk::S(rinv * s * rinv.transpose()),
            (Nt::V { d, .. }, Blk::V(s)) => Blk::V(s.component_div(d)),
            _ => unreachable!(),
        }
    }

    /// `W^{-1} u`
    fn winv(&self, u: &Blk) -> Blk {
        match (self, u) {
            (Nt::S { rinv, .. }, Blk::S(u)) => Blk::S(rinv.transpose() * u * rinv),
            (Nt::V { d, .. }, Blk::V(u)) => Blk::V(u.component_div(d)),
            _ => unreachable!(),
        }
    }

    /// `lam o lam`
    fn lam_sq(&self) -> Blk {
        match self {
            Nt::S { lam, .. } => Blk::S(DMatrix::from_diagonal(&lam.map(|v| v * v))),
            Nt::V { lam, .. } => Blk::V(lam.map(|v| v * v)),
        }
    }

    /// Solve `lam o x = u` for `x`.
    fn lam_div(&self, u: &Blk) -> Blk {
        match (self, u) {
            (Nt::S { lam, .. }, Blk::S(u)) => {
                Blk::S(DMatrix::from_fn(u.nrows(), u.ncols(), |i, j| {
                    2.0 * u[(i, j)] / (lam[i] + lam[j])
                }))
            }
            (Nt::V { lam, .. }, Blk::V(u)) => Blk::V(u.component_div(lam)),
            _ => unreachable!(),
        }
    }

    /// Largest `a` with `lam + a u` in the cone.
    fn max_step(&self, u: &Blk) -> f64 {
        let e = match (self, u) {
            (Nt::S { lam, .. }, Blk::S(u)) => {
                let isq = lam.map(|v| 1.0 / v.sqrt());
                let m = DMatrix::from_fn(u.nrows(), u.ncols(), |i, j| {
                    0.5 * (u[(i, j)] + u[(j, i)]) * isq[i] * isq[j]
                });
                min_eig(&m)
            }
            (Nt::V { lam, .. }, Blk::V(u)) => u.component_div(lam).iter().copied().fold(f64::INFINITY, f64::min),
            _ => unreachable!(),
        };
        if e < 0.0 {
            -1.0 / e
        } else {
            f64::INFINITY
        }
    }
}

/// Jordan product `u o v`.
fn jordan(u: &Blk, v: &Blk) -> Blk {
    match (u, v) {
        (Blk::S(u), Blk::S(v)) => {
            let p = u * v;
            Blk::S((&p + p.transpose()) * 0.5)
        }
        (Blk::V(u), Blk::V(v)) => Blk::V(u.component_mul(v)),
        _ => unreachable!(),
    }
}

// ---------------------------------------------------------------------------
// KKT system
//
//   A' dy - F' dz          = bx
//   A dx                   = by
//  -F dx - W'W dz          = bz

struct Kkt<'a> {
    std: &'a Standard,
    nt: &'a [Nt],
    /// Schur complement `F' (Q (.) Q) F`
    m: DMatrix<f64>,
    /// Cholesky factor of `N' M N` (`N` spans the null space of `A`)
    l: DMatrix<f64>,
}

fn regularized_cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Some(c);
    }
    let scale = m.diagonal().iter().copied().fold(1e-300, f64::max);
    let mut delta = 1e-14 * scale;
    for _ in 0..8 {
        let mut r = m.clone();
        for i in 0..r.nrows() {
            r[(i, i)] += delta;
        }
        if let Some(c) = Cholesky::new(r) {
            return Some(c);
        }
        delta *= 100.0;
    }
    None
}

impl<'a> Kkt<'a> {
    fn factor(std: &'a Standard, nt: &'a [Nt]) -> Option<Kkt<'a>> {
        let n = std.n;
        let mut m = DMatrix::zeros(n, n);
        for (c, w) in std.cones.iter().zip(nt) {
            c.schur_add(w, &mut m);
        }
        let mn = &m * &std.null;
        let mut red = std.null.transpose() * mn;
        let t = red.transpose();
        red = (red + t) * 0.5;
        let l = regularized_cholesky(&red)?.unpack();
        Some(Kkt { std, nt, m, l })
    }

    /// Solve `M dx + A' dy = r1`, `A dx = by`.
    fn solve_xy(&self, r1: &DVector<f64>, by: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let std = self.std;
        let mut dx = if by.is_empty() {
            DVector::zeros(std.n)
        } else {
            let u = std.r.transpose().solve_lower_triangular(by).expect("full row rank");
            &std.q1 * u
        };
        let mut rhs = std.null.transpose() * (r1 - &self.m * &dx);
        self.l.solve_lower_triangular_mut(&mut rhs);
        self.l.tr_solve_lower_triangular_mut(&mut rhs);
        dx += &std.null * rhs;
        let dy = if by.is_empty() {
            DVector::zeros(0)
        } else {
            let t = std.q1.transpose() * (r1 - &self.m * &dx);
            std.r.solve_upper_triangular(&t).expect("full row rank")
        };
        (dx, dy)
    }

    /// `W^{-T} F dx`, block by block.
    fn gtilde(&self, dx: &DVector<f64>) -> Bv {
        let fdx = self.std.f(dx);
        self.nt.iter().zip(&fdx).map(|(w, f)| w.winv_t(f)).collect()
    }

    /// `F' W^{-1} u`
    fn gtilde_t(&self, u: &Bv) -> DVector<f64> {
        let wu: Bv = self.nt.iter().zip(u).map(|(w, b)| w.winv(b)).collect();
        self.std.ft(&wu)
    }

    fn solve_once(&self, bx: &DVector<f64>, by: &DVector<f64>, bz: &Bv) -> (DVector<f64>, DVector<f64>, Bv) {
        let r1 = bx - self.gtilde_t(bz);
        let (dx, dy) = self.solve_xy(&r1, by);
        let mut dz = self.gtilde(&dx);
        bv_axpy(&mut dz, 1.0, bz);
        (dx, dy, bv_scaled(&dz, -1.0))
    }

    fn residual(
        &self,
        bx: &DVector<f64>,
        by: &DVector<f64>,
        bz: &Bv,
        dx: &DVector<f64>,
        dy: &DVector<f64>,
        dz: &Bv,
    ) -> (DVector<f64>, DVector<f64>, Bv) {
        let ex = bx - (self.std.a.transpose() * dy - self.gtilde_t(dz));
        let ey = by - &self.std.a * dx;
        let mut ez = bz.clone();
        bv_axpy(&mut ez, 1.0, &self.gtilde(dx));
        bv_axpy(&mut ez, 1.0, dz);
        (ex, ey, ez)
    }

    /// Solve the scaled system
    ///
    /// ```text
    /// A' dy - G' dz = bx,   A dx = by,   -G dx - dz = bz
    /// ```
    ///
    /// with `G = W^{-T} F`, followed by a few rounds of iterative refinement.
    fn solve(&self, bx: &DVector<f64>, by: &DVector<f64>, bz: &Bv) -> (DVector<f64>, DVector<f64>, Bv) {
        let (mut dx, mut dy, mut dz) = self.solve_once(bx, by, bz);
        let size = |x: &DVector<f64>, y: &DVector<f64>, z: &Bv| {
            let ny = if y.is_empty() { 0.0 } else { y.norm() };
            (x.norm_squared() + ny * ny + bv_dot(z, z)).sqrt()
        };
        let scale = size(bx, by, bz);
        let mut last = f64::INFINITY;
        for _ in 0..4 {
            let (ex, ey, ez) = self.residual(bx, by, bz, &dx, &dy, &dz);
            let r = size(&ex, &ey, &ez);
            if !(r < 0.5 * last) || r <= 1e-15 * scale {
                break;
            }
            last = r;
            let (cx, cy, cz) = self.solve_once(&ex, &ey, &ez);
            dx += cx;
            dy += cy;
            bv_axpy(&mut dz, 1.0, &cz);
        }
        (dx, dy, dz)
    }
}

// ---------------------------------------------------------------------------
// main loop

struct Iterate {
    x: DVector<f64>,
    y: DVector<f64>,
    s: Bv,
    z: Bv,
    tau: f64,
    kappa: f64,
}

struct Outcome {
    status: SolveStatus,
    x: DVector<f64>,
    pcost: f64,
    dcost: f64,
    residuals: Residuals,
    iterations: usize,
    diagnostics: Option<String>,
}

fn shift_into_cone(v: &mut Bv) {
    let nrm = bv_norm(v);
    let t = v.iter().map(|b| -b.min_eig()).fold(f64::NEG_INFINITY, f64::max);
    if t >= -1e-8 * nrm.max(1.0) {
        for b in v.iter_mut() {
            b.add_identity(1.0 + t);
        }
    }
}

/// Homogeneous self-dual interior point iteration. A run that stalls close to
/// the tolerances returns its best iterate as optimal, with a diagnostic.
fn hsde(std: &Standard, set: &SolverSettings) -> Outcome {
    let n = std.n;
    let h = std.h();
    let nu = std.degree() as f64;
    let resx0 = std.c.norm().max(1.0);
    let resy0 = std.b.norm().max(1.0);
    let resz0 = bv_norm(&h).max(1.0);

    // best iterate so far, measured in multiples of the tolerances; returned
    // when progress stalls close enough to the target
    let mut best: Option<(f64, usize, Outcome)> = None;
    const STALL_ITERS: usize = 8;
    const STALL_FACTOR: f64 = 100.0;
    let fallback = |best: Option<(f64, usize, Outcome)>, it: usize, why: &str| -> Option<Outcome> {
        let (merit, _, mut out) = best?;
        if merit > STALL_FACTOR {
            return None;
        }
        out.iterations = it;
        out.diagnostics = Some(format!("{why}; returned the best iterate (residuals within {merit:.1}x tolerance)"));
        Some(out)
    };
    let fail = |it: usize, msg: String, x: DVector<f64>| Outcome {
        status: SolveStatus::NumericalFailure,
        x,
        pcost: f64::NAN,
        dcost: f64::NAN,
        residuals: Residuals::default(),
        iterations: it,
        diagnostics: Some(msg),
    };

    // starting point from two least-squares solves with identity scaling
    let mut nt: Vec<Nt> = std.cones.iter().map(Nt::identity).collect();
    let (x0, s0, y0, z0) = {
        let Some(kkt) = Kkt::factor(std, &nt) else {
            return fail(0, "factorization failed at the starting point".into(), DVector::zeros(n));
        };
        // identity scaling, so scaled and unscaled blocks coincide
        let (x, _, zt) = kkt.solve(&DVector::zeros(n), &std.b, &h);
        let (_, y, z) = kkt.solve(&(-&std.c), &DVector::zeros(std.b.len()), &bv_scaled(&h, 0.0));
        (x, bv_scaled(&zt, -1.0), y, z)
    };
    let mut s = s0;
    let mut z = z0;
    shift_into_cone(&mut s);
    shift_into_cone(&mut z);
    let mut it = Iterate {
        x: x0,
        y: y0,
        s,
        z,
        tau: 1.0,
        kappa: 1.0,
    };
    for (k, c) in std.cones.iter().enumerate() {
        match Nt::identity(c).rescaled(&it.s[k], &it.z[k]) {
            Some(w) => nt[k] = w,
            None => return fail(0, "starting point not interior".into(), it.x.clone()),
        }
    }

    let trace = std::env::var_os("MOMENTBOUND_TRACE").is_some();
    let mut last_res = Residuals::default();
    for iter in 0..=set.max_iters {
        let Iterate {
            x,
            y,
            s,
            z,
            tau,
            kappa,
        } = &it;
        let (tau, kappa) = (*tau, *kappa);

        // residuals
        let fx = std.f(x);
        let ftz = std.ft(z);
        let aty = std.a.transpose() * y;
        let ax = &std.a * x;
        let hrx = &aty - &ftz;
        let rx = &hrx + &std.c * tau;
        let ry = &ax - &std.b * tau;
        let hrz = bv_sub(s, &fx);
        let mut rz = hrz.clone();
        bv_axpy(&mut rz, -tau, &h);
        let cx = std.c.dot(x);
        let by = std.b.dot(y);
        let hz = bv_dot(&h, z);
        let rt = kappa + cx + by + hz;

        let pcost = cx / tau;
        let dcost = -(by + hz) / tau;
        let sz = bv_dot(s, z);
        // backward-error residuals: each residual relative to the size of
        // the terms it is made of, so a far-away optimal face still converges
        let fxn = bv_norm(&fx);
        let pres = (ry.norm() / (tau * resy0 + ax.norm())).max(bv_norm(&rz) / (tau * resz0 + fxn));
        let dres = rx.norm() / (tau * resx0 + aty.norm() + ftz.norm());
        let relgap = (pcost - dcost).abs() / pcost.abs().min(dcost.abs()).max(1.0);
        last_res = Residuals {
            primal_eq: pres,
            dual: dres,
            gap: relgap,
        };

        if trace {
            eprintln!(
                "{iter:3} pcost={pcost:+.9e} dcost={dcost:+.9e} pres={pres:.2e} dres={dres:.2e} gap={relgap:.2e} tau={tau:.2e} kappa={kappa:.2e}"
            );
        }
        let merit = (pres / set.tol_feas).max(dres / set.tol_feas).max(relgap / set.tol_gap);
        if merit.is_finite() && best.as_ref().is_none_or(|b| merit < 0.5 * b.0) {
            best = Some((
                merit,
                iter,
                Outcome {
                    status: SolveStatus::Optimal,
                    x: x / tau,
                    pcost,
                    dcost,
                    residuals: last_res,
                    iterations: iter,
                    diagnostics: None,
                },
            ));
        }
        if let Some((_, at, _)) = &best {
            if iter >= at + STALL_ITERS {
                if let Some(out) = fallback(best.take(), iter, "progress stalled") {
                    return out;
                }
            }
        }
        if pres <= set.tol_feas && dres <= set.tol_feas && relgap <= set.tol_gap {
            return Outcome {
                status: SolveStatus::Optimal,
                x: x / tau,
                pcost,
                dcost,
                residuals: last_res,
                iterations: iter,
                diagnostics: None,
            };
        }
        if hz + by < 0.0 {
            let pinf = hrx.norm() / resx0 / (-(hz + by));
            if pinf <= set.tol_feas {
                return Outcome {
                    status: SolveStatus::PrimalInfeasible,
                    x: x / tau,
                    pcost: f64::NAN,
                    dcost: f64::NAN,
                    residuals: last_res,
                    iterations: iter,
                    diagnostics: None,
                };
            }
        }
        if cx < 0.0 {
            let dinf = (ax.norm() / resy0).max(bv_norm(&hrz) / resz0) / (-cx);
            if dinf <= set.tol_feas {
                return Outcome {
                    status: SolveStatus::DualInfeasibleOrUnbounded,
                    x: x / tau,
                    pcost: f64::NAN,
                    dcost: f64::NAN,
                    residuals: last_res,
                    iterations: iter,
                    diagnostics: None,
                };
            }
        }
        if iter == set.max_iters {
            break;
        }

        let Some(kkt) = Kkt::factor(std, &nt) else {
            if let Some(out) = fallback(best, iter, "factorization failed") {
                return out;
            }
            return fail(
                iter,
                format!("Schur complement factorization failed (pres={pres:.2e}, dres={dres:.2e}, gap={relgap:.2e})"),
                x / tau,
            );
        };
        let ht: Bv = nt.iter().zip(&h).map(|(w, b)| w.winv_t(b)).collect();
        let rzt: Bv = nt.iter().zip(&rz).map(|(w, b)| w.winv_t(b)).collect();
        let (x1, y1, z1) = kkt.solve(&(-&std.c), &std.b, &ht);
        let denom_base = std.c.dot(&x1) + std.b.dot(&y1) + bv_dot(&ht, &z1);
        let mu = (sz + tau * kappa) / (nu + 1.0);
        let lam_sq: Bv = nt.iter().map(Nt::lam_sq).collect();

        let mut aff: Option<(Bv, Bv, f64, f64)> = None;
        let mut sigma = 0.0;
        let mut step = None;
        for pass in 0..2 {
            let eta = if pass == 0 { 1.0 } else { 1.0 - sigma };
            let mut rc: Bv = bv_scaled(&lam_sq, -1.0);
            let mut rk = -tau * kappa;
            if let Some((dsa, dza, dta, dka)) = &aff {
                for ((r, a), b) in rc.iter_mut().zip(dsa).zip(dza) {
                    r.axpy(-1.0, &jordan(a, b));
                    r.add_identity(sigma * mu);
                }
                rk += sigma * mu - dta * dka;
            }
            let lrc: Bv = nt.iter().zip(&rc).map(|(w, r)| w.lam_div(r)).collect();
            let mut bz = bv_scaled(&rzt, -eta);
            bv_axpy(&mut bz, -1.0, &lrc);
            let (x2, y2, z2) = kkt.solve(&(-eta * &rx), &(-eta * &ry), &bz);
            let dtau = (-eta * rt - rk / tau - (std.c.dot(&x2) + std.b.dot(&y2) + bv_dot(&ht, &z2)))
                / (denom_base - kappa / tau);
            let dx = &x2 + dtau * &x1;
            let dy = &y2 + dtau * &y1;
            let mut dzt = z2;
            bv_axpy(&mut dzt, dtau, &z1);
            let dkappa = (rk - kappa * dtau) / tau;
            let dst = bv_sub(&lrc, &dzt);

            let mut amax = f64::INFINITY;
            for ((w, a), b) in nt.iter().zip(&dst).zip(&dzt) {
                amax = amax.min(w.max_step(a)).min(w.max_step(b));
            }
            if dtau < 0.0 {
                amax = amax.min(-tau / dtau);
            }
            if dkappa < 0.0 {
                amax = amax.min(-kappa / dkappa);
            }
            if pass == 0 {
                let a = amax.min(1.0);
                sigma = (1.0 - a).powi(3);
                aff = Some((dst, dzt, dtau, dkappa));
            } else {
                let a = (set.step_fraction * amax).min(1.0);
                step = Some((a, dx, dy, dst, dzt, dtau, dkappa));
            }
        }
        let (alpha, dx, dy, dst, dzt, dtau, dkappa) = step.expect("corrector computed");
        if !(alpha > 1e-14) || !alpha.is_finite() {
            if let Some(out) = fallback(best, iter, "step length collapsed") {
                return out;
            }
            return fail(iter, format!("step length collapsed (pres={pres:.2e}, dres={dres:.2e}, gap={relgap:.2e})"), x / tau);
        }

        // step in the original coordinates so the residuals contract exactly,
        // then rebuild the scaling from the new pair
        let mut new_nt = Vec::with_capacity(nt.len());
        let mut new_s = Vec::with_capacity(nt.len());
        let mut new_z = Vec::with_capacity(nt.len());
        for (k, (w, c)) in nt.iter().zip(&std.cones).enumerate() {
            let mut sk = s[k].clone();
            sk.axpy(alpha, &w.wt(&dst[k]));
            let mut zk = z[k].clone();
            zk.axpy(alpha, &w.winv(&dzt[k]));
            for b in [&mut sk, &mut zk] {
                if let Blk::S(m) = b {
                    let t = m.transpose();
                    *m = (&*m + t) * 0.5;
                }
            }
            let fresh = Nt::identity(c).rescaled(&sk, &zk);
            new_s.push(sk);
            new_z.push(zk);
            match fresh {
                Some(nw) => new_nt.push(nw),
                None => {
                    if let Some(out) = fallback(best, iter, "lost interiority") {
                        return out;
                    }
                    return fail(
                        iter,
                        format!("lost interiority (pres={pres:.2e}, dres={dres:.2e}, gap={relgap:.2e})"),
                        x / tau,
                    )
                }
            }
        }
        it = Iterate {
            x: x + alpha * dx,
            y: y + alpha * dy,
            s: new_s,
            z: new_z,
            tau: tau + alpha * dtau,
            kappa: kappa + alpha * dkappa,
        };
        nt = new_nt;
    }
    if let Some(out) = fallback(best, set.max_iters, "iteration limit") {
        return out;
    }
    Outcome {
        status: SolveStatus::MaxIters,
        x: &it.x / it.tau,
        pcost: f64::NAN,
        dcost: f64::NAN,
        residuals: last_res,
        iterations: set.max_iters,
        diagnostics: None,
    }
}

/// Restrict the cones to the smallest face that still holds every dual
/// feasible point.
///
/// A direction `d` with `A d = 0`, `c'd = 0` and `F d` in the cone forces
/// `<z, F d> = 0` on every dual feasible `z`, so the part of the cone in the
/// range of `F d` can be cut away without changing the optimal value. When
/// such directions exist the primal infimum is typically not attained and
/// the iterates drift along them, which makes the reported value creep. Each
/// round finds a direction of maximal trace by solving the homogeneous
/// problem with `tr(F d) <= 1`; the directions are returned in the order
/// found so that a primal point can be pushed back into the full cones.
/// Solve `p`. Never returns a value unless the status is optimal.
pub fn solve(p: &ConicProblem, set: &SolverSettings) -> Result<Solution, SolveError> {
    set.validate()?;
    let n = p.n_vars();
    let red = facial_reduction(p);
    let Ok(std) = Standard::from_problem(p, &red) else {
        return Ok(Solution {
            status: SolveStatus::PrimalInfeasible,
            value: None,
            dual_value: None,
            primal: vec![0.0; n],
            residuals: Residuals::default(),
            iterations: 0,
            diagnostics: Some("inconsistent equality constraints".into()),
        });
    };
    let out = hsde(&std, set);
    let sign = p.direction.sign();
    let optimal = out.status == SolveStatus::Optimal;
    Ok(Solution {
        status: out.status,
        value: optimal.then_some(sign * out.pcost),
        dual_value: optimal.then_some(sign * out.dcost),
        primal: lift(p, &red, &out.x),
        residuals: out.residuals,
        iterations: out.iterations,
        diagnostics: out.diagnostics,
    })
}
