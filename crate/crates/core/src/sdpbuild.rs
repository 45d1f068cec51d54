//! Semidefinite relaxation of the truncated moment system.
//!
//! Every moment `E[X^a K^b]` becomes an independent variable. The relaxation
//! keeps the linear moment equations, the affine parameter-moment
//! inequalities, and one positive semidefinite block per support polynomial
//! (the moment matrix for the constant `1`, localizing matrices for `K_i` and
//! `X_j`).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::momeq::{grouped_monomials, MomentClass, MomentKey, MomentSystem, TruncationOrder};
use crate::netspec::{NetError, Network};
use crate::polyalg::{rational_to_f64, ExpPoly, ExpVec};

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("objective must be a copy-number moment, got {0}")]
    ObjectiveNotCopyNumber(MomentKey),
    #[error("moment {0} does not match the network's {1} species and {2} uncertain parameters")]
    Arity(MomentKey, usize, usize),
    #[error("basis caps too small: moment {0} is not covered by any PSD block")]
    Uncovered(MomentKey),
    #[error("scale constants must be positive")]
    BadScale,
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Min,
    Max,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Min => 1.0,
            Direction::Max => -1.0,
        }
    }
}

/// `sum_k coef_k * x_k + constant`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AffineExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl AffineExpr {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(k, c)| c * x[k]).sum::<f64>() + self.constant
    }

    fn add_term(&mut self, k: usize, c: f64) {
        if c == 0.0 {
            return;
        }
        if let Some(t) = self.terms.iter_mut().find(|t| t.0 == k) {
            t.1 += c;
        } else {
            self.terms.push((k, c));
        }
    }

    fn canonical(mut self) -> Self {
        self.terms.retain(|t| t.1 != 0.0);
        self.terms.sort_by_key(|t| t.0);
        self
    }

    fn scaled(&self, f: f64) -> Self {
        AffineExpr {
            terms: self.terms.iter().map(|&(k, c)| (k, c * f)).collect(),
            constant: self.constant * f,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonomialBasis {
    pub monomials: Vec<ExpVec>,
    pub cap_species: u32,
    pub cap_params: u32,
    pub n_species: usize,
}

impl MonomialBasis {
    pub fn len(&self) -> usize {
        self.monomials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.monomials.is_empty()
    }
}

/// All monomials with species degree `<= cap_species` and parameter degree
/// `<= cap_params`, graded-lex ordered.
pub fn monomial_basis(n: usize, r: usize, cap_species: u32, cap_params: u32) -> MonomialBasis {
    MonomialBasis {
        monomials: grouped_monomials(n, r, 0, cap_species, cap_params),
        cap_species,
        cap_params,
        n_species: n,
    }
}

/// Positive semidefinite block `L(E[m(X,K) g g^T])`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdBlock {
    pub multiplier: ExpPoly,
    pub basis: MonomialBasis,
    pub dim: usize,
    /// Upper triangle, row-major: `(0,0), (0,1), ..., (0,d-1), (1,1), ...`.
    pub entries: Vec<AffineExpr>,
}

pub(crate) fn packed_index(dim: usize, a: usize, b: usize) -> usize {
    let (a, b) = if a <= b { (a, b) } else { (b, a) };
    a * dim - a * (a + 1) / 2 + b
}

impl PsdBlock {
    pub fn entry(&self, a: usize, b: usize) -> &AffineExpr {
        &self.entries[packed_index(self.dim, a, b)]
    }

    /// Dense symmetric value at `x`.
    pub fn eval(&self, x: &[f64]) -> nalgebra::DMatrix<f64> {
        let d = self.dim;
        let mut m = nalgebra::DMatrix::zeros(d, d);
        for a in 0..d {
            for b in a..d {
                let v = self.entry(a, b).eval(x);
                m[(a, b)] = v;
                m[(b, a)] = v;
            }
        }
        m
    }
}

/// Resolves moment keys to problem variables (creating them on demand) or to
/// constants when the moment is known.
#[derive(Debug, Clone)]
pub struct MomentResolver<'a> {
    keys: Vec<MomentKey>,
    index: HashMap<MomentKey, usize>,
    known: BTreeMap<MomentKey, f64>,
    net: Option<&'a Network>,
    n_species: usize,
}

pub enum Resolved {
    Var(usize),
    Const(f64),
}

impl<'a> MomentResolver<'a> {
    pub fn new(n_species: usize, known: BTreeMap<MomentKey, f64>, net: Option<&'a Network>) -> Self {
        MomentResolver {
            keys: Vec::new(),
            index: HashMap::new(),
            known,
            net,
            n_species,
        }
    }

    /// Register `key` as a variable (no-op if present).
    pub fn declare(&mut self, key: &MomentKey) -> usize {
        if let Some(&i) = self.index.get(key) {
            return i;
        }
        let i = self.keys.len();
        self.keys.push(key.clone());
        self.index.insert(key.clone(), i);
        i
    }

    pub fn resolve(&mut self, key: &MomentKey) -> Resolved {
        if let Some(&i) = self.index.get(key) {
            return Resolved::Var(i);
        }
        if let Some(&v) = self.known.get(key) {
            return Resolved::Const(v);
        }
        if key.class() == MomentClass::Xi && !key.is_one() {
            if let Some(v) = self.net.and_then(|n| n.known_param_moment(&key.beta)) {
                return Resolved::Const(v);
            }
        }
        Resolved::Var(self.declare(key))
    }

    pub fn resolve_exp(&mut self, e: &ExpVec) -> Resolved {
        let key = MomentKey::from_exp(e, self.n_species);
        self.resolve(&key)
    }

    pub fn get(&self, key: &MomentKey) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn keys(&self) -> &[MomentKey] {
        &self.keys
    }

    pub fn into_keys(self) -> Vec<MomentKey> {
        self.keys
    }
}

/// Localizing (or moment) matrix `L(E[multiplier * g g^T])` for `basis`.
pub fn localizing_matrix(
    basis: &MonomialBasis,
    multiplier: &ExpPoly,
    lmap: &mut MomentResolver<'_>,
) -> PsdBlock {
    let d = basis.len();
    let mut entries = Vec::with_capacity(d * (d + 1) / 2);
    for a in 0..d {
        for b in a..d {
            let gab = basis.monomials[a].add(&basis.monomials[b]);
            let mut e = AffineExpr::default();
            for (m, c) in multiplier.terms() {
                let c = rational_to_f64(c);
                match lmap.resolve_exp(&gab.add(m)) {
                    Resolved::Var(k) => e.add_term(k, c),
                    Resolved::Const(v) => e.constant += c * v,
                }
            }
            entries.push(e.canonical());
        }
    }
    PsdBlock {
        multiplier: multiplier.clone(),
        basis: basis.clone(),
        dim: d,
        entries,
    }
}

/// Per-species and per-parameter scale constants; a moment
/// `E[X^a K^b]` is divided by `prod C_X^a * prod C_K^b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleRecord {
    pub cx: Vec<f64>,
    pub ck: Vec<f64>,
}

impl ScaleRecord {
    pub fn identity(n: usize, r: usize) -> Self {
        ScaleRecord {
            cx: vec![1.0; n],
            ck: vec![1.0; r],
        }
    }

    pub fn divisor(&self, key: &MomentKey) -> f64 {
        let mut d = 1.0;
        for (c, &a) in self.cx.iter().zip(&key.alpha) {
            d *= c.powi(a as i32);
        }
        for (c, &b) in self.ck.iter().zip(&key.beta) {
            d *= c.powi(b as i32);
        }
        d
    }

    fn divisor_exp(&self, e: &ExpVec) -> f64 {
        let n = self.cx.len();
        self.divisor(&MomentKey::from_exp(e, n))
    }

    pub fn is_valid(&self) -> bool {
        self.cx.iter().chain(&self.ck).all(|&c| c > 0.0 && c.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EqualityRow {
    pub expr: AffineExpr,
    /// Moment that defines the row's scale (`zeta` for moment equations,
    /// `E[1]` for normalization, `None` for anything else).
    pub scale_key: Option<MomentKey>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisCaps {
    pub species: u32,
    pub params: u32,
}

impl BasisCaps {
    /// Smallest caps whose moment matrix contains every moment of the
    /// truncated system: `ceil((rho+1)/2)` and `ceil((sigma+1)/2)`.
    pub fn default_for(t: TruncationOrder, n_params: usize) -> Self {
        BasisCaps {
            species: (t.rho + 1).div_ceil(2),
            params: if n_params == 0 { 0 } else { (t.sigma + 1).div_ceil(2) },
        }
    }
}

/// Standard-form relaxation: minimize `objective . x` subject to equalities
/// `expr == 0`, inequalities `expr >= 0`, and PSD blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ConicProblem {
    pub n_species: usize,
    pub n_params: usize,
    /// Moment represented by each variable (variable = moment / divisor).
    pub variables: Vec<MomentKey>,
    pub objective_key: MomentKey,
    /// Minimization objective; already negated for `Direction::Max`.
    pub objective: Vec<(usize, f64)>,
    pub direction: Direction,
    pub equalities: Vec<EqualityRow>,
    pub inequalities: Vec<AffineExpr>,
    pub psd_blocks: Vec<PsdBlock>,
    pub normalization: bool,
    pub scale: ScaleRecord,
}

impl ConicProblem {
    pub fn n_vars(&self) -> usize {
        self.variables.len()
    }

    pub fn var_index(&self, key: &MomentKey) -> Option<usize> {
        self.variables.iter().position(|k| k == key)
    }

    /// Objective in original units for a (scaled) variable vector.
    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.direction.sign() * self.objective.iter().map(|&(k, c)| c * x[k]).sum::<f64>()
    }

    /// Unscaled moment values for a variable vector.
    pub fn moments(&self, x: &[f64]) -> BTreeMap<MomentKey, f64> {
        self.variables
            .iter()
            .zip(x)
            .map(|(k, &v)| (k.clone(), v * self.scale.divisor(k)))
            .collect()
    }

    /// Variable vector from unscaled moment values.
    pub fn point_from_moments<F: Fn(&MomentKey) -> f64>(&self, f: F) -> Vec<f64> {
        self.variables
            .iter()
            .map(|k| f(k) / self.scale.divisor(k))
            .collect()
    }

    /// Same problem with the opposite optimization direction.
    pub fn with_direction(&self, direction: Direction) -> ConicProblem {
        let mut p = self.clone();
        if direction != self.direction {
            for t in &mut p.objective {
                t.1 = -t.1;
            }
            p.direction = direction;
        }
        p
    }
}

/// Build the relaxation for `sys` (after known-moment substitution).
///
/// `caps` fixes the moment-matrix basis; when `None` the minimal caps are
/// used and enlarged until every system moment appears in some block.
pub fn assemble_conic(
    sys: &MomentSystem,
    net: &Network,
    t: TruncationOrder,
    caps: Option<BasisCaps>,
    objective: &MomentKey,
    direction: Direction,
) -> Result<ConicProblem, BuildError> {
    if objective.class() != MomentClass::Mu {
        return Err(BuildError::ObjectiveNotCopyNumber(objective.clone()));
    }
    let n = sys.n_species;
    let r = sys.n_params;
    if objective.alpha.len() != n || objective.beta.len() != r {
        return Err(BuildError::Arity(objective.clone(), n, r));
    }
    let auto = caps.is_none();
    let mut caps = caps.unwrap_or_else(|| BasisCaps::default_for(t, r));

    loop {
        match try_assemble(sys, net, caps, objective, direction) {
            Ok(p) => return Ok(p),
            Err(BuildError::Uncovered(k)) if auto => {
                if k.species_degree() > 2 * caps.species {
                    caps.species += 1;
                } else if k.param_degree() > 2 * caps.params {
                    caps.params += 1;
                } else {
                    caps.species += 1;
                    if r > 0 {
                        caps.params += 1;
                    }
                }
                if caps.species > 64 || caps.params > 64 {
                    return Err(BuildError::Uncovered(k));
                }
                let _ = n;
            }
            Err(e) => return Err(e),
        }
    }
}

fn try_assemble(
    sys: &MomentSystem,
    net: &Network,
    caps: BasisCaps,
    objective: &MomentKey,
    direction: Direction,
) -> Result<ConicProblem, BuildError> {
    let n = sys.n_species;
    let r = sys.n_params;
    let mut res = MomentResolver::new(n, sys.known.clone(), Some(net));
    let one = MomentKey::one(n, r);
    res.declare(&one);
    for k in sys.keys() {
        res.declare(k);
    }
    let system_vars: Vec<usize> = sys.keys().map(|k| res.get(k).unwrap()).collect();

    let mut equalities = vec![EqualityRow {
        expr: AffineExpr {
            terms: vec![(0, 1.0)],
            constant: -1.0,
        },
        scale_key: Some(one.clone()),
    }];
    for (i, zeta) in sys.rows.iter().enumerate() {
        let mut e = AffineExpr {
            terms: Vec::new(),
            constant: sys.offset[i],
        };
        for (k, c) in sys.row_terms(i) {
            e.add_term(res.get(k).unwrap(), rational_to_f64(c));
        }
        let e = e.canonical();
        if e.terms.is_empty() && e.constant == 0.0 {
            continue;
        }
        equalities.push(EqualityRow {
            expr: e,
            scale_key: Some(MomentKey::from_exp(zeta, n)),
        });
    }

    // affine parameter-moment inequalities; exactly opposite pairs become equalities
    let uncertain = net.uncertain_params();
    let mut ineqs: Vec<AffineExpr> = Vec::new();
    for con in net.moment_constraints()? {
        let mut e = AffineExpr {
            terms: Vec::new(),
            constant: con.constant,
        };
        for (coef, beta_map) in &con.terms {
            let mut beta = vec![0u32; r];
            for (&p, &o) in beta_map {
                let slot = uncertain.iter().position(|&u| u == p).expect("validated");
                beta[slot] = o;
            }
            match res.resolve(&MomentKey::new(vec![0; n], beta)) {
                Resolved::Var(k) => e.add_term(k, *coef),
                Resolved::Const(v) => e.constant += coef * v,
            }
        }
        let e = e.canonical();
        // fully known rows that hold carry no information, and a zero slack
        // would leave the problem without interior points
        if e.terms.is_empty() && e.constant >= -1e-12 {
            continue;
        }
        ineqs.push(e);
    }
    let mut used = vec![false; ineqs.len()];
    let mut inequalities = Vec::new();
    for i in 0..ineqs.len() {
        if used[i] {
            continue;
        }
        let partner = (i + 1..ineqs.len()).find(|&j| !used[j] && are_opposite(&ineqs[i], &ineqs[j]));
        if let Some(j) = partner {
            used[j] = true;
            let mut e = ineqs[i].clone();
            e.constant = 0.5 * (ineqs[i].constant - ineqs[j].constant);
            equalities.push(EqualityRow {
                expr: e,
                scale_key: None,
            });
        } else {
            inequalities.push(ineqs[i].clone());
        }
    }

    // PSD blocks: 1, c_i(K), d_j(X)
    let arity = n + r;
    let mut multipliers = vec![ExpPoly::one(arity)];
    multipliers.extend(net.param_support_polys());
    multipliers.extend(net.species_support_polys());
    let mut psd_blocks = Vec::new();
    for m in &multipliers {
        let ds = m.degree_in(0..n).unwrap_or(0);
        let dp = m.degree_in(n..arity).unwrap_or(0);
        let (Some(cs), Some(cp)) = (
            caps.species.checked_sub(ds.div_ceil(2)),
            caps.params.checked_sub(dp.div_ceil(2)),
        ) else {
            continue;
        };
        let basis = monomial_basis(n, r, cs, cp);
        psd_blocks.push(localizing_matrix(&basis, m, &mut res));
    }

    let obj = match res.resolve(objective) {
        Resolved::Var(k) => k,
        Resolved::Const(_) => return Err(BuildError::ObjectiveNotCopyNumber(objective.clone())),
    };

    // coverage: every system moment and the objective must sit in some block
    let mut covered: BTreeSet<usize> = BTreeSet::new();
    for b in &psd_blocks {
        for e in &b.entries {
            covered.extend(e.terms.iter().map(|t| t.0));
        }
    }
    for &v in system_vars.iter().chain([&obj, &0]) {
        if !covered.contains(&v) {
            return Err(BuildError::Uncovered(res.keys()[v].clone()));
        }
    }

    let variables = res.into_keys();
    Ok(ConicProblem {
        n_species: n,
        n_params: r,
        scale: ScaleRecord::identity(n, r),
        variables,
        objective_key: objective.clone(),
        objective: vec![(obj, direction.sign())],
        direction,
        equalities,
        inequalities,
        psd_blocks,
        normalization: true,
    })
}

fn are_opposite(a: &AffineExpr, b: &AffineExpr) -> bool {
    if a.terms.len() != b.terms.len() || a.terms.is_empty() {
        return false;
    }
    let scale = a
        .terms
        .iter()
        .map(|t| t.1.abs())
        .fold(a.constant.abs(), f64::max)
        .max(1e-300);
    let close = |x: f64, y: f64| (x + y).abs() <= 1e-12 * scale;
    a.terms
        .iter()
        .zip(&b.terms)
        .all(|(s, t)| s.0 == t.0 && close(s.1, t.1))
        && close(a.constant, b.constant)
}

/// Change variables to `x_new = moment / divisor(s)`.
///
/// Equality rows are divided by the divisor of their defining moment, PSD
/// blocks are rescaled by the congruence `diag(1/divisor(g))` (and the
/// multiplier's leading divisor), inequalities are normalized to unit largest
/// coefficient. The objective keeps reporting original units.
pub fn scale_problem(p: &ConicProblem, s: &ScaleRecord) -> Result<ConicProblem, BuildError> {
    if !s.is_valid() || s.cx.len() != p.n_species || s.ck.len() != p.n_params {
        return Err(BuildError::BadScale);
    }
    let old = &p.scale;
    let ratio = |k: &MomentKey| s.divisor(k) / old.divisor(k);
    let factor: Vec<f64> = p.variables.iter().map(ratio).collect();
    let subst = |e: &AffineExpr| AffineExpr {
        terms: e.terms.iter().map(|&(k, c)| (k, c * factor[k])).collect(),
        constant: e.constant,
    };

    let mut out = p.clone();
    out.scale = s.clone();
    out.objective = p.objective.iter().map(|&(k, c)| (k, c * factor[k])).collect();
    out.equalities = p
        .equalities
        .iter()
        .map(|row| {
            let d = row.scale_key.as_ref().map(ratio).unwrap_or(1.0);
            EqualityRow {
                expr: subst(&row.expr).scaled(1.0 / d),
                scale_key: row.scale_key.clone(),
            }
        })
        .collect();
    out.inequalities = p
        .inequalities
        .iter()
        .map(|e| {
            let e = subst(e);
            let m = e.terms.iter().map(|t| t.1.abs()).fold(0.0, f64::max);
            if m > 0.0 {
                e.scaled(1.0 / m)
            } else {
                e
            }
        })
        .collect();
    out.psd_blocks = p
        .psd_blocks
        .iter()
        .map(|b| {
            let dg: Vec<f64> = b
                .basis
                .monomials
                .iter()
                .map(|g| s.divisor_exp(g) / old.divisor_exp(g))
                .collect();
            let dm = b
                .multiplier
                .leading()
                .map(|(e, _)| s.divisor_exp(e) / old.divisor_exp(e))
                .unwrap_or(1.0);
            let mut nb = b.clone();
            for a in 0..b.dim {
                for c in a..b.dim {
                    let idx = packed_index(b.dim, a, c);
                    nb.entries[idx] = subst(&b.entries[idx]).scaled(1.0 / (dg[a] * dg[c] * dm));
                }
            }
            nb
        })
        .collect();
    Ok(out)
}

fn fmt_num(v: f64) -> String {
    format!("{v:.17e}")
}

/// Sparse SDPA (`.dat-s`) text.
///
/// SDPA's primal form is `min c.x  s.t.  sum_i F_i x_i - F_0 >= 0`. PSD blocks
/// map one-to-one; equalities are written as pairs of opposite inequalities in
/// a trailing diagonal (LP) block together with the affine inequalities.
pub fn export_sdpa(p: &ConicProblem) -> String {
    let mut lp_rows: Vec<AffineExpr> = Vec::new();
    for row in &p.equalities {
        lp_rows.push(row.expr.clone());
        lp_rows.push(row.expr.scaled(-1.0));
    }
    lp_rows.extend(p.inequalities.iter().cloned());

    let mut out = String::new();
    let _ = writeln!(out, "\"moment relaxation: {} variables, {} equalities", p.n_vars(), p.equalities.len());
    let _ = writeln!(
        out,
        "\"equalities encoded as inequality pairs in the final diagonal block (rows {}..{})",
        1,
        2 * p.equalities.len()
    );
    let _ = writeln!(out, "\"objective direction: {:?} (maximization written as min of the negation)", p.direction);
    let _ = writeln!(out, "{}", p.n_vars());
    let n_blocks = p.psd_blocks.len() + usize::from(!lp_rows.is_empty());
    let _ = writeln!(out, "{n_blocks}");
    let mut sizes: Vec<String> = p.psd_blocks.iter().map(|b| b.dim.to_string()).collect();
    if !lp_rows.is_empty() {
        sizes.push(format!("-{}", lp_rows.len()));
    }
    let _ = writeln!(out, "{}", sizes.join(" "));
    let mut c = vec![0.0; p.n_vars()];
    for &(k, v) in &p.objective {
        c[k] += v;
    }
    let _ = writeln!(out, "{}", c.iter().map(|&v| fmt_num(v)).collect::<Vec<_>>().join(" "));

    // (matno, blkno, i, j, value) with 1-based indices
    let mut lines: Vec<(usize, usize, usize, usize, f64)> = Vec::new();
    for (bi, b) in p.psd_blocks.iter().enumerate() {
        for a in 0..b.dim {
            for cidx in a..b.dim {
                let e = b.entry(a, cidx);
                if e.constant != 0.0 {
                    lines.push((0, bi + 1, a + 1, cidx + 1, -e.constant));
                }
                for &(k, v) in &e.terms {
                    lines.push((k + 1, bi + 1, a + 1, cidx + 1, v));
                }
            }
        }
    }
    let lb = p.psd_blocks.len() + 1;
    for (i, e) in lp_rows.iter().enumerate() {
        if e.constant != 0.0 {
            lines.push((0, lb, i + 1, i + 1, -e.constant));
        }
        for &(k, v) in &e.terms {
            lines.push((k + 1, lb, i + 1, i + 1, v));
        }
    }
    lines.sort_by_key(|x| (x.0, x.1, x.2, x.3));
    for (m, b, i, j, v) in lines {
        let _ = writeln!(out, "{m} {b} {i} {j} {}", fmt_num(v));
    }
    out
}
