//! Truncated stationary moment equations `0 = A mu + B nu + C xi (+ offset)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use num_rational::BigRational;
use num_traits::Zero;
use thiserror::Error;

use crate::netspec::{NetError, Network};
use crate::polyalg::{generator_poly, rational_to_f64, ExpPoly, ExpVec};

#[derive(Debug, Error)]
pub enum MomentError {
    #[error("non-positive gamma parameter (shape {shape}, scale {scale})")]
    GammaDomain { shape: f64, scale: f64 },
    #[error("moment {0} is not a parameter moment of this system")]
    NotInXi(MomentKey),
    #[error("truncation order rho must be at least 1")]
    BadTruncation,
    #[error(transparent)]
    Net(#[from] NetError),
}

/// `E[X^alpha K^beta]`.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct MomentKey {
    pub alpha: Vec<u32>,
    pub beta: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentClass {
    /// copy-number moment (`beta = 0`, `alpha != 0`)
    Mu,
    /// mixed moment
    Nu,
    /// parameter moment, including `E[1]`
    Xi,
}

impl MomentKey {
    pub fn new(alpha: Vec<u32>, beta: Vec<u32>) -> Self {
        MomentKey { alpha, beta }
    }

    pub fn one(n: usize, r: usize) -> Self {
        MomentKey::new(vec![0; n], vec![0; r])
    }

    pub fn from_exp(e: &ExpVec, n: usize) -> Self {
        MomentKey::new(e.0[..n].to_vec(), e.0[n..].to_vec())
    }

    pub fn to_exp(&self) -> ExpVec {
        ExpVec(self.alpha.iter().chain(&self.beta).copied().collect())
    }

    pub fn species_degree(&self) -> u32 {
        self.alpha.iter().sum()
    }

    pub fn param_degree(&self) -> u32 {
        self.beta.iter().sum()
    }

    pub fn is_one(&self) -> bool {
        self.species_degree() == 0 && self.param_degree() == 0
    }

    pub fn class(&self) -> MomentClass {
        let a = self.alpha.iter().any(|&v| v > 0);
        let b = self.beta.iter().any(|&v| v > 0);
        match (a, b) {
            (true, false) => MomentClass::Mu,
            (true, true) => MomentClass::Nu,
            (false, _) => MomentClass::Xi,
        }
    }

    /// Human-readable form using the network's names, e.g. `E[X^2*K1]`.
    pub fn display_with(&self, net: &Network) -> String {
        let mut parts = Vec::new();
        for (i, &a) in self.alpha.iter().enumerate() {
            push_factor(&mut parts, &net.species[i].name, a);
        }
        for (slot, &b) in net.uncertain_params().iter().zip(&self.beta) {
            push_factor(&mut parts, &net.params[*slot].name, b);
        }
        if parts.is_empty() {
            "E[1]".into()
        } else {
            format!("E[{}]", parts.join("*"))
        }
    }
}

fn push_factor(parts: &mut Vec<String>, name: &str, e: u32) {
    match e {
        0 => {}
        1 => parts.push(name.to_string()),
        _ => parts.push(format!("{name}^{e}")),
    }
}

impl Ord for MomentKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.to_exp().cmp(&other.to_exp())
    }
}

impl PartialOrd for MomentKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for MomentKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a: Vec<String> = self.alpha.iter().map(u32::to_string).collect();
        let b: Vec<String> = self.beta.iter().map(u32::to_string).collect();
        write!(f, "E[({}|{})]", a.join(","), b.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TruncationOrder {
    pub rho: u32,
    pub sigma: u32,
}

impl TruncationOrder {
    pub fn new(rho: u32, sigma: u32) -> Result<Self, MomentError> {
        if rho < 1 {
            return Err(MomentError::BadTruncation);
        }
        Ok(TruncationOrder { rho, sigma })
    }
}

/// All exponent vectors of length `len` with total degree at most `max`.
pub(crate) fn exponents_up_to(len: usize, max: u32) -> Vec<Vec<u32>> {
    fn rec(len: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if cur.len() == len {
            out.push(cur.clone());
            return;
        }
        for e in 0..=left {
            cur.push(e);
            rec(len, left - e, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(len, max, &mut Vec::with_capacity(len), &mut out);
    out
}

/// Extended-state monomials with species degree in `species_min..=species_max`
/// and parameter degree at most `param_max`, graded-lex ordered.
pub(crate) fn grouped_monomials(
    n: usize,
    r: usize,
    species_min: u32,
    species_max: u32,
    param_max: u32,
) -> Vec<ExpVec> {
    let sp: Vec<Vec<u32>> = exponents_up_to(n, species_max)
        .into_iter()
        .filter(|a| a.iter().sum::<u32>() >= species_min)
        .collect();
    let pp = exponents_up_to(r, param_max);
    let mut out: Vec<ExpVec> = sp
        .iter()
        .flat_map(|a| {
            pp.iter()
                .map(move |b| ExpVec(a.iter().chain(b).copied().collect()))
        })
        .collect();
    out.sort();
    out
}

/// Row multi-indices `zeta` with species degree in `1..=rho` and parameter
/// degree at most `sigma`.
pub fn enumerate_zeta(t: TruncationOrder, n: usize, r: usize) -> Vec<ExpVec> {
    grouped_monomials(n, r, 1, t.rho, t.sigma)
}

/// `E[K^beta]` for `K ~ Gamma(shape, scale)`: `scale^beta * prod_{j=1}^{beta} (shape + j - 1)`.
pub fn gamma_moment(shape: f64, scale: f64, beta: u32) -> Result<f64, MomentError> {
    if !(shape > 0.0 && scale > 0.0) {
        return Err(MomentError::GammaDomain { shape, scale });
    }
    Ok((1..=beta).map(|j| scale * (shape + f64::from(j) - 1.0)).product())
}

/// Dense exact matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RatMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<BigRational>,
}

impl RatMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        RatMatrix {
            rows,
            cols,
            data: vec![BigRational::zero(); rows * cols],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> &BigRational {
        &self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: BigRational) {
        self.data[i * self.cols + j] = v;
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(Zero::is_zero)
    }

    fn remove_column(&mut self, j: usize) -> Vec<BigRational> {
        let mut col = Vec::with_capacity(self.rows);
        let mut data = Vec::with_capacity(self.rows * (self.cols - 1));
        for i in 0..self.rows {
            for k in 0..self.cols {
                let v = self.data[i * self.cols + k].clone();
                if k == j {
                    col.push(v);
                } else {
                    data.push(v);
                }
            }
        }
        self.data = data;
        self.cols -= 1;
        col
    }
}

/// Truncated stationary moment system
/// `0 = A mu + B nu + C xi + offset` with one row per `zeta`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSystem {
    pub n_species: usize,
    pub n_params: usize,
    pub rows: Vec<ExpVec>,
    pub a: RatMatrix,
    pub b: RatMatrix,
    pub c: RatMatrix,
    pub mu_keys: Vec<MomentKey>,
    pub nu_keys: Vec<MomentKey>,
    pub xi_keys: Vec<MomentKey>,
    /// Constant term per row from substituted parameter moments.
    pub offset: Vec<f64>,
    /// Parameter moments that were substituted.
    pub known: BTreeMap<MomentKey, f64>,
    pub lmap: BTreeMap<MomentKey, usize>,
}

impl MomentSystem {
    fn rebuild_lmap(&mut self) {
        self.lmap = self
            .mu_keys
            .iter()
            .chain(&self.nu_keys)
            .chain(&self.xi_keys)
            .cloned()
            .enumerate()
            .map(|(i, k)| (k, i))
            .collect();
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// All variable keys (mu, nu, xi in that order).
    pub fn keys(&self) -> impl Iterator<Item = &MomentKey> {
        self.mu_keys.iter().chain(&self.nu_keys).chain(&self.xi_keys)
    }

    /// Sparse row `i`: (key, coefficient) pairs.
    pub fn row_terms(&self, i: usize) -> Vec<(&MomentKey, &BigRational)> {
        let mut out = Vec::new();
        for (m, keys) in [(&self.a, &self.mu_keys), (&self.b, &self.nu_keys), (&self.c, &self.xi_keys)] {
            for (j, k) in keys.iter().enumerate() {
                let v = m.get(i, j);
                if !v.is_zero() {
                    out.push((k, v));
                }
            }
        }
        out
    }

    /// Residual of every row at the moment values given by `value`.
    pub fn residuals<F: Fn(&MomentKey) -> f64>(&self, value: F) -> Vec<f64> {
        (0..self.n_rows())
            .map(|i| {
                self.row_terms(i)
                    .into_iter()
                    .map(|(k, c)| rational_to_f64(c) * value(k))
                    .sum::<f64>()
                    + self.offset[i]
            })
            .collect()
    }
}

/// Assemble the truncated system for `net` at truncation `t`.
pub fn assemble_moment_equations(net: &Network, t: TruncationOrder) -> Result<MomentSystem, MomentError> {
    if t.rho < 1 {
        return Err(MomentError::BadTruncation);
    }
    let n = net.n_species();
    let r = net.n_uncertain();
    let rxns = net.ext_reactions()?;
    let rows = enumerate_zeta(t, n, r);

    let mut polys: Vec<ExpPoly> = Vec::with_capacity(rows.len());
    for zeta in &rows {
        let mut acc = ExpPoly::zero(n + r);
        for rxn in &rxns {
            acc = acc
                .add(&generator_poly(zeta, rxn).map_err(NetError::from)?)
                .map_err(NetError::from)?;
        }
        polys.push(acc);
    }

    let mut keys: BTreeSet<MomentKey> = BTreeSet::new();
    for p in &polys {
        for e in p.terms().keys() {
            keys.insert(MomentKey::from_exp(e, n));
        }
    }
    let mut mu_keys = Vec::new();
    let mut nu_keys = Vec::new();
    let mut xi_keys = Vec::new();
    for k in keys {
        match k.class() {
            MomentClass::Mu => mu_keys.push(k),
            MomentClass::Nu => nu_keys.push(k),
            MomentClass::Xi => xi_keys.push(k),
        }
    }
    let index = |keys: &[MomentKey]| -> BTreeMap<MomentKey, usize> {
        keys.iter().cloned().enumerate().map(|(i, k)| (k, i)).collect()
    };
    let (mu_ix, nu_ix, xi_ix) = (index(&mu_keys), index(&nu_keys), index(&xi_keys));
    let mut a = RatMatrix::zeros(rows.len(), mu_keys.len());
    let mut b = RatMatrix::zeros(rows.len(), nu_keys.len());
    let mut c = RatMatrix::zeros(rows.len(), xi_keys.len());
    for (i, p) in polys.iter().enumerate() {
        for (e, v) in p.terms() {
            let k = MomentKey::from_exp(e, n);
            match k.class() {
                MomentClass::Mu => a.set(i, mu_ix[&k], v.clone()),
                MomentClass::Nu => b.set(i, nu_ix[&k], v.clone()),
                MomentClass::Xi => c.set(i, xi_ix[&k], v.clone()),
            }
        }
    }
    let mut sys = MomentSystem {
        n_species: n,
        n_params: r,
        offset: vec![0.0; rows.len()],
        rows,
        a,
        b,
        c,
        mu_keys,
        nu_keys,
        xi_keys,
        known: BTreeMap::new(),
        lmap: BTreeMap::new(),
    };
    sys.rebuild_lmap();
    Ok(sys)
}

/// Fold known parameter moments into the constant vector.
pub fn substitute_known(
    sys: &MomentSystem,
    known: &BTreeMap<MomentKey, f64>,
) -> Result<MomentSystem, MomentError> {
    let mut out = sys.clone();
    for (k, &v) in known {
        let j = out
            .xi_keys
            .iter()
            .position(|x| x == k)
            .ok_or_else(|| MomentError::NotInXi(k.clone()))?;
        let col = out.c.remove_column(j);
        out.xi_keys.remove(j);
        for (o, coef) in out.offset.iter_mut().zip(&col) {
            *o += rational_to_f64(coef) * v;
        }
        out.known.insert(k.clone(), v);
    }
    out.rebuild_lmap();
    Ok(out)
}

/// Known parameter moments for every non-constant xi key of `sys`, as
/// declared by the network (marginals, and products under independence).
pub fn known_xi(net: &Network, sys: &MomentSystem) -> BTreeMap<MomentKey, f64> {
    sys.xi_keys
        .iter()
        .filter(|k| !k.is_one())
        .filter_map(|k| net.known_param_moment(&k.beta).map(|v| (k.clone(), v)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::{dimerization_document, parse_network};
    use num_bigint::BigInt;

    fn q(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    #[test]
    fn zeta_enumeration() {
        let z = enumerate_zeta(TruncationOrder::new(1, 1).unwrap(), 1, 2);
        assert_eq!(
            z,
            vec![ExpVec(vec![1, 0, 0]), ExpVec(vec![1, 1, 0]), ExpVec(vec![1, 0, 1])]
        );
        let z = enumerate_zeta(TruncationOrder::new(3, 0).unwrap(), 1, 2);
        assert_eq!(
            z,
            vec![ExpVec(vec![1, 0, 0]), ExpVec(vec![2, 0, 0]), ExpVec(vec![3, 0, 0])]
        );
        let z = enumerate_zeta(TruncationOrder::new(1, 1).unwrap(), 2, 1);
        assert_eq!(
            z,
            vec![
                ExpVec(vec![1, 0, 0]),
                ExpVec(vec![0, 1, 0]),
                ExpVec(vec![1, 0, 1]),
                ExpVec(vec![0, 1, 1])
            ]
        );
        assert!(TruncationOrder::new(0, 3).is_err());
    }

    #[test]
    fn gamma_moments() {
        assert!((gamma_moment(2.0, 0.4, 1).unwrap() - 0.8).abs() < 1e-15);
        assert!((gamma_moment(4.0, 0.1, 2).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(gamma_moment(3.3, 0.7, 0).unwrap(), 1.0);
        assert!(gamma_moment(0.0, 1.0, 1).is_err());
        assert!(gamma_moment(1.0, -1.0, 1).is_err());
    }

    fn birth_death() -> Network {
        parse_network(
            r#"{"species": ["X"], "parameters": [
                {"name": "K1", "kind": "fixed", "value": 0.8},
                {"name": "K2", "kind": "fixed", "value": 0.4}],
              "reactions": [{"rate": "K1", "const": 5, "orders": {}, "stoich": {"X": 1}},
                            {"rate": "K2", "orders": {"X": 1}, "stoich": {"X": -1}}]}"#,
        )
        .unwrap()
    }

    #[test]
    fn birth_death_single_row() {
        let sys = assemble_moment_equations(&birth_death(), TruncationOrder::new(1, 0).unwrap()).unwrap();
        assert_eq!(sys.n_rows(), 1);
        assert_eq!(sys.mu_keys, vec![MomentKey::new(vec![1], vec![])]);
        assert_eq!(sys.xi_keys, vec![MomentKey::new(vec![0], vec![])]);
        assert_eq!(*sys.a.get(0, 0), q(-2, 5));
        assert_eq!(*sys.c.get(0, 0), q(4, 1));
        // unique solution E[X] = D k1 / k2 = 10
        let sol = -sys.c.get(0, 0) / sys.a.get(0, 0);
        assert_eq!(sol, q(10, 1));
    }

    #[test]
    fn zero_reactions_give_zero_matrices() {
        let net = parse_network(r#"{"species": ["X"], "parameters": [], "reactions": []}"#).unwrap();
        let sys = assemble_moment_equations(&net, TruncationOrder::new(2, 0).unwrap()).unwrap();
        assert_eq!(sys.n_rows(), 2);
        assert!(sys.a.is_zero() && sys.b.is_zero() && sys.c.is_zero());
        assert!(sys.keys().next().is_none());
    }

    #[test]
    fn substitution() {
        let net = parse_network(&dimerization_document(Some(0.2), false)).unwrap();
        let sys = assemble_moment_equations(&net, TruncationOrder::new(1, 1).unwrap()).unwrap();
        assert_eq!(sys.xi_keys.len(), 3);

        let same = substitute_known(&sys, &BTreeMap::new()).unwrap();
        assert_eq!(same, sys);

        let known: BTreeMap<MomentKey, f64> = [
            (MomentKey::new(vec![0], vec![1, 0]), 0.8),
            (MomentKey::new(vec![0], vec![2, 0]), 0.96),
        ]
        .into();
        let red = substitute_known(&sys, &known).unwrap();
        assert_eq!(red.xi_keys, vec![MomentKey::new(vec![0], vec![1, 1])]);
        assert_eq!(red.c.cols, 1);
        assert!((red.offset[0] - 4.0).abs() < 1e-12);
        assert!((red.offset[1] - 4.8).abs() < 1e-12);
        assert_eq!(red.offset[2], 0.0);

        let all = known_xi(&parse_network(&dimerization_document(None, true)).unwrap(), &sys);
        assert_eq!(all.len(), 3);
        let full = substitute_known(&sys, &all).unwrap();
        assert!(full.xi_keys.is_empty());
        assert_eq!(full.c.cols, 0);
        assert!((full.offset[2] - 5.0 * 0.32).abs() < 1e-12);

        let bad: BTreeMap<MomentKey, f64> = [(MomentKey::new(vec![1], vec![0, 0]), 1.0)].into();
        assert!(matches!(substitute_known(&sys, &bad), Err(MomentError::NotInXi(_))));
    }

    #[test]
    fn classification_is_a_partition() {
        let net = parse_network(&dimerization_document(Some(0.2), false)).unwrap();
        let sys = assemble_moment_equations(&net, TruncationOrder::new(3, 2).unwrap()).unwrap();
        let all: Vec<&MomentKey> = sys.keys().collect();
        let set: BTreeSet<&MomentKey> = all.iter().copied().collect();
        assert_eq!(all.len(), set.len());
        assert_eq!(sys.lmap.len(), all.len());
        for k in &sys.mu_keys {
            assert_eq!(k.class(), MomentClass::Mu);
        }
        for k in &sys.nu_keys {
            assert_eq!(k.class(), MomentClass::Nu);
        }
        for k in &sys.xi_keys {
            assert_eq!(k.class(), MomentClass::Xi);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn degree_bounds_hold(rho in 1u32..5, sigma in 0u32..4) {
                let net = parse_network(&dimerization_document(Some(0.2), false)).unwrap();
                let sys = assemble_moment_equations(&net, TruncationOrder::new(rho, sigma).unwrap()).unwrap();
                for k in sys.keys() {
                    prop_assert!(k.species_degree() <= rho + 1);
                    prop_assert!(k.param_degree() <= sigma + 1);
                }
            }

            #[test]
            fn rows_nest_in_sigma(rho in 1u32..4, sigma in 0u32..4, extra in 1u32..3) {
                let small = enumerate_zeta(TruncationOrder::new(rho, sigma).unwrap(), 1, 2);
                let big = enumerate_zeta(TruncationOrder::new(rho, sigma + extra).unwrap(), 1, 2);
                for z in &small {
                    prop_assert!(big.contains(z));
                }
            }

            #[test]
            fn gamma_matches_recursion(shape in 0.1f64..10.0, scale in 0.01f64..3.0, beta in 1u32..12) {
                let direct = gamma_moment(shape, scale, beta).unwrap();
                let prev = gamma_moment(shape, scale, beta - 1).unwrap();
                let rec = scale * (shape + f64::from(beta) - 1.0) * prev;
                prop_assert!((direct - rec).abs() <= 1e-12 * direct.abs());
            }
        }
    }
}
