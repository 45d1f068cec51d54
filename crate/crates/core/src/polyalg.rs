//! Exact polynomial algebra over the extended state `(X, K)`.
//!
//! Polynomials are stored as sparse maps from exponent vectors to exact
//! rational coefficients. The first `n` slots of every exponent vector are
//! species copy numbers, the remaining slots are the uncertain rate
//! parameters. Reactions never move the parameter slots.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use thiserror::Error;

pub type Coeff = BigRational;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolyError {
    #[error("arity mismatch: {left} vs {right}")]
    ArityMismatch { left: usize, right: usize },
    #[error("propensity order {0} exceeds 2 (only elementary reactions are supported)")]
    OrderTooHigh(u32),
    #[error("exponent slot {slot} out of range for arity {arity}")]
    SlotOutOfRange { slot: usize, arity: usize },
}

/// Exponent vector over the extended state.
///
/// Ordered graded-lexicographically: total degree first, then the vector
/// with the larger leading exponent comes first (so `X < K1 < K2` among the
/// degree-one monomials).
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct ExpVec(pub Vec<u32>);

impl ExpVec {
    pub fn zero(arity: usize) -> Self {
        ExpVec(vec![0; arity])
    }

    pub fn unit(arity: usize, slot: usize) -> Self {
        let mut v = vec![0; arity];
        v[slot] = 1;
        ExpVec(v)
    }

    pub fn arity(&self) -> usize {
        self.0.len()
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    /// Total degree of the slots `range`.
    pub fn degree_in(&self, range: std::ops::Range<usize>) -> u32 {
        self.0[range].iter().sum()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&e| e == 0)
    }

    pub fn add(&self, other: &ExpVec) -> ExpVec {
        debug_assert_eq!(self.arity(), other.arity());
        ExpVec(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }
}

impl Ord for ExpVec {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| other.0.cmp(&self.0))
    }
}

impl PartialOrd for ExpVec {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Shift of the extended state caused by one firing of a reaction.
/// Parameter components are always zero.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ExtStoich {
    shift: Vec<i64>,
}

impl ExtStoich {
    pub fn new(species_shift: Vec<i64>, n_params: usize) -> Self {
        let mut shift = species_shift;
        shift.extend(std::iter::repeat_n(0, n_params));
        ExtStoich { shift }
    }

    pub fn shift(&self) -> &[i64] {
        &self.shift
    }

    pub fn arity(&self) -> usize {
        self.shift.len()
    }
}

/// Sparse multivariate polynomial with exact rational coefficients.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ExpPoly {
    arity: usize,
    terms: BTreeMap<ExpVec, Coeff>,
}

#[derive(Clone, Debug)]
pub enum CombineOp {
    Add,
    Mul,
    Scale(Coeff),
}

impl ExpPoly {
    pub fn zero(arity: usize) -> Self {
        ExpPoly {
            arity,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(arity: usize, c: Coeff) -> Self {
        Self::monomial(ExpVec::zero(arity), c)
    }

    pub fn one(arity: usize) -> Self {
        Self::constant(arity, Coeff::one())
    }

    pub fn monomial(exp: ExpVec, c: Coeff) -> Self {
        let mut p = ExpPoly::zero(exp.arity());
        if !c.is_zero() {
            p.terms.insert(exp, c);
        }
        p
    }

    /// The polynomial `x_slot`.
    pub fn var(arity: usize, slot: usize) -> Self {
        Self::monomial(ExpVec::unit(arity, slot), Coeff::one())
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &BTreeMap<ExpVec, Coeff> {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn coeff(&self, exp: &ExpVec) -> Coeff {
        self.terms.get(exp).cloned().unwrap_or_else(Coeff::zero)
    }

    /// Highest term in graded lex order, if any.
    pub fn leading(&self) -> Option<(&ExpVec, &Coeff)> {
        self.terms.iter().next_back()
    }

    fn accumulate(&mut self, exp: ExpVec, c: Coeff) {
        if c.is_zero() {
            return;
        }
        match self.terms.entry(exp) {
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(c);
            }
            std::collections::btree_map::Entry::Occupied(mut o) => {
                *o.get_mut() += c;
                if o.get().is_zero() {
                    o.remove();
                }
            }
        }
    }

    fn check_arity(&self, other: &ExpPoly) -> Result<(), PolyError> {
        if self.arity != other.arity {
            return Err(PolyError::ArityMismatch {
                left: self.arity,
                right: other.arity,
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &ExpPoly) -> Result<ExpPoly, PolyError> {
        self.check_arity(other)?;
        let mut out = self.clone();
        for (e, c) in &other.terms {
            out.accumulate(e.clone(), c.clone());
        }
        Ok(out)
    }

    pub fn sub(&self, other: &ExpPoly) -> Result<ExpPoly, PolyError> {
        self.add(&other.scale(&-Coeff::one()))
    }

    pub fn mul(&self, other: &ExpPoly) -> Result<ExpPoly, PolyError> {
        self.check_arity(other)?;
        let mut out = ExpPoly::zero(self.arity);
        for (e1, c1) in &self.terms {
            for (e2, c2) in &other.terms {
                out.accumulate(e1.add(e2), c1 * c2);
            }
        }
        Ok(out)
    }

    pub fn scale(&self, c: &Coeff) -> ExpPoly {
        if c.is_zero() {
            return ExpPoly::zero(self.arity);
        }
        ExpPoly {
            arity: self.arity,
            terms: self
                .terms
                .iter()
                .map(|(e, v)| (e.clone(), v * c))
                .collect(),
        }
    }

    /// Multiply by a monomial `exp` (no coefficient).
    pub fn shift_by(&self, exp: &ExpVec) -> ExpPoly {
        ExpPoly {
            arity: self.arity,
            terms: self
                .terms
                .iter()
                .map(|(e, v)| (e.add(exp), v.clone()))
                .collect(),
        }
    }

    /// Evaluate at a real point.
    pub fn eval(&self, point: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(e, c)| {
                let m: f64 = e
                    .0
                    .iter()
                    .zip(point)
                    .map(|(&k, &x)| x.powi(k as i32))
                    .product();
                rational_to_f64(c) * m
            })
            .sum()
    }

    /// Max total degree over the slots in `range`, or `None` for the zero polynomial.
    pub fn degree_in(&self, range: std::ops::Range<usize>) -> Option<u32> {
        self.terms.keys().map(|e| e.degree_in(range.clone())).max()
    }
}

impl fmt::Display for ExpPoly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let mut first = true;
        for (e, c) in self.terms.iter().rev() {
            if !first {
                write!(f, " + ")?;
            }
            first = false;
            write!(f, "({c})")?;
            for (i, &k) in e.0.iter().enumerate() {
                match k {
                    0 => {}
                    1 => write!(f, "*x{i}")?,
                    _ => write!(f, "*x{i}^{k}")?,
                }
            }
        }
        Ok(())
    }
}

pub fn poly_combine(p: &ExpPoly, q: &ExpPoly, op: &CombineOp) -> Result<ExpPoly, PolyError> {
    match op {
        CombineOp::Add => p.add(q),
        CombineOp::Mul => p.mul(q),
        CombineOp::Scale(c) => {
            p.check_arity(q)?;
            Ok(p.scale(c))
        }
    }
}

/// Expand `prod_j X_j (X_j - 1) ... (X_j - m_j + 1)` into monomials.
///
/// `orders` maps species slots to falling-factorial orders; the total order
/// must not exceed 2.
pub fn expand_falling_factorial(
    orders: &BTreeMap<usize, u32>,
    arity: usize,
) -> Result<ExpPoly, PolyError> {
    let total: u32 = orders.values().sum();
    if total > 2 {
        return Err(PolyError::OrderTooHigh(total));
    }
    let mut out = ExpPoly::one(arity);
    for (&slot, &m) in orders {
        if slot >= arity {
            return Err(PolyError::SlotOutOfRange { slot, arity });
        }
        for k in 0..m {
            let factor = ExpPoly::var(arity, slot)
                .add(&ExpPoly::constant(arity, Coeff::from_integer(-BigInt::from(k))))?;
            out = out.mul(&factor)?;
        }
    }
    Ok(out)
}

fn binomial(n: u32, k: u32) -> BigInt {
    let mut acc = BigInt::one();
    for i in 0..k {
        acc = acc * BigInt::from(n - i) / BigInt::from(i + 1);
    }
    acc
}

/// `(x + s)^zeta - x^zeta`, expanded.
pub fn shift_diff(zeta: &ExpVec, shat: &ExtStoich) -> Result<ExpPoly, PolyError> {
    let arity = zeta.arity();
    if shat.arity() != arity {
        return Err(PolyError::ArityMismatch {
            left: arity,
            right: shat.arity(),
        });
    }
    let mut prod = ExpPoly::one(arity);
    for (slot, (&z, &s)) in zeta.0.iter().zip(shat.shift()).enumerate() {
        if z == 0 {
            continue;
        }
        if s == 0 {
            prod = prod.shift_by(&{
                let mut e = ExpVec::zero(arity);
                e.0[slot] = z;
                e
            });
            continue;
        }
        // (x + s)^z = sum_k C(z, k) s^(z-k) x^k
        let mut factor = ExpPoly::zero(arity);
        for k in 0..=z {
            let c = binomial(z, k) * BigInt::from(s).pow(z - k);
            let mut e = ExpVec::zero(arity);
            e.0[slot] = k;
            factor.accumulate(e, Coeff::from_integer(c));
        }
        prod = prod.mul(&factor)?;
    }
    prod.sub(&ExpPoly::monomial(zeta.clone(), Coeff::one()))
}

/// A reaction lifted to the extended state: shift plus propensity polynomial
/// (with any fixed rate constants already multiplied into the coefficients).
#[derive(Clone, Debug, PartialEq)]
pub struct ExtReaction {
    pub shift: ExtStoich,
    pub propensity: ExpPoly,
}

/// `{(x + s)^zeta - x^zeta} * w(x)`; its term map is exactly the
/// stationary-moment coefficients of this reaction for row `zeta`.
pub fn generator_poly(zeta: &ExpVec, rxn: &ExtReaction) -> Result<ExpPoly, PolyError> {
    shift_diff(zeta, &rxn.shift)?.mul(&rxn.propensity)
}

pub fn rational_to_f64(c: &Coeff) -> f64 {
    c.to_f64().unwrap_or_else(|| {
        // fall back for huge numerators/denominators
        let n = c.numer().to_f64().unwrap_or(f64::NAN);
        let d = c.denom().to_f64().unwrap_or(f64::NAN);
        n / d
    })
}

/// Exact rational equal to the shortest decimal representation of `x`
/// (so `0.02` becomes `1/50`, not the nearest binary fraction).
pub fn rational_from_decimal(x: f64) -> Option<Coeff> {
    if !x.is_finite() {
        return None;
    }
    let s = format!("{x:e}");
    let (mant, exp) = s.split_once('e')?;
    let exp: i64 = exp.parse().ok()?;
    let neg = mant.starts_with('-');
    let mant = mant.trim_start_matches('-');
    let (int_part, frac_part) = mant.split_once('.').unwrap_or((mant, ""));
    let digits: BigInt = format!("{int_part}{frac_part}").parse().ok()?;
    let scale = exp - frac_part.len() as i64;
    let ten = BigInt::from(10);
    let mut r = if scale >= 0 {
        Coeff::from_integer(digits * ten.pow(scale as u32))
    } else {
        Coeff::new(digits, ten.pow((-scale) as u32))
    };
    if neg {
        r = -r;
    }
    Some(r)
}

pub fn is_positive(c: &Coeff) -> bool {
    c.is_positive()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(n: i64) -> Coeff {
        Coeff::from_integer(BigInt::from(n))
    }

    fn x(arity: usize) -> ExpPoly {
        ExpPoly::var(arity, 0)
    }

    #[test]
    fn additive_inverse_is_zero() {
        let p = x(1);
        let r = poly_combine(&p, &p.scale(&q(-1)), &CombineOp::Add).unwrap();
        assert!(r.is_zero());
    }

    #[test]
    fn product_expands() {
        let p = x(1);
        let pm1 = p.add(&ExpPoly::constant(1, q(-1))).unwrap();
        let r = poly_combine(&p, &pm1, &CombineOp::Mul).unwrap();
        assert_eq!(r.coeff(&ExpVec(vec![2])), q(1));
        assert_eq!(r.coeff(&ExpVec(vec![1])), q(-1));
        assert_eq!(r.len(), 2);
    }

    #[test]
    fn scale_through_parameter_monomial() {
        // 2 * K3 * X^2 as a term map over (X, K3)
        let x2 = ExpPoly::monomial(ExpVec(vec![2, 0]), q(1));
        let k3 = ExpPoly::var(2, 1).scale(&q(2));
        let r = x2.mul(&k3).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r.coeff(&ExpVec(vec![2, 1])), q(2));
    }

    #[test]
    fn arity_mismatch_is_reported() {
        let err = x(1).add(&x(2)).unwrap_err();
        assert_eq!(err, PolyError::ArityMismatch { left: 1, right: 2 });
    }

    #[test]
    fn falling_factorials() {
        let two: BTreeMap<usize, u32> = [(0, 2)].into();
        let p = expand_falling_factorial(&two, 1).unwrap();
        assert_eq!(p.coeff(&ExpVec(vec![2])), q(1));
        assert_eq!(p.coeff(&ExpVec(vec![1])), q(-1));

        let one: BTreeMap<usize, u32> = [(0, 1)].into();
        assert_eq!(expand_falling_factorial(&one, 1).unwrap(), x(1));

        let bilinear: BTreeMap<usize, u32> = [(0, 1), (1, 1)].into();
        let p = expand_falling_factorial(&bilinear, 2).unwrap();
        assert_eq!(p, ExpPoly::monomial(ExpVec(vec![1, 1]), q(1)));

        let three: BTreeMap<usize, u32> = [(0, 3)].into();
        assert_eq!(
            expand_falling_factorial(&three, 1).unwrap_err(),
            PolyError::OrderTooHigh(3)
        );
    }

    #[test]
    fn shift_diff_examples() {
        let p = shift_diff(&ExpVec(vec![1, 0, 0]), &ExtStoich::new(vec![1], 2)).unwrap();
        assert_eq!(p, ExpPoly::one(3));

        let p = shift_diff(&ExpVec(vec![2, 0, 0]), &ExtStoich::new(vec![-2], 2)).unwrap();
        assert_eq!(p.coeff(&ExpVec(vec![1, 0, 0])), q(-4));
        assert_eq!(p.coeff(&ExpVec(vec![0, 0, 0])), q(4));
        assert_eq!(p.len(), 2);

        let p = shift_diff(&ExpVec(vec![0, 1, 0]), &ExtStoich::new(vec![5], 2)).unwrap();
        assert!(p.is_zero());
    }

    #[test]
    fn generator_poly_dimerization_row_one() {
        // extended state (X, K1, K2, K3) with K3 symbolic
        let arity = 4;
        let ff: BTreeMap<usize, u32> = [(0, 2)].into();
        let w3 = expand_falling_factorial(&ff, arity)
            .unwrap()
            .mul(&ExpPoly::var(arity, 3))
            .unwrap();
        let rxn = ExtReaction {
            shift: ExtStoich::new(vec![-2], 3),
            propensity: w3,
        };
        let g = generator_poly(&ExpVec(vec![1, 0, 0, 0]), &rxn).unwrap();
        assert_eq!(g.coeff(&ExpVec(vec![1, 0, 0, 1])), q(2));
        assert_eq!(g.coeff(&ExpVec(vec![2, 0, 0, 1])), q(-2));
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn generator_poly_birth_against_k1() {
        // zeta = X K1, w1 = D K1 with D = 5
        let arity = 4;
        let rxn = ExtReaction {
            shift: ExtStoich::new(vec![1], 3),
            propensity: ExpPoly::var(arity, 1).scale(&q(5)),
        };
        let g = generator_poly(&ExpVec(vec![1, 1, 0, 0]), &rxn).unwrap();
        assert_eq!(g, ExpPoly::monomial(ExpVec(vec![0, 2, 0, 0]), q(5)));
        let none = generator_poly(&ExpVec(vec![0, 3, 1, 0]), &rxn).unwrap();
        assert!(none.is_zero());
    }

    #[test]
    fn decimal_rationals() {
        assert_eq!(rational_from_decimal(0.02).unwrap(), Coeff::new(1.into(), 50.into()));
        assert_eq!(rational_from_decimal(5.0).unwrap(), q(5));
        assert_eq!(rational_from_decimal(-1.25).unwrap(), Coeff::new((-5).into(), 4.into()));
        assert_eq!(rational_from_decimal(1e-20).unwrap(), Coeff::new(1.into(), BigInt::from(10).pow(20)));
    }

    #[test]
    fn grlex_order() {
        let mut v = vec![
            ExpVec(vec![1, 0, 1]),
            ExpVec(vec![0, 0, 1]),
            ExpVec(vec![1, 1, 0]),
            ExpVec(vec![0, 0, 0]),
            ExpVec(vec![1, 0, 0]),
            ExpVec(vec![0, 1, 0]),
        ];
        v.sort();
        assert_eq!(
            v,
            vec![
                ExpVec(vec![0, 0, 0]),
                ExpVec(vec![1, 0, 0]),
                ExpVec(vec![0, 1, 0]),
                ExpVec(vec![0, 0, 1]),
                ExpVec(vec![1, 1, 0]),
                ExpVec(vec![1, 0, 1]),
            ]
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn zeta_strategy() -> impl Strategy<Value = ExpVec> {
            proptest::collection::vec(0u32..5, 3).prop_map(ExpVec)
        }

        proptest! {
            #[test]
            fn zero_shift_vanishes(z in zeta_strategy()) {
                let p = shift_diff(&z, &ExtStoich::new(vec![0], 2)).unwrap();
                prop_assert!(p.is_zero());
            }

            #[test]
            fn unit_degree_gives_constant_shift(s in -3i64..4) {
                prop_assume!(s != 0);
                let p = shift_diff(&ExpVec(vec![1, 0, 0]), &ExtStoich::new(vec![s], 2)).unwrap();
                prop_assert_eq!(p, ExpPoly::constant(3, Coeff::from_integer(s.into())));
            }

            #[test]
            fn shift_diff_lowers_shifted_degree(z in zeta_strategy(), s in -2i64..3) {
                let p = shift_diff(&z, &ExtStoich::new(vec![s], 2)).unwrap();
                if let Some(d) = p.degree_in(0..3) {
                    prop_assert!(d < z.degree());
                }
            }

            #[test]
            fn shift_diff_matches_pointwise(z in zeta_strategy(), s in -2i64..3, x0 in 0.0f64..5.0, k in 0.1f64..2.0) {
                let p = shift_diff(&z, &ExtStoich::new(vec![s], 2)).unwrap();
                let pt = [x0, k, k + 0.5];
                let direct = (x0 + s as f64).powi(z.0[0] as i32) * k.powi(z.0[1] as i32) * (k + 0.5).powi(z.0[2] as i32)
                    - x0.powi(z.0[0] as i32) * k.powi(z.0[1] as i32) * (k + 0.5).powi(z.0[2] as i32);
                prop_assert!((p.eval(&pt) - direct).abs() <= 1e-9 * (1.0 + direct.abs()));
            }
        }
    }
}
