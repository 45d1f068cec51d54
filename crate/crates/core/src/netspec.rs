//! Reaction networks with uncertain rate parameters.
//!
//! A [`Network`] is parsed from a JSON document, validated, and then consumed
//! by the moment-equation and relaxation builders. Propensities are restricted
//! to `const * K * falling_factorial(X)` with total order at most two.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use num_rational::BigRational;
use num_traits::{Signed, Zero};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::momeq::gamma_moment;
use crate::polyalg::{
    expand_falling_factorial, rational_from_decimal, rational_to_f64, ExpPoly, ExtReaction,
    ExtStoich, PolyError,
};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("empty species list")]
    EmptySpecies,
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("unknown species {0}")]
    UnknownSpecies(String),
    #[error("duplicate identifier {0}")]
    Duplicate(String),
    #[error("propensity order {order} > 2 in reaction {reaction}")]
    PropensityOrder { reaction: usize, order: u32 },
    #[error("non-positive fixed value for parameter {0}")]
    NonPositiveFixed(String),
    #[error("invalid document: {0}")]
    Invalid(String),
    #[error("missing moment of order {order} for parameter {param}")]
    MissingMoment { param: String, order: u32 },
    #[error("non-positive variance for parameter {0}")]
    NonPositiveVariance(String),
    #[error("network failed validation: {}", .0.iter().map(|d| d.message.clone()).collect::<Vec<_>>().join("; "))]
    Validation(Vec<Diagnostic>),
    #[error(transparent)]
    Poly(#[from] PolyError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Species {
    pub name: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Propensity {
    /// Index into [`Network::params`].
    pub rate_param: usize,
    pub const_factor: BigRational,
    /// species index -> falling factorial order
    pub orders: BTreeMap<usize, u32>,
}

impl Propensity {
    pub fn total_order(&self) -> u32 {
        self.orders.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reaction {
    /// species index -> net change
    pub stoich: BTreeMap<usize, i64>,
    pub propensity: Propensity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaSpec {
    pub shape: f64,
    pub scale: f64,
    pub max_order: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamKind {
    Fixed(BigRational),
    Uncertain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub index: usize,
    pub kind: ParamKind,
    /// order -> E[K^order]; includes the orders derived from `gamma`.
    pub known_moments: BTreeMap<u32, f64>,
    pub gamma: Option<GammaSpec>,
    pub support_lower: f64,
}

impl ParamSpec {
    pub fn uncertain(name: &str, index: usize) -> Self {
        ParamSpec {
            name: name.to_string(),
            index,
            kind: ParamKind::Uncertain,
            known_moments: BTreeMap::new(),
            gamma: None,
            support_lower: 0.0,
        }
    }

    pub fn fixed(name: &str, index: usize, value: f64) -> Self {
        ParamSpec {
            name: name.to_string(),
            index,
            kind: ParamKind::Fixed(rational_from_decimal(value).unwrap_or_else(BigRational::zero)),
            known_moments: BTreeMap::new(),
            gamma: None,
            support_lower: 0.0,
        }
    }

    /// Uncertain parameter with gamma-distributed marginal, moments expanded
    /// up to `max_order`.
    pub fn gamma(name: &str, index: usize, shape: f64, scale: f64, max_order: u32) -> Self {
        let mut p = Self::uncertain(name, index);
        p.gamma = Some(GammaSpec {
            shape,
            scale,
            max_order,
        });
        p.expand_gamma();
        p
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self.kind, ParamKind::Fixed(_))
    }

    pub fn fixed_value(&self) -> Option<f64> {
        match &self.kind {
            ParamKind::Fixed(v) => Some(rational_to_f64(v)),
            ParamKind::Uncertain => None,
        }
    }

    fn expand_gamma(&mut self) {
        if let Some(g) = self.gamma {
            for order in 1..=g.max_order {
                if let Ok(v) = gamma_moment(g.shape, g.scale, order) {
                    self.known_moments.insert(order, v);
                }
            }
        }
    }

    /// Mean and standard deviation from the first two known moments.
    pub fn mean_sd(&self) -> Result<(f64, f64), NetError> {
        let m1 = *self.known_moments.get(&1).ok_or_else(|| NetError::MissingMoment {
            param: self.name.clone(),
            order: 1,
        })?;
        let m2 = *self.known_moments.get(&2).ok_or_else(|| NetError::MissingMoment {
            param: self.name.clone(),
            order: 2,
        })?;
        let var = m2 - m1 * m1;
        if var <= 0.0 {
            return Err(NetError::NonPositiveVariance(self.name.clone()));
        }
        Ok((m1, var.sqrt()))
    }
}

/// `sum_k coeff_k * E[K^beta_k] + constant >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMomentConstraint {
    /// (coefficient, param index -> order)
    pub terms: Vec<(f64, BTreeMap<usize, u32>)>,
    pub constant: f64,
}

/// Constraint entry as declared in the network document.
#[derive(Debug, Clone, PartialEq)]
pub enum Constraint {
    /// `|corr(K_a, K_b)| <= r`, expanded via [`correlation_constraints`].
    CorrelationBound { a: usize, b: usize, r: f64 },
    Affine(AffineMomentConstraint),
    /// Parameters are mutually independent: joint moments factor into
    /// products of marginal moments.
    Independent(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{tag}: {}", self.message)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub species: Vec<Species>,
    pub reactions: Vec<Reaction>,
    pub params: Vec<ParamSpec>,
    pub constraints: Vec<Constraint>,
}

impl Network {
    pub fn n_species(&self) -> usize {
        self.species.len()
    }

    /// Indices (into `params`) of the uncertain parameters, in declaration
    /// order. Position in this list is the parameter's slot in the extended
    /// state.
    pub fn uncertain_params(&self) -> Vec<usize> {
        self.params
            .iter()
            .filter(|p| !p.is_fixed())
            .map(|p| p.index)
            .collect()
    }

    pub fn n_uncertain(&self) -> usize {
        self.params.iter().filter(|p| !p.is_fixed()).count()
    }

    /// Arity of the extended state `(X, K_uncertain)`.
    pub fn arity(&self) -> usize {
        self.n_species() + self.n_uncertain()
    }

    pub fn species_index(&self, name: &str) -> Option<usize> {
        self.species.iter().position(|s| s.name == name)
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Slot of parameter `param` in the extended state, if uncertain.
    pub fn param_slot(&self, param: usize) -> Option<usize> {
        self.uncertain_params()
            .iter()
            .position(|&p| p == param)
            .map(|i| self.n_species() + i)
    }

    /// Reactions lifted to the extended state, fixed rates substituted.
    pub fn ext_reactions(&self) -> Result<Vec<ExtReaction>, NetError> {
        let n = self.n_species();
        let r = self.n_uncertain();
        let arity = n + r;
        self.reactions
            .iter()
            .map(|rxn| {
                let mut shift = vec![0i64; n];
                for (&s, &d) in &rxn.stoich {
                    shift[s] = d;
                }
                let prop = &rxn.propensity;
                let mut w = expand_falling_factorial(&prop.orders, arity)?
                    .scale(&prop.const_factor);
                match &self.params[prop.rate_param].kind {
                    ParamKind::Fixed(v) => w = w.scale(v),
                    ParamKind::Uncertain => {
                        let slot = self.param_slot(prop.rate_param).expect("uncertain slot");
                        w = w.mul(&ExpPoly::var(arity, slot))?;
                    }
                }
                Ok(ExtReaction {
                    shift: ExtStoich::new(shift, r),
                    propensity: w,
                })
            })
            .collect()
    }

    /// Support polynomials `c_i(K) = K_i - lower_i` for each uncertain parameter.
    pub fn param_support_polys(&self) -> Vec<ExpPoly> {
        let arity = self.arity();
        self.uncertain_params()
            .iter()
            .map(|&p| {
                let slot = self.param_slot(p).unwrap();
                let lower = rational_from_decimal(self.params[p].support_lower)
                    .unwrap_or_else(BigRational::zero);
                ExpPoly::var(arity, slot)
                    .sub(&ExpPoly::constant(arity, lower))
                    .expect("same arity")
            })
            .collect()
    }

    /// Support polynomials `d_j(X) = X_j`.
    pub fn species_support_polys(&self) -> Vec<ExpPoly> {
        let arity = self.arity();
        (0..self.n_species())
            .map(|j| ExpPoly::var(arity, j))
            .collect()
    }

    /// Known value of `E[K^beta]`, `beta` indexed by uncertain slot
    /// (length = number of uncertain parameters).
    ///
    /// Single-parameter moments come from the declared marginals; joint
    /// moments are known only for parameters declared independent.
    pub fn known_param_moment(&self, beta: &[u32]) -> Option<f64> {
        let uncertain = self.uncertain_params();
        let active: Vec<usize> = beta
            .iter()
            .enumerate()
            .filter(|(_, &b)| b > 0)
            .map(|(i, _)| i)
            .collect();
        match active.len() {
            0 => Some(1.0),
            1 => {
                let i = active[0];
                self.params[uncertain[i]].known_moments.get(&beta[i]).copied()
            }
            _ => {
                let members: BTreeSet<usize> = active.iter().map(|&i| uncertain[i]).collect();
                let independent = self.constraints.iter().any(|c| match c {
                    Constraint::Independent(ps) => {
                        let set: BTreeSet<usize> = ps.iter().copied().collect();
                        members.is_subset(&set)
                    }
                    _ => false,
                });
                if !independent {
                    return None;
                }
                active
                    .iter()
                    .map(|&i| self.params[uncertain[i]].known_moments.get(&beta[i]).copied())
                    .product()
            }
        }
    }

    /// All declared constraints expanded into affine moment inequalities.
    pub fn moment_constraints(&self) -> Result<Vec<AffineMomentConstraint>, NetError> {
        let mut out = Vec::new();
        for c in &self.constraints {
            match c {
                Constraint::CorrelationBound { a, b, r } => {
                    let [h1, h2] = correlation_constraints(&self.params[*a], &self.params[*b], *r)?;
                    out.push(h1);
                    out.push(h2);
                }
                Constraint::Affine(a) => out.push(a.clone()),
                Constraint::Independent(_) => {}
            }
        }
        Ok(out)
    }

    /// Copy of the network with every correlation bound set to `r`.
    pub fn with_correlation(&self, r: f64) -> Network {
        let mut net = self.clone();
        for c in &mut net.constraints {
            if let Constraint::CorrelationBound { r: rr, .. } = c {
                *rr = r;
            }
        }
        net
    }

    /// Copy with every uncertain parameter fixed to the given values
    /// (indexed like `params`).
    pub fn with_fixed_params(&self, values: &[f64]) -> Network {
        let mut net = self.clone();
        for (p, &v) in net.params.iter_mut().zip(values) {
            if !p.is_fixed() {
                *p = ParamSpec::fixed(&p.name, p.index, v);
            }
        }
        net.constraints.clear();
        net
    }
}

/// The two affine inequalities encoding `|corr(K_a, K_b)| <= r`:
/// `-E[K_a K_b] + m_a m_b + r s_a s_b >= 0` and
/// `E[K_a K_b] - m_a m_b + r s_a s_b >= 0`.
pub fn correlation_constraints(
    pa: &ParamSpec,
    pb: &ParamSpec,
    r: f64,
) -> Result<[AffineMomentConstraint; 2], NetError> {
    if !(0.0..=1.0).contains(&r) {
        return Err(NetError::Invalid(format!("correlation bound r={r} outside [0, 1]")));
    }
    let (ma, sa) = pa.mean_sd()?;
    let (mb, sb) = pb.mean_sd()?;
    let beta: BTreeMap<usize, u32> = if pa.index == pb.index {
        [(pa.index, 2)].into()
    } else {
        [(pa.index, 1), (pb.index, 1)].into()
    };
    let center = ma * mb;
    let half = r * sa * sb;
    Ok([
        AffineMomentConstraint {
            terms: vec![(-1.0, beta.clone())],
            constant: center + half,
        },
        AffineMomentConstraint {
            terms: vec![(1.0, beta)],
            constant: -center + half,
        },
    ])
}

/// Check the structural invariants. Problems that make the model unusable are
/// errors; vacuous uncertainty is reported as a warning.
pub fn validate_network(net: &Network) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut err = |m: String| {
        out.push(Diagnostic {
            severity: Severity::Error,
            message: m,
        })
    };

    if net.species.is_empty() {
        err("empty species list".into());
    }
    let mut seen = HashMap::new();
    for (i, s) in net.species.iter().enumerate() {
        if s.index != i {
            err(format!("species {} has index {} (expected {i})", s.name, s.index));
        }
        if seen.insert(s.name.clone(), ()).is_some() {
            err(format!("duplicate identifier {}", s.name));
        }
    }
    for (i, p) in net.params.iter().enumerate() {
        if p.index != i {
            err(format!("parameter {} has index {} (expected {i})", p.name, p.index));
        }
        if seen.insert(p.name.clone(), ()).is_some() {
            err(format!("duplicate identifier {}", p.name));
        }
        match &p.kind {
            ParamKind::Fixed(v) => {
                if !v.is_positive() {
                    err(format!("non-positive fixed value for parameter {}", p.name));
                }
                if !p.known_moments.is_empty() || p.gamma.is_some() {
                    err(format!("fixed parameter {} carries moment data", p.name));
                }
            }
            ParamKind::Uncertain => {
                if let Some(&m0) = p.known_moments.get(&0) {
                    if m0 != 1.0 {
                        err(format!("moment of order 0 for {} must be 1", p.name));
                    }
                }
                if let Some(g) = p.gamma {
                    if !(g.shape > 0.0 && g.scale > 0.0) {
                        err(format!("gamma parameters of {} must be positive", p.name));
                    }
                }
            }
        }
    }
    for (i, rxn) in net.reactions.iter().enumerate() {
        if rxn.stoich.values().all(|&d| d == 0) {
            err(format!("reaction {i} has all-zero stoichiometry"));
        }
        if rxn.stoich.keys().chain(rxn.propensity.orders.keys()).any(|&s| s >= net.species.len()) {
            err(format!("reaction {i} references an undeclared species"));
        }
        if rxn.propensity.rate_param >= net.params.len() {
            err(format!("reaction {i} references an undeclared parameter"));
        }
        if rxn.propensity.total_order() > 2 {
            err(format!(
                "propensity order {} > 2 in reaction {i}",
                rxn.propensity.total_order()
            ));
        }
        if !rxn.propensity.const_factor.is_positive() {
            err(format!("reaction {i} has a non-positive constant factor"));
        }
    }

    let mut constrained: BTreeSet<usize> = BTreeSet::new();
    for c in &net.constraints {
        match c {
            Constraint::CorrelationBound { a, b, r } => {
                if !(0.0..=1.0).contains(r) {
                    err(format!("correlation bound r={r} outside [0, 1]"));
                }
                for &p in [a, b] {
                    if p >= net.params.len() || net.params[p].is_fixed() {
                        err("correlation bound must reference uncertain parameters".to_string());
                    } else {
                        constrained.insert(p);
                    }
                }
            }
            Constraint::Affine(a) => {
                if a.terms.is_empty() {
                    err("affine constraint without terms".into());
                }
                for (_, beta) in &a.terms {
                    for &p in beta.keys() {
                        if p >= net.params.len() || net.params[p].is_fixed() {
                            err("affine constraint must reference uncertain parameters".into());
                        } else {
                            constrained.insert(p);
                        }
                    }
                }
            }
            Constraint::Independent(ps) => {
                for &p in ps {
                    if p >= net.params.len() || net.params[p].is_fixed() {
                        err("independence must reference uncertain parameters".into());
                    }
                }
            }
        }
    }
    for p in &net.params {
        if !p.is_fixed()
            && p.known_moments.keys().all(|&k| k == 0)
            && !constrained.contains(&p.index)
        {
            out.push(Diagnostic {
                severity: Severity::Warning,
                message: format!("unconstrained parameter {}", p.name),
            });
        }
    }
    out
}

// ---------------------------------------------------------------------------
// JSON document

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DocParam {
    name: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gamma: Option<GammaSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    moments: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    support_lower: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DocReaction {
    rate: String,
    #[serde(default, rename = "const", skip_serializing_if = "Option::is_none")]
    const_factor: Option<f64>,
    #[serde(default)]
    orders: BTreeMap<String, u32>,
    stoich: BTreeMap<String, i64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DocTerm {
    coeff: f64,
    beta: BTreeMap<String, u32>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum DocConstraint {
    CorrelationBound {
        params: [String; 2],
        r: f64,
    },
    Affine {
        terms: Vec<DocTerm>,
        #[serde(default)]
        constant: f64,
        #[serde(default = "default_sense")]
        sense: String,
    },
    Independent {
        params: Vec<String>,
    },
}

fn default_sense() -> String {
    ">=".to_string()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    species: Vec<String>,
    #[serde(default)]
    parameters: Vec<DocParam>,
    #[serde(default)]
    reactions: Vec<DocReaction>,
    #[serde(default)]
    constraints: Vec<DocConstraint>,
}

fn syntax(e: serde_json::Error) -> NetError {
    NetError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

/// Parse and validate a network document.
pub fn parse_network(text: &str) -> Result<Network, NetError> {
    let doc: Document = serde_json::from_str(text).map_err(syntax)?;
    if doc.species.is_empty() {
        return Err(NetError::EmptySpecies);
    }
    let species: Vec<Species> = doc
        .species
        .iter()
        .enumerate()
        .map(|(index, name)| Species {
            name: name.clone(),
            index,
        })
        .collect();

    let mut params = Vec::new();
    for (index, dp) in doc.parameters.iter().enumerate() {
        let p = match dp.kind.as_str() {
            "fixed" => {
                let v = dp
                    .value
                    .ok_or_else(|| NetError::Invalid(format!("fixed parameter {} needs a value", dp.name)))?;
                if v <= 0.0 {
                    return Err(NetError::NonPositiveFixed(dp.name.clone()));
                }
                if dp.gamma.is_some() || dp.moments.is_some() {
                    return Err(NetError::Invalid(format!(
                        "fixed parameter {} cannot carry moment data",
                        dp.name
                    )));
                }
                ParamSpec::fixed(&dp.name, index, v)
            }
            "uncertain" => {
                if dp.value.is_some() {
                    return Err(NetError::Invalid(format!(
                        "uncertain parameter {} cannot have a fixed value",
                        dp.name
                    )));
                }
                let mut p = ParamSpec::uncertain(&dp.name, index);
                if let Some(g) = dp.gamma {
                    if !(g.shape > 0.0 && g.scale > 0.0) {
                        return Err(NetError::Invalid(format!(
                            "gamma parameters of {} must be positive",
                            dp.name
                        )));
                    }
                    p.gamma = Some(g);
                    p.expand_gamma();
                }
                if let Some(ms) = &dp.moments {
                    for (k, &v) in ms {
                        let order: u32 = k.parse().map_err(|_| {
                            NetError::Invalid(format!("moment order {k:?} of {} is not an integer", dp.name))
                        })?;
                        p.known_moments.insert(order, v);
                    }
                }
                p.support_lower = dp.support_lower.unwrap_or(0.0);
                p
            }
            other => {
                return Err(NetError::Invalid(format!(
                    "parameter kind {other:?} (expected \"fixed\" or \"uncertain\")"
                )))
            }
        };
        params.push(p);
    }

    let lookup_species = |name: &str| {
        species
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| NetError::UnknownSpecies(name.to_string()))
    };
    let lookup_param = |name: &str| {
        params
            .iter()
            .position(|p: &ParamSpec| p.name == name)
            .ok_or_else(|| NetError::UnknownParameter(name.to_string()))
    };

    let mut reactions = Vec::new();
    for (i, dr) in doc.reactions.iter().enumerate() {
        let rate_param = lookup_param(&dr.rate)?;
        let mut orders = BTreeMap::new();
        for (s, &m) in &dr.orders {
            if m > 0 {
                orders.insert(lookup_species(s)?, m);
            }
        }
        let order: u32 = orders.values().sum();
        if order > 2 {
            return Err(NetError::PropensityOrder { reaction: i, order });
        }
        let mut stoich = BTreeMap::new();
        for (s, &d) in &dr.stoich {
            if d != 0 {
                stoich.insert(lookup_species(s)?, d);
            }
        }
        let c = dr.const_factor.unwrap_or(1.0);
        if c <= 0.0 {
            return Err(NetError::Invalid(format!("reaction {i} has a non-positive constant factor")));
        }
        reactions.push(Reaction {
            stoich,
            propensity: Propensity {
                rate_param,
                const_factor: rational_from_decimal(c)
                    .ok_or_else(|| NetError::Invalid(format!("reaction {i} constant is not finite")))?,
                orders,
            },
        });
    }

    let mut constraints = Vec::new();
    for dc in &doc.constraints {
        constraints.push(match dc {
            DocConstraint::CorrelationBound { params: [a, b], r } => Constraint::CorrelationBound {
                a: lookup_param(a)?,
                b: lookup_param(b)?,
                r: *r,
            },
            DocConstraint::Affine {
                terms,
                constant,
                sense,
            } => {
                let sign = match sense.as_str() {
                    ">=" => 1.0,
                    "<=" => -1.0,
                    other => return Err(NetError::Invalid(format!("unknown constraint sense {other:?}"))),
                };
                let mut out = Vec::new();
                for t in terms {
                    let mut beta = BTreeMap::new();
                    for (p, &o) in &t.beta {
                        if o > 0 {
                            beta.insert(lookup_param(p)?, o);
                        }
                    }
                    out.push((sign * t.coeff, beta));
                }
                Constraint::Affine(AffineMomentConstraint {
                    terms: out,
                    constant: sign * constant,
                })
            }
            DocConstraint::Independent { params: ps } => {
                Constraint::Independent(ps.iter().map(|p| lookup_param(p)).collect::<Result<_, _>>()?)
            }
        });
    }

    let net = Network {
        species,
        reactions,
        params,
        constraints,
    };
    let errors: Vec<Diagnostic> = validate_network(&net)
        .into_iter()
        .filter(|d| d.severity == Severity::Error)
        .collect();
    if !errors.is_empty() {
        return Err(NetError::Validation(errors));
    }
    Ok(net)
}

/// Serialize back to the JSON document format.
pub fn serialize_network(net: &Network) -> String {
    let sp = |i: usize| net.species[i].name.clone();
    let pn = |i: usize| net.params[i].name.clone();
    let doc = Document {
        species: net.species.iter().map(|s| s.name.clone()).collect(),
        parameters: net
            .params
            .iter()
            .map(|p| {
                let gamma_max = p.gamma.map(|g| g.max_order).unwrap_or(0);
                let explicit: BTreeMap<String, f64> = p
                    .known_moments
                    .iter()
                    .filter(|(&k, _)| k > gamma_max)
                    .map(|(k, v)| (k.to_string(), *v))
                    .collect();
                DocParam {
                    name: p.name.clone(),
                    kind: if p.is_fixed() { "fixed" } else { "uncertain" }.into(),
                    value: p.fixed_value(),
                    gamma: p.gamma,
                    moments: (!explicit.is_empty()).then_some(explicit),
                    support_lower: (p.support_lower != 0.0).then_some(p.support_lower),
                }
            })
            .collect(),
        reactions: net
            .reactions
            .iter()
            .map(|r| DocReaction {
                rate: pn(r.propensity.rate_param),
                const_factor: Some(rational_to_f64(&r.propensity.const_factor)),
                orders: r.propensity.orders.iter().map(|(&s, &m)| (sp(s), m)).collect(),
                stoich: r.stoich.iter().map(|(&s, &d)| (sp(s), d)).collect(),
            })
            .collect(),
        constraints: net
            .constraints
            .iter()
            .map(|c| match c {
                Constraint::CorrelationBound { a, b, r } => DocConstraint::CorrelationBound {
                    params: [pn(*a), pn(*b)],
                    r: *r,
                },
                Constraint::Affine(a) => DocConstraint::Affine {
                    terms: a
                        .terms
                        .iter()
                        .map(|(c, beta)| DocTerm {
                            coeff: *c,
                            beta: beta.iter().map(|(&p, &o)| (pn(p), o)).collect(),
                        })
                        .collect(),
                    constant: a.constant,
                    sense: ">=".into(),
                },
                Constraint::Independent(ps) => DocConstraint::Independent {
                    params: ps.iter().map(|&p| pn(p)).collect(),
                },
            })
            .collect(),
    };
    let mut v = serde_json::to_value(&doc).expect("document serializes");
    if let Value::Object(m) = &mut v {
        tidy(m);
    }
    serde_json::to_string_pretty(&v).expect("document serializes")
}

fn tidy(m: &mut Map<String, Value>) {
    if let Some(Value::Array(cs)) = m.get("constraints") {
        if cs.is_empty() {
            m.remove("constraints");
        }
    }
}

/// The dimerization network used throughout the examples: birth at rate
/// `K1 D`, degradation at `K2 X`, dimerization at `K3 X (X - 1)`.
pub fn dimerization_document(correlation: Option<f64>, independent: bool) -> String {
    let mut constraints = Vec::new();
    if let Some(r) = correlation {
        constraints.push(format!(
            r#"{{"type": "correlation_bound", "params": ["K1", "K2"], "r": {r}}}"#
        ));
    }
    if independent {
        constraints.push(r#"{"type": "independent", "params": ["K1", "K2"]}"#.to_string());
    }
    format!(
        r#"{{
  "species": ["X"],
  "parameters": [
    {{"name": "K1", "kind": "uncertain", "gamma": {{"shape": 2, "scale": 0.4, "max_order": 24}}}},
    {{"name": "K2", "kind": "uncertain", "gamma": {{"shape": 4, "scale": 0.1, "max_order": 24}}}},
    {{"name": "K3", "kind": "fixed", "value": 0.02}}
  ],
  "reactions": [
    {{"rate": "K1", "const": 5, "orders": {{}}, "stoich": {{"X": 1}}}},
    {{"rate": "K2", "orders": {{"X": 1}}, "stoich": {{"X": -1}}}},
    {{"rate": "K3", "orders": {{"X": 2}}, "stoich": {{"X": -2}}}}
  ],
  "constraints": [{}]
}}"#,
        constraints.join(", ")
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dimer() -> Network {
        parse_network(&dimerization_document(Some(0.2), false)).unwrap()
    }

    #[test]
    fn parses_dimerization() {
        let net = dimer();
        assert_eq!(net.n_species(), 1);
        assert_eq!(net.reactions.len(), 3);
        assert_eq!(net.params.len(), 3);
        assert_eq!(net.n_uncertain(), 2);
        assert_eq!(net.reactions[2].stoich[&0], -2);
        assert_eq!(net.reactions[2].propensity.orders[&0], 2);
        assert_eq!(
            net.reactions[0].propensity.const_factor,
            BigRational::from_integer(5.into())
        );
        assert!((net.params[0].known_moments[&2] - 0.96).abs() < 1e-15);
        assert!(validate_network(&net.with_correlation(0.2)).is_empty());
    }

    #[test]
    fn empty_species_rejected() {
        let err = parse_network(r#"{"species": [], "parameters": [], "reactions": []}"#).unwrap_err();
        assert_eq!(err.to_string(), "empty species list");
    }

    #[test]
    fn unknown_parameter_rejected() {
        let doc = r#"{"species": ["X"], "parameters": [],
            "reactions": [{"rate": "K9", "orders": {}, "stoich": {"X": 1}}]}"#;
        let err = parse_network(doc).unwrap_err();
        assert_eq!(err.to_string(), "unknown parameter K9");
    }

    #[test]
    fn syntax_error_has_position() {
        let err = parse_network("{\"species\": [\"X\",]}").unwrap_err();
        match err {
            NetError::Syntax { line, column, .. } => {
                assert_eq!(line, 1);
                assert!(column > 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn third_order_propensity_rejected() {
        let doc = r#"{"species": ["X"], "parameters": [{"name": "k", "kind": "fixed", "value": 1}],
            "reactions": [{"rate": "k", "orders": {"X": 3}, "stoich": {"X": -3}}]}"#;
        assert!(matches!(
            parse_network(doc).unwrap_err(),
            NetError::PropensityOrder { order: 3, .. }
        ));
    }

    #[test]
    fn non_positive_fixed_rejected() {
        let doc = r#"{"species": ["X"], "parameters": [{"name": "k", "kind": "fixed", "value": 0}],
            "reactions": []}"#;
        assert!(matches!(parse_network(doc).unwrap_err(), NetError::NonPositiveFixed(_)));
    }

    #[test]
    fn unconstrained_parameter_warns() {
        let doc = r#"{"species": ["X"], "parameters": [{"name": "k", "kind": "uncertain"}],
            "reactions": [{"rate": "k", "orders": {"X": 1}, "stoich": {"X": -1}}]}"#;
        let net = parse_network(doc).unwrap();
        let d = validate_network(&net);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].severity, Severity::Warning);
        assert!(d[0].message.contains("unconstrained parameter"));
    }

    #[test]
    fn null_reaction_is_an_error() {
        let mut net = dimer();
        net.reactions[0].stoich.clear();
        let d = validate_network(&net);
        assert!(d.iter().any(|d| d.severity == Severity::Error && d.message.contains("all-zero")));
    }

    #[test]
    fn correlation_interval() {
        let net = dimer();
        let [h1, h2] = correlation_constraints(&net.params[0], &net.params[1], 0.2).unwrap();
        // h1: -x + c1 >= 0 -> x <= c1; h2: x - c2' >= 0 -> x >= -h2.constant
        let upper = h1.constant;
        let lower = -h2.constant;
        let half = 0.2 * 0.32f64.sqrt() * 0.2;
        assert!((upper - (0.32 + half)).abs() < 1e-14, "{upper}");
        assert!((lower - (0.32 - half)).abs() < 1e-14, "{lower}");
        assert!((upper - 0.342_628).abs() < 1e-6);
        assert!((lower - 0.297_372).abs() < 1e-6);

        let [h1, h2] = correlation_constraints(&net.params[0], &net.params[1], 0.0).unwrap();
        assert!((h1.constant - 0.32).abs() < 1e-15);
        assert!((-h2.constant - 0.32).abs() < 1e-15);

        let [h1, h2] = correlation_constraints(&net.params[0], &net.params[1], 1.0).unwrap();
        let (_, s1) = net.params[0].mean_sd().unwrap();
        let (_, s2) = net.params[1].mean_sd().unwrap();
        assert!((h1.constant + h2.constant - 2.0 * s1 * s2).abs() < 1e-15);
        assert!(((h1.constant - h2.constant) / 2.0 - 0.32).abs() < 1e-15);
    }

    #[test]
    fn correlation_needs_second_moments() {
        let mut p = ParamSpec::uncertain("a", 0);
        p.known_moments.insert(1, 1.0);
        let q = ParamSpec::gamma("b", 1, 2.0, 1.0, 4);
        assert!(matches!(
            correlation_constraints(&p, &q, 0.5),
            Err(NetError::MissingMoment { order: 2, .. })
        ));
        p.known_moments.insert(2, 1.0);
        assert!(matches!(
            correlation_constraints(&p, &q, 0.5),
            Err(NetError::NonPositiveVariance(_))
        ));
    }

    #[test]
    fn independence_factorizes_joint_moments() {
        let net = parse_network(&dimerization_document(None, true)).unwrap();
        let v = net.known_param_moment(&[2, 1]).unwrap();
        assert!((v - 0.96 * 0.4).abs() < 1e-15);
        let dep = dimer();
        assert!(dep.known_param_moment(&[2, 1]).is_none());
        assert_eq!(dep.known_param_moment(&[0, 0]), Some(1.0));
    }

    #[test]
    fn round_trip_examples() {
        for doc in [
            dimerization_document(Some(0.6), false),
            dimerization_document(None, true),
            r#"{"species": ["A", "B"], "parameters": [
                {"name": "k", "kind": "uncertain", "moments": {"1": 2.0, "2": 5.0}, "support_lower": 0.5},
                {"name": "m", "kind": "fixed", "value": 0.125}],
              "reactions": [{"rate": "k", "const": 2.5, "orders": {"A": 1, "B": 1}, "stoich": {"A": -1, "B": 1}},
                            {"rate": "m", "orders": {}, "stoich": {"A": 1}}],
              "constraints": [{"type": "affine", "terms": [{"coeff": -1, "beta": {"k": 1}}], "constant": 3, "sense": ">="}]}"#
                .to_string(),
        ] {
            let net = parse_network(&doc).unwrap();
            let again = parse_network(&serialize_network(&net)).unwrap();
            assert_eq!(net, again);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn correlation_width_is_increasing_affine(r1 in 0.0f64..1.0, r2 in 0.0f64..1.0) {
                let net = dimer();
                let width = |r: f64| {
                    let [h1, h2] = correlation_constraints(&net.params[0], &net.params[1], r).unwrap();
                    h1.constant + h2.constant
                };
                prop_assert!(width(0.0).abs() < 1e-15);
                let slope = width(1.0);
                prop_assert!((width(r1) - r1 * slope).abs() < 1e-12);
                if r1 < r2 {
                    prop_assert!(width(r1) < width(r2));
                }
            }

            #[test]
            fn round_trip_random_networks(
                k in 0.01f64..10.0,
                shape in 0.5f64..5.0,
                scale in 0.01f64..2.0,
                order in 0u32..3,
                delta in 1i64..3,
                r in 0.0f64..1.0,
            ) {
                let doc = format!(r#"{{"species": ["P"], "parameters": [
                    {{"name": "a", "kind": "uncertain", "gamma": {{"shape": {shape}, "scale": {scale}, "max_order": 6}}}},
                    {{"name": "b", "kind": "uncertain", "gamma": {{"shape": {shape}, "scale": {scale}, "max_order": 3}}}},
                    {{"name": "c", "kind": "fixed", "value": {k}}}],
                  "reactions": [{{"rate": "a", "orders": {{}}, "stoich": {{"P": {delta}}}}},
                                {{"rate": "c", "orders": {{"P": {order}}}, "stoich": {{"P": -1}}}}],
                  "constraints": [{{"type": "correlation_bound", "params": ["a", "b"], "r": {r}}}]}}"#);
                let net = parse_network(&doc).unwrap();
                prop_assert_eq!(parse_network(&serialize_network(&net)).unwrap(), net);
            }
        }
    }
}
