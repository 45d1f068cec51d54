//! Stochastic simulation at fixed parameters, the correlated-parameter
//! sampling protocol and a truncated-chain stationary oracle.

use crate::netspec::Network;
use crate::polyalg::rational_to_f64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SsaError {
    #[error("correlation target not reached after {swaps} swap attempts (achieved {achieved:.4})")]
    NonConvergence { swaps: usize, achieved: f64 },
    #[error("step limit of {0} events exceeded; the chain may be explosive")]
    StepLimit(u64),
    #[error("singular generator: state {0} cannot reach the rest of the chain")]
    Singular(usize),
    #[error("invalid input: {0}")]
    Invalid(String),
}

/// One value per parameter of the network; fixed parameters carry their
/// declared value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamSample {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub t_end: f64,
    pub n_cells: usize,
    pub seed: u64,
    /// Initial copy numbers; empty means all zero.
    pub x0: Vec<i64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            t_end: 1440.0,
            n_cells: 100_000,
            seed: 0,
            x0: Vec::new(),
        }
    }
}

impl SimConfig {
    fn validate(&self) -> Result<(), SsaError> {
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(SsaError::Invalid(format!("t_end must be positive, got {}", self.t_end)));
        }
        if self.n_cells == 0 {
            return Err(SsaError::Invalid("n_cells must be at least 1".into()));
        }
        if self.x0.iter().any(|&v| v < 0) {
            return Err(SsaError::Invalid("negative initial copy number".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrSign {
    Positive,
    Negative,
}

fn pearson(a: &[f64], b: &[f64]) -> (f64, f64, f64, f64, f64) {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let sa = (a.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / n).sqrt();
    let sb = (b.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / n).sqrt();
    let sab = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    (ma, mb, sa, sb, sab)
}

/// Draw `n` pairs from two gamma marginals given as `(shape, scale)`, pair
/// them by rank (ascending with ascending for `Positive`, ascending with
/// descending for `Negative`) and swap second components of random pairs
/// until `corr <= r` (resp. `corr >= -r`). A swap is kept only when it moves
/// the correlation toward the target. Each returned sample holds two values.
pub fn sample_correlated_params(
    spec_a: (f64, f64),
    spec_b: (f64, f64),
    r: f64,
    sign: CorrSign,
    n: usize,
    seed: u64,
) -> Result<Vec<ParamSample>, SsaError> {
    if n < 2 {
        return Err(SsaError::Invalid("at least two samples are needed".into()));
    }
    if !(0.0..=1.0).contains(&r) {
        return Err(SsaError::Invalid(format!("correlation bound r={r} outside [0, 1]")));
    }
    let dist = |(shape, scale): (f64, f64)| {
        Gamma::new(shape, scale).map_err(|e| SsaError::Invalid(format!("gamma({shape}, {scale}): {e}")))
    };
    let (ga, gb) = (dist(spec_a)?, dist(spec_b)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a: Vec<f64> = (0..n).map(|_| ga.sample(&mut rng)).collect();
    let mut b: Vec<f64> = (0..n).map(|_| gb.sample(&mut rng)).collect();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if sign == CorrSign::Negative {
        b.reverse();
    }
    let pairs = rank_pairs_to_target(&a, &mut b, r, sign, &mut rng)?;
    Ok(pairs)
}

fn rank_pairs_to_target(
    a: &[f64],
    b: &mut [f64],
    r: f64,
    sign: CorrSign,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ParamSample>, SsaError> {
    let n = a.len();
    let (ma, mb, sa, sb, mut sab) = pearson(a, b);
    let nf = n as f64;
    let corr = |sab: f64| {
        if sa == 0.0 || sb == 0.0 {
            0.0
        } else {
            (sab / nf - ma * mb) / (sa * sb)
        }
    };
    let done = |c: f64| match sign {
        CorrSign::Positive => c <= r,
        CorrSign::Negative => c >= -r,
    };
    let budget = 200 * n + 100_000;
    let mut attempts = 0;
    while !done(corr(sab)) {
        if attempts == budget {
            return Err(SsaError::NonConvergence {
                swaps: budget,
                achieved: corr(sab),
            });
        }
        attempts += 1;
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        let delta = (a[i] - a[j]) * (b[j] - b[i]);
        let toward = match sign {
            CorrSign::Positive => delta < 0.0,
            CorrSign::Negative => delta > 0.0,
        };
        if toward {
            b.swap(i, j);
            sab += delta;
        }
    }
    Ok(a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| ParamSample { values: vec![x, y] })
        .collect())
}

/// Empirical Pearson correlation of the first two values of each sample.
pub fn sample_correlation(samples: &[ParamSample]) -> f64 {
    let a: Vec<f64> = samples.iter().map(|s| s.values[0]).collect();
    let b: Vec<f64> = samples.iter().map(|s| s.values[1]).collect();
    let (ma, mb, sa, sb, sab) = pearson(&a, &b);
    (sab / a.len() as f64 - ma * mb) / (sa * sb)
}

/// Place pairs for the network's two uncertain parameters into full samples,
/// filling fixed parameters with their values.
pub fn embed_pairs(net: &Network, pairs: &[ParamSample]) -> Result<Vec<ParamSample>, SsaError> {
    let unc = net.uncertain_params();
    if unc.len() != 2 {
        return Err(SsaError::Invalid(format!(
            "the sampling protocol needs exactly two uncertain parameters, found {}",
            unc.len()
        )));
    }
    let base: Vec<f64> = net.params.iter().map(|p| p.fixed_value().unwrap_or(0.0)).collect();
    Ok(pairs
        .iter()
        .map(|p| {
            let mut v = base.clone();
            v[unc[0]] = p.values[0];
            v[unc[1]] = p.values[1];
            ParamSample { values: v }
        })
        .collect())
}

/// Reaction channels with parameters substituted.
struct Channels {
    /// (rate constant, [(species, order)], [(species, change)])
    list: Vec<(f64, Vec<(usize, u32)>, Vec<(usize, i64)>)>,
}

impl Channels {
    fn new(net: &Network, k: &ParamSample) -> Result<Self, SsaError> {
        if k.values.len() != net.params.len() {
            return Err(SsaError::Invalid(format!(
                "parameter sample has {} values, network has {} parameters",
                k.values.len(),
                net.params.len()
            )));
        }
        if k.values.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(SsaError::Invalid("parameter values must be positive".into()));
        }
        let list = net
            .reactions
            .iter()
            .map(|r| {
                let p = &r.propensity;
                let c = k.values[p.rate_param] * rational_to_f64(&p.const_factor);
                (
                    c,
                    p.orders.iter().map(|(&s, &m)| (s, m)).collect(),
                    r.stoich.iter().map(|(&s, &d)| (s, d)).collect(),
                )
            })
            .collect();
        Ok(Channels { list })
    }

    fn propensity(&self, i: usize, x: &[i64]) -> f64 {
        let (c, orders, _) = &self.list[i];
        let mut w = *c;
        for &(s, m) in orders {
            for j in 0..m as i64 {
                w *= (x[s] - j).max(0) as f64;
            }
        }
        w
    }

    fn len(&self) -> usize {
        self.list.len()
    }
}

const STEP_LIMIT: u64 = 100_000_000;

/// Gillespie direct method from `x0` to `t_end`, returning the state at each
/// time in `marks` (ascending, each <= t_end).
fn simulate(ch: &Channels, x0: &[i64], marks: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<Vec<i64>>, SsaError> {
    let mut x = x0.to_vec();
    let mut t = 0.0;
    let mut out = Vec::with_capacity(marks.len());
    let mut next = 0;
    let mut w = vec![0.0; ch.len()];
    let mut steps = 0u64;
    while next < marks.len() {
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = ch.propensity(i, &x);
        }
        let total: f64 = w.iter().sum();
        let dt = if total > 0.0 {
            -(1.0 - rng.random::<f64>()).ln() / total
        } else {
            f64::INFINITY
        };
        while next < marks.len() && t + dt > marks[next] {
            out.push(x.clone());
            next += 1;
        }
        if next == marks.len() {
            break;
        }
        t += dt;
        steps += 1;
        if steps > STEP_LIMIT {
            return Err(SsaError::StepLimit(STEP_LIMIT));
        }
        let mut u = rng.random::<f64>() * total;
        let mut pick = w.len() - 1;
        for (i, &wi) in w.iter().enumerate() {
            if u < wi {
                pick = i;
                break;
            }
            u -= wi;
        }
        for &(s, d) in &ch.list[pick].2 {
            x[s] += d;
        }
    }
    Ok(out)
}

fn initial_state(net: &Network, cfg: &SimConfig) -> Result<Vec<i64>, SsaError> {
    let n = net.n_species();
    if cfg.x0.is_empty() {
        return Ok(vec![0; n]);
    }
    if cfg.x0.len() != n {
        return Err(SsaError::Invalid(format!("x0 has {} entries, network has {n} species", cfg.x0.len())));
    }
    Ok(cfg.x0.clone())
}

fn cell_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Final state of one path at `cfg.t_end`. `cell` selects the random
/// substream, so paths are reproducible individually.
pub fn ssa_path(net: &Network, k: &ParamSample, cfg: &SimConfig, cell: u64) -> Result<Vec<i64>, SsaError> {
    cfg.validate()?;
    let ch = Channels::new(net, k)?;
    let x0 = initial_state(net, cfg)?;
    let mut rng = cell_rng(cfg.seed, cell);
    Ok(simulate(&ch, &x0, &[cfg.t_end], &mut rng)?.pop().expect("one mark"))
}

/// Mean copy number of one species over a set of cells.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionMean {
    pub mean: f64,
    pub std_error: f64,
    /// Mean at half the horizon, for a stationarity check.
    pub mean_half: f64,
    pub cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanInterval {
    pub lo: f64,
    pub hi: f64,
    /// Standard errors of the conditions attaining `lo` and `hi`.
    pub se_lo: f64,
    pub se_hi: f64,
    pub conditions: Vec<ConditionMean>,
    pub warnings: Vec<String>,
}

/// Run one path per sample in each condition and return the range of the
/// per-condition mean copy numbers of `species`.
pub fn empirical_mean_interval(
    net: &Network,
    species: usize,
    conditions: &[Vec<ParamSample>],
    cfg: &SimConfig,
) -> Result<MeanInterval, SsaError> {
    cfg.validate()?;
    if conditions.is_empty() || conditions.iter().any(|c| c.is_empty()) {
        return Err(SsaError::Invalid("no parameter samples".into()));
    }
    if species >= net.n_species() {
        return Err(SsaError::Invalid(format!("species index {species} out of range")));
    }
    let x0 = initial_state(net, cfg)?;
    let marks = [cfg.t_end / 2.0, cfg.t_end];
    let mut stats = Vec::with_capacity(conditions.len());
    let mut warnings = Vec::new();
    for (ci, samples) in conditions.iter().enumerate() {
        let finals: Vec<(f64, f64)> = samples
            .par_iter()
            .enumerate()
            .map(|(i, k)| {
                let ch = Channels::new(net, k)?;
                let mut rng = cell_rng(cfg.seed, ((ci as u64) << 40) + i as u64);
                let xs = simulate(&ch, &x0, &marks, &mut rng)?;
                Ok((xs[0][species] as f64, xs[1][species] as f64))
            })
            .collect::<Result<_, SsaError>>()?;
        let n = finals.len() as f64;
        let mean = finals.iter().map(|p| p.1).sum::<f64>() / n;
        let mean_half = finals.iter().map(|p| p.0).sum::<f64>() / n;
        let var = if finals.len() > 1 {
            finals.iter().map(|p| (p.1 - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let std_error = (var / n).sqrt();
        if (mean - mean_half).abs() > 2.0 * std_error * std::f64::consts::SQRT_2 && finals.len() > 1 {
            warnings.push(format!(
                "condition {ci}: mean at t_end/2 ({mean_half:.4}) differs from mean at t_end ({mean:.4}) by more than 2 standard errors"
            ));
        }
        stats.push(ConditionMean {
            mean,
            std_error,
            mean_half,
            cells: finals.len(),
        });
    }
    let lo = stats.iter().min_by(|a, b| a.mean.total_cmp(&b.mean)).expect("non-empty");
    let hi = stats.iter().max_by(|a, b| a.mean.total_cmp(&b.mean)).expect("non-empty");
    Ok(MeanInterval {
        lo: lo.mean,
        hi: hi.mean,
        se_lo: lo.std_error,
        se_hi: hi.std_error,
        conditions: stats.clone(),
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainStationary {
    /// Stationary mean of every species.
    pub means: Vec<f64>,
    /// Stationary mass on states with some coordinate at the cap.
    pub tail_mass: f64,
}

/// Stationary distribution of the chain restricted to `{0..=n_max}^n`, with
/// transitions leaving the box dropped, by the Grassmann-Taksar-Heyman
/// elimination (subtraction free, so accurate far into the tail).
pub fn truncated_chain_stationary(net: &Network, k: &ParamSample, n_max: usize) -> Result<ChainStationary, SsaError> {
    let ch = Channels::new(net, k)?;
    let ns = net.n_species();
    let side = n_max + 1;
    let size = side
        .checked_pow(ns as u32)
        .filter(|&s| s <= 20_000)
        .ok_or_else(|| SsaError::Invalid(format!("state box of side {side} in {ns} dimensions is too large")))?;
    let decode = |mut idx: usize| {
        let mut x = vec![0i64; ns];
        for v in x.iter_mut() {
            *v = (idx % side) as i64;
            idx /= side;
        }
        x
    };
    let encode = |x: &[i64]| x.iter().rev().fold(0usize, |acc, &v| acc * side + v as usize);
    let mut p = vec![0.0; size * size];
    for s in 0..size {
        let x = decode(s);
        for i in 0..ch.len() {
            let w = ch.propensity(i, &x);
            if w == 0.0 {
                continue;
            }
            let mut y = x.clone();
            for &(sp, d) in &ch.list[i].2 {
                y[sp] += d;
            }
            if y.iter().all(|&v| v >= 0 && v as usize <= n_max) {
                let t = encode(&y);
                if t != s {
                    p[s * size + t] += w;
                }
            }
        }
    }
    // eliminate states from the top down
    let mut sums = vec![0.0; size];
    for kk in (1..size).rev() {
        let s: f64 = p[kk * size..kk * size + kk].iter().sum();
        if s <= 0.0 {
            return Err(SsaError::Singular(kk));
        }
        sums[kk] = s;
        for i in 0..kk {
            let f = p[i * size + kk] / s;
            if f == 0.0 {
                continue;
            }
            for j in 0..kk {
                p[i * size + j] += f * p[kk * size + j];
            }
        }
    }
    let mut pi = vec![0.0; size];
    pi[0] = 1.0;
    for kk in 1..size {
        pi[kk] = (0..kk).map(|i| pi[i] * p[i * size + kk]).sum::<f64>() / sums[kk];
    }
    let total: f64 = pi.iter().sum();
    let mut means = vec![0.0; ns];
    let mut tail = 0.0;
    for (s, &m) in pi.iter().enumerate() {
        let m = m / total;
        let x = decode(s);
        for (mu, &v) in means.iter_mut().zip(&x) {
            *mu += m * v as f64;
        }
        if x.iter().any(|&v| v as usize == n_max) {
            tail += m;
        }
    }
    Ok(ChainStationary { means, tail_mass: tail })
}

/// Rough stationary mean of each species from a short simulation at the
/// parameter means, used to pick scale constants.
pub fn pilot_means(net: &Network, seed: u64) -> Result<Vec<f64>, SsaError> {
    let values: Vec<f64> = net
        .params
        .iter()
        .map(|p| p.fixed_value().or_else(|| p.known_moments.get(&1).copied()).unwrap_or(1.0))
        .collect();
    let k = ParamSample { values };
    let ch = Channels::new(net, &k)?;
    let x0 = vec![0; net.n_species()];
    const CELLS: u64 = 64;
    let finals: Vec<Vec<i64>> = (0..CELLS)
        .into_par_iter()
        .map(|i| {
            let mut rng = cell_rng(seed, i);
            Ok(simulate(&ch, &x0, &[1440.0], &mut rng)?.pop().expect("one mark"))
        })
        .collect::<Result<_, SsaError>>()?;
    Ok((0..net.n_species())
        .map(|s| finals.iter().map(|x| x[s] as f64).sum::<f64>() / CELLS as f64)
        .collect())
}
