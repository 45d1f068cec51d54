//! Bound computation pipeline and the `momentbound` command-line surface.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::momeq::{assemble_moment_equations, known_xi, substitute_known, MomentError, MomentKey, TruncationOrder};
use crate::netspec::{parse_network, validate_network, Constraint, NetError, Network, Severity};
use crate::sdpbuild::{assemble_conic, export_sdpa, scale_problem, BuildError, ConicProblem, Direction, ScaleRecord};
use crate::solver::{solve, SolveError, SolveStatus, SolverSettings};
use crate::ssa::{
    embed_pairs, empirical_mean_interval, pilot_means, sample_correlated_params, sample_correlation,
    truncated_chain_stationary, CorrSign, ParamSample, SimConfig, SsaError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Usage(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Moment(#[from] MomentError),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Ssa(#[from] SsaError),
    #[error("truncated chain leaks {tail:.3e} of its mass to the cap n_max={n_max}")]
    Tail { tail: f64, n_max: usize },
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Usage(_) | PipelineError::Io { .. } | PipelineError::Net(_) => 1,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Directions {
    Min,
    Max,
    Both,
}

impl Directions {
    fn wants(self, d: Direction) -> bool {
        matches!(
            (self, d),
            (Directions::Both, _) | (Directions::Min, Direction::Min) | (Directions::Max, Direction::Max)
        )
    }
}

/// How scale constants are chosen.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum ScaleChoice {
    /// `C_X = max(1, pilot mean)`, `C_K = E[K]`; entries given by name
    /// override the automatic value.
    #[default]
    Auto,
    AutoWith(Vec<(String, f64)>),
    None,
}

/// Read and parse a network file, printing warnings to stderr and failing
/// on validation errors.
pub fn load_network(path: &Path) -> Result<Network, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let net = parse_network(&text)?;
    check_network(&net)?;
    Ok(net)
}

fn check_network(net: &Network) -> Result<(), PipelineError> {
    let diags = validate_network(net);
    let (errors, warnings): (Vec<_>, Vec<_>) = diags.into_iter().partition(|d| d.severity == Severity::Error);
    for w in &warnings {
        eprintln!("{w}");
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(NetError::Validation(errors).into())
    }
}

/// Parse a copy-number monomial such as `X`, `X^2` or `X*Y`.
pub fn parse_target(net: &Network, text: &str) -> Result<MomentKey, PipelineError> {
    let mut alpha = vec![0u32; net.n_species()];
    for factor in text.split('*').map(str::trim) {
        let (name, power) = match factor.split_once('^') {
            Some((n, p)) => {
                let p: u32 = p
                    .trim()
                    .parse()
                    .map_err(|_| PipelineError::Usage(format!("bad exponent in target factor '{factor}'")))?;
                (n.trim(), p)
            }
            None => (factor, 1),
        };
        let s = net
            .species_index(name)
            .ok_or_else(|| PipelineError::Usage(format!("target '{text}': unknown species '{name}'")))?;
        alpha[s] += power;
    }
    if alpha.iter().all(|&a| a == 0) {
        return Err(PipelineError::Usage(format!("target '{text}' has degree zero")));
    }
    Ok(MomentKey::new(alpha, vec![0; net.n_uncertain()]))
}

/// Replace the bound of every correlation constraint; fails when the
/// network has none.
pub fn set_correlation(net: &Network, r: f64) -> Result<Network, PipelineError> {
    if !(0.0..=1.0).contains(&r) {
        return Err(PipelineError::Usage(format!("r={r} is outside [0, 1]")));
    }
    if !net.constraints.iter().any(|c| matches!(c, Constraint::CorrelationBound { .. })) {
        return Err(PipelineError::Usage("the network has no correlation_bound constraint to set".into()));
    }
    Ok(net.with_correlation(r))
}

/// The correlation bound of the network, if it declares exactly one.
pub fn correlation_of(net: &Network) -> Option<f64> {
    let rs: Vec<f64> = net
        .constraints
        .iter()
        .filter_map(|c| match c {
            Constraint::CorrelationBound { r, .. } => Some(*r),
            _ => None,
        })
        .collect();
    (rs.len() == 1).then(|| rs[0])
}

/// Resolve a scale choice into constants for `net`.
pub fn resolve_scale(net: &Network, choice: &ScaleChoice, seed: u64) -> Result<ScaleRecord, PipelineError> {
    let n = net.n_species();
    let unc = net.uncertain_params();
    let overrides = match choice {
        ScaleChoice::None => return Ok(ScaleRecord::identity(n, unc.len())),
        ScaleChoice::Auto => &[][..],
        ScaleChoice::AutoWith(v) => &v[..],
    };
    let mut cx = vec![None; n];
    let mut ck = vec![None; unc.len()];
    for (name, v) in overrides {
        if !(*v > 0.0 && v.is_finite()) {
            return Err(PipelineError::Usage(format!("scale constant for {name} must be positive")));
        }
        if let Some(s) = net.species_index(name) {
            cx[s] = Some(*v);
        } else if let Some(slot) = net.param_index(name).and_then(|p| unc.iter().position(|&u| u == p)) {
            ck[slot] = Some(*v);
        } else {
            return Err(PipelineError::Usage(format!(
                "scale given for '{name}', which is neither a species nor an uncertain parameter"
            )));
        }
    }
    let pilot = if cx.iter().any(Option::is_none) {
        pilot_means(net, seed)?
    } else {
        vec![1.0; n]
    };
    Ok(ScaleRecord {
        cx: cx.iter().zip(&pilot).map(|(c, m)| c.unwrap_or(m.max(1.0))).collect(),
        ck: ck
            .iter()
            .zip(&unc)
            .map(|(c, &p)| {
                c.unwrap_or_else(|| {
                    net.params[p]
                        .known_moments
                        .get(&1)
                        .copied()
                        .filter(|m| *m > 0.0)
                        .unwrap_or(1.0)
                })
            })
            .collect(),
    })
}

/// One solved direction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectionResult {
    pub direction: Direction,
    pub value: Option<f64>,
    pub status: SolveStatus,
    pub iterations: usize,
    pub seconds: f64,
    pub diagnostics: Option<String>,
}

/// Lower and upper bounds on one moment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundResult {
    pub target: String,
    pub rho: u32,
    pub sigma: u32,
    pub lower: Option<DirectionResult>,
    pub upper: Option<DirectionResult>,
    pub scale: ScaleRecord,
    pub seconds: f64,
}

impl BoundResult {
    pub fn lb(&self) -> Option<f64> {
        self.lower.as_ref().and_then(|d| d.value)
    }

    pub fn ub(&self) -> Option<f64> {
        self.upper.as_ref().and_then(|d| d.value)
    }

    pub fn gap(&self) -> Option<f64> {
        match (&self.lower, &self.upper) {
            (Some(l), Some(u)) if l.status == SolveStatus::Optimal && u.status == SolveStatus::Optimal => {
                Some(u.value? - l.value?)
            }
            _ => None,
        }
    }

    pub fn statuses(&self) -> impl Iterator<Item = SolveStatus> + '_ {
        self.lower.iter().chain(&self.upper).map(|d| d.status)
    }

    pub fn all_optimal(&self) -> bool {
        self.statuses().all(|s| s == SolveStatus::Optimal)
    }

    /// Process exit code: 0 when every direction is optimal, 2 when one is
    /// infeasible, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.all_optimal() {
            0
        } else if self.statuses().any(|s| s == SolveStatus::PrimalInfeasible) {
            2
        } else {
            3
        }
    }
}

/// Everything needed to bound one moment of one network.
#[derive(Debug, Clone)]
pub struct BoundRequest {
    pub target: MomentKey,
    pub truncation: TruncationOrder,
    pub directions: Directions,
    pub scale: ScaleRecord,
    pub settings: SolverSettings,
}

/// Build the relaxation for `req` in the given direction, scaled.
pub fn build_problem(net: &Network, req: &BoundRequest, direction: Direction) -> Result<ConicProblem, PipelineError> {
    let sys = assemble_moment_equations(net, req.truncation)?;
    let sys = substitute_known(&sys, &known_xi(net, &sys))?;
    let p = assemble_conic(&sys, net, req.truncation, None, &req.target, direction)?;
    let identity = ScaleRecord::identity(p.n_species, p.n_params);
    Ok(if req.scale == identity {
        p
    } else {
        scale_problem(&p, &req.scale)?
    })
}

/// Solve the requested directions. When `export` is set, the relaxation of
/// the first requested direction is written there in SDPA sparse format.
pub fn compute_bounds(net: &Network, req: &BoundRequest, export: Option<&Path>) -> Result<BoundResult, PipelineError> {
    let start = Instant::now();
    let first = if req.directions == Directions::Max {
        Direction::Max
    } else {
        Direction::Min
    };
    let base = build_problem(net, req, first)?;
    if let Some(path) = export {
        std::fs::write(path, export_sdpa(&base)).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    }
    let run = |d: Direction| -> Result<Option<DirectionResult>, PipelineError> {
        if !req.directions.wants(d) {
            return Ok(None);
        }
        let t0 = Instant::now();
        let s = solve(&base.with_direction(d), &req.settings)?;
        Ok(Some(DirectionResult {
            direction: d,
            value: s.value,
            status: s.status,
            iterations: s.iterations,
            seconds: t0.elapsed().as_secs_f64(),
            diagnostics: s.diagnostics,
        }))
    };
    let lower = run(Direction::Min)?;
    let upper = run(Direction::Max)?;
    Ok(BoundResult {
        target: req.target.display_with(net),
        rho: req.truncation.rho,
        sigma: req.truncation.sigma,
        lower,
        upper,
        scale: base.scale.clone(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// JSON record printed by `bound`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundRow {
    pub r: Option<f64>,
    pub rho: u32,
    pub sigma: u32,
    pub target: String,
    pub direction: Directions,
    /// The bound itself when a single direction was requested.
    pub value: Option<f64>,
    pub status: SolveStatus,
    pub lb: Option<f64>,
    pub ub: Option<f64>,
    pub lb_status: Option<SolveStatus>,
    pub ub_status: Option<SolveStatus>,
    pub gap: Option<f64>,
    pub wall_time: f64,
    pub iterations: Vec<usize>,
    pub scale: ScaleRecord,
    pub diagnostics: Vec<String>,
}

impl BoundRow {
    pub fn new(r: Option<f64>, directions: Directions, res: &BoundResult) -> Self {
        let worst = res
            .statuses()
            .find(|&s| s == SolveStatus::PrimalInfeasible)
            .or_else(|| res.statuses().find(|&s| s != SolveStatus::Optimal))
            .unwrap_or(SolveStatus::Optimal);
        let value = match directions {
            Directions::Min => res.lb(),
            Directions::Max => res.ub(),
            Directions::Both => None,
        };
        let both: Vec<&DirectionResult> = res.lower.iter().chain(&res.upper).collect();
        BoundRow {
            r,
            rho: res.rho,
            sigma: res.sigma,
            target: res.target.clone(),
            direction: directions,
            value,
            status: worst,
            lb: res.lb(),
            ub: res.ub(),
            lb_status: res.lower.as_ref().map(|d| d.status),
            ub_status: res.upper.as_ref().map(|d| d.status),
            gap: res.gap(),
            wall_time: res.seconds,
            iterations: both.iter().map(|d| d.iterations).collect(),
            scale: res.scale.clone(),
            diagnostics: both.iter().filter_map(|d| d.diagnostics.clone()).collect(),
        }
    }
}

/// Grid of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    /// `None` keeps the network's own constraints.
    pub r_values: Vec<Option<f64>>,
    pub sigma_values: Vec<u32>,
    pub rho: u32,
    pub target: MomentKey,
    pub directions: Directions,
}

/// One CSV line of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub r: Option<f64>,
    pub sigma: u32,
    pub lb: Option<f64>,
    pub ub: Option<f64>,
    pub gap: Option<f64>,
    pub lb_status: Option<SolveStatus>,
    pub ub_status: Option<SolveStatus>,
    pub seconds: f64,
}

pub const SWEEP_HEADER: &str = "r,sigma,lb,ub,gap,lb_status,ub_status,seconds";

/// Solve every `(r, sigma)` cell; rows come back in `(r, sigma)` order.
/// A failing cell is recorded with status `numerical_failure`.
pub fn run_sweep(net: &Network, spec: &SweepSpec, scale: &ScaleRecord, settings: &SolverSettings) -> Result<Vec<SweepRow>, PipelineError> {
    if spec.r_values.is_empty() || spec.sigma_values.is_empty() {
        return Err(PipelineError::Usage("empty sweep grid".into()));
    }
    if spec.rho < 1 {
        return Err(PipelineError::Usage("rho must be at least 1".into()));
    }
    let nets = spec
        .r_values
        .iter()
        .map(|&r| match r {
            Some(r) => set_correlation(net, r),
            None => Ok(net.clone()),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let r_of: Vec<Option<f64>> = nets.iter().map(correlation_of).collect();
    let cells: Vec<(usize, u32)> = (0..nets.len())
        .flat_map(|i| spec.sigma_values.iter().map(move |&s| (i, s)))
        .collect();
    Ok(cells
        .par_iter()
        .map(|&(i, sigma)| {
            let t0 = Instant::now();
            let failed = |d: Directions| spec.directions.wants(if d == Directions::Min { Direction::Min } else { Direction::Max });
            let res = TruncationOrder::new(spec.rho, sigma).map_err(PipelineError::from).and_then(|t| {
                let req = BoundRequest {
                    target: spec.target.clone(),
                    truncation: t,
                    directions: spec.directions,
                    scale: scale.clone(),
                    settings: *settings,
                };
                compute_bounds(&nets[i], &req, None)
            });
            match res {
                Ok(b) => SweepRow {
                    r: r_of[i],
                    sigma,
                    lb: b.lb(),
                    ub: b.ub(),
                    gap: b.gap(),
                    lb_status: b.lower.as_ref().map(|d| d.status),
                    ub_status: b.upper.as_ref().map(|d| d.status),
                    seconds: t0.elapsed().as_secs_f64(),
                },
                Err(e) => {
                    eprintln!("cell {} sigma={sigma}: {e}", i + 1);
                    SweepRow {
                        r: r_of[i],
                        sigma,
                        lb: None,
                        ub: None,
                        gap: None,
                        lb_status: failed(Directions::Min).then_some(SolveStatus::NumericalFailure),
                        ub_status: failed(Directions::Max).then_some(SolveStatus::NumericalFailure),
                        seconds: t0.elapsed().as_secs_f64(),
                    }
                }
            }
        })
        .collect())
}

/// Render sweep rows as CSV; `timing = false` leaves the seconds column
/// empty so that output is byte-identical across runs.
pub fn sweep_csv(rows: &[SweepRow], timing: bool) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let st = |s: Option<SolveStatus>| s.map(|x| x.as_str().to_string()).unwrap_or_default();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SWEEP_HEADER.split(',')).expect("in-memory write");
    for row in rows {
        w.write_record([
            opt(row.r),
            row.sigma.to_string(),
            opt(row.lb),
            opt(row.ub),
            opt(row.gap),
            st(row.lb_status),
            st(row.ub_status),
            if timing { format!("{:.3}", row.seconds) } else { String::new() },
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii csv")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SignChoice {
    Positive,
    Negative,
    Both,
}

#[derive(Debug, Clone)]
pub struct CheckSpec {
    pub target: MomentKey,
    pub truncation: TruncationOrder,
    pub sign: SignChoice,
    pub cells: usize,
    pub seed: u64,
    pub t_end: f64,
    pub n_max: usize,
    pub scale: ScaleRecord,
    pub settings: SolverSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub sign: CorrSign,
    pub sample_correlation: f64,
    pub mean: f64,
    pub std_error: f64,
    pub mean_half: f64,
    pub cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub mean: f64,
    pub tail_mass: f64,
    pub n_max: usize,
}

/// JSON verdict printed by `check`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub mode: &'static str,
    pub target: String,
    pub r: Option<f64>,
    pub rho: u32,
    pub sigma: u32,
    pub lb: Option<f64>,
    pub ub: Option<f64>,
    pub lb_status: SolveStatus,
    pub ub_status: SolveStatus,
    /// Empirical interval, or the oracle mean twice.
    pub interval: [f64; 2],
    pub std_errors: [f64; 2],
    pub epsilon: [f64; 2],
    pub conditions: Vec<ConditionReport>,
    pub oracle: Option<OracleReport>,
    pub verdict: &'static str,
    pub warnings: Vec<String>,
    pub wall_time: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.verdict == "PASS"
    }
}

fn single_species(target: &MomentKey) -> Option<usize> {
    let nz: Vec<usize> = (0..target.alpha.len()).filter(|&i| target.alpha[i] > 0).collect();
    (nz.len() == 1 && target.alpha[nz[0]] == 1).then(|| nz[0])
}

/// Compare SDP bounds with simulation (two uncertain gamma parameters) or
/// with the truncated-chain oracle (all parameters fixed).
pub fn run_check(net: &Network, spec: &CheckSpec) -> Result<CheckReport, PipelineError> {
    let start = Instant::now();
    let species = single_species(&spec.target)
        .ok_or_else(|| PipelineError::Usage("check needs a first-order target such as X".into()))?;
    let req = BoundRequest {
        target: spec.target.clone(),
        truncation: spec.truncation,
        directions: Directions::Both,
        scale: spec.scale.clone(),
        settings: spec.settings,
    };
    let mode = if net.n_uncertain() == 0 { "oracle" } else { "ssa" };
    let mut warnings = Vec::new();
    let mut conditions = Vec::new();
    let mut oracle = None;
    let (interval, std_errors) = if mode == "oracle" {
        let k = ParamSample {
            values: net.params.iter().map(|p| p.fixed_value().expect("fixed")).collect(),
        };
        let chain = truncated_chain_stationary(net, &k, spec.n_max)?;
        if chain.tail_mass > 1e-8 {
            return Err(PipelineError::Tail {
                tail: chain.tail_mass,
                n_max: spec.n_max,
            });
        }
        let m = chain.means[species];
        oracle = Some(OracleReport {
            mean: m,
            tail_mass: chain.tail_mass,
            n_max: spec.n_max,
        });
        ([m, m], [0.0, 0.0])
    } else {
        let unc = net.uncertain_params();
        let gammas: Vec<(f64, f64)> = unc
            .iter()
            .map(|&p| net.params[p].gamma.map(|g| (g.shape, g.scale)))
            .collect::<Option<_>>()
            .filter(|g: &Vec<(f64, f64)>| g.len() == 2)
            .ok_or_else(|| PipelineError::Usage("simulation check needs exactly two uncertain gamma parameters".into()))?;
        let r = correlation_of(net)
            .ok_or_else(|| PipelineError::Usage("simulation check needs one correlation_bound constraint".into()))?;
        let signs: &[CorrSign] = match spec.sign {
            SignChoice::Positive => &[CorrSign::Positive],
            SignChoice::Negative => &[CorrSign::Negative],
            SignChoice::Both => &[CorrSign::Positive, CorrSign::Negative],
        };
        let mut samples = Vec::new();
        let mut corrs = Vec::new();
        for (i, &sign) in signs.iter().enumerate() {
            let pairs = sample_correlated_params(gammas[0], gammas[1], r, sign, spec.cells, spec.seed.wrapping_add(i as u64))?;
            corrs.push(sample_correlation(&pairs));
            samples.push(embed_pairs(net, &pairs)?);
        }
        let cfg = SimConfig {
            t_end: spec.t_end,
            n_cells: spec.cells,
            seed: spec.seed,
            x0: Vec::new(),
        };
        let iv = empirical_mean_interval(net, species, &samples, &cfg)?;
        warnings.extend(iv.warnings.iter().cloned());
        conditions = iv
            .conditions
            .iter()
            .zip(signs.iter().zip(&corrs))
            .map(|(c, (&sign, &rho))| ConditionReport {
                sign,
                sample_correlation: rho,
                mean: c.mean,
                std_error: c.std_error,
                mean_half: c.mean_half,
                cells: c.cells,
            })
            .collect();
        ([iv.lo, iv.hi], [iv.se_lo, iv.se_hi])
    };
    let b = compute_bounds(net, &req, None)?;
    let epsilon = std_errors.map(|se| (3.0 * se).max(1e-6));
    let inside = match (b.all_optimal(), b.lb(), b.ub()) {
        (true, Some(lb), Some(ub)) => interval[0] >= lb - epsilon[0] && interval[1] <= ub + epsilon[1],
        _ => false,
    };
    if !b.all_optimal() {
        warnings.push("SDP bounds were not solved to optimality".into());
    }
    Ok(CheckReport {
        mode,
        target: b.target.clone(),
        r: correlation_of(net),
        rho: b.rho,
        sigma: b.sigma,
        lb: b.lb(),
        ub: b.ub(),
        lb_status: b.lower.as_ref().expect("both").status,
        ub_status: b.upper.as_ref().expect("both").status,
        interval,
        std_errors,
        epsilon,
        conditions,
        oracle,
        verdict: if inside { "PASS" } else { "FAIL" },
        warnings,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Parser)]
#[command(name = "momentbound", version, about = "Guaranteed bounds on stationary moments of reaction networks with uncertain rates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Bound one moment; prints a JSON record.
    Bound(BoundArgs),
    /// Bound one moment over a grid of (r, sigma); prints CSV.
    Sweep(SweepArgs),
    /// Check the bounds against simulation or the truncated-chain oracle; prints JSON.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
pub struct ScaleArgs {
    /// Scale constant NAME=VALUE for a species or uncertain parameter
    /// (repeatable); unspecified constants are chosen automatically.
    #[arg(long = "scale", value_name = "NAME=VALUE", value_parser = parse_scale_pair)]
    pub scale: Vec<(String, f64)>,
    /// Solve the unscaled relaxation.
    #[arg(long, conflicts_with = "scale")]
    pub no_scale: bool,
    /// Seed of the pilot simulation used for automatic species scales.
    #[arg(long, default_value_t = 0)]
    pub pilot_seed: u64,
}

impl ScaleArgs {
    fn choice(&self) -> ScaleChoice {
        if self.no_scale {
            ScaleChoice::None
        } else if self.scale.is_empty() {
            ScaleChoice::Auto
        } else {
            ScaleChoice::AutoWith(self.scale.clone())
        }
    }
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    #[arg(long, default_value_t = 1e-8)]
    pub tol_gap: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub tol_feas: f64,
    #[arg(long, default_value_t = 200)]
    pub max_iters: usize,
}

impl SolverArgs {
    fn settings(&self) -> Result<SolverSettings, PipelineError> {
        let s = SolverSettings {
            tol_gap: self.tol_gap,
            tol_feas: self.tol_feas,
            max_iters: self.max_iters,
            ..SolverSettings::default()
        };
        s.validate().map_err(|_| PipelineError::Usage("solver tolerances must be positive and max-iters at least 1".into()))?;
        Ok(s)
    }
}

#[derive(Debug, Args)]
pub struct BoundArgs {
    pub network: PathBuf,
    /// Copy-number monomial to bound, e.g. X, X^2 or X*Y.
    #[arg(long)]
    pub target: String,
    #[arg(long, default_value_t = 5)]
    pub rho: u32,
    #[arg(long, default_value_t = 2)]
    pub sigma: u32,
    #[arg(long, value_enum, default_value_t = Directions::Both)]
    pub direction: Directions,
    /// Override the correlation bound declared in the network.
    #[arg(long)]
    pub r: Option<f64>,
    /// Write the relaxation (minimization when both directions are asked)
    /// in SDPA sparse format.
    #[arg(long, value_name = "FILE")]
    pub export_sdpa: Option<PathBuf>,
    #[command(flatten)]
    pub scale: ScaleArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    pub network: PathBuf,
    #[arg(long)]
    pub target: String,
    #[arg(long, default_value_t = 5)]
    pub rho: u32,
    /// Correlation bounds, comma separated; defaults to the network's own.
    #[arg(long, value_delimiter = ',')]
    pub r: Vec<f64>,
    /// Parameter truncation orders: `A..B` (inclusive) or a comma list.
    #[arg(long, value_parser = parse_sigma_list)]
    pub sigma: SigmaList,
    #[arg(long, value_enum, default_value_t = Directions::Both)]
    pub direction: Directions,
    /// Worker threads; 0 uses every core.
    #[arg(long, env = "MOMENTBOUND_JOBS", default_value_t = 0)]
    pub jobs: usize,
    /// Leave the seconds column empty.
    #[arg(long)]
    pub no_timing: bool,
    #[command(flatten)]
    pub scale: ScaleArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    pub network: PathBuf,
    #[arg(long, default_value = "")]
    pub target: String,
    #[arg(long, default_value_t = 5)]
    pub rho: u32,
    #[arg(long, default_value_t = 4)]
    pub sigma: u32,
    /// Override the correlation bound declared in the network.
    #[arg(long)]
    pub r: Option<f64>,
    /// Which rank pairing of the parameters to simulate.
    #[arg(long, value_enum, default_value_t = SignChoice::Both)]
    pub sign: SignChoice,
    /// Simulated cells (and parameter pairs) per pairing.
    #[arg(long, default_value_t = 100_000)]
    pub cells: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Simulation horizon.
    #[arg(long, default_value_t = 1440.0)]
    pub t_end: f64,
    /// Per-species cap of the truncated chain in oracle mode.
    #[arg(long, default_value_t = 400)]
    pub n_max: usize,
    #[arg(long, env = "MOMENTBOUND_JOBS", default_value_t = 0)]
    pub jobs: usize,
    #[command(flatten)]
    pub scale: ScaleArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaList(pub Vec<u32>);

fn parse_sigma_list(s: &str) -> Result<SigmaList, String> {
    let v: Vec<u32> = if let Some((a, b)) = s.split_once("..") {
        let a: u32 = a.trim().parse().map_err(|_| format!("bad range start in '{s}'"))?;
        let b: u32 = b.trim().parse().map_err(|_| format!("bad range end in '{s}'"))?;
        (a..=b).collect()
    } else {
        s.split(',')
            .map(|x| x.trim().parse().map_err(|_| format!("bad sigma '{x}'")))
            .collect::<Result<_, _>>()?
    };
    if v.is_empty() {
        return Err(format!("empty sigma list '{s}'"));
    }
    Ok(SigmaList(v))
}

fn parse_scale_pair(s: &str) -> Result<(String, f64), String> {
    let (name, v) = s.split_once('=').ok_or_else(|| format!("expected NAME=VALUE, got '{s}'"))?;
    let v: f64 = v.trim().parse().map_err(|_| format!("bad scale value in '{s}'"))?;
    Ok((name.trim().to_string(), v))
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| PipelineError::Usage(format!("cannot start {jobs} worker threads: {e}")))?;
    Ok(pool.install(f))
}

/// Write one output document; a closed pipe on the reading side is not an
/// error.
fn emit(out: &mut dyn Write, text: &str) -> Result<(), PipelineError> {
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(PipelineError::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn cmd_bound(a: &BoundArgs, out: &mut dyn Write) -> Result<i32, PipelineError> {
    let mut net = load_network(&a.network)?;
    if let Some(r) = a.r {
        net = set_correlation(&net, r)?;
    }
    let req = BoundRequest {
        target: parse_target(&net, &a.target)?,
        truncation: TruncationOrder::new(a.rho, a.sigma)?,
        directions: a.direction,
        scale: resolve_scale(&net, &a.scale.choice(), a.scale.pilot_seed)?,
        settings: a.solver.settings()?,
    };
    let res = compute_bounds(&net, &req, a.export_sdpa.as_deref())?;
    let row = BoundRow::new(correlation_of(&net), a.direction, &res);
    emit(out, &json(&row))?;
    Ok(res.exit_code())
}

fn cmd_sweep(a: &SweepArgs, out: &mut dyn Write) -> Result<i32, PipelineError> {
    let net = load_network(&a.network)?;
    if let Some(r) = a.r.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(PipelineError::Usage(format!("r={r} is outside [0, 1]")));
    }
    let spec = SweepSpec {
        r_values: if a.r.is_empty() {
            vec![None]
        } else {
            a.r.iter().copied().map(Some).collect()
        },
        sigma_values: a.sigma.0.clone(),
        rho: a.rho,
        target: parse_target(&net, &a.target)?,
        directions: a.direction,
    };
    let settings = a.solver.settings()?;
    let choice = a.scale.choice();
    let rows = with_pool(a.jobs, || {
        let scale = resolve_scale(&net, &choice, a.scale.pilot_seed)?;
        run_sweep(&net, &spec, &scale, &settings)
    })??;
    emit(out, sweep_csv(&rows, !a.no_timing).trim_end())?;
    Ok(0)
}

fn cmd_check(a: &CheckArgs, out: &mut dyn Write) -> Result<i32, PipelineError> {
    let mut net = load_network(&a.network)?;
    if let Some(r) = a.r {
        net = set_correlation(&net, r)?;
    }
    let target = if a.target.is_empty() {
        net.species[0].name.clone()
    } else {
        a.target.clone()
    };
    let settings = a.solver.settings()?;
    let choice = a.scale.choice();
    let report = with_pool(a.jobs, || {
        let spec = CheckSpec {
            target: parse_target(&net, &target)?,
            truncation: TruncationOrder::new(a.rho, a.sigma)?,
            sign: a.sign,
            cells: a.cells,
            seed: a.seed,
            t_end: a.t_end,
            n_max: a.n_max,
            scale: resolve_scale(&net, &choice, a.scale.pilot_seed)?,
            settings,
        };
        run_check(&net, &spec)
    })??;
    emit(out, &json(&report))?;
    Ok(if report.lb_status == SolveStatus::PrimalInfeasible || report.ub_status == SolveStatus::PrimalInfeasible {
        2
    } else if report.lb_status != SolveStatus::Optimal || report.ub_status != SolveStatus::Optimal {
        3
    } else {
        0
    })
}

/// Run the command line; returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let res = match &cli.command {
        Command::Bound(a) => cmd_bound(a, out),
        Command::Sweep(a) => cmd_sweep(a, out),
        Command::Check(a) => cmd_check(a, out),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
