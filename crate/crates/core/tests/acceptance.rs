//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use num_bigint::BigInt;
use num_rational::BigRational;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use momentbound::cli::{
    compute_bounds, load_network, resolve_scale, run_check, run_sweep, BoundRequest, CheckSpec, Directions,
    ScaleChoice, SignChoice, SweepRow, SweepSpec,
};
use momentbound::momeq::{assemble_moment_equations, gamma_moment, MomentKey, TruncationOrder};
use momentbound::netspec::{parse_network, Network};
use momentbound::polyalg::ExpPoly;
use momentbound::sdpbuild::{
    monomial_basis, AffineExpr, ConicProblem, Direction, EqualityRow, PsdBlock, ScaleRecord,
};
use momentbound::solver::{solve, SolveStatus, SolverSettings};
use momentbound::ssa::{truncated_chain_stationary, ParamSample};

const TOL_GAP: f64 = 1e-8;

fn report(n: usize, ok: bool, detail: &str) -> bool {
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion {n}: {} ({detail})", if ok { "PASS" } else { "FAIL" }).unwrap();
    ok
}

fn network(name: &str) -> Network {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../networks").join(name);
    load_network(&path).unwrap()
}

fn q(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

fn x_with(r: usize) -> MomentKey {
    MomentKey::new(vec![1], vec![0; r])
}

fn x() -> MomentKey {
    x_with(2)
}

fn settings() -> SolverSettings {
    SolverSettings::default()
}

/// `|a - b| <= 10 tol (1 + |b|)`
fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 10.0 * TOL_GAP * (1.0 + b.abs())
}

fn criterion_1() -> bool {
    let net = parse_network(&momentbound::netspec::dimerization_document(Some(0.0), false)).unwrap();
    let t0 = Instant::now();
    let sys = assemble_moment_equations(&net, TruncationOrder::new(1, 1).unwrap()).unwrap();
    let secs = t0.elapsed().as_secs_f64();

    // 2 K3 = 1/25 and D = 5; columns of the species-only, parameter-only
    // and mixed blocks are tagged 'a', 'c' and 'b'.
    let k = |a: u32, b: [u32; 2]| MomentKey::new(vec![a], b.to_vec());
    let rows: Vec<(MomentKey, Vec<(char, MomentKey, BigRational)>)> = vec![
        (
            k(1, [0, 0]),
            vec![
                ('a', k(1, [0, 0]), q(1, 25)),
                ('a', k(2, [0, 0]), q(-1, 25)),
                ('c', k(0, [1, 0]), q(5, 1)),
                ('b', k(1, [0, 1]), q(-1, 1)),
            ],
        ),
        (
            k(1, [1, 0]),
            vec![
                ('c', k(0, [2, 0]), q(5, 1)),
                ('b', k(1, [1, 0]), q(1, 25)),
                ('b', k(2, [1, 0]), q(-1, 25)),
                ('b', k(1, [1, 1]), q(-1, 1)),
            ],
        ),
        (
            k(1, [0, 1]),
            vec![
                ('c', k(0, [1, 1]), q(5, 1)),
                ('b', k(1, [0, 1]), q(1, 25)),
                ('b', k(2, [0, 1]), q(-1, 25)),
                ('b', k(1, [0, 2]), q(-1, 1)),
            ],
        ),
    ];

    let mut got = BTreeMap::new();
    for (i, zeta) in sys.rows.iter().enumerate() {
        let mut terms = BTreeMap::new();
        for (tag, m, keys) in [('a', &sys.a, &sys.mu_keys), ('b', &sys.b, &sys.nu_keys), ('c', &sys.c, &sys.xi_keys)] {
            for (j, key) in keys.iter().enumerate() {
                let v = m.get(i, j);
                if *v != q(0, 1) {
                    terms.insert((tag, key.clone()), v.clone());
                }
            }
        }
        got.insert(MomentKey::from_exp(zeta, 1), terms);
    }
    let want: BTreeMap<MomentKey, BTreeMap<(char, MomentKey), BigRational>> = rows
        .into_iter()
        .map(|(z, ts)| (z, ts.into_iter().map(|(t, k, v)| ((t, k), v)).collect()))
        .collect();
    let cols_ok = sys.mu_keys.len() == 2 && sys.nu_keys.len() == 6 && sys.xi_keys.len() == 3;
    let ok = got == want && cols_ok && sys.offset.iter().all(|&o| o == 0.0) && secs < 1.0;
    report(1, ok, &format!("3x2, 3x3, 3x6 exact rational blocks, {secs:.3} s"))
}

fn criterion_2() -> bool {
    let mut ok = true;
    let cases = [(2.0, 0.4, 1, 0.8), (2.0, 0.4, 2, 0.96), (4.0, 0.1, 1, 0.4), (4.0, 0.1, 2, 0.2)];
    for (shape, scale, beta, v) in cases {
        ok &= (gamma_moment(shape, scale, beta).unwrap() - v).abs() <= 1e-12;
    }
    // exact rational recursion E[K^b] = theta (eta + b - 1) E[K^(b-1)]
    let mut worst: f64 = 0.0;
    for (eta, theta, shape, scale) in [(2i64, q(2, 5), 2.0, 0.4), (4, q(1, 10), 4.0, 0.1)] {
        let mut m = q(1, 1);
        for b in 1..=10u32 {
            m = &m * &theta * q(eta + i64::from(b) - 1, 1);
            let exact = num_traits::ToPrimitive::to_f64(&m).unwrap();
            let err = (gamma_moment(shape, scale, b).unwrap() - exact).abs() / exact.max(1.0);
            worst = worst.max(err);
        }
    }
    ok &= worst <= 1e-12;
    report(2, ok, &format!("worst recursion error {worst:.1e}"))
}

fn birth_death(d: u32, k1: f64, k2: f64) -> Network {
    parse_network(&format!(
        r#"{{"species": ["X"], "parameters": [
            {{"name": "K1", "kind": "fixed", "value": {k1}}},
            {{"name": "K2", "kind": "fixed", "value": {k2}}}],
          "reactions": [{{"rate": "K1", "const": {d}, "orders": {{}}, "stoich": {{"X": 1}}}},
                        {{"rate": "K2", "orders": {{"X": 1}}, "stoich": {{"X": -1}}}}]}}"#
    ))
    .unwrap()
}

fn criterion_3() -> bool {
    let t0 = Instant::now();
    let (d, k1, k2) = (5, 0.8, 0.4);
    let net = birth_death(d, k1, k2);
    let exact = f64::from(d) * k1 / k2;
    let mut ok = true;
    let mut worst_gap: f64 = 0.0;
    for rho in 2..=4 {
        let req = BoundRequest {
            target: x_with(0),
            truncation: TruncationOrder::new(rho, 0).unwrap(),
            directions: Directions::Both,
            scale: ScaleRecord::identity(1, 0),
            settings: settings(),
        };
        let b = compute_bounds(&net, &req, None).unwrap();
        let (lb, ub) = (b.lb().unwrap_or(f64::NAN), b.ub().unwrap_or(f64::NAN));
        worst_gap = worst_gap.max(ub - lb);
        ok &= b.all_optimal() && ub - lb < 1e-6 && lb <= exact + 1e-6 && ub >= exact - 1e-6;
    }
    let k = ParamSample { values: vec![k1, k2] };
    let chain = truncated_chain_stationary(&net, &k, 400).unwrap();
    let chain_err = (chain.means[0] - exact).abs();
    ok &= chain.tail_mass < 1e-10 && chain_err < 1e-6;
    let secs = t0.elapsed().as_secs_f64();
    ok &= secs < 5.0;
    report(
        3,
        ok,
        &format!("gap {worst_gap:.1e}, chain error {chain_err:.1e}, tail {:.1e}, {secs:.2} s", chain.tail_mass),
    )
}

fn column(net: &Network, r_values: Vec<Option<f64>>) -> Vec<SweepRow> {
    let spec = SweepSpec {
        r_values,
        sigma_values: (1..=9).collect(),
        rho: 5,
        target: x(),
        directions: Directions::Both,
    };
    let scale = resolve_scale(net, &ScaleChoice::Auto, 0).unwrap();
    run_sweep(net, &spec, &scale, &settings()).unwrap()
}

fn all_optimal(rows: &[SweepRow]) -> bool {
    rows.iter()
        .all(|r| r.lb_status == Some(SolveStatus::Optimal) && r.ub_status == Some(SolveStatus::Optimal))
}

fn criterion_4() -> bool {
    let t0 = Instant::now();
    let rows = column(&network("dimer_independent.json"), vec![None]);
    let last = rows.iter().find(|r| r.sigma == 9).unwrap();
    let (lb, ub) = (last.lb.unwrap_or(f64::NAN), last.ub.unwrap_or(f64::NAN));
    let rel = (ub - lb) / ub;
    let secs = t0.elapsed().as_secs_f64();
    let ok = all_optimal(&rows) && rel < 1e-2 && secs < 300.0;
    report(4, ok, &format!("sigma=9 bounds [{lb:.5}, {ub:.5}], relative gap {rel:.2e}, {secs:.1} s"))
}

fn grid(name: &str) -> BTreeMap<(u32, u32), f64> {
    let r_values = (0..=5).map(|i| Some(f64::from(i) * 0.2)).collect();
    let rows = column(&network(name), r_values);
    assert!(all_optimal(&rows), "non-optimal cell in {name}");
    rows.iter()
        .map(|row| (((row.r.unwrap() * 5.0).round() as u32, row.sigma), row.gap.unwrap()))
        .collect()
}

fn criterion_5(g: &BTreeMap<(u32, u32), f64>) -> bool {
    let mut worst = f64::NEG_INFINITY;
    let mut ok = true;
    for i in 0..=5 {
        for s in 1..9 {
            let (a, b) = (g[&(i, s)], g[&(i, s + 1)]);
            worst = worst.max(b - a);
            ok &= b <= a + 10.0 * TOL_GAP * (1.0 + a.abs());
        }
    }
    for s in 1..=9 {
        for i in 0..5 {
            let (a, b) = (g[&(i, s)], g[&(i + 1, s)]);
            worst = worst.max(a - b);
            ok &= a <= b + 10.0 * TOL_GAP * (1.0 + b.abs());
        }
    }
    report(5, ok, &format!("worst adjacent change against the expected order {worst:.1e}"))
}

fn criterion_6(g: &BTreeMap<(u32, u32), f64>, free: &BTreeMap<(u32, u32), f64>) -> bool {
    let mut worst = f64::NEG_INFINITY;
    let mut ok = true;
    for (k, &a) in g {
        let b = free[k];
        worst = worst.max(a - b);
        ok &= b >= a - 10.0 * TOL_GAP * (1.0 + a.abs());
    }
    report(6, ok, &format!("largest excess of the gamma gap over the free gap {worst:.1e}"))
}

fn check_spec(net: &Network, sigma: u32, cells: usize, seed: u64) -> CheckSpec {
    CheckSpec {
        target: x_with(net.n_uncertain()),
        truncation: TruncationOrder::new(5, sigma).unwrap(),
        sign: SignChoice::Both,
        cells,
        seed,
        t_end: 1440.0,
        n_max: 400,
        scale: resolve_scale(net, &ScaleChoice::Auto, seed).unwrap(),
        settings: settings(),
    }
}

fn criterion_7() -> bool {
    let base = network("dimer.json");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g1 = Gamma::new(2.0, 0.4).unwrap();
    let g2 = Gamma::new(4.0, 0.1).unwrap();
    let mut oracle_pass = 0;
    for _ in 0..20 {
        let net = base.with_fixed_params(&[g1.sample(&mut rng), g2.sample(&mut rng)]);
        let spec = check_spec(&net, 0, 1, 0);
        match run_check(&net, &spec) {
            Ok(c) if c.passed() => oracle_pass += 1,
            Ok(c) => eprintln!("oracle check failed: {c:?}"),
            Err(e) => eprintln!("oracle check error: {e}"),
        }
    }
    let mut ssa_ok = true;
    let mut ssa = Vec::new();
    for r in [0.2, 0.6, 1.0] {
        let net = base.with_correlation(r);
        let spec = check_spec(&net, 4, 10_000, 11);
        let c = run_check(&net, &spec).unwrap();
        ssa_ok &= c.passed();
        ssa.push(format!(
            "r={r}: [{:.3}, {:.3}] in [{:.3}, {:.3}] {}",
            c.interval[0],
            c.interval[1],
            c.lb.unwrap_or(f64::NAN),
            c.ub.unwrap_or(f64::NAN),
            c.verdict
        ));
    }
    let ok = oracle_pass == 20 && ssa_ok;
    report(7, ok, &format!("oracle draws passed {oracle_pass}/20; {}", ssa.join("; ")))
}

fn criterion_8() -> bool {
    let net = network("dimer_independent.json");
    let bounds = |scale: ScaleRecord| {
        let req = BoundRequest {
            target: x(),
            truncation: TruncationOrder::new(2, 2).unwrap(),
            directions: Directions::Both,
            scale,
            settings: settings(),
        };
        compute_bounds(&net, &req, None).unwrap()
    };
    let chosen = ScaleChoice::AutoWith(vec![("X".into(), 5.0), ("K1".into(), 3.0), ("K2".into(), 0.7)]);
    let a = bounds(resolve_scale(&net, &chosen, 0).unwrap());
    let one = bounds(ScaleRecord::identity(1, 2));
    let ok = a.all_optimal()
        && one.all_optimal()
        && close(a.lb().unwrap(), one.lb().unwrap())
        && close(a.ub().unwrap(), one.ub().unwrap());
    report(
        8,
        ok,
        &format!(
            "lb {:.9} vs {:.9}, ub {:.9} vs {:.9}",
            a.lb().unwrap_or(f64::NAN),
            one.lb().unwrap_or(f64::NAN),
            a.ub().unwrap_or(f64::NAN),
            one.ub().unwrap_or(f64::NAN)
        ),
    )
}

fn problem(obj: f64, ineqs: Vec<AffineExpr>, blocks: Vec<PsdBlock>) -> ConicProblem {
    ConicProblem {
        n_species: 1,
        n_params: 0,
        variables: vec![x_with(0)],
        objective_key: x_with(0),
        objective: vec![(0, obj)],
        direction: Direction::Min,
        equalities: Vec::<EqualityRow>::new(),
        inequalities: ineqs,
        psd_blocks: blocks,
        normalization: false,
        scale: ScaleRecord::identity(1, 0),
    }
}

fn aff(terms: &[(usize, f64)], constant: f64) -> AffineExpr {
    AffineExpr {
        terms: terms.to_vec(),
        constant,
    }
}

fn block(entries: Vec<AffineExpr>) -> PsdBlock {
    let dim = if entries.len() == 1 { 1 } else { 2 };
    PsdBlock {
        multiplier: ExpPoly::one(1),
        basis: monomial_basis(1, 0, dim as u32 - 1, 0),
        dim,
        entries,
    }
}

fn criterion_9() -> bool {
    let set = settings();
    let mut ok = true;
    // |t| <= 1 through [[1, t], [t, 1]] >= 0
    let disc = problem(1.0, vec![], vec![block(vec![aff(&[], 1.0), aff(&[(0, 1.0)], 0.0), aff(&[], 1.0)])]);
    for (dir, want) in [(Direction::Min, -1.0), (Direction::Max, 1.0)] {
        let s = solve(&disc.with_direction(dir), &set).unwrap();
        ok &= s.status == SolveStatus::Optimal && (s.value.unwrap_or(f64::NAN) - want).abs() <= 1e-8;
    }
    // min x with x >= 0 as a 1x1 block and as a linear inequality
    for p in [
        problem(1.0, vec![], vec![block(vec![aff(&[(0, 1.0)], 0.0)])]),
        problem(1.0, vec![aff(&[(0, 1.0)], 0.0)], vec![]),
    ] {
        let s = solve(&p, &set).unwrap();
        ok &= s.status == SolveStatus::Optimal && s.value.unwrap_or(f64::NAN).abs() <= 1e-8;
    }
    // x >= 1 and x <= 0
    let bad = problem(1.0, vec![aff(&[(0, 1.0)], -1.0), aff(&[(0, -1.0)], 0.0)], vec![]);
    let s = solve(&bad, &set).unwrap();
    ok &= s.status == SolveStatus::PrimalInfeasible;
    report(9, ok, "unit disc, nonnegativity, infeasible pair")
}

#[test]
fn acceptance() {
    let mut results = vec![criterion_1(), criterion_2(), criterion_3(), criterion_4()];
    let t0 = Instant::now();
    let gamma = grid("dimer.json");
    let free = grid("dimer_two_moments.json");
    println!("grids solved in {:.1} s", t0.elapsed().as_secs_f64());
    results.push(criterion_5(&gamma));
    results.push(criterion_6(&gamma, &free));
    results.push(criterion_7());
    results.push(criterion_8());
    results.push(criterion_9());
    let failed: Vec<usize> = (1..=9).filter(|i| !results[i - 1]).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
