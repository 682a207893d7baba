use optclear::clearing::{
    aggregate_report, clear, reevaluate, search_dimension, smoothed_objective, traders_from_run,
    ClearingConfig, Trader,
};
use optclear::config::{ClearMode, RunConfig};
use optclear::copperplate::{central_aggregate_delta, CopperplateInstance};
use optclear::instances::random_instance;
use optclear::market::run_market;
use optclear::options::TradeTriple;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

const COPPERPLATE: &str = r#"{
    "copperplate": {"mu": 10, "sigma": 1, "rho": 0.08660254037844387, "epsilon": 0.5, "d": 20},
    "scenarios": {"kind": "grid", "wind": [{"mu": 10, "sigma": 1}], "n": 400},
    "clearing": {"mode": "social"}
}"#;

fn copperplate_traders() -> Vec<Trader> {
    let cfg: RunConfig = serde_json::from_str(COPPERPLATE).unwrap();
    let run = cfg.load().unwrap();
    let outcome = run_market(&run.market).unwrap();
    traders_from_run(&run, &outcome).unwrap()
}

fn with_mode(mode: ClearMode) -> ClearingConfig {
    ClearingConfig {
        mode,
        ..ClearingConfig::default()
    }
}

#[test]
fn copperplate_social_optimum() {
    let traders = copperplate_traders();
    let r = clear(&traders, &ClearingConfig::default()).unwrap();
    let inst = CopperplateInstance::default();
    let target = central_aggregate_delta(&inst);
    assert!((target + 45.76).abs() < 0.01);
    assert!((r.aggregate_delta() - target).abs() <= 0.01 * target.abs());
    for t in r.trades() {
        assert!((2.0 * t.q + t.k - 1.0 / inst.rho).abs() <= 1e-4);
    }
    assert!(r.evaluation.max_abs_ms() <= r.diagnostics.tolerances.ms_tol);

    // The seller's exercise is the full volume exactly when the price spikes.
    let seller = traders
        .iter()
        .position(|t| t.role == optclear::options::Role::Seller)
        .unwrap();
    let delta = r.trades()[seller].delta;
    for (k, p) in traders[seller].price().values().iter().enumerate() {
        let expect = if *p >= r.trades()[seller].k {
            delta
        } else {
            0.0
        };
        assert!((r.evaluation.allocation[seller][k] - expect).abs() < 1e-9);
    }

    let report = aggregate_report(&traders, &r).unwrap();
    let wind = report
        .iter()
        .find(|row| row.role == optclear::options::Role::Buyer)
        .unwrap();
    assert!(wind.covariance < 0.0 && wind.reduces);
}

#[test]
fn copperplate_so_matches_social() {
    let traders = copperplate_traders();
    let social = clear(&traders, &ClearingConfig::default()).unwrap();
    let so = clear(&traders, &with_mode(ClearMode::So)).unwrap();
    let (a, b) = (social.aggregate_delta(), so.aggregate_delta());
    assert!((a - b).abs() <= 0.01 * a.abs());
    let t = so.trades();
    assert!((t[0].q - t[1].q).abs() < 1e-9 && (t[0].k - t[1].k).abs() < 1e-9);
}

#[test]
fn smoothed_objective_is_close_to_exact() {
    let traders = copperplate_traders();
    let r = clear(&traders, &ClearingConfig::default()).unwrap();
    let mut x = Vec::new();
    for (tr, t) in traders.iter().zip(r.trades()) {
        let b = tr.acceptability.bounds;
        x.extend([t.q / b.q_max, t.k / b.k_max, t.delta / b.delta_max]);
    }
    let (smooth, _) = smoothed_objective(&traders, None, &x);
    let smooth = smooth * r.evaluation.variance_before.iter().sum::<f64>();
    assert!(
        (smooth - r.objective).abs() <= 0.01 * r.objective.abs(),
        "{smooth} vs {}",
        r.objective
    );
}

#[test]
fn zero_iteration_cap_returns_zero_trade() {
    for seed in 0..3 {
        let traders = random_instance(seed, 20).unwrap().traders().unwrap();
        let cfg = ClearingConfig {
            max_iterations: 0,
            ..ClearingConfig::default()
        };
        let r = clear(&traders, &cfg).unwrap();
        assert!(r.trades().iter().all(|t| t.delta == 0.0));
        assert_eq!(r.aggregate_delta(), 0.0);
        assert!(r.diagnostics.fallback);
        assert!(aggregate_report(&traders, &r)
            .unwrap()
            .iter()
            .all(|row| row.delta == 0.0));
    }
}

#[test]
fn zero_volume_sets_force_zero_trade() {
    let mut traders = copperplate_traders();
    for t in &mut traders {
        t.acceptability.bounds.delta_max = 0.0;
    }
    for mode in [ClearMode::Social, ClearMode::So, ClearMode::Selfish] {
        let r = clear(&traders, &with_mode(mode)).unwrap();
        assert_eq!(r.aggregate_delta(), 0.0);
        assert_eq!(r.evaluation.expected_ms, 0.0);
    }
}

#[test]
fn random_instances_keep_invariants() {
    for seed in 0..4 {
        let traders = random_instance(seed, 30).unwrap().traders().unwrap();
        let r = clear(&traders, &ClearingConfig::default()).unwrap();
        let tol = r.diagnostics.tolerances;
        assert!(r.aggregate_delta() <= 1e-8, "seed {seed}");
        assert!(r.evaluation.max_abs_ms() <= tol.ms_tol, "seed {seed}");
        assert!(r.evaluation.balance_residual.abs() <= 1e-6);
        // Exercise balance per scenario.
        for k in 0..r.evaluation.ms.len() {
            let (mut sold, mut called) = (0.0, 0.0);
            for (i, tr) in traders.iter().enumerate() {
                let t = r.trades()[i];
                match tr.role {
                    optclear::options::Role::Seller => sold += r.evaluation.allocation[i][k],
                    optclear::options::Role::Buyer => {
                        if tr.price().values()[k] >= t.k {
                            called += t.delta;
                        }
                    }
                }
            }
            assert!((sold - called).abs() <= 1e-6, "seed {seed} scenario {k}");
        }
        for row in aggregate_report(&traders, &r).unwrap() {
            assert!((row.covariance - row.delta).abs() <= 1e-8 * (1.0 + row.var_before));
        }
        let selfish = clear(&traders, &with_mode(ClearMode::Selfish)).unwrap();
        assert!(selfish.evaluation.expected_ms.abs() <= 1e-4 * tol.cash_scale());
    }
}

#[test]
fn reevaluate_is_identity_on_same_traders() {
    let traders = random_instance(1, 20).unwrap().traders().unwrap();
    let cfg = ClearingConfig::default();
    let r = clear(&traders, &cfg).unwrap();
    let again = reevaluate(&traders, &r, &cfg).unwrap();
    assert_eq!(again.evaluation, r.evaluation);
}

#[test]
fn gradient_matches_central_differences() {
    let traders = random_instance(2, 25).unwrap().traders().unwrap();
    let d = search_dimension(&traders);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = 1e-5;
    for _ in 0..20 {
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..0.95)).collect();
        let (_, g) = smoothed_objective(&traders, None, &x);
        let scale = g.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        for j in 0..d {
            let mut a = x.clone();
            let mut b = x.clone();
            a[j] += h;
            b[j] -= h;
            let fd = (smoothed_objective(&traders, None, &a).0
                - smoothed_objective(&traders, None, &b).0)
                / (2.0 * h);
            assert!(
                (fd - g[j]).abs() <= 1e-5 * scale,
                "coordinate {j}: {fd} vs {}",
                g[j]
            );
        }
    }
}

#[test]
fn trade_count_mismatch_is_an_error() {
    let traders = copperplate_traders();
    let e = optclear::clearing::evaluate_trades(
        &traders,
        &[TradeTriple::zero()],
        ClearingConfig::default().allocation_mode(),
        1e-9,
    );
    assert!(e.is_err());
}
