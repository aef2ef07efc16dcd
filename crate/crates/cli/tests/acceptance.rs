//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use guardrl_cli::{cmd_train, TrainOverrides};
use guardrl_core::envs::{
    build_cliff_grid, build_random_safe_mdp, env_step, GridParams, GridWorldSpec, NUM_GRID_ACTIONS,
};
use guardrl_core::guardian::{renormalize_policy_safe, PolicyDistribution, STARVATION_EPS};
use guardrl_core::learner::{
    actor_gradient, actor_loss, BackupMode, Learner, LearnerConfig, PolicyTable, QEnsemble, TargetPolicy,
};
use guardrl_core::mdp::{
    apply_guarded_bellman, max_gap, max_norm_distance, solve_guarded_value_iteration, PrunedMdp, QTable,
    SafetySpec,
};
use guardrl_core::sampling::{
    dss_mixing, dts_interval, sample_hybrid_batch, DssConfig, DtsConfig, OfflineDataset, OnlineBuffer,
    Source, TransitionRecord,
};
use guardrl_core::trainer::{median, run_training, EnvConfig, EvalConfig, GenerateOffline, RunConfig, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::{Duration, Instant};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn random_q<R: Rng>(ns: usize, na: usize, scale: f64, rng: &mut R) -> QTable {
    let v = (0..ns * na).map(|_| rng.random_range(-scale..scale)).collect();
    QTable::from_flat(ns, na, v).unwrap()
}

fn within(limit: Duration, took: Duration) -> bool {
    took < limit
}

fn c1_contraction() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut ok, mut total, mut worst) = (0, 0, f64::NEG_INFINITY);
    for gamma in [0.5, 0.9, 0.99] {
        for _ in 0..200 {
            let ns = rng.random_range(1..=20);
            let na = rng.random_range(1..=6);
            let frac = rng.random_range(0.1..=1.0);
            let (mdp, spec) = build_random_safe_mdp(ns, na, frac, gamma, rng.random()).unwrap();
            let scale = [0.01, 1.0, 100.0][rng.random_range(0..3)];
            let q1 = random_q(ns, na, scale, &mut rng);
            let q2 = if rng.random::<f64>() < 0.25 {
                // nearby pair
                let mut q = q1.clone();
                for v in q.values_mut() {
                    *v += rng.random_range(-1e-6..1e-6);
                }
                q
            } else {
                random_q(ns, na, scale, &mut rng)
            };
            let lhs = max_norm_distance(
                &apply_guarded_bellman(&q1, &mdp, &spec).unwrap(),
                &apply_guarded_bellman(&q2, &mdp, &spec).unwrap(),
            )
            .unwrap();
            let rhs = gamma * max_norm_distance(&q1, &q2).unwrap();
            total += 1;
            worst = f64::max(worst, lhs - rhs);
            if lhs <= rhs + 1e-9 {
                ok += 1;
            }
        }
    }
    let took = start.elapsed();
    outcome(
        ok == total && total >= 500 && within(Duration::from_secs(10), took),
        format!("{ok}/{total} instances, max(lhs - rhs) = {worst:.3e}, {took:.2?}"),
    )
}

fn c2_fixed_point() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut ok, mut worst) = (0, 0.0f64);
    let n = 120;
    for i in 0..n {
        let gamma = [0.5, 0.9, 0.99][i % 3];
        let ns = rng.random_range(1..=20);
        let na = rng.random_range(1..=6);
        let (mdp, spec) = build_random_safe_mdp(ns, na, rng.random_range(0.1..=1.0), gamma, rng.random()).unwrap();
        let guarded = solve_guarded_value_iteration(&mdp, &spec, 1e-10, 1_000_000).unwrap();
        let pruned = PrunedMdp::new(&mdp, &spec).unwrap().solve(&mdp, 1e-10, 1_000_000).unwrap();
        let gap = max_norm_distance(&guarded.q, &pruned.q).unwrap();
        worst = worst.max(gap);
        if gap <= 1e-6 {
            ok += 1;
        }
    }
    let took = start.elapsed();
    outcome(
        ok == n && within(Duration::from_secs(30), took),
        format!("{ok}/{n} instances, max gap = {worst:.3e}, {took:.2?}"),
    )
}

fn c3_max_norm() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 20_000;
    let mut ok = 0;
    for _ in 0..n {
        let len = rng.random_range(1..=50);
        let scale = 10f64.powi(rng.random_range(-6..=6));
        let f: Vec<f64> = (0..len).map(|_| rng.random_range(-scale..scale)).collect();
        let g: Vec<f64> = (0..len).map(|_| rng.random_range(-scale..scale)).collect();
        let (lhs, rhs) = max_gap(&f, &g).unwrap();
        if lhs <= rhs {
            ok += 1;
        }
    }
    outcome(ok == n, format!("{ok}/{n} pairs, exact comparison"))
}

fn c4_schedules() -> Outcome {
    let mut failures = Vec::new();
    for (beta, horizon, dmin, dmax) in [(0.5, 1000u64, 1usize, 64usize), (1.0, 20_000, 4, 64), (3.0, 777, 2, 9)] {
        let cfg = DtsConfig { delta_min: dmin, delta_max: dmax, beta, horizon };
        if dts_interval(0, &cfg) != dmin || dts_interval(horizon, &cfg) != dmax {
            failures.push(format!("DTS endpoints (beta {beta})"));
        }
        let pts: Vec<usize> = (0..1000).map(|i| dts_interval(i * horizon / 999, &cfg)).collect();
        if pts.windows(2).any(|w| w[1] < w[0]) {
            failures.push(format!("DTS not monotone (beta {beta})"));
        }
    }
    let mut mid_err = 0.0f64;
    for (lmin, lmax, k, horizon) in [(0.1, 0.5, 0.01, 1000u64), (0.0, 1.0, 0.002, 5000), (0.2, 0.5, 0.01, 2000)] {
        let cfg = DssConfig { lambda_min: lmin, lambda_max: lmax, k, horizon };
        let mid = dss_mixing(horizon / 2, &cfg);
        mid_err = mid_err.max((mid - (lmin + lmax) / 2.0).abs());
        let pts: Vec<f64> = (0..1000).map(|i| dss_mixing(i * horizon / 999, &cfg)).collect();
        if pts.windows(2).any(|w| w[1] <= w[0]) {
            failures.push(format!("DSS not strictly increasing (k {k})"));
        }
    }
    if mid_err > 1e-12 {
        failures.push(format!("DSS midpoint off by {mid_err:e}"));
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("endpoints exact, monotone at 1000 points, midpoint error {mid_err:.1e}")
        } else {
            failures.join("; ")
        },
    )
}

fn cliff_config(variant: Variant, map: &[&str], slip: f64, steps: u64, seed: u64) -> RunConfig {
    RunConfig {
        variant,
        env: EnvConfig::Grid {
            map: map.iter().map(|s| s.to_string()).collect(),
            step_reward: -1.0,
            goal_reward: 10.0,
            hazard_reward: -100.0,
            slip_prob: slip,
            gamma: 0.95,
        },
        learner: LearnerConfig { gamma: 0.95, bootstrap_prob: 0.8, ..Default::default() },
        dts: DtsConfig { delta_min: 1, delta_max: 16, beta: 1.0, horizon: steps },
        dss: DssConfig { lambda_min: 0.1, lambda_max: 0.5, k: 10.0 / steps as f64, horizon: steps },
        total_steps: steps,
        batch_size: 32,
        updates_per_step: 1,
        eval_every: (steps / 10).max(1),
        eval: EvalConfig { episodes: 20, max_len: 100, ttfv_episodes: 20, ttfv_max_steps: 200, ..Default::default() },
        seed,
        online_buffer_capacity: 50_000,
        max_episode_len: 100,
        offline_path: None,
        generate_offline: Some(GenerateOffline {
            behavior: guardrl_core::envs::Behavior::Uniform,
            n_episodes: 50,
            max_ep_len: 50,
            guard: true,
            seed: Some(99),
        }),
    }
}

const CLIFF: [&str; 4] = ["......", "......", "......", "SXXXXG"];

fn c5_zero_violations() -> Outcome {
    let start = Instant::now();
    let cfg = cliff_config(Variant::Guardian, &CLIFF, 0.0, 20_000, 5);
    let log = run_training(&cfg).unwrap();
    let (mdp, spec) = cfg.env.build().unwrap();
    let unsafe_in_buffer = log
        .online
        .iter()
        .filter(|r| !spec.is_safe(r.s, r.a_exec) || mdp.is_hazard(r.s_next))
        .count();
    let s = &log.summary;
    let took = start.elapsed();
    outcome(
        s.executed_violations == 0
            && s.unsafe_online_records == 0
            && unsafe_in_buffer == 0
            && !log.online.is_empty()
            && within(Duration::from_secs(60), took),
        format!(
            "executed violations {}, unsafe appends {}, unsafe buffer records {unsafe_in_buffer}/{}, {took:.2?}",
            s.executed_violations,
            s.unsafe_online_records,
            log.online.len()
        ),
    )
}

fn c6_tabular_convergence() -> Outcome {
    let start = Instant::now();
    let grid = GridWorldSpec::from_ascii(
        &[".....", ".....", ".....", ".....", "SXXXG"],
        GridParams { step_reward: -1.0, goal_reward: 10.0, hazard_reward: -100.0, slip_prob: 0.0, gamma: 0.9 },
    )
    .unwrap();
    let (mdp, spec) = build_cliff_grid(&grid).unwrap();
    let q_star = solve_guarded_value_iteration(&mdp, &spec, 1e-12, 1_000_000).unwrap().q;
    let cfg = LearnerConfig {
        alpha: 0.0,
        tau: 1.0,
        gamma: 0.9,
        critic_lr: 1.0,
        critic_lr_decay: 0.7,
        backup_mode: BackupMode::Guarded,
        target_policy: TargetPolicy::Greedy,
        ensemble_size: 2,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut learner = Learner::new(cfg, mdp.num_states(), NUM_GRID_ACTIONS, &mut rng).unwrap();
    let max_updates = 200_000;
    let (mut s, mut t) = (mdp.initial_state(), 0u64);
    let mut error = f64::INFINITY;
    let mut used = 0;
    for k in 0..max_updates {
        let safe = spec.safe_actions(s);
        let a = safe[rng.random_range(0..safe.len())];
        let out = env_step(&mdp, s, a, &mut rng);
        let tr = TransitionRecord { s, a_exec: a, r: out.r, s_next: out.s_next, done: out.done, t, episode: 0, a_prop: None };
        learner.update(std::slice::from_ref(&tr), &spec, &mut rng).unwrap();
        t += 1;
        if out.done || t >= 200 {
            s = mdp.initial_state();
            t = 0;
        } else {
            s = out.s_next;
        }
        if (k + 1) % 10_000 == 0 {
            let q_min = learner.ensemble.min_table(false);
            // only safe pairs at non-terminal states are ever updated
            error = (0..mdp.num_states())
                .filter(|&s| !mdp.is_terminal(s))
                .flat_map(|s| spec.safe_actions(s).iter().map(move |&a| (s, a)))
                .map(|(s, a)| (q_min.get(s, a) - q_star.get(s, a)).abs())
                .fold(0.0, f64::max);
            used = k + 1;
            if error <= 0.1 {
                break;
            }
        }
    }
    let took = start.elapsed();
    outcome(
        error <= 0.1 && within(Duration::from_secs(60), took),
        format!("||Q_min - Q*||_inf = {error:.4} over executable pairs after {used} updates, {took:.2?}"),
    )
}

fn c7_directional_ablation() -> Outcome {
    let start = Instant::now();
    let seeds = 10;
    let mut stats = Vec::new();
    for variant in [Variant::Guardian, Variant::ExecMaskOnly] {
        let (mut td, mut var, mut ret) = (Vec::new(), Vec::new(), Vec::new());
        for seed in 0..seeds {
            let log = run_training(&cliff_config(variant, &CLIFF, 0.2, 5000, seed)).unwrap();
            td.push(log.summary.final_td_error.unwrap());
            var.push(log.summary.final_ensemble_variance.unwrap());
            ret.push(log.summary.eval_return);
        }
        stats.push((median(&mut td), median(&mut var), median(&mut ret)));
    }
    let (g, e) = (stats[0], stats[1]);
    let took = start.elapsed();
    outcome(
        g.0 <= e.0 && g.1 <= e.1 && g.2 >= e.2 && within(Duration::from_secs(600), took),
        format!(
            "median TD {:.4} vs {:.4}, variance {:.5} vs {:.5}, return {:.2} vs {:.2} (guardian vs exec_mask_only), {took:.2?}",
            g.0, e.0, g.1, e.1, g.2, e.2
        ),
    )
}

fn c8_sampling() -> Outcome {
    let rec = |ep: u64, t: u64| TransitionRecord {
        s: t as usize,
        a_exec: 0,
        r: 0.0,
        s_next: t as usize + 1,
        done: t == 9,
        t,
        episode: ep,
        a_prop: None,
    };
    let off = OfflineDataset::from_records((0..20).flat_map(|e| (0..10).map(move |t| rec(e, t))).collect()).unwrap();
    let mut on = OnlineBuffer::new(1000);
    for e in 0..20 {
        for t in 0..10 {
            guardrl_core::sampling::append_online(&mut on, rec(100 + e, t));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let half = sample_hybrid_batch(&off, &on, 0.5, 4, 10_000, &mut rng).unwrap();
    let frac = half.online_fraction();
    let pure = |lambda: f64, rng: &mut ChaCha8Rng| {
        let b = sample_hybrid_batch(&off, &on, lambda, 4, 10_000, rng).unwrap();
        let want = if lambda == 1.0 { Source::Online } else { Source::Offline };
        b.samples.iter().all(|s| s.source == want)
    };
    let (p0, p1) = (pure(0.0, &mut rng), pure(1.0, &mut rng));
    outcome(
        (frac - 0.5).abs() <= 0.015 && p0 && p1,
        format!("online fraction {frac:.4} at lambda 0.5; lambda 0 pure offline: {p0}; lambda 1 pure online: {p1}"),
    )
}

fn c9_safe_policy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 20_000;
    let (mut ok, mut starved) = (0, 0);
    for i in 0..n {
        let na = rng.random_range(1..=8);
        let mut safe: Vec<bool> = (0..na).map(|_| rng.random::<f64>() < 0.5).collect();
        if !safe.iter().any(|b| *b) {
            safe[rng.random_range(0..na)] = true;
        }
        let emb = (0..na).map(|a| (0..na).map(|b| if a == b { 1.0 } else { 0.0 }).collect()).collect();
        let spec = SafetySpec::new(vec![safe.clone()], emb).unwrap();
        let mut raw: Vec<f64> = (0..na).map(|_| rng.random::<f64>()).collect();
        match i % 4 {
            // all safe mass removed
            0 => (0..na).filter(|&a| safe[a]).for_each(|a| raw[a] = 0.0),
            // safe mass below the starvation threshold
            1 => (0..na).filter(|&a| safe[a]).for_each(|a| raw[a] = STARVATION_EPS * 1e-3),
            _ => {}
        }
        if raw.iter().sum::<f64>() == 0.0 {
            raw[0] = 1.0;
        }
        let z: f64 = raw.iter().sum();
        let dist = PolicyDistribution::new(raw.iter().map(|x| x / z).collect()).unwrap();
        let out = renormalize_policy_safe(&dist, 0, &spec);
        starved += usize::from(out.starved);
        let p = out.dist.probs();
        let sums = (p.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
        let zero_unsafe = (0..na).all(|a| safe[a] || p[a] == 0.0);
        if sums && zero_unsafe && p.iter().all(|x| *x >= 0.0) {
            ok += 1;
        }
    }
    outcome(ok == n && starved > 0, format!("{ok}/{n} instances valid, {starved} took the starvation fallback"))
}

fn c10_gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let n = 150;
    let (mut ok, mut worst) = (0, 0.0f64);
    for _ in 0..n {
        let ns = rng.random_range(1..=5);
        let na = rng.random_range(2..=6);
        let logits: Vec<f64> = (0..ns * na).map(|_| rng.random_range(-2.0..2.0)).collect();
        let pol = PolicyTable::from_logits(ns, na, logits.clone()).unwrap();
        let ens = QEnsemble::from_members((0..2).map(|_| random_q(ns, na, 3.0, &mut rng)).collect()).unwrap();
        let alpha = rng.random_range(0.0..1.0);
        let states: Vec<usize> = (0..rng.random_range(1..=8)).map(|_| rng.random_range(0..ns)).collect();
        let grad = actor_gradient(&pol, &states, &ens, alpha);
        let h = 1e-5;
        let mut max_rel = 0.0f64;
        for j in 0..logits.len() {
            let mut up = logits.clone();
            let mut down = logits.clone();
            up[j] += h;
            down[j] -= h;
            let lu = actor_loss(&PolicyTable::from_logits(ns, na, up).unwrap(), &states, &ens, alpha);
            let ld = actor_loss(&PolicyTable::from_logits(ns, na, down).unwrap(), &states, &ens, alpha);
            let fd = (lu - ld) / (2.0 * h);
            let rel = (grad[j] - fd).abs() / grad[j].abs().max(fd.abs()).max(1e-3);
            max_rel = max_rel.max(rel);
        }
        worst = worst.max(max_rel);
        if max_rel <= 1e-5 {
            ok += 1;
        }
    }
    outcome(ok == n, format!("{ok}/{n} instances, max relative error {worst:.2e}"))
}

fn c11_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = serde_json::to_value(cliff_config(Variant::Guardian, &CLIFF, 0.2, 2000, 17)).unwrap();
    cfg["output_dir"] = serde_json::json!("unused");
    let path = dir.path().join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let run = |name: &str| {
        let ov = TrainOverrides { out: Some(dir.path().join(name)), seed: Some(17), ..Default::default() };
        cmd_train(&path, &ov).unwrap();
        ["log.jsonl", "summary.json", "log.csv"]
            .map(|f| std::fs::read(dir.path().join(name).join(f)).unwrap())
    };
    let (a, b) = (run("a"), run("b"));
    let same = a == b;
    let lines = String::from_utf8_lossy(&a[0]).lines().count();
    outcome(same && lines > 1, format!("log.jsonl ({lines} records), summary.json, log.csv byte-identical: {same}"))
}

fn main() {
    // the libtest flags cargo passes (e.g. --nocapture) are irrelevant here
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("1 contraction", c1_contraction),
        ("2 fixed-point oracle", c2_fixed_point),
        ("3 max-norm inequality", c3_max_norm),
        ("4 schedule laws", c4_schedules),
        ("5 zero executed violations", c5_zero_violations),
        ("6 tabular convergence", c6_tabular_convergence),
        ("7 directional ablation", c7_directional_ablation),
        ("8 sampling statistics", c8_sampling),
        ("9 safe-policy contract", c9_safe_policy),
        ("10 actor gradient check", c10_gradient_check),
        ("11 determinism", c11_determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let o = f();
        failed += usize::from(!o.pass);
        println!("[{}] criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
