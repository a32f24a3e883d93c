//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! Set `S2RL_ACCEPTANCE_DIR` to keep (and reuse) the generated datasets and
//! runs between invocations; by default everything lives in a temp dir.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use s2rl_cli::run_args;
use s2rl_core::datastore::{collect_episodes, Transition};
use s2rl_core::envsim::{make_env, EnvSpec, Family, Perturbation, Role, UniformPolicy};
use s2rl_core::gapmetrics::{gaussian_kl, kl_ratio, kl_ratio_encoded, m_identity_gap, DegradationTable};
use s2rl_core::latentspace::{LatentConfig, LatentModel};
use s2rl_core::numgrad::{eval_loss, finite_diff_grad, grad, mlp_graph, Array, Graph, MlpParams, NumError, Var};
use s2rl_core::orchestrator::{
    eval_csv, phase1_single_env, run_latent_training, run_pooled_baseline, Phase1Config, RunManifest, TrainerConfig,
};
use s2rl_core::sacpolicy::{actor_loss_graph, alpha_loss_graph, critic_loss_graph, SacConfig};
use s2rl_core::worldmodel::{train_ensemble, EnsembleModel, ModelConfig, Normalizer, PredictMode};
use serde_json::json;

type Check = Result<(bool, String), String>;

fn normal(rows: usize, cols: usize, mean: f64, sd: f64, rng: &mut ChaCha8Rng) -> Array {
    let data = (0..rows * cols)
        .map(|_| mean + sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Array::matrix(rows, cols, data)
}

/// Glorot weights plus non-zero biases, so every tensor carries gradient.
fn net(sizes: &[usize], rng: &mut ChaCha8Rng) -> Vec<Array> {
    let params = MlpParams::new(sizes, rng);
    params
        .tensors()
        .iter()
        .map(|t| {
            let noise = normal(t.rows(), t.cols(), 0.0, 0.1, rng);
            t.zip_map(&noise, |v, e| v + e)
        })
        .collect()
}

fn norm(xs: &[Array]) -> f64 {
    xs.iter().flat_map(|a| a.data()).map(|v| v * v).sum::<f64>().sqrt()
}

/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over all tensors.
fn relative_error<F>(params: &[Array], f: F) -> Result<f64, NumError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, NumError>,
{
    let (_, analytic) = grad(params, &f)?;
    let numeric = finite_diff_grad(params, 1e-6, |p| eval_loss(p, &f))?;
    let diff: Vec<Array> = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| a.zip_map(n, |x, y| x - y))
        .collect();
    Ok(norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-12))
}

/// Residual encoder `[s, 0] + p(s)` into `dl` dimensions.
fn encode(g: &mut Graph, p: &[Var], s: Var, dl: usize) -> Var {
    let (rows, obs) = (g.value(s).rows(), g.value(s).cols());
    let base = if dl > obs {
        let pad = g.constant(Array::zeros(&[rows, dl - obs]));
        g.concat_cols(s, pad)
    } else {
        s
    };
    let out = mlp_graph(g, p, s);
    g.add(base, out)
}

const FAMILIES: [&str; 6] = ["gaussian_nll", "reconstruction", "correspondence", "critic", "actor", "temperature"];

fn gradient_case(family: usize, rng: &mut ChaCha8Rng) -> Result<f64, NumError> {
    let n = rng.random_range(3..9);
    let obs = rng.random_range(1..5);
    let act = rng.random_range(1..3);
    let width = rng.random_range(2..9);
    let hidden: Vec<usize> = vec![width; rng.random_range(1..3)];
    let sizes = |i: usize, o: usize| [vec![i], hidden.clone(), vec![o]].concat();
    let s = normal(n, obs, 0.0, 1.0, rng);
    match family {
        0 => {
            let cfg = ModelConfig {
                members: 1,
                elites: 1,
                hidden: hidden.clone(),
                ..Default::default()
            };
            let mut model = EnsembleModel::new(obs, act, cfg, rng);
            let x = normal(n, obs + act, 0.5, 2.0, rng);
            let y = normal(n, obs + 1, -0.3, 1.5, rng);
            model.input_norm = Normalizer::fit(&x);
            model.output_norm = Normalizer::fit(&y);
            let params = net(&sizes(obs + act, 2 * (obs + 1)), rng);
            relative_error(&params, |g, p| {
                let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
                Ok(model.member_nll_graph(g, p, xv, yv))
            })
        }
        1 => {
            let dl = obs + rng.random_range(0..3);
            let mut params = net(&sizes(obs, dl), rng);
            let np = params.len();
            params.extend(net(&sizes(dl, obs), rng));
            relative_error(&params, |g, p| {
                let sv = g.constant(s.clone());
                let z = encode(g, &p[..np], sv, dl);
                let base = g.slice_cols(z, 0, obs);
                let out = mlp_graph(g, &p[np..], z);
                let back = g.add(base, out);
                let diff = g.sub(back, sv);
                let sq = g.square(diff);
                let rows = g.sum_cols(sq);
                Ok(g.mean(rows))
            })
        }
        2 => {
            let dl = obs + rng.random_range(0..3);
            let mut params = net(&sizes(obs, dl), rng);
            let np = params.len();
            params.extend(net(&sizes(obs, dl), rng));
            params.extend(net(&sizes(dl, dl), rng));
            relative_error(&params, |g, p| {
                let o = g.constant(s.clone());
                let zs = encode(g, &p[..np], o, dl);
                let zr = encode(g, &p[np..2 * np], o, dl);
                let out = mlp_graph(g, &p[2 * np..], zr);
                let mapped = g.add(zr, out);
                let diff = g.sub(zs, mapped);
                let norms = g.row_norm(diff);
                Ok(g.mean(norms))
            })
        }
        3 => {
            let a = normal(n, act, 0.0, 0.5, rng);
            let y = normal(n, 1, -2.0, 1.0, rng);
            let mut params = net(&sizes(obs + act, 1), rng);
            let nq = params.len();
            params.extend(net(&sizes(obs + act, 1), rng));
            relative_error(&params, |g, p| {
                let (sv, av, yv) = (g.constant(s.clone()), g.constant(a.clone()), g.constant(y.clone()));
                Ok(critic_loss_graph(g, &p[..nq], &p[nq..], sv, av, yv))
            })
        }
        4 | 5 => {
            let eps = normal(n, act, 0.0, 1.0, rng);
            let alpha = rng.random_range(0.05..1.0);
            let bound = rng.random_range(0.5..3.0);
            let mut params = net(&sizes(obs, 2 * act), rng);
            let na = params.len();
            params.extend(net(&sizes(obs + act, 1), rng));
            params.extend(net(&sizes(obs + act, 1), rng));
            let nq = (params.len() - na) / 2;
            let actor = move |g: &mut Graph, p: &[Var]| {
                let (sv, ev) = (g.constant(s.clone()), g.constant(eps.clone()));
                actor_loss_graph(g, &p[..na], &p[na..na + nq], &p[na + nq..], sv, ev, alpha, bound, (-5.0, 2.0))
            };
            if family == 4 {
                return relative_error(&params, |g, p| Ok(actor(g, p).0));
            }
            // temperature: the policy is held fixed, only log α is a parameter
            let target = -(act as f64);
            let log_alpha = vec![Array::scalar(rng.random_range(-2.0..1.0))];
            relative_error(&log_alpha, |g, p| {
                let fixed: Vec<Var> = params.iter().map(|t| g.constant(t.clone())).collect();
                let (_, logp) = actor(g, &fixed);
                Ok(alpha_loss_graph(g, p[0], logp, target))
            })
        }
        _ => unreachable!(),
    }
}

fn criterion_1() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cases = 120;
    let mut worst = [0.0f64; FAMILIES.len()];
    for i in 0..cases {
        let f = i % FAMILIES.len();
        let err = gradient_case(f, &mut rng).map_err(|e| e.to_string())?;
        worst[f] = worst[f].max(if err.is_nan() { f64::INFINITY } else { err });
    }
    let secs = started.elapsed().as_secs_f64();
    let max = worst.iter().copied().fold(0.0, f64::max);
    let per: Vec<String> = FAMILIES.iter().zip(&worst).map(|(n, w)| format!("{n} {w:.1e}")).collect();
    Ok((
        max <= 1e-4 && secs < 60.0,
        format!("{cases} configs, max rel err {max:.1e} (<= 1e-4) [{}], {secs:.1}s (< 60s)", per.join(", ")),
    ))
}

fn linear_data(n: usize, rng: &mut ChaCha8Rng) -> Vec<Transition> {
    (0..n)
        .map(|_| {
            let s: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = vec![rng.random_range(-1.0..1.0)];
            Transition {
                r: -s.iter().map(|x| x * x).sum::<f64>(),
                s_next: s.iter().map(|x| 0.9 * x + 0.1 * a[0]).collect(),
                s,
                a,
                done: false,
            }
        })
        .collect()
}

fn linear_model(seed: u64) -> EnsembleModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        hidden: vec![32, 32],
        batch_size: 64,
        max_epochs: 60,
        ..Default::default()
    };
    train_ensemble(&linear_data(2000, &mut rng), &cfg, &mut rng).unwrap().0
}

fn criterion_2() -> Check {
    let single = linear_model(11);
    let model = LatentModel::init_from_single(&single, Role::Real, LatentConfig::default(), &mut ChaCha8Rng::seed_from_u64(12))
        .map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let s = Array::matrix(1000, 2, (0..2000).map(|_| rng.random_range(-2.0..2.0)).collect());
    let a = Array::matrix(1000, 1, (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect());
    let z = model.encode(Role::Real, &s).map_err(|e| e.to_string())?;
    let base = single.predict(&s, &a, PredictMode::Mean, &mut ChaCha8Rng::seed_from_u64(14)).unwrap();
    let lat = model.dynamics.predict(&z, &a, PredictMode::Mean, &mut ChaCha8Rng::seed_from_u64(14)).unwrap();
    let mut pred_err = 0.0f64;
    for r in 0..1000 {
        pred_err = pred_err.max((base.r[r] - lat.r[r]).abs());
        for c in 0..2 {
            pred_err = pred_err.max((base.s_next.get(r, c) - lat.s_next.get(r, c)).abs());
        }
    }
    let gap = m_identity_gap(&model, &s).map_err(|e| e.to_string())?;
    let real = normal(500, 2, 0.0, 1.0, &mut rng);
    let sim = normal(500, 2, 0.7, 1.4, &mut rng);
    let kl = kl_ratio(&model, &real, &sim, false).map_err(|e| e.to_string())?;
    let ratio_err = (kl.kl_ratio - 1.0).abs();
    Ok((
        pred_err <= 1e-6 && gap == 0.0 && ratio_err <= 1e-9,
        format!(
            "max prediction diff {pred_err:.1e} (<= 1e-6) on 1000 (s, a); m_identity_gap {gap} (== 0); |kl_ratio - 1| {ratio_err:.1e} (<= 1e-9)"
        ),
    ))
}

fn uniform_offline(episodes: usize) -> Vec<Transition> {
    let env = make_env(&EnvSpec::base(Family::Pendulum, Role::Real)).unwrap();
    let policy = UniformPolicy {
        dim: 1,
        bound: env.action_bound(),
    };
    collect_episodes(&env, &policy, episodes, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
}

fn small_trainer() -> TrainerConfig {
    TrainerConfig {
        iterations: 4,
        env_steps: 25,
        rollouts_per_step: 4,
        grad_steps: 2,
        rollout_depth: 2,
        sim: EnvSpec::new(Family::Pendulum, Perturbation::Gravity, 1.0, Role::Sim),
        model: ModelConfig {
            members: 4,
            elites: 2,
            hidden: vec![32],
            batch_size: 64,
            max_epochs: 10,
            ..Default::default()
        },
        sac: SacConfig {
            hidden: vec![32, 32],
            batch_size: 64,
            ..Default::default()
        },
        phase1: Phase1Config {
            sac_updates: 200,
            rollout_interval: 50,
            rollout_starts: 32,
            ..Default::default()
        },
        model_batches: 4,
        model_batch_size: 64,
        env_warmup_steps: 64,
        eval_episodes: 2,
        eval_every: 1,
        seed: 9,
        ..Default::default()
    }
}

fn criterion_3() -> Check {
    let mut config = small_trainer();
    config.latent.frozen_identity = true;
    let data = uniform_offline(5);
    let p1 = phase1_single_env(&config, &data).map_err(|e| e.to_string())?;
    let latent = run_latent_training(&config, &data, &p1).map_err(|e| e.to_string())?.manifest;
    let pooled = run_pooled_baseline(&config, &data, &p1).map_err(|e| e.to_string())?.manifest;
    let (a, b) = (eval_csv(&latent.evals), eval_csv(&pooled.evals));
    Ok((
        a == b && latent.evals.len() == config.iterations,
        format!(
            "{} eval rows, eval CSVs {} at sim scale 1.0 with frozen identity encoders",
            latent.evals.len(),
            if a == b { "bit-identical" } else { "differ" }
        ),
    ))
}

/// Trapezoidal integration of `p log(p/q)` for two 1-d Gaussians.
fn kl_by_quadrature(m0: f64, v0: f64, m1: f64, v1: f64) -> f64 {
    let pdf = |x: f64, m: f64, v: f64| (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
    let (s0, s1) = (v0.sqrt(), v1.sqrt());
    let lo = (m0 - 12.0 * s0).min(m1 - 12.0 * s1);
    let hi = (m0 + 12.0 * s0).max(m1 + 12.0 * s1);
    let n = 200_000;
    let h = (hi - lo) / n as f64;
    let f = |x: f64| {
        let p = pdf(x, m0, v0);
        if p < 1e-300 {
            0.0
        } else {
            p * (p / pdf(x, m1, v1)).ln()
        }
    };
    let inner: f64 = (1..n).map(|i| f(lo + i as f64 * h)).sum();
    h * (inner + 0.5 * (f(lo) + f(hi)))
}

/// Shifted and rescaled so the single column has exactly the given moments.
fn standardized(x: &Array, mean: f64, sd: f64) -> Array {
    let n = x.rows() as f64;
    let m = x.data().iter().sum::<f64>() / n;
    let v = x.data().iter().map(|u| (u - m).powi(2)).sum::<f64>() / n;
    x.map(|u| mean + sd * (u - m) / v.sqrt())
}

fn criterion_6() -> Check {
    let fixture = gaussian_kl(&[0.0], &[1.0], &[1.0], &[1.0]).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (m0, m1) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let (v0, v1) = (rng.random_range(0.2..3.0), rng.random_range(0.2..3.0));
        let exact = gaussian_kl(&[m0], &[v0], &[m1], &[v1]).map_err(|e| e.to_string())?;
        let oracle = kl_by_quadrature(m0, v0, m1, v1);
        worst = worst.max((exact - oracle).abs() / oracle.max(1e-3));
    }
    let real = standardized(&normal(2000, 1, 0.0, 1.0, &mut rng), 0.0, 1.0);
    let sim = standardized(&normal(2000, 1, 0.0, 1.0, &mut rng), 3.0, 1.0);
    let twice = |x: &Array| x.map(|v| 2.0 * v);
    let r = kl_ratio_encoded(&real, &sim, &twice(&real), &twice(&sim), false).map_err(|e| e.to_string())?;
    let affine = (r.kl_original - 4.5).abs().max((r.kl_latent - 4.5).abs());
    Ok((
        fixture == 0.5 && worst <= 0.01 && affine <= 1e-6,
        format!(
            "N(0,1)||N(1,1) = {fixture} (== 0.5); max rel err vs quadrature {worst:.1e} (<= 1%) on 50 pairs; affine fixture err {affine:.1e} (<= 1e-6)"
        ),
    ))
}

fn criterion_10() -> Check {
    let mut passed = 0;
    let mut ratios = Vec::new();
    for seed in 0..5u64 {
        let model = linear_model(100 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let s = Array::matrix(500, 2, (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect());
        let a = Array::matrix(500, 1, (0..500).map(|_| rng.random_range(-1.0..1.0)).collect());
        let inside = model.disagreement(&s, &a).map_err(|e| e.to_string())?;
        let outside = model.disagreement(&s.map(|v| 10.0 * v), &a).map_err(|e| e.to_string())?;
        if outside > inside {
            passed += 1;
        }
        ratios.push(format!("{:.0}x", outside / inside.max(1e-300)));
    }
    Ok((
        passed == 5,
        format!("{passed}/5 seeds with disagreement at 10x range > in range (need 5/5); ratios {}", ratios.join(", ")),
    ))
}

fn run(args: &[&str]) -> Result<(), String> {
    run_args(std::iter::once("s2rl").chain(args.iter().copied()))
        .map(|_| ())
        .map_err(|e| format!("`s2rl {}` failed: {}", args.join(" "), e.record()))
}

fn write_config(dir: &Path, name: &str, config: serde_json::Value) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn criterion_4(root: &Path) -> Check {
    let started = Instant::now();
    let out = root.join("degrade");
    let config = write_config(&out, "config.json", json!({}));
    run(&["--config", s(&config), "--out", s(&out), "degrade", "--family", "pendulum", "--axis", "gravity", "--seeds", "5"])?;
    let secs = started.elapsed().as_secs_f64();
    let text = std::fs::read_to_string(out.join("reports/degrade-pendulum.json")).map_err(|e| e.to_string())?;
    let table: DegradationTable = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let columns: Vec<usize> = [1.0, 1.1, 1.5, 2.0]
        .iter()
        .map(|x| table.scales.iter().position(|s| s == x).ok_or(format!("scale {x} missing")))
        .collect::<Result<_, _>>()?;
    let ok = table.non_increasing_seeds(Perturbation::Gravity, &columns);
    let means: Vec<String> = columns
        .iter()
        .map(|&c| format!("{:.0}", table.rows[0].cells[c].mean))
        .collect();
    Ok((
        ok >= 4 && secs <= 900.0,
        format!(
            "{ok}/5 seeds non-increasing over scales 1, 1.1, 1.5, 2 (need >= 4); means {}; {secs:.0}s (<= 900s)",
            means.join(" > ")
        ),
    ))
}

/// Seconds-scale configuration exercising every subcommand.
fn tiny_experiment(out: &Path) -> serde_json::Value {
    json!({
        "output_dir": out,
        "trainer": {
            "iterations": 2, "env_steps": 10, "rollouts_per_step": 4, "grad_steps": 2,
            "rollout_depth": 1, "rollout_batch_size": 3,
            "latent": { "hidden": [8] },
            "model": { "members": 3, "elites": 2, "hidden": [16], "batch_size": 32, "max_epochs": 5 },
            "sac": { "hidden": [16, 16], "batch_size": 32 },
            "phase1": { "sac_updates": 40, "rollout_interval": 20, "rollout_starts": 16 },
            "model_batches": 2, "model_batch_size": 32, "env_warmup_steps": 100,
            "eval_episodes": 1, "eval_every": 1, "seed": 3
        },
        "dataset": {
            "size": 600,
            "gen": {
                "threshold_fraction": -1.0, "max_train_steps": 800, "reference_episodes": 2, "stats_episodes": 1,
                "sac": { "warmup_steps": 100, "eval_every": 100, "eval_episodes": 1, "sac": { "hidden": [16], "batch_size": 32 } }
            }
        },
        "sweep": { "scales": [1.05, 2.0], "seeds": [0, 1] },
        "degrade": {
            "train_steps": 120,
            "online": { "warmup_steps": 60, "sac": { "hidden": [16], "batch_size": 32 } },
            "episodes": 1
        }
    })
}

fn files_with(dir: &Path, exts: &[&str], base: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            files_with(&path, exts, base, out);
        } else if path.extension().is_some_and(|e| exts.iter().any(|x| e == *x)) {
            out.insert(path.strip_prefix(base).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
        }
    }
}

fn criterion_9(root: &Path) -> Check {
    let mut trees = Vec::new();
    for name in ["a", "b"] {
        let out = root.join("determinism").join(name);
        if out.exists() {
            std::fs::remove_dir_all(&out).map_err(|e| e.to_string())?;
        }
        let config = write_config(&out, "config.json", tiny_experiment(&out));
        let c = s(&config);
        let o = s(&out);
        let latent = out.join("runs/latent-pendulum-gravity-1.5-seed4");
        let evals = latent.join("evals.csv");
        let chart = out.join("evals-chart.svg");
        let commands: Vec<Vec<&str>> = vec![
            vec!["gen-data"],
            vec!["train-single"],
            vec!["train-latent", "--scale", "1.5", "--seed", "4"],
            vec!["train-baseline", "--scale", "1.5", "--seed", "4"],
            vec!["eval", "--run", s(&latent)],
            vec!["gap-report", "--scales", "1.05,2", "--seed", "0"],
            vec!["kl-report", "--scales", "1.05,2", "--seed", "0", "--knn"],
            vec!["degrade", "--family", "pendulum", "--axis", "gravity", "--seeds", "3"],
            vec!["sweep"],
            vec!["plot", "--input", s(&evals), "--output", s(&chart)],
        ];
        for cmd in &commands {
            let mut args = vec!["--config", c, "--out", o];
            args.extend(cmd);
            run(&args)?;
        }
        let mut files = BTreeMap::new();
        files_with(&out, &["csv", "svg"], &out, &mut files);
        trees.push(files);
    }
    let (a, b) = (&trees[0], &trees[1]);
    let names: BTreeSet<&PathBuf> = a.keys().chain(b.keys()).collect();
    let differing: Vec<String> = names
        .iter()
        .filter(|n| a.get(**n) != b.get(**n))
        .map(|n| n.display().to_string())
        .collect();
    let csvs = a.keys().filter(|p| p.extension().is_some_and(|e| e == "csv")).count();
    Ok((
        differing.is_empty() && csvs >= 10,
        if differing.is_empty() {
            format!("10 subcommands run twice: {csvs} CSV files (plus SVGs) byte-identical")
        } else {
            format!("differing outputs: {}", differing.join(", "))
        },
    ))
}

/// Desk-scale study shared by criteria 5, 7 and 8.
struct Study {
    out: PathBuf,
    rows: Vec<BTreeMap<String, String>>,
    secs: f64,
}

fn study_config(out: &Path) -> serde_json::Value {
    json!({
        "output_dir": out,
        "trainer": {
            "iterations": 15, "env_steps": 100, "rollouts_per_step": 8, "grad_steps": 2, "rollout_depth": 2,
            "sac": { "batch_size": 256 },
            "phase1": { "sac_updates": 8000, "eval_every": 1000 },
            "eval_every": 2, "eval_episodes": 5
        },
        "dataset": {
            "quality": "medium-replay", "size": 10000, "seed": 0,
            "gen": { "sac": { "eval_every": 500, "sac": { "batch_size": 256 } } }
        },
        "sweep": {
            "modes": ["latent", "pooled_baseline"], "family": "pendulum", "axes": ["gravity"],
            "scales": [1.05, 2.0], "seeds": [0, 1, 2, 3, 4]
        }
    })
}

fn run_study(root: &Path) -> Result<Study, String> {
    let started = Instant::now();
    let out = root.join("study");
    let config = write_config(&out, "config.json", study_config(&out));
    run(&["--config", s(&config), "--out", s(&out), "sweep"])?;
    let text = std::fs::read_to_string(out.join("reports/sweep-pendulum-seeds.csv")).map_err(|e| e.to_string())?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or("empty seed table")?.split(',').collect();
    let rows = lines
        .map(|l| header.iter().map(|h| h.to_string()).zip(l.split(',').map(str::to_string)).collect())
        .collect();
    Ok(Study {
        out,
        rows,
        secs: started.elapsed().as_secs_f64(),
    })
}

fn cell(study: &Study, mode: &str, scale: &str, seed: u64, column: &str) -> Result<f64, String> {
    study
        .rows
        .iter()
        .find(|r| r["mode"] == mode && r["scale"] == scale && r["seed"] == seed.to_string())
        .and_then(|r| r.get(column))
        .ok_or(format!("no {mode} row at scale {scale}, seed {seed}"))?
        .parse()
        .map_err(|e| format!("{column}: {e}"))
}

fn criterion_5(study: &Study) -> Check {
    let mut passed = 0;
    let mut pairs = Vec::new();
    for seed in 0..5 {
        let low = cell(study, "latent", "1.05", seed, "m_identity_gap")?;
        let high = cell(study, "latent", "2", seed, "m_identity_gap")?;
        if high > low {
            passed += 1;
        }
        pairs.push(format!("{low:.3}->{high:.3}"));
    }
    Ok((
        passed >= 4,
        format!("{passed}/5 seeds with m_identity_gap(2.0) > m_identity_gap(1.05) (need >= 4); {}", pairs.join(", ")),
    ))
}

fn criterion_7(study: &Study) -> Check {
    let mut passed = 0;
    let mut near = Vec::new();
    let mut far = Vec::new();
    let offline = cell(study, "latent", "1.05", 0, "offline_real")?;
    for seed in 0..5 {
        let latent = cell(study, "latent", "1.05", seed, "real_return")?;
        if latent >= offline {
            passed += 1;
        }
        near.push(format!("{latent:.0}"));
        far.push(format!(
            "{:.0}/{:.0}",
            cell(study, "latent", "2", seed, "real_return")?,
            cell(study, "pooled_baseline", "2", seed, "real_return")?
        ));
    }
    Ok((
        passed >= 3,
        format!(
            "{passed}/5 seeds with latent real return >= offline-only {offline:.0} at scale 1.05 (need >= 3): {}; \
             scale 2.0 latent/pooled real return by seed (reported): {}; study {:.0}s",
            near.join(", "),
            far.join(", "),
            study.secs
        ),
    ))
}

fn criterion_8(study: &Study) -> Check {
    let mut checked = 0;
    let mut failures = Vec::new();
    for entry in std::fs::read_dir(study.out.join("runs")).map_err(|e| e.to_string())? {
        let dir = entry.map_err(|e| e.to_string())?.path();
        if dir.file_name().is_some_and(|n| n.to_string_lossy().starts_with("offline_only")) {
            continue;
        }
        let text = std::fs::read_to_string(dir.join("manifest.json")).map_err(|e| e.to_string())?;
        let m = RunManifest::from_json(&text).map_err(|e| e.to_string())?;
        let (c, b) = (&m.config, &m.bookkeeping);
        let steps = (c.iterations * c.env_steps) as u64;
        let planned = steps * (c.rollouts_per_step * c.rollout_depth) as u64;
        let env_ok = (b.env_transitions - b.env_warmup) as u64 == steps && b.env_warmup == c.env_warmup_steps;
        let model_ok = b.model_insertions == planned - b.lost_transitions;
        if let Err(e) = b.check(c).map(|_| ()).and(if env_ok && model_ok { Ok(()) } else { Err("arithmetic".into()) }) {
            failures.push(format!("{}: {e}", dir.display()));
        }
        checked += 1;
    }
    Ok((
        failures.is_empty() && checked == 20,
        if failures.is_empty() {
            format!("{checked} runs: |D_env| - warmup == N*E and insertions == N*E*M*k - lost, exactly")
        } else {
            failures.join("; ")
        },
    ))
}

fn report(id: usize, name: &str, result: std::thread::Result<Check>) -> bool {
    let (pass, detail) = match result {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => (false, format!("error: {e}")),
        Err(p) => (
            false,
            format!(
                "panic: {}",
                p.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default()
            ),
        ),
    };
    println!("criterion {id:>2} {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn main() {
    let temp = tempfile::tempdir().expect("temp dir");
    let root = std::env::var_os("S2RL_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| temp.path().to_path_buf());
    let guard = |f: &dyn Fn() -> Check| catch_unwind(AssertUnwindSafe(f));
    let mut results = BTreeMap::new();
    results.insert(1, report(1, "gradient correctness", guard(&criterion_1)));
    results.insert(2, report(2, "identity initialization", guard(&criterion_2)));
    results.insert(3, report(3, "zero-gap mode equivalence", guard(&criterion_3)));
    results.insert(6, report(6, "KL estimator", guard(&criterion_6)));
    results.insert(10, report(10, "locally good model", guard(&criterion_10)));
    results.insert(4, report(4, "transfer degradation trend", guard(&|| criterion_4(&root))));
    results.insert(9, report(9, "determinism", guard(&|| criterion_9(&root))));
    let study = catch_unwind(AssertUnwindSafe(|| run_study(&root)));
    let with_study = |f: fn(&Study) -> Check| -> std::thread::Result<Check> {
        match &study {
            Ok(Ok(st)) => catch_unwind(AssertUnwindSafe(|| f(st))),
            Ok(Err(e)) => Ok(Err(format!("study failed: {e}"))),
            Err(_) => Ok(Err("study panicked".into())),
        }
    };
    results.insert(5, report(5, "m-gap grows with the gap", with_study(criterion_5)));
    results.insert(7, report(7, "latent transfer vs offline-only", with_study(criterion_7)));
    results.insert(8, report(8, "bookkeeping exactness", with_study(criterion_8)));

    let failed: Vec<String> = results.iter().filter(|(_, &p)| !p).map(|(i, _)| i.to_string()).collect();
    println!("acceptance: {}/{} criteria pass", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failing criteria: {}", failed.join(", "));
        std::process::exit(1);
    }
}
