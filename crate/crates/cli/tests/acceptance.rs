//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any criterion fails.

#[path = "../../core/tests/support/reference.rs"]
mod reference;

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use fedpick::analysis::{fisher_scores, probe_model, probe_ratios};
use fedpick::autodiff::{Mode, SgdMomentum, Tape, Tensor};
use fedpick::federation::{aggregate, SharedSnapshot};
use fedpick::losses::{cross_entropy, cyclic_kl, negative_entropy, LossWeights};
use fedpick::metrics::{MetricsLog, Split};
use fedpick::model::{init_model, ModelDims, PfsmConfig};
use fedpick_cli::commands::{self, train};
use fedpick_cli::Config;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let dims = ModelDims {
        input_dim: 6,
        encoder_widths: vec![8, 8],
        num_classes: 3,
        batch_norm: true,
        pfsm: Some(PfsmConfig::default()),
    };
    let mut worst: f64 = 0.0;
    let mut loss_gap: f64 = 0.0;
    let mut checked = 0;
    for seed in 0..3 {
        let model = init_model::<f64>(&dims, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let x = random(&[4, 6], &mut rng);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        let r = reference::check_total_loss_gradient(&model, &x, &labels, &LossWeights::OFFICE, seed, 1e-5);
        worst = worst.max(r.max_rel_err);
        checked += r.checked;
        loss_gap = loss_gap.max((r.loss_tape - r.loss_reference).abs());
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-4 && loss_gap < 1e-12 && elapsed < Duration::from_secs(5),
        format!(
            "max relative error {worst:.2e} (< 1e-4) over {checked} parameters in 3 models, {:.2}s (< 5s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn mask_algebra() -> Outcome {
    let start = Instant::now();
    let dims = ModelDims {
        input_dim: 6,
        encoder_widths: vec![8, 8],
        num_classes: 3,
        batch_norm: true,
        pfsm: Some(PfsmConfig::default()),
    };
    let mut model = init_model::<f64>(&dims, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut binary, mut exact, mut deterministic) = (true, true, true);
    for _ in 0..1000 {
        let x = random(&[4, 6], &mut rng);
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = model.forward(&mut tape, &vars, xv, Mode::Train, Some(&mut rng)).unwrap();
        let sel = out.selection.unwrap();
        binary &= tape.value(sel.mask_hard).data().iter().all(|&m| m == 0.0 || m == 1.0);
        let (zg, zp, zu) = (tape.value(out.z_g), tape.value(sel.z_relevant), tape.value(sel.z_irrelevant));
        exact &= zg.data().iter().zip(zp.data()).zip(zu.data()).all(|((g, p), u)| (p + u).to_bits() == g.to_bits());
        let a = model.infer(&x).unwrap();
        let b = model.infer(&x).unwrap();
        deterministic &= a.z_g == b.z_g && a.logits_p == b.logits_p && a.mask_hard == b.mask_hard;
    }
    let elapsed = start.elapsed();
    outcome(
        binary && exact && deterministic && elapsed < Duration::from_secs(5),
        format!(
            "binary {binary}, bitwise split {exact}, eval deterministic {deterministic}, {:.2}s (< 5s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn aggregation_oracle() -> Outcome {
    let sizes = [1usize, 2, 5];
    let params = [1.0, 2.0, 3.0];
    let snaps: Vec<SharedSnapshot<f64>> =
        params.iter().map(|&p| SharedSnapshot { tensors: vec![("w".into(), Tensor::vector(vec![p]))] }).collect();
    let uploads: Vec<(usize, &SharedSnapshot<f64>)> = sizes.iter().copied().zip(&snaps).collect();
    let got = aggregate(&uploads).unwrap().tensors[0].1.data()[0];
    let total: usize = sizes.iter().sum();
    let oracle = sizes.iter().zip(params).map(|(&m, p)| m as f64 * p).sum::<f64>() / total as f64;
    outcome((got - oracle).abs() < 1e-12, format!("aggregate {got} vs weighted-mean oracle {oracle} (= 20/8)"))
}

fn loss_identities() -> Outcome {
    let mut tape = Tape::<f64>::new();
    let c = 4;
    let uniform = tape.constant(Tensor::full(&[3, c], 1.7));
    let ce = cross_entropy(&mut tape, uniform, &[0, 3, 2]).unwrap();
    let ce_gap = (tape.scalar(ce) - (c as f64).ln()).abs();

    let mut logits = Tensor::new(vec![1, c], vec![2.0, -1.0, 0.5, 3.0]).unwrap();
    let mut opt = SgdMomentum::new(1.0, 0.5).unwrap();
    for _ in 0..200 {
        let mut t = Tape::new();
        let l = t.param(logits.clone());
        let v = negative_entropy(&mut t, l).unwrap();
        t.backward(v).unwrap();
        let g = t.grad(l);
        opt.step(&mut [&mut logits], &[g]).unwrap();
    }
    let l = tape.constant(logits);
    let ent = negative_entropy(&mut tape, l).unwrap();
    let ent_gap = (tape.scalar(ent) + (c as f64).ln()).abs();

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = tape.constant(random(&[3, c], &mut rng));
    let a2 = tape.constant(tape.value(a).clone());
    let b = tape.constant(random(&[3, c], &mut rng));
    let same = cyclic_kl(&mut tape, a, a2).unwrap();
    let ab = cyclic_kl(&mut tape, a, b).unwrap();
    let ba = cyclic_kl(&mut tape, b, a).unwrap();
    let kl_self = tape.scalar(same).abs();
    let kl_asym = (tape.scalar(ab) - tape.scalar(ba)).abs();
    outcome(
        ce_gap < 1e-9 && ent_gap < 1e-6 && kl_self < 1e-12 && kl_asym < 1e-12,
        format!("|CE - ln C| {ce_gap:.1e}, |min ent + ln C| {ent_gap:.1e}, KL(a,a) {kl_self:.1e}, |KL(a,b) - KL(b,a)| {kl_asym:.1e}"),
    )
}

fn fisher_oracle() -> Outcome {
    let z = Tensor::new(vec![4, 1], vec![0.0, 2.0, 3.0, 5.0]).unwrap();
    let labels = [0, 0, 1, 1];
    let got: f64 = fisher_scores(&z, &labels).unwrap().scores[0];
    // Hand evaluation: class means 1 and 4, overall mean 2.5.
    let s_b = 2.0 * (1.0f64 - 2.5).powi(2) + 2.0 * (4.0f64 - 2.5).powi(2);
    let s_w = 2.0 * 1.0 + 2.0 * 1.0;
    let oracle = s_b / s_w;
    outcome((got - 2.25).abs() < 1e-9 && (oracle - 2.25).abs() < 1e-15, format!("F = {got} (expected {oracle})"))
}

fn benchmark(algorithm: &str, seed: u64) -> Config {
    let mut cfg = Config { seed, ..Config::default() };
    cfg.federation.algorithm = algorithm.into();
    cfg
}

fn mean_best_accuracy(log: &MetricsLog, n_clients: usize) -> f64 {
    (0..n_clients).map(|c| log.best(c, Split::Test, "accuracy").unwrap()).sum::<f64>() / n_clients as f64
}

fn mean_metric(log: &MetricsLog, metric: &str) -> f64 {
    let v: Vec<f64> = log.select(Split::Test, metric).map(|r| r.value).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn sparsity_trend() -> Outcome {
    let start = Instant::now();
    let mut hits = 0;
    let mut pairs = Vec::new();
    for seed in SEEDS {
        let (log, _) = train(&benchmark("fedavg", seed), workers()).unwrap();
        let (pre, post) = (mean_metric(&log, "sparsity_pre_agg"), mean_metric(&log, "sparsity_post_agg"));
        if post <= pre {
            hits += 1;
        }
        pairs.push(format!("{pre:.4}->{post:.4}"));
    }
    let elapsed = start.elapsed();
    outcome(
        hits >= 4 && elapsed < Duration::from_secs(180),
        format!("post <= pre in {hits}/5 seeds [{}], {:.1}s (< 180s)", pairs.join(", "), elapsed.as_secs_f64()),
    )
}

fn probe_trend() -> Outcome {
    let start = Instant::now();
    let mut hits = 0;
    let mut gaps = Vec::new();
    for seed in SEEDS {
        let cfg = benchmark("fedavg", seed);
        let ratios = probe_ratios();
        let (_, mut clients) = train(&cfg, workers()).unwrap();
        let mut mean = vec![0.0; ratios.len()];
        for c in &mut clients {
            let acc = probe_model(&mut c.model, &c.train, &c.test, &ratios, cfg.probe.k).unwrap();
            for (m, a) in mean.iter_mut().zip(acc) {
                *m += a / 4.0;
            }
        }
        let full = *mean.last().unwrap();
        let best_subset = mean[..mean.len() - 1].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if best_subset >= full {
            hits += 1;
        }
        gaps.push(format!("{:+.4}", best_subset - full));
    }
    let elapsed = start.elapsed();
    outcome(
        hits >= 4 && elapsed < Duration::from_secs(120),
        format!(
            "some rho < 1 matches full features in {hits}/5 seeds (best subset - full: [{}]), 8/20 nuisance dims, {:.1}s (< 120s)",
            gaps.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

struct Headline {
    fedpick: f64,
    fedavg: f64,
    fedbn: f64,
    elapsed: Duration,
}

fn headline_runs() -> Headline {
    let start = Instant::now();
    let mut acc = [0.0; 3];
    for seed in SEEDS {
        for (i, alg) in ["fedpick", "fedavg", "fedbn"].into_iter().enumerate() {
            let (log, clients) = train(&benchmark(alg, seed), workers()).unwrap();
            acc[i] += mean_best_accuracy(&log, clients.len()) / SEEDS.len() as f64;
        }
    }
    Headline { fedpick: acc[0], fedavg: acc[1], fedbn: acc[2], elapsed: start.elapsed() }
}

fn headline_trend(h: &Headline) -> Outcome {
    outcome(
        h.fedpick > h.fedavg && h.fedpick >= h.fedbn && h.elapsed < Duration::from_secs(600),
        format!(
            "mean best accuracy fedpick {:.4} > fedavg {:.4}, fedpick >= fedbn {:.4}, {:.1}s (< 600s)",
            h.fedpick,
            h.fedavg,
            h.fedbn,
            h.elapsed.as_secs_f64()
        ),
    )
}

fn ablation_direction(h: &Headline) -> Outcome {
    outcome(
        h.fedpick >= h.fedbn,
        format!("fedpick {:.4} >= without selection module (fedbn) {:.4}", h.fedpick, h.fedbn),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("det.toml");
    std::fs::write(&cfg_path, "seed = 11\n[federation]\nT = 5\n").unwrap();
    let run = |name: &str, workers: &str| {
        let out = dir.path().join(name);
        let result = Command::new(env!("CARGO_BIN_EXE_fedpick"))
            .args(["run", "--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap(), "--workers", workers])
            .output()
            .unwrap();
        assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
        std::fs::read(out.join(commands::METRICS_FILE)).unwrap()
    };
    let a = run("a", "1");
    let b = run("b", "1");
    let c = run("c", "4");
    outcome(a == b && a == c, format!("repeat identical {}, workers 1 vs 4 identical {}", a == b, a == c))
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 gradient fidelity", gradient_fidelity()),
        ("2 mask algebra", mask_algebra()),
        ("3 aggregation oracle", aggregation_oracle()),
        ("4 loss identities", loss_identities()),
        ("5 fisher oracle", fisher_oracle()),
        ("6 sparsity trend", sparsity_trend()),
        ("7 probe trend", probe_trend()),
    ];
    let h = headline_runs();
    results.push(("8 headline trend", headline_trend(&h)));
    results.push(("9 ablation direction", ablation_direction(&h)));
    results.push(("10 determinism", determinism()));

    let mut failed = 0;
    for (name, o) in &results {
        println!("criterion {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {}/{} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
