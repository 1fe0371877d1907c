//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any gated criterion fails. Criterion 7 is reported only.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use vampcf::dataset::synthetic::{ratings_csv, ArchetypeConfig};
use vampcf::dataset::{split, DatasetSplit, HeldoutSet, SplitParams};
use vampcf::eval::{evaluate, ndcg_at_k, recall_at_k, MetricSpec, Popularity};
use vampcf::model::gradcheck::grid;
use vampcf::model::{
    kl_diag_gauss, log_lik_multinomial, GaussianParams, Hierarchy, ModelConfig, ModelParams, Mode, PriorKind,
    Variant,
};
use vampcf::trainer::{train, Adam, TrainConfig};
use vampcf::Matrix;

const BIN: &str = env!("CARGO_BIN_EXE_vampcf");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

// ---------------------------------------------------------------- 1

fn gradients() -> Outcome {
    let start = Instant::now();
    let out = run(&["gradcheck", "--seed", "0"]);
    let secs = start.elapsed().as_secs_f64();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let rows: Vec<&str> = stdout.lines().filter(|l| l.contains('/')).collect();
    let passed = rows.iter().filter(|l| l.ends_with("PASS")).count();
    let worst = rows
        .iter()
        .filter_map(|l| l.split_whitespace().nth(1)?.parse::<f64>().ok())
        .fold(0.0, f64::max);

    let neg = run(&["gradcheck", "--corrupt", "decoder.0.linear.weight"]);
    let neg_err = String::from_utf8_lossy(&neg.stderr);
    let caught = neg.status.code() == Some(3) && neg_err.contains("standard/flat/ungated/multinomial");

    let pass = out.status.success() && rows.len() == 12 && passed == 12 && secs < 120.0 && caught;
    outcome(
        pass,
        format!(
            "{passed}/{} cells below 1e-4 (worst {worst:.2e}), {secs:.1}s, corrupted gradient caught: {caught}",
            rows.len()
        ),
    )
}

// ---------------------------------------------------------------- 2

fn brute_ranking(scores: &[f64], mask: &[usize]) -> Vec<usize> {
    let mut items: Vec<usize> = (0..scores.len()).filter(|i| !mask.contains(i)).collect();
    // Insertion sort by (score desc, index asc).
    for i in 1..items.len() {
        let mut j = i;
        while j > 0 {
            let (a, b) = (items[j - 1], items[j]);
            let before = scores[b] > scores[a] || (scores[b] == scores[a] && b < a);
            if !before {
                break;
            }
            items.swap(j - 1, j);
            j -= 1;
        }
    }
    items
}

fn brute_metrics(scores: &[f64], heldout: &[usize], mask: &[usize], k: usize) -> (f64, f64) {
    let ranking = brute_ranking(scores, mask);
    let mut dcg = 0.0;
    let mut hits = 0usize;
    for (pos, item) in ranking.iter().take(k).enumerate() {
        if heldout.contains(item) {
            dcg += 1.0 / ((pos + 2) as f64).log2();
            hits += 1;
        }
    }
    let ideal = k.min(heldout.len());
    let idcg: f64 = (0..ideal).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    (dcg / idcg, hits as f64 / ideal as f64)
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for _ in 0..1000 {
        let m = rng.random_range(2..=20);
        // Coarse scores so that ties are common.
        let scores: Vec<f64> = (0..m).map(|_| rng.random_range(0..6) as f64).collect();
        let mut heldout = Vec::new();
        let mut mask = Vec::new();
        for i in 0..m {
            match rng.random_range(0..4) {
                0 => heldout.push(i),
                1 => mask.push(i),
                _ => {}
            }
        }
        if heldout.is_empty() {
            let i = rng.random_range(0..m);
            mask.retain(|&j| j != i);
            heldout.push(i);
        }
        let k = rng.random_range(1..=10);
        let (n_ref, r_ref) = brute_metrics(&scores, &heldout, &mask, k);
        match (
            ndcg_at_k(&scores, &heldout, &mask, k),
            recall_at_k(&scores, &heldout, &mask, k),
        ) {
            (Ok(Some(n)), Ok(Some(r))) => {
                worst = worst.max((n - n_ref).abs()).max((r - r_ref).abs());
            }
            _ => ok = false,
        }
    }
    outcome(ok && worst < 1e-12, format!("1000 instances, max difference {worst:.1e}"))
}

// ---------------------------------------------------------------- 3

fn kl_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 10_000;
    let d = 3;
    let rand_m = |rng: &mut ChaCha8Rng, scale: f64| Matrix::from_fn(n, d, |_, _| scale * rng.random_range(-1.0..1.0));
    let q = GaussianParams::new(rand_m(&mut rng, 3.0), rand_m(&mut rng, 4.0)).unwrap();
    let p = GaussianParams::new(rand_m(&mut rng, 3.0), rand_m(&mut rng, 4.0)).unwrap();
    let kl = kl_diag_gauss(&q, &p).unwrap();
    let min_kl = kl.iter().cloned().fold(f64::INFINITY, f64::min);
    let self_kl = kl_diag_gauss(&q, &q).unwrap().iter().fold(0.0f64, |a, v| a.max(v.abs()));

    let one = GaussianParams::new(Matrix::filled(1, 1, 1.0), Matrix::zeros(1, 1)).unwrap();
    let closed = kl_diag_gauss(&one, &GaussianParams::standard(1, 1)).unwrap()[0];
    // log N(z; 1, 1) - log N(z; 0, 1) = z - 1/2.
    let draws = 1_000_000;
    let mc = (0..draws)
        .map(|_| {
            let z = 1.0 + rng.sample::<f64, _>(StandardNormal);
            (z * z - (z - 1.0) * (z - 1.0)) / 2.0
        })
        .sum::<f64>()
        / draws as f64;

    let (mass_err, agg_err) = vamp_identities();
    let pass = min_kl >= 0.0
        && self_kl < 1e-12
        && (closed - 0.5).abs() < 1e-12
        && (mc - 0.5).abs() < 0.01
        && mass_err < 1e-4
        && agg_err < 1e-12;
    outcome(
        pass,
        format!(
            "min KL {min_kl:.3e}, KL(q||q) {self_kl:.1e}, closed {closed:.15}, MC {mc:.5}, \
             1-D mass error {mass_err:.1e}, K=N aggregate error {agg_err:.1e}"
        ),
    )
}

/// Returns the worst |integral - 1| of 1-D VampPrior densities and the
/// worst log-density gap between a K=N VampPrior and the aggregated
/// posterior of the same N users.
fn vamp_identities() -> (f64, f64) {
    let mut mass_err: f64 = 0.0;
    let step = 1e-3;
    let grid_n = 60_001;
    let z = Matrix::from_fn(grid_n, 1, |r, _| -30.0 + r as f64 * step);
    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(30 + seed);
        let cfg = ModelConfig {
            hidden: 8,
            latent_z2: 1,
            n_pseudo: 3,
            ..ModelConfig::new(12, Variant::Vamp)
        };
        let params = ModelParams::init(cfg, None, &mut rng).unwrap();
        let dens: Vec<f64> = params.vamp_log_density(&z).unwrap().iter().map(|v| v.exp()).collect();
        let integral = step * (dens.iter().sum::<f64>() - 0.5 * (dens[0] + dens[grid_n - 1]));
        mass_err = mass_err.max((integral - 1.0).abs());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let n_users = 6;
    let cfg = ModelConfig {
        hidden: 10,
        latent_z2: 3,
        n_pseudo: n_users,
        ..ModelConfig::new(15, Variant::Vamp)
    };
    let mut params = ModelParams::init(cfg, None, &mut rng).unwrap();
    let x = Matrix::from_fn(n_users, 15, |_, _| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
    params.net.pseudo_inputs = Some(x.clone());
    let q = params.encode_z2(&x).unwrap();
    let pts = Matrix::from_fn(25, 3, |_, _| rng.random_range(-2.0..2.0));
    let model = params.vamp_log_density(&pts).unwrap();
    let mut agg_err: f64 = 0.0;
    for (r, &got) in model.iter().enumerate() {
        let comps: Vec<f64> = (0..n_users)
            .map(|u| {
                (0..3)
                    .map(|j| {
                        let (m, lv) = (q.mean.get(u, j), q.log_var.get(u, j));
                        let diff = pts.get(r, j) - m;
                        -0.5 * ((2.0 * std::f64::consts::PI).ln() + lv + diff * diff / lv.exp())
                    })
                    .sum::<f64>()
            })
            .collect();
        let top = comps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let oracle = top + (comps.iter().map(|c| (c - top).exp()).sum::<f64>() / n_users as f64).ln();
        agg_err = agg_err.max((got - oracle).abs());
    }
    (mass_err, agg_err)
}

// ---------------------------------------------------------------- 4

fn likelihood_values() -> Outcome {
    let x = Matrix::from_rows(&[vec![1.0, 1.0, 0.0, 0.0]]).unwrap();
    let uniform = log_lik_multinomial(&Matrix::zeros(1, 4), &x).unwrap()[0];
    let skewed_logits = Matrix::from_rows(&[vec![3f64.ln(), 0.0, 0.0, 0.0]]).unwrap();
    let skewed = log_lik_multinomial(&skewed_logits, &x).unwrap()[0];
    let pass = (uniform + 2.772589).abs() < 1e-6
        && (uniform - 2.0 * 0.25f64.ln()).abs() < 1e-9
        && (skewed - (0.5f64.ln() + (1.0f64 / 6.0).ln())).abs() < 1e-9
        && (skewed + 2.484907).abs() < 1e-6;
    outcome(pass, format!("uniform {uniform:.9}, [ln3,0,0,0] {skewed:.9}"))
}

// ---------------------------------------------------------------- 5

fn overfit() -> Outcome {
    let start = Instant::now();
    let gen = ArchetypeConfig {
        n_users: 8,
        ..ArchetypeConfig::default()
    };
    let users = gen.generate(5);
    let m = gen.n_items;
    let x = Matrix::from_fn(8, m, |r, c| {
        let id = vampcf::dataset::synthetic::item_id(c);
        if users[r].items.contains(&id) {
            1.0
        } else {
            0.0
        }
    });
    // All probability mass spread evenly over each user's own items.
    let ceiling: f64 = users
        .iter()
        .map(|u| {
            let n = u.items.len() as f64;
            -n * n.ln()
        })
        .sum::<f64>()
        / 8.0;

    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for variant in [Variant::MultiVae, Variant::VampGated, Variant::HVampGated] {
        let cfg = ModelConfig {
            hidden: 64,
            latent_z1: 16,
            latent_z2: 16,
            n_pseudo: 8,
            ..ModelConfig::new(m, variant)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let mut params = ModelParams::init(cfg, None, &mut rng).unwrap();
        let mut opt = Adam::new(&params.net);
        for _ in 0..500 {
            let (_, grads) = params.elbo_with_grads(&x, 0.0, Mode::Eval, &mut rng).unwrap();
            opt.update(&mut params.net, &grads, 1e-2).unwrap();
        }
        let recon = params.elbo(&x, 0.0, Mode::Eval, &mut rng).unwrap().recon;
        let gap = (recon - ceiling).abs() / ceiling.abs();
        worst = worst.max(gap);
        parts.push(format!("{} {:.2}%", variant.name(), 100.0 * gap));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 0.02 && secs < 60.0,
        format!("ceiling {ceiling:.4}; gap {}; {secs:.1}s", parts.join(", ")),
    )
}

// ---------------------------------------------------------------- 6, 7

fn archetype_split(seed: u64) -> DatasetSplit {
    let users = ArchetypeConfig::default().generate(seed);
    split(
        &users,
        &SplitParams {
            n_heldout_users: 100,
            fold_in_fraction: 0.8,
            seed,
        },
    )
    .unwrap()
}

fn desk_model(n_items: usize, base: ModelConfig) -> ModelConfig {
    ModelConfig {
        n_items,
        hidden: 100,
        latent_z1: 32,
        latent_z2: 32,
        n_pseudo: 100,
        depth: 1,
        ..base
    }
}

fn desk_train(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 50,
        max_epochs: 50,
        learning_rate: 2e-3,
        seed,
        eval_metric: "ndcg@10".parse().unwrap(),
        ..TrainConfig::default()
    }
}

fn test_ndcg10(split: &DatasetSplit, scorer: &dyn vampcf::eval::Scorer) -> f64 {
    let spec: MetricSpec = "ndcg@10".parse().unwrap();
    evaluate(split.heldout(HeldoutSet::Test), scorer, &[spec]).unwrap().0.rows[0].mean
}

fn learning_signal() -> Outcome {
    let split = archetype_split(0);
    let pop = test_ndcg10(&split, &Popularity::fit(&split.train, split.n_items()).unwrap());
    let mut lines = Vec::new();
    let mut pass = true;
    for cell in grid(&ModelConfig::new(split.n_items(), Variant::MultiVae)) {
        let start = Instant::now();
        let cfg = desk_model(split.n_items(), cell);
        let out = train(&split, &cfg, &desk_train(0)).unwrap();
        let ndcg = test_ndcg10(&split, &out.best);
        let secs = start.elapsed().as_secs_f64();
        let ok = ndcg >= 1.2 * pop && secs < 600.0;
        pass &= ok;
        lines.push(format!(
            "    {} {:<38} ndcg@10 {ndcg:.4} ({:.2}x) {secs:.0}s",
            if ok { "ok  " } else { "FAIL" },
            cfg.cell_name(),
            ndcg / pop
        ));
    }
    outcome(pass, format!("popularity ndcg@10 {pop:.4}\n{}", lines.join("\n")))
}

fn ordering() -> Outcome {
    let mut means = [0.0; 3];
    let mut lines = Vec::new();
    let seeds = 10;
    let variants = [Variant::MultiVae, Variant::Vamp, Variant::HVampGated];
    for seed in 0..seeds {
        let split = archetype_split(100 + seed);
        let mut row = [0.0; 3];
        for (i, v) in variants.iter().enumerate() {
            let cfg = desk_model(split.n_items(), ModelConfig::new(split.n_items(), *v));
            let out = train(&split, &cfg, &desk_train(seed)).unwrap();
            row[i] = test_ndcg10(&split, &out.best);
            means[i] += row[i] / seeds as f64;
        }
        let mut notes = Vec::new();
        if row[1] < row[0] {
            notes.push("Vamp < Multi-VAE");
        }
        if row[2] < row[0] {
            notes.push("H+Vamp (Gated) < Multi-VAE");
        }
        lines.push(format!(
            "    seed {:>3}: Multi-VAE {:.4}  Vamp {:.4}  H+Vamp (Gated) {:.4}  {}",
            100 + seed,
            row[0],
            row[1],
            row[2],
            notes.join(", ")
        ));
    }
    let pass = means[1] >= means[0] && means[2] >= means[0];
    outcome(
        pass,
        format!(
            "mean ndcg@10 over {seeds} seeds: Multi-VAE {:.4}, Vamp {:.4}, H+Vamp (Gated) {:.4}\n{}",
            means[0],
            means[1],
            means[2],
            lines.join("\n")
        ),
    )
}

// ---------------------------------------------------------------- 8

fn pipeline(root: &Path, ratings: &Path) -> Result<(), String> {
    let split_dir = root.join("split");
    let model_dir = root.join("model");
    let report_dir = root.join("report");
    let ckpt = model_dir.join("model.ckpt");
    let steps: [Vec<&str>; 3] = [
        vec![
            "prepare",
            "--ratings",
            ratings.to_str().unwrap(),
            "--out",
            split_dir.to_str().unwrap(),
            "--heldout-users",
            "40",
            "--seed",
            "7",
        ],
        vec![
            "train",
            "--split-dir",
            split_dir.to_str().unwrap(),
            "--out",
            model_dir.to_str().unwrap(),
            "--seed",
            "7",
            "--set",
            "train.max_epochs=4",
            "--set",
            "train.batch_size=64",
            "--set",
            "model.hidden=32",
            "--set",
            "model.D_z1=8",
            "--set",
            "model.D_z2=8",
            "--set",
            "model.K=20",
        ],
        vec![
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--split-dir",
            split_dir.to_str().unwrap(),
            "--out",
            report_dir.to_str().unwrap(),
            "--per-user",
        ],
    ];
    for args in &steps {
        let out = run(args);
        if !out.status.success() {
            return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let gen = ArchetypeConfig {
        n_users: 400,
        n_items: 120,
        ..ArchetypeConfig::default()
    };
    let ratings = tmp.path().join("ratings.csv");
    fs::write(&ratings, ratings_csv(&gen.generate(8), gen.n_items)).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for root in [&a, &b] {
        if let Err(e) = pipeline(root, &ratings) {
            return outcome(false, e);
        }
    }
    let mut files: Vec<String> = fs::read_dir(a.join("split"))
        .unwrap()
        .map(|e| format!("split/{}", e.unwrap().file_name().to_string_lossy()))
        .collect();
    files.sort();
    files.extend(
        ["model/model.ckpt", "model/train_config.json", "report/report.json", "report/report.txt", "report/per_user.csv"]
            .map(String::from),
    );
    let differing: Vec<&String> = files
        .iter()
        .filter(|f| match (fs::read(a.join(f)), fs::read(b.join(f))) {
            (Ok(x), Ok(y)) => x != y,
            _ => true,
        })
        .collect();
    outcome(
        differing.is_empty(),
        format!("{} artifacts compared, differing: {differing:?}", files.len()),
    )
}

// ---------------------------------------------------------------- 9

fn decomposition() -> Outcome {
    let mut worst_z: f64 = 0.0;
    let mut failures = Vec::new();
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let cfg = ModelConfig {
            prior: if seed % 2 == 0 { PriorKind::Standard } else { PriorKind::Vamp },
            hierarchy: Hierarchy::Flat,
            gated: seed % 4 >= 2,
            hidden: 12,
            latent_z2: 4,
            n_pseudo: 5,
            ..ModelConfig::new(20, Variant::MultiVae)
        };
        let params = ModelParams::init(cfg, None, &mut rng).unwrap();
        let x = Matrix::from_fn(6, 20, |_, _| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
        let dec = params.elbo_decomposition(&x, 400, &mut rng).unwrap();
        // The ELBO's own KL term: closed form for the standard prior, a
        // single-draw estimate for the VampPrior, so average repeated draws.
        let reps = if params.config.vamp() { 400 } else { 1 };
        let kls: Vec<f64> = (0..reps)
            .map(|_| params.elbo(&x, 1.0, Mode::Eval, &mut rng).unwrap().kl_z2)
            .collect();
        let kl = kls.iter().sum::<f64>() / reps as f64;
        let kl_se = if reps > 1 {
            (kls.iter().map(|v| (v - kl).powi(2)).sum::<f64>() / ((reps - 1) * reps) as f64).sqrt()
        } else {
            0.0
        };
        let se = (dec.cross_entropy_std_err.powi(2) + kl_se.powi(2)).sqrt();
        let z = ((dec.posterior_entropy - dec.cross_entropy) + kl).abs() / se;
        worst_z = worst_z.max(z);
        if z > 3.0 {
            failures.push(format!("seed {} ({})", 900 + seed, params.config.cell_name()));
        }
    }
    outcome(
        failures.is_empty(),
        format!("50 flat models, worst deviation {worst_z:.2} SE; outside 3 SE: {failures:?}"),
    )
}

type Criterion = (&'static str, bool, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 gradient correctness", true, gradients),
        ("2 metric oracle equivalence", true, metric_oracle),
        ("3 KL and prior identities", true, kl_identities),
        ("4 likelihood spot values", true, likelihood_values),
        ("5 single-batch overfit", true, overfit),
        ("6 end-to-end learning signal", true, learning_signal),
        ("7 model ordering (soft)", false, ordering),
        ("8 determinism", true, determinism),
        ("9 ELBO decomposition consistency", true, decomposition),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, gated, check) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.starts_with(o.as_str())) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        let tag = match (o.pass, gated) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "SOFT-FAIL",
        };
        println!(
            "{tag} criterion {name} [{:.1}s]: {}",
            start.elapsed().as_secs_f64(),
            o.detail
        );
        failed += (!o.pass && gated) as usize;
    }
    if failed > 0 {
        println!("{failed} gated criteria failed");
        std::process::exit(1);
    }
}
