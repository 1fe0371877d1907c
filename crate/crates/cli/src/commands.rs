use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;

use vampcf::dataset::{self, read_split, write_split, HeldoutSet, IngestParams, SplitParams, SPLIT_FILES};
use vampcf::eval::{evaluate_model, standard_specs, top_k};
use vampcf::model::gradcheck::{check_model, grid, GradCheckOptions};
use vampcf::model::{read_checkpoint, write_checkpoint, Checkpoint, ModelConfig, ModelParams, Variant};
use vampcf::trainer::{train_with, StopReason};
use vampcf::Matrix;

use crate::config::RunConfig;
use crate::fail::Failure;
use crate::{EvalArgs, GradcheckArgs, PrepareArgs, RecommendArgs, SplitChoice, TrainArgs};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Failure::Usage(msg.into()).into()
}

/// `path` with `.partial` appended to its file name.
fn partial(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = partial(path);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming {}", tmp.display()))
}

pub fn prepare(a: PrepareArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.cfg.config.as_deref(), &a.cfg.set)?;
    let d = &mut cfg.data;
    if let Some(v) = a.min_rating {
        d.min_rating = v;
    }
    if let Some(v) = a.min_items {
        d.min_items = v;
    }
    if let Some(v) = a.heldout_users {
        d.n_heldout_users = v;
    }
    if let Some(v) = a.fold_in_fraction {
        d.fold_in_fraction = v;
    }
    cfg.validate()?;
    let d = &cfg.data;
    let ratings = a
        .ratings
        .or_else(|| d.ratings.clone())
        .ok_or_else(|| usage("no ratings file: pass --ratings or set data.ratings"))?;
    let out = a
        .out
        .or_else(|| d.split_dir.clone())
        .ok_or_else(|| usage("no output directory: pass --out or set data.split_dir"))?;

    let users = dataset::ingest(&ratings, d.min_rating, d.min_items)?;
    let params = SplitParams {
        n_heldout_users: d.n_heldout_users,
        fold_in_fraction: d.fold_in_fraction,
        seed: a.seed,
    };
    let split = dataset::split(&users, &params)?;

    let tmp = partial(&out);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).with_context(|| format!("clearing {}", tmp.display()))?;
    }
    let ingest = IngestParams {
        min_rating: d.min_rating,
        min_items: d.min_items,
    };
    write_split(&tmp, &split, Some(ingest))?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    for f in SPLIT_FILES {
        fs::rename(tmp.join(f), out.join(f)).with_context(|| format!("moving {f}"))?;
    }
    fs::remove_dir(&tmp).ok();

    let diag = &split.diagnostics;
    println!("users (N): {}", split.n_users);
    println!("items (M): {}", split.n_items());
    println!(
        "train: {} users, {} interactions",
        split.train.len(),
        split.train.iter().map(|u| u.len()).sum::<usize>()
    );
    println!(
        "validation: {} users ({} discarded)",
        split.validation.len(),
        diag.discarded_validation_users
    );
    println!("test: {} users ({} discarded)", split.test.len(), diag.discarded_test_users);
    println!(
        "out-of-vocabulary heldout interactions dropped: {}",
        diag.dropped_out_of_vocab_interactions
    );
    println!("wrote {}", out.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.cfg.config.as_deref(), &a.cfg.set)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    let split_dir = a
        .split_dir
        .or_else(|| cfg.data.split_dir.clone())
        .ok_or_else(|| usage("no split: pass --split-dir or set data.split_dir"))?;
    let split = read_split(&split_dir)?;
    let model = cfg.model.to_config(split.n_items());
    model.validate()?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let settings = serde_json::json!({ "model": model, "train": cfg.train });
    write_atomic(
        &a.out.join("train_config.json"),
        (serde_json::to_string_pretty(&settings)? + "\n").as_bytes(),
    )?;
    let log_path = a.out.join("train_log.jsonl");
    let log_tmp = partial(&log_path);
    let mut log = BufWriter::new(File::create(&log_tmp).with_context(|| format!("creating {}", log_tmp.display()))?);
    let mut log_err = None;
    let outcome = train_with(&split, &model, &cfg.train, |e| {
        let line = serde_json::to_string(e).expect("log entry serializes");
        if let Err(err) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            log_err.get_or_insert(err);
        }
        eprintln!(
            "epoch {:>3}  elbo {:>10.4}  beta {:.3}  {} {:.5}",
            e.epoch, e.mean_elbo, e.beta, cfg.train.eval_metric, e.val_metric
        );
    })?;
    if let Some(err) = log_err {
        return Err(err).context("writing training log");
    }
    drop(log);
    fs::rename(&log_tmp, &log_path).context("finalizing training log")?;

    let ckpt = Checkpoint {
        params: outcome.best.clone(),
        vocab_fingerprint: split.fingerprint(),
    };
    let ckpt_path = a.out.join("model.ckpt");
    write_checkpoint(&partial(&ckpt_path), &ckpt)?;
    fs::rename(partial(&ckpt_path), &ckpt_path).context("finalizing checkpoint")?;

    match (&outcome.best_epoch, &outcome.best_metric) {
        (Some(epoch), Some(metric)) => println!(
            "best validation {}: {metric:.5} (epoch {epoch} of {})",
            cfg.train.eval_metric,
            outcome.log.len()
        ),
        _ => println!("no epoch completed"),
    }
    println!("wrote {}", ckpt_path.display());
    if let StopReason::NonFinite(msg) = outcome.stop {
        return Err(Failure::Numerical(format!(
            "training aborted: {msg}; best checkpoint so far retained"
        ))
        .into());
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    if a.ks.is_empty() || a.ks.contains(&0) {
        return Err(usage("--ks needs positive cutoffs"));
    }
    let ckpt = read_checkpoint(&a.checkpoint)?;
    let split = read_split(&a.split_dir)?;
    let which = match a.split {
        SplitChoice::Test => HeldoutSet::Test,
        SplitChoice::Validation => HeldoutSet::Validation,
    };
    let (report, users) = evaluate_model(
        &split,
        which,
        &ckpt.params,
        &ckpt.vocab_fingerprint,
        &standard_specs(&a.ks),
    )?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_atomic(&a.out.join("report.json"), report.to_json().as_bytes())?;
    let table = report.to_table();
    write_atomic(&a.out.join("report.txt"), table.as_bytes())?;
    if a.per_user {
        write_atomic(&a.out.join("per_user.csv"), report.per_user_csv(&users).as_bytes())?;
    }
    print!("{table}");
    Ok(())
}

pub fn recommend(a: RecommendArgs) -> Result<()> {
    let ckpt = read_checkpoint(&a.checkpoint)?;
    let split = read_split(&a.split_dir)?;
    if split.fingerprint() != ckpt.vocab_fingerprint {
        return Err(vampcf::Error::VocabMismatch {
            model: ckpt.vocab_fingerprint,
            data: split.fingerprint(),
        }
        .into());
    }
    let mut ids = a.items.clone();
    if let Some(path) = &a.items_file {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        ids.extend(text.lines().map(str::to_string));
    }
    let lookup: HashMap<&str, usize> = split.vocab.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut history = Vec::new();
    for id in ids.iter().map(|s| s.trim()).filter(|s| !s.is_empty()) {
        match lookup.get(id) {
            Some(&i) => history.push(i),
            None => eprintln!("warning: unknown item {id:?} ignored"),
        }
    }
    history.sort_unstable();
    history.dedup();
    if history.is_empty() {
        return Err(Failure::Data("no known items in the interaction list".into()).into());
    }
    let x = dataset::to_dense(&history, split.n_items())?;
    let scores = ckpt.params.scores(&x)?;
    for i in top_k(scores.row(0), &history, a.top_n) {
        println!("{}\t{:.6}", split.vocab[i], scores.get(0, i));
    }
    Ok(())
}

/// Tiny model used by the gradient check.
pub fn gradcheck_base() -> ModelConfig {
    ModelConfig {
        hidden: 16,
        latent_z1: 4,
        latent_z2: 4,
        n_pseudo: 3,
        depth: 2,
        ..ModelConfig::new(30, Variant::MultiVae)
    }
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    if !(1e-6..=1e-3).contains(&a.eps) {
        return Err(usage(format!("--eps {} outside [1e-6, 1e-3]", a.eps)));
    }
    let start = Instant::now();
    let mut failed = Vec::new();
    println!("{:<40}  {:>12}  {:<32}  result", "cell", "max_rel_err", "worst tensor");
    for (i, cfg) in grid(&gradcheck_base()).into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        rng.set_stream(i as u64);
        let x = Matrix::from_fn(4, cfg.n_items, |_, _| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
        let params = ModelParams::init(cfg, None, &mut rng)?;
        let corrupt = a
            .corrupt
            .as_ref()
            .filter(|name| params.net.named().iter().any(|(n, _)| n == *name))
            .map(|name| (name.clone(), 0.01));
        let opts = GradCheckOptions {
            noise_seed: a.seed,
            eps: a.eps,
            corrupt,
            ..Default::default()
        };
        let check = check_model(&params, &x, &opts)?;
        let pass = check.max_rel_err < a.tolerance;
        println!(
            "{:<40}  {:>12.3e}  {:<32}  {}",
            check.cell,
            check.max_rel_err,
            check.worst().map_or("-", |t| t.name.as_str()),
            if pass { "PASS" } else { "FAIL" }
        );
        if !pass {
            failed.push(check.cell);
        }
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Numerical(format!("gradient check failed for: {}", failed.join(", "))).into())
    }
}
