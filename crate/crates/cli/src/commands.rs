use std::path::{Path, PathBuf};

use egip_core::data::{load_manifest, merge_nh, split_by_listener, synth_generate, two_clips_augment, Manifest};
use egip_core::tensor::GradCheckConfig;
use egip_core::train::{evaluate, layer_sweep, train_ensemble, write_csv, EvalReport, TrainedEnsemble};
use egip_core::verify::full_suite;
use egip_core::{Error, Result};
use serde::Serialize;

use crate::config::{resolve_out_dir, Invocation, RunConfig, EFFECTIVE_CONFIG};
use crate::{AugmentArgs, Cli, Command, EvaluateArgs, GradcheckArgs, LayerSweepArgs, PredictArgs, SynthGenArgs, TrainArgs};

const DEFAULT_OUT: &str = "egip-out";
const HOLDOUT_DEFAULT: usize = 3;

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::config("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(format!("cannot size thread pool: {e}")))?;
    }
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match &cli.command {
        Command::SynthGen(a) => synth_gen(cli, cfg, a),
        Command::Augment(a) => augment(cli, cfg, a),
        Command::Train(a) => train(cli, cfg, a),
        Command::Predict(a) => predict(cli, cfg, a),
        Command::Evaluate(a) => evaluate_cmd(cli, cfg, a),
        Command::LayerSweep(a) => sweep(cli, cfg, a),
        Command::Gradcheck(a) => gradcheck(cli, cfg, a),
    }
}

fn set<T: Copy>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

/// Validate the merged config, create the output directory and echo the
/// effective config into it.
fn prepare(cli: &Cli, mut cfg: RunConfig, command: &str) -> Result<(RunConfig, PathBuf)> {
    cfg.validate()?;
    let out = resolve_out_dir(cli.out.as_deref(), &cfg, DEFAULT_OUT);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    cfg.invocation = Some(Invocation {
        command: command.to_string(),
        args: std::env::args().skip(1).collect(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    });
    let path = out.join(EFFECTIVE_CONFIG);
    std::fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))?;
    cfg.invocation = None;
    Ok((cfg, out))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn synth_gen(cli: &Cli, mut cfg: RunConfig, a: &SynthGenArgs) -> Result<()> {
    set(&mut cfg.synth.n_listeners, a.listeners);
    set(&mut cfg.synth.clips_per_listener, a.clips_per_listener);
    set(&mut cfg.synth.seed, a.seed);
    set(&mut cfg.synth.duration_s, a.duration);
    if !a.holdout.is_empty() {
        cfg.synth.holdout_listeners = a.holdout.clone();
    }
    let (cfg, out) = prepare(cli, cfg, "synth-gen")?;
    let m = synth_generate(&cfg.synth.corpus(), &out)?;
    let holdout = if cfg.synth.holdout_listeners.is_empty() {
        let ids = m.listeners();
        let k = HOLDOUT_DEFAULT.min(ids.len().saturating_sub(1));
        ids[ids.len() - k..].to_vec()
    } else {
        cfg.synth.holdout_listeners.clone()
    };
    let (train, test) = split_by_listener(&m, &holdout)?;
    train.save(&out.join("train.jsonl"))?;
    test.save(&out.join("test.jsonl"))?;
    println!(
        "wrote {} clips ({} train, {} test; held out {}) to {}",
        m.len(),
        train.len(),
        test.len(),
        holdout.join(","),
        out.display()
    );
    Ok(())
}

fn augment(cli: &Cli, mut cfg: RunConfig, a: &AugmentArgs) -> Result<()> {
    set(&mut cfg.augment.per_listener, a.per_listener);
    set(&mut cfg.augment.silence_s, a.silence);
    set(&mut cfg.augment.seed, a.seed);
    if a.no_two_clips && a.nh.is_none() {
        return Err(Error::config("--no-two-clips without --nh leaves nothing to do"));
    }
    let (cfg, out) = prepare(cli, cfg, "augment")?;
    let m = load_manifest(&a.manifest)?;
    let before = m.len();
    let mut m = if a.no_two_clips {
        m
    } else {
        two_clips_augment(&m, cfg.augment.per_listener, cfg.augment.silence_s, cfg.augment.seed)?
    };
    let added = m.len() - before;
    if let Some(nh) = &a.nh {
        m = merge_nh(&m, &load_manifest(nh)?)?;
    }
    let path = out.join("augmented.jsonl");
    m.save(&path)?;
    println!("{} clips ({} from 2-clips) written to {}", m.len(), added, path.display());
    Ok(())
}

fn report(r: &EvalReport, out: &Path) -> Result<()> {
    r.write_json(&out.join("report.json"))?;
    r.write_csv(&out.join("report.csv"))?;
    let ncc = r.ncc.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"));
    println!("{}: n={} rmse={:.4} ncc={}", r.metadata.dataset, r.n, r.rmse, ncc);
    if !r.failures.is_empty() {
        println!("{} clip(s) failed; see report.json", r.failures.len());
    }
    Ok(())
}

fn train(cli: &Cli, mut cfg: RunConfig, a: &TrainArgs) -> Result<()> {
    let t = &mut cfg.train;
    set(&mut t.epochs, a.epochs);
    set(&mut t.batch_size, a.batch_size);
    set(&mut t.lr, a.lr);
    set(&mut t.seed, a.seed);
    set(&mut t.n_folds, a.folds);
    set(&mut t.huber_delta, a.huber_delta);
    set(&mut cfg.model.sfm_layer_index, a.layer);
    cfg.enhancers = cfg.pick_enhancers(&a.enhancers)?;
    let (cfg, out) = prepare(cli, cfg, "train")?;
    let m = load_manifest(&a.manifest)?;
    let e = train_ensemble(&m, &cfg.model, &cfg.frontend, &cfg.enhancers, &cfg.train)?;
    e.save(&out)?;
    for mem in &e.members {
        let r = &mem.record;
        println!("{}/fold{}: best epoch {} val rmse {:.4}", r.enhancer, r.fold, r.best_epoch, r.val_rmse);
    }
    if let Some(test) = &a.test {
        report(&evaluate(&e, &load_manifest(test)?)?, &out)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    clip_id: &'a str,
    prediction: f64,
}

fn predict(cli: &Cli, cfg: RunConfig, a: &PredictArgs) -> Result<()> {
    let (_, out) = prepare(cli, cfg, "predict")?;
    let e = TrainedEnsemble::load(&a.ensemble)?;
    let m = load_manifest(&a.manifest)?;
    let m: Manifest = if a.clips.is_empty() {
        m
    } else {
        if let Some(id) = a.clips.iter().find(|id| !m.contains(id)) {
            return Err(Error::contract(format!("clip {id} is not in {}", a.manifest.display())));
        }
        m.subset(&a.clips)?
    };
    let r = evaluate(&e, &m)?;
    let rows: Vec<PredictionRow> = r
        .rows
        .iter()
        .map(|row| PredictionRow {
            clip_id: &row.clip_id,
            prediction: row.prediction,
        })
        .collect();
    let path = out.join("predictions.csv");
    write_csv(&path, &rows)?;
    for f in &r.failures {
        log::warn!("{}: {} ({})", f.clip_id, f.message, f.class);
    }
    println!("{} prediction(s) written to {}", rows.len(), path.display());
    Ok(())
}

fn evaluate_cmd(cli: &Cli, cfg: RunConfig, a: &EvaluateArgs) -> Result<()> {
    let (_, out) = prepare(cli, cfg, "evaluate")?;
    let e = TrainedEnsemble::load(&a.ensemble)?;
    let m = load_manifest(&a.manifest)?;
    report(&evaluate(&e, &m)?, &out)
}

fn sweep(cli: &Cli, mut cfg: RunConfig, a: &LayerSweepArgs) -> Result<()> {
    let t = &mut cfg.train;
    set(&mut t.sweep_epochs, a.epochs);
    set(&mut t.seed, a.seed);
    set(&mut t.n_folds, a.folds);
    set(&mut t.lr, a.lr);
    let enhancer = cfg.enhancer(&a.enhancer)?;
    let (cfg, out) = prepare(cli, cfg, "layer-sweep")?;
    let m = load_manifest(&a.manifest)?;
    let table = layer_sweep(&m, &cfg.model, &cfg.frontend, &enhancer, &cfg.train)?;
    write_json(&out.join("sweep.json"), &table)?;
    write_csv(&out.join("sweep.csv"), &table.rows)?;
    println!("layer  val_rmse  best_epoch");
    for r in &table.rows {
        println!("{:>5}  {:>8.4}  {:>10}", r.layer, r.val_rmse, r.best_epoch);
    }
    println!("best layer: {}", table.best_layer);
    Ok(())
}

fn gradcheck(cli: &Cli, cfg: RunConfig, a: &GradcheckArgs) -> Result<()> {
    prepare(cli, cfg, "gradcheck")?;
    let gc = GradCheckConfig::default();
    let suite = full_suite(a.seed, gc)?;
    let worst = suite.worst().map_or("-", |c| c.name.as_str());
    println!(
        "{} cases, max relative error {:.3e} (worst: {worst}, tolerance {:.0e})",
        suite.cases.len(),
        suite.max_rel_err(),
        gc.tol
    );
    if suite.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = suite.cases.iter().filter(|c| !c.report.passed).map(|c| c.name.as_str()).collect();
        Err(Error::Numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}
