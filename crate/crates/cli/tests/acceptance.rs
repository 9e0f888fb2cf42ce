//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Extra arguments are substring filters on criterion names.

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use egip_core::data::*;
use egip_core::model::{BinauralInput, ModelConfig, PredictorModel, LEFT, RIGHT};
use egip_core::nn::Ctx;
use egip_core::signal::{write_feature_file, EnhancerSpec, ToySfmConfig, SAMPLE_RATE};
use egip_core::tensor::{GradCheckConfig, Graph, Tensor};
use egip_core::train::*;
use egip_core::verify::{full_suite, random_input};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T>(r: egip_core::Result<T>) -> Result<T, String> {
    r.map_err(|e| format!("error[{}]: {e}", e.class()))
}

fn single_thread<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

fn egip(args: &[&str], out: &Path) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_egip"))
        .args(args)
        .env("EGIP_OUT_DIR", out)
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!("egip {} failed: {}", args.join(" "), String::from_utf8_lossy(&o.stderr).trim()));
    }
    Ok(String::from_utf8_lossy(&o.stdout).into_owned())
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let suite = ok(full_suite(2024, GradCheckConfig::default()))?;
    let secs = t.elapsed().as_secs_f64();
    let worst = suite.worst().map(|c| c.name.clone()).unwrap_or_default();
    let detail = format!("{} cases, max rel err {:.2e} ({worst}), {secs:.1}s", suite.cases.len(), suite.max_rel_err());
    ensure!(suite.cases.len() >= 100, "{detail}");
    ensure!(suite.passed() && suite.max_rel_err() <= 1e-4, "{detail}");
    ensure!(secs < 120.0, "{detail}");
    Ok(detail)
}

fn shape_suite() -> Outcome {
    let cfg = ModelConfig::default();
    let model = ok(PredictorModel::<f32>::new(cfg.clone(), 5))?;
    let x: BinauralInput<f32> = random_input(&cfg, &mut ChaCha8Rng::seed_from_u64(3), 60).cast();
    let mut g = Graph::new();
    let vars = model.params.bind(&mut g, false);
    let mut ctx = Ctx::new(&mut g, &vars);
    let t = ok(model.temporal(&mut ctx, &x))?;
    let z = [
        ok(model.fuse_audiogram(&mut ctx, LEFT, t[LEFT], &x.audiogram))?,
        ok(model.fuse_audiogram(&mut ctx, RIGHT, t[RIGHT], &x.audiogram))?,
    ];
    let r = ok(model.layer_stage(&mut ctx, z[LEFT], z[RIGHT]))?;
    let s = ok(model.head_score(&mut ctx, r[LEFT], r[RIGHT]))?;
    let shapes = [t[LEFT], z[LEFT], r[LEFT], s].map(|v| ctx.g.shape(v).to_vec());
    ensure!(
        shapes == [vec![1, 384], vec![2, 384], vec![1, 384], vec![1, 1]],
        "shapes {shapes:?}"
    );
    let score = g.data(s)[0];
    ensure!((0.0..=100.0).contains(&score), "score {score}");

    let desk = ModelConfig::desk();
    let mut zero = ok(PredictorModel::<f32>::new(desk.clone(), 9))?;
    let head = zero.head.clone();
    for id in [head.weight, head.bias] {
        zero.params.get_mut(id).data_mut().fill(0.0);
    }
    for seed in 0..10 {
        let x = random_input(&desk, &mut ChaCha8Rng::seed_from_u64(seed), 50).cast();
        let v = ok(zero.predict(&x))?;
        ensure!(v == 50.0, "zero head scored {v}");
    }
    Ok(format!("temporal/fused/layer/score {shapes:?}, zero head = 50"))
}

fn ear_swap() -> Outcome {
    let cfg = ModelConfig::desk();
    let model = ok(PredictorModel::<f32>::new(cfg.clone(), 77))?;
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let x: BinauralInput<f32> = random_input(&cfg, &mut rng, 80).cast();
        worst = worst.max((ok(model.predict(&x))? - ok(model.predict(&x.swap_ears()))?).abs());
    }
    ensure!(worst <= 1e-6, "max |Δ| {worst:.3e}");
    Ok(format!("200 inputs, max |Δ| {worst:.3e}"))
}

/// The seeded benchmark split by listener, generated once.
struct Benchmark {
    _dir: tempfile::TempDir,
    train: Manifest,
    test: Manifest,
}

fn benchmark() -> Result<Benchmark, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let m = ok(synth_generate(&SynthConfig::default(), dir.path()))?;
    let ids = m.listeners();
    let (train, test) = ok(split_by_listener(&m, &ids[ids.len() - 3..]))?;
    Ok(Benchmark { _dir: dir, train, test })
}

fn synthetic_learning(b: &Benchmark) -> Outcome {
    let t = Instant::now();
    let (model, cfg) = (ModelConfig::desk(), TrainConfig::desk());
    let report = single_thread(|| {
        let e = train_ensemble(&b.train, &model, &ToySfmConfig::default(), &[EnhancerSpec::identity()], &cfg)?;
        evaluate(&e, &b.test)
    });
    let r = ok(report)?;
    let secs = t.elapsed().as_secs_f64();
    let base = ok(mean_baseline_rmse(&b.train.scores(), &r.targets()))?;
    let ratio = r.rmse / base;
    let ncc = r.ncc.unwrap_or(f64::NAN);
    let detail = format!(
        "{} train / {} test, rmse {:.3} vs baseline {:.3} (ratio {ratio:.3}), ncc {ncc:.3}, {secs:.0}s",
        b.train.len(),
        r.n,
        r.rmse,
        base
    );
    ensure!(r.failures.is_empty() && r.n == b.test.len(), "{detail}");
    ensure!(ratio <= 0.5 && ncc >= 0.7, "{detail}");
    ensure!(secs <= 15.0 * 60.0, "{detail}");
    Ok(detail)
}

fn enhancer_ordering(b: &Benchmark) -> Outcome {
    let (model, frontend) = (ModelConfig::desk(), ToySfmConfig::default());
    let enhancers = [EnhancerSpec::identity(), EnhancerSpec::oracle_clean(), EnhancerSpec::spectral_subtraction()];
    let train_store = ok(ensemble_store(&b.train, &model, &frontend, &enhancers))?;
    let test_store = ok(ensemble_store(&b.test, &model, &frontend, &enhancers))?;
    let rmse_of = |e: &TrainedEnsemble, names: &[&str]| -> Result<f64, String> {
        let sub = ok(e.select(names))?;
        Ok(ok(evaluate_store(&sub, &test_store, "test", vec![]))?.rmse)
    };
    let (mut id_sum, mut or_sum) = (0.0, 0.0);
    let mut lines = Vec::new();
    let mut ensemble_ok = true;
    for seed in 1..=3u64 {
        let cfg = TrainConfig { seed, ..TrainConfig::desk() };
        let plan = ok(make_folds(&b.train, cfg.n_folds, seed))?;
        let e = ok(single_thread(|| {
            train_ensemble_on(&train_store, "synthetic", &model, &frontend, &enhancers, &plan, &cfg)
        }))?;
        let id = rmse_of(&e, &["identity"])?;
        let or = rmse_of(&e, &["oracle_clean"])?;
        let ss = rmse_of(&e, &["spectral_subtraction"])?;
        let both = rmse_of(&e, &["oracle_clean", "spectral_subtraction"])?;
        ensemble_ok &= both <= or.max(ss);
        id_sum += id;
        or_sum += or;
        lines.push(format!("seed {seed}: id {id:.3} or {or:.3} ss {ss:.3} or+ss {both:.3}"));
    }
    let detail = format!(
        "mean identity {:.3}, mean oracle {:.3}; {}",
        id_sum / 3.0,
        or_sum / 3.0,
        lines.join("; ")
    );
    ensure!(or_sum < id_sum, "{detail}");
    ensure!(ensemble_ok, "{detail}");
    Ok(detail)
}

fn small_corpus(dir: &Path, listeners: usize, per: usize, seed: u64) -> Result<Manifest, String> {
    ok(synth_generate(
        &SynthConfig {
            n_listeners: listeners,
            clips_per_listener: per,
            seed,
            duration_s: 0.5,
            ..SynthConfig::default()
        },
        dir,
    ))
}

fn check_partition(m: &Manifest, plan: &FoldPlan) -> Result<(), String> {
    let originals: HashSet<&str> = m.clips().iter().filter(|c| !c.is_augmented()).map(|c| c.clip_id.as_str()).collect();
    let n_val = originals.len() / 5;
    for (k, f) in plan.folds.iter().enumerate() {
        let tr: HashSet<&str> = f.train.iter().map(String::as_str).collect();
        let va: HashSet<&str> = f.validation.iter().map(String::as_str).collect();
        ensure!(tr.len() == f.train.len() && va.len() == f.validation.len(), "fold {k} repeats ids");
        ensure!(tr.is_disjoint(&va), "fold {k} overlaps");
        ensure!(va.len() == n_val, "fold {k}: {} validation, expected {n_val}", va.len());
        let orig_train = tr.iter().filter(|id| originals.contains(*id)).count();
        ensure!(orig_train + va.len() == originals.len(), "fold {k} drops originals");
    }
    Ok(())
}

fn protocol_bookkeeping(b: &Benchmark) -> Outcome {
    let mut notes = Vec::new();
    for n in [100usize, 101] {
        let m = ok(Manifest::from_clips(
            b.train.info.clone(),
            b.train.clips()[..n].to_vec(),
        ))?;
        let plan = ok(make_folds(&m, 3, 7))?;
        check_partition(&m, &plan)?;
        let f = &plan.folds[0];
        notes.push(format!("{n} → {}/{}", f.train.len(), f.validation.len()));
    }
    let plan = ok(make_folds(&b.train, 3, 0))?;
    check_partition(&b.train, &plan)?;
    notes.push(format!("{} → {}/{}", b.train.len(), plan.folds[0].train.len(), plan.folds[0].validation.len()));

    let aug = ok(two_clips_augment(&b.train, 540, 0.5, 3))?;
    for l in b.train.listeners() {
        let n = aug.clips().iter().filter(|c| c.is_augmented() && c.listener_id == l).count();
        ensure!(n == 540, "listener {l}: {n} augmented clips");
    }
    for c in aug.clips().iter().filter(|c| c.is_augmented()) {
        let s = c.sources.as_ref().ok_or("augmented clip without sources")?;
        let sum: f64 = s.clips.iter().map(|id| aug.get(id).map_or(f64::NAN, |x| x.score)).sum();
        ensure!(c.score == sum / 2.0, "{}: score {} is not the source mean", c.clip_id, c.score);
    }
    check_partition(&aug, &ok(make_folds(&aug, 3, 0))?)?;
    notes.push(format!("{} augmented clips, 540 per listener", aug.len() - b.train.len()));

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let m = small_corpus(dir.path(), 3, 12, 9)?;
    let cfg = TrainConfig { epochs: 2, ..TrainConfig::desk() };
    let enh = [EnhancerSpec::identity(), EnhancerSpec::oracle_clean()];
    let store = ok(ensemble_store(&m, &ModelConfig::desk(), &ToySfmConfig::default(), &enh))?;
    let plan = ok(make_folds(&m, 3, 1))?;
    let e = ok(train_ensemble_on(&store, "small", &ModelConfig::desk(), &ToySfmConfig::default(), &enh, &plan, &cfg))?;
    ensure!(e.len() == 6, "{} members", e.len());
    let mut worst = 0.0f64;
    for i in 0..store.len() {
        let scores = ok(e.member_scores(&store, i))?;
        let mut brute = 0.0;
        for s in &scores {
            brute += s;
        }
        brute /= scores.len() as f64;
        worst = worst.max((ok(e.predict(&store, i))? - brute).abs());
    }
    ensure!(worst <= 1e-9, "ensemble vs brute-force mean differs by {worst:.3e}");
    notes.push(format!("ensemble mean within {worst:.1e}"));
    Ok(notes.join(", "))
}

fn brute_rmse(p: &[f64], t: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        s += (p[i] - t[i]) * (p[i] - t[i]);
    }
    (s / p.len() as f64).sqrt()
}

fn brute_ncc(p: &[f64], t: &[f64]) -> f64 {
    let n = p.len() as f64;
    let (mp, mt) = (p.iter().sum::<f64>() / n, t.iter().sum::<f64>() / n);
    let (mut num, mut dp, mut dt) = (0.0, 0.0, 0.0);
    for i in 0..p.len() {
        num += (p[i] - mp) * (t[i] - mt);
        dp += (p[i] - mp).powi(2);
        dt += (t[i] - mt).powi(2);
    }
    num / (dp * dt).sqrt()
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let (mut w_rmse, mut w_ncc, mut w_aff) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = rng.random_range(2..200);
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..100.0)).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..110.0)).collect();
        w_rmse = w_rmse.max((ok(rmse(&p, &t))? - brute_rmse(&p, &t)).abs());
        let c = ok(ncc(&p, &t))?;
        w_ncc = w_ncc.max((c - brute_ncc(&p, &t)).abs());
        let a = rng.random_range(0.1..10.0);
        let shift = rng.random_range(-50.0..50.0);
        let q: Vec<f64> = p.iter().map(|v| a * v + shift).collect();
        w_aff = w_aff.max((ok(ncc(&q, &t))? - c).abs());
    }
    let detail = format!("max |Δ| rmse {w_rmse:.1e}, ncc {w_ncc:.1e}, affine {w_aff:.1e}");
    ensure!(w_rmse <= 1e-9 && w_ncc <= 1e-9 && w_aff <= 1e-9, "{detail}");
    Ok(detail)
}

const SWEEP_LAYERS: usize = 4;
const INFORMATIVE: usize = 1;

/// Feature-backed clips whose only score-bearing layer is `INFORMATIVE`.
fn sweep_fixture(dir: &Path) -> Result<PathBuf, String> {
    let dim = ModelConfig::desk().sfm_feature_dim;
    let frames = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let direction: Vec<f32> = (0..dim).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    let mut clips = Vec::new();
    for l in 0..4 {
        for c in 0..30 {
            let score: f64 = rng.random_range(0.0..100.0);
            let level = (score / 50.0 - 1.0) as f32;
            let data: Vec<f32> = (0..SWEEP_LAYERS * frames * dim)
                .map(|i| {
                    let noise = rng.random_range(-1.0f32..1.0);
                    if i / (frames * dim) == INFORMATIVE {
                        level * direction[i % dim] + 0.2 * noise
                    } else {
                        noise
                    }
                })
                .collect();
            let id = format!("S{l}_{c:02}");
            let path = dir.join(format!("{id}.sifb"));
            ok(write_feature_file(&path, &ok(Tensor::new([SWEEP_LAYERS, frames, dim], data))?))?;
            clips.push(Clip {
                clip_id: id,
                listener_id: format!("S{l}"),
                signal: None,
                clean: None,
                enhanced: Default::default(),
                noisy_features: vec![path],
                enhanced_features: Default::default(),
                audiogram: vec![20.0; 6],
                score,
                listener_group: ListenerGroup::HI,
                sources: None,
                meta: Default::default(),
            });
        }
    }
    let info = DatasetInfo {
        name: "layer-fixture".into(),
        sample_rate: SAMPLE_RATE,
    };
    let path = dir.join("manifest.jsonl");
    ok(ok(Manifest::from_clips(info, clips))?.save(&path))?;
    Ok(path)
}

fn layer_sweep_cli() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = sweep_fixture(dir.path())?;
    let out = dir.path().join("sweep");
    egip(&["--threads", "1", "layer-sweep", "--manifest", manifest.to_str().unwrap()], &out)?;
    let text = std::fs::read_to_string(out.join("sweep.json")).map_err(|e| e.to_string())?;
    let table: SweepTable = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let rmses: Vec<String> = table.rows.iter().map(|r| format!("{:.2}", r.val_rmse)).collect();
    let detail = format!("val rmse by layer [{}], selected {}", rmses.join(", "), table.best_layer);
    ensure!(table.rows.len() == SWEEP_LAYERS, "{detail}");
    ensure!(table.best_layer == INFORMATIVE, "{detail}");
    Ok(detail)
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    egip(
        &["synth-gen", "--listeners", "4", "--clips-per-listener", "15", "--duration", "0.5", "--holdout", "L03"],
        &data,
    )?;
    let (train, test) = (data.join("train.jsonl"), data.join("test.jsonl"));
    let args = [
        "--threads",
        "1",
        "train",
        "--manifest",
        train.to_str().unwrap(),
        "--test",
        test.to_str().unwrap(),
        "--epochs",
        "3",
        "--enhancer",
        "identity",
        "--enhancer",
        "spectral_subtraction",
    ];
    let runs = [dir.path().join("a"), dir.path().join("b")];
    for r in &runs {
        egip(&args, r)?;
    }
    let files = files_under(&runs[0]);
    ensure!(files == files_under(&runs[1]), "runs wrote different file sets");
    let ckpts = files.iter().filter(|f| f.extension().is_some_and(|e| e == "ckpt")).count();
    ensure!(ckpts == 6 && files.iter().any(|f| f.ends_with("report.json")), "unexpected outputs {files:?}");
    for f in &files {
        let a = std::fs::read(runs[0].join(f)).map_err(|e| e.to_string())?;
        let b = std::fs::read(runs[1].join(f)).map_err(|e| e.to_string())?;
        ensure!(a == b, "{} differs between runs", f.display());
    }
    Ok(format!("{} files byte-identical ({ckpts} checkpoints)", files.len()))
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let took = format_duration(t.elapsed());
    match r {
        Ok(d) => {
            println!("PASS {name}: {d} [{took}]");
            true
        }
        Err(d) => {
            println!("FAIL {name}: {d} [{took}]");
            false
        }
    }
}

fn format_duration(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let mut results = Vec::new();
    let mut check = |name: &str, f: &mut dyn FnMut() -> Outcome| {
        if wanted(name) {
            results.push(run(name, f));
        }
    };
    check("gradient-suite", &mut gradient_suite);
    check("shape-suite", &mut shape_suite);
    check("ear-swap", &mut ear_swap);
    check("metric-oracles", &mut metric_oracles);
    check("layer-sweep", &mut layer_sweep_cli);
    check("determinism", &mut determinism);
    let heavy = ["protocol-bookkeeping", "synthetic-learning", "enhancer-ordering"];
    if heavy.iter().any(|h| wanted(h)) {
        match benchmark() {
            Ok(b) => {
                check("protocol-bookkeeping", &mut || protocol_bookkeeping(&b));
                check("synthetic-learning", &mut || synthetic_learning(&b));
                check("enhancer-ordering", &mut || enhancer_ordering(&b));
            }
            Err(e) => {
                for h in heavy.iter().filter(|h| wanted(h)) {
                    println!("FAIL {h}: benchmark generation failed: {e}");
                    results.push(false);
                }
            }
        }
    }
    let failed = results.iter().filter(|r| !**r).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
