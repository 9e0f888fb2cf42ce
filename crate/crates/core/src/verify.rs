//! Finite-difference verification of every differentiable operation and of
//! the assembled predictor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{BinauralInput, EarFeatures, ModelConfig, PredictorModel};
use crate::nn::{Ctx, Init, ParamStore, TransformerBlock};
use crate::tensor::{gradient_check_many, GradCheckConfig, GradCheckReport, Graph, Tensor, Var};

/// Outcome of one named check.
#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn max_rel_err(&self) -> f64 {
        self.cases
            .iter()
            .map(|c| c.report.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.report.passed)
    }

    pub fn worst(&self) -> Option<&CaseResult> {
        self.cases
            .iter()
            .max_by(|a, b| a.report.max_rel_err.total_cmp(&b.report.max_rel_err))
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

/// Reduce an arbitrary-shaped output to a scalar through fixed random
/// weights, so every output entry receives a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.shape(y), 1.0);
    let wv = g.leaf(w);
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

type OpCase = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>);

fn op_cases(rng: &mut ChaCha8Rng, round: usize) -> Vec<OpCase> {
    let m = rng.random_range(1..5usize);
    let k = rng.random_range(1..5usize);
    let n = rng.random_range(2..6usize);
    let ws = 1000 + round as u64;
    let mut cases: Vec<OpCase> = Vec::new();

    cases.push((
        "matmul",
        vec![rand_tensor(rng, &[m, k], 2.0), rand_tensor(rng, &[k, n], 2.0)],
        Box::new(move |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, ws)
        }),
    ));
    cases.push((
        "add_bias",
        vec![rand_tensor(rng, &[m, n], 2.0), rand_tensor(rng, &[n], 2.0)],
        Box::new(move |g, v| {
            let y = g.add_bias(v[0], v[1])?;
            weighted_sum(g, y, ws)
        }),
    ));
    for name in ["add", "sub", "mul"] {
        cases.push((
            name,
            vec![rand_tensor(rng, &[m, n], 2.0), rand_tensor(rng, &[m, n], 2.0)],
            Box::new(move |g, v| {
                let y = match name {
                    "add" => g.add(v[0], v[1])?,
                    "sub" => g.sub(v[0], v[1])?,
                    _ => g.mul(v[0], v[1])?,
                };
                weighted_sum(g, y, ws)
            }),
        ));
    }
    let s = rng.random_range(-3.0..3.0);
    cases.push((
        "scale",
        vec![rand_tensor(rng, &[m, n], 2.0)],
        Box::new(move |g, v| {
            let y = g.scale(v[0], s);
            weighted_sum(g, y, ws)
        }),
    ));
    for name in ["sigmoid", "tanh", "gelu"] {
        cases.push((
            name,
            vec![rand_tensor(rng, &[m, n], 3.0)],
            Box::new(move |g, v| {
                let y = match name {
                    "sigmoid" => g.sigmoid(v[0]),
                    "tanh" => g.tanh(v[0]),
                    _ => g.gelu(v[0]),
                };
                weighted_sum(g, y, ws)
            }),
        ));
    }
    let axis = round % 2;
    cases.push((
        "softmax",
        vec![rand_tensor(rng, &[m + 1, n], 3.0)],
        Box::new(move |g, v| {
            let y = g.softmax(v[0], axis)?;
            weighted_sum(g, y, ws)
        }),
    ));
    cases.push((
        "layer_norm",
        vec![
            rand_tensor(rng, &[m, n], 2.0),
            rand_tensor(rng, &[n], 2.0),
            rand_tensor(rng, &[n], 2.0),
        ],
        Box::new(move |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(g, y, ws)
        }),
    ));
    let t = rng.random_range(2..8usize);
    let mut mask: Vec<bool> = (0..t).map(|_| rng.random_bool(0.6)).collect();
    mask[0] = true;
    cases.push((
        "masked_mean",
        vec![rand_tensor(rng, &[t, n], 2.0)],
        Box::new(move |g, v| {
            let y = g.masked_mean(v[0], &mask)?;
            weighted_sum(g, y, ws)
        }),
    ));
    let cat_axis = round % 2;
    let (sa, sb) = if cat_axis == 0 {
        ([m, n], [k, n])
    } else {
        ([m, n], [m, k])
    };
    cases.push((
        "concat",
        vec![rand_tensor(rng, &sa, 2.0), rand_tensor(rng, &sb, 2.0)],
        Box::new(move |g, v| {
            let y = g.concat(&[v[0], v[1]], cat_axis)?;
            weighted_sum(g, y, ws)
        }),
    ));
    let start = rng.random_range(0..n - 1);
    cases.push((
        "slice",
        vec![rand_tensor(rng, &[m, n], 2.0)],
        Box::new(move |g, v| {
            let y = g.slice(v[0], 1, start, n - start - 1)?;
            weighted_sum(g, y, ws)
        }),
    ));
    cases.push((
        "transpose",
        vec![rand_tensor(rng, &[m, n], 2.0)],
        Box::new(move |g, v| {
            let y = g.transpose(v[0])?;
            weighted_sum(g, y, ws)
        }),
    ));
    cases.push((
        "sum_mean",
        vec![rand_tensor(rng, &[m, n], 2.0)],
        Box::new(move |g, v| {
            let sq = g.mul(v[0], v[0])?;
            let a = g.sum(sq);
            let b = g.mean(v[0]);
            let b = g.scale(b, 3.0);
            g.add(a, b)
        }),
    ));
    let heads = 1 + round % 2;
    let d = 2 * heads;
    let (tq, tk) = (rng.random_range(1..4usize), rng.random_range(2..5usize));
    let mut kmask: Vec<bool> = (0..tk).map(|_| rng.random_bool(0.7)).collect();
    kmask[tk - 1] = true;
    cases.push((
        "attention",
        vec![
            rand_tensor(rng, &[tq, d], 1.5),
            rand_tensor(rng, &[tk, d], 1.5),
            rand_tensor(rng, &[tk, d], 1.5),
        ],
        Box::new(move |g, v| {
            let y = g.attention(v[0], v[1], v[2], heads, Some(&kmask))?;
            weighted_sum(g, y, ws)
        }),
    ));
    let keep: Vec<bool> = (0..m * n).map(|_| rng.random_bool(0.8)).collect();
    cases.push((
        "dropout",
        vec![rand_tensor(rng, &[m, n], 2.0)],
        Box::new(move |g, v| {
            let y = g.dropout(v[0], &keep, 0.2)?;
            weighted_sum(g, y, ws)
        }),
    ));
    // Keep residuals away from the |e| = delta kink by at least 0.1.
    let delta = 1.0;
    let targets: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let pred: Vec<f64> = targets
        .iter()
        .map(|t| {
            let mag = if rng.random_bool(0.5) {
                rng.random_range(0.0..0.9)
            } else {
                rng.random_range(1.1..4.0)
            };
            t + if rng.random_bool(0.5) { mag } else { -mag }
        })
        .collect();
    cases.push((
        "huber",
        vec![Tensor::new([n], pred).unwrap()],
        Box::new(move |g, v| g.huber(v[0], &targets, delta)),
    ));
    cases
}

/// Random per-op checks; `rounds` repetitions of every operation.
pub fn op_suite(seed: u64, rounds: usize, cfg: GradCheckConfig) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for r in 0..rounds {
        for (name, inputs, f) in op_cases(&mut rng, r) {
            let report = gradient_check_many(&*f, &inputs, cfg)?;
            out.push(CaseResult {
                name: format!("{name}#{r}"),
                report,
            });
        }
    }
    Ok(out)
}

/// One width-8, 2-head block in cross mode, checked with respect to its
/// inputs and every parameter.
pub fn block_check(seed: u64, cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let mut store = ParamStore::<f64>::new();
    let mut init = Init::new(seed);
    let block = TransformerBlock::new(&mut store, &mut init, "b", 8, 2, 4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut inputs = vec![rand_tensor(&mut rng, &[3, 8], 1.0), rand_tensor(&mut rng, &[4, 8], 1.0)];
    inputs.extend(store.tensors().iter().cloned());
    let mask = [true, true, false, true];
    gradient_check_many(
        |g, v| {
            let mut ctx = Ctx::new(g, &v[2..]);
            let y = block.forward(&mut ctx, v[0], v[1], Some(&mask))?;
            weighted_sum(ctx.g, y, seed)
        },
        &inputs,
        cfg,
    )
}

/// Random tiny-config input with sequence lengths ≤ 12.
pub fn random_input(cfg: &ModelConfig, rng: &mut ChaCha8Rng, max_len: usize) -> BinauralInput<f64> {
    let ear = |rng: &mut ChaCha8Rng| {
        let t = rng.random_range(1..=max_len);
        let noisy = rand_tensor(rng, &[t, cfg.sfm_feature_dim], 1.0);
        let enhanced = rand_tensor(rng, &[t, cfg.sfm_feature_dim], 1.0);
        let mut mask: Vec<bool> = (0..t).map(|_| rng.random_bool(0.85)).collect();
        mask[0] = true;
        EarFeatures {
            noisy,
            enhanced,
            mask,
        }
    };
    let ears = [ear(rng), ear(rng)];
    let audiogram = (0..cfg.audiogram_dim)
        .map(|_| rng.random_range(0.0..80.0))
        .collect();
    BinauralInput { ears, audiogram }
}

/// Layer transformer of the tiny model with respect to its inputs and all
/// parameters.
pub fn layer_stage_check(seed: u64, cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let model = PredictorModel::<f64>::new(ModelConfig::tiny(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = vec![rand_tensor(&mut rng, &[2, 8], 1.0), rand_tensor(&mut rng, &[2, 8], 1.0)];
    inputs.extend(model.params.tensors().iter().cloned());
    gradient_check_many(
        |g, v| {
            let mut ctx = Ctx::new(g, &v[2..]);
            let [l, r] = model.layer_stage(&mut ctx, v[0], v[1])?;
            let both = ctx.g.concat(&[l, r], 0)?;
            weighted_sum(ctx.g, both, seed + 1)
        },
        &inputs,
        cfg,
    )
}

/// Full predictor (tiny config) with respect to every parameter.
pub fn predictor_check(seed: u64, model_cfg: ModelConfig, cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let model = PredictorModel::<f64>::new(model_cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31));
    let input = random_input(&model_cfg, &mut rng, 12);
    let params: Vec<Tensor<f64>> = model.params.tensors().to_vec();
    gradient_check_many(
        |g, v| {
            let mut ctx = Ctx::new(g, v);
            let s = model.forward(&mut ctx, &input)?;
            Ok(ctx.g.sum(s))
        },
        &params,
        cfg,
    )
}

/// Everything: ≥100 randomized op cases, a block, the layer stage and the
/// full predictor in both cross-attention variants.
pub fn full_suite(seed: u64, cfg: GradCheckConfig) -> Result<SuiteReport> {
    let mut cases = op_suite(seed, 6, cfg)?;
    cases.push(CaseResult {
        name: "transformer_block".into(),
        report: block_check(seed, cfg)?,
    });
    cases.push(CaseResult {
        name: "layer_stage".into(),
        report: layer_stage_check(seed, cfg)?,
    });
    cases.push(CaseResult {
        name: "predictor".into(),
        report: predictor_check(seed, ModelConfig::tiny(), cfg)?,
    });
    cases.push(CaseResult {
        name: "predictor_symmetric_split_ears".into(),
        report: predictor_check(
            seed + 1,
            ModelConfig {
                symmetric_cross: true,
                share_ear_parameters: false,
                ..ModelConfig::tiny()
            },
            cfg,
        )?,
    });
    Ok(SuiteReport { cases })
}
