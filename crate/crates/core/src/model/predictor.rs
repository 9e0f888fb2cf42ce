use crate::error::{Error, Result};
use crate::nn::{positional_encode, BlockStack, Ctx, Init, Linear, ParamStore};
use crate::tensor::{Graph, Real, Tensor, Var};

use super::config::ModelConfig;

pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;

/// Frame-level SFM features of one ear for the noisy and one enhanced pathway.
#[derive(Clone, Debug, PartialEq)]
pub struct EarFeatures<T> {
    /// `[frames × sfm_feature_dim]`
    pub noisy: Tensor<T>,
    /// `[frames × sfm_feature_dim]`
    pub enhanced: Tensor<T>,
    /// `true` for real frames, `false` for padding.
    pub mask: Vec<bool>,
}

impl<T: Real> EarFeatures<T> {
    pub fn unmasked(noisy: Tensor<T>, enhanced: Tensor<T>) -> Self {
        let t = noisy.rows();
        EarFeatures {
            noisy,
            enhanced,
            mask: vec![true; t],
        }
    }

    pub fn cast<U: Real>(&self) -> EarFeatures<U> {
        EarFeatures {
            noisy: self.noisy.cast(),
            enhanced: self.enhanced.cast(),
            mask: self.mask.clone(),
        }
    }
}

/// Model input for one listening-test item.
#[derive(Clone, Debug, PartialEq)]
pub struct BinauralInput<T> {
    pub ears: [EarFeatures<T>; 2],
    /// Hearing thresholds in dB HL at 250, 500, 1000, 2000, 4000, 6000 Hz.
    pub audiogram: Vec<T>,
}

impl<T: Real> BinauralInput<T> {
    /// Single-channel input duplicated to both ears.
    pub fn monaural(ear: EarFeatures<T>, audiogram: Vec<T>) -> Self {
        BinauralInput {
            ears: [ear.clone(), ear],
            audiogram,
        }
    }

    pub fn swap_ears(&self) -> Self {
        BinauralInput {
            ears: [self.ears[RIGHT].clone(), self.ears[LEFT].clone()],
            audiogram: self.audiogram.clone(),
        }
    }

    pub fn cast<U: Real>(&self) -> BinauralInput<U> {
        BinauralInput {
            ears: [self.ears[0].cast(), self.ears[1].cast()],
            audiogram: self.audiogram.iter().map(|x| U::lit(x.as_f64())).collect(),
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.audiogram.len() != cfg.audiogram_dim {
            return Err(Error::contract(format!(
                "audiogram must have {} entries, got {}",
                cfg.audiogram_dim,
                self.audiogram.len()
            )));
        }
        for ear in &self.ears {
            for f in [&ear.noisy, &ear.enhanced] {
                if f.shape().len() != 2 || f.cols() != cfg.sfm_feature_dim {
                    return Err(Error::Dimension {
                        op: "binaural input",
                        lhs: f.shape().to_vec(),
                        rhs: vec![cfg.sfm_feature_dim],
                    });
                }
            }
            if ear.noisy.shape() != ear.enhanced.shape() || ear.mask.len() != ear.noisy.rows() {
                return Err(Error::Dimension {
                    op: "binaural input pathways",
                    lhs: ear.noisy.shape().to_vec(),
                    rhs: ear.enhanced.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// Mean-pool non-overlapping windows of `factor` frames.
///
/// Each window averages only its unmasked frames (a trailing partial window
/// averages over its actual length). A pooled frame is unmasked iff at least
/// one of its source frames is; fully masked windows pool to zeros.
pub fn pool_frames<T: Real>(
    features: &Tensor<T>,
    mask: &[bool],
    factor: usize,
) -> Result<(Tensor<T>, Vec<bool>)> {
    if features.shape().len() != 2 {
        return Err(Error::Dimension {
            op: "pool_frames",
            lhs: features.shape().to_vec(),
            rhs: vec![],
        });
    }
    let (t, d) = (features.rows(), features.cols());
    if t == 0 {
        return Err(Error::EmptySequence);
    }
    if mask.len() != t || factor == 0 {
        return Err(Error::contract(format!(
            "pool_frames: mask length {} for {t} frames, factor {factor}",
            mask.len()
        )));
    }
    let n_out = t.div_ceil(factor);
    let mut out = vec![T::zero(); n_out * d];
    let mut out_mask = vec![false; n_out];
    for w in 0..n_out {
        let frames = (w * factor..((w + 1) * factor).min(t)).filter(|&i| mask[i]);
        let mut count = 0usize;
        let row = &mut out[w * d..(w + 1) * d];
        for i in frames {
            count += 1;
            for (o, &v) in row.iter_mut().zip(features.row(i)) {
                *o += v;
            }
        }
        if count > 0 {
            let inv = T::one() / T::lit(count as f64);
            row.iter_mut().for_each(|o| *o *= inv);
            out_mask[w] = true;
        }
    }
    Ok((Tensor::new([n_out, d], out)?, out_mask))
}

/// Parameters applied to one ear's channel.
#[derive(Clone, Debug)]
pub struct EarPipeline {
    pub feature_proj: Linear,
    pub self_noisy: BlockStack,
    /// `None` when the pathways share self-attention parameters.
    pub self_enhanced: Option<BlockStack>,
    pub cross: BlockStack,
    pub binaural: BlockStack,
    pub audiogram_proj: Linear,
    pub layer_self: BlockStack,
    pub layer_binaural: BlockStack,
}

impl EarPipeline {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        prefix: &str,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let stack = |store: &mut ParamStore<T>, init: &mut Init, name: &str, depth: usize| {
            BlockStack::new(
                store,
                init,
                &format!("{prefix}.{name}"),
                depth,
                d,
                cfg.n_heads,
                cfg.ff_mult,
            )
        };
        let feature_proj = Linear::new(
            store,
            init,
            &format!("{prefix}.feature_proj"),
            cfg.sfm_feature_dim,
            d,
        );
        let self_noisy = stack(store, init, "temporal.self_noisy", cfg.n_blocks_temporal)?;
        let self_enhanced = if cfg.share_pathway_parameters {
            None
        } else {
            Some(stack(store, init, "temporal.self_enhanced", cfg.n_blocks_temporal)?)
        };
        let cross = stack(store, init, "temporal.cross", cfg.n_blocks_temporal)?;
        let binaural = stack(store, init, "temporal.binaural", cfg.n_blocks_temporal)?;
        let audiogram_proj = Linear::new(
            store,
            init,
            &format!("{prefix}.audiogram_proj"),
            cfg.audiogram_dim,
            d,
        );
        let layer_self = stack(store, init, "layer.self", cfg.n_blocks_layer)?;
        let layer_binaural = stack(store, init, "layer.binaural", cfg.n_blocks_layer)?;
        Ok(EarPipeline {
            feature_proj,
            self_noisy,
            self_enhanced,
            cross,
            binaural,
            audiogram_proj,
            layer_self,
            layer_binaural,
        })
    }
}

/// Dual-pathway binaural intelligibility predictor.
///
/// Per ear: pooled and projected noisy/enhanced features pass through
/// pathway self-attention, noisy→enhanced cross-attention and binaural
/// cross-attention, are mean-pooled, joined with the projected audiogram and
/// refined by the layer transformer. The two ear summaries are averaged and
/// mapped to `score_scale · sigmoid(head(·))`.
#[derive(Clone, Debug)]
pub struct PredictorModel<T> {
    cfg: ModelConfig,
    seed: u64,
    pub params: ParamStore<T>,
    ears: Vec<EarPipeline>,
    pub head: Linear,
}

impl<T: Real> PredictorModel<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let n_ears = if cfg.share_ear_parameters { 1 } else { 2 };
        let ears = (0..n_ears)
            .map(|i| EarPipeline::new(&mut store, &mut init, &format!("ear{i}"), &cfg))
            .collect::<Result<_>>()?;
        let head = Linear::new(&mut store, &mut init, "head", cfg.d_model, 1);
        Ok(PredictorModel {
            cfg,
            seed,
            params: store,
            ears,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn ear(&self, c: usize) -> &EarPipeline {
        &self.ears[c.min(self.ears.len() - 1)]
    }

    pub fn cast<U: Real>(&self) -> PredictorModel<U> {
        PredictorModel {
            cfg: self.cfg.clone(),
            seed: self.seed,
            params: self.params.cast(),
            ears: self.ears.clone(),
            head: self.head.clone(),
        }
    }

    /// Pool by `downsample_factor` and project to `d_model`.
    pub fn project_features(
        &self,
        ctx: &mut Ctx<'_, T>,
        ear: usize,
        features: &Tensor<T>,
        mask: &[bool],
    ) -> Result<(Var, Vec<bool>)> {
        let (pooled, pmask) = pool_frames(features, mask, self.cfg.downsample_factor)?;
        let x = ctx.g.leaf(pooled);
        let h = self.ear(ear).feature_proj.forward(ctx, x)?;
        Ok((h, pmask))
    }

    /// Temporal transformer for both ears; each output is `1×d_model`.
    pub fn temporal(&self, ctx: &mut Ctx<'_, T>, input: &BinauralInput<T>) -> Result<[Var; 2]> {
        let mut hidden = Vec::with_capacity(2);
        let mut masks = Vec::with_capacity(2);
        for (c, ear) in input.ears.iter().enumerate() {
            let p = self.ear(c);
            let (xn, mask) = self.project_features(ctx, c, &ear.noisy, &ear.mask)?;
            let (xe, _) = self.project_features(ctx, c, &ear.enhanced, &ear.mask)?;
            let xn = positional_encode(ctx, xn, self.cfg.positions_enabled)?;
            let xe = positional_encode(ctx, xe, self.cfg.positions_enabled)?;
            let n = p.self_noisy.forward(ctx, xn, None, Some(&mask))?;
            let e = p
                .self_enhanced
                .as_ref()
                .unwrap_or(&p.self_noisy)
                .forward(ctx, xe, None, Some(&mask))?;
            let h = if self.cfg.symmetric_cross {
                let ne = p.cross.forward(ctx, n, Some(e), Some(&mask))?;
                let en = p.cross.forward(ctx, e, Some(n), Some(&mask))?;
                let s = ctx.g.add(ne, en)?;
                ctx.g.scale(s, T::lit(0.5))
            } else {
                p.cross.forward(ctx, n, Some(e), Some(&mask))?
            };
            hidden.push(h);
            masks.push(mask);
        }
        let mut out = [hidden[0]; 2];
        for c in 0..2 {
            let other = 1 - c;
            let b = self.ear(c).binaural.forward(
                ctx,
                hidden[c],
                Some(hidden[other]),
                Some(&masks[other]),
            )?;
            out[c] = ctx.g.masked_mean(b, &masks[c])?;
        }
        Ok(out)
    }

    /// `[summary; proj(audiogram)]`, a `2×d_model` token sequence.
    pub fn fuse_audiogram(
        &self,
        ctx: &mut Ctx<'_, T>,
        ear: usize,
        summary: Var,
        audiogram: &[T],
    ) -> Result<Var> {
        if audiogram.len() != self.cfg.audiogram_dim {
            return Err(Error::contract(format!(
                "audiogram must have {} entries, got {}",
                self.cfg.audiogram_dim,
                audiogram.len()
            )));
        }
        let scale = T::lit(self.cfg.audiogram_scale);
        let a = ctx
            .g
            .constant([1, audiogram.len()], audiogram.iter().map(|&x| x * scale).collect())?;
        let tok = self.ear(ear).audiogram_proj.forward(ctx, a)?;
        ctx.g.concat(&[summary, tok], 0)
    }

    /// Layer transformer over both ears' `2×d` sequences; each output is
    /// the `1×d` token mean.
    pub fn layer_stage(&self, ctx: &mut Ctx<'_, T>, z_left: Var, z_right: Var) -> Result<[Var; 2]> {
        for z in [z_left, z_right] {
            if ctx.g.shape(z) != [2, self.cfg.d_model] {
                return Err(Error::Dimension {
                    op: "layer_stage",
                    lhs: ctx.g.shape(z).to_vec(),
                    rhs: vec![2, self.cfg.d_model],
                });
            }
        }
        let s = [
            self.ear(LEFT).layer_self.forward(ctx, z_left, None, None)?,
            self.ear(RIGHT).layer_self.forward(ctx, z_right, None, None)?,
        ];
        let mut out = [s[0]; 2];
        for c in 0..2 {
            let b = self.ear(c).layer_binaural.forward(ctx, s[c], Some(s[1 - c]), None)?;
            out[c] = ctx.g.mean_rows(b)?;
        }
        Ok(out)
    }

    /// `score_scale · sigmoid(head(mean(r_left, r_right)))`, shape `1×1`.
    pub fn head_score(&self, ctx: &mut Ctx<'_, T>, r_left: Var, r_right: Var) -> Result<Var> {
        let sum = ctx.g.add(r_left, r_right)?;
        let avg = ctx.g.scale(sum, T::lit(0.5));
        let logit = self.head.forward(ctx, avg)?;
        let p = ctx.g.sigmoid(logit);
        Ok(ctx.g.scale(p, T::lit(self.cfg.score_scale)))
    }

    /// Full pipeline for one item, recorded on `ctx`; returns the `1×1` score.
    pub fn forward(&self, ctx: &mut Ctx<'_, T>, input: &BinauralInput<T>) -> Result<Var> {
        input.validate(&self.cfg)?;
        let t = self.temporal(ctx, input)?;
        let z_left = self.fuse_audiogram(ctx, LEFT, t[LEFT], &input.audiogram)?;
        let z_right = self.fuse_audiogram(ctx, RIGHT, t[RIGHT], &input.audiogram)?;
        let r = self.layer_stage(ctx, z_left, z_right)?;
        self.head_score(ctx, r[LEFT], r[RIGHT])
    }

    /// Inference-mode score in `[0, score_scale]`.
    pub fn predict(&self, input: &BinauralInput<T>) -> Result<f64> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let mut ctx = Ctx::new(&mut g, &vars);
        let s = self.forward(&mut ctx, input)?;
        Ok(g.data(s)[0].as_f64())
    }

    /// Scores for several items on one tape.
    pub fn predict_batch(&self, inputs: &[BinauralInput<T>]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let mut ctx = Ctx::new(&mut g, &vars);
        let mut scores = Vec::with_capacity(inputs.len());
        for x in inputs {
            let s = self.forward(&mut ctx, x)?;
            scores.push(s);
        }
        Ok(scores.into_iter().map(|s| g.data(s)[0].as_f64()).collect())
    }
}
