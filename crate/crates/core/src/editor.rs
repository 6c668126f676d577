//! Mask-free attribute editing: noise the source to step k, then walk the
//! reverse chain shifting each step's posterior mean by the combined
//! gradient of (a) the classifier's target log-probabilities taken through
//! extending augmentations and (b) a background-preservation loss weighted
//! by the inverse attention mask.
//!
//! Gradients are taken in x_t space by default — the full chain through
//! the clean-image prediction and the denoiser — matching how the guidance
//! shift enters the posterior. `surrogate_x0_grad` switches to the cheaper
//! x̂0-space gradient rescaled by ∂x̂0/∂x_t = 1/√ᾱ_t.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::classifier::{attention_map, Classifier, ClassifierError, ClassifierOutput};
use crate::denoiser::{DenoiserError, UNet};
use crate::diffusion::{forward_sample, guided_step, DiffusionError, NoiseSchedule};
use crate::rng::{normal_tensor, substream, uniform, Stream};
use crate::tensor::{fnv_init, fnv_u64, Scalar, Tensor};
use rand::Rng;

#[derive(Debug, Error)]
pub enum EditError {
    #[error("invalid edit request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
}

/// Editing inputs: source image, target attribute classes, start step k,
/// augmentation views N, guidance weight λ and background-loss weight.
#[derive(Debug, Clone)]
pub struct EditRequest<S: Scalar> {
    pub source: Tensor<S>,
    /// (attribute index, target class index); nonempty.
    pub targets: Vec<(usize, usize)>,
    pub k: usize,
    pub n_views: usize,
    pub lambda: f64,
    pub bckg_weight: f64,
    pub seed: u64,
}

/// Which frozen classifier layers feed the feature-space distance of the
/// background loss. Depth 0 is the patch embedding; depth d includes the
/// first d transformer blocks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerceptualDistanceConfig {
    pub layers: Vec<(usize, f64)>,
}

impl Default for PerceptualDistanceConfig {
    fn default() -> Self {
        PerceptualDistanceConfig {
            layers: vec![(0, 1.0), (1, 1.0)],
        }
    }
}

#[derive(Debug, Clone)]
pub struct EditOptions {
    pub surrogate_x0_grad: bool,
    pub freeze_mask_from_source: bool,
    /// Record attr/bckg gradient components per step (two backward passes
    /// instead of one fused pass).
    pub record_components: bool,
    /// Keep every `stride`-th step's M̄ and x̂0 snapshot; 0 disables.
    pub snapshot_stride: usize,
    pub pd: PerceptualDistanceConfig,
}

impl Default for EditOptions {
    fn default() -> Self {
        EditOptions {
            surrogate_x0_grad: false,
            freeze_mask_from_source: false,
            record_components: false,
            snapshot_stride: 0,
            pd: PerceptualDistanceConfig::default(),
        }
    }
}

/// Dense tensor snapshot for traces and reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl SnapshotTensor {
    pub fn of<S: Scalar>(t: &Tensor<S>) -> Self {
        SnapshotTensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.to_f64_() as f32).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&self.shape, self.data.clone())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    /// Negative mean target log-probability; None when guidance was off.
    pub attr_loss: Option<f64>,
    /// Unweighted background loss; None when the term was off.
    pub bckg_loss: Option<f64>,
    pub attr_grad_norm: Option<f64>,
    pub bckg_grad_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mbar: Option<SnapshotTensor>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0_hat: Option<SnapshotTensor>,
    #[serde(skip)]
    pub attr_grad: Option<SnapshotTensor>,
    #[serde(skip)]
    pub bckg_grad: Option<SnapshotTensor>,
}

/// Per-step record of a guided sampling run: k denoising steps at
/// t = k..1 plus a terminal record at t = 0 evaluated on the final output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditTrace {
    pub steps: Vec<StepRecord>,
    pub output: SnapshotTensor,
    pub trace_hash: u64,
}

/// Differentiable multi-view augmentation: view 0 is the identity, views
/// 1..N−1 are random resized crops (scale in [0.7, 1.0]) with 50%
/// horizontal flip, resized back to the input size.
pub fn extending_augmentations<S: Scalar>(x: &Var<S>, n: usize, rng: &mut Stream) -> Vec<Var<S>> {
    let shape = x.shape();
    let (h, w, c) = (shape[1], shape[2], shape[3]);
    let mut views = Vec::with_capacity(n);
    views.push(x.clone());
    for _ in 1..n {
        let scale: f64 = uniform::<f64>(0.7, 1.0, rng);
        let flip = rng.gen_bool(0.5);
        let crop = ((h as f64 * scale).round() as usize).clamp(8.min(h), h);
        let oy = rng.gen_range(0..=h - crop);
        let ox = rng.gen_range(0..=w - crop);
        let mut v = x
            .slice(&[0, oy, ox, 0], &[1, crop, crop, c])
            .bilinear_resize(h, w);
        if flip {
            v = v.flip_w();
        }
        views.push(v);
    }
    views
}

/// Guidance objective f(X̂_aug, A): mean over views of the summed target
/// log-softmax values. Ascent on this drives the edit.
pub fn attr_objective<S: Scalar>(
    classifier: &Classifier<S>,
    bound: &crate::nn::Bound<S>,
    views: &[Var<S>],
    targets: &[(usize, usize)],
) -> Var<S> {
    let n = views.len();
    let shape = views[0].shape();
    let (h, w, c) = (shape[1], shape[2], shape[3]);
    let batch = Var::concat0(views).reshape(&[n, h, w, c]);
    let (logits, _) = classifier.forward_on_tape(bound, &batch);
    let mut obj: Option<Var<S>> = None;
    for &(attr, class) in targets {
        let term = logits[attr].log_softmax().row_select(&vec![class; n]).mean();
        obj = Some(match obj {
            Some(o) => o.add(&term),
            None => term,
        });
    }
    obj.expect("targets nonempty")
}

/// Replicate a single-channel `[H,W,1]` mask across C channels as
/// `[1,H,W,C]`, applying `f` to each mask value.
fn mask_to_const<S: Scalar>(mbar: &Tensor<S>, c: usize, f: impl Fn(S) -> S) -> Tensor<S> {
    let (h, w) = (mbar.shape()[0], mbar.shape()[1]);
    let mut data = Vec::with_capacity(h * w * c);
    for px in 0..h * w {
        let m = f(mbar.data()[px]);
        for _ in 0..c {
            data.push(m);
        }
    }
    Tensor::from_vec(&[1, h, w, c], data)
}

/// Source-side constants of the background loss, computed once per edit.
pub struct BckgContext<S: Scalar> {
    source4: Tensor<S>,
    source_feats: Vec<Tensor<S>>,
}

impl<S: Scalar> BckgContext<S> {
    pub fn new(
        classifier: &Classifier<S>,
        source: &Tensor<S>,
        pd: &PerceptualDistanceConfig,
    ) -> Self {
        let (h, w, c) = (source.shape()[0], source.shape()[1], source.shape()[2]);
        let source4 = source.reshaped(&[1, h, w, c]);
        let tape = Tape::new();
        tape.set_nan_guard(false);
        let bound = classifier.params.bind_frozen(&tape);
        let xv = tape.constant(source4.clone());
        let source_feats = pd
            .layers
            .iter()
            .map(|&(depth, _)| classifier.features_on_tape(&bound, &xv, depth).value())
            .collect();
        BckgContext {
            source4,
            source_feats,
        }
    }
}

/// ℒ_bckg on tape: masked pixel distance plus masked feature distance
/// against the source, both weighted by (1 − M̄) with the mask resized to
/// each feature resolution. The mask is treated as a constant.
pub fn bckg_loss_on_tape<S: Scalar>(
    x0_hat: &Var<S>,
    ctx: &BckgContext<S>,
    mbar: &Tensor<S>,
    classifier: &Classifier<S>,
    bound: &crate::nn::Bound<S>,
    pd: &PerceptualDistanceConfig,
) -> Var<S> {
    let tape = x0_hat.tape().clone();
    let c = ctx.source4.shape()[3];
    let src = tape.constant(ctx.source4.clone());
    let inv_mask = tape.constant(mask_to_const(mbar, c, |m| S::one() - m));
    let diff = x0_hat.sub(&src);
    let mut loss = diff.mul(&diff).mul(&inv_mask).mean();

    if !pd.layers.is_empty() {
        let side = classifier.config.token_side();
        let mbar4 = mbar.reshaped(&[1, mbar.shape()[0], mbar.shape()[1], 1]);
        let mbar_small = crate::autograd::bilinear_resize_tensor(&mbar4, side, side)
            .reshaped(&[side, side, 1]);
        for (li, &(depth, weight)) in pd.layers.iter().enumerate() {
            let feat = classifier.features_on_tape(bound, x0_hat, depth);
            let dim = feat.shape()[2];
            let fsrc = tape.constant(ctx.source_feats[li].clone());
            let fmask = tape.constant(
                mask_to_const(&mbar_small, dim, |m| S::one() - m).reshaped(&[1, side * side, dim]),
            );
            let fd = feat.sub(&fsrc);
            let term = fd.mul(&fd).mul(&fmask).mean().scale(S::from_f64(weight));
            loss = loss.add(&term);
        }
    }
    loss
}

/// Attention mask M̄ of an image for the request's target attributes.
pub fn mask_for<S: Scalar>(
    classifier: &Classifier<S>,
    image: &Tensor<S>,
    targets: &[(usize, usize)],
) -> Result<Tensor<S>, ClassifierError> {
    let out: ClassifierOutput<S> = classifier.classify(image)?;
    let attrs: Vec<usize> = targets.iter().map(|&(a, _)| a).collect();
    attention_map(
        &out,
        &attrs,
        classifier.config.token_side(),
        classifier.config.image_size,
    )
}

fn validate<S: Scalar>(
    req: &EditRequest<S>,
    classifier: &Classifier<S>,
    schedule: &NoiseSchedule<S>,
) -> Result<(), EditError> {
    if req.targets.is_empty() {
        return Err(EditError::InvalidRequest("targets must be nonempty".into()));
    }
    for &(attr, class) in &req.targets {
        if attr >= classifier.schema.len() {
            return Err(EditError::InvalidRequest(format!(
                "attribute index {attr} out of range"
            )));
        }
        let c = classifier.schema.attributes[attr].classes.len();
        if class >= c {
            return Err(EditError::InvalidRequest(format!(
                "class {class} out of range for attribute {attr} ({c} classes)"
            )));
        }
    }
    if req.k == 0 || req.k > schedule.steps() {
        return Err(EditError::InvalidRequest(format!(
            "k = {} out of 1..={}",
            req.k,
            schedule.steps()
        )));
    }
    if req.n_views == 0 {
        return Err(EditError::InvalidRequest("n_views must be >= 1".into()));
    }
    if req.lambda < 0.0 {
        return Err(EditError::InvalidRequest("lambda must be >= 0".into()));
    }
    if req.bckg_weight < 0.0 {
        return Err(EditError::InvalidRequest("bckg_weight must be >= 0".into()));
    }
    let s = classifier.config.image_size;
    if req.source.shape() != [s, s, classifier.config.channels] {
        return Err(EditError::InvalidRequest(format!(
            "source shape {:?} does not match the models",
            req.source.shape()
        )));
    }
    Ok(())
}

fn grad_norm<S: Scalar>(t: &Tensor<S>) -> f64 {
    t.data()
        .iter()
        .map(|v| {
            let f = v.to_f64_();
            f * f
        })
        .sum::<f64>()
        .sqrt()
}

/// Run the full editing loop. The trace carries k + 1 records: one per
/// denoising step (t = k..1) plus a terminal record at t = 0 evaluated on
/// the final output.
pub fn edit<S: Scalar>(
    req: &EditRequest<S>,
    opts: &EditOptions,
    denoiser: &UNet<S>,
    classifier: &Classifier<S>,
    schedule: &NoiseSchedule<S>,
) -> Result<EditTrace, EditError> {
    validate(req, classifier, schedule)?;
    let shape = req.source.shape().to_vec();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let mut noise_rng = substream(req.seed, "edit-noise");
    let mut aug_rng = substream(req.seed, "edit-aug");

    // X_k ~ N(sqrt(ab_k) X_0, (1 - ab_k) I)
    let eps0 = normal_tensor::<S>(&shape, &mut noise_rng);
    let mut x = forward_sample(&req.source, req.k, &eps0, schedule)?;

    let need_attr = req.lambda > 0.0;
    let need_bckg = req.bckg_weight > 0.0;
    let bckg_ctx = BckgContext::new(classifier, &req.source, &opts.pd);
    let mbar_source = if opts.freeze_mask_from_source && need_bckg {
        Some(mask_for(classifier, &req.source, &req.targets)?)
    } else {
        None
    };

    let mut steps = Vec::with_capacity(req.k + 1);
    for t in (1..=req.k).rev() {
        let snapshot_due = opts.snapshot_stride > 0 && (req.k - t) % opts.snapshot_stride == 0;

        if !need_attr && !need_bckg {
            // unguided reverse step; rng use matches ancestral sampling
            let eps_hat = denoiser.denoise_batch(&x.reshaped(&[1, h, w, c]), &[t])?;
            let eps_hat = eps_hat.reshaped(&[h, w, c]);
            let zero = Tensor::zeros(&shape);
            let x0_snapshot = if snapshot_due {
                Some(SnapshotTensor::of(&crate::diffusion::predict_x0(
                    &x, &eps_hat, t, schedule,
                )?))
            } else {
                None
            };
            x = guided_step(&x, &eps_hat, &zero, t, schedule, &mut noise_rng)?;
            steps.push(StepRecord {
                t,
                attr_loss: None,
                bckg_loss: None,
                attr_grad_norm: None,
                bckg_grad_norm: None,
                mbar: None,
                x0_hat: x0_snapshot,
                attr_grad: None,
                bckg_grad: None,
            });
            continue;
        }

        let tape = Tape::new();
        tape.set_nan_guard(false);
        let bound_d = denoiser.params.bind_frozen(&tape);
        let bound_c = classifier.params.bind_frozen(&tape);
        let ab = schedule.alpha_bar(t);
        let inv_sqrt_ab = S::one() / ab.sqrt();
        let sqrt_1mab = (S::one() - ab).sqrt();

        // x̂0 on tape, with the gradient root depending on the mode
        let (x0_hat, root_leaf, eps_hat_val) = if opts.surrogate_x0_grad {
            let eps_hat = denoiser.denoise_batch(&x.reshaped(&[1, h, w, c]), &[t])?;
            let x0 =
                crate::diffusion::predict_x0(&x, &eps_hat.reshaped(&[h, w, c]), t, schedule)?;
            let leaf = tape.leaf(x0.reshaped(&[1, h, w, c]));
            (leaf.clone(), leaf, eps_hat.reshaped(&[h, w, c]))
        } else {
            let xt_leaf = tape.leaf(x.reshaped(&[1, h, w, c]));
            let eps_hat = denoiser.forward_on_tape(&bound_d, &xt_leaf, &[t]);
            let x0 = xt_leaf.sub(&eps_hat.scale(sqrt_1mab)).scale(inv_sqrt_ab);
            let ev = eps_hat.value().reshaped(&[h, w, c]);
            (x0, xt_leaf, ev)
        };

        // M̄ from the current x̂0 (literal per-step recompute) or frozen
        // from the source
        let mbar = if need_bckg {
            if opts.freeze_mask_from_source {
                mbar_source.clone()
            } else {
                Some(mask_for(
                    classifier,
                    &x0_hat.value().reshaped(&[h, w, c]),
                    &req.targets,
                )?)
            }
        } else {
            None
        };

        let obj = if need_attr {
            let views = extending_augmentations(&x0_hat, req.n_views, &mut aug_rng);
            Some(attr_objective(classifier, &bound_c, &views, &req.targets))
        } else {
            None
        };
        let bl = mbar.as_ref().map(|m| {
            bckg_loss_on_tape(&x0_hat, &bckg_ctx, m, classifier, &bound_c, &opts.pd)
        });

        let lambda = S::from_f64(req.lambda);
        let bw = S::from_f64(req.bckg_weight);
        let (total, attr_grad, bckg_grad) = if opts.record_components {
            let ga = obj
                .as_ref()
                .map(|o| o.backward().wrt(&root_leaf).reshaped(&[h, w, c]));
            let gb = bl
                .as_ref()
                .map(|b| b.backward().wrt(&root_leaf).reshaped(&[h, w, c]));
            let mut total = Tensor::zeros(&shape);
            if let Some(g) = &ga {
                total = total.add_t(&g.scale(lambda));
            }
            if let Some(g) = &gb {
                total = total.sub_t(&g.scale(bw));
            }
            (total, ga, gb)
        } else {
            let combined = match (&obj, &bl) {
                (Some(o), Some(b)) => o.scale(lambda).sub(&b.scale(bw)),
                (Some(o), None) => o.scale(lambda),
                (None, Some(b)) => b.scale(bw).scale(-S::one()),
                (None, None) => unreachable!("guidance branch requires a term"),
            };
            let g = combined.backward().wrt(&root_leaf).reshaped(&[h, w, c]);
            (g, None, None)
        };
        let total = if opts.surrogate_x0_grad {
            total.scale(inv_sqrt_ab)
        } else {
            total
        };

        let x0_snapshot = if snapshot_due {
            Some(SnapshotTensor::of(&x0_hat.value().reshaped(&[h, w, c])))
        } else {
            None
        };
        let mbar_snapshot = if snapshot_due {
            mbar.as_ref().map(SnapshotTensor::of)
        } else {
            None
        };

        x = guided_step(&x, &eps_hat_val, &total, t, schedule, &mut noise_rng)?;
        steps.push(StepRecord {
            t,
            attr_loss: obj.as_ref().map(|o| -o.value().item().to_f64_()),
            bckg_loss: bl.as_ref().map(|b| b.value().item().to_f64_()),
            attr_grad_norm: attr_grad.as_ref().map(grad_norm),
            bckg_grad_norm: bckg_grad.as_ref().map(grad_norm),
            mbar: mbar_snapshot,
            x0_hat: x0_snapshot,
            attr_grad: attr_grad.as_ref().map(SnapshotTensor::of),
            bckg_grad: bckg_grad.as_ref().map(SnapshotTensor::of),
        });
    }

    let output = x.clamp(-S::one(), S::one());

    // terminal record at t = 0: losses of the final output
    let (final_attr, final_bckg, final_mbar) = {
        let out_cls = classifier.classify(&output)?;
        let mut logp = 0.0f64;
        for &(attr, class) in &req.targets {
            let row = out_cls.logits[attr].data();
            let m = row
                .iter()
                .fold(S::neg_infinity(), |a, &v| if v > a { v } else { a });
            let mut z = S::zero();
            for &v in row {
                z = z + (v - m).exp();
            }
            logp += (row[class] - m - z.ln()).to_f64_();
        }
        let mbar = mask_for(classifier, &output, &req.targets)?;
        let bl = {
            let tape = Tape::new();
            tape.set_nan_guard(false);
            let bound_c = classifier.params.bind_frozen(&tape);
            let xv = tape.constant(output.reshaped(&[1, h, w, c]));
            bckg_loss_on_tape(&xv, &bckg_ctx, &mbar, classifier, &bound_c, &opts.pd)
                .value()
                .item()
                .to_f64_()
        };
        (-logp, bl, mbar)
    };
    steps.push(StepRecord {
        t: 0,
        attr_loss: Some(final_attr),
        bckg_loss: Some(final_bckg),
        attr_grad_norm: None,
        bckg_grad_norm: None,
        mbar: if opts.snapshot_stride > 0 {
            Some(SnapshotTensor::of(&final_mbar))
        } else {
            None
        },
        x0_hat: None,
        attr_grad: None,
        bckg_grad: None,
    });

    let mut hash = fnv_init();
    hash = fnv_u64(hash, output.content_hash());
    for s in &steps {
        hash = fnv_u64(hash, s.t as u64);
        hash = fnv_u64(hash, s.attr_loss.unwrap_or(0.0).to_bits());
        hash = fnv_u64(hash, s.bckg_loss.unwrap_or(0.0).to_bits());
    }

    Ok(EditTrace {
        steps,
        output: SnapshotTensor::of(&output),
        trace_hash: hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ClassifierConfig;
    use crate::denoiser::UNetConfig;
    use crate::diffusion::{ancestral_sample, build_schedule};
    use crate::glyph::AttributeSchema;

    fn tiny_models() -> (UNet<f32>, Classifier<f32>, NoiseSchedule<f32>) {
        let ucfg = UNetConfig {
            image_size: 8,
            channels: 3,
            widths: [8, 12, 16],
            temb_dim: 8,
            groups: 4,
            attn_heads: 2,
            t_max: 6,
        };
        let ccfg = ClassifierConfig {
            image_size: 8,
            channels: 3,
            patch: 4,
            dim: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
        };
        let den = UNet::new(ucfg, 3);
        let cls = Classifier::new(ccfg, AttributeSchema::synthetic(), 4);
        let sched = build_schedule::<f32>(6, 1e-3, 0.05).unwrap();
        (den, cls, sched)
    }

    fn tiny_request(seed: u64) -> EditRequest<f32> {
        let src = normal_tensor::<f32>(&[8, 8, 3], &mut substream(77, "src")).clamp(-1.0, 1.0);
        EditRequest {
            source: src,
            targets: vec![(2, 1)],
            k: 4,
            n_views: 2,
            lambda: 3.0,
            bckg_weight: 1.0,
            seed,
        }
    }

    #[test]
    fn trace_has_k_plus_one_records_and_bounded_output() {
        let (den, cls, sched) = tiny_models();
        let req = tiny_request(5);
        let trace = edit(&req, &EditOptions::default(), &den, &cls, &sched).unwrap();
        assert_eq!(trace.steps.len(), req.k + 1);
        assert_eq!(trace.steps.first().unwrap().t, req.k);
        assert_eq!(trace.steps.last().unwrap().t, 0);
        assert!(trace.output.data.iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn same_seed_same_trace_hash() {
        let (den, cls, sched) = tiny_models();
        let req = tiny_request(9);
        let a = edit(&req, &EditOptions::default(), &den, &cls, &sched).unwrap();
        let b = edit(&req, &EditOptions::default(), &den, &cls, &sched).unwrap();
        assert_eq!(a.trace_hash, b.trace_hash);
        let mut req2 = req.clone();
        req2.seed = 10;
        let c = edit(&req2, &EditOptions::default(), &den, &cls, &sched).unwrap();
        assert_ne!(a.trace_hash, c.trace_hash);
    }

    #[test]
    fn zero_guidance_reduces_to_unguided_ancestral() {
        let (den, cls, sched) = tiny_models();
        let mut req = tiny_request(11);
        req.lambda = 0.0;
        req.bckg_weight = 0.0;
        let trace = edit(&req, &EditOptions::default(), &den, &cls, &sched).unwrap();

        // replicate by hand: same noise stream, plain ancestral from (x_k, k)
        let mut noise_rng = substream(req.seed, "edit-noise");
        let eps0 = normal_tensor::<f32>(&[8, 8, 3], &mut noise_rng);
        let xk = forward_sample(&req.source, req.k, &eps0, &sched).unwrap();
        let den_fn = |x: &Tensor<f32>, t: usize| UNet::denoise(&den, x, t).unwrap();
        let manual = ancestral_sample(&den_fn, &sched, &[8, 8, 3], &mut noise_rng, Some((xk, req.k)))
            .unwrap()
            .clamp(-1.0, 1.0);
        for (a, b) in trace.output.data.iter().zip(manual.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits(), "bitwise identical to ancestral");
        }
    }

    #[test]
    fn total_grad_linear_in_lambda() {
        let (den, cls, sched) = tiny_models();
        let opts = EditOptions {
            record_components: true,
            ..EditOptions::default()
        };
        let req1 = tiny_request(13);
        let mut req2 = req1.clone();
        req2.lambda = 2.0 * req1.lambda;
        let t1 = edit(&req1, &opts, &den, &cls, &sched).unwrap();
        let t2 = edit(&req2, &opts, &den, &cls, &sched).unwrap();
        // same seed -> identical x_k and identical first-step x̂0, so the
        // recorded attr component is identical and scaling is exact
        let g1 = t1.steps[0].attr_grad.as_ref().unwrap();
        let g2 = t2.steps[0].attr_grad.as_ref().unwrap();
        for (a, b) in g1.data.iter().zip(g2.data.iter()) {
            assert_eq!(*a, *b, "attr gradient itself carries no lambda factor");
        }
    }

    #[test]
    fn n_views_one_is_identity_only() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(normal_tensor::<f32>(&[1, 8, 8, 3], &mut substream(1, "x")));
        let views = extending_augmentations(&x, 1, &mut substream(2, "aug"));
        assert_eq!(views.len(), 1);
        assert_eq!(views[0].value().content_hash(), x.value().content_hash());
    }

    #[test]
    fn augmentations_deterministic_from_seed() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(normal_tensor::<f32>(&[1, 8, 8, 3], &mut substream(3, "x")));
        let v1 = extending_augmentations(&x, 4, &mut substream(4, "aug"));
        let v2 = extending_augmentations(&x, 4, &mut substream(4, "aug"));
        for (a, b) in v1.iter().zip(v2.iter()) {
            assert_eq!(a.value().content_hash(), b.value().content_hash());
        }
    }

    #[test]
    fn flip_view_gradient_is_flipped_gradient() {
        // a mean-pixel loss through a flipped view: grad w.r.t. x equals the
        // flip of the grad through an unflipped view
        let tape = Tape::<f32>::new();
        let x = tape.leaf(normal_tensor::<f32>(&[1, 1, 4, 1], &mut substream(5, "x")));
        let wt = tape.constant(Tensor::from_vec(&[1, 1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]));
        let plain = x.mul(&wt).mean();
        let flipped = x.flip_w().mul(&wt).mean();
        let gp = plain.backward().wrt(&x);
        let gf = flipped.backward().wrt(&x);
        for i in 0..4 {
            assert_eq!(gp.data()[i], gf.data()[3 - i]);
        }
    }

    #[test]
    fn bckg_loss_zero_cases() {
        let (_, cls, _) = tiny_models();
        let src = normal_tensor::<f32>(&[8, 8, 3], &mut substream(5, "s")).clamp(-1.0, 1.0);
        let pd = PerceptualDistanceConfig::default();
        let ctx = BckgContext::new(&cls, &src, &pd);

        // identical image -> exactly zero
        let tape = Tape::new();
        let bound = cls.params.bind_frozen(&tape);
        let xv = tape.constant(src.reshaped(&[1, 8, 8, 3]));
        let mbar = Tensor::zeros(&[8, 8, 1]);
        let l = bckg_loss_on_tape(&xv, &ctx, &mbar, &cls, &bound, &pd);
        assert_eq!(l.value().item(), 0.0);

        // fully-masked (mbar = 1) -> zero for any image
        let other = normal_tensor::<f32>(&[8, 8, 3], &mut substream(6, "o"));
        let tape = Tape::new();
        let bound = cls.params.bind_frozen(&tape);
        let xv = tape.constant(other.reshaped(&[1, 8, 8, 3]));
        let ones = Tensor::full(&[8, 8, 1], 1.0f32);
        let l = bckg_loss_on_tape(&xv, &ctx, &ones, &cls, &bound, &pd);
        assert!(l.value().item().abs() < 1e-7);
    }

    #[test]
    fn bckg_loss_reduces_to_mse_without_pd_and_mask() {
        let (_, cls, _) = tiny_models();
        let src = normal_tensor::<f32>(&[8, 8, 3], &mut substream(7, "s"));
        let pd = PerceptualDistanceConfig { layers: vec![] };
        let ctx = BckgContext::new(&cls, &src, &pd);
        let other = normal_tensor::<f32>(&[8, 8, 3], &mut substream(8, "o"));
        let tape = Tape::new();
        let bound = cls.params.bind_frozen(&tape);
        let xv = tape.constant(other.reshaped(&[1, 8, 8, 3]));
        let mbar = Tensor::zeros(&[8, 8, 1]);
        let l = bckg_loss_on_tape(&xv, &ctx, &mbar, &cls, &bound, &pd);
        let expect = other.mse(&src);
        assert!((l.value().item() - expect).abs() < 1e-6);
    }

    #[test]
    fn bckg_loss_nonincreasing_in_mask() {
        // raising any mask pixel never increases the loss
        let (_, cls, _) = tiny_models();
        let src = normal_tensor::<f32>(&[8, 8, 3], &mut substream(9, "s"));
        let other = normal_tensor::<f32>(&[8, 8, 3], &mut substream(10, "o"));
        let pd = PerceptualDistanceConfig::default();
        let ctx = BckgContext::new(&cls, &src, &pd);
        let eval = |mbar: &Tensor<f32>| {
            let tape = Tape::new();
            let bound = cls.params.bind_frozen(&tape);
            let xv = tape.constant(other.reshaped(&[1, 8, 8, 3]));
            bckg_loss_on_tape(&xv, &ctx, mbar, &cls, &bound, &pd)
                .value()
                .item()
        };
        let mut mbar = Tensor::zeros(&[8, 8, 1]);
        let base = eval(&mbar);
        for px in [0usize, 13, 37, 63] {
            mbar.data_mut()[px] = 0.9;
            let raised = eval(&mbar);
            assert!(raised <= base + 1e-9, "raising mask pixel {px} raised loss");
        }
    }

    #[test]
    fn invalid_requests_rejected() {
        let (den, cls, sched) = tiny_models();
        let mut req = tiny_request(1);
        req.targets.clear();
        assert!(edit(&req, &EditOptions::default(), &den, &cls, &sched).is_err());
        let mut req = tiny_request(1);
        req.k = 99;
        assert!(edit(&req, &EditOptions::default(), &den, &cls, &sched).is_err());
        let mut req = tiny_request(1);
        req.targets = vec![(2, 9)];
        assert!(edit(&req, &EditOptions::default(), &den, &cls, &sched).is_err());
        let mut req = tiny_request(1);
        req.n_views = 0;
        assert!(edit(&req, &EditOptions::default(), &den, &cls, &sched).is_err());
    }

    #[test]
    fn mbar_in_unit_range_with_peak_one_every_step() {
        let (den, cls, sched) = tiny_models();
        let req = tiny_request(21);
        let opts = EditOptions {
            snapshot_stride: 1,
            ..EditOptions::default()
        };
        let trace = edit(&req, &opts, &den, &cls, &sched).unwrap();
        let mut saw = 0;
        for s in &trace.steps {
            if let Some(m) = &s.mbar {
                saw += 1;
                let peak = m.data.iter().cloned().fold(f32::MIN, f32::max);
                assert!((peak - 1.0).abs() < 1e-5, "peak {} at t={}", peak, s.t);
                assert!(m.data.iter().all(|&v| (0.0..=1.0 + 1e-6).contains(&v)));
            }
        }
        assert!(saw >= req.k, "every guided step snapshots its mask");
    }

    #[test]
    fn surrogate_grad_mode_runs_and_differs() {
        let (den, cls, sched) = tiny_models();
        let req = tiny_request(31);
        let full = edit(&req, &EditOptions::default(), &den, &cls, &sched).unwrap();
        let opts = EditOptions {
            surrogate_x0_grad: true,
            ..EditOptions::default()
        };
        let sur = edit(&req, &opts, &den, &cls, &sched).unwrap();
        assert_eq!(sur.steps.len(), full.steps.len());
        // with a denoiser whose output conv is zero-init, eps_hat = 0 and the
        // two gradient paths coincide analytically; this model has been
        // constructed fresh (zero output conv), so outputs match closely
        let mut max_d = 0.0f32;
        for (a, b) in sur.output.data.iter().zip(full.output.data.iter()) {
            max_d = max_d.max((a - b).abs());
        }
        assert!(max_d < 1e-4, "zero-init denoiser: paths agree, got {max_d}");
    }
}
