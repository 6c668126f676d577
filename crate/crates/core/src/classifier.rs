//! Patch-token transformer with an attention-pooling head: one learnable
//! query per attribute cross-attends over the patch tokens, each pooled
//! token is projected to that attribute's class logits, and the query's
//! attention weights double as a spatial relevance map.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{bilinear_resize_tensor, Tape, Var};
use crate::glyph::{AttributeSchema, LabeledImage};
use crate::nn::{attention, Bound, Conv2d, Linear, Norm, ParamSet, TransformerBlock, PId};
use crate::optim::Adam;
use crate::rng::{substream, uniform, Stream};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("input shape {got:?}, model expects {want:?}")]
    BadInputShape { got: Vec<usize>, want: Vec<usize> },
    #[error("label {label} out of range for attribute {attr} ({classes} classes)")]
    LabelOutOfRange {
        attr: usize,
        label: i32,
        classes: usize,
    },
    #[error("empty attribute target set")]
    EmptyTargets,
    #[error("training aborted: non-finite loss {loss} at step {step}")]
    NanLoss { step: usize, loss: f64 },
    #[error("empty dataset")]
    EmptyDataset,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassifierConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            image_size: 32,
            channels: 3,
            patch: 4,
            dim: 128,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl ClassifierConfig {
    pub fn tokens(&self) -> usize {
        let side = self.image_size / self.patch;
        side * side
    }

    pub fn token_side(&self) -> usize {
        self.image_size / self.patch
    }
}

/// Per-attribute logits plus per-attribute-query attention weights over
/// the patch tokens (already softmax-normalized).
#[derive(Debug, Clone)]
pub struct ClassifierOutput<S: Scalar> {
    /// One `[C_i]` vector per attribute (single image) — batch calls
    /// return `[B, C_i]`.
    pub logits: Vec<Tensor<S>>,
    /// `[A, tokens]` (single image) or `[B, A, tokens]`.
    pub attn: Tensor<S>,
}

pub struct Classifier<S: Scalar> {
    pub config: ClassifierConfig,
    pub schema: AttributeSchema,
    pub params: ParamSet<S>,
    patch_embed: Conv2d,
    pos: PId,
    blocks: Vec<TransformerBlock>,
    final_ln: Norm,
    pool_queries: PId,
    pool_wq: Linear,
    pool_wk: Linear,
    pool_wv: Linear,
    pool_wo: Linear,
    heads: Vec<Linear>,
}

impl<S: Scalar> Classifier<S> {
    pub fn new(config: ClassifierConfig, schema: AttributeSchema, seed: u64) -> Self {
        let mut rng = substream(seed, "classifier-init");
        let mut ps = ParamSet::new();
        let d = config.dim;
        let patch_embed = Conv2d::new(
            &mut ps,
            "backbone.patch_embed",
            config.channels,
            d,
            config.patch,
            config.patch,
            0,
            &mut rng,
        );
        let pos = ps.register(
            "backbone.pos_embed",
            crate::nn::init_normal(&[config.tokens(), d], 0.02, &mut rng),
        );
        let blocks = (0..config.depth)
            .map(|i| {
                TransformerBlock::new(
                    &mut ps,
                    &format!("backbone.block{i}"),
                    d,
                    config.heads,
                    config.mlp_ratio,
                    &mut rng,
                )
            })
            .collect();
        let final_ln = Norm::new(&mut ps, "backbone.final_ln", d);
        let n_attr = schema.len();
        let pool_queries = ps.register(
            "pool.queries",
            crate::nn::init_normal(&[n_attr, d], 0.02, &mut rng),
        );
        let pool_wq = Linear::new(&mut ps, "pool.wq", d, d, 0.02, &mut rng);
        let pool_wk = Linear::new(&mut ps, "pool.wk", d, d, 0.02, &mut rng);
        let pool_wv = Linear::new(&mut ps, "pool.wv", d, d, 0.02, &mut rng);
        let pool_wo = Linear::new(&mut ps, "pool.wo", d, d, 0.02, &mut rng);
        let heads = schema
            .attributes
            .iter()
            .enumerate()
            .map(|(i, attr)| {
                Linear::new(
                    &mut ps,
                    &format!("heads.attr{i}"),
                    d,
                    attr.classes.len(),
                    0.02,
                    &mut rng,
                )
            })
            .collect();
        Classifier {
            config,
            schema,
            params: ps,
            patch_embed,
            pos,
            blocks,
            final_ln,
            pool_queries,
            pool_wq,
            pool_wk,
            pool_wv,
            pool_wo,
            heads,
        }
    }

    /// Patch-embed `[N,H,W,C]` into tokens `[N,T,dim]` with position info.
    fn embed(&self, bound: &Bound<S>, x: &Var<S>) -> Var<S> {
        let n = x.shape()[0];
        let d = self.config.dim;
        let t = self.config.tokens();
        let h = self.patch_embed.forward(bound, x).reshape(&[n, t, d]);
        h.add(&bound.var(self.pos).repeat0(n))
    }

    /// Backbone features after block `depth` (0 = patch embedding only).
    /// Used by the perceptual-distance term of the background loss.
    pub fn features_on_tape(&self, bound: &Bound<S>, x: &Var<S>, depth: usize) -> Var<S> {
        let mut h = self.embed(bound, x);
        for blk in self.blocks.iter().take(depth) {
            h = blk.forward(bound, &h);
        }
        h
    }

    /// Full forward: per-attribute logits `[N, C_i]` and pooled attention
    /// `[N, A, tokens]`.
    pub fn forward_on_tape(&self, bound: &Bound<S>, x: &Var<S>) -> (Vec<Var<S>>, Var<S>) {
        let n = x.shape()[0];
        let d = self.config.dim;
        let t = self.config.tokens();
        let a = self.schema.len();
        let mut h = self.embed(bound, x);
        for blk in &self.blocks {
            h = blk.forward(bound, &h);
        }
        let tokens = self.final_ln.layer_norm(bound, &h);
        let q = self
            .pool_wq
            .forward(bound, &bound.var(self.pool_queries).repeat0(n).reshape(&[n, a, d]));
        let k = self.pool_wk.forward(bound, &tokens);
        let v = self.pool_wv.forward(bound, &tokens);
        // single-head cross attention so each query yields one unambiguous map
        let (pooled, attn) = attention(&q, &k, &v, 1);
        let pooled = self.pool_wo.forward(bound, &pooled);
        let attn = attn.reshape(&[n, a, t]);
        let logits = self
            .heads
            .iter()
            .enumerate()
            .map(|(i, head)| {
                let token_i = pooled.gather(1, &[i]).reshape(&[n, d]);
                head.forward(bound, &token_i)
            })
            .collect();
        (logits, attn)
    }

    /// Inference for a single `[H,W,C]` image.
    pub fn classify(&self, x: &Tensor<S>) -> Result<ClassifierOutput<S>, ClassifierError> {
        let s = self.config.image_size;
        let c = self.config.channels;
        if x.shape() != [s, s, c] {
            return Err(ClassifierError::BadInputShape {
                got: x.shape().to_vec(),
                want: vec![s, s, c],
            });
        }
        let out = self.classify_batch(&x.reshaped(&[1, s, s, c]))?;
        Ok(ClassifierOutput {
            logits: out
                .logits
                .iter()
                .map(|l| l.reshaped(&[l.shape()[1]]))
                .collect(),
            attn: out
                .attn
                .reshaped(&[self.schema.len(), self.config.tokens()]),
        })
    }

    pub fn classify_batch(&self, x: &Tensor<S>) -> Result<ClassifierOutput<S>, ClassifierError> {
        let s = self.config.image_size;
        let c = self.config.channels;
        if x.shape().len() != 4 || x.shape()[1] != s || x.shape()[2] != s || x.shape()[3] != c {
            return Err(ClassifierError::BadInputShape {
                got: x.shape().to_vec(),
                want: vec![x.shape()[0], s, s, c],
            });
        }
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        let xv = tape.constant(x.clone());
        let (logits, attn) = self.forward_on_tape(&bound, &xv);
        Ok(ClassifierOutput {
            logits: logits.iter().map(|l| l.value()).collect(),
            attn: attn.value(),
        })
    }

    /// Argmax class per attribute for a single image.
    pub fn predict(&self, x: &Tensor<S>) -> Result<Vec<usize>, ClassifierError> {
        let out = self.classify(x)?;
        Ok(out
            .logits
            .iter()
            .map(|l| {
                l.data()
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap()
            })
            .collect())
    }
}

/// Eq-style masked multi-attribute cross-entropy on tape:
/// sum over attributes of target-class CE, skipping −1 labels,
/// batch-meaned. `labels[b][i]` is the class of attribute i in example b.
pub fn masked_ce_on_tape<S: Scalar>(
    logits: &[Var<S>],
    labels: &[Vec<i32>],
    class_counts: &[usize],
) -> Result<Var<S>, ClassifierError> {
    let b = labels.len();
    assert!(b > 0);
    let tape = logits[0].tape().clone();
    let inv_b = S::from_f64(1.0 / b as f64);
    let mut total: Option<Var<S>> = None;
    for (i, logit) in logits.iter().enumerate() {
        let mut idx = Vec::with_capacity(b);
        let mut mask = Vec::with_capacity(b);
        let mut any = false;
        for lb in labels {
            let l = lb[i];
            if l < 0 {
                idx.push(0);
                mask.push(S::zero());
            } else {
                if l as usize >= class_counts[i] {
                    return Err(ClassifierError::LabelOutOfRange {
                        attr: i,
                        label: l,
                        classes: class_counts[i],
                    });
                }
                idx.push(l as usize);
                mask.push(S::one());
                any = true;
            }
        }
        if !any {
            continue;
        }
        let mask_t = tape.constant(Tensor::from_vec(&[b], mask));
        let logp = logit.log_softmax().row_select(&idx).mul(&mask_t).sum();
        let term = logp.scale(-inv_b);
        total = Some(match total {
            Some(t) => t.add(&term),
            None => term,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(S::zero())),
    })
}

/// Value-level masked cross-entropy for a single classified image.
pub fn masked_ce<S: Scalar>(
    out: &ClassifierOutput<S>,
    labels: &[i32],
    class_counts: &[usize],
) -> Result<S, ClassifierError> {
    let mut total = S::zero();
    for (i, logit) in out.logits.iter().enumerate() {
        let l = labels[i];
        if l < 0 {
            continue;
        }
        if l as usize >= class_counts[i] {
            return Err(ClassifierError::LabelOutOfRange {
                attr: i,
                label: l,
                classes: class_counts[i],
            });
        }
        let row = logit.data();
        let m = row.iter().fold(S::neg_infinity(), |a, &v| if v > a { v } else { a });
        let mut z = S::zero();
        for &v in row {
            z = z + (v - m).exp();
        }
        let logp = row[l as usize] - m - z.ln();
        total = total - logp;
    }
    Ok(total)
}

/// Average the selected attributes' attention maps, reshape to the token
/// grid, upsample to image resolution and normalize so the peak is 1.
/// Returns `[H, W, 1]` in [0, 1].
pub fn attention_map<S: Scalar>(
    out: &ClassifierOutput<S>,
    targets: &[usize],
    token_side: usize,
    image_size: usize,
) -> Result<Tensor<S>, ClassifierError> {
    if targets.is_empty() {
        return Err(ClassifierError::EmptyTargets);
    }
    let tokens = token_side * token_side;
    let (a, t) = (out.attn.shape()[0], out.attn.shape()[1]);
    assert_eq!(t, tokens);
    let mut avg = vec![S::zero(); tokens];
    let inv = S::from_f64(1.0 / targets.len() as f64);
    for &ti in targets {
        assert!(ti < a, "target attribute out of range");
        for j in 0..tokens {
            avg[j] = avg[j] + out.attn.data()[ti * tokens + j] * inv;
        }
    }
    let coarse = Tensor::from_vec(&[1, token_side, token_side, 1], avg);
    let fine = bilinear_resize_tensor(&coarse, image_size, image_size);
    let peak = fine.max_abs();
    let fine = fine.scale(S::one() / peak);
    Ok(fine.reshaped(&[image_size, image_size, 1]))
}

/// Which parameters stay trainable during finetuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    EndToEnd,
    AttnpoolOnly,
    LastKBlocks(usize),
}

impl FreezeMode {
    pub fn apply<S: Scalar>(&self, model: &mut Classifier<S>) -> usize {
        let depth = model.config.depth;
        match self {
            FreezeMode::EndToEnd => model.params.set_trainable_where(|_| true),
            FreezeMode::AttnpoolOnly => model
                .params
                .set_trainable_where(|n| n.starts_with("pool.") || n.starts_with("heads.")),
            FreezeMode::LastKBlocks(k) => {
                let first_trainable = depth.saturating_sub(*k);
                model.params.set_trainable_where(|n| {
                    if n.starts_with("pool.") || n.starts_with("heads.") {
                        return true;
                    }
                    if n.starts_with("backbone.final_ln") {
                        return true;
                    }
                    if let Some(rest) = n.strip_prefix("backbone.block") {
                        if let Some(i) = rest.split('.').next().and_then(|s| s.parse::<usize>().ok())
                        {
                            return i >= first_trainable;
                        }
                    }
                    false
                })
            }
        }
    }

    pub fn parse(s: &str) -> Option<FreezeMode> {
        match s {
            "end_to_end" => Some(FreezeMode::EndToEnd),
            "attnpool_only" => Some(FreezeMode::AttnpoolOnly),
            other => other
                .strip_prefix("last")
                .and_then(|k| k.parse().ok())
                .map(FreezeMode::LastKBlocks),
        }
    }

    pub fn name(&self) -> String {
        match self {
            FreezeMode::EndToEnd => "end_to_end".into(),
            FreezeMode::AttnpoolOnly => "attnpool_only".into(),
            FreezeMode::LastKBlocks(k) => format!("last{k}"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub freeze_mode: FreezeMode,
    pub augment: bool,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            epochs: 10,
            batch_size: 64,
            lr: 1e-3,
            freeze_mode: FreezeMode::EndToEnd,
            augment: false,
        }
    }
}

/// Training-time augmentation: horizontal flip, brightness jitter ±0.1,
/// random resized crop with scale in [0.8, 1.0]. Labels are unchanged.
pub fn augment_image(img: &Tensor<f32>, rng: &mut Stream) -> Tensor<f32> {
    let size = img.shape()[0];
    let mut out = img.clone();
    if rng.gen_bool(0.5) {
        let mut flipped = vec![0.0f32; out.numel()];
        for y in 0..size {
            for x in 0..size {
                for c in 0..3 {
                    flipped[(y * size + x) * 3 + c] = out.data()[(y * size + (size - 1 - x)) * 3 + c];
                }
            }
        }
        out = Tensor::from_vec(out.shape(), flipped);
    }
    let scale: f64 = uniform(0.8, 1.0f64, rng);
    let crop = ((size as f64 * scale).round() as usize).clamp(8, size);
    if crop < size {
        let oy = rng.gen_range(0..=size - crop);
        let ox = rng.gen_range(0..=size - crop);
        let tape = Tape::new();
        tape.set_nan_guard(false);
        let v = tape
            .constant(out.reshaped(&[1, size, size, 3]))
            .slice(&[0, oy, ox, 0], &[1, crop, crop, 3])
            .bilinear_resize(size, size);
        out = v.value().reshaped(&[size, size, 3]);
    }
    let b: f32 = uniform(-0.1, 0.1, rng);
    out.map(|v| (v + b).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub freeze_mode: String,
    pub augment: bool,
    pub trainable_tensors: usize,
    pub loss_curve: Vec<f64>,
    /// Per-attribute validation accuracy; None when no applicable example.
    pub per_attribute_accuracy: Vec<Option<f64>>,
    pub average_accuracy: f64,
}

fn to_scalar_image<S: Scalar>(img: &Tensor<f32>) -> Tensor<S> {
    Tensor::from_vec(
        img.shape(),
        img.data().iter().map(|&v| S::from_f64(v as f64)).collect(),
    )
}

fn stack_images<S: Scalar>(images: &[Tensor<f32>]) -> Tensor<S> {
    let shape = images[0].shape();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        data.extend(img.data().iter().map(|&v| S::from_f64(v as f64)));
    }
    Tensor::from_vec(&[images.len(), h, w, c], data)
}

/// Per-attribute argmax accuracy over applicable examples.
pub fn eval_accuracy<S: Scalar>(
    model: &Classifier<S>,
    data: &[LabeledImage],
    batch: usize,
) -> (Vec<Option<f64>>, f64) {
    let n_attr = model.schema.len();
    let mut hit = vec![0usize; n_attr];
    let mut cnt = vec![0usize; n_attr];
    let mut i = 0;
    while i < data.len() {
        let until = (i + batch).min(data.len());
        let images: Vec<_> = data[i..until].iter().map(|d| d.image.clone()).collect();
        let xs = stack_images::<S>(&images);
        let out = model.classify_batch(&xs).expect("shapes fixed");
        for (bi, item) in data[i..until].iter().enumerate() {
            for a in 0..n_attr {
                let l = item.labels[a];
                if l < 0 {
                    continue;
                }
                let c = model.schema.attributes[a].classes.len();
                let row = &out.logits[a].data()[bi * c..(bi + 1) * c];
                let pred = row
                    .iter()
                    .enumerate()
                    .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                    .map(|(j, _)| j)
                    .unwrap();
                cnt[a] += 1;
                if pred == l as usize {
                    hit[a] += 1;
                }
            }
        }
        i = until;
    }
    let per: Vec<Option<f64>> = (0..n_attr)
        .map(|a| {
            if cnt[a] == 0 {
                None
            } else {
                Some(hit[a] as f64 / cnt[a] as f64)
            }
        })
        .collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let avg = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    (per, avg)
}

/// Train with the masked cross-entropy; evaluates on `val` afterwards.
pub fn train_classifier<S: Scalar>(
    model: &mut Classifier<S>,
    train: &[LabeledImage],
    val: &[LabeledImage],
    config: &ClassifierTrainConfig,
    seed: u64,
) -> Result<ClassifierMetrics, ClassifierError> {
    if train.is_empty() {
        return Err(ClassifierError::EmptyDataset);
    }
    let trainable = config.freeze_mode.apply(model);
    let class_counts = model.schema.class_counts();
    let mut opt = Adam::new(&model.params, config.lr);
    let mut shuffle_rng = substream(seed, "classifier-shuffle");
    let mut aug_rng = substream(seed, "classifier-aug");
    let mut curve = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    for _epoch in 0..config.epochs {
        // Fisher-Yates from the seeded stream
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(config.batch_size) {
            let images: Vec<Tensor<f32>> = chunk
                .iter()
                .map(|&i| {
                    if config.augment {
                        augment_image(&train[i].image, &mut aug_rng)
                    } else {
                        train[i].image.clone()
                    }
                })
                .collect();
            let labels: Vec<Vec<i32>> = chunk.iter().map(|&i| train[i].labels.clone()).collect();
            let xs = stack_images::<S>(&images);
            let tape = Tape::new();
            tape.set_nan_guard(false);
            let bound = model.params.bind(&tape);
            let xv = tape.constant(xs);
            let (logits, _) = model.forward_on_tape(&bound, &xv);
            let loss = masked_ce_on_tape(&logits, &labels, &class_counts)?;
            let loss_val = loss.value().item().to_f64_();
            if !loss_val.is_finite() {
                return Err(ClassifierError::NanLoss {
                    step,
                    loss: loss_val,
                });
            }
            curve.push(loss_val);
            let grads = loss.backward();
            opt.step(&mut model.params, &bound, &grads);
            step += 1;
        }
    }
    let (per, avg) = eval_accuracy(model, val, config.batch_size.max(1));
    Ok(ClassifierMetrics {
        freeze_mode: config.freeze_mode.name(),
        augment: config.augment,
        trainable_tensors: trainable,
        loss_curve: curve,
        per_attribute_accuracy: per,
        average_accuracy: avg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_tensor;

    fn tiny() -> Classifier<f32> {
        let cfg = ClassifierConfig {
            image_size: 8,
            channels: 3,
            patch: 4,
            dim: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
        };
        Classifier::new(cfg, AttributeSchema::synthetic(), 5)
    }

    #[test]
    fn attention_rows_sum_to_one_per_attribute() {
        let model = tiny();
        let x = normal_tensor::<f32>(&[8, 8, 3], &mut substream(1, "x"));
        let out = model.classify(&x).unwrap();
        assert_eq!(out.attn.shape(), &[5, 4]);
        for row in out.attn.data().chunks_exact(4) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
        assert_eq!(out.logits.len(), 5);
        assert_eq!(out.logits[0].shape(), &[4]);
        assert_eq!(out.logits[4].shape(), &[2]);
    }

    #[test]
    fn identical_inputs_identical_outputs() {
        let model = tiny();
        let x = normal_tensor::<f32>(&[8, 8, 3], &mut substream(2, "x"));
        let a = model.classify(&x).unwrap();
        let b = model.classify(&x).unwrap();
        assert_eq!(a.attn.content_hash(), b.attn.content_hash());
        for (l1, l2) in a.logits.iter().zip(b.logits.iter()) {
            assert_eq!(l1.content_hash(), l2.content_hash());
        }
    }

    #[test]
    fn masked_ce_analytic_values() {
        // all labels masked -> 0; uniform logits -> sum of ln C over the
        // applicable attributes.
        let counts = [4usize, 3, 4, 3, 2];
        let out = ClassifierOutput::<f64> {
            logits: counts.iter().map(|&c| Tensor::zeros(&[c])).collect(),
            attn: Tensor::zeros(&[5, 4]),
        };
        let all_masked = masked_ce(&out, &[-1, -1, -1, -1, -1], &counts).unwrap();
        assert_eq!(all_masked, 0.0);

        let one = masked_ce(&out, &[0, -1, -1, -1, -1], &counts).unwrap();
        assert!((one - 4.0f64.ln()).abs() < 1e-9);

        let two = masked_ce(&out, &[0, 1, -1, -1, -1], &counts).unwrap();
        assert!((two - (4.0f64.ln() + 3.0f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn masked_ce_rejects_out_of_range_label() {
        let counts = [4usize, 3, 4, 3, 2];
        let out = ClassifierOutput::<f64> {
            logits: counts.iter().map(|&c| Tensor::zeros(&[c])).collect(),
            attn: Tensor::zeros(&[5, 4]),
        };
        assert!(matches!(
            masked_ce(&out, &[4, -1, -1, -1, -1], &counts),
            Err(ClassifierError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn attention_map_single_target_is_own_map() {
        let model = tiny();
        let x = normal_tensor::<f32>(&[8, 8, 3], &mut substream(3, "x"));
        let out = model.classify(&x).unwrap();
        let m = attention_map(&out, &[2], 2, 8).unwrap();
        assert_eq!(m.shape(), &[8, 8, 1]);
        let peak = m.data().iter().cloned().fold(f32::MIN, f32::max);
        assert!((peak - 1.0).abs() < 1e-5, "peak normalized to 1");
        assert!(m.data().iter().all(|&v| (0.0..=1.0 + 1e-6).contains(&v)));
    }

    #[test]
    fn attention_map_two_disjoint_one_hot_peaks() {
        // hand-build an output with one-hot attentions on different tokens
        let mut attn = vec![0.0f32; 5 * 4];
        attn[0] = 1.0; // attr 0 -> token 0
        attn[4 + 3] = 1.0; // attr 1 -> token 3
        for a in 2..5 {
            attn[a * 4] = 1.0;
        }
        let out = ClassifierOutput::<f32> {
            logits: vec![Tensor::zeros(&[2]); 5],
            attn: Tensor::from_vec(&[5, 4], attn),
        };
        // average of attrs 0 and 1 before normalization has two 0.5 peaks;
        // after peak normalization both become 1.
        let m = attention_map(&out, &[0, 1], 2, 2).unwrap();
        assert_eq!(m.shape(), &[2, 2, 1]);
        let d = m.data();
        assert!((d[0] - 1.0).abs() < 1e-6);
        assert!((d[3] - 1.0).abs() < 1e-6);
        assert!(d[1] < 0.2 && d[2] < 0.2);
    }

    #[test]
    fn empty_target_set_is_an_error() {
        let model = tiny();
        let x = normal_tensor::<f32>(&[8, 8, 3], &mut substream(4, "x"));
        let out = model.classify(&x).unwrap();
        assert!(matches!(
            attention_map(&out, &[], 2, 8),
            Err(ClassifierError::EmptyTargets)
        ));
    }

    #[test]
    fn freeze_modes_mark_expected_tensors() {
        let mut model = tiny();
        let n = FreezeMode::AttnpoolOnly.apply(&mut model);
        // pool: queries + 4 linears (w+b each) = 9; heads: 5 linears = 10
        assert_eq!(n, 19);
        let n = FreezeMode::EndToEnd.apply(&mut model);
        assert_eq!(n, model.params.len());
        let n_last1 = FreezeMode::LastKBlocks(1).apply(&mut model);
        assert!(n_last1 > 19 && n_last1 < model.params.len());
    }

    #[test]
    fn attnpool_only_training_keeps_frozen_tensors_bit_identical() {
        let mut model = tiny();
        let schema = AttributeSchema::synthetic();
        let data = crate::glyph::gen_dataset(12, 31, &schema)
            .into_iter()
            .map(|mut d| {
                // tiny model wants 8x8 inputs; shrink with the value-level resize
                d.image = bilinear_resize_tensor(&d.image.reshaped(&[1, 32, 32, 3]), 8, 8)
                    .reshaped(&[8, 8, 3]);
                d
            })
            .collect::<Vec<_>>();
        let before = model.params.tensor_hashes();
        let cfg = ClassifierTrainConfig {
            epochs: 1,
            batch_size: 4,
            lr: 1e-3,
            freeze_mode: FreezeMode::AttnpoolOnly,
            augment: false,
        };
        train_classifier(&mut model, &data, &data, &cfg, 7).unwrap();
        let after = model.params.tensor_hashes();
        let mut changed = 0;
        for ((name, h1), (_, h2)) in before.iter().zip(after.iter()) {
            let frozen = !(name.starts_with("pool.") || name.starts_with("heads."));
            if frozen {
                assert_eq!(h1, h2, "frozen tensor {name} changed");
            } else if h1 != h2 {
                changed += 1;
            }
        }
        assert!(changed > 0, "trainable tensors should move");
    }

    #[test]
    fn attribute_with_all_masked_labels_contributes_zero() {
        let counts = vec![4usize, 3, 4, 3, 2];
        let tape = Tape::<f64>::new();
        let logits: Vec<_> = counts
            .iter()
            .map(|&c| tape.leaf(Tensor::zeros(&[2, c])))
            .collect();
        // attribute 1 masked everywhere; others class 0
        let labels = vec![vec![0, -1, 0, 0, 0], vec![0, -1, 0, 0, 0]];
        let loss = masked_ce_on_tape(&logits, &labels, &counts).unwrap();
        let expect = 4.0f64.ln() + 4.0f64.ln() + 3.0f64.ln() + 2.0f64.ln();
        assert!((loss.value().item() - expect).abs() < 1e-9);
        let grads = loss.backward();
        let g1 = grads.wrt(&logits[1]);
        assert!(g1.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn schema_permutation_leaves_total_loss_invariant() {
        // swapping two attributes (with matching labels) must not change
        // the total masked CE
        let counts_a = vec![4usize, 3];
        let counts_b = vec![3usize, 4];
        let tape = Tape::<f64>::new();
        let l0 = tape.leaf(Tensor::from_vec(&[1, 4], vec![0.3, -0.2, 1.0, 0.0]));
        let l1 = tape.leaf(Tensor::from_vec(&[1, 3], vec![0.5, 0.1, -0.6]));
        let a = masked_ce_on_tape(&[l0.clone(), l1.clone()], &[vec![2, 1]], &counts_a).unwrap();
        let b = masked_ce_on_tape(&[l1, l0], &[vec![1, 2]], &counts_b).unwrap();
        assert!((a.value().item() - b.value().item()).abs() < 1e-12);
    }
}
