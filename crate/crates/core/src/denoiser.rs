//! The noise-prediction U-Net and its training loop.
//!
//! Two resolution halvings (e.g. 32→16→8) with two residual blocks per
//! level, sinusoidal timestep embedding injected per block through an
//! affine projection, self-attention at the bottleneck, additive skip
//! connections, and a zero-initialized output conv so a fresh model
//! predicts exactly zero noise.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::diffusion::{forward_sample, Denoiser, NoiseSchedule};
use crate::glyph::LabeledImage;
use crate::nn::{sinusoidal_embedding, Bound, Conv2d, Norm, ParamSet, ResBlock, PId};
use crate::optim::Adam;
use crate::rng::{substream, Stream};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error("step {t} out of range 1..={t_max}")]
    StepOutOfRange { t: usize, t_max: usize },
    #[error("input shape {got:?}, model expects {want:?}")]
    BadInputShape { got: Vec<usize>, want: Vec<usize> },
    #[error("training aborted: non-finite loss {loss} at step {step}")]
    NanLoss { step: usize, loss: f64 },
    #[error("empty dataset")]
    EmptyDataset,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UNetConfig {
    pub image_size: usize,
    pub channels: usize,
    pub widths: [usize; 3],
    pub temb_dim: usize,
    pub groups: usize,
    pub attn_heads: usize,
    pub t_max: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            image_size: 32,
            channels: 3,
            widths: [32, 64, 128],
            temb_dim: 64,
            groups: 8,
            attn_heads: 4,
            t_max: 200,
        }
    }
}

struct MidAttention {
    norm: Norm,
    wq: crate::nn::Linear,
    wk: crate::nn::Linear,
    wv: crate::nn::Linear,
    wo: crate::nn::Linear,
    heads: usize,
    groups: usize,
}

impl MidAttention {
    fn new<S: Scalar>(
        ps: &mut ParamSet<S>,
        name: &str,
        dim: usize,
        heads: usize,
        groups: usize,
        rng: &mut Stream,
    ) -> Self {
        let std = (1.0 / dim as f64).sqrt();
        MidAttention {
            norm: Norm::new(ps, &format!("{name}.norm"), dim),
            wq: crate::nn::Linear::new(ps, &format!("{name}.wq"), dim, dim, std, rng),
            wk: crate::nn::Linear::new(ps, &format!("{name}.wk"), dim, dim, std, rng),
            wv: crate::nn::Linear::new(ps, &format!("{name}.wv"), dim, dim, std, rng),
            wo: crate::nn::Linear::new(ps, &format!("{name}.wo"), dim, dim, std, rng),
            heads,
            groups,
        }
    }

    fn forward<S: Scalar>(&self, bound: &Bound<S>, x: &Var<S>) -> Var<S> {
        let shape = x.shape();
        let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let tokens = self
            .norm
            .group_norm(bound, x, self.groups)
            .reshape(&[n, h * w, c]);
        let q = self.wq.forward(bound, &tokens);
        let k = self.wk.forward(bound, &tokens);
        let v = self.wv.forward(bound, &tokens);
        let (att, _) = crate::nn::attention(&q, &k, &v, self.heads);
        let out = self.wo.forward(bound, &att).reshape(&[n, h, w, c]);
        x.add(&out)
    }
}

/// ε_θ(x_t, t).
pub struct UNet<S: Scalar> {
    pub config: UNetConfig,
    pub params: ParamSet<S>,
    conv_in: Conv2d,
    enc1: [ResBlock; 2],
    down1: Conv2d,
    enc2: [ResBlock; 2],
    down2: Conv2d,
    mid1: ResBlock,
    mid_attn: MidAttention,
    mid2: ResBlock,
    up1: Conv2d,
    dec2: [ResBlock; 2],
    up2: Conv2d,
    dec1: [ResBlock; 2],
    out_norm: Norm,
    out_conv: Conv2d,
}

impl<S: Scalar> UNet<S> {
    pub fn new(config: UNetConfig, seed: u64) -> Self {
        let mut rng = substream(seed, "denoiser-init");
        let mut ps = ParamSet::new();
        let [w0, w1, w2] = config.widths;
        let g = config.groups;
        let td = config.temb_dim;
        let rb = |ps: &mut ParamSet<S>, name: &str, ci: usize, co: usize, rng: &mut Stream| {
            ResBlock::new(ps, name, ci, co, td, g, rng)
        };
        let conv_in = Conv2d::new(&mut ps, "conv_in", config.channels, w0, 3, 1, 1, &mut rng);
        let enc1 = [
            rb(&mut ps, "enc1.block0", w0, w0, &mut rng),
            rb(&mut ps, "enc1.block1", w0, w0, &mut rng),
        ];
        let down1 = Conv2d::new(&mut ps, "down1", w0, w1, 3, 2, 1, &mut rng);
        let enc2 = [
            rb(&mut ps, "enc2.block0", w1, w1, &mut rng),
            rb(&mut ps, "enc2.block1", w1, w1, &mut rng),
        ];
        let down2 = Conv2d::new(&mut ps, "down2", w1, w2, 3, 2, 1, &mut rng);
        let mid1 = rb(&mut ps, "mid.block0", w2, w2, &mut rng);
        let mid_attn = MidAttention::new(&mut ps, "mid.attn", w2, config.attn_heads, g, &mut rng);
        let mid2 = rb(&mut ps, "mid.block1", w2, w2, &mut rng);
        let up1 = Conv2d::new(&mut ps, "up1", w2, w1, 3, 1, 1, &mut rng);
        let dec2 = [
            rb(&mut ps, "dec2.block0", w1, w1, &mut rng),
            rb(&mut ps, "dec2.block1", w1, w1, &mut rng),
        ];
        let up2 = Conv2d::new(&mut ps, "up2", w1, w0, 3, 1, 1, &mut rng);
        let dec1 = [
            rb(&mut ps, "dec1.block0", w0, w0, &mut rng),
            rb(&mut ps, "dec1.block1", w0, w0, &mut rng),
        ];
        let out_norm = Norm::new(&mut ps, "out.norm", w0);
        let out_conv = Conv2d::new_zeros(&mut ps, "out.conv", w0, config.channels, 3, 1, 1);
        UNet {
            config,
            params: ps,
            conv_in,
            enc1,
            down1,
            enc2,
            down2,
            mid1,
            mid_attn,
            mid2,
            up1,
            dec2,
            up2,
            dec1,
            out_norm,
            out_conv,
        }
    }

    /// Full forward on a tape: x `[N,H,W,C]`, one timestep per sample.
    pub fn forward_on_tape(&self, bound: &Bound<S>, x: &Var<S>, ts: &[usize]) -> Var<S> {
        let temb = x
            .tape()
            .constant(sinusoidal_embedding::<S>(ts, self.config.temb_dim));
        let h = self.conv_in.forward(bound, x);
        let mut h1 = h;
        for blk in &self.enc1 {
            h1 = blk.forward(bound, &h1, &temb);
        }
        let mut h2 = self.down1.forward(bound, &h1);
        for blk in &self.enc2 {
            h2 = blk.forward(bound, &h2, &temb);
        }
        let mut m = self.down2.forward(bound, &h2);
        m = self.mid1.forward(bound, &m, &temb);
        m = self.mid_attn.forward(bound, &m);
        m = self.mid2.forward(bound, &m, &temb);
        let mut u2 = self.up1.forward(bound, &m.upsample_nearest_2x()).add(&h2);
        for blk in &self.dec2 {
            u2 = blk.forward(bound, &u2, &temb);
        }
        let mut u1 = self.up2.forward(bound, &u2.upsample_nearest_2x()).add(&h1);
        for blk in &self.dec1 {
            u1 = blk.forward(bound, &u1, &temb);
        }
        let out = self
            .out_norm
            .group_norm(bound, &u1, self.config.groups)
            .silu();
        self.out_conv.forward(bound, &out)
    }

    /// Inference on a batch, no gradients recorded.
    pub fn denoise_batch(&self, x: &Tensor<S>, ts: &[usize]) -> Result<Tensor<S>, DenoiserError> {
        for &t in ts {
            if t == 0 || t > self.config.t_max {
                return Err(DenoiserError::StepOutOfRange {
                    t,
                    t_max: self.config.t_max,
                });
            }
        }
        let want = vec![
            ts.len(),
            self.config.image_size,
            self.config.image_size,
            self.config.channels,
        ];
        if x.shape() != want {
            return Err(DenoiserError::BadInputShape {
                got: x.shape().to_vec(),
                want,
            });
        }
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        let xv = tape.constant(x.clone());
        Ok(self.forward_on_tape(&bound, &xv, ts).value())
    }

    /// Single-image ε̂ for an `[H,W,C]` input.
    pub fn denoise(&self, xt: &Tensor<S>, t: usize) -> Result<Tensor<S>, DenoiserError> {
        let s = self.config.image_size;
        let c = self.config.channels;
        if xt.shape() != [s, s, c] {
            return Err(DenoiserError::BadInputShape {
                got: xt.shape().to_vec(),
                want: vec![s, s, c],
            });
        }
        let batched = xt.reshaped(&[1, s, s, c]);
        let out = self.denoise_batch(&batched, &[t])?;
        Ok(out.reshaped(&[s, s, c]))
    }

    pub fn out_conv_ids(&self) -> (PId, PId) {
        (self.out_conv.w, self.out_conv.b)
    }
}

impl<S: Scalar> Denoiser<S> for UNet<S> {
    fn denoise(&self, xt: &Tensor<S>, t: usize) -> Tensor<S> {
        UNet::denoise(self, xt, t).expect("valid shape and step")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiserTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        DenoiserTrainConfig {
            steps: 4000,
            batch_size: 64,
            lr: 1e-4,
        }
    }
}

/// One optimization step of the ε-prediction MSE on a fixed batch.
/// Exposed so the editor-era tests can probe training behavior cheaply.
pub fn denoiser_train_step<S: Scalar>(
    model: &mut UNet<S>,
    opt: &mut Adam<S>,
    xs: &Tensor<S>,
    ts: &[usize],
    eps: &Tensor<S>,
) -> Result<f64, DenoiserError> {
    let tape = Tape::new();
    tape.set_nan_guard(false);
    let bound = model.params.bind(&tape);
    let xv = tape.constant(xs.clone());
    let target = tape.constant(eps.clone());
    let eps_hat = model.forward_on_tape(&bound, &xv, ts);
    let diff = eps_hat.sub(&target);
    let loss = diff.mul(&diff).mean();
    let loss_val = loss.value().item().to_f64_();
    if !loss_val.is_finite() {
        return Err(DenoiserError::NanLoss {
            step: 0,
            loss: loss_val,
        });
    }
    let grads = loss.backward();
    opt.step(&mut model.params, &bound, &grads);
    Ok(loss_val)
}

/// Assemble a noised training batch: per-sample uniform t, injected noise.
pub fn make_noised_batch<S: Scalar>(
    dataset: &[LabeledImage],
    indices: &[usize],
    schedule: &NoiseSchedule<S>,
    rng: &mut Stream,
) -> (Tensor<S>, Vec<usize>, Tensor<S>) {
    let shape = dataset[0].image.shape().to_vec();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let b = indices.len();
    let mut xt_data = Vec::with_capacity(b * h * w * c);
    let mut eps_data = Vec::with_capacity(b * h * w * c);
    let mut ts = Vec::with_capacity(b);
    for &i in indices {
        let t = rng.gen_range(1..=schedule.steps());
        ts.push(t);
        // images are stored f32; exact for f32, upcast for f64
        let x0 = Tensor::<S>::from_vec(
            dataset[i].image.shape(),
            dataset[i]
                .image
                .data()
                .iter()
                .map(|&v| S::from_f64(v as f64))
                .collect(),
        );
        let e = crate::rng::normal_tensor::<S>(&shape, rng);
        let xt = forward_sample(&x0, t, &e, schedule).expect("shapes match");
        xt_data.extend_from_slice(xt.data());
        eps_data.extend_from_slice(e.data());
    }
    (
        Tensor::from_vec(&[b, h, w, c], xt_data),
        ts,
        Tensor::from_vec(&[b, h, w, c], eps_data),
    )
}

/// Train ε_θ with the reweighted MSE objective; returns the loss curve.
pub fn train_denoiser<S: Scalar>(
    model: &mut UNet<S>,
    dataset: &[LabeledImage],
    schedule: &NoiseSchedule<S>,
    config: &DenoiserTrainConfig,
    seed: u64,
) -> Result<Vec<f64>, DenoiserError> {
    if dataset.is_empty() {
        return Err(DenoiserError::EmptyDataset);
    }
    let mut opt = Adam::new(&model.params, config.lr);
    let mut data_rng = substream(seed, "denoiser-data");
    let mut noise_rng = substream(seed, "denoiser-noise");
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let indices: Vec<usize> = (0..config.batch_size)
            .map(|_| data_rng.gen_range(0..dataset.len()))
            .collect();
        let (xt, ts, eps) = make_noised_batch(dataset, &indices, schedule, &mut noise_rng);
        let loss = denoiser_train_step(model, &mut opt, &xt, &ts, &eps).map_err(|e| match e {
            DenoiserError::NanLoss { loss, .. } => DenoiserError::NanLoss { step, loss },
            other => other,
        })?;
        curve.push(loss);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::build_schedule;
    use crate::rng::normal_tensor;

    fn tiny_config() -> UNetConfig {
        UNetConfig {
            image_size: 8,
            channels: 3,
            widths: [8, 12, 16],
            temb_dim: 8,
            groups: 4,
            attn_heads: 2,
            t_max: 10,
        }
    }

    #[test]
    fn fresh_model_predicts_exactly_zero() {
        let model = UNet::<f32>::new(tiny_config(), 1);
        let x = normal_tensor::<f32>(&[8, 8, 3], &mut substream(2, "x"));
        let out = model.denoise(&x, 3).unwrap();
        assert_eq!(out.shape(), &[8, 8, 3]);
        assert!(out.data().iter().all(|&v| v == 0.0), "zero-init output conv");
    }

    #[test]
    fn output_shape_matches_input_for_any_t() {
        let model = UNet::<f32>::new(tiny_config(), 1);
        let x = normal_tensor::<f32>(&[8, 8, 3], &mut substream(3, "x"));
        for t in [1, 5, 10] {
            let out = model.denoise(&x, t).unwrap();
            assert_eq!(out.shape(), x.shape());
            assert!(out.is_finite());
        }
    }

    #[test]
    fn rejects_bad_step_and_shape() {
        let model = UNet::<f32>::new(tiny_config(), 1);
        let x = normal_tensor::<f32>(&[8, 8, 3], &mut substream(4, "x"));
        assert!(matches!(
            model.denoise(&x, 0),
            Err(DenoiserError::StepOutOfRange { .. })
        ));
        assert!(matches!(
            model.denoise(&x, 11),
            Err(DenoiserError::StepOutOfRange { .. })
        ));
        let bad = normal_tensor::<f32>(&[4, 4, 3], &mut substream(5, "x"));
        assert!(matches!(
            model.denoise(&bad, 1),
            Err(DenoiserError::BadInputShape { .. })
        ));
    }

    #[test]
    fn loss_decreases_on_fixed_batch() {
        let mut model = UNet::<f32>::new(tiny_config(), 7);
        let s = build_schedule::<f32>(10, 1e-3, 0.05).unwrap();
        let mut rng = substream(8, "batch");
        let img = normal_tensor::<f32>(&[8, 8, 3], &mut rng).clamp(-1.0, 1.0);
        let data = vec![LabeledImage {
            image: img,
            labels: vec![0, 0, 0, 0, 0],
        }];
        let (xt, ts, eps) = make_noised_batch(&data, &[0, 0, 0, 0], &s, &mut rng);
        let mut opt = Adam::new(&model.params, 1e-3);
        let first = denoiser_train_step(&mut model, &mut opt, &xt, &ts, &eps).unwrap();
        // E[eps^2] = 1 per element for a zero predictor
        assert!((first - 1.0).abs() < 0.35, "initial loss {first}");
        let mut last = first;
        for _ in 0..200 {
            last = denoiser_train_step(&mut model, &mut opt, &xt, &ts, &eps).unwrap();
        }
        assert!(
            last < first,
            "loss should drop on a fixed batch: {first} -> {last}"
        );
    }

    #[test]
    fn training_is_reproducible_from_seed() {
        let s = build_schedule::<f32>(10, 1e-3, 0.05).unwrap();
        let data: Vec<LabeledImage> = (0..4)
            .map(|i| LabeledImage {
                image: normal_tensor::<f32>(&[8, 8, 3], &mut substream(i, "img")).clamp(-1.0, 1.0),
                labels: vec![0, 0, 0, 0, 0],
            })
            .collect();
        let cfg = DenoiserTrainConfig {
            steps: 5,
            batch_size: 2,
            lr: 1e-3,
        };
        let mut m1 = UNet::<f32>::new(tiny_config(), 42);
        let c1 = train_denoiser(&mut m1, &data, &s, &cfg, 99).unwrap();
        let mut m2 = UNet::<f32>::new(tiny_config(), 42);
        let c2 = train_denoiser(&mut m2, &data, &s, &cfg, 99).unwrap();
        assert_eq!(c1, c2);
        let h1: Vec<_> = m1.params.tensor_hashes();
        let h2: Vec<_> = m2.params.tensor_hashes();
        assert_eq!(h1, h2, "identical final checkpoints");
    }
}
