//! Image→audio checkpoint transfer: patchifier kernels averaged from
//! three channels to one, positional tables resized by per-axis linear
//! interpolation, the CLS token and its positional embedding reused
//! verbatim, block weights copied (their shapes do not depend on the
//! input size), and the classification head re-initialized when the
//! class count changes. Every decision is recorded in a [`TransferPlan`]
//! so a transfer can be audited after the fact.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::RawCheckpoint;
use crate::config::{Config, ConfigError};
use crate::model::{build_schedule, param_shapes, INIT_STD};
use crate::params::ModelParams;
use crate::tensor::{kernels, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TransferError {
    #[error("patchifier has {got} input channels, expected 3")]
    ChannelCount { got: usize },
    #[error("`{name}`: source shape {src:?} does not fit target {dst:?}; the schedules differ")]
    ShapeMismatch { name: String, src: Vec<usize>, dst: Vec<usize> },
    #[error("source checkpoint has no tensor `{name}`")]
    MissingTensor { name: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TransferError>;

// ── plan ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Copy,
    ChannelAverage,
    Interpolate,
    Reinitialize,
    /// Source tensor with no counterpart in the target tree.
    Drop,
}

impl Action {
    pub fn label(self) -> &'static str {
        match self {
            Action::Copy => "copy",
            Action::ChannelAverage => "channel-average",
            Action::Interpolate => "interpolate",
            Action::Reinitialize => "reinitialize",
            Action::Drop => "drop",
        }
    }
}

/// Audit record: one action per target parameter, in parameter order,
/// followed by one `Drop` per unused source tensor.
#[derive(Debug)]
pub struct TransferPlan {
    pub source_fingerprint: u64,
    pub target_fingerprint: u64,
    pub actions: Vec<(String, Action)>,
}

impl TransferPlan {
    pub fn count(&self, a: Action) -> usize {
        self.actions.iter().filter(|(_, x)| *x == a).count()
    }

    /// Human-readable log, one line per tensor.
    pub fn render(&self) -> String {
        let mut s = format!(
            "transfer {:016x} -> {:016x}\n",
            self.source_fingerprint, self.target_fingerprint
        );
        for (name, action) in &self.actions {
            s.push_str(&format!("  {:<16} {name}\n", action.label()));
        }
        s.push_str(&format!(
            "  {} copied, {} channel-averaged, {} interpolated, {} reinitialized, {} dropped\n",
            self.count(Action::Copy),
            self.count(Action::ChannelAverage),
            self.count(Action::Interpolate),
            self.count(Action::Reinitialize),
            self.count(Action::Drop),
        ));
        s
    }
}

// ── tensor-level operations ──────────────────────────────────────────

/// Mean of a patch kernel over its input-channel axis:
/// (E, 3, kh, kw) → (E, 1, kh, kw).
pub fn channel_average(w: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = w.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(TransferError::ChannelCount { got: if s.len() == 4 { s[1] } else { 0 } });
    }
    let (e, kh, kw) = (s[0], s[2], s[3]);
    let plane = kh * kw;
    let src = w.data();
    let mut out = vec![0.0f32; e * plane];
    for o in 0..e {
        for p in 0..plane {
            let base = o * 3 * plane + p;
            out[o * plane + p] = (src[base] + src[base + plane] + src[base + 2 * plane]) / 3.0;
        }
    }
    Ok(Tensor::from_vec(vec![e, 1, kh, kw], out).expect("shape matches data"))
}

/// Resize a positional table (E, n) → (E, new_len) by linear
/// interpolation with endpoints pinned; equal lengths copy bit-exactly.
pub fn interpolate_table(t: &Tensor<f32>, new_len: usize) -> Result<Tensor<f32>> {
    let (data, shape) = kernels::interp_linear_1d(t.data(), t.shape(), 1, new_len)?;
    Ok(Tensor::from_vec(shape, data).expect("kernel returns consistent shape"))
}

// ── checkpoint-level transfer ────────────────────────────────────────

fn fits_channel_average(src: &[usize], dst: &[usize]) -> bool {
    src.len() == 4
        && dst.len() == 4
        && src[0] == dst[0]
        && src[1] == 3
        && dst[1] == 1
        && src[2..] == dst[2..]
}

fn fits_interpolation(src: &[usize], dst: &[usize]) -> bool {
    src.len() == 2 && dst.len() == 2 && src[0] == dst[0]
}

/// Map a source checkpoint onto `dst`'s parameter tree. Block weights
/// must match exactly (the stage schedule is input-size-independent);
/// patchifiers may go 3→1 channels, positional tables may resize, and
/// the head is freshly initialized when its shape changed.
pub fn apply_transfer(
    src: &RawCheckpoint,
    dst: &Config,
    head_seed: u64,
) -> Result<(ModelParams<Tensor<f32>>, TransferPlan)> {
    dst.validate()?;
    let sched = build_schedule(dst)?;
    let shapes = param_shapes(dst, &sched);

    let source: HashMap<&str, &Tensor<f32>> =
        src.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut consumed: HashMap<&str, bool> =
        src.tensors.iter().map(|(n, _)| (n.as_str(), false)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(head_seed);
    let dist = Normal::new(0.0f64, INIT_STD).expect("valid normal");
    let mut reinit = |shape: &[usize], bias: bool| -> Tensor<f32> {
        if bias {
            return Tensor::zeros(shape.to_vec());
        }
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let mut z = dist.sample(&mut rng);
                while z.abs() > 2.0 * INIT_STD {
                    z = dist.sample(&mut rng);
                }
                z as f32
            })
            .collect();
        Tensor::from_vec(shape.to_vec(), data).expect("shape matches data")
    };

    let mut actions = Vec::new();
    let mut filled: HashMap<String, Tensor<f32>> = HashMap::new();
    for (name, want) in shapes.leaves() {
        let got = source
            .get(name.as_str())
            .ok_or_else(|| TransferError::MissingTensor { name: name.clone() })?;
        let mismatch = || TransferError::ShapeMismatch {
            name: name.clone(),
            src: got.shape().to_vec(),
            dst: want.clone(),
        };
        *consumed.get_mut(name.as_str()).expect("present") = true;
        let (tensor, action) = if got.shape() == want.as_slice() {
            ((*got).clone(), Action::Copy)
        } else if name.ends_with(".patch.weight") {
            if !fits_channel_average(got.shape(), want) {
                return Err(mismatch());
            }
            (channel_average(got)?, Action::ChannelAverage)
        } else if name.contains(".pos_") {
            if !fits_interpolation(got.shape(), want) {
                return Err(mismatch());
            }
            (interpolate_table(got, want[1])?, Action::Interpolate)
        } else if name.starts_with("head.") {
            (reinit(want, name.ends_with(".bias")), Action::Reinitialize)
        } else {
            return Err(mismatch());
        };
        actions.push((name.clone(), action));
        filled.insert(name, tensor);
    }
    for (name, used) in &consumed {
        if !used {
            actions.push((name.to_string(), Action::Drop));
        }
    }

    let mut params = shapes.map(&mut |s| Tensor::<f32>::zeros(s.clone()));
    for (name, slot) in params.leaves_mut() {
        *slot = filled.remove(&name).expect("every leaf was planned").requires_grad(true);
    }
    let plan = TransferPlan {
        source_fingerprint: src.fingerprint,
        target_fingerprint: dst.fingerprint(),
        actions,
    };
    Ok((params, plan))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{encode_checkpoint, parse_checkpoint};
    use crate::model::{init_params, Model};
    use crate::Tape;
    use rand::Rng;

    // ── channel averaging ────────────────────────────────────────────

    #[test]
    fn identical_channels_average_to_themselves() {
        let slice: Vec<f32> = (0..8).map(|i| i as f32).collect();
        let mut data = Vec::new();
        for _ in 0..2 {
            for _ in 0..3 {
                data.extend_from_slice(&slice[..4]);
            }
        }
        let w = Tensor::from_vec(vec![2, 3, 2, 2], data).unwrap();
        let avg = channel_average(&w).unwrap();
        assert_eq!(avg.shape(), &[2, 1, 2, 2]);
        assert_eq!(&avg.data()[..4], &slice[..4]);
    }

    #[test]
    fn cancelling_channels_average_to_zero() {
        let base: Vec<f32> = vec![1.0, -2.0, 3.0, 4.0];
        let mut data = Vec::new();
        data.extend(base.iter());
        data.extend(base.iter().map(|v| -v));
        data.extend(std::iter::repeat_n(0.0, 4));
        let w = Tensor::from_vec(vec![1, 3, 2, 2], data).unwrap();
        let avg = channel_average(&w).unwrap();
        assert!(avg.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let w = Tensor::<f32>::zeros(vec![2, 4, 3, 3]);
        assert!(matches!(
            channel_average(&w),
            Err(TransferError::ChannelCount { got: 4 })
        ));
    }

    #[test]
    fn averaged_kernel_equals_replicated_input_conv() {
        // conv(avg_w, x) == conv(w, replicate(x, 3)) / 3 for both view
        // geometries, by linearity of convolution.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (kernel, stride) in [((9usize, 9usize), (2usize, 2usize)), ((13, 13), (4, 4))] {
            let (h, w_in) = (18, 14);
            let e = 2;
            let pad = (
                (kernel.0 - stride.0).div_ceil(2),
                (kernel.1 - stride.1).div_ceil(2),
            );
            let wdata: Vec<f32> =
                (0..e * 3 * kernel.0 * kernel.1).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let xdata: Vec<f32> = (0..h * w_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w_rgb = Tensor::from_vec(vec![e, 3, kernel.0, kernel.1], wdata).unwrap();
            let w_avg = channel_average(&w_rgb).unwrap();
            let x1 = Tensor::from_vec(vec![1, h, w_in], xdata.clone()).unwrap();
            let mut x3data = Vec::new();
            for _ in 0..3 {
                x3data.extend_from_slice(&xdata);
            }
            let x3 = Tensor::from_vec(vec![3, h, w_in], x3data).unwrap();
            let bias1 = Tensor::<f32>::zeros(vec![e]);

            let tape = Tape::<f32>::new();
            let (vx1, vw1, vb) = (tape.leaf(&x1), tape.leaf(&w_avg), tape.leaf(&bias1));
            let (vx3, vw3) = (tape.leaf(&x3), tape.leaf(&w_rgb));
            let y1 = tape.conv2d(vx1, vw1, vb, stride, pad).unwrap();
            let y3 = tape.conv2d(vx3, vw3, vb, stride, pad).unwrap();
            let (o1, o3) = (tape.value(y1), tape.value(y3));
            assert_eq!(o1.shape(), o3.shape());
            for (a, b) in o1.data().iter().zip(o3.data()) {
                assert!((a - b / 3.0).abs() < 1e-6 * (1.0 + a.abs()), "{a} vs {}", b / 3.0);
            }
        }
    }

    // ── positional interpolation ─────────────────────────────────────

    #[test]
    fn equal_extents_copy_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = Tensor::from_vec(
            vec![3, 17],
            (0..51).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        )
        .unwrap();
        let out = interpolate_table(&t, 17).unwrap();
        assert_eq!(
            out.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn constants_stay_constant_at_any_size() {
        let t = Tensor::from_vec(vec![2, 7], vec![0.25; 14]).unwrap();
        for n in [1, 3, 7, 20, 113] {
            let out = interpolate_table(&t, n).unwrap();
            assert_eq!(out.shape(), &[2, n]);
            assert!(out.data().iter().all(|&v| v == 0.25));
        }
    }

    #[test]
    fn ramp_112_to_512_stays_linear_with_endpoints() {
        let t =
            Tensor::from_vec(vec![1, 112], (0..112).map(|i| i as f32).collect()).unwrap();
        let out = interpolate_table(&t, 512).unwrap();
        let d = out.data();
        assert_eq!(d[0], 0.0);
        assert_eq!(d[511], 111.0);
        for (j, &v) in d.iter().enumerate() {
            let expect = j as f64 * 111.0 / 511.0;
            assert!((v as f64 - expect).abs() < 1e-4, "index {j}: {v} vs {expect}");
        }
    }

    // ── full transfer ────────────────────────────────────────────────

    fn tiny_image() -> Config {
        let mut c = Config::tiny();
        c.model.input = (3, 64, 32);
        c.model.num_classes = 5;
        c
    }

    fn checkpoint_of(cfg: &Config, seed: u64) -> RawCheckpoint {
        let sched = build_schedule(cfg).unwrap();
        let params = init_params::<f32>(cfg, &sched, seed);
        parse_checkpoint(&encode_checkpoint(cfg, &params)).unwrap()
    }

    #[test]
    fn identical_config_is_all_copy_and_idempotent() {
        let cfg = Config::tiny();
        let ckpt = checkpoint_of(&cfg, 1);
        let (params, plan) = apply_transfer(&ckpt, &cfg, 9).unwrap();
        assert_eq!(plan.count(Action::Copy), plan.actions.len());
        assert_eq!(plan.count(Action::Drop), 0);

        let again = parse_checkpoint(&encode_checkpoint(&cfg, &params)).unwrap();
        let (params2, _) = apply_transfer(&again, &cfg, 9).unwrap();
        for ((n1, t1), (n2, t2)) in params.leaves().iter().zip(params2.leaves()) {
            assert_eq!(*n1, n2);
            assert_eq!(t1.data(), t2.data(), "{n1} changed on the second pass");
        }
    }

    #[test]
    fn image_to_audio_routes_every_tensor() {
        let src_cfg = tiny_image();
        let mut dst_cfg = Config::tiny();
        dst_cfg.model.input = (1, 128, 32); // taller grid: pos_h must resize
        let ckpt = checkpoint_of(&src_cfg, 2);
        let (params, plan) = apply_transfer(&ckpt, &dst_cfg, 3).unwrap();

        let by_name: HashMap<&str, Action> =
            plan.actions.iter().map(|(n, a)| (n.as_str(), *a)).collect();
        assert_eq!(by_name["embed.view0.patch.weight"], Action::ChannelAverage);
        assert_eq!(by_name["embed.view1.patch.weight"], Action::ChannelAverage);
        assert_eq!(by_name["embed.view0.patch.bias"], Action::Copy);
        assert_eq!(by_name["embed.view0.pos_h"], Action::Interpolate);
        assert_eq!(by_name["embed.view1.pos_h"], Action::Interpolate);
        assert_eq!(by_name["embed.view0.pos_w"], Action::Copy);
        assert_eq!(by_name["embed.view0.pos_t"], Action::Copy);
        assert_eq!(by_name["embed.cls"], Action::Copy);
        assert_eq!(by_name["embed.cls_pos"], Action::Copy);
        assert_eq!(by_name["blocks.01.view0.attn.wq"], Action::Copy);
        assert_eq!(by_name["final_ln.gain"], Action::Copy);
        assert_eq!(by_name["head.weight"], Action::Reinitialize);
        assert_eq!(by_name["head.bias"], Action::Reinitialize);
        assert_eq!(plan.count(Action::Drop), 0);

        // Totality: every target parameter got exactly one action.
        let sched = build_schedule(&dst_cfg).unwrap();
        let n_target = param_shapes(&dst_cfg, &sched).leaves().len();
        assert_eq!(plan.actions.len(), n_target);

        // A source tensor with no target slot is logged as dropped.
        let mut extra = checkpoint_of(&src_cfg, 2);
        extra.tensors.push(("aux.head.weight".into(), Tensor::zeros(vec![2, 2])));
        let (_, plan2) = apply_transfer(&extra, &dst_cfg, 3).unwrap();
        assert_eq!(plan2.count(Action::Drop), 1);
        assert!(plan2.actions.iter().any(|(n, a)| n == "aux.head.weight" && *a == Action::Drop));

        // CLS positional embedding is reused verbatim.
        let src_cls: &Tensor<f32> = &ckpt
            .tensors
            .iter()
            .find(|(n, _)| n == "embed.cls_pos")
            .unwrap()
            .1;
        let got = params.leaves().iter().find(|(n, _)| n == "embed.cls_pos").unwrap().1.clone();
        assert_eq!(got.data(), src_cls.data());

        // Head is fresh: zero bias, weights inside the truncation bound.
        let head_b = params.leaves().iter().find(|(n, _)| n == "head.bias").unwrap().1.clone();
        assert!(head_b.data().iter().all(|&v| v == 0.0));
        let head_w = params.leaves().iter().find(|(n, _)| n == "head.weight").unwrap().1.clone();
        assert!(head_w.data().iter().all(|&v| v.abs() <= 2.0 * INIT_STD as f32 + 1e-12));
        assert!(head_w.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn transferred_model_forward_runs() {
        let src_cfg = tiny_image();
        let dst_cfg = Config::tiny();
        let ckpt = checkpoint_of(&src_cfg, 4);
        let (params, _) = apply_transfer(&ckpt, &dst_cfg, 5).unwrap();
        let model = Model::from_params(&dst_cfg, params).unwrap();
        let (c, h, w) = dst_cfg.model.input;
        let x = Tensor::<f32>::full(vec![c, h, w], 0.1);
        let logits = model.logits(&x).unwrap();
        assert_eq!(logits.shape(), &[dst_cfg.model.num_classes]);
        assert!(logits.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn schedule_mismatch_names_the_divergent_tensor() {
        let mut src_cfg = Config::tiny();
        src_cfg.model.embed_dim = 32;
        let ckpt = checkpoint_of(&src_cfg, 6);
        let err = apply_transfer(&ckpt, &Config::tiny(), 7).unwrap_err();
        match err {
            TransferError::ShapeMismatch { name, .. } => {
                assert!(!name.is_empty());
            }
            other => panic!("expected shape mismatch, got {other}"),
        }

        let mut partial = checkpoint_of(&Config::tiny(), 8);
        partial.tensors.retain(|(n, _)| n != "blocks.02.view1.mlp.fc1.weight");
        let err = apply_transfer(&partial, &Config::tiny(), 7).unwrap_err();
        assert!(matches!(err, TransferError::MissingTensor { ref name }
            if name == "blocks.02.view1.mlp.fc1.weight"));
    }

    #[test]
    fn plan_renders_fingerprints_and_counts() {
        let cfg = Config::tiny();
        let ckpt = checkpoint_of(&cfg, 10);
        let (_, plan) = apply_transfer(&ckpt, &cfg, 11).unwrap();
        let log = plan.render();
        assert!(log.contains(&format!("{:016x}", cfg.fingerprint())));
        assert!(log.contains("copied"));
        assert!(log.lines().count() >= plan.actions.len());
    }
}
