//! Release gate: one test per acceptance criterion, each printing a
//! `criterion N (<name>): pass` line with its measured time (visible
//! under `cargo test --test acceptance -- --nocapture`). Headline paper
//! numbers need cluster-scale data and are out of scope; everything
//! here is a property or arithmetic check that must hold exactly.

use std::time::Instant;

use mmvit::attention::{cross_pooling_attention, pooling_attention, TokenView};
use mmvit::augment::{
    augment_batch, audio_cutmix, draw_lambda, mixup, random_roll, specaugment, LabeledExample,
};
use mmvit::checkpoint::{
    assemble_params, encode_checkpoint, load_model, parse_checkpoint, save_checkpoint,
    CheckpointError,
};
use mmvit::config::{Config, Task};
use mmvit::model::{build_schedule, BlockKind, Mode, Model, Schedule};
use mmvit::params::AttnParams;
use mmvit::gradcheck::check_grads_sampled;
use mmvit::train::metrics::mean_average_precision;
use mmvit::train::{evaluate, make_synthetic, train, Dataset, BEST_CKPT, LAST_CKPT, METRICS_CSV};
use mmvit::transfer::{apply_transfer, channel_average, interpolate_table};
use mmvit::{Tape, Tensor, Var};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pass(n: usize, name: &str, t0: Instant, budget_s: f64) {
    let dt = t0.elapsed().as_secs_f64();
    assert!(dt < budget_s, "criterion {n} overran its budget: {dt:.1}s >= {budget_s}s");
    println!("criterion {n} ({name}): pass in {dt:.2}s (budget {budget_s}s)");
}

fn randt<F: mmvit::Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n).map(|_| F::from_f64(rng.gen_range(-1.0..1.0))).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

// ── 1: schedule fidelity ─────────────────────────────────────────────

#[test]
fn criterion_01_schedule_fidelity() {
    let t0 = Instant::now();
    let sched = build_schedule(&Config::audio()).unwrap();
    assert_eq!(sched.layers.len(), 16);
    assert_eq!(sched.stage_sizes, vec![2, 2, 11, 1]);
    for lp in &sched.layers {
        let want = match lp.index {
            1 | 3 | 14 => BlockKind::CrossAttention,
            2 | 4 | 15 => BlockKind::ScaledSelfAttention,
            5..=13 | 16 => BlockKind::SelfAttention,
            _ => unreachable!(),
        };
        assert_eq!(lp.kind, want, "layer {}", lp.index);
    }
    // stage occupancy: 1–2, 3–4, 5–15, 16
    let stage_of = |i: usize| sched.layers[i - 1].stage;
    assert!(
        (1..=2).all(|i| stage_of(i) == 0)
            && (3..=4).all(|i| stage_of(i) == 1)
            && (5..=15).all(|i| stage_of(i) == 2)
            && stage_of(16) == 3
    );
    pass(1, "schedule fidelity", t0, 1.0);
}

// ── 2: embedding arithmetic ──────────────────────────────────────────

#[test]
fn criterion_02_embedding_arithmetic() {
    let t0 = Instant::now();
    let image = build_schedule(&Config::image()).unwrap();
    assert_eq!(image.embed_grids, vec![(112, 112), (56, 56)]);
    let l1 = &image.layers[0];
    assert_eq!(l1.grids_in[0].0 * l1.grids_in[0].1 + 1, 12545, "view 1 tokens with CLS");
    assert_eq!(l1.grids_in[1].0 * l1.grids_in[1].1, 3136, "view 2 tokens");

    let audio = build_schedule(&Config::audio()).unwrap();
    assert_eq!(audio.embed_grids, vec![(512, 64), (256, 32)]);
    let l1 = &audio.layers[0];
    assert_eq!(l1.grids_in[0].0 * l1.grids_in[0].1 + 1, 512 * 64 + 1);
    assert_eq!(l1.grids_in[1].0 * l1.grids_in[1].1, 256 * 32);
    pass(2, "embedding arithmetic", t0, 1.0);
}

// ── 3: attention oracles ─────────────────────────────────────────────

/// y = x·w + b with plain loops. x (l, e_in) flat, w (e_in, e_out).
fn naive_linear(x: &[f64], l: usize, e_in: usize, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let e_out = w.shape()[1];
    let (wd, bd) = (w.data(), b.data());
    let mut y = vec![0.0; l * e_out];
    for i in 0..l {
        for o in 0..e_out {
            let mut s = bd[o];
            for k in 0..e_in {
                s += x[i * e_in + k] * wd[k * e_out + o];
            }
            y[i * e_out + o] = s;
        }
    }
    y
}

/// Multi-head softmax(QKᵀ/√d)V with plain loops, one query at a time.
fn naive_mha(q: &[f64], k: &[f64], v: &[f64], lq: usize, lk: usize, e: usize, heads: usize) -> Vec<f64> {
    let d = e / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; lq * e];
    for h in 0..heads {
        let off = h * d;
        for i in 0..lq {
            let mut scores = vec![0.0; lk];
            for (j, s) in scores.iter_mut().enumerate() {
                let mut dot = 0.0;
                for c in 0..d {
                    dot += q[i * e + off + c] * k[j * e + off + c];
                }
                *s = dot * scale;
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..d {
                let mut acc = 0.0;
                for (j, ex) in exps.iter().enumerate() {
                    acc += ex / z * v[j * e + off + c];
                }
                out[i * e + off + c] = acc;
            }
        }
    }
    out
}

struct RawAttn {
    wq: Tensor<f64>,
    bq: Tensor<f64>,
    wk: Tensor<f64>,
    bk: Tensor<f64>,
    wv: Tensor<f64>,
    bv: Tensor<f64>,
    wo: Tensor<f64>,
    bo: Tensor<f64>,
}

impl RawAttn {
    fn random(e: usize, rng: &mut ChaCha8Rng) -> RawAttn {
        RawAttn {
            wq: randt(&[e, e], rng),
            bq: randt(&[e], rng),
            wk: randt(&[e, e], rng),
            bk: randt(&[e], rng),
            wv: randt(&[e, e], rng),
            bv: randt(&[e], rng),
            wo: randt(&[e, e], rng),
            bo: randt(&[e], rng),
        }
    }

    fn on_tape(&self, tape: &Tape<f64>) -> AttnParams<Var> {
        AttnParams {
            wq: tape.leaf(&self.wq),
            bq: tape.leaf(&self.bq),
            wk: tape.leaf(&self.wk),
            bk: tape.leaf(&self.bk),
            wv: tape.leaf(&self.wv),
            bv: tape.leaf(&self.bv),
            wo: tape.leaf(&self.wo),
            bo: tape.leaf(&self.bo),
            q_pool: None,
        }
    }

    fn naive_qkv(&self, x: &Tensor<f64>) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (l, e) = (x.shape()[0], x.shape()[1]);
        (
            naive_linear(x.data(), l, e, &self.wq, &self.bq),
            naive_linear(x.data(), l, e, &self.wk, &self.bk),
            naive_linear(x.data(), l, e, &self.wv, &self.bv),
        )
    }
}

fn heads_for(e: usize, rng: &mut ChaCha8Rng) -> usize {
    let divisors: Vec<usize> = [1, 2, 4, 8].into_iter().filter(|h| e % h == 0).collect();
    divisors[rng.gen_range(0..divisors.len())]
}

#[test]
fn criterion_03_attention_oracles() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xa77e);
    let mut instances = 0usize;

    // single-view pooling attention, identity pooling
    for _ in 0..120 {
        let l = rng.gen_range(1..=16);
        let e = [2usize, 4, 8][rng.gen_range(0..3)];
        let heads = heads_for(e, &mut rng);
        let x: Tensor<f64> = randt(&[l, e], &mut rng);
        let attn = RawAttn::random(e, &mut rng);

        let tape = Tape::new();
        let view = TokenView { tokens: tape.leaf(&x), grid: (l, 1), has_cls: false };
        let p = attn.on_tape(&tape);
        let (out, grid) = pooling_attention(&tape, &view, &p, heads, None).unwrap();
        assert_eq!(grid, (l, 1), "identity pooling must not change the grid");
        let got = tape.value(out);

        let (q, k, v) = attn.naive_qkv(&x);
        let ctx = naive_mha(&q, &k, &v, l, l, e, heads);
        let want = naive_linear(&ctx, l, e, &attn.wo, &attn.bo);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-6, "pooling_attention off oracle: {a} vs {b}");
        }
        instances += 1;
    }

    // cross pooling attention over N ∈ {1,2,3} views
    for n in 1..=3usize {
        for _ in 0..40 {
            let e = [2usize, 4, 8][rng.gen_range(0..3)];
            let heads = heads_for(e, &mut rng);
            let ls: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=16)).collect();
            let xs: Vec<Tensor<f64>> = ls.iter().map(|&l| randt(&[l, e], &mut rng)).collect();
            let attns: Vec<RawAttn> = (0..n).map(|_| RawAttn::random(e, &mut rng)).collect();

            let tape = Tape::new();
            let views: Vec<TokenView> = xs
                .iter()
                .map(|x| TokenView {
                    tokens: tape.leaf(x),
                    grid: (x.shape()[0], 1),
                    has_cls: false,
                })
                .collect();
            let ps: Vec<AttnParams<Var>> = attns.iter().map(|a| a.on_tape(&tape)).collect();
            let refs: Vec<&AttnParams<Var>> = ps.iter().collect();
            let outs = cross_pooling_attention(&tape, &views, &refs, heads).unwrap();

            // oracle: concatenate per-view Q/K/V, one joint attention,
            // then split and out-project per view
            let lsum: usize = ls.iter().sum();
            let (mut qc, mut kc, mut vc) = (Vec::new(), Vec::new(), Vec::new());
            for (x, a) in xs.iter().zip(&attns) {
                let (q, k, v) = a.naive_qkv(x);
                qc.extend(q);
                kc.extend(k);
                vc.extend(v);
            }
            let ctx = naive_mha(&qc, &kc, &vc, lsum, lsum, e, heads);
            let mut start = 0usize;
            for ((out, &l), a) in outs.iter().zip(&ls).zip(&attns) {
                let seg = &ctx[start * e..(start + l) * e];
                let want = naive_linear(seg, l, e, &a.wo, &a.bo);
                let got = tape.value(*out);
                for (g, w) in got.data().iter().zip(&want) {
                    assert!((g - w).abs() < 1e-6, "cross attention off oracle: {g} vs {w}");
                }
                start += l;
            }
            instances += 1;
        }
    }
    assert!(instances >= 200, "only {instances} oracle instances");
    pass(3, "attention oracles", t0, 30.0);
}

// ── 4: gradient correctness ──────────────────────────────────────────

/// The head reads only view 1's CLS, so view 2's branch downstream of
/// the last cross block is structurally disconnected (its K/V side at
/// that block still feeds view 1). Those parameters must show a zero
/// derivative; everything else is finite-difference checked.
fn is_dead_param(name: &str, sched: &Schedule) -> bool {
    let last_cross = sched
        .layers
        .iter()
        .filter(|l| l.kind == BlockKind::CrossAttention)
        .map(|l| l.index)
        .max();
    let Some(rest) = name.strip_prefix("blocks.") else { return false };
    let (idx_part, rest) = rest.split_once('.').unwrap();
    let idx: usize = idx_part.parse().unwrap();
    if rest.starts_with("view0") {
        return false;
    }
    let Some(last_cross) = last_cross else { return true };
    if idx != last_cross {
        return idx > last_cross;
    }
    let leaf = rest.split_once('.').unwrap().1;
    !matches!(leaf, "ln1.gain" | "ln1.bias" | "attn.wk" | "attn.bk" | "attn.wv" | "attn.bv")
}

#[test]
fn criterion_04_gradient_correctness() {
    let t0 = Instant::now();
    let cfg = Config::tiny();
    let model = Model::<f64>::init(&cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let x: Tensor<f64> =
        randt(&[cfg.model.input.0, cfg.model.input.1, cfg.model.input.2], &mut rng);
    let mut tvec = vec![0.0; cfg.model.num_classes];
    tvec[1] = 1.0;
    let target = Tensor::from_vec(vec![1, cfg.model.num_classes], tvec).unwrap();

    let names: Vec<String> =
        model.params.leaves().into_iter().map(|(n, _)| n).collect();
    let dead: Vec<bool> =
        names.iter().map(|n| is_dead_param(n, &model.schedule)).collect();
    let inputs: Vec<Tensor<f64>> = model
        .params
        .leaves()
        .into_iter()
        .zip(&dead)
        .map(|((_, t), &d)| t.clone().requires_grad(!d))
        .collect();

    let build = |tape: &Tape<f64>, vars: &[Var]| {
        let mut i = 0;
        let pv = model.params.map(&mut |_| {
            let v = vars[i];
            i += 1;
            v
        });
        let logits = model.forward(tape, &pv, &x, &mut Mode::Eval)?;
        tape.softmax_cross_entropy(logits, &target)
    };

    // Disconnected parameters: perturbing them must not move the loss
    // at all (the dead branch never mixes back into the CLS path).
    let eval_loss = |ins: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t)).collect();
        tape.value(build(&tape, &vars).unwrap()).item()
    };
    let base = eval_loss(&inputs);
    assert!(base.is_finite());
    let mut dead_seen = 0usize;
    for (i, (&d, name)) in dead.iter().zip(&names).enumerate() {
        if !d {
            continue;
        }
        dead_seen += 1;
        let mut probed = inputs.clone();
        let mut t = probed[i].clone();
        t.data_mut()[0] += 0.25;
        probed[i] = t;
        let moved = eval_loss(&probed);
        assert_eq!(base, moved, "`{name}` is claimed dead but moved the loss");
    }
    assert!(dead_seen > 0, "tiny schedule must exhibit the dead view-2 tail");

    // Live parameters: sampled central differences, two coordinates per
    // tensor, rel. tolerance 1e-3 in f64.
    check_grads_sampled(&inputs, 2, 0x6ed5, 1e-4, 1e-3, &build)
        .unwrap_or_else(|e| panic!("finite-difference check failed: {e}"));
    println!(
        "  checked {} live tensors at 2 coords each, {} dead tensors at zero",
        dead.iter().filter(|&&d| !d).count(),
        dead_seen
    );
    pass(4, "gradient correctness", t0, 600.0);
}

// ── 5: scale-stage invariants ────────────────────────────────────────

#[test]
fn criterion_05_scale_stage_invariants() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut scaled_layers = 0usize;
    for trial in 0..60 {
        let stages = rng.gen_range(2..=4usize);
        let mut self_counts: Vec<usize> =
            (0..stages).map(|_| rng.gen_range(0..=2)).collect();
        *self_counts.last_mut().unwrap() = rng.gen_range(1..=2);
        // keep every grid even until the final stage so each halving is
        // an exact 4× token shrink
        let unit = 4 << (stages - 1);
        let (h, w) = (unit * rng.gen_range(1..=3usize), unit * rng.gen_range(1..=2usize));

        let mut cfg = Config::audio();
        cfg.model.input = ([1, 3][rng.gen_range(0..2)], h, w);
        cfg.model.embed_dim = [8, 16, 24][rng.gen_range(0..3)];
        cfg.model.self_counts = self_counts;
        cfg.model.heads = [1, 2, 4, 8][..stages].to_vec();
        cfg.model.num_classes = 4;
        cfg.model.task = Task::SingleLabel;
        cfg.validate().unwrap_or_else(|e| panic!("trial {trial} invalid: {e}"));

        let sched = build_schedule(&cfg).unwrap();
        for lp in &sched.layers {
            let spatial =
                |grids: &[(usize, usize)], v: usize| grids[v].0 * grids[v].1;
            // 4:1 view ratio everywhere (stride 2 vs stride 4 tokenization)
            assert_eq!(
                spatial(&lp.grids_in, 0),
                4 * spatial(&lp.grids_in, 1),
                "trial {trial} layer {}",
                lp.index
            );
            if lp.kind.is_scaled() {
                scaled_layers += 1;
                assert_eq!(lp.channels_out, 2 * lp.channels_in, "channel doubling");
                for v in 0..lp.grids_in.len() {
                    assert_eq!(
                        spatial(&lp.grids_in, v),
                        4 * spatial(&lp.grids_out, v),
                        "trial {trial} layer {} view {v}: 4× token shrink",
                        lp.index
                    );
                }
            } else {
                assert_eq!(lp.channels_out, lp.channels_in);
                assert_eq!(lp.grids_out, lp.grids_in);
            }
        }
    }
    assert!(scaled_layers >= 60, "only {scaled_layers} scaled layers exercised");
    pass(5, "scale-stage invariants", t0, 60.0);
}

// ── 6: augmentation properties ───────────────────────────────────────

fn example(t: usize, f: usize, label: Vec<f32>, rng: &mut ChaCha8Rng) -> LabeledExample {
    LabeledExample { features: randt(&[t, f], rng), label }
}

#[test]
fn criterion_06_augmentation_properties() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    const TRIALS: usize = 10_000;

    // mixup λ endpoints and Beta draws
    for _ in 0..TRIALS {
        let a = example(12, 4, vec![1.0, 0.0], &mut rng);
        let b = example(12, 4, vec![0.0, 1.0], &mut rng);
        let at1 = mixup(&a, &b, 1.0).unwrap();
        assert_eq!(at1.features.data(), a.features.data());
        assert_eq!(at1.label, a.label);
        let at0 = mixup(&a, &b, 0.0).unwrap();
        assert_eq!(at0.features.data(), b.features.data());
        assert_eq!(at0.label, b.label);
        let lam = draw_lambda(0.5, &mut rng);
        assert!((0.0..=1.0).contains(&lam));
    }

    // cutmix: hard cut, contiguity, untouched frequency axis,
    // conserved labels
    let (t_len, f_len) = (24usize, 8usize);
    for _ in 0..TRIALS {
        let a = example(t_len, f_len, vec![1.0, 0.0], &mut rng);
        let b = example(t_len, f_len, vec![0.0, 1.0], &mut rng);
        let lam = rng.gen_range(0.0..=1.0);
        let out = audio_cutmix(&a, &b, lam, &mut rng).unwrap();

        fn row(t: &Tensor<f32>, i: usize, f_len: usize) -> &[f32] {
            &t.data()[i * f_len..(i + 1) * f_len]
        }
        let from_b: Vec<bool> = (0..t_len)
            .map(|i| {
                let r = row(&out.features, i, f_len);
                if r == row(&b.features, i, f_len) {
                    true
                } else {
                    // full-height cut: a frame is wholly one parent's
                    assert_eq!(r, row(&a.features, i, f_len), "frame {i} is a splice");
                    false
                }
            })
            .collect();
        let w = from_b.iter().filter(|&&x| x).count();
        let want_w = (((1.0 - lam) * t_len as f64).round() as usize).min(t_len);
        assert_eq!(w, want_w, "cut width follows round((1-λ)·T)");
        if w > 0 {
            let first = from_b.iter().position(|&x| x).unwrap();
            assert!(from_b[first..first + w].iter().all(|&x| x), "cut not contiguous");
            assert_eq!(from_b.iter().filter(|&&x| x).count(), w);
        }
        let lam_eff = 1.0 - w as f64 / t_len as f64;
        assert!((f64::from(out.label[0]) - lam_eff).abs() < 1e-6);
        assert!((f64::from(out.label[1]) - (1.0 - lam_eff)).abs() < 1e-6);
    }

    // SpecAugment: windows within the §4.2.2 maxima, zeroed inside,
    // untouched outside
    let (st, sf) = (256usize, 128usize);
    for trial in 0..TRIALS {
        let s: Tensor<f32> = randt(&[st, sf], &mut rng);
        // shift off zero so a masked cell is distinguishable
        let s = Tensor::from_vec(
            vec![st, sf],
            s.data().iter().map(|v| v + 3.0).collect(),
        )
        .unwrap();
        let (out, mask) = specaugment(&s, 192, 48, &mut rng).unwrap();
        let (tm0, tw) = mask.time;
        let (fm0, fh) = mask.freq;
        assert!(tw <= 192 && tm0 + tw <= st, "time mask {tm0}+{tw} out of bounds");
        assert!(fh <= 48 && fm0 + fh <= sf, "freq mask {fm0}+{fh} out of bounds");
        for (i, (got, orig)) in out.data().iter().zip(s.data()).enumerate() {
            let (ti, fi) = (i / sf, i % sf);
            let masked = (ti >= tm0 && ti < tm0 + tw) || (fi >= fm0 && fi < fm0 + fh);
            if masked {
                assert_eq!(*got, 0.0, "trial {trial}: cell ({ti},{fi}) not zeroed");
            } else {
                assert_eq!(got, orig, "trial {trial}: cell ({ti},{fi}) touched");
            }
        }
    }

    // roll: pure cyclic permutation of frames
    for _ in 0..TRIALS {
        let s: Tensor<f32> = randt(&[16, 3], &mut rng);
        let shift = rng.gen_range(0..16);
        let out = random_roll(&s, shift).unwrap();
        for i in 0..16 {
            let src = (i + 16 - shift) % 16;
            assert_eq!(
                &out.data()[i * 3..i * 3 + 3],
                &s.data()[src * 3..src * 3 + 3]
            );
        }
    }
    pass(6, "augmentation properties", t0, 60.0);
}

// ── 7: transfer correctness ──────────────────────────────────────────

#[test]
fn criterion_07_transfer_correctness() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);

    // (a) ChannelAverage linearity: convolving a replicated input with
    // the full kernel equals 3× the averaged kernel on one channel.
    // The probe convolutions run in f64 so the deviation measured is the
    // transfer op's own, not conv accumulation noise.
    fn widen(t: &Tensor<f32>) -> Tensor<f64> {
        Tensor::from_vec(t.shape().to_vec(), t.data().iter().map(|&v| f64::from(v)).collect())
            .unwrap()
    }
    for &((kh, kw), (sh, sw)) in &[((9usize, 9usize), (2usize, 2usize)), ((13, 13), (4, 4))] {
        let pad = ((kh - sh).div_ceil(2), (kw - sw).div_ceil(2));
        let x: Tensor<f32> = randt(&[1, 20, 16], &mut rng);
        let w: Tensor<f32> = randt(&[4, 3, kh, kw], &mut rng);
        let avg = channel_average(&w).unwrap();
        let b = Tensor::<f64>::zeros(vec![4]);
        let rep =
            Tensor::from_vec(vec![3, 20, 16], widen(&x).data().repeat(3)).unwrap();

        let tape = Tape::<f64>::new();
        let full = tape
            .conv2d(tape.leaf(&rep), tape.leaf(&widen(&w)), tape.leaf(&b), (sh, sw), pad)
            .unwrap();
        let one = tape
            .conv2d(tape.leaf(&widen(&x)), tape.leaf(&widen(&avg)), tape.leaf(&b), (sh, sw), pad)
            .unwrap();
        let (vf, vo) = (tape.value(full), tape.value(one));
        for (f, o) in vf.data().iter().zip(vo.data()) {
            let want = 3.0 * o;
            assert!(
                (f - want).abs() < 1e-6 * (1.0 + f.abs()),
                "linearity violated: {f} vs {want}"
            );
        }
    }

    // (b) positional interpolation: identity, constant, ramp
    let table: Tensor<f32> = randt(&[5, 17], &mut rng);
    let same = interpolate_table(&table, 17).unwrap();
    assert_eq!(same.data(), table.data(), "equal lengths must be bit-exact");

    let konst =
        Tensor::from_vec(vec![2, 7], vec![0.25; 7].into_iter().chain(vec![-1.5; 7]).collect())
            .unwrap();
    let grown = interpolate_table(&konst, 19).unwrap();
    for (r, want) in [(0usize, 0.25f32), (1, -1.5)] {
        assert!(grown.data()[r * 19..(r + 1) * 19].iter().all(|&v| v == want));
    }

    let n = 112usize;
    let m = 512usize;
    let ramp =
        Tensor::from_vec(vec![1, n], (0..n).map(|i| i as f32 / (n - 1) as f32).collect()).unwrap();
    let up = interpolate_table(&ramp, m).unwrap();
    assert_eq!(up.data()[0], 0.0);
    assert_eq!(up.data()[m - 1], 1.0);
    for (j, &v) in up.data().iter().enumerate() {
        let want = j as f32 / (m - 1) as f32;
        assert!((v - want).abs() < 1e-6, "ramp stays linear: {v} vs {want} at {j}");
    }

    // (c) an image checkpoint lands in an audio model that runs
    let mut img = Config::tiny();
    img.model.input = (3, 64, 32);
    img.model.num_classes = 10;
    img.validate().unwrap();
    let src = Model::<f32>::init(&img, 9).unwrap();
    let raw = parse_checkpoint(&encode_checkpoint(&img, &src.params)).unwrap();
    let audio_cfg = Config::tiny();
    let (params, plan) = apply_transfer(&raw, &audio_cfg, 1).unwrap();
    assert!(plan.count(mmvit::transfer::Action::ChannelAverage) == 2);
    let model = Model::from_params(&audio_cfg, params).unwrap();
    let x: Tensor<f32> = randt(&[1, 64, 32], &mut rng);
    let logits = model.logits(&x).unwrap();
    assert_eq!(logits.shape(), &[4]);
    assert!(logits.data().iter().all(|v| v.is_finite()));

    // full-size shape trace: the paper-scale image checkpoint maps onto
    // the (1,1024,128) audio schedule with every tensor accounted for,
    // and the assembled model passes per-leaf shape validation
    let img_full = Config::image();
    let src_full = Model::<f32>::init(&img_full, 2).unwrap();
    let raw_full = parse_checkpoint(&encode_checkpoint(&img_full, &src_full.params)).unwrap();
    let audio_full = Config::audio();
    let (params_full, plan_full) = apply_transfer(&raw_full, &audio_full, 1).unwrap();
    assert_eq!(plan_full.count(mmvit::transfer::Action::Drop), 0);
    let full = Model::<f32>::from_params(&audio_full, params_full).unwrap();
    let sched = &full.schedule;
    assert_eq!(sched.layers[0].grids_in[0], (512, 64));
    assert_eq!(sched.layers.last().unwrap().grids_out[1], (32, 4));
    assert_eq!(sched.final_width, 768);
    pass(7, "transfer correctness (numeric at tiny scale, full-size shape trace)", t0, 60.0);
}

// ── 8: metric oracles ────────────────────────────────────────────────

/// AP recomputed the slow way: stable-sort by descending score, then
/// precision summed at each positive's rank.
fn brute_ap(scores: &[f32], labels: &[f32]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let npos = labels.iter().filter(|&&l| l > 0.5).count();
    if npos == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] > 0.5 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / npos as f64)
}

#[test]
fn criterion_08_metric_oracles() {
    let t0 = Instant::now();

    // the worked example: AP([1,0,1] @ [0.9,0.8,0.7]) = 5/6 ≈ 0.8333
    let scores = vec![vec![0.9f32], vec![0.8], vec![0.7]];
    let labels = vec![vec![1.0f32], vec![0.0], vec![1.0]];
    let report = mean_average_precision(&scores, &labels).unwrap();
    assert!((report.map.unwrap() - 5.0 / 6.0).abs() < 1e-6);

    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut compared = 0usize;
    for n in 1..=8usize {
        for c in 1..=3usize {
            for _ in 0..80 {
                let scores: Vec<Vec<f32>> =
                    (0..n).map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
                let labels: Vec<Vec<f32>> = (0..n)
                    .map(|_| (0..c).map(|_| f32::from(u8::from(rng.gen_bool(0.4)))).collect())
                    .collect();
                let want: Vec<Option<f64>> = (0..c)
                    .map(|j| {
                        let col_s: Vec<f32> = scores.iter().map(|r| r[j]).collect();
                        let col_l: Vec<f32> = labels.iter().map(|r| r[j]).collect();
                        brute_ap(&col_s, &col_l)
                    })
                    .collect();
                let present: Vec<f64> = want.iter().flatten().copied().collect();
                match mean_average_precision(&scores, &labels) {
                    Ok(report) => {
                        assert_eq!(report.per_class_ap.len(), c);
                        for (got, want) in report.per_class_ap.iter().zip(&want) {
                            match (got, want) {
                                (Some(g), Some(w)) => {
                                    assert!((g - w).abs() < 1e-12, "{g} vs {w}")
                                }
                                (None, None) => {}
                                _ => panic!("positive-class bookkeeping diverged"),
                            }
                        }
                        let mean = present.iter().sum::<f64>() / present.len() as f64;
                        assert!((report.map.unwrap() - mean).abs() < 1e-12);
                        compared += 1;
                    }
                    Err(_) => assert!(present.is_empty(), "error only without positives"),
                }
            }
        }
    }
    assert!(compared > 1000, "only {compared} mAP comparisons ran");
    pass(8, "metric oracles", t0, 10.0);
}

// ── 9: trainability ──────────────────────────────────────────────────

#[test]
fn criterion_09_tiny_overfit() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    make_synthetic(&data_dir, 8, 4, 64, 32, 5).unwrap();
    let data = Dataset::open(&data_dir).unwrap();

    let mut cfg = Config::tiny();
    cfg.train.epochs = 200; // one full-batch step per epoch
    cfg.train.max_steps = 200;
    cfg.train.stop_at_loss = 0.05;

    let run = |out: &std::path::Path| {
        let mut model = Model::<f32>::init(&cfg, 1).unwrap();
        let outcome = train(&mut model, &data, &data, out, 1, None).unwrap();
        (model, outcome)
    };

    let t0 = Instant::now();
    let (model_a, out_a) = run(&dir.path().join("a"));
    let first = t0.elapsed().as_secs_f64();
    assert!(out_a.steps <= 200, "took {} steps", out_a.steps);
    assert!(out_a.final_loss < 0.05, "loss stuck at {}", out_a.final_loss);
    assert!(first < 300.0, "overfit took {first:.0}s, budget 300s");
    let (report, _) = evaluate(&model_a, &data).unwrap();
    assert_eq!(report.top1, Some(1.0), "train top-1 must reach 1.0");

    // bit-reproducibility: a second same-seed run writes identical
    // checkpoints and metrics (modulo the wall-clock column)
    let (_, out_b) = run(&dir.path().join("b"));
    assert_eq!(out_a, out_b);
    for name in [BEST_CKPT, LAST_CKPT] {
        let a = std::fs::read(dir.path().join("a").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between same-seed runs");
    }
    let strip_wall = |p: &std::path::Path| -> String {
        std::fs::read_to_string(p.join(METRICS_CSV))
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip_wall(&dir.path().join("a")), strip_wall(&dir.path().join("b")));
    println!(
        "  overfit in {} steps, loss {:.4}, top-1 1.0, {first:.0}s",
        out_a.steps, out_a.final_loss
    );
    pass(9, "tiny-preset overfit, bit-reproducible", t0, 600.0);
}

// ── 10: persistence ──────────────────────────────────────────────────

#[test]
fn criterion_10_persistence() {
    let t0 = Instant::now();
    let cfg = Config::tiny();
    let model = Model::<f32>::init(&cfg, 3).unwrap();
    let bytes = encode_checkpoint(&cfg, &model.params);

    // bit-exact round trip, in memory and through a file
    let raw = parse_checkpoint(&bytes).unwrap();
    assert_eq!(raw.fingerprint, cfg.fingerprint());
    for ((name, t), (rn, rt)) in model.params.leaves().iter().zip(&raw.tensors) {
        assert_eq!(name, rn);
        assert_eq!(t.data(), rt.data(), "{name}");
        assert_eq!(t.shape(), rt.shape(), "{name}");
    }
    let reassembled = assemble_params::<f32>(&cfg, raw.tensors).unwrap();
    assert_eq!(encode_checkpoint(&cfg, &reassembled), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&cfg, &model.params, &path).unwrap();
    let loaded = load_model::<f32>(&cfg, &path).unwrap();
    for ((name, a), (_, b)) in model.params.leaves().iter().zip(loaded.params.leaves()) {
        assert_eq!(a.data(), b.data(), "{name}");
    }

    // corruption taxonomy
    assert!(matches!(
        parse_checkpoint(&bytes[..bytes.len() / 2]),
        Err(CheckpointError::Malformed { .. })
    ));
    assert!(matches!(
        parse_checkpoint(&bytes[..3]),
        Err(CheckpointError::Malformed { .. })
    ));
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    assert!(matches!(
        parse_checkpoint(&bad_magic),
        Err(CheckpointError::Malformed { offset: 0, .. })
    ));
    let mut bad_version = bytes.clone();
    bad_version[4] = bad_version[4].wrapping_add(7);
    assert!(matches!(
        parse_checkpoint(&bad_version),
        Err(CheckpointError::Version { .. })
    ));
    let mut other = cfg.clone();
    other.model.num_classes = 7;
    assert!(matches!(
        load_model::<f32>(&other, &path),
        Err(CheckpointError::Fingerprint { .. })
    ));
    let mut short = parse_checkpoint(&bytes).unwrap();
    short.tensors.pop();
    assert!(matches!(
        assemble_params::<f32>(&cfg, short.tensors),
        Err(CheckpointError::MissingTensor { .. })
    ));
    pass(10, "persistence round-trip and corruption handling", t0, 10.0);
}

// ── augmentation batch driver sanity (supports criterion 6) ──────────

#[test]
fn augment_batch_disabled_passes_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut batch: Vec<LabeledExample> =
        (0..4).map(|_| example(16, 4, vec![1.0, 0.0], &mut rng)).collect();
    let before: Vec<Vec<f32>> =
        batch.iter().map(|e| e.features.data().to_vec()).collect();
    let mut cfg = Config::audio().augment;
    cfg.enabled = false;
    let events = augment_batch(&mut batch, &cfg, &mut rng).unwrap();
    assert!(events.iter().all(|e| matches!(e, mmvit::augment::MixEvent::Untouched)));
    for (e, b) in batch.iter().zip(&before) {
        assert_eq!(e.features.data(), b.as_slice());
    }
}
