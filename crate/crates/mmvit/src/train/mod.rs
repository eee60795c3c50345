//! Desk-scale training and evaluation loops: seeded sampling, optional
//! augmentation, AdamW with linear warmup, per-epoch evaluation, and
//! append-only CSV metrics. Given one seed and a single worker the whole
//! run is bit-reproducible (wall-clock column aside).

pub mod adamw;
pub mod dataset;
pub mod metrics;
pub mod sampler;

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment_batch, AugmentError, LabeledExample};
use crate::checkpoint::CheckpointError;
use crate::config::{ConfigError, Task};
use crate::model::{Mode, Model};
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub use adamw::{adamw_step, clip_grad_norm, OptimizerState};
pub use dataset::{make_synthetic, Dataset, DatasetError};
pub use metrics::{mean_average_precision, top1_accuracy, EvalReport, MetricsError};
pub use sampler::{weighted_sample, DatasetIndex, SamplerError};

pub const METRICS_CSV: &str = "metrics.csv";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
pub const STATE_FILE: &str = "state.txt";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("sample {index}: features are {got:?}, config wants ({want_t}, {want_f})")]
    Input { index: usize, got: Vec<usize>, want_t: usize, want_f: usize },
    #[error("loss diverged at step {step}: {loss}")]
    Diverged { step: u64, loss: f64 },
    #[error("no gradient for parameter `{name}`")]
    MissingGrad { name: String },
    #[error("gradient for `{name}` is {got:?}, parameter is {want:?}")]
    GradShape { name: String, got: Vec<usize>, want: Vec<usize> },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOutcome {
    pub epochs_run: usize,
    pub steps: u64,
    pub final_loss: f64,
    pub best_metric: f64,
    pub stopped_early: bool,
}

/// Progress snapshot persisted to `state.txt` after every epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResumeState {
    pub epochs_done: usize,
    pub step: u64,
    pub best: f64,
}

pub fn read_state(dir: &Path) -> Option<ResumeState> {
    let text = std::fs::read_to_string(dir.join(STATE_FILE)).ok()?;
    let mut s = ResumeState { epochs_done: 0, step: 0, best: f64::NEG_INFINITY };
    for line in text.lines() {
        let (k, v) = line.split_once('=')?;
        match k.trim() {
            "epochs_done" => s.epochs_done = v.trim().parse().ok()?,
            "step" => s.step = v.trim().parse().ok()?,
            "best" => s.best = v.trim().parse().ok()?,
            _ => return None,
        }
    }
    Some(s)
}

fn write_state(dir: &Path, s: &ResumeState) -> Result<()> {
    std::fs::write(
        dir.join(STATE_FILE),
        format!("epochs_done={}\nstep={}\nbest={}\n", s.epochs_done, s.step, s.best),
    )?;
    Ok(())
}

// Independent deterministic RNG streams derived from one seed: the
// stream id encodes (role, epoch), so a resumed run replays the exact
// per-epoch randomness of an uninterrupted one.
fn stream(seed: u64, role: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((role << 32) | epoch as u64);
    rng
}

const ROLE_ORDER: u64 = 1;
const ROLE_AUGMENT: u64 = 2;
const ROLE_DROPOUT: u64 = 3;

/// Mean per-row cross entropy or elementwise BCE, matching the task.
fn batch_loss(tape: &Tape<f32>, logits: Var, targets: &Tensor<f32>, task: Task) -> Result<Var> {
    match task {
        Task::MultiLabel => Ok(tape.bce_with_logits(logits, targets)?),
        Task::SingleLabel => {
            let (b, c) = (targets.shape()[0], targets.shape()[1]);
            let mut acc: Option<Var> = None;
            for r in 0..b {
                let row = tape.narrow(logits, 0, r, 1)?;
                let t = Tensor::from_vec(
                    vec![1, c],
                    targets.data()[r * c..(r + 1) * c].to_vec(),
                )
                .expect("row slice");
                let l = tape.softmax_cross_entropy(row, &t)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, l)?,
                    None => l,
                });
            }
            Ok(tape.scale(acc.expect("batch is non-empty"), 1.0 / b as f32)?)
        }
    }
}

fn load_examples(data: &Dataset, ids: &[usize], want: (usize, usize)) -> Result<Vec<LabeledExample>> {
    ids.iter()
        .map(|&i| {
            let features = data.features(i)?;
            if features.shape() != [want.0, want.1] {
                return Err(TrainError::Input {
                    index: i,
                    got: features.shape().to_vec(),
                    want_t: want.0,
                    want_f: want.1,
                });
            }
            Ok(LabeledExample { features, label: data.multi_hot(i) })
        })
        .collect()
}

/// Run per-sample eval-mode inference and score it by the config's
/// task metric. Also returns the raw score rows for report writers.
pub fn evaluate(model: &Model<f32>, data: &Dataset) -> Result<(EvalReport, Vec<Vec<f32>>)> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let (_, h, w) = model.cfg.model.input;
    let mut scores = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let f = data.features(i)?;
        if f.shape() != [h, w] {
            return Err(TrainError::Input {
                index: i,
                got: f.shape().to_vec(),
                want_t: h,
                want_f: w,
            });
        }
        let x = Tensor::from_vec(vec![1, h, w], f.data().to_vec()).expect("reshape");
        scores.push(model.logits(&x)?.data().to_vec());
    }
    let report = match model.cfg.model.task {
        Task::MultiLabel => {
            let labels: Vec<Vec<f32>> = (0..data.len()).map(|i| data.multi_hot(i)).collect();
            mean_average_precision(&scores, &labels)?
        }
        Task::SingleLabel => {
            let labels: Vec<usize> = data.items.iter().map(|it| it.labels[0]).collect();
            EvalReport {
                map: None,
                top1: Some(top1_accuracy(&scores, &labels)),
                per_class_ap: Vec::new(),
                samples: data.len(),
            }
        }
    };
    Ok((report, scores))
}

/// Train `model` on `data`, evaluating on `eval_data` after each epoch.
/// Writes `metrics.csv`, `last.ckpt`, `best.ckpt`, and `state.txt`
/// under `out`; pass the prior [`ResumeState`] to continue a run.
pub fn train(
    model: &mut Model<f32>,
    data: &Dataset,
    eval_data: &Dataset,
    out: &Path,
    seed: u64,
    resume: Option<ResumeState>,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    std::fs::create_dir_all(out)?;
    let cfg = model.cfg.clone();
    let tc = &cfg.train;
    let mc = &cfg.model;
    let (want_t, want_f) = (mc.input.1, mc.input.2);
    let batch = tc.batch_size.max(1);
    let steps_per_epoch = data.len().div_ceil(batch);
    let planned: u64 = (tc.epochs * steps_per_epoch) as u64;
    let total_steps = if tc.max_steps > 0 { planned.min(tc.max_steps as u64) } else { planned };
    let warmup = ((total_steps as f64 * tc.warmup_frac).ceil() as u64).max(1);

    let weights = match mc.task {
        Task::MultiLabel => {
            Some(DatasetIndex::new(&data.label_sets(), mc.num_classes)?.weights)
        }
        Task::SingleLabel => None,
    };

    let start = resume.unwrap_or(ResumeState { epochs_done: 0, step: 0, best: f64::NEG_INFINITY });
    let mut gstep = start.step;
    let mut best = start.best;
    let csv_path = out.join(METRICS_CSV);
    let fresh = start.epochs_done == 0 || !csv_path.exists();
    let mut csv = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&csv_path)?;
    if fresh {
        writeln!(csv, "epoch,step,loss,metric,lr,wall_ms")?;
    }

    let mut opt = OptimizerState::new(&model.params);
    let mut outcome = TrainOutcome {
        epochs_run: start.epochs_done,
        steps: gstep,
        final_loss: f64::NAN,
        best_metric: best,
        stopped_early: false,
    };

    for epoch in start.epochs_done..tc.epochs {
        let wall = Instant::now();
        let order: Vec<usize> = match &weights {
            Some(w) => weighted_sample(w, &mut stream(seed, ROLE_ORDER, epoch), steps_per_epoch * batch)?,
            None => {
                let mut ids: Vec<usize> = (0..data.len()).collect();
                ids.shuffle(&mut stream(seed, ROLE_ORDER, epoch));
                ids
            }
        };
        let mut aug_rng = stream(seed, ROLE_AUGMENT, epoch);
        let mut drop_rng = stream(seed, ROLE_DROPOUT, epoch);

        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        let mut lr = 0.0f64;
        let mut hit_cap = false;
        for chunk in order.chunks(batch) {
            let mut examples = load_examples(data, chunk, (want_t, want_f))?;
            if cfg.augment.enabled {
                augment_batch(&mut examples, &cfg.augment, &mut aug_rng)?;
            }
            let inputs: Vec<Tensor<f32>> = examples
                .iter()
                .map(|e| {
                    Tensor::from_vec(vec![1, want_t, want_f], e.features.data().to_vec())
                        .expect("reshape")
                })
                .collect();
            let targets = Tensor::from_vec(
                vec![examples.len(), mc.num_classes],
                examples.iter().flat_map(|e| e.label.iter().copied()).collect(),
            )
            .expect("label rows");

            lr = tc.lr * ((gstep + 1) as f64 / warmup as f64).min(1.0);
            let tape = Tape::<f32>::new();
            let pv = model.register(&tape);
            let logits = model.forward_batch(
                &tape,
                &pv,
                &inputs,
                &mut Mode::Train { dropout_rng: &mut drop_rng },
            )?;
            let loss = batch_loss(&tape, logits, &targets, mc.task)?;
            let loss_val = tape.value(loss).data()[0] as f64;
            if !loss_val.is_finite() {
                return Err(TrainError::Diverged { step: gstep, loss: loss_val });
            }
            tape.backward(loss)?;

            let mut grads: HashMap<String, Tensor<f32>> = HashMap::new();
            for ((name, var), (_, leaf)) in pv.leaves().into_iter().zip(model.params.leaves()) {
                let g = tape
                    .grad(*var)
                    // Parameters the graph provably never reaches (the
                    // second view past the last cross block) get zero
                    // gradients rather than an error.
                    .unwrap_or_else(|| Tensor::zeros(leaf.shape().to_vec()));
                grads.insert(name, g);
            }
            if tc.grad_clip > 0.0 {
                clip_grad_norm(&mut grads, tc.grad_clip);
            }
            adamw_step(&mut model.params, &grads, &mut opt, lr, tc.weight_decay)?;

            gstep += 1;
            loss_sum += loss_val;
            batches += 1;
            if tc.max_steps > 0 && gstep >= tc.max_steps as u64 {
                hit_cap = true;
                break;
            }
        }
        let mean_loss = loss_sum / batches as f64;
        let (report, _) = evaluate(model, eval_data)?;
        let metric = report.metric();

        outcome.epochs_run = epoch + 1;
        outcome.steps = gstep;
        outcome.final_loss = mean_loss;
        if metric > best {
            best = metric;
            model.save(&out.join(BEST_CKPT))?;
        }
        outcome.best_metric = best;
        model.save(&out.join(LAST_CKPT))?;
        write_state(out, &ResumeState { epochs_done: epoch + 1, step: gstep, best })?;
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            epoch + 1,
            gstep,
            mean_loss,
            metric,
            lr,
            wall.elapsed().as_millis()
        )?;

        if hit_cap || (tc.stop_at_loss > 0.0 && mean_loss < tc.stop_at_loss) {
            outcome.stopped_early = true;
            break;
        }
    }
    Ok(outcome)
}
