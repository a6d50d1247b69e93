//! Losses, metrics, initialization, the Adam optimizer with schedule,
//! augmentation, and the training loop.

mod metrics;
mod optim;

pub use metrics::{argmax_labels, evaluate, inverse_frequency_weights, iou_per_class, one_hot, Metrics};
pub use optim::{xavier_init, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::Network;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Shape, Tensor};

/// One training sample: grayscale volume in `[0,1]` with per-voxel labels.
#[derive(Clone, Debug)]
pub struct RawSample {
    pub volume: Vec<f32>,
    pub labels: Vec<u8>,
    pub extents: [usize; 3],
}

impl RawSample {
    pub fn voxels(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.volume.len() != self.voxels() || self.labels.len() != self.voxels() {
            return Err(Error::Invalid(format!(
                "sample data length {}/{} does not match extents {:?}",
                self.volume.len(),
                self.labels.len(),
                self.extents
            )));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Invalid(format!("label {l} out of range for {num_classes} classes")));
        }
        Ok(())
    }
}

/// An element of the axis-aligned symmetry group: axis permutation plus
/// per-axis flips.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Orientation {
    pub perm: [usize; 3],
    pub flip: [bool; 3],
}

impl Orientation {
    pub const IDENTITY: Orientation = Orientation { perm: [0, 1, 2], flip: [false, false, false] };

    /// All group elements that keep `extents` unchanged (always includes the
    /// identity; all 48 for cubes).
    pub fn preserving(extents: [usize; 3]) -> Vec<Orientation> {
        const PERMS: [[usize; 3]; 6] =
            [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let mut out = Vec::new();
        for perm in PERMS {
            if (0..3).all(|d| extents[perm[d]] == extents[d]) {
                for bits in 0..8u8 {
                    out.push(Orientation {
                        perm,
                        flip: [bits & 1 != 0, bits & 2 != 0, bits & 4 != 0],
                    });
                }
            }
        }
        out
    }

    fn apply<V: Copy>(&self, data: &[V], extents: [usize; 3]) -> Vec<V> {
        let out_dims = [extents[self.perm[0]], extents[self.perm[1]], extents[self.perm[2]]];
        let strides = [extents[1] * extents[2], extents[2], 1];
        let mut out = Vec::with_capacity(data.len());
        for o0 in 0..out_dims[0] {
            for o1 in 0..out_dims[1] {
                for o2 in 0..out_dims[2] {
                    let o = [o0, o1, o2];
                    let mut lin = 0usize;
                    for d in 0..3 {
                        let c = if self.flip[d] { out_dims[d] - 1 - o[d] } else { o[d] };
                        lin += c * strides[self.perm[d]];
                    }
                    out.push(data[lin]);
                }
            }
        }
        out
    }
}

/// Crop at `origin`, no randomness.
pub fn crop(sample: &RawSample, origin: [usize; 3], target: [usize; 3]) -> Result<RawSample> {
    for d in 0..3 {
        if origin[d] + target[d] > sample.extents[d] {
            return Err(Error::Invalid(format!(
                "crop axis {d}: origin {} + extent {} exceeds source {}",
                origin[d], target[d], sample.extents[d]
            )));
        }
    }
    let [_, sy, sz] = [sample.extents[0], sample.extents[1], sample.extents[2]];
    let mut volume = Vec::with_capacity(target.iter().product());
    let mut labels = Vec::with_capacity(target.iter().product());
    for z in 0..target[0] {
        for y in 0..target[1] {
            let base = ((origin[0] + z) * sy + origin[1] + y) * sz + origin[2];
            volume.extend_from_slice(&sample.volume[base..base + target[2]]);
            labels.extend_from_slice(&sample.labels[base..base + target[2]]);
        }
    }
    Ok(RawSample { volume, labels, extents: target })
}

/// Random crop to `target`, then a random extent-preserving element of the
/// axis-aligned symmetry group, applied identically to volume and labels.
pub fn augment(sample: &RawSample, target: [usize; 3], rng: &mut ChaCha8Rng) -> Result<RawSample> {
    let mut origin = [0usize; 3];
    for d in 0..3 {
        if target[d] > sample.extents[d] {
            return Err(Error::Invalid(format!(
                "crop axis {d}: target {} exceeds source {}",
                target[d], sample.extents[d]
            )));
        }
        origin[d] = rng.gen_range(0..=sample.extents[d] - target[d]);
    }
    let cropped = crop(sample, origin, target)?;
    let group = Orientation::preserving(target);
    let g = group[rng.gen_range(0..group.len())];
    Ok(apply_orientation(&cropped, g))
}

pub fn apply_orientation(sample: &RawSample, g: Orientation) -> RawSample {
    RawSample {
        volume: g.apply(&sample.volume, sample.extents),
        labels: g.apply(&sample.labels, sample.extents),
        extents: sample.extents,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Dice,
    CrossEntropy,
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dice" => Ok(LossKind::Dice),
            "xent" | "cross-entropy" => Ok(LossKind::CrossEntropy),
            other => Err(Error::Config(format!("unknown loss '{other}' (expected dice|xent)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub iterations: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    pub seed: u64,
    /// Training crop extents; samples are cropped/augmented to this.
    pub crop: [usize; 3],
    pub augment: bool,
    pub base_lr: f64,
    pub decay_rate: f64,
    pub decay_interval: usize,
    pub dice_smooth: f64,
    pub class_weights: Option<Vec<f32>>,
    /// Validate (and maybe checkpoint) every this many iterations.
    pub val_interval: usize,
    /// Where to write the best-validation-mean-IoU checkpoint.
    pub checkpoint: Option<PathBuf>,
    pub verbose: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            iterations: 1000,
            batch_size: 2,
            loss: LossKind::Dice,
            seed: 0,
            crop: [32, 64, 64],
            augment: true,
            base_lr: 1e-3,
            decay_rate: 0.97,
            decay_interval: 500,
            dice_smooth: 1.0,
            class_weights: None,
            val_interval: 100,
            checkpoint: None,
            verbose: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HistoryRow {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
    pub val_mean_iou: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub history: Vec<HistoryRow>,
    pub best_val_mean_iou: Option<f64>,
    pub final_loss: f64,
    pub final_accuracy: f64,
}

impl TrainOutcome {
    /// CSV with one row per iteration: iteration, lr, loss, accuracy, mean IoU.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,lr,loss,accuracy,val_mean_iou\n");
        for r in &self.history {
            let miou = r.val_mean_iou.map(|v| format!("{v:.6}")).unwrap_or_default();
            s.push_str(&format!(
                "{},{:.8},{:.6},{:.6},{}\n",
                r.iteration, r.lr, r.loss, r.accuracy, miou
            ));
        }
        s
    }
}

fn batch_tensors(
    samples: &[RawSample],
    num_classes: usize,
) -> (Tensor<f32>, Tensor<f32>, Vec<u8>) {
    let ext = samples[0].extents;
    let v: usize = ext.iter().product();
    let b = samples.len();
    let mut vol = Vec::with_capacity(b * v);
    let mut hot = vec![0.0f32; b * num_classes * v];
    let mut labels = Vec::with_capacity(b * v);
    for (bi, s) in samples.iter().enumerate() {
        vol.extend_from_slice(&s.volume);
        labels.extend_from_slice(&s.labels);
        for (i, &l) in s.labels.iter().enumerate() {
            hot[(bi * num_classes + l as usize) * v + i] = 1.0;
        }
    }
    let vshape = Shape::act(b, 1, &ext);
    let hshape = Shape::act(b, num_classes, &ext);
    (
        Tensor::new(vshape, vol).expect("sized"),
        Tensor::new(hshape, hot).expect("sized"),
        labels,
    )
}

/// Mean of per-sample mean IoU over a validation set, eval-mode forward.
pub fn validate(net: &Network<f32>, val: &[RawSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in val {
        let x = Tensor::new(Shape::act(1, 1, &s.extents), s.volume.clone())?;
        let pred = net.forward_eval(&x)?;
        total += evaluate(&pred, &s.labels)?.mean_iou;
    }
    Ok(total / val.len().max(1) as f64)
}

/// Iterate batches, compute the chosen loss, backpropagate, and step Adam.
/// Checkpoints the best validation mean-IoU model when a path is configured.
pub fn train(
    net: &mut Network<f32>,
    train_set: &[RawSample],
    val_set: &[RawSample],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Invalid("training dataset is empty".to_string()));
    }
    let classes = net.config().num_classes;
    for s in train_set.iter().chain(val_set) {
        s.validate(classes)?;
    }
    let weights: Option<Vec<f32>> = opts.class_weights.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = OptimizerState::new(net.params(), opts.base_lr, opts.decay_rate, opts.decay_interval);
    let mut outcome = TrainOutcome::default();
    let mut order: Vec<usize> = Vec::new();

    for iter in 0..opts.iterations {
        // epoch-shuffled sample order
        let mut batch = Vec::with_capacity(opts.batch_size);
        for _ in 0..opts.batch_size {
            if order.is_empty() {
                order = (0..train_set.len()).collect();
                order.shuffle(&mut rng);
            }
            let idx = order.pop().expect("refilled");
            let s = &train_set[idx];
            let cropped = if opts.augment {
                augment(s, opts.crop, &mut rng)?
            } else {
                crop(s, [0, 0, 0], opts.crop)?
            };
            batch.push(cropped);
        }
        let (x, truth, labels) = batch_tensors(&batch, classes);

        let lr = opt.effective_lr();
        let mut graph = Graph::new();
        let fwd = net.forward_train(&mut graph, &x, &mut rng)?;
        let loss_t = match opts.loss {
            LossKind::Dice => graph.dice_loss(&fwd.output, &truth, opts.dice_smooth)?,
            LossKind::CrossEntropy => {
                graph.cross_entropy_loss(&fwd.output, &truth, weights.as_deref())?
            }
        };
        let loss = loss_t.item() as f64;
        if !loss.is_finite() {
            return Err(Error::Train {
                iteration: iter,
                msg: format!("non-finite loss {loss}"),
            });
        }
        graph.backward(&loss_t)?;
        let grads: Vec<Vec<f32>> = fwd
            .param_handles
            .iter()
            .map(|h| graph.take_grad(h).unwrap_or_else(|| vec![0.0; h.numel()]))
            .collect();
        let accuracy = {
            let pred_labels = argmax_labels(&fwd.output);
            let correct = pred_labels.iter().zip(&labels).filter(|(p, g)| p == g).count();
            correct as f64 / labels.len() as f64
        };
        drop(graph);
        drop(fwd);
        opt.step(net.params_mut(), &grads)
            .map_err(|e| Error::Train { iteration: iter, msg: e.to_string() })?;

        let mut val_mean_iou = None;
        if !val_set.is_empty() && (iter + 1) % opts.val_interval == 0 {
            let miou = validate(net, val_set)?;
            val_mean_iou = Some(miou);
            let improved = outcome.best_val_mean_iou.map(|b| miou > b).unwrap_or(true);
            if improved {
                outcome.best_val_mean_iou = Some(miou);
                if let Some(path) = &opts.checkpoint {
                    crate::checkpoint::save(net, path)?;
                }
            }
        }
        if opts.verbose && (iter % 50 == 0 || val_mean_iou.is_some()) {
            eprintln!(
                "iter {iter:>6}  lr {lr:.2e}  loss {loss:.4}  acc {accuracy:.4}{}",
                val_mean_iou.map(|v| format!("  val mIoU {v:.4}")).unwrap_or_default()
            );
        }
        outcome.final_loss = loss;
        outcome.final_accuracy = accuracy;
        outcome.history.push(HistoryRow { iteration: iter, lr, loss, accuracy, val_mean_iou });
    }
    // fall back to the final model when no validation checkpoints happened
    if let (Some(path), None) = (&opts.checkpoint, outcome.best_val_mean_iou) {
        crate::checkpoint::save(net, path)?;
    }
    Ok(outcome)
}
