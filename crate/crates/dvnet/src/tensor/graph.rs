//! Recording tape for reverse-mode differentiation.
//!
//! Each op appends one node holding the input ids and whatever values its
//! adjoint needs (`Arc` clones, never copies). `backward` walks the node list
//! in exact reverse execution order. Gradient slots live per tensor id; leaf
//! slots persist across calls and accumulate, intermediate slots are freed as
//! soon as the walk passes them.

use std::sync::Arc;

use rand::Rng;

use super::elem::Element;
use super::kernels as k;
use super::{Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

struct Entry {
    shape: Shape,
    needs_grad: bool,
    leaf: bool,
}

enum Op<T: Element> {
    Leaf,
    Conv {
        x: Option<TensorId>,
        w: Option<TensorId>,
        xdata: Arc<Vec<T>>,
        wdata: Arc<Vec<T>>,
        xshape: Shape,
        wshape: Shape,
        stride: usize,
        pad: usize,
    },
    ConvTranspose {
        x: Option<TensorId>,
        w: Option<TensorId>,
        xdata: Arc<Vec<T>>,
        wdata: Arc<Vec<T>>,
        xshape: Shape,
        wshape: Shape,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Option<TensorId>,
        scale: Option<TensorId>,
        shift: Option<TensorId>,
        xhat: Arc<Vec<T>>,
        inv_std: Vec<T>,
        scale_data: Arc<Vec<T>>,
        xshape: Shape,
    },
    BiasAdd {
        x: Option<TensorId>,
        bias: Option<TensorId>,
        xshape: Shape,
    },
    Relu {
        x: Option<TensorId>,
        y: Arc<Vec<T>>,
    },
    AvgPool {
        x: Option<TensorId>,
        xshape: Shape,
        window: usize,
        stride: usize,
    },
    Concat {
        a: Option<TensorId>,
        b: Option<TensorId>,
        ashape: Shape,
        bshape: Shape,
    },
    Dropout {
        x: Option<TensorId>,
        mask: Arc<Vec<T>>,
    },
    Softmax {
        x: Option<TensorId>,
        y: Arc<Vec<T>>,
        xshape: Shape,
    },
    Sum {
        x: Option<TensorId>,
        numel: usize,
    },
    WeightedSum {
        x: Option<TensorId>,
        weights: Arc<Vec<T>>,
    },
    Dice {
        p: Option<TensorId>,
        saved: k::DiceSaved<T>,
        gdata: Arc<Vec<T>>,
        pshape: Shape,
    },
    CrossEntropy {
        p: Option<TensorId>,
        pdata: Arc<Vec<T>>,
        gdata: Arc<Vec<T>>,
        weights: Vec<T>,
        pshape: Shape,
    },
}

pub struct Graph<T: Element> {
    entries: Vec<Entry>,
    ops: Vec<Op<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { entries: Vec::new(), ops: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op<T>, shape: Shape, needs_grad: bool, leaf: bool) -> TensorId {
        let id = TensorId(self.ops.len());
        self.ops.push(op);
        self.entries.push(Entry { shape, needs_grad, leaf });
        self.grads.push(None);
        id
    }

    fn needs(&self, id: Option<TensorId>) -> bool {
        id.map(|i| self.entries[i.0].needs_grad).unwrap_or(false)
    }

    /// Register a tensor as a graph leaf. With `requires_grad`, a gradient
    /// slot is populated by `backward`.
    pub fn leaf(&mut self, t: &Tensor<T>, requires_grad: bool) -> Tensor<T> {
        let id = self.push(Op::Leaf, t.shape().clone(), requires_grad, true);
        let mut out = t.clone();
        out.id = Some(id);
        out
    }

    /// Cross-correlation of `x` with kernel `w` (`[c_out, c_in, k...]`).
    pub fn conv_nd(
        &mut self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        let (y, os) = k::conv_fwd(x.data(), x.shape(), w.data(), w.shape(), stride, pad)?;
        let needs = self.needs(x.id) || self.needs(w.id);
        let id = self.push(
            Op::Conv {
                x: x.id,
                w: w.id,
                xdata: x.data_arc(),
                wdata: w.data_arc(),
                xshape: x.shape().clone(),
                wshape: w.shape().clone(),
                stride,
                pad,
            },
            os.clone(),
            needs,
            false,
        );
        let mut out = Tensor::new(os, y)?;
        out.id = Some(id);
        Ok(out)
    }

    /// Transposed convolution of `x` with kernel `w` (`[c_in, c_out, k...]`).
    pub fn conv_transpose_nd(
        &mut self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Tensor<T>> {
        let (y, os) =
            k::conv_transpose_fwd(x.data(), x.shape(), w.data(), w.shape(), stride, pad, out_pad)?;
        let needs = self.needs(x.id) || self.needs(w.id);
        let id = self.push(
            Op::ConvTranspose {
                x: x.id,
                w: w.id,
                xdata: x.data_arc(),
                wdata: w.data_arc(),
                xshape: x.shape().clone(),
                wshape: w.shape().clone(),
                stride,
                pad,
            },
            os.clone(),
            needs,
            false,
        );
        let mut out = Tensor::new(os, y)?;
        out.id = Some(id);
        Ok(out)
    }

    /// Train-mode batch norm. `scale`/`shift` have one entry per channel.
    pub fn batch_norm(
        &mut self,
        x: &Tensor<T>,
        scale: &Tensor<T>,
        shift: &Tensor<T>,
        eps: f64,
    ) -> Result<BnOutput<T>> {
        let ch = x.shape().channels();
        if scale.numel() != ch || shift.numel() != ch {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "channel axis: input has {ch} channels, scale/shift have {}/{}",
                    scale.numel(),
                    shift.numel()
                ),
            ));
        }
        let f = k::bn_train_fwd(x.data(), x.shape(), scale.data(), shift.data(), eps);
        let xhat = Arc::new(f.xhat);
        let needs = self.needs(x.id) || self.needs(scale.id) || self.needs(shift.id);
        let id = self.push(
            Op::BatchNorm {
                x: x.id,
                scale: scale.id,
                shift: shift.id,
                xhat,
                inv_std: f.inv_std,
                scale_data: scale.data_arc(),
                xshape: x.shape().clone(),
            },
            x.shape().clone(),
            needs,
            false,
        );
        let mut out = Tensor::new(x.shape().clone(), f.y)?;
        out.id = Some(id);
        Ok(BnOutput { out, mean: f.mean, var: f.var })
    }

    /// Add one bias value per channel.
    pub fn bias_add(&mut self, x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        if bias.numel() != x.shape().channels() {
            return Err(Error::shape(
                "bias_add",
                format!("channel axis: input has {} channels, bias has {}", x.shape().channels(), bias.numel()),
            ));
        }
        let y = k::bias_add_fwd(x.data(), x.shape(), bias.data());
        let needs = self.needs(x.id) || self.needs(bias.id);
        let id = self.push(
            Op::BiasAdd { x: x.id, bias: bias.id, xshape: x.shape().clone() },
            x.shape().clone(),
            needs,
            false,
        );
        let mut out = Tensor::new(x.shape().clone(), y)?;
        out.id = Some(id);
        Ok(out)
    }

    pub fn relu(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = Arc::new(k::relu_fwd(x.data()));
        let needs = self.needs(x.id);
        let id = self.push(
            Op::Relu { x: x.id, y: Arc::clone(&y) },
            x.shape().clone(),
            needs,
            false,
        );
        let mut out = Tensor::from_arc(x.shape().clone(), y);
        out.id = Some(id);
        out
    }

    pub fn avg_pool_nd(&mut self, x: &Tensor<T>, window: usize, stride: usize) -> Result<Tensor<T>> {
        let (y, os) = k::avg_pool_fwd(x.data(), x.shape(), window, stride)?;
        let needs = self.needs(x.id);
        let id = self.push(
            Op::AvgPool { x: x.id, xshape: x.shape().clone(), window, stride },
            os.clone(),
            needs,
            false,
        );
        let mut out = Tensor::new(os, y)?;
        out.id = Some(id);
        Ok(out)
    }

    pub fn concat_channels(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, os) = k::concat_fwd(a.data(), a.shape(), b.data(), b.shape())?;
        let needs = self.needs(a.id) || self.needs(b.id);
        let id = self.push(
            Op::Concat { a: a.id, b: b.id, ashape: a.shape().clone(), bshape: b.shape().clone() },
            os.clone(),
            needs,
            false,
        );
        let mut out = Tensor::new(os, y)?;
        out.id = Some(id);
        Ok(out)
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-rate)`.
    pub fn dropout<R: Rng>(&mut self, x: &Tensor<T>, rate: f64, rng: &mut R) -> Tensor<T> {
        debug_assert!((0.0..1.0).contains(&rate));
        if rate == 0.0 {
            return x.clone();
        }
        let keep = 1.0 - rate;
        let inv = T::from_f64(1.0 / keep);
        let mask: Vec<T> = (0..x.numel())
            .map(|_| if rng.gen::<f64>() < keep { inv } else { T::zero() })
            .collect();
        let mask = Arc::new(mask);
        let y = k::mul_mask(x.data(), &mask);
        let needs = self.needs(x.id);
        let id = self.push(Op::Dropout { x: x.id, mask }, x.shape().clone(), needs, false);
        let mut out = Tensor::new(x.shape().clone(), y).expect("shape preserved");
        out.id = Some(id);
        out
    }

    pub fn softmax_channels(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = Arc::new(k::softmax_fwd(x.data(), x.shape()));
        let needs = self.needs(x.id);
        let id = self.push(
            Op::Softmax { x: x.id, y: Arc::clone(&y), xshape: x.shape().clone() },
            x.shape().clone(),
            needs,
            false,
        );
        let mut out = Tensor::from_arc(x.shape().clone(), y);
        out.id = Some(id);
        out
    }

    /// Scalar sum of all entries.
    pub fn sum(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let s = crate::exec::sum(x.data());
        let needs = self.needs(x.id);
        let id = self.push(Op::Sum { x: x.id, numel: x.numel() }, Shape::new(vec![1]), needs, false);
        let mut out = Tensor::scalar(s);
        out.id = Some(id);
        out
    }

    /// Scalar dot product with a constant weight tensor.
    pub fn weighted_sum(&mut self, x: &Tensor<T>, weights: &Tensor<T>) -> Result<Tensor<T>> {
        if weights.numel() != x.numel() {
            return Err(Error::shape(
                "weighted_sum",
                format!("weights {} vs input {}", weights.shape(), x.shape()),
            ));
        }
        let s = crate::exec::sum_zip(x.data(), weights.data(), |a, b| a * b);
        let needs = self.needs(x.id);
        let id = self.push(
            Op::WeightedSum { x: x.id, weights: weights.data_arc() },
            Shape::new(vec![1]),
            needs,
            false,
        );
        let mut out = Tensor::scalar(s);
        out.id = Some(id);
        Ok(out)
    }

    /// Soft dice loss averaged over classes. `truth` is treated as constant.
    pub fn dice_loss(&mut self, pred: &Tensor<T>, truth: &Tensor<T>, smooth: f64) -> Result<Tensor<T>> {
        if pred.shape().dims != truth.shape().dims {
            return Err(Error::shape(
                "dice_loss",
                format!("prediction {} vs truth {}", pred.shape(), truth.shape()),
            ));
        }
        if pred.numel() == 0 {
            return Err(Error::shape("dice_loss", "empty tensors".to_string()));
        }
        let (loss, saved) = k::dice_fwd(pred.data(), truth.data(), pred.shape(), smooth);
        let needs = self.needs(pred.id);
        let id = self.push(
            Op::Dice {
                p: pred.id,
                saved,
                gdata: truth.data_arc(),
                pshape: pred.shape().clone(),
            },
            Shape::new(vec![1]),
            needs,
            false,
        );
        let mut out = Tensor::scalar(loss);
        out.id = Some(id);
        Ok(out)
    }

    /// Weighted cross-entropy on softmax probabilities, mean over voxels.
    pub fn cross_entropy_loss(
        &mut self,
        pred: &Tensor<T>,
        truth: &Tensor<T>,
        class_weights: Option<&[T]>,
    ) -> Result<Tensor<T>> {
        if pred.shape().dims != truth.shape().dims {
            return Err(Error::shape(
                "cross_entropy",
                format!("prediction {} vs truth {}", pred.shape(), truth.shape()),
            ));
        }
        let ch = pred.shape().channels();
        let weights: Vec<T> = match class_weights {
            Some(w) => {
                if w.len() != ch {
                    return Err(Error::shape(
                        "cross_entropy",
                        format!("channel axis: {} classes, {} weights", ch, w.len()),
                    ));
                }
                w.to_vec()
            }
            None => vec![T::one(); ch],
        };
        let loss = k::cross_entropy_fwd(pred.data(), truth.data(), pred.shape(), &weights);
        let needs = self.needs(pred.id);
        let id = self.push(
            Op::CrossEntropy {
                p: pred.id,
                pdata: pred.data_arc(),
                gdata: truth.data_arc(),
                weights,
                pshape: pred.shape().clone(),
            },
            Shape::new(vec![1]),
            needs,
            false,
        );
        let mut out = Tensor::scalar(loss);
        out.id = Some(id);
        Ok(out)
    }

    fn accumulate(&mut self, id: TensorId, delta: Vec<T>) {
        debug_assert_eq!(self.entries[id.0].shape.numel(), delta.len());
        match &mut self.grads[id.0] {
            Some(slot) => {
                for (s, d) in slot.iter_mut().zip(&delta) {
                    *s += *d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    /// Populate gradient slots for every tensor reachable from `loss` that
    /// requires gradients. Repeated calls without [`Graph::reset_grads`]
    /// accumulate into leaf slots.
    pub fn backward(&mut self, loss: &Tensor<T>) -> Result<()> {
        let Some(loss_id) = loss.id else {
            return Err(Error::Graph("loss tensor is not tracked on this graph".to_string()));
        };
        if !loss.is_scalar() {
            return Err(Error::Graph(format!(
                "loss must be scalar, got shape {}",
                loss.shape()
            )));
        }
        match &mut self.grads[loss_id.0] {
            Some(slot) => slot[0] += T::one(),
            slot @ None => *slot = Some(vec![T::one()]),
        }
        for i in (0..=loss_id.0).rev() {
            if !self.entries[i].needs_grad || self.entries[i].leaf {
                continue;
            }
            let Some(gout) = self.grads[i].take() else { continue };
            let deltas = self.input_grads(i, gout)?;
            for (id, delta) in deltas {
                self.accumulate(id, delta);
            }
        }
        Ok(())
    }

    /// Gradients this node sends to each of its tracked inputs.
    fn input_grads(&self, i: usize, gout: Vec<T>) -> Result<Vec<(TensorId, Vec<T>)>> {
        let oshape = &self.entries[i].shape;
        let mut deltas: Vec<(TensorId, Vec<T>)> = Vec::new();
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Conv { x, w, xdata, wdata, xshape, wshape, stride, pad } => {
                if self.needs(*x) {
                    let dx =
                        k::conv_grad_input(&gout, oshape, wdata, wshape, xshape, *stride, *pad)?;
                    deltas.push((x.unwrap(), dx));
                }
                if self.needs(*w) {
                    let dw =
                        k::conv_grad_kernel(&gout, oshape, xdata, xshape, wshape, *stride, *pad);
                    deltas.push((w.unwrap(), dw));
                }
            }
            Op::ConvTranspose { x, w, xdata, wdata, xshape, wshape, stride, pad } => {
                if self.needs(*x) {
                    let dx = k::conv_transpose_grad_input(
                        &gout, oshape, wdata, wshape, xshape, *stride, *pad,
                    )?;
                    deltas.push((x.unwrap(), dx));
                }
                if self.needs(*w) {
                    let dw = k::conv_transpose_grad_kernel(
                        &gout, oshape, xdata, xshape, wshape, *stride, *pad,
                    );
                    deltas.push((w.unwrap(), dw));
                }
            }
            Op::BatchNorm { x, scale, shift, xhat, inv_std, scale_data, xshape } => {
                let g = k::bn_bwd(&gout, xshape, xhat, inv_std, scale_data);
                if self.needs(*x) {
                    deltas.push((x.unwrap(), g.dx));
                }
                if self.needs(*scale) {
                    deltas.push((scale.unwrap(), g.dscale));
                }
                if self.needs(*shift) {
                    deltas.push((shift.unwrap(), g.dshift));
                }
            }
            Op::BiasAdd { x, bias, xshape } => {
                if self.needs(*x) {
                    deltas.push((x.unwrap(), gout.clone()));
                }
                if self.needs(*bias) {
                    deltas.push((bias.unwrap(), k::bias_grad(&gout, xshape)));
                }
            }
            Op::Relu { x, y } => {
                if self.needs(*x) {
                    deltas.push((x.unwrap(), k::relu_bwd(&gout, y)));
                }
            }
            Op::AvgPool { x, xshape, window, stride } => {
                if self.needs(*x) {
                    deltas.push((x.unwrap(), k::avg_pool_bwd(&gout, oshape, xshape, *window, *stride)));
                }
            }
            Op::Concat { a, b, ashape, bshape } => {
                let (da, db) = k::concat_bwd(&gout, ashape, bshape);
                if self.needs(*a) {
                    deltas.push((a.unwrap(), da));
                }
                if self.needs(*b) {
                    deltas.push((b.unwrap(), db));
                }
            }
            Op::Dropout { x, mask } => {
                if self.needs(*x) {
                    deltas.push((x.unwrap(), k::mul_mask(&gout, mask)));
                }
            }
            Op::Softmax { x, y, xshape } => {
                if self.needs(*x) {
                    deltas.push((x.unwrap(), k::softmax_bwd(&gout, y, xshape)));
                }
            }
            Op::Sum { x, numel } => {
                if self.needs(*x) {
                    deltas.push((x.unwrap(), vec![gout[0]; *numel]));
                }
            }
            Op::WeightedSum { x, weights } => {
                if self.needs(*x) {
                    deltas.push((x.unwrap(), weights.iter().map(|&w| w * gout[0]).collect()));
                }
            }
            Op::Dice { p, saved, gdata, pshape } => {
                if self.needs(*p) {
                    deltas.push((p.unwrap(), k::dice_bwd(gout[0], saved, gdata, pshape)));
                }
            }
            Op::CrossEntropy { p, pdata, gdata, weights, pshape } => {
                if self.needs(*p) {
                    deltas.push((p.unwrap(), k::cross_entropy_bwd(gout[0], pdata, gdata, pshape, weights)));
                }
            }
        }
        Ok(deltas)
    }

    /// Gradient slot of a tracked tensor, if populated.
    pub fn grad(&self, t: &Tensor<T>) -> Option<&[T]> {
        t.id.and_then(|id| self.grads[id.0].as_deref())
    }

    pub fn take_grad(&mut self, t: &Tensor<T>) -> Option<Vec<T>> {
        t.id.and_then(|id| self.grads[id.0].take())
    }

    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }
}

/// Train-mode batch-norm result plus the batch statistics the caller needs
/// to maintain running estimates.
pub struct BnOutput<T: Element> {
    pub out: Tensor<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = Tensor::new(Shape::act(1, 2, &[3]), vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap();
        let x = g.leaf(&x, true);
        let loss = g.sum(&x);
        g.backward(&loss).unwrap();
        assert_eq!(g.grad(&x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn relu_gates_gradient() {
        let mut g = Graph::<f64>::new();
        let x = Tensor::new(Shape::act(1, 1, &[4]), vec![-1.0, 2.0, -3.0, 4.0]).unwrap();
        let x = g.leaf(&x, true);
        let y = g.relu(&x);
        let loss = g.sum(&y);
        g.backward(&loss).unwrap();
        assert_eq!(g.grad(&x).unwrap(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = Tensor::new(Shape::act(1, 1, &[2]), vec![1.0, 2.0]).unwrap();
        let x = g.leaf(&x, true);
        let y = g.relu(&x);
        assert!(g.backward(&y).is_err());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = Tensor::new(Shape::act(1, 1, &[2]), vec![1.0, 2.0]).unwrap();
        let x = g.leaf(&x, true);
        let loss = g.sum(&x);
        g.backward(&loss).unwrap();
        g.backward(&loss).unwrap();
        assert_eq!(g.grad(&x).unwrap(), &[2.0, 2.0]);
        g.reset_grads();
        assert!(g.grad(&x).is_none());
    }

    #[test]
    fn concat_splits_gradient_and_reused_tensor_accumulates() {
        let mut g = Graph::<f64>::new();
        let a = Tensor::new(Shape::act(1, 1, &[2]), vec![1.0, 2.0]).unwrap();
        let a = g.leaf(&a, true);
        let y = g.concat_channels(&a, &a).unwrap();
        assert_eq!(y.shape().channels(), 2);
        let loss = g.sum(&y);
        g.backward(&loss).unwrap();
        assert_eq!(g.grad(&a).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut g = Graph::<f64>::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::new(Shape::act(1, 1, &[3]), vec![1.0, 2.0, 3.0]).unwrap();
        let x = g.leaf(&x, true);
        let y = g.dropout(&x, 0.0, &mut rng);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn untracked_inputs_are_constants() {
        let mut g = Graph::<f64>::new();
        let x = Tensor::new(Shape::act(1, 1, &[2]), vec![1.0, 2.0]).unwrap();
        let x = g.leaf(&x, true);
        let c = Tensor::new(Shape::act(1, 1, &[2]), vec![5.0, 5.0]).unwrap();
        let y = g.concat_channels(&x, &c).unwrap();
        let loss = g.sum(&y);
        g.backward(&loss).unwrap();
        assert_eq!(g.grad(&x).unwrap(), &[1.0, 1.0]);
        assert!(g.grad(&c).is_none());
    }
}
