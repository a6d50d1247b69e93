//! Built network: parameter tensors plus wiring, with one forward
//! implementation shared by the recording (train) and plain (eval) paths.

use rand_chacha::ChaCha8Rng;

use super::{floor_scale, NetworkConfig};
use crate::error::{Error, Result};
use crate::tensor::graph::BnOutput;
use crate::tensor::{kernels, Element, Graph, Shape, Tensor};
use crate::train::xavier_init;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct Param<T: Element> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Exponential-moving-average statistics of one batch-norm layer.
#[derive(Clone, Debug)]
pub struct BnState<T: Element> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub initialized: bool,
}

#[derive(Clone, Copy)]
struct ConvSpec {
    w: usize,
    b: Option<usize>,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy)]
struct TConvSpec {
    w: usize,
    b: Option<usize>,
    stride: usize,
    pad: usize,
    out_pad: usize,
}

#[derive(Clone, Copy)]
struct BnSpec {
    scale: usize,
    shift: usize,
    state: usize,
}

#[derive(Clone, Copy)]
struct Bottleneck {
    bn1: BnSpec,
    conv1: ConvSpec,
    bn2: BnSpec,
    conv2: ConvSpec,
}

struct DenseBlock {
    blocks: Vec<Bottleneck>,
}

struct TransitionDown {
    bn: BnSpec,
    conv: ConvSpec,
}

struct TransitionUp {
    conv: ConvSpec,
    tconv: TConvSpec,
}

pub struct Network<T: Element> {
    config: NetworkConfig,
    params: Vec<Param<T>>,
    bn_states: Vec<BnState<T>>,
    input_conv: ConvSpec,
    encoder: Vec<DenseBlock>,
    downs: Vec<TransitionDown>,
    linking: DenseBlock,
    ups: Vec<TransitionUp>,
    decoder: Vec<DenseBlock>,
    head3: ConvSpec,
    head1: ConvSpec,
}

/// Result of a recorded forward pass: softmax output plus the graph handles
/// of every parameter, aligned with [`Network::params`].
pub struct TrainForward<T: Element> {
    pub output: Tensor<T>,
    pub param_handles: Vec<Tensor<T>>,
}

/// Realized stage shapes, for the shape-oracle tests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageShape {
    pub stage: String,
    pub channels: usize,
    pub spatial: Vec<usize>,
}

struct Builder<T: Element> {
    rank: usize,
    params: Vec<Param<T>>,
    bn_states: Vec<BnState<T>>,
    rng: ChaCha8Rng,
}

impl<T: Element> Builder<T> {
    fn conv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> ConvSpec {
        let kvol = k.pow(self.rank as u32);
        let shape = Shape::act(c_out, c_in, &vec![k; self.rank]);
        let w = xavier_init(shape, c_in * kvol, c_out * kvol, &mut self.rng);
        self.params.push(Param { name: format!("{name}.weight"), tensor: w });
        let widx = self.params.len() - 1;
        let b = bias.then(|| {
            self.params.push(Param {
                name: format!("{name}.bias"),
                tensor: Tensor::zeros(Shape::new(vec![c_out])),
            });
            self.params.len() - 1
        });
        ConvSpec { w: widx, b, stride, pad }
    }

    fn tconv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
        bias: bool,
    ) -> TConvSpec {
        let kvol = k.pow(self.rank as u32);
        let shape = Shape::act(c_in, c_out, &vec![k; self.rank]);
        let w = xavier_init(shape, c_in * kvol, c_out * kvol, &mut self.rng);
        self.params.push(Param { name: format!("{name}.weight"), tensor: w });
        let widx = self.params.len() - 1;
        let b = bias.then(|| {
            self.params.push(Param {
                name: format!("{name}.bias"),
                tensor: Tensor::zeros(Shape::new(vec![c_out])),
            });
            self.params.len() - 1
        });
        TConvSpec { w: widx, b, stride, pad, out_pad }
    }

    fn bn(&mut self, name: &str, ch: usize) -> BnSpec {
        self.params.push(Param {
            name: format!("{name}.scale"),
            tensor: Tensor::filled(Shape::new(vec![ch]), T::one()),
        });
        let scale = self.params.len() - 1;
        self.params.push(Param {
            name: format!("{name}.shift"),
            tensor: Tensor::zeros(Shape::new(vec![ch])),
        });
        let shift = self.params.len() - 1;
        self.bn_states.push(BnState {
            name: name.to_string(),
            mean: vec![T::zero(); ch],
            var: vec![T::one(); ch],
            initialized: false,
        });
        BnSpec { scale, shift, state: self.bn_states.len() - 1 }
    }

    /// Bottleneck: BN -> ReLU -> 1x1 conv (4k) -> BN -> ReLU -> 3x3 conv (k),
    /// dropout applied by the executor after the second conv.
    fn bottleneck(&mut self, name: &str, c_in: usize, k: usize) -> Bottleneck {
        Bottleneck {
            bn1: self.bn(&format!("{name}.bn1"), c_in),
            conv1: self.conv(&format!("{name}.conv1"), c_in, 4 * k, 1, 1, 0, false),
            bn2: self.bn(&format!("{name}.bn2"), 4 * k),
            conv2: self.conv(&format!("{name}.conv2"), 4 * k, k, 3, 1, 1, false),
        }
    }

    /// Dense block of `layers` bottlenecks; returns the block and its output depth.
    fn dense_block(&mut self, name: &str, c_in: usize, layers: usize, k: usize) -> (DenseBlock, usize) {
        let mut blocks = Vec::with_capacity(layers);
        let mut depth = c_in;
        for j in 0..layers {
            blocks.push(self.bottleneck(&format!("{name}.bb{j}"), depth, k));
            depth += k;
        }
        (DenseBlock { blocks }, depth)
    }
}

impl<T: Element> Network<T> {
    /// Build with Xavier-initialized parameters drawn from `seed`.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        use rand::SeedableRng;
        let mut b = Builder::<T> {
            rank: config.spatial_rank,
            params: Vec::new(),
            bn_states: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let k = config.growth_rate;

        let input_conv =
            b.conv("input_conv", config.in_channels, config.input_features, 3, 1, 1, true);
        let mut depth = config.input_features;

        let mut encoder = Vec::new();
        let mut downs = Vec::new();
        let mut skip_depths = Vec::new();
        for (i, &layers) in config.levels.iter().enumerate() {
            let (db, out) = b.dense_block(&format!("enc{i}"), depth, layers, k);
            encoder.push(db);
            skip_depths.push(out);
            let td_out = floor_scale(out, config.theta_down);
            downs.push(TransitionDown {
                bn: b.bn(&format!("enc{i}.td.bn"), out),
                conv: b.conv(&format!("enc{i}.td.conv"), out, td_out, 1, 1, 0, false),
            });
            depth = td_out;
        }

        let (linking, lu_out) = b.dense_block("lu", depth, config.lu_layers, k);
        depth = lu_out;

        let mut ups = Vec::new();
        let mut decoder = Vec::new();
        for (i, &layers) in config.levels.iter().enumerate().rev() {
            let tu_out = floor_scale(depth, config.theta_up);
            ups.push(TransitionUp {
                conv: b.conv(&format!("dec{i}.tu.conv"), depth, tu_out, 1, 1, 0, true),
                tconv: b.tconv(&format!("dec{i}.tu.tconv"), tu_out, tu_out, 3, 2, 1, 1, true),
            });
            let (db, out) = b.dense_block(&format!("dec{i}"), tu_out + skip_depths[i], layers, k);
            decoder.push(db);
            depth = out;
        }

        let head3 = b.conv("head.conv3", depth, depth, 3, 1, 1, true);
        let head1 = b.conv("head.conv1", depth, config.num_classes, 1, 1, 0, true);

        Ok(Network {
            config: config.clone(),
            params: b.params,
            bn_states: b.bn_states,
            input_conv,
            encoder,
            downs,
            linking,
            ups,
            decoder,
            head3,
            head1,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn bn_states(&self) -> &[BnState<T>] {
        &self.bn_states
    }

    pub fn bn_states_mut(&mut self) -> &mut [BnState<T>] {
        &mut self.bn_states
    }

    /// Sum of all trainable tensor element counts.
    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    fn check_input(&self, x: &Shape) -> Result<()> {
        if x.spatial_rank() != self.config.spatial_rank {
            return Err(Error::shape(
                "forward",
                format!(
                    "spatial rank {} does not match network rank {}",
                    x.spatial_rank(),
                    self.config.spatial_rank
                ),
            ));
        }
        if x.channels() != self.config.in_channels {
            return Err(Error::shape(
                "forward",
                format!(
                    "channel axis: network expects {} channels, input has {}",
                    self.config.in_channels,
                    x.channels()
                ),
            ));
        }
        let div = self.config.scale_divisor();
        for (ax, &n) in x.spatial().iter().enumerate() {
            if n % div != 0 {
                return Err(Error::shape(
                    "forward",
                    format!("spatial axis {ax}: extent {n} not divisible by {div}"),
                ));
            }
        }
        Ok(())
    }

    /// Recorded forward pass in train mode: batch statistics, dropout active,
    /// running statistics updated.
    pub fn forward_train(
        &mut self,
        graph: &mut Graph<T>,
        x: &Tensor<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<TrainForward<T>> {
        self.forward_train_probed(graph, x, rng, None)
    }

    pub fn forward_train_probed(
        &mut self,
        graph: &mut Graph<T>,
        x: &Tensor<T>,
        rng: &mut ChaCha8Rng,
        probe: Option<&mut Vec<StageShape>>,
    ) -> Result<TrainForward<T>> {
        self.check_input(x.shape())?;
        let handles: Vec<Tensor<T>> =
            self.params.iter().map(|p| graph.leaf(&p.tensor, true)).collect();
        let mut ex = TrainExec {
            handles: &handles,
            bn_states: &mut self.bn_states,
            graph,
            rng,
            dropout_rate: self.config.dropout_rate,
        };
        let output = run_wiring(
            &self.input_conv,
            &self.encoder,
            &self.downs,
            &self.linking,
            &self.ups,
            &self.decoder,
            &self.head3,
            &self.head1,
            self.config.levels.len(),
            &mut ex,
            x,
            probe,
        )?;
        Ok(TrainForward { output, param_handles: handles })
    }

    /// Plain forward pass in eval mode: running statistics, no dropout, no
    /// recording. Rejected if the network has never seen a train-mode pass
    /// (or a checkpoint with statistics).
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x.shape())?;
        for s in &self.bn_states {
            if !s.initialized {
                return Err(Error::Invalid(format!(
                    "eval-mode forward before any train-mode pass: running statistics of {} are uninitialized",
                    s.name
                )));
            }
        }
        let mut ex = EvalExec { params: &self.params, bn_states: &self.bn_states };
        run_wiring(
            &self.input_conv,
            &self.encoder,
            &self.downs,
            &self.linking,
            &self.ups,
            &self.decoder,
            &self.head3,
            &self.head1,
            self.config.levels.len(),
            &mut ex,
            x,
            None,
        )
    }
}

trait Exec<T: Element> {
    fn conv(&mut self, x: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>>;
    fn tconv(&mut self, x: &Tensor<T>, spec: &TConvSpec) -> Result<Tensor<T>>;
    fn bn(&mut self, x: &Tensor<T>, spec: &BnSpec) -> Result<Tensor<T>>;
    fn relu(&mut self, x: &Tensor<T>) -> Tensor<T>;
    fn avg_pool2(&mut self, x: &Tensor<T>) -> Result<Tensor<T>>;
    fn concat(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>>;
    fn dropout(&mut self, x: &Tensor<T>) -> Tensor<T>;
    fn softmax(&mut self, x: &Tensor<T>) -> Tensor<T>;
}

struct TrainExec<'a, T: Element> {
    handles: &'a [Tensor<T>],
    bn_states: &'a mut [BnState<T>],
    graph: &'a mut Graph<T>,
    rng: &'a mut ChaCha8Rng,
    dropout_rate: f64,
}

impl<T: Element> Exec<T> for TrainExec<'_, T> {
    fn conv(&mut self, x: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
        let y = self.graph.conv_nd(x, &self.handles[spec.w], spec.stride, spec.pad)?;
        match spec.b {
            Some(b) => self.graph.bias_add(&y, &self.handles[b]),
            None => Ok(y),
        }
    }

    fn tconv(&mut self, x: &Tensor<T>, spec: &TConvSpec) -> Result<Tensor<T>> {
        let y = self.graph.conv_transpose_nd(
            x,
            &self.handles[spec.w],
            spec.stride,
            spec.pad,
            spec.out_pad,
        )?;
        match spec.b {
            Some(b) => self.graph.bias_add(&y, &self.handles[b]),
            None => Ok(y),
        }
    }

    fn bn(&mut self, x: &Tensor<T>, spec: &BnSpec) -> Result<Tensor<T>> {
        let BnOutput { out, mean, var } = self.graph.batch_norm(
            x,
            &self.handles[spec.scale],
            &self.handles[spec.shift],
            BN_EPS,
        )?;
        let state = &mut self.bn_states[spec.state];
        if state.initialized {
            let m = T::from_f64(BN_MOMENTUM);
            let one_m = T::from_f64(1.0 - BN_MOMENTUM);
            for (r, b) in state.mean.iter_mut().zip(&mean) {
                *r = m * *r + one_m * *b;
            }
            for (r, b) in state.var.iter_mut().zip(&var) {
                *r = m * *r + one_m * *b;
            }
        } else {
            state.mean = mean;
            state.var = var;
            state.initialized = true;
        }
        Ok(out)
    }

    fn relu(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.graph.relu(x)
    }

    fn avg_pool2(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.graph.avg_pool_nd(x, 2, 2)
    }

    fn concat(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.graph.concat_channels(a, b)
    }

    fn dropout(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.graph.dropout(x, self.dropout_rate, self.rng)
    }

    fn softmax(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.graph.softmax_channels(x)
    }
}

struct EvalExec<'a, T: Element> {
    params: &'a [Param<T>],
    bn_states: &'a [BnState<T>],
}

impl<T: Element> Exec<T> for EvalExec<'_, T> {
    fn conv(&mut self, x: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
        let w = &self.params[spec.w].tensor;
        let (mut y, os) =
            kernels::conv_fwd(x.data(), x.shape(), w.data(), w.shape(), spec.stride, spec.pad)?;
        if let Some(b) = spec.b {
            y = kernels::bias_add_fwd(&y, &os, self.params[b].tensor.data());
        }
        Tensor::new(os, y)
    }

    fn tconv(&mut self, x: &Tensor<T>, spec: &TConvSpec) -> Result<Tensor<T>> {
        let w = &self.params[spec.w].tensor;
        let (mut y, os) = kernels::conv_transpose_fwd(
            x.data(),
            x.shape(),
            w.data(),
            w.shape(),
            spec.stride,
            spec.pad,
            spec.out_pad,
        )?;
        if let Some(b) = spec.b {
            y = kernels::bias_add_fwd(&y, &os, self.params[b].tensor.data());
        }
        Tensor::new(os, y)
    }

    fn bn(&mut self, x: &Tensor<T>, spec: &BnSpec) -> Result<Tensor<T>> {
        let state = &self.bn_states[spec.state];
        let y = kernels::bn_eval_fwd(
            x.data(),
            x.shape(),
            self.params[spec.scale].tensor.data(),
            self.params[spec.shift].tensor.data(),
            &state.mean,
            &state.var,
            BN_EPS,
        );
        Tensor::new(x.shape().clone(), y)
    }

    fn relu(&mut self, x: &Tensor<T>) -> Tensor<T> {
        Tensor::new(x.shape().clone(), kernels::relu_fwd(x.data())).expect("shape preserved")
    }

    fn avg_pool2(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, os) = kernels::avg_pool_fwd(x.data(), x.shape(), 2, 2)?;
        Tensor::new(os, y)
    }

    fn concat(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, os) = kernels::concat_fwd(a.data(), a.shape(), b.data(), b.shape())?;
        Tensor::new(os, y)
    }

    fn dropout(&mut self, x: &Tensor<T>) -> Tensor<T> {
        x.clone()
    }

    fn softmax(&mut self, x: &Tensor<T>) -> Tensor<T> {
        Tensor::new(x.shape().clone(), kernels::softmax_fwd(x.data(), x.shape()))
            .expect("shape preserved")
    }
}

fn bottleneck_fwd<T: Element, E: Exec<T>>(
    ex: &mut E,
    bb: &Bottleneck,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let t = ex.bn(x, &bb.bn1)?;
    let t = ex.relu(&t);
    let t = ex.conv(&t, &bb.conv1)?;
    let t = ex.bn(&t, &bb.bn2)?;
    let t = ex.relu(&t);
    let t = ex.conv(&t, &bb.conv2)?;
    Ok(ex.dropout(&t))
}

/// Each layer consumes the concatenation of the block input and every prior
/// layer output; the block output is that running concatenation.
fn dense_block_fwd<T: Element, E: Exec<T>>(
    ex: &mut E,
    db: &DenseBlock,
    x: Tensor<T>,
) -> Result<Tensor<T>> {
    let mut acc = x;
    for bb in &db.blocks {
        let y = bottleneck_fwd(ex, bb, &acc)?;
        acc = ex.concat(&acc, &y)?;
    }
    Ok(acc)
}

#[allow(clippy::too_many_arguments)]
fn run_wiring<T: Element, E: Exec<T>>(
    input_conv: &ConvSpec,
    encoder: &[DenseBlock],
    downs: &[TransitionDown],
    linking: &DenseBlock,
    ups: &[TransitionUp],
    decoder: &[DenseBlock],
    head3: &ConvSpec,
    head1: &ConvSpec,
    n_levels: usize,
    ex: &mut E,
    x: &Tensor<T>,
    mut probe: Option<&mut Vec<StageShape>>,
) -> Result<Tensor<T>> {
    let record = |stage: &str, t: &Tensor<T>, probe: &mut Option<&mut Vec<StageShape>>| {
        if let Some(p) = probe {
            p.push(StageShape {
                stage: stage.to_string(),
                channels: t.shape().channels(),
                spatial: t.shape().spatial().to_vec(),
            });
        }
    };

    let mut t = ex.conv(x, input_conv)?;
    record("input-conv", &t, &mut probe);

    let mut skips = Vec::with_capacity(n_levels);
    for (i, (db, td)) in encoder.iter().zip(downs).enumerate() {
        t = dense_block_fwd(ex, db, t)?;
        record(&format!("enc{i}"), &t, &mut probe);
        skips.push(t.clone());
        let d = ex.bn(&t, &td.bn)?;
        let d = ex.relu(&d);
        let d = ex.conv(&d, &td.conv)?;
        t = ex.avg_pool2(&d)?;
    }

    t = dense_block_fwd(ex, linking, t)?;
    record("lu", &t, &mut probe);

    for (j, (tu, db)) in ups.iter().zip(decoder).enumerate() {
        let i = n_levels - 1 - j;
        let u = ex.conv(&t, &tu.conv)?;
        let u = ex.tconv(&u, &tu.tconv)?;
        t = ex.concat(&u, &skips[i])?;
        t = dense_block_fwd(ex, db, t)?;
        record(&format!("dec{i}"), &t, &mut probe);
    }

    t = ex.conv(&t, head3)?;
    t = ex.conv(&t, head1)?;
    record("output-conv", &t, &mut probe);
    Ok(ex.softmax(&t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::plan_architecture;
    use rand::SeedableRng;

    fn tiny_config() -> NetworkConfig {
        NetworkConfig {
            spatial_rank: 3,
            levels: vec![2, 2],
            lu_layers: 2,
            growth_rate: 4,
            theta_down: 0.5,
            theta_up: 0.5,
            input_features: 8,
            in_channels: 1,
            num_classes: 3,
            dropout_rate: 0.1,
        }
    }

    fn rand_input<T: Element>(shape: Shape, seed: u64) -> Tensor<T> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.numel()).map(|_| T::from_f64(rng.gen_range(0.0..1.0))).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let cfg = tiny_config();
        let a = Network::<f32>::build(&cfg, 42).unwrap();
        let b = Network::<f32>::build(&cfg, 42).unwrap();
        let c = Network::<f32>::build(&cfg, 43).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.tensor.data(), pb.tensor.data(), "{}", pa.name);
        }
        assert!(a.params().iter().zip(c.params()).any(|(x, y)| x.tensor.data() != y.tensor.data()));
    }

    #[test]
    fn parameter_count_is_seed_independent_and_monotone_in_k() {
        let cfg = tiny_config();
        let a = Network::<f32>::build(&cfg, 1).unwrap().count_parameters();
        let b = Network::<f32>::build(&cfg, 2).unwrap().count_parameters();
        assert_eq!(a, b);
        let bigger = NetworkConfig { growth_rate: 5, ..tiny_config() };
        let c = Network::<f32>::build(&bigger, 1).unwrap().count_parameters();
        assert!(c > a);
    }

    #[test]
    fn realized_shapes_match_plan() {
        let cfg = tiny_config();
        let plan = plan_architecture(&cfg).unwrap();
        let mut net = Network::<f32>::build(&cfg, 7).unwrap();
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_input::<f32>(Shape::act(1, 1, &[8, 8, 8]), 3);
        let mut probe = Vec::new();
        net.forward_train_probed(&mut g, &x, &mut rng, Some(&mut probe)).unwrap();
        // probe rows align with plan rows (plan repeats stages in same order)
        assert_eq!(probe.len(), plan.rows.len());
        for (got, want) in probe.iter().zip(&plan.rows) {
            assert_eq!(got.channels, want.depth, "stage {}", want.stage);
            for &e in &got.spatial {
                assert_eq!(e, 8 / want.divisor, "stage {}", want.stage);
            }
        }
    }

    #[test]
    fn forward_output_is_softmax_over_classes() {
        let cfg = tiny_config();
        let mut net = Network::<f32>::build(&cfg, 7).unwrap();
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_input::<f32>(Shape::act(1, 1, &[4, 8, 4]), 5);
        let out = net.forward_train(&mut g, &x, &mut rng).unwrap().output;
        assert_eq!(out.shape().channels(), 3);
        assert_eq!(out.shape().spatial(), &[4, 8, 4]);
        let v = out.shape().spatial_len();
        for i in 0..v {
            let s: f32 = (0..3).map(|c| out.data()[c * v + i]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_rejects_indivisible_extents() {
        let cfg = tiny_config(); // divisor 4
        let mut net = Network::<f32>::build(&cfg, 7).unwrap();
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_input::<f32>(Shape::act(1, 1, &[6, 8, 8]), 5);
        let err = match net.forward_train(&mut g, &x, &mut rng) {
            Err(e) => e,
            Ok(_) => panic!("expected rejection"),
        };
        assert!(err.to_string().contains("not divisible"), "{err}");
    }

    #[test]
    fn eval_before_train_is_rejected_then_deterministic_after() {
        let cfg = tiny_config();
        let mut net = Network::<f32>::build(&cfg, 7).unwrap();
        let x = rand_input::<f32>(Shape::act(1, 1, &[4, 4, 4]), 5);
        assert!(net.forward_eval(&x).is_err());
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        net.forward_train(&mut g, &x, &mut rng).unwrap();
        let a = net.forward_eval(&x).unwrap();
        let b = net.forward_eval(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn zero_parameters_give_uniform_class_probabilities() {
        let cfg = tiny_config();
        let mut net = Network::<f32>::build(&cfg, 7).unwrap();
        for p in net.params_mut() {
            p.tensor.data_mut().fill(0.0);
        }
        let x = rand_input::<f32>(Shape::act(1, 1, &[4, 4, 4]), 5);
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = net.forward_train(&mut g, &x, &mut rng).unwrap().output;
        for &v in out.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn dense_block_adds_layers_times_growth_channels() {
        // property over a few random (L, k)
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let layers = rng.gen_range(1..5usize);
            let k = rng.gen_range(1..6usize);
            let cfg = NetworkConfig {
                levels: vec![layers],
                lu_layers: 1,
                growth_rate: k,
                ..tiny_config()
            };
            let plan = plan_architecture(&cfg).unwrap();
            let d = plan.depths();
            assert_eq!(d[1], cfg.input_features + layers * k);
        }
    }

    #[test]
    fn table2_parameter_counts_within_ten_percent() {
        let cases = [
            (NetworkConfig::dvnet_2d_v3(), 5.3e6),
            (NetworkConfig::dvnet_3d_v1(), 2.8e6),
            (NetworkConfig::dvnet_3d_v2(), 9.2e6),
            (NetworkConfig::dvnet_3d_v3(), 10.8e6),
        ];
        for (cfg, want) in cases {
            let n = Network::<f32>::build(&cfg, 0).unwrap().count_parameters() as f64;
            let rel = (n - want).abs() / want;
            assert!(rel <= 0.10, "{cfg:?}: {n} vs {want} ({rel:.3})");
        }
    }
}
