//! Configurable 3D DenseNet used for both the VOI extractor and the classifier.
//!
//! Layout: stem convolution, then dense blocks whose layers are
//! batch-norm -> ReLU -> convolution over the concatenation of every earlier
//! feature map in the block, optional transitions (batch-norm -> ReLU ->
//! 1x1x1 convolution halving the channels -> 2x2x2 average pool), and a head
//! of batch-norm -> ReLU -> global average pool -> one linear unit -> sigmoid.
//!
//! The output of the last dense block is the feature map Grad-CAM inspects.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BatchNormMode, RunningStats, Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GMGM";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseBlockConfig {
    pub num_layers: usize,
    pub growth_rate: usize,
    pub kernel: [usize; 3],
}

impl DenseBlockConfig {
    pub fn new(num_layers: usize, growth_rate: usize) -> Self {
        DenseBlockConfig {
            num_layers,
            growth_rate,
            kernel: [3; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// `(C, D, H, W)` of one sample.
    pub input_shape: [usize; 4],
    pub initial_channels: usize,
    pub initial_kernel: [usize; 3],
    pub initial_stride: [usize; 3],
    pub blocks: Vec<DenseBlockConfig>,
    /// One flag per block; `true` inserts a transition after that block.
    /// The last block must not have one.
    pub transitions: Vec<bool>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Two blocks of two layers, growth 4, stride-2 stem.
    pub fn desk(input_shape: [usize; 4], seed: u64) -> Self {
        ModelConfig {
            input_shape,
            initial_channels: 4,
            initial_kernel: [3; 3],
            initial_stride: [2; 3],
            blocks: vec![DenseBlockConfig::new(2, 4); 2],
            transitions: vec![true, false],
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            seed,
        }
    }

    /// Five dense blocks on the 150x150x90 extractor grid.
    pub fn full_scale(seed: u64) -> Self {
        ModelConfig {
            input_shape: [1, 90, 150, 150],
            initial_channels: 16,
            initial_kernel: [3; 3],
            initial_stride: [2; 3],
            blocks: vec![DenseBlockConfig::new(4, 12); 5],
            transitions: vec![true, true, true, true, false],
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            seed,
        }
    }

    /// Checks the configuration and computes every stage's geometry.
    pub fn plan(&self) -> Result<ModelPlan> {
        let cfg_err = |location: String, reason: String| Error::Config { location, reason };
        let [c_in, d, h, w] = self.input_shape;
        if [c_in, d, h, w].contains(&0) {
            return Err(cfg_err("input".into(), format!("extents must be positive: {:?}", self.input_shape)));
        }
        if self.blocks.is_empty() {
            return Err(cfg_err("blocks".into(), "at least one dense block is required".into()));
        }
        if self.transitions.len() != self.blocks.len() {
            return Err(cfg_err(
                "transitions".into(),
                format!("{} flags for {} blocks", self.transitions.len(), self.blocks.len()),
            ));
        }
        if *self.transitions.last().expect("non-empty") {
            return Err(cfg_err(
                format!("block {}", self.blocks.len() - 1),
                "the last block cannot be followed by a transition".into(),
            ));
        }
        if self.initial_channels == 0 || self.initial_stride.contains(&0) {
            return Err(cfg_err("stem".into(), "channels and stride must be >= 1".into()));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(cfg_err("batch-norm".into(), "eps must be > 0 and momentum in [0,1]".into()));
        }
        let same_pad = |k: [usize; 3], what: String| -> Result<[usize; 3]> {
            if k.iter().any(|&v| v == 0 || v % 2 == 0) {
                return Err(cfg_err(what, format!("kernel {k:?} must be odd")));
            }
            Ok([k[0] / 2, k[1] / 2, k[2] / 2])
        };
        let stem_pad = same_pad(self.initial_kernel, "stem".into())?;
        let mut spatial = [0; 3];
        for a in 0..3 {
            let ext = [d, h, w][a] + 2 * stem_pad[a];
            if ext < self.initial_kernel[a] {
                return Err(cfg_err("stem".into(), "kernel larger than padded input".into()));
            }
            spatial[a] = (ext - self.initial_kernel[a]) / self.initial_stride[a] + 1;
        }
        let mut channels = self.initial_channels;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (b, (bc, &trans)) in self.blocks.iter().zip(&self.transitions).enumerate() {
            if bc.num_layers == 0 || bc.growth_rate == 0 {
                return Err(cfg_err(format!("block {b}"), "num_layers and growth_rate must be >= 1".into()));
            }
            let pad = same_pad(bc.kernel, format!("block {b}"))?;
            let in_channels = channels;
            let out_channels = in_channels + bc.num_layers * bc.growth_rate;
            let block_spatial = spatial;
            let transition = if trans {
                if spatial.iter().any(|&s| s < 2) {
                    return Err(cfg_err(
                        format!("block {b}"),
                        format!("transition would collapse spatial extent {spatial:?} below one voxel"),
                    ));
                }
                spatial = spatial.map(|s| s / 2);
                channels = (out_channels / 2).max(1);
                Some(channels)
            } else {
                channels = out_channels;
                None
            };
            blocks.push(BlockPlan {
                in_channels,
                out_channels,
                spatial: block_spatial,
                padding: pad,
                transition_channels: transition,
            });
        }
        Ok(ModelPlan {
            stem_padding: stem_pad,
            stem_spatial: blocks[0].spatial,
            blocks,
            final_channels: channels,
            final_spatial: spatial,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPlan {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `(D, H, W)` inside the block.
    pub spatial: [usize; 3],
    pub padding: [usize; 3],
    pub transition_channels: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelPlan {
    pub stem_padding: [usize; 3],
    pub stem_spatial: [usize; 3],
    pub blocks: Vec<BlockPlan>,
    pub final_channels: usize,
    pub final_spatial: [usize; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct NormIdx {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct LayerIdx {
    norm: NormIdx,
    conv: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct BlockIdx {
    layers: Vec<LayerIdx>,
    transition: Option<LayerIdx>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    stem: usize,
    blocks: Vec<BlockIdx>,
    head_norm: NormIdx,
    fc_weight: usize,
    fc_bias: usize,
}

/// Instantiated network: parameters in declaration order plus batch-norm
/// running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    plan: ModelPlan,
    layout: Layout,
    params: Vec<Tensor<T>>,
    stats: Vec<RunningStats<T>>,
    mode: Mode,
}

/// Handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[N, 1]` positive-class probabilities.
    pub probs: Var,
    /// `[N, 1]` pre-sigmoid scores; Grad-CAM differentiates these.
    pub logits: Var,
    /// Output of the last dense block, tracked for gradients.
    pub last_conv: Var,
    /// Parameter leaves in declaration order.
    pub params: Vec<Var>,
}

/// Result of running one dense block in isolation.
#[derive(Debug, Clone)]
pub struct DenseBlockOutput {
    pub output: Var,
    /// The concatenated input each layer consumed.
    pub layer_inputs: Vec<Var>,
}

enum StatsRef<'a, T> {
    Train(&'a mut [RunningStats<T>], T),
    Eval(&'a [RunningStats<T>]),
}

impl<T> StatsRef<'_, T> {
    fn mode(&mut self, i: usize) -> BatchNormMode<'_, T>
    where
        T: Copy,
    {
        match self {
            StatsRef::Train(s, m) => BatchNormMode::Train {
                running: &mut s[i],
                momentum: *m,
            },
            StatsRef::Eval(s) => BatchNormMode::Eval { running: &s[i] },
        }
    }
}

struct Builder<'a, T> {
    rng: ChaCha8Rng,
    params: &'a mut Vec<Tensor<T>>,
    stats: &'a mut Vec<RunningStats<T>>,
}

impl<T: Scalar> Builder<'_, T> {
    fn uniform(&mut self, shape: &[usize], fan_in: usize, gain: f64) -> usize {
        let bound = (gain / fan_in as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| T::lit(self.rng.gen_range(-bound..bound))).collect();
        self.params.push(Tensor::new(shape, data).expect("shape from a validated plan"));
        self.params.len() - 1
    }

    fn constant(&mut self, shape: &[usize], v: f64) -> usize {
        self.params.push(Tensor::full(shape, T::lit(v)).expect("shape from a validated plan"));
        self.params.len() - 1
    }

    fn norm(&mut self, c: usize) -> NormIdx {
        let gamma = self.constant(&[c], 1.0);
        let beta = self.constant(&[c], 0.0);
        self.stats.push(RunningStats::new(c));
        NormIdx {
            gamma,
            beta,
            stats: self.stats.len() - 1,
        }
    }

    fn conv(&mut self, cout: usize, cin: usize, k: [usize; 3]) -> usize {
        let fan_in = cin * k.iter().product::<usize>();
        self.uniform(&[cout, cin, k[0], k[1], k[2]], fan_in, 6.0)
    }
}

/// Builds a model with seeded fan-in uniform weights; identical configs give
/// bit-identical parameters.
pub fn build_model<T: Scalar>(config: &ModelConfig) -> Result<Model<T>> {
    let plan = config.plan()?;
    let mut params = Vec::new();
    let mut stats = Vec::new();
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        params: &mut params,
        stats: &mut stats,
    };
    let stem = b.conv(config.initial_channels, config.input_shape[0], config.initial_kernel);
    let mut blocks = Vec::new();
    for (bc, bp) in config.blocks.iter().zip(&plan.blocks) {
        let mut layers = Vec::new();
        for l in 0..bc.num_layers {
            let cin = bp.in_channels + l * bc.growth_rate;
            let norm = b.norm(cin);
            let conv = b.conv(bc.growth_rate, cin, bc.kernel);
            layers.push(LayerIdx { norm, conv });
        }
        let transition = bp.transition_channels.map(|cout| {
            let norm = b.norm(bp.out_channels);
            let conv = b.conv(cout, bp.out_channels, [1; 3]);
            LayerIdx { norm, conv }
        });
        blocks.push(BlockIdx { layers, transition });
    }
    let head_norm = b.norm(plan.final_channels);
    let fc_weight = b.uniform(&[1, plan.final_channels], plan.final_channels, 1.0);
    let fc_bias = b.constant(&[1], 0.0);
    let layout = Layout {
        stem,
        blocks,
        head_norm,
        fc_weight,
        fc_bias,
    };
    Ok(Model {
        config: config.clone(),
        plan,
        layout,
        params,
        stats,
        mode: Mode::Train,
    })
}

impl<T: Scalar> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn plan(&self) -> &ModelPlan {
        &self.plan
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.stats
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Copies the tape gradients of `vars` (from [`ForwardOutput::params`])
    /// onto the parameters, adding to anything already there.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, vars: &[Var]) -> Result<()> {
        if vars.len() != self.params.len() {
            return Err(dim_err!("{} parameter handles for {} parameters", vars.len(), self.params.len()));
        }
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if let Some(g) = tape.grad(v) {
                p.accumulate_grad(g);
            }
        }
        Ok(())
    }

    /// Puts every parameter on the tape; they track gradients in train mode.
    pub fn register_params(&self, tape: &mut Tape<T>) -> Vec<Var> {
        let track = self.mode == Mode::Train;
        self.params
            .iter()
            .map(|p| tape.leaf(p.clone().with_grad(track)))
            .collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [_, c, d, h, w] if [*c, *d, *h, *w] == self.config.input_shape => Ok(()),
            _ => Err(dim_err!(
                "model expects [N, {:?}...] input, got {shape:?}",
                self.config.input_shape
            )),
        }
    }

    /// Forward pass in the current mode. Train mode updates running
    /// statistics; eval mode leaves the model untouched.
    pub fn forward(&mut self, tape: &mut Tape<T>, input: Var) -> Result<ForwardOutput> {
        self.check_input(tape.value(input).shape())?;
        match self.mode {
            Mode::Train => {
                let momentum = T::lit(self.config.bn_momentum);
                let vars = self.register_params(tape);
                let Model { stats, .. } = self;
                let mut stats = StatsRef::Train(stats, momentum);
                run_forward(&self.config, &self.plan, &self.layout, &vars, &mut stats, tape, input)
            }
            Mode::Eval => self.forward_eval(tape, input),
        }
    }

    /// Eval-mode forward through a shared reference.
    pub fn forward_eval(&self, tape: &mut Tape<T>, input: Var) -> Result<ForwardOutput> {
        self.check_input(tape.value(input).shape())?;
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.clone().with_grad(false)))
            .collect();
        let mut stats = StatsRef::Eval(&self.stats);
        run_forward(&self.config, &self.plan, &self.layout, &vars, &mut stats, tape, input)
    }

    /// Runs block `index` on `x` with parameters registered via
    /// [`Model::register_params`]. Running statistics follow the mode.
    pub fn dense_block_forward(
        &mut self,
        tape: &mut Tape<T>,
        vars: &[Var],
        index: usize,
        x: Var,
    ) -> Result<DenseBlockOutput> {
        let bp = self
            .plan
            .blocks
            .get(index)
            .ok_or_else(|| dim_err!("no dense block {index}"))?
            .clone();
        let bc = self.config.blocks[index];
        let momentum = T::lit(self.config.bn_momentum);
        let eps = T::lit(self.config.bn_eps);
        let mode = self.mode;
        let Model { stats, layout, .. } = self;
        let mut stats = match mode {
            Mode::Train => StatsRef::Train(stats, momentum),
            Mode::Eval => StatsRef::Eval(stats),
        };
        dense_block(tape, vars, &layout.blocks[index], &bp, &bc, &mut stats, eps, x)
    }

    /// Eval-mode probabilities for a `[N, C, D, H, W]` batch.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let out = self.forward_eval(&mut tape, x)?;
        Ok(tape.value(out.probs).data().to_vec())
    }

    /// Replaces every running mean and variance with the plain average of
    /// the batch statistics over `batches`, leaving parameters alone.
    pub fn recalibrate_batchnorm(&mut self, batches: &[Tensor<T>]) -> Result<()> {
        let vars_of = |m: &Self, tape: &mut Tape<T>| -> Vec<Var> {
            m.params.iter().map(|p| tape.leaf(p.clone().with_grad(false))).collect()
        };
        for (t, batch) in batches.iter().enumerate() {
            let mut tape = Tape::new();
            let vars = vars_of(self, &mut tape);
            let x = tape.constant(batch.clone());
            self.check_input(batch.shape())?;
            let momentum = T::lit(1.0 / (t + 1) as f64);
            let Model { stats, .. } = self;
            let mut stats = StatsRef::Train(stats, momentum);
            run_forward(&self.config, &self.plan, &self.layout, &vars, &mut stats, &mut tape, x)?;
        }
        Ok(())
    }

    /// Serializes into the `GMGM` checkpoint container.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&T::DTYPE_CODE.to_le_bytes());
        let c = &self.config;
        let u32s = |out: &mut Vec<u8>, vals: &[usize]| {
            for &v in vals {
                out.extend_from_slice(&(v as u32).to_le_bytes());
            }
        };
        u32s(&mut out, &c.input_shape);
        u32s(&mut out, &[c.initial_channels]);
        u32s(&mut out, &c.initial_kernel);
        u32s(&mut out, &c.initial_stride);
        u32s(&mut out, &[c.blocks.len()]);
        for (bc, &t) in c.blocks.iter().zip(&c.transitions) {
            u32s(&mut out, &[bc.num_layers, bc.growth_rate]);
            u32s(&mut out, &bc.kernel);
            out.push(t as u8);
        }
        out.extend_from_slice(&c.bn_eps.to_le_bytes());
        out.extend_from_slice(&c.bn_momentum.to_le_bytes());
        out.extend_from_slice(&c.seed.to_le_bytes());

        let buffers = self.buffers();
        u32s(&mut out, &[buffers.len()]);
        for (shape, data) in buffers {
            u32s(&mut out, &[shape.len()]);
            u32s(&mut out, &shape);
            data.iter().for_each(|v| v.write_le(&mut out));
        }
        out
    }

    /// Parameters in declaration order, then each batch-norm's running mean
    /// and variance.
    fn buffers(&self) -> Vec<(Vec<usize>, &[T])> {
        let mut v: Vec<(Vec<usize>, &[T])> = self
            .params
            .iter()
            .map(|p| (p.shape().to_vec(), p.data()))
            .collect();
        for s in &self.stats {
            v.push((vec![s.mean.len()], &s.mean));
            v.push((vec![s.var.len()], &s.var));
        }
        v
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Parse {
                offset: 0,
                reason: format!("bad checkpoint magic {magic:?}"),
            });
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                offset: 4,
                reason: format!("unsupported checkpoint version {version}"),
            });
        }
        let dtype = r.u16()?;
        if dtype != T::DTYPE_CODE {
            return Err(Error::Parse {
                offset: 6,
                reason: format!("checkpoint dtype {dtype} does not match requested {}", T::DTYPE_CODE),
            });
        }
        let input_shape = r.u32x::<4>()?;
        let initial_channels = r.u32()? as usize;
        let initial_kernel = r.u32x::<3>()?;
        let initial_stride = r.u32x::<3>()?;
        let n_blocks = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(n_blocks.min(1024));
        let mut transitions = Vec::with_capacity(n_blocks.min(1024));
        for _ in 0..n_blocks {
            let num_layers = r.u32()? as usize;
            let growth_rate = r.u32()? as usize;
            let kernel = r.u32x::<3>()?;
            blocks.push(DenseBlockConfig {
                num_layers,
                growth_rate,
                kernel,
            });
            transitions.push(r.take(1)?[0] != 0);
        }
        let bn_eps = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let bn_momentum = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let seed = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let config = ModelConfig {
            input_shape,
            initial_channels,
            initial_kernel,
            initial_stride,
            blocks,
            transitions,
            bn_eps,
            bn_momentum,
            seed,
        };
        let mut model = build_model::<T>(&config)?;
        let n_buffers = r.u32()? as usize;
        let expected: Vec<Vec<usize>> = model.buffers().into_iter().map(|(s, _)| s).collect();
        if n_buffers != expected.len() {
            return Err(Error::Parse {
                offset: r.pos - 4,
                reason: format!("{n_buffers} buffers, configuration implies {}", expected.len()),
            });
        }
        let mut loaded = Vec::with_capacity(n_buffers);
        for shape in &expected {
            let at = r.pos;
            let ndim = r.u32()? as usize;
            let mut got = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                got.push(r.u32()? as usize);
            }
            if &got != shape {
                return Err(Error::Parse {
                    offset: at,
                    reason: format!("buffer shape {got:?}, expected {shape:?}"),
                });
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * T::BYTES)?;
            loaded.push(raw.chunks_exact(T::BYTES).map(T::read_le).collect::<Vec<T>>());
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse {
                offset: r.pos,
                reason: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        let mut it = loaded.into_iter();
        for p in &mut model.params {
            p.data_mut().copy_from_slice(&it.next().expect("counted"));
        }
        for s in &mut model.stats {
            s.mean = it.next().expect("counted");
            s.var = it.next().expect("counted");
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let avail = self.bytes.len() - self.pos;
        if avail < n {
            return Err(Error::Truncated {
                offset: self.pos,
                expected: n,
                actual: avail,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u32x<const N: usize>(&mut self) -> Result<[usize; N]> {
        let mut out = [0; N];
        for v in &mut out {
            *v = self.u32()? as usize;
        }
        Ok(out)
    }
}

fn norm_relu<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &[Var],
    idx: NormIdx,
    stats: &mut StatsRef<'_, T>,
    eps: T,
    x: Var,
) -> Result<Var> {
    let y = tape.batchnorm3d(x, vars[idx.gamma], vars[idx.beta], stats.mode(idx.stats), eps)?;
    tape.relu(y)
}

#[allow(clippy::too_many_arguments)]
fn dense_block<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &[Var],
    idx: &BlockIdx,
    plan: &BlockPlan,
    cfg: &DenseBlockConfig,
    stats: &mut StatsRef<'_, T>,
    eps: T,
    x: Var,
) -> Result<DenseBlockOutput> {
    let c = tape.value(x).shape().get(1).copied().unwrap_or(0);
    if c != plan.in_channels {
        return Err(dim_err!(
            "dense block expects {} input channels, got {c}",
            plan.in_channels
        ));
    }
    let mut features = vec![x];
    let mut layer_inputs = Vec::with_capacity(idx.layers.len());
    for layer in &idx.layers {
        let input = tape.concat_channels(&features)?;
        layer_inputs.push(input);
        let h = norm_relu(tape, vars, layer.norm, stats, eps, input)?;
        let y = tape.conv3d(h, vars[layer.conv], None, [1; 3], plan.padding)?;
        features.push(y);
    }
    debug_assert_eq!(features.len(), cfg.num_layers + 1);
    let output = tape.concat_channels(&features)?;
    Ok(DenseBlockOutput {
        output,
        layer_inputs,
    })
}

fn run_forward<T: Scalar>(
    config: &ModelConfig,
    plan: &ModelPlan,
    layout: &Layout,
    vars: &[Var],
    stats: &mut StatsRef<'_, T>,
    tape: &mut Tape<T>,
    input: Var,
) -> Result<ForwardOutput> {
    match tape.value(input).shape() {
        [_, c, d, h, w] if [*c, *d, *h, *w] == config.input_shape => {}
        other => {
            return Err(dim_err!(
                "model expects [N, {:?}...] input, got {other:?}",
                config.input_shape
            ))
        }
    }
    let eps = T::lit(config.bn_eps);
    let mut x = tape.conv3d(
        input,
        vars[layout.stem],
        None,
        config.initial_stride,
        plan.stem_padding,
    )?;
    for (b, (idx, bp)) in layout.blocks.iter().zip(&plan.blocks).enumerate() {
        x = dense_block(tape, vars, idx, bp, &config.blocks[b], stats, eps, x)?.output;
        if let Some(t) = &idx.transition {
            let h = norm_relu(tape, vars, t.norm, stats, eps, x)?;
            let h = tape.conv3d(h, vars[t.conv], None, [1; 3], [0; 3])?;
            x = tape.avgpool3d(h, [2; 3], [2; 3])?;
        }
    }
    let last_conv = x;
    tape.watch(last_conv);
    let h = norm_relu(tape, vars, layout.head_norm, stats, eps, last_conv)?;
    let pooled = tape.global_avg_pool3d(h)?;
    let logits = tape.linear(pooled, vars[layout.fc_weight], vars[layout.fc_bias])?;
    let probs = tape.sigmoid(logits)?;
    Ok(ForwardOutput {
        probs,
        logits,
        last_conv,
        params: vars.to_vec(),
    })
}
