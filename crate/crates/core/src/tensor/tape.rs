use super::kernels::{self, BatchNormSaved, Conv3dGeom};
use super::{dims5, Tensor};
use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running mean and (unbiased) variance tracked by a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

pub enum BatchNormMode<'a, T> {
    /// Normalize with batch statistics and fold them into `running`.
    Train {
        running: &'a mut RunningStats<T>,
        momentum: T,
    },
    /// Normalize with the stored running statistics.
    Eval { running: &'a RunningStats<T> },
}

enum Op<T> {
    Leaf,
    Conv3d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: Conv3dGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        saved: BatchNormSaved<T>,
        train: bool,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: Var,
        planes: usize,
        dims: [usize; 3],
        window: [usize; 3],
        stride: [usize; 3],
        output: [usize; 3],
    },
    GlobalAvgPool {
        input: Var,
        spatial: usize,
    },
    Concat {
        inputs: Vec<Var>,
        channels: Vec<usize>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Sigmoid(Var),
    Bce {
        prob: Var,
        labels: Vec<T>,
        clamped: Vec<T>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Scale(Var, T),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records executed operations so gradients can be replayed in reverse.
///
/// Nodes are appended in execution order, which is therefore a topological
/// order of the data dependencies.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor; it tracks gradients iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let mut tensor = tensor;
        tensor.zero_grad();
        self.push(tensor, Op::Leaf)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_grad(false))
    }

    /// Starts tracking gradients at `v`. Only operations recorded afterwards
    /// propagate the flag downstream.
    pub fn watch(&mut self, v: Var) {
        self.nodes[v.0].value.requires_grad = true;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn tracks(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].value.requires_grad)
    }

    fn record(&mut self, shape: &[usize], data: Vec<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        let track = self.tracks(inputs);
        let value = Tensor::new(shape, data)?.with_grad(track);
        Ok(self.push(value, op))
    }

    pub fn conv3d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var> {
        let geom = Conv3dGeom::new(
            self.value(input).shape(),
            self.value(weight).shape(),
            stride,
            padding,
        )?;
        if let Some(b) = bias {
            if self.value(b).shape() != [geom.out_channels] {
                return Err(dim_err!(
                    "conv3d bias shape {:?} does not match {} output channels",
                    self.value(b).shape(),
                    geom.out_channels
                ));
            }
        }
        let out = kernels::conv3d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.record(
            &geom.output_shape(),
            out,
            &inputs,
            Op::Conv3d {
                input,
                weight,
                bias,
                geom,
            },
        )
    }

    pub fn batchnorm3d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
        eps: T,
    ) -> Result<Var> {
        let [n, c, d, h, w] = dims5(self.value(input))?;
        let spatial = d * h * w;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(dim_err!(
                "batch-norm parameters {:?}/{:?} do not match {c} channels",
                self.value(gamma).shape(),
                self.value(beta).shape()
            ));
        }
        if eps <= T::zero() {
            return Err(Error::Validation("batch-norm epsilon must be > 0".into()));
        }
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let (y, saved, train) = match mode {
            BatchNormMode::Train { running, momentum } => {
                if running.mean.len() != c {
                    return Err(dim_err!("running stats hold {} channels, input has {c}", running.mean.len()));
                }
                let count = n * spatial;
                if count <= 1 {
                    return Err(Error::DegenerateBatch);
                }
                let (y, saved) = kernels::batchnorm_train_forward(x, g, b, n, c, spatial, eps);
                let unbias = T::lit(count as f64 / (count - 1) as f64);
                for ch in 0..c {
                    running.mean[ch] = (T::one() - momentum) * running.mean[ch] + momentum * saved.mean[ch];
                    running.var[ch] = (T::one() - momentum) * running.var[ch] + momentum * saved.var[ch] * unbias;
                }
                (y, saved, true)
            }
            BatchNormMode::Eval { running } => {
                if running.mean.len() != c {
                    return Err(dim_err!("running stats hold {} channels, input has {c}", running.mean.len()));
                }
                let inv_std: Vec<T> = running.var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
                let mut normalized = vec![T::zero(); x.len()];
                let mut y = vec![T::zero(); x.len()];
                for i in 0..x.len() {
                    let ch = (i / spatial) % c;
                    let xh = (x[i] - running.mean[ch]) * inv_std[ch];
                    normalized[i] = xh;
                    y[i] = g[ch] * xh + b[ch];
                }
                let saved = BatchNormSaved {
                    normalized,
                    inv_std,
                    mean: running.mean.clone(),
                    var: running.var.clone(),
                };
                (y, saved, false)
            }
        };
        self.record(
            &[n, c, d, h, w],
            y,
            &[input, gamma, beta],
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
                train,
            },
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let shape = t.shape().to_vec();
        let out = t.data().iter().map(|&v| v.max(T::zero())).collect();
        self.record(&shape, out, &[input], Op::Relu(input))
    }

    pub fn maxpool3d(&mut self, input: Var, window: [usize; 3], stride: [usize; 3]) -> Result<Var> {
        let [n, c, d, h, w] = dims5(self.value(input))?;
        let output = kernels::pool_output([d, h, w], window, stride)?;
        let (out, argmax) =
            kernels::maxpool3d_forward(self.value(input).data(), n * c, [d, h, w], window, stride, output);
        let [od, oh, ow] = output;
        self.record(&[n, c, od, oh, ow], out, &[input], Op::MaxPool { input, argmax })
    }

    pub fn avgpool3d(&mut self, input: Var, window: [usize; 3], stride: [usize; 3]) -> Result<Var> {
        let [n, c, d, h, w] = dims5(self.value(input))?;
        let output = kernels::pool_output([d, h, w], window, stride)?;
        let out =
            kernels::avgpool3d_forward(self.value(input).data(), n * c, [d, h, w], window, stride, output);
        let [od, oh, ow] = output;
        self.record(
            &[n, c, od, oh, ow],
            out,
            &[input],
            Op::AvgPool {
                input,
                planes: n * c,
                dims: [d, h, w],
                window,
                stride,
                output,
            },
        )
    }

    /// `[N,C,D,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool3d(&mut self, input: Var) -> Result<Var> {
        let [n, c, d, h, w] = dims5(self.value(input))?;
        let spatial = d * h * w;
        let inv = T::lit(1.0 / spatial as f64);
        let out = self
            .value(input)
            .data()
            .chunks(spatial)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        self.record(&[n, c], out, &[input], Op::GlobalAvgPool { input, spatial })
    }

    /// Stacks 5-D inputs along the channel axis in argument order.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| dim_err!("concat_channels needs at least one input"))?;
        let [n, _, d, h, w] = dims5(self.value(first))?;
        let mut channels = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let [vn, vc, vd, vh, vw] = dims5(self.value(v))?;
            if (vn, vd, vh, vw) != (n, d, h, w) {
                return Err(dim_err!(
                    "concat_channels: input {:?} disagrees with {:?} outside the channel axis",
                    self.value(v).shape(),
                    self.value(first).shape()
                ));
            }
            channels.push(vc);
        }
        let spatial = d * h * w;
        let total: usize = channels.iter().sum();
        let mut out = Vec::with_capacity(n * total * spatial);
        for b in 0..n {
            for (&v, &c) in inputs.iter().zip(&channels) {
                out.extend_from_slice(&self.value(v).data()[b * c * spatial..][..c * spatial]);
            }
        }
        self.record(
            &[n, total, d, h, w],
            out,
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
                channels,
            },
        )
    }

    /// `[N,F] x [O,F]^T + [O] -> [N,O]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(input).shape(),
            self.value(weight).shape(),
            self.value(bias).shape(),
        );
        let (n, f, o) = match (xs, ws, bs) {
            ([n, f], [o, wf], [bo]) if f == wf && o == bo => (*n, *f, *o),
            _ => return Err(dim_err!("linear: incompatible shapes {xs:?}, {ws:?}, {bs:?}")),
        };
        let y = kernels::linear_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            n,
            f,
            o,
        );
        self.record(&[n, o], y, &[input, weight, bias], Op::Linear { input, weight, bias })
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let shape = t.shape().to_vec();
        let out = t
            .data()
            .iter()
            .map(|&v| T::one() / (T::one() + (-v).exp()))
            .collect();
        self.record(&shape, out, &[input], Op::Sigmoid(input))
    }

    /// Mean binary cross-entropy; probabilities are clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce_loss(&mut self, prob: Var, labels: &[T]) -> Result<Var> {
        let p = self.value(prob);
        if p.numel() != labels.len() {
            return Err(dim_err!(
                "bce_loss: {} probabilities vs {} labels",
                p.numel(),
                labels.len()
            ));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != T::zero() && y != T::one()) {
            return Err(Error::Validation(format!("label {bad} is not 0 or 1")));
        }
        let floor = T::lit(1e-7);
        let clamped: Vec<T> = p.data().iter().map(|&v| v.max(floor).min(T::one() - floor)).collect();
        let n = T::lit(labels.len() as f64);
        let loss = -clamped
            .iter()
            .zip(labels)
            .map(|(&q, &y)| y * q.ln() + (T::one() - y) * (T::one() - q).ln())
            .sum::<T>()
            / n;
        self.record(
            &[1],
            vec![loss],
            &[prob],
            Op::Bce {
                prob,
                labels: labels.to_vec(),
                clamped,
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err!("elementwise op on {:?} and {:?}", ta.shape(), tb.shape()));
        }
        let shape = ta.shape().to_vec();
        let out = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        self.record(&shape, out, &[a, b], op)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).data().iter().copied().sum();
        self.record(&[1], vec![s], &[input], Op::Sum(input))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let t = self.value(input);
        let shape = t.shape().to_vec();
        let out = t.data().iter().map(|&v| v * factor).collect();
        self.record(&shape, out, &[input], Op::Scale(input, factor))
    }

    /// Reverse sweep from a one-element `loss`. Gradients add onto whatever
    /// previous calls left behind; every tracked node recorded up to `loss`
    /// ends up with a gradient buffer (zeros when unreachable).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Validation(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        if self.nodes[loss.0].value.requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
            self.nodes[i].value.accumulate_grad(&g);
        }
        for node in &mut self.nodes[..=loss.0] {
            if node.value.requires_grad && node.value.grad.is_none() {
                node.value.grad = Some(vec![T::zero(); node.value.numel()]);
            }
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].value.requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv3d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (gi, gw, gb) = kernels::conv3d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    self.needs(*input),
                    self.needs(*weight),
                    bias.is_some_and(|b| self.needs(b)),
                );
                if let Some(gi) = gi {
                    self.send(grads, *input, gi);
                }
                if let Some(gw) = gw {
                    self.send(grads, *weight, gw);
                }
                if let (Some(b), Some(gb)) = (bias, gb) {
                    self.send(grads, *b, gb);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
                train,
            } => {
                let [n, c, d, h, w] = dims5(out).expect("recorded as 5-D");
                let spatial = d * h * w;
                let gamma_v = self.value(*gamma).data();
                let (gx, gg, gb) = if *train {
                    kernels::batchnorm_train_backward(g, saved, gamma_v, n, c, spatial)
                } else {
                    let mut gx = vec![T::zero(); g.len()];
                    let mut gg = vec![T::zero(); c];
                    let mut gb = vec![T::zero(); c];
                    for (k, &gy) in g.iter().enumerate() {
                        let ch = (k / spatial) % c;
                        gx[k] = gy * gamma_v[ch] * saved.inv_std[ch];
                        gg[ch] += gy * saved.normalized[k];
                        gb[ch] += gy;
                    }
                    (gx, gg, gb)
                };
                self.send(grads, *input, gx);
                self.send(grads, *gamma, gg);
                self.send(grads, *beta, gb);
            }
            Op::Relu(input) => {
                let gi = out
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gy)| if y > T::zero() { gy } else { T::zero() })
                    .collect();
                self.send(grads, *input, gi);
            }
            Op::MaxPool { input, argmax } => {
                let mut gi = vec![T::zero(); self.value(*input).numel()];
                for (&src, &gy) in argmax.iter().zip(g) {
                    gi[src] += gy;
                }
                self.send(grads, *input, gi);
            }
            Op::AvgPool {
                input,
                planes,
                dims,
                window,
                stride,
                output,
            } => {
                let gi = kernels::avgpool3d_backward(g, *planes, *dims, *window, *stride, *output);
                self.send(grads, *input, gi);
            }
            Op::GlobalAvgPool { input, spatial } => {
                let inv = T::lit(1.0 / *spatial as f64);
                let gi = g
                    .iter()
                    .flat_map(|&gy| std::iter::repeat(gy * inv).take(*spatial))
                    .collect();
                self.send(grads, *input, gi);
            }
            Op::Concat { inputs, channels } => {
                let [n, total, d, h, w] = dims5(out).expect("recorded as 5-D");
                let spatial = d * h * w;
                let mut offset = 0;
                for (&v, &c) in inputs.iter().zip(channels) {
                    if self.needs(v) {
                        let mut gi = Vec::with_capacity(n * c * spatial);
                        for b in 0..n {
                            gi.extend_from_slice(&g[(b * total + offset) * spatial..][..c * spatial]);
                        }
                        self.send(grads, v, gi);
                    }
                    offset += c;
                }
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let (n, f) = (x.shape()[0], x.shape()[1]);
                let o = wt.shape()[0];
                if self.needs(*input) {
                    let mut gi = vec![T::zero(); n * f];
                    for b in 0..n {
                        for k in 0..o {
                            let gy = g[b * o + k];
                            let wr = &wt.data()[k * f..][..f];
                            gi[b * f..][..f].iter_mut().zip(wr).for_each(|(d, &wv)| *d += gy * wv);
                        }
                    }
                    self.send(grads, *input, gi);
                }
                if self.needs(*weight) {
                    let mut gw = vec![T::zero(); o * f];
                    for b in 0..n {
                        let xr = &x.data()[b * f..][..f];
                        for k in 0..o {
                            let gy = g[b * o + k];
                            gw[k * f..][..f].iter_mut().zip(xr).for_each(|(d, &xv)| *d += gy * xv);
                        }
                    }
                    self.send(grads, *weight, gw);
                }
                if self.needs(*bias) {
                    let mut gb = vec![T::zero(); o];
                    for b in 0..n {
                        gb.iter_mut().zip(&g[b * o..][..o]).for_each(|(d, &gy)| *d += gy);
                    }
                    self.send(grads, *bias, gb);
                }
            }
            Op::Sigmoid(input) => {
                let gi = out
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&s, &gy)| gy * s * (T::one() - s))
                    .collect();
                self.send(grads, *input, gi);
            }
            Op::Bce {
                prob,
                labels,
                clamped,
            } => {
                let n = T::lit(labels.len() as f64);
                let gy = g[0];
                let gi = clamped
                    .iter()
                    .zip(labels)
                    .map(|(&q, &y)| gy * (q - y) / (q * (T::one() - q) * n))
                    .collect();
                self.send(grads, *prob, gi);
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.to_vec());
                self.send(grads, *b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    self.send(grads, *a, g.iter().zip(vb).map(|(&gy, &y)| gy * y).collect());
                }
                if self.needs(*b) {
                    self.send(grads, *b, g.iter().zip(va).map(|(&gy, &x)| gy * x).collect());
                }
            }
            Op::Sum(input) => {
                let gi = vec![g[0]; self.value(*input).numel()];
                self.send(grads, *input, gi);
            }
            Op::Scale(input, factor) => {
                self.send(grads, *input, g.iter().map(|&gy| gy * *factor).collect());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, v).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], vec![1.0, 2.0, 3.0]).with_grad(true));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], vec![1.0, -2.0, 3.0]).with_grad(true));
        let zero = tape.scale(x, 0.0).unwrap();
        let s = tape.sum(zero).unwrap();
        let c = tape.constant(Tensor::scalar(4.0));
        let loss = tape.add(s, c).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn second_backward_doubles_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], vec![0.3, -1.7]).with_grad(true));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        let once = tape.grad(x).unwrap().to_vec();
        tape.backward(s).unwrap();
        let twice = tape.grad(x).unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], vec![1.0, 2.0]).with_grad(true));
        assert!(matches!(tape.backward(x), Err(Error::Validation(_))));
    }

    #[test]
    fn relu_values_and_zero_subgradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], vec![-1.0, 0.0, 2.0]).with_grad(true));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn conv_all_ones_sums_kernel() {
        let mut tape = Tape::new();
        let mut x = Tensor::<f64>::full(&[1, 1, 3, 3, 3], 1.0).unwrap();
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3, 3], 1.0).unwrap());
        let xv = tape.constant(x.clone());
        let y = tape.conv3d(xv, w, None, [1; 3], [0; 3]).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[27.0]);
        x.data_mut()[13] = 0.0;
        let xv = tape.constant(x);
        let y = tape.conv3d(xv, w, None, [1; 3], [0; 3]).unwrap();
        assert_eq!(tape.value(y).data(), &[26.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_oversized_kernel() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 3, 3, 3]).unwrap());
        let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3, 3]).unwrap());
        assert!(matches!(tape.conv3d(x, w, None, [1; 3], [0; 3]), Err(Error::Dimension(_))));
        let w = tape.constant(Tensor::zeros(&[1, 2, 5, 5, 5]).unwrap());
        assert!(tape.conv3d(x, w, None, [1; 3], [0; 3]).is_err());
        assert!(tape.conv3d(x, w, None, [1; 3], [1; 3]).is_ok());
        assert!(tape.conv3d(x, w, None, [0, 1, 1], [1; 3]).is_err());
    }

    #[test]
    fn batchnorm_constant_input_and_zero_scale() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[2, 1, 2, 2, 2], 5.0).unwrap());
        let g = tape.constant(Tensor::full(&[1], 1.0).unwrap());
        let b = tape.constant(Tensor::full(&[1], 0.0).unwrap());
        let mut rs = RunningStats::new(1);
        let eps = 1e-5;
        let y = tape
            .batchnorm3d(x, g, b, BatchNormMode::Train { running: &mut rs, momentum: 0.1 }, eps)
            .unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() <= eps));

        let x = tape.constant(Tensor::from_fn(&[1, 1, 2, 2, 2], |i| i as f64 * 1.3 - 2.0).unwrap());
        let g = tape.constant(Tensor::full(&[1], 0.0).unwrap());
        let b = tape.constant(Tensor::full(&[1], 3.0).unwrap());
        let y = tape
            .batchnorm3d(x, g, b, BatchNormMode::Train { running: &mut rs, momentum: 0.1 }, eps)
            .unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn batchnorm_degenerate_and_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 2, 1, 1, 1], 1.0).unwrap());
        let g = tape.constant(Tensor::full(&[2], 1.0).unwrap());
        let b = tape.constant(Tensor::full(&[2], 0.0).unwrap());
        let mut rs = RunningStats::new(2);
        let r = tape.batchnorm3d(x, g, b, BatchNormMode::Train { running: &mut rs, momentum: 0.1 }, 1e-5);
        assert!(matches!(r, Err(Error::DegenerateBatch)));
        let g3 = tape.constant(Tensor::full(&[3], 1.0).unwrap());
        let r = tape.batchnorm3d(x, g3, b, BatchNormMode::Eval { running: &rs }, 1e-5);
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn pooling_values_and_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 2, 2, 3, 4], 2.5).unwrap());
        let p = tape.global_avg_pool3d(x).unwrap();
        assert_eq!(tape.value(p).shape(), &[1, 2]);
        assert!(tape.value(p).data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
        assert!(tape.maxpool3d(x, [3, 2, 2], [1, 1, 1]).is_err());
        assert!(tape.avgpool3d(x, [2, 2, 2], [2, 2, 2]).is_ok());
    }

    #[test]
    fn concat_shapes_identity_and_mismatch() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[1, 4, 2, 2, 2]).unwrap());
        let b = tape.constant(Tensor::zeros(&[1, 2, 2, 2, 2]).unwrap());
        let c = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.value(c).shape(), &[1, 6, 2, 2, 2]);
        let one = tape.concat_channels(&[b]).unwrap();
        assert_eq!(tape.value(one), tape.value(b));
        let bad = tape.constant(Tensor::zeros(&[1, 2, 2, 2, 3]).unwrap());
        assert!(matches!(tape.concat_channels(&[a, bad]), Err(Error::Dimension(_))));
    }

    #[test]
    fn bce_reference_values_and_label_validation() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::new(&[1, 1], vec![0.5]).unwrap());
        let l = tape.bce_loss(p, &[1.0]).unwrap();
        assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let p1 = tape.constant(Tensor::new(&[1, 1], vec![1.0]).unwrap());
        let l = tape.bce_loss(p1, &[1.0]).unwrap();
        assert!(tape.value(l).data()[0] <= 1e-6);
        assert!(matches!(tape.bce_loss(p, &[2.0]), Err(Error::Validation(_))));
    }
}
