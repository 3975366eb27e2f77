use super::ops::{self, AxisInterp, ConvGeometry};
use super::{gemm, Tensor};
use crate::em::{self, Kernel};
use crate::error::{Error, Result};
use crate::image::Mask;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    AddChannelBias {
        x: Var,
        bias: Var,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    ConcatChannels {
        inputs: Vec<Var>,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    SumChannels {
        x: Var,
    },
    SoftmaxChannels {
        x: Var,
    },
    BilinearResize {
        x: Var,
        ys: AxisInterp,
        xs: AxisInterp,
    },
    GlobalMean {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    GatherRows {
        x: Var,
        indices: Vec<usize>,
    },
    ConcatRows {
        inputs: Vec<Var>,
    },
    WeightedMeanRows {
        samples: Var,
        weights: Var,
    },
    Responsibilities {
        samples: Var,
        protos: Var,
        kappa: f64,
        kernel: Kernel,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropy2d {
        logits: Var,
        probs: Vec<f64>,
        target: Vec<u8>,
    },
    MeanSquaredError {
        x: Var,
        target: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records one forward pass; [`Tape::backward`] replays it in reverse.
///
/// Nodes are appended in execution order, so index order is a topological
/// order of the graph. A tape is built per forward pass and dropped after
/// its backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<Tensor> {
        self.grads[var.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[var.0].clone(), g.clone()).expect("gradient shape"))
    }

    pub fn get_slice(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that gradients flow into.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf treated as a constant by backward.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(name, &data)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims3(&self, op: &'static str, var: Var) -> Result<(usize, usize, usize)> {
        self.value(var)
            .dims3()
            .map_err(|_| Error::shape(op, format!("expected H×W×C, got {:?}", self.shape(var))))
    }

    fn rows_cols(&self, op: &'static str, var: Var) -> Result<(usize, usize)> {
        match self.shape(var) {
            &[n, c] => Ok((n, c)),
            other => Err(Error::shape(op, format!("expected N×C, got {other:?}"))),
        }
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        self.conv2d_dilated(input, kernel, stride, padding, 1)
    }

    pub fn conv2d_dilated(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(input), self.shape(kernel), stride, padding, dilation)?;
        let (out, cols) = ops::conv2d_forward(self.value(input).data(), self.value(kernel).data(), &geom);
        let op = Op::Conv2d {
            input,
            kernel,
            geom,
            cols,
        };
        self.push("conv2d", vec![geom.oh, geom.ow, geom.cout], out, op, &[input, kernel])
    }

    /// Adds a length-C vector to every position of the last axis.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).channels();
        if self.value(bias).len() != c {
            return Err(Error::shape(
                "add_channel_bias",
                format!("bias {:?} vs {c} channels", self.shape(bias)),
            ));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push("add_channel_bias", shape, data, Op::AddChannelBias { x, bias }, &[x, bias])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push("relu", shape, data, Op::Relu { x }, &[x])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push("add", shape, data, Op::Add { a, b }, &[a, b])
    }

    pub fn elementwise_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("elementwise_mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push("elementwise_mul", shape, data, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, data, Op::Scale { x, factor }, &[x])
    }

    /// Concatenation along the last axis; all other dims must agree.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != lead.len() + 1 || &s[..s.len() - 1] != lead {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{:?} vs {:?}", self.shape(first), s),
                ));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &wd) in inputs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(v).data()[r * wd..(r + 1) * wd]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        self.push("concat_channels", shape, data, Op::ConcatChannels { inputs: inputs.to_vec() }, inputs)
    }

    /// Channels `start..end` of the last axis.
    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let c = self.value(x).channels();
        if start >= end || end > c {
            return Err(Error::shape("slice_channels", format!("{start}..{end} of {c}")));
        }
        let width = end - start;
        let data = self
            .value(x)
            .data()
            .chunks_exact(c)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = width;
        self.push("slice_channels", shape, data, Op::SliceChannels { x, start }, &[x])
    }

    /// Sum over the last axis, keeping it as size 1.
    pub fn sum_channels(&mut self, x: Var) -> Result<Var> {
        let c = self.value(x).channels();
        let data = self.value(x).data().chunks_exact(c).map(|r| r.iter().sum()).collect();
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = 1;
        self.push("sum_channels", shape, data, Op::SumChannels { x }, &[x])
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let c = self.value(x).channels();
        let data = ops::softmax_rows(self.value(x).data(), c);
        let shape = self.shape(x).to_vec();
        self.push("softmax_channels", shape, data, Op::SoftmaxChannels { x }, &[x])
    }

    /// Corner-aligned bilinear resize of an `H×W×C` map.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::InvalidArgument(format!(
                "bilinear_resize target must be positive, got {out_h}×{out_w}"
            )));
        }
        let dims = self.dims3("bilinear_resize", x)?;
        let ys = AxisInterp::new(dims.0, out_h);
        let xs = AxisInterp::new(dims.1, out_w);
        let data = ops::bilinear_forward(self.value(x).data(), dims, &ys, &xs);
        self.push(
            "bilinear_resize",
            vec![out_h, out_w, dims.2],
            data,
            Op::BilinearResize { x, ys, xs },
            &[x],
        )
    }

    /// Spatial mean of an `H×W×C` map, shaped `1×1×C`.
    pub fn global_mean(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = self.dims3("global_mean", x)?;
        let mut data = vec![0.0; c];
        for row in self.value(x).data().chunks_exact(c) {
            for (d, v) in data.iter_mut().zip(row) {
                *d += v;
            }
        }
        let n = (h * w) as f64;
        data.iter_mut().for_each(|d| *d /= n);
        self.push("global_mean", vec![1, 1, c], data, Op::GlobalMean { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let data = self.value(x).data().to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape { x }, &[x])
    }

    /// Selects rows (positions of the leading axes, flattened) of `x`,
    /// producing an `N×C` matrix.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let c = self.value(x).channels();
        let rows = self.value(x).len() / c;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {rows}")));
        }
        let src = self.value(x).data();
        let data = indices.iter().flat_map(|&i| src[i * c..(i + 1) * c].iter().copied()).collect();
        self.push(
            "gather_rows",
            vec![indices.len(), c],
            data,
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
            &[x],
        )
    }

    pub fn concat_rows(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let (_, c) = self.rows_cols("concat_rows", first)?;
        let mut data = Vec::new();
        let mut n = 0;
        for &v in inputs {
            let (rows, cols) = self.rows_cols("concat_rows", v)?;
            if cols != c {
                return Err(Error::shape("concat_rows", format!("{cols} vs {c} columns")));
            }
            n += rows;
            data.extend_from_slice(self.value(v).data());
        }
        self.push("concat_rows", vec![n, c], data, Op::ConcatRows { inputs: inputs.to_vec() }, inputs)
    }

    /// `out[k] = Σ_i w[i,k]·s[i] / Σ_i w[i,k]` for `samples: N×C`,
    /// `weights: N×K`; output `K×C`.
    pub fn weighted_mean_rows(&mut self, samples: Var, weights: Var) -> Result<Var> {
        let (n, c) = self.rows_cols("weighted_mean_rows", samples)?;
        let (wn, k) = self.rows_cols("weighted_mean_rows", weights)?;
        if wn != n {
            return Err(Error::shape("weighted_mean_rows", format!("{n} samples vs {wn} weight rows")));
        }
        let means = em::weighted_means_flat(self.value(samples).data(), self.value(weights).data(), n, k, c);
        self.push(
            "weighted_mean_rows",
            vec![k, c],
            means,
            Op::WeightedMeanRows { samples, weights },
            &[samples, weights],
        )
    }

    /// Mixture responsibilities (`N×K`) of `samples: N×C` under `protos: K×C`.
    pub fn responsibilities(&mut self, samples: Var, protos: Var, kappa: f64, kernel: Kernel) -> Result<Var> {
        let (n, c) = self.rows_cols("responsibilities", samples)?;
        let (k, pc) = self.rows_cols("responsibilities", protos)?;
        if pc != c {
            return Err(Error::shape("responsibilities", format!("prototype dim {pc} vs sample dim {c}")));
        }
        let data =
            em::responsibilities_flat(self.value(samples).data(), self.value(protos).data(), n, k, c, kernel, kappa);
        self.push(
            "responsibilities",
            vec![n, k],
            data,
            Op::Responsibilities {
                samples,
                protos,
                kappa,
                kernel,
            },
            &[samples, protos],
        )
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let c = self.value(x).channels();
        let mut norms = Vec::new();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(c) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(em::NORM_FLOOR);
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let shape = self.shape(x).to_vec();
        self.push("l2_normalize_rows", shape, data, Op::L2NormalizeRows { x, norms }, &[x])
    }

    /// Mean over pixels of `−log softmax(logits)[target]` for `H×W×2` logits.
    pub fn cross_entropy_2d(&mut self, logits: Var, target: &Mask) -> Result<Var> {
        let (h, w, c) = self.dims3("cross_entropy_2d", logits)?;
        if c != 2 || (target.height(), target.width()) != (h, w) {
            return Err(Error::shape(
                "cross_entropy_2d",
                format!("logits {h}×{w}×{c} vs target {}×{}", target.height(), target.width()),
            ));
        }
        let probs = ops::softmax_rows(self.value(logits).data(), 2);
        let mut loss = 0.0;
        for (row, &t) in self.value(logits).data().chunks_exact(2).zip(target.values()) {
            let max = row[0].max(row[1]);
            let lse = max + ((row[0] - max).exp() + (row[1] - max).exp()).ln();
            loss += lse - row[t as usize];
        }
        loss /= (h * w) as f64;
        let op = Op::CrossEntropy2d {
            logits,
            probs,
            target: target.values().to_vec(),
        };
        self.push("cross_entropy_2d", vec![1], vec![loss], op, &[logits])
    }

    pub fn mean_squared_error(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        if self.shape(x) != target.shape() {
            return Err(Error::shape(
                "mean_squared_error",
                format!("{:?} vs {:?}", self.shape(x), target.shape()),
            ));
        }
        let n = target.len() as f64;
        let loss = self.value(x).data().iter().zip(target.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
        let op = Op::MeanSquaredError {
            x,
            target: target.data().to_vec(),
        };
        self.push("mean_squared_error", vec![1], vec![loss], op, &[x])
    }

    /// Runs reverse-mode differentiation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // Only gradients of tracked nodes are meaningful.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let (p, kk, co) = (geom.out_pixels(), geom.patch_len(), geom.cout);
                if self.requires_grad(*kernel) {
                    let dk = self.grad_buf(grads, *kernel);
                    gemm(kk, p, co, cols, true, g, false, dk, true);
                }
                if self.requires_grad(*input) {
                    let mut dcols = vec![0.0; p * kk];
                    gemm(p, co, kk, g, false, self.value(*kernel).data(), true, &mut dcols, false);
                    let dx = self.grad_buf(grads, *input);
                    ops::col2im_add(&dcols, geom, dx);
                }
            }
            Op::AddChannelBias { x, bias } => {
                if self.requires_grad(*bias) {
                    let c = node.value.channels();
                    let db = self.grad_buf(grads, *bias);
                    for row in g.chunks_exact(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
                self.accumulate(grads, *x, g.iter().copied());
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, g.iter().zip(xv).map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 }));
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.iter().copied());
                self.accumulate(grads, *b, g.iter().copied());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, g.iter().zip(bv).map(|(x, y)| x * y));
                self.accumulate(grads, *b, g.iter().zip(av).map(|(x, y)| x * y));
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, g.iter().map(|v| v * factor));
            }
            Op::ConcatChannels { inputs } => {
                let total = node.value.channels();
                let mut offset = 0;
                for &v in inputs {
                    let wd = self.value(v).channels();
                    if self.requires_grad(v) {
                        let dv = self.grad_buf(grads, v);
                        for (drow, grow) in dv.chunks_exact_mut(wd).zip(g.chunks_exact(total)) {
                            for (d, s) in drow.iter_mut().zip(&grow[offset..offset + wd]) {
                                *d += s;
                            }
                        }
                    }
                    offset += wd;
                }
            }
            Op::SliceChannels { x, start } => {
                if self.requires_grad(*x) {
                    let c = self.value(*x).channels();
                    let wd = node.value.channels();
                    let dx = self.grad_buf(grads, *x);
                    for (drow, grow) in dx.chunks_exact_mut(c).zip(g.chunks_exact(wd)) {
                        for (d, s) in drow[*start..*start + wd].iter_mut().zip(grow) {
                            *d += s;
                        }
                    }
                }
            }
            Op::SumChannels { x } => {
                if self.requires_grad(*x) {
                    let c = self.value(*x).channels();
                    let dx = self.grad_buf(grads, *x);
                    for (drow, gv) in dx.chunks_exact_mut(c).zip(g) {
                        drow.iter_mut().for_each(|d| *d += gv);
                    }
                }
            }
            Op::SoftmaxChannels { x } => {
                if self.requires_grad(*x) {
                    let c = node.value.channels();
                    let dx = self.grad_buf(grads, *x);
                    ops::softmax_rows_backward(node.value.data(), g, c, dx);
                }
            }
            Op::BilinearResize { x, ys, xs } => {
                if self.requires_grad(*x) {
                    let dims = self.value(*x).dims3().expect("bilinear input");
                    let dx = self.grad_buf(grads, *x);
                    ops::bilinear_backward(g, dims, ys, xs, dx);
                }
            }
            Op::GlobalMean { x } => {
                if self.requires_grad(*x) {
                    let c = node.value.channels();
                    let n = (self.value(*x).len() / c) as f64;
                    let dx = self.grad_buf(grads, *x);
                    for drow in dx.chunks_exact_mut(c) {
                        for (d, gv) in drow.iter_mut().zip(g) {
                            *d += gv / n;
                        }
                    }
                }
            }
            Op::Reshape { x } => self.accumulate(grads, *x, g.iter().copied()),
            Op::GatherRows { x, indices } => {
                if self.requires_grad(*x) {
                    let c = node.value.channels();
                    let dx = self.grad_buf(grads, *x);
                    for (&i, grow) in indices.iter().zip(g.chunks_exact(c)) {
                        for (d, s) in dx[i * c..(i + 1) * c].iter_mut().zip(grow) {
                            *d += s;
                        }
                    }
                }
            }
            Op::ConcatRows { inputs } => {
                let mut offset = 0;
                for &v in inputs {
                    let len = self.value(v).len();
                    self.accumulate(grads, v, g[offset..offset + len].iter().copied());
                    offset += len;
                }
            }
            Op::WeightedMeanRows { samples, weights } => {
                let s = self.value(*samples).data();
                let w = self.value(*weights).data();
                let mu = node.value.data();
                let (n, c) = (self.shape(*samples)[0], self.shape(*samples)[1]);
                let k = self.shape(*weights)[1];
                let col_sums: Vec<f64> = (0..k).map(|j| (0..n).map(|i| w[i * k + j]).sum()).collect();
                if self.requires_grad(*samples) {
                    let ds = self.grad_buf(grads, *samples);
                    for i in 0..n {
                        for j in 0..k {
                            let coef = w[i * k + j] / col_sums[j];
                            for ch in 0..c {
                                ds[i * c + ch] += coef * g[j * c + ch];
                            }
                        }
                    }
                }
                if self.requires_grad(*weights) {
                    let dw = self.grad_buf(grads, *weights);
                    for i in 0..n {
                        for j in 0..k {
                            let dot: f64 = (0..c).map(|ch| (s[i * c + ch] - mu[j * c + ch]) * g[j * c + ch]).sum();
                            dw[i * k + j] += dot / col_sums[j];
                        }
                    }
                }
            }
            Op::Responsibilities {
                samples,
                protos,
                kappa,
                kernel,
            } => {
                let e = node.value.data();
                let s = self.value(*samples).data();
                let m = self.value(*protos).data();
                let (n, c) = (self.shape(*samples)[0], self.shape(*samples)[1]);
                let k = self.shape(*protos)[0];
                // Gradient w.r.t. the pre-softmax scores.
                let mut dscore = vec![0.0; n * k];
                ops::softmax_rows_backward(e, g, k, &mut dscore);
                let (ds_needed, dm_needed) = (self.requires_grad(*samples), self.requires_grad(*protos));
                let mut ds = vec![0.0; n * c];
                let mut dm = vec![0.0; k * c];
                for i in 0..n {
                    for j in 0..k {
                        let d = dscore[i * k + j];
                        if d == 0.0 {
                            continue;
                        }
                        for ch in 0..c {
                            let (sv, mv) = (s[i * c + ch], m[j * c + ch]);
                            let (gs, gm) = match kernel {
                                Kernel::Vmf => (kappa * mv, kappa * sv),
                                Kernel::Gaussian => (-2.0 * kappa * (sv - mv), 2.0 * kappa * (sv - mv)),
                            };
                            ds[i * c + ch] += d * gs;
                            dm[j * c + ch] += d * gm;
                        }
                    }
                }
                if ds_needed {
                    self.accumulate(grads, *samples, ds.into_iter());
                }
                if dm_needed {
                    self.accumulate(grads, *protos, dm.into_iter());
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                if self.requires_grad(*x) {
                    let c = node.value.channels();
                    let y = node.value.data();
                    let dx = self.grad_buf(grads, *x);
                    for (((drow, yrow), grow), &norm) in dx
                        .chunks_exact_mut(c)
                        .zip(y.chunks_exact(c))
                        .zip(g.chunks_exact(c))
                        .zip(norms)
                    {
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for ((d, yv), gv) in drow.iter_mut().zip(yrow).zip(grow) {
                            *d += (gv - yv * dot) / norm;
                        }
                    }
                }
            }
            Op::CrossEntropy2d { logits, probs, target } => {
                let scale = g[0] / target.len() as f64;
                let grad = probs.chunks_exact(2).zip(target).flat_map(|(p, &t)| {
                    let onehot = if t == 1 { [0.0, 1.0] } else { [1.0, 0.0] };
                    [(p[0] - onehot[0]) * scale, (p[1] - onehot[1]) * scale]
                });
                self.accumulate(grads, *logits, grad);
            }
            Op::MeanSquaredError { x, target } => {
                let scale = 2.0 * g[0] / target.len() as f64;
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, xv.iter().zip(target).map(|(a, b)| (a - b) * scale));
            }
        }
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Vec<f64>>], var: Var) -> &'a mut [f64] {
        let len = self.value(var).len();
        grads[var.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], var: Var, values: impl Iterator<Item = f64>) {
        if !self.requires_grad(var) {
            return;
        }
        let buf = self.grad_buf(grads, var);
        for (d, v) in buf.iter_mut().zip(values) {
            *d += v;
        }
    }
}
