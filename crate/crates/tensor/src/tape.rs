use crate::ops::{self, ConvGeom, Strided};
use crate::{Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        inner: usize,
        cols: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: Strided,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Gelu {
        x: Var,
        cdf: Vec<F>,
    },
    DsConv {
        x: Var,
        depth: Var,
        point: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        hidden: Vec<F>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: F,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    MeanLast {
        x: Var,
        len: usize,
    },
    Sum {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
        widths: Vec<usize>,
        rows: usize,
    },
    L2Dist {
        x: Var,
        c: Var,
        dim: usize,
    },
    Softmax {
        x: Var,
        len: usize,
    },
    Column {
        x: Var,
        cols: usize,
        j: usize,
    },
    Bce {
        p: Var,
        labels: Vec<F>,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    needs_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so every entry's inputs precede it
/// and a single reverse sweep visits each entry once.
#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of the loss with respect to `v`.
    ///
    /// Leaves that require a gradient always have one (zeros when they did not
    /// participate); values that do not require a gradient return `None`.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Whether `v` is a leaf that collects a gradient.
    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Copies `v` into a new leaf that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// `x · w + b` over the last axis of `x`; `w` is `[inner, cols]` and `b` is `[cols]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.is_empty() || ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
            return Err(shape_err("affine", &xs, &ws));
        }
        let inner = ws[0];
        let cols = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [cols] {
                return Err(shape_err("affine bias", self.shape(b), &[cols]));
            }
        }
        let rows = xs[..xs.len() - 1].iter().product::<usize>();
        let mut out = vec![F::zero(); rows * cols];
        ops::affine_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            rows,
            inner,
            cols,
            &mut out,
        );
        let mut shape = xs;
        *shape.last_mut().expect("nonempty") = cols;
        let value = Tensor::new(shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            value,
            Op::Affine {
                x,
                w,
                b,
                rows,
                inner,
                cols,
            },
            &inputs,
        ))
    }

    /// Layer normalization of every slice along `axis`, with population
    /// variance and `eps = 1e-5` inside the square root.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(TensorError::Axis {
                op: "layer_norm",
                axis,
                rank: xs.len(),
            });
        }
        let len = xs[axis];
        if self.shape(gamma) != [len] || self.shape(beta) != [len] {
            return Err(shape_err("layer_norm", self.shape(gamma), &[len]));
        }
        let layout = Strided::along(&xs, axis);
        let (out, xhat, rstd) = ops::layer_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            layout,
            F::lit(1e-5),
        );
        let value = Tensor::new(xs, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let cdf: Vec<F> = tx.data().iter().map(|&v| ops::normal_cdf(v)).collect();
        let data = tx.data().iter().zip(&cdf).map(|(&v, &c)| v * c).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Gelu { x, cdf }, &[x])
    }

    /// Depthwise convolution along the last axis followed by a 1×1 pointwise mix.
    ///
    /// `x` is `[batch, cin, len]` (or `[cin, len]`), `depth` is `[cin, k]`,
    /// `point` is `[cout, cin]` and `bias` is `[cout]`.
    pub fn depthwise_separable_conv(
        &mut self,
        x: Var,
        depth: Var,
        point: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ds = self.shape(depth).to_vec();
        let ps = self.shape(point).to_vec();
        let (batch, cin, len) = match xs[..] {
            [c, l] => (1, c, l),
            [b, c, l] => (b, c, l),
            _ => return Err(shape_err("depthwise_separable_conv", &xs, &ds)),
        };
        if ds.len() != 2 || ds[0] != cin {
            return Err(shape_err("depthwise_separable_conv depth", &xs, &ds));
        }
        if ps.len() != 2 || ps[1] != cin {
            return Err(shape_err("depthwise_separable_conv point", &ds, &ps));
        }
        let cout = ps[0];
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(shape_err("depthwise_separable_conv bias", self.shape(b), &[cout]));
            }
        }
        let geom = ConvGeom::new(
            "depthwise_separable_conv",
            batch,
            cin,
            cout,
            len,
            ds[1],
            stride,
            padding,
        )?;
        let (out, hidden) = ops::dsconv_forward(
            self.value(x).data(),
            self.value(depth).data(),
            self.value(point).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let shape = if xs.len() == 2 {
            vec![cout, geom.lout]
        } else {
            vec![batch, cout, geom.lout]
        };
        let value = Tensor::new(shape, out)?;
        let mut inputs = vec![x, depth, point];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::DsConv {
                x,
                depth,
                point,
                bias,
                geom,
                hidden,
            },
            &inputs,
        ))
    }

    /// Dense 1-D convolution. `x` is `[batch, cin, len]` (or `[cin, len]`),
    /// `w` is `[cout, cin, k]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (batch, cin, len) = match xs[..] {
            [c, l] => (1, c, l),
            [b, c, l] => (b, c, l),
            _ => return Err(shape_err("conv1d", &xs, &ws)),
        };
        if ws.len() != 3 || ws[1] != cin {
            return Err(shape_err("conv1d", &xs, &ws));
        }
        let cout = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv1d bias", self.shape(b), &[cout]));
            }
        }
        let geom = ConvGeom::new("conv1d", batch, cin, cout, len, ws[2], stride, padding)?;
        let out = ops::conv1d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let shape = if xs.len() == 2 {
            vec![cout, geom.lout]
        } else {
            vec![batch, cout, geom.lout]
        };
        let value = Tensor::new(shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv1d { x, w, b, geom }, &inputs))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
    ) -> Result<Tensor<F>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale { x, c }, &[x])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if perm.len() != xs.len() || perm.iter().any(|&p| p >= xs.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", &xs, perm));
        }
        let (shape, data) = ops::permute(self.value(x).data(), &xs, perm);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Mean over the last axis.
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let Some((&len, lead)) = xs.split_last() else {
            return Err(TensorError::Axis {
                op: "mean_last",
                axis: 0,
                rank: 0,
            });
        };
        if len == 0 {
            return Err(shape_err("mean_last", &xs, &[]));
        }
        let inv = F::one() / F::lit(len as f64);
        let data = self
            .value(x)
            .data()
            .chunks(len)
            .map(|row| row.iter().copied().sum::<F>() * inv)
            .collect();
        let value = Tensor::new(lead.to_vec(), data)?;
        Ok(self.push(value, Op::MeanLast { x, len }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum::<F>();
        self.push(Tensor::scalar(total), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, F::one() / F::lit(n as f64))
    }

    /// Concatenates along the last axis; all parts share their leading dimensions.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Contract("concat of zero tensors".into()));
        };
        let lead = self.shape(first).to_vec();
        if lead.is_empty() {
            return Err(shape_err("concat", &lead, &[]));
        }
        let lead = lead[..lead.len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let ps = self.shape(p);
            if ps.is_empty() || ps[..ps.len() - 1] != lead[..] {
                return Err(shape_err("concat", ps, &lead));
            }
            widths.push(ps[ps.len() - 1]);
        }
        let rows = lead.iter().product::<usize>();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                widths,
                rows,
            },
            parts,
        ))
    }

    /// Euclidean distance `‖x − c‖₂` from every last-axis row of `x` to `c`.
    /// A 1-D `x` gives a scalar.
    pub fn l2_distance(&mut self, x: Var, c: Var) -> Result<Var> {
        let (tx, tc) = (self.value(x), self.value(c));
        let dim = tc.numel();
        if tc.rank() != 1 || tx.rank() == 0 || tx.shape()[tx.rank() - 1] != dim {
            return Err(shape_err("l2_distance", tx.shape(), tc.shape()));
        }
        let d: Vec<F> = tx
            .data()
            .chunks(dim)
            .map(|row| {
                row.iter()
                    .zip(tc.data())
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum::<F>()
                    .sqrt()
            })
            .collect();
        let shape = tx.shape()[..tx.rank() - 1].to_vec();
        Ok(self.push(Tensor::new(shape, d)?, Op::L2Dist { x, c, dim }, &[x, c]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let Some(&len) = xs.last() else {
            return Err(TensorError::Axis {
                op: "softmax",
                axis: 0,
                rank: 0,
            });
        };
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(len) {
            ops::softmax_in_place(row);
        }
        let value = Tensor::new(xs, data)?;
        Ok(self.push(value, Op::Softmax { x, len }, &[x]))
    }

    /// Column `j` of a `[rows, cols]` (or `[cols]`) tensor.
    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let cols = *xs.last().unwrap_or(&0);
        if xs.is_empty() || xs.len() > 2 || j >= cols {
            return Err(TensorError::Axis {
                op: "column",
                axis: j,
                rank: xs.len(),
            });
        }
        let data: Vec<F> = self.value(x).data().iter().skip(j).step_by(cols).copied().collect();
        let value = Tensor::vector(data);
        Ok(self.push(value, Op::Column { x, cols, j }, &[x]))
    }

    /// Batch-averaged binary cross-entropy of positive-class probabilities `p`
    /// against `labels`, with `p` clamped to `[1e-7, 1 − 1e-7]`.
    pub fn bce(&mut self, p: Var, labels: &[F]) -> Result<Var> {
        let tp = self.value(p);
        if tp.rank() != 1 || tp.numel() != labels.len() || labels.is_empty() {
            return Err(shape_err("bce", tp.shape(), &[labels.len()]));
        }
        let loss = ops::bce_forward(tp.data(), labels);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                labels: labels.to_vec(),
            },
            &[p],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if !node.needs_grad {
                    return None;
                }
                let shape = node.value.shape().to_vec();
                Some(match g {
                    Some(g) => Tensor::new(shape, g).expect("gradient shape matches value"),
                    None => Tensor::zeros(shape),
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node<F>, dy: &[F], grads: &mut [Option<Vec<F>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let size = |v: Var| self.nodes[v.0].value.numel();
        // Accumulates into the gradient slot of `v`, allocating on first touch.
        fn slot<'g, F: Real>(grads: &'g mut [Option<Vec<F>>], v: Var, n: usize) -> &'g mut [F] {
            grads[v.0].get_or_insert_with(|| vec![F::zero(); n])
        }

        match &node.op {
            Op::Leaf => {}
            &Op::Affine {
                x,
                w,
                b,
                rows,
                inner,
                cols,
            } => {
                if self.needs(x) {
                    let gx = slot(grads, x, size(x));
                    ops::affine_backward_input(dy, val(w), rows, inner, cols, gx);
                }
                if self.needs(w) {
                    let gw = slot(grads, w, size(w));
                    ops::affine_backward_weight(dy, val(x), rows, inner, cols, gw);
                }
                if let Some(b) = b.filter(|&b| self.needs(b)) {
                    let gb = slot(grads, b, cols);
                    for row in dy.chunks(cols) {
                        for (g, &d) in gb.iter_mut().zip(row) {
                            *g = *g + d;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                rstd,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                if self.needs(gamma) || self.needs(beta) {
                    let mut gg = vec![F::zero(); layout.len];
                    let mut gb = vec![F::zero(); layout.len];
                    layout.for_each_slice(|idx| {
                        for (i, e) in idx.enumerate() {
                            gg[i] = gg[i] + dy[e] * xhat[e];
                            gb[i] = gb[i] + dy[e];
                        }
                    });
                    if self.needs(gamma) {
                        ops::accumulate(slot(grads, gamma, layout.len), &gg);
                    }
                    if self.needs(beta) {
                        ops::accumulate(slot(grads, beta, layout.len), &gb);
                    }
                }
                if self.needs(x) {
                    let gx = slot(grads, x, size(x));
                    ops::layer_norm_backward_input(dy, val(gamma), xhat, rstd, *layout, gx);
                }
            }
            Op::Gelu { x, cdf } => {
                let x = *x;
                let gx = slot(grads, x, size(x));
                for (((g, &d), &xv), &c) in gx.iter_mut().zip(dy).zip(val(x)).zip(cdf) {
                    *g = *g + d * ops::gelu_grad_with_cdf(xv, c);
                }
            }
            Op::DsConv {
                x,
                depth,
                point,
                bias,
                geom,
                hidden,
            } => {
                let (x, depth, point) = (*x, *depth, *point);
                if let Some(b) = bias.filter(|&b| self.needs(b)) {
                    let gb = slot(grads, b, geom.cout);
                    ops::conv_bias_backward(dy, geom, gb);
                }
                if self.needs(point) {
                    let gp = slot(grads, point, size(point));
                    ops::pointwise_backward_weight(dy, hidden, geom, gp);
                }
                if self.needs(x) || self.needs(depth) {
                    let dh = ops::pointwise_backward_input(dy, val(point), geom);
                    if self.needs(depth) {
                        let gd = slot(grads, depth, size(depth));
                        ops::depthwise_backward_kernel(&dh, val(x), geom, gd);
                    }
                    if self.needs(x) {
                        let gx = slot(grads, x, size(x));
                        ops::depthwise_backward_input(&dh, val(depth), geom, gx);
                    }
                }
            }
            &Op::Conv1d { x, w, b, ref geom } => {
                if let Some(b) = b.filter(|&b| self.needs(b)) {
                    let gb = slot(grads, b, geom.cout);
                    ops::conv_bias_backward(dy, geom, gb);
                }
                if self.needs(w) {
                    let gw = slot(grads, w, size(w));
                    ops::conv1d_backward_weight(dy, val(x), geom, gw);
                }
                if self.needs(x) {
                    let gx = slot(grads, x, size(x));
                    ops::conv1d_backward_input(dy, val(w), geom, gx);
                }
            }
            &Op::Add { a, b } => {
                if self.needs(a) {
                    ops::accumulate(slot(grads, a, dy.len()), dy);
                }
                if self.needs(b) {
                    ops::accumulate(slot(grads, b, dy.len()), dy);
                }
            }
            &Op::Sub { a, b } => {
                if self.needs(a) {
                    ops::accumulate(slot(grads, a, dy.len()), dy);
                }
                if self.needs(b) {
                    let gb = slot(grads, b, dy.len());
                    for (g, &d) in gb.iter_mut().zip(dy) {
                        *g = *g - d;
                    }
                }
            }
            &Op::Mul { a, b } => {
                if self.needs(a) {
                    let gb_vals = val(b);
                    let ga = slot(grads, a, dy.len());
                    for ((g, &d), &o) in ga.iter_mut().zip(dy).zip(gb_vals) {
                        *g = *g + d * o;
                    }
                }
                if self.needs(b) {
                    let ga_vals = val(a);
                    let gb = slot(grads, b, dy.len());
                    for ((g, &d), &o) in gb.iter_mut().zip(dy).zip(ga_vals) {
                        *g = *g + d * o;
                    }
                }
            }
            &Op::Scale { x, c } => {
                let gx = slot(grads, x, dy.len());
                for (g, &d) in gx.iter_mut().zip(dy) {
                    *g = *g + d * c;
                }
            }
            Op::Permute { x, perm } => {
                let xs = self.nodes[x.0].value.shape();
                let gx = slot(grads, *x, dy.len());
                ops::permute_backward(dy, xs, perm, gx);
            }
            &Op::Reshape { x } => {
                ops::accumulate(slot(grads, x, dy.len()), dy);
            }
            &Op::MeanLast { x, len } => {
                let inv = F::one() / F::lit(len as f64);
                let gx = slot(grads, x, size(x));
                for (row, &d) in gx.chunks_mut(len).zip(dy) {
                    for g in row {
                        *g = *g + d * inv;
                    }
                }
            }
            &Op::Sum { x } => {
                let gx = slot(grads, x, size(x));
                for g in gx.iter_mut() {
                    *g = *g + dy[0];
                }
            }
            Op::Concat { parts, widths, rows } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if self.needs(p) {
                        let gp = slot(grads, p, rows * w);
                        for r in 0..*rows {
                            let src = &dy[r * total + offset..r * total + offset + w];
                            ops::accumulate(&mut gp[r * w..(r + 1) * w], src);
                        }
                    }
                    offset += w;
                }
            }
            &Op::L2Dist { x, c, dim } => {
                let dist = node.value.data();
                let xv = val(x);
                let cv = val(c);
                let mut gx = self.needs(x).then(|| vec![F::zero(); xv.len()]);
                let mut gc = self.needs(c).then(|| vec![F::zero(); dim]);
                for (r, (&d, &g)) in dist.iter().zip(dy).enumerate() {
                    // The distance is not differentiable at zero; use the zero subgradient there.
                    if d <= F::zero() {
                        continue;
                    }
                    let scale = g / d;
                    for k in 0..dim {
                        let v = (xv[r * dim + k] - cv[k]) * scale;
                        if let Some(gx) = gx.as_mut() {
                            gx[r * dim + k] = gx[r * dim + k] + v;
                        }
                        if let Some(gc) = gc.as_mut() {
                            gc[k] = gc[k] - v;
                        }
                    }
                }
                if let Some(gx) = gx {
                    ops::accumulate(slot(grads, x, gx.len()), &gx);
                }
                if let Some(gc) = gc {
                    ops::accumulate(slot(grads, c, dim), &gc);
                }
            }
            &Op::Softmax { x, len } => {
                let y = node.value.data();
                let gx = slot(grads, x, y.len());
                for ((g, yr), dr) in gx.chunks_mut(len).zip(y.chunks(len)).zip(dy.chunks(len)) {
                    let dot = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum::<F>();
                    for ((g, &yi), &di) in g.iter_mut().zip(yr).zip(dr) {
                        *g = *g + yi * (di - dot);
                    }
                }
            }
            &Op::Column { x, cols, j } => {
                let gx = slot(grads, x, size(x));
                for (row, &d) in gx.chunks_mut(cols).zip(dy) {
                    row[j] = row[j] + d;
                }
            }
            Op::Bce { p, labels } => {
                let gp = slot(grads, *p, labels.len());
                ops::bce_backward(val(*p), labels, dy[0], gp);
            }
        }
    }
}
