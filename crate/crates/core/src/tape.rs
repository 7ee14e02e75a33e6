//! Reverse-mode differentiation over a recorded tape.
//!
//! Every operation on a [`GradTape`] evaluates eagerly and appends a node
//! holding its value and how it was produced. [`GradTape::backward`] walks
//! the nodes in reverse, accumulating gradients into every input that
//! (transitively) depends on a variable created with [`GradTape::var`].
//!
//! ```
//! use dssinet_core::{GradTape, Tensor};
//!
//! let mut tape = GradTape::new();
//! let x = tape.var(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let half = tape.scale(sq, 0.5);
//! let loss = tape.sum(half);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[1.0, -2.0, 0.5]);
//! ```

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{self, ConvSpec, MaxPoolIndices, Tensor};

static NEXT_TAPE: AtomicUsize = AtomicUsize::new(0);

/// Handle to a node on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        spec: ConvSpec,
    },
    ChannelMix {
        weight: usize,
        input: usize,
    },
    Resize {
        input: usize,
    },
    MaxPool {
        input: usize,
        indices: MaxPoolIndices,
    },
    Concat {
        inputs: Vec<usize>,
    },
    Reshape(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    Relu(usize),
    Sqrt(usize),
    ClampMin(usize, f64),
    Powf(usize, f64),
    Sum(usize),
    Mean(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    marked: bool,
}

#[derive(Debug)]
pub struct GradTape {
    id: usize,
    nodes: Vec<Node>,
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is reported by [`backward`](Self::backward).
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true, true)
    }

    /// A leaf that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, marked: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            marked,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::invalid("variable is not on this tape"));
        }
        Ok(v.index)
    }

    fn needs(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let rg = self.needs(inputs);
        self.push(value, op, rg, false)
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    ) -> Result<Var> {
        let (i, w) = (self.idx(input)?, self.idx(weight)?);
        let b = bias.map(|b| self.idx(b)).transpose()?;
        let out = tensor::conv2d(self.val(i), self.val(w), b.map(|b| self.val(b)), &spec)?;
        let mut deps = vec![i, w];
        deps.extend(b);
        Ok(self.record(
            out,
            Op::Conv2d {
                input: i,
                weight: w,
                bias: b,
                spec,
            },
            &deps,
        ))
    }

    /// Bias-free 1×1 convolution with a `[C_out, C_in]` weight.
    pub fn channel_mix(&mut self, weight: Var, input: Var) -> Result<Var> {
        let (w, i) = (self.idx(weight)?, self.idx(input)?);
        let out = tensor::channel_mix(self.val(w), self.val(i))?;
        Ok(self.record(
            out,
            Op::ChannelMix {
                weight: w,
                input: i,
            },
            &[w, i],
        ))
    }

    pub fn resize_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let i = self.idx(input)?;
        let out = tensor::resize_bilinear(self.val(i), out_h, out_w)?;
        Ok(self.record(out, Op::Resize { input: i }, &[i]))
    }

    pub fn upsample_x2(&mut self, input: Var) -> Result<Var> {
        let (_, h, w) = self.value(input).dims3()?;
        self.resize_bilinear(input, 2 * h, 2 * w)
    }

    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let (out, indices) = tensor::max_pool2(self.val(i))?;
        Ok(self.record(out, Op::MaxPool { input: i, indices }, &[i]))
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let idx = inputs
            .iter()
            .map(|&v| self.idx(v))
            .collect::<Result<Vec<_>>>()?;
        let parts: Vec<&Tensor> = idx.iter().map(|&i| self.val(i)).collect();
        let out = Tensor::concat_channels(&parts)?;
        Ok(self.record(
            out,
            Op::Concat {
                inputs: idx.clone(),
            },
            &idx,
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let i = self.idx(input)?;
        let out = self.val(i).clone().reshape(shape)?;
        Ok(self.record(out, Op::Reshape(i), &[i]))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.val(ia).zip_map(self.val(ib), f)?;
        Ok(self.record(out, op(ia, ib), &[ia, ib]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let i = a.index;
        let out = self.value(a).map(f);
        self.record(out, op, &[i])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a.index, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddConst(a.index))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a.index))
    }

    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a.index))
    }

    pub fn clamp_min(&mut self, a: Var, min: f64) -> Var {
        self.unary(a, |x| x.max(min), Op::ClampMin(a.index, min))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, |x| x.powf(p), Op::Powf(a.index, p))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.record(Tensor::scalar(s), Op::Sum(a.index), &[a.index])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let s = self.value(a).mean();
        self.record(Tensor::scalar(s), Op::Mean(a.index), &[a.index])
    }

    /// Gradient of a scalar `loss` with respect to every [`var`](Self::var).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let i = self.idx(loss)?;
        let v = self.val(i);
        if v.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                v.shape()
            )));
        }
        let seed = Tensor::full(v.shape(), 1.0);
        self.backward_with_seed(loss, seed)
    }

    /// Propagates an externally supplied output gradient, e.g. the analytic
    /// gradient of a loss evaluated off-tape.
    pub fn backward_with_seed(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        let out = self.idx(output)?;
        self.val(out).expect_same_shape(&seed)?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out] = Some(seed);
        for n in (0..=out).rev() {
            let node = &self.nodes[n];
            if !node.requires_grad {
                grads[n] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[n].take() else { continue };
            self.propagate(n, &g, &mut grads)?;
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                if node.marked {
                    Some(g.unwrap_or_else(|| Tensor::zeros(node.value.shape())))
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn propagate(&self, n: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[n];
        let mut acc = |i: usize, t: Tensor| -> Result<()> {
            if !self.nodes[i].requires_grad {
                return Ok(());
            }
            match &mut grads[i] {
                Some(existing) => existing.add_scaled(&t, 1.0),
                slot => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let need_input = self.nodes[*input].requires_grad;
                let (gi, gw, gb) = tensor::conv::conv2d_backward_parts(
                    self.val(*input),
                    self.val(*weight),
                    spec,
                    g,
                    need_input,
                )?;
                if let Some(gi) = gi {
                    acc(*input, gi)?;
                }
                acc(*weight, gw)?;
                if let Some(b) = bias {
                    acc(*b, gb)?;
                }
            }
            Op::ChannelMix { weight, input } => {
                let (gi, gw) =
                    tensor::channel_mix_backward(self.val(*weight), self.val(*input), g)?;
                acc(*input, gi)?;
                acc(*weight, gw)?;
            }
            Op::Resize { input } => {
                acc(
                    *input,
                    tensor::resize_bilinear_backward(self.val(*input).shape(), g)?,
                )?;
            }
            Op::MaxPool { input, indices } => {
                acc(
                    *input,
                    tensor::max_pool2_backward(self.val(*input).shape(), indices, g)?,
                )?;
            }
            Op::Concat { inputs } => {
                let mut offset = 0;
                for &i in inputs {
                    let shape = self.val(i).shape();
                    let n = self.val(i).numel();
                    let part = Tensor::new(shape.to_vec(), g.data()[offset..offset + n].to_vec())?;
                    offset += n;
                    acc(i, part)?;
                }
            }
            Op::Reshape(a) => acc(*a, g.clone().reshape(self.val(*a).shape())?)?,
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                acc(*a, g.mul(self.val(*b))?)?;
                acc(*b, g.mul(self.val(*a))?)?;
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                acc(*a, g.zip_map(vb, |g, y| g / y)?)?;
                let gb = Tensor::from_fn(vb.shape(), |k| {
                    let y = vb.data()[k];
                    -g.data()[k] * va.data()[k] / (y * y)
                });
                acc(*b, gb)?;
            }
            Op::Scale(a, c) => acc(*a, g.scale(*c))?,
            Op::AddConst(a) => acc(*a, g.clone())?,
            Op::Relu(a) => acc(
                *a,
                g.zip_map(self.val(*a), |g, x| if x > 0.0 { g } else { 0.0 })?,
            )?,
            Op::Sqrt(a) => acc(
                *a,
                g.zip_map(&node.value, |g, r| if r > 0.0 { 0.5 * g / r } else { 0.0 })?,
            )?,
            Op::ClampMin(a, m) => acc(
                *a,
                g.zip_map(self.val(*a), |g, x| if x > *m { g } else { 0.0 })?,
            )?,
            Op::Powf(a, p) => acc(*a, g.zip_map(self.val(*a), |g, x| g * p * x.powf(p - 1.0))?)?,
            Op::Sum(a) => {
                let gv = g.item()?;
                acc(*a, Tensor::full(self.val(*a).shape(), gv))?;
            }
            Op::Mean(a) => {
                let v = self.val(*a);
                let gv = g.item()? / v.numel().max(1) as f64;
                acc(*a, Tensor::full(v.shape(), gv))?;
            }
        }
        Ok(())
    }
}

/// Gradients of one backward sweep, available for every marked variable.
#[derive(Debug)]
pub struct Gradients {
    tape: usize,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Result<&Tensor> {
        if v.tape != self.tape {
            return Err(Error::invalid("variable is not on the differentiated tape"));
        }
        self.grads
            .get(v.index)
            .and_then(Option::as_ref)
            .ok_or_else(|| {
                Error::invalid("no gradient recorded: variable was not created with `var`")
            })
    }

    pub fn take(&mut self, v: Var) -> Result<Tensor> {
        self.get(v)?;
        Ok(self.grads[v.index].take().expect("checked above"))
    }
}
