//! A closed-op-set reverse-mode tape.
//!
//! Every recorded node owns its forward value. Nodes are appended in
//! evaluation order, so insertion order is a topological order and the
//! backward pass is a single reverse sweep.

use crate::error::{Error, Result};
use crate::kernels;
use crate::volume::Dims;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Value {
    Tensor(Tensor),
    Scalar(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Param(ParamId),
    Input,
    Constant,
    Conv3d { x: Var, w: Var, b: Var },
    LeakyRelu { x: Var, slope: f32 },
    AvgPool { x: Var },
    Resample { x: Var },
    Concat { parts: Vec<Var> },
    Add { a: Var, b: Var },
    Scale { x: Var, s: f32 },
    Sample { field: Var, map: Var },
    Lncc { a: Var, b: Var, radius: usize, eps: f64 },
    JacobianPenalty { map: Var },
    Sum { x: Var },
    HalfSumSquares { x: Var },
    Combine { terms: Vec<(Var, f64)> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Value>>,
    params: Vec<(ParamId, Vec<f32>)>,
}

impl Gradients {
    /// Gradient of a tensor node (e.g. an input leaf), if it received one.
    pub fn tensor(&self, v: Var) -> Option<&Tensor> {
        match self.grads.get(v.0)? {
            Some(Value::Tensor(t)) => Some(t),
            _ => None,
        }
    }

    pub fn scalar(&self, v: Var) -> Option<f64> {
        match self.grads.get(v.0)? {
            Some(Value::Scalar(s)) => Some(*s),
            _ => None,
        }
    }

    /// Parameter gradients in the order the parameters were recorded.
    pub fn params(&self) -> &[(ParamId, Vec<f32>)] {
        &self.params
    }

    /// Adds the parameter gradients into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in &self.params {
            store.accumulate_grad(*id, g);
        }
    }
}

/// Reverse-mode recording of one forward evaluation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn shape_of(t: &Tensor) -> String {
    format!("{}x{:?}", t.channels(), t.dims())
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

    fn push(&mut self, value: Value, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn tensor_ref(&self, v: Var) -> Result<&Tensor> {
        match &self.nodes[v.0].value {
            Value::Tensor(t) => Ok(t),
            Value::Scalar(_) => Err(Error::shape("expected a tensor, found a scalar")),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Forward value of a tensor node.
    pub fn value(&self, v: Var) -> &Tensor {
        self.tensor_ref(v).expect("tensor node")
    }

    /// Forward value of a scalar node.
    pub fn scalar(&self, v: Var) -> f64 {
        match &self.nodes[v.0].value {
            Value::Scalar(s) => *s,
            Value::Tensor(_) => panic!("expected a scalar node"),
        }
    }

    /// Records a parameter leaf; gradients flow to it only if it is trainable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let n = p.value.len();
        let t = Tensor::from_raw(1, [n, 1, 1], p.value.clone());
        self.push(Value::Tensor(t), Op::Param(id), p.trainable)
    }

    /// A leaf whose gradient is reported by [`Gradients::tensor`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Value::Tensor(t), Op::Input, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Value::Tensor(t), Op::Constant, false)
    }

    /// 3x3x3 convolution, stride 1, zero padding. `w` holds
    /// `c_out * c_in * 27` values, `b` holds `c_out`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xt = self.tensor_ref(x)?;
        let wn = self.tensor_ref(w)?.data().len();
        let c_out = self.tensor_ref(b)?.data().len();
        let c_in = xt.channels();
        if wn != c_out * c_in * 27 {
            return Err(Error::shape(format!(
                "conv weight has {wn} values, expected {c_out}x{c_in}x27 for input {}",
                shape_of(xt)
            )));
        }
        let out =
            kernels::conv3d(xt.data(), c_in, xt.dims(), self.tensor_ref(w)?.data(), self.tensor_ref(b)?.data(), c_out);
        let t = Tensor::from_raw(c_out, xt.dims(), out);
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Value::Tensor(t), Op::Conv3d { x, w, b }, rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Result<Var> {
        let xt = self.tensor_ref(x)?;
        let data = xt.data().iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        let t = Tensor::from_raw(xt.channels(), xt.dims(), data);
        let rg = self.needs(x);
        Ok(self.push(Value::Tensor(t), Op::LeakyRelu { x, slope }, rg))
    }

    /// 2x average pooling (floor); singleton axes pass through.
    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        let xt = self.tensor_ref(x)?;
        let dims = kernels::pooled_dims(xt.dims());
        if dims.contains(&0) {
            return Err(Error::shape(format!("cannot pool {}", shape_of(xt))));
        }
        let data = kernels::avg_pool(xt.data(), xt.channels(), xt.dims());
        let t = Tensor::from_raw(xt.channels(), dims, data);
        let rg = self.needs(x);
        Ok(self.push(Value::Tensor(t), Op::AvgPool { x }, rg))
    }

    /// Trilinear resampling onto `dims` (normalized-coordinate convention).
    /// Used for 2x upsampling of features and fields.
    pub fn resample(&mut self, x: Var, dims: Dims) -> Result<Var> {
        let xt = self.tensor_ref(x)?;
        if dims.contains(&0) {
            return Err(Error::shape(format!("cannot resample to {dims:?}")));
        }
        let data = kernels::resample(xt.data(), xt.channels(), xt.dims(), dims);
        let t = Tensor::from_raw(xt.channels(), dims, data);
        let rg = self.needs(x);
        Ok(self.push(Value::Tensor(t), Op::Resample { x }, rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.tensor_ref(parts[0])?.dims();
        let mut data = Vec::new();
        let mut channels = 0;
        for &p in parts {
            let t = self.tensor_ref(p)?;
            if t.dims() != first {
                return Err(Error::shape(format!("concat of {:?} with {}", first, shape_of(t))));
            }
            channels += t.channels();
            data.extend_from_slice(t.data());
        }
        let t = Tensor::from_raw(channels, first, data);
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Value::Tensor(t), Op::Concat { parts: parts.to_vec() }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.tensor_ref(a)?, self.tensor_ref(b)?);
        if at.channels() != bt.channels() || at.dims() != bt.dims() {
            return Err(Error::shape(format!("add {} + {}", shape_of(at), shape_of(bt))));
        }
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_raw(at.channels(), at.dims(), data);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Value::Tensor(t), Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Result<Var> {
        let xt = self.tensor_ref(x)?;
        let data = xt.data().iter().map(|v| v * s).collect();
        let t = Tensor::from_raw(xt.channels(), xt.dims(), data);
        let rg = self.needs(x);
        Ok(self.push(Value::Tensor(t), Op::Scale { x, s }, rg))
    }

    /// Samples every channel of `field` at the coordinates stored in the
    /// 3-channel `map`: image warping when `field` has one channel, map
    /// composition when it has three.
    pub fn sample(&mut self, field: Var, map: Var) -> Result<Var> {
        let (ft, mt) = (self.tensor_ref(field)?, self.tensor_ref(map)?);
        if mt.channels() != 3 {
            return Err(Error::shape(format!("sampling map must have 3 channels, got {}", shape_of(mt))));
        }
        let data = kernels::sample_field(ft.data(), ft.channels(), ft.dims(), mt.data(), mt.dims());
        let t = Tensor::from_raw(ft.channels(), mt.dims(), data);
        let rg = self.needs(field) || self.needs(map);
        Ok(self.push(Value::Tensor(t), Op::Sample { field, map }, rg))
    }

    /// `1 - mean windowed NCC` of two single-channel tensors.
    pub fn lncc(&mut self, a: Var, b: Var, radius: usize, eps: f64) -> Result<Var> {
        let (at, bt) = (self.tensor_ref(a)?, self.tensor_ref(b)?);
        if at.channels() != 1 || bt.channels() != 1 || at.dims() != bt.dims() {
            return Err(Error::shape(format!("lncc of {} and {}", shape_of(at), shape_of(bt))));
        }
        let loss = kernels::lncc_loss(at.data(), bt.data(), at.dims(), radius, eps);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Value::Scalar(loss), Op::Lncc { a, b, radius, eps }, rg))
    }

    /// Mean squared Frobenius distance of the forward-difference Jacobian of
    /// a map from the identity, over interior nodes.
    pub fn jacobian_penalty(&mut self, map: Var) -> Result<Var> {
        let mt = self.tensor_ref(map)?;
        if mt.channels() != 3 || mt.dims().iter().any(|&d| d < 3) {
            return Err(Error::shape(format!("jacobian penalty needs a 3-channel map >= 3^3, got {}", shape_of(mt))));
        }
        let r = kernels::jacobian_penalty(mt.data(), mt.dims());
        let rg = self.needs(map);
        Ok(self.push(Value::Scalar(r), Op::JacobianPenalty { map }, rg))
    }

    /// Penalty on `outer ∘ inner`.
    pub fn gradicon_regularizer(&mut self, outer: Var, inner: Var) -> Result<Var> {
        let composed = self.sample(outer, inner)?;
        self.jacobian_penalty(composed)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.tensor_ref(x)?.data().iter().map(|&v| v as f64).sum();
        let rg = self.needs(x);
        Ok(self.push(Value::Scalar(s), Op::Sum { x }, rg))
    }

    /// `sum(x^2) / 2`.
    pub fn half_sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = 0.5 * self.tensor_ref(x)?.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
        let rg = self.needs(x);
        Ok(self.push(Value::Scalar(s), Op::HalfSumSquares { x }, rg))
    }

    /// Weighted sum of scalar nodes, accumulated left to right.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            match self.nodes[v.0].value {
                Value::Scalar(s) => total += w * s,
                Value::Tensor(_) => return Err(Error::shape("combine expects scalar nodes")),
            }
        }
        let rg = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(Value::Scalar(total), Op::Combine { terms: terms.to_vec() }, rg))
    }

    /// Propagates adjoints from `root` (seed 1). The tape can be swept only
    /// once.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        self.backward_seeded(root, 1.0)
    }

    pub fn backward_seeded(&mut self, root: Var, seed: f64) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        let mut grads: Vec<Option<Value>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(match &self.nodes[root.0].value {
            Value::Scalar(_) => Value::Scalar(seed),
            Value::Tensor(t) => {
                Value::Tensor(Tensor::from_raw(t.channels(), t.dims(), vec![seed as f32; t.data().len()]))
            }
        });
        let mut params = Vec::new();
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Param(id) => {
                    if let Value::Tensor(t) = &g {
                        params.push((*id, t.data().to_vec()));
                    }
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Input => {
                    grads[idx] = Some(g);
                    continue;
                }
                _ => {}
            }
            for (target, contribution) in self.node_vjp(node, &g) {
                if self.nodes[target.0].requires_grad {
                    accumulate(&mut grads[target.0], contribution);
                }
            }
        }
        params.reverse();
        Ok(Gradients { grads, params })
    }

    fn node_vjp(&self, node: &Node, g: &Value) -> Vec<(Var, Value)> {
        let gt = || match g {
            Value::Tensor(t) => t,
            Value::Scalar(_) => unreachable!("tensor op with scalar adjoint"),
        };
        let gs = || match g {
            Value::Scalar(s) => *s,
            Value::Tensor(_) => unreachable!("scalar op with tensor adjoint"),
        };
        let tv = |v: Var| self.value(v);
        let wrap = |v: Var, like: &Tensor, data: Vec<f32>| {
            (v, Value::Tensor(Tensor::from_raw(like.channels(), like.dims(), data)))
        };
        let mut out = Vec::new();
        match &node.op {
            Op::Param(_) | Op::Input | Op::Constant => {}
            Op::Conv3d { x, w, b } => {
                let (xt, g) = (tv(*x), gt());
                let c_out = g.channels();
                if self.needs(*x) {
                    let gx = kernels::conv3d_backward_input(g.data(), c_out, g.dims(), tv(*w).data(), xt.channels());
                    out.push(wrap(*x, xt, gx));
                }
                if self.needs(*w) || self.needs(*b) {
                    let (gw, gb) = kernels::conv3d_backward_params(g.data(), c_out, g.dims(), xt.data(), xt.channels());
                    out.push(wrap(*w, tv(*w), gw));
                    out.push(wrap(*b, tv(*b), gb));
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xt = tv(*x);
                let data =
                    xt.data().iter().zip(gt().data()).map(|(&v, &g)| if v > 0.0 { g } else { slope * g }).collect();
                out.push(wrap(*x, xt, data));
            }
            Op::AvgPool { x } => {
                let xt = tv(*x);
                out.push(wrap(*x, xt, kernels::avg_pool_adjoint(gt().data(), xt.channels(), xt.dims())));
            }
            Op::Resample { x } => {
                let (xt, g) = (tv(*x), gt());
                out.push(wrap(*x, xt, kernels::resample_adjoint(g.data(), xt.channels(), xt.dims(), g.dims())));
            }
            Op::Concat { parts } => {
                let g = gt();
                let n = g.voxels();
                let mut c0 = 0;
                for &p in parts {
                    let pt = tv(p);
                    let c1 = c0 + pt.channels();
                    out.push(wrap(p, pt, g.data()[c0 * n..c1 * n].to_vec()));
                    c0 = c1;
                }
            }
            Op::Add { a, b } => {
                let g = gt();
                out.push((*a, Value::Tensor(g.clone())));
                out.push((*b, Value::Tensor(g.clone())));
            }
            Op::Scale { x, s } => {
                let g = gt();
                out.push(wrap(*x, g, g.data().iter().map(|v| v * s).collect()));
            }
            Op::Sample { field, map } => {
                let (ft, mt, g) = (tv(*field), tv(*map), gt());
                let (gf, gm) = kernels::sample_field_backward(
                    ft.data(),
                    ft.channels(),
                    ft.dims(),
                    mt.data(),
                    mt.dims(),
                    g.data(),
                    self.needs(*field),
                    self.needs(*map),
                );
                if let Some(gf) = gf {
                    out.push(wrap(*field, ft, gf));
                }
                if let Some(gm) = gm {
                    out.push(wrap(*map, mt, gm));
                }
            }
            Op::Lncc { a, b, radius, eps } => {
                let (at, bt) = (tv(*a), tv(*b));
                let (ga, gb) = kernels::lncc_backward(at.data(), bt.data(), at.dims(), *radius, *eps, gs());
                out.push(wrap(*a, at, ga));
                out.push(wrap(*b, bt, gb));
            }
            Op::JacobianPenalty { map } => {
                let mt = tv(*map);
                out.push(wrap(*map, mt, kernels::jacobian_penalty_backward(mt.data(), mt.dims(), gs())));
            }
            Op::Sum { x } => {
                let xt = tv(*x);
                out.push(wrap(*x, xt, vec![gs() as f32; xt.data().len()]));
            }
            Op::HalfSumSquares { x } => {
                let xt = tv(*x);
                let s = gs();
                out.push(wrap(*x, xt, xt.data().iter().map(|&v| (s * v as f64) as f32).collect()));
            }
            Op::Combine { terms } => {
                let s = gs();
                for &(v, w) in terms {
                    out.push((v, Value::Scalar(s * w)));
                }
            }
        }
        out
    }
}

fn accumulate(slot: &mut Option<Value>, add: Value) {
    match (slot.as_mut(), add) {
        (None, add) => *slot = Some(add),
        (Some(Value::Scalar(s)), Value::Scalar(a)) => *s += a,
        (Some(Value::Tensor(t)), Value::Tensor(a)) => {
            for (x, y) in t.data_mut().iter_mut().zip(a.data()) {
                *x += y;
            }
        }
        _ => unreachable!("adjoint kind mismatch"),
    }
}
