//! Parameterized building blocks shared by the backbone and the encoder.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamGroup, ParamId, Registry};
use crate::tensor::Scalar;

/// `y = x·W + b` with `W` stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn declare(
        reg: &mut Registry,
        name: &str,
        inputs: usize,
        outputs: usize,
        init: Init,
        group: ParamGroup,
    ) -> Self {
        Self {
            weight: reg.declare(format!("{name}.weight"), &[inputs, outputs], init, group),
            bias: reg.declare(format!("{name}.bias"), &[outputs], Init::Zeros, group),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.weight))?;
        tape.add(y, p.var(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn declare(reg: &mut Registry, name: &str, dim: usize, eps: f64, group: ParamGroup) -> Self {
        Self {
            gamma: reg.declare(format!("{name}.gamma"), &[dim], Init::Ones, group),
            beta: reg.declare(format!("{name}.beta"), &[dim], Init::Zeros, group),
            eps,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gamma), p.var(self.beta), self.eps)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

/// Two fully connected layers with an activation between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

impl Mlp {
    pub fn declare(
        reg: &mut Registry,
        name: &str,
        dim: usize,
        hidden: usize,
        act: Activation,
        init: Init,
        group: ParamGroup,
    ) -> Self {
        Self {
            fc1: Linear::declare(reg, &format!("{name}.fc1"), dim, hidden, init, group),
            fc2: Linear::declare(reg, &format!("{name}.fc2"), hidden, dim, init, group),
            act,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = match self.act {
            Activation::Gelu => tape.gelu(h),
            Activation::Relu => tape.relu(h),
        };
        self.fc2.forward(tape, p, h)
    }
}

/// Multi-head scaled dot-product attention projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn declare(
        reg: &mut Registry,
        name: &str,
        dim: usize,
        heads: usize,
        init: Init,
        group: ParamGroup,
    ) -> Self {
        let mut lin = |part: &str| Linear::declare(reg, &format!("{name}.{part}"), dim, dim, init, group);
        Self {
            q: lin("q"),
            k: lin("k"),
            v: lin("v"),
            o: lin("o"),
            heads,
        }
    }
}

/// Multi-head self-attention over `z`, shaped `[T, D]` or `[G, T, D]`
/// (`G` independent sequences of `T` tokens).
pub fn mha<T: Scalar>(tape: &mut Tape<T>, p: &Bound, attn: &Attention, z: Var) -> Result<Var> {
    let shape = tape.shape(z).to_vec();
    let (g, t, d) = match *shape.as_slice() {
        [t, d] => (1, t, d),
        [g, t, d] => (g, t, d),
        _ => return Err(Error::shape("mha", format!("input {shape:?}"))),
    };
    let h = attn.heads;
    if h == 0 || d % h != 0 {
        return Err(Error::HeadMismatch { dim: d, heads: h });
    }
    let dh = d / h;

    let heads_of = |tape: &mut Tape<T>, lin: &Linear, axes: &[usize], out: &[usize]| {
        let x = lin.forward(tape, p, z)?;
        let x = tape.reshape(x, &[g, t, h, dh])?;
        let x = tape.permute(x, axes)?;
        tape.reshape(x, out)
    };
    let q = heads_of(tape, &attn.q, &[0, 2, 1, 3], &[g * h, t, dh])?;
    let kt = heads_of(tape, &attn.k, &[0, 2, 3, 1], &[g * h, dh, t])?;
    let v = heads_of(tape, &attn.v, &[0, 2, 1, 3], &[g * h, t, dh])?;

    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let weights = tape.softmax(scores, 2)?;
    let ctx = tape.matmul(weights, v)?;
    let ctx = tape.reshape(ctx, &[g, h, t, dh])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &shape)?;
    attn.o.forward(tape, p, ctx)
}
