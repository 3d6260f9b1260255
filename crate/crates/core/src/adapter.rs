//! Multi-scale convolution adapter.
//!
//! ```text
//! tokens ─ down ─ ReLU ─┬─ 1×1 ─────────────┐
//!                       ├─ 1×1 ─ 3×3 ───────┼─ concat ─ (+) ─ up
//!                       ├─ 1×1 ─ 5×5 ───────┘            │
//!                       └────────────── skip ────────────┘
//! ```
//!
//! The convolutions run over the `g×g` grid of patch tokens. The class
//! token has no spatial neighborhood and only takes the skip path.

use crate::autodiff::{Tape, Var};
use crate::config::AdapterConfig;
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::{Bound, Init, ParamGroup, ParamId, Registry};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv {
    fn declare(reg: &mut Registry, name: &str, c_in: usize, c_out: usize, k: usize) -> Self {
        let fan_in = (c_in * k * k) as f64;
        Self {
            weight: reg.declare(
                format!("{name}.weight"),
                &[c_out, c_in, k, k],
                Init::Normal(fan_in.sqrt().recip()),
                ParamGroup::Adapter,
            ),
            bias: reg.declare(format!("{name}.bias"), &[c_out], Init::Zeros, ParamGroup::Adapter),
        }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.weight), Some(p.var(self.bias)))
    }
}

#[derive(Clone, Debug)]
pub struct AdapterParams {
    pub down: Linear,
    pub p1: Conv,
    pub p3a: Conv,
    pub p3b: Conv,
    pub p5a: Conv,
    pub p5b: Conv,
    pub up: Linear,
}

impl AdapterParams {
    pub fn declare(reg: &mut Registry, name: &str, cfg: &AdapterConfig) -> Self {
        let d = cfg.embed_dim;
        let hidden = cfg.hidden();
        let r = cfg.reduce_channels;
        Self {
            down: Linear::declare(
                reg,
                &format!("{name}.down"),
                d,
                hidden,
                Init::Normal(0.02),
                ParamGroup::Adapter,
            ),
            p1: Conv::declare(reg, &format!("{name}.conv1x1"), hidden, cfg.path_out_1x1, 1),
            p3a: Conv::declare(reg, &format!("{name}.conv3x3_reduce"), hidden, r, 1),
            p3b: Conv::declare(reg, &format!("{name}.conv3x3"), r, cfg.path_out_3x3, 3),
            p5a: Conv::declare(reg, &format!("{name}.conv5x5_reduce"), hidden, r, 1),
            p5b: Conv::declare(reg, &format!("{name}.conv5x5"), r, cfg.path_out_5x5, 5),
            up: Linear::declare(
                reg,
                &format!("{name}.up"),
                hidden,
                d,
                Init::Zeros,
                ParamGroup::Adapter,
            ),
        }
    }
}

/// Exact parameter count of one adapter, biases included.
pub fn adapter_param_count(cfg: &AdapterConfig) -> usize {
    let mut reg = Registry::new();
    AdapterParams::declare(&mut reg, "adapter", cfg);
    reg.total_count()
}

/// Runs the adapter over `[N+1, D]` or `[B, N+1, D]` tokens whose patch
/// part forms a `grid × grid` map in row-major order.
pub fn adapter_forward<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    params: &AdapterParams,
    tokens: Var,
    grid: usize,
) -> Result<Var> {
    let shape = tape.shape(tokens).to_vec();
    let (b, t) = match *shape.as_slice() {
        [t, _] => (1, t),
        [b, t, _] => (b, t),
        _ => return Err(Error::shape("adapter", format!("tokens {shape:?}"))),
    };
    if t != grid * grid + 1 {
        return Err(Error::GridMismatch { tokens: t, grid });
    }

    let x = params.down.forward(tape, p, tokens)?;
    let x = tape.relu(x);
    let hidden = *tape.shape(x).last().expect("rank >= 2");
    let x = tape.reshape(x, &[b, t, hidden])?;

    let patches = tape.slice(x, 1, 1, t)?;
    let patches = tape.reshape(patches, &[b, grid, grid, hidden])?;
    let map = tape.permute(patches, &[0, 3, 1, 2])?;

    let y1 = params.p1.forward(tape, p, map)?;
    let y3 = params.p3a.forward(tape, p, map)?;
    let y3 = params.p3b.forward(tape, p, y3)?;
    let y5 = params.p5a.forward(tape, p, map)?;
    let y5 = params.p5b.forward(tape, p, y5)?;
    let conv = tape.concat(&[y1, y3, y5], 1)?;
    let conv = tape.permute(conv, &[0, 2, 3, 1])?;
    let conv = tape.reshape(conv, &[b, grid * grid, hidden])?;

    let cls_pad = tape.constant(Tensor::zeros([b, 1, hidden]));
    let conv = tape.concat(&[cls_pad, conv], 1)?;
    let mixed = tape.add(conv, x)?;
    let out = params.up.forward(tape, p, mixed)?;
    tape.reshape(out, &shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> AdapterConfig {
        AdapterConfig {
            embed_dim: 16,
            bottleneck_ratio: 0.5,
            reduce_channels: 2,
            path_out_1x1: 4,
            path_out_3x3: 2,
            path_out_5x5: 2,
        }
    }

    #[test]
    fn count_matches_closed_form() {
        // down + 1x1 path + two reduce convs + 3x3 + 5x5 + up, weights and biases
        let (d, h, r) = (16, 8, 2);
        let expected = (d * h + h)
            + (h * 4 + 4)
            + 2 * (h * r + r)
            + (r * 9 * 2 + 2)
            + (r * 25 * 2 + 2)
            + (h * d + d);
        assert_eq!(adapter_param_count(&small_cfg()), expected);
    }

    #[test]
    fn full_scale_count_per_block() {
        assert_eq!(adapter_param_count(&AdapterConfig::full_scale()), 761_904);
    }

    #[test]
    fn projection_terms_scale_quadratically() {
        let c1 = AdapterConfig::full_scale();
        let mut c2 = c1.clone();
        c2.embed_dim *= 2;
        let proj = |c: &AdapterConfig| 2 * c.embed_dim * c.hidden();
        assert_eq!(proj(&c2), 4 * proj(&c1));
    }

    fn build(seed: u64) -> (AdapterParams, crate::params::ParamStore<f64>) {
        let mut reg = Registry::new();
        let params = AdapterParams::declare(&mut reg, "a", &small_cfg());
        (params, reg.materialize(seed))
    }

    #[test]
    fn zero_up_projection_is_inert() {
        let (params, store) = build(1);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::full([2, 5, 16], 0.3));
        let y = adapter_forward(&mut tape, &p, &params, x, 2).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.shape(y), &[2, 5, 16]);
    }

    #[test]
    fn skip_path_alone_when_convs_are_zero() {
        let (params, mut store) = build(2);
        for conv in [&params.p1, &params.p3a, &params.p3b, &params.p5a, &params.p5b] {
            store.value_mut(conv.weight).data_mut().fill(0.0);
        }
        // up = pseudo-identity: hidden unit j -> output j
        let up = store.value_mut(params.up.weight);
        for j in 0..8 {
            up.data_mut()[j * 16 + j] = 1.0;
        }
        let input: Vec<f64> = (0..5 * 16).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.1).collect();
        let input = Tensor::new([5, 16], input).unwrap();

        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let y = adapter_forward(&mut tape, &p, &params, x, 2).unwrap();

        let mut reference = Tape::new();
        let rp = store.bind(&mut reference, false);
        let rx = reference.constant(input);
        let h = params.down.forward(&mut reference, &rp, rx).unwrap();
        let h = reference.relu(h);
        let want = params.up.forward(&mut reference, &rp, h).unwrap();
        assert!(tape.value(y).max_abs_diff(reference.value(want)) < 1e-15);
    }

    #[test]
    fn grid_mismatch_is_reported() {
        let (params, store) = build(3);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros([6, 16]));
        assert!(matches!(
            adapter_forward(&mut tape, &p, &params, x, 2),
            Err(Error::GridMismatch { tokens: 6, grid: 2 })
        ));
    }
}
