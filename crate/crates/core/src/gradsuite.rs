//! Named finite-difference checks for every differentiable op and the
//! model's composite blocks, all in 64-bit on inputs with extents ≤ 8.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapter::{adapter_forward, AdapterParams};
use crate::autodiff::{Tape, Var};
use crate::backbone::{adapted_block, BlockParams};
use crate::config::{AdapterConfig, BackboneConfig, CricaConfig};
use crate::encoder::CrossImageEncoder;
use crate::error::Result;
use crate::gradcheck::check_with;
use crate::layers::{mha, Attention};
use crate::metric::{ms_loss, ms_mine, MsHyper};
use crate::params::{Bound, Init, ParamGroup, ParamId, ParamStore, Registry};
use crate::spm::{gem, spm_aggregate};
use crate::tensor::Tensor;

/// Failure threshold on the max relative error.
pub const TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;

type Runner = fn(bool) -> Result<f64>;

#[derive(Clone, Copy)]
pub struct Case {
    pub name: &'static str,
    /// Group used for `--module` filtering.
    pub module: &'static str,
    run: Runner,
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub module: &'static str,
    pub max_rel_err: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// `Σ w ⊙ y` with fixed random weights, so every output element matters.
fn weighted(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(rand_tensor(tape.shape(y), -1.0, 1.0, seed ^ 0x5eed));
    let p = tape.mul(y, w)?;
    tape.sum_all(p)
}

fn unary(negate: bool, shape: &[usize], lo: f64, hi: f64, op: fn(&mut Tape<f64>, Var) -> Result<Var>) -> Result<f64> {
    let x = rand_tensor(shape, lo, hi, 1);
    check_with(
        |t, v| {
            let y = op(t, v[0])?;
            weighted(t, y, 2)
        },
        &[x],
        EPS,
        negate,
    )
}

fn binary(negate: bool, a: &[usize], b: &[usize], op: fn(&mut Tape<f64>, Var, Var) -> Result<Var>) -> Result<f64> {
    let x = rand_tensor(a, -1.0, 1.0, 3);
    let y = rand_tensor(b, -1.0, 1.0, 4);
    check_with(
        |t, v| {
            let z = op(t, v[0], v[1])?;
            weighted(t, z, 5)
        },
        &[x, y],
        EPS,
        negate,
    )
}

/// Overwrites every parameter with N(0, std)-like uniform noise so no path
/// is trivially inert.
fn randomized(reg: Registry, seed: u64, scale: f64) -> ParamStore<f64> {
    let mut store: ParamStore<f64> = reg.materialize(seed);
    let values = store
        .values()
        .iter()
        .enumerate()
        .map(|(i, v)| rand_tensor(v.shape(), -scale, scale, seed.wrapping_add(i as u64 * 7919)))
        .collect();
    store.set_values(values).expect("same shapes");
    store
}

/// Key biases shift every score in a softmax row equally, so their true
/// gradient is exactly zero and a relative check only sees roundoff.
fn structurally_zero(name: &str) -> bool {
    name.ends_with(".k.bias")
}

/// Checks `f` w.r.t. `x` and every parameter of `store` except those with
/// a structurally zero gradient.
fn with_params(
    negate: bool,
    store: &ParamStore<f64>,
    x: Tensor<f64>,
    f: impl Fn(&mut Tape<f64>, &Bound, Var) -> Result<Var>,
) -> Result<f64> {
    let ids: Vec<ParamId> = store
        .ids()
        .filter(|id| !structurally_zero(&store.decls()[id.index()].name))
        .collect();
    let mut inputs = vec![x];
    inputs.extend(ids.iter().map(|&id| store.value(id).clone()));
    check_with(
        |t, v| {
            let overrides: Vec<(ParamId, Var)> = ids.iter().copied().zip(v[1..].iter().copied()).collect();
            let bound = store.bind_with(t, &overrides);
            let y = f(t, &bound, v[0])?;
            weighted(t, y, 11)
        },
        &inputs,
        EPS,
        negate,
    )
}

fn tiny_adapter() -> AdapterConfig {
    AdapterConfig {
        embed_dim: 8,
        bottleneck_ratio: 0.5,
        reduce_channels: 2,
        path_out_1x1: 2,
        path_out_3x3: 1,
        path_out_5x5: 1,
    }
}

fn case_mha(negate: bool) -> Result<f64> {
    let mut reg = Registry::new();
    let attn = Attention::declare(&mut reg, "attn", 8, 2, Init::Normal(0.3), ParamGroup::Encoder);
    let store = randomized(reg, 21, 0.5);
    with_params(negate, &store, rand_tensor(&[2, 5, 8], -1.0, 1.0, 22), |t, p, x| mha(t, p, &attn, x))
}

fn case_adapter(negate: bool) -> Result<f64> {
    let mut reg = Registry::new();
    let params = AdapterParams::declare(&mut reg, "a", &tiny_adapter());
    let store = randomized(reg, 31, 0.5);
    with_params(negate, &store, rand_tensor(&[2, 10, 8], -1.0, 1.0, 32), |t, p, x| {
        adapter_forward(t, p, &params, x, 3)
    })
}

fn case_adapted_block(negate: bool) -> Result<f64> {
    let cfg = BackboneConfig {
        image_size: 12,
        patch_size: 4,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2.0,
        adapter: tiny_adapter(),
        adapter_scale: 0.2,
        final_norm: false,
    };
    let mut reg = Registry::new();
    let block = BlockParams::declare(&mut reg, "b", &cfg);
    let store = randomized(reg, 41, 0.4);
    with_params(negate, &store, rand_tensor(&[1, 10, 8], -1.0, 1.0, 42), |t, p, x| {
        adapted_block(t, p, &block, x, cfg.adapter_scale, 3)
    })
}

fn case_gem(negate: bool) -> Result<f64> {
    let x = rand_tensor(&[6, 4], 0.1, 2.0, 51);
    let p = Tensor::scalar(2.7);
    check_with(
        |t, v| {
            let y = gem(t, v[0], v[1])?;
            weighted(t, y, 52)
        },
        &[x, p],
        EPS,
        negate,
    )
}

fn case_spm(negate: bool) -> Result<f64> {
    let cls = rand_tensor(&[2, 3], -1.0, 1.0, 61);
    let maps = rand_tensor(&[2, 4, 4, 3], 0.1, 2.0, 62);
    let p = Tensor::scalar(3.0);
    check_with(
        |t, v| {
            let y = spm_aggregate(t, v[0], v[1], v[2])?;
            weighted(t, y, 63)
        },
        &[cls, maps, p],
        EPS,
        negate,
    )
}

fn case_encoder(negate: bool) -> Result<f64> {
    let cfg = CricaConfig {
        layers: 2,
        embed_dim: 4,
        heads: 2,
        mlp_hidden: 8,
    };
    let mut reg = Registry::new();
    let enc = CrossImageEncoder::declare(&mut reg, &cfg);
    let store = randomized(reg, 71, 0.5);
    with_params(negate, &store, rand_tensor(&[3, 14, 4], -1.0, 1.0, 72), |t, p, x| {
        enc.encode(t, p, x)
    })
}

fn case_ms_loss(negate: bool) -> Result<f64> {
    let labels = [0, 0, 0, 1, 1, 2, 2, 2];
    // a narrow band keeps every mined pair's weight e^{β(s−max)} well above
    // the finite-difference noise floor
    let s = rand_tensor(&[8, 8], 0.3, 0.55, 81);
    let hyper = MsHyper::default();
    let masks = ms_mine(&s, &labels, hyper.margin)?;
    assert!(!masks.is_empty());
    check_with(|t, v| ms_loss(t, v[0], &hyper, &masks), &[s], EPS, negate)
}

fn case_conv(negate: bool, k: usize, bias: bool) -> Result<f64> {
    let x = rand_tensor(&[2, 3, 5, 4], -1.0, 1.0, 91);
    let w = rand_tensor(&[2, 3, k, k], -1.0, 1.0, 92);
    let b = rand_tensor(&[2], -1.0, 1.0, 93);
    check_with(
        |t, v| {
            let y = t.conv2d(v[0], v[1], bias.then(|| v[2]))?;
            weighted(t, y, 94)
        },
        &[x, w, b],
        EPS,
        negate,
    )
}

fn case_layer_norm(negate: bool) -> Result<f64> {
    let x = rand_tensor(&[3, 4, 6], -2.0, 2.0, 101);
    let g = rand_tensor(&[6], 0.5, 1.5, 102);
    let b = rand_tensor(&[6], -0.5, 0.5, 103);
    check_with(
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted(t, y, 104)
        },
        &[x, g, b],
        EPS,
        negate,
    )
}

fn case_pow(negate: bool) -> Result<f64> {
    let x = rand_tensor(&[3, 5], 0.2, 2.0, 111);
    let p = Tensor::scalar(1.7);
    check_with(
        |t, v| {
            let y = t.pow(v[0], v[1])?;
            weighted(t, y, 112)
        },
        &[x, p],
        EPS,
        negate,
    )
}

fn case_concat(negate: bool) -> Result<f64> {
    binary(negate, &[2, 3, 4], &[2, 5, 4], |t, a, b| t.concat(&[a, b, a], 1))
}

/// Every registered check, ops first, then composites.
pub fn cases() -> Vec<Case> {
    macro_rules! case {
        ($name:expr, $module:expr, $f:expr) => {
            Case {
                name: $name,
                module: $module,
                run: $f,
            }
        };
    }
    vec![
        case!("add", "ops", |n| binary(n, &[3, 4], &[3, 4], |t, a, b| t.add(a, b))),
        case!("add_broadcast", "ops", |n| binary(n, &[2, 3, 4], &[4], |t, a, b| t.add(a, b))),
        case!("sub", "ops", |n| binary(n, &[3, 4], &[4], |t, a, b| t.sub(a, b))),
        case!("mul", "ops", |n| binary(n, &[2, 3, 4], &[3, 4], |t, a, b| t.mul(a, b))),
        case!("mul_scalar_var", "ops", |n| binary(n, &[3, 4], &[], |t, a, b| t.mul(a, b))),
        case!("scale", "ops", |n| unary(n, &[4, 5], -1.0, 1.0, |t, a| Ok(t.scale(a, -1.5)))),
        case!("add_scalar", "ops", |n| unary(n, &[4, 5], -1.0, 1.0, |t, a| Ok(t.add_scalar(a, 0.3)))),
        case!("matmul", "ops", |n| binary(n, &[4, 3], &[3, 2], |t, a, b| t.matmul(a, b))),
        case!("matmul_batched", "ops", |n| binary(n, &[2, 4, 3], &[2, 3, 5], |t, a, b| t.matmul(a, b))),
        case!("matmul_broadcast", "ops", |n| binary(n, &[2, 4, 3], &[3, 5], |t, a, b| t.matmul(a, b))),
        case!("permute", "ops", |n| unary(n, &[2, 3, 4], -1.0, 1.0, |t, a| t.permute(a, &[2, 0, 1]))),
        case!("reshape", "ops", |n| unary(n, &[2, 3, 4], -1.0, 1.0, |t, a| t.reshape(a, &[6, 4]))),
        case!("concat", "ops", case_concat),
        case!("slice", "ops", |n| unary(n, &[3, 6, 2], -1.0, 1.0, |t, a| t.slice(a, 1, 2, 5))),
        case!("softmax", "ops", |n| unary(n, &[3, 5], -2.0, 2.0, |t, a| t.softmax(a, 1))),
        case!("softmax_axis0", "ops", |n| unary(n, &[4, 3], -2.0, 2.0, |t, a| t.softmax(a, 0))),
        case!("layer_norm", "ops", case_layer_norm),
        case!("conv2d_1x1", "ops", |n| case_conv(n, 1, true)),
        case!("conv2d_3x3", "ops", |n| case_conv(n, 3, true)),
        case!("conv2d_5x5_nobias", "ops", |n| case_conv(n, 5, false)),
        case!("relu", "ops", |n| unary(n, &[4, 5], -1.0, 1.0, |t, a| Ok(t.relu(a)))),
        case!("gelu", "ops", |n| unary(n, &[4, 5], -3.0, 3.0, |t, a| Ok(t.gelu(a)))),
        case!("exp", "ops", |n| unary(n, &[4, 5], -2.0, 2.0, |t, a| Ok(t.exp(a)))),
        case!("ln", "ops", |n| unary(n, &[4, 5], 0.2, 3.0, |t, a| Ok(t.ln(a)))),
        case!("recip", "ops", |n| unary(n, &[4, 5], 0.3, 3.0, |t, a| Ok(t.recip(a)))),
        case!("clamp_min", "ops", |n| unary(n, &[4, 5], -1.0, 1.0, |t, a| Ok(t.clamp_min(a, 0.1)))),
        case!("pow", "ops", case_pow),
        case!("powf", "ops", |n| unary(n, &[4, 5], 0.2, 2.0, |t, a| t.powf(a, 0.4))),
        case!("sum_axis", "ops", |n| unary(n, &[3, 4, 2], -1.0, 1.0, |t, a| t.sum_axis(a, 1))),
        case!("mean_axis", "ops", |n| unary(n, &[3, 4, 2], -1.0, 1.0, |t, a| t.mean_axis(a, 2))),
        case!("l2_normalize", "ops", |n| unary(n, &[3, 7], -1.0, 1.0, |t, a| t.l2_normalize(a, 1, 1e-12))),
        case!("attention", "attention", case_mha),
        case!("adapter", "adapter", case_adapter),
        case!("adapted_block", "backbone", case_adapted_block),
        case!("gem", "gem", case_gem),
        case!("spm_gem", "gem", case_spm),
        case!("crica_encoder", "encoder", case_encoder),
        case!("ms_loss", "loss", case_ms_loss),
    ]
}

/// Module names accepted by [`run_suite`] besides `all` and case names.
pub fn modules() -> Vec<&'static str> {
    let mut m: Vec<&'static str> = cases().iter().map(|c| c.module).collect();
    m.dedup();
    m
}

/// Runs cases whose module or name equals `filter` (`all` runs every
/// case). With `inject_sign_bug` the analytic gradients are negated, which
/// must make checks fail.
pub fn run_suite(filter: &str, inject_sign_bug: bool) -> Result<Vec<CaseResult>> {
    cases()
        .into_iter()
        .filter(|c| filter == "all" || c.module == filter || c.name == filter)
        .map(|c| {
            Ok(CaseResult {
                name: c.name,
                module: c.module,
                max_rel_err: (c.run)(inject_sign_bug)?,
            })
        })
        .collect()
}
