//! ViT-style backbone with frozen base weights and a trainable adapter in
//! every block.

use crate::adapter::{adapter_forward, AdapterParams};
use crate::autodiff::{Tape, Var};
use crate::config::BackboneConfig;
use crate::error::{Error, Result};
use crate::layers::{mha, Activation, Attention, LayerNorm, Linear, Mlp};
use crate::params::{Bound, Init, ParamGroup, ParamId, Registry};
use crate::tensor::Scalar;

const LN_EPS: f64 = 1e-6;
const INIT: Init = Init::Normal(0.02);

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub adapter: AdapterParams,
}

impl BlockParams {
    pub fn declare(reg: &mut Registry, name: &str, cfg: &BackboneConfig) -> Self {
        let d = cfg.embed_dim;
        let g = ParamGroup::Backbone;
        Self {
            ln1: LayerNorm::declare(reg, &format!("{name}.ln1"), d, LN_EPS, g),
            attn: Attention::declare(reg, &format!("{name}.attn"), d, cfg.heads, INIT, g),
            ln2: LayerNorm::declare(reg, &format!("{name}.ln2"), d, LN_EPS, g),
            mlp: Mlp::declare(
                reg,
                &format!("{name}.mlp"),
                d,
                cfg.mlp_hidden(),
                Activation::Gelu,
                INIT,
                g,
            ),
            adapter: AdapterParams::declare(reg, &format!("{name}.adapter"), &cfg.adapter),
        }
    }
}

/// Pre-LN transformer block: `z' = MHA(LN(z)) + z`, `z = MLP(LN(z')) + z'`.
pub fn transformer_block<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    block: &BlockParams,
    z: Var,
) -> Result<Var> {
    let zp = attention_half(tape, p, block, z)?;
    let h = block.ln2.forward(tape, p, zp)?;
    let m = block.mlp.forward(tape, p, h)?;
    tape.add(m, zp)
}

/// The block with the adapter beside the MLP, both reading the same
/// normalized input: `z = MLP(LN(z')) + s·Adapter(LN(z')) + z'`.
pub fn adapted_block<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    block: &BlockParams,
    z: Var,
    scale: f64,
    grid: usize,
) -> Result<Var> {
    let zp = attention_half(tape, p, block, z)?;
    let h = block.ln2.forward(tape, p, zp)?;
    let m = block.mlp.forward(tape, p, h)?;
    let a = adapter_forward(tape, p, &block.adapter, h, grid)?;
    let a = tape.scale(a, scale);
    let m = tape.add(m, a)?;
    tape.add(m, zp)
}

fn attention_half<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    block: &BlockParams,
    z: Var,
) -> Result<Var> {
    let n = block.ln1.forward(tape, p, z)?;
    let a = mha(tape, p, &block.attn, n)?;
    tape.add(a, z)
}

/// Output of [`Backbone::forward`].
pub struct BackboneOutput {
    /// `[B, D]`
    pub class_tokens: Var,
    /// `[B, g, g, D]`, row-major patch order.
    pub patch_maps: Var,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub patch_proj: Linear,
    pub class_token: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<BlockParams>,
    pub final_norm: Option<LayerNorm>,
}

impl Backbone {
    pub fn declare(reg: &mut Registry, cfg: &BackboneConfig) -> Self {
        let d = cfg.embed_dim;
        let g = ParamGroup::Backbone;
        let patch_dim = 3 * cfg.patch_size * cfg.patch_size;
        Self {
            cfg: cfg.clone(),
            patch_proj: Linear::declare(reg, "backbone.patch_embed", patch_dim, d, INIT, g),
            class_token: reg.declare("backbone.class_token", &[d], INIT, g),
            pos_embed: reg.declare("backbone.pos_embed", &[cfg.num_patches() + 1, d], INIT, g),
            blocks: (0..cfg.depth)
                .map(|i| BlockParams::declare(reg, &format!("backbone.blocks.{i}"), cfg))
                .collect(),
            final_norm: cfg
                .final_norm
                .then(|| LayerNorm::declare(reg, "backbone.norm", d, LN_EPS, g)),
        }
    }

    /// Splits `[B, 3, H, W]` (or `[3, H, W]`) images into patches, projects
    /// them, prepends the class token and adds positional embeddings.
    /// Returns `[B, N+1, D]`.
    pub fn patch_embed<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, images: Var) -> Result<Var> {
        let shape = tape.shape(images).to_vec();
        let (b, c, h, w) = match *shape.as_slice() {
            [c, h, w] => (1, c, h, w),
            [b, c, h, w] => (b, c, h, w),
            _ => return Err(Error::shape("patch_embed", format!("images {shape:?}"))),
        };
        let s = self.cfg.image_size;
        if c != 3 {
            return Err(Error::shape("patch_embed", format!("{c} channels, expected 3")));
        }
        if h != s || w != s {
            return Err(Error::BadImageSize {
                expected: s,
                height: h,
                width: w,
            });
        }
        let (ps, g, d) = (self.cfg.patch_size, self.cfg.grid(), self.cfg.embed_dim);
        let x = tape.reshape(images, &[b, 3, g, ps, g, ps])?;
        let x = tape.permute(x, &[0, 2, 4, 1, 3, 5])?;
        let x = tape.reshape(x, &[b, g * g, 3 * ps * ps])?;
        let patches = self.patch_proj.forward(tape, p, x)?;

        let cls = tape.reshape(p.var(self.class_token), &[1, 1, d])?;
        let cls = tape.concat(&vec![cls; b], 0)?;
        let tokens = tape.concat(&[cls, patches], 1)?;
        tape.add(tokens, p.var(self.pos_embed))
    }

    /// Runs all adapted blocks and splits the output into class tokens
    /// and the patch feature map. Images never interact here.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        images: Var,
    ) -> Result<BackboneOutput> {
        let mut z = self.patch_embed(tape, p, images)?;
        let g = self.cfg.grid();
        for block in &self.blocks {
            z = adapted_block(tape, p, block, z, self.cfg.adapter_scale, g)?;
        }
        if let Some(norm) = &self.final_norm {
            z = norm.forward(tape, p, z)?;
        }
        let shape = tape.shape(z).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let cls = tape.slice(z, 1, 0, 1)?;
        let cls = tape.reshape(cls, &[b, d])?;
        let patches = tape.slice(z, 1, 1, t)?;
        let maps = tape.reshape(patches, &[b, g, g, d])?;
        Ok(BackboneOutput {
            class_tokens: cls,
            patch_maps: maps,
        })
    }
}
