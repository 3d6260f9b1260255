//! Cross-image encoder.
//!
//! For each of the 14 regions, the regional features of all `B` images in
//! the batch form one length-`B` sequence. A single stack of post-LN
//! transformer layers (weights shared across regions) runs over each
//! sequence, so every image's region `i` attends to region `i` of its
//! batch neighbours. There is no positional encoding over the batch axis;
//! the encoder is permutation-equivariant in the images.

use crate::autodiff::{Tape, Var};
use crate::config::CricaConfig;
use crate::error::{Error, Result};
use crate::layers::{mha, Activation, Attention, LayerNorm, Mlp};
use crate::params::{Bound, Init, ParamGroup, Registry};
use crate::spm::NUM_REGIONS;
use crate::tensor::{Scalar, Tensor};

const LN_EPS: f64 = 1e-5;
/// Floor on the descriptor norm during L2 normalization.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: Attention,
    pub ln1: LayerNorm,
    pub mlp: Mlp,
    pub ln2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct CrossImageEncoder {
    pub cfg: CricaConfig,
    pub layers: Vec<EncoderLayer>,
}

impl CrossImageEncoder {
    pub fn declare(reg: &mut Registry, cfg: &CricaConfig) -> Self {
        let (d, g) = (cfg.embed_dim, ParamGroup::Encoder);
        let init = Init::Normal(0.02);
        let layers = (0..cfg.layers)
            .map(|i| {
                let name = format!("encoder.layers.{i}");
                EncoderLayer {
                    attn: Attention::declare(reg, &format!("{name}.attn"), d, cfg.heads, init, g),
                    ln1: LayerNorm::declare(reg, &format!("{name}.ln1"), d, LN_EPS, g),
                    mlp: Mlp::declare(
                        reg,
                        &format!("{name}.mlp"),
                        d,
                        cfg.mlp_hidden,
                        Activation::Relu,
                        init,
                        g,
                    ),
                    ln2: LayerNorm::declare(reg, &format!("{name}.ln2"), d, LN_EPS, g),
                }
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            layers,
        }
    }

    /// Encodes `[B, 14, D]` regional features; output has the same shape.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, feats: Var) -> Result<Var> {
        let seqs = tape.permute(feats, &[1, 0, 2])?;
        let out = self.encode_sequences(tape, p, seqs)?;
        tape.permute(out, &[1, 0, 2])
    }

    /// Runs the layers over `[S, B, D]`: `S` independent sequences.
    fn encode_sequences<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut z = x;
        for layer in &self.layers {
            let a = mha(tape, p, &layer.attn, z)?;
            let a = tape.add(a, z)?;
            z = layer.ln1.forward(tape, p, a)?;
            let m = layer.mlp.forward(tape, p, z)?;
            let m = tape.add(m, z)?;
            z = layer.ln2.forward(tape, p, m)?;
        }
        Ok(z)
    }

    /// Encodes 14 per-region sequences, each `[B, D]`, and returns the
    /// regrouped `[B, 14, D]` features.
    pub fn cross_image_encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        seqs: &[Var],
    ) -> Result<Var> {
        let first = tape.shape(*seqs.first().ok_or(Error::RaggedSequences)?).to_vec();
        if first.len() != 2 {
            return Err(Error::shape("cross_image_encode", format!("sequence {first:?}")));
        }
        let mut stacked = Vec::with_capacity(seqs.len());
        for &s in seqs {
            if tape.shape(s) != first.as_slice() {
                return Err(Error::RaggedSequences);
            }
            stacked.push(tape.reshape(s, &[1, first[0], first[1]])?);
        }
        let x = tape.concat(&stacked, 0)?;
        let out = self.encode_sequences(tape, p, x)?;
        tape.permute(out, &[1, 0, 2])
    }
}

/// Splits `[B, 14, D]` into the 14 region sequences `[B, D]`.
pub fn regional_sequences<T: Scalar>(feats: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let (b, r, d) = match feats.shape() {
        &[b, r, d] => (b, r, d),
        s => return Err(Error::shape("regional_sequences", format!("{s:?}"))),
    };
    let x = feats.data();
    (0..r)
        .map(|ri| {
            let data = (0..b)
                .flat_map(|bi| x[(bi * r + ri) * d..(bi * r + ri + 1) * d].iter().copied())
                .collect();
            Tensor::new([b, d], data)
        })
        .collect()
}

/// Inverse of [`regional_sequences`].
pub fn regroup<T: Scalar>(seqs: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = seqs.first().ok_or(Error::RaggedSequences)?;
    let (b, d) = match first.shape() {
        &[b, d] => (b, d),
        s => return Err(Error::shape("regroup", format!("{s:?}"))),
    };
    if seqs.iter().any(|s| s.shape() != first.shape()) {
        return Err(Error::RaggedSequences);
    }
    let r = seqs.len();
    let mut data = vec![T::zero(); b * r * d];
    for (ri, s) in seqs.iter().enumerate() {
        for bi in 0..b {
            data[(bi * r + ri) * d..(bi * r + ri + 1) * d]
                .copy_from_slice(&s.data()[bi * d..(bi + 1) * d]);
        }
    }
    Tensor::new([b, r, d], data)
}

/// Flattens `[B, 14, D]` region-major per image and L2-normalizes each row.
pub fn flatten_normalize<T: Scalar>(tape: &mut Tape<T>, feats: Var) -> Result<Var> {
    let shape = tape.shape(feats).to_vec();
    let (b, r, d) = match shape.as_slice() {
        &[b, r, d] => (b, r, d),
        _ => return Err(Error::shape("flatten_normalize", format!("{shape:?}"))),
    };
    let flat = tape.reshape(feats, &[b, r * d])?;
    tape.l2_normalize(flat, 1, NORM_EPS)
}

/// One image's final place representation: unit-norm, `14·D` long.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalDescriptor {
    pub image_id: String,
    pub vector: Vec<f32>,
}

/// Flattens `[14, D]` region-major and L2-normalizes.
pub fn finalize_descriptor<T: Scalar>(
    feats: &Tensor<T>,
    image_id: impl Into<String>,
) -> Result<GlobalDescriptor> {
    if feats.rank() != 2 || feats.shape()[0] != NUM_REGIONS {
        return Err(Error::shape("finalize_descriptor", format!("{:?}", feats.shape())));
    }
    if !feats.is_finite() {
        return Err(Error::shape("finalize_descriptor", "non-finite features"));
    }
    let norm = feats
        .data()
        .iter()
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroVector);
    }
    let vector = feats
        .data()
        .iter()
        .map(|v| (v.as_f64() / norm.max(NORM_EPS)) as f32)
        .collect();
    Ok(GlobalDescriptor {
        image_id: image_id.into(),
        vector,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    fn feats(b: usize, d: usize, seed: u64) -> Tensor<f64> {
        let data = (0..b * NUM_REGIONS * d)
            .map(|i| ((i as u64 * 2654435761 + seed * 97) % 1009) as f64 / 500.0 - 1.0)
            .collect();
        Tensor::new([b, NUM_REGIONS, d], data).unwrap()
    }

    fn encoder(d: usize) -> (CrossImageEncoder, ParamStore<f64>) {
        let mut reg = Registry::new();
        let cfg = CricaConfig {
            layers: 2,
            embed_dim: d,
            heads: 2,
            mlp_hidden: 2 * d,
        };
        let enc = CrossImageEncoder::declare(&mut reg, &cfg);
        (enc, reg.materialize(9))
    }

    #[test]
    fn sequences_are_a_lossless_transpose() {
        let f = feats(2, 4, 1);
        let seqs = regional_sequences(&f).unwrap();
        assert_eq!(seqs.len(), NUM_REGIONS);
        assert_eq!(seqs[3].data()[..4], f.data()[3 * 4..4 * 4]);
        assert_eq!(seqs[3].data()[4..], f.data()[(NUM_REGIONS + 3) * 4..(NUM_REGIONS + 4) * 4]);
        assert_eq!(regroup(&seqs).unwrap(), f);

        let single = regional_sequences(&feats(1, 4, 2)).unwrap();
        assert!(single.iter().all(|s| s.shape() == [1, 4]));
    }

    #[test]
    fn sequence_entry_point_matches_batch_entry_point() {
        let (enc, store) = encoder(8);
        let f = feats(3, 8, 3);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(f.clone());
        let a = enc.encode(&mut tape, &p, x).unwrap();
        let seqs: Vec<Var> = regional_sequences(&f)
            .unwrap()
            .into_iter()
            .map(|s| tape.constant(s))
            .collect();
        let b = enc.cross_image_encode(&mut tape, &p, &seqs).unwrap();
        assert_eq!(tape.value(a), tape.value(b));

        let short = tape.constant(Tensor::zeros([2, 8]));
        let mut ragged = seqs.clone();
        ragged[5] = short;
        assert!(matches!(
            enc.cross_image_encode(&mut tape, &p, &ragged),
            Err(Error::RaggedSequences)
        ));
    }

    #[test]
    fn identical_images_get_identical_rows() {
        let (enc, store) = encoder(8);
        let one = feats(1, 8, 4);
        let two = Tensor::stack_rows(&[one.clone(), one]).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(two);
        let y = enc.encode(&mut tape, &p, x).unwrap();
        let v = tape.value(y).data();
        let n = NUM_REGIONS * 8;
        assert_eq!(v[..n], v[n..]);
    }

    #[test]
    fn finalize_examples() {
        let f = feats(1, 64, 5).reshaped([NUM_REGIONS, 64]).unwrap();
        let d = finalize_descriptor(&f, "img").unwrap();
        assert_eq!(d.vector.len(), 896);
        let norm: f64 = d.vector.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);

        let unit = Tensor::<f64>::new(
            [NUM_REGIONS, 1],
            (0..NUM_REGIONS).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        assert_eq!(finalize_descriptor(&unit, "u").unwrap().vector[0], 1.0);

        let zero = Tensor::<f64>::zeros([NUM_REGIONS, 4]);
        assert!(matches!(finalize_descriptor(&zero, "z"), Err(Error::ZeroVector)));
    }
}
