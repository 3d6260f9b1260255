//! Multi-similarity loss with online pair mining, and place-balanced
//! batch sampling.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Tolerance on row norms accepted by [`cosine_sim_matrix`].
pub const UNIT_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsHyper {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub margin: f64,
}

impl Default for MsHyper {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 50.0,
            lambda: 0.0,
            margin: 0.1,
        }
    }
}

impl MsHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::Config(format!(
                "alpha and beta must be positive, got {} and {}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// `S = D·Dᵀ` for unit rows.
pub fn cosine_sim_matrix<T: Scalar>(desc: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, d) = match desc.shape() {
        &[b, d] => (b, d),
        s => return Err(Error::shape("cosine_sim_matrix", format!("{s:?}"))),
    };
    let x = desc.data();
    for row in 0..b {
        let norm = x[row * d..(row + 1) * d]
            .iter()
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::NonUnitRows { row, norm });
        }
    }
    let mut s = vec![T::zero(); b * b];
    T::gemm(b, d, b, x, (d as isize, 1), x, (1, d as isize), false, &mut s);
    Tensor::new([b, b], s)
}

/// Similarity matrix on the tape; rows of `desc` are assumed unit-norm.
pub fn similarity<T: Scalar>(tape: &mut Tape<T>, desc: Var) -> Result<Var> {
    let t = tape.permute(desc, &[1, 0])?;
    tape.matmul(desc, t)
}

/// Mined pairs as dense `B×B` 0/1 masks.
#[derive(Clone, Debug, PartialEq)]
pub struct PairMasks {
    pub size: usize,
    pub pos: Vec<bool>,
    pub neg: Vec<bool>,
}

impl PairMasks {
    pub fn is_empty(&self) -> bool {
        !self.pos.iter().chain(&self.neg).any(|&m| m)
    }

    pub fn pos_count(&self) -> usize {
        self.pos.iter().filter(|&&m| m).count()
    }

    pub fn neg_count(&self) -> usize {
        self.neg.iter().filter(|&&m| m).count()
    }

    fn as_tensor<T: Scalar>(&self, mask: &[bool]) -> Tensor<T> {
        let data = mask
            .iter()
            .map(|&m| if m { T::one() } else { T::zero() })
            .collect();
        Tensor::new([self.size, self.size], data).expect("square mask")
    }
}

/// Online hard mining. For anchor `q`, a negative `n` survives when
/// `S_qn > min_p S_qp − margin` and a positive `p` when
/// `S_qp < max_n S_qn + margin`. Anchors without positives or without
/// negatives in the batch mine nothing.
pub fn ms_mine<T: Scalar>(s: &Tensor<T>, labels: &[usize], margin: f64) -> Result<PairMasks> {
    let b = labels.len();
    if s.shape() != [b, b] {
        return Err(Error::shape(
            "ms_mine",
            format!("similarities {:?} for {b} labels", s.shape()),
        ));
    }
    let sv = |i: usize, j: usize| s.data()[i * b + j].as_f64();
    let mut pos = vec![false; b * b];
    let mut neg = vec![false; b * b];
    for q in 0..b {
        let is_pos = |j: usize| j != q && labels[j] == labels[q];
        let is_neg = |j: usize| labels[j] != labels[q];
        let min_pos = (0..b).filter(|&j| is_pos(j)).map(|j| sv(q, j)).reduce(f64::min);
        let max_neg = (0..b).filter(|&j| is_neg(j)).map(|j| sv(q, j)).reduce(f64::max);
        let (Some(min_pos), Some(max_neg)) = (min_pos, max_neg) else {
            continue;
        };
        for j in 0..b {
            if is_neg(j) && sv(q, j) > min_pos - margin {
                neg[q * b + j] = true;
            }
            if is_pos(j) && sv(q, j) < max_neg + margin {
                pos[q * b + j] = true;
            }
        }
    }
    Ok(PairMasks { size: b, pos, neg })
}

/// Multi-similarity loss on the tape, averaged over all `B` anchors:
/// `(1/α)·ln(1 + Σ_p e^{−α(S_qp−λ)}) + (1/β)·ln(1 + Σ_n e^{β(S_qn−λ)})`.
pub fn ms_loss<T: Scalar>(tape: &mut Tape<T>, s: Var, hyper: &MsHyper, masks: &PairMasks) -> Result<Var> {
    let b = masks.size;
    if tape.shape(s) != [b, b] {
        return Err(Error::shape(
            "ms_loss",
            format!("similarities {:?} for masks of size {b}", tape.shape(s)),
        ));
    }
    let shifted = tape.add_scalar(s, -hyper.lambda);
    let term = |tape: &mut Tape<T>, coeff: f64, mask: &[bool]| -> Result<Var> {
        let e = tape.scale(shifted, coeff);
        let e = tape.exp(e);
        let m = tape.constant(masks.as_tensor(mask));
        let e = tape.mul(e, m)?;
        let sum = tape.sum_axis(e, 1)?;
        let l = tape.add_scalar(sum, 1.0);
        let l = tape.ln(l);
        Ok(tape.scale(l, coeff.abs().recip()))
    };
    let pos = term(tape, -hyper.alpha, &masks.pos)?;
    let neg = term(tape, hyper.beta, &masks.neg)?;
    let per_anchor = tape.add(pos, neg)?;
    let total = tape.sum_all(per_anchor)?;
    Ok(tape.scale(total, (b as f64).recip()))
}

/// Per-pair reference evaluation of [`ms_loss`] in 64-bit.
pub fn ms_loss_reference(s: &[f64], b: usize, hyper: &MsHyper, masks: &PairMasks) -> f64 {
    let mut total = 0.0;
    for q in 0..b {
        let mut sp = 0.0;
        let mut sn = 0.0;
        for j in 0..b {
            let v = s[q * b + j] - hyper.lambda;
            if masks.pos[q * b + j] {
                sp += (-hyper.alpha * v).exp();
            }
            if masks.neg[q * b + j] {
                sn += (hyper.beta * v).exp();
            }
        }
        total += sp.ln_1p() / hyper.alpha + sn.ln_1p() / hyper.beta;
    }
    total / b as f64
}

/// Chosen batch: `P` places with `K` images each, place-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchIndices {
    /// Indices into the dataset's image list.
    pub images: Vec<usize>,
    /// Place id per entry.
    pub labels: Vec<usize>,
}

/// Uniform without replacement: `P` distinct places from `groups`
/// (place id → image indices), then `K` distinct images from each.
pub fn sample_batch<R: Rng + ?Sized>(
    groups: &[(usize, Vec<usize>)],
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<BatchIndices> {
    let eligible: Vec<&(usize, Vec<usize>)> = groups.iter().filter(|(_, imgs)| imgs.len() >= k).collect();
    if eligible.len() < p || p == 0 || k == 0 {
        return Err(Error::InsufficientPlaces {
            needed: p,
            per_place: k,
            available: eligible.len(),
        });
    }
    let mut images = Vec::with_capacity(p * k);
    let mut labels = Vec::with_capacity(p * k);
    for gi in sample(rng, eligible.len(), p) {
        let (place, imgs) = eligible[gi];
        for ii in sample(rng, imgs.len(), k) {
            images.push(imgs[ii]);
            labels.push(*place);
        }
    }
    Ok(BatchIndices { images, labels })
}
