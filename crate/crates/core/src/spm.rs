//! Spatial-pyramid GeM aggregation.
//!
//! The `g×g` patch map is split at three levels (1×1, 2×2, 3×3) into 14
//! regions. Each region is GeM-pooled, except the single level-1 region,
//! which is replaced by the class token. Region order is level by level,
//! row-major within a level.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const NUM_REGIONS: usize = 14;
pub const PYRAMID_LEVELS: [usize; 3] = [1, 2, 3];

/// Floor applied before raising to a fractional power.
pub const GEM_EPS: f64 = 1e-6;
pub const GEM_P_MIN: f64 = 0.5;
pub const GEM_P_MAX: f64 = 20.0;

/// Half-open rectangle of grid cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

impl Region {
    pub fn cells(&self) -> usize {
        (self.rows.1 - self.rows.0) * (self.cols.1 - self.cols.0)
    }
}

/// Split points `floor(k·g/n)` for `k = 0..=n`.
pub fn level_bounds(g: usize, n: usize) -> Vec<usize> {
    (0..=n).map(|k| k * g / n).collect()
}

pub fn pyramid_regions(g: usize) -> Result<Vec<Region>> {
    if g < 3 {
        return Err(Error::GridTooSmall(g));
    }
    let mut regions = Vec::with_capacity(NUM_REGIONS);
    for n in PYRAMID_LEVELS {
        let b = level_bounds(g, n);
        for i in 0..n {
            for j in 0..n {
                regions.push(Region {
                    rows: (b[i], b[i + 1]),
                    cols: (b[j], b[j + 1]),
                });
            }
        }
    }
    Ok(regions)
}

/// GeM over axis 0 of a `[m, D]` region: `((1/m) Σ max(x, ε)^p)^(1/p)`.
pub fn gem<T: Scalar>(tape: &mut Tape<T>, region: Var, p: Var) -> Result<Var> {
    let m = *tape.shape(region).first().ok_or(Error::EmptyRegion)?;
    if m == 0 {
        return Err(Error::EmptyRegion);
    }
    let x = tape.clamp_min(region, GEM_EPS);
    let x = tape.pow(x, p)?;
    let mean = tape.mean_axis(x, 0)?;
    let inv = tape.recip(p);
    tape.pow(mean, inv)
}

/// Builds the `[B, 14, D]` regional features from `[B, D]` class tokens and
/// `[B, g, g, D]` patch maps.
pub fn spm_aggregate<T: Scalar>(
    tape: &mut Tape<T>,
    class_tokens: Var,
    patch_maps: Var,
    p: Var,
) -> Result<Var> {
    let shape = tape.shape(patch_maps).to_vec();
    let (b, g, d) = match shape.as_slice() {
        &[b, g, g2, d] if g == g2 => (b, g, d),
        _ => return Err(Error::shape("spm_aggregate", format!("patch maps {shape:?}"))),
    };
    if tape.shape(class_tokens) != [b, d] {
        return Err(Error::shape(
            "spm_aggregate",
            format!("class tokens {:?} for maps {shape:?}", tape.shape(class_tokens)),
        ));
    }
    let regions = pyramid_regions(g)?;

    let x = tape.clamp_min(patch_maps, GEM_EPS);
    let powered = tape.pow(x, p)?;
    let mut pooled = Vec::with_capacity(NUM_REGIONS - 1);
    for r in &regions[1..] {
        let s = tape.slice(powered, 1, r.rows.0, r.rows.1)?;
        let s = tape.slice(s, 2, r.cols.0, r.cols.1)?;
        let s = tape.reshape(s, &[b, r.cells(), d])?;
        let m = tape.mean_axis(s, 1)?;
        pooled.push(tape.reshape(m, &[b, 1, d])?);
    }
    let pooled = tape.concat(&pooled, 1)?;
    let inv = tape.recip(p);
    let pooled = tape.pow(pooled, inv)?;
    let cls = tape.reshape(class_tokens, &[b, 1, d])?;
    tape.concat(&[cls, pooled], 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn gem_of(values: &[f64], p: f64) -> f64 {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_f64([values.len(), 1], values).unwrap());
        let pv = tape.constant(Tensor::scalar(p));
        let y = gem(&mut tape, x, pv).unwrap();
        tape.value(y).item()
    }

    #[test]
    fn split_rule() {
        assert_eq!(level_bounds(16, 3), vec![0, 5, 10, 16]);
        let r = pyramid_regions(4).unwrap();
        assert_eq!(r.len(), NUM_REGIONS);
        assert_eq!(
            &r[1..5],
            &[
                Region { rows: (0, 2), cols: (0, 2) },
                Region { rows: (0, 2), cols: (2, 4) },
                Region { rows: (2, 4), cols: (0, 2) },
                Region { rows: (2, 4), cols: (2, 4) },
            ]
        );
        assert!(matches!(pyramid_regions(2), Err(Error::GridTooSmall(2))));
    }

    #[test]
    fn levels_tile_the_grid() {
        for g in 3..40 {
            let regions = pyramid_regions(g).unwrap();
            for (start, n) in [(0, 1), (1, 4), (5, 9)] {
                let mut cover = vec![0u8; g * g];
                for r in &regions[start..start + n] {
                    for i in r.rows.0..r.rows.1 {
                        for j in r.cols.0..r.cols.1 {
                            cover[i * g + j] += 1;
                        }
                    }
                }
                assert!(cover.iter().all(|&c| c == 1), "g={g}");
            }
        }
    }

    #[test]
    fn gem_examples() {
        assert_eq!(gem_of(&[1.0, 2.0, 3.0, 4.0], 1.0), 2.5);
        // (1+8+27+64)/4 = 25
        assert!((gem_of(&[1.0, 2.0, 3.0, 4.0], 3.0) - 25f64.cbrt()).abs() < 1e-12);
        assert!((gem_of(&[1.0, 2.0, 3.0, 4.0], 3.0) - 2.9240).abs() < 1e-4);
        let big = gem_of(&[1.0, 2.0, 3.0, 4.0], 100.0);
        // 4·(1/4)^(1/100) ≈ 3.945: the finite-p value sits just under 1.5% below the max
        assert!(big <= 4.0 && big > 4.0 * 0.985);
        assert!(gem_of(&[1.0, 2.0, 3.0, 4.0], 20.0) < big);
    }

    #[test]
    fn empty_region_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([0, 3]));
        let p = tape.constant(Tensor::scalar(3.0));
        assert!(matches!(gem(&mut tape, x, p), Err(Error::EmptyRegion)));
    }

    #[test]
    fn constant_map_pools_to_constant_and_class_token_is_region_zero() {
        let (b, g, d) = (2, 5, 3);
        let mut tape = Tape::<f64>::new();
        let maps = tape.constant(Tensor::full([b, g, g, d], 0.7));
        let cls_data: Vec<f64> = (0..b * d).map(|i| i as f64 - 2.5).collect();
        let cls = tape.constant(Tensor::new([b, d], cls_data.clone()).unwrap());
        let p = tape.constant(Tensor::scalar(3.0));
        let out = spm_aggregate(&mut tape, cls, maps, p).unwrap();
        assert_eq!(tape.shape(out), &[b, NUM_REGIONS, d]);
        let v = tape.value(out).data();
        for bi in 0..b {
            assert_eq!(&v[bi * NUM_REGIONS * d..bi * NUM_REGIONS * d + d], &cls_data[bi * d..(bi + 1) * d]);
            for r in 1..NUM_REGIONS {
                for j in 0..d {
                    let x = v[(bi * NUM_REGIONS + r) * d + j];
                    assert!((x - 0.7).abs() < 1e-12);
                }
            }
        }
    }
}
