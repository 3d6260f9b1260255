//! PCA for descriptor dimensionality reduction.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::io::{f32_bytes, DescriptorSet, Reader};
use crate::retrieval::normalize;

const MAGIC: &[u8; 4] = b"CPCA";

/// Eigenvalues below this fraction of the largest are treated as zero.
const RANK_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub dim: usize,
    pub out_dim: usize,
    pub mean: Vec<f64>,
    /// `out_dim × dim`, orthonormal rows, descending eigenvalue order.
    pub basis: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    /// Number of directions with non-negligible variance; below `out_dim`
    /// the tail of the basis is an arbitrary orthonormal completion.
    pub rank: usize,
}

impl PcaModel {
    pub fn basis_row(&self, i: usize) -> &[f64] {
        &self.basis[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_rank_deficient(&self) -> bool {
        self.rank < self.out_dim
    }

    /// Fits on `n × dim` row-major samples. Requires `n > out_dim ≥ 1`.
    pub fn fit(data: &[f64], n: usize, dim: usize, out_dim: usize) -> Result<Self> {
        if data.len() != n * dim {
            return Err(Error::DimMismatch {
                expected: n * dim,
                got: data.len(),
            });
        }
        if out_dim == 0 || out_dim > dim || n <= out_dim {
            return Err(Error::TooFewSamples { samples: n, out_dim });
        }
        let mut mean = vec![0.0; dim];
        for row in data.chunks(dim) {
            mean.iter_mut().zip(row).for_each(|(m, &x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered: Vec<f64> = data
            .chunks(dim)
            .flat_map(|row| row.iter().zip(&mean).map(|(&x, &m)| x - m))
            .collect();
        let x = DMatrix::from_row_slice(n, dim, &centered);
        let denom = (n - 1) as f64;

        // eigenpairs (value, unit direction in R^dim), not yet sorted
        let mut pairs: Vec<(f64, Vec<f64>)> = if dim <= n {
            let cov = x.transpose() * &x / denom;
            let eig = SymmetricEigen::new(cov);
            (0..dim)
                .map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).iter().copied().collect()))
                .collect()
        } else {
            // Gram route: X Xᵀ u = μ u  ⇒  Xᵀ u / ‖Xᵀ u‖ is a covariance eigenvector
            let gram = &x * x.transpose() / denom;
            let eig = SymmetricEigen::new(gram);
            (0..n)
                .map(|i| {
                    let v = x.transpose() * eig.eigenvectors.column(i);
                    let norm = v.norm();
                    let dir = if norm > 0.0 {
                        v.iter().map(|a| a / norm).collect()
                    } else {
                        vec![0.0; dim]
                    };
                    (eig.eigenvalues[i], dir)
                })
                .collect()
        };
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
        let top = pairs.first().map_or(0.0, |p| p.0).max(0.0);
        let rank = pairs.iter().filter(|p| p.0 > top * RANK_TOL && p.0 > 0.0).count();

        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(out_dim);
        let mut eigenvalues = Vec::with_capacity(out_dim);
        for (val, dir) in pairs.iter().take(rank.min(out_dim)) {
            basis.push(dir.clone());
            eigenvalues.push(val.max(0.0));
        }
        // complete with directions orthogonal to everything so far
        let mut candidate = pairs
            .iter()
            .skip(basis.len())
            .map(|p| p.1.clone())
            .chain((0..dim).map(|i| {
                let mut e = vec![0.0; dim];
                e[i] = 1.0;
                e
            }));
        while basis.len() < out_dim {
            let Some(mut v) = candidate.next() else { break };
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                v.iter_mut().for_each(|x| *x /= norm);
                basis.push(v);
                eigenvalues.push(0.0);
            }
        }
        for row in &mut basis {
            let lead = row
                .iter()
                .copied()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
                .map_or(0.0, |(_, v)| v);
            if lead < 0.0 {
                row.iter_mut().for_each(|x| *x = -*x);
            }
        }
        Ok(Self {
            dim,
            out_dim,
            mean,
            basis: basis.concat(),
            eigenvalues,
            rank,
        })
    }

    pub fn fit_set(descs: &DescriptorSet, out_dim: usize) -> Result<Self> {
        let data: Vec<f64> = descs.data.iter().map(|&v| v as f64).collect();
        Self::fit(&data, descs.len(), descs.dim, out_dim)
    }

    /// Projects `(d − mean)` onto the basis, optionally whitens, then
    /// L2-normalizes.
    pub fn transform(&self, d: &[f32], whiten: bool) -> Result<Vec<f32>> {
        let raw = self.project(d)?;
        let mut out: Vec<f32> = raw
            .iter()
            .zip(&self.eigenvalues)
            .map(|(&v, &ev)| if whiten { v / (ev + 1e-12).sqrt() } else { v } as f32)
            .collect();
        normalize(&mut out);
        Ok(out)
    }

    /// Coordinates in the basis, without normalization.
    pub fn project(&self, d: &[f32]) -> Result<Vec<f64>> {
        if d.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: d.len(),
            });
        }
        let centered: Vec<f64> = d.iter().zip(&self.mean).map(|(&x, &m)| x as f64 - m).collect();
        Ok((0..self.out_dim)
            .map(|i| self.basis_row(i).iter().zip(&centered).map(|(b, c)| b * c).sum())
            .collect())
    }

    pub fn transform_set(&self, descs: &DescriptorSet, whiten: bool) -> Result<DescriptorSet> {
        let mut out = DescriptorSet::new(self.out_dim);
        for (i, id) in descs.ids.iter().enumerate() {
            out.push(id.clone(), &self.transform(descs.row(i), whiten)?)?;
        }
        Ok(out)
    }

    /// `"CPCA"`, dim, out_dim (u32), then mean, basis rows and eigenvalues
    /// as f32.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.out_dim as u32).to_le_bytes());
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
        f32_bytes(&f(&self.mean), &mut out);
        f32_bytes(&f(&self.basis), &mut out);
        f32_bytes(&f(&self.eigenvalues), &mut out);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new("pca file", bytes);
        r.magic(MAGIC)?;
        let dim = r.u32()? as usize;
        let out_dim = r.u32()? as usize;
        let g = |v: Vec<f32>| v.into_iter().map(f64::from).collect::<Vec<_>>();
        let mean = g(r.f32s(dim)?);
        let basis = g(r.f32s(out_dim * dim)?);
        let eigenvalues = g(r.f32s(out_dim)?);
        r.finish()?;
        let top = eigenvalues.first().copied().unwrap_or(0.0);
        let rank = eigenvalues.iter().filter(|&&e| e > 0.0 && e > top * RANK_TOL).count();
        Ok(Self {
            dim,
            out_dim,
            mean,
            basis,
            eigenvalues,
            rank,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.encode())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

/// Largest `|B·Bᵀ − I|` entry.
pub fn orthonormality_error(m: &PcaModel) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.out_dim {
        for j in 0..=i {
            let d: f64 = m.basis_row(i).iter().zip(m.basis_row(j)).map(|(a, b)| a * b).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((d - target).abs());
        }
    }
    worst
}
