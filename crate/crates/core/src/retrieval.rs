//! Exact cosine retrieval and Recall@N under geotag ground truth.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::io::{DescriptorSet, Geotag, Manifest};

/// Row norms may deviate from one by this much before renormalization is
/// considered lossy.
pub const UNIT_TOL: f64 = 1e-5;

/// Unit-norm database descriptors with ids and geotags, row-aligned.
#[derive(Clone, Debug)]
pub struct DescriptorIndex {
    dim: usize,
    matrix: Vec<f32>,
    ids: Vec<String>,
    geotags: Vec<Geotag>,
    places: Vec<usize>,
}

impl DescriptorIndex {
    /// Aligns descriptors with their manifest records; rows are
    /// renormalized.
    pub fn build(descs: &DescriptorSet, manifest: &Manifest) -> Result<Self> {
        if descs.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if descs.data.len() != descs.len() * descs.dim {
            return Err(Error::DimMismatch {
                expected: descs.len() * descs.dim,
                got: descs.data.len(),
            });
        }
        let by_id: std::collections::HashMap<String, &crate::io::ManifestRecord> =
            manifest.records.iter().map(|r| (r.id(), r)).collect();
        let mut seen = HashSet::new();
        let mut geotags = Vec::with_capacity(descs.len());
        let mut places = Vec::with_capacity(descs.len());
        for id in &descs.ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
            let rec = by_id.get(id).ok_or_else(|| Error::MissingMetadata(id.clone()))?;
            geotags.push(rec.geotag);
            places.push(rec.place);
        }
        let mut matrix = descs.data.clone();
        for row in matrix.chunks_mut(descs.dim) {
            normalize(row);
        }
        Ok(Self {
            dim: descs.dim,
            matrix,
            ids: descs.ids.clone(),
            geotags,
            places,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn geotags(&self) -> &[Geotag] {
        &self.geotags
    }

    pub fn places(&self) -> &[usize] {
        &self.places
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    /// Top-`n` rows by cosine similarity, descending; ties go to the lower
    /// row index.
    pub fn knn(&self, query: &[f32], n: usize) -> Result<Vec<(usize, f64)>> {
        if query.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        let mut scored: Vec<(usize, f64)> = (0..self.len())
            .map(|i| (i, dot(self.row(i), query)))
            .collect();
        let n = n.min(scored.len());
        if n == 0 {
            return Ok(Vec::new());
        }
        let order = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        if n < scored.len() {
            scored.select_nth_unstable_by(n - 1, order);
            scored.truncate(n);
        }
        scored.sort_by(order);
        Ok(scored)
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Scales `v` to unit length; zero vectors stay zero.
pub fn normalize(v: &mut [f32]) {
    let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x = (*x as f64 / norm) as f32);
    }
}

/// Which database images count as correct for a query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GtRule {
    /// Planar distance at most `t` meters.
    Euclidean(f64),
    /// Frame numbers at most `k` apart.
    FrameOffset(i64),
    /// Same place id.
    UniquePair,
}

impl FromStr for GtRule {
    type Err = Error;

    /// `euclidean:25`, `frame:10` or `unique`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::UnknownRule(s.to_string());
        match s.split_once(':') {
            Some(("euclidean", t)) => t.parse().map(GtRule::Euclidean).map_err(|_| bad()),
            Some(("frame", k)) => k.parse().map(GtRule::FrameOffset).map_err(|_| bad()),
            None if s == "unique" => Ok(GtRule::UniquePair),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for GtRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GtRule::Euclidean(t) => write!(f, "euclidean:{t}"),
            GtRule::FrameOffset(k) => write!(f, "frame:{k}"),
            GtRule::UniquePair => write!(f, "unique"),
        }
    }
}

/// Per-query sets of positive database indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruth {
    pub positives: Vec<Vec<usize>>,
}

/// Tags without a matching kind (e.g. a frame tag under a planar rule)
/// never match.
pub fn ground_truth(
    db: &[(Geotag, usize)],
    queries: &[(Geotag, usize)],
    rule: GtRule,
) -> GroundTruth {
    let matches = |q: &(Geotag, usize), d: &(Geotag, usize)| match (rule, q.0, d.0) {
        (GtRule::Euclidean(t), Geotag::Planar { x: qx, y: qy }, Geotag::Planar { x, y }) => {
            ((qx - x).powi(2) + (qy - y).powi(2)).sqrt() <= t
        }
        (GtRule::FrameOffset(k), Geotag::Frame(a), Geotag::Frame(b)) => (a - b).abs() <= k,
        (GtRule::UniquePair, _, _) => q.1 == d.1,
        _ => false,
    };
    GroundTruth {
        positives: queries
            .iter()
            .map(|q| (0..db.len()).filter(|&i| matches(q, &db[i])).collect())
            .collect(),
    }
}

/// Recall@N in percent for each `N`. `rankings[q]` lists database indices
/// best first; queries without positives are left out of the denominator.
pub fn recall_at_n(rankings: &[Vec<usize>], gt: &GroundTruth, ns: &[usize]) -> Result<Vec<f64>> {
    let evaluable: Vec<usize> = (0..gt.positives.len())
        .filter(|&q| !gt.positives[q].is_empty())
        .collect();
    if let Some(&q) = evaluable.iter().find(|&&q| q >= rankings.len()) {
        return Err(Error::MissingQuery(q));
    }
    Ok(ns
        .iter()
        .map(|&n| {
            if evaluable.is_empty() {
                return 0.0;
            }
            let hits = evaluable
                .iter()
                .filter(|&&q| {
                    let pos: HashSet<usize> = gt.positives[q].iter().copied().collect();
                    rankings[q].iter().take(n).any(|i| pos.contains(i))
                })
                .count();
            100.0 * hits as f64 / evaluable.len() as f64
        })
        .collect())
}

/// Full evaluation: rank every query against `index` and score.
pub fn evaluate(
    index: &DescriptorIndex,
    queries: &DescriptorSet,
    query_manifest: &Manifest,
    rule: GtRule,
    ns: &[usize],
) -> Result<Vec<f64>> {
    if queries.dim != index.dim() {
        return Err(Error::DimMismatch {
            expected: index.dim(),
            got: queries.dim,
        });
    }
    let max_n = ns.iter().copied().max().unwrap_or(1).max(1);
    let mut qtags = Vec::with_capacity(queries.len());
    let mut rankings = Vec::with_capacity(queries.len());
    for (i, id) in queries.ids.iter().enumerate() {
        let rec = query_manifest.find(id).ok_or_else(|| Error::MissingMetadata(id.clone()))?;
        qtags.push((rec.geotag, rec.place));
        let mut q = queries.row(i).to_vec();
        normalize(&mut q);
        rankings.push(index.knn(&q, max_n)?.into_iter().map(|(j, _)| j).collect());
    }
    let db: Vec<(Geotag, usize)> = index
        .geotags()
        .iter()
        .copied()
        .zip(index.places().iter().copied())
        .collect();
    let gt = ground_truth(&db, &qtags, rule);
    recall_at_n(&rankings, &gt, ns)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::ManifestRecord;

    fn manifest(ids: &[&str]) -> Manifest {
        Manifest {
            records: ids
                .iter()
                .enumerate()
                .map(|(i, id)| ManifestRecord {
                    path: format!("{id}.bin").into(),
                    place: i,
                    geotag: Geotag::Planar {
                        x: 100.0 * i as f64,
                        y: 0.0,
                    },
                })
                .collect(),
        }
    }

    fn set(rows: &[(&str, &[f32])]) -> DescriptorSet {
        let mut d = DescriptorSet::new(rows[0].1.len());
        for (id, v) in rows {
            d.push(*id, v).unwrap();
        }
        d
    }

    #[test]
    fn build_examples() {
        let m = manifest(&["a", "b", "c"]);
        let d = set(&[("c", &[0.0, 2.0]), ("a", &[1.0, 0.0]), ("b", &[0.6, 0.8])]);
        let idx = DescriptorIndex::build(&d, &m).unwrap();
        assert_eq!(idx.ids(), ["c", "a", "b"]);
        assert_eq!(idx.row(0), &[0.0, 1.0]);

        let dup = set(&[("a", &[1.0, 0.0]), ("a", &[0.0, 1.0])]);
        assert!(matches!(DescriptorIndex::build(&dup, &m), Err(Error::DuplicateId(_))));
        assert!(matches!(DescriptorIndex::build(&DescriptorSet::new(2), &m), Err(Error::EmptyIndex)));
        let missing = set(&[("z", &[1.0, 0.0])]);
        assert!(matches!(DescriptorIndex::build(&missing, &m), Err(Error::MissingMetadata(_))));
    }

    #[test]
    fn knn_examples() {
        let m = manifest(&["a", "b", "c"]);
        let d = set(&[("a", &[1.0, 0.0, 0.0]), ("b", &[0.0, 1.0, 0.0]), ("c", &[0.6, 0.8, 0.0])]);
        let idx = DescriptorIndex::build(&d, &m).unwrap();
        let top = idx.knn(&[0.0, 1.0, 0.0], 2).unwrap();
        assert_eq!(top[0], (1, 1.0));
        assert_eq!(top[1].0, 2);
        let orth = idx.knn(&[0.0, 0.0, 1.0], 3).unwrap();
        assert_eq!(orth.iter().map(|r| r.0).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(orth.iter().all(|r| r.1 == 0.0));
        assert!(matches!(idx.knn(&[1.0], 1), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn rules() {
        assert_eq!("euclidean:25".parse::<GtRule>().unwrap(), GtRule::Euclidean(25.0));
        assert_eq!("frame:10".parse::<GtRule>().unwrap(), GtRule::FrameOffset(10));
        assert_eq!("unique".parse::<GtRule>().unwrap(), GtRule::UniquePair);
        assert!(matches!("cosine".parse::<GtRule>(), Err(Error::UnknownRule(_))));

        let db = [(Geotag::Planar { x: 0.0, y: 0.0 }, 0), (Geotag::Planar { x: 100.0, y: 0.0 }, 1)];
        let q = [(Geotag::Planar { x: 5.0, y: 0.0 }, 9)];
        assert_eq!(ground_truth(&db, &q, GtRule::Euclidean(25.0)).positives, vec![vec![0]]);

        let frames: Vec<_> = (0..100).map(|f| (Geotag::Frame(f), f as usize)).collect();
        let gt = ground_truth(&frames, &[(Geotag::Frame(50), 50)], GtRule::FrameOffset(10));
        assert_eq!(gt.positives[0], (40..=60).collect::<Vec<_>>());
        let gt = ground_truth(&frames, &[(Geotag::Frame(0), 33)], GtRule::UniquePair);
        assert_eq!(gt.positives[0], vec![33]);
    }

    #[test]
    fn recall_hand_example() {
        // positive of query q at rank r (1-based): 1, 2, 3, 7, 11
        let ranks = [1, 2, 3, 7, 11];
        let rankings: Vec<Vec<usize>> = ranks
            .iter()
            .map(|&r| (0..20).map(|i| if i == r - 1 { 0 } else { i + 1 }).collect())
            .collect();
        let gt = GroundTruth {
            positives: vec![vec![0]; 5],
        };
        assert_eq!(recall_at_n(&rankings, &gt, &[1, 5, 10]).unwrap(), vec![20.0, 60.0, 80.0]);

        let short = GroundTruth {
            positives: vec![vec![0]; 6],
        };
        assert!(matches!(recall_at_n(&rankings, &short, &[1]), Err(Error::MissingQuery(5))));

        let mut excluded = gt.clone();
        excluded.positives.push(vec![]);
        assert_eq!(recall_at_n(&rankings, &excluded, &[1]).unwrap(), vec![20.0]);
    }
}
