//! Training loop: place-balanced batches, multi-similarity loss, Adam on the
//! trainable groups, step-decayed learning rate.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::io::{DescriptorSet, Geotag};
use crate::metric::{ms_loss, ms_mine, sample_batch, similarity, MsHyper};
use crate::model::CricaModel;
use crate::optim::{Adam, AdamConfig};
use crate::retrieval::{ground_truth, recall_at_n, GtRule};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub places_per_batch: usize,
    pub images_per_place: usize,
    pub adam: AdamConfig,
    /// The learning rate is multiplied by `lr_decay` every `lr_decay_every`
    /// epochs.
    pub lr_decay_every: usize,
    pub lr_decay: f64,
    pub loss: MsHyper,
    pub seed: u64,
    /// Stop when validation R@5 has not improved for this many epochs.
    pub patience: Option<usize>,
    pub inference_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            places_per_batch: 16,
            images_per_place: 4,
            adam: AdamConfig::default(),
            lr_decay_every: 3,
            lr_decay: 0.5,
            loss: MsHyper::default(),
            seed: 0,
            patience: None,
            inference_batch: 16,
        }
    }
}

impl TrainConfig {
    /// Settings for the 64² desk model on a few dozen places: three
    /// database views per place, small batches and a raised learning rate.
    pub fn desk() -> Self {
        Self {
            places_per_batch: 4,
            images_per_place: 3,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.places_per_batch < 2 || self.images_per_place < 2 {
            return Err(Error::Config(
                "a batch needs at least 2 places with at least 2 images each".into(),
            ));
        }
        if self.lr_decay_every == 0 || self.inference_batch == 0 {
            return Err(Error::Config("lr_decay_every and inference_batch must be positive".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.adam.lr)));
        }
        Ok(())
    }

    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        self.adam.lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Training images with their place labels.
#[derive(Clone, Debug, Default)]
pub struct TrainSet {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
}

impl TrainSet {
    /// Place id → image indices, ordered by place id.
    pub fn groups(&self) -> Vec<(usize, Vec<usize>)> {
        let mut map = std::collections::BTreeMap::<usize, Vec<usize>>::new();
        for (i, &l) in self.labels.iter().enumerate() {
            map.entry(l).or_default().push(i);
        }
        map.into_iter().collect()
    }

    /// `[n, 3, H, W]` batch of the given images.
    pub fn stack(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        stack_images(indices.iter().map(|&i| &self.images[i]))
    }
}

pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Tensor<f32>>) -> Result<Tensor<f32>> {
    let mut shape: Option<Vec<usize>> = None;
    let mut data = Vec::new();
    let mut n = 0;
    for img in images {
        match &shape {
            None => shape = Some(img.shape().to_vec()),
            Some(s) if s.as_slice() != img.shape() => {
                return Err(Error::shape("stack_images", format!("{:?} vs {s:?}", img.shape())))
            }
            _ => {}
        }
        data.extend_from_slice(img.data());
        n += 1;
    }
    let mut full = vec![n];
    full.extend(shape.ok_or_else(|| Error::shape("stack_images", "empty batch"))?);
    Tensor::new(full, data)
}

/// Held-out queries against a database, for validation and evaluation.
#[derive(Clone, Debug, Default)]
pub struct RetrievalSet {
    pub db_images: Vec<Tensor<f32>>,
    pub db_tags: Vec<(Geotag, usize)>,
    pub query_images: Vec<Tensor<f32>>,
    pub query_tags: Vec<(Geotag, usize)>,
}

/// Descriptors for `images` in order, `batch` at a time; the final batch
/// may be short.
pub fn extract(model: &CricaModel<f32>, images: &[Tensor<f32>], batch: usize) -> Result<Vec<Vec<f32>>> {
    let batch = batch.max(1);
    let mut out = Vec::with_capacity(images.len());
    for start in (0..images.len()).step_by(batch) {
        let idx: Vec<usize> = (start..(start + batch).min(images.len())).collect();
        let d = model.describe(&stack_images(idx.iter().map(|&i| &images[i]))?)?;
        let dim = d.shape()[1];
        out.extend(d.data().chunks(dim).map(<[f32]>::to_vec));
    }
    Ok(out)
}

pub fn to_set(prefix: &str, vectors: &[Vec<f32>]) -> Result<DescriptorSet> {
    let dim = vectors.first().map_or(0, Vec::len);
    let mut set = DescriptorSet::new(dim);
    for (i, v) in vectors.iter().enumerate() {
        set.push(format!("{prefix}{i}"), v)?;
    }
    Ok(set)
}

/// Recall@N of `model` on `set`.
pub fn evaluate_model(
    model: &CricaModel<f32>,
    set: &RetrievalSet,
    rule: GtRule,
    ns: &[usize],
    batch: usize,
) -> Result<Vec<f64>> {
    let db = extract(model, &set.db_images, batch)?;
    let q = extract(model, &set.query_images, batch)?;
    recall_from_descriptors(&db, &set.db_tags, &q, &set.query_tags, rule, ns)
}

pub fn recall_from_descriptors(
    db: &[Vec<f32>],
    db_tags: &[(Geotag, usize)],
    queries: &[Vec<f32>],
    query_tags: &[(Geotag, usize)],
    rule: GtRule,
    ns: &[usize],
) -> Result<Vec<f64>> {
    if db.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let max_n = ns.iter().copied().max().unwrap_or(1).max(1);
    let rankings: Vec<Vec<usize>> = queries
        .iter()
        .map(|q| {
            let mut scored: Vec<(usize, f64)> = db
                .iter()
                .enumerate()
                .map(|(i, d)| (i, d.iter().zip(q).map(|(&a, &b)| a as f64 * b as f64).sum()))
                .collect();
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            scored.into_iter().take(max_n).map(|s| s.0).collect()
        })
        .collect();
    let gt = ground_truth(db_tags, query_tags, rule);
    recall_at_n(&rankings, &gt, ns)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub pos_pairs: usize,
    pub neg_pairs: usize,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub val_r1: Option<f64>,
    pub val_r5: Option<f64>,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
        write!(
            f,
            "epoch={} steps={} loss={:.6} lr={:.3e} val_r1={} val_r5={}",
            self.epoch,
            self.steps,
            self.mean_loss,
            self.lr,
            opt(self.val_r1),
            opt(self.val_r5)
        )
    }
}

pub struct Trainer {
    pub model: CricaModel<f32>,
    pub optimizer: Adam<f32>,
    pub config: TrainConfig,
    /// Next epoch to run.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    best_r5: Option<f64>,
    stale: usize,
}

impl Trainer {
    pub fn new(model: CricaModel<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(config.adam, &model.params);
        Ok(Self {
            model,
            optimizer,
            config,
            epoch: 0,
            history: Vec::new(),
            best_r5: None,
            stale: 0,
        })
    }

    /// Continues from saved state; `epoch` is the next epoch to run.
    pub fn resume(model: CricaModel<f32>, optimizer: Adam<f32>, config: TrainConfig, epoch: usize) -> Result<Self> {
        let mut t = Self::new(model, config)?;
        if optimizer.ids != t.optimizer.ids {
            return Err(Error::BadCheckpoint("optimizer state does not match the model".into()));
        }
        t.optimizer = optimizer;
        t.epoch = epoch;
        Ok(t)
    }

    /// Forward, loss, backward and one Adam step on a prepared batch.
    pub fn step(&mut self, images: &Tensor<f32>, labels: &[usize]) -> Result<StepStats> {
        let mut tape = Tape::new();
        let bound = self.model.params.bind(&mut tape, true);
        let x = tape.constant(images.clone());
        let out = self.model.forward(&mut tape, &bound, x)?;
        let s = similarity(&mut tape, out.descriptors)?;
        let masks = ms_mine(tape.value(s), labels, self.config.loss.margin)?;
        let loss = ms_loss(&mut tape, s, &self.config.loss, &masks)?;
        let value = tape.value(loss).item() as f64;
        let grads = tape.backward_scalar(loss)?;
        let g: Vec<Tensor<f32>> = self
            .optimizer
            .ids
            .iter()
            .map(|&id| grads.wrt(&tape, bound.var(id)))
            .collect();
        self.optimizer.step(&mut self.model.params, &g)?;
        self.model.clamp_gem_p();
        Ok(StepStats {
            loss: value,
            pos_pairs: masks.pos_count(),
            neg_pairs: masks.neg_count(),
        })
    }

    /// Batches for one epoch: places shuffled and cut into groups of `P`
    /// (remainder dropped), `K` images drawn from each place.
    pub fn epoch_batches(&self, set: &TrainSet, epoch: usize) -> Result<Vec<crate::metric::BatchIndices>> {
        let (p, k) = (self.config.places_per_batch, self.config.images_per_place);
        let mut groups: Vec<(usize, Vec<usize>)> =
            set.groups().into_iter().filter(|g| g.1.len() >= k).collect();
        if groups.len() < p {
            return Err(Error::InsufficientPlaces {
                needed: p,
                per_place: k,
                available: groups.len(),
            });
        }
        let mut rng = epoch_rng(self.config.seed, epoch);
        groups.shuffle(&mut rng);
        groups
            .chunks_exact(p)
            .map(|chunk| sample_batch(chunk, p, k, &mut rng))
            .collect()
    }

    pub fn run_epoch(&mut self, set: &TrainSet, val: Option<&RetrievalSet>) -> Result<EpochRecord> {
        let epoch = self.epoch;
        let lr = self.config.lr_for_epoch(epoch);
        self.optimizer.lr = lr;
        let batches = self.epoch_batches(set, epoch)?;
        let mut total = 0.0;
        for b in &batches {
            let images = set.stack(&b.images)?;
            total += self.step(&images, &b.labels)?.loss;
        }
        let (val_r1, val_r5) = match val {
            Some(v) => {
                let r = evaluate_model(
                    &self.model,
                    v,
                    GtRule::Euclidean(25.0),
                    &[1, 5],
                    self.config.inference_batch,
                )?;
                (Some(r[0]), Some(r[1]))
            }
            None => (None, None),
        };
        let rec = EpochRecord {
            epoch,
            steps: batches.len(),
            mean_loss: total / batches.len().max(1) as f64,
            lr,
            val_r1,
            val_r5,
        };
        if let Some(r5) = val_r5 {
            if self.best_r5.is_none_or(|b| r5 > b) {
                self.best_r5 = Some(r5);
                self.stale = 0;
            } else {
                self.stale += 1;
            }
        }
        self.epoch += 1;
        self.history.push(rec.clone());
        Ok(rec)
    }

    pub fn should_stop(&self) -> bool {
        self.epoch >= self.config.epochs || self.config.patience.is_some_and(|p| self.stale >= p)
    }

    /// Runs epochs until the configured count or early stop, calling
    /// `on_epoch` after each.
    pub fn fit(
        &mut self,
        set: &TrainSet,
        val: Option<&RetrievalSet>,
        mut on_epoch: impl FnMut(&Trainer, &EpochRecord) -> Result<()>,
    ) -> Result<()> {
        while !self.should_stop() {
            let rec = self.run_epoch(set, val)?;
            on_epoch(self, &rec)?;
        }
        Ok(())
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}
