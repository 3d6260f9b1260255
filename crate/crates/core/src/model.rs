//! The full pipeline: adapted backbone → spatial-pyramid GeM → cross-image
//! encoder → flatten + L2 normalize.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::Backbone;
use crate::config::ModelConfig;
use crate::encoder::{flatten_normalize, CrossImageEncoder};
use crate::error::Result;
use crate::params::{Bound, Init, ParamGroup, ParamId, ParamStore, Registry};
use crate::spm::{spm_aggregate, GEM_P_MAX, GEM_P_MIN};
use crate::tensor::{Scalar, Tensor};

/// Where each parameter lives; independent of the scalar type.
#[derive(Clone, Debug)]
pub struct ModelLayout {
    pub backbone: Backbone,
    pub encoder: Option<CrossImageEncoder>,
    pub gem_p: ParamId,
}

impl ModelLayout {
    pub fn declare(config: &ModelConfig) -> Result<(Self, Registry)> {
        config.validate()?;
        let mut reg = Registry::new();
        let backbone = Backbone::declare(&mut reg, &config.backbone);
        let encoder = config
            .use_crica
            .then(|| CrossImageEncoder::declare(&mut reg, &config.encoder));
        let gem_p = reg.declare("pool.gem_p", &[], Init::Const(config.gem_p_init), ParamGroup::Pooling);
        Ok((
            Self {
                backbone,
                encoder,
                gem_p,
            },
            reg,
        ))
    }
}

/// Parameter totals by group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub backbone: usize,
    pub adapter: usize,
    pub encoder: usize,
    pub pooling: usize,
}

impl ParamCounts {
    pub fn of(config: &ModelConfig) -> Result<Self> {
        let (_, reg) = ModelLayout::declare(config)?;
        Ok(Self {
            backbone: reg.count(ParamGroup::Backbone),
            adapter: reg.count(ParamGroup::Adapter),
            encoder: reg.count(ParamGroup::Encoder),
            pooling: reg.count(ParamGroup::Pooling),
        })
    }

    pub fn trainable(&self) -> usize {
        self.adapter + self.encoder + self.pooling
    }

    pub fn total(&self) -> usize {
        self.backbone + self.trainable()
    }
}

/// Vars produced by one forward pass.
pub struct ForwardOutput {
    pub class_tokens: Var,
    pub patch_maps: Var,
    /// `[B, 14, D]` pyramid features before the encoder.
    pub regional: Var,
    /// `[B, 14, D]` after the encoder (equal to `regional` when bypassed).
    pub encoded: Var,
    /// `[B, 14·D]`, unit rows.
    pub descriptors: Var,
}

#[derive(Clone, Debug)]
pub struct CricaModel<T = f32> {
    pub config: ModelConfig,
    pub layout: ModelLayout,
    pub params: ParamStore<T>,
}

impl<T: Scalar> CricaModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let (layout, reg) = ModelLayout::declare(&config)?;
        Ok(Self {
            config,
            layout,
            params: reg.materialize(seed),
        })
    }

    pub fn cast<U: Scalar>(&self) -> CricaModel<U> {
        CricaModel {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }

    pub fn gem_p(&self) -> f64 {
        self.params.value(self.layout.gem_p).item().as_f64()
    }

    /// Keeps GeM p inside its admissible range after an update.
    pub fn clamp_gem_p(&mut self) {
        let v = self.params.value_mut(self.layout.gem_p);
        let p = v.item().as_f64().clamp(GEM_P_MIN, GEM_P_MAX);
        v.data_mut()[0] = T::of(p);
    }

    /// Full forward pass over a `[B, 3, H, W]` image batch.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, images: Var) -> Result<ForwardOutput> {
        let bb = self.layout.backbone.forward(tape, p, images)?;
        let regional = spm_aggregate(tape, bb.class_tokens, bb.patch_maps, p.var(self.layout.gem_p))?;
        let encoded = match &self.layout.encoder {
            Some(enc) => enc.encode(tape, p, regional)?,
            None => regional,
        };
        let descriptors = flatten_normalize(tape, encoded)?;
        Ok(ForwardOutput {
            class_tokens: bb.class_tokens,
            patch_maps: bb.patch_maps,
            regional,
            encoded,
            descriptors,
        })
    }

    /// Descriptors `[B, 14·D]` for one inference batch.
    pub fn describe(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(out.descriptors).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_forward_shapes() {
        let model = CricaModel::<f32>::new(ModelConfig::desk(), 1).unwrap();
        let imgs = Tensor::full([2, 3, 64, 64], 0.5f32);
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, false);
        let x = tape.constant(imgs);
        let out = model.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(out.class_tokens), &[2, 64]);
        assert_eq!(tape.shape(out.patch_maps), &[2, 8, 8, 64]);
        assert_eq!(tape.shape(out.descriptors), &[2, 896]);
        assert!(tape.value(out.descriptors).is_finite());
    }

    #[test]
    fn bypass_drops_encoder_params() {
        let mut cfg = ModelConfig::desk();
        let with = ParamCounts::of(&cfg).unwrap();
        cfg.use_crica = false;
        let without = ParamCounts::of(&cfg).unwrap();
        assert!(with.encoder > 0);
        assert_eq!(without.encoder, 0);
        assert_eq!(with.adapter, without.adapter);
    }

    #[test]
    fn gem_p_is_clamped() {
        let mut model = CricaModel::<f32>::new(ModelConfig::desk(), 1).unwrap();
        assert_eq!(model.gem_p(), 3.0);
        let id = model.layout.gem_p;
        model.params.value_mut(id).data_mut()[0] = 100.0;
        model.clamp_gem_p();
        assert_eq!(model.gem_p(), GEM_P_MAX);
        model.params.value_mut(id).data_mut()[0] = -1.0;
        model.clamp_gem_p();
        assert_eq!(model.gem_p(), GEM_P_MIN);
    }
}
