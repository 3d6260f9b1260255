//! Image collections on disk or in memory, split into training, database and
//! query views.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{self, Geotag, Manifest, Role};
use crate::synth::{SynthDataset, MANIFEST_FILE, SPLIT_FILE};
use crate::tensor::Tensor;
use crate::train::{RetrievalSet, TrainSet};

#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub id: String,
    pub place: usize,
    pub geotag: Geotag,
    pub role: Role,
    pub image: Tensor<f32>,
}

/// Database images double as the training set; queries are held out.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub images: Vec<LabeledImage>,
}

impl Dataset {
    /// Reads `manifest.csv` and `split.txt` from `dir`. Manifest paths are
    /// relative to `dir`; images missing from the split are treated as
    /// database images.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::load(&dir.join(MANIFEST_FILE))?;
        let split_path = dir.join(SPLIT_FILE);
        let roles: HashMap<String, Role> = if split_path.exists() {
            io::parse_split(&fs::read_to_string(&split_path)?)?.into_iter().collect()
        } else {
            HashMap::new()
        };
        let images = manifest
            .records
            .iter()
            .map(|r| {
                let id = r.id();
                Ok(LabeledImage {
                    role: roles.get(&id).copied().unwrap_or(Role::Db),
                    image: io::read_image(&dir.join(&r.path))?,
                    place: r.place,
                    geotag: r.geotag,
                    id,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if images.is_empty() {
            return Err(Error::format("manifest", "no images listed"));
        }
        Ok(Self { images })
    }

    pub fn from_synth(data: &SynthDataset) -> Self {
        Self {
            images: data
                .images
                .iter()
                .map(|im| LabeledImage {
                    id: im.id.clone(),
                    place: im.place,
                    geotag: im.geotag,
                    role: im.role,
                    image: im.image.clone(),
                })
                .collect(),
        }
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &LabeledImage> {
        self.images.iter().filter(move |i| i.role == role)
    }

    pub fn train_set(&self) -> TrainSet {
        TrainSet {
            images: self.with_role(Role::Db).map(|i| i.image.clone()).collect(),
            labels: self.with_role(Role::Db).map(|i| i.place).collect(),
        }
    }

    pub fn retrieval_set(&self) -> RetrievalSet {
        let imgs = |role| self.with_role(role).map(|i| i.image.clone()).collect();
        let tags = |role| self.with_role(role).map(|i| (i.geotag, i.place)).collect();
        RetrievalSet {
            db_images: imgs(Role::Db),
            db_tags: tags(Role::Db),
            query_images: imgs(Role::Query),
            query_tags: tags(Role::Query),
        }
    }
}
