//! Seeded train / held-out splits of synthetic images and their on-disk form.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::{generate, SceneKind, SyntheticScene};
use crate::checkpoint::Checkpoint;
use crate::error::{MoleError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub scenes: usize,
    pub face_closeups: usize,
    pub hand_closeups: usize,
    /// Held-out images per kind.
    pub heldout: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            scenes: 256,
            face_closeups: 128,
            hand_closeups: 128,
            heldout: 32,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("data.scenes", self.scenes),
            ("data.face_closeups", self.face_closeups),
            ("data.hand_closeups", self.hand_closeups),
            ("data.heldout", self.heldout),
        ];
        for (name, n) in counts {
            if n == 0 {
                return Err(MoleError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    SceneTrain,
    FaceTrain,
    HandTrain,
    SceneHeldout,
    FaceHeldout,
    HandHeldout,
}

impl Split {
    pub const ALL: [Split; 6] = [
        Split::SceneTrain,
        Split::FaceTrain,
        Split::HandTrain,
        Split::SceneHeldout,
        Split::FaceHeldout,
        Split::HandHeldout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::SceneTrain => "scene_train",
            Split::FaceTrain => "face_train",
            Split::HandTrain => "hand_train",
            Split::SceneHeldout => "scene_heldout",
            Split::FaceHeldout => "face_heldout",
            Split::HandHeldout => "hand_heldout",
        }
    }

    pub fn kind(self) -> SceneKind {
        match self {
            Split::SceneTrain | Split::SceneHeldout => SceneKind::Scene,
            Split::FaceTrain | Split::FaceHeldout => SceneKind::FaceCloseup,
            Split::HandTrain | Split::HandHeldout => SceneKind::HandCloseup,
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// splitmix64 finaliser; spreads (seed, split, index) into item seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn item_seed(data_seed: u64, split: Split, idx: usize) -> u64 {
    mix(mix(data_seed ^ (split.tag() << 56)) ^ idx as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    splits: Vec<(Split, Vec<SyntheticScene>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub split: Split,
    pub kind: SceneKind,
    pub seed: u64,
    pub face_present: bool,
    pub hand_present: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub image_size: usize,
    pub entries: Vec<ManifestEntry>,
}

impl Dataset {
    pub fn generate(cfg: &DataConfig, image_size: usize) -> Result<Self> {
        cfg.validate()?;
        let count = |s: Split| match s {
            Split::SceneTrain => cfg.scenes,
            Split::FaceTrain => cfg.face_closeups,
            Split::HandTrain => cfg.hand_closeups,
            _ => cfg.heldout,
        };
        let splits = Split::ALL
            .into_iter()
            .map(|s| {
                let items = (0..count(s))
                    .map(|i| generate(s.kind(), image_size, item_seed(cfg.seed, s, i)))
                    .collect::<Result<Vec<_>>>()?;
                Ok((s, items))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { image_size, splits })
    }

    pub fn split(&self, s: Split) -> &[SyntheticScene] {
        self.splits
            .iter()
            .find(|(k, _)| *k == s)
            .map(|(_, v)| v.as_slice())
            .unwrap_or(&[])
    }

    pub fn images(&self, splits: &[Split]) -> Vec<&Tensor<f32>> {
        splits
            .iter()
            .flat_map(|&s| self.split(s).iter().map(|x| &x.image))
            .collect()
    }

    pub fn to_checkpoint(&self) -> (Checkpoint, Manifest) {
        let mut ck = Checkpoint::new();
        let mut entries = Vec::new();
        for (split, items) in &self.splits {
            for (i, item) in items.iter().enumerate() {
                let name = format!("data.{split}.{i}");
                ck.insert(&name, &item.image).expect("unique");
                entries.push(ManifestEntry {
                    name,
                    split: *split,
                    kind: item.kind,
                    seed: item.seed,
                    face_present: item.face_present,
                    hand_present: item.hand_present,
                });
            }
        }
        let manifest = Manifest {
            image_size: self.image_size,
            entries,
        };
        (ck, manifest)
    }

    pub fn from_checkpoint(ck: &Checkpoint, manifest: &Manifest) -> Result<Self> {
        let mut splits: Vec<(Split, Vec<SyntheticScene>)> = Vec::new();
        for e in &manifest.entries {
            let image: Tensor<f32> = ck.get(&e.name)?;
            if image.shape() != [manifest.image_size, manifest.image_size] {
                return Err(MoleError::Malformed(format!(
                    "{} has shape {:?}",
                    e.name,
                    image.shape()
                )));
            }
            let item = SyntheticScene {
                image,
                face_present: e.face_present,
                hand_present: e.hand_present,
                kind: e.kind,
                seed: e.seed,
            };
            match splits.iter_mut().find(|(s, _)| *s == e.split) {
                Some((_, v)) => v.push(item),
                None => splits.push((e.split, vec![item])),
            }
        }
        Ok(Self {
            image_size: manifest.image_size,
            splits,
        })
    }

    /// Writes `data.mole` and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let (ck, manifest) = self.to_checkpoint();
        ck.save(dir.join("data.mole"))?;
        let path = dir.join("manifest.json");
        let mut json = serde_json::to_string_pretty(&manifest).expect("serializable manifest");
        json.push('\n');
        std::fs::write(&path, json).map_err(|e| MoleError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ck = Checkpoint::load(dir.join("data.mole"))?;
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| MoleError::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| MoleError::Malformed(format!("{}: {e}", path.display())))?;
        Self::from_checkpoint(&ck, &manifest)
    }
}
