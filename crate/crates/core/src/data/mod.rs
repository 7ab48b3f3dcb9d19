//! Datasets, augmentation, class-agnostic proposals and the replay bank.

mod augment;
mod proposals;
mod replay;
mod synthetic;
mod voc;

use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::Arc;

pub use augment::{augment, AugmentConfig, Transform};
pub use proposals::{decode_proposals, encode_proposals, load_proposals, oracle_proposals, save_proposals, ProposalSet};
pub use replay::{update_replay_memory, ReplayEntry, ReplayMemory};
pub use synthetic::{generate_synthetic_dataset, Pattern, Shape, SHAPE_VOCABULARY};
pub use voc::{export_voc_layout, load_voc_layout};

use crate::error::{Error, Result};
use crate::grid::{LabelMap, RgbImage};
use crate::protocol::{BACKGROUND, IGNORE};

/// Proposal slots per image used when proposals are derived from labels.
pub const PROPOSAL_SLOTS: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image_id: String,
    pub image: RgbImage,
    pub label: LabelMap,
}

impl LabeledImage {
    pub fn new(image_id: impl Into<String>, image: RgbImage, label: LabelMap) -> Result<Self> {
        if image.dims() != label.dims() {
            return Err(Error::shape(format!(
                "image {:?} vs label {:?}",
                image.dims(),
                label.dims()
            )));
        }
        Ok(Self { image_id: image_id.into(), image, label })
    }
}

/// Image, label and proposals transformed together.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: LabeledImage,
    pub proposals: ProposalSet,
}

/// Foreground classes present in a label map.
pub fn class_inventory(label: &LabelMap) -> BTreeSet<u8> {
    let mut seen = [false; 256];
    for &v in &label.data {
        seen[v as usize] = true;
    }
    (0..=255u8)
        .filter(|&c| seen[c as usize] && c != BACKGROUND && c != IGNORE)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    pub id: String,
    pub classes: BTreeSet<u8>,
}

#[derive(Clone, Debug)]
enum Source {
    Memory(Arc<HashMap<String, LabeledImage>>),
    Disk { root: PathBuf },
}

/// Immutable list of images with precomputed class inventories. Pixel data
/// is held in memory (synthetic sets) or read on demand (VOC layout).
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    n_fg_classes: u8,
    entries: Vec<IndexEntry>,
    source: Source,
}

impl DatasetIndex {
    pub fn from_images(n_fg_classes: u8, images: Vec<LabeledImage>) -> Self {
        let entries = images
            .iter()
            .map(|im| IndexEntry { id: im.image_id.clone(), classes: class_inventory(&im.label) })
            .collect();
        let map = images.into_iter().map(|im| (im.image_id.clone(), im)).collect();
        Self { n_fg_classes, entries, source: Source::Memory(Arc::new(map)) }
    }

    pub(crate) fn on_disk(n_fg_classes: u8, entries: Vec<IndexEntry>, root: PathBuf) -> Self {
        Self { n_fg_classes, entries, source: Source::Disk { root } }
    }

    pub fn n_fg_classes(&self) -> u8 {
        self.n_fg_classes
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }

    pub fn entry(&self, id: &str) -> Option<&IndexEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// First `n` entries and the remainder, sharing the same storage.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.entries.len());
        let mut head = self.clone();
        let mut tail = self.clone();
        head.entries.truncate(n);
        tail.entries.drain(..n);
        (head, tail)
    }

    pub fn load(&self, id: &str) -> Result<LabeledImage> {
        match &self.source {
            Source::Memory(map) => map.get(id).cloned().ok_or_else(|| Error::UnknownImage(id.to_string())),
            Source::Disk { root } => voc::load_sample(root, id),
        }
    }

    /// Stored proposals when the layout carries them, oracle proposals
    /// from the full label map otherwise.
    pub fn proposals(&self, id: &str, pad_to: usize) -> Result<ProposalSet> {
        if let Source::Disk { root } = &self.source {
            let path = root.join("proposals").join(format!("{id}.capr"));
            if path.exists() {
                return load_proposals(&path);
            }
        }
        let sample = self.load(id)?;
        oracle_proposals(&sample.label, pad_to)
    }
}
