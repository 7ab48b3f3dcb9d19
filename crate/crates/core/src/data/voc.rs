//! VOC-style directory layout:
//!
//! ```text
//! root/images/<id>.png|jpg     RGB
//! root/labels/<id>.png         single-channel class ids (255 = ignore)
//! root/splits/{train,val}.txt  one id per line
//! root/proposals/<id>.capr     optional proposal files
//! root/classes.txt             optional, one name per line, background first
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage as Rgb8};

use super::synthetic::class_appearance;
use super::{class_inventory, oracle_proposals, save_proposals, DatasetIndex, IndexEntry, LabeledImage};
use crate::error::{Error, Result};
use crate::grid::{LabelMap, RgbImage};
use crate::protocol::IGNORE;

fn image_path(root: &Path, id: &str) -> Option<PathBuf> {
    ["png", "jpg", "jpeg"]
        .iter()
        .map(|ext| root.join("images").join(format!("{id}.{ext}")))
        .find(|p| p.exists())
}

fn label_path(root: &Path, id: &str) -> PathBuf {
    root.join("labels").join(format!("{id}.png"))
}

fn read_label(path: &Path) -> Result<LabelMap> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    LabelMap::from_vec(h as usize, w as usize, img.into_raw())
}

pub(crate) fn load_sample(root: &Path, id: &str) -> Result<LabeledImage> {
    let path = image_path(root, id).ok_or_else(|| Error::UnknownImage(id.to_string()))?;
    let img = image::open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0.map(|v| v as f32 / 255.0)).collect();
    let image = RgbImage::from_vec(h as usize, w as usize, data)?;
    LabeledImage::new(id, image, read_label(&label_path(root, id))?)
}

/// Indexes one split of a VOC-layout root. Labels are read once to build
/// class inventories; pixels are loaded on demand afterwards.
pub fn load_voc_layout(root: &Path, split: &str) -> Result<DatasetIndex> {
    let list = std::fs::read_to_string(root.join("splits").join(format!("{split}.txt")))?;
    let ids: Vec<String> = list.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    let missing: Vec<String> = ids
        .iter()
        .filter(|id| !label_path(root, id).exists() || image_path(root, id).is_none())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingLabels(missing));
    }
    let mut entries = Vec::with_capacity(ids.len());
    let mut all = BTreeSet::new();
    for id in ids {
        let classes = class_inventory(&read_label(&label_path(root, &id))?);
        all.extend(classes.iter().copied());
        entries.push(IndexEntry { id, classes });
    }
    let classes_file = root.join("classes.txt");
    let n_fg = if classes_file.exists() {
        let names = std::fs::read_to_string(classes_file)?;
        names.lines().filter(|l| !l.trim().is_empty()).count().saturating_sub(1) as u8
    } else {
        all.iter().copied().filter(|&c| c != IGNORE).max().unwrap_or(0)
    };
    Ok(DatasetIndex::on_disk(n_fg, entries, root.to_path_buf()))
}

fn write_split(root: &Path, name: &str, index: &DatasetIndex, pad_to: usize) -> Result<()> {
    let mut list = String::new();
    for id in index.ids() {
        let s = index.load(&id)?;
        let (h, w) = s.image.dims();
        let rgb: Vec<u8> = s
            .image
            .data
            .iter()
            .flat_map(|p| p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect();
        Rgb8::from_raw(w as u32, h as u32, rgb)
            .expect("buffer sized from grid")
            .save(root.join("images").join(format!("{id}.png")))?;
        GrayImage::from_raw(w as u32, h as u32, s.label.data.clone())
            .expect("buffer sized from grid")
            .save(label_path(root, &id))?;
        save_proposals(&oracle_proposals(&s.label, pad_to)?, &root.join("proposals").join(format!("{id}.capr")))?;
        list.push_str(&id);
        list.push('\n');
    }
    std::fs::write(root.join("splits").join(format!("{name}.txt")), list)?;
    Ok(())
}

/// Writes train/val splits, oracle proposals and a class list.
pub fn export_voc_layout(root: &Path, train: &DatasetIndex, val: &DatasetIndex, pad_to: usize) -> Result<()> {
    for dir in ["images", "labels", "splits", "proposals"] {
        std::fs::create_dir_all(root.join(dir))?;
    }
    write_split(root, "train", train, pad_to)?;
    write_split(root, "val", val, pad_to)?;
    let mut names = String::from("background\n");
    for c in 1..=train.n_fg_classes() {
        let (shape, pattern) = class_appearance(c);
        names.push_str(&format!("{shape:?}_{pattern:?}\n").to_lowercase());
    }
    std::fs::write(root.join("classes.txt"), names)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_dataset;

    #[test]
    fn empty_split_gives_empty_index() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("splits")).unwrap();
        std::fs::write(dir.path().join("splits/train.txt"), "").unwrap();
        assert!(load_voc_layout(dir.path(), "train").unwrap().is_empty());
    }

    #[test]
    fn export_then_load_preserves_inventories() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_synthetic_dataset(5, 6, 12, 48).unwrap();
        let (train, val) = d.split_at(9);
        export_voc_layout(dir.path(), &train, &val, 16).unwrap();
        let back = load_voc_layout(dir.path(), "train").unwrap();
        assert_eq!(back.entries(), train.entries());
        assert_eq!(back.n_fg_classes(), 6);
        let back_val = load_voc_layout(dir.path(), "val").unwrap();
        assert_eq!(back_val.entries(), val.entries());
        let id = &train.ids()[0];
        assert_eq!(back.load(id).unwrap().label, train.load(id).unwrap().label);
        assert_eq!(back.proposals(id, 16).unwrap(), oracle_proposals(&train.load(id).unwrap().label, 16).unwrap());
    }

    #[test]
    fn twenty_one_class_root_reports_twenty() {
        let dir = tempfile::tempdir().unwrap();
        for d in ["images", "labels", "splits"] {
            std::fs::create_dir_all(dir.path().join(d)).unwrap();
        }
        let mut ids = String::new();
        for (i, c) in [5u8, 20].iter().enumerate() {
            let id = format!("2007_{i:06}");
            Rgb8::from_pixel(8, 8, image::Rgb([10, 20, 30])).save(dir.path().join(format!("images/{id}.png"))).unwrap();
            let mut lab = GrayImage::from_pixel(8, 8, image::Luma([0]));
            lab.put_pixel(2, 2, image::Luma([*c]));
            lab.put_pixel(3, 3, image::Luma([255]));
            lab.save(dir.path().join(format!("labels/{id}.png"))).unwrap();
            ids.push_str(&id);
            ids.push('\n');
        }
        std::fs::write(dir.path().join("splits/train.txt"), ids).unwrap();
        let idx = load_voc_layout(dir.path(), "train").unwrap();
        assert_eq!(idx.n_fg_classes(), 20);
        assert_eq!(idx.len(), 2);
    }

    #[test]
    fn missing_label_lists_stems() {
        let dir = tempfile::tempdir().unwrap();
        for d in ["images", "labels", "splits"] {
            std::fs::create_dir_all(dir.path().join(d)).unwrap();
        }
        Rgb8::from_pixel(4, 4, image::Rgb([0, 0, 0])).save(dir.path().join("images/a.png")).unwrap();
        std::fs::write(dir.path().join("splits/train.txt"), "a\nb\n").unwrap();
        match load_voc_layout(dir.path(), "train") {
            Err(Error::MissingLabels(ids)) => assert_eq!(ids, vec!["a", "b"]),
            other => panic!("{other:?}"),
        }
    }
}
