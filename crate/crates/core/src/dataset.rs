//! Directories of `<id>.png` images with `<id>_mask.png` ground truth.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::{GrayF64, Mask2D};

pub const MASK_SUFFIX: &str = "_mask";

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub image: GrayF64,
    pub gt: Mask2D,
}

/// Loads every image/mask pair in `dir`, sorted by id. A `.png` without its
/// mask, a mask without its image, or mismatched dims is an error.
pub fn load_pairs(dir: &Path) -> Result<Vec<LabeledImage>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut images = Vec::new();
    let mut masks = std::collections::BTreeSet::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        match stem.strip_suffix(MASK_SUFFIX) {
            Some(id) => {
                masks.insert(id.to_string());
            }
            None => images.push(stem.to_string()),
        }
    }
    images.sort();
    if images.is_empty() {
        return Err(Error::MalformedDataset(format!(
            "{}: no image/mask pairs",
            dir.display()
        )));
    }
    for id in &masks {
        if images.binary_search(id).is_err() {
            return Err(Error::MalformedDataset(format!(
                "mask {id}{MASK_SUFFIX}.png has no image"
            )));
        }
    }
    let mut out = Vec::with_capacity(images.len());
    for id in images {
        if !masks.contains(&id) {
            return Err(Error::MalformedDataset(format!(
                "{id}.png has no {id}{MASK_SUFFIX}.png"
            )));
        }
        let image = GrayF64::load(&dir.join(format!("{id}.png")))?;
        let gt = Mask2D::load(&dir.join(format!("{id}{MASK_SUFFIX}.png")))?;
        if gt.dims() != (image.height, image.width) {
            return Err(Error::MalformedDataset(format!(
                "{id}: image {}x{} but mask {:?}",
                image.height,
                image.width,
                gt.dims()
            )));
        }
        out.push(LabeledImage { id, image, gt });
    }
    Ok(out)
}

pub fn save_pair(dir: &Path, item: &LabeledImage) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    item.image.save(&dir.join(format!("{}.png", item.id)))?;
    item.gt.save(&dir.join(format!("{}{MASK_SUFFIX}.png", item.id)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: &str) -> LabeledImage {
        LabeledImage {
            id: id.into(),
            image: GrayF64::new(4, 6, (0..24).map(|i| i as f64 / 255.0).collect()).unwrap(),
            gt: Mask2D::from_fn(4, 6, |r, c| r == c),
        }
    }

    #[test]
    fn round_trip_sorted() {
        let dir = tempfile::tempdir().unwrap();
        for id in ["b", "a"] {
            save_pair(dir.path(), &item(id)).unwrap();
        }
        let back = load_pairs(dir.path()).unwrap();
        assert_eq!(back.iter().map(|x| x.id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(back[0], item("a"));
    }

    #[test]
    fn empty_dir_and_orphans_are_malformed() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_pairs(dir.path()), Err(Error::MalformedDataset(_))));
        let it = item("x");
        it.image.save(&dir.path().join("x.png")).unwrap();
        assert!(matches!(load_pairs(dir.path()), Err(Error::MalformedDataset(_))));
        fs::remove_file(dir.path().join("x.png")).unwrap();
        it.gt.save(&dir.path().join("x_mask.png")).unwrap();
        assert!(matches!(load_pairs(dir.path()), Err(Error::MalformedDataset(_))));
    }
}
