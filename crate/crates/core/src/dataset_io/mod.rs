//! Dataset manifests, splits, and image/mask/tensor files.
//!
//! On-disk layout of a dataset root:
//!
//! ```text
//! <root>/manifest.json
//! <root>/images/<id>.png
//! <root>/masks/<id>.png          # multiclass: one 8-bit channel of class IDs
//! <root>/masks/<id>.c<k>.png     # multilabel: one {0,255} PNG per channel
//! ```

pub mod tensor;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::{ColorType, DynamicImage};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, ClassMask, Image, Raster};
use crate::seed;

pub use tensor::{read_prob_map, read_score, read_tensor, write_prob_map, write_score, write_tensor, Tensor, TensorData};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: &str = "1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    FD,
    LD,
    ALD,
    ULD,
    VAL,
    TEST,
}

impl Split {
    pub const ALL: [Split; 6] = [Split::FD, Split::LD, Split::ALD, Split::ULD, Split::VAL, Split::TEST];

    /// Whether records of this split must carry ground-truth masks.
    pub fn is_masked(self) -> bool {
        !matches!(self, Split::ULD)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::FD => "FD",
            Split::LD => "LD",
            Split::ALD => "ALD",
            Split::ULD => "ULD",
            Split::VAL => "VAL",
            Split::TEST => "TEST",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// One channel of class IDs.
    Multiclass,
    /// One binary channel per class; channels may overlap.
    Multilabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    /// `(height, width, channels)`
    pub image_shape: (usize, usize, usize),
    pub mask_mode: MaskMode,
    /// Number of classes; `1` denotes a binary foreground/background dataset.
    pub num_classes: usize,
    #[serde(default)]
    pub splits: BTreeMap<Split, Vec<String>>,
    #[serde(default)]
    pub class_names: Option<Vec<String>>,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, image_shape: (usize, usize, usize), mask_mode: MaskMode, num_classes: usize) -> Self {
        Self {
            name: name.into(),
            image_shape,
            mask_mode,
            num_classes,
            splits: BTreeMap::new(),
            class_names: None,
        }
    }

    pub fn is_binary(&self) -> bool {
        self.mask_mode == MaskMode::Multiclass && self.num_classes == 1
    }

    /// Distinct label values a multiclass mask may carry. Binary datasets
    /// store `{0, 1}`; otherwise IDs run `0..num_classes`.
    pub fn label_count(&self) -> usize {
        self.num_classes.max(2)
    }

    /// Channels a backend prediction carries: one per class, so a binary
    /// dataset yields a single foreground probability.
    pub fn prediction_channels(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self, split: Split) -> &[String] {
        self.splits.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn set_split(&mut self, split: Split, ids: Vec<String>) {
        self.splits.insert(split, ids);
    }

    /// Structural checks that need no filesystem access.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Manifest("num_classes must be >= 1".into()));
        }
        if self.num_classes > 254 {
            return Err(Error::Manifest("at most 254 classes fit 8-bit masks with the IM class".into()));
        }
        let (h, w, c) = self.image_shape;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Manifest("image_shape entries must be positive".into()));
        }
        for (split, ids) in &self.splits {
            let mut seen = BTreeSet::new();
            for id in ids {
                if !seen.insert(id) {
                    return Err(Error::DuplicateId(format!("{id} in {}", split.as_str())));
                }
            }
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.num_classes {
                return Err(Error::Manifest(format!("{} class names for {} classes", names.len(), self.num_classes)));
            }
        }
        let ld: BTreeSet<_> = self.split(Split::LD).iter().collect();
        let uld: BTreeSet<_> = self.split(Split::ULD).iter().collect();
        if let Some(id) = ld.intersection(&uld).next() {
            return Err(Error::Manifest(format!("record {id} is in both LD and ULD")));
        }
        if self.splits.contains_key(&Split::LD) || self.splits.contains_key(&Split::ULD) {
            let fd: BTreeSet<_> = self.split(Split::FD).iter().collect();
            let union: BTreeSet<_> = ld.union(&uld).copied().collect();
            if union != fd {
                return Err(Error::Manifest("LD and ULD must partition FD".into()));
            }
        }
        Ok(())
    }

    /// Structural checks plus existence of every referenced image and mask.
    pub fn validate_files(&self, root: &Path) -> Result<()> {
        self.validate()?;
        for (split, ids) in &self.splits {
            for id in ids {
                let image = image_path(root, id);
                if !image.is_file() {
                    return Err(Error::MissingFile(image));
                }
                if split.is_masked() {
                    for mask in self.mask_paths(root, id) {
                        if !mask.is_file() {
                            return Err(Error::MissingFile(mask));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn mask_paths(&self, root: &Path, id: &str) -> Vec<PathBuf> {
        match self.mask_mode {
            MaskMode::Multiclass => vec![mask_path(root, id)],
            MaskMode::Multilabel => (0..self.num_classes).map(|k| mask_channel_path(root, id, k)).collect(),
        }
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Self = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        self.validate()?;
        write_json(&root.join(MANIFEST_FILE), self)
    }
}

/// Draws LD from `fd_ids` and sets the FD/LD/ULD splits.
///
/// The LD sample is uniform and depends only on `(fd_ids, ld_count, seed)`;
/// LD and ULD keep the FD ordering.
pub fn split_dataset(mut manifest: DatasetManifest, fd_ids: &[String], ld_count: usize, seed: u64) -> Result<DatasetManifest> {
    let mut seen = BTreeSet::new();
    for id in fd_ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    if ld_count == 0 || ld_count >= fd_ids.len() {
        return Err(Error::InvalidArgument(format!(
            "ld_count must satisfy 0 < ld_count < |FD| = {}, got {ld_count}",
            fd_ids.len()
        )));
    }
    let mut rng = seed::rng(seed);
    let mut chosen = index::sample(&mut rng, fd_ids.len(), ld_count).into_vec();
    chosen.sort_unstable();
    let mut in_ld = vec![false; fd_ids.len()];
    chosen.iter().for_each(|&i| in_ld[i] = true);
    let (ld, uld): (Vec<_>, Vec<_>) = fd_ids.iter().cloned().zip(in_ld).partition(|(_, l)| *l);
    manifest.set_split(Split::FD, fd_ids.to_vec());
    manifest.set_split(Split::LD, ld.into_iter().map(|(id, _)| id).collect());
    manifest.set_split(Split::ULD, uld.into_iter().map(|(id, _)| id).collect());
    manifest.validate()?;
    Ok(manifest)
}

/// Per-dataset LD counts as published alongside the four benchmark datasets.
pub fn default_ld_count(dataset: &str) -> Option<usize> {
    match dataset.to_ascii_lowercase().as_str() {
        "isic2018" | "isic" => Some(259),
        "hela" => Some(238),
        "suim" => Some(276),
        "cityscapes" => Some(297),
        _ => None,
    }
}

pub fn image_path(root: &Path, id: &str) -> PathBuf {
    root.join("images").join(format!("{id}.png"))
}

pub fn mask_path(root: &Path, id: &str) -> PathBuf {
    root.join("masks").join(format!("{id}.png"))
}

pub fn mask_channel_path(root: &Path, id: &str, channel: usize) -> PathBuf {
    root.join("masks").join(format!("{id}.c{channel}.png"))
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_image(path: &Path) -> Result<Image> {
    let dynamic = image::open(path)?;
    let (w, h) = (dynamic.width() as usize, dynamic.height() as usize);
    let (channels, data) = match dynamic {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw()),
        DynamicImage::ImageLumaA8(b) => (2, b.into_raw()),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw()),
        DynamicImage::ImageRgba8(b) => (4, b.into_raw()),
        other => (3, other.to_rgb8().into_raw()),
    };
    Raster::new(h, w, channels, data)
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let color = match image.channels() {
        1 => ColorType::L8,
        2 => ColorType::La8,
        3 => ColorType::Rgb8,
        4 => ColorType::Rgba8,
        c => return Err(Error::ChannelMismatch { expected: 3, found: c }),
    };
    ensure_parent(path)?;
    image::save_buffer(path, image.data(), image.width() as u32, image.height() as u32, color)?;
    Ok(())
}

fn read_gray(path: &Path) -> Result<Raster<u8>> {
    let raster = read_image(path)?;
    if raster.channels() != 1 {
        return Err(Error::ChannelMismatch { expected: 1, found: raster.channels() });
    }
    Ok(raster)
}

/// Reads a single-channel PNG of class IDs, rejecting IDs `>= label_count`.
pub fn read_class_mask(path: &Path, label_count: usize) -> Result<ClassMask> {
    let raster = read_gray(path)?;
    let mask = ClassMask::from_vec(raster.height(), raster.width(), raster.into_data())?;
    mask.validate(label_count)?;
    Ok(mask)
}

pub fn write_class_mask(path: &Path, mask: &ClassMask) -> Result<()> {
    write_image(path, mask.raster())
}

/// Binary masks are stored as class masks with values `{0, 1}`.
pub fn read_binary_mask(path: &Path) -> Result<BinaryMask> {
    read_class_mask(path, 2)?.to_binary()
}

pub fn write_binary_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    write_image(path, mask.raster())
}

/// Reads one `{0,255}` PNG per channel.
pub fn read_multilabel_mask(paths: &[PathBuf]) -> Result<Vec<BinaryMask>> {
    paths
        .iter()
        .map(|p| {
            let raster = read_gray(p)?;
            let (h, w) = raster.dims();
            let data = raster
                .into_data()
                .into_iter()
                .map(|v| match v {
                    0 => Ok(0),
                    255 => Ok(1),
                    other => Err(Error::ClassOutOfRange { id: other as u32, classes: 2 }),
                })
                .collect::<Result<Vec<u8>>>()?;
            BinaryMask::from_vec(h, w, data)
        })
        .collect()
}

pub fn write_multilabel_mask(paths: &[PathBuf], channels: &[BinaryMask]) -> Result<()> {
    if paths.len() != channels.len() {
        return Err(Error::ChannelMismatch { expected: paths.len(), found: channels.len() });
    }
    for (path, mask) in paths.iter().zip(channels) {
        write_image(path, &mask.raster().map(|v| v * 255))?;
    }
    Ok(())
}

/// A mask in whichever representation the dataset uses.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LabelMask {
    Class(ClassMask),
    MultiLabel(Vec<BinaryMask>),
}

/// A manifest bound to its root directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let manifest = DatasetManifest::load(&root)?;
        Ok(Self { root, manifest })
    }

    pub fn image(&self, id: &str) -> Result<Image> {
        read_image(&image_path(&self.root, id))
    }

    pub fn has_mask(&self, id: &str) -> bool {
        self.manifest.mask_paths(&self.root, id).iter().all(|p| p.is_file())
    }

    pub fn mask(&self, id: &str) -> Result<LabelMask> {
        match self.manifest.mask_mode {
            MaskMode::Multiclass => {
                Ok(LabelMask::Class(read_class_mask(&mask_path(&self.root, id), self.manifest.label_count())?))
            }
            MaskMode::Multilabel => {
                Ok(LabelMask::MultiLabel(read_multilabel_mask(&self.manifest.mask_paths(&self.root, id))?))
            }
        }
    }

    /// Multiclass ground truth; errors for multilabel datasets.
    pub fn class_mask(&self, id: &str) -> Result<ClassMask> {
        match self.mask(id)? {
            LabelMask::Class(m) => Ok(m),
            LabelMask::MultiLabel(_) => Err(Error::InvalidArgument("dataset is multilabel".into())),
        }
    }

    pub fn write_record(&self, id: &str, image: &Image, mask: Option<&LabelMask>) -> Result<()> {
        write_image(&image_path(&self.root, id), image)?;
        match mask {
            Some(LabelMask::Class(m)) => {
                m.validate(self.manifest.label_count())?;
                write_class_mask(&mask_path(&self.root, id), m)
            }
            Some(LabelMask::MultiLabel(ch)) => write_multilabel_mask(&self.manifest.mask_paths(&self.root, id), ch),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("r{i:04}")).collect()
    }

    fn base() -> DatasetManifest {
        DatasetManifest::new("t", (4, 4, 3), MaskMode::Multiclass, 8)
    }

    #[test]
    fn suim_sized_split() {
        let m = split_dataset(base(), &ids(2744), 276, 1).unwrap();
        assert_eq!(m.split(Split::LD).len(), 276);
        assert_eq!(m.split(Split::ULD).len(), 2468);
    }

    #[test]
    fn ld_count_bounds() {
        assert!(split_dataset(base(), &ids(10), 10, 1).is_err());
        assert!(split_dataset(base(), &ids(10), 0, 1).is_err());
        assert!(split_dataset(base(), &ids(10), 9, 1).is_ok());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut v = ids(5);
        v.push("r0001".into());
        assert!(matches!(split_dataset(base(), &v, 2, 1), Err(Error::DuplicateId(_))));
    }

    #[test]
    fn split_is_deterministic() {
        let a = split_dataset(base(), &ids(100), 10, 42).unwrap();
        let b = split_dataset(base(), &ids(100), 10, 42).unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        let c = split_dataset(base(), &ids(100), 10, 43).unwrap();
        assert_ne!(a.split(Split::LD), c.split(Split::LD));
    }

    #[test]
    fn overlapping_ld_uld_rejected() {
        let mut m = base();
        m.set_split(Split::FD, ids(3));
        m.set_split(Split::LD, vec!["r0000".into()]);
        m.set_split(Split::ULD, vec!["r0000".into(), "r0001".into(), "r0002".into()]);
        assert!(m.validate().is_err());
    }

    #[test]
    fn manifest_json_keys() {
        let m = split_dataset(base(), &ids(4), 1, 0).unwrap();
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        for key in ["name", "image_shape", "mask_mode", "num_classes", "splits", "class_names"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["mask_mode"], "multiclass");
        assert_eq!(v["image_shape"], serde_json::json!([4, 4, 3]));
        assert!(v["splits"].get("ULD").is_some());
    }

    #[test]
    fn class_mask_round_trip_and_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mask = ClassMask::from_rows(&[[0u8, 3], [7, 1]]).unwrap();
        write_class_mask(&path, &mask).unwrap();
        assert_eq!(read_class_mask(&path, 8).unwrap(), mask);

        let bad = ClassMask::from_rows(&[[200u8]]).unwrap();
        write_class_mask(&path, &bad).unwrap();
        assert!(matches!(read_class_mask(&path, 8), Err(Error::ClassOutOfRange { id: 200, .. })));
    }

    #[test]
    fn multilabel_overlap_preserved() {
        let dir = tempfile::tempdir().unwrap();
        let paths: Vec<_> = (0..3).map(|k| mask_channel_path(dir.path(), "a", k)).collect();
        let alive = BinaryMask::from_rows(&[[1u8, 1], [0, 0]]).unwrap();
        let dead = BinaryMask::from_rows(&[[0u8, 0], [1, 0]]).unwrap();
        let point = BinaryMask::from_rows(&[[1u8, 0], [0, 0]]).unwrap();
        let stack = vec![alive, dead, point];
        write_multilabel_mask(&paths, &stack).unwrap();
        assert_eq!(read_multilabel_mask(&paths).unwrap(), stack);
    }

    #[test]
    fn mask_channel_count_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        write_image(&path, &Raster::filled(2, 2, 3, 1u8)).unwrap();
        assert!(matches!(read_class_mask(&path, 8), Err(Error::ChannelMismatch { .. })));
    }
}
