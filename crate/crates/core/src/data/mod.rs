//! Image datasets: loading, splitting, augmentation and synthetic textures.
//!
//! A dataset directory holds one subdirectory per class:
//!
//! ```text
//! root/
//!   bark/0001.ppm
//!   bark/0002.pgm
//!   sand/...
//!   splits/1_train.txt   (optional, one relative path per line)
//!   splits/1_test.txt
//! ```
//!
//! Labels follow the sorted class names.

pub mod augment;
pub mod pnm;
pub mod splits;
pub mod synth;

pub use augment::{AugmentConfig, ChannelStats, Transform};
pub use splits::{split_random, Split};
pub use synth::{SynthClass, SynthKind, SyntheticTextureSpec};

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    /// `[3, H, W]` in `[0, 1]`.
    pub pixels: Tensor<f32>,
    pub label: usize,
    /// Path relative to the dataset root, or a synthetic sample id.
    pub source: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub samples: Vec<ImageSample>,
    pub splits: Vec<Split>,
    /// Files that could not be read, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.samples {
            if s.label >= self.n_classes() {
                return Err(Error::InvalidLabel { label: s.label, n_classes: self.n_classes() });
            }
        }
        for (k, split) in self.splits.iter().enumerate() {
            split.check(self.len()).map_err(|e| Error::InvalidArgument(format!("split {k}: {e}")))?;
        }
        Ok(())
    }
}

fn is_image(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(), Some("pgm" | "ppm"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Reads every class directory under `root`. Unreadable images are skipped
/// and listed in [`DatasetManifest::skipped`]. Split files, if present, are
/// attached in numeric order.
pub fn load_dataset(root: &Path) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::NotFound(root.to_path_buf()));
    }
    let mut manifest = DatasetManifest::default();
    for dir in sorted_entries(root)? {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if !dir.is_dir() || name == "splits" || name.starts_with('.') {
            continue;
        }
        let label = manifest.class_names.len();
        manifest.class_names.push(name.clone());
        for file in sorted_entries(&dir)?.into_iter().filter(|p| is_image(p)) {
            let source = format!("{name}/{}", file.file_name().unwrap().to_string_lossy());
            match pnm::read(&file) {
                Ok(pixels) => manifest.samples.push(ImageSample { pixels, label, source }),
                Err(e) => manifest.skipped.push((file, e.to_string())),
            }
        }
    }
    if manifest.class_names.is_empty() {
        return Err(Error::InvalidArgument(format!("{} has no class directories", root.display())));
    }
    if !manifest.skipped.is_empty() {
        log::warn!("skipped {} unreadable image(s) under {}", manifest.skipped.len(), root.display());
    }
    manifest.splits = splits::read_split_files(root, &manifest)?;
    Ok(manifest)
}

/// Writes the images as PPM files in the class-directory layout plus a
/// `manifest.csv` with `path,label,class_name` rows.
pub fn write_dataset(manifest: &DatasetManifest, root: &Path) -> Result<()> {
    for name in &manifest.class_names {
        let d = root.join(name);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let csv_path = root.join("manifest.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["path", "label", "class_name"])?;
    for s in &manifest.samples {
        pnm::write_ppm(&root.join(&s.source), &s.pixels)?;
        w.write_record([s.source.as_str(), &s.label.to_string(), &manifest.class_names[s.label]])?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_root_is_not_found() {
        assert!(matches!(load_dataset(Path::new("/definitely/not/here")), Err(Error::NotFound(_))));
    }

    #[test]
    fn loads_sorted_classes_and_skips_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        for class in ["zebra", "ant"] {
            fs::create_dir(dir.path().join(class)).unwrap();
            for i in 0..4 {
                let img = Tensor::full([3, 4, 4], i as f32 / 4.0);
                pnm::write_ppm(&dir.path().join(class).join(format!("{i}.ppm")), &img).unwrap();
            }
        }
        fs::write(dir.path().join("ant/broken.pgm"), b"P5 9 9").unwrap();
        let m = load_dataset(dir.path()).unwrap();
        assert_eq!(m.class_names, ["ant", "zebra"]);
        assert_eq!(m.len(), 8);
        assert_eq!(m.skipped.len(), 1);
        assert_eq!(m.samples[0].source, "ant/0.ppm");
        assert_eq!(m.samples[4].label, 1);
    }
}
