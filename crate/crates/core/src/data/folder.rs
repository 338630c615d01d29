use std::fs;
use std::path::{Path, PathBuf};

use crate::attention::Mask;
use crate::data::{DatasetSplit, Sample};
use crate::error::{Error, Result};
use crate::imageio;
use crate::model::Label;

const IMAGE_EXTS: &[&str] = &["png", "jpg", "jpeg", "bmp"];
const GOOD: &str = "good";

fn sorted_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::ingest(dir, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::ingest(dir, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

fn name(p: &Path) -> String {
    p.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

fn load_image(path: &Path, size: usize, channels: usize) -> Result<crate::Tensor> {
    let img = imageio::open(path)?;
    Ok(imageio::image_to_tensor(&img, size, channels))
}

fn find_mask(gt_dir: &Path, image_stem: &str) -> Option<PathBuf> {
    IMAGE_EXTS.iter().flat_map(|ext| {
        [
            gt_dir.join(format!("{image_stem}_mask.{ext}")),
            gt_dir.join(format!("{image_stem}.{ext}")),
        ]
    })
    .find(|p| p.is_file())
}

fn load_category(root: &Path, prefix: &str, size: usize, channels: usize) -> Result<DatasetSplit> {
    let train_dir = root.join("train").join(GOOD);
    let test_dir = root.join("test");
    if !train_dir.is_dir() {
        return Err(Error::ingest(&train_dir, "missing train/good directory"));
    }
    if !test_dir.is_dir() {
        return Err(Error::ingest(&test_dir, "missing test directory"));
    }

    let mut split = DatasetSplit::default();
    for p in sorted_images(&train_dir)? {
        split.train_normal.push(Sample {
            image: load_image(&p, size, channels)?,
            label: Label::Normal,
            mask: None,
            id: format!("{prefix}train/{GOOD}/{}", stem(&p)),
        });
    }
    for defect_dir in sorted_subdirs(&test_dir)? {
        let defect = name(&defect_dir);
        let is_good = defect == GOOD;
        let gt_dir = root.join("ground_truth").join(&defect);
        for p in sorted_images(&defect_dir)? {
            let image = load_image(&p, size, channels)?;
            let s = stem(&p);
            let mask = if is_good {
                None
            } else {
                let mp = find_mask(&gt_dir, &s)
                    .ok_or_else(|| Error::ingest(&p, format!("no ground-truth mask under {}", gt_dir.display())))?;
                let m = imageio::image_to_mask(&imageio::open(&mp)?, size);
                Some(m)
            };
            split.test.push(Sample {
                image,
                label: if is_good { Label::Normal } else { Label::Anomalous },
                mask,
                id: format!("{prefix}test/{defect}/{s}"),
            });
        }
    }
    Ok(split)
}

/// Loads a category directory, or a root whose subdirectories are
/// categories (ids are then prefixed with the category name).
pub fn load_folder_dataset(root: &Path, size: usize, channels: usize) -> Result<DatasetSplit> {
    if !root.is_dir() {
        return Err(Error::ingest(root, "dataset root does not exist"));
    }
    let split = if root.join("train").is_dir() {
        load_category(root, "", size, channels)?
    } else {
        let mut all = DatasetSplit::default();
        for cat in sorted_subdirs(root)? {
            if !cat.join("train").is_dir() {
                continue;
            }
            let part = load_category(&cat, &format!("{}/", name(&cat)), size, channels)?;
            all.train_normal.extend(part.train_normal);
            all.test.extend(part.test);
        }
        if all.train_normal.is_empty() && all.test.is_empty() {
            return Err(Error::ingest(root, "no category directories with a train/ folder"));
        }
        all
    };
    split.validate()?;
    Ok(split)
}

/// Writes a split in the folder layout. Weak training anomalies are written
/// back under `test/` since the layout has no place for them.
pub fn export_folder_dataset(split: &DatasetSplit, root: &Path) -> Result<()> {
    for s in split.train_normal.iter().chain(&split.test).chain(&split.train_anomalous) {
        let rel = Path::new(&s.id);
        let img_path = root.join(rel).with_extension("png");
        imageio::save_png(&imageio::tensor_to_image(&s.image)?, &img_path)?;
        if s.label == Label::Anomalous {
            let defect = s.defect().unwrap_or("defect");
            let mask = s
                .mask
                .clone()
                .unwrap_or_else(|| Mask::empty(s.image.dim(1), s.image.dim(2)));
            let mp = root
                .join("ground_truth")
                .join(defect)
                .join(format!("{}_mask.png", stem(rel)));
            imageio::save_png(&image::DynamicImage::ImageLuma8(imageio::mask_to_image(&mask)), &mp)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use image::DynamicImage;

    fn write_gray(path: &Path, v: u8) {
        let img = image::GrayImage::from_pixel(16, 16, image::Luma([v]));
        imageio::save_png(&DynamicImage::ImageLuma8(img), path).unwrap();
    }

    #[test]
    fn counts_and_missing_mask() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for i in 0..10 {
            write_gray(&root.join(format!("train/good/{i:03}.png")), 120);
        }
        for i in 0..3 {
            write_gray(&root.join(format!("test/good/{i:03}.png")), 120);
        }
        for i in 0..5 {
            write_gray(&root.join(format!("test/scratch/{i:03}.png")), 200);
            write_gray(&root.join(format!("ground_truth/scratch/{i:03}_mask.png")), 255);
        }
        let split = load_folder_dataset(root, 8, 3).unwrap();
        assert_eq!(split.sizes(), (10, 0, 8));
        assert_eq!(split.test_anomalous().count(), 5);
        assert!(split.test_anomalous().all(|s| s.mask.as_ref().unwrap().count() == 64));
        assert_eq!(split.train_normal[0].image.shape(), &[3, 8, 8]);

        fs::remove_file(root.join("ground_truth/scratch/003_mask.png")).unwrap();
        let err = load_folder_dataset(root, 8, 3).unwrap_err();
        assert!(matches!(&err, Error::Ingestion { path, .. } if path.ends_with("test/scratch/003.png")), "{err}");

        fs::write(root.join("train/good/005.png"), b"not a png").unwrap();
        assert!(matches!(load_folder_dataset(root, 8, 3), Err(Error::Ingestion { .. })));
    }

    #[test]
    fn export_round_trip() {
        let cfg = SyntheticConfig {
            n_normal: 4,
            n_anomalous: 3,
            n_test_normal: 2,
            image_size: 16,
            defect_area_frac: 0.1,
            ..Default::default()
        };
        let split = generate_synthetic(&cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_folder_dataset(&split, dir.path()).unwrap();
        let back = load_folder_dataset(dir.path(), 16, 3).unwrap();
        assert_eq!(back.sizes(), split.sizes());
        for (a, b) in split.test.iter().zip(&back.test) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.mask, b.mask);
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }
}
