//! YOLO-txt labels, the synthetic defect generator and dataset loading.

mod labels;
mod synth;

pub use labels::{format_labels, parse_labels, read_labels, write_labels, AnnotationRecord};
pub use synth::{
    generate_image, synth_generate, Background, Defect, Manifest, ManifestEntry, Regime, Shape, SynthImage,
    SynthSpec, MANIFEST_FILE, MAX_PLACEMENT_ATTEMPTS,
};

use std::path::{Path, PathBuf};

use crate::error::{HdError, Result};
use crate::metrics::GroundTruth;
use crate::tensor::Tensor;

pub const SEED_ENV: &str = "HDYOLO_SEED";

/// `HDYOLO_SEED` when set and parseable, else `fallback`.
pub fn seed_from_env(fallback: u64) -> u64 {
    match std::env::var(SEED_ENV) {
        Ok(s) => s.trim().parse().unwrap_or_else(|_| {
            log::warn!("ignoring unparseable {SEED_ENV}={s:?}");
            fallback
        }),
        Err(_) => fallback,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub path: PathBuf,
    /// `(3, H, W)` in `[0, 1]`.
    pub image: Tensor,
    pub width: usize,
    pub height: usize,
    pub records: Vec<AnnotationRecord>,
}

impl Sample {
    /// Nearest-neighbour resize to a square `size`; labels are normalized
    /// so they carry over unchanged.
    pub fn image_at(&self, size: usize) -> Tensor {
        if self.width == size && self.height == size {
            return self.image.clone();
        }
        let mut out = Tensor::zeros(vec![3, size, size]);
        for c in 0..3 {
            for y in 0..size {
                let sy = y * self.height / size;
                for x in 0..size {
                    let sx = x * self.width / size;
                    out.data_mut()[(c * size + y) * size + x] =
                        self.image.data()[(c * self.height + sy) * self.width + sx];
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        self.samples
            .iter()
            .map(|s| GroundTruth {
                image_id: s.id.clone(),
                width: s.width,
                height: s.height,
                records: s.records.clone(),
            })
            .collect()
    }

    /// `(B, 3, size, size)` batch of the given sample indices.
    pub fn batch(&self, indices: &[usize], size: usize) -> Result<(Tensor, Vec<Vec<AnnotationRecord>>)> {
        let imgs: Vec<Tensor> = indices
            .iter()
            .map(|&i| {
                let t = self.samples[i].image_at(size);
                t.reshape(vec![1, 3, size, size])
            })
            .collect::<Result<_>>()?;
        let x = Tensor::stack(&imgs)?;
        Ok((x, indices.iter().map(|&i| self.samples[i].records.clone()).collect()))
    }

    pub fn max_class(&self) -> Option<usize> {
        self.samples.iter().flat_map(|s| s.records.iter().map(|r| r.class_id)).max()
    }
}

pub fn load_image(path: &Path) -> Result<(Tensor, usize, usize)> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(vec![3, h, w]);
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            t.data_mut()[(c * h + y as usize) * w + x as usize] = p.0[c] as f64 / 255.0;
        }
    }
    Ok((t, w, h))
}

/// Every `*.png` in `dir` (sorted by name) with its sibling `.txt` labels.
pub fn load_yolo_dataset(dir: &Path) -> Result<Dataset> {
    let entries = std::fs::read_dir(dir).map_err(|e| HdError::io(dir, e))?;
    let mut pngs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    pngs.sort();
    if pngs.is_empty() {
        return Err(HdError::Dataset(format!("no .png images in {}", dir.display())));
    }
    let mut samples = Vec::with_capacity(pngs.len());
    for p in pngs {
        let (image, width, height) = load_image(&p)?;
        let records = read_labels(&p.with_extension("txt"))?;
        samples.push(Sample {
            id: p.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
            path: p,
            image,
            width,
            height,
            records,
        });
    }
    Ok(Dataset { samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::new(Regime::Tiny, 4, 64, 7);
        let manifest = synth_generate(&spec, dir.path()).unwrap();
        assert_eq!(manifest.images.len(), 4);
        let ds = load_yolo_dataset(dir.path()).unwrap();
        assert_eq!(ds.len(), 4);
        for (i, s) in ds.samples.iter().enumerate() {
            let img = generate_image(&spec, i).unwrap();
            let want = img.records();
            assert_eq!(s.records.len(), want.len());
            for (a, b) in s.records.iter().zip(&want) {
                assert_eq!(a.class_id, b.class_id);
                for (x, y) in [(a.cx, b.cx), (a.cy, b.cy), (a.w, b.w), (a.h, b.h)] {
                    assert!((x - y).abs() <= 1e-6);
                }
            }
            let rgb = img.to_rgb8();
            assert_eq!(s.image.data()[5 * 64 + 9], rgb.get_pixel(9, 5).0[0] as f64 / 255.0);
        }
        let counted: usize = manifest.per_class_counts.values().sum();
        assert_eq!(counted, ds.samples.iter().map(|s| s.records.len()).sum::<usize>());
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = SynthSpec::new(Regime::Tiny, 4, 64, 7);
        synth_generate(&spec, a.path()).unwrap();
        synth_generate(&spec, b.path()).unwrap();
        for name in ["img_0000.png", "img_0003.txt", MANIFEST_FILE] {
            assert_eq!(
                std::fs::read(a.path().join(name)).unwrap(),
                std::fs::read(b.path().join(name)).unwrap()
            );
        }
    }

    #[test]
    fn missing_label_file_means_no_objects() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::new(Regime::Large, 1, 32, 1);
        synth_generate(&spec, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("img_0000.txt")).unwrap();
        let ds = load_yolo_dataset(dir.path()).unwrap();
        assert!(ds.samples[0].records.is_empty());
    }

    #[test]
    fn malformed_label_reports_location() {
        let dir = tempfile::tempdir().unwrap();
        synth_generate(&SynthSpec::new(Regime::Large, 1, 32, 1), dir.path()).unwrap();
        std::fs::write(dir.path().join("img_0000.txt"), "0 0.5 0.5 0.2 0.2\n0 0.5\n").unwrap();
        let e = load_yolo_dataset(dir.path()).unwrap_err();
        assert!(matches!(e, HdError::Parse { line: 2, .. }), "{e}");
    }

    #[test]
    fn batch_stacks_and_resizes() {
        let dir = tempfile::tempdir().unwrap();
        synth_generate(&SynthSpec::new(Regime::Tiny, 2, 64, 3), dir.path()).unwrap();
        let ds = load_yolo_dataset(dir.path()).unwrap();
        let (x, t) = ds.batch(&[1, 0], 32).unwrap();
        assert_eq!(x.shape(), &[2, 3, 32, 32]);
        assert_eq!(t[0], ds.samples[1].records);
    }
}
