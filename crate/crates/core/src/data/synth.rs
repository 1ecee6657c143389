//! Procedural defect images in two size regimes.
//!
//! Backgrounds are multi-octave value noise. Each defect is painted inside a
//! pixel-aligned box whose area fraction is drawn log-uniformly from the
//! regime's bounds; the painted mask always touches all four box edges.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::labels::{write_labels, AnnotationRecord};
use crate::error::{HdError, Result};

pub const MAX_PLACEMENT_ATTEMPTS: usize = 100;
const MAX_REGENERATIONS: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Each defect covers at most 1% of the image.
    Tiny,
    /// Each defect covers 10% to 90% of the image.
    Large,
}

impl Regime {
    /// Bounds on the box area as a fraction of the image.
    pub fn area_bounds(self) -> (f64, f64) {
        match self {
            Regime::Tiny => (0.001, 0.01),
            Regime::Large => (0.1, 0.9),
        }
    }

    pub fn max_defects(self) -> usize {
        match self {
            Regime::Tiny => 3,
            Regime::Large => 1,
        }
    }

    /// Usual hypergraph threshold for datasets of this kind.
    pub fn default_epsilon(self) -> f64 {
        match self {
            Regime::Tiny => 3.0,
            Regime::Large => 6.0,
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = HdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Regime::Tiny),
            "large" => Ok(Regime::Large),
            other => Err(HdError::config("regime", format!("expected tiny or large, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    /// Filled ellipse, darker than the background.
    Spot,
    /// Bright diagonal stroke from one box corner to the other.
    Scratch,
    /// Elliptical ring.
    Hole,
}

impl Shape {
    /// Lower bound on painted pixels over box pixels.
    pub fn min_fill(self, w: usize, h: usize) -> f64 {
        match self {
            Shape::Spot => 0.5,
            Shape::Hole => 0.3,
            Shape::Scratch => w.max(h) as f64 / (w * h) as f64,
        }
    }

    fn colour(self) -> [f64; 3] {
        match self {
            Shape::Spot => [0.15, 0.1, 0.1],
            Shape::Scratch => [0.95, 0.95, 0.8],
            Shape::Hole => [0.1, 0.15, 0.45],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub base: f64,
    pub amplitude: f64,
    /// Coarsest noise cell in pixels; each octave halves it.
    pub cell: usize,
    pub octaves: usize,
}

impl Default for Background {
    fn default() -> Self {
        Self {
            base: 0.55,
            amplitude: 0.12,
            cell: 16,
            octaves: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub regime: Regime,
    pub n_images: usize,
    pub image_size: usize,
    /// Class `i` is painted with `classes[i]`.
    pub classes: Vec<Shape>,
    pub seed: u64,
    pub background: Background,
}

impl SynthSpec {
    pub fn new(regime: Regime, n_images: usize, image_size: usize, seed: u64) -> Self {
        Self {
            regime,
            n_images,
            image_size,
            classes: vec![Shape::Spot, Shape::Scratch, Shape::Hole],
            seed,
            background: Background::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(HdError::config("classes", "need at least one shape"));
        }
        let (lo, _) = self.regime.area_bounds();
        let px = (self.image_size * self.image_size) as f64;
        if self.image_size < 16 || lo * px < 4.0 {
            return Err(HdError::config(
                "image_size",
                format!("{} px is too small for the {:?} regime", self.image_size, self.regime),
            ));
        }
        Ok(())
    }
}

/// A painted defect in pixel coordinates: box `[x0, x0 + w) × [y0, y0 + h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Defect {
    pub class_id: usize,
    pub shape: Shape,
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl Defect {
    pub fn record(&self, size: usize) -> AnnotationRecord {
        let s = size as f64;
        AnnotationRecord {
            class_id: self.class_id,
            cx: (self.x0 as f64 + self.w as f64 / 2.0) / s,
            cy: (self.y0 as f64 + self.h as f64 / 2.0) / s,
            w: self.w as f64 / s,
            h: self.h as f64 / s,
        }
    }

    fn overlaps(&self, o: &Defect, margin: usize) -> bool {
        self.x0 < o.x0 + o.w + margin
            && o.x0 < self.x0 + self.w + margin
            && self.y0 < o.y0 + o.h + margin
            && o.y0 < self.y0 + self.h + margin
    }

    /// Whether pixel `(x, y)` (absolute) belongs to the painted mask.
    pub fn covers(&self, x: usize, y: usize) -> bool {
        if x < self.x0 || y < self.y0 || x >= self.x0 + self.w || y >= self.y0 + self.h {
            return false;
        }
        let (w, h) = (self.w as f64, self.h as f64);
        let px = (x - self.x0) as f64 + 0.5;
        let py = (y - self.y0) as f64 + 0.5;
        let (u, v) = ((px - w / 2.0) / (w / 2.0), (py - h / 2.0) / (h / 2.0));
        let r2 = u * u + v * v;
        match self.shape {
            Shape::Spot => r2 <= 1.0,
            Shape::Hole => r2 <= 1.0 && r2 >= 0.3,
            Shape::Scratch => {
                // distance from the pixel centre to the corner-to-corner segment
                let (ax, ay, bx, by) = (0.5, 0.5, w - 0.5, h - 0.5);
                let (dx, dy) = (bx - ax, by - ay);
                let len2 = dx * dx + dy * dy;
                let t = if len2 == 0.0 { 0.0 } else { (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0) };
                let (qx, qy) = (ax + t * dx - px, ay + t * dy - py);
                let thick = (w.min(h) / 4.0).max(0.75);
                (qx * qx + qy * qy).sqrt() <= thick
            }
        }
    }
}

/// One generated image: RGB values in `[0, 1]`, row-major `(y, x, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub size: usize,
    pub pixels: Vec<f64>,
    pub defects: Vec<Defect>,
    /// Times the image was rebuilt because a defect could not be placed.
    pub regenerations: u64,
}

impl SynthImage {
    pub fn records(&self) -> Vec<AnnotationRecord> {
        self.defects.iter().map(|d| d.record(self.size)).collect()
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let n = self.size as u32;
        image::RgbImage::from_fn(n, n, |x, y| {
            let i = (y as usize * self.size + x as usize) * 3;
            let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([q(self.pixels[i]), q(self.pixels[i + 1]), q(self.pixels[i + 2])])
        })
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sub_seed(seed: u64, index: usize, attempt: u64) -> u64 {
    splitmix(splitmix(seed ^ splitmix(index as u64)) ^ attempt)
}

fn value_noise(rng: &mut ChaCha8Rng, size: usize, bg: &Background) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    let mut cell = bg.cell.max(1);
    let mut amp = 1.0;
    let mut total = 0.0;
    for _ in 0..bg.octaves.max(1) {
        let g = size / cell + 2;
        let grid: Vec<f64> = (0..g * g).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64 / cell as f64, y as f64 / cell as f64);
                let (ix, iy) = (fx as usize, fy as usize);
                let (tx, ty) = (fx - ix as f64, fy - iy as f64);
                let (sx, sy) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
                let at = |i: usize, j: usize| grid[j * g + i];
                let top = at(ix, iy) * (1.0 - sx) + at(ix + 1, iy) * sx;
                let bot = at(ix, iy + 1) * (1.0 - sx) + at(ix + 1, iy + 1) * sx;
                out[y * size + x] += amp * (top * (1.0 - sy) + bot * sy);
            }
        }
        total += amp;
        amp *= 0.5;
        cell = (cell / 2).max(1);
    }
    out.iter().map(|v| bg.base + bg.amplitude * v / total).collect()
}

fn sample_defect(
    rng: &mut ChaCha8Rng,
    spec: &SynthSpec,
    class_id: usize,
    placed: &[Defect],
) -> Option<Defect> {
    let size = spec.image_size;
    let px = (size * size) as f64;
    let (lo, hi) = spec.regime.area_bounds();
    let margin = 1;
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let frac = (rng.gen_range(lo.ln()..hi.ln())).exp();
        let aspect = rng.gen_range(0.5f64.ln()..2.0f64.ln()).exp();
        let w = ((frac * px * aspect).sqrt()).round() as usize;
        let h = ((frac * px / aspect).sqrt()).round() as usize;
        if w < 2 || h < 2 || w > size - 2 * margin || h > size - 2 * margin {
            continue;
        }
        let a = (w * h) as f64 / px;
        if a < lo || a > hi {
            continue;
        }
        let d = Defect {
            class_id,
            shape: spec.classes[class_id],
            x0: rng.gen_range(margin..=size - margin - w),
            y0: rng.gen_range(margin..=size - margin - h),
            w,
            h,
        };
        if placed.iter().all(|o| !d.overlaps(o, 1)) {
            return Some(d);
        }
    }
    None
}

fn try_generate(spec: &SynthSpec, seed: u64) -> Option<SynthImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = spec.image_size;
    let lum = value_noise(&mut rng, size, &spec.background);
    let tint: [f64; 3] = [rng.gen_range(0.9..1.1), rng.gen_range(0.9..1.1), rng.gen_range(0.9..1.1)];
    let mut pixels = Vec::with_capacity(size * size * 3);
    for v in &lum {
        for t in tint {
            pixels.push(v * t);
        }
    }
    let count = rng.gen_range(1..=spec.regime.max_defects());
    let mut defects = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = rng.gen_range(0..spec.classes.len());
        defects.push(sample_defect(&mut rng, spec, class_id, &defects)?);
    }
    for d in &defects {
        let c = d.shape.colour();
        for y in d.y0..d.y0 + d.h {
            for x in d.x0..d.x0 + d.w {
                if d.covers(x, y) {
                    let i = (y * size + x) * 3;
                    for k in 0..3 {
                        let jitter = rng.gen_range(-0.03..0.03);
                        pixels[i + k] = (c[k] + jitter).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Some(SynthImage {
        size,
        pixels,
        defects,
        regenerations: 0,
    })
}

/// Image `index` of the set described by `spec`.
pub fn generate_image(spec: &SynthSpec, index: usize) -> Result<SynthImage> {
    spec.validate()?;
    for attempt in 0..MAX_REGENERATIONS {
        if let Some(mut img) = try_generate(spec, sub_seed(spec.seed, index, attempt)) {
            img.regenerations = attempt;
            if attempt > 0 {
                log::warn!("image {index}: regenerated {attempt} time(s) after failed defect placement");
            }
            return Ok(img);
        }
    }
    Err(HdError::Dataset(format!(
        "image {index}: no valid layout after {MAX_REGENERATIONS} regenerations"
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub labels: String,
    pub defects: usize,
    pub regenerations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SynthSpec,
    pub per_class_counts: BTreeMap<usize, usize>,
    pub images: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Write `img_NNNN.png` + `img_NNNN.txt` pairs and `manifest.json` into `out`.
pub fn synth_generate(spec: &SynthSpec, out: &Path) -> Result<Manifest> {
    spec.validate()?;
    std::fs::create_dir_all(out).map_err(|e| HdError::io(out, e))?;
    let mut manifest = Manifest {
        spec: spec.clone(),
        per_class_counts: (0..spec.classes.len()).map(|c| (c, 0)).collect(),
        images: Vec::with_capacity(spec.n_images),
    };
    for i in 0..spec.n_images {
        let img = generate_image(spec, i)?;
        let id = format!("img_{i:04}");
        let png = out.join(format!("{id}.png"));
        let txt = out.join(format!("{id}.txt"));
        img.to_rgb8().save(&png)?;
        write_labels(&txt, &img.records())?;
        for d in &img.defects {
            *manifest.per_class_counts.entry(d.class_id).or_default() += 1;
        }
        manifest.images.push(ManifestEntry {
            image: format!("{id}.png"),
            labels: format!("{id}.txt"),
            id,
            defects: img.defects.len(),
            regenerations: img.regenerations,
        });
    }
    let path = out.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| HdError::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let spec = SynthSpec::new(Regime::Tiny, 4, 64, 7);
        for i in 0..4 {
            assert_eq!(generate_image(&spec, i).unwrap(), generate_image(&spec, i).unwrap());
        }
        let other = SynthSpec { seed: 8, ..spec.clone() };
        assert_ne!(generate_image(&spec, 0).unwrap().pixels, generate_image(&other, 0).unwrap().pixels);
    }

    #[test]
    fn regime_area_invariants_over_many_seeds() {
        for regime in [Regime::Tiny, Regime::Large] {
            let (lo, hi) = regime.area_bounds();
            for seed in 0..40 {
                let spec = SynthSpec::new(regime, 1, 64, seed);
                let img = generate_image(&spec, 0).unwrap();
                for r in img.records() {
                    assert!(r.area() >= lo - 1e-12 && r.area() <= hi + 1e-12, "{regime:?} {r:?}");
                    AnnotationRecord::new(r.class_id, r.cx, r.cy, r.w, r.h).unwrap();
                }
            }
        }
    }

    #[test]
    fn mask_pixel_counts_match_boxes() {
        for seed in 0..30 {
            let spec = SynthSpec::new(Regime::Tiny, 1, 96, seed);
            let img = generate_image(&spec, 0).unwrap();
            for d in &img.defects {
                let (mut n, mut x_lo, mut x_hi, mut y_lo, mut y_hi) = (0usize, usize::MAX, 0, usize::MAX, 0);
                for y in 0..img.size {
                    for x in 0..img.size {
                        if d.covers(x, y) {
                            n += 1;
                            x_lo = x_lo.min(x);
                            x_hi = x_hi.max(x);
                            y_lo = y_lo.min(y);
                            y_hi = y_hi.max(y);
                        }
                    }
                }
                let area = d.w * d.h;
                assert!(n <= area);
                assert!(n as f64 >= d.shape.min_fill(d.w, d.h) * area as f64, "{d:?}: {n}");
                assert_eq!((x_lo, x_hi + 1, y_lo, y_hi + 1), (d.x0, d.x0 + d.w, d.y0, d.y0 + d.h), "{d:?}");
            }
        }
    }

    #[test]
    fn defects_do_not_overlap() {
        for seed in 0..30 {
            let img = generate_image(&SynthSpec::new(Regime::Tiny, 1, 64, seed), 0).unwrap();
            for (i, a) in img.defects.iter().enumerate() {
                for b in &img.defects[i + 1..] {
                    assert!(!a.overlaps(b, 0));
                }
            }
        }
    }
}
