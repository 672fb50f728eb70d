//! Synthetic two-domain detection benchmark plus dataset persistence.
//!
//! Source images are solid class-colored shapes (circle, square, triangle)
//! on a plain background. Target images reuse the same layout process with a
//! controllable appearance shift: a pixelwise color-channel rotation that
//! permutes the class palette, a background texture swap, additive noise and
//! a brightness offset. Annotations are exact by construction and every
//! sample derives its own PRNG stream from (seed, index), so generation is
//! deterministic and order-independent.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox};
use crate::error::{Error, Result};
use crate::image_io::{read_netpbm, write_ppm};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

pub const IMAGE_SIZE: usize = 64;
pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["circle", "square", "triangle"];

const MIN_SIDE: f32 = 0.2;
const MAX_SIDE: f32 = 0.5;
const MAX_OBJECTS: usize = 3;
const MAX_OVERLAP_IOU: f32 = 0.3;
const PLACEMENT_ATTEMPTS: usize = 100;

/// Class palette (normalized RGB). The channel rotation used by
/// `palette_swap` maps each class color close to the next class's color,
/// which is the hardest version of the appearance shift: color alone then
/// points at the wrong class on the target domain.
const PALETTE: [[f32; 3]; NUM_CLASSES] = [
    [0.85, 0.20, 0.20], // circle: red
    [0.20, 0.80, 0.25], // square: green
    [0.25, 0.30, 0.85], // triangle: blue
];
const PLAIN_BACKGROUND: f32 = 0.42;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// Domain indicator: 1 for source images, 0 for target images.
    pub fn label(&self) -> u8 {
        match self {
            Domain::Source => 1,
            Domain::Target => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundTexture {
    #[default]
    Plain,
    Stripes,
    Speckle,
}

/// Appearance shift applied to the target domain at generation time.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    #[serde(default)]
    pub palette_swap: bool,
    #[serde(default)]
    pub noise_sigma: f32,
    #[serde(default)]
    pub background_texture: BackgroundTexture,
    #[serde(default)]
    pub brightness_shift: f32,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec::null()
    }
}

impl ShiftSpec {
    /// No shift at all: the two domains are statistically identical.
    pub fn null() -> ShiftSpec {
        ShiftSpec {
            palette_swap: false,
            noise_sigma: 0.0,
            background_texture: BackgroundTexture::Plain,
            brightness_shift: 0.0,
        }
    }

    /// The default benchmark shift: palette rotation, speckle background,
    /// mild noise.
    pub fn standard() -> ShiftSpec {
        ShiftSpec {
            palette_swap: true,
            noise_sigma: 0.05,
            background_texture: BackgroundTexture::Speckle,
            brightness_shift: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        if !(-0.5..=0.5).contains(&self.brightness_shift) {
            return Err(Error::Config("brightness_shift must be in [-0.5, 0.5]".into()));
        }
        Ok(())
    }
}

/// One image with its annotations and domain flag.
#[derive(Clone, Debug)]
pub struct Sample {
    /// 1x3xSxS tensor in [0, 1].
    pub image: Tensor,
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
    pub domain: Domain,
    pub image_id: String,
}

/// A target-domain image as the trainer sees it: no annotation fields exist
/// at all, so the unsupervised contract holds structurally.
#[derive(Clone, Debug)]
pub struct UnlabeledImage {
    pub image: Tensor,
    pub image_id: String,
}

impl Sample {
    pub fn strip_annotations(&self) -> UnlabeledImage {
        UnlabeledImage {
            image: self.image.clone(),
            image_id: self.image_id.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// generation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
struct PlacedObject {
    class: usize,
    bbox: BBox,
}

fn sample_layout(rng: &mut Rng) -> Vec<PlacedObject> {
    let want = 1 + rng.below(MAX_OBJECTS);
    let mut objects: Vec<PlacedObject> = Vec::new();
    'objects: for _ in 0..want {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let class = rng.below(NUM_CLASSES);
            let side = rng.uniform(MIN_SIDE, MAX_SIDE);
            let cx = rng.uniform(side / 2.0, 1.0 - side / 2.0);
            let cy = rng.uniform(side / 2.0, 1.0 - side / 2.0);
            let bbox = BBox::new(
                cx - side / 2.0,
                cy - side / 2.0,
                cx + side / 2.0,
                cy + side / 2.0,
            );
            if objects.iter().all(|o| iou(&o.bbox, &bbox) <= MAX_OVERLAP_IOU) {
                objects.push(PlacedObject { class, bbox });
                continue 'objects;
            }
        }
        // placement infeasible: settle for fewer objects
        break;
    }
    objects
}

/// Pixel-center membership test for a shape class inside its box.
pub fn shape_contains(class: usize, bbox: &BBox, x: f32, y: f32) -> bool {
    match class {
        0 => {
            let (cx, cy) = bbox.center();
            let r = bbox.width() / 2.0;
            let (dx, dy) = (x - cx, y - cy);
            dx * dx + dy * dy <= r * r
        }
        1 => x >= bbox.xmin && x <= bbox.xmax && y >= bbox.ymin && y <= bbox.ymax,
        2 => {
            // apex at top-center, base along the bottom edge
            if y < bbox.ymin || y > bbox.ymax {
                return false;
            }
            let t = (y - bbox.ymin) / bbox.height();
            let (cx, _) = bbox.center();
            let half = t * bbox.width() / 2.0;
            x >= cx - half && x <= cx + half
        }
        _ => unreachable!("unknown class {class}"),
    }
}

fn render(rng: &mut Rng, objects: &[PlacedObject], shift: &ShiftSpec) -> Vec<f32> {
    let s = IMAGE_SIZE;
    let mut rgb = vec![0.0f32; 3 * s * s];

    // background
    match shift.background_texture {
        BackgroundTexture::Plain => {
            rgb.fill(PLAIN_BACKGROUND);
        }
        BackgroundTexture::Stripes => {
            for y in 0..s {
                for x in 0..s {
                    let v = if ((x + y) / 8) % 2 == 0 { 0.30 } else { 0.55 };
                    for c in 0..3 {
                        rgb[(c * s + y) * s + x] = v;
                    }
                }
            }
        }
        BackgroundTexture::Speckle => {
            for y in 0..s {
                for x in 0..s {
                    let v = rng.uniform(0.20, 0.65);
                    for c in 0..3 {
                        rgb[(c * s + y) * s + x] = v;
                    }
                }
            }
        }
    }

    // objects, painted in order
    for obj in objects {
        let color = PALETTE[obj.class];
        for y in 0..s {
            let ny = (y as f32 + 0.5) / s as f32;
            for x in 0..s {
                let nx = (x as f32 + 0.5) / s as f32;
                if shape_contains(obj.class, &obj.bbox, nx, ny) {
                    for c in 0..3 {
                        rgb[(c * s + y) * s + x] = color[c];
                    }
                }
            }
        }
    }

    // pixelwise color permutation: (r, g, b) -> (b, r, g)
    if shift.palette_swap {
        for p in 0..s * s {
            let r = rgb[p];
            let g = rgb[s * s + p];
            let b = rgb[2 * s * s + p];
            rgb[p] = b;
            rgb[s * s + p] = r;
            rgb[2 * s * s + p] = g;
        }
    }

    if shift.brightness_shift != 0.0 {
        for v in rgb.iter_mut() {
            *v += shift.brightness_shift;
        }
    }
    if shift.noise_sigma > 0.0 {
        for v in rgb.iter_mut() {
            *v += shift.noise_sigma * rng.normal();
        }
    }

    // quantize to u8 and back so saved datasets round-trip bitwise
    for v in rgb.iter_mut() {
        let q = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        *v = q as f32 / 255.0;
    }
    rgb
}

fn generate_sample(gen_stream: &Rng, index: u64, domain: Domain, shift: &ShiftSpec) -> Sample {
    let mut rng = gen_stream.substream(index);
    let objects = sample_layout(&mut rng);
    let rgb = render(&mut rng, &objects, shift);
    let prefix = match domain {
        Domain::Source => "src",
        Domain::Target => "tgt",
    };
    Sample {
        image: Tensor::from_vec(Shape::new(1, 3, IMAGE_SIZE, IMAGE_SIZE), rgb),
        boxes: objects.iter().map(|o| o.bbox).collect(),
        labels: objects.iter().map(|o| o.class).collect(),
        domain,
        image_id: format!("{prefix}_{index:05}"),
    }
}

/// Generate a source set and a shifted target set. Same layout process on
/// both sides; the target applies `shift` at render time.
pub fn gen_domain_pair(
    n_source: usize,
    n_target: usize,
    shift: &ShiftSpec,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    shift.validate()?;
    let src_stream = Rng::stream(seed, "gen.source");
    let tgt_stream = Rng::stream(seed, "gen.target");
    let null = ShiftSpec::null();
    let source = (0..n_source as u64)
        .map(|i| generate_sample(&src_stream, i, Domain::Source, &null))
        .collect();
    let target = (0..n_target as u64)
        .map(|i| generate_sample(&tgt_stream, i, Domain::Target, shift))
        .collect();
    Ok((source, target))
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    file: String,
    boxes: Vec<[f32; 4]>,
    labels: Vec<usize>,
    domain: Domain,
}

#[derive(Serialize, Deserialize)]
pub struct GenSpec {
    pub seed: u64,
    pub n_source: usize,
    pub n_target: usize,
    pub shift: ShiftSpec,
}

/// Write `images/` (P6 PPM), `manifest.json` and optionally `genspec.json`.
pub fn save_dataset(dir: &Path, samples: &[Sample], genspec: Option<&GenSpec>) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let mut manifest = Vec::with_capacity(samples.len());
    for sample in samples {
        let s = IMAGE_SIZE;
        let data = sample.image.data();
        let mut rgb = vec![0u8; 3 * s * s];
        for y in 0..s {
            for x in 0..s {
                for c in 0..3 {
                    let v = data[(c * s + y) * s + x];
                    rgb[(y * s + x) * 3 + c] = (v * 255.0).round() as u8;
                }
            }
        }
        let file = format!("{}.ppm", sample.image_id);
        write_ppm(&images.join(&file), s, s, &rgb)?;
        manifest.push(ManifestRecord {
            file,
            boxes: sample
                .boxes
                .iter()
                .map(|b| [b.xmin, b.ymin, b.xmax, b.ymax])
                .collect(),
            labels: sample.labels.clone(),
            domain: sample.domain,
        });
    }
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    if let Some(spec) = genspec {
        fs::write(dir.join("genspec.json"), serde_json::to_vec_pretty(spec)?)?;
    }
    Ok(())
}

/// Load a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Vec<ManifestRecord> = serde_json::from_slice(
        &fs::read(&manifest_path)
            .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", manifest_path.display())))?,
    )?;
    let mut samples = Vec::with_capacity(manifest.len());
    for (idx, rec) in manifest.iter().enumerate() {
        if rec.boxes.len() != rec.labels.len() {
            return Err(Error::Dataset(format!(
                "{}: record {idx} ({}): {} boxes but {} labels",
                manifest_path.display(),
                rec.file,
                rec.boxes.len(),
                rec.labels.len()
            )));
        }
        let mut boxes = Vec::with_capacity(rec.boxes.len());
        for (bi, b) in rec.boxes.iter().enumerate() {
            let ok = b[0] < b[2]
                && b[1] < b[3]
                && b.iter().all(|v| (0.0..=1.0).contains(v));
            if !ok {
                return Err(Error::Dataset(format!(
                    "{}: record {idx} ({}), box {bi} out of range: {b:?}",
                    manifest_path.display(),
                    rec.file
                )));
            }
            boxes.push(BBox::new(b[0], b[1], b[2], b[3]));
        }
        for (li, &l) in rec.labels.iter().enumerate() {
            if l >= NUM_CLASSES {
                return Err(Error::Dataset(format!(
                    "{}: record {idx} ({}), label {li} = {l} outside class range",
                    manifest_path.display(),
                    rec.file
                )));
            }
        }
        let path = dir.join("images").join(&rec.file);
        let (channels, w, h, bytes) = read_netpbm(&path)?;
        if channels != 3 || w != IMAGE_SIZE || h != IMAGE_SIZE {
            return Err(Error::Dataset(format!(
                "{}: expected 3x{IMAGE_SIZE}x{IMAGE_SIZE} P6 image, got {channels}x{w}x{h}",
                path.display()
            )));
        }
        let mut data = vec![0.0f32; 3 * w * h];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    data[(c * h + y) * w + x] = bytes[(y * w + x) * 3 + c] as f32 / 255.0;
                }
            }
        }
        samples.push(Sample {
            image: Tensor::from_vec(Shape::new(1, 3, h, w), data),
            boxes,
            labels: rec.labels.clone(),
            domain: rec.domain,
            image_id: rec
                .file
                .strip_suffix(".ppm")
                .unwrap_or(&rec.file)
                .to_string(),
        });
    }
    Ok(samples)
}

pub fn split_domains(samples: Vec<Sample>) -> (Vec<Sample>, Vec<Sample>) {
    samples
        .into_iter()
        .partition(|s| s.domain == Domain::Source)
}

// ---------------------------------------------------------------------------
// few-shot subsetting
// ---------------------------------------------------------------------------

/// Deterministic subset with `per_class` images per class; an image
/// containing class `c` counts toward `c`. Annotations are only consulted
/// here, before stripping — the trainer never sees them.
pub fn few_shot_subset(
    target: &[Sample],
    per_class: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    if per_class == 0 {
        return Err(Error::Dataset("per_class must be >= 1".into()));
    }
    let mut rng = Rng::stream(seed, "fewshot");
    let mut chosen = vec![false; target.len()];
    for class in 0..NUM_CLASSES {
        let mut candidates: Vec<usize> = target
            .iter()
            .enumerate()
            .filter(|(_, s)| s.labels.contains(&class))
            .map(|(i, _)| i)
            .collect();
        if candidates.len() < per_class {
            return Err(Error::Dataset(format!(
                "class '{}' has only {} target images, need {per_class}",
                CLASS_NAMES[class],
                candidates.len()
            )));
        }
        rng.shuffle(&mut candidates);
        for &i in candidates.iter().take(per_class) {
            chosen[i] = true;
        }
    }
    Ok(target
        .iter()
        .zip(&chosen)
        .filter(|(_, &c)| c)
        .map(|(s, _)| s.clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let shift = ShiftSpec::standard();
        let (s1, t1) = gen_domain_pair(4, 4, &shift, 42).unwrap();
        let (s2, t2) = gen_domain_pair(4, 4, &shift, 42).unwrap();
        for (a, b) in s1.iter().zip(&s2).chain(t1.iter().zip(&t2)) {
            assert_eq!(*a.image.data(), *b.image.data());
            assert_eq!(a.boxes, b.boxes);
            assert_eq!(a.labels, b.labels);
        }
        let (s3, _) = gen_domain_pair(4, 0, &shift, 43).unwrap();
        assert_ne!(*s1[0].image.data(), *s3[0].image.data());
    }

    #[test]
    fn boxes_are_inside_unit_square_with_min_area() {
        let (src, tgt) = gen_domain_pair(30, 30, &ShiftSpec::standard(), 7).unwrap();
        for s in src.iter().chain(&tgt) {
            assert_eq!(s.boxes.len(), s.labels.len());
            assert!(!s.boxes.is_empty());
            for b in &s.boxes {
                assert!(b.xmin >= 0.0 && b.ymin >= 0.0 && b.xmax <= 1.0 && b.ymax <= 1.0);
                assert!(b.area() >= 0.04 - 1e-6);
            }
            for i in 0..s.boxes.len() {
                for j in i + 1..s.boxes.len() {
                    assert!(iou(&s.boxes[i], &s.boxes[j]) <= MAX_OVERLAP_IOU + 1e-6);
                }
            }
        }
    }

    #[test]
    fn boxes_tightly_bound_their_shapes() {
        // Pixel-count oracle: the analytic pixel-center membership count per
        // object, relative to its box pixel area, stays above 0.45.
        let (src, _) = gen_domain_pair(120, 0, &ShiftSpec::null(), 11).unwrap();
        let s = IMAGE_SIZE as f32;
        for sample in &src {
            for (b, &class) in sample.boxes.iter().zip(&sample.labels) {
                let mut count = 0usize;
                for y in 0..IMAGE_SIZE {
                    for x in 0..IMAGE_SIZE {
                        let nx = (x as f32 + 0.5) / s;
                        let ny = (y as f32 + 0.5) / s;
                        if shape_contains(class, b, nx, ny) {
                            count += 1;
                        }
                    }
                }
                let box_pixels = (b.width() * s) * (b.height() * s);
                let ratio = count as f32 / box_pixels;
                assert!(
                    ratio >= 0.45,
                    "class {} box {:?} fill ratio {ratio}",
                    CLASS_NAMES[class],
                    b
                );
            }
        }
    }

    #[test]
    fn palette_swap_rotates_channels() {
        let shift = ShiftSpec {
            palette_swap: true,
            ..ShiftSpec::null()
        };
        let (_, tgt) = gen_domain_pair(0, 6, &shift, 5).unwrap();
        let (_, plain) = gen_domain_pair(0, 6, &ShiftSpec::null(), 5).unwrap();
        for (swapped, base) in tgt.iter().zip(&plain) {
            assert_eq!(swapped.boxes, base.boxes, "geometry must be unchanged");
            let a = swapped.image.data();
            let b = base.image.data();
            let plane = IMAGE_SIZE * IMAGE_SIZE;
            for p in 0..plane {
                assert_eq!(a[p], b[2 * plane + p]); // r' = b
                assert_eq!(a[plane + p], b[p]); // g' = r
                assert_eq!(a[2 * plane + p], b[plane + p]); // b' = g
            }
        }
    }

    #[test]
    fn dataset_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let (mut src, tgt) = gen_domain_pair(3, 3, &ShiftSpec::standard(), 9).unwrap();
        src.extend(tgt);
        save_dataset(dir.path(), &src, None).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), src.len());
        for (a, b) in loaded.iter().zip(&src) {
            assert_eq!(a.image_id, b.image_id);
            assert_eq!(a.domain, b.domain);
            assert_eq!(a.boxes, b.boxes);
            let (ad, bd) = (a.image.data(), b.image.data());
            assert!(ad.iter().zip(bd.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn invalid_box_names_record() {
        let dir = tempfile::tempdir().unwrap();
        let (src, _) = gen_domain_pair(1, 0, &ShiftSpec::null(), 1).unwrap();
        save_dataset(dir.path(), &src, None).unwrap();
        let manifest = dir.path().join("manifest.json");
        let text = fs::read_to_string(&manifest).unwrap();
        let mut records: serde_json::Value = serde_json::from_str(&text).unwrap();
        records[0]["boxes"][0] = serde_json::json!([0.5, 0.2, 0.5, 0.8]);
        fs::write(&manifest, serde_json::to_vec(&records).unwrap()).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("record 0"), "{err}");
        assert!(err.to_string().contains("src_00000"), "{err}");
    }

    #[test]
    fn unlabeled_target_record_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let (_, mut tgt) = gen_domain_pair(0, 1, &ShiftSpec::null(), 2).unwrap();
        tgt[0].boxes.clear();
        tgt[0].labels.clear();
        save_dataset(dir.path(), &tgt, None).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert!(loaded[0].boxes.is_empty());
    }

    #[test]
    fn few_shot_subset_is_deterministic_and_counts() {
        let (_, tgt) = gen_domain_pair(0, 60, &ShiftSpec::standard(), 21).unwrap();
        let a = few_shot_subset(&tgt, 3, 5).unwrap();
        let b = few_shot_subset(&tgt, 3, 5).unwrap();
        let ids =
            |xs: &[Sample]| xs.iter().map(|s| s.image_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));
        assert!(a.len() <= 9);
        for class in 0..NUM_CLASSES {
            let n = a.iter().filter(|s| s.labels.contains(&class)).count();
            assert!(n >= 3, "class {class} has only {n} images");
        }
        // the full set is its own subset when per_class covers everything
        let min_class = (0..NUM_CLASSES)
            .map(|c| tgt.iter().filter(|s| s.labels.contains(&c)).count())
            .min()
            .unwrap();
        let all = few_shot_subset(&tgt, min_class, 5).unwrap();
        assert!(all.len() <= tgt.len());
        let err = few_shot_subset(&tgt, tgt.len() + 1, 5).unwrap_err();
        assert!(err.to_string().contains("only"));
    }
}
