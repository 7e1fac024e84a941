//! Seeded synthetic aerial scenes, patch extraction, and augmentation.
//!
//! Scenes are drawn onto an RGB canvas with anti-aliased coverage: each
//! shape blends into the image by its per-pixel coverage fraction and
//! claims the label wherever coverage reaches one half. Later shapes win
//! overlaps. The draw order — vegetation, roads, buildings, cars — also
//! encodes the context the classes need: roads and buildings share a
//! grayish palette and are told apart mostly by geometry, and cars only
//! appear on road centerlines.
//!
//! Class indices: 0 background, 1 building, 2 road, 3 car, 4 vegetation.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor::{LabelMap, Tensor};

pub const CLASS_NAMES: [&str; 5] = ["background", "building", "road", "car", "vegetation"];

pub const BACKGROUND: u8 = 0;
pub const BUILDING: u8 = 1;
pub const ROAD: u8 = 2;
pub const CAR: u8 = 3;
pub const VEGETATION: u8 = 4;

/// Recipe for one synthetic scene. Count fields are inclusive ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub buildings: (usize, usize),
    pub roads: (usize, usize),
    pub cars: (usize, usize),
    pub vegetation: (usize, usize),
    /// Standard deviation of the additive Gaussian pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec::desk()
    }
}

impl SceneSpec {
    /// Desk-scale default: 128x128 scenes with buildings, roads and cars
    /// (vegetation off, matching the 4-class desk model).
    pub fn desk() -> Self {
        SceneSpec {
            height: 128,
            width: 128,
            buildings: (3, 6),
            roads: (2, 4),
            cars: (4, 9),
            vegetation: (0, 0),
            noise: 0.02,
            seed: 0,
        }
    }

    /// Number of classes scenes from this description can contain; the
    /// model head and the evaluation must agree with it.
    pub fn classes(&self) -> usize {
        if self.vegetation.1 > 0 {
            5
        } else {
            4
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "scene must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        for (name, range) in [
            ("buildings", self.buildings),
            ("roads", self.roads),
            ("cars", self.cars),
            ("vegetation", self.vegetation),
        ] {
            if range.0 > range.1 {
                return Err(Error::Config(format!(
                    "{name} range ({}, {}) is inverted",
                    range.0, range.1
                )));
            }
            if range.1 > 1000 {
                return Err(Error::Config(format!("{name} count {} is unreasonable", range.1)));
            }
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(Error::Config(format!("noise must be finite and >= 0, got {}", self.noise)));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Scene synthesis
// ---------------------------------------------------------------------------

struct Canvas {
    h: usize,
    w: usize,
    rgb: Vec<f64>,
    labels: Vec<u8>,
}

impl Canvas {
    fn new(h: usize, w: usize, base: [f64; 3]) -> Canvas {
        let mut rgb = vec![0.0; 3 * h * w];
        for c in 0..3 {
            rgb[c * h * w..(c + 1) * h * w].fill(base[c]);
        }
        Canvas { h, w, rgb, labels: vec![BACKGROUND; h * w] }
    }

    /// Blends `color` into pixel (y, x) with coverage `alpha` and claims
    /// the label when the pixel is at least half covered.
    fn blend(&mut self, y: usize, x: usize, color: [f64; 3], alpha: f64, class: u8) {
        if alpha <= 0.0 {
            return;
        }
        let a = alpha.min(1.0);
        let plane = self.h * self.w;
        let i = y * self.w + x;
        for c in 0..3 {
            let v = &mut self.rgb[c * plane + i];
            *v = *v * (1.0 - a) + color[c] * a;
        }
        if a >= 0.5 {
            self.labels[i] = class;
        }
    }
}

/// Deterministic per-pixel jitter in [-amp, amp], independent of the
/// main generation stream.
fn pixel_jitter(salt: u64, y: usize, x: usize, channel: usize, amp: f64) -> f64 {
    let bits = rng::mix(&[salt, y as u64, x as u64, channel as u64]);
    let unit = (bits >> 11) as f64 / (1u64 << 53) as f64;
    (unit * 2.0 - 1.0) * amp
}

fn draw_rect(canvas: &mut Canvas, y0: f64, x0: f64, y1: f64, x1: f64, color: [f64; 3], class: u8) {
    let ys = (y0.floor().max(0.0)) as usize;
    let xs = (x0.floor().max(0.0)) as usize;
    let ye = (y1.ceil().min(canvas.h as f64)) as usize;
    let xe = (x1.ceil().min(canvas.w as f64)) as usize;
    for y in ys..ye {
        let oy = (y1.min(y as f64 + 1.0) - y0.max(y as f64)).clamp(0.0, 1.0);
        for x in xs..xe {
            let ox = (x1.min(x as f64 + 1.0) - x0.max(x as f64)).clamp(0.0, 1.0);
            canvas.blend(y, x, color, ox * oy, class);
        }
    }
}

fn dist_to_segment(py: f64, px: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (ay, ax) = a;
    let (by, bx) = b;
    let (dy, dx) = (by - ay, bx - ax);
    let len2 = dy * dy + dx * dx;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((py - ay) * dy + (px - ax) * dx) / len2).clamp(0.0, 1.0)
    };
    let (cy, cx) = (ay + t * dy, ax + t * dx);
    ((py - cy).powi(2) + (px - cx).powi(2)).sqrt()
}

fn draw_strip(
    canvas: &mut Canvas,
    a: (f64, f64),
    b: (f64, f64),
    half_width: f64,
    color: [f64; 3],
    class: u8,
) {
    let pad = half_width + 1.0;
    let ys = ((a.0.min(b.0) - pad).floor().max(0.0)) as usize;
    let ye = ((a.0.max(b.0) + pad).ceil().min(canvas.h as f64)) as usize;
    let xs = ((a.1.min(b.1) - pad).floor().max(0.0)) as usize;
    let xe = ((a.1.max(b.1) + pad).ceil().min(canvas.w as f64)) as usize;
    for y in ys..ye {
        for x in xs..xe {
            let d = dist_to_segment(y as f64 + 0.5, x as f64 + 0.5, a, b);
            canvas.blend(y, x, color, half_width + 0.5 - d, class);
        }
    }
}

fn draw_ellipse(
    canvas: &mut Canvas,
    cy: f64,
    cx: f64,
    r_along: f64,
    r_across: f64,
    angle: f64,
    color: [f64; 3],
    class: u8,
) {
    let r = r_along.max(r_across) + 1.0;
    let ys = ((cy - r).floor().max(0.0)) as usize;
    let ye = ((cy + r).ceil().min(canvas.h as f64)) as usize;
    let xs = ((cx - r).floor().max(0.0)) as usize;
    let xe = ((cx + r).ceil().min(canvas.w as f64)) as usize;
    let (sin, cos) = angle.sin_cos();
    for y in ys..ye {
        for x in xs..xe {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            let f = (u / r_along).powi(2) + (v / r_across).powi(2);
            let d = (f.sqrt() - 1.0) * r_across;
            canvas.blend(y, x, color, 0.5 - d, class);
        }
    }
}

fn draw_blob(
    canvas: &mut Canvas,
    circles: &[(f64, f64, f64)],
    base: [f64; 3],
    salt: u64,
    class: u8,
) {
    let (mut ys, mut xs, mut ye, mut xe) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for &(cy, cx, r) in circles {
        ys = ys.min(cy - r - 1.0);
        xs = xs.min(cx - r - 1.0);
        ye = ye.max(cy + r + 1.0);
        xe = xe.max(cx + r + 1.0);
    }
    let ys = ys.floor().max(0.0) as usize;
    let xs = xs.floor().max(0.0) as usize;
    let ye = ye.ceil().min(canvas.h as f64) as usize;
    let xe = xe.ceil().min(canvas.w as f64) as usize;
    for y in ys..ye {
        for x in xs..xe {
            let mut alpha = 0.0f64;
            for &(cy, cx, r) in circles {
                let d = ((y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2)).sqrt();
                alpha = alpha.max((r + 0.5 - d).clamp(0.0, 1.0));
            }
            if alpha > 0.0 {
                let mut color = base;
                for (c, v) in color.iter_mut().enumerate() {
                    *v = (*v + pixel_jitter(salt, y, x, c, 0.06)).clamp(0.0, 1.0);
                }
                canvas.blend(y, x, color, alpha, class);
            }
        }
    }
}

/// One generation attempt from an already-derived stream.
fn generate_attempt(spec: &SceneSpec, r: &mut rand_chacha::ChaCha8Rng) -> (Tensor, LabelMap) {
    let (h, w) = (spec.height, spec.width);
    let base_tone = 0.32 + r.random::<f64>() * 0.06;
    let mut canvas = Canvas::new(
        h,
        w,
        [base_tone + 0.03, base_tone + 0.01, base_tone - 0.02],
    );

    // Vegetation: textured unions of circles.
    let n_veg = r.random_range(spec.vegetation.0..=spec.vegetation.1);
    for vi in 0..n_veg {
        let cy = r.random_range(0.0..h as f64);
        let cx = r.random_range(0.0..w as f64);
        let n_circles = r.random_range(3..=6usize);
        let circles: Vec<(f64, f64, f64)> = (0..n_circles)
            .map(|_| {
                (
                    cy + r.random_range(-7.0..7.0),
                    cx + r.random_range(-7.0..7.0),
                    r.random_range(4.0..9.0),
                )
            })
            .collect();
        let green = [
            0.20 + r.random::<f64>() * 0.10,
            0.38 + r.random::<f64>() * 0.14,
            0.18 + r.random::<f64>() * 0.10,
        ];
        let salt = rng::mix(&[spec.seed, 0x7e67, vi as u64]);
        draw_blob(&mut canvas, &circles, green, salt, VEGETATION);
    }

    // Roads: full-length strips, axis-aligned or diagonal, gray like the
    // buildings drawn later.
    let n_roads = r.random_range(spec.roads.0..=spec.roads.1);
    let mut road_segments: Vec<((f64, f64), (f64, f64), f64)> = Vec::new();
    for _ in 0..n_roads {
        let through = (r.random_range(0.0..h as f64), r.random_range(0.0..w as f64));
        let base_angle = [0.0, 90.0, 45.0, 135.0][r.random_range(0..4usize)];
        let angle = (base_angle + r.random_range(-8.0..8.0)) * std::f64::consts::PI / 180.0;
        let (sin, cos) = angle.sin_cos();
        let reach = (h + w) as f64;
        let a = (through.0 - sin * reach, through.1 - cos * reach);
        let b = (through.0 + sin * reach, through.1 + cos * reach);
        let half_width = r.random_range(3.5..5.0);
        let tone = 0.42 + r.random::<f64>() * 0.16;
        draw_strip(&mut canvas, a, b, half_width, [tone, tone, tone + 0.02], ROAD);
        road_segments.push((a, b, angle));
    }

    // Buildings: axis-aligned rectangles in a gray-red palette.
    let n_buildings = r.random_range(spec.buildings.0..=spec.buildings.1);
    for _ in 0..n_buildings {
        let sy = r.random_range(10.0..28.0);
        let sx = r.random_range(10.0..28.0);
        let y0 = r.random_range(-sy / 2.0..h as f64 - sy / 2.0);
        let x0 = r.random_range(-sx / 2.0..w as f64 - sx / 2.0);
        let tone = 0.45 + r.random::<f64>() * 0.17;
        let color = [tone + 0.10, tone, tone - 0.02];
        draw_rect(&mut canvas, y0, x0, y0 + sy, x0 + sx, color, BUILDING);
    }

    // Cars: small bright ellipses on road centerlines, aligned with the
    // road direction.
    let n_cars = r.random_range(spec.cars.0..=spec.cars.1);
    const CAR_COLORS: [[f64; 3]; 4] = [
        [0.85, 0.15, 0.12],
        [0.92, 0.92, 0.95],
        [0.15, 0.25, 0.85],
        [0.90, 0.80, 0.15],
    ];
    for _ in 0..n_cars {
        let (center, angle) = if road_segments.is_empty() {
            (
                (r.random_range(0.0..h as f64), r.random_range(0.0..w as f64)),
                r.random_range(0.0..std::f64::consts::PI),
            )
        } else {
            let (a, b, angle) = road_segments[r.random_range(0..road_segments.len())];
            // Pick a centerline point that lies inside the image.
            let t = r.random_range(0.0..1.0f64);
            let cy = (a.0 + t * (b.0 - a.0)).clamp(2.0, h as f64 - 2.0);
            let cx = (a.1 + t * (b.1 - a.1)).clamp(2.0, w as f64 - 2.0);
            ((cy, cx), angle)
        };
        let color = CAR_COLORS[r.random_range(0..CAR_COLORS.len())];
        let r_along = r.random_range(2.2..3.2);
        let r_across = r.random_range(1.2..1.7);
        draw_ellipse(&mut canvas, center.0, center.1, r_along, r_across, angle, color, CAR);
    }

    // Pixel noise.
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).expect("validated noise amplitude");
        for v in &mut canvas.rgb {
            *v = (*v + normal.sample(r)).clamp(0.0, 1.0);
        }
    }

    let image = Tensor::from_vec(&[3, h, w], canvas.rgb).expect("canvas dims are valid");
    let labels = LabelMap::from_vec(h, w, canvas.labels).expect("canvas dims are valid");
    (image, labels)
}

/// Generates one scene. Deterministic for a fixed spec; attempts are
/// retried (bounded, deterministically) if a class that was drawn ended
/// up fully covered by later shapes.
pub fn generate_scene(spec: &SceneSpec) -> Result<(Tensor, LabelMap)> {
    spec.validate()?;
    let mut last = None;
    for attempt in 0..20u64 {
        let mut r = rng::stream(&[spec.seed, tag::SCENE, attempt]);
        let (image, labels) = generate_attempt(spec, &mut r);
        let hist = labels.histogram(5).expect("generator labels are in range");
        let wanted = [
            (spec.buildings.0 > 0, BUILDING),
            (spec.roads.0 > 0, ROAD),
            (spec.cars.0 > 0, CAR),
            (spec.vegetation.0 > 0, VEGETATION),
        ];
        let complete =
            wanted.iter().all(|&(req, class)| !req || hist[class as usize] > 0);
        if complete {
            return Ok((image, labels));
        }
        last = Some((image, labels));
    }
    Ok(last.expect("at least one attempt ran"))
}

// ---------------------------------------------------------------------------
// Patches and augmentation
// ---------------------------------------------------------------------------

/// Where a patch came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub scene: usize,
    pub y: usize,
    pub x: usize,
    pub variant: &'static str,
}

#[derive(Debug, Clone)]
pub struct PatchItem {
    pub image: Tensor,
    pub labels: LabelMap,
    pub provenance: Provenance,
}

/// A set of equally-sized patches.
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub patch: usize,
    pub items: Vec<PatchItem>,
}

/// Crop positions along one axis: stride `patch - overlap`, with the
/// last position shifted inward so every pixel is covered.
pub fn grid_positions(dim: usize, patch: usize, overlap: usize) -> Result<Vec<usize>> {
    if patch == 0 || patch > dim {
        return Err(Error::Config(format!("patch {patch} does not fit dimension {dim}")));
    }
    if overlap >= patch {
        return Err(Error::Config(format!("overlap {overlap} must be smaller than patch {patch}")));
    }
    let stride = patch - overlap;
    let mut positions = Vec::new();
    let mut pos = 0usize;
    while pos + patch <= dim {
        positions.push(pos);
        pos += stride;
    }
    if *positions.last().expect("at least position 0") != dim - patch {
        positions.push(dim - patch);
    }
    Ok(positions)
}

/// Extracts a grid of overlapping square patches covering the image.
pub fn crop_patches(
    image: &Tensor,
    labels: &LabelMap,
    patch: usize,
    overlap: usize,
    scene: usize,
) -> Result<PatchSet> {
    let (c, h, w) = image.dims3()?;
    if labels.height() != h || labels.width() != w {
        return Err(Error::Shape(format!(
            "labels {}x{} do not match image {h}x{w}",
            labels.height(),
            labels.width()
        )));
    }
    let ys = grid_positions(h, patch, overlap)?;
    let xs = grid_positions(w, patch, overlap)?;
    let mut items = Vec::with_capacity(ys.len() * xs.len());
    for &y in &ys {
        for &x in &xs {
            let mut data = Vec::with_capacity(c * patch * patch);
            for ch in 0..c {
                for row in y..y + patch {
                    let start = ch * h * w + row * w + x;
                    data.extend_from_slice(&image.data()[start..start + patch]);
                }
            }
            let mut lab = Vec::with_capacity(patch * patch);
            for row in y..y + patch {
                let start = row * w + x;
                lab.extend_from_slice(&labels.data()[start..start + patch]);
            }
            items.push(PatchItem {
                image: Tensor::from_vec(&[c, patch, patch], data)?,
                labels: LabelMap::from_vec(patch, patch, lab)?,
                provenance: Provenance { scene, y, x, variant: "id" },
            });
        }
    }
    Ok(PatchSet { patch, items })
}

pub const VARIANTS: [&str; 6] = ["id", "hflip", "vflip", "rot90", "rot180", "rot270"];

/// Maps an output pixel to its source pixel under a variant.
fn source_pixel(variant: &str, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
    match variant {
        "id" => (y, x),
        "hflip" => (y, w - 1 - x),
        "vflip" => (h - 1 - y, x),
        // Counterclockwise quarter turns; require h == w.
        "rot90" => (x, w - 1 - y),
        "rot180" => (h - 1 - y, w - 1 - x),
        "rot270" => (h - 1 - x, y),
        other => unreachable!("unknown variant {other}"),
    }
}

fn transform_image(image: &Tensor, variant: &str) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = source_pixel(variant, y, x, h, w);
                out[ch * h * w + y * w + x] = image.data()[ch * h * w + sy * w + sx];
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

fn transform_labels(labels: &LabelMap, variant: &str) -> Result<LabelMap> {
    let (h, w) = (labels.height(), labels.width());
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = source_pixel(variant, y, x, h, w);
            out[y * w + x] = labels.at(sy, sx);
        }
    }
    LabelMap::from_vec(h, w, out)
}

/// Expands every patch into its six flip/rotation variants, images and
/// labels transformed identically. Patches must be square (quarter
/// turns).
pub fn augment(set: &PatchSet) -> Result<PatchSet> {
    let mut items = Vec::with_capacity(set.items.len() * VARIANTS.len());
    for item in &set.items {
        let (_, h, w) = item.image.dims3()?;
        if h != w {
            return Err(Error::Config(format!(
                "augmentation rotates patches, which requires square patches, got {h}x{w}"
            )));
        }
        for variant in VARIANTS {
            items.push(PatchItem {
                image: transform_image(&item.image, variant)?,
                labels: transform_labels(&item.labels, variant)?,
                provenance: Provenance { variant, ..item.provenance.clone() },
            });
        }
    }
    Ok(PatchSet { patch: set.patch, items })
}

// ---------------------------------------------------------------------------
// Dataset on disk
// ---------------------------------------------------------------------------

/// One scene's files, relative to the dataset directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub image: String,
    pub labels: String,
}

/// Index of a generated dataset: scene files by split plus the class
/// vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub classes: usize,
    pub class_names: Vec<String>,
    pub scene_height: usize,
    pub scene_width: usize,
    pub train: Vec<SceneEntry>,
    pub val: Vec<SceneEntry>,
    pub test: Vec<SceneEntry>,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<DatasetManifest> {
        let path = dir.join("manifest.json");
        let json = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&json)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

/// Reads one scene (image and labels) from a dataset directory.
pub fn load_scene(dir: &Path, entry: &SceneEntry) -> Result<(Tensor, LabelMap)> {
    let image = crate::pnm::read_ppm(&dir.join(&entry.image))?;
    let labels = crate::pnm::read_pgm(&dir.join(&entry.labels))?;
    let (_, h, w) = image.dims3()?;
    if labels.height() != h || labels.width() != w {
        return Err(Error::Shape(format!(
            "scene {} labels {}x{} do not match image {h}x{w}",
            entry.image,
            labels.height(),
            labels.width()
        )));
    }
    Ok((image, labels))
}

/// Generates `counts` = (train, val, test) scenes under `out_dir`,
/// writing PPM/PGM pairs and the manifest. Scene seeds derive from
/// `seed`, the split, and the index, so any scene can be regenerated
/// independently and reruns are byte-identical.
pub fn generate_dataset(
    out_dir: &Path,
    base: &SceneSpec,
    counts: (usize, usize, usize),
    seed: u64,
) -> Result<DatasetManifest> {
    base.validate()?;
    let classes = base.classes();
    let mut splits: Vec<Vec<SceneEntry>> = Vec::new();
    for (split_id, (split, count)) in
        [("train", counts.0), ("val", counts.1), ("test", counts.2)].iter().enumerate()
    {
        let split_dir = out_dir.join(split);
        std::fs::create_dir_all(&split_dir).map_err(|e| Error::io(&split_dir, e))?;
        let mut entries = Vec::with_capacity(*count);
        for i in 0..*count {
            let spec = SceneSpec {
                seed: rng::mix(&[seed, tag::SCENE, split_id as u64, i as u64]),
                ..base.clone()
            };
            let (image, labels) = generate_scene(&spec)?;
            let entry = SceneEntry {
                image: format!("{split}/scene_{i:04}.ppm"),
                labels: format!("{split}/scene_{i:04}.pgm"),
            };
            crate::pnm::write_ppm(&out_dir.join(&entry.image), &image)?;
            crate::pnm::write_pgm(&out_dir.join(&entry.labels), &labels)?;
            entries.push(entry);
        }
        splits.push(entries);
    }
    let manifest = DatasetManifest {
        classes,
        class_names: CLASS_NAMES[..classes].iter().map(|s| s.to_string()).collect(),
        scene_height: base.height,
        scene_width: base.width,
        train: splits.remove(0),
        val: splits.remove(0),
        test: splits.remove(0),
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

/// Loads a split's scenes and turns them into training-ready patches:
/// crop with overlap, then (optionally) the six-variant augmentation.
/// Order is deterministic: scene, then crop row-major, then variant.
pub fn patches_for(
    dir: &Path,
    entries: &[SceneEntry],
    patch: usize,
    overlap: usize,
    augmented: bool,
) -> Result<Vec<(Tensor, LabelMap)>> {
    let mut out = Vec::new();
    for (scene_id, entry) in entries.iter().enumerate() {
        let (image, labels) = load_scene(dir, entry)?;
        let mut set = crop_patches(&image, &labels, patch, overlap, scene_id)?;
        if augmented {
            set = augment(&set)?;
        }
        out.extend(set.items.into_iter().map(|item| (item.image, item.labels)));
    }
    Ok(out)
}
