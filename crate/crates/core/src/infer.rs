//! Multi-scale, tiled, probability-averaged whole-image inference.
//!
//! One image is predicted at several scales: the image is bilinearly
//! resized, cut into non-overlapping tiles of the configured patch size
//! (ragged edge tiles are reflect-extended to full size and their
//! predictions cropped back), each tile is forwarded through the model
//! and softmaxed, the tile maps are stitched — every pixel written
//! exactly once — and the per-scale probability map is resized back to
//! the original resolution. The per-scale maps are averaged and the
//! label map is the per-pixel argmax.
//!
//! Probabilities, not logits, are averaged. A map that was resized is
//! renormalized per pixel afterwards so the channel simplex holds
//! exactly; at scale 1 no resize happens and the map passes through
//! untouched, which keeps single-scale tiled inference bit-identical to
//! a direct forward pass.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Mode;
use crate::layers::{argmax_channels, bilinear_resize, softmax_channels};
use crate::model::Model;
use crate::tensor::{LabelMap, Tensor};

/// Scales and tile size for whole-image inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    /// Relative image scales evaluated and averaged.
    pub scales: Vec<f64>,
    /// Tile edge length in pixels; must be a multiple of the model stride.
    pub patch: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig { scales: vec![0.5, 1.0, 1.5], patch: 64 }
    }
}

impl InferConfig {
    pub fn validate(&self, stride: usize) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("inference needs at least one scale".into()));
        }
        for &s in &self.scales {
            if !s.is_finite() || s <= 0.0 {
                return Err(Error::Config(format!("scale {s} must be a positive real")));
            }
        }
        if self.patch == 0 || self.patch % stride != 0 {
            return Err(Error::Config(format!(
                "patch {} must be a positive multiple of the model stride {stride}",
                self.patch
            )));
        }
        Ok(())
    }
}

/// Per-pixel class probabilities for one image, shaped `[K, H, W]`.
#[derive(Debug, Clone)]
pub struct ProbMap {
    pub probs: Tensor,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProbMapSidecar {
    classes: usize,
    height: usize,
    width: usize,
    class_names: Vec<String>,
}

impl ProbMap {
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        self.probs.dims3()
    }

    /// Writes the probabilities in the tensor binary format plus a JSON
    /// sidecar describing the axes.
    pub fn save(&self, tensor_path: &Path, sidecar_path: &Path, class_names: &[String]) -> Result<()> {
        let (k, h, w) = self.dims()?;
        if class_names.len() != k {
            return Err(Error::Config(format!(
                "{} class names for {k} probability channels",
                class_names.len()
            )));
        }
        self.probs.write_file(tensor_path)?;
        let sidecar = ProbMapSidecar {
            classes: k,
            height: h,
            width: w,
            class_names: class_names.to_vec(),
        };
        let json = serde_json::to_string_pretty(&sidecar)?;
        std::fs::write(sidecar_path, json).map_err(|e| Error::io(sidecar_path, e))
    }

    pub fn load(tensor_path: &Path) -> Result<ProbMap> {
        let probs = Tensor::read_file(tensor_path)?;
        probs.dims3()?;
        Ok(ProbMap { probs })
    }
}

/// One tile's probabilities and its top-left corner on the canvas.
#[derive(Debug, Clone)]
pub struct Tile {
    /// `[K, th, tw]` probabilities.
    pub probs: Tensor,
    pub y: usize,
    pub x: usize,
}

/// Reassembles tile probability maps into a `[classes, height, width]`
/// canvas, requiring the tiles to partition it: any gap or double write
/// is an error.
pub fn stitch(tiles: &[Tile], classes: usize, height: usize, width: usize) -> Result<Tensor> {
    let mut canvas = Tensor::zeros(&[classes, height, width])?;
    let mut written = vec![false; height * width];
    for tile in tiles {
        let (k, th, tw) = tile.probs.dims3()?;
        if k != classes {
            return Err(Error::Shape(format!("tile has {k} channels, canvas {classes}")));
        }
        if tile.y + th > height || tile.x + tw > width {
            return Err(Error::Shape(format!(
                "tile {}x{} at ({}, {}) exceeds the {height}x{width} canvas",
                th, tw, tile.y, tile.x
            )));
        }
        for y in 0..th {
            for x in 0..tw {
                let slot = &mut written[(tile.y + y) * width + tile.x + x];
                if *slot {
                    return Err(Error::Shape(format!(
                        "pixel ({}, {}) written by more than one tile",
                        tile.y + y,
                        tile.x + x
                    )));
                }
                *slot = true;
            }
        }
        let cd = canvas.data_mut();
        let td = tile.probs.data();
        for ch in 0..classes {
            for y in 0..th {
                let src = ch * th * tw + y * tw;
                let dst = ch * height * width + (tile.y + y) * width + tile.x;
                cd[dst..dst + tw].copy_from_slice(&td[src..src + tw]);
            }
        }
    }
    if let Some(i) = written.iter().position(|&w| !w) {
        return Err(Error::Shape(format!(
            "pixel ({}, {}) covered by no tile",
            i / width,
            i % width
        )));
    }
    Ok(canvas)
}

/// Folds an index beyond `dim` back into range by mirror reflection
/// about the last element (period `2·(dim-1)`), so arbitrary extensions
/// stay within bounds without repeating the edge sample.
fn reflect(i: usize, dim: usize) -> usize {
    if dim == 1 {
        return 0;
    }
    let period = 2 * (dim - 1);
    let m = i % period;
    if m < dim {
        m
    } else {
        period - m
    }
}

/// Copies the `[c, th, tw]` window at (y0, x0) out of `image`, mirror-
/// extending past the window's content to `patch` on ragged edges.
fn extract_tile(image: &Tensor, y0: usize, x0: usize, th: usize, tw: usize, patch: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    let mut out = vec![0.0; c * patch * patch];
    let id = image.data();
    for ch in 0..c {
        for y in 0..patch {
            let sy = y0 + reflect(y, th);
            for x in 0..patch {
                let sx = x0 + reflect(x, tw);
                out[(ch * patch + y) * patch + x] = id[(ch * h + sy) * w + sx];
            }
        }
    }
    Tensor::from_vec(&[c, patch, patch], out)
}

/// Crops a `[k, patch, patch]` prediction back to the tile's valid region.
fn crop_probs(probs: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
    let (k, h, w) = probs.dims3()?;
    if th == h && tw == w {
        return Ok(probs.clone());
    }
    let mut out = vec![0.0; k * th * tw];
    let pd = probs.data();
    for ch in 0..k {
        for y in 0..th {
            let src = (ch * h + y) * w;
            let dst = (ch * th + y) * tw;
            out[dst..dst + tw].copy_from_slice(&pd[src..src + tw]);
        }
    }
    Tensor::from_vec(&[k, th, tw], out)
}

/// Non-overlapping tile origins covering `dim`: full strides of `patch`
/// plus one ragged remainder tile when `dim` is not a multiple.
fn tile_starts(dim: usize, patch: usize) -> Vec<usize> {
    (0..dim).step_by(patch).collect()
}

/// Predicts one `[C, H, W]` image at every configured scale and averages
/// the probability maps. Returns the averaged map and its argmax labels.
pub fn infer_image(model: &mut Model, image: &Tensor, cfg: &InferConfig) -> Result<(ProbMap, LabelMap)> {
    let (c, h, w) = image.dims3()?;
    if h < 8 || w < 8 {
        return Err(Error::Shape(format!("image {h}x{w} is below the 8-pixel minimum")));
    }
    if c != model.config.in_channels {
        return Err(Error::Shape(format!(
            "image has {c} channels, model expects {}",
            model.config.in_channels
        )));
    }
    cfg.validate(model.config.stride())?;
    let k = model.config.classes;

    let mut acc = Tensor::zeros(&[k, h, w])?;
    for &scale in &cfg.scales {
        let sh = ((h as f64 * scale).round() as usize).max(1);
        let sw = ((w as f64 * scale).round() as usize).max(1);
        let scaled = if (sh, sw) == (h, w) {
            image.clone()
        } else {
            bilinear_resize(&image.reshape(&[1, c, h, w])?, sh, sw)?.reshape(&[c, sh, sw])?
        };

        let stride = model.config.stride();
        let assembled = if sh <= cfg.patch && sw <= cfg.patch && sh % stride == 0 && sw % stride == 0 {
            // The whole image fits in one tile and the network accepts its
            // dimensions directly: forward it without mirror extension, so
            // single-scale inference of a small image reproduces a plain
            // forward pass bit for bit.
            let logits = model.forward(&scaled.reshape(&[1, c, sh, sw])?, Mode::Eval)?;
            softmax_channels(&logits)?.reshape(&[k, sh, sw])?
        } else {
            let mut tiles = Vec::new();
            for &ty in &tile_starts(sh, cfg.patch) {
                for &tx in &tile_starts(sw, cfg.patch) {
                    let th = cfg.patch.min(sh - ty);
                    let tw = cfg.patch.min(sw - tx);
                    let tile = extract_tile(&scaled, ty, tx, th, tw, cfg.patch)?;
                    let logits =
                        model.forward(&tile.reshape(&[1, c, cfg.patch, cfg.patch])?, Mode::Eval)?;
                    let probs = softmax_channels(&logits)?.reshape(&[k, cfg.patch, cfg.patch])?;
                    tiles.push(Tile { probs: crop_probs(&probs, th, tw)?, y: ty, x: tx });
                }
            }
            stitch(&tiles, k, sh, sw)?
        };

        if (sh, sw) == (h, w) {
            for (a, &p) in acc.data_mut().iter_mut().zip(assembled.data()) {
                *a += p;
            }
        } else {
            let mut back =
                bilinear_resize(&assembled.reshape(&[1, k, sh, sw])?, h, w)?.reshape(&[k, h, w])?;
            // Bilinear interpolation of simplex points drifts only by
            // rounding; renormalize to restore the invariant exactly.
            let bd = back.data_mut();
            let plane = h * w;
            for p in 0..plane {
                let mut sum = 0.0;
                for ch in 0..k {
                    sum += bd[ch * plane + p];
                }
                if sum > 0.0 {
                    for ch in 0..k {
                        bd[ch * plane + p] /= sum;
                    }
                }
            }
            for (a, &p) in acc.data_mut().iter_mut().zip(back.data()) {
                *a += p;
            }
        }
    }

    let inv = 1.0 / cfg.scales.len() as f64;
    for v in acc.data_mut() {
        *v *= inv;
    }
    let labels = argmax_channels(&acc.reshape(&[1, k, h, w])?)?.remove(0);
    Ok((ProbMap { probs: acc }, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, predict, ModelConfig};

    fn desk_model() -> Model {
        build_model(&ModelConfig::desk(), 77).expect("desk model builds")
    }

    fn test_image(h: usize, w: usize, seed: u64) -> Tensor {
        let spec = crate::data::SceneSpec {
            height: h,
            width: w,
            seed,
            ..crate::data::SceneSpec::desk()
        };
        crate::data::generate_scene(&spec).expect("scene generates").0
    }

    #[test]
    fn single_scale_whole_patch_matches_direct_forward() {
        let mut model = desk_model();
        let image = test_image(64, 64, 1);
        let cfg = InferConfig { scales: vec![1.0], patch: 64 };
        let (map, labels) = infer_image(&mut model, &image, &cfg).unwrap();

        let (probs, maps) = predict(&mut model, &image.reshape(&[1, 3, 64, 64]).unwrap()).unwrap();
        assert_eq!(map.probs.data(), &probs.data()[..], "tiled path must be bit-identical");
        assert_eq!(labels.data(), maps[0].data());
    }

    #[test]
    fn image_smaller_than_patch_matches_direct_forward() {
        // A stride-aligned image below the tile size must skip the mirror
        // extension entirely, not predict on reflected content.
        let mut model = desk_model();
        let image = test_image(48, 48, 3);
        let cfg = InferConfig { scales: vec![1.0], patch: 64 };
        let (map, labels) = infer_image(&mut model, &image, &cfg).unwrap();

        let (probs, maps) = predict(&mut model, &image.reshape(&[1, 3, 48, 48]).unwrap()).unwrap();
        assert_eq!(map.probs.data(), &probs.data()[..], "small image must be bit-identical");
        assert_eq!(labels.data(), maps[0].data());
    }

    #[test]
    fn tiling_partitions_and_matches_untiled_on_exact_multiples() {
        let mut model = desk_model();
        let image = test_image(128, 128, 2);
        let cfg = InferConfig { scales: vec![1.0], patch: 64 };
        let (tiled, _) = infer_image(&mut model, &image, &cfg).unwrap();

        // The desk model is fully convolutional but zero padding differs at
        // tile seams, so equality with an untiled pass is not exact; the
        // partition property is what stitch certifies. Cross-check channel
        // sums instead.
        let (k, h, w) = tiled.dims().unwrap();
        assert_eq!((k, h, w), (4, 128, 128));
        let plane = h * w;
        for p in 0..plane {
            let sum: f64 = (0..k).map(|ch| tiled.probs.data()[ch * plane + p]).sum();
            assert!((sum - 1.0).abs() < 1e-9, "pixel {p} sum {sum}");
        }
    }

    #[test]
    fn multi_scale_average_stays_on_the_simplex() {
        let mut model = desk_model();
        let image = test_image(96, 80, 3);
        let cfg = InferConfig { scales: vec![0.5, 1.0, 1.5], patch: 64 };
        let (map, labels) = infer_image(&mut model, &image, &cfg).unwrap();
        let (k, h, w) = map.dims().unwrap();
        assert_eq!((k, h, w), (4, 96, 80));
        assert_eq!(labels.height(), 96);
        let plane = h * w;
        for p in 0..plane {
            let sum: f64 = (0..k).map(|ch| map.probs.data()[ch * plane + p]).sum();
            assert!((sum - 1.0).abs() < 1e-6, "pixel {p} sum {sum} off the simplex");
        }

        // Determinism across calls.
        let (map2, labels2) = infer_image(&mut model, &image, &cfg).unwrap();
        assert_eq!(map.probs.data(), map2.probs.data());
        assert_eq!(labels.data(), labels2.data());
    }

    #[test]
    fn ragged_edges_are_reflect_extended_and_cropped() {
        let mut model = desk_model();
        // 100x72 is not a multiple of 64 in either axis.
        let image = test_image(100, 72, 4);
        let cfg = InferConfig { scales: vec![1.0], patch: 64 };
        let (map, _) = infer_image(&mut model, &image, &cfg).unwrap();
        assert_eq!(map.dims().unwrap(), (4, 100, 72));

        // Reflection indexing: within range is identity, beyond bounces.
        assert_eq!(reflect(3, 10), 3);
        assert_eq!(reflect(10, 10), 8);
        assert_eq!(reflect(12, 10), 6);
        assert_eq!(reflect(0, 1), 0);
        assert_eq!(reflect(25, 10), 7); // period 18: 25 % 18 = 7 < 10
    }

    #[test]
    fn stitch_rejects_overlap_and_gap() {
        let tile = |y, x, th: usize, tw: usize| Tile {
            probs: Tensor::new(&[2, th, tw], 0.5).unwrap(),
            y,
            x,
        };
        // Exact quartering reassembles.
        let quarters = vec![tile(0, 0, 4, 4), tile(0, 4, 4, 4), tile(4, 0, 4, 4), tile(4, 4, 4, 4)];
        let canvas = stitch(&quarters, 2, 8, 8).unwrap();
        assert_eq!(canvas.shape(), &[2, 8, 8]);
        assert!(canvas.data().iter().all(|&v| v == 0.5));

        // Single full tile is the identity.
        let full = vec![tile(0, 0, 8, 8)];
        assert!(stitch(&full, 2, 8, 8).is_ok());

        // Overlap: two tiles share a column.
        let overlap = vec![tile(0, 0, 8, 5), tile(0, 4, 8, 4)];
        assert!(stitch(&overlap, 2, 8, 8).is_err(), "double write must error");

        // Gap: one pixel column uncovered.
        let gap = vec![tile(0, 0, 8, 3), tile(0, 4, 8, 4)];
        assert!(stitch(&gap, 2, 8, 8).is_err(), "gap must error");
    }

    #[test]
    fn config_validation_enforces_scales_and_stride() {
        let mut model = desk_model();
        let image = test_image(64, 64, 5);
        let no_scales = InferConfig { scales: vec![], patch: 64 };
        assert!(infer_image(&mut model, &image, &no_scales).is_err());
        let bad_scale = InferConfig { scales: vec![1.0, -0.5], patch: 64 };
        assert!(infer_image(&mut model, &image, &bad_scale).is_err());
        let bad_patch = InferConfig { scales: vec![1.0], patch: 60 };
        assert!(infer_image(&mut model, &image, &bad_patch).is_err(), "60 % stride 8 != 0");
        let tiny = test_image(8, 8, 6);
        let cfg = InferConfig { scales: vec![1.0], patch: 8 };
        assert!(infer_image(&mut model, &tiny, &cfg).is_ok());
    }

    #[test]
    fn prob_map_round_trips_with_sidecar() {
        let mut model = desk_model();
        let image = test_image(64, 64, 7);
        let cfg = InferConfig { scales: vec![1.0], patch: 64 };
        let (map, _) = infer_image(&mut model, &image, &cfg).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let tsr = dir.path().join("probs.tsr");
        let json = dir.path().join("probs.json");
        let names: Vec<String> =
            crate::data::CLASS_NAMES[..4].iter().map(|s| s.to_string()).collect();
        map.save(&tsr, &json, &names).unwrap();

        let loaded = ProbMap::load(&tsr).unwrap();
        assert_eq!(loaded.probs.data(), map.probs.data());
        let sidecar: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
        assert_eq!(sidecar["classes"], 4);
        assert_eq!(sidecar["class_names"][2], "road");

        // Wrong name count is rejected.
        assert!(map.save(&tsr, &json, &names[..3].to_vec()).is_err());
    }
}
