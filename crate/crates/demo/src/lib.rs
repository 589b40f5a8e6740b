//! Browser demo: renders phantom slices, tile-plan coverage and a noisy
//! majority-vote fusion experiment as RGBA buffers for a `<canvas>`.
//!
//! The plain functions return `Result<_, String>` so they can be tested
//! natively; the `wasm_*` wrappers convert errors for JavaScript.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tileseg::evaluation::{dsc_per_label, mean_dsc};
use tileseg::phantom::{generate_contrast_pair, generate_subject, PhantomSubject, PresetFile};
use tileseg::tiling::{extract_label_tile, fuse_predictions, plan_tiles, TilePlan};
use tileseg::volio::{flat_index, LabelMap};
use wasm_bindgen::prelude::*;

const PALETTE: [[u8; 3]; 5] = [
    [0, 0, 0],
    [70, 130, 220],
    [150, 150, 150],
    [245, 245, 235],
    [220, 60, 60],
];

fn label_rgb(l: u32) -> [u8; 3] {
    PALETTE.get(l as usize).copied().unwrap_or([255, 0, 255])
}

fn subject(preset: &str, seed: u32) -> Result<PhantomSubject, String> {
    let p = PresetFile::builtin();
    let r = match preset {
        "adult" => generate_subject(&p.adult.with_seed(seed.into())),
        "pediatric" => generate_subject(&p.pediatric.with_seed(seed.into())),
        "contrast" => generate_contrast_pair(&p.contrast.with_seed(seed.into())),
        other => return Err(format!("unknown preset {other:?}")),
    };
    r.map_err(|e| e.to_string())
}

/// Axial slice `z` as RGBA, `width = dims[0]`, `height = dims[1]`.
fn slice_rgba(dims: [usize; 3], z: usize, pixel: impl Fn(usize) -> [u8; 3]) -> Result<Vec<u8>, String> {
    if z >= dims[2] {
        return Err(format!("slice {z} outside 0..{}", dims[2]));
    }
    let mut out = Vec::with_capacity(dims[0] * dims[1] * 4);
    for y in 0..dims[1] {
        for x in 0..dims[0] {
            let [r, g, b] = pixel(flat_index(dims, x, y, z));
            out.extend_from_slice(&[r, g, b, 255]);
        }
    }
    Ok(out)
}

fn grey(v: f32, lo: f32, hi: f32) -> [u8; 3] {
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    let g = (t * 255.0).round() as u8;
    [g, g, g]
}

/// `layer` is "image", "post" (contrast preset only) or "labels".
pub fn phantom_slice(preset: &str, seed: u32, z: usize, layer: &str) -> Result<Vec<u8>, String> {
    let s = subject(preset, seed)?;
    let dims = s.truth.dims();
    match layer {
        "labels" => slice_rgba(dims, z, |i| label_rgb(s.truth.labels()[i])),
        "image" => slice_rgba(dims, z, |i| grey(s.image.data()[i], 0.0, 1.6)),
        "post" => {
            let post = s.post_image.as_ref().ok_or("only the contrast preset has a post image")?;
            slice_rgba(dims, z, |i| grey(post.data()[i], 0.0, 1.6))
        }
        other => Err(format!("unknown layer {other:?}")),
    }
}

fn cube_plan(dim: usize, tiles: usize, tile: usize) -> Result<TilePlan, String> {
    plan_tiles([dim; 3], [tiles; 3], [tile; 3]).map_err(|e| e.to_string())
}

/// How many tiles cover each pixel of slice `z`, as a heat map, plus the
/// tile count and the largest overlap.
pub fn coverage_slice(dim: usize, tiles: usize, tile: usize, z: usize) -> Result<(Vec<u8>, usize, u32), String> {
    let plan = cube_plan(dim, tiles, tile)?;
    let cov = plan.coverage();
    let max = cov.iter().copied().max().unwrap_or(0);
    let rgba = slice_rgba([dim; 3], z, |i| {
        let t = cov[i] as f32 / max.max(1) as f32;
        [(40.0 + 215.0 * t) as u8, (40.0 + 120.0 * t) as u8, (90.0 * (1.0 - t)) as u8]
    })?;
    Ok((rgba, plan.len(), max))
}

#[derive(Debug, Clone)]
pub struct Fusion {
    /// Mean structure DSC when every voxel just takes the first covering tile's label.
    pub single_dsc: f64,
    /// Mean structure DSC after majority voting over all covering tiles.
    pub fused_dsc: f64,
    pub rgba: Vec<u8>,
}

/// Corrupts each tile's copy of the truth independently (each voxel replaced
/// by a random label with probability `flip`), fuses, and scores.
pub fn noisy_fusion(seed: u32, flip: f64, tiles: usize, tile: usize, z: usize) -> Result<Fusion, String> {
    if !(0.0..=1.0).contains(&flip) {
        return Err(format!("flip probability {flip} outside [0, 1]"));
    }
    let truth = subject("adult", seed)?.truth;
    let dims = truth.dims();
    let plan = plan_tiles(dims, [tiles; 3], [tile; 3]).map_err(|e| e.to_string())?;
    let n_labels = truth.vocabulary().len();
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from(seed) ^ 0x5eed);
    let mut noisy = Vec::with_capacity(plan.len());
    for &origin in &plan.origins {
        let t = extract_label_tile(&truth, origin, plan.tile_shape).map_err(|e| e.to_string())?;
        let labels: Vec<u32> = t
            .labels()
            .iter()
            .map(|&l| {
                if rng.random_bool(flip) {
                    truth.vocabulary()[rng.random_range(0..n_labels)].id
                } else {
                    l
                }
            })
            .collect();
        let map = LabelMap::new(plan.tile_shape, truth.voxel_size(), labels, truth.vocabulary().to_vec())
            .map_err(|e| e.to_string())?;
        noisy.push((origin, map));
    }

    let mut single = vec![u32::MAX; truth.labels().len()];
    for (origin, map) in &noisy {
        let t = plan.tile_shape;
        for z in 0..t[2] {
            for y in 0..t[1] {
                for x in 0..t[0] {
                    let i = flat_index(dims, origin[0] + x, origin[1] + y, origin[2] + z);
                    if single[i] == u32::MAX {
                        single[i] = map.labels()[flat_index(t, x, y, z)];
                    }
                }
            }
        }
    }
    let single = LabelMap::new(dims, truth.voxel_size(), single, truth.vocabulary().to_vec())
        .map_err(|e| e.to_string())?;
    let fused = fuse_predictions(&noisy, &plan).map_err(|e| e.to_string())?;
    let score = |m: &LabelMap| -> Result<f64, String> {
        let d = dsc_per_label(m, &truth).map_err(|e| e.to_string())?;
        mean_dsc(&d, truth.background_id()).map_err(|e| e.to_string())
    };
    let rgba = slice_rgba(dims, z, |i| label_rgb(fused.labels()[i]))?;
    Ok(Fusion {
        single_dsc: score(&single)?,
        fused_dsc: score(&fused)?,
        rgba,
    })
}

fn js(e: String) -> JsError {
    JsError::new(&e)
}

#[wasm_bindgen(js_name = phantomSlice)]
pub fn wasm_phantom_slice(preset: &str, seed: u32, z: usize, layer: &str) -> Result<Vec<u8>, JsError> {
    phantom_slice(preset, seed, z, layer).map_err(js)
}

#[wasm_bindgen]
pub struct Coverage {
    rgba: Vec<u8>,
    tiles: usize,
    max_overlap: u32,
}

#[wasm_bindgen]
impl Coverage {
    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn tiles(&self) -> usize {
        self.tiles
    }
    #[wasm_bindgen(getter, js_name = maxOverlap)]
    pub fn max_overlap(&self) -> u32 {
        self.max_overlap
    }
}

#[wasm_bindgen(js_name = coverageSlice)]
pub fn wasm_coverage_slice(dim: usize, tiles: usize, tile: usize, z: usize) -> Result<Coverage, JsError> {
    let (rgba, tiles, max_overlap) = coverage_slice(dim, tiles, tile, z).map_err(js)?;
    Ok(Coverage { rgba, tiles, max_overlap })
}

#[wasm_bindgen]
pub struct FusionResult(Fusion);

#[wasm_bindgen]
impl FusionResult {
    #[wasm_bindgen(getter, js_name = singleDsc)]
    pub fn single_dsc(&self) -> f64 {
        self.0.single_dsc
    }
    #[wasm_bindgen(getter, js_name = fusedDsc)]
    pub fn fused_dsc(&self) -> f64 {
        self.0.fused_dsc
    }
    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.0.rgba.clone()
    }
}

#[wasm_bindgen(js_name = noisyFusion)]
pub fn wasm_noisy_fusion(seed: u32, flip: f64, tiles: usize, tile: usize, z: usize) -> Result<FusionResult, JsError> {
    noisy_fusion(seed, flip, tiles, tile, z).map(FusionResult).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slices_have_one_pixel_per_voxel() {
        for layer in ["image", "labels"] {
            assert_eq!(phantom_slice("adult", 1, 16, layer).unwrap().len(), 32 * 32 * 4);
        }
        assert_eq!(phantom_slice("contrast", 1, 16, "post").unwrap().len(), 32 * 32 * 4);
        assert!(phantom_slice("adult", 1, 16, "post").is_err());
        assert!(phantom_slice("adult", 1, 32, "image").is_err());
        assert!(phantom_slice("infant", 1, 0, "image").is_err());
    }

    #[test]
    fn label_slice_uses_palette() {
        let rgba = phantom_slice("adult", 3, 16, "labels").unwrap();
        // Corner is background, centre is inside the brain.
        assert_eq!(&rgba[..4], &[0, 0, 0, 255]);
        let c = (16 * 32 + 16) * 4;
        assert_ne!(&rgba[c..c + 3], &[0, 0, 0]);
    }

    #[test]
    fn coverage_reports_overlap() {
        let (rgba, n, max) = coverage_slice(32, 3, 12, 11).unwrap();
        assert_eq!(n, 27);
        assert_eq!(rgba.len(), 32 * 32 * 4);
        // Origins 0, 10, 20: voxels 10..12 lie in two tiles per axis.
        assert_eq!(max, 8);
        assert!(coverage_slice(32, 2, 12, 0).is_err());
    }

    #[test]
    fn noiseless_fusion_is_exact_and_voting_helps() {
        let clean = noisy_fusion(1, 0.0, 3, 12, 16).unwrap();
        assert_eq!(clean.fused_dsc, 1.0);
        assert_eq!(clean.single_dsc, 1.0);
        let noisy = noisy_fusion(1, 0.3, 3, 16, 16).unwrap();
        assert!(noisy.fused_dsc > noisy.single_dsc, "{noisy:?}");
    }
}
