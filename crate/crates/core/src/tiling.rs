//! Overlapping tile decomposition and majority-vote fusion.
//!
//! A volume is covered by `k0·k1·k2` equally shaped tiles whose origins are
//! evenly spaced along each axis. Each tile is segmented on its own and the
//! per-tile label maps are fused by counting, at every voxel, the labels
//! proposed by all tiles covering it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volio::{flat_index, LabelEntry, LabelMap, Volume3D};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub volume_dims: [usize; 3],
    pub tiles_per_axis: [usize; 3],
    pub tile_shape: [usize; 3],
    /// Lexicographic in tile index (axis 0 slowest).
    pub origins: Vec<[usize; 3]>,
}

/// Origins along one axis: `round(i·(D − t)/(k − 1))`, or just 0 when k = 1.
fn axis_origins(dim: usize, k: usize, t: usize) -> Vec<usize> {
    if k == 1 {
        return vec![0];
    }
    let span = (dim - t) as f64;
    (0..k)
        .map(|i| (i as f64 * span / (k - 1) as f64).round() as usize)
        .collect()
}

pub fn plan_tiles(
    volume_dims: [usize; 3],
    tiles_per_axis: [usize; 3],
    tile_shape: [usize; 3],
) -> Result<TilePlan> {
    let mut per_axis = Vec::with_capacity(3);
    for a in 0..3 {
        let (d, k, t) = (volume_dims[a], tiles_per_axis[a], tile_shape[a]);
        if d == 0 || k == 0 || t == 0 {
            return Err(Error::Invalid(format!(
                "axis {a}: dims, tile counts and tile sizes must be positive"
            )));
        }
        if t > d {
            return Err(Error::Invalid(format!(
                "axis {a}: tile size {t} exceeds volume size {d}"
            )));
        }
        if k * t < d {
            return Err(Error::Invalid(format!(
                "axis {a}: {k} tiles of size {t} cannot cover {d} voxels"
            )));
        }
        per_axis.push(axis_origins(d, k, t));
    }
    let mut origins = Vec::with_capacity(per_axis.iter().map(Vec::len).product());
    for &o0 in &per_axis[0] {
        for &o1 in &per_axis[1] {
            for &o2 in &per_axis[2] {
                origins.push([o0, o1, o2]);
            }
        }
    }
    Ok(TilePlan {
        volume_dims,
        tiles_per_axis,
        tile_shape,
        origins,
    })
}

impl TilePlan {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn tile_voxels(&self) -> usize {
        self.tile_shape.iter().product()
    }

    /// Number of tiles covering each voxel, flat row-major.
    pub fn coverage(&self) -> Vec<u32> {
        let d = self.volume_dims;
        let mut counts = vec![0u32; d.iter().product()];
        for o in &self.origins {
            for z in o[2]..o[2] + self.tile_shape[2] {
                for y in o[1]..o[1] + self.tile_shape[1] {
                    let row = flat_index(d, o[0], y, z);
                    for c in &mut counts[row..row + self.tile_shape[0]] {
                        *c += 1;
                    }
                }
            }
        }
        counts
    }
}

fn check_fits(dims: [usize; 3], origin: [usize; 3], shape: [usize; 3]) -> Result<()> {
    for a in 0..3 {
        if shape[a] == 0 || origin[a] + shape[a] > dims[a] {
            return Err(Error::Invalid(format!(
                "tile at {origin:?} with shape {shape:?} does not fit in {dims:?}"
            )));
        }
    }
    Ok(())
}

/// Copy the sub-grid at `origin` into a dense buffer.
pub(crate) fn crop<T: Copy>(
    src: &[T],
    dims: [usize; 3],
    origin: [usize; 3],
    shape: [usize; 3],
) -> Vec<T> {
    let mut out = Vec::with_capacity(shape.iter().product());
    for z in origin[2]..origin[2] + shape[2] {
        for y in origin[1]..origin[1] + shape[1] {
            let start = flat_index(dims, origin[0], y, z);
            out.extend_from_slice(&src[start..start + shape[0]]);
        }
    }
    out
}

pub fn extract_tile(volume: &Volume3D, origin: [usize; 3], tile_shape: [usize; 3]) -> Result<Volume3D> {
    check_fits(volume.dims(), origin, tile_shape)?;
    let data = crop(volume.data(), volume.dims(), origin, tile_shape);
    Volume3D::new(tile_shape, volume.voxel_size(), data)
}

pub fn extract_label_tile(
    map: &LabelMap,
    origin: [usize; 3],
    tile_shape: [usize; 3],
) -> Result<LabelMap> {
    check_fits(map.dims(), origin, tile_shape)?;
    let labels = crop(map.labels(), map.dims(), origin, tile_shape);
    Ok(LabelMap::new(tile_shape, map.voxel_size(), labels, map.vocabulary().to_vec())?
        .with_background(map.background_id()))
}

/// Majority vote over raw per-tile label buffers. Ties go to the smallest
/// label id. Every voxel must be covered by at least one tile.
pub fn fuse_votes(
    volume_dims: [usize; 3],
    tile_shape: [usize; 3],
    tiles: &[([usize; 3], &[u32])],
) -> Result<Vec<u32>> {
    let tile_len: usize = tile_shape.iter().product();
    for (origin, labels) in tiles {
        check_fits(volume_dims, *origin, tile_shape)?;
        if labels.len() != tile_len {
            return Err(Error::Shape(format!(
                "tile at {origin:?} has {} voxels, expected {tile_len}",
                labels.len()
            )));
        }
    }

    // Distinct origin values per axis, and for each coordinate which of them
    // cover it.
    let mut axis_values: [Vec<usize>; 3] = Default::default();
    for a in 0..3 {
        let mut v: Vec<usize> = tiles.iter().map(|(o, _)| o[a]).collect();
        v.sort_unstable();
        v.dedup();
        axis_values[a] = v;
    }
    let covering: Vec<Vec<Vec<usize>>> = (0..3)
        .map(|a| {
            (0..volume_dims[a])
                .map(|c| {
                    axis_values[a]
                        .iter()
                        .enumerate()
                        .filter(|(_, &o)| o <= c && c < o + tile_shape[a])
                        .map(|(i, _)| i)
                        .collect()
                })
                .collect()
        })
        .collect();
    let grid_dims = [axis_values[0].len(), axis_values[1].len(), axis_values[2].len()];
    let mut grid: Vec<Vec<usize>> = vec![Vec::new(); grid_dims.iter().product()];
    for (t, (o, _)) in tiles.iter().enumerate() {
        let idx: Vec<usize> = (0..3)
            .map(|a| axis_values[a].binary_search(&o[a]).unwrap())
            .collect();
        grid[flat_index(grid_dims, idx[0], idx[1], idx[2])].push(t);
    }

    let mut out = Vec::with_capacity(volume_dims.iter().product());
    let mut votes: Vec<(u32, u32)> = Vec::new();
    for z in 0..volume_dims[2] {
        for y in 0..volume_dims[1] {
            for x in 0..volume_dims[0] {
                votes.clear();
                for &c in &covering[2][z] {
                    for &b in &covering[1][y] {
                        for &a in &covering[0][x] {
                            for &t in &grid[flat_index(grid_dims, a, b, c)] {
                                let (o, labels) = tiles[t];
                                let l = labels[flat_index(tile_shape, x - o[0], y - o[1], z - o[2])];
                                match votes.iter_mut().find(|(id, _)| *id == l) {
                                    Some(slot) => slot.1 += 1,
                                    None => votes.push((l, 1)),
                                }
                            }
                        }
                    }
                }
                let winner = votes
                    .iter()
                    .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                    .map(|&(l, _)| l)
                    .ok_or_else(|| {
                        Error::Invalid(format!("voxel ({x},{y},{z}) is not covered by any tile"))
                    })?;
                out.push(winner);
            }
        }
    }
    Ok(out)
}

/// Fuse one label map per plan tile into a whole-volume label map.
pub fn fuse_predictions(tile_maps: &[([usize; 3], LabelMap)], plan: &TilePlan) -> Result<LabelMap> {
    if tile_maps.len() != plan.len() {
        return Err(Error::Invalid(format!(
            "{} tile maps for a plan of {} tiles",
            tile_maps.len(),
            plan.len()
        )));
    }
    let mut expected = plan.origins.clone();
    let mut given: Vec<[usize; 3]> = tile_maps.iter().map(|(o, _)| *o).collect();
    expected.sort_unstable();
    given.sort_unstable();
    if expected != given {
        return Err(Error::Invalid("tile origins do not match the plan".into()));
    }
    for (o, m) in tile_maps {
        if m.dims() != plan.tile_shape {
            return Err(Error::Shape(format!(
                "tile map at {o:?} has dims {:?}, expected {:?}",
                m.dims(),
                plan.tile_shape
            )));
        }
    }

    let raw: Vec<([usize; 3], &[u32])> = tile_maps.iter().map(|(o, m)| (*o, m.labels())).collect();
    let labels = fuse_votes(plan.volume_dims, plan.tile_shape, &raw)?;

    let mut vocabulary: Vec<LabelEntry> = Vec::new();
    for (_, m) in tile_maps {
        for e in m.vocabulary() {
            if !vocabulary.iter().any(|v| v.id == e.id) {
                vocabulary.push(e.clone());
            }
        }
    }
    vocabulary.sort_by_key(|e| e.id);
    let voxel_size = tile_maps
        .first()
        .map(|(_, m)| m.voxel_size())
        .unwrap_or([1.0; 3]);
    let background = tile_maps.first().map(|(_, m)| m.background_id()).unwrap_or(0);
    Ok(LabelMap::new(plan.volume_dims, voxel_size, labels, vocabulary)?.with_background(background))
}
