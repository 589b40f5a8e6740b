//! Synthetic cohorts with exact ground truth.
//!
//! Each subject is a nest of seeded random ellipsoids (CSF rim, grey-matter
//! shell, white-matter core) with a small sphere embedded in the core,
//! sampled through a smooth low-frequency displacement field. The pediatric
//! preset shrinks the anatomy and narrows the grey/white contrast; the
//! contrast preset adds a paired post-contrast image where the CSF rim and a
//! random tenth of the grey-matter shell are brightened.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volio::{
    flat_index, write_label_map, write_manifest, write_volume, CohortManifest, CohortTag,
    LabelEntry, LabelMap, SubjectRecord, Volume3D,
};

pub const BACKGROUND: u32 = 0;
pub const CSF_RIM: u32 = 1;
pub const GM_SHELL: u32 = 2;
pub const WM_CORE: u32 = 3;
pub const HC_ANALOG: u32 = 4;

/// Minimum voxel count for each foreground structure.
pub const MIN_STRUCTURE_VOXELS: usize = 8;

/// Fraction of grey-matter voxels that enhance in the post-contrast image.
pub const GM_ENHANCING_FRACTION: f64 = 0.10;

const CSF_INNER_RATIO: f64 = 0.85;
const WM_RATIO: f64 = 0.60;
const BRAIN_RADIUS_FRACTION: f64 = 0.40;
/// HC-analog radius as a fraction of the smallest grid extent (4 voxels at 32).
const HC_RADIUS_FRACTION: f64 = 0.125;
/// Salt separating the enhancement-mask stream from the anatomy stream.
const ENHANCE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

pub fn vocabulary() -> Vec<LabelEntry> {
    vec![
        LabelEntry::new(BACKGROUND, "background"),
        LabelEntry::new(CSF_RIM, "csf_rim"),
        LabelEntry::new(GM_SHELL, "gm_shell"),
        LabelEntry::new(WM_CORE, "wm_core"),
        LabelEntry::new(HC_ANALOG, "hc_analog"),
    ]
}

fn default_voxel_size() -> [f32; 3] {
    [1.0; 3]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    #[serde(default = "default_voxel_size")]
    pub voxel_size: [f32; 3],
    /// Brain size multiplier in (0, 1].
    pub scale: f64,
    pub gm_intensity: f64,
    pub wm_intensity: f64,
    pub csf_intensity: f64,
    pub hc_intensity: f64,
    pub noise_sigma: f64,
    /// Peak displacement of the deformation field, in voxels.
    pub deform_amplitude: f64,
    /// Added to enhancing voxels of the post-contrast image.
    #[serde(default)]
    pub enhancement_delta: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn adult() -> Self {
        PhantomSpec {
            dims: [32, 32, 32],
            voxel_size: [1.0; 3],
            scale: 1.0,
            gm_intensity: 0.6,
            wm_intensity: 1.0,
            csf_intensity: 0.3,
            hc_intensity: 0.55,
            noise_sigma: 0.05,
            deform_amplitude: 1.5,
            enhancement_delta: 0.0,
            seed: 0,
        }
    }

    pub fn pediatric() -> Self {
        PhantomSpec {
            scale: 0.75,
            gm_intensity: 0.8,
            ..Self::adult()
        }
    }

    pub fn contrast() -> Self {
        PhantomSpec {
            enhancement_delta: 0.5,
            ..Self::adult()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Invalid(format!("phantom dims {:?}", self.dims)));
        }
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return Err(Error::Invalid(format!("scale {} outside (0, 1]", self.scale)));
        }
        if !(self.noise_sigma >= 0.0) || !(self.deform_amplitude >= 0.0) {
            return Err(Error::Invalid("noise_sigma and deform_amplitude must be ≥ 0".into()));
        }
        let values = [
            self.gm_intensity,
            self.wm_intensity,
            self.csf_intensity,
            self.hc_intensity,
            self.noise_sigma,
            self.deform_amplitude,
            self.enhancement_delta,
        ];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("phantom parameters must be finite".into()));
        }
        if self.voxel_size.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Invalid(format!("voxel size {:?}", self.voxel_size)));
        }
        Ok(())
    }

    fn intensity(&self, label: u32) -> f64 {
        match label {
            CSF_RIM => self.csf_intensity,
            GM_SHELL => self.gm_intensity,
            WM_CORE => self.wm_intensity,
            HC_ANALOG => self.hc_intensity,
            _ => 0.0,
        }
    }
}

/// Versioned preset file shipped in `configs/phantom_presets.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetFile {
    pub version: u32,
    pub adult: PhantomSpec,
    pub pediatric: PhantomSpec,
    pub contrast: PhantomSpec,
}

impl PresetFile {
    pub fn builtin() -> Self {
        PresetFile {
            version: 1,
            adult: PhantomSpec::adult(),
            pediatric: PhantomSpec::pediatric(),
            contrast: PhantomSpec::contrast(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSubject {
    pub id: String,
    pub image: Volume3D,
    /// Present for contrast pairs only; shares `truth` with `image`.
    pub post_image: Option<Volume3D>,
    pub truth: LabelMap,
}

/// Seeded anatomy: everything the labels depend on.
struct Anatomy {
    center: [f64; 3],
    radii: [f64; 3],
    wm_ratio: f64,
    hc_center: [f64; 3],
    hc_radius: f64,
    /// Per output axis: (source axis, phase) of a one-cycle sine displacement.
    warp: [(usize, f64); 3],
}

impl Anatomy {
    fn draw(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Self {
        let d = spec.dims.map(|v| v as f64);
        let min_dim = d.iter().copied().fold(f64::INFINITY, f64::min);
        let r0 = BRAIN_RADIUS_FRACTION * min_dim * spec.scale;
        let mut center = [0.0; 3];
        let mut radii = [0.0; 3];
        for a in 0..3 {
            center[a] = (d[a] - 1.0) / 2.0 + rng.random_range(-1.0..1.0);
            radii[a] = r0 * (1.0 + rng.random_range(-0.08..0.08));
        }
        let wm_ratio = WM_RATIO * (1.0 + rng.random_range(-0.05..0.05));
        let hc_radius = HC_RADIUS_FRACTION * min_dim * spec.scale;
        let wm_min = radii.iter().copied().fold(f64::INFINITY, f64::min) * wm_ratio;
        let room = (wm_min - hc_radius - 1.0).max(0.0);
        let theta = rng.random_range(0.0..TAU);
        let cos_phi: f64 = rng.random_range(-1.0..1.0);
        let sin_phi = (1.0 - cos_phi * cos_phi).sqrt();
        let dir = [sin_phi * theta.cos(), sin_phi * theta.sin(), cos_phi];
        let dist = room * rng.random_range(0.0..0.6);
        let hc_center = [0, 1, 2].map(|a| center[a] + dir[a] * dist);
        let mut warp = [(0, 0.0); 3];
        for (a, w) in warp.iter_mut().enumerate() {
            let other = (a + 1 + rng.random_range(0..2usize)) % 3;
            *w = (other, rng.random_range(0.0..TAU));
        }
        Anatomy {
            center,
            radii,
            wm_ratio,
            hc_center,
            hc_radius,
            warp,
        }
    }

    fn label_at(&self, spec: &PhantomSpec, p: [f64; 3]) -> u32 {
        let mut q = p;
        for (a, &(src, phase)) in self.warp.iter().enumerate() {
            q[a] += spec.deform_amplitude * (TAU * p[src] / spec.dims[src] as f64 + phase).sin();
        }
        let rho = (0..3)
            .map(|a| ((q[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        if rho > 1.0 {
            BACKGROUND
        } else if rho > CSF_INNER_RATIO {
            CSF_RIM
        } else if rho > self.wm_ratio {
            GM_SHELL
        } else {
            let hc = (0..3)
                .map(|a| (q[a] - self.hc_center[a]).powi(2))
                .sum::<f64>()
                .sqrt();
            if hc <= self.hc_radius {
                HC_ANALOG
            } else {
                WM_CORE
            }
        }
    }
}

fn build_truth(spec: &PhantomSpec, anatomy: &Anatomy) -> Result<LabelMap> {
    let [nx, ny, nz] = spec.dims;
    let mut labels = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                labels.push(anatomy.label_at(spec, [x as f64, y as f64, z as f64]));
            }
        }
    }
    for entry in &vocabulary()[1..] {
        let n = labels.iter().filter(|&&l| l == entry.id).count();
        if n < MIN_STRUCTURE_VOXELS {
            return Err(Error::Invalid(format!(
                "phantom too small: {} has {n} voxels (need {MIN_STRUCTURE_VOXELS})",
                entry.name
            )));
        }
    }
    LabelMap::new(spec.dims, spec.voxel_size, labels, vocabulary())
}

fn noise(spec: &PhantomSpec, rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    if spec.noise_sigma == 0.0 {
        return vec![0.0; n];
    }
    let normal = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
    (0..n).map(|_| normal.sample(rng)).collect()
}

fn render(spec: &PhantomSpec, truth: &LabelMap, noise: &[f64], boost: Option<&[bool]>) -> Result<Volume3D> {
    let data = truth
        .labels()
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let mut v = spec.intensity(l);
            if boost.is_some_and(|m| m[i]) {
                v += spec.enhancement_delta;
            }
            (v + noise[i]) as f32
        })
        .collect();
    Volume3D::new(spec.dims, spec.voxel_size, data)
}

fn subject_id(spec: &PhantomSpec) -> String {
    format!("phantom-{}", spec.seed)
}

/// One deterministic subject.
pub fn generate_subject(spec: &PhantomSpec) -> Result<PhantomSubject> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let anatomy = Anatomy::draw(spec, &mut rng);
    let truth = build_truth(spec, &anatomy)?;
    let noise = noise(spec, &mut rng, truth.labels().len());
    let image = render(spec, &truth, &noise, None)?;
    Ok(PhantomSubject {
        id: subject_id(spec),
        image,
        post_image: None,
        truth,
    })
}

/// Voxels brightened by contrast: the CSF rim plus a seeded 10% of grey matter.
pub fn enhancing_mask(spec: &PhantomSpec, truth: &LabelMap) -> Vec<bool> {
    let labels = truth.labels();
    let mut mask: Vec<bool> = labels.iter().map(|&l| l == CSF_RIM).collect();
    let gm: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == GM_SHELL).collect();
    let k = (gm.len() as f64 * GM_ENHANCING_FRACTION).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ ENHANCE_SALT);
    let mut picked: Vec<usize> = sample(&mut rng, gm.len(), k).into_vec();
    picked.sort_unstable();
    for i in picked {
        mask[gm[i]] = true;
    }
    mask
}

/// Pre/post pair sharing anatomy and noise; only the enhancing mask differs.
pub fn generate_contrast_pair(spec: &PhantomSpec) -> Result<PhantomSubject> {
    if spec.enhancement_delta == 0.0 {
        return Err(Error::Invalid("contrast pairs need a non-zero enhancement_delta".into()));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let anatomy = Anatomy::draw(spec, &mut rng);
    let truth = build_truth(spec, &anatomy)?;
    let noise = noise(spec, &mut rng, truth.labels().len());
    let image = render(spec, &truth, &noise, None)?;
    let mask = enhancing_mask(spec, &truth);
    let post = render(spec, &truth, &noise, Some(&mask))?;
    Ok(PhantomSubject {
        id: subject_id(spec),
        image,
        post_image: Some(post),
        truth,
    })
}

/// A named cohort of `n` subjects drawn from one preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub phantom: PhantomSpec,
    pub n: usize,
    pub cohort: CohortTag,
    /// Subject ids are `<id_prefix><index>`.
    pub id_prefix: String,
}

/// Subject `i` uses seed `spec.seed + i`. When `out_dir` is given the volumes,
/// label maps and `manifest.json` are written there.
pub fn generate_cohort(
    cohort: &CohortSpec,
    out_dir: Option<&Path>,
) -> Result<(Vec<PhantomSubject>, CohortManifest)> {
    if cohort.n == 0 {
        return Err(Error::Invalid("cohort size must be at least 1".into()));
    }
    cohort.phantom.validate()?;
    let make = |i: usize| -> Result<PhantomSubject> {
        let spec = cohort.phantom.clone().with_seed(cohort.phantom.seed.wrapping_add(i as u64));
        let mut s = if cohort.cohort == CohortTag::ContrastPair {
            generate_contrast_pair(&spec)?
        } else {
            generate_subject(&spec)?
        };
        s.id = format!("{}{:03}", cohort.id_prefix, i);
        Ok(s)
    };
    #[cfg(feature = "parallel")]
    let subjects: Vec<PhantomSubject> = {
        use rayon::prelude::*;
        (0..cohort.n).into_par_iter().map(make).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let subjects: Vec<PhantomSubject> = (0..cohort.n).map(make).collect::<Result<_>>()?;

    let mut manifest = CohortManifest::default();
    for s in &subjects {
        manifest.subjects.push(SubjectRecord {
            subject_id: s.id.clone(),
            image_path: format!("{}_T1w.nii", s.id).into(),
            label_path: Some(format!("{}_seg.nii", s.id).into()),
            paired_image_path: s.post_image.as_ref().map(|_| format!("{}_T1w_post.nii", s.id).into()),
            cohort_tag: cohort.cohort,
        });
    }
    manifest.validate()?;

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (s, rec) in subjects.iter().zip(&manifest.subjects) {
            write_volume(&s.image, dir.join(&rec.image_path))?;
            write_label_map(&s.truth, dir.join(rec.label_path.as_ref().expect("set above")))?;
            if let (Some(post), Some(p)) = (&s.post_image, &rec.paired_image_path) {
                write_volume(post, dir.join(p))?;
            }
        }
        write_manifest(&manifest, dir.join("manifest.json"))?;
    }
    Ok((subjects, manifest))
}

/// Mean |GM − WM| intensity gap of a subject's image.
pub fn gm_wm_gap(subject: &PhantomSubject) -> f64 {
    let mean_of = |label: u32| {
        let (sum, n) = subject
            .truth
            .labels()
            .iter()
            .zip(subject.image.data())
            .filter(|(&l, _)| l == label)
            .fold((0.0, 0usize), |(s, n), (_, &v)| (s + v as f64, n + 1));
        sum / n.max(1) as f64
    };
    (mean_of(GM_SHELL) - mean_of(WM_CORE)).abs()
}

/// Labels that touch `label` through a face, used for nesting checks.
pub fn face_neighbours(map: &LabelMap, label: u32) -> Vec<u32> {
    let d = map.dims();
    let mut found = std::collections::BTreeSet::new();
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                if map.get(x, y, z) != label {
                    continue;
                }
                let p = [x, y, z];
                for a in 0..3 {
                    for step in [-1isize, 1] {
                        let c = p[a] as isize + step;
                        if c < 0 || c >= d[a] as isize {
                            continue;
                        }
                        let mut q = p;
                        q[a] = c as usize;
                        let other = map.labels()[flat_index(d, q[0], q[1], q[2])];
                        if other != label {
                            found.insert(other);
                        }
                    }
                }
            }
        }
    }
    found.into_iter().collect()
}
