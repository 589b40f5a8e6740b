//! Overlap metrics, structure volumes and paired significance tests.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volio::LabelMap;

/// Largest reduced sample size for which the signed-rank p-value is exact.
pub const EXACT_WILCOXON_MAX_N: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DscKind {
    /// Prediction against ground truth.
    #[serde(rename = "pDSC")]
    Performance,
    /// Two automatic segmentations of the same subject.
    #[serde(rename = "rDSC")]
    Reproducibility,
    #[serde(rename = "plain")]
    Plain,
}

impl DscKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DscKind::Performance => "pDSC",
            DscKind::Reproducibility => "rDSC",
            DscKind::Plain => "plain",
        }
    }
}

/// `None` marks a label absent from both maps.
pub type PerLabelDsc = BTreeMap<u32, Option<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DscRecord {
    pub subject_id: String,
    pub per_label: PerLabelDsc,
    pub mean_dsc: f64,
    pub kind: DscKind,
}

fn check_comparable(a: &LabelMap, b: &LabelMap) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("label maps {:?} vs {:?}", a.dims(), b.dims())));
    }
    if a.vocabulary_ids() != b.vocabulary_ids() {
        return Err(Error::Labels(format!(
            "vocabularies differ: {:?} vs {:?}",
            a.vocabulary_ids(),
            b.vocabulary_ids()
        )));
    }
    Ok(())
}

/// Dice overlap for every vocabulary label (background included).
pub fn dsc_per_label(a: &LabelMap, b: &LabelMap) -> Result<PerLabelDsc> {
    check_comparable(a, b)?;
    let mut size_a: BTreeMap<u32, u64> = BTreeMap::new();
    let mut size_b: BTreeMap<u32, u64> = BTreeMap::new();
    let mut both: BTreeMap<u32, u64> = BTreeMap::new();
    for (&la, &lb) in a.labels().iter().zip(b.labels()) {
        *size_a.entry(la).or_default() += 1;
        *size_b.entry(lb).or_default() += 1;
        if la == lb {
            *both.entry(la).or_default() += 1;
        }
    }
    Ok(a
        .vocabulary_ids()
        .into_iter()
        .map(|id| {
            let na = size_a.get(&id).copied().unwrap_or(0);
            let nb = size_b.get(&id).copied().unwrap_or(0);
            let inter = both.get(&id).copied().unwrap_or(0);
            let dsc = (na + nb > 0).then(|| 2.0 * inter as f64 / (na + nb) as f64);
            (id, dsc)
        })
        .collect())
}

/// Mean over defined labels other than `background`.
pub fn mean_dsc(per_label: &PerLabelDsc, background: u32) -> Result<f64> {
    let defined: Vec<f64> = per_label
        .iter()
        .filter(|(&id, _)| id != background)
        .filter_map(|(_, d)| *d)
        .collect();
    if defined.is_empty() {
        return Err(Error::Invalid("no defined foreground label to average".into()));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

pub fn dsc_record(
    subject_id: impl Into<String>,
    a: &LabelMap,
    b: &LabelMap,
    kind: DscKind,
) -> Result<DscRecord> {
    let per_label = dsc_per_label(a, b)?;
    let mean = mean_dsc(&per_label, a.background_id())?;
    Ok(DscRecord {
        subject_id: subject_id.into(),
        per_label,
        mean_dsc: mean,
        kind,
    })
}

/// Agreement between segmentations of a pre/post-contrast pair.
pub fn reproducibility_dsc(
    subject_id: impl Into<String>,
    seg_pre: &LabelMap,
    seg_post: &LabelMap,
) -> Result<DscRecord> {
    dsc_record(subject_id, seg_pre, seg_post, DscKind::Reproducibility)
}

/// Volume of `label` in cm³.
pub fn region_volume(seg: &LabelMap, label: u32) -> Result<f64> {
    if !seg.vocabulary_ids().contains(&label) {
        return Err(Error::Labels(format!("label {label} not in vocabulary")));
    }
    let voxel_mm3: f64 = seg.voxel_size().iter().map(|&v| v as f64).product();
    Ok(seg.count(label) as f64 * voxel_mm3 / 1000.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeChangeRecord {
    pub subject_id: String,
    pub pre_volume_cm3: f64,
    pub post_volume_cm3: f64,
    /// `None` when the pre volume is zero.
    pub percent_change: Option<f64>,
}

impl VolumeChangeRecord {
    pub fn new(subject_id: impl Into<String>, pre: f64, post: f64) -> Result<Self> {
        if !(pre >= 0.0 && post >= 0.0) {
            return Err(Error::Invalid(format!("volumes must be ≥ 0 (got {pre}, {post})")));
        }
        Ok(VolumeChangeRecord {
            subject_id: subject_id.into(),
            pre_volume_cm3: pre,
            post_volume_cm3: post,
            percent_change: (pre > 0.0).then(|| 100.0 * (post - pre) / pre),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeChangeSummary {
    pub mean_percent_change: f64,
    pub mean_abs_percent_change: f64,
    pub rmse_cm3: f64,
}

pub fn volume_change_stats(records: &[VolumeChangeRecord]) -> Result<VolumeChangeSummary> {
    if records.is_empty() {
        return Err(Error::Invalid("no volume records".into()));
    }
    let mut pct = Vec::with_capacity(records.len());
    for r in records {
        match r.percent_change {
            Some(p) => pct.push(p),
            None => {
                return Err(Error::Invalid(format!(
                    "subject {} has zero pre-contrast volume",
                    r.subject_id
                )))
            }
        }
    }
    let n = records.len() as f64;
    let sq: f64 = records
        .iter()
        .map(|r| (r.post_volume_cm3 - r.pre_volume_cm3).powi(2))
        .sum();
    Ok(VolumeChangeSummary {
        mean_percent_change: pct.iter().sum::<f64>() / n,
        mean_abs_percent_change: pct.iter().map(|p| p.abs()).sum::<f64>() / n,
        rmse_cm3: (sq / n).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatResult {
    /// Pairs left after dropping zero differences.
    pub n_pairs: usize,
    pub w_plus: f64,
    pub p_two_sided: f64,
    pub exact: bool,
    pub n_comparisons: usize,
    pub bonferroni_alpha: f64,
    pub significant: bool,
}

impl StatResult {
    /// Re-evaluate significance for a family of `m` comparisons at level `alpha`.
    pub fn with_comparisons(mut self, alpha: f64, m: usize) -> Result<Self> {
        self.bonferroni_alpha = bonferroni(alpha, m)?;
        self.n_comparisons = m;
        self.significant = self.p_two_sided < self.bonferroni_alpha;
        Ok(self)
    }
}

pub fn bonferroni(alpha: f64, m: usize) -> Result<f64> {
    if m == 0 {
        return Err(Error::Invalid("Bonferroni correction needs m ≥ 1".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Invalid(format!("alpha {alpha} outside (0, 1)")));
    }
    Ok(alpha / m as f64)
}

/// Average ranks (1-based) of `values`, ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn standard_normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

/// Exact null distribution of W+ over all 2ⁿ sign patterns. Ranks are doubled
/// so tied (half-integer) ranks stay integral; `counts[s]` is the number of
/// patterns whose doubled W+ equals `s`.
fn signed_rank_distribution(doubled_ranks: &[usize]) -> Vec<f64> {
    let total: usize = doubled_ranks.iter().sum();
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in doubled_ranks {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    counts
}

/// Two-sided paired signed-rank test of `x` against `y` (zero differences
/// dropped). Exact for up to [`EXACT_WILCOXON_MAX_N`] non-zero pairs, normal
/// approximation with tie and continuity correction beyond. The result uses
/// a single comparison at alpha 0.05; see [`StatResult::with_comparisons`].
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<StatResult> {
    if x.len() != y.len() {
        return Err(Error::Invalid(format!("paired samples of length {} and {}", x.len(), y.len())));
    }
    if x.is_empty() {
        return Err(Error::Invalid("signed-rank test needs at least one pair".into()));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|v| *v != 0.0).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("non-finite paired difference".into()));
    }
    if d.is_empty() {
        return Err(Error::Invalid("all differences are zero; the test is undefined".into()));
    }
    let n = d.len();
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).fold(0.0, |acc, (_, r)| acc + r);

    let (p, exact) = if n <= EXACT_WILCOXON_MAX_N {
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let counts = signed_rank_distribution(&doubled);
        let w2 = (2.0 * w_plus).round() as usize;
        let total = 2f64.powi(n as i32);
        let lower: f64 = counts[..=w2].iter().sum::<f64>() / total;
        let upper: f64 = counts[w2..].iter().sum::<f64>() / total;
        ((2.0 * lower.min(upper)).min(1.0), true)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut ties = 0.0;
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < sorted.len() {
            let j = sorted[i..].iter().take_while(|&&v| v == sorted[i]).count();
            let t = j as f64;
            ties += t * t * t - t;
            i += j;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
        let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
        ((2.0 * standard_normal_sf(z)).min(1.0), false)
    };
    StatResult {
        n_pairs: n,
        w_plus,
        p_two_sided: p,
        exact,
        n_comparisons: 1,
        bonferroni_alpha: 0.05,
        significant: false,
    }
    .with_comparisons(0.05, 1)
}

/// Population mean and sample standard deviation (0 for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Rows: subject_id, kind, label_id, dsc (empty when undefined).
pub fn write_metrics_csv<W: Write>(out: W, records: &[DscRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["subject_id", "kind", "label_id", "dsc"])?;
    for r in records {
        for (id, d) in &r.per_label {
            let dsc = d.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([r.subject_id.as_str(), r.kind.as_str(), &id.to_string(), &dsc])?;
        }
    }
    w.flush().map_err(|e| Error::io("<metrics csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volio::LabelEntry;

    fn vocab(n: u32) -> Vec<LabelEntry> {
        (0..n).map(|i| LabelEntry::new(i, format!("l{i}"))).collect()
    }

    fn cube(dims: [usize; 3], lo: [usize; 3], side: usize) -> LabelMap {
        let mut labels = vec![0u32; dims.iter().product()];
        for z in lo[2]..lo[2] + side {
            for y in lo[1]..lo[1] + side {
                for x in lo[0]..lo[0] + side {
                    labels[x + dims[0] * (y + dims[1] * z)] = 1;
                }
            }
        }
        LabelMap::new(dims, [1.0; 3], labels, vocab(3)).unwrap()
    }

    #[test]
    fn shifted_cube_has_half_overlap() {
        let a = cube([8, 8, 8], [1, 1, 1], 4);
        let b = cube([8, 8, 8], [3, 1, 1], 4);
        let d = dsc_per_label(&a, &b).unwrap();
        assert_eq!(d[&1], Some(0.5));
        // Label 2 is absent from both maps.
        assert_eq!(d[&2], None);
        assert_eq!(dsc_per_label(&a, &a).unwrap()[&1], Some(1.0));
    }

    #[test]
    fn vocabulary_mismatch_is_rejected() {
        let a = cube([4, 4, 4], [0, 0, 0], 2);
        let b = LabelMap::new([4, 4, 4], [1.0; 3], a.labels().to_vec(), vocab(2)).unwrap();
        assert!(dsc_per_label(&a, &b).is_err());
    }

    #[test]
    fn mean_excludes_background_and_undefined() {
        let m: PerLabelDsc = [(0, Some(0.99)), (1, Some(0.8)), (2, Some(0.6))].into();
        assert!((mean_dsc(&m, 0).unwrap() - 0.7).abs() < 1e-12);
        let m: PerLabelDsc = [(1, Some(0.9)), (2, None)].into();
        assert_eq!(mean_dsc(&m, 0).unwrap(), 0.9);
        let m: PerLabelDsc = [(0, Some(1.0)), (1, None)].into();
        assert!(mean_dsc(&m, 0).is_err());
    }

    #[test]
    fn all_background_post_gives_zero_rdsc() {
        let pre = cube([6, 6, 6], [1, 1, 1], 3);
        let post = pre.relabel(vec![0; 216]).unwrap();
        let r = reproducibility_dsc("s", &pre, &post).unwrap();
        assert_eq!(r.per_label[&1], Some(0.0));
        assert_eq!(r.mean_dsc, 0.0);
        assert_eq!(r.kind, DscKind::Reproducibility);
    }

    #[test]
    fn volumes_in_cubic_centimetres() {
        let labels: Vec<u32> = (0..1000).map(|i| u32::from(i < 500)).collect();
        let iso = LabelMap::new([10, 10, 10], [1.0; 3], labels.clone(), vocab(3)).unwrap();
        assert_eq!(region_volume(&iso, 1).unwrap(), 0.5);
        assert_eq!(region_volume(&iso, 2).unwrap(), 0.0);
        let aniso = LabelMap::new([10, 10, 10], [2.0, 1.0, 1.0], labels, vocab(3)).unwrap();
        assert_eq!(region_volume(&aniso, 1).unwrap(), 1.0);
        assert!(region_volume(&aniso, 7).is_err());
    }

    #[test]
    fn volume_change_examples() {
        let recs = vec![
            VolumeChangeRecord::new("a", 4.0, 3.6).unwrap(),
            VolumeChangeRecord::new("b", 5.0, 4.5).unwrap(),
        ];
        let s = volume_change_stats(&recs).unwrap();
        assert!((s.mean_percent_change + 10.0).abs() < 1e-9);
        assert!((s.rmse_cm3 - (0.205f64).sqrt()).abs() < 1e-12);
        assert!((s.rmse_cm3 - 0.4528).abs() < 1e-4);

        let one = [VolumeChangeRecord::new("c", 2.0, 1.0).unwrap()];
        let s = volume_change_stats(&one).unwrap();
        assert_eq!((s.mean_percent_change, s.rmse_cm3), (-50.0, 1.0));

        assert!(volume_change_stats(&[]).is_err());
        let zero = [VolumeChangeRecord::new("z", 0.0, 1.0).unwrap()];
        assert!(volume_change_stats(&zero).is_err());
    }

    /// Brute force over all sign patterns of the given ranks.
    fn enumerate_p(ranks: &[f64], w: f64) -> f64 {
        let n = ranks.len();
        let (mut lo, mut hi) = (0u64, 0u64);
        for mask in 0u64..1 << n {
            let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if s <= w + 1e-9 {
                lo += 1;
            }
            if s >= w - 1e-9 {
                hi += 1;
            }
        }
        (2.0 * lo.min(hi) as f64 / (1u64 << n) as f64).min(1.0)
    }

    #[test]
    fn six_positive_differences() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let r = wilcoxon_signed_rank(&x, &[0.0; 6]).unwrap();
        assert_eq!(r.w_plus, 21.0);
        assert_eq!(r.p_two_sided, 0.03125);
        assert!(r.exact);
    }

    #[test]
    fn five_pairs_against_enumeration() {
        let d = [1.0, 2.0, 3.0, 4.0, -5.0];
        let r = wilcoxon_signed_rank(&d, &[0.0; 5]).unwrap();
        assert_eq!(r.w_plus, 10.0);
        let oracle = enumerate_p(&[1.0, 2.0, 3.0, 4.0, 5.0], 10.0);
        // 2 · P(W+ ≥ 10) = 2 · 10/32
        assert_eq!(oracle, 0.625);
        assert_eq!(r.p_two_sided, oracle);
    }

    #[test]
    fn ties_and_zeros() {
        // Zeros dropped; |d| = {1, 1, 2} → ranks {1.5, 1.5, 3}.
        let x = [1.0, -1.0, 2.0, 0.0];
        let r = wilcoxon_signed_rank(&x, &[0.0; 4]).unwrap();
        assert_eq!(r.n_pairs, 3);
        assert_eq!(r.w_plus, 4.5);
        assert_eq!(r.p_two_sided, enumerate_p(&[1.5, 1.5, 3.0], 4.5));
        assert!(wilcoxon_signed_rank(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(wilcoxon_signed_rank(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn normal_approximation_for_large_n() {
        let x: Vec<f64> = (1..=30).map(|i| i as f64).collect();
        let r = wilcoxon_signed_rank(&x, &vec![0.0; 30]).unwrap();
        assert!(!r.exact);
        assert_eq!(r.w_plus, 465.0);
        // z = (465 − 232.5 − 0.5) / sqrt(2363.75)
        let z: f64 = 232.0 / 2363.75f64.sqrt();
        assert!((r.p_two_sided - 2.0 * standard_normal_sf(z)).abs() < 1e-15);
        assert!(r.p_two_sided < 1e-5);
        assert!((standard_normal_sf(1.959963984540054) - 0.025).abs() < 1e-12);
    }

    #[test]
    fn bonferroni_thresholds() {
        assert_eq!(format!("{:.4}", bonferroni(0.05, 3).unwrap()), "0.0167");
        assert_eq!(format!("{:.4}", bonferroni(0.05, 6).unwrap()), "0.0083");
        assert_eq!(bonferroni(0.05, 1).unwrap(), 0.05);
        assert!(bonferroni(0.05, 0).is_err());
    }

    #[test]
    fn metrics_csv_marks_undefined_as_empty() {
        let a = cube([4, 4, 4], [0, 0, 0], 2);
        let rec = dsc_record("s1", &a, &a, DscKind::Plain).unwrap();
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[rec]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "subject_id,kind,label_id,dsc\ns1,plain,0,1\ns1,plain,1,1\ns1,plain,2,\n");
    }
}
