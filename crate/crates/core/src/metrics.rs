//! Evaluation: Dice reports, lesion-size classes, five-number summaries, the Wilcoxon
//! rank-sum test and subject-overlap maps.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Modality, Volume};

/// Extents (mm) at or above these make a lesion LARGE.
pub const SMALL_LIMIT_MM: [f64; 3] = [20.0, 20.0, 25.0];
/// Pooled sample size up to which the Wilcoxon test is exact.
pub const EXACT_MAX_N: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LesionClass {
    Small,
    Large,
}

impl fmt::Display for LesionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LesionClass::Small => "SMALL",
            LesionClass::Large => "LARGE",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case_id: String,
    #[serde(rename = "TP")]
    pub tp: u64,
    #[serde(rename = "FP")]
    pub fp: u64,
    #[serde(rename = "FN")]
    pub fn_: u64,
    pub dice: f64,
    pub class: LesionClass,
    pub ex: f64,
    pub ey: f64,
    pub ez: f64,
}

impl CaseReport {
    pub fn extent_mm(&self) -> [f64; 3] {
        [self.ex, self.ey, self.ez]
    }
}

/// `2TP / (2TP + FP + FN)`, 1 for two empty masks.
pub fn dice_from_counts(tp: u64, fp: u64, fn_: u64) -> f64 {
    let den = 2 * tp + fp + fn_;
    if den == 0 {
        1.0
    } else {
        (2 * tp) as f64 / den as f64
    }
}

/// Voxel counts and Dice of `pred` against `truth`, classed by the truth lesion's size.
pub fn dice_coefficient(case_id: &str, pred: &Volume, truth: &Volume) -> Result<CaseReport> {
    if pred.dims() != truth.dims() {
        return Err(Error::dim(format!(
            "case {case_id}: prediction dims {:?} differ from truth {:?}",
            pred.dims(),
            truth.dims()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p != 0.0, t != 0.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let (class, [ex, ey, ez]) = classify_lesion_size(truth);
    Ok(CaseReport {
        case_id: case_id.to_string(),
        tp,
        fp,
        fn_,
        dice: dice_from_counts(tp, fp, fn_),
        class,
        ex,
        ey,
        ez,
    })
}

/// Bounding-box extents in mm, `(max − min + 1)·voxel`, per axis.
pub fn lesion_extent_mm(truth: &Volume) -> [f64; 3] {
    let [dx, dy, dz] = truth.dims();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                if truth.get(x, y, z) != 0.0 {
                    any = true;
                    for (k, c) in [x, y, z].into_iter().enumerate() {
                        lo[k] = lo[k].min(c);
                        hi[k] = hi[k].max(c);
                    }
                }
            }
        }
    }
    if !any {
        return [0.0; 3];
    }
    let mm = truth.voxel_mm();
    std::array::from_fn(|k| (hi[k] - lo[k] + 1) as f64 * mm[k] as f64)
}

/// SMALL iff every extent is strictly below its limit; an empty mask is SMALL.
pub fn classify_lesion_size(truth: &Volume) -> (LesionClass, [f64; 3]) {
    let e = lesion_extent_mm(truth);
    let small = e.iter().zip(SMALL_LIMIT_MM).all(|(v, lim)| *v < lim);
    (if small { LesionClass::Small } else { LesionClass::Large }, e)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SummaryStats {
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
}

impl SummaryStats {
    pub fn to_key_values(&self) -> String {
        format!(
            "mean={:.6} median={:.6} q1={:.6} q3={:.6} min={:.6} max={:.6}",
            self.mean, self.median, self.q1, self.q3, self.min, self.max
        )
    }
}

/// Quantile `q` of sorted data, interpolating linearly between closest ranks.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn summarize(values: &[f64]) -> Result<SummaryStats> {
    if values.is_empty() {
        return Err(Error::data("cannot summarize an empty sample"));
    }
    if let Some(v) = values.iter().find(|v| v.is_nan()) {
        return Err(Error::data(format!("sample contains {v}")));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(SummaryStats {
        mean: s.iter().sum::<f64>() / s.len() as f64,
        median: quantile_sorted(&s, 0.5),
        q1: quantile_sorted(&s, 0.25),
        q3: quantile_sorted(&s, 0.75),
        min: s[0],
        max: s[s.len() - 1],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WilcoxonMethod {
    Exact,
    Normal,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WilcoxonResult {
    /// Rank sum of the first sample.
    pub w: f64,
    pub p_two_sided: f64,
    pub method: WilcoxonMethod,
}

/// Average ranks (1-based) of the pooled sample and the tie-group sizes.
pub fn pooled_ranks(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut ranks = vec![0.0; pooled.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

fn check_samples(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::data("rank-sum test needs two non-empty samples"));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::data("rank-sum test sample contains NaN"));
    }
    Ok(())
}

/// Number of `m`-subsets of `{1..n}` with each possible rank sum (index = sum).
fn rank_sum_counts(n: usize, m: usize) -> Vec<f64> {
    let max_sum = n * (n + 1) / 2;
    // counts[j][s]: subsets of size j with sum s among the ranks seen so far
    let mut counts = vec![vec![0.0f64; max_sum + 1]; m + 1];
    counts[0][0] = 1.0;
    for rank in 1..=n {
        for j in (1..=m.min(rank)).rev() {
            for s in (rank..=max_sum).rev() {
                counts[j][s] += counts[j - 1][s - rank];
            }
        }
    }
    counts.swap_remove(m)
}

/// Exact two-sided p from the permutation distribution of the rank sum. Requires no ties.
pub fn wilcoxon_exact(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    check_samples(a, b)?;
    let (ranks, ties) = pooled_ranks(a, b);
    if ties.iter().any(|&t| t > 1) {
        return Err(Error::data("exact rank-sum test requires untied samples"));
    }
    let (m, n) = (a.len(), a.len() + b.len());
    let w: f64 = ranks[..m].iter().sum();
    let wi = w.round() as usize;
    let counts = rank_sum_counts(n, m);
    let total: f64 = counts.iter().sum();
    let lower: f64 = counts[..=wi].iter().sum::<f64>() / total;
    let upper: f64 = counts[wi..].iter().sum::<f64>() / total;
    Ok(WilcoxonResult {
        w,
        p_two_sided: (2.0 * lower.min(upper)).min(1.0),
        method: WilcoxonMethod::Exact,
    })
}

/// Normal approximation with tie-corrected variance and continuity correction.
pub fn wilcoxon_normal(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    check_samples(a, b)?;
    let (ranks, ties) = pooled_ranks(a, b);
    let (m, k) = (a.len() as f64, b.len() as f64);
    let n = m + k;
    let w: f64 = ranks[..a.len()].iter().sum();
    let mean = m * (n + 1.0) / 2.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum();
    let var = if n > 1.0 {
        m * k / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)))
    } else {
        0.0
    };
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
        libm::erfc(z / std::f64::consts::SQRT_2).min(1.0)
    };
    Ok(WilcoxonResult {
        w,
        p_two_sided: p,
        method: WilcoxonMethod::Normal,
    })
}

/// Exact when the pooled size is at most 12 and there are no ties, otherwise normal.
pub fn wilcoxon_ranksum(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    check_samples(a, b)?;
    let (_, ties) = pooled_ranks(a, b);
    if a.len() + b.len() <= EXACT_MAX_N && ties.iter().all(|&t| t == 1) {
        wilcoxon_exact(a, b)
    } else {
        wilcoxon_normal(a, b)
    }
}

/// Voxelwise count of masks covering each voxel.
pub fn overlap_map(masks: &[Volume]) -> Result<Volume> {
    let first = masks.first().ok_or_else(|| Error::data("overlap map needs at least one mask"))?;
    let mut counts = vec![0.0f32; first.len()];
    for m in masks {
        if m.dims() != first.dims() {
            return Err(Error::dim(format!("mask dims {:?} differ from {:?}", m.dims(), first.dims())));
        }
        for (c, &v) in counts.iter_mut().zip(m.data()) {
            if v != 0.0 {
                *c += 1.0;
            }
        }
    }
    Volume::new(first.dims(), first.voxel_mm(), Modality::Map, counts)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: format!("{other:?}"),
        },
    }
}

pub fn write_reports(path: impl AsRef<Path>, reports: &[CaseReport]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    if reports.is_empty() {
        w.write_record(["case_id", "TP", "FP", "FN", "dice", "class", "ex", "ey", "ez"])
            .map_err(|e| csv_err(path, e))?;
    }
    for r in reports {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_reports(path: impl AsRef<Path>) -> Result<Vec<CaseReport>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

/// The `dice` column of any CSV with a header row.
pub fn read_dice_column(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let col = headers.iter().position(|h| h == "dice").ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        msg: "no dice column".into(),
    })?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let offset = rec.position().map_or(0, |p| p.byte());
        let field = rec.get(col).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            offset,
            msg: "row has no dice field".into(),
        })?;
        let v: f64 = field.trim().parse().map_err(|_| Error::Format {
            path: path.to_path_buf(),
            offset,
            msg: format!("dice value {field:?} is not a number"),
        })?;
        out.push(v);
    }
    Ok(out)
}
