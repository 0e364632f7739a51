//! Volumetric and surface evaluation: Dice coefficient, mean surface
//! distance, Hausdorff distance, the Wilcoxon signed-rank test, and cohort
//! summaries.

use crate::dist::sedt3;
use crate::error::{Error, Result};
use crate::volume::LabelVolume;
use std::io::Write;
use std::path::Path;

/// Per-scan evaluation record.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanScore {
    pub scan_id: String,
    pub dsc: f64,
    pub msd_mm: f64,
    pub hd_mm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub median: f64,
    pub mean: f64,
    pub std: f64,
    /// Two-sided Wilcoxon signed-rank p-value against the reference method,
    /// when one was supplied.
    pub p_vs_reference: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortSummary {
    pub n: usize,
    pub dsc: MetricSummary,
    pub msd_mm: MetricSummary,
    pub hd_mm: MetricSummary,
}

fn check_dims(a: &LabelVolume, b: &LabelVolume) -> Result<()> {
    if a.header.dims != b.header.dims {
        return Err(Error::ShapeMismatch(format!(
            "mask dims {:?} vs {:?}",
            a.header.dims, b.header.dims
        )));
    }
    Ok(())
}

/// Dice similarity coefficient 2|A n B| / (|A| + |B|). Two empty masks score
/// 1.0; an empty mask against a non-empty one scores 0.0.
pub fn dice_coefficient(a: &LabelVolume, b: &LabelVolume) -> Result<f64> {
    check_dims(a, b)?;
    let mut inter = 0u64;
    let mut sum = 0u64;
    for (&x, &y) in a.data.iter().zip(b.data.iter()) {
        inter += u64::from(x & y);
        sum += u64::from(x) + u64::from(y);
    }
    if sum == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / sum as f64)
}

/// Foreground voxels with at least one 6-connected background (or
/// out-of-grid) neighbor.
pub fn surface_voxels(mask: &LabelVolume) -> Vec<[usize; 3]> {
    let dims = mask.header.dims;
    let data = &mask.data;
    let mut out = Vec::new();
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                if data[[i, j, k]] == 0 {
                    continue;
                }
                let neighbors = [
                    (i as i64 - 1, j as i64, k as i64),
                    (i as i64 + 1, j as i64, k as i64),
                    (i as i64, j as i64 - 1, k as i64),
                    (i as i64, j as i64 + 1, k as i64),
                    (i as i64, j as i64, k as i64 - 1),
                    (i as i64, j as i64, k as i64 + 1),
                ];
                let exposed = neighbors.iter().any(|&(x, y, z)| {
                    x < 0
                        || y < 0
                        || z < 0
                        || x >= dims[0] as i64
                        || y >= dims[1] as i64
                        || z >= dims[2] as i64
                        || data[[x as usize, y as usize, z as usize]] == 0
                });
                if exposed {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}

/// Directed nearest-surface distances in millimetres: for each voxel of
/// `from`, the distance to the closest voxel of `to`.
fn directed_surface_distances(
    from: &[[usize; 3]],
    to: &[[usize; 3]],
    dims: [usize; 3],
    spacing: [f64; 3],
) -> Vec<f64> {
    let mut is_source = vec![false; dims[0] * dims[1] * dims[2]];
    for v in to {
        is_source[(v[0] * dims[1] + v[1]) * dims[2] + v[2]] = true;
    }
    let weights = [
        spacing[0] * spacing[0],
        spacing[1] * spacing[1],
        spacing[2] * spacing[2],
    ];
    let dist2 = sedt3(
        |i, j, k| is_source[(i * dims[1] + j) * dims[2] + k],
        dims,
        weights,
    );
    from.iter()
        .map(|v| dist2[(v[0] * dims[1] + v[1]) * dims[2] + v[2]].sqrt())
        .collect()
}

fn surface_pair(a: &LabelVolume, b: &LabelVolume) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dims(a, b)?;
    if a.header.spacing != b.header.spacing {
        return Err(Error::ShapeMismatch(format!(
            "mask spacing {:?} vs {:?}",
            a.header.spacing, b.header.spacing
        )));
    }
    let sa = surface_voxels(a);
    let sb = surface_voxels(b);
    if sa.is_empty() || sb.is_empty() {
        return Err(Error::UndefinedSurfaceDistance(
            "both masks must be non-empty".into(),
        ));
    }
    let dims = a.header.dims;
    let spacing = a.header.spacing;
    let d_ab = directed_surface_distances(&sa, &sb, dims, spacing);
    let d_ba = directed_surface_distances(&sb, &sa, dims, spacing);
    Ok((d_ab, d_ba))
}

/// Symmetric mean surface distance: the average of the two directed mean
/// nearest-surface distances, in millimetres.
pub fn mean_surface_distance(a: &LabelVolume, b: &LabelVolume) -> Result<f64> {
    let (d_ab, d_ba) = surface_pair(a, b)?;
    let mean_ab = d_ab.iter().sum::<f64>() / d_ab.len() as f64;
    let mean_ba = d_ba.iter().sum::<f64>() / d_ba.len() as f64;
    Ok(0.5 * (mean_ab + mean_ba))
}

/// Hausdorff distance: the larger of the two directed maxima (the exact
/// maximum, not a percentile variant), in millimetres.
pub fn hausdorff_distance(a: &LabelVolume, b: &LabelVolume) -> Result<f64> {
    let (d_ab, d_ba) = surface_pair(a, b)?;
    let max_ab = d_ab.iter().copied().fold(0.0f64, f64::max);
    let max_ba = d_ba.iter().copied().fold(0.0f64, f64::max);
    Ok(max_ab.max(max_ba))
}

/// Two-sided Wilcoxon signed-rank test over paired samples. Zero differences
/// are dropped; ties in |difference| receive average ranks. The statistic is
/// the smaller of the positive/negative rank sums. The null distribution is
/// enumerated exactly for n <= 15 and approximated normally (with tie and
/// continuity corrections) beyond that.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "paired samples must have equal length, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let diffs: Vec<f64> = x
        .iter()
        .zip(y.iter())
        .map(|(&a, &b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n < 5 {
        return Err(Error::InsufficientPairs(n));
    }

    // Average ranks of |d|.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diffs[i].abs().total_cmp(&diffs[j].abs()));
    let mut ranks = vec![0.0f64; n];
    let mut tie_groups: Vec<usize> = Vec::new();
    let mut at = 0;
    while at < n {
        let mut end = at + 1;
        while end < n && diffs[order[end]].abs() == diffs[order[at]].abs() {
            end += 1;
        }
        let avg_rank = (at + 1 + end) as f64 / 2.0; // mean of ranks at+1 ..= end
        for &idx in &order[at..end] {
            ranks[idx] = avg_rank;
        }
        tie_groups.push(end - at);
        at = end;
    }

    let w_plus: f64 = diffs
        .iter()
        .zip(ranks.iter())
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();
    let w_minus: f64 = diffs
        .iter()
        .zip(ranks.iter())
        .filter(|(d, _)| **d < 0.0)
        .map(|(_, r)| *r)
        .sum();
    let w = w_plus.min(w_minus);

    let p = if n <= 15 {
        // Exact: enumerate all sign assignments of the observed ranks.
        let total = 1u64 << n;
        let mut count_le = 0u64;
        let mut count_ge = 0u64;
        let eps = 1e-9;
        for signs in 0..total {
            let mut wp = 0.0;
            for (bit, r) in ranks.iter().enumerate() {
                if signs >> bit & 1 == 1 {
                    wp += *r;
                }
            }
            if wp <= w_plus + eps {
                count_le += 1;
            }
            if wp >= w_plus - eps {
                count_ge += 1;
            }
        }
        (2.0 * count_le.min(count_ge) as f64 / total as f64).min(1.0)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let tie_term: f64 = tie_groups
            .iter()
            .map(|&t| {
                let t = t as f64;
                t * t * t - t
            })
            .sum::<f64>()
            / 48.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
        if var <= 0.0 {
            return Err(Error::InsufficientPairs(n));
        }
        // continuity correction toward the mean; w <= mean by construction
        let z = (w - mean + 0.5) / var.sqrt();
        (2.0 * std_normal_cdf(z)).min(1.0)
    };

    Ok((w, p))
}

/// Standard normal CDF via an Abramowitz-Stegun style erfc approximation
/// (absolute error below 1.5e-7, ample for p-values).
fn std_normal_cdf(z: f64) -> f64 {
    let x = z / std::f64::consts::SQRT_2;
    0.5 * erfc(-x)
}

fn erfc(x: f64) -> f64 {
    let ax = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * ax);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let e = poly * (-ax * ax).exp();
    if x >= 0.0 {
        e
    } else {
        2.0 - e
    }
}

fn median_lower(sorted: &[f64]) -> f64 {
    sorted[(sorted.len() - 1) / 2]
}

fn summarize_metric(values: &[f64], reference: Option<&[f64]>) -> Result<MetricSummary> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    let p_vs_reference = match reference {
        Some(r) => Some(wilcoxon_signed_rank(values, r)?.1),
        None => None,
    };
    Ok(MetricSummary {
        median: median_lower(&sorted),
        mean,
        std,
        p_vs_reference,
    })
}

/// Cohort summary: per-metric median (lower-middle for even counts), mean,
/// sample standard deviation, and optional paired tests against a reference
/// method's scores for the same scans.
pub fn summarize(scores: &[ScanScore], reference: Option<&[ScanScore]>) -> Result<CohortSummary> {
    if scores.is_empty() {
        return Err(Error::EmptyCohort);
    }
    if let Some(r) = reference {
        if r.len() != scores.len() {
            return Err(Error::ShapeMismatch(format!(
                "reference has {} scores, expected {}",
                r.len(),
                scores.len()
            )));
        }
        for (a, b) in scores.iter().zip(r.iter()) {
            if a.scan_id != b.scan_id {
                return Err(Error::ShapeMismatch(format!(
                    "reference scan order mismatch: {:?} vs {:?}",
                    a.scan_id, b.scan_id
                )));
            }
        }
    }
    let pick = |f: fn(&ScanScore) -> f64, list: &[ScanScore]| -> Vec<f64> {
        list.iter().map(f).collect()
    };
    let dsc = pick(|s| s.dsc, scores);
    let msd = pick(|s| s.msd_mm, scores);
    let hd = pick(|s| s.hd_mm, scores);
    let (rd, rm, rh) = match reference {
        Some(r) => (
            Some(pick(|s| s.dsc, r)),
            Some(pick(|s| s.msd_mm, r)),
            Some(pick(|s| s.hd_mm, r)),
        ),
        None => (None, None, None),
    };
    Ok(CohortSummary {
        n: scores.len(),
        dsc: summarize_metric(&dsc, rd.as_deref())?,
        msd_mm: summarize_metric(&msd, rm.as_deref())?,
        hd_mm: summarize_metric(&hd, rh.as_deref())?,
    })
}

/// Write per-scan scores as CSV: `scan_id,dsc,msd_mm,hd_mm`.
pub fn write_scores_csv(path: impl AsRef<Path>, scores: &[ScanScore]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("scan_id,dsc,msd_mm,hd_mm\n");
    for s in scores {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            s.scan_id, s.dsc, s.msd_mm, s.hd_mm
        ));
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a per-scan CSV previously written by [`write_scores_csv`].
pub fn read_scores_csv(path: impl AsRef<Path>) -> Result<Vec<ScanScore>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("scan_id,dsc,msd_mm,hd_mm") => {}
        other => {
            return Err(Error::malformed(
                path,
                format!("bad csv header {other:?}"),
            ))
        }
    }
    let mut scores = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::malformed(path, format!("bad csv row {}", ln + 2)));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::malformed(path, format!("bad number {s:?}: {e}")))
        };
        scores.push(ScanScore {
            scan_id: fields[0].to_string(),
            dsc: parse(fields[1])?,
            msd_mm: parse(fields[2])?,
            hd_mm: parse(fields[3])?,
        });
    }
    Ok(scores)
}

/// Render a metric-by-(median, mean, std) summary grid as text.
pub fn format_summary(summary: &CohortSummary) -> String {
    let mut out = String::new();
    out.push_str(&format!("scans: {}\n", summary.n));
    out.push_str("metric    median      mean+/-std");
    let has_p = summary.dsc.p_vs_reference.is_some();
    if has_p {
        out.push_str("          p_vs_ref");
    }
    out.push('\n');
    for (name, m) in [
        ("DSC", &summary.dsc),
        ("MSD_mm", &summary.msd_mm),
        ("HD_mm", &summary.hd_mm),
    ] {
        out.push_str(&format!(
            "{name:<9} {:<11.3} {:.3}+/-{:.3}",
            m.median, m.mean, m.std
        ));
        if let Some(p) = m.p_vs_reference {
            out.push_str(&format!("   {p:.5}"));
        }
        out.push('\n');
    }
    out
}
