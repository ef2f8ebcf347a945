//! Aggregate statistics over match results, multi-subject summaries,
//! histogram export, outlier extraction, and per-streamline distance
//! coloring.
//!
//! Means and medians are computed over finite distances only; infinite
//! distances are counted separately as outliers. The cohort CSV uses the
//! column titles "Comparison pairs", "Mean of Means (mm)",
//! "Mean of Medians (mm)", "Average outlier streamlines (%)"; the outlier
//! column is a percentage (fraction times 100).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::MatchResult;
use crate::tracts::Tractogram;

pub const DEFAULT_BIN_WIDTH_MM: f64 = 0.25;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Histogram {
    pub bin_width_mm: f64,
    /// Edge i..i+1 bounds bin i; edges cover [0, max finite distance].
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PairStats {
    pub n_queries: usize,
    pub n_outliers: usize,
    pub outlier_fraction: f64,
    /// Mean over finite distances; `None` when every query is an outlier.
    pub mean_mm: Option<f64>,
    /// Median over finite distances; `None` when every query is an outlier.
    pub median_mm: Option<f64>,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CohortStats {
    pub mean_of_means_mm: f64,
    pub mean_of_medians_mm: f64,
    pub average_outlier_percent: f64,
}

/// Configuration echo attached to every emitted report.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReportConfig {
    pub radius_mm: f64,
    pub points: usize,
    pub rng_seed: Option<u64>,
    pub sample: Option<usize>,
    pub input_a: Option<String>,
    pub input_b: Option<String>,
    pub input_a_hash: Option<String>,
    pub input_b_hash: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Report {
    pub stats: PairStats,
    pub config: ReportConfig,
}

/// FNV-1a hash of a file's bytes, hex-encoded; the input fingerprint echoed
/// in reports.
pub fn file_fingerprint(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in &bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    Ok(format!("{h:016x}"))
}

fn median_of_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Summarize one comparison run into per-pair statistics.
pub fn summarize(results: &[MatchResult], bin_width_mm: f64) -> Result<PairStats> {
    if results.is_empty() {
        return Err(Error::InvalidConfig("summarize needs nonempty results".into()));
    }
    assert!(bin_width_mm > 0.0);
    let n_queries = results.len();
    let mut finite: Vec<f64> = results
        .iter()
        .map(|r| r.distance)
        .filter(|d| d.is_finite())
        .collect();
    let n_outliers = n_queries - finite.len();
    finite.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let (mean_mm, median_mm, histogram) = if finite.is_empty() {
        (
            None,
            None,
            Histogram {
                bin_width_mm,
                edges: vec![0.0],
                counts: vec![],
            },
        )
    } else {
        let mean = finite.iter().sum::<f64>() / finite.len() as f64;
        let median = median_of_sorted(&finite);
        let max = *finite.last().unwrap();
        let n_bins = ((max / bin_width_mm).floor() as usize + 1).max(1);
        let mut counts = vec![0usize; n_bins];
        for &d in &finite {
            let bin = ((d / bin_width_mm).floor() as usize).min(n_bins - 1);
            counts[bin] += 1;
        }
        let edges = (0..=n_bins).map(|i| i as f64 * bin_width_mm).collect();
        (
            Some(mean),
            Some(median),
            Histogram {
                bin_width_mm,
                edges,
                counts,
            },
        )
    };

    Ok(PairStats {
        n_queries,
        n_outliers,
        outlier_fraction: n_outliers as f64 / n_queries as f64,
        mean_mm,
        median_mm,
        histogram,
    })
}

/// Arithmetic means of per-subject means, medians, and outlier fractions
/// (scaled to percent). A subject with undefined mean is an error.
pub fn aggregate(per_subject: &[(String, PairStats)]) -> Result<CohortStats> {
    if per_subject.is_empty() {
        return Err(Error::InvalidConfig("aggregate needs >= 1 subject".into()));
    }
    let mut means = Vec::with_capacity(per_subject.len());
    let mut medians = Vec::with_capacity(per_subject.len());
    let mut fractions = Vec::with_capacity(per_subject.len());
    for (name, s) in per_subject {
        let mean = s.mean_mm.ok_or_else(|| Error::UndefinedStats(name.clone()))?;
        let median = s.median_mm.ok_or_else(|| Error::UndefinedStats(name.clone()))?;
        means.push(mean);
        medians.push(median);
        fractions.push(s.outlier_fraction);
    }
    let n = per_subject.len() as f64;
    Ok(CohortStats {
        mean_of_means_mm: means.iter().sum::<f64>() / n,
        mean_of_medians_mm: medians.iter().sum::<f64>() / n,
        average_outlier_percent: fractions.iter().sum::<f64>() / n * 100.0,
    })
}

/// Exactly the A-streamlines with infinite distance, original coordinates,
/// order preserved. Also returns their original indices.
pub fn export_outliers(a: &Tractogram, results: &[MatchResult]) -> Result<(Tractogram, Vec<usize>)> {
    if a.len() != results.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: results.len(),
        });
    }
    let mut streamlines = Vec::new();
    let mut indices = Vec::new();
    for (i, (s, r)) in a.streamlines.iter().zip(results).enumerate() {
        if r.is_outlier() {
            streamlines.push(s.clone());
            indices.push(i);
        }
    }
    Ok((
        Tractogram {
            streamlines,
            space_note: a.space_note.clone(),
        },
        indices,
    ))
}

/// Per-streamline scalar file contents: one distance per line, 17 significant
/// digits, infinite distances written as "inf". Line i corresponds to
/// streamline i of A.
pub fn color_scalars(a: &Tractogram, results: &[MatchResult]) -> Result<String> {
    if a.len() != results.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: results.len(),
        });
    }
    let mut out = String::new();
    for r in results {
        if r.distance.is_finite() {
            out.push_str(&format!("{:.17e}\n", r.distance));
        } else {
            out.push_str("inf\n");
        }
    }
    Ok(out)
}

/// Parse a scalar file written by [`color_scalars`].
pub fn parse_color_scalars(text: &str) -> Result<Vec<f64>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let l = l.trim();
            if l == "inf" {
                Ok(f64::INFINITY)
            } else {
                l.parse().map_err(|_| Error::Other(format!("bad scalar line {l:?}")))
            }
        })
        .collect()
}

/// Write a pair report as JSON. Serialization is deterministic (fixed field
/// order, no timestamps), so identical inputs produce byte-identical files.
pub fn write_report(report: &Report, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Other(format!("report serialization: {e}")))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<Report> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::MalformedHeader {
        path: path.into(),
        reason: format!("report JSON: {e}"),
    })
}

pub const COHORT_CSV_HEADER: &str =
    "Comparison pairs,Mean of Means (mm),Mean of Medians (mm),Average outlier streamlines (%)";

/// Cohort CSV with one row per comparison pair.
pub fn cohort_csv(rows: &[(String, CohortStats)]) -> String {
    let mut out = String::from(COHORT_CSV_HEADER);
    out.push('\n');
    for (name, c) in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            name, c.mean_of_means_mm, c.mean_of_medians_mm, c.average_outlier_percent
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Point3, Streamline};

    fn results(values: &[f64]) -> Vec<MatchResult> {
        values
            .iter()
            .enumerate()
            .map(|(i, &d)| MatchResult {
                query_index: i,
                distance: d,
                matched_index: if d.is_finite() { Some(0) } else { None },
            })
            .collect()
    }

    #[test]
    fn summarize_all_zero() {
        let s = summarize(&results(&[0.0, 0.0, 0.0]), 0.25).unwrap();
        assert_eq!(s.mean_mm, Some(0.0));
        assert_eq!(s.median_mm, Some(0.0));
        assert_eq!(s.outlier_fraction, 0.0);
    }

    #[test]
    fn summarize_with_outlier() {
        let s = summarize(&results(&[1.0, 2.0, 3.0, f64::INFINITY]), 0.25).unwrap();
        assert_eq!(s.mean_mm, Some(2.0));
        assert_eq!(s.median_mm, Some(2.0));
        assert_eq!(s.outlier_fraction, 0.25);
        assert_eq!(s.n_outliers, 1);
    }

    #[test]
    fn summarize_all_infinite() {
        let s = summarize(&results(&[f64::INFINITY, f64::INFINITY]), 0.25).unwrap();
        assert_eq!(s.mean_mm, None);
        assert_eq!(s.median_mm, None);
        assert_eq!(s.outlier_fraction, 1.0);
    }

    #[test]
    fn summarize_uniform_sanity() {
        let mut rng = crate::rng::Xoshiro256StarStar::seed_from_u64(5);
        let vals: Vec<f64> = (0..1000).map(|_| rng.uniform(0.0, 10.0)).collect();
        let s = summarize(&results(&vals), 0.25).unwrap();
        assert!((s.mean_mm.unwrap() - 5.0).abs() < 0.5);
        assert_eq!(s.histogram.counts.iter().sum::<usize>(), 1000);
    }

    #[test]
    fn aggregate_identity_and_mean() {
        let s = summarize(&results(&[4.0, 4.0]), 0.25).unwrap();
        let c = aggregate(&[("s1".into(), s.clone())]).unwrap();
        assert_eq!(c.mean_of_means_mm, 4.0);
        assert_eq!(c.mean_of_medians_mm, 4.0);
        assert_eq!(c.average_outlier_percent, 0.0);

        let s6 = summarize(&results(&[6.0, 6.0]), 0.25).unwrap();
        let c = aggregate(&[("a".into(), s), ("b".into(), s6)]).unwrap();
        assert_eq!(c.mean_of_means_mm, 5.0);
    }

    #[test]
    fn aggregate_undefined_propagates_subject() {
        let bad = summarize(&results(&[f64::INFINITY]), 0.25).unwrap();
        match aggregate(&[("subj3".into(), bad)]) {
            Err(Error::UndefinedStats(name)) => assert_eq!(name, "subj3"),
            other => panic!("expected UndefinedStats, got {other:?}"),
        }
    }

    #[test]
    fn cohort_schema_holds_reference_row() {
        // Reference magnitudes exercise the schema only; they are not
        // reproducible at this scale.
        let c = CohortStats {
            mean_of_means_mm: 4.22016,
            mean_of_medians_mm: 3.15576,
            average_outlier_percent: 0.0973,
        };
        let csv = cohort_csv(&[("Scan to Rescan".into(), c)]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), COHORT_CSV_HEADER);
        assert_eq!(lines.next().unwrap(), "Scan to Rescan,4.22016,3.15576,0.0973");
    }

    fn toy_tractogram(n: usize) -> Tractogram {
        Tractogram::new(
            (0..n)
                .map(|i| {
                    Streamline::new(
                        vec![
                            Point3::new(i as f64, 0.0, 0.0),
                            Point3::new(i as f64 + 1.0, 0.0, 0.0),
                        ],
                        0,
                    )
                    .unwrap()
                })
                .collect(),
        )
    }

    #[test]
    fn outliers_partition() {
        let t = toy_tractogram(4);
        let r = results(&[1.0, f64::INFINITY, 2.0, f64::INFINITY]);
        let (out, idx) = export_outliers(&t, &r).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(idx, vec![1, 3]);
        assert_eq!(out.streamlines[0], t.streamlines[1]);
        // partition: outliers + finite-matched = all
        let finite: Vec<usize> = r
            .iter()
            .enumerate()
            .filter(|(_, m)| !m.is_outlier())
            .map(|(i, _)| i)
            .collect();
        let mut all = idx.clone();
        all.extend(&finite);
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    #[test]
    fn outliers_none_and_all() {
        let t = toy_tractogram(3);
        let (none, _) = export_outliers(&t, &results(&[1.0, 1.0, 1.0])).unwrap();
        assert!(none.is_empty());
        let (all, idx) =
            export_outliers(&t, &results(&[f64::INFINITY; 3])).unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(idx, vec![0, 1, 2]);
    }

    #[test]
    fn color_scalars_roundtrip() {
        let t = toy_tractogram(3);
        let r = results(&[0.0, 1.2345678901234567, f64::INFINITY]);
        let text = color_scalars(&t, &r).unwrap();
        let parsed = parse_color_scalars(&text).unwrap();
        assert_eq!(parsed[0], 0.0);
        assert_eq!(parsed[1], 1.2345678901234567);
        assert!(parsed[2].is_infinite());
        // all-zero case
        let z = color_scalars(&t, &results(&[0.0, 0.0, 0.0])).unwrap();
        assert!(parse_color_scalars(&z).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn report_json_roundtrip_and_stability() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("r1.json");
        let p2 = dir.path().join("r2.json");
        let report = Report {
            stats: summarize(&results(&[1.0, 2.0, f64::INFINITY]), 0.25).unwrap(),
            config: ReportConfig {
                radius_mm: 1.0,
                points: 100,
                rng_seed: Some(42),
                sample: None,
                input_a: Some("a.tck".into()),
                input_b: Some("b.tck".into()),
                input_a_hash: Some("deadbeef".into()),
                input_b_hash: Some("cafebabe".into()),
            },
        };
        write_report(&report, &p1).unwrap();
        write_report(&report, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        let back = read_report(&p1).unwrap();
        assert_eq!(back, report);
        assert_eq!(back.config.radius_mm, 1.0);
    }

    #[test]
    fn summarize_then_aggregate_copies_identity() {
        let s = summarize(&results(&[1.0, 3.0, 5.0]), 0.25).unwrap();
        let c = aggregate(&[
            ("x".into(), s.clone()),
            ("y".into(), s.clone()),
            ("z".into(), s.clone()),
        ])
        .unwrap();
        assert_eq!(c.mean_of_means_mm, s.mean_mm.unwrap());
        assert_eq!(c.mean_of_medians_mm, s.median_mm.unwrap());
        assert_eq!(c.average_outlier_percent, s.outlier_fraction * 100.0);
    }
}
