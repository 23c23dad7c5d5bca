//! Batch evaluation: registration counts, pose-error quantiles, stage
//! timings, and vote-based location recognition.
//!
//! Error quantiles are computed over *registered* queries only — a failed
//! query has no pose to measure — and are reported as absent rather than
//! poisoned with sentinels when nothing registered. Location recognition
//! asks a weaker question than localization: does any of the top-k
//! vote-ranked images actually show what the query sees?

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ImageId, SceneModel};
use crate::pipeline::{LocalizationRecord, StageTimings, TraceRecord};
use crate::synth::GroundTruthQuery;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("query ids mismatch: {0}")]
    MismatchedIds(String),
    #[error("record for query {0} is registered but carries no pose")]
    MissingPose(u32),
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    /// Ranks at which to report location recognition.
    pub top_ks: Vec<usize>,
    /// An image "recognizes" a query when it observes at least this many of
    /// the query's ground-truth points — the registration threshold.
    pub min_shared_points: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { top_ks: vec![1, 2, 5, 10], min_shared_points: 12 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecognitionAtK {
    pub k: usize,
    pub recognized: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_queries: usize,
    pub num_registered: usize,
    pub registration_rate: f64,
    /// Over registered queries; absent when none registered.
    pub mean_inliers: Option<f64>,
    pub mean_inlier_ratio: Option<f64>,
    pub center_error: Option<Quartiles>,
    pub rotation_error_deg: Option<Quartiles>,
    /// Over all queries.
    pub mean_timings: StageTimings,
    /// Present when traces were supplied.
    pub recognition: Vec<RecognitionAtK>,
}

/// Linearly interpolated quantile of ascending `sorted`, `q` in [0, 1].
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]))
}

fn quartiles(mut values: Vec<f64>) -> Option<Quartiles> {
    values.sort_by(f64::total_cmp);
    Some(Quartiles {
        q1: quantile(&values, 0.25)?,
        median: quantile(&values, 0.5)?,
        q3: quantile(&values, 0.75)?,
    })
}

/// Geodesic angle between two rotations, in degrees.
pub fn rotation_error_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let cos = ((a * b.transpose()).trace() - 1.0) / 2.0;
    cos.clamp(-1.0, 1.0).acos().to_degrees()
}

fn record_rotation(record: &LocalizationRecord) -> Option<Matrix3<f64>> {
    let [w, x, y, z] = record.rotation?;
    let q = UnitQuaternion::new_normalize(Quaternion::new(w, x, y, z));
    Some(*q.to_rotation_matrix().matrix())
}

/// Images ranked by their cluster's initial votes (descending), ties and
/// within-cluster order resolved by ascending id.
pub fn rank_images(trace: &TraceRecord, model: &SceneModel) -> Vec<ImageId> {
    let mut out = Vec::new();
    for &(cluster, _votes) in &trace.initial_votes {
        for &img in model.clustering().images_in(crate::model::ClusterId(cluster)) {
            out.push(img);
        }
    }
    out
}

fn shared_points(gt: &GroundTruthQuery, image: ImageId, model: &SceneModel) -> usize {
    gt.provenance.iter().flatten().filter(|&&point| model.graph().observes(image, point)).count()
}

/// Aggregates a localization run against ground truth. Records and truth
/// must cover the same query ids (order may differ). Pass traces and the
/// model to also measure location recognition.
pub fn evaluate(
    records: &[LocalizationRecord],
    truth: &[GroundTruthQuery],
    recognition: Option<(&[TraceRecord], &SceneModel)>,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    let by_id: std::collections::BTreeMap<u32, &GroundTruthQuery> =
        truth.iter().map(|g| (g.query_id, g)).collect();
    if by_id.len() != truth.len() {
        return Err(EvalError::MismatchedIds("duplicate query id in ground truth".into()));
    }
    if records.len() != truth.len() {
        return Err(EvalError::MismatchedIds(format!(
            "{} records vs {} ground-truth entries",
            records.len(),
            truth.len()
        )));
    }

    let mut center_errors = Vec::new();
    let mut rotation_errors = Vec::new();
    let mut inliers = Vec::new();
    let mut ratios = Vec::new();
    let mut timings = StageTimings::default();
    for record in records {
        let gt = by_id.get(&record.query_id).ok_or_else(|| {
            EvalError::MismatchedIds(format!("no ground truth for query {}", record.query_id))
        })?;
        timings.forward_s += record.timings.forward_s;
        timings.filter_s += record.timings.filter_s;
        timings.back_s += record.timings.back_s;
        timings.pose_s += record.timings.pose_s;
        timings.total_s += record.timings.total_s;
        if !record.success {
            continue;
        }
        let center =
            record.center.ok_or(EvalError::MissingPose(record.query_id)).map(Vector3::from)?;
        let rotation = record_rotation(record).ok_or(EvalError::MissingPose(record.query_id))?;
        center_errors.push((center - gt.pose.center).norm());
        rotation_errors.push(rotation_error_deg(&rotation, &gt.pose.rotation));
        inliers.push(record.num_inliers as f64);
        ratios.push(record.inlier_ratio);
    }
    let n = records.len().max(1) as f64;
    let mean_timings = StageTimings {
        forward_s: timings.forward_s / n,
        filter_s: timings.filter_s / n,
        back_s: timings.back_s / n,
        pose_s: timings.pose_s / n,
        total_s: timings.total_s / n,
    };

    let num_registered = center_errors.len();
    let mean = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };

    let recognition = match recognition {
        None => Vec::new(),
        Some((traces, model)) => {
            if traces.len() != records.len() {
                return Err(EvalError::MismatchedIds(format!(
                    "{} traces vs {} records",
                    traces.len(),
                    records.len()
                )));
            }
            cfg.top_ks
                .iter()
                .map(|&k| {
                    let mut recognized = 0;
                    for trace in traces {
                        let gt = by_id.get(&trace.query_id).ok_or_else(|| {
                            EvalError::MismatchedIds(format!(
                                "no ground truth for trace {}",
                                trace.query_id
                            ))
                        })?;
                        let ranked = rank_images(trace, model);
                        if ranked
                            .iter()
                            .take(k)
                            .any(|&img| shared_points(gt, img, model) >= cfg.min_shared_points)
                        {
                            recognized += 1;
                        }
                    }
                    Ok(RecognitionAtK {
                        k,
                        recognized,
                        rate: recognized as f64 / records.len().max(1) as f64,
                    })
                })
                .collect::<Result<Vec<_>, EvalError>>()?
        }
    };

    Ok(EvalReport {
        num_queries: records.len(),
        num_registered,
        registration_rate: num_registered as f64 / records.len().max(1) as f64,
        mean_inliers: mean(&inliers),
        mean_inlier_ratio: mean(&ratios),
        center_error: quartiles(center_errors),
        rotation_error_deg: quartiles(rotation_errors),
        mean_timings,
        recognition,
    })
}

/// Human-readable rendering of a report.
pub fn render_text(report: &EvalReport) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let _ = writeln!(out, "queries            {}", report.num_queries);
    let _ = writeln!(
        out,
        "registered         {} ({:.1}%)",
        report.num_registered,
        100.0 * report.registration_rate
    );
    match (report.mean_inliers, report.mean_inlier_ratio) {
        (Some(i), Some(r)) => {
            let _ = writeln!(out, "mean inliers       {i:.1}");
            let _ = writeln!(out, "mean inlier ratio  {r:.3}");
        }
        _ => {
            let _ = writeln!(out, "mean inliers       n/a");
            let _ = writeln!(out, "mean inlier ratio  n/a");
        }
    }
    match &report.center_error {
        Some(q) => {
            let _ = writeln!(
                out,
                "center error       q1 {:.3e}  median {:.3e}  q3 {:.3e}",
                q.q1, q.median, q.q3
            );
        }
        None => {
            let _ = writeln!(out, "center error       n/a");
        }
    }
    match &report.rotation_error_deg {
        Some(q) => {
            let _ = writeln!(
                out,
                "rotation error     q1 {:.3e}°  median {:.3e}°  q3 {:.3e}°",
                q.q1, q.median, q.q3
            );
        }
        None => {
            let _ = writeln!(out, "rotation error     n/a");
        }
    }
    let t = &report.mean_timings;
    let _ = writeln!(
        out,
        "mean stage times   forward {:.2}ms  filter {:.2}ms  back {:.2}ms  pose {:.2}ms  \
         total {:.2}ms",
        t.forward_s * 1e3,
        t.filter_s * 1e3,
        t.back_s * 1e3,
        t.pose_s * 1e3,
        t.total_s * 1e3
    );
    if !report.recognition.is_empty() {
        let _ = write!(out, "location recognition ");
        for r in &report.recognition {
            let _ = write!(
                out,
                " top-{}: {}/{} ({:.1}%)",
                r.k,
                r.recognized,
                report.num_queries,
                100.0 * r.rate
            );
        }
        let _ = writeln!(out);
    }
    out
}
