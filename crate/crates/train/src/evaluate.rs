//! Scripted multi-round refinement: predict, draw simulated corrections
//! against the ground truth on every slice of every plane, accumulate, repeat.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use longiseg_core::editsim::simulate_scribbles;
use longiseg_core::metrics::{class_metrics, ClassMetrics};
use longiseg_core::views::extract_label_slice;
use longiseg_core::{accumulate_edits, EditVolume, LabelVolume, Lesion, Plane};
use longiseg_model::Element;

use crate::dataset::PatientVolumes;
use crate::error::{Result, TrainError};
use crate::predict::{predict_volume, Prediction};
use crate::segmenter::SliceSegmenter;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub ggo: ClassMetrics,
    pub cons: ClassMetrics,
    /// Scribbles drawn before this round's prediction.
    pub edit_count: usize,
}

impl RoundReport {
    pub fn class(&self, lesion: Lesion) -> &ClassMetrics {
        match lesion {
            Lesion::Ggo => &self.ggo,
            Lesion::Cons => &self.cons,
        }
    }

    pub fn mean_dice(&self) -> f64 {
        (self.ggo.dsc + self.cons.dsc) / 2.0
    }
}

/// Scripted edits for a whole volume: every slice of every plane gets the
/// strokes a simulated user would draw against `gt`. Returns the edits and
/// the number of strokes.
pub fn scripted_edits(pred: &LabelVolume, gt: &LabelVolume, cap: usize) -> Result<(EditVolume, usize)> {
    let shape = gt.shape();
    pred.grid().ensure_shape("prediction", shape)?;
    let mut edits = EditVolume::zeros(shape);
    let mut count = 0;
    for plane in Plane::ALL {
        for index in 0..plane.slice_count(shape) {
            let p = extract_label_slice(pred, plane, index);
            let g = extract_label_slice(gt, plane, index);
            for s in simulate_scribbles(&p, &g, cap)? {
                count += 1;
                for &px in &s.voxels {
                    edits.set(s.lesion, plane.voxel(index, px), s.polarity.edit_value());
                }
            }
        }
    }
    Ok((edits, count))
}

fn report(round: usize, pred: &LabelVolume, gt: &LabelVolume, edit_count: usize) -> Result<RoundReport> {
    Ok(RoundReport {
        round,
        ggo: class_metrics(pred, gt, Lesion::Ggo)?,
        cons: class_metrics(pred, gt, Lesion::Cons)?,
        edit_count,
    })
}

/// Rounds `0..=n_rounds` for one patient; round 0 is the initial prediction.
pub fn evaluate_patient<S: Element>(
    segmenter: &dyn SliceSegmenter<S>,
    patient: &PatientVolumes<S>,
    n_rounds: usize,
    cap: usize,
) -> Result<Vec<RoundReport>> {
    let gt = patient.ground_truth()?;
    let mut pred: Prediction<S> = predict_volume(segmenter, patient, None, None)?;
    let mut reports = vec![report(0, &pred.labels, gt, 0)?];
    let mut accumulated = EditVolume::zeros(gt.shape());
    for round in 1..=n_rounds {
        let (edits, count) = scripted_edits(&pred.labels, gt, cap)?;
        accumulated = accumulate_edits(&accumulated, &edits)?;
        pred = predict_volume(segmenter, patient, Some(&pred), Some(&accumulated))?;
        reports.push(report(round, &pred.labels, gt, count)?);
    }
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRounds {
    pub patient: String,
    pub rounds: Vec<RoundReport>,
}

/// Mean and standard error of one metric across patients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub round: usize,
    pub class: String,
    pub metric: String,
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub patients: Vec<PatientRounds>,
    pub summary: Vec<SummaryRow>,
}

fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

impl Evaluation {
    pub fn rounds(&self) -> usize {
        self.patients.first().map_or(0, |p| p.rounds.len())
    }

    /// Mean over patients of the per-patient mean foreground Dice, per round.
    pub fn mean_dice_by_round(&self) -> Vec<f64> {
        (0..self.rounds())
            .map(|r| self.patients.iter().map(|p| p.rounds[r].mean_dice()).sum::<f64>() / self.patients.len() as f64)
            .collect()
    }

    pub fn summary_value(&self, round: usize, class: &str, metric: &str) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.round == round && r.class == class && r.metric == metric)
    }

    /// One JSON object per (round, class, metric).
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for row in &self.summary {
            out.push_str(&serde_json::to_string(row)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// `round,dice_ggo,dice_cons,dice_mean` with across-patient means.
    pub fn dice_csv(&self) -> String {
        let mut out = String::from("round,dice_ggo,dice_cons,dice_mean\n");
        for r in 0..self.rounds() {
            let get = |class: &str| self.summary_value(r, class, "dsc").map_or(f64::NAN, |s| s.mean);
            let _ = writeln!(out, "{r},{:.6},{:.6},{:.6}", get("ggo"), get("cons"), get("mean_fg"));
        }
        out
    }
}

fn summarize(patients: &[PatientRounds]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    let rounds = patients.first().map_or(0, |p| p.rounds.len());
    for round in 0..rounds {
        for lesion in Lesion::ALL {
            let per: Vec<&ClassMetrics> = patients.iter().map(|p| p.rounds[round].class(lesion)).collect();
            let metrics: [(&str, Vec<f64>); 4] = [
                ("dsc", per.iter().map(|m| m.dsc).collect()),
                ("ppv", per.iter().map(|m| m.ppv).collect()),
                ("tpr", per.iter().map(|m| m.tpr).collect()),
                ("vd", per.iter().filter_map(|m| m.vd).collect()),
            ];
            for (metric, values) in metrics {
                if values.is_empty() {
                    continue;
                }
                let (mean, stderr) = mean_stderr(&values);
                rows.push(SummaryRow {
                    round,
                    class: lesion.name().to_string(),
                    metric: metric.into(),
                    mean,
                    stderr,
                    n: values.len(),
                });
            }
        }
        let fg: Vec<f64> = patients.iter().map(|p| p.rounds[round].mean_dice()).collect();
        let (mean, stderr) = mean_stderr(&fg);
        rows.push(SummaryRow {
            round,
            class: "mean_fg".into(),
            metric: "dsc".into(),
            mean,
            stderr,
            n: fg.len(),
        });
    }
    rows
}

/// Runs the scripted protocol on every patient and summarizes across patients.
pub fn evaluate_rounds<S: Element>(
    segmenter: &dyn SliceSegmenter<S>,
    patients: &[PatientVolumes<S>],
    n_rounds: usize,
    cap: usize,
) -> Result<Evaluation> {
    if patients.is_empty() {
        return Err(TrainError::EmptyDataset("no patients to evaluate".into()));
    }
    let mut per = Vec::with_capacity(patients.len());
    for p in patients {
        let rounds = evaluate_patient(segmenter, p, n_rounds, cap)?;
        tracing::info!(patient = %p.id, dice = ?rounds.iter().map(|r| r.mean_dice()).collect::<Vec<_>>(), "evaluated");
        per.push(PatientRounds {
            patient: p.id.clone(),
            rounds,
        });
    }
    let summary = summarize(&per);
    Ok(Evaluation { patients: per, summary })
}
