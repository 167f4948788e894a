//! Sessions on disk and the refinement loop that drives them.
//!
//! Layout of one session directory:
//!
//! ```text
//! <id>/session.json                manifest
//! <id>/uploads/*.nii[.gz]          original uploads, when any
//! <id>/inputs/{reference,target}.raw, {reference_seg,target_seg}.raw
//! <id>/rounds/<T>/labels.raw       fused labels of round T (u8)
//! <id>/rounds/<T>/prob_<c>.raw     fused probability of class c (f32)
//! <id>/rounds/<T>/edits_<cls>.raw  accumulated edits through round T, stored as value + 1 (u8)
//! ```
//!
//! Raw files carry the usual JSON sidecar. Rounds are numbered from 1; round 1
//! is the initial prediction and has no strokes.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use longiseg_core::io::{read_labels, read_mask, read_volume, write_labels, write_mask, write_volume};
use longiseg_core::metrics::{class_metrics, ClassMetrics};
use longiseg_core::preprocess::{preprocess_pair, AffineBackend, RawStudy};
use longiseg_core::{accumulate_edits, EditMask, EditVolume, Grid, LabelVolume, Lesion, ProbMap, Volume};
use longiseg_train::{predict_volume, PatientVolumes, Prediction, SliceSegmenter};

use crate::error::{Result, ServiceError};
use crate::stroke::{rasterize_strokes, validate_strokes, Stroke};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub ggo: ClassMetrics,
    pub cons: ClassMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub index: usize,
    pub strokes: Vec<Stroke>,
    /// Nonzero voxels of this round's own edit mask.
    pub edit_voxels: usize,
    pub created: DateTime<Utc>,
    /// SHA-256 of the stored label bytes.
    pub labels_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<RoundMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub id: String,
    pub created: DateTime<Utc>,
    pub updated: DateTime<Utc>,
    /// Identifies the model weights the rounds were produced with.
    pub model_ref: String,
    pub shape: [usize; 3],
    pub has_ground_truth: bool,
    /// True when the server ran the preprocessing chain on raw uploads.
    pub preprocessed: bool,
    pub rounds: Vec<RoundRecord>,
}

impl SessionManifest {
    pub fn latest_round(&self) -> usize {
        self.rounds.len()
    }
}

/// Uploaded scans for a new session. With both lung masks the volumes are
/// raw studies and go through preprocessing; otherwise they must already
/// share one grid.
#[derive(Clone, Debug)]
pub struct SessionInputs {
    pub reference: Volume<f32>,
    pub reference_seg: LabelVolume,
    pub target: Volume<f32>,
    pub target_seg: Option<LabelVolume>,
    pub lungs: Option<(Grid<bool, 3>, Grid<bool, 3>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    /// Strokes allowed per slice in one submission.
    pub edit_cap: usize,
    /// Grid that server-side preprocessing resamples to.
    pub output_shape: [usize; 3],
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            edit_cap: longiseg_core::editsim::DEFAULT_EDIT_CAP,
            output_shape: longiseg_core::preprocess::DEFAULT_SHAPE,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-')
}

/// The session store plus the model that serves it. All methods are
/// blocking; callers serialize work per session.
pub struct Engine {
    pub config: ServiceConfig,
    segmenter: Arc<dyn SliceSegmenter<f32>>,
    model_ref: String,
}

impl Engine {
    pub fn new(config: ServiceConfig, segmenter: Arc<dyn SliceSegmenter<f32>>, model_ref: impl Into<String>) -> Result<Self> {
        if config.edit_cap == 0 {
            return Err(ServiceError::BadRequest("edit cap must be at least 1".into()));
        }
        std::fs::create_dir_all(&config.data_dir)?;
        Ok(Self {
            config,
            segmenter,
            model_ref: model_ref.into(),
        })
    }

    pub fn model_ref(&self) -> &str {
        &self.model_ref
    }

    pub fn session_dir(&self, id: &str) -> Result<PathBuf> {
        if !valid_id(id) {
            return Err(ServiceError::NotFound(id.into()));
        }
        let dir = self.config.data_dir.join(id);
        if !dir.join("session.json").is_file() {
            return Err(ServiceError::NotFound(id.into()));
        }
        Ok(dir)
    }

    pub fn manifest(&self, id: &str) -> Result<SessionManifest> {
        let dir = self.session_dir(id)?;
        Ok(serde_json::from_slice(&std::fs::read(dir.join("session.json"))?)?)
    }

    fn save_manifest(&self, dir: &Path, manifest: &SessionManifest) -> Result<()> {
        write_atomic(&dir.join("session.json"), &serde_json::to_vec_pretty(manifest)?)
    }

    pub fn list(&self) -> Result<Vec<SessionManifest>> {
        let mut out = Vec::new();
        for entry in std::fs::read_dir(&self.config.data_dir)? {
            let name = entry?.file_name();
            let Some(id) = name.to_str() else { continue };
            match self.manifest(id) {
                Ok(m) => out.push(m),
                Err(ServiceError::NotFound(_)) => {}
                Err(e) => return Err(e),
            }
        }
        out.sort_by(|a, b| a.created.cmp(&b.created).then_with(|| a.id.cmp(&b.id)));
        Ok(out)
    }

    pub fn delete(&self, id: &str) -> Result<()> {
        let dir = self.session_dir(id)?;
        std::fs::remove_dir_all(dir)?;
        Ok(())
    }

    /// Stores a new session with an empty round list.
    pub fn create(&self, inputs: SessionInputs, uploads: &[(String, Vec<u8>)]) -> Result<SessionManifest> {
        let preprocessed = inputs.lungs.is_some();
        let patient = self.prepare(inputs)?;
        let id = uuid::Uuid::new_v4().to_string();
        let dir = self.config.data_dir.join(&id);
        let staging = self.config.data_dir.join(format!(".{id}.partial"));
        std::fs::create_dir_all(staging.join("inputs"))?;
        if !uploads.is_empty() {
            std::fs::create_dir_all(staging.join("uploads"))?;
            for (name, bytes) in uploads {
                std::fs::write(staging.join("uploads").join(name), bytes)?;
            }
        }
        let inputs_dir = staging.join("inputs");
        write_volume(&inputs_dir.join("reference.raw"), &Volume::new(patient.reference.clone())?)?;
        write_volume(&inputs_dir.join("target.raw"), &Volume::new(patient.target.clone())?)?;
        write_labels(&inputs_dir.join("reference_seg.raw"), &patient.reference_seg)?;
        if let Some(gt) = &patient.target_seg {
            write_labels(&inputs_dir.join("target_seg.raw"), gt)?;
        }
        let now = Utc::now();
        let manifest = SessionManifest {
            id: id.clone(),
            created: now,
            updated: now,
            model_ref: self.model_ref.clone(),
            shape: patient.shape(),
            has_ground_truth: patient.target_seg.is_some(),
            preprocessed,
            rounds: Vec::new(),
        };
        self.save_manifest(&staging, &manifest)?;
        std::fs::rename(&staging, &dir)?;
        tracing::info!(session = %id, shape = ?manifest.shape, "session created");
        Ok(manifest)
    }

    fn prepare(&self, inputs: SessionInputs) -> Result<PatientVolumes<f32>> {
        let patient = match inputs.lungs {
            Some((ref_lung, tgt_lung)) => {
                let reference = RawStudy::new(inputs.reference.grid, ref_lung, 1, "upload")?;
                let target = RawStudy::new(inputs.target.grid, tgt_lung, 2, "upload")?;
                let pair = preprocess_pair(
                    &reference,
                    &target,
                    &inputs.reference_seg,
                    inputs.target_seg.as_ref(),
                    &AffineBackend,
                    self.config.output_shape,
                )?;
                PatientVolumes {
                    id: "upload".into(),
                    reference: pair.reference.grid,
                    reference_seg: pair.reference_seg,
                    target: pair.target.grid,
                    target_seg: pair.target_seg,
                }
            }
            None => PatientVolumes {
                id: "upload".into(),
                reference: inputs.reference.grid,
                reference_seg: inputs.reference_seg,
                target: inputs.target.grid,
                target_seg: inputs.target_seg,
            },
        };
        patient.validate().map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        Ok(patient)
    }

    pub fn load_patient(&self, id: &str) -> Result<PatientVolumes<f32>> {
        let inputs = self.session_dir(id)?.join("inputs");
        let gt_path = inputs.join("target_seg.raw");
        Ok(PatientVolumes {
            id: id.into(),
            reference: read_volume::<f32>(&inputs.join("reference.raw"))?.grid,
            reference_seg: read_labels(&inputs.join("reference_seg.raw"))?,
            target: read_volume::<f32>(&inputs.join("target.raw"))?.grid,
            target_seg: if gt_path.is_file() {
                Some(read_labels(&gt_path)?)
            } else {
                None
            },
        })
    }

    fn round_dir(&self, id: &str, round: usize) -> Result<PathBuf> {
        let manifest = self.manifest(id)?;
        if round == 0 || round > manifest.latest_round() {
            return Err(ServiceError::NotFound(format!("{id}/rounds/{round}")));
        }
        Ok(self.session_dir(id)?.join("rounds").join(format!("{round:03}")))
    }

    pub fn round_labels(&self, id: &str, round: usize) -> Result<LabelVolume> {
        Ok(read_labels(&self.round_dir(id, round)?.join("labels.raw"))?)
    }

    pub fn round_prediction(&self, id: &str, round: usize) -> Result<Prediction<f32>> {
        let dir = self.round_dir(id, round)?;
        let labels = read_labels(&dir.join("labels.raw"))?;
        let classes = [0, 1, 2].map(|c| read_volume::<f32>(&dir.join(format!("prob_{c}.raw"))).map(|v| v.grid));
        let [a, b, c] = classes;
        Ok(Prediction {
            prob: ProbMap::new([a?, b?, c?])?,
            labels,
        })
    }

    pub fn round_edits(&self, id: &str, round: usize) -> Result<EditVolume> {
        let dir = self.round_dir(id, round)?;
        let channels = Lesion::ALL.map(|l| read_mask(&dir.join(format!("edits_{}.raw", l.name()))));
        let [g, c] = channels;
        let decode = |m: Grid<u8, 3>| m.map(|&v| v as i8 - 1);
        Ok(EditMask::new([decode(g?), decode(c?)])?)
    }

    fn store_round(
        &self,
        id: &str,
        manifest: &mut SessionManifest,
        pred: &Prediction<f32>,
        accumulated: &EditVolume,
        strokes: Vec<Stroke>,
        edit_voxels: usize,
        gt: Option<&LabelVolume>,
    ) -> Result<RoundRecord> {
        let index = manifest.latest_round() + 1;
        let session = self.session_dir(id)?;
        let rounds = session.join("rounds");
        let staging = rounds.join(format!("{index:03}.partial"));
        std::fs::create_dir_all(&staging)?;
        write_labels(&staging.join("labels.raw"), &pred.labels)?;
        for (c, grid) in pred.prob.classes().iter().enumerate() {
            write_volume(&staging.join(format!("prob_{c}.raw")), &Volume::new(grid.clone())?)?;
        }
        for l in Lesion::ALL {
            let stored = accumulated.channel(l).map(|&v| (v + 1) as u8);
            write_mask(&staging.join(format!("edits_{}.raw", l.name())), &stored)?;
        }
        std::fs::rename(&staging, rounds.join(format!("{index:03}")))?;
        let metrics = gt
            .map(|gt| -> Result<RoundMetrics> {
                Ok(RoundMetrics {
                    ggo: class_metrics(&pred.labels, gt, Lesion::Ggo)?,
                    cons: class_metrics(&pred.labels, gt, Lesion::Cons)?,
                })
            })
            .transpose()?;
        let record = RoundRecord {
            index,
            strokes,
            edit_voxels,
            created: Utc::now(),
            labels_sha256: sha256_hex(pred.labels.as_slice()),
            metrics,
        };
        manifest.rounds.push(record.clone());
        manifest.updated = record.created;
        self.save_manifest(&session, manifest)?;
        Ok(record)
    }

    /// Round 1: Input-1 stacks everywhere.
    pub fn run_initial(&self, id: &str) -> Result<RoundRecord> {
        let mut manifest = self.manifest(id)?;
        if manifest.latest_round() != 0 {
            return Err(ServiceError::Conflict(format!(
                "session {id} already has {} round(s)",
                manifest.latest_round()
            )));
        }
        let patient = self.load_patient(id)?;
        let pred = predict_volume(self.segmenter.as_ref(), &patient, None, None)?;
        let zeros = EditVolume::zeros(patient.shape());
        self.store_round(id, &mut manifest, &pred, &zeros, Vec::new(), 0, patient.target_seg.as_ref())
    }

    /// Next round from `strokes`. `base_round` is the latest round the client
    /// has seen; a mismatch means another submission won.
    pub fn submit(&self, id: &str, base_round: usize, strokes: Vec<Stroke>) -> Result<RoundRecord> {
        let mut manifest = self.manifest(id)?;
        let latest = manifest.latest_round();
        if latest == 0 {
            return Err(ServiceError::Conflict(format!("session {id} has no initial round yet")));
        }
        if base_round != latest {
            return Err(ServiceError::Conflict(format!(
                "round {base_round} is stale; session {id} is at round {latest}"
            )));
        }
        validate_strokes(&strokes, manifest.shape, self.config.edit_cap)?;
        let patient = self.load_patient(id)?;
        let previous = self.round_prediction(id, latest)?;
        let current = rasterize_strokes(manifest.shape, &strokes)?;
        let accumulated = accumulate_edits(&self.round_edits(id, latest)?, &current)?;
        let pred = predict_volume(self.segmenter.as_ref(), &patient, Some(&previous), Some(&accumulated))?;
        let voxels = current.nonzero_count();
        self.store_round(id, &mut manifest, &pred, &accumulated, strokes, voxels, patient.target_seg.as_ref())
    }

    /// Recomputes every round from the stored inputs and stroke log.
    pub fn replay(&self, id: &str) -> Result<Vec<LabelVolume>> {
        let manifest = self.manifest(id)?;
        let patient = self.load_patient(id)?;
        let mut out = Vec::with_capacity(manifest.rounds.len());
        let mut state: Option<(Prediction<f32>, EditVolume)> = None;
        for record in &manifest.rounds {
            let (pred, acc) = match state.take() {
                None => (
                    predict_volume(self.segmenter.as_ref(), &patient, None, None)?,
                    EditVolume::zeros(patient.shape()),
                ),
                Some((prev, acc)) => {
                    let acc = accumulate_edits(&acc, &rasterize_strokes(manifest.shape, &record.strokes)?)?;
                    (
                        predict_volume(self.segmenter.as_ref(), &patient, Some(&prev), Some(&acc))?,
                        acc,
                    )
                }
            };
            out.push(pred.labels.clone());
            state = Some((pred, acc));
        }
        Ok(out)
    }

    /// Whether a replay matches every stored round bit for bit.
    pub fn verify_replay(&self, id: &str) -> Result<ReplayReport> {
        let manifest = self.manifest(id)?;
        let replayed = self.replay(id)?;
        let mut mismatched = Vec::new();
        for (record, labels) in manifest.rounds.iter().zip(&replayed) {
            let stored = self.round_labels(id, record.index)?;
            if stored != *labels || sha256_hex(labels.as_slice()) != record.labels_sha256 {
                mismatched.push(record.index);
            }
        }
        Ok(ReplayReport {
            rounds: replayed.len(),
            bit_exact: mismatched.is_empty(),
            mismatched,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub rounds: usize,
    pub bit_exact: bool,
    pub mismatched: Vec<usize>,
}
