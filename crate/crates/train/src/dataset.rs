//! Preprocessed patients and the per-slice samples drawn from them.

use std::collections::HashSet;
use std::path::Path;

use longiseg_core::preprocess::{preprocess_pair, RegistrationBackend};
use longiseg_core::synth::{generate_patient, load_patient, split_of, LoadedPatient, Manifest, Split, SynthConfig};
use longiseg_core::{Grid3, LabelVolume, Plane, Scalar};

use crate::error::{Result, TrainError};

/// One aligned reference/target pair on a common grid.
#[derive(Clone, Debug)]
pub struct PatientVolumes<S> {
    pub id: String,
    pub reference: Grid3<S>,
    pub reference_seg: LabelVolume,
    pub target: Grid3<S>,
    /// Target ground truth; required for training and scripted evaluation.
    pub target_seg: Option<LabelVolume>,
}

impl<S: Scalar> PatientVolumes<S> {
    pub fn shape(&self) -> [usize; 3] {
        self.target.shape()
    }

    pub fn ground_truth(&self) -> Result<&LabelVolume> {
        self.target_seg
            .as_ref()
            .ok_or_else(|| TrainError::MissingGroundTruth(self.id.clone()))
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.shape();
        self.reference.ensure_shape("reference volume", shape)?;
        self.reference_seg.grid().ensure_shape("reference segmentation", shape)?;
        if let Some(gt) = &self.target_seg {
            gt.grid().ensure_shape("target segmentation", shape)?;
        }
        Ok(())
    }
}

/// Runs the preprocessing chain on a loaded pair.
pub fn prepare<S: Scalar>(
    loaded: &LoadedPatient<S>,
    backend: &dyn RegistrationBackend,
    shape: [usize; 3],
) -> Result<PatientVolumes<S>> {
    let pair = preprocess_pair(
        &loaded.reference,
        &loaded.target,
        &loaded.reference_seg,
        Some(&loaded.target_seg),
        backend,
        shape,
    )?;
    Ok(PatientVolumes {
        id: loaded.id.clone(),
        reference: pair.reference.grid,
        reference_seg: pair.reference_seg,
        target: pair.target.grid,
        target_seg: pair.target_seg,
    })
}

/// Generates and preprocesses one split of a synthetic dataset in memory.
/// Patient ids and seeds match what the on-disk generator writes.
pub fn synthetic_split<S: Scalar>(
    cfg: &SynthConfig,
    split: Split,
    backend: &dyn RegistrationBackend,
    shape: [usize; 3],
) -> Result<Vec<PatientVolumes<S>>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for index in (0..cfg.n_patients()).filter(|&i| split_of(cfg, i) == split) {
        let mut loaded = generate_patient::<S>(cfg, cfg.patient_seed(index))?.into_loaded()?;
        loaded.id = format!("patient{index:03}");
        out.push(prepare(&loaded, backend, shape)?);
    }
    Ok(out)
}

/// Reads and preprocesses one split of an on-disk dataset.
pub fn load_split<S: Scalar>(
    dir: &Path,
    manifest: &Manifest,
    split: Split,
    backend: &dyn RegistrationBackend,
    shape: [usize; 3],
) -> Result<Vec<PatientVolumes<S>>> {
    manifest
        .split(split)
        .map(|entry| prepare(&load_patient::<S>(dir, entry)?, backend, shape))
        .collect()
}

/// Fails if any patient id occurs in more than one split.
pub fn ensure_disjoint<S>(splits: &[&[PatientVolumes<S>]]) -> Result<()> {
    let mut seen = HashSet::new();
    for split in splits {
        let ids: HashSet<&str> = split.iter().map(|p| p.id.as_str()).collect();
        for id in ids {
            if !seen.insert(id.to_string()) {
                return Err(TrainError::SplitOverlap(id.to_string()));
            }
        }
    }
    Ok(())
}

/// One 2D training or validation example.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SliceRef {
    pub patient: usize,
    pub plane: Plane,
    pub index: usize,
}

/// Every slice of every patient along all three planes.
pub fn all_slices<S: Scalar>(patients: &[PatientVolumes<S>]) -> Vec<SliceRef> {
    let mut out = Vec::new();
    for (patient, p) in patients.iter().enumerate() {
        for plane in Plane::ALL {
            for index in 0..plane.slice_count(p.shape()) {
                out.push(SliceRef { patient, plane, index });
            }
        }
    }
    out
}
