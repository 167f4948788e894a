//! Deterministic synthetic longitudinal chest scans.
//!
//! Each patient has two lungs, vessel-like tubes inside them, ground-glass
//! lesions (hazy, mid intensity) and consolidations (dense, placed toward the
//! posterior side of the axial slice, often with a ground-glass rim). The
//! follow-up scan rescales every lesion by its growth factor and applies a
//! smooth deformation to the whole anatomy. Everything is evaluated as an
//! implicit function of continuous coordinates, so labels track lesions
//! exactly.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Grid3};
use crate::io;
use crate::preprocess::RawStudy;
use crate::scalar::Scalar;
use crate::volume::{LabelMask, LabelVolume, Lesion};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub shape: [usize; 3],
    /// Train / validation / test patient counts.
    pub splits: [usize; 3],
    /// Inclusive range of lesions per patient.
    pub lesion_count_range: [usize; 2],
    /// Probability that a lesion beyond the third is a consolidation.
    pub class_mix: f64,
    /// Mean lesion radius growth from the first to the second scan.
    pub progression_factor: f64,
    /// Peak amplitude of the smooth inter-scan deformation, in voxels.
    pub deformation: f64,
    /// Standard deviation of white acquisition noise, in HU.
    pub noise_level: f64,
    /// Vessel-like tubes per lung.
    pub vessels_per_lung: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            shape: [64, 64, 64],
            splits: [12, 4, 6],
            lesion_count_range: [4, 7],
            class_mix: 0.4,
            progression_factor: 1.15,
            deformation: 1.5,
            noise_level: 30.0,
            vessels_per_lung: 5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&n| n < 16) {
            return Err(Error::InvalidArgument(format!("synth shape {:?}: every axis must be >= 16", self.shape)));
        }
        if !(self.progression_factor > 0.0) {
            return Err(Error::InvalidArgument("progression_factor must be > 0".into()));
        }
        if self.lesion_count_range[0] > self.lesion_count_range[1] {
            return Err(Error::InvalidArgument("lesion_count_range must be [min, max]".into()));
        }
        if !(0.0..=1.0).contains(&self.class_mix) {
            return Err(Error::InvalidArgument("class_mix must lie in [0, 1]".into()));
        }
        if self.deformation < 0.0 || self.noise_level < 0.0 {
            return Err(Error::InvalidArgument("deformation and noise_level must be >= 0".into()));
        }
        Ok(())
    }

    pub fn n_patients(&self) -> usize {
        self.splits.iter().sum()
    }

    /// Per-patient seed derived from the dataset seed.
    pub fn patient_seed(&self, index: usize) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((index as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03))
    }
}

/// One synthetic scan in HU with its lung mask and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthScan<S> {
    pub image: Grid3<S>,
    pub lung: Grid3<bool>,
    pub labels: LabelVolume,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthPatient<S> {
    pub id: String,
    pub seed: u64,
    pub reference: SynthScan<S>,
    pub target: SynthScan<S>,
}

/// Trilinearly interpolated lattice noise in `[-1, 1]`, defined on normalized coordinates.
#[derive(Clone, Debug)]
struct LatticeNoise {
    n: usize,
    values: Vec<f64>,
}

impl LatticeNoise {
    fn new(rng: &mut ChaCha8Rng, n: usize) -> Self {
        Self {
            n,
            values: (0..n * n * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    fn sample(&self, u: [f64; 3]) -> f64 {
        let n = self.n;
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let x = ((u[a] + 1.0) * 0.5 * (n - 1) as f64).clamp(0.0, (n - 1) as f64 - 1e-9);
            base[a] = x.floor() as usize;
            frac[a] = x - base[a] as f64;
        }
        let at = |i: usize, j: usize, k: usize| self.values[(i * n + j) * n + k];
        let mut acc = 0.0;
        for di in 0..2 {
            for dj in 0..2 {
                for dk in 0..2 {
                    let w = (if di == 1 { frac[0] } else { 1.0 - frac[0] })
                        * (if dj == 1 { frac[1] } else { 1.0 - frac[1] })
                        * (if dk == 1 { frac[2] } else { 1.0 - frac[2] });
                    acc += w * at(base[0] + di, base[1] + dj, base[2] + dk);
                }
            }
        }
        acc
    }
}

#[derive(Clone, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    #[inline]
    fn level(&self, u: [f64; 3]) -> f64 {
        (0..3).map(|a| ((u[a] - self.center[a]) / self.radii[a]).powi(2)).sum()
    }
}

#[derive(Clone, Debug)]
struct Tube {
    a: [f64; 3],
    b: [f64; 3],
    radius: f64,
}

impl Tube {
    fn contains(&self, u: [f64; 3]) -> bool {
        let ab: [f64; 3] = std::array::from_fn(|i| self.b[i] - self.a[i]);
        let au: [f64; 3] = std::array::from_fn(|i| u[i] - self.a[i]);
        let len2: f64 = ab.iter().map(|v| v * v).sum();
        let t = (au.iter().zip(&ab).map(|(x, y)| x * y).sum::<f64>() / len2).clamp(0.0, 1.0);
        let d2: f64 = (0..3).map(|i| (au[i] - t * ab[i]).powi(2)).sum();
        d2 <= self.radius * self.radius
    }
}

#[derive(Clone, Debug)]
struct LesionBlob {
    lesion: Lesion,
    shape: Ellipsoid,
    growth: f64,
    /// Extra ground-glass rim (radius multiplier) around a consolidation.
    rim: Option<f64>,
}

struct Anatomy {
    body: [f64; 2],
    lungs: [Ellipsoid; 2],
    vessels: Vec<Tube>,
    lesions: Vec<LesionBlob>,
    texture: LatticeNoise,
    roughness: LatticeNoise,
    warp: [LatticeNoise; 3],
}

const AIR_HU: f64 = -1000.0;
const TISSUE_HU: f64 = 40.0;
const LUNG_HU: f64 = -850.0;
const VESSEL_HU: f64 = 45.0;
const GGO_HU: f64 = -600.0;
const CONS_HU: f64 = 15.0;

impl Anatomy {
    fn sample(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Self {
        let mut jitter = |x: f64, rel: f64| x * (1.0 + rng.random_range(-rel..rel));
        let lung_radii = [jitter(0.6, 0.08), jitter(0.33, 0.08), jitter(0.82, 0.06)];
        let lungs = [-1.0, 1.0].map(|side| Ellipsoid {
            center: [-0.05, side * 0.43, 0.0],
            radii: lung_radii,
        });
        let body = [0.92, 0.95];

        let mut vessels = Vec::new();
        for lung in &lungs {
            for _ in 0..cfg.vessels_per_lung {
                let hilum = [
                    lung.center[0] + rng.random_range(-0.1..0.1),
                    lung.center[1] * 0.6,
                    rng.random_range(-0.4..0.4),
                ];
                let tip = point_in(rng, lung, 0.85);
                vessels.push(Tube {
                    a: hilum,
                    b: tip,
                    radius: rng.random_range(0.025..0.045),
                });
            }
        }

        let count = rng.random_range(cfg.lesion_count_range[0]..=cfg.lesion_count_range[1]);
        let mut lesions = Vec::with_capacity(count);
        for n in 0..count {
            let lung = &lungs[rng.random_range(0..2)];
            // every patient gets two ground-glass lesions and one consolidation
            let is_cons = match n {
                0 | 1 => false,
                2 => true,
                _ => rng.random_bool(cfg.class_mix),
            };
            let mut center = point_in(rng, lung, 0.75);
            let (lesion, size, rim) = if is_cons {
                // posterior placement: rows toward the bottom of the axial slice
                center[0] = lung.center[0] + lung.radii[0] * rng.random_range(0.15..0.65);
                let rim = rng.random_bool(0.5).then(|| rng.random_range(1.3..1.6));
                (Lesion::Cons, rng.random_range(0.11..0.18), rim)
            } else {
                (Lesion::Ggo, rng.random_range(0.14..0.25), None)
            };
            let radii = [0, 1, 2].map(|_| size * rng.random_range(0.75..1.25));
            let growth = 1.0 + (cfg.progression_factor - 1.0) * rng.random_range(0.5..1.5);
            lesions.push(LesionBlob {
                lesion,
                shape: Ellipsoid { center, radii },
                growth,
                rim,
            });
        }

        Self {
            body,
            lungs,
            vessels,
            lesions,
            texture: LatticeNoise::new(rng, 14),
            roughness: LatticeNoise::new(rng, 8),
            warp: [0, 1, 2].map(|_| LatticeNoise::new(rng, 4)),
        }
    }

    /// Label and HU at normalized coordinate `u`; `follow_up` applies lesion growth.
    fn evaluate(&self, u: [f64; 3], follow_up: bool) -> (bool, u8, f64) {
        if (u[0] / self.body[0]).powi(2) + (u[1] / self.body[1]).powi(2) > 1.0 {
            return (false, 0, AIR_HU);
        }
        let in_lung = self.lungs.iter().any(|l| l.level(u) <= 1.0);
        if !in_lung {
            return (false, 0, TISSUE_HU);
        }
        let vessel = self.vessels.iter().any(|t| t.contains(u));
        let rough = 0.35 * self.roughness.sample(u);
        let tex = self.texture.sample(u);
        let mut label = 0u8;
        for blob in &self.lesions {
            let g = if follow_up { blob.growth } else { 1.0 };
            let level = blob.shape.level(u) / (g * g) + rough;
            match blob.lesion {
                Lesion::Cons if level <= 1.0 => label = 2,
                Lesion::Cons => {
                    if let Some(r) = blob.rim {
                        if level <= r * r && label == 0 {
                            label = 1;
                        }
                    }
                }
                Lesion::Ggo if level <= 1.0 && label == 0 => label = 1,
                Lesion::Ggo => {}
            }
        }
        let base = if vessel { VESSEL_HU } else { LUNG_HU };
        let hu = match label {
            1 => (GGO_HU + 90.0 * tex).max(base),
            2 => CONS_HU + 35.0 * tex,
            _ => base,
        };
        (true, label, hu)
    }
}

fn point_in(rng: &mut ChaCha8Rng, e: &Ellipsoid, scale: f64) -> [f64; 3] {
    loop {
        let p: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        if p.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
            return std::array::from_fn(|a| e.center[a] + p[a] * e.radii[a] * scale);
        }
    }
}

#[inline]
fn normalized(idx: [usize; 3], shape: [usize; 3]) -> [f64; 3] {
    std::array::from_fn(|a| 2.0 * (idx[a] as f64 + 0.5) / shape[a] as f64 - 1.0)
}

/// Generates one patient's reference and follow-up scans.
pub fn generate_patient<S: Scalar>(cfg: &SynthConfig, patient_seed: u64) -> Result<SynthPatient<S>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(patient_seed);
    let anatomy = Anatomy::sample(&mut rng, cfg);
    let shape = cfg.shape;
    let noise_dist = Normal::new(0.0, cfg.noise_level.max(0.0)).expect("valid sigma");
    let noise: Grid3<f64> = Grid::from_fn(shape, |_| {
        if cfg.noise_level > 0.0 {
            noise_dist.sample(&mut rng)
        } else {
            0.0
        }
    });
    let shift: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));

    let scan = |follow_up: bool| -> Result<SynthScan<S>> {
        let n = shape.iter().product();
        let (mut image, mut lung, mut labels) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        let probe = Grid::<u8, 3>::zeros(shape);
        for lin in 0..n {
            let idx = probe.unravel(lin);
            let mut u = normalized(idx, shape);
            let mut noise_idx = idx;
            if follow_up && cfg.deformation > 0.0 {
                let base = u;
                let mut src = [0.0f64; 3];
                for a in 0..3 {
                    let d_vox = cfg.deformation * 0.5 * (anatomy.warp[a].sample(base) + shift[a]);
                    src[a] = idx[a] as f64 + d_vox;
                    u[a] += 2.0 * d_vox / shape[a] as f64;
                }
                noise_idx = std::array::from_fn(|a| (src[a].round().max(0.0) as usize).min(shape[a] - 1));
            }
            let (in_lung, label, hu) = anatomy.evaluate(u, follow_up);
            image.push(S::lit(hu + noise[noise_idx]));
            lung.push(in_lung);
            labels.push(label);
        }
        Ok(SynthScan {
            image: Grid::from_vec(shape, image)?,
            lung: Grid::from_vec(shape, lung)?,
            labels: LabelMask::new(Grid::from_vec(shape, labels)?)?,
        })
    };

    Ok(SynthPatient {
        id: String::new(),
        seed: patient_seed,
        reference: scan(false)?,
        target: scan(true)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanFiles {
    pub image: PathBuf,
    pub lung: PathBuf,
    pub labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanStats {
    pub lung_voxels: usize,
    pub ggo_fraction: f64,
    pub cons_fraction: f64,
}

impl ScanStats {
    pub fn of<S>(scan: &SynthScan<S>) -> Self {
        let lung_voxels = scan.lung.as_slice().iter().filter(|&&b| b).count();
        let frac = |l: Lesion| scan.labels.count(l) as f64 / lung_voxels.max(1) as f64;
        Self {
            lung_voxels,
            ggo_fraction: frac(Lesion::Ggo),
            cons_fraction: frac(Lesion::Cons),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientEntry {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    /// Paths relative to the manifest directory; reference first.
    pub scans: [ScanFiles; 2],
    pub stats: [ScanStats; 2],
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: SynthConfig,
    pub patients: Vec<PatientEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Format(format!("manifest version {} unsupported", m.version)));
        }
        Ok(m)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &PatientEntry> {
        self.patients.iter().filter(move |p| p.split == split)
    }
}

pub fn split_of(cfg: &SynthConfig, index: usize) -> Split {
    if index < cfg.splits[0] {
        Split::Train
    } else if index < cfg.splits[0] + cfg.splits[1] {
        Split::Val
    } else {
        Split::Test
    }
}

/// Writes every patient as NIfTI files under `out/<split>/<id>/` plus `out/manifest.json`.
pub fn generate_dataset(cfg: &SynthConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let mut patients = Vec::with_capacity(cfg.n_patients());
    for index in 0..cfg.n_patients() {
        let seed = cfg.patient_seed(index);
        let split = split_of(cfg, index);
        let id = format!("patient{index:03}");
        let patient = generate_patient::<f32>(cfg, seed)?;
        let rel_dir = PathBuf::from(split.name()).join(&id);
        std::fs::create_dir_all(out.join(&rel_dir))?;
        let mut scans = Vec::with_capacity(2);
        let mut stats = Vec::with_capacity(2);
        for (t, scan) in [&patient.reference, &patient.target].into_iter().enumerate() {
            let files = ScanFiles {
                image: rel_dir.join(format!("t{}_image.nii.gz", t + 1)),
                lung: rel_dir.join(format!("t{}_lung.nii.gz", t + 1)),
                labels: rel_dir.join(format!("t{}_labels.nii.gz", t + 1)),
            };
            let vol = crate::volume::Volume::new(scan.image.clone())?;
            io::write_volume(&out.join(&files.image), &vol)?;
            io::write_mask(&out.join(&files.lung), &scan.lung.map(|&b| b as u8))?;
            io::write_labels(&out.join(&files.labels), &scan.labels)?;
            scans.push(files);
            stats.push(ScanStats::of(scan));
        }
        patients.push(PatientEntry {
            id,
            split,
            seed,
            scans: scans.try_into().expect("two scans"),
            stats: stats.try_into().expect("two scans"),
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        config: cfg.clone(),
        patients,
    };
    std::fs::write(out.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// A patient's two studies and segmentations read back from disk.
pub struct LoadedPatient<S> {
    pub id: String,
    pub reference: RawStudy<S>,
    pub reference_seg: LabelVolume,
    pub target: RawStudy<S>,
    pub target_seg: LabelVolume,
}

impl<S: Scalar> SynthPatient<S> {
    /// The pair as studies ready for preprocessing, without a round trip through disk.
    pub fn into_loaded(self) -> Result<LoadedPatient<S>> {
        let reference = RawStudy::new(self.reference.image, self.reference.lung, 1, self.id.clone())?;
        let target = RawStudy::new(self.target.image, self.target.lung, 2, self.id.clone())?;
        Ok(LoadedPatient {
            id: self.id,
            reference,
            reference_seg: self.reference.labels,
            target,
            target_seg: self.target.labels,
        })
    }
}

pub fn load_patient<S: Scalar>(dir: &Path, entry: &PatientEntry) -> Result<LoadedPatient<S>> {
    let read = |t: usize| -> Result<(RawStudy<S>, LabelVolume)> {
        let f = &entry.scans[t];
        let image = io::read_volume::<S>(&dir.join(&f.image))?;
        let lung = io::read_binary_mask(&dir.join(&f.lung))?;
        let labels = io::read_labels(&dir.join(&f.labels))?;
        let mut study = RawStudy::new(image.grid, lung, t as u32 + 1, entry.id.clone())?;
        study.spacing = image.spacing;
        Ok((study, labels))
    };
    let (reference, reference_seg) = read(0)?;
    let (target, target_seg) = read(1)?;
    Ok(LoadedPatient {
        id: entry.id.clone(),
        reference,
        reference_seg,
        target,
        target_seg,
    })
}
