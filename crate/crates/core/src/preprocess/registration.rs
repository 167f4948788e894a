//! Mask-driven registration of the reference scan onto the target grid.
//!
//! A [`DeformationField`] lives on the target grid: voxel `x` of the target is
//! resampled from reference coordinate `x + d(x)`.

use std::path::Path;
use std::process::Command;

use crate::error::{Error, Result};
use crate::grid::{Grid, Grid3};
use crate::io;
use crate::scalar::Scalar;

use super::geometry::{bounding_box, Kind};

#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    displacement: Grid3<[f32; 3]>,
    /// Shape of the grid the field samples from.
    source_shape: [usize; 3],
}

impl DeformationField {
    pub fn new(displacement: Grid3<[f32; 3]>, source_shape: [usize; 3]) -> Result<Self> {
        if let Some(i) = displacement
            .as_slice()
            .iter()
            .position(|d| d.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            displacement,
            source_shape,
        })
    }

    pub fn identity(shape: [usize; 3]) -> Self {
        Self {
            displacement: Grid::filled(shape, [0.0; 3]),
            source_shape: shape,
        }
    }

    /// Shape of the output (target) grid.
    pub fn shape(&self) -> [usize; 3] {
        self.displacement.shape()
    }

    pub fn source_shape(&self) -> [usize; 3] {
        self.source_shape
    }

    pub fn displacement(&self) -> &Grid3<[f32; 3]> {
        &self.displacement
    }

    /// Largest displacement length in voxels.
    pub fn max_displacement(&self) -> f64 {
        self.displacement
            .as_slice()
            .iter()
            .map(|d| d.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Mean displacement vector.
    pub fn mean_displacement(&self) -> [f64; 3] {
        let n = self.displacement.len() as f64;
        let mut acc = [0.0; 3];
        for d in self.displacement.as_slice() {
            for a in 0..3 {
                acc[a] += d[a] as f64;
            }
        }
        acc.map(|v| v / n)
    }
}

/// Something that can align a reference lung mask to a target lung mask.
pub trait RegistrationBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Field on the target grid mapping into the reference grid.
    fn register(&self, reference: &Grid3<bool>, target: &Grid3<bool>) -> Result<DeformationField>;
}

/// Leaves the reference untouched (apart from resampling onto the target grid shape).
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityBackend;

impl RegistrationBackend for IdentityBackend {
    fn name(&self) -> &str {
        "identity"
    }

    fn register(&self, reference: &Grid3<bool>, target: &Grid3<bool>) -> Result<DeformationField> {
        let mut f = DeformationField::identity(target.shape());
        f.source_shape = reference.shape();
        Ok(f)
    }
}

/// Per-axis scaling from bounding-box extents plus center-of-mass translation.
#[derive(Clone, Copy, Debug, Default)]
pub struct AffineBackend;

fn center_of_mass(mask: &Grid3<bool>) -> Option<[f64; 3]> {
    let mut acc = [0.0f64; 3];
    let mut n = 0usize;
    for (lin, &on) in mask.as_slice().iter().enumerate() {
        if on {
            let idx = mask.unravel(lin);
            for a in 0..3 {
                acc[a] += idx[a] as f64;
            }
            n += 1;
        }
    }
    (n > 0).then(|| acc.map(|v| v / n as f64))
}

impl RegistrationBackend for AffineBackend {
    fn name(&self) -> &str {
        "affine"
    }

    fn register(&self, reference: &Grid3<bool>, target: &Grid3<bool>) -> Result<DeformationField> {
        let fail = |message: &str| Error::Registration {
            backend: self.name().into(),
            message: message.into(),
        };
        let (rb, tb) = (
            bounding_box(reference).ok_or_else(|| fail("reference mask is empty"))?,
            bounding_box(target).ok_or_else(|| fail("target mask is empty"))?,
        );
        let rc = center_of_mass(reference).expect("non-empty");
        let tc = center_of_mass(target).expect("non-empty");
        let (rs, ts) = (rb.shape(), tb.shape());
        let scale: [f64; 3] = std::array::from_fn(|a| rs[a] as f64 / ts[a] as f64);
        let displacement = Grid::from_fn(target.shape(), |idx| {
            std::array::from_fn(|a| {
                let x = idx[a] as f64;
                (rc[a] + (x - tc[a]) * scale[a] - x) as f32
            })
        });
        DeformationField::new(displacement, reference.shape())
    }
}

/// Runs an external program as `<program> <reference_mask.nii> <target_mask.nii> <out_dir>`.
/// The program must write `<out_dir>/field.raw` holding little-endian f32
/// displacement triples per target voxel plus a `field.json` sidecar with
/// `{"shape": [h, w, s, 3]}`.
#[derive(Clone, Debug)]
pub struct ExternalBackend {
    pub program: String,
}

impl RegistrationBackend for ExternalBackend {
    fn name(&self) -> &str {
        &self.program
    }

    fn register(&self, reference: &Grid3<bool>, target: &Grid3<bool>) -> Result<DeformationField> {
        let fail = |message: String| Error::Registration {
            backend: self.program.clone(),
            message,
        };
        let dir = std::env::temp_dir().join(format!("longiseg-reg-{}-{}", std::process::id(), unique()));
        std::fs::create_dir_all(&dir)?;
        let run = || -> Result<DeformationField> {
            let (rp, tp) = (dir.join("reference_mask.nii"), dir.join("target_mask.nii"));
            io::write_mask_nifti(&rp, &reference.map(|&b| b as u8), None)?;
            io::write_mask_nifti(&tp, &target.map(|&b| b as u8), None)?;
            let status = Command::new(&self.program)
                .arg(&rp)
                .arg(&tp)
                .arg(&dir)
                .status()
                .map_err(|e| fail(format!("could not start: {e}")))?;
            if !status.success() {
                return Err(fail(format!("exited with {status}")));
            }
            read_field(&dir, target.shape(), reference.shape()).map_err(|e| fail(e.to_string()))
        };
        let out = run();
        let _ = std::fs::remove_dir_all(&dir);
        out
    }
}

fn unique() -> u64 {
    use std::sync::atomic::{AtomicU64, Ordering};
    static N: AtomicU64 = AtomicU64::new(0);
    N.fetch_add(1, Ordering::Relaxed)
}

fn read_field(dir: &Path, shape: [usize; 3], source_shape: [usize; 3]) -> Result<DeformationField> {
    let sidecar: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("field.json"))?)?;
    let dims: Vec<usize> = serde_json::from_value(sidecar["shape"].clone())?;
    let expected = [shape[0], shape[1], shape[2], 3];
    if dims != expected {
        return Err(Error::shape("external deformation field", &expected, &dims));
    }
    let bytes = std::fs::read(dir.join("field.raw"))?;
    let n: usize = shape.iter().product();
    if bytes.len() != n * 12 {
        return Err(Error::shape("external field bytes", &[n * 12], &[bytes.len()]));
    }
    let values: Vec<[f32; 3]> = bytes
        .chunks_exact(12)
        .map(|c| std::array::from_fn(|a| f32::from_le_bytes(c[a * 4..a * 4 + 4].try_into().unwrap())))
        .collect();
    DeformationField::new(Grid::from_vec(shape, values)?, source_shape)
}

/// Aligns the reference lung mask to the target lung mask with `backend`.
pub fn register_reference(
    reference_lung: &Grid3<bool>,
    target_lung: &Grid3<bool>,
    backend: &dyn RegistrationBackend,
) -> Result<DeformationField> {
    let field = backend.register(reference_lung, target_lung)?;
    if field.shape() != target_lung.shape() {
        return Err(Error::Registration {
            backend: backend.name().into(),
            message: format!("field shape {:?} does not match target {:?}", field.shape(), target_lung.shape()),
        });
    }
    Ok(field)
}

/// Resamples `source` at `x + d(x)` for every target voxel. Trilinear for
/// images, nearest for masks; samples falling outside the source are zero.
pub fn apply_deformation<T: Sample>(source: &Grid3<T>, field: &DeformationField, kind: Kind) -> Grid3<T> {
    let shape = source.shape();
    let inside = |idx: [isize; 3]| (0..3).all(|a| idx[a] >= 0 && (idx[a] as usize) < shape[a]);
    let at = |idx: [isize; 3]| -> T {
        if inside(idx) {
            source[[idx[0] as usize, idx[1] as usize, idx[2] as usize]]
        } else {
            T::zero_value()
        }
    };
    Grid::from_fn(field.shape(), |idx| {
        let d = field.displacement[idx];
        let p: [f64; 3] = std::array::from_fn(|a| idx[a] as f64 + d[a] as f64);
        match kind {
            Kind::Mask => at(p.map(|v| v.round() as isize)),
            Kind::Image => {
                let base = p.map(|v| v.floor() as isize);
                let frac: [f64; 3] = std::array::from_fn(|a| p[a] - base[a] as f64);
                let corner = |di: isize, dj: isize, dk: isize| at([base[0] + di, base[1] + dj, base[2] + dk]);
                let along_k = |di, dj| T::lerp(corner(di, dj, 0), corner(di, dj, 1), frac[2]);
                let along_j = |di| T::lerp(along_k(di, 0), along_k(di, 1), frac[1]);
                T::lerp(along_j(0), along_j(1), frac[0])
            }
        }
    })
}

/// Voxel types that can be resampled.
pub trait Sample: Copy {
    fn zero_value() -> Self;
    fn lerp(a: Self, b: Self, t: f64) -> Self;
}

impl<S: Scalar> Sample for S {
    fn zero_value() -> Self {
        S::zero()
    }

    fn lerp(a: Self, b: Self, t: f64) -> Self {
        if t == 0.0 {
            a
        } else {
            a + (b - a) * S::lit(t)
        }
    }
}

impl Sample for u8 {
    fn zero_value() -> Self {
        0
    }

    fn lerp(a: Self, b: Self, t: f64) -> Self {
        if t < 0.5 {
            a
        } else {
            b
        }
    }
}

impl Sample for bool {
    fn zero_value() -> Self {
        false
    }

    fn lerp(a: Self, b: Self, t: f64) -> Self {
        if t < 0.5 {
            a
        } else {
            b
        }
    }
}
