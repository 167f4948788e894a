//! Volume and mask files.
//!
//! Two containers are supported, picked by extension:
//!
//! * NIfTI-1 (`.nii`, `.nii.gz`), voxel `(i, j, k)` stored at NIfTI index `(x, y, z)`.
//! * Raw (`.raw`): the voxel stream in the grid's row-major `(h, w, s)` order,
//!   little-endian, with a JSON sidecar at the same path with extension
//!   `.json`: `{"shape": [h, w, s], "spacing": [..], "dtype": "f32" | "u8"}`.
//!   Intensity volumes are `f32`, label masks `u8`.

use std::path::{Path, PathBuf};

use ndarray::{Array3, ShapeBuilder};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Grid3};
use crate::scalar::Scalar;
use crate::volume::{LabelMask, LabelVolume, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Container {
    Nifti,
    Raw,
}

pub fn container_of(path: &Path) -> Result<Container> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        Ok(Container::Nifti)
    } else if name.ends_with(".raw") {
        Ok(Container::Raw)
    } else {
        Err(Error::Format(format!("cannot infer container of `{}`", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSidecar {
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<Vec<f64>>,
    #[serde(default = "default_dtype")]
    pub dtype: String,
}

fn default_dtype() -> String {
    "f32".into()
}

pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

fn shape3(dims: &[usize], what: &str) -> Result<[usize; 3]> {
    let dims: Vec<usize> = dims.iter().copied().chain(std::iter::repeat(1)).take(3.max(dims.len())).collect();
    if dims.len() > 3 && dims[3..].iter().any(|&d| d != 1) {
        return Err(Error::Format(format!("{what}: expected a 3D grid, got {dims:?}")));
    }
    let shape = [dims[0], dims[1], dims[2]];
    if shape.contains(&0) {
        return Err(Error::EmptyGrid(shape.to_vec()));
    }
    Ok(shape)
}

fn read_sidecar(raw: &Path) -> Result<RawSidecar> {
    Ok(serde_json::from_slice(&std::fs::read(sidecar_path(raw))?)?)
}

fn write_raw_bytes(path: &Path, bytes: &[u8], sidecar: &RawSidecar) -> Result<()> {
    std::fs::write(path, bytes)?;
    std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(sidecar)?)?;
    Ok(())
}

/// Encodes a grid as little-endian f32 in row-major order.
pub fn encode_f32<S: Scalar>(grid: &Grid3<S>) -> Vec<u8> {
    grid.as_slice()
        .iter()
        .flat_map(|v| (v.to_f64_lossy() as f32).to_le_bytes())
        .collect()
}

pub fn decode_f32<S: Scalar>(shape: [usize; 3], bytes: &[u8]) -> Result<Grid3<S>> {
    let n: usize = shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::shape("raw f32 byte count", &[n * 4], &[bytes.len()]));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| S::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Grid::from_vec(shape, data)
}

fn nifti_spacing(header: &NiftiHeader) -> Option<[f64; 3]> {
    let p = header.pixdim;
    let sp = [p[1] as f64, p[2] as f64, p[3] as f64];
    sp.iter().all(|&v| v > 0.0 && v.is_finite()).then_some(sp)
}

fn header_with_spacing(spacing: Option<[f64; 3]>) -> NiftiHeader {
    let mut header = NiftiHeader::default();
    if let Some(sp) = spacing {
        header.pixdim[1] = sp[0] as f32;
        header.pixdim[2] = sp[1] as f32;
        header.pixdim[3] = sp[2] as f32;
    }
    header
}

fn read_nifti_f64(path: &Path) -> Result<(Grid3<f64>, Option<[f64; 3]>)> {
    let obj = ReaderOptions::new().read_file(path)?;
    let spacing = nifti_spacing(obj.header());
    let arr = obj.into_volume().into_ndarray::<f64>()?;
    let shape = shape3(arr.shape(), &path.display().to_string())?;
    let mut index = vec![0usize; arr.ndim().max(3)];
    Ok((
        Grid::from_fn(shape, |[i, j, k]| {
            index[..3].copy_from_slice(&[i, j, k]);
            arr[index.as_slice()]
        }),
        spacing,
    ))
}

fn to_array<T: Copy>(grid: &Grid3<T>) -> Array3<T> {
    let [h, w, s] = grid.shape();
    Array3::from_shape_vec((h, w, s).strides((w * s, s, 1)), grid.as_slice().to_vec()).expect("row-major shape")
}

/// Reads an intensity volume from NIfTI or raw.
pub fn read_volume<S: Scalar>(path: &Path) -> Result<Volume<S>> {
    let id = path
        .file_name()
        .and_then(|n| n.to_str())
        .map(|n| n.trim_end_matches(".gz").trim_end_matches(".nii").trim_end_matches(".raw"))
        .unwrap_or_default()
        .to_string();
    match container_of(path)? {
        Container::Nifti => {
            let (grid, spacing) = read_nifti_f64(path)?;
            Ok(Volume::new(grid.map(|&v| S::lit(v)))?.with_spacing(spacing).with_id(id))
        }
        Container::Raw => {
            let sidecar = read_sidecar(path)?;
            if sidecar.dtype != "f32" {
                return Err(Error::Format(format!("raw volume dtype `{}`, expected f32", sidecar.dtype)));
            }
            let shape = shape3(&sidecar.shape, &path.display().to_string())?;
            let grid = decode_f32(shape, &std::fs::read(path)?)?;
            let spacing = sidecar.spacing.and_then(|s| s.try_into().ok());
            Ok(Volume::new(grid)?.with_spacing(spacing).with_id(id))
        }
    }
}

pub fn write_volume<S: Scalar>(path: &Path, vol: &Volume<S>) -> Result<()> {
    match container_of(path)? {
        Container::Nifti => {
            let header = header_with_spacing(vol.spacing);
            let arr = to_array(&vol.grid.map(|v| v.to_f64_lossy() as f32));
            WriterOptions::new(path).reference_header(&header).write_nifti(&arr)?;
            Ok(())
        }
        Container::Raw => write_raw_bytes(
            path,
            &encode_f32(&vol.grid),
            &RawSidecar {
                shape: vol.shape().to_vec(),
                spacing: vol.spacing.map(|s| s.to_vec()),
                dtype: "f32".into(),
            },
        ),
    }
}

/// Reads an integer grid (labels or a binary mask).
pub fn read_mask(path: &Path) -> Result<Grid3<u8>> {
    match container_of(path)? {
        Container::Nifti => {
            let (grid, _) = read_nifti_f64(path)?;
            if let Some(i) = grid.as_slice().iter().position(|&v| !(0.0..=255.0).contains(&v) || v.fract() != 0.0) {
                return Err(Error::Format(format!("mask voxel {i} is not a small integer")));
            }
            Ok(grid.map(|&v| v as u8))
        }
        Container::Raw => {
            let sidecar = read_sidecar(path)?;
            if sidecar.dtype != "u8" {
                return Err(Error::Format(format!("raw mask dtype `{}`, expected u8", sidecar.dtype)));
            }
            let shape = shape3(&sidecar.shape, &path.display().to_string())?;
            Grid::from_vec(shape, std::fs::read(path)?)
        }
    }
}

pub fn write_mask_nifti(path: &Path, grid: &Grid3<u8>, spacing: Option<[f64; 3]>) -> Result<()> {
    let header = header_with_spacing(spacing);
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&to_array(grid))?;
    Ok(())
}

pub fn write_mask(path: &Path, grid: &Grid3<u8>) -> Result<()> {
    match container_of(path)? {
        Container::Nifti => write_mask_nifti(path, grid, None),
        Container::Raw => write_raw_bytes(
            path,
            grid.as_slice(),
            &RawSidecar {
                shape: grid.shape().to_vec(),
                spacing: None,
                dtype: "u8".into(),
            },
        ),
    }
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    LabelMask::new(read_mask(path)?)
}

pub fn write_labels(path: &Path, labels: &LabelVolume) -> Result<()> {
    write_mask(path, labels.grid())
}

pub fn read_binary_mask(path: &Path) -> Result<Grid3<bool>> {
    Ok(read_mask(path)?.map(|&v| v != 0))
}
