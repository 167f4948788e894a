//! Domain types shared by every stage of the pipeline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Grid3};
use crate::scalar::Scalar;

/// Number of foreground classes (GGO and CONS).
pub const NUM_FOREGROUND: usize = 2;
/// Foreground classes plus background.
pub const NUM_CLASSES: usize = NUM_FOREGROUND + 1;

pub const BACKGROUND: u8 = 0;

/// A foreground lesion class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lesion {
    /// Ground-glass opacity, label 1.
    Ggo,
    /// Consolidation, label 2.
    Cons,
}

impl Lesion {
    pub const ALL: [Lesion; NUM_FOREGROUND] = [Lesion::Ggo, Lesion::Cons];

    #[inline]
    pub fn label(self) -> u8 {
        match self {
            Lesion::Ggo => 1,
            Lesion::Cons => 2,
        }
    }

    /// Index of this class among the edit / reference-segmentation channels.
    #[inline]
    pub fn channel(self) -> usize {
        self.label() as usize - 1
    }

    pub fn from_label(label: u8) -> Option<Lesion> {
        match label {
            1 => Some(Lesion::Ggo),
            2 => Some(Lesion::Cons),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Lesion::Ggo => "ggo",
            Lesion::Cons => "cons",
        }
    }
}

/// A 3D intensity grid `(h, w, s)` with optional voxel spacing in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<S> {
    pub grid: Grid3<S>,
    pub spacing: Option<[f64; 3]>,
    pub id: String,
}

impl<S: Scalar> Volume<S> {
    pub fn new(grid: Grid3<S>) -> Result<Self> {
        if let Some(i) = grid.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            grid,
            spacing: None,
            id: String::new(),
        })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn with_spacing(mut self, spacing: Option<[f64; 3]>) -> Self {
        self.spacing = spacing;
        self
    }

    #[inline]
    pub fn shape(&self) -> [usize; 3] {
        self.grid.shape()
    }

    /// True when every voxel lies in `[0, 1]`.
    pub fn is_unit_range(&self) -> bool {
        self.grid.as_slice().iter().all(|&v| v >= S::zero() && v <= S::one())
    }
}

/// Per-voxel class labels in `{0, 1, 2}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMask<const D: usize>(Grid<u8, D>);

pub type LabelVolume = LabelMask<3>;
pub type LabelSlice = LabelMask<2>;

impl<const D: usize> LabelMask<D> {
    pub fn new(grid: Grid<u8, D>) -> Result<Self> {
        if let Some(index) = grid.as_slice().iter().position(|&v| v as usize >= NUM_CLASSES) {
            return Err(Error::InvalidLabel {
                value: grid.as_slice()[index],
                index,
            });
        }
        Ok(Self(grid))
    }

    pub fn background(shape: [usize; D]) -> Self {
        Self(Grid::zeros(shape))
    }

    #[inline]
    pub fn grid(&self) -> &Grid<u8, D> {
        &self.0
    }

    pub fn into_grid(self) -> Grid<u8, D> {
        self.0
    }

    #[inline]
    pub fn shape(&self) -> [usize; D] {
        self.0.shape()
    }

    #[inline]
    pub fn as_slice(&self) -> &[u8] {
        self.0.as_slice()
    }

    /// Binary indicator grid of one lesion class.
    pub fn binary(&self, lesion: Lesion) -> Grid<bool, D> {
        let l = lesion.label();
        self.0.map(|&v| v == l)
    }

    /// Rebuilds labels from per-class binary masks; the masks must be disjoint.
    pub fn from_binary(ggo: &Grid<bool, D>, cons: &Grid<bool, D>) -> Result<Self> {
        ggo.ensure_shape("consolidation mask", cons.shape())?;
        let mut out = Vec::with_capacity(ggo.len());
        for (i, (&g, &c)) in ggo.as_slice().iter().zip(cons.as_slice()).enumerate() {
            out.push(match (g, c) {
                (false, false) => BACKGROUND,
                (true, false) => Lesion::Ggo.label(),
                (false, true) => Lesion::Cons.label(),
                (true, true) => {
                    return Err(Error::InvalidArgument(format!(
                        "class masks overlap at linear index {i}"
                    )))
                }
            });
        }
        Self::new(Grid::from_vec(ggo.shape(), out)?)
    }

    pub fn count(&self, lesion: Lesion) -> usize {
        let l = lesion.label();
        self.0.as_slice().iter().filter(|&&v| v == l).count()
    }

    /// Label map encoded as `label / C`, i.e. `{0, 0.5, 1}`.
    pub fn encoded<S: Scalar>(&self) -> Grid<S, D> {
        let c = S::lit(NUM_FOREGROUND as f64);
        self.0.map(|&v| S::lit(v as f64) / c)
    }
}

/// Per-voxel probabilities over background, GGO and CONS.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap<S, const D: usize> {
    classes: [Grid<S, D>; NUM_CLASSES],
}

pub type ProbVolume<S> = ProbMap<S, 3>;
pub type ProbSlice<S> = ProbMap<S, 2>;

/// Maximum allowed deviation of a voxel's probability sum from 1.
pub const PROB_SUM_TOLERANCE: f64 = 1e-5;

impl<S: Scalar, const D: usize> ProbMap<S, D> {
    /// Validates shapes, ranges and per-voxel normalization.
    pub fn new(classes: [Grid<S, D>; NUM_CLASSES]) -> Result<Self> {
        let shape = classes[0].shape();
        for (c, g) in classes.iter().enumerate() {
            g.ensure_shape(&format!("probability channel {c}"), shape)?;
        }
        let map = Self { classes };
        for i in 0..map.classes[0].len() {
            let mut sum = 0.0;
            for g in &map.classes {
                let p = g.as_slice()[i];
                if !p.is_finite() {
                    return Err(Error::NonFinite(i));
                }
                if p < S::zero() || p > S::one() {
                    return Err(Error::InvalidArgument(format!(
                        "probability {p} outside [0, 1] at linear index {i}"
                    )));
                }
                sum += p.to_f64_lossy();
            }
            if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
                return Err(Error::NotNormalized { index: i, sum });
            }
        }
        Ok(map)
    }

    /// Skips validation; callers guarantee the invariants (e.g. softmax output).
    pub fn from_channels_unchecked(classes: [Grid<S, D>; NUM_CLASSES]) -> Self {
        Self { classes }
    }

    pub fn uniform(shape: [usize; D]) -> Self {
        let p = S::one() / S::lit(NUM_CLASSES as f64);
        Self {
            classes: std::array::from_fn(|_| Grid::filled(shape, p)),
        }
    }

    pub fn one_hot(labels: &LabelMask<D>) -> Self {
        Self {
            classes: std::array::from_fn(|c| {
                labels.grid().map(|&v| if v as usize == c { S::one() } else { S::zero() })
            }),
        }
    }

    #[inline]
    pub fn shape(&self) -> [usize; D] {
        self.classes[0].shape()
    }

    #[inline]
    pub fn class(&self, c: usize) -> &Grid<S, D> {
        &self.classes[c]
    }

    pub fn classes(&self) -> &[Grid<S, D>; NUM_CLASSES] {
        &self.classes
    }

    pub fn into_classes(self) -> [Grid<S, D>; NUM_CLASSES] {
        self.classes
    }

    /// Probabilities of one voxel by linear index.
    #[inline]
    pub fn at(&self, lin: usize) -> [S; NUM_CLASSES] {
        std::array::from_fn(|c| self.classes[c].as_slice()[lin])
    }

    pub fn max_prob(&self) -> Grid<S, D> {
        labels_from_probs(self).0
    }

    pub fn labels(&self) -> LabelMask<D> {
        labels_from_probs(self).1
    }
}

/// Per-voxel highest probability and its class; ties go to the lowest class index.
pub fn labels_from_probs<S: Scalar, const D: usize>(prob: &ProbMap<S, D>) -> (Grid<S, D>, LabelMask<D>) {
    let n = prob.classes[0].len();
    let mut max = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut best = 0usize;
        let mut best_p = prob.classes[0].as_slice()[i];
        for c in 1..NUM_CLASSES {
            let p = prob.classes[c].as_slice()[i];
            if p > best_p {
                best = c;
                best_p = p;
            }
        }
        max.push(best_p);
        labels.push(best as u8);
    }
    let shape = prob.shape();
    (
        Grid::from_vec(shape, max).expect("shape preserved"),
        LabelMask(Grid::from_vec(shape, labels).expect("shape preserved")),
    )
}

/// User or simulated corrections: per foreground class, values in `{-1, 0, +1}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditMask<const D: usize> {
    channels: [Grid<i8, D>; NUM_FOREGROUND],
}

pub type EditVolume = EditMask<3>;
pub type EditSlice = EditMask<2>;

impl<const D: usize> EditMask<D> {
    pub fn new(channels: [Grid<i8, D>; NUM_FOREGROUND]) -> Result<Self> {
        channels[1].ensure_shape("edit channel 2", channels[0].shape())?;
        for ch in &channels {
            if let Some(index) = ch.as_slice().iter().position(|v| !(-1..=1).contains(v)) {
                return Err(Error::InvalidEdit {
                    value: ch.as_slice()[index],
                    index,
                });
            }
        }
        Ok(Self { channels })
    }

    pub fn zeros(shape: [usize; D]) -> Self {
        Self {
            channels: std::array::from_fn(|_| Grid::zeros(shape)),
        }
    }

    #[inline]
    pub fn shape(&self) -> [usize; D] {
        self.channels[0].shape()
    }

    #[inline]
    pub fn channel(&self, lesion: Lesion) -> &Grid<i8, D> {
        &self.channels[lesion.channel()]
    }

    pub fn channels(&self) -> &[Grid<i8, D>; NUM_FOREGROUND] {
        &self.channels
    }

    /// Sets one voxel of one class channel; `value` must be in `{-1, 0, 1}`.
    #[inline]
    pub fn set(&mut self, lesion: Lesion, idx: [usize; D], value: i8) {
        debug_assert!((-1..=1).contains(&value));
        self.channels[lesion.channel()][idx] = value;
    }

    pub fn is_zero(&self) -> bool {
        self.channels.iter().all(|c| c.as_slice().iter().all(|&v| v == 0))
    }

    /// Number of nonzero entries over both channels.
    pub fn nonzero_count(&self) -> usize {
        self.channels
            .iter()
            .map(|c| c.as_slice().iter().filter(|&&v| v != 0).count())
            .sum()
    }
}
