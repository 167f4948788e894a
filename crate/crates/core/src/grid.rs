//! Dense row-major grids.
//!
//! A `Grid<T, 3>` with shape `[h, w, s]` stores voxel `(i, j, k)` at linear
//! index `(i * w + j) * s + k`, so the last axis varies fastest. The raw
//! volume format writes voxels in exactly this order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid<T, const D: usize> {
    #[serde(with = "shape_serde")]
    shape: [usize; D],
    data: Vec<T>,
}

pub type Grid2<T> = Grid<T, 2>;
pub type Grid3<T> = Grid<T, 3>;

mod shape_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer, const D: usize>(shape: &[usize; D], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(shape.iter())
    }

    pub fn deserialize<'de, De: Deserializer<'de>, const D: usize>(d: De) -> Result<[usize; D], De::Error> {
        let v = Vec::<usize>::deserialize(d)?;
        v.try_into()
            .map_err(|v: Vec<usize>| serde::de::Error::invalid_length(v.len(), &"grid rank"))
    }
}

impl<T, const D: usize> Grid<T, D> {
    /// Wraps `data` as a grid of `shape`; every extent must be positive.
    pub fn from_vec(shape: [usize; D], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::EmptyGrid(shape.to_vec()));
        }
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::shape("grid data length", &[len], &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: [usize; D], mut f: impl FnMut([usize; D]) -> T) -> Self {
        assert!(shape.iter().all(|&n| n > 0), "grid extents must be positive: {shape:?}");
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut idx = [0usize; D];
        for _ in 0..len {
            data.push(f(idx));
            for axis in (0..D).rev() {
                idx[axis] += 1;
                if idx[axis] < shape[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> [usize; D] {
        self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn linear(&self, idx: [usize; D]) -> usize {
        let mut lin = 0;
        for axis in 0..D {
            debug_assert!(idx[axis] < self.shape[axis]);
            lin = lin * self.shape[axis] + idx[axis];
        }
        lin
    }

    #[inline]
    pub fn contains(&self, idx: [isize; D]) -> bool {
        idx.iter().zip(self.shape.iter()).all(|(&i, &n)| i >= 0 && (i as usize) < n)
    }

    /// Inverse of [`Grid::linear`].
    pub fn unravel(&self, mut lin: usize) -> [usize; D] {
        let mut idx = [0usize; D];
        for axis in (0..D).rev() {
            idx[axis] = lin % self.shape[axis];
            lin /= self.shape[axis];
        }
        idx
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U, D> {
        Grid {
            shape: self.shape,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn ensure_shape(&self, what: &str, expected: [usize; D]) -> Result<()> {
        if self.shape != expected {
            return Err(Error::shape(what, &expected, &self.shape));
        }
        Ok(())
    }
}

impl<T: Clone, const D: usize> Grid<T, D> {
    pub fn filled(shape: [usize; D], value: T) -> Self {
        assert!(shape.iter().all(|&n| n > 0), "grid extents must be positive: {shape:?}");
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }
}

impl<T: Clone + Default, const D: usize> Grid<T, D> {
    pub fn zeros(shape: [usize; D]) -> Self {
        Self::filled(shape, T::default())
    }
}

impl<T, const D: usize> std::ops::Index<[usize; D]> for Grid<T, D> {
    type Output = T;

    #[inline]
    fn index(&self, idx: [usize; D]) -> &T {
        &self.data[self.linear(idx)]
    }
}

impl<T, const D: usize> std::ops::IndexMut<[usize; D]> for Grid<T, D> {
    #[inline]
    fn index_mut(&mut self, idx: [usize; D]) -> &mut T {
        let lin = self.linear(idx);
        &mut self.data[lin]
    }
}
