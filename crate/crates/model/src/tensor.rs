//! Batched feature maps in NCHW order.

use longiseg_core::Scalar;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<S> {
    shape: [usize; 4],
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![S::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(ModelError::Shape(format!("tensor of shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    /// Spatial `[h, w]`.
    pub fn spatial(&self) -> [usize; 2] {
        [self.shape[2], self.shape[3]]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    /// Values of sample `n`, all channels.
    pub fn sample(&self, n: usize) -> &[S] {
        let len = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [S] {
        let len = self.shape[1] * self.shape[2] * self.shape[3];
        &mut self.data[n * len..(n + 1) * len]
    }

    /// One `h × w` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[S] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [S] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) {
        assert_eq!(self.shape, other.shape, "tensor shapes differ");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| T::lit(v.to_f64_lossy())).collect(),
        }
    }

    /// Zero padding of the spatial dims: `before` rows/cols ahead and the rest after, to `[h, w]`.
    pub fn pad_to(&self, [h, w]: [usize; 2], before: [usize; 2]) -> Self {
        let [n, c, ih, iw] = self.shape;
        assert!(h >= ih + before[0] && w >= iw + before[1], "padding target too small");
        let mut out = Self::zeros([n, c, h, w]);
        for b in 0..n {
            for ch in 0..c {
                let src = self.plane(b, ch);
                let dst = out.plane_mut(b, ch);
                for r in 0..ih {
                    let d = (r + before[0]) * w + before[1];
                    dst[d..d + iw].copy_from_slice(&src[r * iw..(r + 1) * iw]);
                }
            }
        }
        out
    }

    /// Spatial window `[top, left]` of size `[h, w]`.
    pub fn crop(&self, [top, left]: [usize; 2], [h, w]: [usize; 2]) -> Self {
        let [n, c, ih, iw] = self.shape;
        assert!(top + h <= ih && left + w <= iw, "crop window outside tensor");
        let mut out = Self::zeros([n, c, h, w]);
        for b in 0..n {
            for ch in 0..c {
                let src = self.plane(b, ch);
                let dst = out.plane_mut(b, ch);
                for r in 0..h {
                    let s = (r + top) * iw + left;
                    dst[r * w..(r + 1) * w].copy_from_slice(&src[s..s + w]);
                }
            }
        }
        out
    }

    /// Stacks single samples along the batch axis.
    pub fn stack(samples: &[Tensor<S>]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| ModelError::Shape("empty batch".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(samples.iter().map(|s| s.len()).sum());
        let mut n = 0;
        for s in samples {
            if s.shape[1..] != [c, h, w] {
                return Err(ModelError::Shape(format!("batch member {:?} vs {:?}", s.shape, first.shape)));
            }
            n += s.shape[0];
            data.extend_from_slice(&s.data);
        }
        Ok(Self { shape: [n, c, h, w], data })
    }
}
