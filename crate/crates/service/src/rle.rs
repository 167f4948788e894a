//! Run-length encoding of label volumes in row-major voxel order.

use serde::{Deserialize, Serialize};

use longiseg_core::{Grid, LabelVolume};

use crate::error::{Result, ServiceError};

/// `rle` alternates value and run length: `[v0, n0, v1, n1, ...]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub shape: [usize; 3],
    pub rle: Vec<usize>,
}

pub fn encode(labels: &LabelVolume) -> RleMask {
    let mut rle = Vec::new();
    let mut iter = labels.as_slice().iter();
    if let Some(&first) = iter.next() {
        let (mut value, mut run) = (first, 1usize);
        for &v in iter {
            if v == value {
                run += 1;
            } else {
                rle.extend([value as usize, run]);
                (value, run) = (v, 1);
            }
        }
        rle.extend([value as usize, run]);
    }
    RleMask {
        shape: labels.shape(),
        rle,
    }
}

pub fn decode(mask: &RleMask) -> Result<LabelVolume> {
    if mask.rle.len() % 2 != 0 {
        return Err(ServiceError::BadRequest("rle must alternate value and length".into()));
    }
    let mut data = Vec::with_capacity(mask.shape.iter().product());
    for pair in mask.rle.chunks_exact(2) {
        let value = u8::try_from(pair[0]).map_err(|_| ServiceError::BadRequest(format!("label {}", pair[0])))?;
        data.extend(std::iter::repeat_n(value, pair[1]));
    }
    Ok(LabelVolume::new(Grid::from_vec(mask.shape, data)?)?)
}
