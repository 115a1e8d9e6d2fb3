//! Occupancy mask and the masked scatter that keys neighbor encodings into
//! the spatial grid, plus flattening into the combined feature vector.
//!
//! Grid cells are addressed `(channel, cell)` with row-major linear position
//! `channel * cells + cell`. Scatter writes the i-th encoding row to the
//! i-th set mask bit in row-major order, which is also the order samples
//! store their neighbor histories in.

use crate::data::samples::TrajectorySample;
use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

/// Binary presence grid, `channels × cells`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OccupancyMask {
    channels: usize,
    cells: usize,
    bits: Vec<bool>,
}

impl OccupancyMask {
    pub fn empty(channels: usize, cells: usize) -> Self {
        OccupancyMask {
            channels,
            cells,
            bits: vec![false; channels * cells],
        }
    }

    /// Build from occupied cell coordinates; duplicates are an integrity
    /// error.
    pub fn from_cells<I>(channels: usize, cells: usize, occupied: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut mask = OccupancyMask::empty(channels, cells);
        for (c, g) in occupied {
            if c >= channels || g >= cells {
                return Err(Error::MaskIntegrity(format!(
                    "cell ({c},{g}) outside {channels}x{cells} grid"
                )));
            }
            if mask.get(c, g) {
                return Err(Error::MaskIntegrity(format!("duplicate cell ({c},{g})")));
            }
            mask.set(c, g, true);
        }
        Ok(mask)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn get(&self, channel: usize, cell: usize) -> bool {
        self.bits[channel * self.cells + cell]
    }

    pub fn set(&mut self, channel: usize, cell: usize, value: bool) {
        self.bits[channel * self.cells + cell] = value;
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Linear positions of set bits, in row-major order.
    pub fn set_positions(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }
}

/// Neighbor encodings placed on the grid: a `[channels*cells, dim]` tensor
/// whose rows at unoccupied cells are exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct SocialEncoding {
    channels: usize,
    cells: usize,
    dim: usize,
    grid: Tensor,
}

impl SocialEncoding {
    pub fn zeros(channels: usize, cells: usize, dim: usize) -> Self {
        SocialEncoding {
            channels,
            cells,
            dim,
            grid: Tensor::zeros(&[channels * cells, dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cell(&self, channel: usize, cell: usize) -> &[f64] {
        self.grid.row(channel * self.cells + cell)
    }

    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    pub fn grid_mut(&mut self) -> &mut Tensor {
        &mut self.grid
    }
}

/// Derive the presence mask of a sample from its neighbor histories.
pub fn build_mask(sample: &TrajectorySample) -> Result<OccupancyMask> {
    OccupancyMask::from_cells(
        sample.mask.channels(),
        sample.mask.cells(),
        sample
            .neighbor_histories
            .iter()
            .map(|n| (n.channel as usize, n.cell as usize)),
    )
}

/// Place each encoding row at its mask cell; every other cell stays zero.
/// `encodings` is `[N, d]` with `N` equal to the mask popcount, rows ordered
/// like the mask's set bits (row-major).
pub fn masked_scatter(mask: &OccupancyMask, encodings: &Tensor) -> Result<SocialEncoding> {
    let positions = mask.set_positions();
    if encodings.shape().len() != 2 || encodings.rows() != positions.len() {
        return Err(Error::shape(
            "masked_scatter",
            format!("[{}, d] encodings", positions.len()),
            format!("{:?}", encodings.shape()),
        ));
    }
    let dim = encodings.cols();
    let mut soc = SocialEncoding::zeros(mask.channels(), mask.cells(), dim);
    for (i, &p) in positions.iter().enumerate() {
        let dst = &mut soc.grid.data_mut()[p * dim..(p + 1) * dim];
        dst.copy_from_slice(encodings.row(i));
    }
    Ok(soc)
}

/// Row-major flatten with index order (channel, cell, feature).
pub fn flatten_social(soc: &SocialEncoding) -> Vec<f64> {
    soc.grid.data().to_vec()
}

/// Inverse of [`flatten_social`].
pub fn unflatten_social(channels: usize, cells: usize, dim: usize, flat: &[f64]) -> Result<SocialEncoding> {
    if flat.len() != channels * cells * dim {
        return Err(Error::shape(
            "unflatten_social",
            format!("{} values", channels * cells * dim),
            format!("{}", flat.len()),
        ));
    }
    Ok(SocialEncoding {
        channels,
        cells,
        dim,
        grid: Tensor::from_vec(&[channels * cells, dim], flat.to_vec())?,
    })
}
