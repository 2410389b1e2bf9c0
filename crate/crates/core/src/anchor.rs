//! Weekly historical-average anchors.
//!
//! The training split is cut into complete calendar weeks; the anchor at
//! week position `τ` is the mean of the readings at `τ` across those weeks.
//! Week position 0 is Monday 00:00.

use crate::data::{DatasetMeta, SeriesTensor};
use crate::error::{contract, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorTable {
    /// `[T^w, N, C]`, original scale.
    pub xbar: Tensor,
    pub steps_per_week: usize,
    /// Week position of absolute timestep 0.
    pub week_phase_of_origin: usize,
    /// Number of complete weeks averaged.
    pub segments: usize,
}

impl AnchorTable {
    pub fn nodes(&self) -> usize {
        self.xbar.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.xbar.shape()[2]
    }

    pub fn week_position(&self, absolute_t: usize) -> usize {
        (self.week_phase_of_origin + absolute_t) % self.steps_per_week
    }
}

pub fn week_phase_of_origin(meta: &DatasetMeta) -> usize {
    meta.start_weekday * meta.steps_per_day
}

/// Builds the table from `train`. Null entries are left out of each
/// positional mean; a position with no valid sample takes the node's mean
/// over the whole split (zero when the node has no valid entry at all).
pub fn build_anchor_table(train: &SeriesTensor) -> Result<AnchorTable> {
    let meta = &train.meta;
    let tw = meta.steps_per_week();
    let phase = week_phase_of_origin(meta);
    let lead = (tw - (phase + train.start) % tw) % tw;
    let segments = train.len().saturating_sub(lead) / tw;
    if segments == 0 {
        return Err(contract(format!(
            "anchor table needs one complete week ({} steps) after alignment; training split has {} steps with {} leading steps before the first week boundary",
            tw,
            train.len(),
            lead
        )));
    }
    let width = train.nodes() * train.channels();

    let mut fallback = vec![0.0; width];
    let mut fallback_n = vec![0usize; width];
    for t in 0..train.len() {
        for (j, &v) in train.step(t).iter().enumerate() {
            if !meta.is_null(v) {
                fallback[j] += v;
                fallback_n[j] += 1;
            }
        }
    }
    for (f, &n) in fallback.iter_mut().zip(&fallback_n) {
        *f = if n > 0 { *f / n as f64 } else { 0.0 };
    }

    let mut xbar = vec![0.0; tw * width];
    let mut counts = vec![0usize; tw * width];
    for s in 0..segments {
        for tau in 0..tw {
            let row = train.step(lead + s * tw + tau);
            for (j, &v) in row.iter().enumerate() {
                if !meta.is_null(v) {
                    xbar[tau * width + j] += v;
                    counts[tau * width + j] += 1;
                }
            }
        }
    }
    for (i, (x, &c)) in xbar.iter_mut().zip(&counts).enumerate() {
        *x = if c > 0 { *x / c as f64 } else { fallback[i % width] };
    }

    Ok(AnchorTable {
        xbar: Tensor::new(vec![tw, train.nodes(), train.channels()], xbar)?,
        steps_per_week: tw,
        week_phase_of_origin: phase,
        segments,
    })
}

/// `X^a[i] = xbar[(phase + window_start + i) mod T^w]`, `[T, N, C]`.
pub fn retrieve_anchor(table: &AnchorTable, window_start: usize, len: usize) -> Tensor {
    let width = table.nodes() * table.channels();
    let mut data = Vec::with_capacity(len * width);
    for i in 0..len {
        let tau = table.week_position(window_start + i);
        data.extend_from_slice(&table.xbar.data()[tau * width..(tau + 1) * width]);
    }
    Tensor::new(vec![len, table.nodes(), table.channels()], data).expect("anchor shape")
}
