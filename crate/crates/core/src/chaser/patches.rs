use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::sim::{BBox, ImageShape, PatchGrid};

/// Patches (row-major ids) covered by a bounding box.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchIndexSet {
    pub patches: Vec<usize>,
}

impl PatchIndexSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Prompt positions of the covered patches, ascending.
    ///
    /// `patch_positions[p]` is the prompt position of patch `p`.
    pub fn positions(&self, patch_positions: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .patches
            .iter()
            .filter_map(|&p| patch_positions.get(p).copied())
            .filter(|&pos| pos != usize::MAX)
            .collect();
        out.sort_unstable();
        out
    }
}

/// Maps a pixel bbox onto the uniformly tiled patch grid.
///
/// A patch is covered when its pixel cell and the box share positive area;
/// touching along an edge does not count. Cell `c` of `n` along an axis of
/// length `len` spans `[c·len/n, (c+1)·len/n)`, compared in exact integer
/// arithmetic.
pub fn match_bbox_to_patches(bbox: BBox, image: ImageShape, grid: PatchGrid) -> Result<PatchIndexSet> {
    if grid.rows == 0 || grid.cols == 0 {
        return Err(invalid("patch grid must be non-empty"));
    }
    if !bbox.has_area() {
        return Err(invalid(format!("degenerate bbox {bbox:?}")));
    }
    if !bbox.within(image) {
        return Err(invalid(format!(
            "bbox {bbox:?} exceeds image {}x{}",
            image.height, image.width
        )));
    }
    let cols = covered_cells(bbox.x0, bbox.x1, image.width, grid.cols);
    let rows = covered_cells(bbox.y0, bbox.y1, image.height, grid.rows);
    let patches = rows
        .flat_map(|r| cols.clone().map(move |c| r * grid.cols + c))
        .collect();
    Ok(PatchIndexSet { patches })
}

/// Cells along one axis overlapping `[lo, hi]` with positive length.
fn covered_cells(lo: u32, hi: u32, len: u32, n: usize) -> std::ops::Range<usize> {
    let (lo, hi, len, n64) = (lo as u64, hi as u64, len as u64, n as u64);
    // c·len < hi·n  and  (c+1)·len > lo·n
    let first = (lo * n64) / len;
    let last_exclusive = (hi * n64).div_ceil(len);
    (first as usize)..(last_exclusive.min(n64) as usize)
}
