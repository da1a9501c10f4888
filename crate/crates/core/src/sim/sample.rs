//! OCR-style samples and the attention traces recorded while "reading" them.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Matrix;

pub type TokenId = u32;

/// Role of one prompt position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenRole {
    Text,
    /// Image token carrying the row-major index of its feature-map patch.
    Image(usize),
}

/// Image size in pixels, serialized as `[height, width]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(u32, u32)", into = "(u32, u32)")]
pub struct ImageShape {
    pub height: u32,
    pub width: u32,
}

impl From<(u32, u32)> for ImageShape {
    fn from((height, width): (u32, u32)) -> Self {
        Self { height, width }
    }
}

impl From<ImageShape> for (u32, u32) {
    fn from(s: ImageShape) -> Self {
        (s.height, s.width)
    }
}

/// Feature-map patch grid, serialized as `[rows, cols]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl From<(usize, usize)> for PatchGrid {
    fn from((rows, cols): (usize, usize)) -> Self {
        Self { rows, cols }
    }
}

impl From<PatchGrid> for (usize, usize) {
    fn from(g: PatchGrid) -> Self {
        (g.rows, g.cols)
    }
}

/// Pixel rectangle `[x0, x1] × [y0, y1]`, serialized as `[x0, y0, x1, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn has_area(&self) -> bool {
        self.x1 > self.x0 && self.y1 > self.y0
    }

    pub fn within(&self, shape: ImageShape) -> bool {
        self.x1 <= shape.width && self.y1 <= shape.height
    }
}

impl From<[u32; 4]> for BBox {
    fn from([x0, y0, x1, y1]: [u32; 4]) -> Self {
        Self { x0, y0, x1, y1 }
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

/// Ground-truth `(text, bbox)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcrPair {
    pub text: TokenId,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrSample {
    pub image_shape: ImageShape,
    pub grid: PatchGrid,
    pub pairs: Vec<OcrPair>,
    pub prompt_layout: Vec<TokenRole>,
    /// Tokens the model emits, in order. Each should match one pair's `text`.
    pub output_tokens: Vec<TokenId>,
}

impl OcrSample {
    pub fn prompt_len(&self) -> usize {
        self.prompt_layout.len()
    }

    /// Prompt position of every patch, indexed by patch id.
    pub fn patch_positions(&self) -> Vec<usize> {
        let mut pos = vec![usize::MAX; self.grid.len()];
        for (p, role) in self.prompt_layout.iter().enumerate() {
            if let TokenRole::Image(patch) = *role {
                if patch < pos.len() {
                    pos[patch] = p;
                }
            }
        }
        pos
    }

    /// Ground-truth pair for an emitted token, if any.
    pub fn pair_for(&self, token: TokenId) -> Option<&OcrPair> {
        self.pairs.iter().find(|p| p.text == token)
    }

    pub fn validate(&self) -> Result<()> {
        let images: Vec<usize> = self
            .prompt_layout
            .iter()
            .filter_map(|r| match r {
                TokenRole::Image(p) => Some(*p),
                TokenRole::Text => None,
            })
            .collect();
        if images.len() != self.grid.len() {
            return Err(invalid(format!(
                "grid {}x{} needs {} image tokens, layout has {}",
                self.grid.rows,
                self.grid.cols,
                self.grid.len(),
                images.len()
            )));
        }
        let mut seen = vec![false; self.grid.len()];
        for p in images {
            if p >= seen.len() || std::mem::replace(&mut seen[p], true) {
                return Err(invalid(format!("patch {p} is out of range or repeated")));
            }
        }
        for pair in &self.pairs {
            if !pair.bbox.within(self.image_shape) {
                return Err(invalid(format!(
                    "bbox {:?} exceeds image {}x{}",
                    pair.bbox, self.image_shape.height, self.image_shape.width
                )));
            }
        }
        Ok(())
    }
}

/// Per emitted token, one attention row per `(layer, query head)`.
///
/// `rows[t][layer * heads + head]` covers the `prompt_len + t` positions the
/// `t`-th emitted token can see.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub layers: usize,
    pub heads: usize,
    pub rows: Vec<Vec<Vec<f64>>>,
}

impl AttentionTrace {
    pub fn tokens(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, token: usize, layer: usize, head: usize) -> &[f64] {
        &self.rows[token][layer * self.heads + head]
    }

    pub fn validate(&self, prompt_len: usize) -> Result<()> {
        for (t, per_head) in self.rows.iter().enumerate() {
            if per_head.len() != self.layers * self.heads {
                return Err(Error::DimensionMismatch(format!(
                    "token {t} has {} head rows, expected {}",
                    per_head.len(),
                    self.layers * self.heads
                )));
            }
            for (h, row) in per_head.iter().enumerate() {
                if row.len() != prompt_len + t {
                    return Err(Error::DimensionMismatch(format!(
                        "token {t} head {h}: row length {} != {}",
                        row.len(),
                        prompt_len + t
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Observation-window attention over the prompt: for each flat query head a
/// `w × prompt_len` causally masked matrix whose local row `i` is prompt
/// position `prompt_len - w + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowTrace {
    pub size: usize,
    pub heads: Vec<Matrix>,
}

/// On-disk trace record: one sample with its recorded attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    #[serde(flatten)]
    pub sample: OcrSample,
    pub layers: usize,
    pub heads: usize,
    pub rows: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<WindowRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub size: usize,
    /// `rows[flat_head]` is a `size × prompt_len` matrix as nested arrays.
    pub rows: Vec<Vec<Vec<f64>>>,
}

impl TraceRecord {
    pub fn new(sample: OcrSample, trace: AttentionTrace, window: Option<WindowTrace>) -> Self {
        Self {
            sample,
            layers: trace.layers,
            heads: trace.heads,
            rows: trace.rows,
            window: window.map(|w| WindowRecord {
                size: w.size,
                rows: w.heads.into_iter().map(Matrix::into_rows).collect(),
            }),
        }
    }

    pub fn trace(&self) -> AttentionTrace {
        AttentionTrace {
            layers: self.layers,
            heads: self.heads,
            rows: self.rows.clone(),
        }
    }

    pub fn window_trace(&self) -> Result<Option<WindowTrace>> {
        let Some(w) = &self.window else {
            return Ok(None);
        };
        let heads = w
            .rows
            .iter()
            .map(|m| {
                if m.len() != w.size {
                    return Err(Error::DimensionMismatch(format!(
                        "window matrix has {} rows, expected {}",
                        m.len(),
                        w.size
                    )));
                }
                Matrix::from_rows(m)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Some(WindowTrace { size: w.size, heads }))
    }

    pub fn validate(&self) -> Result<()> {
        self.sample.validate()?;
        self.trace().validate(self.sample.prompt_len())
    }
}
