//! Stage 4: sliding-window outlier rejection on the label image.
//!
//! A 3x4 kernel (zeros / ones / zeros) is slid over the image with dynamic
//! cells as ones. The window score is the count of pixelwise XNOR matches;
//! scores strictly above the threshold demote the window's anchor cell to
//! static. Columns wrap (the scan is a full revolution); windows that
//! would overhang the top or bottom laser rows are skipped. Everything is
//! scored against a frozen copy of the input so demotions never cascade
//! within a pass.

use crate::scan::{Label, LabelImage};

/// Binary scoring kernel with a fixed demotion anchor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterKernel {
    pattern: Vec<Vec<bool>>,
    anchor: (usize, usize),
}

impl FilterKernel {
    /// The 3x4 single-row kernel with the anchor on its second one-cell.
    pub fn standard() -> FilterKernel {
        FilterKernel {
            pattern: vec![
                vec![false, false, false, false],
                vec![true, true, true, true],
                vec![false, false, false, false],
            ],
            anchor: (1, 1),
        }
    }

    pub fn new(pattern: Vec<Vec<bool>>, anchor: (usize, usize)) -> Option<FilterKernel> {
        let rows = pattern.len();
        let cols = pattern.first()?.len();
        if rows == 0 || cols == 0 || pattern.iter().any(|r| r.len() != cols) {
            return None;
        }
        if anchor.0 >= rows || anchor.1 >= cols || !pattern[anchor.0][anchor.1] {
            return None; // anchor must sit on a one-cell
        }
        Some(FilterKernel { pattern, anchor })
    }

    pub fn rows(&self) -> usize {
        self.pattern.len()
    }

    pub fn cols(&self) -> usize {
        self.pattern[0].len()
    }
}

impl Default for FilterKernel {
    fn default() -> Self {
        FilterKernel::standard()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterConfig {
    /// Window scores strictly above this demote the anchor.
    pub score_threshold: u32,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { score_threshold: 10 }
    }
}

/// XNOR window score with the anchor at `(r, c)`. Invalid cells count as
/// static (zero) pixels.
fn window_score(image: &LabelImage, kernel: &FilterKernel, r: usize, c: usize) -> u32 {
    let cols = image.cols;
    let mut score = 0u32;
    for (ki, krow) in kernel.pattern.iter().enumerate() {
        let row = r + ki - kernel.anchor.0; // caller guarantees in range
        for (kj, &kval) in krow.iter().enumerate() {
            let col = (c + cols + kj - kernel.anchor.1) % cols;
            let pixel = image.get(row, col) == Label::Dynamic;
            if pixel == kval {
                score += 1;
            }
        }
    }
    score
}

/// One filter pass over a frozen copy of the image.
pub fn box_filter(image: &LabelImage, kernel: &FilterKernel, cfg: &FilterConfig) -> LabelImage {
    assert!(image.rows >= kernel.rows(), "image must fit the kernel rows");
    let mut out = image.clone();
    let top = kernel.anchor.0;
    let bottom = image.rows - (kernel.rows() - 1 - kernel.anchor.0);
    for r in top..bottom {
        for c in 0..image.cols {
            if image.get(r, c) != Label::Dynamic {
                continue; // only dynamic anchors can be demoted
            }
            if window_score(image, kernel, r, c) > cfg.score_threshold {
                out.set(r, c, Label::Static);
            }
        }
    }
    out
}
