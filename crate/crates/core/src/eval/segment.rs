//! Patch-level zero-shot segmentation, bicubic logit upsampling and
//! per-class accuracy.

use super::{argmax, class_scores, EvalError};

/// A row-major grid of class indices; [`LabelGrid::IGNORE`] marks unlabeled
/// cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    pub rows: usize,
    pub cols: usize,
    pub labels: Vec<u16>,
}

impl LabelGrid {
    pub const IGNORE: u16 = u16::MAX;

    pub fn new(rows: usize, cols: usize, labels: Vec<u16>) -> Result<Self, EvalError> {
        if labels.len() != rows * cols {
            return Err(EvalError::Shape(format!(
                "{} labels for a {rows}x{cols} grid",
                labels.len()
            )));
        }
        Ok(Self { rows, cols, labels })
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.cols + col]
    }

    /// Nearest-neighbour enlargement: each cell becomes a `factor` x `factor` block.
    pub fn upsample_nearest(&self, factor: usize) -> LabelGrid {
        let (rows, cols) = (self.rows * factor, self.cols * factor);
        let mut labels = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                labels.push(self.get(r / factor, c / factor));
            }
        }
        LabelGrid { rows, cols, labels }
    }
}

/// Per-class scores on a row-major grid, stored cell by cell.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGrid {
    pub rows: usize,
    pub cols: usize,
    pub classes: usize,
    pub data: Vec<f64>,
}

impl LogitGrid {
    pub fn new(rows: usize, cols: usize, classes: usize, data: Vec<f64>) -> Result<Self, EvalError> {
        if data.len() != rows * cols * classes {
            return Err(EvalError::Shape(format!(
                "{} logits for a {rows}x{cols}x{classes} grid",
                data.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            classes,
            data,
        })
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.cols + col) * self.classes;
        &self.data[i..i + self.classes]
    }

    /// Per-cell argmax (lowest class on ties).
    pub fn argmax(&self) -> LabelGrid {
        let labels = self
            .data
            .chunks(self.classes.max(1))
            .map(|c| argmax(c).map_or(LabelGrid::IGNORE, |k| k as u16))
            .collect();
        LabelGrid {
            rows: self.rows,
            cols: self.cols,
            labels,
        }
    }
}

/// Scores every patch against every class and labels it with the argmax.
pub fn segment_patches<S, C>(
    patch_embs: &[S],
    rows: usize,
    cols: usize,
    class_embs: &[C],
) -> Result<(LabelGrid, LogitGrid), EvalError>
where
    S: AsRef<[f64]>,
    C: AsRef<[f64]>,
{
    if class_embs.is_empty() {
        return Err(EvalError::NoClasses);
    }
    if patch_embs.len() != rows * cols {
        return Err(EvalError::Shape(format!(
            "{} patches for a {rows}x{cols} grid",
            patch_embs.len()
        )));
    }
    let mut data = Vec::with_capacity(patch_embs.len() * class_embs.len());
    for p in patch_embs {
        data.extend(class_scores(p.as_ref(), class_embs)?);
    }
    let logits = LogitGrid::new(rows, cols, class_embs.len(), data)?;
    Ok((logits.argmax(), logits))
}

/// Catmull-Rom cubic convolution kernel (a = -0.5).
fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Taps (source index, weight) for output position `out` along an axis of
/// length `n`, sampling the source at `out / factor` with edge clamping.
fn taps(out: usize, factor: usize, n: usize) -> [(usize, f64); 4] {
    let t = out as f64 / factor as f64;
    let base = t.floor();
    let frac = t - base;
    let mut taps = [(0usize, 0.0); 4];
    for (m, tap) in taps.iter_mut().enumerate() {
        let offset = m as i64 - 1;
        let idx = (base as i64 + offset).clamp(0, n as i64 - 1) as usize;
        *tap = (idx, cubic_weight(frac - offset as f64));
    }
    taps
}

/// Bicubic enlargement of every class channel by an integer factor. Output
/// cell `(r, c)` samples the input at `(r / factor, c / factor)`, so input
/// values reappear unchanged at multiples of `factor`.
pub fn upsample_logits(grid: &LogitGrid, factor: usize) -> Result<LogitGrid, EvalError> {
    if factor == 0 {
        return Err(EvalError::Shape("upsampling factor must be at least 1".into()));
    }
    if factor == 1 {
        return Ok(grid.clone());
    }
    let k = grid.classes;
    let (rows, cols) = (grid.rows * factor, grid.cols * factor);

    // Horizontal pass: grid.rows x cols.
    let mut wide = vec![0.0; grid.rows * cols * k];
    for r in 0..grid.rows {
        for c in 0..cols {
            let dst = &mut wide[(r * cols + c) * k..(r * cols + c + 1) * k];
            for (src, w) in taps(c, factor, grid.cols) {
                for (d, v) in dst.iter_mut().zip(grid.cell(r, src)) {
                    *d += w * v;
                }
            }
        }
    }
    // Vertical pass: rows x cols.
    let mut data = vec![0.0; rows * cols * k];
    for r in 0..rows {
        let tr = taps(r, factor, grid.rows);
        for c in 0..cols {
            let dst = &mut data[(r * cols + c) * k..(r * cols + c + 1) * k];
            for &(src, w) in &tr {
                let s = &wide[(src * cols + c) * k..(src * cols + c + 1) * k];
                for (d, v) in dst.iter_mut().zip(s) {
                    *d += w * v;
                }
            }
        }
    }
    LogitGrid::new(rows, cols, k, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassAccuracy {
    /// (class, accuracy) for every class present in the ground truth, ascending.
    pub per_class: Vec<(u16, f64)>,
    pub mean: f64,
}

/// Fraction of each ground-truth class's pixels predicted correctly, averaged
/// over the classes present. Ignored ground-truth pixels do not count.
pub fn per_class_accuracy(pred: &LabelGrid, gt: &LabelGrid) -> Result<ClassAccuracy, EvalError> {
    per_class_accuracy_many(&[(pred, gt)])
}

/// [`per_class_accuracy`] with pixel counts pooled over several grid pairs.
pub fn per_class_accuracy_many(pairs: &[(&LabelGrid, &LabelGrid)]) -> Result<ClassAccuracy, EvalError> {
    let mut total = std::collections::BTreeMap::<u16, (usize, usize)>::new();
    for (pred, gt) in pairs {
        if pred.rows != gt.rows || pred.cols != gt.cols {
            return Err(EvalError::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.rows, pred.cols, gt.rows, gt.cols
            )));
        }
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            if g == LabelGrid::IGNORE {
                continue;
            }
            let e = total.entry(g).or_default();
            e.1 += 1;
            if p == g {
                e.0 += 1;
            }
        }
    }
    if total.is_empty() {
        return Err(EvalError::NoPresentClasses);
    }
    let per_class: Vec<(u16, f64)> = total
        .into_iter()
        .map(|(c, (hit, n))| (c, hit as f64 / n as f64))
        .collect();
    let mean = per_class.iter().map(|(_, a)| a).sum::<f64>() / per_class.len() as f64;
    Ok(ClassAccuracy { per_class, mean })
}
