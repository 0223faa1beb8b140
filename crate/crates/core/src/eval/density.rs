//! Density maps: cosine score of a text query over a grid of tile embeddings.

use std::fmt::Write as _;

use super::{class_scores, EvalError};
use crate::corpus::RasterGeometry;

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    pub geometry: RasterGeometry,
    /// Row-major scores in `[-1, 1]`, north row first.
    pub scores: Vec<f32>,
}

/// Scores every grid cell's embedding against the query.
pub fn density_map<S: AsRef<[f64]>>(
    geometry: RasterGeometry,
    cell_embs: &[S],
    query: &[f64],
) -> Result<DensityMap, EvalError> {
    if cell_embs.len() != geometry.n_cells() {
        return Err(EvalError::Shape(format!(
            "{} embeddings for a {}x{} grid",
            cell_embs.len(),
            geometry.rows,
            geometry.cols
        )));
    }
    let scores = cell_embs
        .iter()
        .map(|e| {
            let s = class_scores(e.as_ref(), &[query])?[0];
            Ok(s.clamp(-1.0, 1.0) as f32)
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(DensityMap { geometry, scores })
}

impl DensityMap {
    pub fn get(&self, row: u32, col: u32) -> f32 {
        self.scores[(row * self.geometry.cols + col) as usize]
    }

    /// Plain-text grid: a header of `key value` lines followed by one line of
    /// whitespace-separated scores per row.
    pub fn to_text(&self) -> String {
        let g = &self.geometry;
        let mut s = String::new();
        let _ = writeln!(s, "width {}", g.cols);
        let _ = writeln!(s, "height {}", g.rows);
        let _ = writeln!(s, "origin_lat {}", g.origin.lat());
        let _ = writeln!(s, "origin_lon {}", g.origin.lon());
        let _ = writeln!(s, "cell_m {}", g.cell_m);
        for row in self.scores.chunks(g.cols as usize) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    /// Binary 8-bit portable graymap mapping `-1 -> 0` and `1 -> 255`.
    pub fn to_pgm(&self) -> Vec<u8> {
        let g = &self.geometry;
        let mut out = format!("P5\n{} {}\n255\n", g.cols, g.rows).into_bytes();
        out.extend(
            self.scores
                .iter()
                .map(|&v| (((v as f64 + 1.0) * 0.5 * 255.0).round()).clamp(0.0, 255.0) as u8),
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::GeoPoint;

    fn geom(rows: u32, cols: u32) -> RasterGeometry {
        RasterGeometry::new(GeoPoint::new(10.0, 20.0).unwrap(), 100.0, rows, cols).unwrap()
    }

    #[test]
    fn matching_cell_scores_one() {
        let embs = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0]];
        let m = density_map(geom(2, 2), &embs, &[1.0, 0.0]).unwrap();
        assert_eq!(m.scores, vec![1.0, 0.0, -1.0, 0.0]);
        assert_eq!(m.get(1, 0), -1.0);
        let pgm = m.to_pgm();
        assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&pgm[pgm.len() - 4..], &[255, 128, 0, 128]);
    }

    #[test]
    fn orthogonal_cells_score_zero() {
        let embs = vec![vec![0.0, 1.0, 0.0]; 6];
        let m = density_map(geom(2, 3), &embs, &[1.0, 0.0, 0.0]).unwrap();
        assert!(m.scores.iter().all(|&s| s == 0.0));
        let text = m.to_text();
        assert!(text.starts_with("width 3\nheight 2\n"));
        assert_eq!(text.lines().count(), 7);
        assert!(density_map(geom(2, 2), &embs, &[1.0, 0.0, 0.0]).is_err());
    }
}
