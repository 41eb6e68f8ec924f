//! Per-patch score maps as `x,y,score` CSV and plain (P2) graymaps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{validate_patch_grid, EmbeddingTable};
use crate::error::{GlatError, Result};

pub const HEATMAP_HEADER: &str = "x,y,score";
pub const PGM_MAXVAL: u32 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    /// `(s - min) / (max - min)`; a zero range maps everything to 0.
    #[default]
    MinMax,
    /// Scores are clamped to `[0, 1]` as given.
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapArtifact {
    pub width: u32,
    pub height: u32,
    /// Row-major, `None` where the grid has no patch.
    pub cells: Vec<Option<f64>>,
    pub normalization: Normalization,
}

impl HeatmapArtifact {
    /// `scores[i]` belongs to `table.records()[i]`.
    pub fn new(table: &EmbeddingTable, scores: &[f64], normalization: Normalization) -> Result<Self> {
        if scores.len() != table.len() {
            return Err(GlatError::dims(format!("{} scores for {} patches", scores.len(), table.len())));
        }
        if let Some(bad) = scores.iter().position(|s| !s.is_finite()) {
            return Err(GlatError::invalid(format!("non-finite score for patch {}", table.records()[bad].id)));
        }
        let grid = validate_patch_grid(table)?;
        let mut cells = vec![None; grid.width as usize * grid.height as usize];
        for (r, &s) in table.records().iter().zip(scores) {
            cells[r.y as usize * grid.width as usize + r.x as usize] = Some(s);
        }
        Ok(Self {
            width: grid.width,
            height: grid.height,
            cells,
            normalization,
        })
    }

    /// Gray levels in `0..=255`, missing cells 0.
    pub fn pixels(&self) -> Vec<u32> {
        let present = self.cells.iter().flatten();
        let lo = present.clone().copied().fold(f64::INFINITY, f64::min);
        let hi = present.copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        self.cells
            .iter()
            .map(|c| match c {
                None => 0,
                Some(s) => {
                    let unit = match self.normalization {
                        Normalization::MinMax if range > 0.0 => (s - lo) / range,
                        Normalization::MinMax => 0.0,
                        Normalization::None => s.clamp(0.0, 1.0),
                    };
                    (unit * PGM_MAXVAL as f64).round() as u32
                }
            })
            .collect()
    }

    pub fn to_pgm(&self) -> String {
        let mut out = format!("P2\n{} {}\n{PGM_MAXVAL}\n", self.width, self.height);
        let px = self.pixels();
        for row in px.chunks(self.width.max(1) as usize) {
            let line: Vec<String> = row.iter().map(u32::to_string).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(HEATMAP_HEADER);
        out.push('\n');
        for (i, c) in self.cells.iter().enumerate() {
            if let Some(s) = c {
                let w = self.width as usize;
                let _ = writeln!(out, "{},{},{s:?}", i % w, i / w);
            }
        }
        out
    }
}

/// Writes `<stem>.csv` and `<stem>.pgm`; returns both paths.
pub fn heatmap_export(scores: &[f64], table: &EmbeddingTable, stem: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let map = HeatmapArtifact::new(table, scores, Normalization::MinMax)?;
    let stem = stem.as_ref();
    let csv = stem.with_extension("csv");
    let pgm = stem.with_extension("pgm");
    fs::write(&csv, map.to_csv()).map_err(|e| GlatError::io(&csv, e))?;
    fs::write(&pgm, map.to_pgm()).map_err(|e| GlatError::io(&pgm, e))?;
    Ok((csv, pgm))
}

/// Parses a heatmap CSV into `(x, y, score)` triples.
pub fn parse_heatmap_csv(text: &str) -> Result<Vec<(u32, u32, f64)>> {
    let mut lines = text.lines();
    if lines.next() != Some(HEATMAP_HEADER) {
        return Err(GlatError::parse(1, "malformed heatmap header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || GlatError::parse(i + 2, "malformed heatmap row");
            let mut f = line.split(',');
            let x = f.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let y = f.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let s = f.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            if f.next().is_some() {
                return Err(bad());
            }
            Ok((x, y, s))
        })
        .collect()
}

/// Parses a P2 graymap into `(width, height, pixels)`.
pub fn parse_pgm(text: &str) -> Result<(u32, u32, Vec<u32>)> {
    let mut tokens = text.split_whitespace();
    if tokens.next() != Some("P2") {
        return Err(GlatError::parse(1, "not a P2 graymap"));
    }
    let mut num = || -> Result<u32> {
        tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| GlatError::invalid("truncated graymap"))
    };
    let (w, h, _max) = (num()?, num()?, num()?);
    let px = (0..w as usize * h as usize).map(|_| num()).collect::<Result<_>>()?;
    Ok((w, h, px))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PatchRecord;
    use crate::rng::SplitMix64;

    fn grid(w: u32, h: u32, skip: &[(u32, u32)]) -> EmbeddingTable {
        let mut records = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !skip.contains(&(x, y)) {
                    records.push(PatchRecord { id: (y * w + x) as u64, x, y, embedding: vec![0.0] });
                }
            }
        }
        EmbeddingTable::new("g", 1, records).unwrap()
    }

    #[test]
    fn two_by_two_arithmetic() {
        let map = HeatmapArtifact::new(&grid(2, 2, &[]), &[0.0, 1.0, 0.5, 0.25], Normalization::MinMax).unwrap();
        assert_eq!(map.pixels(), vec![0, 255, 128, 64]);
        assert_eq!(map.to_pgm(), "P2\n2 2\n255\n0 255\n128 64\n");
    }

    #[test]
    fn degenerate_range_and_missing_cells() {
        let t = grid(3, 2, &[(1, 0)]);
        let map = HeatmapArtifact::new(&t, &[0.7; 5], Normalization::MinMax).unwrap();
        assert_eq!(map.pixels(), vec![0; 6]);
        let map = HeatmapArtifact::new(&t, &[0.0, 1.0, 1.0, 1.0, 1.0], Normalization::MinMax).unwrap();
        assert_eq!(map.pixels(), vec![0, 0, 255, 255, 255, 255]);
        assert!(map.to_csv().lines().count() == 6);
    }

    #[test]
    fn score_count_must_match() {
        let err = HeatmapArtifact::new(&grid(2, 2, &[]), &[0.0; 3], Normalization::MinMax).unwrap_err();
        assert!(matches!(err, GlatError::DimensionMismatch(_)));
        assert!(HeatmapArtifact::new(&grid(1, 1, &[]), &[f64::NAN], Normalization::MinMax).is_err());
    }

    #[test]
    fn export_round_trip_and_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let t = grid(5, 3, &[(4, 2), (0, 1)]);
        let mut rng = SplitMix64::new(8);
        let scores: Vec<f64> = (0..t.len()).map(|_| rng.next_f64() * 1e-3).collect();
        let (csv, pgm) = heatmap_export(&scores, &t, dir.path().join("slide")).unwrap();
        let rows = parse_heatmap_csv(&fs::read_to_string(csv).unwrap()).unwrap();
        for ((x, y, s), (r, want)) in rows.iter().zip(t.records().iter().zip(&scores)) {
            assert_eq!((*x, *y), (r.x, r.y));
            assert!((s - want).abs() < 1e-9);
        }
        let (w, h, px) = parse_pgm(&fs::read_to_string(pgm).unwrap()).unwrap();
        let g = validate_patch_grid(&t).unwrap();
        assert_eq!((w, h), (g.width, g.height));
        assert_eq!(px.len(), 15);
    }
}
