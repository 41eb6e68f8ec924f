//! Patch embedding tables, grade labels, bags, and the versioned text format.
//!
//! File layout (LF line endings, no spaces inside rows):
//!
//! ```text
//! #glat-embeddings v1 d=<d> patch_px=<int> slide=<slide_id>
//! <id>,<x>,<y>,<v0>,...,<v{d-1}>
//! ```
//!
//! `patch_px` and `slide` are optional on read (defaults 224 and the empty
//! string). Values are written in shortest round-trip decimal so a reload is
//! bit-exact.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{GlatError, Result};
use crate::NUM_CLASSES;

pub const EMBEDDING_MAGIC: &str = "#glat-embeddings";
pub const EMBEDDING_VERSION: &str = "v1";
pub const DEFAULT_PATCH_PX: u32 = 224;

#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub id: u64,
    pub x: u32,
    pub y: u32,
    pub embedding: Vec<f64>,
}

/// Validated, id-sorted collection of patch embeddings for one slide.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    slide_id: String,
    d: usize,
    patch_px: u32,
    records: Vec<PatchRecord>,
}

impl EmbeddingTable {
    /// Validates the records and sorts them by id.
    pub fn new(slide_id: impl Into<String>, d: usize, records: Vec<PatchRecord>) -> Result<Self> {
        Self::with_patch_px(slide_id, d, DEFAULT_PATCH_PX, records)
    }

    pub fn with_patch_px(
        slide_id: impl Into<String>,
        d: usize,
        patch_px: u32,
        mut records: Vec<PatchRecord>,
    ) -> Result<Self> {
        let slide_id = slide_id.into();
        check_slide_id(&slide_id)?;
        if d == 0 {
            return Err(GlatError::invalid("embedding dimension d must be >= 1"));
        }
        for r in &records {
            if r.embedding.len() != d {
                return Err(GlatError::dims(format!(
                    "patch {} has {} values, expected d={d}",
                    r.id,
                    r.embedding.len()
                )));
            }
            if !r.embedding.iter().all(|v| v.is_finite()) {
                return Err(GlatError::invalid(format!("patch {} has a non-finite value", r.id)));
            }
        }
        records.sort_by_key(|r| r.id);
        if let Some(w) = records.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(GlatError::invalid(format!("duplicate id {}", w[0].id)));
        }
        Ok(Self {
            slide_id,
            d,
            patch_px,
            records,
        })
    }

    pub fn slide_id(&self) -> &str {
        &self.slide_id
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn patch_px(&self) -> u32 {
        self.patch_px
    }

    pub fn records(&self) -> &[PatchRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.id).collect()
    }

    pub fn get(&self, id: u64) -> Option<&PatchRecord> {
        self.records
            .binary_search_by_key(&id, |r| r.id)
            .ok()
            .map(|i| &self.records[i])
    }

    /// N×d matrix of embeddings in id order.
    pub fn embedding_matrix(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.len(), self.d));
        for (mut row, r) in m.rows_mut().into_iter().zip(&self.records) {
            row.iter_mut().zip(&r.embedding).for_each(|(o, v)| *o = *v);
        }
        m
    }

    /// Sub-table holding only `ids` (any order; result is id-sorted).
    pub fn restrict(&self, ids: &[u64]) -> Result<Self> {
        let records = ids
            .iter()
            .map(|&id| {
                self.get(id)
                    .cloned()
                    .ok_or_else(|| GlatError::invalid(format!("unknown patch id {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::with_patch_px(self.slide_id.clone(), self.d, self.patch_px, records)
    }

    /// Same ids and coordinates with replaced embeddings (rows in id order).
    pub fn with_embeddings(&self, embeddings: &Array2<f64>) -> Result<Self> {
        if embeddings.nrows() != self.len() {
            return Err(GlatError::dims(format!(
                "{} embedding rows for {} patches",
                embeddings.nrows(),
                self.len()
            )));
        }
        let records = self
            .records
            .iter()
            .zip(embeddings.rows())
            .map(|(r, row)| PatchRecord {
                id: r.id,
                x: r.x,
                y: r.y,
                embedding: row.to_vec(),
            })
            .collect();
        Self::with_patch_px(self.slide_id.clone(), embeddings.ncols(), self.patch_px, records)
    }
}

fn check_slide_id(slide_id: &str) -> Result<()> {
    if slide_id.chars().any(char::is_whitespace) {
        return Err(GlatError::invalid(format!(
            "slide id {slide_id:?} must not contain whitespace"
        )));
    }
    Ok(())
}

/// Slide-level grade: 0 normal (ISUP 1-2), 1 grade 3, 2 grade 4, 3 grade 5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GradeLabel(u8);

impl GradeLabel {
    pub fn new(class_index: usize) -> Result<Self> {
        if class_index >= NUM_CLASSES {
            return Err(GlatError::invalid(format!(
                "class index {class_index} outside [0, {}]",
                NUM_CLASSES - 1
            )));
        }
        Ok(Self(class_index as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// One labeled training sample: the selected patches of a slide.
#[derive(Debug, Clone, PartialEq)]
pub struct WsiBag {
    pub slide_id: String,
    pub label: GradeLabel,
    pub patches: EmbeddingTable,
}

impl WsiBag {
    pub fn new(label: GradeLabel, patches: EmbeddingTable) -> Result<Self> {
        if patches.is_empty() {
            return Err(GlatError::invalid(format!(
                "bag for slide {} has no patches",
                patches.slide_id()
            )));
        }
        Ok(Self {
            slide_id: patches.slide_id().to_string(),
            label,
            patches,
        })
    }
}

/// Serializes a table to the v1 text format.
pub fn format_embedding_table(table: &EmbeddingTable) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{EMBEDDING_MAGIC} {EMBEDDING_VERSION} d={} patch_px={} slide={}",
        table.d, table.patch_px, table.slide_id
    );
    for r in &table.records {
        let _ = write!(out, "{},{},{}", r.id, r.x, r.y);
        for v in &r.embedding {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    out
}

/// Parses the v1 text format. Errors carry 1-based line numbers.
pub fn parse_embedding_table(text: &str) -> Result<EmbeddingTable> {
    let mut lines = text.split('\n');
    let header = lines
        .next()
        .filter(|h| !h.is_empty())
        .ok_or_else(|| GlatError::parse(1, "missing header"))?;
    let (d, patch_px, slide_id) = parse_header(header)?;

    let mut records = Vec::new();
    let mut seen_ids = HashSet::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 3 {
            return Err(GlatError::parse(
                line_no,
                format!("row has {} fields, expected {}", fields.len(), d + 3),
            ));
        }
        let id: u64 = parse_field(fields[0], line_no, "id")?;
        let x: u32 = parse_field(fields[1], line_no, "x")?;
        let y: u32 = parse_field(fields[2], line_no, "y")?;
        let mut embedding = Vec::with_capacity(d);
        for f in &fields[3..] {
            let v: f64 = parse_field(f, line_no, "value")?;
            if !v.is_finite() {
                return Err(GlatError::parse(line_no, "non-finite value"));
            }
            embedding.push(v);
        }
        if !seen_ids.insert(id) {
            return Err(GlatError::parse(line_no, "duplicate id"));
        }
        records.push(PatchRecord { id, x, y, embedding });
    }
    EmbeddingTable::with_patch_px(slide_id, d, patch_px, records)
}

fn parse_field<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| GlatError::parse(line, format!("malformed {what} {s:?}")))
}

fn parse_header(header: &str) -> Result<(usize, u32, String)> {
    let mut tokens = header.split(' ');
    if tokens.next() != Some(EMBEDDING_MAGIC) {
        return Err(GlatError::parse(1, "malformed header: missing #glat-embeddings"));
    }
    if tokens.next() != Some(EMBEDDING_VERSION) {
        return Err(GlatError::parse(1, "malformed header: unsupported version"));
    }
    let mut d = None;
    let mut patch_px = DEFAULT_PATCH_PX;
    let mut slide = String::new();
    for tok in tokens.filter(|t| !t.is_empty()) {
        let (key, value) = tok
            .split_once('=')
            .ok_or_else(|| GlatError::parse(1, format!("malformed header field {tok:?}")))?;
        match key {
            "d" => {
                let v: usize = parse_field(value, 1, "header d")?;
                if v == 0 {
                    return Err(GlatError::parse(1, "malformed header: d must be >= 1"));
                }
                d = Some(v);
            }
            "patch_px" => patch_px = parse_field(value, 1, "header patch_px")?,
            "slide" => slide = value.to_string(),
            _ => {
                return Err(GlatError::parse(1, format!("malformed header: unknown key {key:?}")))
            }
        }
    }
    let d = d.ok_or_else(|| GlatError::parse(1, "malformed header: missing d"))?;
    Ok((d, patch_px, slide))
}

pub fn load_embedding_table(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| GlatError::io(path, e))?;
    parse_embedding_table(&text)
}

pub fn save_embedding_table(table: &EmbeddingTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_embedding_table(table)).map_err(|e| GlatError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridReport {
    pub width: u32,
    pub height: u32,
    pub coverage: f64,
}

/// Grid extent and occupancy. An empty table reports a 0×0 grid with zero
/// coverage.
pub fn validate_patch_grid(table: &EmbeddingTable) -> Result<GridReport> {
    let mut seen = HashSet::with_capacity(table.len());
    let (mut width, mut height) = (0u32, 0u32);
    for r in &table.records {
        if !seen.insert((r.x, r.y)) {
            return Err(GlatError::invalid(format!(
                "duplicate coordinate ({}, {}) at patch {}",
                r.x, r.y, r.id
            )));
        }
        width = width.max(r.x + 1);
        height = height.max(r.y + 1);
    }
    let cells = width as f64 * height as f64;
    let coverage = if cells > 0.0 { table.len() as f64 / cells } else { 0.0 };
    Ok(GridReport {
        width,
        height,
        coverage,
    })
}

pub const LABELS_FILE: &str = "labels.csv";
pub const LABELS_HEADER: &str = "slide_id,label";

/// Writes `labels.csv` plus one `<slide_id>.emb` per bag into `dir`.
pub fn save_dataset(dir: impl AsRef<Path>, bags: &[WsiBag]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| GlatError::io(dir, e))?;
    let mut labels = String::from(LABELS_HEADER);
    labels.push('\n');
    for bag in bags {
        let id = bag.patches.slide_id();
        if id.is_empty() || id.contains(['/', '\\', ',']) {
            return Err(GlatError::invalid(format!("slide id {id:?} cannot name a file")));
        }
        save_embedding_table(&bag.patches, dir.join(format!("{id}.emb")))?;
        let _ = writeln!(labels, "{id},{}", bag.label.index());
    }
    let path = dir.join(LABELS_FILE);
    fs::write(&path, labels).map_err(|e| GlatError::io(path, e))
}

/// Loads bags in `labels.csv` order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<WsiBag>> {
    let dir = dir.as_ref();
    let path = dir.join(LABELS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| GlatError::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(LABELS_HEADER) {
        return Err(GlatError::parse(1, "malformed labels header"));
    }
    let mut bags = Vec::new();
    for (i, line) in lines.enumerate() {
        let (id, label) = line
            .split_once(',')
            .ok_or_else(|| GlatError::parse(i + 2, "malformed labels row"))?;
        let label: usize = label.parse().map_err(|_| GlatError::parse(i + 2, "malformed label"))?;
        let table = load_embedding_table(dir.join(format!("{id}.emb")))?;
        if table.slide_id() != id {
            return Err(GlatError::invalid(format!("{id}.emb declares slide {:?}", table.slide_id())));
        }
        bags.push(WsiBag::new(GradeLabel::new(label)?, table)?);
    }
    Ok(bags)
}
