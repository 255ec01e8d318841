//! Valence-arousal annotations and the 10x10 discretization of the affect
//! square `[-1, 1]^2` into 0.2-wide cells.
//!
//! Cells are half-open `[lo, lo + 0.2)` on both axes except the last row and
//! column, which also take the `+1` edge. Columns index valence, rows index
//! arousal.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GRID_SIZE: usize = 10;
pub const CELL_WIDTH: f64 = 0.2;

/// Quotients this close to an integer are treated as lying on that cell edge,
/// so decimal edges like `-0.4` land in the cell they bound from below.
const EDGE_SNAP: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub frame_id: String,
    pub sequence_id: String,
    pub neutral_frame_id: String,
    pub valence: f64,
    pub arousal: f64,
}

impl Annotation {
    /// Subject label: the part of `sequence_id` before the first `/`, or the
    /// whole id when there is no separator.
    /// A frame that is its own neutral reference.
    pub fn is_neutral(&self) -> bool {
        self.frame_id == self.neutral_frame_id
    }

    pub fn subject_id(&self) -> &str {
        self.sequence_id
            .split_once('/')
            .map_or(self.sequence_id.as_str(), |(s, _)| s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    annotations: Vec<Annotation>,
    index: HashMap<String, usize>,
}

impl AnnotationSet {
    pub fn new(annotations: Vec<Annotation>) -> Result<Self> {
        let mut index = HashMap::with_capacity(annotations.len());
        for (i, a) in annotations.iter().enumerate() {
            check_unit_range("valence", a.valence)?;
            check_unit_range("arousal", a.arousal)?;
            if index.insert(a.frame_id.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!(
                    "duplicate frame id {:?}",
                    a.frame_id
                )));
            }
        }
        for a in &annotations {
            if !index.contains_key(&a.neutral_frame_id) {
                return Err(Error::InvalidInput(format!(
                    "frame {:?} names neutral frame {:?} which is not annotated",
                    a.frame_id, a.neutral_frame_id
                )));
            }
        }
        Ok(AnnotationSet { annotations, index })
    }

    /// The frames that are not their own neutral. Their neutral references
    /// are kept as-is even though those frames are dropped.
    pub fn expressive(&self) -> AnnotationSet {
        let annotations: Vec<Annotation> = self.annotations.iter().filter(|a| !a.is_neutral()).cloned().collect();
        let index = annotations
            .iter()
            .enumerate()
            .map(|(i, a)| (a.frame_id.clone(), i))
            .collect();
        AnnotationSet { annotations, index }
    }

    pub fn empty() -> Self {
        AnnotationSet {
            annotations: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn get(&self, frame_id: &str) -> Option<&Annotation> {
        self.index.get(frame_id).map(|&i| &self.annotations[i])
    }

    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    /// Reads the `frame_id,sequence_id,neutral_frame_id,valence,arousal` CSV.
    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&bytes, &path.display().to_string())
    }

    pub fn from_csv(bytes: &[u8], source: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes);
        let headers = reader
            .headers()
            .map_err(|e| Error::parse(source, e.to_string()))?
            .clone();
        let expected = ["frame_id", "sequence_id", "neutral_frame_id", "valence", "arousal"];
        if headers.iter().ne(expected) {
            return Err(Error::parse(
                source,
                format!("expected header {}, got {}", expected.join(","), headers.iter().collect::<Vec<_>>().join(",")),
            ));
        }
        let annotations = reader
            .deserialize::<Annotation>()
            .enumerate()
            .map(|(i, r)| r.map_err(|e| Error::parse(format!("{source}: row {}", i + 1), e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        Self::new(annotations)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("frame_id,sequence_id,neutral_frame_id,valence,arousal\n");
        for a in &self.annotations {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                a.frame_id, a.sequence_id, a.neutral_frame_id, a.valence, a.arousal
            );
        }
        out
    }
}

fn check_unit_range(field: &'static str, value: f64) -> Result<()> {
    if !(-1.0..=1.0).contains(&value) {
        return Err(Error::OutOfRange { field, value });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellIndex {
    /// Arousal axis, 0 at `a = -1`.
    pub row: usize,
    /// Valence axis, 0 at `v = -1`.
    pub col: usize,
}

impl CellIndex {
    pub fn new(row: usize, col: usize) -> Result<Self> {
        if row >= GRID_SIZE || col >= GRID_SIZE {
            return Err(Error::InvalidInput(format!(
                "cell ({row}, {col}) outside the {GRID_SIZE}x{GRID_SIZE} grid"
            )));
        }
        Ok(CellIndex { row, col })
    }

    pub fn all() -> impl Iterator<Item = CellIndex> {
        (0..GRID_SIZE).flat_map(|row| (0..GRID_SIZE).map(move |col| CellIndex { row, col }))
    }

    /// `(valence, arousal)` of the cell center.
    pub fn center(&self) -> (f64, f64) {
        (
            -1.0 + CELL_WIDTH * (self.col as f64 + 0.5),
            -1.0 + CELL_WIDTH * (self.row as f64 + 0.5),
        )
    }

    /// Closed box `(v_lo, v_hi, a_lo, a_hi)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        (
            -1.0 + CELL_WIDTH * self.col as f64,
            -1.0 + CELL_WIDTH * (self.col + 1) as f64,
            -1.0 + CELL_WIDTH * self.row as f64,
            -1.0 + CELL_WIDTH * (self.row + 1) as f64,
        )
    }

    /// Whether `(v, a)` lies in the closed cell box, with slack `tol`.
    pub fn contains(&self, valence: f64, arousal: f64, tol: f64) -> bool {
        let (v0, v1, a0, a1) = self.bounds();
        valence >= v0 - tol && valence <= v1 + tol && arousal >= a0 - tol && arousal <= a1 + tol
    }

    fn linear(&self) -> usize {
        self.row * GRID_SIZE + self.col
    }
}

fn axis_bin(x: f64) -> usize {
    let q = (x + 1.0) / CELL_WIDTH;
    let nearest = q.round();
    let q = if (q - nearest).abs() < EDGE_SNAP { nearest } else { q.floor() };
    (q.max(0.0) as usize).min(GRID_SIZE - 1)
}

pub fn cell_of(valence: f64, arousal: f64) -> Result<CellIndex> {
    check_unit_range("valence", valence)?;
    check_unit_range("arousal", arousal)?;
    Ok(CellIndex {
        row: axis_bin(arousal),
        col: axis_bin(valence),
    })
}

/// The 100-cell partition of an annotation set.
#[derive(Debug, Clone)]
pub struct VaGrid {
    cells: Vec<Vec<String>>,
    source: AnnotationSet,
}

impl VaGrid {
    pub fn build(set: AnnotationSet) -> Self {
        let mut cells = vec![Vec::new(); GRID_SIZE * GRID_SIZE];
        for a in set.annotations() {
            // ranges were validated when the set was built
            let cell = cell_of(a.valence, a.arousal).expect("validated annotation");
            cells[cell.linear()].push(a.frame_id.clone());
        }
        VaGrid { cells, source: set }
    }

    pub fn source(&self) -> &AnnotationSet {
        &self.source
    }

    pub fn members(&self, cell: CellIndex) -> &[String] {
        &self.cells[cell.linear()]
    }

    pub fn member_annotations(&self, cell: CellIndex) -> impl Iterator<Item = &Annotation> {
        self.members(cell)
            .iter()
            .map(|id| self.source.get(id).expect("grid members come from the source set"))
    }

    pub fn is_empty_cell(&self, cell: CellIndex) -> bool {
        self.cells[cell.linear()].is_empty()
    }

    pub fn non_empty_cells(&self) -> impl Iterator<Item = CellIndex> + '_ {
        CellIndex::all().filter(|c| !self.is_empty_cell(*c))
    }

    /// Occupancy counts indexed `[row][col]`.
    pub fn histogram(&self) -> [[usize; GRID_SIZE]; GRID_SIZE] {
        let mut counts = [[0; GRID_SIZE]; GRID_SIZE];
        for cell in CellIndex::all() {
            counts[cell.row][cell.col] = self.members(cell).len();
        }
        counts
    }

    /// Componentwise median of the cell's labels (mean of the middle pair
    /// for even counts).
    pub fn median_va(&self, cell: CellIndex) -> Result<(f64, f64)> {
        if self.is_empty_cell(cell) {
            return Err(Error::EmptyCell {
                row: cell.row,
                col: cell.col,
            });
        }
        let (vs, as_): (Vec<f64>, Vec<f64>) = self
            .member_annotations(cell)
            .map(|a| (a.valence, a.arousal))
            .unzip();
        Ok((median(vs), median(as_)))
    }

    /// Closest populated cell by center distance; ties go to the smaller
    /// `(row, col)`.
    pub fn nearest_nonempty_cell(&self, cell: CellIndex) -> Result<CellIndex> {
        if !self.is_empty_cell(cell) {
            return Ok(cell);
        }
        // squared distance in cell units is an exact integer
        let dist2 = |c: &CellIndex| {
            let dr = c.row as i64 - cell.row as i64;
            let dc = c.col as i64 - cell.col as i64;
            dr * dr + dc * dc
        };
        self.non_empty_cells()
            .min_by_key(|c| (dist2(c), c.row, c.col))
            .ok_or(Error::EmptyGrid)
    }
}

pub(crate) fn median(mut values: Vec<f64>) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}
