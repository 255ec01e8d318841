//! Fixed-topology triangle meshes, per-vertex deformation fields and the
//! OBJ subset used for gallery files.
//!
//! All meshes of a gallery are assumed to be in dense correspondence: the
//! same vertex count and the same face list. Deformation fields are stored
//! vertex-major with x, y, z interleaved, so a field for an `n`-vertex mesh
//! has exactly `3n` entries.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];
pub type Triangle = [usize; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<Point3>,
    faces: Vec<Triangle>,
}

impl Mesh {
    /// Builds a mesh, checking face indices and coordinate finiteness.
    pub fn new(vertices: Vec<Point3>, faces: Vec<Triangle>) -> Result<Self> {
        let n = vertices.len();
        if vertices.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("mesh vertices"));
        }
        for (fi, f) in faces.iter().enumerate() {
            if let Some(&bad) = f.iter().find(|&&i| i >= n) {
                return Err(Error::InvalidInput(format!(
                    "face {fi} references vertex {bad} but mesh has {n} vertices"
                )));
            }
        }
        Ok(Mesh { vertices, faces })
    }

    pub fn vertices(&self) -> &[Point3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[Triangle] {
        &self.faces
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn same_topology(&self, other: &Mesh) -> bool {
        self.vertices.len() == other.vertices.len() && self.faces == other.faces
    }

    pub fn check_topology(&self, other: &Mesh) -> Result<()> {
        if self.vertices.len() != other.vertices.len() {
            return Err(Error::TopologyMismatch(format!(
                "vertex counts differ ({} vs {})",
                self.vertices.len(),
                other.vertices.len()
            )));
        }
        if self.faces != other.faces {
            return Err(Error::TopologyMismatch("face lists differ".into()));
        }
        Ok(())
    }

    /// Vertex coordinates flattened vertex-major (`x0 y0 z0 x1 ...`).
    pub fn flat_coords(&self) -> Vec<f64> {
        self.vertices.iter().flatten().copied().collect()
    }

    /// Same topology, new coordinates taken from a `3n` vector.
    pub fn with_flat_coords(&self, coords: &[f64]) -> Result<Mesh> {
        let expected = 3 * self.vertices.len();
        if coords.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: coords.len(),
            });
        }
        let vertices = coords.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Mesh::new(vertices, self.faces.clone())
    }

    /// Area-weighted vertex normals (unit length, or zero for isolated vertices).
    pub fn vertex_normals(&self) -> Vec<Point3> {
        let mut normals = vec![[0.0; 3]; self.vertices.len()];
        for f in &self.faces {
            let [a, b, c] = f.map(|i| self.vertices[i]);
            let e1 = sub3(b, a);
            let e2 = sub3(c, a);
            let nrm = cross3(e1, e2);
            for &i in f {
                for k in 0..3 {
                    normals[i][k] += nrm[k];
                }
            }
        }
        for nrm in &mut normals {
            let len = dot3(*nrm, *nrm).sqrt();
            if len > 0.0 {
                for c in nrm.iter_mut() {
                    *c /= len;
                }
            }
        }
        normals
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Mesh> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_obj(&text, &path.display().to_string())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_obj_string()).map_err(|e| Error::io(path, e))
    }

    pub fn to_obj_string(&self) -> String {
        let mut out = String::with_capacity(self.vertices.len() * 40 + self.faces.len() * 20);
        for v in &self.vertices {
            let _ = writeln!(out, "v {:.6} {:.6} {:.6}", v[0], v[1], v[2]);
        }
        for f in &self.faces {
            let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        out
    }
}

/// Parses the `v` / triangular `f` subset of Wavefront OBJ.
///
/// Texture and normal references inside face tokens (`1/2/3`) are accepted
/// and ignored; other record types are skipped. Faces with more than three
/// vertices are rejected rather than triangulated.
pub fn parse_obj(text: &str, source: &str) -> Result<Mesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let at = || format!("{source}:{}", lineno + 1);
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let coords: Vec<f64> = tokens
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::parse(at(), format!("bad vertex coordinate: {e}")))?;
                // a fourth (w) or extra color components are tolerated
                if coords.len() < 3 {
                    return Err(Error::parse(at(), "vertex needs 3 coordinates"));
                }
                if coords[..3].iter().any(|c| !c.is_finite()) {
                    return Err(Error::parse(at(), "non-finite vertex coordinate"));
                }
                vertices.push([coords[0], coords[1], coords[2]]);
            }
            Some("f") => {
                let idx: Vec<usize> = tokens
                    .map(|t| parse_face_index(t).map_err(|m| Error::parse(at(), m)))
                    .collect::<Result<_>>()?;
                if idx.len() != 3 {
                    return Err(Error::parse(
                        at(),
                        format!("only triangular faces are supported, got {} vertices", idx.len()),
                    ));
                }
                faces.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    let n = vertices.len();
    for (fi, f) in faces.iter().enumerate() {
        if f.iter().any(|&i| i >= n) {
            return Err(Error::parse(
                source,
                format!("face {} references a vertex beyond {n}", fi + 1),
            ));
        }
    }
    Mesh::new(vertices, faces)
}

fn parse_face_index(token: &str) -> std::result::Result<usize, String> {
    let head = token.split('/').next().unwrap_or("");
    let one_based: i64 = head
        .parse()
        .map_err(|_| format!("bad face index {token:?}"))?;
    if one_based < 1 {
        return Err(format!("face index {one_based} is not a positive 1-based index"));
    }
    Ok((one_based - 1) as usize)
}

/// Per-vertex displacement, `3n` entries, x/y/z interleaved per vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    displacements: Vec<f64>,
}

impl DeformationField {
    pub fn new(displacements: Vec<f64>) -> Result<Self> {
        if !displacements.len().is_multiple_of(3) {
            return Err(Error::InvalidInput(format!(
                "deformation length {} is not a multiple of 3",
                displacements.len()
            )));
        }
        if displacements.iter().any(|d| !d.is_finite()) {
            return Err(Error::NonFinite("deformation field"));
        }
        Ok(DeformationField { displacements })
    }

    pub fn zeros(n_vertices: usize) -> Self {
        DeformationField {
            displacements: vec![0.0; 3 * n_vertices],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.displacements
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.displacements
    }

    pub fn len(&self) -> usize {
        self.displacements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.displacements.is_empty()
    }

    pub fn n_vertices(&self) -> usize {
        self.displacements.len() / 3
    }

    pub fn vertex(&self, i: usize) -> Point3 {
        let d = &self.displacements[3 * i..3 * i + 3];
        [d[0], d[1], d[2]]
    }

    pub fn scaled(&self, alpha: f64) -> DeformationField {
        DeformationField {
            displacements: self.displacements.iter().map(|d| alpha * d).collect(),
        }
    }

    pub fn negated(&self) -> DeformationField {
        self.scaled(-1.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.displacements.iter().fold(0.0, |m, d| m.max(d.abs()))
    }
}

/// `expressive - neutral`, vertex by vertex.
pub fn diff(expressive: &Mesh, neutral: &Mesh) -> Result<DeformationField> {
    expressive.check_topology(neutral)?;
    let displacements = expressive
        .vertices
        .iter()
        .zip(&neutral.vertices)
        .flat_map(|(e, n)| [e[0] - n[0], e[1] - n[1], e[2] - n[2]])
        .collect();
    Ok(DeformationField { displacements })
}

/// Adds a field to the base mesh; faces are carried over unchanged.
pub fn apply(base: &Mesh, field: &DeformationField) -> Result<Mesh> {
    let expected = 3 * base.n_vertices();
    if field.len() != expected {
        return Err(Error::LengthMismatch {
            expected,
            actual: field.len(),
        });
    }
    let vertices = base
        .vertices
        .iter()
        .zip(field.displacements.chunks_exact(3))
        .map(|(v, d)| [v[0] + d[0], v[1] + d[1], v[2] + d[2]])
        .collect();
    Ok(Mesh {
        vertices,
        faces: base.faces.clone(),
    })
}

/// 2D landmark observations tied to morphable-model vertex indices.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    points2d: Vec<[f64; 2]>,
    indices: Vec<usize>,
}

pub const MIN_LANDMARKS: usize = 6;

impl LandmarkSet {
    pub fn new(points2d: Vec<[f64; 2]>, indices: Vec<usize>, n_vertices: usize) -> Result<Self> {
        if points2d.len() != indices.len() {
            return Err(Error::LengthMismatch {
                expected: indices.len(),
                actual: points2d.len(),
            });
        }
        if indices.len() < MIN_LANDMARKS {
            return Err(Error::InvalidInput(format!(
                "need at least {MIN_LANDMARKS} landmarks, got {}",
                indices.len()
            )));
        }
        let mut seen = HashSet::with_capacity(indices.len());
        for &i in &indices {
            if i >= n_vertices {
                return Err(Error::InvalidInput(format!(
                    "landmark vertex {i} out of range for {n_vertices} vertices"
                )));
            }
            if !seen.insert(i) {
                return Err(Error::InvalidInput(format!("duplicate landmark vertex {i}")));
            }
        }
        if points2d.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("landmark coordinates"));
        }
        Ok(LandmarkSet { points2d, indices })
    }

    pub fn points2d(&self) -> &[[f64; 2]] {
        &self.points2d
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Reads the `vertex_index,x_px,y_px` CSV format.
    pub fn load(path: impl AsRef<Path>, n_vertices: usize) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&bytes, &path.display().to_string(), n_vertices)
    }

    pub fn from_csv(bytes: &[u8], source: &str, n_vertices: usize) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            vertex_index: usize,
            x_px: f64,
            y_px: f64,
        }
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes);
        let mut points = Vec::new();
        let mut indices = Vec::new();
        for (i, row) in reader.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| Error::parse(format!("{source}: row {}", i + 1), e.to_string()))?;
            indices.push(row.vertex_index);
            points.push([row.x_px, row.y_px]);
        }
        Self::new(points, indices, n_vertices)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("vertex_index,x_px,y_px\n");
        for (i, p) in self.indices.iter().zip(&self.points2d) {
            let _ = writeln!(out, "{},{:.6},{:.6}", i, p[0], p[1]);
        }
        out
    }
}

pub(crate) fn sub3(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot3(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross3(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Regular grid surface `rows x cols` over `[-1, 1]^2` with a height profile.
///
/// Used by the synthetic gallery and morphable-model fixtures; triangles are
/// wound counter-clockwise when seen from `+z`.
pub fn grid_surface(rows: usize, cols: usize, height: impl Fn(f64, f64) -> f64) -> Mesh {
    assert!(rows >= 2 && cols >= 2, "grid needs at least 2x2 vertices");
    let mut vertices = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let x = -1.0 + 2.0 * c as f64 / (cols - 1) as f64;
            let y = -1.0 + 2.0 * r as f64 / (rows - 1) as f64;
            vertices.push([x, y, height(x, y)]);
        }
    }
    let mut faces = Vec::with_capacity(2 * (rows - 1) * (cols - 1));
    for r in 0..rows - 1 {
        for c in 0..cols - 1 {
            let i = r * cols + c;
            faces.push([i, i + 1, i + cols + 1]);
            faces.push([i, i + cols + 1, i + cols]);
        }
    }
    Mesh { vertices, faces }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triangle() -> Mesh {
        Mesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    #[test]
    fn parses_single_triangle() {
        let m = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n", "mem").unwrap();
        assert_eq!(m.n_vertices(), 3);
        assert_eq!(m.faces(), &[[0, 1, 2]]);
    }

    #[test]
    fn rejects_zero_face_index() {
        let err = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 0 1 2\n", "mem").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
    }

    #[test]
    fn rejects_out_of_range_and_quads() {
        assert!(parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 4\n", "mem").is_err());
        let quad = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n";
        assert!(parse_obj(quad, "mem").is_err());
        assert!(parse_obj("v 0 0\n", "mem").is_err());
        assert!(parse_obj("v 0 nan 0\n", "mem").is_err());
    }

    #[test]
    fn ignores_normals_texcoords_and_comments() {
        let text = "# header\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nvt 0 0\nf 1/1/1 2/2/1 3//1 # tri\n";
        let m = parse_obj(text, "mem").unwrap();
        assert_eq!(m.faces(), &[[0, 1, 2]]);
    }

    #[test]
    fn diff_of_self_is_zero_and_translation_is_uniform() {
        let m = triangle();
        assert!(diff(&m, &m).unwrap().as_slice().iter().all(|&d| d == 0.0));

        let t = [0.5, -1.25, 2.0];
        let moved = Mesh::new(
            m.vertices().iter().map(|v| [v[0] + t[0], v[1] + t[1], v[2] + t[2]]).collect(),
            m.faces().to_vec(),
        )
        .unwrap();
        let d = diff(&moved, &m).unwrap();
        for i in 0..3 {
            assert_eq!(d.vertex(i), t);
        }
    }

    #[test]
    fn diff_rejects_topology_mismatch() {
        let a = triangle();
        let b = Mesh::new(a.vertices().to_vec(), vec![[0, 2, 1]]).unwrap();
        assert!(matches!(diff(&a, &b), Err(Error::TopologyMismatch(_))));
    }

    #[test]
    fn apply_checks_length_and_zero_is_identity() {
        let m = triangle();
        assert_eq!(apply(&m, &DeformationField::zeros(3)).unwrap(), m);
        let short = DeformationField::new(vec![0.0; 6]).unwrap();
        assert!(matches!(apply(&m, &short), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn landmark_set_validation() {
        let pts = vec![[0.0, 0.0]; 6];
        assert!(LandmarkSet::new(pts.clone(), vec![0, 1, 2, 3, 4, 5], 6).is_ok());
        assert!(LandmarkSet::new(pts.clone(), vec![0, 1, 2, 3, 4, 4], 6).is_err());
        assert!(LandmarkSet::new(pts.clone(), vec![0, 1, 2, 3, 4, 6], 6).is_err());
        assert!(LandmarkSet::new(pts[..5].to_vec(), vec![0, 1, 2, 3, 4], 6).is_err());
    }

    #[test]
    fn landmark_csv_round_trip() {
        let set = LandmarkSet::new(
            (0..6).map(|i| [i as f64 * 1.5, 10.0 - i as f64]).collect(),
            vec![5, 3, 1, 0, 2, 4],
            6,
        )
        .unwrap();
        let back = LandmarkSet::from_csv(set.to_csv_string().as_bytes(), "mem", 6).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn grid_surface_normals_face_up() {
        let m = grid_surface(4, 5, |_, _| 0.0);
        assert_eq!(m.n_vertices(), 20);
        assert_eq!(m.faces().len(), 2 * 3 * 4);
        for nrm in m.vertex_normals() {
            assert!((nrm[2] - 1.0).abs() < 1e-12);
        }
    }
}
