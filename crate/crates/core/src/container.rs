//! Binary model container shared by blendshape models, morphable models and
//! deformation fields.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0   4 bytes   magic "AFSY"
//! 4   u32       format version (FORMAT_VERSION)
//! 8   u64       header length H in bytes
//! 16  H bytes   UTF-8 JSON header
//! 16+H          blob section: arrays back to back, f64 or u32 LE
//! ```
//!
//! The header is `{"version", "kind", "meta", "arrays"}` where each array
//! descriptor is `{"name", "dtype", "shape", "offset", "len"}`; `offset` and
//! `len` count bytes from the start of the blob section and matrices are
//! stored row-major.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geom::{DeformationField, Mesh};
use crate::mmfit::MorphableModel;
use crate::splocs::{ConstraintMode, SplocsModel};

pub const MAGIC: &[u8; 4] = b"AFSY";
pub const FORMAT_VERSION: u32 = 1;

pub const KIND_SPLOCS: &str = "splocs";
pub const KIND_MORPHABLE: &str = "mm";
pub const KIND_FIELD: &str = "field";

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::U32(v) => v.len(),
        }
    }

    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F64(_) => "f64",
            ArrayData::U32(_) => "u32",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayDesc {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: String,
    meta: Value,
    arrays: Vec<ArrayDesc>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: Value,
    pub arrays: BTreeMap<String, Array>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Container(msg.into())
}

impl Container {
    pub fn new(kind: &str, meta: Value) -> Self {
        Container {
            kind: kind.to_string(),
            meta,
            arrays: BTreeMap::new(),
        }
    }

    pub fn insert_f64(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.insert(name.into(), Array { shape, data: ArrayData::F64(data) });
    }

    pub fn insert_u32(&mut self, name: &str, shape: Vec<usize>, data: Vec<u32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.insert(name.into(), Array { shape, data: ArrayData::U32(data) });
    }

    pub fn f64_array(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.arrays.get(name) {
            Some(Array { shape, data: ArrayData::F64(v) }) => Ok((shape, v)),
            Some(_) => Err(bad(format!("array '{name}' is not f64"))),
            None => Err(bad(format!("missing array '{name}'"))),
        }
    }

    pub fn u32_array(&self, name: &str) -> Result<(&[usize], &[u32])> {
        match self.arrays.get(name) {
            Some(Array { shape, data: ArrayData::U32(v) }) => Ok((shape, v)),
            Some(_) => Err(bad(format!("array '{name}' is not u32"))),
            None => Err(bad(format!("missing array '{name}'"))),
        }
    }

    /// Row-major 2-D f64 array as a matrix.
    pub fn matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        let (shape, data) = self.f64_array(name)?;
        match shape {
            [r, c] => Ok(DMatrix::from_row_slice(*r, *c, data)),
            _ => Err(bad(format!("array '{name}' is not 2-D"))),
        }
    }

    pub fn insert_matrix(&mut self, name: &str, m: &DMatrix<f64>) {
        let rows: Vec<f64> = m.transpose().as_slice().to_vec();
        self.insert_f64(name, vec![m.nrows(), m.ncols()], rows);
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| bad(format!("meta field '{key}' missing or not a string")))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.meta
            .get(key)
            .and_then(Value::as_f64)
            .ok_or_else(|| bad(format!("meta field '{key}' missing or not a number")))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta
            .get(key)
            .and_then(Value::as_u64)
            .map(|v| v as usize)
            .ok_or_else(|| bad(format!("meta field '{key}' missing or not an integer")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut descs = Vec::with_capacity(self.arrays.len());
        let mut blob = Vec::new();
        for (name, arr) in &self.arrays {
            let offset = blob.len();
            match &arr.data {
                ArrayData::F64(v) => v.iter().for_each(|x| blob.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U32(v) => v.iter().for_each(|x| blob.extend_from_slice(&x.to_le_bytes())),
            }
            descs.push(ArrayDesc {
                name: name.clone(),
                dtype: arr.data.dtype().into(),
                shape: arr.shape.clone(),
                offset,
                len: blob.len() - offset,
            });
        }
        let header = Header {
            version: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays: descs,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a model container (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported container version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let blob_start = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..blob_start]).map_err(|e| bad(format!("bad header: {e}")))?;
        if header.version != version {
            return Err(bad("header version disagrees with preamble"));
        }
        let blob = &bytes[blob_start..];
        let mut arrays = BTreeMap::new();
        for d in header.arrays {
            let width = match d.dtype.as_str() {
                "f64" => 8,
                "u32" => 4,
                other => return Err(bad(format!("array '{}' has unknown dtype {other}", d.name))),
            };
            let count: usize = d.shape.iter().product();
            if d.len != count * width {
                return Err(bad(format!("array '{}' length disagrees with shape", d.name)));
            }
            let raw = d
                .offset
                .checked_add(d.len)
                .and_then(|end| blob.get(d.offset..end))
                .ok_or_else(|| bad(format!("array '{}' runs past end of file", d.name)))?;
            let data = if width == 8 {
                ArrayData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                )
            } else {
                ArrayData::U32(
                    raw.chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                )
            };
            debug_assert_eq!(data.len(), count);
            arrays.insert(d.name, Array { shape: d.shape, data });
        }
        Ok(Container {
            kind: header.kind,
            meta: header.meta,
            arrays,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(bad(format!("expected a '{kind}' container, found '{}'", self.kind)));
        }
        Ok(())
    }

    fn insert_mesh(&mut self, prefix: &str, mesh: &Mesh) {
        self.insert_f64(
            &format!("{prefix}.vertices"),
            vec![mesh.n_vertices(), 3],
            mesh.flat_coords(),
        );
        self.insert_u32(
            &format!("{prefix}.faces"),
            vec![mesh.faces().len(), 3],
            mesh.faces().iter().flatten().map(|&i| i as u32).collect(),
        );
    }

    fn mesh(&self, prefix: &str) -> Result<Mesh> {
        let (vshape, v) = self.f64_array(&format!("{prefix}.vertices"))?;
        let (fshape, f) = self.u32_array(&format!("{prefix}.faces"))?;
        if vshape.len() != 2 || vshape[1] != 3 || fshape.len() != 2 || fshape[1] != 3 {
            return Err(bad(format!("mesh '{prefix}' arrays must be N x 3")));
        }
        let vertices = v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let faces = f
            .chunks_exact(3)
            .map(|c| [c[0] as usize, c[1] as usize, c[2] as usize])
            .collect();
        Mesh::new(vertices, faces)
    }
}

fn mode_tag(mode: ConstraintMode) -> &'static str {
    match mode {
        ConstraintMode::UnitMaxAbs => "unit-max-abs",
        ConstraintMode::UnitMaxNonneg => "unit-max-nonneg",
    }
}

/// `template_ref` names where the template came from (path or digest); the
/// template geometry itself is always stored inline.
pub fn splocs_to_container(model: &SplocsModel, template_ref: Option<&str>) -> Container {
    let meta = serde_json::json!({
        "n": model.n_vertices(),
        "h": model.h(),
        "m": model.weights().ncols(),
        "constraint_mode": mode_tag(model.constraint_mode()),
        "sparsity_weight": model.sparsity_weight(),
        "template_ref": template_ref,
    });
    let mut c = Container::new(KIND_SPLOCS, meta);
    c.insert_matrix("B", model.basis());
    c.insert_matrix("C", model.weights());
    c.insert_mesh("template", model.template());
    c
}

pub fn splocs_from_container(c: &Container) -> Result<SplocsModel> {
    c.expect_kind(KIND_SPLOCS)?;
    let mode = match c.meta_str("constraint_mode")? {
        "unit-max-abs" => ConstraintMode::UnitMaxAbs,
        "unit-max-nonneg" => ConstraintMode::UnitMaxNonneg,
        other => return Err(bad(format!("unknown constraint_mode '{other}'"))),
    };
    let template = c.mesh("template")?;
    let basis = c.matrix("B")?;
    let weights = c.matrix("C")?;
    if c.meta_usize("n")? != template.n_vertices() || c.meta_usize("h")? != basis.ncols() {
        return Err(bad("meta n/h disagree with stored arrays"));
    }
    SplocsModel::from_parts(basis, weights, template, mode, c.meta_f64("sparsity_weight")?)
}

pub fn morphable_to_container(model: &MorphableModel) -> Container {
    let meta = serde_json::json!({
        "n": model.mean().n_vertices(),
        "p": model.n_components(),
    });
    let mut c = Container::new(KIND_MORPHABLE, meta);
    c.insert_mesh("mean", model.mean());
    c.insert_matrix("basis", model.basis());
    c.insert_f64("eigenvalues", vec![model.n_components()], model.eigenvalues().to_vec());
    c
}

pub fn morphable_from_container(c: &Container) -> Result<MorphableModel> {
    c.expect_kind(KIND_MORPHABLE)?;
    let (_, eig) = c.f64_array("eigenvalues")?;
    MorphableModel::new(c.mesh("mean")?, c.matrix("basis")?, eig.to_vec())
}

pub fn field_to_container(field: &DeformationField) -> Container {
    let mut c = Container::new(KIND_FIELD, serde_json::json!({ "n": field.n_vertices() }));
    c.insert_f64("displacements", vec![field.n_vertices(), 3], field.as_slice().to_vec());
    c
}

pub fn field_from_container(c: &Container) -> Result<DeformationField> {
    c.expect_kind(KIND_FIELD)?;
    let (_, d) = c.f64_array("displacements")?;
    DeformationField::new(d.to_vec())
}

pub fn save_splocs(model: &SplocsModel, template_ref: Option<&str>, path: impl AsRef<Path>) -> Result<()> {
    splocs_to_container(model, template_ref).save(path)
}

pub fn load_splocs(path: impl AsRef<Path>) -> Result<SplocsModel> {
    splocs_from_container(&Container::load(path)?)
}

pub fn save_morphable_model(model: &MorphableModel, path: impl AsRef<Path>) -> Result<()> {
    morphable_to_container(model).save(path)
}

pub fn load_morphable_model(path: impl AsRef<Path>) -> Result<MorphableModel> {
    morphable_from_container(&Container::load(path)?)
}

pub fn save_field(field: &DeformationField, path: impl AsRef<Path>) -> Result<()> {
    field_to_container(field).save(path)
}

pub fn load_field(path: impl AsRef<Path>) -> Result<DeformationField> {
    field_from_container(&Container::load(path)?)
}
