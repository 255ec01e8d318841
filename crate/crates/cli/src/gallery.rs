//! Building and loading the per-cell affect gallery.
//!
//! A built gallery lives in `<cache_dir>/<key>/` where `key` is the SHA-256
//! of every input byte (template, annotations, each referenced mesh) and the
//! gallery configuration, so unchanged inputs reuse the same directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use affectsynth::container::{load_field, load_splocs, save_field, save_splocs};
use affectsynth::geom::{diff, parse_obj, DeformationField, Mesh};
use affectsynth::splocs::{fit_splocs, mean_field, DeformationMatrix, SolverConfig, SplocsModel};
use affectsynth::va_grid::{Annotation, AnnotationSet, CellIndex, VaGrid, GRID_SIZE};
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::GalleryConfig;
use crate::error::{CliError, Result};
use crate::manifest::GalleryManifest;

const INDEX_FILE: &str = "index.json";
const CACHE_FORMAT: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CellRecord {
    row: usize,
    col: usize,
    count: usize,
    components: usize,
    mean_file: String,
    model_file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GalleryIndex {
    format: u32,
    key: String,
    n_vertices: usize,
    histogram: [[usize; GRID_SIZE]; GRID_SIZE],
    cells: Vec<CellRecord>,
}

#[derive(Debug, Clone)]
pub struct GalleryCell {
    pub count: usize,
    pub median: (f64, f64),
    pub mean: DeformationField,
    pub model: SplocsModel,
}

#[derive(Debug, Clone)]
pub struct Gallery {
    pub dir: PathBuf,
    pub key: String,
    pub template: Mesh,
    pub grid: VaGrid,
    pub cells: BTreeMap<CellIndex, GalleryCell>,
}

#[derive(Debug, Clone)]
pub struct BuildOutcome {
    pub dir: PathBuf,
    pub key: String,
    pub cache_hit: bool,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn mesh_path(manifest: &GalleryManifest, frame_id: &str) -> PathBuf {
    manifest.mesh_dir.join(format!("{frame_id}.obj"))
}

/// Raw inputs of a gallery, read once and hashed.
struct GalleryInputs {
    template_bytes: Vec<u8>,
    annotations: AnnotationSet,
    meshes: BTreeMap<String, Vec<u8>>,
    key: String,
}

fn hash_part(h: &mut Sha256, bytes: &[u8]) {
    h.update((bytes.len() as u64).to_le_bytes());
    h.update(bytes);
}

fn read_inputs(manifest: &GalleryManifest, cfg: &GalleryConfig) -> Result<GalleryInputs> {
    let template_bytes = read(&manifest.template)?;
    let ann_bytes = read(&manifest.annotations)?;
    let annotations = AnnotationSet::from_csv(&ann_bytes, &manifest.annotations.display().to_string())?;
    if annotations.is_empty() {
        return Err(CliError::Gallery("empty gallery: annotation file has no frames".into()));
    }
    let mut meshes = BTreeMap::new();
    for a in annotations.annotations() {
        for id in [&a.frame_id, &a.neutral_frame_id] {
            if !meshes.contains_key(id) {
                meshes.insert(id.clone(), read(&mesh_path(manifest, id))?);
            }
        }
    }
    let mut h = Sha256::new();
    h.update(b"affectsynth-gallery");
    h.update(CACHE_FORMAT.to_le_bytes());
    hash_part(&mut h, &template_bytes);
    hash_part(&mut h, &ann_bytes);
    for (id, bytes) in &meshes {
        hash_part(&mut h, id.as_bytes());
        hash_part(&mut h, bytes);
    }
    hash_part(&mut h, serde_json::to_string(cfg).expect("config serializes").as_bytes());
    Ok(GalleryInputs {
        template_bytes,
        annotations,
        meshes,
        key: hex::encode(h.finalize()),
    })
}

/// Cache key of the gallery `manifest` would build under `cfg`.
pub fn gallery_key(manifest: &GalleryManifest, cfg: &GalleryConfig) -> Result<String> {
    Ok(read_inputs(manifest, cfg)?.key)
}

fn parse_mesh(bytes: &[u8], name: &str) -> Result<Mesh> {
    let text = std::str::from_utf8(bytes).map_err(|_| CliError::Gallery(format!("{name} is not UTF-8")))?;
    Ok(parse_obj(text, name)?)
}

/// Difference vectors of the expressive frames paired with their neutrals.
pub(crate) fn expressive_deformations(
    manifest: &GalleryManifest,
    annotations: &AnnotationSet,
    meshes: &BTreeMap<String, Vec<u8>>,
    template: &Mesh,
) -> Result<Vec<(Annotation, DeformationField)>> {
    let mut parsed: BTreeMap<&str, Mesh> = BTreeMap::new();
    for (id, bytes) in meshes {
        let mesh = parse_mesh(bytes, &mesh_path(manifest, id).display().to_string())?;
        template
            .check_topology(&mesh)
            .map_err(|e| CliError::Gallery(format!("mesh {id}: {e}")))?;
        parsed.insert(id, mesh);
    }
    annotations
        .annotations()
        .iter()
        .filter(|a| !a.is_neutral())
        .map(|a| Ok((a.clone(), diff(&parsed[a.frame_id.as_str()], &parsed[a.neutral_frame_id.as_str()])?)))
        .collect()
}

fn cell_file_stem(cell: CellIndex) -> String {
    format!("r{}_c{}", cell.row, cell.col)
}

fn fit_cell(fields: &[DeformationField], template: &Mesh, cfg: &GalleryConfig) -> Result<(DeformationField, SplocsModel)> {
    let mean = mean_field(fields)?;
    let d = DeformationMatrix::from_fields(fields)?;
    let h = cfg.cell_components.min(fields.len()).min(3 * template.n_vertices()).max(1);
    let solver = SolverConfig { h, ..cfg.solver.clone() };
    let model = fit_splocs(&d, template, &solver)?;
    Ok((mean, model))
}

/// Builds the gallery for `manifest` unless an identical build is cached.
pub fn build_gallery(manifest: &GalleryManifest, cfg: &GalleryConfig) -> Result<BuildOutcome> {
    let started = Instant::now();
    let inputs = read_inputs(manifest, cfg)?;
    let dir = manifest.cache_dir.join(&inputs.key);
    if dir.join(INDEX_FILE).exists() {
        info!("gallery cache hit {}", dir.display());
        return Ok(BuildOutcome {
            dir,
            key: inputs.key,
            cache_hit: true,
        });
    }
    let template = parse_mesh(&inputs.template_bytes, &manifest.template.display().to_string())?;
    let pairs = expressive_deformations(manifest, &inputs.annotations, &inputs.meshes, &template)?;
    if pairs.is_empty() {
        return Err(CliError::Gallery("empty gallery: no expressive frames".into()));
    }
    let grid = VaGrid::build(inputs.annotations.expressive());
    let by_id: BTreeMap<&str, &DeformationField> = pairs.iter().map(|(a, f)| (a.frame_id.as_str(), f)).collect();
    let cells: Vec<CellIndex> = grid.non_empty_cells().collect();

    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(cells.len());
    let fitted: Vec<Result<(DeformationField, SplocsModel)>> = std::thread::scope(|scope| {
        let chunks: Vec<_> = (0..workers)
            .map(|w| {
                let (cells, grid, by_id, template) = (&cells, &grid, &by_id, &template);
                scope.spawn(move || {
                    cells
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| i % workers == w)
                        .map(|(i, &cell)| {
                            let fields: Vec<DeformationField> =
                                grid.members(cell).iter().map(|id| by_id[id.as_str()].clone()).collect();
                            (i, fit_cell(&fields, template, cfg))
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        let mut all: Vec<_> = chunks
            .into_iter()
            .flat_map(|h| h.join().expect("cell worker panicked"))
            .collect();
        all.sort_by_key(|(i, _)| *i);
        all.into_iter().map(|(_, r)| r).collect()
    });

    let staging = manifest.cache_dir.join(format!(".building-{}", inputs.key));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| CliError::io(&staging, e))?;
    }
    let cell_dir = staging.join("cells");
    fs::create_dir_all(&cell_dir).map_err(|e| CliError::io(&cell_dir, e))?;
    write(&staging.join("template.obj"), &inputs.template_bytes)?;
    write(&staging.join("annotations.csv"), inputs.annotations.to_csv_string())?;

    let mut records = Vec::with_capacity(cells.len());
    for (cell, fit) in cells.iter().zip(fitted) {
        let (mean, model) = fit?;
        let stem = cell_file_stem(*cell);
        let mean_file = format!("cells/{stem}.mean.afsy");
        let model_file = format!("cells/{stem}.splocs.afsy");
        save_field(&mean, staging.join(&mean_file))?;
        save_splocs(&model, Some("template.obj"), staging.join(&model_file))?;
        records.push(CellRecord {
            row: cell.row,
            col: cell.col,
            count: grid.members(*cell).len(),
            components: model.h(),
            mean_file,
            model_file,
        });
    }
    let index = GalleryIndex {
        format: CACHE_FORMAT,
        key: inputs.key.clone(),
        n_vertices: template.n_vertices(),
        histogram: grid.histogram(),
        cells: records,
    };
    write(
        &staging.join(INDEX_FILE),
        serde_json::to_string_pretty(&index).expect("index serializes"),
    )?;
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    }
    fs::rename(&staging, &dir).map_err(|e| CliError::io(&dir, e))?;
    info!(
        "built gallery {} ({} cells) in {:.2?}",
        dir.display(),
        cells.len(),
        started.elapsed()
    );
    Ok(BuildOutcome {
        dir,
        key: inputs.key,
        cache_hit: false,
    })
}

impl Gallery {
    pub fn load(dir: &Path) -> Result<Self> {
        let index_path = dir.join(INDEX_FILE);
        if !index_path.exists() {
            return Err(CliError::Gallery(format!(
                "no built gallery at {} (run build-gallery first)",
                dir.display()
            )));
        }
        let index: GalleryIndex = serde_json::from_slice(&read(&index_path)?)
            .map_err(|e| CliError::Gallery(format!("{}: {e}", index_path.display())))?;
        if index.format != CACHE_FORMAT {
            return Err(CliError::Gallery(format!("unsupported gallery format {}", index.format)));
        }
        let template = parse_mesh(&read(&dir.join("template.obj"))?, "template.obj")?;
        let annotations = AnnotationSet::from_csv(&read(&dir.join("annotations.csv"))?, "annotations.csv")?;
        let grid = VaGrid::build(annotations.expressive());
        if grid.histogram() != index.histogram {
            return Err(CliError::Gallery("cached histogram disagrees with cached annotations".into()));
        }
        let mut cells = BTreeMap::new();
        for rec in &index.cells {
            let cell = CellIndex::new(rec.row, rec.col)?;
            let mean = load_field(dir.join(&rec.mean_file))?;
            let model = load_splocs(dir.join(&rec.model_file))?;
            if mean.n_vertices() != template.n_vertices() || model.n_vertices() != template.n_vertices() {
                return Err(CliError::Gallery(format!("cell {:?} does not match the template", cell)));
            }
            cells.insert(
                cell,
                GalleryCell {
                    count: rec.count,
                    median: grid.median_va(cell)?,
                    mean,
                    model,
                },
            );
        }
        Ok(Gallery {
            dir: dir.to_path_buf(),
            key: index.key,
            template,
            grid,
            cells,
        })
    }

    /// Loads the cached build for `manifest` under `cfg`.
    pub fn for_manifest(manifest: &GalleryManifest, cfg: &GalleryConfig) -> Result<Self> {
        let key = gallery_key(manifest, cfg)?;
        Self::load(&manifest.cache_dir.join(key))
    }

    pub fn histogram(&self) -> [[usize; GRID_SIZE]; GRID_SIZE] {
        self.grid.histogram()
    }

    pub fn cell(&self, cell: CellIndex) -> Result<&GalleryCell> {
        self.cells
            .get(&cell)
            .ok_or(CliError::Core(affectsynth::Error::EmptyCell {
                row: cell.row,
                col: cell.col,
            }))
    }
}
