//! Dataset augmentation: every neutral photo is re-rendered with the mean
//! expression of each requested cell and labeled with that cell's median
//! (valence, arousal). The output is itself a dataset in the input format.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use affectsynth::geom::LandmarkSet;
use affectsynth::mmfit::{project, MorphableModel};
use affectsynth::va_grid::CellIndex;
use log::info;

use crate::config::{AugmentConfig, Config};
use crate::error::{AtStage, CliError, Result, Stage};
use crate::gallery::Gallery;
use crate::manifest::{Dataset, DatasetRow};
use crate::pipeline::{composite_synthesized, fit_photo, load_photo};
use crate::synth::synthesize_cell;

#[derive(Debug, Clone)]
pub struct AugmentSummary {
    pub neutral_frames: usize,
    pub cells: Vec<CellIndex>,
    pub output: Dataset,
}

/// One entry per line; blank lines and `#` comments ignored.
pub fn load_allowlist(path: &Path) -> Result<BTreeSet<String>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

/// Rows labeled neutral within the thresholds and, when an allowlist is
/// given, also confirmed by it.
pub fn select_neutral<'a>(
    rows: &'a [DatasetRow],
    cfg: &AugmentConfig,
    allowlist: Option<&BTreeSet<String>>,
) -> Result<Vec<&'a DatasetRow>> {
    let within: Vec<&DatasetRow> = rows
        .iter()
        .filter(|r| r.valence.abs() <= cfg.valence_eps && r.arousal.abs() <= cfg.arousal_eps)
        .collect();
    let n_within = within.len();
    let selected: Vec<&DatasetRow> = match allowlist {
        Some(allow) => within.into_iter().filter(|r| allow.contains(&r.image)).collect(),
        None => within,
    };
    if selected.is_empty() {
        let mut msg = format!(
            "0 of {} rows have |valence| <= {} and |arousal| <= {}",
            rows.len(),
            cfg.valence_eps,
            cfg.arousal_eps
        );
        if let Some(allow) = allowlist {
            msg = format!("{n_within} of {} rows are within the thresholds, 0 of them in the {}-entry allowlist", rows.len(), allow.len());
        }
        return Err(CliError::NoNeutralFrames(msg));
    }
    Ok(selected)
}

/// Requested cells, or every populated cell when none are configured.
pub fn target_cells(gallery: &Gallery, cfg: &AugmentConfig) -> Result<Vec<CellIndex>> {
    if cfg.cells.is_empty() {
        return Ok(gallery.cells.keys().copied().collect());
    }
    for c in &cfg.cells {
        CellIndex::new(c.row, c.col).map_err(|e| CliError::field("cells", e.to_string()))?;
        if !gallery.cells.contains_key(c) {
            return Err(CliError::field("cells", format!("cell ({}, {}) has no gallery frames", c.row, c.col)));
        }
    }
    Ok(cfg.cells.clone())
}

fn output_stem(index: usize, row: &DatasetRow) -> String {
    let stem = Path::new(&row.image)
        .file_stem()
        .map_or_else(|| "frame".to_string(), |s| s.to_string_lossy().into_owned());
    format!("{index:04}_{stem}")
}

pub fn augment(
    dataset: &Dataset,
    gallery: &Gallery,
    model: &MorphableModel,
    cfg: &Config,
    out_dir: &Path,
) -> Result<AugmentSummary> {
    let allowlist = cfg.augment.allowlist.as_deref().map(load_allowlist).transpose()?;
    let neutral = select_neutral(&dataset.rows, &cfg.augment, allowlist.as_ref())?;
    let cells = target_cells(gallery, &cfg.augment)?;
    info!("augmenting {} neutral frames x {} cells", neutral.len(), cells.len());

    let image_dir = out_dir.join("images");
    let lm_dir = out_dir.join("landmarks");
    for d in [&image_dir, &lm_dir] {
        fs::create_dir_all(d).map_err(|e| CliError::io(d, e))?;
    }
    let mut out_rows = Vec::with_capacity(neutral.len() * cells.len());
    for (i, row) in neutral.iter().enumerate() {
        let (image, landmarks) = load_photo(
            &dataset.resolve(&row.image),
            &dataset.resolve(&row.landmarks),
            model.mean().n_vertices(),
        )?;
        let photo = fit_photo(image, landmarks, model, &cfg.fit)?;
        let stem = output_stem(i, row);
        for &cell in &cells {
            let synthesized = synthesize_cell(gallery, cell, cfg.synthesis.intensity)?;
            let (valence, arousal) = synthesized.median_va;
            let result = composite_synthesized(&photo, gallery, synthesized)?;
            let name = format!("{stem}_r{}_c{}", cell.row, cell.col);
            let image_rel = PathBuf::from("images").join(format!("{name}.png"));
            let lm_rel = PathBuf::from("landmarks").join(format!("{name}.csv"));
            result.image.save_png(out_dir.join(&image_rel)).at(Stage::WriteOutput)?;
            let indices = photo.landmarks.indices().to_vec();
            let points = indices
                .iter()
                .map(|&v| project(&photo.face.camera, &[result.expressive.vertices()[v]])[0])
                .collect();
            let moved = LandmarkSet::new(points, indices, result.expressive.n_vertices()).at(Stage::WriteOutput)?;
            let lm_path = out_dir.join(&lm_rel);
            fs::write(&lm_path, moved.to_csv_string()).map_err(|e| CliError::io(&lm_path, e))?;
            out_rows.push(DatasetRow {
                image: image_rel.to_string_lossy().into_owned(),
                landmarks: lm_rel.to_string_lossy().into_owned(),
                subject_id: row.subject_id.clone(),
                valence,
                arousal,
            });
        }
    }
    let output = Dataset {
        base: out_dir.to_path_buf(),
        rows: out_rows,
    };
    let labels = out_dir.join("labels.csv");
    fs::write(&labels, output.to_csv_string()).map_err(|e| CliError::io(&labels, e))?;
    Ok(AugmentSummary {
        neutral_frames: neutral.len(),
        cells,
        output,
    })
}
