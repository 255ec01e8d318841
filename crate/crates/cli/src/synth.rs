//! Template-space synthesis for a target (valence, arousal) and the shaded
//! preview render returned when no photo session is involved.

use affectsynth::geom::{apply, DeformationField, Mesh};
use affectsynth::mmfit::Camera;
use affectsynth::raster::{rasterize_onto, Image};
use affectsynth::synthetic::{fixture_camera, gradient_background};
use affectsynth::transfer::check_intensity;
use affectsynth::va_grid::{cell_of, CellIndex};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::gallery::Gallery;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthRequest {
    pub valence: f64,
    pub arousal: f64,
    pub intensity: f64,
}

impl SynthRequest {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("valence", self.valence), ("arousal", self.arousal)] {
            if !(-1.0..=1.0).contains(&v) {
                return Err(CliError::field(field, format!("{v} is outside [-1, 1]")));
            }
        }
        check_intensity(self.intensity)
            .map_err(|_| CliError::field("intensity", format!("{} is outside [0, 1.5]", self.intensity)))
    }
}

#[derive(Debug, Clone)]
pub struct Synthesized {
    /// Cell the request falls in.
    pub requested_cell: CellIndex,
    /// Cell whose mean deformation was used (nearest populated one when the
    /// requested cell is empty).
    pub cell: CellIndex,
    pub median_va: (f64, f64),
    pub mesh: Mesh,
}

fn source_cell(gallery: &Gallery, requested: CellIndex) -> Result<CellIndex> {
    if gallery.cells.contains_key(&requested) {
        return Ok(requested);
    }
    Ok(gallery.grid.nearest_nonempty_cell(requested)?)
}

/// Template plus `intensity` times the mean deformation of the target cell.
pub fn synthesize(gallery: &Gallery, req: &SynthRequest) -> Result<Synthesized> {
    req.validate()?;
    let requested_cell = cell_of(req.valence, req.arousal)?;
    let cell = source_cell(gallery, requested_cell)?;
    let mut out = synthesize_cell(gallery, cell, req.intensity)?;
    out.requested_cell = requested_cell;
    Ok(out)
}

/// Mean expression of a populated `cell` at `intensity`.
pub fn synthesize_cell(gallery: &Gallery, cell: CellIndex, intensity: f64) -> Result<Synthesized> {
    check_intensity(intensity).map_err(|_| CliError::field("intensity", format!("{intensity} is outside [0, 1.5]")))?;
    let entry = gallery.cell(cell)?;
    let mesh = if intensity == 0.0 {
        gallery.template.clone()
    } else {
        apply(&gallery.template, &entry.mean.scaled(intensity))?
    };
    Ok(Synthesized {
        requested_cell: cell,
        cell,
        median_va: entry.median,
        mesh,
    })
}

/// Template deformed by an explicit weight vector on the cell's localized
/// blendshape model instead of the cell mean.
pub fn synthesize_weights(gallery: &Gallery, req: &SynthRequest, weights: &[f64]) -> Result<Synthesized> {
    req.validate()?;
    let requested_cell = cell_of(req.valence, req.arousal)?;
    let cell = source_cell(gallery, requested_cell)?;
    let entry = gallery.cell(cell)?;
    if weights.len() != entry.model.h() {
        return Err(CliError::field(
            "weights",
            format!("cell ({}, {}) has {} components, got {} weights", cell.row, cell.col, entry.model.h(), weights.len()),
        ));
    }
    let field: DeformationField = entry.model.synthesize(weights)?;
    let mesh = apply(&gallery.template, &field.scaled(req.intensity))?;
    Ok(Synthesized {
        requested_cell,
        cell,
        median_va: entry.median,
        mesh,
    })
}

/// Camera used for previews of a template-space mesh.
pub fn preview_camera(size: usize) -> Result<Camera> {
    Ok(fixture_camera(size, size, Matrix3::identity())?)
}

/// Lambert-shaded gray render over the gradient backdrop.
pub fn render_preview(mesh: &Mesh, size: usize) -> Result<Image> {
    if size == 0 {
        return Err(CliError::field("preview_size", "must be positive"));
    }
    let camera = preview_camera(size)?;
    let light = Vector3::new(0.3, 0.4, 1.0).normalize();
    let colors: Vec<[f64; 3]> = mesh
        .vertex_normals()
        .iter()
        .map(|n| {
            let lum = 0.25 + 0.7 * Vector3::from(*n).dot(&light).max(0.0);
            [0.93 * lum, 0.80 * lum, 0.72 * lum]
        })
        .collect();
    let mut image = gradient_background(size, size);
    rasterize_onto(mesh, &camera, &colors, &mut image)?;
    Ok(image)
}

/// Parses `0.1,0,-0.3` style weight lists.
pub fn parse_weights(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| CliError::field("weights", format!("'{s}' is not a finite number")))
        })
        .collect()
}
