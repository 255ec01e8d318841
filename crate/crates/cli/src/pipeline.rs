//! Photo pipeline: reconstruct the face, move the synthesized expression onto
//! it, render it back into the photo and blend.

use std::path::Path;
use std::time::Instant;

use affectsynth::geom::{LandmarkSet, Mesh};
use affectsynth::mmfit::{fit_3dmm, FitConfig, MorphableModel, ReconstructedFace};
use affectsynth::raster::{poisson_blend, rasterize_onto, Image, Mask};
use affectsynth::transfer::{compute_delta, transfer};
use log::info;

use crate::error::{AtStage, Result, Stage};
use crate::gallery::Gallery;
use crate::synth::{render_preview, synthesize, SynthRequest, Synthesized};

fn timed<T>(stage: Stage, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let started = Instant::now();
    let out = f();
    info!("stage {stage}: {:.2?}", started.elapsed());
    out
}

/// Photo with its fitted face, ready for any number of syntheses.
#[derive(Debug, Clone)]
pub struct FittedPhoto {
    pub image: Image,
    pub landmarks: LandmarkSet,
    pub face: ReconstructedFace,
}

pub fn load_photo(image_path: &Path, landmarks_path: &Path, n_vertices: usize) -> Result<(Image, LandmarkSet)> {
    let image = timed(Stage::LoadImage, || Image::load_png(image_path).at(Stage::LoadImage))?;
    let landmarks = timed(Stage::LoadLandmarks, || {
        LandmarkSet::load(landmarks_path, n_vertices).at(Stage::LoadLandmarks)
    })?;
    Ok((image, landmarks))
}

pub fn fit_photo(image: Image, landmarks: LandmarkSet, model: &MorphableModel, cfg: &FitConfig) -> Result<FittedPhoto> {
    let face = timed(Stage::Fit, || fit_3dmm(&image, &landmarks, model, cfg).at(Stage::Fit))?;
    info!("fit reprojection rmse {:.4} px", face.rmse());
    Ok(FittedPhoto { image, landmarks, face })
}

#[derive(Debug, Clone)]
pub struct Composite {
    pub synthesized: Synthesized,
    /// Reconstructed face carrying the transferred expression.
    pub expressive: Mesh,
    pub image: Image,
    /// Pixels the blend was allowed to change.
    pub mask: Mask,
}

/// Synthesize, transfer, rasterize over a copy of the photo, blend.
pub fn composite(photo: &FittedPhoto, gallery: &Gallery, req: &SynthRequest) -> Result<Composite> {
    let synthesized = timed(Stage::Synthesize, || synthesize(gallery, req))?;
    composite_synthesized(photo, gallery, synthesized)
}

pub fn composite_synthesized(photo: &FittedPhoto, gallery: &Gallery, synthesized: Synthesized) -> Result<Composite> {
    let expressive = timed(Stage::Transfer, || {
        // the request's intensity is already baked into the synthesized mesh
        let delta = compute_delta(&synthesized.mesh, &gallery.template).at(Stage::Transfer)?;
        transfer(&photo.face.mesh, &delta, 1.0).at(Stage::Transfer)
    })?;
    let (rendered, coverage) = timed(Stage::Rasterize, || {
        let mut rendered = photo.image.clone();
        let mask = rasterize_onto(&expressive, &photo.face.camera, &photo.face.vertex_colors, &mut rendered)
            .at(Stage::Rasterize)?;
        Ok((rendered, mask))
    })?;
    let blended = timed(Stage::Blend, || {
        // pixels on the silhouette are ambiguous under any sub-pixel misfit,
        // so the outermost covered ring keeps the photo and bounds the solve
        let inner = coverage.eroded();
        let mut source = rendered;
        for (col, row) in coverage.iter_inside() {
            if !inner.get(col, row) {
                source.set_pixel(col, row, photo.image.pixel(col, row));
            }
        }
        poisson_blend(&source, &photo.image, &inner).at(Stage::Blend)
    })?;
    Ok(Composite {
        synthesized,
        expressive,
        image: blended.image,
        mask: blended.mask,
    })
}

/// Whole pipeline from files; returns the PNG bytes written to `out`.
pub fn process_image(
    image_path: &Path,
    landmarks_path: &Path,
    model: &MorphableModel,
    gallery: &Gallery,
    fit: &FitConfig,
    req: &SynthRequest,
    out: &Path,
) -> Result<Composite> {
    req.validate()?;
    let (image, landmarks) = load_photo(image_path, landmarks_path, model.mean().n_vertices())?;
    let photo = fit_photo(image, landmarks, model, fit)?;
    let result = composite(&photo, gallery, req)?;
    timed(Stage::WriteOutput, || result.image.save_png(out).at(Stage::WriteOutput))?;
    Ok(result)
}

/// Image answer to a synthesis request: the composite over `photo` when
/// given, otherwise a shaded preview of the template-space mesh.
pub fn render_request(
    gallery: &Gallery,
    photo: Option<&FittedPhoto>,
    req: &SynthRequest,
    preview_size: usize,
) -> Result<(Synthesized, Image)> {
    match photo {
        Some(photo) => {
            let c = composite(photo, gallery, req)?;
            Ok((c.synthesized, c.image))
        }
        None => {
            let s = timed(Stage::Synthesize, || synthesize(gallery, req))?;
            let image = timed(Stage::Rasterize, || render_preview(&s.mesh, preview_size))?;
            Ok((s, image))
        }
    }
}
