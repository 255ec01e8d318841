//! `evaluate`: the weights-versus-affect correlation study on a gallery.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use affectsynth::eval::{run_correlation_experiment, ExperimentConfig, ExperimentData, Report};
use affectsynth::geom::parse_obj;
use affectsynth::splocs::DeformationMatrix;
use affectsynth::va_grid::AnnotationSet;
use log::info;

use crate::error::{CliError, Result};
use crate::gallery::expressive_deformations;
use crate::manifest::GalleryManifest;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

/// Expressive frames of the manifest's gallery with labels and subjects.
pub fn load_experiment_data(manifest: &GalleryManifest) -> Result<ExperimentData> {
    let template_text = fs::read_to_string(&manifest.template).map_err(|e| CliError::io(&manifest.template, e))?;
    let template = parse_obj(&template_text, &manifest.template.display().to_string())?;
    let annotations = AnnotationSet::from_csv(&read(&manifest.annotations)?, &manifest.annotations.display().to_string())?;
    let mut meshes = BTreeMap::new();
    for a in annotations.annotations() {
        for id in [&a.frame_id, &a.neutral_frame_id] {
            if !meshes.contains_key(id) {
                meshes.insert(id.clone(), read(&manifest.mesh_dir.join(format!("{id}.obj")))?);
            }
        }
    }
    let pairs = expressive_deformations(manifest, &annotations, &meshes, &template)?;
    if pairs.is_empty() {
        return Err(CliError::Gallery("empty gallery: no expressive frames".into()));
    }
    let fields: Vec<_> = pairs.iter().map(|(_, f)| f.clone()).collect();
    Ok(ExperimentData {
        template,
        deformations: DeformationMatrix::from_fields(&fields)?,
        labels: pairs.iter().map(|(a, _)| [a.valence, a.arousal]).collect(),
        subjects: pairs.iter().map(|(a, _)| a.subject_id().to_string()).collect(),
    })
}

/// Runs the study and writes `report.csv` and `report.txt` under `out`.
pub fn evaluate(manifest: &GalleryManifest, cfg: &ExperimentConfig, out: &Path) -> Result<Report> {
    let data = load_experiment_data(manifest)?;
    info!(
        "evaluating {} frames over component counts {:?}",
        data.labels.len(),
        cfg.component_counts
    );
    let report = run_correlation_experiment(&data, cfg)?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let csv = out.join("report.csv");
    fs::write(&csv, report.to_csv()).map_err(|e| CliError::io(&csv, e))?;
    let txt = out.join("report.txt");
    let text = format!(
        "train frames: {}\ntest frames: {}\n\n{}",
        report.n_train,
        report.n_test,
        report.to_table()
    );
    fs::write(&txt, text).map_err(|e| CliError::io(&txt, e))?;
    Ok(report)
}
