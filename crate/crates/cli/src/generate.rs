//! `gen-gallery`: a complete synthetic workspace (gallery meshes, morphable
//! model, manifest, a photo fixture and a small augmentation dataset).

use std::fs;
use std::path::{Path, PathBuf};

use affectsynth::container::save_morphable_model;
use affectsynth::mmfit::{rotation_from_euler, MorphableModel};
use affectsynth::synthetic::{
    fixture_camera, generate_synthetic_gallery, render_face_fixture, synthetic_morphable_model, FaceFixture,
    SyntheticGallery,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::GeneratorConfig;
use crate::error::{CliError, Result};
use crate::manifest::{Dataset, DatasetRow, GalleryManifest};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const MODEL_FILE: &str = "model.afsy";

#[derive(Debug, Clone)]
pub struct GeneratedWorkspace {
    pub manifest_path: PathBuf,
    pub fixture_image: PathBuf,
    pub fixture_landmarks: PathBuf,
    pub dataset: PathBuf,
    pub gallery: SyntheticGallery,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Identity coefficients drawn uniformly within one standard deviation.
pub fn sample_identity(model: &MorphableModel, rng: &mut ChaCha8Rng) -> Vec<f64> {
    model
        .eigenvalues()
        .iter()
        .map(|ev| rng.random_range(-1.0..=1.0) * ev.sqrt())
        .collect()
}

fn render_subject(model: &MorphableModel, cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<FaceFixture> {
    let coeffs = sample_identity(model, rng);
    let rotation = rotation_from_euler(rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15), rng.random_range(-0.1..0.1));
    let size = cfg.fixture_size;
    let camera = fixture_camera(size, size, rotation)?;
    Ok(render_face_fixture(model, &camera, &coeffs, size, size, cfg.landmark_count)?)
}

#[derive(Serialize)]
struct FixtureTruth<'a> {
    coeffs: &'a [f64],
    scale: f64,
    rotation: [[f64; 3]; 3],
    translation: [f64; 2],
}

fn save_fixture(fx: &FaceFixture, image: &Path, landmarks: &Path) -> Result<()> {
    fx.image.save_png(image)?;
    write(landmarks, fx.landmarks.to_csv_string())
}

pub fn generate_workspace(seed: u64, cfg: &GeneratorConfig, out: &Path) -> Result<GeneratedWorkspace> {
    if cfg.fixture_size < 16 {
        return Err(CliError::field("fixture_size", "must be at least 16"));
    }
    let gallery = generate_synthetic_gallery(seed, &cfg.plan)?;
    let gallery_dir = out.join("gallery");
    mkdir(&gallery_dir)?;
    gallery.write_to(&gallery_dir)?;

    let model = synthetic_morphable_model(&gallery.template, cfg.model_components, cfg.model_sigma, seed)?;
    save_morphable_model(&model, out.join(MODEL_FILE))?;

    let manifest = GalleryManifest {
        mesh_dir: "gallery/meshes".into(),
        annotations: "gallery/annotations.csv".into(),
        template: "gallery/template.obj".into(),
        morphable_model: Some(MODEL_FILE.into()),
        cache_dir: "cache".into(),
    };
    let manifest_path = out.join(MANIFEST_FILE);
    write(&manifest_path, manifest.to_toml())?;

    // separate stream so the gallery does not depend on fixture settings
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f1c7);
    let fixture_dir = out.join("fixture");
    mkdir(&fixture_dir)?;
    let fx = render_subject(&model, cfg, &mut rng)?;
    let fixture_image = fixture_dir.join("neutral.png");
    let fixture_landmarks = fixture_dir.join("landmarks.csv");
    save_fixture(&fx, &fixture_image, &fixture_landmarks)?;
    let r = fx.camera.rotation;
    let truth = FixtureTruth {
        coeffs: &fx.coeffs,
        scale: fx.camera.scale,
        rotation: std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)])),
        translation: [fx.camera.translation.x, fx.camera.translation.y],
    };
    write(
        &fixture_dir.join("truth.json"),
        serde_json::to_string_pretty(&truth).expect("truth serializes"),
    )?;

    let dataset_dir = out.join("dataset");
    mkdir(&dataset_dir.join("images"))?;
    mkdir(&dataset_dir.join("landmarks"))?;
    let mut rows = Vec::new();
    for s in 0..cfg.dataset_subjects {
        let fx = render_subject(&model, cfg, &mut rng)?;
        let subject = format!("p{s:02}");
        // the same photo twice: once labeled neutral, once with a non-neutral label
        for (tag, v, a) in [("neutral", 0.0, 0.0), ("labeled", 0.4, 0.3)] {
            let image = format!("images/{subject}_{tag}.png");
            let landmarks = format!("landmarks/{subject}_{tag}.csv");
            save_fixture(&fx, &dataset_dir.join(&image), &dataset_dir.join(&landmarks))?;
            rows.push(DatasetRow {
                image,
                landmarks,
                subject_id: subject.clone(),
                valence: v,
                arousal: a,
            });
        }
    }
    let dataset = Dataset {
        base: dataset_dir.clone(),
        rows,
    };
    let dataset_path = dataset_dir.join("labels.csv");
    write(&dataset_path, dataset.to_csv_string())?;

    Ok(GeneratedWorkspace {
        manifest_path,
        fixture_image,
        fixture_landmarks,
        dataset: dataset_path,
        gallery,
    })
}
