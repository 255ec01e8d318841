#![allow(dead_code)]

use std::path::{Path, PathBuf};

use affectsynth::synthetic::GalleryPlan;
use affectsynth_cli::config::{Config, GeneratorConfig};
use affectsynth_cli::gallery::{build_gallery, Gallery};
use affectsynth_cli::generate::{generate_workspace, GeneratedWorkspace};
use affectsynth_cli::manifest::GalleryManifest;

pub fn small_config(seed: u64) -> Config {
    let mut cfg = Config {
        seed,
        generator: GeneratorConfig {
            plan: GalleryPlan {
                subjects: 3,
                sequences_per_subject: 2,
                frames_per_sequence: 8,
                ..GalleryPlan::default()
            },
            fixture_size: 96,
            dataset_subjects: 2,
            ..GeneratorConfig::default()
        },
        ..Config::default()
    };
    cfg.gallery.cell_components = 4;
    cfg.synthesis.preview_size = 64;
    cfg.propagate_seed();
    cfg
}

pub struct Workspace {
    pub dir: tempfile::TempDir,
    pub cfg: Config,
    pub generated: GeneratedWorkspace,
    pub manifest: GalleryManifest,
    pub gallery: Gallery,
}

impl Workspace {
    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn fixture(&self) -> (PathBuf, PathBuf) {
        (self.generated.fixture_image.clone(), self.generated.fixture_landmarks.clone())
    }
}

/// Generated workspace with its gallery built.
pub fn workspace(cfg: Config) -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let generated = generate_workspace(cfg.seed, &cfg.generator, dir.path()).unwrap();
    let manifest = GalleryManifest::load(&generated.manifest_path).unwrap();
    let outcome = build_gallery(&manifest, &cfg.gallery).unwrap();
    let gallery = Gallery::load(&outcome.dir).unwrap();
    Workspace {
        dir,
        cfg,
        generated,
        manifest,
        gallery,
    }
}

/// 8-bit RGB samples of a PNG, row-major.
pub fn png_pixels(path: &Path) -> Vec<u8> {
    affectsynth::raster::Image::load_png(path).unwrap().to_rgb8().into_raw()
}
