//! Gallery manifest: where the meshes, labels, template and morphable model
//! live, and where built galleries are cached. Relative paths resolve
//! against the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GalleryManifest {
    /// Directory holding `<frame_id>.obj` for every annotated frame.
    pub mesh_dir: PathBuf,
    /// CSV `frame_id,sequence_id,neutral_frame_id,valence,arousal`.
    pub annotations: PathBuf,
    pub template: PathBuf,
    /// Morphable-model container; needed only for image processing.
    #[serde(default)]
    pub morphable_model: Option<PathBuf>,
    pub cache_dir: PathBuf,
}

impl GalleryManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut m: GalleryManifest =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        m.resolve_against(base);
        m.check_exists()?;
        Ok(m)
    }

    fn resolve_against(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.mesh_dir);
        fix(&mut self.annotations);
        fix(&mut self.template);
        fix(&mut self.cache_dir);
        if let Some(p) = self.morphable_model.as_mut() {
            fix(p);
        }
    }

    fn check_exists(&self) -> Result<()> {
        let mut required = vec![
            ("mesh_dir", &self.mesh_dir),
            ("annotations", &self.annotations),
            ("template", &self.template),
        ];
        if let Some(p) = &self.morphable_model {
            required.push(("morphable_model", p));
        }
        for (field, path) in required {
            if !path.exists() {
                return Err(CliError::field(field, format!("{} does not exist", path.display())));
            }
        }
        Ok(())
    }

    pub fn morphable_model_path(&self) -> Result<&Path> {
        self.morphable_model
            .as_deref()
            .ok_or_else(|| CliError::field("morphable_model", "manifest has no morphable_model entry"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Augmentation dataset row. `image` and `landmarks` are as written in the
/// CSV, relative to the CSV's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub image: String,
    pub landmarks: String,
    pub subject_id: String,
    pub valence: f64,
    pub arousal: f64,
}

pub const DATASET_HEADER: [&str; 5] = ["image", "landmarks", "subject_id", "valence", "arousal"];

#[derive(Debug, Clone)]
pub struct Dataset {
    pub base: PathBuf,
    pub rows: Vec<DatasetRow>,
}

impl Dataset {
    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_relative() {
            self.base.join(p)
        } else {
            p.to_path_buf()
        }
    }

    /// CSV with header `image,landmarks,subject_id,valence,arousal`.
    pub fn load(path: &Path) -> Result<Self> {
        let err = |e: csv::Error| CliError::Config(format!("{}: {e}", path.display()));
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(err)?;
        let header = rdr.headers().map_err(err)?;
        if header.iter().collect::<Vec<_>>() != DATASET_HEADER {
            return Err(CliError::Config(format!(
                "{}: header must be {}",
                path.display(),
                DATASET_HEADER.join(",")
            )));
        }
        let rows = rdr
            .deserialize::<DatasetRow>()
            .enumerate()
            .map(|(i, r)| r.map_err(|e| CliError::Config(format!("{} row {}: {e}", path.display(), i + 2))))
            .collect::<Result<Vec<_>>>()?;
        for (i, r) in rows.iter().enumerate() {
            if !(r.valence.is_finite() && r.arousal.is_finite()) {
                return Err(CliError::Config(format!("{} row {}: non-finite label", path.display(), i + 2)));
            }
        }
        Ok(Dataset {
            base: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
            rows,
        })
    }

    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
    }
}
