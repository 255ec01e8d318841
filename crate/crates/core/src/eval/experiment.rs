//! Shared-information study between blendshape weights and affect labels.
//!
//! For each component count: fit the localized blendshape model on the
//! training deformations, project every frame onto it, reduce the weights to
//! two canonical variates against the (valence, arousal) labels, regress
//! each label from the variates with an RBF SVR, and score the held-out
//! subjects with CCC and MSE.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cca::cca_fit;
use super::metrics::{ccc, mse};
use super::svr::{median_gamma, svr_fit, SvrParams};
use crate::error::{Error, Result};
use crate::geom::Mesh;
use crate::splocs::{fit_splocs, DeformationMatrix, SolverConfig};

/// Blendshape weights and affect labels per frame.
#[derive(Debug, Clone)]
pub struct PairedData {
    /// `N x dX`.
    pub x: DMatrix<f64>,
    /// `N x 2`: valence, arousal.
    pub y: DMatrix<f64>,
    pub subject_ids: Vec<String>,
}

impl PairedData {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>, subject_ids: Vec<String>) -> Result<Self> {
        if x.nrows() != y.nrows() || x.nrows() != subject_ids.len() {
            return Err(Error::LengthMismatch {
                expected: x.nrows(),
                actual: y.nrows().min(subject_ids.len()),
            });
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("paired data"));
        }
        Ok(PairedData { x, y, subject_ids })
    }

    pub fn rows(&self, idx: &[usize]) -> PairedData {
        PairedData {
            x: self.x.select_rows(idx),
            y: self.y.select_rows(idx),
            subject_ids: idx.iter().map(|&i| self.subject_ids[i].clone()).collect(),
        }
    }
}

/// Frames of an annotated gallery: one difference vector per frame.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub template: Mesh,
    pub deformations: DeformationMatrix,
    /// `(valence, arousal)` per frame (column of `deformations`).
    pub labels: Vec<[f64; 2]>,
    pub subjects: Vec<String>,
}

impl ExperimentData {
    pub fn validate(&self) -> Result<()> {
        let m = self.deformations.n_samples();
        if self.labels.len() != m || self.subjects.len() != m {
            return Err(Error::LengthMismatch {
                expected: m,
                actual: self.labels.len().min(self.subjects.len()),
            });
        }
        if self.template.n_vertices() != self.deformations.n_vertices() {
            return Err(Error::TopologyMismatch("template and deformations disagree on n".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Subject-disjoint train/test frame indices.
pub fn subject_split(subjects: &[String], cfg: &SplitConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    let unique: Vec<&String> = subjects.iter().collect::<BTreeSet<_>>().into_iter().collect();
    if unique.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "subject-disjoint split needs at least 2 subjects, found {}",
            unique.len()
        )));
    }
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
        return Err(Error::InvalidInput("train_fraction must be in (0, 1)".into()));
    }
    let mut order = unique.clone();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_train = ((cfg.train_fraction * order.len() as f64).round() as usize).clamp(1, order.len() - 1);
    let train_subjects: BTreeSet<&String> = order[..n_train].iter().copied().collect();
    let (train, test): (Vec<usize>, Vec<usize>) =
        (0..subjects.len()).partition(|&i| train_subjects.contains(&subjects[i]));
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub component_counts: Vec<usize>,
    pub solver: SolverConfig,
    pub split: SplitConfig,
    pub svr_c: f64,
    pub svr_epsilon: f64,
    /// `None` selects the median heuristic on the training variates.
    pub svr_gamma: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            component_counts: vec![84, 150, 200, 300, 500],
            solver: SolverConfig::default(),
            split: SplitConfig::default(),
            svr_c: 1.0,
            svr_epsilon: 0.01,
            svr_gamma: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub components: usize,
    pub ccc_valence: f64,
    pub ccc_arousal: f64,
    pub mse_valence: f64,
    pub mse_arousal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub n_train: usize,
    pub n_test: usize,
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("components,ccc_valence,ccc_arousal,mse_valence,mse_arousal\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6}",
                r.components, r.ccc_valence, r.ccc_arousal, r.mse_valence, r.mse_arousal
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:>10} | {:^17} | {:^17}", "", "CCC", "MSE");
        let _ = writeln!(
            out,
            "{:>10} | {:>8} {:>8} | {:>8} {:>8}",
            "components", "Valence", "Arousal", "Valence", "Arousal"
        );
        let _ = writeln!(out, "{}", "-".repeat(51));
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>10} | {:>8.3} {:>8.3} | {:>8.3} {:>8.3}",
                r.components, r.ccc_valence, r.ccc_arousal, r.mse_valence, r.mse_arousal
            );
        }
        out
    }
}

pub fn run_correlation_experiment(data: &ExperimentData, cfg: &ExperimentConfig) -> Result<Report> {
    data.validate()?;
    if cfg.component_counts.is_empty() {
        return Err(Error::InvalidInput("no component counts to evaluate".into()));
    }
    let (train, test) = subject_split(&data.subjects, &cfg.split)?;
    if test.is_empty() || train.is_empty() {
        return Err(Error::InvalidInput("split produced an empty partition".into()));
    }
    let d_train = DeformationMatrix::from_matrix(data.deformations.matrix().select_columns(&train))?;
    let labels = DMatrix::from_fn(data.labels.len(), 2, |r, c| data.labels[r][c]);

    let rows: Vec<Result<ReportRow>> = std::thread::scope(|scope| {
        let handles: Vec<_> = cfg
            .component_counts
            .iter()
            .map(|&h| {
                let (d_train, labels, train, test) = (&d_train, &labels, &train, &test);
                scope.spawn(move || evaluate_components(data, cfg, h, d_train, labels, train, test))
            })
            .collect();
        handles
            .into_iter()
            .map(|hnd| hnd.join().expect("experiment worker panicked"))
            .collect()
    });
    Ok(Report {
        rows: rows.into_iter().collect::<Result<_>>()?,
        n_train: train.len(),
        n_test: test.len(),
    })
}

fn evaluate_components(
    data: &ExperimentData,
    cfg: &ExperimentConfig,
    h: usize,
    d_train: &DeformationMatrix,
    labels: &DMatrix<f64>,
    train: &[usize],
    test: &[usize],
) -> Result<ReportRow> {
    let solver = SolverConfig { h, ..cfg.solver.clone() };
    let model = fit_splocs(d_train, &data.template, &solver)?;
    let weights = model.project_matrix(&data.deformations)?;
    let paired = PairedData::new(weights, labels.clone(), data.subjects.clone())?;
    let tr = paired.rows(train);
    let te = paired.rows(test);

    let k = 2.min(h);
    let cca = cca_fit(&tr.x, &tr.y, k)?;
    let z_train = cca.transform(&tr.x)?;
    let z_test = cca.transform(&te.x)?;
    let gamma = match cfg.svr_gamma {
        Some(g) => g,
        None => median_gamma(&z_train)?,
    };
    let params = SvrParams::new(gamma, cfg.svr_c, cfg.svr_epsilon);

    let mut scores = [(0.0, 0.0); 2];
    for (target, score) in scores.iter_mut().enumerate() {
        let y_train: Vec<f64> = tr.y.column(target).iter().copied().collect();
        let y_test: Vec<f64> = te.y.column(target).iter().copied().collect();
        let svr = svr_fit(&z_train, &y_train, &params)?;
        let pred = svr.predict(&z_test)?;
        *score = (ccc(&y_test, &pred)?, mse(&y_test, &pred)?);
    }
    Ok(ReportRow {
        components: h,
        ccc_valence: scores[0].0,
        ccc_arousal: scores[1].0,
        mse_valence: scores[0].1,
        mse_arousal: scores[1].1,
    })
}
