//! Deterministic synthetic galleries with planted localized components,
//! synthetic morphable models and rendered face fixtures.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::ExperimentData;
use crate::geom::{diff, grid_surface, DeformationField, LandmarkSet, Mesh};
use crate::mmfit::{Camera, MorphableModel};
use crate::raster::{rasterize_onto, Image};
use crate::splocs::DeformationMatrix;
use crate::va_grid::{Annotation, AnnotationSet, CellIndex, CELL_WIDTH};

/// How affect labels relate to the latent component weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum VaPlan {
    /// `valence = sum_j valence[j] * w_j`, same for arousal; missing
    /// coefficients are zero. Results are clamped to `[-1, 1]`.
    Linear { valence: Vec<f64>, arousal: Vec<f64> },
    /// Frames cycle through the listed cells and draw labels uniformly
    /// inside them, independent of the weights.
    Cells { cells: Vec<CellIndex> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GalleryPlan {
    pub subjects: usize,
    pub sequences_per_subject: usize,
    /// Expressive frames per sequence; each sequence also has one neutral.
    pub frames_per_sequence: usize,
    pub mesh_rows: usize,
    pub mesh_cols: usize,
    pub components: usize,
    pub component_radius: f64,
    /// Peak displacement of a component at unit weight.
    pub amplitude: f64,
    pub identity_scale: f64,
    pub mesh_noise: f64,
    pub label_noise: f64,
    pub va: VaPlan,
}

impl Default for GalleryPlan {
    fn default() -> Self {
        GalleryPlan {
            subjects: 10,
            sequences_per_subject: 2,
            frames_per_sequence: 30,
            mesh_rows: 20,
            mesh_cols: 25,
            components: 5,
            component_radius: 0.3,
            amplitude: 0.1,
            identity_scale: 0.05,
            mesh_noise: 0.0,
            label_noise: 0.0,
            va: VaPlan::Linear {
                valence: vec![0.6, 0.25],
                arousal: vec![0.0, 0.2, 0.6],
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct GalleryFrame {
    pub annotation: Annotation,
    pub mesh: Mesh,
    /// Planted component weights; all zero for neutral frames.
    pub latent: Vec<f64>,
}

impl GalleryFrame {
    pub fn is_neutral(&self) -> bool {
        self.annotation.frame_id == self.annotation.neutral_frame_id
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticGallery {
    pub template: Mesh,
    pub frames: Vec<GalleryFrame>,
    /// Ground-truth components, `3n x k`, each with max-abs entry 1.
    pub components: DMatrix<f64>,
    /// Vertex supports of the planted components.
    pub supports: Vec<Vec<usize>>,
    pub centers: Vec<usize>,
}

/// Smooth dome used as the neutral template of synthetic galleries.
pub fn face_template(rows: usize, cols: usize) -> Mesh {
    grid_surface(rows, cols, |x, y| 0.5 * (1.0 - 0.35 * (x * x + y * y)))
}

/// Greedy farthest-point centers inside the region where a full support
/// ball fits, starting from the vertex nearest the origin.
fn plant_centers(template: &Mesh, k: usize, radius: f64) -> Result<Vec<usize>> {
    let verts = template.vertices();
    let margin = 1.0 - radius;
    let eligible: Vec<usize> = (0..verts.len())
        .filter(|&i| verts[i][0].abs() <= margin && verts[i][1].abs() <= margin)
        .collect();
    if eligible.len() < k {
        return Err(Error::InvalidInput("plan infeasible: no room for components".into()));
    }
    let dist2 = |a: usize, b: usize| {
        let (p, q) = (verts[a], verts[b]);
        (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)
    };
    let first = *eligible
        .iter()
        .min_by(|&&a, &&b| {
            let na = verts[a][0].powi(2) + verts[a][1].powi(2);
            let nb = verts[b][0].powi(2) + verts[b][1].powi(2);
            na.total_cmp(&nb).then(a.cmp(&b))
        })
        .expect("non-empty");
    let mut centers = vec![first];
    while centers.len() < k {
        let next = *eligible
            .iter()
            .max_by(|&&a, &&b| {
                let da = centers.iter().map(|&c| dist2(a, c)).fold(f64::INFINITY, f64::min);
                let db = centers.iter().map(|&c| dist2(b, c)).fold(f64::INFINITY, f64::min);
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("non-empty");
        centers.push(next);
    }
    for (i, &a) in centers.iter().enumerate() {
        for &b in &centers[i + 1..] {
            if dist2(a, b).sqrt() < 2.0 * radius {
                return Err(Error::InvalidInput(format!(
                    "plan infeasible: {k} components of radius {radius} cannot have disjoint supports"
                )));
            }
        }
    }
    Ok(centers)
}

/// Compactly supported bumps `(1 - (d/r)^2)^2` along a random direction,
/// scaled so each column's max-abs entry is 1.
fn planted_components(
    template: &Mesh,
    centers: &[usize],
    radius: f64,
    rng: &mut ChaCha8Rng,
) -> (DMatrix<f64>, Vec<Vec<usize>>) {
    let verts = template.vertices();
    let n = verts.len();
    let mut b = DMatrix::zeros(3 * n, centers.len());
    let mut supports = Vec::with_capacity(centers.len());
    for (k, &c) in centers.iter().enumerate() {
        let mut dir: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        // keep a dominant coordinate so the direction is well away from zero
        let dom = k % 3;
        dir[dom] = if dir[dom] >= 0.0 { 1.0 } else { -1.0 };
        let scale = dir.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        let dir = dir.map(|d| d / scale);
        let mut support = Vec::new();
        for (i, v) in verts.iter().enumerate() {
            let d = ((v[0] - verts[c][0]).powi(2) + (v[1] - verts[c][1]).powi(2) + (v[2] - verts[c][2]).powi(2)).sqrt();
            if d < radius {
                let w = (1.0 - (d / radius).powi(2)).powi(2);
                for a in 0..3 {
                    b[(3 * i + a, k)] = w * dir[a];
                }
                support.push(i);
            }
        }
        supports.push(support);
    }
    (b, supports)
}

fn smooth_identity(template: &Mesh, scale: f64, rng: &mut ChaCha8Rng) -> DeformationField {
    let coeffs: Vec<[f64; 3]> = (0..5)
        .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
        .collect();
    let disp = template
        .vertices()
        .iter()
        .flat_map(|v| {
            let basis = [v[0], v[1], v[0] * v[1], v[0] * v[0], v[1] * v[1]];
            let mut d = [0.0; 3];
            for (bf, c) in basis.iter().zip(&coeffs) {
                for a in 0..3 {
                    d[a] += scale * bf * c[a];
                }
            }
            d
        })
        .collect();
    DeformationField::new(disp).expect("finite")
}

pub fn generate_synthetic_gallery(seed: u64, plan: &GalleryPlan) -> Result<SyntheticGallery> {
    if plan.subjects == 0 || plan.sequences_per_subject == 0 || plan.frames_per_sequence == 0 {
        return Err(Error::InvalidInput("plan infeasible: empty gallery".into()));
    }
    if plan.components == 0 {
        return Err(Error::InvalidInput("plan infeasible: no components".into()));
    }
    if plan.mesh_rows < 2 || plan.mesh_cols < 2 {
        return Err(Error::InvalidInput("plan infeasible: mesh needs at least 2x2 vertices".into()));
    }
    if !(plan.component_radius > 0.0 && plan.amplitude >= 0.0 && plan.mesh_noise >= 0.0 && plan.label_noise >= 0.0) {
        return Err(Error::InvalidInput("plan infeasible: negative scale parameter".into()));
    }
    if let VaPlan::Cells { cells } = &plan.va {
        if cells.is_empty() {
            return Err(Error::InvalidInput("plan infeasible: no target cells".into()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = face_template(plan.mesh_rows, plan.mesh_cols);
    let centers = plant_centers(&template, plan.components, plan.component_radius)?;
    let (components, supports) = planted_components(&template, &centers, plan.component_radius, &mut rng);
    let mesh_noise = Normal::new(0.0, plan.mesh_noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let label_noise = Normal::new(0.0, plan.label_noise.max(f64::MIN_POSITIVE)).expect("valid sigma");

    let mut frames = Vec::new();
    let mut expressive_index = 0usize;
    for s in 0..plan.subjects {
        let identity = smooth_identity(&template, plan.identity_scale, &mut rng);
        let neutral = crate::geom::apply(&template, &identity)?;
        for q in 0..plan.sequences_per_subject {
            let sequence_id = format!("s{s:02}/q{q:02}");
            let neutral_id = format!("s{s:02}_q{q:02}_neutral");
            frames.push(GalleryFrame {
                annotation: Annotation {
                    frame_id: neutral_id.clone(),
                    sequence_id: sequence_id.clone(),
                    neutral_frame_id: neutral_id.clone(),
                    valence: 0.0,
                    arousal: 0.0,
                },
                mesh: neutral.clone(),
                latent: vec![0.0; plan.components],
            });
            for f in 0..plan.frames_per_sequence {
                let latent: Vec<f64> = (0..plan.components).map(|_| rng.random_range(-1.0..1.0)).collect();
                let offset = &components * nalgebra::DVector::from_column_slice(&latent) * plan.amplitude;
                let mut coords = neutral.flat_coords();
                for (c, o) in coords.iter_mut().zip(offset.iter()) {
                    *c += o;
                    if plan.mesh_noise > 0.0 {
                        *c += mesh_noise.sample(&mut rng);
                    }
                }
                let mesh = neutral.with_flat_coords(&coords)?;
                let (valence, arousal) = match &plan.va {
                    VaPlan::Linear { valence, arousal } => {
                        let dot = |coef: &[f64]| coef.iter().zip(&latent).map(|(a, w)| a * w).sum::<f64>();
                        let mut v = dot(valence);
                        let mut a = dot(arousal);
                        if plan.label_noise > 0.0 {
                            v += label_noise.sample(&mut rng);
                            a += label_noise.sample(&mut rng);
                        }
                        (v.clamp(-1.0, 1.0), a.clamp(-1.0, 1.0))
                    }
                    VaPlan::Cells { cells } => {
                        let cell = cells[expressive_index % cells.len()];
                        let (v0, _, a0, _) = cell.bounds();
                        let v = v0 + CELL_WIDTH * rng.random_range(0.05..0.95);
                        let a = a0 + CELL_WIDTH * rng.random_range(0.05..0.95);
                        (v, a)
                    }
                };
                frames.push(GalleryFrame {
                    annotation: Annotation {
                        frame_id: format!("s{s:02}_q{q:02}_f{f:03}"),
                        sequence_id: sequence_id.clone(),
                        neutral_frame_id: neutral_id.clone(),
                        valence,
                        arousal,
                    },
                    mesh,
                    latent,
                });
                expressive_index += 1;
            }
        }
    }

    Ok(SyntheticGallery {
        template,
        frames,
        components,
        supports,
        centers,
    })
}

impl SyntheticGallery {
    pub fn annotations(&self) -> Result<AnnotationSet> {
        AnnotationSet::new(self.frames.iter().map(|f| f.annotation.clone()).collect())
    }

    pub fn expressive_frames(&self) -> impl Iterator<Item = &GalleryFrame> {
        self.frames.iter().filter(|f| !f.is_neutral())
    }

    fn neutral_of(&self, frame: &GalleryFrame) -> &Mesh {
        &self
            .frames
            .iter()
            .find(|f| f.annotation.frame_id == frame.annotation.neutral_frame_id)
            .expect("generator pairs every frame with its neutral")
            .mesh
    }

    /// Difference vectors of the expressive frames, in frame order.
    pub fn deformation_matrix(&self) -> Result<DeformationMatrix> {
        let fields = self
            .expressive_frames()
            .map(|f| diff(&f.mesh, self.neutral_of(f)))
            .collect::<Result<Vec<_>>>()?;
        DeformationMatrix::from_fields(&fields)
    }

    pub fn experiment_data(&self) -> Result<ExperimentData> {
        let frames: Vec<&GalleryFrame> = self.expressive_frames().collect();
        Ok(ExperimentData {
            template: self.template.clone(),
            deformations: self.deformation_matrix()?,
            labels: frames.iter().map(|f| [f.annotation.valence, f.annotation.arousal]).collect(),
            subjects: frames.iter().map(|f| f.annotation.subject_id().to_string()).collect(),
        })
    }

    /// Writes `template.obj`, `annotations.csv`, `meshes/<frame_id>.obj` and
    /// `ground_truth.json` under `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let mesh_dir = dir.join("meshes");
        fs::create_dir_all(&mesh_dir).map_err(|e| Error::io(&mesh_dir, e))?;
        self.template.save(dir.join("template.obj"))?;
        let csv_path = dir.join("annotations.csv");
        fs::write(&csv_path, self.annotations()?.to_csv_string()).map_err(|e| Error::io(&csv_path, e))?;
        for f in &self.frames {
            f.mesh.save(mesh_dir.join(format!("{}.obj", f.annotation.frame_id)))?;
        }
        #[derive(Serialize)]
        struct GroundTruth<'a> {
            centers: &'a [usize],
            supports: &'a [Vec<usize>],
            latent: Vec<(&'a str, &'a [f64])>,
        }
        let gt = GroundTruth {
            centers: &self.centers,
            supports: &self.supports,
            latent: self
                .frames
                .iter()
                .map(|f| (f.annotation.frame_id.as_str(), f.latent.as_slice()))
                .collect(),
        };
        let gt_path = dir.join("ground_truth.json");
        let text = serde_json::to_string_pretty(&gt).map_err(|e| Error::Container(e.to_string()))?;
        fs::write(&gt_path, text).map_err(|e| Error::io(&gt_path, e))
    }
}

/// Morphable model over `mean` with `p` smooth orthonormal identity modes
/// and eigenvalues decaying as `sigma^2 / (j + 1)^2`.
pub fn synthetic_morphable_model(mean: &Mesh, p: usize, sigma: f64, seed: u64) -> Result<MorphableModel> {
    if p == 0 {
        return Err(Error::InvalidInput("morphable model needs p >= 1".into()));
    }
    let n = mean.n_vertices();
    if 3 * n < p {
        return Err(Error::InvalidInput("more identity modes than coordinates".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let verts = mean.vertices();
    let raw = DMatrix::from_fn(3 * n, p, |_, _| 0.0);
    let mut raw = raw;
    for j in 0..p {
        let fx = rng.random_range(0.5..2.0);
        let fy = rng.random_range(0.5..2.0);
        let ph: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
        let amp: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..1.0));
        for (i, v) in verts.iter().enumerate() {
            for a in 0..3 {
                raw[(3 * i + a, j)] = amp[a] * (fx * v[0] + ph[a]).sin() * (fy * v[1] + 0.5 * ph[a]).cos();
            }
        }
    }
    let q = raw.qr().q();
    let eigenvalues = (0..p).map(|j| (sigma / (j as f64 + 1.0)).powi(2)).collect();
    MorphableModel::new(mean.clone(), q.columns(0, p).into_owned(), eigenvalues)
}

/// Smooth per-vertex colors derived from rest positions.
pub fn smooth_vertex_colors(mesh: &Mesh) -> Vec<[f64; 3]> {
    mesh.vertices()
        .iter()
        .map(|v| {
            [
                (0.62 + 0.12 * v[0]).clamp(0.0, 1.0),
                (0.48 + 0.10 * v[1]).clamp(0.0, 1.0),
                (0.40 + 0.15 * v[2]).clamp(0.0, 1.0),
            ]
        })
        .collect()
}

/// Vertical gradient background.
pub fn gradient_background(width: usize, height: usize) -> Image {
    let data = (0..height)
        .flat_map(|r| {
            let t = r as f64 / height.max(1) as f64;
            (0..width).flat_map(move |c| {
                let s = c as f64 / width.max(1) as f64;
                [0.2 + 0.3 * t, 0.3 + 0.2 * s, 0.5 - 0.2 * t]
            })
        })
        .collect();
    Image::new(width, height, data).expect("well-formed")
}

/// A face rendered from known camera and identity coefficients, with the
/// landmark observations that produced it.
#[derive(Debug, Clone)]
pub struct FaceFixture {
    pub image: Image,
    pub landmarks: LandmarkSet,
    pub camera: Camera,
    pub coeffs: Vec<f64>,
    pub mesh: Mesh,
}

/// Default fixture camera: the `[-1, 1]^2` template fills the central
/// ~60% of the frame.
pub fn fixture_camera(width: usize, height: usize, rotation: nalgebra::Matrix3<f64>) -> Result<Camera> {
    let scale = 0.3 * width.min(height) as f64;
    Camera::new(
        scale,
        rotation,
        Vector2::new(0.5 * (width as f64 - 1.0), 0.5 * (height as f64 - 1.0)),
    )
}

/// Evenly spaced landmark vertices.
pub fn landmark_indices(n_vertices: usize, count: usize) -> Vec<usize> {
    let count = count.min(n_vertices).max(1);
    (0..count).map(|i| i * n_vertices / count).collect()
}

pub fn render_face_fixture(
    model: &MorphableModel,
    camera: &Camera,
    coeffs: &[f64],
    width: usize,
    height: usize,
    landmark_count: usize,
) -> Result<FaceFixture> {
    let mesh = model.shape(coeffs)?;
    let colors = smooth_vertex_colors(model.mean());
    let mut image = gradient_background(width, height);
    rasterize_onto(&mesh, camera, &colors, &mut image)?;
    // quantize as a PNG round trip would
    let image = Image::from_rgb8(&image.to_rgb8());
    let indices = landmark_indices(mesh.n_vertices(), landmark_count);
    let points = indices.iter().map(|&i| camera.project_point(mesh.vertices()[i])).collect();
    let landmarks = LandmarkSet::new(points, indices, mesh.n_vertices())?;
    Ok(FaceFixture {
        image,
        landmarks,
        camera: *camera,
        coeffs: coeffs.to_vec(),
        mesh,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::va_grid::{cell_of, VaGrid};

    #[test]
    fn same_seed_same_gallery() {
        let plan = GalleryPlan {
            subjects: 2,
            frames_per_sequence: 3,
            ..GalleryPlan::default()
        };
        let a = generate_synthetic_gallery(7, &plan).unwrap();
        let b = generate_synthetic_gallery(7, &plan).unwrap();
        assert_eq!(a.frames.len(), b.frames.len());
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.mesh.to_obj_string(), fb.mesh.to_obj_string());
            assert_eq!(fa.annotation, fb.annotation);
        }
    }

    #[test]
    fn planted_supports_are_disjoint_and_unit_max() {
        let g = generate_synthetic_gallery(1, &GalleryPlan::default()).unwrap();
        for (i, a) in g.supports.iter().enumerate() {
            for b in &g.supports[i + 1..] {
                assert!(a.iter().all(|v| !b.contains(v)));
            }
        }
        for col in g.components.column_iter() {
            assert!((col.amax() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn infeasible_plans_refused() {
        let crowded = GalleryPlan {
            components: 40,
            ..GalleryPlan::default()
        };
        assert!(generate_synthetic_gallery(0, &crowded).is_err());
        let empty = GalleryPlan {
            subjects: 0,
            ..GalleryPlan::default()
        };
        assert!(generate_synthetic_gallery(0, &empty).is_err());
    }

    #[test]
    fn cell_plan_hits_requested_cells() {
        let cells: Vec<CellIndex> = (0..4).map(|i| CellIndex { row: i, col: 9 - i }).collect();
        let plan = GalleryPlan {
            subjects: 2,
            sequences_per_subject: 1,
            frames_per_sequence: 8,
            va: VaPlan::Cells { cells: cells.clone() },
            ..GalleryPlan::default()
        };
        let g = generate_synthetic_gallery(3, &plan).unwrap();
        for f in g.expressive_frames() {
            let c = cell_of(f.annotation.valence, f.annotation.arousal).unwrap();
            assert!(cells.contains(&c));
        }
        let grid = VaGrid::build(g.annotations().unwrap());
        for c in &cells {
            assert_eq!(grid.members(*c).len(), 4);
        }
    }

    #[test]
    fn morphable_model_is_orthonormal() {
        let mean = face_template(6, 6);
        let mm = synthetic_morphable_model(&mean, 5, 1.0, 0).unwrap();
        let gram = mm.basis().tr_mul(mm.basis());
        assert!((gram - DMatrix::identity(5, 5)).amax() < 1e-10);
    }
}
