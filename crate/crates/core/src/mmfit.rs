//! Landmark-driven morphable-model fitting under a scaled-orthographic
//! camera, plus per-vertex texture sampling.
//!
//! Image coordinates are pixels with `x` along columns and `y` along rows;
//! pixel `(col, row)` has its center at `(x, y) = (col, row)`. Camera space
//! looks down `-z`: larger camera-space `z` is nearer to the viewer.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Vector2, Vector3, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{LandmarkSet, Mesh, Point3};
use crate::raster::{rasterize, Image, Mask};

/// Mean shape plus an orthonormal linear identity basis.
#[derive(Debug, Clone)]
pub struct MorphableModel {
    mean: Mesh,
    basis: DMatrix<f64>,
    eigenvalues: Vec<f64>,
}

impl MorphableModel {
    pub fn new(mean: Mesh, basis: DMatrix<f64>, eigenvalues: Vec<f64>) -> Result<Self> {
        let rows = 3 * mean.n_vertices();
        if basis.nrows() != rows {
            return Err(Error::LengthMismatch {
                expected: rows,
                actual: basis.nrows(),
            });
        }
        if basis.ncols() == 0 {
            return Err(Error::InvalidInput("identity basis needs at least one column".into()));
        }
        if eigenvalues.len() != basis.ncols() {
            return Err(Error::LengthMismatch {
                expected: basis.ncols(),
                actual: eigenvalues.len(),
            });
        }
        if eigenvalues.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(Error::InvalidInput("eigenvalues must be positive and finite".into()));
        }
        if basis.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("identity basis"));
        }
        // all-zero columns are tolerated (degenerate but well-defined models)
        let gram = basis.tr_mul(&basis);
        for i in 0..gram.nrows() {
            for j in 0..gram.ncols() {
                let zero_col = gram[(i, i)] == 0.0 || gram[(j, j)] == 0.0;
                let target = if i == j && !zero_col { 1.0 } else { 0.0 };
                if (gram[(i, j)] - target).abs() > 1e-6 {
                    return Err(Error::InvalidInput(format!(
                        "identity basis is not orthonormal (gram[{i},{j}] = {})",
                        gram[(i, j)]
                    )));
                }
            }
        }
        Ok(MorphableModel {
            mean,
            basis,
            eigenvalues,
        })
    }

    pub fn mean(&self) -> &Mesh {
        &self.mean
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn n_components(&self) -> usize {
        self.basis.ncols()
    }

    /// `mean + basis * coeffs`.
    pub fn shape(&self, coeffs: &[f64]) -> Result<Mesh> {
        if coeffs.len() != self.n_components() {
            return Err(Error::LengthMismatch {
                expected: self.n_components(),
                actual: coeffs.len(),
            });
        }
        let offset = &self.basis * DVector::from_column_slice(coeffs);
        let coords: Vec<f64> = self
            .mean
            .flat_coords()
            .iter()
            .zip(offset.iter())
            .map(|(m, o)| m + o)
            .collect();
        self.mean.with_flat_coords(&coords)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector2<f64>,
}

impl Camera {
    pub fn new(scale: f64, rotation: Matrix3<f64>, translation: Vector2<f64>) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidInput(format!("camera scale must be positive, got {scale}")));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if ortho > 1e-6 || (rotation.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput("camera rotation is not a proper rotation".into()));
        }
        Ok(Camera {
            scale,
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Camera {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector2::zeros(),
        }
    }

    pub fn project_point(&self, p: Point3) -> [f64; 2] {
        let v = Vector3::from(p);
        let q = self.scale * (self.rotation.fixed_rows::<2>(0) * v) + self.translation;
        [q.x, q.y]
    }

    /// Camera-space depth; larger is nearer.
    pub fn depth(&self, p: Point3) -> f64 {
        self.rotation.row(2).dot(&Vector3::from(p).transpose())
    }

    fn affine(&self) -> Matrix2x3<f64> {
        self.scale * self.rotation.fixed_rows::<2>(0).into_owned()
    }
}

/// `scale * R[0..2] * p + t` for every point.
pub fn project(camera: &Camera, points: &[Point3]) -> Vec<[f64; 2]> {
    points.iter().map(|&p| camera.project_point(p)).collect()
}

pub fn reprojection_rmse(camera: &Camera, mesh: &Mesh, landmarks: &LandmarkSet) -> f64 {
    let verts = mesh.vertices();
    let sum: f64 = landmarks
        .indices()
        .iter()
        .zip(landmarks.points2d())
        .map(|(&i, obs)| {
            let p = camera.project_point(verts[i]);
            (p[0] - obs[0]).powi(2) + (p[1] - obs[1]).powi(2)
        })
        .sum();
    (sum / landmarks.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraEstimate {
    pub camera: Camera,
    pub rmse: f64,
    /// Landmarks were coplanar; the depth-reflection ambiguity was resolved
    /// toward the rotation closest to identity.
    pub planar: bool,
}

const RANK_TOL: f64 = 1e-9;

/// Linear affine fit followed by projection onto the nearest scaled
/// rotation.
pub fn estimate_camera(landmarks: &LandmarkSet, mesh: &Mesh) -> Result<CameraEstimate> {
    let verts = mesh.vertices();
    let pts3: Vec<Vector3<f64>> = landmarks
        .indices()
        .iter()
        .map(|&i| {
            verts
                .get(i)
                .map(|&p| Vector3::from(p))
                .ok_or_else(|| Error::InvalidInput(format!("landmark vertex {i} not in mesh")))
        })
        .collect::<Result<_>>()?;
    let pts2: Vec<Vector2<f64>> = landmarks.points2d().iter().map(|p| Vector2::new(p[0], p[1])).collect();
    let count = pts3.len() as f64;
    let c3 = pts3.iter().sum::<Vector3<f64>>() / count;
    let c2 = pts2.iter().sum::<Vector2<f64>>() / count;

    // centered normal equations: A * S3 = S23
    let mut s33 = Matrix3::<f64>::zeros();
    let mut s23 = Matrix2x3::<f64>::zeros();
    for (p3, p2) in pts3.iter().zip(&pts2) {
        let a = p3 - c3;
        let b = p2 - c2;
        s33 += a * a.transpose();
        s23 += b * a.transpose();
    }
    let eig = s33.symmetric_eigen();
    let max_ev = eig.eigenvalues.max();
    if !(max_ev > 0.0) {
        return Err(Error::Degenerate("landmarks coincide in 3D".into()));
    }
    let rank = eig.eigenvalues.iter().filter(|&&e| e > RANK_TOL * max_ev).count();
    if rank < 2 {
        return Err(Error::Degenerate("landmarks are collinear in 3D".into()));
    }

    let (rotation, scale, planar) = if rank == 3 {
        let inv = s33
            .try_inverse()
            .ok_or_else(|| Error::Degenerate("landmark scatter is singular".into()))?;
        let affine = s23 * inv;
        let (r, s) = nearest_scaled_rotation(&affine)?;
        (r, s, false)
    } else {
        // pseudo-inverse restricted to the landmark plane
        let (imin, _) = eig.eigenvalues.argmin();
        let normal: Vector3<f64> = eig.eigenvectors.column(imin).into_owned();
        let mut pinv = Matrix3::zeros();
        for k in 0..3 {
            if k != imin {
                let v = eig.eigenvectors.column(k);
                pinv += v * v.transpose() / eig.eigenvalues[k];
            }
        }
        let in_plane = s23 * pinv;
        let (r, s) = resolve_planar(&in_plane, &normal)?;
        (r, s, true)
    };

    let centered: Vec<(Vector3<f64>, Vector2<f64>)> = pts3.iter().zip(&pts2).map(|(a, b)| (a - c3, b - c2)).collect();
    let (scale, rotation) = refine_scaled_rotation(&centered, scale, rotation);
    let rot2 = rotation.fixed_rows::<2>(0).into_owned();
    let translation = c2 - scale * (rot2 * c3);
    let camera = Camera {
        scale,
        rotation,
        translation,
    };
    let rmse = reprojection_rmse(&camera, mesh, landmarks);
    Ok(CameraEstimate {
        camera,
        rmse,
        planar,
    })
}

fn centered_cost(pairs: &[(Vector3<f64>, Vector2<f64>)], scale: f64, rotation: &Matrix3<f64>) -> f64 {
    let rot2 = rotation.fixed_rows::<2>(0);
    pairs.iter().map(|(a, b)| (scale * (rot2 * a) - b).norm_squared()).sum()
}

/// Levenberg-Marquardt on `(scale, rotation)` for the centered landmarks;
/// the translation is then exact. The affine-then-project start is only an
/// approximation of the scaled-orthographic least-squares pose.
fn refine_scaled_rotation(
    pairs: &[(Vector3<f64>, Vector2<f64>)],
    mut scale: f64,
    mut rotation: Matrix3<f64>,
) -> (f64, Matrix3<f64>) {
    let mut cost = centered_cost(pairs, scale, &rotation);
    let mut mu = 1e-3;
    for _ in 0..100 {
        if cost == 0.0 {
            break;
        }
        let mut jtj = nalgebra::Matrix4::<f64>::zeros();
        let mut jtr = nalgebra::Vector4::<f64>::zeros();
        for (a, b) in pairs {
            let q = rotation * a;
            let r = Vector2::new(scale * q.x - b.x, scale * q.y - b.y);
            // d(R a)/d omega = -[q]x for R <- exp([omega]x) R
            let jx = nalgebra::Vector4::new(q.x, 0.0, scale * q.z, -scale * q.y);
            let jy = nalgebra::Vector4::new(q.y, -scale * q.z, 0.0, scale * q.x);
            jtj += jx * jx.transpose() + jy * jy.transpose();
            jtr += jx * r.x + jy * r.y;
        }
        if jtr.amax() <= 1e-15 * cost.sqrt().max(1.0) {
            break;
        }
        let mut improved = false;
        while mu < 1e12 {
            let mut damped = jtj;
            for k in 0..4 {
                damped[(k, k)] += mu * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-jtr))) else {
                mu *= 10.0;
                continue;
            };
            let next_scale = scale + step[0];
            let omega = Vector3::new(step[1], step[2], step[3]);
            let next_rot = *nalgebra::Rotation3::new(omega).matrix() * rotation;
            let next_cost = if next_scale > 0.0 {
                centered_cost(pairs, next_scale, &next_rot)
            } else {
                f64::INFINITY
            };
            if next_cost < cost {
                let rel = (cost - next_cost) / cost;
                scale = next_scale;
                rotation = next_rot;
                cost = next_cost;
                mu = (mu * 0.3).max(1e-12);
                improved = rel > 1e-15;
                break;
            }
            mu *= 10.0;
        }
        if !improved {
            break;
        }
    }
    // re-orthonormalize against accumulated rounding
    let svd = SVD::new(rotation, true, true);
    let r = svd.u.expect("u") * svd.v_t.expect("v_t");
    (scale, r)
}

/// Closest `s * R[0..2]` to a 2x3 affine map (orthogonal Procrustes on the
/// rows), completed to a proper rotation by the cross product.
fn nearest_scaled_rotation(affine: &Matrix2x3<f64>) -> Result<(Matrix3<f64>, f64)> {
    let svd = SVD::new(*affine, true, true);
    let u = svd.u.ok_or_else(|| Error::Degenerate("affine SVD failed".into()))?;
    let vt = svd.v_t.ok_or_else(|| Error::Degenerate("affine SVD failed".into()))?;
    let s = 0.5 * (svd.singular_values[0] + svd.singular_values[1]);
    if !(s > 0.0) {
        return Err(Error::Degenerate("affine map has zero scale".into()));
    }
    let rows = u * vt;
    Ok((complete_rotation(rows.row(0).transpose(), rows.row(1).transpose()), s))
}

fn complete_rotation(r1: Vector3<f64>, r2: Vector3<f64>) -> Matrix3<f64> {
    let r3 = r1.cross(&r2);
    Matrix3::from_rows(&[r1.transpose(), r2.transpose(), r3.transpose()])
}

/// For coplanar landmarks only the in-plane part of each affine row is
/// observable. The out-of-plane parts `(a1, a2)` must make the rows
/// orthogonal with equal norm; the two sign-symmetric solutions differ by a
/// reflection of depth, and the one whose rotation is closer to identity in
/// Frobenius norm is kept.
fn resolve_planar(in_plane: &Matrix2x3<f64>, normal: &Vector3<f64>) -> Result<(Matrix3<f64>, f64)> {
    let u: Vector3<f64> = in_plane.row(0).transpose();
    let v: Vector3<f64> = in_plane.row(1).transpose();
    let uv = u.dot(&v);
    let d = v.norm_squared() - u.norm_squared();
    let x = 0.5 * (d + (d * d + 4.0 * uv * uv).sqrt());
    let a1 = x.max(0.0).sqrt();
    let a2 = if a1 > 1e-12 {
        -uv / a1
    } else {
        (x - d).max(0.0).sqrt()
    };
    let mut best: Option<(f64, Matrix3<f64>, f64)> = None;
    for sign in [1.0, -1.0] {
        let row1 = u + normal * (sign * a1);
        let row2 = v + normal * (sign * a2);
        let affine = Matrix2x3::from_rows(&[row1.transpose(), row2.transpose()]);
        let (r, s) = nearest_scaled_rotation(&affine)?;
        let dist = (r - Matrix3::identity()).norm();
        if best.as_ref().is_none_or(|(bd, _, _)| dist < *bd) {
            best = Some((dist, r, s));
        }
    }
    let (_, r, s) = best.expect("two candidates");
    Ok((r, s))
}

/// Regularized linear least squares for identity coefficients given a
/// fixed camera:
/// `sum_l ||proj(mean_l + B_l c) - x_l||^2 + lambda * sum_j c_j^2 / eigenvalue_j`.
pub fn fit_shape(
    model: &MorphableModel,
    landmarks: &LandmarkSet,
    camera: &Camera,
    lambda: f64,
) -> Result<Vec<f64>> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidInput(format!("lambda must be >= 0, got {lambda}")));
    }
    let p = model.n_components();
    let rows = 2 * landmarks.len();
    let affine = camera.affine();
    let mean = model.mean().vertices();
    let mut a = DMatrix::<f64>::zeros(rows, p);
    let mut b = DVector::<f64>::zeros(rows);
    for (l, (&vi, obs)) in landmarks.indices().iter().zip(landmarks.points2d()).enumerate() {
        let base = camera.project_point(mean[vi]);
        let block = model.basis().rows(3 * vi, 3);
        let jac = affine * block;
        a.row_mut(2 * l).copy_from(&jac.row(0));
        a.row_mut(2 * l + 1).copy_from(&jac.row(1));
        b[2 * l] = obs[0] - base[0];
        b[2 * l + 1] = obs[1] - base[1];
    }
    let mut normal = a.tr_mul(&a);
    for (j, ev) in model.eigenvalues().iter().enumerate() {
        normal[(j, j)] += lambda / ev;
    }
    let rhs = a.tr_mul(&b);
    let chol = normal.cholesky().ok_or_else(|| {
        Error::Singular(if lambda == 0.0 {
            "shape normal equations are singular with lambda = 0; use lambda > 0".into()
        } else {
            "shape normal equations are not positive definite".into()
        })
    })?;
    let coeffs = chol.solve(&rhs);
    Ok(coeffs.iter().copied().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub iters: usize,
    pub lambda: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iters: 3,
            lambda: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReconstructedFace {
    pub mesh: Mesh,
    pub coeffs: Vec<f64>,
    pub camera: Camera,
    pub vertex_colors: Vec<[f64; 3]>,
    pub texture: TextureSample,
    /// Reprojection RMSE after each accepted round; entry 0 is the camera
    /// fitted to the mean shape.
    pub rmse_history: Vec<f64>,
}

impl ReconstructedFace {
    pub fn rmse(&self) -> f64 {
        *self.rmse_history.last().expect("at least one round")
    }
}

/// Alternates camera estimation and shape fitting, then samples texture.
///
/// A round whose reprojection RMSE would exceed the previous one is
/// discarded and the alternation stops, so the recorded RMSE never rises.
pub fn fit_3dmm(
    image: &Image,
    landmarks: &LandmarkSet,
    model: &MorphableModel,
    cfg: &FitConfig,
) -> Result<ReconstructedFace> {
    let mut coeffs = vec![0.0; model.n_components()];
    let mut mesh = model.mean().clone();
    let mut camera = estimate_camera(landmarks, &mesh)?.camera;
    let mut history = vec![reprojection_rmse(&camera, &mesh, landmarks)];

    for _ in 0..cfg.iters {
        let next_coeffs = fit_shape(model, landmarks, &camera, cfg.lambda)?;
        let next_mesh = model.shape(&next_coeffs)?;
        let next_camera = estimate_camera(landmarks, &next_mesh)?.camera;
        // keep whichever camera explains the new shape better
        let rmse_new_cam = reprojection_rmse(&next_camera, &next_mesh, landmarks);
        let rmse_old_cam = reprojection_rmse(&camera, &next_mesh, landmarks);
        let (cand_camera, cand_rmse) = if rmse_new_cam <= rmse_old_cam {
            (next_camera, rmse_new_cam)
        } else {
            (camera, rmse_old_cam)
        };
        let (mut cand_camera, mut cand_coeffs, mut cand_mesh, mut cand_rmse) =
            (cand_camera, next_coeffs, next_mesh, cand_rmse);
        let (pol_camera, pol_coeffs) = joint_refine(model, landmarks, &cand_camera, &cand_coeffs, cfg.lambda);
        let pol_mesh = model.shape(&pol_coeffs)?;
        let pol_rmse = reprojection_rmse(&pol_camera, &pol_mesh, landmarks);
        if pol_rmse <= cand_rmse {
            (cand_camera, cand_coeffs, cand_mesh, cand_rmse) = (pol_camera, pol_coeffs, pol_mesh, pol_rmse);
        }
        let prev = *history.last().expect("non-empty");
        if cand_rmse > prev {
            break;
        }
        coeffs = cand_coeffs;
        mesh = cand_mesh;
        camera = cand_camera;
        history.push(cand_rmse);
    }

    let texture = if image.width() > 0 && image.height() > 0 {
        // pixels on the silhouette may show background under a sub-pixel misfit
        let coverage = rasterize(&mesh, &camera, &vec![[0.0; 3]; mesh.n_vertices()], image.width(), image.height())?.1;
        sample_texture_covered(image, &mesh, &camera, &coverage.eroded())
    } else {
        sample_texture(image, &mesh, &camera)
    };
    Ok(ReconstructedFace {
        vertex_colors: texture.colors.clone(),
        mesh,
        coeffs,
        camera,
        texture,
        rmse_history: history,
    })
}

fn penalized_cost(model: &MorphableModel, landmarks: &LandmarkSet, camera: &Camera, coeffs: &[f64], lambda: f64) -> f64 {
    let mean = model.mean().vertices();
    let basis = model.basis();
    let mut cost = 0.0;
    for (&vi, obs) in landmarks.indices().iter().zip(landmarks.points2d()) {
        let mut v = Vector3::from(mean[vi]);
        for (j, c) in coeffs.iter().enumerate() {
            v += Vector3::new(basis[(3 * vi, j)], basis[(3 * vi + 1, j)], basis[(3 * vi + 2, j)]) * *c;
        }
        let p = camera.project_point([v.x, v.y, v.z]);
        cost += (p[0] - obs[0]).powi(2) + (p[1] - obs[1]).powi(2);
    }
    cost + lambda * coeffs.iter().zip(model.eigenvalues()).map(|(c, ev)| c * c / ev).sum::<f64>()
}

/// Levenberg-Marquardt over camera and coefficients together on the same
/// penalized objective the alternation minimizes blockwise.
fn joint_refine(
    model: &MorphableModel,
    landmarks: &LandmarkSet,
    camera: &Camera,
    coeffs: &[f64],
    lambda: f64,
) -> (Camera, Vec<f64>) {
    let p = model.n_components();
    let dim = 6 + p;
    let mean = model.mean().vertices();
    let basis = model.basis();
    let mut cam = *camera;
    let mut c = coeffs.to_vec();
    let mut cost = penalized_cost(model, landmarks, &cam, &c, lambda);
    let mut mu = 1e-3;
    for _ in 0..30 {
        let mut jtj = DMatrix::<f64>::zeros(dim, dim);
        let mut jtr = DVector::<f64>::zeros(dim);
        for (&vi, obs) in landmarks.indices().iter().zip(landmarks.points2d()) {
            let block = basis.rows(3 * vi, 3);
            let v = Vector3::from(mean[vi]) + block * DVector::from_column_slice(&c);
            let q = cam.rotation * v;
            let rb = cam.rotation * block;
            let proj = cam.project_point([v.x, v.y, v.z]);
            let res = [proj[0] - obs[0], proj[1] - obs[1]];
            let mut jx = DVector::<f64>::zeros(dim);
            let mut jy = DVector::<f64>::zeros(dim);
            jx[0] = q.x;
            jy[0] = q.y;
            jx[2] = cam.scale * q.z;
            jx[3] = -cam.scale * q.y;
            jy[1] = -cam.scale * q.z;
            jy[3] = cam.scale * q.x;
            jx[4] = 1.0;
            jy[5] = 1.0;
            for j in 0..p {
                jx[6 + j] = cam.scale * rb[(0, j)];
                jy[6 + j] = cam.scale * rb[(1, j)];
            }
            jtj += &jx * jx.transpose() + &jy * jy.transpose();
            jtr += &jx * res[0] + &jy * res[1];
        }
        for (j, ev) in model.eigenvalues().iter().enumerate() {
            jtj[(6 + j, 6 + j)] += lambda / ev;
            jtr[6 + j] += lambda / ev * c[j];
        }
        if jtr.amax() <= 1e-14 * cost.sqrt().max(1.0) {
            break;
        }
        let mut improved = false;
        while mu < 1e12 {
            let mut damped = jtj.clone();
            for k in 0..dim {
                damped[(k, k)] += mu * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = damped.cholesky().map(|ch| ch.solve(&(-&jtr))) else {
                mu *= 10.0;
                continue;
            };
            let scale = cam.scale + step[0];
            let rot = *nalgebra::Rotation3::new(Vector3::new(step[1], step[2], step[3])).matrix() * cam.rotation;
            let next_cam = Camera {
                scale,
                rotation: rot,
                translation: cam.translation + Vector2::new(step[4], step[5]),
            };
            let next_c: Vec<f64> = c.iter().enumerate().map(|(j, x)| x + step[6 + j]).collect();
            let next_cost = if scale > 0.0 {
                penalized_cost(model, landmarks, &next_cam, &next_c, lambda)
            } else {
                f64::INFINITY
            };
            if next_cost < cost {
                improved = (cost - next_cost) > 1e-15 * cost;
                cam = next_cam;
                c = next_c;
                cost = next_cost;
                mu = (mu * 0.3).max(1e-12);
                break;
            }
            mu *= 10.0;
        }
        if !improved {
            break;
        }
    }
    let svd = SVD::new(cam.rotation, true, true);
    cam.rotation = svd.u.expect("u") * svd.v_t.expect("v_t");
    (cam, c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextureSample {
    pub colors: Vec<[f64; 3]>,
    pub out_of_bounds: Vec<bool>,
    pub back_facing: Vec<bool>,
}

impl TextureSample {
    pub fn in_bounds_fraction(&self) -> f64 {
        if self.out_of_bounds.is_empty() {
            return 1.0;
        }
        let inside = self.out_of_bounds.iter().filter(|&&o| !o).count();
        inside as f64 / self.out_of_bounds.len() as f64
    }
}

/// Bilinear per-vertex color lookup at the projected vertex positions.
///
/// Vertices projecting outside the pixel-center lattice take the nearest
/// pixel's color and are flagged; vertices whose normal points away from
/// the viewer are flagged as back-facing.
pub fn sample_texture(image: &Image, mesh: &Mesh, camera: &Camera) -> TextureSample {
    sample_texture_impl(image, mesh, camera, None)
}

/// [`sample_texture`] restricted to pixels inside `coverage`: bilinear taps
/// outside it are dropped and the rest renormalized, so vertices on the
/// silhouette do not pick up background. A vertex with no covered tap takes
/// the nearest covered pixel within [`COVERED_SEARCH_RADIUS`], else falls
/// back to the unrestricted lookup.
pub fn sample_texture_covered(image: &Image, mesh: &Mesh, camera: &Camera, coverage: &Mask) -> TextureSample {
    sample_texture_impl(image, mesh, camera, Some(coverage))
}

pub const COVERED_SEARCH_RADIUS: usize = 3;

fn nearest_covered(image: &Image, coverage: &Mask, x: f64, y: f64) -> Option<[f64; 3]> {
    let (cx, cy) = (x.round() as i64, y.round() as i64);
    let r = COVERED_SEARCH_RADIUS as i64;
    let mut best: Option<(f64, usize, usize)> = None;
    for row in (cy - r).max(0)..=(cy + r).min(image.height() as i64 - 1) {
        for col in (cx - r).max(0)..=(cx + r).min(image.width() as i64 - 1) {
            let (c, rw) = (col as usize, row as usize);
            if !coverage.get(c, rw) {
                continue;
            }
            let d = (col as f64 - x).powi(2) + (row as f64 - y).powi(2);
            if best.is_none_or(|(bd, _, _)| d < bd) {
                best = Some((d, c, rw));
            }
        }
    }
    best.map(|(_, c, rw)| image.pixel(c, rw))
}

fn covered_bilinear(image: &Image, coverage: &Mask, x: f64, y: f64) -> Option<[f64; 3]> {
    let (w, h) = (image.width(), image.height());
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let taps = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        ((x0 + 1).min(w - 1), y0, fx * (1.0 - fy)),
        (x0, (y0 + 1).min(h - 1), (1.0 - fx) * fy),
        ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1), fx * fy),
    ];
    let mut acc = [0.0; 3];
    let mut total = 0.0;
    for (col, row, wt) in taps {
        if wt > 0.0 && coverage.get(col, row) {
            let p = image.pixel(col, row);
            for c in 0..3 {
                acc[c] += wt * p[c];
            }
            total += wt;
        }
    }
    (total > 0.0).then(|| acc.map(|v| v / total))
}

fn sample_texture_impl(image: &Image, mesh: &Mesh, camera: &Camera, coverage: Option<&Mask>) -> TextureSample {
    let normals = mesh.vertex_normals();
    let view = Vector3::new(0.0, 0.0, -1.0);
    let n = mesh.n_vertices();
    let mut colors = Vec::with_capacity(n);
    let mut out_of_bounds = Vec::with_capacity(n);
    let mut back_facing = Vec::with_capacity(n);
    let (w, h) = (image.width(), image.height());
    for (v, nrm) in mesh.vertices().iter().zip(&normals) {
        let [x, y] = camera.project_point(*v);
        let inside = w > 0 && h > 0 && x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64;
        let color = if w == 0 || h == 0 {
            [0.0; 3]
        } else if inside {
            coverage
                .and_then(|m| covered_bilinear(image, m, x, y).or_else(|| nearest_covered(image, m, x, y)))
                .unwrap_or_else(|| image.bilinear(x, y))
        } else {
            let col = x.round().clamp(0.0, (w - 1) as f64) as usize;
            let row = y.round().clamp(0.0, (h - 1) as f64) as usize;
            image.pixel(col, row)
        };
        colors.push(color);
        out_of_bounds.push(!inside);
        let cam_normal = camera.rotation * Vector3::from(*nrm);
        back_facing.push(cam_normal.dot(&view) > 0.0);
    }
    let sample = TextureSample {
        colors,
        out_of_bounds,
        back_facing,
    };
    if sample.in_bounds_fraction() < 0.9 {
        log::warn!(
            "only {:.1}% of vertices project inside the image",
            100.0 * sample.in_bounds_fraction()
        );
    }
    sample
}

/// Rotation from XYZ Euler angles (radians), `Rz * Ry * Rx`.
pub fn rotation_from_euler(rx: f64, ry: f64, rz: f64) -> Matrix3<f64> {
    nalgebra::Rotation3::from_euler_angles(rx, ry, rz).into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::grid_surface;

    fn dome() -> Mesh {
        grid_surface(9, 9, |x, y| 0.8 - 0.3 * (x * x + y * y))
    }

    fn landmarks_from(camera: &Camera, mesh: &Mesh, indices: &[usize]) -> LandmarkSet {
        let pts = indices.iter().map(|&i| camera.project_point(mesh.vertices()[i])).collect();
        LandmarkSet::new(pts, indices.to_vec(), mesh.n_vertices()).unwrap()
    }

    #[test]
    fn identity_projection_drops_z() {
        let cam = Camera::identity();
        assert_eq!(project(&cam, &[[1.5, -2.0, 7.0]]), vec![[1.5, -2.0]]);
        let mut doubled = cam;
        doubled.scale = 2.0;
        doubled.translation = Vector2::new(3.0, 4.0);
        assert_eq!(doubled.project_point([1.0, 1.0, 5.0]), [5.0, 6.0]);
    }

    #[test]
    fn camera_validation() {
        assert!(Camera::new(0.0, Matrix3::identity(), Vector2::zeros()).is_err());
        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(Camera::new(1.0, reflect, Vector2::zeros()).is_err());
    }

    #[test]
    fn identity_pose_gives_identity_camera() {
        let mesh = dome();
        let idx: Vec<usize> = (0..81).step_by(7).collect();
        let lm = landmarks_from(&Camera::identity(), &mesh, &idx);
        let est = estimate_camera(&lm, &mesh).unwrap();
        assert!(!est.planar);
        assert!((est.camera.rotation - Matrix3::identity()).amax() < 1e-9);
        assert!((est.camera.scale - 1.0).abs() < 1e-9);
        assert!(est.rmse < 1e-9);
    }

    #[test]
    fn planar_landmarks_resolve_toward_identity() {
        let flat = grid_surface(6, 6, |_, _| 0.0);
        let truth = Camera::new(40.0, rotation_from_euler(0.2, -0.15, 0.1), Vector2::new(64.0, 60.0)).unwrap();
        let idx: Vec<usize> = (0..36).step_by(3).collect();
        let lm = landmarks_from(&truth, &flat, &idx);
        let est = estimate_camera(&lm, &flat).unwrap();
        assert!(est.planar);
        assert!(est.rmse < 1e-6, "rmse {}", est.rmse);
        let r = est.camera.rotation;
        assert!((r.transpose() * r - Matrix3::identity()).amax() < 1e-6);
        assert!((r.determinant() - 1.0).abs() < 1e-6);
        // the reflected solution (flip both tilt angles) is farther from identity
        let truth_dist = (truth.rotation - Matrix3::identity()).norm();
        assert!((r - Matrix3::identity()).norm() <= truth_dist + 1e-9);
    }

    #[test]
    fn collinear_landmarks_are_degenerate() {
        let line = Mesh::new((0..8).map(|i| [i as f64, 2.0 * i as f64, 0.0]).collect(), vec![]).unwrap();
        let lm = LandmarkSet::new((0..8).map(|i| [i as f64, 0.0]).collect(), (0..8).collect(), 8).unwrap();
        assert!(matches!(estimate_camera(&lm, &line), Err(Error::Degenerate(_))));
    }

    #[test]
    fn zero_basis_model_gives_zero_coeffs() {
        let mean = dome();
        let model = MorphableModel::new(mean.clone(), DMatrix::zeros(3 * 81, 4), vec![1.0; 4]).unwrap();
        let idx: Vec<usize> = (0..81).step_by(5).collect();
        let lm = landmarks_from(&Camera::identity(), &mean, &idx);
        let c = fit_shape(&model, &lm, &Camera::identity(), 0.1).unwrap();
        assert!(c.iter().all(|&x| x == 0.0));
        assert!(matches!(
            fit_shape(&model, &lm, &Camera::identity(), 0.0),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn model_validation() {
        let mean = dome();
        let mut basis = DMatrix::zeros(3 * 81, 2);
        basis[(0, 0)] = 1.0;
        basis[(1, 1)] = 2.0;
        assert!(MorphableModel::new(mean.clone(), basis, vec![1.0, 1.0]).is_err());
        let mut basis = DMatrix::zeros(3 * 81, 1);
        basis[(0, 0)] = 1.0;
        assert!(MorphableModel::new(mean.clone(), basis.clone(), vec![0.0]).is_err());
        assert!(MorphableModel::new(mean, basis, vec![1.0]).is_ok());
    }

    #[test]
    fn constant_image_texture() {
        let img = Image::filled(32, 32, [0.2, 0.4, 0.6]);
        let mesh = dome();
        let cam = Camera::new(10.0, Matrix3::identity(), Vector2::new(16.0, 16.0)).unwrap();
        let tex = sample_texture(&img, &mesh, &cam);
        assert!(tex.colors.iter().all(|c| *c == [0.2, 0.4, 0.6]));
        assert!(tex.out_of_bounds.iter().all(|&o| !o));
        assert!(tex.back_facing.iter().all(|&b| !b));
    }

    #[test]
    fn outside_vertices_clamp_and_flag() {
        let mut img = Image::filled(4, 4, [0.0; 3]);
        img.set_pixel(3, 0, [1.0, 0.5, 0.25]);
        let mesh = Mesh::new(vec![[10.0, -3.0, 0.0]], vec![]).unwrap();
        let tex = sample_texture(&img, &mesh, &Camera::identity());
        assert_eq!(tex.out_of_bounds, vec![true]);
        assert_eq!(tex.colors[0], [1.0, 0.5, 0.25]);
    }

    #[test]
    fn back_facing_flag_follows_normal() {
        let up = grid_surface(3, 3, |_, _| 0.0);
        let flipped = Camera::new(1.0, rotation_from_euler(std::f64::consts::PI, 0.0, 0.0), Vector2::zeros()).unwrap();
        let img = Image::filled(2, 2, [0.0; 3]);
        assert!(sample_texture(&img, &up, &flipped).back_facing.iter().all(|&b| b));
    }
}
