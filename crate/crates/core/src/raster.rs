//! RGB images, z-buffered triangle rasterization and gradient-domain
//! (Poisson) compositing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::Mesh;
use crate::mmfit::Camera;

/// Row-major RGB image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::LengthMismatch {
                expected: width * height * 3,
                actual: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("image data"));
        }
        let data = data.into_iter().map(|x| x.clamp(0.0, 1.0)).collect();
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Self {
        let color = color.map(|c| c.clamp(0.0, 1.0));
        Image {
            width,
            height,
            data: color.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, col: usize, row: usize) -> [f64; 3] {
        let i = 3 * (row * self.width + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, col: usize, row: usize, color: [f64; 3]) {
        let i = 3 * (row * self.width + col);
        for c in 0..3 {
            self.data[i + c] = color[c].clamp(0.0, 1.0);
        }
    }

    /// One channel as a row-major plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    /// Bilinear interpolation between pixel centers; `(x, y)` must lie in
    /// `[0, w-1] x [0, h-1]`.
    pub fn bilinear(&self, x: f64, y: f64) -> [f64; 3] {
        let x0 = (x.floor() as usize).min(self.width - 1);
        let y0 = (y.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let (p00, p10, p01, p11) = (
            self.pixel(x0, y0),
            self.pixel(x1, y0),
            self.pixel(x0, y1),
            self.pixel(x1, y1),
        );
        std::array::from_fn(|c| {
            let top = p00[c] * (1.0 - fx) + p10[c] * fx;
            let bottom = p01[c] * (1.0 - fx) + p11[c] * fx;
            top * (1.0 - fy) + bottom * fy
        })
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// 8-bit quantization, `round(255 * v)`.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self.data.iter().map(|v| (v * 255.0).round() as u8).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        Image {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_png_bytes(&bytes)
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| Error::Image(e.to_string()))?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::Image(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_png_bytes()?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, col: usize, row: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, col: usize, row: usize, inside: bool) {
        self.bits[row * self.width + col] = inside;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Keeps pixels whose 4-neighbors are all inside (outside the image
    /// counts as outside).
    pub fn eroded(&self) -> Mask {
        let mut out = Mask::new(self.width, self.height);
        for row in 0..self.height {
            for col in 0..self.width {
                let keep = self.get(col, row)
                    && col > 0
                    && row > 0
                    && col + 1 < self.width
                    && row + 1 < self.height
                    && self.get(col - 1, row)
                    && self.get(col + 1, row)
                    && self.get(col, row - 1)
                    && self.get(col, row + 1);
                out.set(col, row, keep);
            }
        }
        out
    }

    /// Clears the outermost pixel ring.
    pub fn without_border(&self) -> Mask {
        let mut out = self.clone();
        for row in 0..self.height {
            for col in 0..self.width {
                if row == 0 || col == 0 || row + 1 == self.height || col + 1 == self.width {
                    out.set(col, row, false);
                }
            }
        }
        out
    }

    pub fn iter_inside(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.height).flat_map(move |row| {
            (0..self.width).filter_map(move |col| self.get(col, row).then_some((col, row)))
        })
    }
}

/// Renders `mesh` over a black background.
pub fn rasterize(
    mesh: &Mesh,
    camera: &Camera,
    colors: &[[f64; 3]],
    width: usize,
    height: usize,
) -> Result<(Image, Mask)> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidInput("raster target has zero area".into()));
    }
    let mut image = Image::filled(width, height, [0.0; 3]);
    let mask = rasterize_onto(mesh, camera, colors, &mut image)?;
    Ok((image, mask))
}

/// Z-buffered rasterization with barycentric color interpolation onto an
/// existing image; returns the coverage mask.
///
/// Pixel `(col, row)` is sampled at its center `(col, row)`. Samples exactly
/// on an edge belong to the triangle for which that edge runs upward, or
/// rightward when horizontal (after orienting every triangle
/// counter-clockwise in screen space), so shared edges are drawn once.
/// Depth ties keep the triangle drawn first.
pub fn rasterize_onto(
    mesh: &Mesh,
    camera: &Camera,
    colors: &[[f64; 3]],
    image: &mut Image,
) -> Result<Mask> {
    if colors.len() != mesh.n_vertices() {
        return Err(Error::LengthMismatch {
            expected: mesh.n_vertices(),
            actual: colors.len(),
        });
    }
    let (width, height) = (image.width(), image.height());
    if width == 0 || height == 0 {
        return Err(Error::InvalidInput("raster target has zero area".into()));
    }
    let screen: Vec<[f64; 2]> = mesh.vertices().iter().map(|&v| camera.project_point(v)).collect();
    let depth: Vec<f64> = mesh.vertices().iter().map(|&v| camera.depth(v)).collect();
    let mut zbuf = vec![f64::NEG_INFINITY; width * height];
    let mut mask = Mask::new(width, height);

    for face in mesh.faces() {
        let [mut i0, i1, mut i2] = *face;
        let mut area = edge(screen[i0], screen[i1], screen[i2]);
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        if area < 0.0 {
            std::mem::swap(&mut i0, &mut i2);
            area = -area;
        }
        let (p0, p1, p2) = (screen[i0], screen[i1], screen[i2]);
        let min_x = p0[0].min(p1[0]).min(p2[0]).ceil().max(0.0);
        let max_x = p0[0].max(p1[0]).max(p2[0]).floor().min((width - 1) as f64);
        let min_y = p0[1].min(p1[1]).min(p2[1]).ceil().max(0.0);
        let max_y = p0[1].max(p1[1]).max(p2[1]).floor().min((height - 1) as f64);
        if min_x > max_x || min_y > max_y {
            continue;
        }
        let owns = [owns_edge(p1, p2), owns_edge(p2, p0), owns_edge(p0, p1)];
        for row in min_y as usize..=max_y as usize {
            for col in min_x as usize..=max_x as usize {
                let p = [col as f64, row as f64];
                let w = [edge(p1, p2, p), edge(p2, p0, p), edge(p0, p1, p)];
                let inside = w
                    .iter()
                    .zip(&owns)
                    .all(|(&wi, &own)| wi > 0.0 || (wi == 0.0 && own));
                if !inside {
                    continue;
                }
                let b = w.map(|wi| wi / area);
                let z = b[0] * depth[i0] + b[1] * depth[i1] + b[2] * depth[i2];
                let slot = row * width + col;
                if z > zbuf[slot] {
                    zbuf[slot] = z;
                    let (c0, c1, c2) = (colors[i0], colors[i1], colors[i2]);
                    let color = std::array::from_fn(|c| b[0] * c0[c] + b[1] * c1[c] + b[2] * c2[c]);
                    image.set_pixel(col, row, color);
                    mask.set(col, row, true);
                }
            }
        }
    }
    Ok(mask)
}

/// Twice the signed area of `(a, b, p)`.
fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

fn owns_edge(a: [f64; 2], b: [f64; 2]) -> bool {
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    dy < 0.0 || (dy == 0.0 && dx > 0.0)
}

pub const POISSON_TOL: f64 = 1e-8;
pub const POISSON_MAX_RESIDUAL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ChannelSolve {
    /// Solution at the unknown pixels, in row-major order of the mask.
    pub values: Vec<f64>,
    pub residual_inf: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct BlendResult {
    pub image: Image,
    /// Mask actually solved over (border pixels removed).
    pub mask: Mask,
    pub residual_inf: f64,
    pub iterations: [usize; 3],
}

/// Seamless cloning: inside `mask` the output has the source's Laplacian,
/// on the mask boundary it agrees with `target`, outside it is `target`.
pub fn poisson_blend(source: &Image, target: &Image, mask: &Mask) -> Result<BlendResult> {
    if source.width() != target.width() || source.height() != target.height() {
        return Err(Error::InvalidInput("source and target sizes differ".into()));
    }
    if mask.width() != target.width() || mask.height() != target.height() {
        return Err(Error::InvalidInput("mask size differs from target".into()));
    }
    let mask = mask.without_border();
    if mask.is_empty() {
        return Err(Error::InvalidInput("blend mask has no interior pixels".into()));
    }
    let (w, h) = (target.width(), target.height());
    let solves: Vec<Result<ChannelSolve>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..3)
            .map(|c| {
                let mask = &mask;
                scope.spawn(move || {
                    solve_poisson_channel(&source.channel(c), &target.channel(c), w, h, mask)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|hnd| hnd.join().expect("channel solver panicked"))
            .collect()
    });
    let mut image = target.clone();
    let mut residual_inf: f64 = 0.0;
    let mut iterations = [0; 3];
    for (c, solve) in solves.into_iter().enumerate() {
        let solve = solve?;
        residual_inf = residual_inf.max(solve.residual_inf);
        iterations[c] = solve.iterations;
        for ((col, row), v) in mask.iter_inside().zip(&solve.values) {
            let i = 3 * (row * w + col) + c;
            image.data[i] = v.clamp(0.0, 1.0);
        }
    }
    Ok(BlendResult {
        image,
        mask,
        residual_inf,
        iterations,
    })
}

/// Assembles and solves the 5-point Poisson system for one channel by
/// conjugate gradients (stop at `||r||_2 <= 1e-8`, cap `10 * unknowns`).
///
/// `mask` must not touch the image border.
pub fn solve_poisson_channel(
    source: &[f64],
    target: &[f64],
    width: usize,
    height: usize,
    mask: &Mask,
) -> Result<ChannelSolve> {
    let system = PoissonSystem::new(source, target, width, height, mask)?;
    let n = system.len();
    let mut x = vec![0.0; n];
    let mut r = system.rhs.clone();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = dot(&r, &r);
    let cap = 10 * n;
    let mut iterations = 0;
    while rr.sqrt() > POISSON_TOL && iterations < cap {
        system.apply(&p, &mut ap);
        let alpha = rr / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_next = dot(&r, &r);
        let beta = rr_next / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_next;
        iterations += 1;
    }
    let residual_inf = system.residual_inf(&x);
    if residual_inf > POISSON_MAX_RESIDUAL {
        return Err(Error::NonConvergence {
            iterations,
            residual: residual_inf,
        });
    }
    Ok(ChannelSolve {
        values: x,
        residual_inf,
        iterations,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `4 f_p - sum_{q in N(p), q unknown} f_q = sum_{q in N(p)} (s_p - s_q)
///  + sum_{q in N(p), q known} t_q`.
struct PoissonSystem {
    neighbors: Vec<[Option<usize>; 4]>,
    rhs: Vec<f64>,
}

impl PoissonSystem {
    fn new(source: &[f64], target: &[f64], width: usize, height: usize, mask: &Mask) -> Result<Self> {
        if source.len() != width * height || target.len() != width * height {
            return Err(Error::LengthMismatch {
                expected: width * height,
                actual: source.len().min(target.len()),
            });
        }
        let mut index = vec![usize::MAX; width * height];
        let unknowns: Vec<(usize, usize)> = mask.iter_inside().collect();
        if unknowns.is_empty() {
            return Err(Error::InvalidInput("blend mask has no interior pixels".into()));
        }
        for (k, &(col, row)) in unknowns.iter().enumerate() {
            if col == 0 || row == 0 || col + 1 == width || row + 1 == height {
                return Err(Error::InvalidInput("blend mask touches the image border".into()));
            }
            index[row * width + col] = k;
        }
        let mut neighbors = Vec::with_capacity(unknowns.len());
        let mut rhs = Vec::with_capacity(unknowns.len());
        for &(col, row) in &unknowns {
            let p = row * width + col;
            let nbrs = [p - 1, p + 1, p - width, p + width];
            let mut b = 0.0;
            let mut links = [None; 4];
            for (slot, &q) in nbrs.iter().enumerate() {
                b += source[p] - source[q];
                if index[q] == usize::MAX {
                    b += target[q];
                } else {
                    links[slot] = Some(index[q]);
                }
            }
            neighbors.push(links);
            rhs.push(b);
        }
        Ok(PoissonSystem { neighbors, rhs })
    }

    fn len(&self) -> usize {
        self.rhs.len()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (i, links) in self.neighbors.iter().enumerate() {
            let mut v = 4.0 * x[i];
            for q in links.iter().flatten() {
                v -= x[*q];
            }
            out[i] = v;
        }
    }

    fn residual_inf(&self, x: &[f64]) -> f64 {
        let mut ax = vec![0.0; x.len()];
        self.apply(x, &mut ax);
        ax.iter()
            .zip(&self.rhs)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}
