//! Rigid warp into observation space, splat projection, a tile-based
//! rasterizer with its analytic adjoint, and a brute-force reference renderer.
//!
//! Pixel `(px, py)` samples the image plane at integer coordinates
//! `(px, py)`, consistent with [`Camera::project_point`].

use nalgebra::Matrix2;
use rayon::prelude::*;

use crate::body::BoneGrad;
use crate::geometry::{check_weights, polar_rotation, Camera, GeometryError, Mat3, PolarFactor, Quat, Vec2, Vec3};
use crate::nets::DeformedGaussians;
use crate::Real;

pub type Mat2 = Matrix2<Real>;

/// Pixel-space covariance dilation.
pub const DILATION: Real = 0.3;
/// Gaussians closer to the camera than this are culled.
pub const NEAR_PLANE: Real = 0.01;
/// Contributions below this effective opacity are skipped by [`rasterize`].
pub const MIN_ALPHA: Real = 1.0 / 255.0;
/// [`rasterize`] stops compositing a pixel once its accumulated alpha exceeds this.
pub const SATURATION: Real = 0.9999;
pub const TILE: usize = 16;
/// Gaussians whose centre projects further outside the image than this
/// fraction of its width or height are culled. Without it, Gaussians just
/// past the near plane but far off-axis get a Jacobian large enough to smear
/// them over the whole image.
pub const GUARD_BAND: Real = 0.3;

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("Gaussian {index}: {source}")]
    Weights { index: usize, source: GeometryError },
    #[error("{what}: expected {expected} entries, got {got}")]
    Length { what: &'static str, expected: usize, got: usize },
}

/// Gaussians in observation space.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedGaussians {
    pub positions: Vec<Vec3>,
    pub rotations: Vec<Mat3>,
    pub log_scales: Vec<Vec3>,
    pub colors: Vec<Vec3>,
    pub opacities: Vec<Real>,
}

impl ObservedGaussians {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// `R_o diag(s^2) R_o^T`.
    pub fn covariance(&self, i: usize) -> Mat3 {
        let n = self.rotations[i] * Mat3::from_diagonal(&self.log_scales[i].map(Real::exp));
        n * n.transpose()
    }

    pub fn scene(&self) -> SplatScene {
        SplatScene {
            means: self.positions.clone(),
            covariances: (0..self.len()).map(|i| self.covariance(i)).collect(),
            colors: self.colors.clone(),
            opacities: self.opacities.clone(),
        }
    }
}

/// Pulls `dL/dSigma` back to the rotation and log-scales of
/// `Sigma = R diag(exp(2 log_s)) R^T`.
pub fn covariance_backward(rotation: &Mat3, log_scale: &Vec3, grad: &Mat3) -> (Mat3, Vec3) {
    let s = log_scale.map(Real::exp);
    let n = rotation * Mat3::from_diagonal(&s);
    let dn = (grad + grad.transpose()) * n;
    let d_rot = dn * Mat3::from_diagonal(&s);
    let mut d_log = Vec3::zeros();
    for j in 0..3 {
        d_log[j] = dn.column(j).dot(&rotation.column(j)) * s[j];
    }
    (d_rot, d_log)
}

/// The minimal 3D input of the rasterizer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplatScene {
    pub means: Vec<Vec3>,
    pub covariances: Vec<Mat3>,
    pub colors: Vec<Vec3>,
    pub opacities: Vec<Real>,
}

impl SplatScene {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
}

/// State of [`rigid_warp`] kept for the backward pass.
#[derive(Debug, Clone)]
pub struct WarpTape {
    polar: Vec<Option<PolarFactor>>,
    dominant: Vec<usize>,
    local: Vec<Mat3>,
}

impl WarpTape {
    /// Number of Gaussians whose blended rotation was degenerate.
    pub fn fallbacks(&self) -> usize {
        self.polar.iter().filter(|p| p.is_none()).count()
    }
}

fn dominant_bone(w: &[Real]) -> usize {
    let mut best = 0;
    for (k, v) in w.iter().enumerate() {
        if *v > w[best] {
            best = k;
        }
    }
    best
}

/// Blends bone transforms per Gaussian: `x_o = sum_k w_k B_k x'` and
/// `R_o = polar(sum_k w_k R_k) R'`, falling back to the dominant bone's
/// rotation when the blend is degenerate.
pub fn rigid_warp(
    d: &DeformedGaussians,
    bones: &[crate::geometry::BoneTransform],
    weights: &[Real],
) -> Result<(ObservedGaussians, WarpTape), RasterError> {
    let n = d.len();
    let k = bones.len();
    if weights.len() != n * k {
        return Err(RasterError::Length { what: "skinning weights", expected: n * k, got: weights.len() });
    }
    for i in 0..n {
        check_weights(k, &weights[i * k..(i + 1) * k]).map_err(|source| RasterError::Weights { index: i, source })?;
    }
    let per: Vec<(Vec3, Mat3, Option<PolarFactor>, usize, Mat3)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let w = &weights[i * k..(i + 1) * k];
            let x = crate::geometry::lbs_point_unchecked(&d.positions[i], bones, w);
            let mut blend = Mat3::zeros();
            for (b, &wk) in bones.iter().zip(w) {
                blend += b.rotation * wk;
            }
            let dom = dominant_bone(w);
            let polar = polar_rotation(&blend);
            let u = polar.map(|p| p.rotation).unwrap_or(bones[dom].rotation);
            let local = d.rotations[i].to_matrix();
            (x, u * local, polar, dom, local)
        })
        .collect();
    let mut obs = ObservedGaussians {
        positions: Vec::with_capacity(n),
        rotations: Vec::with_capacity(n),
        log_scales: d.log_scales.clone(),
        colors: d.colors.clone(),
        opacities: d.opacities.clone(),
    };
    let mut tape = WarpTape { polar: Vec::with_capacity(n), dominant: Vec::with_capacity(n), local: Vec::with_capacity(n) };
    for (x, r, p, dom, local) in per {
        obs.positions.push(x);
        obs.rotations.push(r);
        tape.polar.push(p);
        tape.dominant.push(dom);
        tape.local.push(local);
    }
    Ok((obs, tape))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarpGrads {
    pub positions: Vec<Vec3>,
    /// Gradient with respect to the (unit) local rotation quaternions.
    pub rotations: Vec<Quat>,
    pub weights: Vec<Real>,
    pub bones: Vec<BoneGrad>,
}

pub fn rigid_warp_backward(
    d: &DeformedGaussians,
    bones: &[crate::geometry::BoneTransform],
    weights: &[Real],
    tape: &WarpTape,
    d_positions: &[Vec3],
    d_rotations: &[Mat3],
) -> WarpGrads {
    let n = d.len();
    let k = bones.len();
    let mut g = WarpGrads {
        positions: Vec::with_capacity(n),
        rotations: Vec::with_capacity(n),
        weights: vec![0.0; n * k],
        bones: vec![BoneGrad::default(); k],
    };
    for i in 0..n {
        let w = &weights[i * k..(i + 1) * k];
        let gw = &mut g.weights[i * k..(i + 1) * k];
        let x = d.positions[i];
        let dxo = d_positions[i];
        let mut dx = Vec3::zeros();
        for (j, b) in bones.iter().enumerate() {
            gw[j] += dxo.dot(&b.apply(&x));
            if w[j] != 0.0 {
                dx += b.rotation.transpose() * dxo * w[j];
                g.bones[j].rotation += dxo * x.transpose() * w[j];
                g.bones[j].translation += dxo * w[j];
            }
        }
        g.positions.push(dx);
        let dro = d_rotations[i];
        let local = tape.local[i];
        match &tape.polar[i] {
            Some(p) => {
                let du = dro * local.transpose();
                let da = p.backward(&du);
                for (j, b) in bones.iter().enumerate() {
                    gw[j] += da.dot(&b.rotation);
                    g.bones[j].rotation += da * w[j];
                }
                g.rotations.push(d.rotations[i].to_matrix_backward(&(p.rotation.transpose() * dro)));
            }
            None => {
                let dom = tape.dominant[i];
                g.bones[dom].rotation += dro * local.transpose();
                g.rotations.push(d.rotations[i].to_matrix_backward(&(bones[dom].rotation.transpose() * dro)));
            }
        }
    }
    g
}

/// `J W Sigma W^T J^T + DILATION I`.
pub fn project_covariance(sigma: &Mat3, cam: &Camera, x_cam: &Vec3) -> Mat2 {
    let j = cam.projection_jacobian(x_cam);
    let m = cam.rotation * sigma * cam.rotation.transpose();
    j * m * j.transpose() + Mat2::identity() * DILATION
}

/// A projected Gaussian ready for compositing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat2D {
    pub uv: Vec2,
    /// Dilated screen-space covariance.
    pub cov: Mat2,
    pub conic: Mat2,
    pub depth: Real,
    pub color: Vec3,
    pub opacity: Real,
    pub index: usize,
    /// Half-width of the screen-space support, pixels.
    pub radius: Real,
    x_cam: Vec3,
}

fn max_eigenvalue(m: &Mat2) -> Real {
    let mid = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let det = m.determinant();
    mid + (mid * mid - det).max(0.0).sqrt()
}

/// Support radius in units of the major-axis standard deviation: at least
/// 3, and large enough that every contribution above [`MIN_ALPHA`] lies
/// inside the support.
fn support_sigmas(opacity: Real) -> Real {
    let cutoff = (2.0 * (opacity / MIN_ALPHA).ln()).max(0.0).sqrt();
    cutoff.max(3.0)
}

/// Projects every Gaussian in front of the near plane and inside the guard
/// band, and returns the splats in depth order.
pub fn project_splats(scene: &SplatScene, cam: &Camera) -> Vec<Splat2D> {
    let mut splats: Vec<Splat2D> = (0..scene.len())
        .into_par_iter()
        .filter_map(|i| {
            let x_cam = cam.to_camera(&scene.means[i]);
            if !(x_cam.z > NEAR_PLANE) {
                return None;
            }
            let p = cam.project_camera_point(&x_cam);
            let (w, h) = (cam.width as Real, cam.height as Real);
            if !(p.uv.x >= -GUARD_BAND * w
                && p.uv.x <= (1.0 + GUARD_BAND) * w
                && p.uv.y >= -GUARD_BAND * h
                && p.uv.y <= (1.0 + GUARD_BAND) * h)
            {
                return None;
            }
            let cov = project_covariance(&scene.covariances[i], cam, &x_cam);
            let conic = cov.try_inverse()?;
            let radius = max_eigenvalue(&cov).sqrt() * support_sigmas(scene.opacities[i]);
            Some(Splat2D {
                uv: p.uv,
                cov,
                conic,
                depth: x_cam.z,
                color: scene.colors[i],
                opacity: scene.opacities[i],
                index: i,
                radius,
                x_cam,
            })
        })
        .collect();
    splats.sort_by(compare_splats);
    splats
}

/// Depth order. Ties are broken by the splat's own content before its
/// index, so the order does not depend on the input permutation.
fn compare_splats(a: &Splat2D, b: &Splat2D) -> std::cmp::Ordering {
    let key = |s: &Splat2D| {
        [
            s.depth,
            s.uv.x,
            s.uv.y,
            s.cov[(0, 0)],
            s.cov[(0, 1)],
            s.cov[(1, 1)],
            s.opacity,
            s.color.x,
            s.color.y,
            s.color.z,
        ]
    };
    let (ka, kb) = (key(a), key(b));
    for (x, y) in ka.iter().zip(&kb) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            other => return other,
        }
    }
    a.index.cmp(&b.index)
}

/// Rendered image, accumulated alpha and per-pixel contributor counts.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// Row-major `height x width x 3`, linear RGB.
    pub image: Vec<Real>,
    /// Row-major `height x width`.
    pub alpha: Vec<Real>,
    pub contributors: Vec<u32>,
}

impl RenderOutput {
    pub fn blank(width: usize, height: usize) -> Self {
        RenderOutput {
            width,
            height,
            image: vec![0.0; width * height * 3],
            alpha: vec![0.0; width * height],
            contributors: vec![0; width * height],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> Vec3 {
        let o = (y * self.width + x) * 3;
        Vec3::new(self.image[o], self.image[o + 1], self.image[o + 2])
    }
}

fn gaussian_power(s: &Splat2D, px: Real, py: Real) -> (Real, Vec2) {
    let d = Vec2::new(px - s.uv.x, py - s.uv.y);
    let q = &s.conic;
    let power = -0.5 * (q[(0, 0)] * d.x * d.x + 2.0 * q[(0, 1)] * d.x * d.y + q[(1, 1)] * d.y * d.y);
    (power, d)
}

struct TileGrid {
    tiles_x: usize,
    /// Per tile, positions into the sorted splat list, front to back.
    lists: Vec<Vec<u32>>,
}

fn bin_splats(splats: &[Splat2D], width: usize, height: usize) -> TileGrid {
    let tiles_x = width.div_ceil(TILE);
    let tiles_y = height.div_ceil(TILE);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for (pos, s) in splats.iter().enumerate() {
        let x0 = (s.uv.x - s.radius).ceil().max(0.0);
        let x1 = (s.uv.x + s.radius).floor().min(width as Real - 1.0);
        let y0 = (s.uv.y - s.radius).ceil().max(0.0);
        let y1 = (s.uv.y + s.radius).floor().min(height as Real - 1.0);
        if !(x0 <= x1 && y0 <= y1) {
            continue;
        }
        let (tx0, tx1) = (x0 as usize / TILE, x1 as usize / TILE);
        let (ty0, ty1) = (y0 as usize / TILE, y1 as usize / TILE);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                lists[ty * tiles_x + tx].push(pos as u32);
            }
        }
    }
    TileGrid { tiles_x, lists }
}

fn tile_pixels(t: usize, grid: &TileGrid, width: usize, height: usize) -> impl Iterator<Item = (usize, usize)> {
    let (tx, ty) = (t % grid.tiles_x, t / grid.tiles_x);
    let xs = tx * TILE..((tx + 1) * TILE).min(width);
    let ys = ty * TILE..((ty + 1) * TILE).min(height);
    ys.flat_map(move |y| xs.clone().map(move |x| (x, y)))
}

/// One composited contribution, recorded for the reverse sweep.
#[derive(Clone, Copy)]
struct Hit {
    slot: usize,
    alpha: Real,
    gauss: Real,
    transmittance: Real,
    d: Vec2,
}

/// Front-to-back compositing of one pixel over a tile list. Pushes every
/// accepted contribution into `hits` when provided.
fn composite_pixel(
    splats: &[Splat2D],
    list: &[u32],
    px: Real,
    py: Real,
    mut hits: Option<&mut Vec<Hit>>,
) -> (Vec3, Real, u32) {
    let mut t = 1.0;
    let mut c = Vec3::zeros();
    let mut count = 0;
    for (slot, &pos) in list.iter().enumerate() {
        let s = &splats[pos as usize];
        let (power, d) = gaussian_power(s, px, py);
        if power > 0.0 {
            continue;
        }
        let gauss = power.exp();
        let a = s.opacity * gauss;
        if a < MIN_ALPHA {
            continue;
        }
        if let Some(h) = hits.as_deref_mut() {
            h.push(Hit { slot, alpha: a, gauss, transmittance: t, d });
        }
        c += s.color * (a * t);
        t *= 1.0 - a;
        count += 1;
        if 1.0 - t > SATURATION {
            break;
        }
    }
    (c, 1.0 - t, count)
}

/// Tile rasterizer over globally depth-sorted splats.
pub fn rasterize(scene: &SplatScene, cam: &Camera) -> RenderOutput {
    let splats = project_splats(scene, cam);
    rasterize_splats(&splats, cam.width as usize, cam.height as usize)
}

pub fn rasterize_splats(splats: &[Splat2D], width: usize, height: usize) -> RenderOutput {
    let grid = bin_splats(splats, width, height);
    let tiles: Vec<Vec<(usize, usize, Vec3, Real, u32)>> = (0..grid.lists.len())
        .into_par_iter()
        .map(|t| {
            let list = &grid.lists[t];
            tile_pixels(t, &grid, width, height)
                .map(|(x, y)| {
                    let (c, a, n) = composite_pixel(splats, list, x as Real, y as Real, None);
                    (x, y, c, a, n)
                })
                .collect()
        })
        .collect();
    let mut out = RenderOutput::blank(width, height);
    for tile in tiles {
        for (x, y, c, a, n) in tile {
            let p = y * width + x;
            out.image[3 * p..3 * p + 3].copy_from_slice(c.as_slice());
            out.alpha[p] = a;
            out.contributors[p] = n;
        }
    }
    out
}

/// Exact compositing of every projected Gaussian at every pixel, without
/// support truncation, opacity cutoff or early termination.
pub fn render_oracle(scene: &SplatScene, cam: &Camera) -> RenderOutput {
    let splats = project_splats(scene, cam);
    let (width, height) = (cam.width as usize, cam.height as usize);
    let rows: Vec<Vec<(Vec3, Real, u32)>> = (0..height)
        .into_par_iter()
        .map(|y| {
            (0..width)
                .map(|x| {
                    let mut t = 1.0;
                    let mut c = Vec3::zeros();
                    let mut n = 0;
                    for s in &splats {
                        let (power, _) = gaussian_power(s, x as Real, y as Real);
                        let a = s.opacity * power.exp();
                        c += s.color * (a * t);
                        t *= 1.0 - a;
                        n += 1;
                    }
                    (c, 1.0 - t, n)
                })
                .collect()
        })
        .collect();
    let mut out = RenderOutput::blank(width, height);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (c, a, n)) in row.into_iter().enumerate() {
            let p = y * width + x;
            out.image[3 * p..3 * p + 3].copy_from_slice(c.as_slice());
            out.alpha[p] = a;
            out.contributors[p] = n;
        }
    }
    out
}

/// Gradients of a scalar loss with respect to the rasterizer inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGrads {
    pub means: Vec<Vec3>,
    pub covariances: Vec<Mat3>,
    pub colors: Vec<Vec3>,
    pub opacities: Vec<Real>,
    /// Norm of the screen-space mean gradient in normalized device units,
    /// the densification statistic. Zero for culled Gaussians.
    pub screen_grad_norm: Vec<Real>,
    /// Whether the Gaussian was projected in this view.
    pub visible: Vec<bool>,
}

impl SceneGrads {
    pub fn zeros(n: usize) -> Self {
        SceneGrads {
            means: vec![Vec3::zeros(); n],
            covariances: vec![Mat3::zeros(); n],
            colors: vec![Vec3::zeros(); n],
            opacities: vec![0.0; n],
            screen_grad_norm: vec![0.0; n],
            visible: vec![false; n],
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct SplatGrad {
    uv: Vec2,
    /// Gradient with respect to the conic entries `(a, b, c)` of
    /// `[[a, b], [b, c]]`, with `b` counted once.
    conic: [Real; 3],
    color: Vec3,
    opacity: Real,
}

fn accumulate(dst: &mut SplatGrad, src: &SplatGrad) {
    dst.uv += src.uv;
    for k in 0..3 {
        dst.conic[k] += src.conic[k];
    }
    dst.color += src.color;
    dst.opacity += src.opacity;
}

/// Adjoint of [`rasterize`]. `grad_image` is `height x width x 3`,
/// `grad_alpha` is `height x width`.
pub fn rasterize_backward(scene: &SplatScene, cam: &Camera, grad_image: &[Real], grad_alpha: &[Real]) -> SceneGrads {
    let (width, height) = (cam.width as usize, cam.height as usize);
    assert_eq!(grad_image.len(), width * height * 3);
    assert_eq!(grad_alpha.len(), width * height);
    let splats = project_splats(scene, cam);
    let grid = bin_splats(&splats, width, height);
    let tile_grads: Vec<Vec<SplatGrad>> = (0..grid.lists.len())
        .into_par_iter()
        .map(|t| {
            let list = &grid.lists[t];
            let mut acc = vec![SplatGrad::default(); list.len()];
            let mut hits = Vec::new();
            for (x, y) in tile_pixels(t, &grid, width, height) {
                let p = y * width + x;
                let dc = Vec3::new(grad_image[3 * p], grad_image[3 * p + 1], grad_image[3 * p + 2]);
                let dm = grad_alpha[p];
                if dc == Vec3::zeros() && dm == 0.0 {
                    continue;
                }
                hits.clear();
                composite_pixel(&splats, list, x as Real, y as Real, Some(&mut hits));
                // behind: colour composited behind the current hit, relative
                // to its own transmittance; after: product of (1 - a) behind it
                let mut behind = Vec3::zeros();
                let mut after = 1.0;
                for h in hits.iter().rev() {
                    let s = &splats[list[h.slot] as usize];
                    let g = &mut acc[h.slot];
                    g.color += dc * (h.alpha * h.transmittance);
                    let da = h.transmittance * (dc.dot(&(s.color - behind)) + dm * after);
                    behind = s.color * h.alpha + behind * (1.0 - h.alpha);
                    after *= 1.0 - h.alpha;
                    g.opacity += da * h.gauss;
                    let dpower = da * h.alpha;
                    let q = &s.conic;
                    let qd = Vec2::new(q[(0, 0)] * h.d.x + q[(0, 1)] * h.d.y, q[(0, 1)] * h.d.x + q[(1, 1)] * h.d.y);
                    g.uv += qd * dpower;
                    g.conic[0] -= 0.5 * dpower * h.d.x * h.d.x;
                    g.conic[1] -= dpower * h.d.x * h.d.y;
                    g.conic[2] -= 0.5 * dpower * h.d.y * h.d.y;
                }
            }
            acc
        })
        .collect();
    let mut per_splat = vec![SplatGrad::default(); splats.len()];
    for (list, grads) in grid.lists.iter().zip(&tile_grads) {
        for (&pos, g) in list.iter().zip(grads) {
            accumulate(&mut per_splat[pos as usize], g);
        }
    }
    let mut out = SceneGrads::zeros(scene.len());
    let half = Vec2::new(0.5 * width as Real, 0.5 * height as Real);
    let chained: Vec<(usize, Vec3, Mat3)> = splats
        .par_iter()
        .zip(&per_splat)
        .map(|(s, g)| {
            let (dmean, dsigma) = splat_backward(s, g, &scene.covariances[s.index], cam);
            (s.index, dmean, dsigma)
        })
        .collect();
    for ((i, dmean, dsigma), (s, g)) in chained.into_iter().zip(splats.iter().zip(&per_splat)) {
        out.means[i] = dmean;
        out.covariances[i] = dsigma;
        out.colors[i] = g.color;
        out.opacities[i] = g.opacity;
        out.screen_grad_norm[i] = g.uv.component_mul(&half).norm();
        out.visible[i] = s.radius > 0.0;
    }
    out
}

/// Chains a splat's screen-space gradients to its 3D mean and covariance.
fn splat_backward(s: &Splat2D, g: &SplatGrad, sigma: &Mat3, cam: &Camera) -> (Vec3, Mat3) {
    let q = &s.conic;
    let dq = Mat2::new(g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2]);
    let dcov = -(q * dq * q);
    let x = s.x_cam;
    let j = cam.projection_jacobian(&x);
    let w = cam.rotation;
    let m = w * sigma * w.transpose();
    let dm = j.transpose() * dcov * j;
    let dsigma = w.transpose() * dm * w;
    let dj = dcov * j * m * 2.0;
    let (fx, fy) = (cam.fx, cam.fy);
    let iz = 1.0 / x.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut dx = j.transpose() * g.uv;
    dx.x += dj[(0, 2)] * (-fx * iz2);
    dx.y += dj[(1, 2)] * (-fy * iz2);
    dx.z += dj[(0, 0)] * (-fx * iz2)
        + dj[(0, 2)] * (2.0 * fx * x.x * iz3)
        + dj[(1, 1)] * (-fy * iz2)
        + dj[(1, 2)] * (2.0 * fy * x.y * iz3);
    (w.transpose() * dx, dsigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rodrigues_to_matrix, BoneTransform};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(super) fn camera(w: u32, h: u32, f: Real) -> Camera {
        Camera::look_at(&Vec3::new(0.0, 0.0, -3.0), &Vec3::zeros(), &Vec3::new(0.0, -1.0, 0.0), f, f, w, h).unwrap()
    }

    fn rand_vec(rng: &mut ChaCha8Rng, r: Real) -> Vec3 {
        Vec3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r))
    }

    pub(super) fn random_scene(rng: &mut ChaCha8Rng, n: usize, spread: Real, scale: (Real, Real)) -> SplatScene {
        let mut s = SplatScene::default();
        for _ in 0..n {
            s.means.push(rand_vec(rng, spread));
            let r = rodrigues_to_matrix(&rand_vec(rng, 2.0));
            let sc = Vec3::new(
                rng.random_range(scale.0..scale.1),
                rng.random_range(scale.0..scale.1),
                rng.random_range(scale.0..scale.1),
            );
            let n = r * Mat3::from_diagonal(&sc);
            s.covariances.push(n * n.transpose());
            s.colors.push(Vec3::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)));
            s.opacities.push(rng.random_range(0.05..0.95));
        }
        s
    }

    fn deformed(n: usize, rng: &mut ChaCha8Rng) -> DeformedGaussians {
        DeformedGaussians {
            positions: (0..n).map(|_| rand_vec(rng, 1.0)).collect(),
            log_scales: (0..n).map(|_| rand_vec(rng, 0.5) - Vec3::repeat(2.0)).collect(),
            rotations: (0..n).map(|_| Quat::from_axis_angle(&rand_vec(rng, 1.5))).collect(),
            colors: vec![Vec3::repeat(0.5); n],
            opacities: vec![0.5; n],
        }
    }

    #[test]
    fn warp_single_bone_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = deformed(4, &mut rng);
        let (obs, _) = rigid_warp(&d, &[BoneTransform::IDENTITY], &[1.0; 4]).unwrap();
        assert_eq!(obs.positions, d.positions);
        for i in 0..4 {
            assert!((obs.rotations[i] - d.rotations[i].to_matrix()).amax() < 1e-12);
        }
        let q = rodrigues_to_matrix(&Vec3::new(0.3, -0.5, 0.9));
        let t = Vec3::new(0.1, 0.2, -0.3);
        let (obs, _) = rigid_warp(&d, &[BoneTransform::new(q, t)], &[1.0; 4]).unwrap();
        for i in 0..4 {
            assert!((obs.positions[i] - (q * d.positions[i] + t)).amax() < 1e-12);
            assert!((obs.rotations[i] - q * d.rotations[i].to_matrix()).amax() < 1e-12);
        }
    }

    #[test]
    fn warp_three_bone_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = deformed(10, &mut rng);
        let bones: Vec<BoneTransform> =
            (0..3).map(|_| BoneTransform::new(rodrigues_to_matrix(&rand_vec(&mut rng, 0.6)), rand_vec(&mut rng, 1.0))).collect();
        let mut weights = Vec::new();
        for _ in 0..10 {
            let w: Vec<Real> = (0..3).map(|_| rng.random_range(0.1..1.0)).collect();
            let s: Real = w.iter().sum();
            weights.extend(w.iter().map(|v| v / s));
        }
        let (obs, tape) = rigid_warp(&d, &bones, &weights).unwrap();
        assert_eq!(tape.fallbacks(), 0);
        for i in 0..10 {
            let mut h = nalgebra::Matrix4::<Real>::zeros();
            let mut blend = Mat3::zeros();
            for k in 0..3 {
                h += bones[k].to_homogeneous() * weights[i * 3 + k];
                blend += bones[k].rotation * weights[i * 3 + k];
            }
            let xh = h * d.positions[i].push(1.0);
            assert!((obs.positions[i] - xh.xyz()).amax() < 1e-8);
            // polar factor by Newton iteration U <- (U + U^-T)/2
            let mut u = blend;
            for _ in 0..50 {
                u = (u + u.try_inverse().unwrap().transpose()) * 0.5;
            }
            assert!((obs.rotations[i] - u * d.rotations[i].to_matrix()).amax() < 1e-8);
        }
    }

    #[test]
    fn warp_degenerate_blend_falls_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = deformed(1, &mut rng);
        let flip = rodrigues_to_matrix(&Vec3::new(0.0, std::f64::consts::PI as Real, 0.0));
        let bones = [BoneTransform::IDENTITY, BoneTransform::new(flip, Vec3::zeros())];
        let (obs, tape) = rigid_warp(&d, &bones, &[0.5, 0.5]).unwrap();
        assert_eq!(tape.fallbacks(), 1);
        assert!((obs.rotations[0] - d.rotations[0].to_matrix()).amax() < 1e-12);
        assert!(rigid_warp(&d, &bones, &[0.7, 0.7]).is_err());
    }

    #[test]
    fn warp_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = deformed(3, &mut rng);
        let bones: Vec<BoneTransform> =
            (0..3).map(|_| BoneTransform::new(rodrigues_to_matrix(&rand_vec(&mut rng, 0.6)), rand_vec(&mut rng, 1.0))).collect();
        let weights = vec![0.2, 0.5, 0.3, 0.6, 0.1, 0.3, 0.3, 0.3, 0.4];
        let wp: Vec<Vec3> = (0..3).map(|_| rand_vec(&mut rng, 1.0)).collect();
        let wr: Vec<Mat3> = (0..3).map(|_| Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let loss = |d: &DeformedGaussians, bones: &[BoneTransform], w: &[Real]| -> Real {
            let (o, _) = rigid_warp(d, bones, w).unwrap();
            (0..3).map(|i| o.positions[i].dot(&wp[i]) + o.rotations[i].dot(&wr[i])).sum()
        };
        let (_, tape) = rigid_warp(&d, &bones, &weights).unwrap();
        let g = rigid_warp_backward(&d, &bones, &weights, &tape, &wp, &wr);
        let h = 1e-6;
        let close = |fd: Real, an: Real| assert!((fd - an).abs() < 1e-6 * fd.abs().max(1.0), "{fd} vs {an}");
        for i in 0..3 {
            for c in 0..3 {
                let mut a = d.clone();
                a.positions[i][c] += h;
                let mut b = d.clone();
                b.positions[i][c] -= h;
                close((loss(&a, &bones, &weights) - loss(&b, &bones, &weights)) / (2.0 * h), g.positions[i][c]);
            }
            for c in 0..4 {
                let mut a = d.clone();
                let mut q = a.rotations[i].to_array();
                q[c] += h;
                a.rotations[i] = Quat::from_array(q);
                let mut b = d.clone();
                let mut q = b.rotations[i].to_array();
                q[c] -= h;
                b.rotations[i] = Quat::from_array(q);
                close((loss(&a, &bones, &weights) - loss(&b, &bones, &weights)) / (2.0 * h), g.rotations[i].to_array()[c]);
            }
        }
        for j in 0..9 {
            let mut a = weights.clone();
            a[j] += h;
            let mut b = weights.clone();
            b[j] -= h;
            // the perturbed weights leave the simplex; evaluate without the check
            let raw = |w: &[Real]| -> Real {
                let mut acc = 0.0;
                for i in 0..3 {
                    let ww = &w[i * 3..i * 3 + 3];
                    let x = crate::geometry::lbs_point_unchecked(&d.positions[i], &bones, ww);
                    let mut blend = Mat3::zeros();
                    for k in 0..3 {
                        blend += bones[k].rotation * ww[k];
                    }
                    let u = polar_rotation(&blend).unwrap().rotation;
                    acc += x.dot(&wp[i]) + (u * d.rotations[i].to_matrix()).dot(&wr[i]);
                }
                acc
            };
            close((raw(&a) - raw(&b)) / (2.0 * h), g.weights[j]);
        }
        for k in 0..3 {
            for r in 0..3 {
                for c in 0..3 {
                    let mut a = bones.clone();
                    a[k].rotation[(r, c)] += h;
                    let mut b = bones.clone();
                    b[k].rotation[(r, c)] -= h;
                    close((loss(&d, &a, &weights) - loss(&d, &b, &weights)) / (2.0 * h), g.bones[k].rotation[(r, c)]);
                }
                let mut a = bones.clone();
                a[k].translation[r] += h;
                let mut b = bones.clone();
                b[k].translation[r] -= h;
                close((loss(&d, &a, &weights) - loss(&d, &b, &weights)) / (2.0 * h), g.bones[k].translation[r]);
            }
        }
    }

    #[test]
    fn covariance_backward_matches_fd() {
        let r = rodrigues_to_matrix(&Vec3::new(0.4, -0.2, 0.7));
        let ls = Vec3::new(-1.0, -0.5, 0.2);
        let w = Mat3::from_fn(|i, j| (i as Real + 1.0) * 0.3 - j as Real * 0.7);
        let f = |r: &Mat3, ls: &Vec3| -> Real {
            let n = r * Mat3::from_diagonal(&ls.map(Real::exp));
            (n * n.transpose()).dot(&w)
        };
        let (dr, dl) = covariance_backward(&r, &ls, &w);
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..3 {
                let mut a = r;
                a[(i, j)] += h;
                let mut b = r;
                b[(i, j)] -= h;
                assert!(((f(&a, &ls) - f(&b, &ls)) / (2.0 * h) - dr[(i, j)]).abs() < 1e-7);
            }
            let mut a = ls;
            a[i] += h;
            let mut b = ls;
            b[i] -= h;
            assert!(((f(&r, &a) - f(&r, &b)) / (2.0 * h) - dl[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn project_covariance_examples() {
        let cam = Camera::new(Mat3::identity(), Vec3::zeros(), 100.0, 100.0, 32.0, 32.0, 64, 64).unwrap();
        let sigma = Mat3::identity() * 0.01;
        let c1 = project_covariance(&sigma, &cam, &Vec3::new(0.0, 0.0, 1.0));
        assert!((c1 - Mat2::identity() * (100.0 * 100.0 * 0.01 + DILATION)).amax() < 1e-9);
        let c2 = project_covariance(&sigma, &cam, &Vec3::new(0.0, 0.0, 2.0));
        let pre1 = c1 - Mat2::identity() * DILATION;
        let pre2 = c2 - Mat2::identity() * DILATION;
        assert!((pre2 * 4.0 - pre1).amax() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let rot = rodrigues_to_matrix(&rand_vec(&mut rng, 2.0));
            let cam = Camera::new(rot, rand_vec(&mut rng, 0.5), 80.0, 90.0, 30.0, 20.0, 64, 48).unwrap();
            let a = Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let sigma = a * a.transpose();
            let x = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(1.0..4.0));
            let j = cam.projection_jacobian(&x);
            let t1 = j * cam.rotation;
            let t2 = t1 * sigma;
            let oracle = t2 * t1.transpose() + Mat2::identity() * DILATION;
            assert!((project_covariance(&sigma, &cam, &x) - oracle).amax() < 1e-10);
        }
    }

    #[test]
    fn empty_scene_is_black() {
        let cam = camera(32, 32, 40.0);
        let out = rasterize(&SplatScene::default(), &cam);
        assert!(out.image.iter().all(|v| *v == 0.0));
        assert!(out.alpha.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_gaussian_center_pixel() {
        let cam = Camera::new(Mat3::identity(), Vec3::zeros(), 50.0, 50.0, 16.0, 16.0, 32, 32).unwrap();
        let scene = SplatScene {
            means: vec![Vec3::new(0.0, 0.0, 2.0)],
            covariances: vec![Mat3::identity() * 0.01],
            colors: vec![Vec3::new(0.2, 0.6, 0.9)],
            opacities: vec![0.8],
        };
        let out = rasterize(&scene, &cam);
        let c = out.pixel(16, 16);
        assert!((c - Vec3::new(0.2, 0.6, 0.9) * 0.8).amax() < 1e-15);
        assert!((out.alpha[16 * 32 + 16] - 0.8).abs() < 1e-15);
        let oracle = render_oracle(&scene, &cam);
        assert!((oracle.pixel(16, 16) - c).amax() < 1e-12);
    }

    /// Skipping a contribution below [`MIN_ALPHA`] loses at most that
    /// contribution plus the same amount of transmittance it would have
    /// removed from everything behind it, and early termination leaves at
    /// most `1 - SATURATION` of transmittance unused.
    #[test]
    fn rasterizer_matches_oracle_within_skip_bound() {
        let cam = camera(64, 64, 70.0);
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let scene = random_scene(&mut rng, 50, 1.0, (0.02, 0.15));
            let fast = rasterize(&scene, &cam);
            let slow = render_oracle(&scene, &cam);
            let splats = project_splats(&scene, &cam);
            for y in 0..64 {
                for x in 0..64 {
                    let skipped: Real = splats
                        .iter()
                        .map(|s| s.opacity * gaussian_power(s, x as Real, y as Real).0.exp())
                        .filter(|a| *a < MIN_ALPHA)
                        .sum();
                    let bound = 2.0 * skipped + (1.0 - SATURATION) + 1e-12;
                    let p = y * 64 + x;
                    for ch in 0..3 {
                        let dev = (fast.image[3 * p + ch] - slow.image[3 * p + ch]).abs();
                        assert!(dev <= bound, "pixel ({x}, {y}): deviation {dev} above bound {bound}");
                    }
                }
            }
        }
    }

    #[test]
    fn alpha_map_is_one_minus_transmittance() {
        let cam = camera(32, 32, 40.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let scene = random_scene(&mut rng, 10, 0.8, (0.05, 0.2));
        let out = render_oracle(&scene, &cam);
        let splats = project_splats(&scene, &cam);
        for y in 0..32 {
            for x in 0..32 {
                let prod: Real = splats
                    .iter()
                    .map(|s| 1.0 - s.opacity * gaussian_power(s, x as Real, y as Real).0.exp())
                    .product();
                assert!((out.alpha[y * 32 + x] - (1.0 - prod)).abs() < 1e-12);
                let weight_sum: Real = {
                    let mut t = 1.0;
                    let mut acc = 0.0;
                    for s in &splats {
                        let a = s.opacity * gaussian_power(s, x as Real, y as Real).0.exp();
                        acc += a * t;
                        t *= 1.0 - a;
                    }
                    acc
                };
                assert!(weight_sum <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn permutation_invariance() {
        let cam = camera(32, 32, 40.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut scene = random_scene(&mut rng, 12, 0.8, (0.05, 0.2));
        // two Gaussians at identical depth
        scene.means[1] = Vec3::new(0.1, 0.0, scene.means[0].z);
        scene.means[0].x = -0.1;
        let a = rasterize(&scene, &cam);
        let order: Vec<usize> = (0..12).rev().collect();
        let perm = SplatScene {
            means: order.iter().map(|&i| scene.means[i]).collect(),
            covariances: order.iter().map(|&i| scene.covariances[i]).collect(),
            colors: order.iter().map(|&i| scene.colors[i]).collect(),
            opacities: order.iter().map(|&i| scene.opacities[i]).collect(),
        };
        let b = rasterize(&perm, &cam);
        for (x, y) in a.image.iter().zip(&b.image) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn weighted_loss(out: &RenderOutput, wi: &[Real], wa: &[Real]) -> Real {
        out.image.iter().zip(wi).map(|(a, b)| a * b).sum::<Real>() + out.alpha.iter().zip(wa).map(|(a, b)| a * b).sum::<Real>()
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cam = camera(16, 16, 20.0);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let scene = random_scene(&mut rng, 4, 0.5, (0.1, 0.3));
        let g = rasterize_backward(&scene, &cam, &vec![0.0; 16 * 16 * 3], &vec![0.0; 256]);
        assert!(g.means.iter().all(|v| *v == Vec3::zeros()));
        assert!(g.opacities.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_matches_fd_on_micro_scenes() {
        let cam = camera(16, 16, 20.0);
        let h = 1e-6;
        let mut checked = 0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let scene = random_scene(&mut rng, 4, 0.5, (0.1, 0.3));
            let wi: Vec<Real> = (0..16 * 16 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let wa: Vec<Real> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = rasterize_backward(&scene, &cam, &wi, &wa);
            let f = |s: &SplatScene| weighted_loss(&rasterize(s, &cam), &wi, &wa);
            let check = |fd: Real, an: Real| {
                let tol = 1e-4 * fd.abs().max(an.abs()) + 1e-6;
                assert!((fd - an).abs() <= tol, "seed {seed}: fd {fd} analytic {an}");
            };
            for i in 0..4 {
                for c in 0..3 {
                    let mut a = scene.clone();
                    a.means[i][c] += h;
                    let mut b = scene.clone();
                    b.means[i][c] -= h;
                    check((f(&a) - f(&b)) / (2.0 * h), g.means[i][c]);
                    let mut a = scene.clone();
                    a.colors[i][c] += h;
                    let mut b = scene.clone();
                    b.colors[i][c] -= h;
                    check((f(&a) - f(&b)) / (2.0 * h), g.colors[i][c]);
                }
                for (r, c) in [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)] {
                    let mut a = scene.clone();
                    a.covariances[i][(r, c)] += h;
                    a.covariances[i][(c, r)] = a.covariances[i][(r, c)];
                    let mut b = scene.clone();
                    b.covariances[i][(r, c)] -= h;
                    b.covariances[i][(c, r)] = b.covariances[i][(r, c)];
                    let an = if r == c { g.covariances[i][(r, c)] } else { g.covariances[i][(r, c)] + g.covariances[i][(c, r)] };
                    check((f(&a) - f(&b)) / (2.0 * h), an);
                }
                let mut a = scene.clone();
                a.opacities[i] += h;
                let mut b = scene.clone();
                b.opacities[i] -= h;
                check((f(&a) - f(&b)) / (2.0 * h), g.opacities[i]);
                checked += 1;
            }
        }
        assert_eq!(checked, 80);
    }

    #[test]
    fn perfect_fit_has_zero_l1_gradient() {
        let cam = camera(16, 16, 20.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scene = random_scene(&mut rng, 1, 0.2, (0.1, 0.3));
        // the subgradient of |x - x| is taken as zero
        let target = rasterize(&scene, &cam);
        let out = rasterize(&scene, &cam);
        let gi: Vec<Real> = out.image.iter().zip(&target.image).map(|(a, b)| if a == b { 0.0 } else { (a - b).signum() }).collect();
        let g = rasterize_backward(&scene, &cam, &gi, &vec![0.0; 256]);
        assert!(g.means.iter().all(|v| *v == Vec3::zeros()));
    }
}
