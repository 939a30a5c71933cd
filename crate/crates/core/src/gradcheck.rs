//! Central finite-difference checks of every hand-written backward pass,
//! from the geometric primitives up to the full deformation and rendering
//! pipeline.
//!
//! Each check compares an analytic derivative `a` with a central difference
//! `n` through the scaled error `|a - n| / (max(|a|, |n|) + FLOOR)`. A check
//! passes when the error is at most [`TOLERANCE`], which is `allclose` with
//! `rtol = 1e-4` and `atol = 1e-8`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::body::{make_synthetic_body, BodyError, BodyRecipe, BodyTemplate, Pose};
use crate::gaussians::{logit, GaussianSet};
use crate::geometry::{
    polar_rotation, quat_mul, quat_mul_backward, rodrigues_derivatives, rodrigues_to_matrix, Camera, Mat3, Quat,
    Vec3,
};
use crate::motion::{multiscale_strides, KnnCache, MotionError, MotionTable, PoseSequence};
use crate::nets::{Activation, ConditionShape, DenseNet, NetDims, NetError, TaskNets};
use crate::pipeline::{backward, forward, frame_inputs, ConditionFlags, FrameInputs, Model, PipelineError};
use crate::raster::{covariance_backward, rasterize, rasterize_backward, RenderOutput, SplatScene};
use crate::train::loss::{loss_l1, loss_mask, loss_ssim, total_loss, LossError, LossWeights};
use crate::Real;

pub const TOLERANCE: Real = 1e-4;
/// `atol / rtol`.
pub const FLOOR: Real = 1e-4;
pub const STEP: Real = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum GradcheckError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Body(#[from] BodyError),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

pub fn scaled_error(analytic: Real, numeric: Real) -> Real {
    (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub checked: usize,
    pub max_error: Real,
    /// Label of the entry with the largest error.
    pub worst: String,
}

impl SuiteReport {
    fn new(name: &'static str) -> Self {
        SuiteReport { name, checked: 0, max_error: 0.0, worst: String::new() }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_error <= TOLERANCE
    }

    /// Checks `analytic` against the central difference of `eval` as the
    /// entry behind `slot` moves. Rendering is only piecewise smooth, so a
    /// failing difference is retried with a ten times smaller step before
    /// the error is recorded.
    fn check<S>(
        &mut self,
        state: &mut S,
        label: impl FnOnce() -> String,
        analytic: Real,
        slot: impl for<'a> Fn(&'a mut S) -> &'a mut Real,
        eval: &impl Fn(&S) -> Real,
    ) {
        let mut err = scaled_error(analytic, central(state, &slot, eval, STEP));
        if err > TOLERANCE {
            err = err.min(scaled_error(analytic, central(state, &slot, eval, STEP * 0.1)));
        }
        self.record(err, label);
    }

    fn record(&mut self, err: Real, label: impl FnOnce() -> String) {
        self.checked += 1;
        if !(err <= self.max_error) {
            self.max_error = err;
            self.worst = label();
        }
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<10} {:>7} checked  max error {:.2e}  {}",
            self.name,
            self.checked,
            self.max_error,
            if self.passed() { "ok" } else { "FAIL" }
        )?;
        if !self.worst.is_empty() {
            write!(f, "  (worst: {})", self.worst)?;
        }
        Ok(())
    }
}

fn central<S>(
    state: &mut S,
    slot: &impl for<'a> Fn(&'a mut S) -> &'a mut Real,
    eval: &impl Fn(&S) -> Real,
    h: Real,
) -> Real {
    let x0 = *slot(state);
    *slot(state) = x0 + h;
    let fp = eval(state);
    *slot(state) = x0 - h;
    let fm = eval(state);
    *slot(state) = x0;
    (fp - fm) / (2.0 * h)
}

fn quat_slot(q: &mut Quat, c: usize) -> &mut Real {
    match c {
        0 => &mut q.w,
        1 => &mut q.x,
        2 => &mut q.y,
        _ => &mut q.z,
    }
}

fn quat_component(q: Quat, c: usize) -> Real {
    q.to_array()[c]
}

fn rand_vec(rng: &mut ChaCha8Rng, r: Real) -> Vec3 {
    Vec3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r))
}

fn rand_mat(rng: &mut ChaCha8Rng) -> Mat3 {
    Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0))
}

fn rand_quat(rng: &mut ChaCha8Rng) -> Quat {
    Quat::new(rng.random_range(0.5..1.5), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
}

fn rand_vec_n(rng: &mut ChaCha8Rng, n: usize, lo: Real, hi: Real) -> Vec<Real> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn dot(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rodrigues map, quaternion algebra, polar factor and the projection
/// Jacobian.
pub fn geometry_suite(seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = SuiteReport::new("geometry");
    for trial in 0..8 {
        let g = rand_mat(&mut rng);

        let mut theta = rand_vec(&mut rng, 1.5);
        let d = rodrigues_derivatives(&theta);
        for c in 0..3 {
            rep.check(&mut theta, || format!("rodrigues[{trial}].{c}"), d[c].dot(&g), |t| &mut t[c], &|t: &Vec3| {
                rodrigues_to_matrix(t).dot(&g)
            });
        }

        let mut q = rand_quat(&mut rng);
        let dq = q.to_matrix_backward(&g);
        for c in 0..4 {
            rep.check(&mut q, || format!("quat_to_matrix[{trial}].{c}"), quat_component(dq, c), |q| quat_slot(q, c), &|q: &Quat| {
                q.to_matrix().dot(&g)
            });
        }

        let gq = rand_quat(&mut rng);
        let dn = q.normalize_backward(gq);
        for c in 0..4 {
            rep.check(&mut q, || format!("quat_normalize[{trial}].{c}"), quat_component(dn, c), |q| quat_slot(q, c), &|q: &Quat| {
                q.normalized().dot(gq)
            });
        }

        let mut ab = (rand_quat(&mut rng), rand_quat(&mut rng));
        let (da, db) = quat_mul_backward(ab.0, ab.1, gq);
        let f = |ab: &(Quat, Quat)| quat_mul(ab.0, ab.1).dot(gq);
        for c in 0..4 {
            rep.check(&mut ab, || format!("quat_mul.a[{trial}].{c}"), quat_component(da, c), |ab| quat_slot(&mut ab.0, c), &f);
            rep.check(&mut ab, || format!("quat_mul.b[{trial}].{c}"), quat_component(db, c), |ab| quat_slot(&mut ab.1, c), &f);
        }

        let mut a = rodrigues_to_matrix(&rand_vec(&mut rng, 2.0)) * Mat3::from_diagonal(&Vec3::new(1.0, 1.3, 0.7))
            + 0.2 * rand_mat(&mut rng);
        if let Some(polar) = polar_rotation(&a) {
            let da = polar.backward(&g);
            for r in 0..3 {
                for c in 0..3 {
                    rep.check(&mut a, || format!("polar[{trial}]({r},{c})"), da[(r, c)], |a| &mut a[(r, c)], &|a: &Mat3| {
                        polar_rotation(a).map_or(Real::NAN, |p| p.rotation.dot(&g))
                    });
                }
            }
        }

        let cam = Camera::look_at(&Vec3::new(0.3, -0.2, -3.0), &Vec3::zeros(), &Vec3::y(), 50.0, 45.0, 32, 24)
            .expect("valid camera");
        let mut x = cam.to_camera(&rand_vec(&mut rng, 0.5));
        let gp = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let jac = cam.projection_jacobian(&x);
        for c in 0..3 {
            let an = gp.0 * jac[(0, c)] + gp.1 * jac[(1, c)];
            rep.check(&mut x, || format!("projection[{trial}].{c}"), an, |x| &mut x[c], &|x: &Vec3| {
                let p = cam.project_camera_point(x);
                gp.0 * p.uv.x + gp.1 * p.uv.y
            });
        }
    }
    rep
}

/// Dense layers with every activation, against both parameters and inputs.
pub fn nets_suite(seed: u64) -> SuiteReport {
    use Activation::*;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = SuiteReport::new("nets");
    for (name, acts) in [("relu-tanh", [Relu, Tanh, None]), ("tanh-relu", [Tanh, Relu, Tanh])] {
        let mut net = DenseNet::new(name, &[5, 7, 6, 4], &acts).kaiming(&mut rng);
        net.params.iter_mut().for_each(|p| *p += rng.random_range(-0.1..0.1));
        let rows = 3;
        let input = rand_vec_n(&mut rng, rows * 5, -1.0, 1.0);
        let g = rand_vec_n(&mut rng, rows * 4, -1.0, 1.0);
        let (_, tape) = net.forward_batch(&input, rows).expect("shapes match");
        let mut gp = vec![0.0; net.num_params()];
        let gx = net.backward(&tape, &g, &mut gp);
        let mut state = (net, input);
        let f = |s: &(DenseNet, Vec<Real>)| dot(&s.0.forward_batch(&s.1, rows).expect("shapes match").0, &g);
        for (i, an) in gp.iter().enumerate() {
            rep.check(&mut state, || format!("{name}.param[{i}]"), *an, |s| &mut s.0.params[i], &f);
        }
        for (i, an) in gx.iter().enumerate() {
            rep.check(&mut state, || format!("{name}.input[{i}]"), *an, |s| &mut s.1[i], &f);
        }
    }
    rep
}

/// L1, mask and SSIM losses on a 16x16 image.
pub fn loss_suite(seed: u64) -> Result<SuiteReport, GradcheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = SuiteReport::new("loss");
    let (w, h) = (16, 16);
    let target = rand_vec_n(&mut rng, w * h * 3, 0.0, 1.0);
    let mut image = rand_vec_n(&mut rng, w * h * 3, 0.0, 1.0);
    let (_, g1) = loss_l1(&image, &target)?;
    let (_, gs) = loss_ssim(&image, &target, w, h)?;
    for i in 0..image.len() {
        rep.check(&mut image, || format!("l1[{i}]"), g1[i], |x| &mut x[i], &|x: &Vec<Real>| {
            loss_l1(x, &target).expect("same shape").0
        });
        rep.check(&mut image, || format!("ssim[{i}]"), gs[i], |x| &mut x[i], &|x: &Vec<Real>| {
            loss_ssim(x, &target, w, h).expect("same shape").0
        });
    }
    let mask: Vec<Real> = (0..w * h).map(|_| rng.random_range(0..2) as Real).collect();
    let mut alpha = rand_vec_n(&mut rng, w * h, 0.0, 1.0);
    let (_, gm) = loss_mask(&alpha, &mask)?;
    for i in 0..alpha.len() {
        rep.check(&mut alpha, || format!("mask[{i}]"), gm[i], |x| &mut x[i], &|x: &Vec<Real>| {
            loss_mask(x, &mask).expect("same shape").0
        });
    }
    Ok(rep)
}

fn raster_camera() -> Camera {
    Camera::look_at(&Vec3::new(0.0, 0.0, -3.0), &Vec3::zeros(), &Vec3::y(), 20.0, 20.0, 16, 16).expect("valid camera")
}

/// Rasterizer and covariance parametrization on four-Gaussian 16x16 scenes.
pub fn raster_suite(seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = SuiteReport::new("raster");
    let cam = raster_camera();
    let (w, h) = (16, 16);
    for trial in 0..4 {
        let mut scene = SplatScene::default();
        let mut params = Vec::new();
        for _ in 0..4 {
            let r = rodrigues_to_matrix(&rand_vec(&mut rng, 2.0));
            let ls = Vec3::new(
                rng.random_range(0.1 as Real..0.3).ln(),
                rng.random_range(0.1 as Real..0.3).ln(),
                rng.random_range(0.1 as Real..0.3).ln(),
            );
            let s = r * Mat3::from_diagonal(&ls.map(Real::exp));
            scene.means.push(rand_vec(&mut rng, 0.5));
            scene.covariances.push(s * s.transpose());
            scene.colors.push(Vec3::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)));
            scene.opacities.push(rng.random_range(0.05..0.95));
            params.push((r, ls));
        }
        let gi = rand_vec_n(&mut rng, w * h * 3, -1.0, 1.0);
        let ga = rand_vec_n(&mut rng, w * h, -1.0, 1.0);
        let g = rasterize_backward(&scene, &cam, &gi, &ga);
        let f = |s: &SplatScene| {
            let out = rasterize(s, &cam);
            dot(&out.image, &gi) + dot(&out.alpha, &ga)
        };
        for i in 0..4 {
            for c in 0..3 {
                rep.check(&mut scene, || format!("mean[{trial}.{i}].{c}"), g.means[i][c], |s| &mut s.means[i][c], &f);
                rep.check(&mut scene, || format!("color[{trial}.{i}].{c}"), g.colors[i][c], |s| &mut s.colors[i][c], &f);
            }
            rep.check(&mut scene, || format!("opacity[{trial}.{i}]"), g.opacities[i], |s| &mut s.opacities[i], &f);
            // Symmetric perturbation of each covariance entry pair.
            for (r, c) in [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)] {
                let gc = &g.covariances[i];
                let an = if r == c { gc[(r, c)] } else { gc[(r, c)] + gc[(c, r)] };
                let sym = |s: &SplatScene| {
                    let mut s = s.clone();
                    s.covariances[i][(c, r)] = s.covariances[i][(r, c)];
                    f(&s)
                };
                rep.check(&mut scene, || format!("covariance[{trial}.{i}]({r},{c})"), an, |s| &mut s.covariances[i][(r, c)], &sym);
            }

            // Covariance from log-scales and rotation, against a fixed upstream.
            let (rot, ls) = params[i];
            let gsig = rand_mat(&mut rng);
            let (d_rot, d_ls) = covariance_backward(&rot, &ls, &gsig);
            let cov = |r: &Mat3, l: &Vec3| {
                let s = r * Mat3::from_diagonal(&l.map(Real::exp));
                (s * s.transpose()).dot(&gsig)
            };
            let mut st = (rot, ls);
            for c in 0..3 {
                rep.check(&mut st, || format!("cov_log_scale[{trial}.{i}].{c}"), d_ls[c], |s| &mut s.1[c], &|s: &(Mat3, Vec3)| {
                    cov(&s.0, &s.1)
                });
                for r in 0..3 {
                    rep.check(&mut st, || format!("cov_rotation[{trial}.{i}]({r},{c})"), d_rot[(r, c)], |s| &mut s.0[(r, c)], &|s: &(Mat3, Vec3)| {
                        cov(&s.0, &s.1)
                    });
                }
            }
        }
    }
    rep
}

/// Scene for the end-to-end check: a two-bone chain, four Gaussians, a
/// 16x16 view and networks with random weights in every layer.
pub struct PipelineScene {
    pub template: BodyTemplate,
    pub model: Model,
    pub inputs: FrameInputs,
    pub camera: Camera,
}

pub fn pipeline_scene(seed: u64, dims: NetDims, length: usize, tau: usize) -> Result<PipelineScene, GradcheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = make_synthetic_body(&BodyRecipe::chain(2, 0.5, 0.1, 3, 6), seed)?;
    let k = template.num_joints();
    let strides = multiscale_strides(1, 2, 2)?;
    let frames = length * strides.max_stride() + 2;
    let poses = (0..frames)
        .map(|_| Pose::new((0..k).map(|_| rand_vec(&mut rng, 0.3)).collect(), rand_vec(&mut rng, 0.05)))
        .collect::<Result<Vec<_>, _>>()?;
    let poses = PoseSequence::new(0, poses)?;
    let table = MotionTable::new(&template, &poses)?;

    let n = 4;
    let nv = template.num_vertices();
    let mut gaussians = GaussianSet {
        positions: Vec::new(),
        log_scales: Vec::new(),
        rotations: Vec::new(),
        colors: Vec::new(),
        opacity_logits: Vec::new(),
        revision: 0,
    };
    for i in 0..n {
        let v = template.vertices[(i * nv / n + rng.random_range(0..nv / n)) % nv];
        gaussians.positions.push(v + rand_vec(&mut rng, 0.02));
        gaussians.log_scales.push(Vec3::repeat((0.12 as Real).ln()) + rand_vec(&mut rng, 0.3));
        gaussians.rotations.push(rand_quat(&mut rng));
        gaussians.colors.push(Vec3::new(rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)));
        gaussians.opacity_logits.push(logit(rng.random_range(0.2..0.9)));
    }
    let cache = KnnCache::build(&template, &gaussians.positions, tau, gaussians.revision)?;

    let shape = ConditionShape { num_joints: k, num_scales: strides.len(), length, tau };
    let mut nets = TaskNets::new(shape, dims, seed);
    for net in nets.nets_mut() {
        *net = net.clone().kaiming(&mut rng);
        let last = net.num_layers() - 1;
        for p in net.layer_params_mut(last) {
            *p *= 0.1;
        }
    }
    let model = Model { gaussians, nets };
    let inputs = frame_inputs(&template, &poses, &table, &cache, 0, frames - 1, &strides, length, ConditionFlags::default())?;
    let camera = Camera::look_at(&Vec3::new(0.0, 0.25, -2.5), &Vec3::new(0.0, 0.25, 0.0), &Vec3::y(), 24.0, 24.0, 16, 16)
        .expect("valid camera");
    Ok(PipelineScene { template, model, inputs, camera })
}

struct PipelineState {
    model: Model,
    inputs: FrameInputs,
}

/// Every Gaussian parameter, every network parameter, the pose and both
/// motion condition tensors through the complete forward pass and the total
/// training loss against a random target.
pub fn pipeline_suite(seed: u64) -> Result<SuiteReport, GradcheckError> {
    let dims = NetDims::default();
    let scene = pipeline_scene(seed, dims, 8, 8)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let (w, h) = (scene.camera.width as usize, scene.camera.height as usize);
    let target = rand_vec_n(&mut rng, w * h * 3, 0.0, 1.0);
    let mask: Vec<Real> = (0..w * h).map(|_| rng.random_range(0..2) as Real).collect();
    let weights = LossWeights::default();
    let loss = |out: &RenderOutput| total_loss(&out.image, &target, &out.alpha, &mask, w, h, &weights);
    let (tpl, cam) = (&scene.template, &scene.camera);
    let (out, tape) = forward(&scene.model, tpl, &scene.inputs, cam)?;
    let terms = loss(&out)?;
    let g = backward(&scene.model, tpl, cam, &tape, &terms.grad_image, &terms.grad_alpha)?;
    let f = |s: &PipelineState| match forward(&s.model, tpl, &s.inputs, cam) {
        Ok((out, _)) => loss(&out).map_or(Real::NAN, |t| t.total),
        Err(_) => Real::NAN,
    };
    let mut st = PipelineState { model: scene.model, inputs: scene.inputs };
    let mut rep = SuiteReport::new("pipeline");
    let n = st.model.gaussians.len();
    for i in 0..n {
        for c in 0..3 {
            rep.check(&mut st, || format!("position[{i}].{c}"), g.positions[i][c], |s| &mut s.model.gaussians.positions[i][c], &f);
            rep.check(&mut st, || format!("log_scale[{i}].{c}"), g.log_scales[i][c], |s| &mut s.model.gaussians.log_scales[i][c], &f);
            rep.check(&mut st, || format!("color[{i}].{c}"), g.colors[i][c], |s| &mut s.model.gaussians.colors[i][c], &f);
        }
        for c in 0..4 {
            rep.check(&mut st, || format!("rotation[{i}].{c}"), quat_component(g.rotations[i], c), |s| {
                quat_slot(&mut s.model.gaussians.rotations[i], c)
            }, &f);
        }
        rep.check(&mut st, || format!("opacity_logit[{i}]"), g.opacity_logits[i], |s| &mut s.model.gaussians.opacity_logits[i], &f);
    }
    for (idx, grads) in g.nets.iter().enumerate() {
        let name = st.model.nets.nets()[idx].name;
        for (p, an) in grads.iter().enumerate() {
            rep.check(&mut st, || format!("net_{name}[{p}]"), *an, |s| &mut s.model.nets.nets_mut()[idx].params[p], &f);
        }
    }
    for j in 0..st.inputs.pose.joint_rotations.len() {
        for c in 0..3 {
            rep.check(&mut st, || format!("pose_theta[{j}].{c}"), g.pose_rotations[j][c], |s| &mut s.inputs.pose.joint_rotations[j][c], &f);
        }
    }
    for c in 0..3 {
        rep.check(&mut st, || format!("root_translation.{c}"), g.root_translation[c], |s| &mut s.inputs.pose.root_translation[c], &f);
    }
    for (i, an) in g.skeleton_motion.iter().enumerate() {
        rep.check(&mut st, || format!("skeleton_motion[{i}]"), *an, |s| &mut s.inputs.skeleton.as_mut().expect("enabled").data[i], &f);
    }
    for (i, an) in g.point_motion.iter().enumerate() {
        rep.check(&mut st, || format!("point_motion[{i}]"), *an, |s| &mut s.inputs.point.as_mut().expect("enabled").data[i], &f);
    }
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub suites: Vec<SuiteReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteReport::passed)
    }

    pub fn max_error(&self) -> Real {
        self.suites.iter().map(|s| s.max_error).fold(0.0, Real::max)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.suites {
            writeln!(f, "{s}")?;
        }
        write!(f, "max error {:.2e} (tolerance {:.0e})", self.max_error(), TOLERANCE)
    }
}

pub fn run_all(seed: u64) -> Result<GradcheckReport, GradcheckError> {
    Ok(GradcheckReport {
        seed,
        suites: vec![geometry_suite(seed), nets_suite(seed), loss_suite(seed)?, raster_suite(seed), pipeline_suite(seed)?],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaled_error_is_allclose() {
        assert_eq!(scaled_error(1.0, 1.0), 0.0);
        assert!(scaled_error(1.0, 1.0 + 5e-5) <= TOLERANCE);
        assert!(scaled_error(1.0, 1.0 + 2e-4) > TOLERANCE);
        // Below the absolute floor everything agrees.
        assert!(scaled_error(0.0, 5e-9) <= TOLERANCE);
        assert!(scaled_error(0.0, 5e-8) > TOLERANCE);
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let mut rep = SuiteReport::new("probe");
        let mut x = 0.7;
        rep.check(&mut x, || "x^2".into(), 2.0 * 0.7, |x| x, &|x: &Real| x * x);
        assert!(rep.passed());
        rep.check(&mut x, || "x^3".into(), 2.0 * 0.7, |x| x, &|x: &Real| x * x * x);
        assert!(!rep.passed());
        assert_eq!(rep.worst, "x^3");
        assert_eq!(rep.checked, 2);
    }

    #[test]
    fn primitive_suites_pass() {
        for rep in [geometry_suite(1), nets_suite(1), raster_suite(1), loss_suite(1).unwrap()] {
            assert!(rep.passed(), "{rep}");
        }
    }

    #[test]
    fn pipeline_scene_renders_every_gaussian() {
        let s = pipeline_scene(0, NetDims::default(), 8, 8).unwrap();
        let (out, tape) = forward(&s.model, &s.template, &s.inputs, &s.camera).unwrap();
        assert!(out.alpha.iter().any(|&a| a > 0.1));
        let g = backward(&s.model, &s.template, &s.camera, &tape, &vec![1.0; 16 * 16 * 3], &vec![0.0; 256]).unwrap();
        assert!(g.visible.iter().all(|&v| v));
        assert!(g.nets.iter().all(|n| n.iter().any(|&v| v != 0.0)));
    }
}
