//! Deterministic synthetic multi-view datasets.
//!
//! A procedural body is animated by per-joint sinusoids and a root
//! trajectory. Each appendage additionally carries a damped pendulum driven by
//! the velocity of its attachment point, so its displacement at frame `t`
//! depends on the motion history and not only on the current pose. Ground
//! truth is rendered with the brute-force oracle from known Gaussians placed
//! one per template vertex, which the model can represent exactly.
//!
//! Layout on disk:
//!
//! ```text
//! manifest.json
//! template/                    body template (manifest + blobs)
//! cameras/cam_%03d.json
//! poses/%06d.json
//! images/cam_%03d/%06d.png     (+ .pfm when float output is enabled)
//! masks/cam_%03d/%06d.png
//! gt_gaussians/%06d.bin        observation-space ground truth, 19 f32 per Gaussian
//! ```

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blob;
use crate::body::{forward_kinematics, make_synthetic_body, BodyError, BodyRecipe, BodyTemplate, Pose};
use crate::gaussians::{init_from_template, logit, GaussianSet};
use crate::geometry::{Camera, GeometryError, Mat3, Quat, Vec3};
use crate::image_io::{self, ImageIoError};
use crate::motion::{multiscale_strides, MotionError, PoseSequence};
use crate::nets::DeformedGaussians;
use crate::pipeline::sanitize_weights;
use crate::raster::{render_oracle, rigid_warp, ObservedGaussians, RasterError};
use crate::Real;

/// Floats per Gaussian in a ground-truth blob: position, row-major rotation,
/// log-scale, color, opacity.
pub const GT_RECORD: usize = 19;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("pendulum integration is unstable (spectral radius {radius:.4} >= 1); {hint}")]
    Unstable { radius: Real, hint: String },
    #[error("dataset {root}: {msg}")]
    Layout { root: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error(transparent)]
    Body(#[from] BodyError),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| DataError::Json { path: path.to_path_buf(), source })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let text = serde_json::to_string_pretty(value).expect("dataset records serialize");
    blob::write_atomic(path, text.as_bytes()).map_err(io_err(path))
}

/// Per-axis sinusoid `amplitude * sin(2 pi frequency t + phase)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Wave {
    pub amplitude: [Real; 3],
    /// Cycles per frame.
    pub frequency: Real,
    /// Radians.
    pub phase: Real,
}

impl Default for Wave {
    fn default() -> Self {
        Wave { amplitude: [0.0; 3], frequency: 0.0, phase: 0.0 }
    }
}

impl Wave {
    pub fn eval(&self, t: Real) -> Vec3 {
        Vec3::from(self.amplitude) * (TAU as Real * self.frequency * t + self.phase).sin()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RootMotion {
    pub origin: [Real; 3],
    /// Constant drift per frame.
    pub velocity: [Real; 3],
    pub wave: Wave,
}

impl Default for RootMotion {
    fn default() -> Self {
        RootMotion { origin: [0.0; 3], velocity: [0.0; 3], wave: Wave::default() }
    }
}

/// Joint rotations (axis-angle, one wave per joint; missing joints stay at
/// rest) and the root trajectory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnimationSpec {
    pub joints: Vec<Wave>,
    pub root: RootMotion,
}

impl AnimationSpec {
    pub fn pose(&self, k: usize, t: usize) -> Pose {
        let tf = t as Real;
        let joint_rotations = (0..k).map(|j| self.joints.get(j).map_or(Vec3::zeros(), |w| w.eval(tf))).collect();
        let r = &self.root;
        let root_translation = Vec3::from(r.origin) + Vec3::from(r.velocity) * tf + r.wave.eval(tf);
        Pose { joint_rotations, root_translation }
    }
}

/// Damped pendulum of every appendage, integrated with explicit Euler at one
/// step per frame:
///
/// ```text
/// d[t+1] = d[t] + u[t]
/// u[t+1] = u[t] - (gravity / length) d[t] - damping u[t] - drive v[t]
/// ```
///
/// where `v[t]` is the displacement of the attachment point over the last
/// frame. A constant `v` settles at `d = -drive * length * v / gravity`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PendulumSpec {
    pub length: Real,
    pub damping: Real,
    pub gravity: Real,
    pub drive: Real,
}

impl Default for PendulumSpec {
    fn default() -> Self {
        PendulumSpec { length: 1.0, damping: 0.4, gravity: 0.3, drive: 1.0 }
    }
}

impl PendulumSpec {
    pub fn stiffness(&self) -> Real {
        self.gravity / self.length
    }

    /// Spectral radius of the one-frame update of `(d, u)`.
    pub fn spectral_radius(&self) -> Real {
        let (k, c) = (self.stiffness(), self.damping);
        let disc = c * c - 4.0 * k;
        if disc < 0.0 {
            (1.0 - c + k).max(0.0).sqrt()
        } else {
            let s = disc.sqrt();
            let a = 2.0 - c;
            ((a + s) * 0.5).abs().max(((a - s) * 0.5).abs())
        }
    }

    pub fn steady_deflection(&self, velocity: &Vec3) -> Vec3 {
        -velocity * (self.drive / self.stiffness())
    }

    fn validate(&self) -> Result<(), DataError> {
        if !(self.length > 0.0 && self.gravity > 0.0 && self.damping >= 0.0 && self.drive.is_finite()) {
            return Err(DataError::Spec("pendulum needs length > 0, gravity > 0, damping >= 0".into()));
        }
        let radius = self.spectral_radius();
        if !(radius < 1.0) {
            let k = self.stiffness();
            return Err(DataError::Unstable {
                radius,
                hint: format!(
                    "explicit Euler needs gravity/length < damping < 2 + gravity/(2 length), here {k:.4} < damping < {:.4}; \
                     raise damping or length, or lower gravity",
                    2.0 + 0.5 * k
                ),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraRing {
    pub count: usize,
    pub radius: Real,
    /// World-space height of every camera centre.
    pub height: Real,
    pub look_at: [Real; 3],
    /// Focal length in pixels.
    pub focal: Real,
    /// Every camera whose index is a multiple of this is held out; 0 holds
    /// out none.
    pub holdout_every: usize,
}

impl Default for CameraRing {
    fn default() -> Self {
        CameraRing { count: 10, radius: 3.0, height: 0.6, look_at: [0.0, 0.4, 0.0], focal: 110.0, holdout_every: 5 }
    }
}

/// Appearance of the ground-truth Gaussians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundTruthSpec {
    pub opacity: Real,
    /// Multiplies the mean nearest-neighbour spacing used as base scale.
    pub scale_factor: Real,
    /// Half-width of the uniform per-axis log-scale jitter.
    pub anisotropy: Real,
}

impl Default for GroundTruthSpec {
    fn default() -> Self {
        GroundTruthSpec { opacity: 0.9, scale_factor: 0.8, anisotropy: 0.15 }
    }
}

/// Conditioning schedule the dataset must be long enough for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HistorySpec {
    pub s0: usize,
    pub ds: usize,
    pub m: usize,
    pub length: usize,
}

impl Default for HistorySpec {
    fn default() -> Self {
        HistorySpec { s0: 1, ds: 2, m: 2, length: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub recipe: BodyRecipe,
    pub animation: AnimationSpec,
    pub pendulum: PendulumSpec,
    pub frames: usize,
    pub cameras: CameraRing,
    pub width: u32,
    pub height: u32,
    pub ground_truth: GroundTruthSpec,
    /// Conditioning schedule the frame count must cover; `None` skips the
    /// check for datasets not meant for conditioned training.
    pub history: Option<HistorySpec>,
    /// Also write lossless float images next to the PNGs.
    pub write_pfm: bool,
    pub write_gt_gaussians: bool,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec::recovery()
    }
}

impl SceneSpec {
    /// Four joints, 800 Gaussians, no appendages: 60 frames seen by a ring
    /// of 10 cameras, two of which are held out.
    pub fn recovery() -> Self {
        let wave = |amplitude: [Real; 3], phase| Wave { amplitude, frequency: 1.0 / 30.0, phase };
        SceneSpec {
            recipe: BodyRecipe::torso_proxy(false).with_resolution(10, 20),
            animation: AnimationSpec {
                joints: vec![
                    wave([0.0, 0.35, 0.0], 0.0),
                    wave([0.15, 0.0, 0.1], 1.0),
                    wave([0.0, 0.3, 0.5], 2.0),
                    wave([0.0, -0.3, 0.5], 3.0),
                ],
                root: RootMotion {
                    origin: [0.0; 3],
                    velocity: [0.0; 3],
                    wave: Wave { amplitude: [0.15, 0.05, 0.0], frequency: 1.0 / 30.0, phase: 0.5 },
                },
            },
            pendulum: PendulumSpec::default(),
            frames: 60,
            cameras: CameraRing::default(),
            width: 64,
            height: 64,
            ground_truth: GroundTruthSpec::default(),
            history: Some(HistorySpec::default()),
            write_pfm: true,
            write_gt_gaussians: true,
            seed: 7,
        }
    }

    /// Torso with a skirt and two arm flaps on pendulums. Every joint and the
    /// root oscillate in phase, so each pose recurs half a period later with
    /// the opposite velocity and the appendages hang differently.
    pub fn pendulum() -> Self {
        let period = 40.0;
        let wave = |amplitude: [Real; 3]| Wave { amplitude, frequency: 1.0 / period, phase: 0.0 };
        SceneSpec {
            recipe: BodyRecipe::torso_proxy(true),
            animation: AnimationSpec {
                joints: vec![wave([0.0, 0.25, 0.0]), wave([0.1, 0.0, 0.0]), wave([0.0, 0.0, 0.3]), wave([0.0, 0.0, -0.3])],
                root: RootMotion { origin: [0.0; 3], velocity: [0.0; 3], wave: wave([0.3, 0.0, 0.0]) },
            },
            pendulum: PendulumSpec { length: 1.0, damping: 0.4, gravity: 0.3, drive: 1.0 },
            frames: 80,
            ..SceneSpec::recovery()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.cameras.count < 2 {
            return Err(DataError::Spec(format!("need at least 2 cameras, got {}", self.cameras.count)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(DataError::Spec("image size must be positive".into()));
        }
        if self.frames == 0 {
            return Err(DataError::Spec("need at least one frame".into()));
        }
        if let Some(h) = &self.history {
            let schedule = multiscale_strides(h.s0, h.ds, h.m)?;
            let need = h.length * schedule.max_stride() + 10;
            if self.frames < need {
                return Err(DataError::Spec(format!(
                    "{} frames cannot cover history length {} at stride {} plus 10 evaluation frames (need {need})",
                    self.frames,
                    h.length,
                    schedule.max_stride()
                )));
            }
        }
        self.pendulum.validate()?;
        let gt = &self.ground_truth;
        if !(gt.opacity > 0.0 && gt.opacity < 1.0 && gt.scale_factor > 0.0 && gt.anisotropy >= 0.0) {
            return Err(DataError::Spec("ground-truth opacity must lie in (0, 1) and scales be positive".into()));
        }
        Ok(())
    }

    pub fn template(&self) -> Result<BodyTemplate, DataError> {
        Ok(make_synthetic_body(&self.recipe, self.seed)?)
    }
}

/// Joint poses plus the pendulum deflection of every appendage per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Animation {
    pub poses: PoseSequence,
    /// `[frame][appendage]` world-space deflection of the appendage tip.
    pub deflections: Vec<Vec<Vec3>>,
}

impl Animation {
    /// World-space displacement of every template vertex at frame `t`; zero
    /// outside appendages, `hang * deflection` inside.
    pub fn vertex_offsets(&self, tpl: &BodyTemplate, t: usize) -> Vec<Vec3> {
        let mut out = vec![Vec3::zeros(); tpl.num_vertices()];
        for (a, app) in tpl.appendages.iter().enumerate() {
            let d = self.deflections[t][a];
            for (v, h) in app.vertices().zip(&app.hang) {
                out[v] = d * *h;
            }
        }
        out
    }
}

/// Samples the pose program and integrates the appendage pendulums.
pub fn animate(spec: &SceneSpec, tpl: &BodyTemplate) -> Result<Animation, DataError> {
    spec.pendulum.validate()?;
    let k = tpl.num_joints();
    let poses: Vec<Pose> = (0..spec.frames).map(|t| spec.animation.pose(k, t)).collect();
    let attach = |pose: &Pose| -> Result<Vec<Vec3>, DataError> {
        let bones = forward_kinematics(tpl, pose)?;
        Ok(tpl.appendages.iter().map(|a| bones[a.anchor].apply(&Vec3::from(a.attach))).collect())
    };
    let p = &spec.pendulum;
    let (stiff, damp) = (p.stiffness(), p.damping);
    let na = tpl.appendages.len();
    let mut d = vec![Vec3::zeros(); na];
    let mut u = vec![Vec3::zeros(); na];
    let mut prev = if poses.is_empty() { Vec::new() } else { attach(&poses[0])? };
    let mut deflections = Vec::with_capacity(poses.len());
    for (t, pose) in poses.iter().enumerate() {
        if t > 0 {
            let now = attach(pose)?;
            for a in 0..na {
                let v = now[a] - prev[a];
                let (d0, u0) = (d[a], u[a]);
                d[a] = d0 + u0;
                u[a] = u0 - d0 * stiff - u0 * damp - v * p.drive;
                if !(d[a].iter().all(|x| x.is_finite()) && d[a].norm() < 1e6) {
                    return Err(DataError::Unstable {
                        radius: p.spectral_radius(),
                        hint: format!("appendage {a} deflection diverged at frame {t}; lower the drive gain"),
                    });
                }
            }
            prev = now;
        }
        deflections.push(d.clone());
    }
    Ok(Animation { poses: PoseSequence::new(0, poses)?, deflections })
}

/// Ring of `count` cameras at evenly spaced azimuths, azimuth 0 on the `+z`
/// side of `look_at`, all at world height `height` and looking at `look_at`
/// with `+y` up.
pub fn make_cameras(
    count: usize,
    radius: Real,
    height: Real,
    look_at: &Vec3,
    focal: Real,
    width: u32,
    image_height: u32,
) -> Result<Vec<Camera>, DataError> {
    (0..count)
        .map(|i| {
            let phi = TAU as Real * i as Real / count as Real;
            let eye = Vec3::new(look_at.x + radius * phi.sin(), height, look_at.z + radius * phi.cos());
            Ok(Camera::look_at(&eye, look_at, &Vec3::y(), focal, focal, width, image_height)?)
        })
        .collect()
}

fn vertex_color(i: usize) -> Vec3 {
    let f = i as Real;
    Vec3::new(
        0.5 + 0.4 * (0.21 * f).sin(),
        0.5 + 0.4 * (0.13 * f + 2.0).sin(),
        0.5 + 0.4 * (0.07 * f + 4.0).sin(),
    )
}

/// One Gaussian per template vertex with colors keyed by vertex index,
/// jittered anisotropic scales and random orientations.
pub fn ground_truth_gaussians(tpl: &BodyTemplate, spec: &GroundTruthSpec, seed: u64) -> GaussianSet {
    let mut set = init_from_template(tpl);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6774_6761_7573_73);
    let base = spec.scale_factor.ln();
    for i in 0..set.len() {
        let jitter = Vec3::from_fn(|_, _| spec.anisotropy * rng.random_range(-1.0..1.0));
        set.log_scales[i] = set.log_scales[i].add_scalar(base) + jitter;
        let q = Quat::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        set.rotations[i] = q.normalized();
        set.colors[i] = vertex_color(i);
        set.opacity_logits[i] = logit(spec.opacity);
    }
    set.enforce_invariants();
    set
}

/// Warps the ground-truth Gaussians to frame `t` and adds the appendage
/// displacement.
pub fn observe_ground_truth(
    set: &GaussianSet,
    tpl: &BodyTemplate,
    anim: &Animation,
    t: usize,
) -> Result<ObservedGaussians, DataError> {
    let bones = forward_kinematics(tpl, anim.poses.get(t)?)?;
    let weights = sanitize_weights(&tpl.skin_weights, tpl.num_joints());
    let canonical = DeformedGaussians {
        positions: set.positions.clone(),
        log_scales: set.log_scales.clone(),
        rotations: set.rotations.clone(),
        colors: set.colors.clone(),
        opacities: (0..set.len()).map(|i| set.opacity(i)).collect(),
    };
    let (mut obs, _) = rigid_warp(&canonical, &bones, &weights)?;
    for (x, o) in obs.positions.iter_mut().zip(anim.vertex_offsets(tpl, t)) {
        *x += o;
    }
    Ok(obs)
}

fn encode_ground_truth(obs: &ObservedGaussians) -> Vec<Real> {
    let mut out = Vec::with_capacity(obs.len() * GT_RECORD);
    for i in 0..obs.len() {
        out.extend(obs.positions[i].iter());
        let r: &Mat3 = &obs.rotations[i];
        for a in 0..3 {
            for b in 0..3 {
                out.push(r[(a, b)]);
            }
        }
        out.extend(obs.log_scales[i].iter());
        out.extend(obs.colors[i].iter());
        out.push(obs.opacities[i]);
    }
    out
}

fn decode_ground_truth(values: &[Real]) -> ObservedGaussians {
    let mut obs = ObservedGaussians {
        positions: Vec::new(),
        rotations: Vec::new(),
        log_scales: Vec::new(),
        colors: Vec::new(),
        opacities: Vec::new(),
    };
    for r in values.chunks_exact(GT_RECORD) {
        obs.positions.push(Vec3::new(r[0], r[1], r[2]));
        obs.rotations.push(Mat3::from_row_slice(&r[3..12]));
        obs.log_scales.push(Vec3::new(r[12], r[13], r[14]));
        obs.colors.push(Vec3::new(r[15], r[16], r[17]));
        obs.opacities.push(r[18]);
    }
    obs
}

/// Binary coverage of an oracle alpha map.
pub fn mask_from_alpha(alpha: &[Real]) -> Vec<Real> {
    alpha.iter().map(|&a| if a > 0.5 { 1.0 } else { 0.0 }).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub first_frame: usize,
    pub frames: usize,
    pub num_cameras: usize,
    pub width: u32,
    pub height: u32,
    pub train_cameras: Vec<usize>,
    pub test_cameras: Vec<usize>,
    pub num_gaussians: usize,
    pub has_pfm: bool,
    pub has_gt_gaussians: bool,
    pub spec: SceneSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Test,
}

fn camera_path(root: &Path, c: usize) -> PathBuf {
    root.join("cameras").join(format!("cam_{c:03}.json"))
}

fn image_path(root: &Path, c: usize, t: usize, ext: &str) -> PathBuf {
    root.join("images").join(format!("cam_{c:03}")).join(format!("{t:06}.{ext}"))
}

fn mask_path(root: &Path, c: usize, t: usize) -> PathBuf {
    root.join("masks").join(format!("cam_{c:03}")).join(format!("{t:06}.png"))
}

fn gt_path(root: &Path, t: usize) -> PathBuf {
    root.join("gt_gaussians").join(format!("{t:06}.bin"))
}

fn split_cameras(count: usize, every: usize) -> (Vec<usize>, Vec<usize>) {
    (0..count).partition(|&c| every == 0 || c % every != 0)
}

/// Writes a complete dataset for `spec` into `out`.
pub fn generate(spec: &SceneSpec, out: &Path) -> Result<Dataset, DataError> {
    spec.validate()?;
    let tpl = spec.template()?;
    let anim = animate(spec, &tpl)?;
    let ring = &spec.cameras;
    let cameras = make_cameras(
        ring.count,
        ring.radius,
        ring.height,
        &Vec3::from(ring.look_at),
        ring.focal,
        spec.width,
        spec.height,
    )?;
    let gt = ground_truth_gaussians(&tpl, &spec.ground_truth, spec.seed);

    fs::create_dir_all(out).map_err(io_err(out))?;
    tpl.save(&out.join("template"))?;
    anim.poses.save(out)?;
    for (c, cam) in cameras.iter().enumerate() {
        write_json(&camera_path(out, c), cam)?;
    }
    let observed: Vec<ObservedGaussians> =
        (0..spec.frames).map(|t| observe_ground_truth(&gt, &tpl, &anim, t)).collect::<Result<_, _>>()?;
    if spec.write_gt_gaussians {
        for (t, obs) in observed.iter().enumerate() {
            let p = gt_path(out, t);
            blob::write_f32_blob(&p, &encode_ground_truth(obs)).map_err(io_err(&p))?;
        }
    }
    let (w, h) = (spec.width as usize, spec.height as usize);
    let jobs: Vec<(usize, usize)> = (0..spec.frames).flat_map(|t| (0..cameras.len()).map(move |c| (t, c))).collect();
    jobs.par_iter().try_for_each(|&(t, c)| -> Result<(), DataError> {
        let render = render_oracle(&observed[t].scene(), &cameras[c]);
        image_io::write_png(&image_path(out, c, t, "png"), &render.image, w, h)?;
        if spec.write_pfm {
            image_io::write_pfm(&image_path(out, c, t, "pfm"), &render.image, w, h)?;
        }
        image_io::write_mask_png(&mask_path(out, c, t), &mask_from_alpha(&render.alpha), w, h)?;
        Ok(())
    })?;

    let (train_cameras, test_cameras) = split_cameras(cameras.len(), ring.holdout_every);
    let manifest = DatasetManifest {
        version: 1,
        first_frame: 0,
        frames: spec.frames,
        num_cameras: cameras.len(),
        width: spec.width,
        height: spec.height,
        train_cameras,
        test_cameras,
        num_gaussians: gt.len(),
        has_pfm: spec.write_pfm,
        has_gt_gaussians: spec.write_gt_gaussians,
        spec: spec.clone(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Dataset::load(out)
}

/// A dataset on disk with its small metadata loaded.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub template: BodyTemplate,
    pub poses: PoseSequence,
    pub cameras: Vec<Camera>,
}

impl Dataset {
    /// Loads the metadata and checks that every referenced file exists.
    pub fn load(root: &Path) -> Result<Self, DataError> {
        let manifest: DatasetManifest = read_json(&root.join("manifest.json"))?;
        let layout = |msg: String| DataError::Layout { root: root.to_path_buf(), msg };
        let m = &manifest;
        if m.frames == 0 || m.num_cameras == 0 {
            return Err(layout("manifest lists no frames or no cameras".into()));
        }
        let mut seen: Vec<usize> = m.train_cameras.iter().chain(&m.test_cameras).copied().collect();
        seen.sort_unstable();
        if seen != (0..m.num_cameras).collect::<Vec<_>>() {
            return Err(layout("train and test cameras must partition the camera indices".into()));
        }
        let template = BodyTemplate::load(&root.join("template"))?;
        let poses = PoseSequence::load(root, m.first_frame, m.frames)?;
        if poses.num_joints() != template.num_joints() {
            return Err(layout(format!(
                "poses have {} joints, template has {}",
                poses.num_joints(),
                template.num_joints()
            )));
        }
        let cameras: Vec<Camera> =
            (0..m.num_cameras).map(|c| read_json(&camera_path(root, c))).collect::<Result<_, _>>()?;
        for (c, cam) in cameras.iter().enumerate() {
            if (cam.width, cam.height) != (m.width, m.height) {
                return Err(layout(format!("camera {c} is {}x{}, manifest says {}x{}", cam.width, cam.height, m.width, m.height)));
            }
        }
        for t in m.first_frame..m.first_frame + m.frames {
            for c in 0..m.num_cameras {
                let mut need = vec![image_path(root, c, t, "png"), mask_path(root, c, t)];
                if m.has_pfm {
                    need.push(image_path(root, c, t, "pfm"));
                }
                if let Some(p) = need.iter().find(|p| !p.is_file()) {
                    return Err(layout(format!("missing {}", p.display())));
                }
            }
            if m.has_gt_gaussians && !gt_path(root, t).is_file() {
                return Err(layout(format!("missing {}", gt_path(root, t).display())));
            }
        }
        Ok(Dataset { root: root.to_path_buf(), manifest, template, poses, cameras })
    }

    pub fn frames(&self) -> std::ops::Range<usize> {
        let m = &self.manifest;
        m.first_frame..m.first_frame + m.frames
    }

    pub fn cameras_in(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.manifest.train_cameras,
            Split::Test => &self.manifest.test_cameras,
        }
    }

    pub fn pixels(&self) -> usize {
        self.manifest.width as usize * self.manifest.height as usize
    }

    /// Ground-truth image, from the float file when one was written.
    pub fn image(&self, camera: usize, frame: usize) -> Result<Vec<Real>, DataError> {
        let (img, w, h) = if self.manifest.has_pfm {
            image_io::read_pfm(&image_path(&self.root, camera, frame, "pfm"))?
        } else {
            image_io::read_png(&image_path(&self.root, camera, frame, "png"))?
        };
        self.check_size(w, h)?;
        Ok(img)
    }

    pub fn mask(&self, camera: usize, frame: usize) -> Result<Vec<Real>, DataError> {
        let (m, w, h) = image_io::read_mask_png(&mask_path(&self.root, camera, frame))?;
        self.check_size(w, h)?;
        Ok(m)
    }

    pub fn ground_truth(&self, frame: usize) -> Result<ObservedGaussians, DataError> {
        if !self.manifest.has_gt_gaussians {
            return Err(DataError::Layout { root: self.root.clone(), msg: "no ground-truth Gaussians".into() });
        }
        let p = gt_path(&self.root, frame);
        let values = blob::read_f32_blob(&p, self.manifest.num_gaussians * GT_RECORD).map_err(io_err(&p))?;
        Ok(decode_ground_truth(&values))
    }

    fn check_size(&self, w: usize, h: usize) -> Result<(), DataError> {
        if (w, h) != (self.manifest.width as usize, self.manifest.height as usize) {
            return Err(DataError::Layout {
                root: self.root.clone(),
                msg: format!("image is {w}x{h}, manifest says {}x{}", self.manifest.width, self.manifest.height),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::rasterize;

    fn small_spec() -> SceneSpec {
        let mut s = SceneSpec::pendulum();
        s.frames = 3;
        s.cameras.count = 2;
        s.cameras.holdout_every = 2;
        s.cameras.focal = 40.0;
        s.width = 24;
        s.height = 24;
        s.history = None;
        s
    }

    #[test]
    fn zero_amplitudes_are_static_and_settle() {
        let mut spec = SceneSpec::pendulum();
        spec.animation = AnimationSpec::default();
        let tpl = spec.template().unwrap();
        let anim = animate(&spec, &tpl).unwrap();
        let first = anim.poses.get(0).unwrap().clone();
        for t in anim.poses.frames() {
            assert_eq!(anim.poses.get(t).unwrap(), &first);
            assert!(anim.deflections[t].iter().all(|d| d.norm() == 0.0));
        }
    }

    #[test]
    fn displaced_pendulum_decays_to_rest() {
        let p = PendulumSpec::default();
        let (k, c) = (p.stiffness(), p.damping);
        let (mut d, mut u) = (Vec3::new(0.3, -0.1, 0.2), Vec3::zeros());
        for _ in 0..400 {
            let (d0, u0) = (d, u);
            d = d0 + u0;
            u = u0 - d0 * k - u0 * c;
        }
        assert!(d.norm() < 1e-4 && p.spectral_radius() < 1.0);
    }

    #[test]
    fn constant_root_velocity_reaches_closed_form_deflection() {
        let mut spec = SceneSpec::pendulum();
        spec.animation = AnimationSpec::default();
        let v = Vec3::new(0.02, 0.0, -0.01);
        spec.animation.root.velocity = v.into();
        spec.frames = 400;
        let tpl = spec.template().unwrap();
        let anim = animate(&spec, &tpl).unwrap();
        let want = spec.pendulum.steady_deflection(&v);
        for d in &anim.deflections[399] {
            assert!((d - want).norm() <= 0.02 * want.norm(), "{d:?} vs {want:?}");
        }
    }

    #[test]
    fn unstable_pendulum_is_rejected_with_guidance() {
        let mut spec = SceneSpec::pendulum();
        spec.pendulum.damping = 0.1;
        spec.pendulum.gravity = 0.5;
        let tpl = spec.template().unwrap();
        match animate(&spec, &tpl) {
            Err(DataError::Unstable { radius, hint }) => {
                assert!(radius >= 1.0);
                assert!(hint.contains("damping"));
            }
            other => panic!("expected instability, got {other:?}"),
        }
    }

    #[test]
    fn animation_is_deterministic() {
        let spec = SceneSpec::pendulum();
        let tpl = spec.template().unwrap();
        let a = animate(&spec, &tpl).unwrap();
        let b = animate(&spec, &tpl).unwrap();
        for (p, q) in a.poses.poses().iter().zip(b.poses.poses()) {
            for (x, y) in p.flat_rotations().iter().zip(q.flat_rotations()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(a.deflections, b.deflections);
    }

    #[test]
    fn deflection_depends_on_history_not_only_pose() {
        // Same pose at frame 30, reached with opposite velocities: phases
        // phi and pi - phi - 2 w t give equal sines and opposite cosines.
        let t = 30.0;
        let w = TAU / 40.0;
        let phi = 0.3;
        let mut a = SceneSpec::pendulum();
        a.animation.root.wave.phase = phi;
        for j in &mut a.animation.joints {
            j.phase = phi;
        }
        let mut b = a.clone();
        let other = std::f64::consts::PI - phi - 2.0 * w * t;
        b.animation.root.wave.phase = other;
        for j in &mut b.animation.joints {
            j.phase = other;
        }
        let tpl = a.template().unwrap();
        let (ra, rb) = (animate(&a, &tpl).unwrap(), animate(&b, &tpl).unwrap());
        let (pa, pb) = (ra.poses.get(30).unwrap(), rb.poses.get(30).unwrap());
        assert!((pa.root_translation - pb.root_translation).norm() < 1e-12);
        for (x, y) in pa.joint_rotations.iter().zip(&pb.joint_rotations) {
            assert!((x - y).norm() < 1e-12);
        }
        let diff = ra.deflections[30][0] - rb.deflections[30][0];
        assert!(diff.norm() > 1e-10 * 10.0 && diff.norm() > 1e-3, "{diff:?}");
    }

    #[test]
    fn camera_ring_geometry() {
        let target = Vec3::new(0.1, 0.4, -0.2);
        let one = make_cameras(1, 3.0, 0.6, &target, 100.0, 64, 48).unwrap();
        let c = one[0].center();
        assert!((c - Vec3::new(0.1, 0.6, 2.8)).norm() < 1e-12);
        let four = make_cameras(4, 3.0, 0.6, &target, 100.0, 64, 48).unwrap();
        for (i, cam) in four.iter().enumerate() {
            let d = cam.center() - target;
            let az = d.x.atan2(d.z).to_degrees().rem_euclid(360.0);
            assert!((az - 90.0 * i as Real).abs() < 1e-9, "camera {i} at {az}");
        }
        for cam in make_cameras(7, 2.5, 1.0, &target, 80.0, 64, 48).unwrap() {
            let p = cam.project_point(&target);
            assert!(p.in_front);
            assert!((p.uv - crate::geometry::Vec2::new(cam.cx, cam.cy)).norm() < 0.5);
        }
    }

    #[test]
    fn generate_writes_consistent_layout_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let ds = generate(&spec, dir.path()).unwrap();
        let count = |sub: &str, ext: &str| {
            walk(&dir.path().join(sub)).iter().filter(|p| p.extension().is_some_and(|e| e == ext)).count()
        };
        assert_eq!(count("images", "png"), 6);
        assert_eq!(count("masks", "png"), 6);
        assert_eq!(ds.manifest.frames * ds.manifest.num_cameras, 6);
        assert_eq!(ds.manifest.test_cameras, vec![0]);
        assert_eq!(ds.manifest.train_cameras, vec![1]);

        let tpl = spec.template().unwrap();
        let anim = animate(&spec, &tpl).unwrap();
        for t in 0..3 {
            let p = ds.poses.get(t).unwrap();
            let q = anim.poses.get(t).unwrap();
            assert_eq!(p, q);
        }
        let cams = make_cameras(2, 3.0, 0.6, &Vec3::from(spec.cameras.look_at), 40.0, 24, 24).unwrap();
        assert_eq!(ds.cameras, cams);

        // Masks are exactly the thresholded oracle alpha.
        let gt = ds.ground_truth(1).unwrap();
        let oracle = render_oracle(&gt.scene(), &ds.cameras[1]);
        let mask = ds.mask(1, 1).unwrap();
        assert_eq!(mask, mask_from_alpha(&oracle.alpha));
        assert!(mask.iter().any(|&m| m == 1.0));
        let img = ds.image(1, 1).unwrap();
        for (a, b) in img.iter().zip(&oracle.image) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn regeneration_is_bitwise_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let mut spec = small_spec();
        spec.frames = 2;
        generate(&spec, a.path()).unwrap();
        generate(&spec, b.path()).unwrap();
        let fa = walk(a.path());
        let fb = walk(b.path());
        assert_eq!(fa.len(), fb.len());
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(x.strip_prefix(a.path()).unwrap(), y.strip_prefix(b.path()).unwrap());
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
        }
    }

    #[test]
    fn body_out_of_view_gives_empty_mask() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = small_spec();
        spec.frames = 2;
        spec.animation.root.origin = [0.0, 50.0, 0.0];
        let ds = generate(&spec, dir.path()).unwrap();
        for c in 0..2 {
            assert!(ds.mask(c, 1).unwrap().iter().all(|&m| m == 0.0));
        }
    }

    #[test]
    fn too_few_frames_for_the_history_are_rejected() {
        let mut spec = SceneSpec::recovery();
        spec.frames = 49;
        assert!(matches!(spec.validate(), Err(DataError::Spec(_))));
        spec.frames = 50;
        spec.validate().unwrap();
        spec.cameras.count = 1;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn presets_have_the_intended_scale() {
        let spec = SceneSpec::recovery();
        spec.validate().unwrap();
        let tpl = spec.template().unwrap();
        assert_eq!(tpl.num_joints(), 4);
        assert_eq!(tpl.num_vertices(), 800);
        let (train, test) = split_cameras(spec.cameras.count, spec.cameras.holdout_every);
        assert_eq!((train.len(), test.len()), (8, 2));
        SceneSpec::pendulum().validate().unwrap();
    }

    #[test]
    fn ground_truth_is_representable_at_rest() {
        // Gaussians on the template with identity pose project where the
        // fast rasterizer and the oracle agree closely.
        let spec = SceneSpec::recovery();
        let tpl = spec.template().unwrap();
        let gt = ground_truth_gaussians(&tpl, &spec.ground_truth, spec.seed);
        let mut s = spec.clone();
        s.animation = AnimationSpec::default();
        s.frames = 1;
        let anim = animate(&s, &tpl).unwrap();
        let obs = observe_ground_truth(&gt, &tpl, &anim, 0).unwrap();
        for (a, b) in obs.positions.iter().zip(&tpl.vertices) {
            assert!((a - b).norm() < 1e-12);
        }
        let cam = &make_cameras(1, 3.0, 0.6, &Vec3::new(0.0, 0.4, 0.0), 110.0, 64, 64).unwrap()[0];
        let fast = rasterize(&obs.scene(), cam);
        let slow = render_oracle(&obs.scene(), cam);
        let mse: Real = fast.image.iter().zip(&slow.image).map(|(a, b)| (a - b) * (a - b)).sum::<Real>()
            / fast.image.len() as Real;
        assert!(10.0 * (1.0 / mse).log10() > 45.0);
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push(p);
                }
            }
        }
        out.sort();
        out
    }
}
