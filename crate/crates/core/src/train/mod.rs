//! Losses, metrics, Adam, checkpoints, the training loop and evaluation.
//!
//! One iteration samples a frame and a training camera, builds the motion
//! conditions, runs the differentiable pipeline, takes one Adam step per
//! parameter group and periodically densifies the Gaussian set.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod loss;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blob;
use crate::datagen::{DataError, Dataset, Split};
use crate::gaussians::{densify_and_prune, init_from_template, scene_extent};
use crate::geometry::{Quat, Vec3};
use crate::motion::{KnnCache, MotionError, MotionTable, StrideSet};
use crate::nets::{ConditionShape, TaskNets};
use crate::pipeline::{backward, forward, frame_inputs, FrameInputs, Model, PipelineError};
use crate::raster::RenderOutput;
use crate::Real;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{Checkpoint, CheckpointError};
pub use config::{ConfigError, LearningRates, TrainConfig};
pub use eval::{evaluate, EvalReport, EvalRow};
pub use loss::{loss_l1, loss_mask, loss_ssim, psnr, ssim_metric, total_loss, LossError, LossTerms, LossWeights};

pub const METRICS_HEADER: &str = "iter,loss,l1,ssim_loss,mask,psnr_train";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Optimizer(#[from] adam::ShapeMismatch),
    #[error("{path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
    #[error("checkpoint does not fit the dataset: {0}")]
    Mismatch(String),
    #[error("dataset has no training cameras")]
    NoTrainingViews,
}

/// Fresh model for `data`: one Gaussian per template vertex and task
/// networks whose deformation starts as the identity.
pub fn init_model(cfg: &TrainConfig, data: &Dataset) -> Result<Model, TrainError> {
    let strides = cfg.strides()?;
    let shape = ConditionShape {
        num_joints: data.template.num_joints(),
        num_scales: strides.len(),
        length: cfg.length,
        tau: cfg.tau,
    };
    Ok(Model { gaussians: init_from_template(&data.template), nets: TaskNets::new(shape, cfg.net_dims.clone(), cfg.seed) })
}

/// Optimizer steps between neighbour recomputations, in addition to the
/// recomputation after every densification.
pub const KNN_REFRESH_INTERVAL: usize = 500;

/// Builds per-frame conditions for a model, keeping the neighbour cache in
/// step with the Gaussian set.
pub struct Conditioner {
    strides: StrideSet,
    table: MotionTable,
    cache: KnnCache,
}

impl Conditioner {
    pub fn new(cfg: &TrainConfig, data: &Dataset, model: &Model) -> Result<Self, TrainError> {
        let strides = cfg.strides()?;
        if model.nets.shape.num_scales != strides.len() || model.nets.shape.num_joints != data.template.num_joints() {
            return Err(TrainError::Mismatch(format!(
                "networks expect {} scales and {} joints, config and dataset give {} and {}",
                model.nets.shape.num_scales,
                model.nets.shape.num_joints,
                strides.len(),
                data.template.num_joints()
            )));
        }
        let table = MotionTable::new(&data.template, &data.poses)?;
        let g = &model.gaussians;
        let cache = KnnCache::build(&data.template, &g.positions, cfg.tau, g.revision)?;
        Ok(Conditioner { strides, table, cache })
    }

    /// Recomputes neighbours if the Gaussian set changed revision.
    pub fn refresh(&mut self, cfg: &TrainConfig, data: &Dataset, model: &Model) -> Result<(), TrainError> {
        let g = &model.gaussians;
        if self.cache.revision != g.revision || self.cache.len() != g.len() {
            self.cache = KnnCache::build(&data.template, &g.positions, cfg.tau, g.revision)?;
        }
        Ok(())
    }

    /// Recomputes neighbours from the current canonical positions.
    pub fn rebuild(&mut self, cfg: &TrainConfig, data: &Dataset, model: &Model) -> Result<(), TrainError> {
        let g = &model.gaussians;
        self.cache = KnnCache::build(&data.template, &g.positions, cfg.tau, g.revision)?;
        Ok(())
    }

    pub fn inputs(&self, cfg: &TrainConfig, data: &Dataset, model: &Model, t: usize) -> Result<FrameInputs, TrainError> {
        Ok(frame_inputs(
            &data.template,
            &data.poses,
            &self.table,
            &self.cache,
            model.gaussians.revision,
            t,
            &self.strides,
            cfg.length,
            cfg.conditions,
        )?)
    }

    /// Renders frame `t` from `camera` (any camera, not only dataset views).
    pub fn render(
        &self,
        cfg: &TrainConfig,
        data: &Dataset,
        model: &Model,
        t: usize,
        camera: &crate::geometry::Camera,
    ) -> Result<RenderOutput, TrainError> {
        let inputs = self.inputs(cfg, data, model, t)?;
        Ok(forward(model, &data.template, &inputs, camera)?.0)
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub loss: Real,
    pub l1: Real,
    pub ssim_loss: Real,
    pub mask: Real,
    pub psnr_train: Real,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(s, "{},{},{},{},{},{}", r.iter, r.loss, r.l1, r.ssim_loss, r.mask, r.psnr_train).expect("string write");
    }
    s
}

/// Adam state of every parameter group.
struct Optimizer {
    positions: AdamState,
    log_scales: AdamState,
    rotations: AdamState,
    colors: AdamState,
    opacities: AdamState,
    nets: Vec<AdamState>,
}

impl Optimizer {
    fn new(model: &Model) -> Self {
        let n = model.gaussians.len();
        Optimizer {
            positions: AdamState::new(3 * n),
            log_scales: AdamState::new(3 * n),
            rotations: AdamState::new(4 * n),
            colors: AdamState::new(3 * n),
            opacities: AdamState::new(n),
            nets: model.nets.nets().iter().map(|m| AdamState::new(m.num_params())).collect(),
        }
    }

    /// Children of a densified Gaussian inherit its moments.
    fn remap(&mut self, origin: &[usize]) {
        self.positions = self.positions.remap(origin, 3);
        self.log_scales = self.log_scales.remap(origin, 3);
        self.rotations = self.rotations.remap(origin, 4);
        self.colors = self.colors.remap(origin, 3);
        self.opacities = self.opacities.remap(origin, 1);
    }
}

fn flat3(v: &[Vec3]) -> Vec<Real> {
    v.iter().flat_map(|x| [x.x, x.y, x.z]).collect()
}

fn step_vec3(params: &mut [Vec3], grads: &[Vec3], state: &mut AdamState, lr: Real) -> Result<(), TrainError> {
    let mut flat = flat3(params);
    adam_step(&mut flat, &flat3(grads), state, lr)?;
    for (p, c) in params.iter_mut().zip(flat.chunks_exact(3)) {
        *p = Vec3::new(c[0], c[1], c[2]);
    }
    Ok(())
}

fn step_quat(params: &mut [Quat], grads: &[Quat], state: &mut AdamState, lr: Real) -> Result<(), TrainError> {
    let mut flat: Vec<Real> = params.iter().flat_map(|q| q.to_array()).collect();
    let g: Vec<Real> = grads.iter().flat_map(|q| q.to_array()).collect();
    adam_step(&mut flat, &g, state, lr)?;
    for (p, c) in params.iter_mut().zip(flat.chunks_exact(4)) {
        *p = Quat::new(c[0], c[1], c[2], c[3]);
    }
    Ok(())
}

/// Ground-truth images and masks, loaded on first use.
struct ImageCache<'a> {
    data: &'a Dataset,
    entries: HashMap<(usize, usize), (Vec<Real>, Vec<Real>)>,
}

impl<'a> ImageCache<'a> {
    fn get(&mut self, camera: usize, frame: usize) -> Result<&(Vec<Real>, Vec<Real>), TrainError> {
        if !self.entries.contains_key(&(camera, frame)) {
            let img = self.data.image(camera, frame)?;
            let mask = self.data.mask(camera, frame)?;
            self.entries.insert((camera, frame), (img, mask));
        }
        Ok(&self.entries[&(camera, frame)])
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), TrainError> {
    blob::write_atomic(path, bytes).map_err(|source| TrainError::Io { path: path.into(), source })
}

/// Trains a model on `data`. With `out` set, writes `metrics.csv`,
/// periodic `checkpoint_%06d/` directories and the final `checkpoint/`.
pub fn train(cfg: &TrainConfig, data: &Dataset, out: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let train_cams = data.cameras_in(Split::Train).to_vec();
    if train_cams.is_empty() {
        return Err(TrainError::NoTrainingViews);
    }
    let frames: Vec<usize> = data.frames().collect();
    let (width, height) = (data.manifest.width as usize, data.manifest.height as usize);
    let mut model = init_model(cfg, data)?;
    let mut cond = Conditioner::new(cfg, data, &model)?;
    let mut opt = Optimizer::new(&model);
    let mut images = ImageCache { data, entries: HashMap::new() };
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut densify_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6465_6e73_6966_79);
    let extent = scene_extent(&data.template.vertices);
    let densify_until = (cfg.densify.until_fraction * cfg.iterations as Real) as usize;
    let mut grad_sum = vec![0.0; model.gaussians.len()];
    let mut grad_count = vec![0u32; model.gaussians.len()];
    let mut metrics = Vec::with_capacity(cfg.iterations);
    let lr = &cfg.lr;

    for iter in 0..cfg.iterations {
        let t = frames[sample_rng.random_range(0..frames.len())];
        let c = train_cams[sample_rng.random_range(0..train_cams.len())];
        let cam = &data.cameras[c];
        let inputs = cond.inputs(cfg, data, &model, t)?;
        let (render, tape) = forward(&model, &data.template, &inputs, cam)?;
        let (gt, mask) = images.get(c, t)?;
        let terms = total_loss(&render.image, gt, &render.alpha, mask, width, height, &cfg.loss)?;
        metrics.push(MetricsRow {
            iter,
            loss: terms.total,
            l1: terms.l1,
            ssim_loss: terms.ssim_loss,
            mask: terms.mask,
            psnr_train: psnr(&render.image, gt)?,
        });
        let grads = backward(&model, &data.template, cam, &tape, &terms.grad_image, &terms.grad_alpha)?;

        let g = &mut model.gaussians;
        step_vec3(&mut g.positions, &grads.positions, &mut opt.positions, lr.position_lr(iter, cfg.iterations))?;
        step_vec3(&mut g.log_scales, &grads.log_scales, &mut opt.log_scales, lr.log_scales)?;
        step_quat(&mut g.rotations, &grads.rotations, &mut opt.rotations, lr.rotations)?;
        step_vec3(&mut g.colors, &grads.colors, &mut opt.colors, lr.colors)?;
        adam_step(&mut g.opacity_logits, &grads.opacity_logits, &mut opt.opacities, lr.opacities)?;
        g.enforce_invariants();
        for ((net, gp), state) in model.nets.nets_mut().into_iter().zip(&grads.nets).zip(&mut opt.nets) {
            adam_step(&mut net.params, gp, state, lr.nets)?;
        }

        for i in 0..grads.visible.len() {
            if grads.visible[i] {
                grad_sum[i] += grads.screen_grad_norm[i];
                grad_count[i] += 1;
            }
        }
        let step = iter + 1;
        if cfg.densify.enabled && step % cfg.densify.interval == 0 && step < densify_until {
            let mean: Vec<Real> =
                grad_sum.iter().zip(&grad_count).map(|(s, &n)| if n > 0 { s / n as Real } else { 0.0 }).collect();
            let outcome = densify_and_prune(&model.gaussians, &mean, extent, &cfg.densify, &mut densify_rng);
            log::info!(
                "iter {step}: densified {} -> {} Gaussians (cloned {}, split {}, pruned {})",
                model.gaussians.len(),
                outcome.set.len(),
                outcome.cloned,
                outcome.split,
                outcome.pruned
            );
            opt.remap(&outcome.origin);
            model.gaussians = outcome.set;
            cond.refresh(cfg, data, &model)?;
            grad_sum = vec![0.0; model.gaussians.len()];
            grad_count = vec![0; model.gaussians.len()];
        }

        if step % KNN_REFRESH_INTERVAL == 0 {
            cond.rebuild(cfg, data, &model)?;
        }

        if let Some(out) = out {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.iterations {
                let ck = Checkpoint { iteration: step, config: cfg.clone(), model: model.clone() };
                ck.save(&out.join(format!("checkpoint_{step:06}")))?;
            }
        }
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            let report = evaluate(&model, cfg, data, Split::Test)?;
            log::info!("iter {step}: held-out PSNR {:.3} SSIM {:.4}", report.mean_psnr, report.mean_ssim);
        }
        if step % 100 == 0 {
            let last = &metrics[iter];
            log::debug!("iter {step}: loss {:.5} psnr {:.3} n={}", last.loss, last.psnr_train, model.gaussians.len());
        }
    }

    let checkpoint = Checkpoint { iteration: cfg.iterations, config: cfg.clone(), model };
    if let Some(out) = out {
        std::fs::create_dir_all(out).map_err(|source| TrainError::Io { path: out.into(), source })?;
        write_file(&out.join("metrics.csv"), metrics_csv(&metrics).as_bytes())?;
        checkpoint.save(&out.join("checkpoint"))?;
    }
    Ok(TrainOutcome { checkpoint, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::BodyRecipe;
    use crate::datagen::{generate, HistorySpec, SceneSpec};

    fn tiny_dataset(dir: &Path) -> Dataset {
        let mut spec = SceneSpec::recovery();
        spec.recipe = BodyRecipe::torso_proxy(false).with_resolution(3, 6);
        spec.frames = 14;
        spec.cameras.count = 3;
        spec.cameras.holdout_every = 3;
        spec.cameras.focal = 40.0;
        spec.width = 24;
        spec.height = 24;
        spec.history = Some(HistorySpec { s0: 1, ds: 1, m: 1, length: 2 });
        generate(&spec, dir).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        let mut cfg = TrainConfig { iterations: 6, s0: 1, ds: 1, m: 1, length: 2, tau: 3, ..TrainConfig::default() };
        cfg.densify.interval = 3;
        cfg.densify.until_fraction = 1.0;
        cfg.densify.grad_threshold = 0.0;
        cfg.net_dims = crate::nets::NetDims {
            skeleton_hidden: 8,
            skeleton_embed: 4,
            knn_hidden: 6,
            knn_embed: 3,
            point_hidden: 8,
            point_embed: 5,
            nonrigid_hidden: 8,
            lbs_hidden: 6,
            pose_hidden: 6,
        };
        cfg
    }

    #[test]
    fn zero_iterations_checkpoint_is_the_initialisation() {
        let data_dir = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let data = tiny_dataset(data_dir.path());
        let cfg = TrainConfig { iterations: 0, ..tiny_config() };
        let res = train(&cfg, &data, Some(out.path())).unwrap();
        assert!(res.metrics.is_empty());
        let init = init_model(&cfg, &data).unwrap();
        assert_eq!(res.checkpoint.model, init);
        let loaded = Checkpoint::load(&out.path().join("checkpoint")).unwrap();
        let want = Checkpoint { iteration: 0, config: cfg, model: init }.quantized();
        assert_eq!(loaded, want);
        assert_eq!(std::fs::read_to_string(out.path().join("metrics.csv")).unwrap(), format!("{METRICS_HEADER}\n"));
    }

    #[test]
    fn replay_is_deterministic_and_densification_keeps_state_consistent() {
        let data_dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(data_dir.path());
        let cfg = tiny_config();
        let a = train(&cfg, &data, None).unwrap();
        let b = train(&cfg, &data, None).unwrap();
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        assert_eq!(a.metrics.len(), 6);
        assert!(a.checkpoint.model.gaussians.len() > data.template.num_vertices());
        assert!(a.checkpoint.model.gaussians.revision >= 1);
        for r in &a.metrics {
            assert!(r.loss.is_finite() && r.loss >= 0.0);
        }
    }

    #[test]
    fn disabled_encoders_are_never_updated() {
        // With velocity and skeleton conditioning off, the encoders never
        // run and their parameters must not move.
        let data_dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(data_dir.path());
        let mut cfg = tiny_config();
        cfg.densify.enabled = false;
        cfg.conditions.use_delta_p = false;
        cfg.conditions.use_velocity = false;
        cfg.conditions.use_multiscale = false;
        let init = init_model(&cfg, &data).unwrap();
        let res = train(&cfg, &data, None).unwrap();
        let m = &res.checkpoint.model.nets;
        assert_eq!(m.skeleton, init.nets.skeleton);
        assert_eq!(m.knn, init.nets.knn);
        assert_eq!(m.point, init.nets.point);
        assert_ne!(m.nonrigid, init.nets.nonrigid);
    }

    #[test]
    fn loss_decreases_on_a_small_scene() {
        let data_dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(data_dir.path());
        let mut cfg = tiny_config();
        cfg.iterations = 200;
        cfg.densify.enabled = false;
        let res = train(&cfg, &data, None).unwrap();
        let smooth = |lo: usize| res.metrics[lo..lo + 20].iter().map(|r| r.loss).sum::<Real>() / 20.0;
        let first = smooth(0);
        let last = smooth(180);
        assert!(last < 0.7 * first, "{first} -> {last}");
    }
}
