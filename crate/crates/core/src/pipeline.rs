//! The differentiable per-view pipeline:
//!
//! ```text
//! conditions -> embeddings -> non-rigid offsets -> pose refinement -> FK
//!            -> skinning-weight correction -> rigid warp -> rasterize
//! ```
//!
//! [`forward`] records everything [`backward`] needs; the backward pass
//! returns gradients for the Gaussians, every task network, the pose and the
//! conditioning tensors.

use serde::{Deserialize, Serialize};

use crate::body::{forward_kinematics, forward_kinematics_backward, BodyError, BodyTemplate, Pose};
use crate::gaussians::GaussianSet;
use crate::geometry::{Camera, Quat, Vec3};
use crate::motion::{skeleton_motion_sequence, KnnCache, MotionError, MotionTable, PointMotionSeq, PoseSequence, SkeletonMotionSeq, StrideSet};
use crate::nets::{
    apply_deformation, apply_deformation_backward, encode_point_motion, encode_point_motion_backward,
    encode_skeleton_motion, lbs_weight_offsets, lbs_weight_offsets_backward, nonrigid_inputs, pose_refine,
    pose_refine_backward, ConditionEmbeddings, DeformedGaussians, LbsWeightsTape, NetError, PointEncoderTape,
    Tape, TaskNets,
};
use crate::raster::{
    covariance_backward, rasterize, rasterize_backward, rigid_warp, rigid_warp_backward, ObservedGaussians,
    RasterError, RenderOutput, SplatScene, WarpTape,
};
use crate::Real;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Body(#[from] BodyError),
    #[error(transparent)]
    Motion(#[from] MotionError),
}

/// Which motion conditions feed the non-rigid head. Disabled conditions are
/// replaced by zero embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditionFlags {
    pub use_delta_p: bool,
    pub use_velocity: bool,
    pub use_multiscale: bool,
}

impl Default for ConditionFlags {
    fn default() -> Self {
        ConditionFlags { use_delta_p: true, use_velocity: true, use_multiscale: true }
    }
}

/// Trainable state: canonical Gaussians and the task networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub gaussians: GaussianSet,
    pub nets: TaskNets,
}

/// Per-frame inputs of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameInputs {
    pub frame: usize,
    pub pose: Pose,
    /// Present when skeleton conditioning is enabled.
    pub skeleton: Option<SkeletonMotionSeq>,
    /// Present when velocity conditioning is enabled.
    pub point: Option<PointMotionSeq>,
    /// Template skinning weights of each Gaussian's nearest vertex, `n x K`.
    pub base_weights: Vec<Real>,
}

/// Template weights of each Gaussian's nearest template vertex.
pub fn base_weights(tpl: &BodyTemplate, cache: &KnnCache) -> Vec<Real> {
    let mut out = Vec::with_capacity(cache.len() * tpl.num_joints());
    for i in 0..cache.len() {
        out.extend_from_slice(tpl.weights(cache.nearest(i)));
    }
    out
}

/// `normalize(max(w, 0) + 1e-8)` row-wise: the projection applied to every
/// blended weight row, including uncorrected template weights.
pub fn sanitize_weights(weights: &[Real], k: usize) -> Vec<Real> {
    let mut out = vec![0.0; weights.len()];
    for (src, dst) in weights.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let mut sum = 0.0;
        for (d, s) in dst.iter_mut().zip(src) {
            *d = s.max(0.0) + 1e-8;
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

/// Assembles [`FrameInputs`] for frame `t`.
#[allow(clippy::too_many_arguments)]
pub fn frame_inputs(
    tpl: &BodyTemplate,
    poses: &PoseSequence,
    table: &MotionTable,
    cache: &KnnCache,
    revision: u64,
    t: usize,
    strides: &StrideSet,
    length: usize,
    flags: ConditionFlags,
) -> Result<FrameInputs, PipelineError> {
    cache.check(revision)?;
    let skeleton = if flags.use_delta_p { Some(skeleton_motion_sequence(poses, t, strides, length)?) } else { None };
    let point = if flags.use_velocity { Some(table.point_motion(cache, revision, t, strides, length)?) } else { None };
    Ok(FrameInputs { frame: t, pose: poses.get(t)?.clone(), skeleton, point, base_weights: base_weights(tpl, cache) })
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    skeleton_tape: Option<Tape>,
    point_tape: Option<PointEncoderTape>,
    nonrigid_tape: Tape,
    deltas: Vec<Real>,
    pub deformed: DeformedGaussians,
    pub refined_pose: Pose,
    pose_tape: Tape,
    pub bones: Vec<crate::geometry::BoneTransform>,
    pub weights: Vec<Real>,
    lbs_tape: LbsWeightsTape,
    warp_tape: WarpTape,
    pub observed: ObservedGaussians,
    pub scene: SplatScene,
}

/// Runs conditioning and deformation up to the observation-space Gaussians.
pub fn deform(
    model: &Model,
    tpl: &BodyTemplate,
    inputs: &FrameInputs,
) -> Result<ForwardTape, PipelineError> {
    let set = &model.gaussians;
    let nets = &model.nets;
    let n = set.len();
    let mut emb = ConditionEmbeddings::zeros(n, &nets.dims);
    let skeleton_tape = match &inputs.skeleton {
        Some(seq) => {
            let (f, tape) = encode_skeleton_motion(&nets.skeleton, seq)?;
            emb.skeleton = f;
            Some(tape)
        }
        None => None,
    };
    let point_tape = match &inputs.point {
        Some(pm) => {
            let (f, tape) = encode_point_motion(&nets.knn, &nets.point, pm)?;
            emb.point = f;
            Some(tape)
        }
        None => None,
    };
    let rows = nonrigid_inputs(&set.positions, &inputs.pose, &emb);
    let (deltas, nonrigid_tape) = nets.nonrigid.forward_batch(&rows, n)?;
    let deformed = apply_deformation(set, &deltas)?;
    let (refined_pose, pose_tape) = pose_refine(&nets.pose, &inputs.pose)?;
    let bones = forward_kinematics(tpl, &refined_pose)?;
    let (weights, lbs_tape) = lbs_weight_offsets(&nets.lbs, &set.positions, &inputs.base_weights)?;
    let (observed, warp_tape) = rigid_warp(&deformed, &bones, &weights)?;
    let scene = observed.scene();
    Ok(ForwardTape {
        skeleton_tape,
        point_tape,
        nonrigid_tape,
        deltas,
        deformed,
        refined_pose,
        pose_tape,
        bones,
        weights,
        lbs_tape,
        warp_tape,
        observed,
        scene,
    })
}

pub fn forward(
    model: &Model,
    tpl: &BodyTemplate,
    inputs: &FrameInputs,
    cam: &Camera,
) -> Result<(RenderOutput, ForwardTape), PipelineError> {
    let tape = deform(model, tpl, inputs)?;
    let out = rasterize(&tape.scene, cam);
    Ok((out, tape))
}

/// Render of the canonical Gaussians skinned by template weights alone, with
/// no learned component.
pub fn render_lbs(
    set: &GaussianSet,
    tpl: &BodyTemplate,
    base_weights: &[Real],
    pose: &Pose,
    cam: &Camera,
) -> Result<RenderOutput, PipelineError> {
    let bones = forward_kinematics(tpl, pose)?;
    let weights = sanitize_weights(base_weights, tpl.num_joints());
    let canonical = DeformedGaussians {
        positions: set.positions.clone(),
        log_scales: set.log_scales.clone(),
        rotations: set.rotations.iter().map(|q| q.normalized()).collect(),
        colors: set.colors.clone(),
        opacities: (0..set.len()).map(|i| set.opacity(i)).collect(),
    };
    let (obs, _) = rigid_warp(&canonical, &bones, &weights)?;
    Ok(rasterize(&obs.scene(), cam))
}

/// Gradients of a scalar loss with respect to every pipeline input.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub positions: Vec<Vec3>,
    pub log_scales: Vec<Vec3>,
    pub rotations: Vec<Quat>,
    pub colors: Vec<Vec3>,
    pub opacity_logits: Vec<Real>,
    /// One flat buffer per network, in [`TaskNets::nets`] order.
    pub nets: Vec<Vec<Real>>,
    pub pose_rotations: Vec<Vec3>,
    pub root_translation: Vec3,
    /// Empty when skeleton conditioning is disabled.
    pub skeleton_motion: Vec<Real>,
    /// Empty when velocity conditioning is disabled.
    pub point_motion: Vec<Real>,
    pub screen_grad_norm: Vec<Real>,
    pub visible: Vec<bool>,
}

pub fn backward(
    model: &Model,
    tpl: &BodyTemplate,
    cam: &Camera,
    tape: &ForwardTape,
    grad_image: &[Real],
    grad_alpha: &[Real],
) -> Result<ModelGrads, PipelineError> {
    let set = &model.gaussians;
    let nets = &model.nets;
    let n = set.len();
    let k = tpl.num_joints();
    let mut net_grads: Vec<Vec<Real>> = nets.nets().iter().map(|m| vec![0.0; m.num_params()]).collect();

    let sg = rasterize_backward(&tape.scene, cam, grad_image, grad_alpha);
    let opacity_logits: Vec<Real> = (0..n)
        .map(|i| {
            let a = tape.observed.opacities[i];
            sg.opacities[i] * a * (1.0 - a)
        })
        .collect();
    let mut d_rot_obs = Vec::with_capacity(n);
    let mut d_log_scales = Vec::with_capacity(n);
    for i in 0..n {
        let (dr, dl) = covariance_backward(&tape.observed.rotations[i], &tape.observed.log_scales[i], &sg.covariances[i]);
        d_rot_obs.push(dr);
        d_log_scales.push(dl);
    }
    let wg = rigid_warp_backward(&tape.deformed, &tape.bones, &tape.weights, &tape.warp_tape, &sg.means, &d_rot_obs);

    let d_x_lbs = lbs_weight_offsets_backward(&nets.lbs, &tape.lbs_tape, &wg.weights, &mut net_grads[4]);

    let (d_theta_refined, root_translation) = forward_kinematics_backward(tpl, &tape.refined_pose, &wg.bones)?;
    let mut pose_rotations = pose_refine_backward(&nets.pose, &tape.pose_tape, &d_theta_refined, &mut net_grads[5]);

    let dg = apply_deformation_backward(set, &tape.deltas, &wg.positions, &d_log_scales, &wg.rotations);
    let d_rows = nets.nonrigid.backward(&tape.nonrigid_tape, &dg.deltas, &mut net_grads[3]);
    let width = nets.nonrigid.input_width();
    let skel_w = nets.dims.skeleton_embed;
    let point_w = nets.dims.point_embed;
    let mut positions = dg.positions.clone();
    let mut d_skel = vec![0.0; skel_w];
    let mut d_point = vec![0.0; n * point_w];
    for i in 0..n {
        let row = &d_rows[i * width..(i + 1) * width];
        positions[i] += Vec3::new(row[0], row[1], row[2]) + d_x_lbs[i];
        for j in 0..k {
            pose_rotations[j] += Vec3::new(row[3 + 3 * j], row[4 + 3 * j], row[5 + 3 * j]);
        }
        let o = 3 + 3 * k;
        for (a, b) in d_skel.iter_mut().zip(&row[o..o + skel_w]) {
            *a += b;
        }
        d_point[i * point_w..(i + 1) * point_w].copy_from_slice(&row[o + skel_w..o + skel_w + point_w]);
    }
    let skeleton_motion = match &tape.skeleton_tape {
        Some(t) => nets.skeleton.backward(t, &d_skel, &mut net_grads[0]),
        None => Vec::new(),
    };
    let point_motion = match &tape.point_tape {
        Some(t) => {
            let (a, b) = net_grads.split_at_mut(2);
            encode_point_motion_backward(&nets.knn, &nets.point, t, &d_point, &mut a[1], &mut b[0])
        }
        None => Vec::new(),
    };
    Ok(ModelGrads {
        positions,
        log_scales: dg.log_scales,
        rotations: dg.rotations,
        colors: sg.colors,
        opacity_logits,
        nets: net_grads,
        pose_rotations,
        root_translation,
        skeleton_motion,
        point_motion,
        screen_grad_norm: sg.screen_grad_norm,
        visible: sg.visible,
    })
}
