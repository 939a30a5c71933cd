//! Hierarchical motion context: stride schedules, skeleton pose-residual
//! sequences, per-vertex velocity fields and nearest-vertex velocity
//! gathering for every Gaussian.
//!
//! Frames are integer indices; velocities are in canonical length units per
//! frame. Sampled history indices are clamped to the first available frame,
//! so motion before the start of a sequence reads as zero.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::blob;
use crate::body::{pose_mesh, BodyError, BodyTemplate, Pose};
use crate::geometry::{matrix_to_rodrigues, rodrigues_to_matrix, GeometryError, Vec3};
use crate::Real;

#[derive(Debug, thiserror::Error)]
pub enum MotionError {
    #[error("frame {0} is not in the pose store")]
    MissingFrame(usize),
    #[error("pose store is empty")]
    EmptyStore,
    #[error("invalid stride schedule: {0}")]
    Stride(String),
    #[error("requested {tau} neighbours from {n} template vertices")]
    TooManyNeighbours { tau: usize, n: usize },
    #[error("KNN cache built for revision {cache} but Gaussians are at revision {current}")]
    StaleCache { cache: u64, current: u64 },
    #[error("joint count mismatch: {0} vs {1}")]
    JointCount(usize, usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Body(#[from] BodyError),
    #[error("pose io: {0}")]
    Io(#[from] std::io::Error),
    #[error("pose json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Ordered stride schedule `{s0 + i*ds : i = 0..=m}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StrideSet {
    strides: Vec<usize>,
    pub s0: usize,
    pub ds: usize,
    pub m: usize,
}

impl StrideSet {
    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn len(&self) -> usize {
        self.strides.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strides.is_empty()
    }

    pub fn max_stride(&self) -> usize {
        *self.strides.last().expect("stride set is never empty")
    }

    /// Only the base stride.
    pub fn single(s0: usize) -> Result<Self, MotionError> {
        multiscale_strides(s0, 0, 0)
    }
}

pub fn multiscale_strides(s0: usize, ds: usize, m: usize) -> Result<StrideSet, MotionError> {
    if s0 == 0 {
        return Err(MotionError::Stride("base stride must be at least 1".into()));
    }
    let strides = if ds == 0 {
        if m > 0 {
            log::warn!("stride increment 0 with m={m}: schedule collapses to {{{s0}}}");
        }
        vec![s0]
    } else {
        (0..=m).map(|i| s0 + i * ds).collect()
    };
    Ok(StrideSet { strides, s0, ds, m })
}

/// `[t-s, t-2s, ..., t-Ls]`, each clamped to `t_min`.
pub fn sample_sequence(t: usize, s: usize, l: usize, t_min: usize) -> Vec<usize> {
    (1..=l).map(|i| t.saturating_sub(i * s).max(t_min)).collect()
}

/// Per-joint axis-angle of `R_t * R_prev^T`.
pub fn pose_residual(p_t: &Pose, p_prev: &Pose) -> Result<Vec<Vec3>, MotionError> {
    if p_t.num_joints() != p_prev.num_joints() {
        return Err(MotionError::JointCount(p_t.num_joints(), p_prev.num_joints()));
    }
    p_t.joint_rotations
        .iter()
        .zip(&p_prev.joint_rotations)
        .map(|(a, b)| {
            if a == b {
                return Ok(Vec3::zeros());
            }
            let delta = rodrigues_to_matrix(a) * rodrigues_to_matrix(b).transpose();
            Ok(matrix_to_rodrigues(&delta)?)
        })
        .collect()
}

/// Contiguous frame-indexed pose store.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    first_frame: usize,
    poses: Vec<Pose>,
}

impl PoseSequence {
    pub fn new(first_frame: usize, poses: Vec<Pose>) -> Result<Self, MotionError> {
        if poses.is_empty() {
            return Err(MotionError::EmptyStore);
        }
        let k = poses[0].num_joints();
        if let Some(p) = poses.iter().find(|p| p.num_joints() != k) {
            return Err(MotionError::JointCount(k, p.num_joints()));
        }
        Ok(PoseSequence { first_frame, poses })
    }

    pub fn first_frame(&self) -> usize {
        self.first_frame
    }

    pub fn last_frame(&self) -> usize {
        self.first_frame + self.poses.len() - 1
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn num_joints(&self) -> usize {
        self.poses[0].num_joints()
    }

    pub fn frames(&self) -> std::ops::RangeInclusive<usize> {
        self.first_frame..=self.last_frame()
    }

    pub fn get(&self, t: usize) -> Result<&Pose, MotionError> {
        t.checked_sub(self.first_frame)
            .and_then(|i| self.poses.get(i))
            .ok_or(MotionError::MissingFrame(t))
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    /// Writes `poses/%06d.json` under `root`.
    pub fn save(&self, root: &Path) -> Result<(), MotionError> {
        let dir = root.join("poses");
        fs::create_dir_all(&dir)?;
        for (i, p) in self.poses.iter().enumerate() {
            let path = dir.join(format!("{:06}.json", self.first_frame + i));
            blob::write_atomic(&path, serde_json::to_string(p)?.as_bytes())?;
        }
        Ok(())
    }

    /// Loads frames `first..first+count` from `root/poses`.
    pub fn load(root: &Path, first: usize, count: usize) -> Result<Self, MotionError> {
        let dir = root.join("poses");
        let poses = (first..first + count)
            .map(|t| {
                let path = dir.join(format!("{t:06}.json"));
                let bytes = fs::read(&path).map_err(|_| MotionError::MissingFrame(t))?;
                Ok(serde_json::from_slice(&bytes)?)
            })
            .collect::<Result<Vec<Pose>, MotionError>>()?;
        PoseSequence::new(first, poses)
    }
}

/// Skeleton residuals for every stride and history step: `|S| x L x K x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonMotionSeq {
    pub frame: usize,
    pub num_scales: usize,
    pub length: usize,
    pub num_joints: usize,
    pub data: Vec<Real>,
}

impl SkeletonMotionSeq {
    pub fn shape(&self) -> [usize; 4] {
        [self.num_scales, self.length, self.num_joints, 3]
    }
}

pub fn skeleton_motion_sequence(
    poses: &PoseSequence,
    t: usize,
    strides: &StrideSet,
    l: usize,
) -> Result<SkeletonMotionSeq, MotionError> {
    let t_min = poses.first_frame();
    poses.get(t)?;
    let k = poses.num_joints();
    let mut data = Vec::with_capacity(strides.len() * l * k * 3);
    for &s in strides.strides() {
        for tp in sample_sequence(t, s, l, t_min) {
            let prev = tp.saturating_sub(s).max(t_min);
            let residual = pose_residual(poses.get(tp)?, poses.get(prev)?)?;
            data.extend(residual.iter().flat_map(|v| [v.x, v.y, v.z]));
        }
    }
    Ok(SkeletonMotionSeq { frame: t, num_scales: strides.len(), length: l, num_joints: k, data })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    pub frame: usize,
    pub stride: usize,
    pub velocities: Vec<Vec3>,
}

/// `(mesh(t) - mesh(max(t - s, t_min))) / s`, zero when the clamp collapses
/// both frames.
pub fn vertex_velocity_field(
    tpl: &BodyTemplate,
    poses: &PoseSequence,
    t: usize,
    s: usize,
) -> Result<VelocityField, MotionError> {
    let prev = t.saturating_sub(s).max(poses.first_frame());
    if prev == t {
        poses.get(t)?;
        return Ok(VelocityField { frame: t, stride: s, velocities: vec![Vec3::zeros(); tpl.num_vertices()] });
    }
    let now = pose_mesh(tpl, poses.get(t)?)?;
    let before = pose_mesh(tpl, poses.get(prev)?)?;
    Ok(VelocityField { frame: t, stride: s, velocities: finite_difference(&now, &before, s) })
}

fn finite_difference(now: &[Vec3], before: &[Vec3], s: usize) -> Vec<Vec3> {
    let inv = 1.0 / s as Real;
    now.iter().zip(before).map(|(a, b)| (a - b) * inv).collect()
}

/// Indices of the `tau` template vertices nearest to `query`, ascending by
/// distance with ties broken by index.
pub fn knn_indices(tpl: &BodyTemplate, query: &Vec3, tau: usize) -> Result<Vec<usize>, MotionError> {
    knn_in(&tpl.vertices, query, tau)
}

pub(crate) fn knn_in(points: &[Vec3], query: &Vec3, tau: usize) -> Result<Vec<usize>, MotionError> {
    let n = points.len();
    if tau > n {
        return Err(MotionError::TooManyNeighbours { tau, n });
    }
    if tau == 0 {
        return Ok(Vec::new());
    }
    let mut keyed: Vec<(Real, usize)> =
        points.iter().enumerate().map(|(i, p)| ((p - query).norm_squared(), i)).collect();
    let cmp = |a: &(Real, usize), b: &(Real, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if tau < n {
        keyed.select_nth_unstable_by(tau - 1, cmp);
        keyed.truncate(tau);
    }
    keyed.sort_unstable_by(cmp);
    Ok(keyed.into_iter().map(|(_, i)| i).collect())
}

/// Nearest template vertices of every canonical Gaussian, tagged with the
/// Gaussian-set revision it was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnCache {
    pub tau: usize,
    pub revision: u64,
    /// Row-major `n x tau`.
    pub indices: Vec<usize>,
}

impl KnnCache {
    pub fn build(tpl: &BodyTemplate, positions: &[Vec3], tau: usize, revision: u64) -> Result<Self, MotionError> {
        let rows: Vec<Vec<usize>> = positions
            .par_iter()
            .map(|x| knn_in(&tpl.vertices, x, tau))
            .collect::<Result<_, _>>()?;
        Ok(KnnCache { tau, revision, indices: rows.concat() })
    }

    pub fn len(&self) -> usize {
        if self.tau == 0 {
            0
        } else {
            self.indices.len() / self.tau
        }
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn neighbours(&self, i: usize) -> &[usize] {
        &self.indices[i * self.tau..(i + 1) * self.tau]
    }

    /// Closest template vertex of Gaussian `i`.
    pub fn nearest(&self, i: usize) -> usize {
        self.indices[i * self.tau]
    }

    pub fn check(&self, revision: u64) -> Result<(), MotionError> {
        if self.revision != revision {
            return Err(MotionError::StaleCache { cache: self.revision, current: revision });
        }
        Ok(())
    }
}

/// Gathered neighbour velocities: `n x |S| x L x tau x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMotionSeq {
    pub num_points: usize,
    pub num_scales: usize,
    pub length: usize,
    pub tau: usize,
    pub data: Vec<Real>,
}

impl PointMotionSeq {
    pub fn row_len(&self) -> usize {
        self.num_scales * self.length * self.tau * 3
    }

    pub fn row(&self, i: usize) -> &[Real] {
        let r = self.row_len();
        &self.data[i * r..(i + 1) * r]
    }
}

/// Posed template meshes and velocity fields for a whole pose sequence,
/// computed once.
#[derive(Debug, Clone)]
pub struct MotionTable {
    first_frame: usize,
    meshes: Vec<Vec<Vec3>>,
}

impl MotionTable {
    pub fn new(tpl: &BodyTemplate, poses: &PoseSequence) -> Result<Self, MotionError> {
        let meshes = poses
            .poses()
            .par_iter()
            .map(|p| pose_mesh(tpl, p))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(MotionTable { first_frame: poses.first_frame(), meshes })
    }

    pub fn mesh(&self, t: usize) -> Result<&[Vec3], MotionError> {
        t.checked_sub(self.first_frame)
            .and_then(|i| self.meshes.get(i))
            .map(|m| m.as_slice())
            .ok_or(MotionError::MissingFrame(t))
    }

    pub fn velocity(&self, t: usize, s: usize) -> Result<VelocityField, MotionError> {
        let prev = t.saturating_sub(s).max(self.first_frame);
        let now = self.mesh(t)?;
        let velocities = if prev == t {
            vec![Vec3::zeros(); now.len()]
        } else {
            finite_difference(now, self.mesh(prev)?, s)
        };
        Ok(VelocityField { frame: t, stride: s, velocities })
    }

    /// Neighbour velocities of every Gaussian along every sampled history.
    pub fn point_motion(
        &self,
        cache: &KnnCache,
        revision: u64,
        t: usize,
        strides: &StrideSet,
        l: usize,
    ) -> Result<PointMotionSeq, MotionError> {
        cache.check(revision)?;
        let fields: Vec<Vec<VelocityField>> = strides
            .strides()
            .iter()
            .map(|&s| {
                sample_sequence(t, s, l, self.first_frame)
                    .into_iter()
                    .map(|tp| self.velocity(tp, s))
                    .collect()
            })
            .collect::<Result<_, _>>()?;
        let n = cache.len();
        let tau = cache.tau;
        let row_len = strides.len() * l * tau * 3;
        let mut data = vec![0.0; n * row_len];
        data.par_chunks_mut(row_len.max(1)).enumerate().for_each(|(i, row)| {
            let nbrs = cache.neighbours(i);
            let mut o = 0;
            for per_scale in &fields {
                for field in per_scale {
                    for &j in nbrs {
                        let v = field.velocities[j];
                        row[o..o + 3].copy_from_slice(&[v.x, v.y, v.z]);
                        o += 3;
                    }
                }
            }
        });
        Ok(PointMotionSeq { num_points: n, num_scales: strides.len(), length: l, tau, data })
    }
}

/// One-shot gather for Gaussians at `positions`; builds the KNN cache and the
/// motion table internally.
pub fn build_point_motion(
    tpl: &BodyTemplate,
    poses: &PoseSequence,
    positions: &[Vec3],
    t: usize,
    strides: &StrideSet,
    l: usize,
    tau: usize,
) -> Result<PointMotionSeq, MotionError> {
    let cache = KnnCache::build(tpl, positions, tau, 0)?;
    MotionTable::new(tpl, poses)?.point_motion(&cache, 0, t, strides, l)
}
