//! Procedural articulated body: canonical vertices, skinning weights, joint
//! tree and forward kinematics.
//!
//! A template is built from a [`BodyRecipe`]: every joint owns a tube of
//! vertex rings around its bone segment, and optional appendages (hanging
//! vertex clusters skinned to a single joint) stand in for loose clothing.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blob::{self, quantize};
use crate::geometry::{lbs_point_unchecked, rodrigues_derivatives, rodrigues_to_matrix};
use crate::geometry::{BoneTransform, Mat3, Vec3};
use crate::Real;

#[derive(Debug, thiserror::Error)]
pub enum BodyError {
    #[error("malformed body recipe: {0}")]
    Recipe(String),
    #[error("invalid template: {0}")]
    Template(String),
    #[error("pose has {got} joints, template has {expected}")]
    JointCount { expected: usize, got: usize },
    #[error("non-finite pose component")]
    NonFinitePose,
    #[error("template io: {0}")]
    Io(#[from] std::io::Error),
    #[error("template manifest: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSpec {
    pub name: String,
    /// Parent index, `-1` for the root.
    pub parent: i32,
    /// Canonical (rest) position.
    pub position: [Real; 3],
    /// Explicit end of this joint's bone segment; defaults to the first
    /// child, or an extension of the parent direction for leaves.
    #[serde(default)]
    pub segment_end: Option<[Real; 3]>,
    pub radius: Real,
    pub rings: usize,
    pub ring_vertices: usize,
}

/// A cluster of vertices hanging below an attachment point, skinned fully to
/// `anchor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppendageSpec {
    pub anchor: usize,
    /// Attachment point in canonical space.
    pub attach: [Real; 3],
    /// Hanging length along -y.
    pub length: Real,
    /// Ring radius at the attachment point and at the bottom row.
    pub radius_top: Real,
    pub radius_bottom: Real,
    pub rows: usize,
    pub per_row: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodyRecipe {
    pub joints: Vec<JointSpec>,
    #[serde(default)]
    pub appendages: Vec<AppendageSpec>,
    /// Radial jitter as a fraction of the ring radius.
    #[serde(default)]
    pub jitter: Real,
}

impl BodyRecipe {
    /// Straight chain of `k` joints along +y, `spacing` apart.
    pub fn chain(k: usize, spacing: Real, radius: Real, rings: usize, ring_vertices: usize) -> Self {
        let joints = (0..k)
            .map(|i| JointSpec {
                name: format!("joint{i}"),
                parent: i as i32 - 1,
                position: [0.0, i as Real * spacing, 0.0],
                segment_end: None,
                radius,
                rings,
                ring_vertices,
            })
            .collect();
        BodyRecipe { joints, appendages: Vec::new(), jitter: 0.0 }
    }

    /// Four-joint torso-and-arms proxy, roughly 1.2 units tall, with an
    /// optional hanging flap on each arm and a skirt around the pelvis.
    pub fn torso_proxy(with_appendages: bool) -> Self {
        let joint = |name: &str, parent: i32, position: [Real; 3], end: Option<[Real; 3]>, radius| {
            JointSpec {
                name: name.into(),
                parent,
                position,
                segment_end: end,
                radius,
                rings: 6,
                ring_vertices: 12,
            }
        };
        let joints = vec![
            joint("pelvis", -1, [0.0, 0.0, 0.0], None, 0.16),
            joint("chest", 0, [0.0, 0.45, 0.0], Some([0.0, 0.85, 0.0]), 0.14),
            joint("arm_left", 1, [0.16, 0.7, 0.0], Some([0.6, 0.7, 0.0]), 0.06),
            joint("arm_right", 1, [-0.16, 0.7, 0.0], Some([-0.6, 0.7, 0.0]), 0.06),
        ];
        let appendages = if with_appendages {
            vec![
                AppendageSpec {
                    anchor: 0,
                    attach: [0.0, 0.02, 0.0],
                    length: 0.45,
                    radius_top: 0.17,
                    radius_bottom: 0.32,
                    rows: 6,
                    per_row: 18,
                },
                AppendageSpec {
                    anchor: 2,
                    attach: [0.5, 0.66, 0.0],
                    length: 0.3,
                    radius_top: 0.05,
                    radius_bottom: 0.1,
                    rows: 4,
                    per_row: 8,
                },
                AppendageSpec {
                    anchor: 3,
                    attach: [-0.5, 0.66, 0.0],
                    length: 0.3,
                    radius_top: 0.05,
                    radius_bottom: 0.1,
                    rows: 4,
                    per_row: 8,
                },
            ]
        } else {
            Vec::new()
        };
        BodyRecipe { joints, appendages, jitter: 0.05 }
    }

    /// Same recipe with every joint segment tessellated into `rings` rings of
    /// `ring_vertices` vertices.
    pub fn with_resolution(mut self, rings: usize, ring_vertices: usize) -> Self {
        for j in &mut self.joints {
            j.rings = rings;
            j.ring_vertices = ring_vertices;
        }
        self
    }

    fn validate(&self) -> Result<(), BodyError> {
        let k = self.joints.len();
        if k < 2 {
            return Err(BodyError::Recipe(format!("need at least 2 joints, got {k}")));
        }
        for (i, j) in self.joints.iter().enumerate() {
            let ok_parent = if i == 0 { j.parent == -1 } else { j.parent >= 0 && (j.parent as usize) < i };
            if !ok_parent {
                return Err(BodyError::Recipe(format!(
                    "joint {i} ({}) has parent {}; parents must precede children and only joint 0 is a root",
                    j.name, j.parent
                )));
            }
            if j.rings == 0 || j.ring_vertices == 0 || !(j.radius > 0.0) {
                return Err(BodyError::Recipe(format!("joint {i} has an empty or zero-radius segment")));
            }
            if !j.position.iter().all(|v| v.is_finite()) {
                return Err(BodyError::Recipe(format!("joint {i} position is not finite")));
            }
        }
        for (a, app) in self.appendages.iter().enumerate() {
            if app.anchor >= k || app.rows == 0 || app.per_row == 0 || !(app.length > 0.0) {
                return Err(BodyError::Recipe(format!("appendage {a} is malformed")));
            }
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return Err(BodyError::Recipe(format!("jitter {} outside [0, 0.5)", self.jitter)));
        }
        Ok(())
    }
}

/// Vertex range of one appendage inside the template, with each vertex's
/// hanging depth as a fraction of the appendage length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppendageInfo {
    pub anchor: usize,
    pub attach: [Real; 3],
    pub first_vertex: usize,
    pub hang: Vec<Real>,
}

impl AppendageInfo {
    pub fn vertices(&self) -> std::ops::Range<usize> {
        self.first_vertex..self.first_vertex + self.hang.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyTemplate {
    /// Canonical vertex positions (N).
    pub vertices: Vec<Vec3>,
    /// Row-major N x K skinning weights.
    pub skin_weights: Vec<Real>,
    /// Parent joint per joint, `None` for the root.
    pub parents: Vec<Option<usize>>,
    pub rest_joints: Vec<Vec3>,
    pub names: Vec<String>,
    pub appendages: Vec<AppendageInfo>,
    pub recipe: BodyRecipe,
    pub seed: u64,
}

impl BodyTemplate {
    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn weights(&self, vertex: usize) -> &[Real] {
        let k = self.num_joints();
        &self.skin_weights[vertex * k..(vertex + 1) * k]
    }

    pub fn validate(&self) -> Result<(), BodyError> {
        let (n, k) = (self.num_vertices(), self.num_joints());
        if k < 2 || n < k {
            return Err(BodyError::Template(format!("need N >= K >= 2, got N={n} K={k}")));
        }
        if self.rest_joints.len() != k || self.names.len() != k || self.skin_weights.len() != n * k {
            return Err(BodyError::Template("inconsistent array sizes".into()));
        }
        for (i, p) in self.parents.iter().enumerate() {
            let ok = match p {
                None => i == 0,
                Some(p) => *p < i,
            };
            if !ok {
                return Err(BodyError::Template(format!("joint {i} breaks the parent ordering")));
            }
        }
        for v in 0..n {
            let row = self.weights(v);
            let sum: Real = row.iter().sum();
            if row.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return Err(BodyError::Template(format!("weight row {v} is off the simplex")));
            }
        }
        Ok(())
    }

    /// Writes `manifest.json` plus float blobs into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), BodyError> {
        fs::create_dir_all(dir)?;
        let flat = |vs: &[Vec3]| vs.iter().flat_map(|v| [v.x, v.y, v.z]).collect::<Vec<_>>();
        blob::write_f32_blob(&dir.join("vertices.bin"), &flat(&self.vertices))?;
        blob::write_f32_blob(&dir.join("skin_weights.bin"), &self.skin_weights)?;
        blob::write_f32_blob(&dir.join("rest_joints.bin"), &flat(&self.rest_joints))?;
        let manifest = TemplateManifest {
            num_vertices: self.num_vertices(),
            num_joints: self.num_joints(),
            parents: self.parents.iter().map(|p| p.map_or(-1, |p| p as i64)).collect(),
            names: self.names.clone(),
            appendages: self.appendages.clone(),
            recipe: self.recipe.clone(),
            seed: self.seed,
            vertices: "vertices.bin".into(),
            skin_weights: "skin_weights.bin".into(),
            rest_joints: "rest_joints.bin".into(),
        };
        blob::write_atomic(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, BodyError> {
        let m: TemplateManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let (n, k) = (m.num_vertices, m.num_joints);
        let unflat = |v: Vec<Real>| v.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
        let tpl = BodyTemplate {
            vertices: unflat(blob::read_f32_blob(&dir.join(&m.vertices), n * 3)?),
            skin_weights: blob::read_f32_blob(&dir.join(&m.skin_weights), n * k)?,
            parents: m
                .parents
                .iter()
                .map(|&p| if p < 0 { None } else { Some(p as usize) })
                .collect(),
            rest_joints: unflat(blob::read_f32_blob(&dir.join(&m.rest_joints), k * 3)?),
            names: m.names,
            appendages: m.appendages,
            recipe: m.recipe,
            seed: m.seed,
        };
        tpl.validate()?;
        Ok(tpl)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateManifest {
    num_vertices: usize,
    num_joints: usize,
    parents: Vec<i64>,
    names: Vec<String>,
    appendages: Vec<AppendageInfo>,
    recipe: BodyRecipe,
    seed: u64,
    vertices: String,
    skin_weights: String,
    rest_joints: String,
}

/// Per-joint axis-angle rotations (relative to the parent) and a root
/// translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRecord", into = "PoseRecord")]
pub struct Pose {
    pub joint_rotations: Vec<Vec3>,
    pub root_translation: Vec3,
}

impl Pose {
    pub fn identity(k: usize) -> Self {
        Pose { joint_rotations: vec![Vec3::zeros(); k], root_translation: Vec3::zeros() }
    }

    /// Builds a pose, wrapping every rotation angle into `[0, 2pi]`.
    pub fn new(joint_rotations: Vec<Vec3>, root_translation: Vec3) -> Result<Self, BodyError> {
        let finite = joint_rotations.iter().chain(std::iter::once(&root_translation)).all(|v| {
            v.iter().all(|c| c.is_finite())
        });
        if !finite {
            return Err(BodyError::NonFinitePose);
        }
        let joint_rotations = joint_rotations.into_iter().map(canonical_axis_angle).collect();
        Ok(Pose { joint_rotations, root_translation })
    }

    pub fn num_joints(&self) -> usize {
        self.joint_rotations.len()
    }

    /// Joint rotations flattened joint-major.
    pub fn flat_rotations(&self) -> Vec<Real> {
        self.joint_rotations.iter().flat_map(|v| [v.x, v.y, v.z]).collect()
    }
}

fn canonical_axis_angle(theta: Vec3) -> Vec3 {
    let tau = TAU as Real;
    let angle = theta.norm();
    if angle <= tau {
        return theta;
    }
    theta * ((angle % tau) / angle)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseRecord {
    joint_rotations: Vec<[Real; 3]>,
    root_translation: [Real; 3],
}

impl TryFrom<PoseRecord> for Pose {
    type Error = BodyError;

    fn try_from(r: PoseRecord) -> Result<Self, BodyError> {
        Pose::new(r.joint_rotations.into_iter().map(Vec3::from).collect(), Vec3::from(r.root_translation))
    }
}

impl From<Pose> for PoseRecord {
    fn from(p: Pose) -> Self {
        PoseRecord {
            joint_rotations: p.joint_rotations.iter().map(|v| [v.x, v.y, v.z]).collect(),
            root_translation: p.root_translation.into(),
        }
    }
}

fn check_pose(tpl: &BodyTemplate, pose: &Pose) -> Result<(), BodyError> {
    if pose.num_joints() != tpl.num_joints() {
        return Err(BodyError::JointCount { expected: tpl.num_joints(), got: pose.num_joints() });
    }
    Ok(())
}

/// Per-bone transforms mapping canonical points to posed space. The rest
/// pose maps to identities.
pub fn forward_kinematics(tpl: &BodyTemplate, pose: &Pose) -> Result<Vec<BoneTransform>, BodyError> {
    check_pose(tpl, pose)?;
    let mut global: Vec<BoneTransform> = Vec::with_capacity(tpl.num_joints());
    for (k, theta) in pose.joint_rotations.iter().enumerate() {
        let r = rodrigues_to_matrix(theta);
        let j = tpl.rest_joints[k];
        let local = BoneTransform::new(r, j - r * j);
        let g = match tpl.parents[k] {
            Some(p) => global[p].compose(&local),
            None => BoneTransform::new(local.rotation, local.translation + pose.root_translation),
        };
        global.push(g);
    }
    Ok(global)
}

/// Gradient of a scalar with respect to one bone transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoneGrad {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for BoneGrad {
    fn default() -> Self {
        BoneGrad { rotation: Mat3::zeros(), translation: Vec3::zeros() }
    }
}

/// Pulls bone-transform gradients back to joint axis-angles and the root
/// translation.
pub fn forward_kinematics_backward(
    tpl: &BodyTemplate,
    pose: &Pose,
    grads: &[BoneGrad],
) -> Result<(Vec<Vec3>, Vec3), BodyError> {
    check_pose(tpl, pose)?;
    let bones = forward_kinematics(tpl, pose)?;
    let k = tpl.num_joints();
    let mut acc = grads.to_vec();
    let mut d_theta = vec![Vec3::zeros(); k];
    let mut d_root = Vec3::zeros();
    for idx in (0..k).rev() {
        let theta = pose.joint_rotations[idx];
        let r = rodrigues_to_matrix(&theta);
        let j = tpl.rest_joints[idx];
        let g = acc[idx];
        let d_local = match tpl.parents[idx] {
            Some(p) => {
                let rp = bones[p].rotation;
                let lever = j - r * j;
                acc[p].rotation += g.rotation * r.transpose() + g.translation * lever.transpose();
                acc[p].translation += g.translation;
                rp.transpose() * g.rotation - (rp.transpose() * g.translation) * j.transpose()
            }
            None => {
                d_root += g.translation;
                g.rotation - g.translation * j.transpose()
            }
        };
        let dr = rodrigues_derivatives(&theta);
        d_theta[idx] = Vec3::new(d_local.dot(&dr[0]), d_local.dot(&dr[1]), d_local.dot(&dr[2]));
    }
    Ok((d_theta, d_root))
}

/// Skins every template vertex with the template weights.
pub fn pose_mesh(tpl: &BodyTemplate, pose: &Pose) -> Result<Vec<Vec3>, BodyError> {
    let bones = forward_kinematics(tpl, pose)?;
    Ok(tpl
        .vertices
        .iter()
        .enumerate()
        .map(|(i, x)| lbs_point_unchecked(x, &bones, tpl.weights(i)))
        .collect())
}

fn segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> Real {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p - (a + ab * t)).norm()
}

/// Two unit vectors orthogonal to `axis` (and to each other).
fn ring_basis(axis: &Vec3) -> (Vec3, Vec3) {
    let helper = if axis.x.abs() < 0.9 { Vec3::x() } else { Vec3::z() };
    let u = axis.cross(&helper).normalize();
    let v = axis.cross(&u);
    (u, v)
}

/// Deterministic procedural template.
pub fn make_synthetic_body(recipe: &BodyRecipe, seed: u64) -> Result<BodyTemplate, BodyError> {
    recipe.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = recipe.joints.len();
    let q3 = |a: [Real; 3]| Vec3::new(quantize(a[0]), quantize(a[1]), quantize(a[2]));
    let rest: Vec<Vec3> = recipe.joints.iter().map(|j| q3(j.position)).collect();
    let parents: Vec<Option<usize>> =
        recipe.joints.iter().map(|j| if j.parent < 0 { None } else { Some(j.parent as usize) }).collect();

    let segments: Vec<(Vec3, Vec3)> = (0..k)
        .map(|i| {
            let start = rest[i];
            let end = if let Some(e) = recipe.joints[i].segment_end {
                q3(e)
            } else if let Some(child) = (0..k).find(|&c| parents[c] == Some(i)) {
                rest[child]
            } else {
                let dir = match parents[i] {
                    Some(p) if (start - rest[p]).norm() > 1e-9 => (start - rest[p]).normalize(),
                    _ => Vec3::y(),
                };
                start + dir * (4.0 * recipe.joints[i].radius)
            };
            (start, end)
        })
        .collect();

    let mut vertices = Vec::new();
    for (i, spec) in recipe.joints.iter().enumerate() {
        let (a, b) = segments[i];
        let axis = if (b - a).norm() > 1e-9 { (b - a).normalize() } else { Vec3::y() };
        let (u, v) = ring_basis(&axis);
        let phase0: Real = rng.random_range(0.0..1.0);
        for r in 0..spec.rings {
            let t = (r as Real + 0.5) / spec.rings as Real;
            let centre = a + (b - a) * t;
            for s in 0..spec.ring_vertices {
                let ang = TAU as Real * (s as Real + phase0) / spec.ring_vertices as Real;
                let jitter = 1.0 + recipe.jitter * rng.random_range(-1.0..1.0);
                let p = centre + (u * ang.cos() + v * ang.sin()) * (spec.radius * jitter);
                vertices.push(Vec3::new(quantize(p.x), quantize(p.y), quantize(p.z)));
            }
        }
    }

    let mut skin_weights = Vec::with_capacity(vertices.len() * k);
    for p in &vertices {
        skin_weights.extend(two_segment_weights(p, &segments));
    }

    let mut appendages = Vec::new();
    for app in &recipe.appendages {
        let first_vertex = vertices.len();
        let top = Vec3::from(app.attach);
        let phase0: Real = rng.random_range(0.0..1.0);
        let mut hang = Vec::new();
        for r in 0..app.rows {
            let f = (r as Real + 1.0) / app.rows as Real;
            let radius = app.radius_top + (app.radius_bottom - app.radius_top) * f;
            for s in 0..app.per_row {
                let ang = TAU as Real * (s as Real + phase0 + 0.5 * r as Real) / app.per_row as Real;
                let jitter = 1.0 + recipe.jitter * rng.random_range(-1.0..1.0);
                let p = top + Vec3::new(ang.cos() * radius * jitter, -f * app.length, ang.sin() * radius * jitter);
                vertices.push(Vec3::new(quantize(p.x), quantize(p.y), quantize(p.z)));
                let mut row = vec![0.0; k];
                row[app.anchor] = 1.0;
                skin_weights.extend(row);
                hang.push(f);
            }
        }
        appendages.push(AppendageInfo { anchor: app.anchor, attach: app.attach, first_vertex, hang });
    }

    let tpl = BodyTemplate {
        vertices,
        skin_weights,
        parents,
        rest_joints: rest,
        names: recipe.joints.iter().map(|j| j.name.clone()).collect(),
        appendages,
        recipe: recipe.clone(),
        seed,
    };
    tpl.validate()?;
    Ok(tpl)
}

/// Inverse-distance blend over the two closest bone segments, quantized to
/// blob precision and kept on the simplex.
fn two_segment_weights(p: &Vec3, segments: &[(Vec3, Vec3)]) -> Vec<Real> {
    let k = segments.len();
    let mut order: Vec<(Real, usize)> =
        segments.iter().enumerate().map(|(i, (a, b))| (segment_distance(p, a, b), i)).collect();
    order.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    let (d0, i0) = order[0];
    let (d1, i1) = order[1];
    let w0 = 1.0 / d0.max(1e-6).powi(4);
    let w1 = 1.0 / d1.max(1e-6).powi(4);
    let mut row = vec![0.0; k];
    let a = quantize(w0 / (w0 + w1));
    row[i0] = a;
    row[i1] = quantize(1.0 - a);
    row
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::lbs_point;
    use nalgebra::{Matrix4, Vector4};

    fn random_pose(rng: &mut ChaCha8Rng, k: usize, scale: Real) -> Pose {
        let rots = (0..k)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-scale..scale),
                    rng.random_range(-scale..scale),
                    rng.random_range(-scale..scale),
                )
            })
            .collect();
        Pose::new(rots, Vec3::new(rng.random_range(-1.0..1.0), 0.3, -0.2)).unwrap()
    }

    #[test]
    fn two_joint_single_ring() {
        let recipe = BodyRecipe::chain(2, 1.0, 0.1, 1, 8);
        let tpl = make_synthetic_body(&recipe, 3).unwrap();
        assert_eq!(tpl.num_vertices(), 16);
        for v in 0..16 {
            let row = tpl.weights(v);
            assert!((row.iter().sum::<Real>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|w| *w >= 0.0));
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let recipe = BodyRecipe::torso_proxy(true);
        let a = make_synthetic_body(&recipe, 11).unwrap();
        let b = make_synthetic_body(&recipe, 11).unwrap();
        assert_eq!(a, b);
        let c = make_synthetic_body(&recipe, 12).unwrap();
        assert_ne!(a.vertices, c.vertices);
    }

    #[test]
    fn random_recipes_satisfy_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..50 {
            let k = rng.random_range(2..7);
            let joints = (0..k)
                .map(|i| JointSpec {
                    name: format!("j{i}"),
                    parent: if i == 0 { -1 } else { rng.random_range(0..i) as i32 },
                    position: [
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ],
                    segment_end: None,
                    radius: rng.random_range(0.02..0.2),
                    rings: rng.random_range(1..4),
                    ring_vertices: rng.random_range(3..10),
                })
                .collect();
            let appendages = (0..rng.random_range(0..3))
                .map(|_| AppendageSpec {
                    anchor: rng.random_range(0..k),
                    attach: [0.0, 0.0, 0.0],
                    length: 0.3,
                    radius_top: 0.05,
                    radius_bottom: 0.1,
                    rows: 2,
                    per_row: 5,
                })
                .collect();
            let recipe = BodyRecipe { joints, appendages, jitter: 0.1 };
            let tpl = make_synthetic_body(&recipe, trial).unwrap();
            tpl.validate().unwrap();
            for app in &tpl.appendages {
                for v in app.vertices() {
                    assert_eq!(tpl.weights(v)[app.anchor], 1.0);
                }
            }
        }
    }

    #[test]
    fn malformed_recipes_rejected() {
        let mut r = BodyRecipe::chain(2, 1.0, 0.1, 1, 8);
        r.joints[1].parent = 1;
        assert!(matches!(make_synthetic_body(&r, 0), Err(BodyError::Recipe(_))));
        let r = BodyRecipe::chain(1, 1.0, 0.1, 1, 8);
        assert!(make_synthetic_body(&r, 0).is_err());
        let mut r = BodyRecipe::chain(3, 1.0, 0.1, 1, 8);
        r.joints[2].rings = 0;
        assert!(make_synthetic_body(&r, 0).is_err());
    }

    #[test]
    fn identity_pose_is_exact_identity() {
        let tpl = make_synthetic_body(&BodyRecipe::torso_proxy(true), 1).unwrap();
        let bones = forward_kinematics(&tpl, &Pose::identity(4)).unwrap();
        assert!(bones.iter().all(|b| *b == BoneTransform::IDENTITY));
        assert_eq!(pose_mesh(&tpl, &Pose::identity(4)).unwrap(), tpl.vertices);
    }

    #[test]
    fn root_rotation_rotates_everything_about_root() {
        let tpl = make_synthetic_body(&BodyRecipe::chain(2, 1.0, 0.1, 1, 8), 0).unwrap();
        let theta = Vec3::new(0.0, 0.0, 0.7);
        let pose = Pose::new(vec![theta, Vec3::zeros()], Vec3::zeros()).unwrap();
        let bones = forward_kinematics(&tpl, &pose).unwrap();
        let r = rodrigues_to_matrix(&theta);
        let j0 = tpl.rest_joints[0];
        let expected = BoneTransform::new(r, j0 - r * j0);
        for b in bones {
            assert!((b.rotation - expected.rotation).amax() < 1e-15);
            assert!((b.translation - expected.translation).amax() < 1e-15);
        }
    }

    #[test]
    fn root_translation_shifts_mesh() {
        let tpl = make_synthetic_body(&BodyRecipe::torso_proxy(false), 1).unwrap();
        let d = Vec3::new(0.25, -0.5, 1.0);
        let pose = Pose::new(vec![Vec3::zeros(); 4], d).unwrap();
        let mesh = pose_mesh(&tpl, &pose).unwrap();
        for (a, b) in mesh.iter().zip(&tpl.vertices) {
            assert!((a - b - d).amax() < 1e-12);
        }
    }

    #[test]
    fn joints_match_homogeneous_chain() {
        let tpl = make_synthetic_body(&BodyRecipe::chain(4, 0.5, 0.1, 2, 6), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let pose = random_pose(&mut rng, 4, 1.5);
            let bones = forward_kinematics(&tpl, &pose).unwrap();
            let mut chain: Vec<Matrix4<Real>> = Vec::new();
            for k in 0..4 {
                let mut local = Matrix4::identity();
                local
                    .fixed_view_mut::<3, 3>(0, 0)
                    .copy_from(&rodrigues_to_matrix(&pose.joint_rotations[k]));
                let offset = match tpl.parents[k] {
                    Some(p) => tpl.rest_joints[k] - tpl.rest_joints[p],
                    None => tpl.rest_joints[k] + pose.root_translation,
                };
                local.fixed_view_mut::<3, 1>(0, 3).copy_from(&offset);
                let g = match tpl.parents[k] {
                    Some(p) => chain[p] * local,
                    None => local,
                };
                chain.push(g);
            }
            for k in 0..4 {
                let j = tpl.rest_joints[k];
                let posed = bones[k].apply(&j);
                let oracle = chain[k] * Vector4::new(0.0, 0.0, 0.0, 1.0);
                assert!((posed - oracle.xyz()).amax() < 1e-9);
            }
        }
    }

    #[test]
    fn pose_mesh_matches_lbs_sum() {
        let tpl = make_synthetic_body(&BodyRecipe::torso_proxy(true), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pose = random_pose(&mut rng, 4, 1.0);
        let bones = forward_kinematics(&tpl, &pose).unwrap();
        let mesh = pose_mesh(&tpl, &pose).unwrap();
        for (i, v) in tpl.vertices.iter().enumerate() {
            let mut oracle = Vec3::zeros();
            for (k, b) in bones.iter().enumerate() {
                oracle += (b.rotation * v + b.translation) * tpl.weights(i)[k];
            }
            assert!((mesh[i] - oracle).amax() < 1e-9);
            assert!((lbs_point(v, &bones, tpl.weights(i)).unwrap() - mesh[i]).amax() < 1e-12);
        }
    }

    #[test]
    fn pose_mesh_is_rigidly_equivariant() {
        let tpl = make_synthetic_body(&BodyRecipe::torso_proxy(true), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let theta = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), 0.4);
            let t = Vec3::new(rng.random_range(-1.0..1.0), 0.2, 0.7);
            let mut rots = vec![Vec3::zeros(); 4];
            rots[0] = theta;
            let mesh = pose_mesh(&tpl, &Pose::new(rots, t).unwrap()).unwrap();
            let r = rodrigues_to_matrix(&theta);
            let j0 = tpl.rest_joints[0];
            for (a, v) in mesh.iter().zip(&tpl.vertices) {
                let expected = r * (v - j0) + j0 + t;
                assert!((a - expected).amax() < 1e-9);
            }
        }
    }

    #[test]
    fn joint_count_mismatch() {
        let tpl = make_synthetic_body(&BodyRecipe::chain(3, 1.0, 0.1, 1, 4), 0).unwrap();
        assert!(matches!(
            forward_kinematics(&tpl, &Pose::identity(2)),
            Err(BodyError::JointCount { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn fk_backward_matches_fd() {
        let tpl = make_synthetic_body(&BodyRecipe::torso_proxy(false), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pose = random_pose(&mut rng, 4, 1.0);
        let weights: Vec<BoneGrad> = (0..4)
            .map(|_| BoneGrad {
                rotation: Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                translation: Vec3::new(rng.random_range(-1.0..1.0), 0.5, -0.3),
            })
            .collect();
        let loss = |p: &Pose| -> Real {
            forward_kinematics(&tpl, p)
                .unwrap()
                .iter()
                .zip(&weights)
                .map(|(b, g)| b.rotation.dot(&g.rotation) + b.translation.dot(&g.translation))
                .sum()
        };
        let (dt, dr) = forward_kinematics_backward(&tpl, &pose, &weights).unwrap();
        let h = 1e-6;
        for k in 0..4 {
            for c in 0..3 {
                let mut p = pose.clone();
                p.joint_rotations[k][c] += h;
                let lp = loss(&p);
                p.joint_rotations[k][c] -= 2.0 * h;
                let lm = loss(&p);
                assert!(((lp - lm) / (2.0 * h) - dt[k][c]).abs() < 1e-7);
            }
        }
        for c in 0..3 {
            let mut p = pose.clone();
            p.root_translation[c] += h;
            let lp = loss(&p);
            p.root_translation[c] -= 2.0 * h;
            let lm = loss(&p);
            assert!(((lp - lm) / (2.0 * h) - dr[c]).abs() < 1e-7);
        }
    }

    #[test]
    fn template_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let tpl = make_synthetic_body(&BodyRecipe::torso_proxy(true), 4).unwrap();
        tpl.save(dir.path()).unwrap();
        let back = BodyTemplate::load(dir.path()).unwrap();
        assert_eq!(back, tpl);
    }

    #[test]
    fn pose_canonicalizes_and_serializes() {
        let big = Vec3::new(0.0, 0.0, 7.0);
        let p = Pose::new(vec![big, Vec3::zeros()], Vec3::zeros()).unwrap();
        assert!(p.joint_rotations[0].norm() <= TAU as Real);
        assert!((rodrigues_to_matrix(&p.joint_rotations[0]) - rodrigues_to_matrix(&big)).amax() < 1e-12);
        let text = serde_json::to_string(&p).unwrap();
        assert!(text.contains("joint_rotations") && text.contains("root_translation"));
        assert_eq!(serde_json::from_str::<Pose>(&text).unwrap(), p);
        assert!(Pose::new(vec![Vec3::new(Real::NAN, 0.0, 0.0)], Vec3::zeros()).is_err());
    }
}
