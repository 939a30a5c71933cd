//! Dense networks with hand-written reverse mode, and the task networks of
//! the deformation stack:
//!
//! | net        | maps                                             |
//! |------------|--------------------------------------------------|
//! | `skeleton` | flattened pose residuals of every scale -> 32    |
//! | `knn`      | `tau` neighbour velocities (tau*3) -> 16          |
//! | `point`    | per-step knn embeddings of every scale -> 64     |
//! | `nonrigid` | `[x, P, f_skel, f_point]` -> `(dx, ds, dr)` (10)  |
//! | `lbs`      | canonical `x` -> skinning-weight offsets (K)      |
//! | `pose`     | flattened pose -> bounded joint-rotation residual |
//!
//! Batched passes split rows into fixed-size blocks; parameter gradients are
//! accumulated per block and reduced in block order, so results do not
//! depend on the number of worker threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body::Pose;
use crate::geometry::{quat_mul, quat_mul_backward, Quat, Vec3};
use crate::motion::{PointMotionSeq, SkeletonMotionSeq};
use crate::Real;

/// Rows per parallel work block.
const BLOCK_ROWS: usize = 64;

/// Bound of the pose-refinement residual, radians.
pub const POSE_RESIDUAL_SCALE: Real = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("{net}: expected input width {expected}, got {got}")]
    InputWidth { net: &'static str, expected: usize, got: usize },
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    Shape { what: &'static str, expected: Vec<usize>, got: Vec<usize> },
    #[error("non-finite deformation output for Gaussian {index}: {values:?}")]
    NonFinite { index: usize, values: Vec<Real> },
    #[error("parameter buffer has {got} values, network needs {expected}")]
    ParamCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    None,
}

impl Activation {
    fn apply(self, v: Real) -> Real {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::None => v,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: Real) -> Real {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::None => 1.0,
        }
    }
}

/// Multi-layer perceptron over a flat parameter buffer. Layer `l` stores an
/// `out x in` row-major weight matrix followed by `out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    pub name: &'static str,
    dims: Vec<usize>,
    activations: Vec<Activation>,
    pub params: Vec<Real>,
    offsets: Vec<usize>,
}

/// Activations recorded by a batched forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    rows: usize,
    /// `layer_values[0]` is the input; `layer_values[l + 1]` the output of
    /// layer `l` after its activation.
    layer_values: Vec<Vec<Real>>,
}

impl Tape {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn output(&self) -> &[Real] {
        self.layer_values.last().map(|v| v.as_slice()).unwrap_or(&[])
    }
}

impl DenseNet {
    /// Zero-initialized network.
    pub fn new(name: &'static str, dims: &[usize], activations: &[Activation]) -> Self {
        assert!(dims.len() >= 2, "a network needs at least one layer");
        assert_eq!(dims.len() - 1, activations.len(), "one activation per layer");
        let mut offsets = Vec::with_capacity(dims.len());
        let mut total = 0;
        for w in dims.windows(2) {
            offsets.push(total);
            total += (w[0] + 1) * w[1];
        }
        offsets.push(total);
        DenseNet { name, dims: dims.to_vec(), activations: activations.to_vec(), params: vec![0.0; total], offsets }
    }

    /// Kaiming-uniform weights, zero biases.
    pub fn kaiming<R: Rng>(mut self, rng: &mut R) -> Self {
        for l in 0..self.num_layers() {
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            let bound = (6.0 / i.max(1) as Real).sqrt();
            let w = self.offsets[l];
            for p in &mut self.params[w..w + i * o] {
                *p = rng.random_range(-bound..bound);
            }
        }
        self
    }

    pub fn zero_last_layer(mut self) -> Self {
        let l = self.num_layers() - 1;
        let (a, b) = (self.offsets[l], self.offsets[l + 1]);
        self.params[a..b].iter_mut().for_each(|p| *p = 0.0);
        self
    }

    /// Weights then biases of layer `l`.
    pub fn layer_params_mut(&mut self, l: usize) -> &mut [Real] {
        let (a, b) = (self.offsets[l], self.offsets[l + 1]);
        &mut self.params[a..b]
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.dims[0]
    }

    pub fn output_width(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: &[Real]) -> Result<(), NetError> {
        if params.len() != self.params.len() {
            return Err(NetError::ParamCount { expected: self.params.len(), got: params.len() });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn check_input(&self, input: &[Real], rows: usize) -> Result<(), NetError> {
        if input.len() != rows * self.input_width() {
            return Err(NetError::InputWidth {
                net: self.name,
                expected: self.input_width(),
                got: if rows == 0 { input.len() } else { input.len() / rows },
            });
        }
        Ok(())
    }

    fn layer_forward(&self, l: usize, x: &[Real], rows: usize) -> Vec<Real> {
        let (i, o) = (self.dims[l], self.dims[l + 1]);
        let w = &self.params[self.offsets[l]..self.offsets[l] + i * o];
        let b = &self.params[self.offsets[l] + i * o..self.offsets[l + 1]];
        let act = self.activations[l];
        let mut y = vec![0.0; rows * o];
        for r in 0..rows {
            let xr = &x[r * i..(r + 1) * i];
            let yr = &mut y[r * o..(r + 1) * o];
            for (k, out) in yr.iter_mut().enumerate() {
                let wk = &w[k * i..(k + 1) * i];
                let mut acc = b[k];
                for (a, c) in wk.iter().zip(xr) {
                    acc += a * c;
                }
                *out = act.apply(acc);
            }
        }
        y
    }

    fn forward_block(&self, input: &[Real], rows: usize) -> Vec<Vec<Real>> {
        let mut values = Vec::with_capacity(self.dims.len());
        values.push(input.to_vec());
        for l in 0..self.num_layers() {
            let y = self.layer_forward(l, values.last().unwrap(), rows);
            values.push(y);
        }
        values
    }

    /// Forward pass for a single input vector, optionally recording a tape.
    pub fn forward(&self, input: &[Real], tape: Option<&mut Tape>) -> Result<Vec<Real>, NetError> {
        let (out, t) = self.forward_batch(input, 1)?;
        if let Some(slot) = tape {
            *slot = t;
        }
        Ok(out)
    }

    /// Forward pass over `rows` row-major inputs.
    pub fn forward_batch(&self, input: &[Real], rows: usize) -> Result<(Vec<Real>, Tape), NetError> {
        self.check_input(input, rows)?;
        let iw = self.input_width();
        let blocks: Vec<Vec<Vec<Real>>> = if rows <= BLOCK_ROWS {
            vec![self.forward_block(input, rows)]
        } else {
            input
                .par_chunks(BLOCK_ROWS * iw)
                .map(|chunk| self.forward_block(chunk, chunk.len() / iw))
                .collect()
        };
        let mut layer_values = vec![Vec::new(); self.dims.len()];
        for block in blocks {
            for (dst, src) in layer_values.iter_mut().zip(block) {
                dst.extend(src);
            }
        }
        let out = layer_values.last().unwrap().clone();
        Ok((out, Tape { rows, layer_values }))
    }

    fn backward_block(
        &self,
        values: &[&[Real]],
        grad_out: &[Real],
        rows: usize,
        grad_params: &mut [Real],
    ) -> Vec<Real> {
        let mut g = grad_out.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            let act = self.activations[l];
            let y = values[l + 1];
            for (gv, yv) in g.iter_mut().zip(y) {
                *gv *= act.derivative_from_output(*yv);
            }
            let x = values[l];
            let woff = self.offsets[l];
            let w = &self.params[woff..woff + i * o];
            let mut gx = vec![0.0; rows * i];
            {
                let (gw, gb) = grad_params[woff..self.offsets[l + 1]].split_at_mut(i * o);
                for r in 0..rows {
                    let xr = &x[r * i..(r + 1) * i];
                    let gr = &g[r * o..(r + 1) * o];
                    let gxr = &mut gx[r * i..(r + 1) * i];
                    for k in 0..o {
                        let d = gr[k];
                        if d == 0.0 {
                            continue;
                        }
                        gb[k] += d;
                        let gwk = &mut gw[k * i..(k + 1) * i];
                        let wk = &w[k * i..(k + 1) * i];
                        for c in 0..i {
                            gwk[c] += d * xr[c];
                            gxr[c] += d * wk[c];
                        }
                    }
                }
            }
            g = gx;
        }
        g
    }

    /// Reverse pass: accumulates parameter gradients into `grad_params` and
    /// returns the input gradient (rows x input width).
    pub fn backward(&self, tape: &Tape, grad_out: &[Real], grad_params: &mut [Real]) -> Vec<Real> {
        assert_eq!(grad_out.len(), tape.rows * self.output_width());
        assert_eq!(grad_params.len(), self.num_params());
        let rows = tape.rows;
        if rows <= BLOCK_ROWS {
            let views: Vec<&[Real]> = tape.layer_values.iter().map(|v| v.as_slice()).collect();
            return self.backward_block(&views, grad_out, rows, grad_params);
        }
        let nblocks = rows.div_ceil(BLOCK_ROWS);
        let ow = self.output_width();
        let partial: Vec<(Vec<Real>, Vec<Real>)> = (0..nblocks)
            .into_par_iter()
            .map(|b| {
                let r0 = b * BLOCK_ROWS;
                let r1 = (r0 + BLOCK_ROWS).min(rows);
                let views: Vec<&[Real]> = tape
                    .layer_values
                    .iter()
                    .zip(&self.dims)
                    .map(|(v, &w)| &v[r0 * w..r1 * w])
                    .collect();
                let mut gp = vec![0.0; self.num_params()];
                let gx = self.backward_block(&views, &grad_out[r0 * ow..r1 * ow], r1 - r0, &mut gp);
                (gx, gp)
            })
            .collect();
        let mut gx_all = Vec::with_capacity(rows * self.input_width());
        for (gx, gp) in partial {
            gx_all.extend(gx);
            for (a, b) in grad_params.iter_mut().zip(gp) {
                *a += b;
            }
        }
        gx_all
    }
}

/// Layer widths of the task networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetDims {
    pub skeleton_hidden: usize,
    pub skeleton_embed: usize,
    pub knn_hidden: usize,
    pub knn_embed: usize,
    pub point_hidden: usize,
    pub point_embed: usize,
    pub nonrigid_hidden: usize,
    pub lbs_hidden: usize,
    pub pose_hidden: usize,
}

impl Default for NetDims {
    fn default() -> Self {
        NetDims {
            skeleton_hidden: 128,
            skeleton_embed: 32,
            knn_hidden: 32,
            knn_embed: 16,
            point_hidden: 128,
            point_embed: 64,
            nonrigid_hidden: 128,
            lbs_hidden: 64,
            pose_hidden: 64,
        }
    }
}

/// Shapes of the conditioning tensors the networks consume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionShape {
    pub num_joints: usize,
    pub num_scales: usize,
    pub length: usize,
    pub tau: usize,
}

impl ConditionShape {
    pub fn skeleton_width(&self) -> usize {
        self.num_scales * self.length * self.num_joints * 3
    }

    pub fn steps(&self) -> usize {
        self.num_scales * self.length
    }

    pub fn nonrigid_width(&self, dims: &NetDims) -> usize {
        3 + self.num_joints * 3 + dims.skeleton_embed + dims.point_embed
    }
}

/// Output width of the non-rigid head: dx (3), ds (3), dr (4).
pub const DEFORM_WIDTH: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskNets {
    pub shape: ConditionShape,
    pub dims: NetDims,
    pub skeleton: DenseNet,
    pub knn: DenseNet,
    pub point: DenseNet,
    pub nonrigid: DenseNet,
    pub lbs: DenseNet,
    pub pose: DenseNet,
}

impl TaskNets {
    /// Kaiming-uniform hidden layers and zero final layers, so the whole
    /// deformation stack starts as the identity map.
    pub fn new(shape: ConditionShape, dims: NetDims, seed: u64) -> Self {
        use Activation::*;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k3 = shape.num_joints * 3;
        let skeleton = DenseNet::new(
            "skeleton",
            &[shape.skeleton_width(), dims.skeleton_hidden, dims.skeleton_embed],
            &[Relu, None],
        )
        .kaiming(&mut rng)
        .zero_last_layer();
        let knn = DenseNet::new("knn", &[shape.tau * 3, dims.knn_hidden, dims.knn_embed], &[Relu, None])
            .kaiming(&mut rng)
            .zero_last_layer();
        let point = DenseNet::new(
            "point",
            &[shape.steps() * dims.knn_embed, dims.point_hidden, dims.point_embed],
            &[Relu, None],
        )
        .kaiming(&mut rng)
        .zero_last_layer();
        let nonrigid = DenseNet::new(
            "nonrigid",
            &[shape.nonrigid_width(&dims), dims.nonrigid_hidden, DEFORM_WIDTH],
            &[Relu, None],
        )
        .kaiming(&mut rng)
        .zero_last_layer();
        let lbs = DenseNet::new("lbs", &[3, dims.lbs_hidden, shape.num_joints], &[Relu, None])
            .kaiming(&mut rng)
            .zero_last_layer();
        let pose = DenseNet::new("pose", &[k3, dims.pose_hidden, k3], &[Relu, Tanh])
            .kaiming(&mut rng)
            .zero_last_layer();
        TaskNets { shape, dims, skeleton, knn, point, nonrigid, lbs, pose }
    }

    pub fn nets(&self) -> [&DenseNet; 6] {
        [&self.skeleton, &self.knn, &self.point, &self.nonrigid, &self.lbs, &self.pose]
    }

    pub fn nets_mut(&mut self) -> [&mut DenseNet; 6] {
        [
            &mut self.skeleton,
            &mut self.knn,
            &mut self.point,
            &mut self.nonrigid,
            &mut self.lbs,
            &mut self.pose,
        ]
    }
}

/// Per-frame skeleton embedding shared by all Gaussians plus per-Gaussian
/// point embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbeddings {
    pub skeleton: Vec<Real>,
    /// Row-major `n x point_embed`.
    pub point: Vec<Real>,
    pub point_width: usize,
}

impl ConditionEmbeddings {
    pub fn zeros(n: usize, dims: &NetDims) -> Self {
        ConditionEmbeddings {
            skeleton: vec![0.0; dims.skeleton_embed],
            point: vec![0.0; n * dims.point_embed],
            point_width: dims.point_embed,
        }
    }

    pub fn len(&self) -> usize {
        if self.point_width == 0 {
            0
        } else {
            self.point.len() / self.point_width
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[f_skel || f_point_i]`.
    pub fn condition(&self, i: usize) -> Vec<Real> {
        let mut row = self.skeleton.clone();
        row.extend_from_slice(&self.point[i * self.point_width..(i + 1) * self.point_width]);
        row
    }
}

pub fn encode_skeleton_motion(net: &DenseNet, seq: &SkeletonMotionSeq) -> Result<(Vec<Real>, Tape), NetError> {
    if seq.data.len() != net.input_width() {
        return Err(NetError::Shape {
            what: "skeleton motion",
            expected: vec![net.input_width()],
            got: seq.shape().to_vec(),
        });
    }
    net.forward_batch(&seq.data, 1)
}

/// Tapes of the two-stage point encoder.
#[derive(Debug, Clone, Default)]
pub struct PointEncoderTape {
    pub knn: Tape,
    pub point: Tape,
}

/// `E_knn` per Gaussian and history step, concatenated over steps, then `E_V`.
pub fn encode_point_motion(
    knn: &DenseNet,
    point: &DenseNet,
    pm: &PointMotionSeq,
) -> Result<(Vec<Real>, PointEncoderTape), NetError> {
    let steps = pm.num_scales * pm.length;
    if pm.tau * 3 != knn.input_width() || steps * knn.output_width() != point.input_width() {
        return Err(NetError::Shape {
            what: "point motion",
            expected: vec![point.input_width() / knn.output_width().max(1), knn.input_width() / 3],
            got: vec![pm.num_points, pm.num_scales, pm.length, pm.tau, 3],
        });
    }
    let (local, knn_tape) = knn.forward_batch(&pm.data, pm.num_points * steps)?;
    let (out, point_tape) = point.forward_batch(&local, pm.num_points)?;
    Ok((out, PointEncoderTape { knn: knn_tape, point: point_tape }))
}

/// Input gradient of the point encoder with respect to the gathered
/// velocities; parameter gradients accumulate into the two buffers.
pub fn encode_point_motion_backward(
    knn: &DenseNet,
    point: &DenseNet,
    tape: &PointEncoderTape,
    grad_out: &[Real],
    grad_knn: &mut [Real],
    grad_point: &mut [Real],
) -> Vec<Real> {
    let g_local = point.backward(&tape.point, grad_out, grad_point);
    knn.backward(&tape.knn, &g_local, grad_knn)
}

/// Canonical Gaussians after the predicted non-rigid offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformedGaussians {
    pub positions: Vec<Vec3>,
    pub log_scales: Vec<Vec3>,
    pub rotations: Vec<Quat>,
    pub colors: Vec<Vec3>,
    pub opacities: Vec<Real>,
}

impl DeformedGaussians {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn scale(&self, i: usize) -> Vec3 {
        self.log_scales[i].map(Real::exp)
    }
}

/// Rows `[x || flat(P) || f_skel || f_point_i]` for the non-rigid head.
pub fn nonrigid_inputs(
    positions: &[Vec3],
    pose: &Pose,
    emb: &ConditionEmbeddings,
) -> Vec<Real> {
    let flat = pose.flat_rotations();
    let mut rows = Vec::with_capacity(positions.len() * (3 + flat.len() + emb.skeleton.len() + emb.point_width));
    for (i, x) in positions.iter().enumerate() {
        rows.extend_from_slice(&[x.x, x.y, x.z]);
        rows.extend_from_slice(&flat);
        rows.extend(emb.condition(i));
    }
    rows
}

/// Applies `x' = x + dx`, `log s' = log s + ds`, `r' = r * normalize(1 + dr)`.
pub fn apply_deformation(
    set: &crate::gaussians::GaussianSet,
    deltas: &[Real],
) -> Result<DeformedGaussians, NetError> {
    let n = set.len();
    let mut out = DeformedGaussians {
        positions: Vec::with_capacity(n),
        log_scales: Vec::with_capacity(n),
        rotations: Vec::with_capacity(n),
        colors: set.colors.clone(),
        opacities: (0..n).map(|i| set.opacity(i)).collect(),
    };
    for i in 0..n {
        let d = &deltas[i * DEFORM_WIDTH..(i + 1) * DEFORM_WIDTH];
        if d.iter().any(|v| !v.is_finite()) {
            return Err(NetError::NonFinite { index: i, values: d.to_vec() });
        }
        out.positions.push(set.positions[i] + Vec3::new(d[0], d[1], d[2]));
        out.log_scales.push(set.log_scales[i] + Vec3::new(d[3], d[4], d[5]));
        let dq = Quat::new(1.0 + d[6], d[7], d[8], d[9]).normalized();
        out.rotations.push(quat_mul(set.rotations[i].normalized(), dq));
    }
    Ok(out)
}

/// Gradients of the canonical parameters touched by [`apply_deformation`].
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationGrads {
    pub positions: Vec<Vec3>,
    pub log_scales: Vec<Vec3>,
    pub rotations: Vec<Quat>,
    /// `n x DEFORM_WIDTH`, the gradient at the head's output.
    pub deltas: Vec<Real>,
}

pub fn apply_deformation_backward(
    set: &crate::gaussians::GaussianSet,
    deltas: &[Real],
    d_positions: &[Vec3],
    d_log_scales: &[Vec3],
    d_rotations: &[Quat],
) -> DeformationGrads {
    let n = set.len();
    let mut g = DeformationGrads {
        positions: d_positions.to_vec(),
        log_scales: d_log_scales.to_vec(),
        rotations: Vec::with_capacity(n),
        deltas: vec![0.0; n * DEFORM_WIDTH],
    };
    for i in 0..n {
        let d = &deltas[i * DEFORM_WIDTH..(i + 1) * DEFORM_WIDTH];
        let gd = &mut g.deltas[i * DEFORM_WIDTH..(i + 1) * DEFORM_WIDTH];
        gd[0..3].copy_from_slice(d_positions[i].as_slice());
        gd[3..6].copy_from_slice(d_log_scales[i].as_slice());
        let raw = Quat::new(1.0 + d[6], d[7], d[8], d[9]);
        let r = set.rotations[i];
        let (g_rn, g_dn) = quat_mul_backward(r.normalized(), raw.normalized(), d_rotations[i]);
        g.rotations.push(r.normalize_backward(g_rn));
        gd[6..10].copy_from_slice(&raw.normalize_backward(g_dn).to_array());
    }
    g
}

/// Forward state of the skinning-weight correction.
#[derive(Debug, Clone)]
pub struct LbsWeightsTape {
    pub net: Tape,
    /// `max(base + offset, 0) + 1e-8`, row-major n x K.
    shifted: Vec<Real>,
    active: Vec<bool>,
}

/// `normalize(max(base + E_lbs(x), 0) + 1e-8)` row-wise.
pub fn lbs_weight_offsets(
    net: &DenseNet,
    positions: &[Vec3],
    base: &[Real],
) -> Result<(Vec<Real>, LbsWeightsTape), NetError> {
    let k = net.output_width();
    let n = positions.len();
    if base.len() != n * k {
        return Err(NetError::Shape { what: "base weights", expected: vec![n, k], got: vec![base.len()] });
    }
    let input: Vec<Real> = positions.iter().flat_map(|x| [x.x, x.y, x.z]).collect();
    let (offsets, tape) = net.forward_batch(&input, n)?;
    let mut shifted = vec![0.0; n * k];
    let mut active = vec![false; n * k];
    let mut weights = vec![0.0; n * k];
    for i in 0..n {
        let row = i * k..(i + 1) * k;
        let mut sum = 0.0;
        for j in row.clone() {
            let v = base[j] + offsets[j];
            active[j] = v > 0.0;
            shifted[j] = v.max(0.0) + 1e-8;
            sum += shifted[j];
        }
        for j in row {
            weights[j] = shifted[j] / sum;
        }
    }
    Ok((weights, LbsWeightsTape { net: tape, shifted, active }))
}

/// Accumulates `E_lbs` parameter gradients; returns the gradient with respect
/// to the canonical positions fed to the network.
pub fn lbs_weight_offsets_backward(
    net: &DenseNet,
    tape: &LbsWeightsTape,
    grad_weights: &[Real],
    grad_params: &mut [Real],
) -> Vec<Vec3> {
    let k = net.output_width();
    let n = tape.net.rows();
    let mut g_off = vec![0.0; n * k];
    for i in 0..n {
        let row = i * k..(i + 1) * k;
        let sum: Real = tape.shifted[row.clone()].iter().sum();
        let dot: Real = row.clone().map(|j| grad_weights[j] * tape.shifted[j] / sum).sum();
        for j in row {
            if tape.active[j] {
                g_off[j] = (grad_weights[j] - dot) / sum;
            }
        }
    }
    let gx = net.backward(&tape.net, &g_off, grad_params);
    gx.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

/// `P + 0.1 * tanh(E_pose(flat P))` on joint rotations; the root translation
/// passes through.
pub fn pose_refine(net: &DenseNet, pose: &Pose) -> Result<(Pose, Tape), NetError> {
    let (out, tape) = net.forward_batch(&pose.flat_rotations(), 1)?;
    let joint_rotations = pose
        .joint_rotations
        .iter()
        .enumerate()
        .map(|(j, t)| t + Vec3::new(out[3 * j], out[3 * j + 1], out[3 * j + 2]) * POSE_RESIDUAL_SCALE)
        .collect();
    Ok((Pose { joint_rotations, root_translation: pose.root_translation }, tape))
}

/// Returns the gradient with respect to the input pose rotations (through
/// both the identity path and the network input).
pub fn pose_refine_backward(net: &DenseNet, tape: &Tape, grad_refined: &[Vec3], grad_params: &mut [Real]) -> Vec<Vec3> {
    let g_out: Vec<Real> = grad_refined.iter().flat_map(|g| [g.x, g.y, g.z]).map(|v| v * POSE_RESIDUAL_SCALE).collect();
    let g_in = net.backward(tape, &g_out, grad_params);
    grad_refined
        .iter()
        .enumerate()
        .map(|(j, g)| g + Vec3::new(g_in[3 * j], g_in[3 * j + 1], g_in[3 * j + 2]))
        .collect()
}
