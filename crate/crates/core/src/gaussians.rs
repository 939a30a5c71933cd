//! Canonical Gaussian primitives: storage, covariance construction, template
//! initialization and adaptive density control.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::body::BodyTemplate;
use crate::geometry::{Mat3, Quat, Vec3};
use crate::motion::knn_in;
use crate::Real;

/// Scales are kept inside `(MIN_SCALE, MAX_SCALE)`.
pub const MIN_SCALE: Real = 1e-7;
pub const MAX_SCALE: Real = 10.0;

pub fn sigmoid(x: Real) -> Real {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: Real) -> Real {
    (p / (1.0 - p)).ln()
}

/// `R diag(s^2) R^T` for a unit quaternion `r`.
pub fn build_covariance(s: &Vec3, r: &Quat) -> Mat3 {
    let m = r.to_matrix() * Mat3::from_diagonal(s);
    m * m.transpose()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet {
    pub positions: Vec<Vec3>,
    pub log_scales: Vec<Vec3>,
    pub rotations: Vec<Quat>,
    /// Degree-0 color, linear RGB.
    pub colors: Vec<Vec3>,
    pub opacity_logits: Vec<Real>,
    /// Bumped whenever positions are replaced wholesale (densification,
    /// neighbour refresh), so cached neighbour lists can detect staleness.
    pub revision: u64,
}

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn scale(&self, i: usize) -> Vec3 {
        self.log_scales[i].map(Real::exp)
    }

    pub fn opacity(&self, i: usize) -> Real {
        sigmoid(self.opacity_logits[i])
    }

    pub fn covariance(&self, i: usize) -> Mat3 {
        build_covariance(&self.scale(i), &self.rotations[i].normalized())
    }

    /// Restores the storage invariants after an unconstrained update.
    pub fn enforce_invariants(&mut self) {
        let (lo, hi) = ((MIN_SCALE * 1.000_001).ln(), (MAX_SCALE * 0.999_999).ln());
        for q in &mut self.rotations {
            let n = q.norm();
            *q = if n > 1e-12 && n.is_finite() { q.scale(1.0 / n) } else { Quat::IDENTITY };
        }
        for s in &mut self.log_scales {
            *s = s.map(|v| v.clamp(lo, hi));
        }
        for c in &mut self.colors {
            *c = c.map(|v| v.clamp(0.0, 1.0));
        }
        for o in &mut self.opacity_logits {
            *o = o.clamp(-20.0, 20.0);
        }
    }

    fn push_from(&mut self, src: &GaussianSet, i: usize) {
        self.positions.push(src.positions[i]);
        self.log_scales.push(src.log_scales[i]);
        self.rotations.push(src.rotations[i]);
        self.colors.push(src.colors[i]);
        self.opacity_logits.push(src.opacity_logits[i]);
    }

    fn empty(revision: u64) -> Self {
        GaussianSet {
            positions: Vec::new(),
            log_scales: Vec::new(),
            rotations: Vec::new(),
            colors: Vec::new(),
            opacity_logits: Vec::new(),
            revision,
        }
    }

    /// Named flat views of every field, in checkpoint order.
    pub fn fields(&self) -> Vec<(&'static str, Vec<Real>)> {
        let v3 = |v: &[Vec3]| v.iter().flat_map(|x| [x.x, x.y, x.z]).collect::<Vec<_>>();
        vec![
            ("positions", v3(&self.positions)),
            ("log_scales", v3(&self.log_scales)),
            ("rotations", self.rotations.iter().flat_map(|q| q.to_array()).collect()),
            ("colors", v3(&self.colors)),
            ("opacity_logits", self.opacity_logits.clone()),
        ]
    }

    pub fn field_width(name: &str) -> Option<usize> {
        match name {
            "positions" | "log_scales" | "colors" => Some(3),
            "rotations" => Some(4),
            "opacity_logits" => Some(1),
            _ => None,
        }
    }

    /// Inverse of [`GaussianSet::fields`].
    pub fn from_fields(
        positions: &[Real],
        log_scales: &[Real],
        rotations: &[Real],
        colors: &[Real],
        opacity_logits: &[Real],
        revision: u64,
    ) -> Self {
        let v3 = |v: &[Real]| v.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
        GaussianSet {
            positions: v3(positions),
            log_scales: v3(log_scales),
            rotations: rotations.chunks_exact(4).map(|c| Quat::new(c[0], c[1], c[2], c[3])).collect(),
            colors: v3(colors),
            opacity_logits: opacity_logits.to_vec(),
            revision,
        }
    }
}

/// One Gaussian per template vertex: isotropic scale equal to the mean
/// distance to the three nearest other vertices, identity rotation, mid-grey,
/// opacity 0.1.
pub fn init_from_template(tpl: &BodyTemplate) -> GaussianSet {
    let n = tpl.num_vertices();
    let mut set = GaussianSet::empty(0);
    for (i, x) in tpl.vertices.iter().enumerate() {
        let want = 3.min(n.saturating_sub(1));
        let nbrs = knn_in(&tpl.vertices, x, (want + 1).min(n)).expect("tau <= n");
        let dists: Vec<Real> = nbrs
            .iter()
            .filter(|&&j| j != i)
            .take(want)
            .map(|&j| (tpl.vertices[j] - x).norm())
            .collect();
        let mean = if dists.is_empty() { 0.01 } else { dists.iter().sum::<Real>() / dists.len() as Real };
        let s = mean.clamp(MIN_SCALE * 1.01, MAX_SCALE * 0.99);
        set.positions.push(*x);
        set.log_scales.push(Vec3::repeat(s.ln()));
        set.rotations.push(Quat::IDENTITY);
        set.colors.push(Vec3::repeat(0.5));
        set.opacity_logits.push(logit(0.1));
    }
    set
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensifyOptions {
    /// Mean screen-space (NDC) positional gradient that triggers densification.
    pub grad_threshold: Real,
    /// Gaussians larger than this fraction of the scene extent are split,
    /// smaller ones cloned.
    pub percent_dense: Real,
    pub min_opacity: Real,
    /// Absolute largest scale kept; larger Gaussians are pruned.
    pub max_scale: Real,
    /// Optimizer steps between densification events.
    pub interval: usize,
    /// Densification stops after this fraction of the iterations.
    pub until_fraction: Real,
    pub enabled: bool,
}

impl Default for DensifyOptions {
    fn default() -> Self {
        DensifyOptions {
            grad_threshold: 2e-4,
            percent_dense: 0.01,
            min_opacity: 0.005,
            max_scale: 0.5,
            interval: 300,
            until_fraction: 0.6,
            enabled: true,
        }
    }
}

/// New set plus, for each new Gaussian, the index of the Gaussian it came
/// from (so per-Gaussian optimizer state can follow it).
#[derive(Debug, Clone)]
pub struct DensifyOutcome {
    pub set: GaussianSet,
    pub origin: Vec<usize>,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Clones small high-gradient Gaussians, splits large ones into two children
/// with scales divided by 1.6, then prunes transparent or oversized ones.
pub fn densify_and_prune<R: Rng>(
    set: &GaussianSet,
    grad_accum: &[Real],
    scene_extent: Real,
    opts: &DensifyOptions,
    rng: &mut R,
) -> DensifyOutcome {
    assert_eq!(grad_accum.len(), set.len(), "one gradient statistic per Gaussian");
    let mut out = GaussianSet::empty(set.revision + 1);
    let mut origin = Vec::with_capacity(set.len());
    let mut extra = GaussianSet::empty(0);
    let mut extra_origin = Vec::new();
    let (mut cloned, mut split) = (0, 0);
    let big_threshold = opts.percent_dense * scene_extent;
    for i in 0..set.len() {
        let hot = grad_accum[i] >= opts.grad_threshold;
        let scale = set.scale(i);
        if !hot {
            out.push_from(set, i);
            origin.push(i);
            continue;
        }
        let rot = set.rotations[i].normalized().to_matrix();
        let sample = |rng: &mut R| {
            let z = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
            set.positions[i] + rot * scale.component_mul(&z)
        };
        if scale.max() > big_threshold {
            split += 1;
            for _ in 0..2 {
                extra.push_from(set, i);
                let last = extra.len() - 1;
                extra.positions[last] = sample(rng);
                extra.log_scales[last] = set.log_scales[i].map(|v| v - (1.6 as Real).ln());
                extra_origin.push(i);
            }
        } else {
            cloned += 1;
            out.push_from(set, i);
            origin.push(i);
            extra.push_from(set, i);
            let last = extra.len() - 1;
            extra.positions[last] = sample(rng);
            extra_origin.push(i);
        }
    }
    for j in 0..extra.len() {
        out.push_from(&extra, j);
    }
    origin.extend(extra_origin);

    let keep: Vec<bool> = (0..out.len())
        .map(|i| out.opacity(i) >= opts.min_opacity && out.scale(i).max() <= opts.max_scale)
        .collect();
    let pruned = keep.iter().filter(|k| !**k).count();
    let mut kept = GaussianSet::empty(out.revision);
    let mut kept_origin = Vec::with_capacity(out.len() - pruned);
    for i in (0..out.len()).filter(|&i| keep[i]) {
        kept.push_from(&out, i);
        kept_origin.push(origin[i]);
    }
    DensifyOutcome { set: kept, origin: kept_origin, cloned, split, pruned }
}

/// Radius of the bounding sphere of the template about its centroid.
pub fn scene_extent(points: &[Vec3]) -> Real {
    if points.is_empty() {
        return 1.0;
    }
    let c = points.iter().sum::<Vec3>() / points.len() as Real;
    points.iter().map(|p| (p - c).norm()).fold(0.0, Real::max).max(1e-6)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{make_synthetic_body, BodyRecipe};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_quat(rng: &mut ChaCha8Rng) -> Quat {
        Quat::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalized()
    }

    #[test]
    fn covariance_examples() {
        assert_eq!(build_covariance(&Vec3::repeat(1.0), &Quat::IDENTITY), Mat3::identity());
        assert_eq!(
            build_covariance(&Vec3::new(2.0, 1.0, 1.0), &Quat::IDENTITY),
            Mat3::from_diagonal(&Vec3::new(4.0, 1.0, 1.0))
        );
    }

    #[test]
    fn covariance_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let s = Vec3::new(rng.random_range(0.01..2.0), rng.random_range(0.01..2.0), rng.random_range(0.01..2.0));
            let r = rand_quat(&mut rng);
            let sigma = build_covariance(&s, &r);
            assert_eq!(sigma, sigma.transpose());
            let rm = r.to_matrix();
            let sm = Mat3::from_diagonal(&s);
            let oracle = rm * sm * sm.transpose() * rm.transpose();
            assert!((sigma - oracle).amax() < 1e-12);
            let eig = sigma.symmetric_eigenvalues();
            let floor = s.min() * s.min();
            assert!(eig.iter().all(|e| *e >= floor * (1.0 - 1e-9)));
            let q = rand_quat(&mut rng);
            let lhs = build_covariance(&s, &crate::geometry::quat_mul(q, r));
            let qm = q.to_matrix();
            assert!((lhs - qm * sigma * qm.transpose()).amax() < 1e-10);
        }
    }

    #[test]
    fn init_matches_template() {
        let tpl = make_synthetic_body(&BodyRecipe::torso_proxy(true), 1).unwrap();
        let set = init_from_template(&tpl);
        assert_eq!(set.len(), tpl.num_vertices());
        assert_eq!(set.positions, tpl.vertices);
        assert!((set.opacity(0) - 0.1).abs() < 1e-12);
        assert!(set.colors.iter().all(|c| *c == Vec3::repeat(0.5)));
        assert!(set.rotations.iter().all(|q| *q == Quat::IDENTITY));
    }

    #[test]
    fn init_two_vertex_toy() {
        let mut tpl = make_synthetic_body(&BodyRecipe::chain(2, 1.0, 0.1, 1, 1), 0).unwrap();
        tpl.vertices = vec![Vec3::zeros(), Vec3::new(0.0, 0.0, 0.25)];
        let set = init_from_template(&tpl);
        for i in 0..2 {
            assert!((set.scale(i) - Vec3::repeat(0.25)).amax() < 1e-12);
        }
    }

    #[test]
    fn init_scales_large_templates() {
        // 2 x 65 x 53 = 6890 and 5 x 5 x 419 = 10475 vertices
        for (k, rings, per_ring, n) in [(2, 65, 53, 6890), (5, 5, 419, 10475)] {
            let tpl = make_synthetic_body(&BodyRecipe::chain(k, 0.4, 0.1, rings, per_ring), 0).unwrap();
            assert_eq!(tpl.num_vertices(), n);
            assert_eq!(init_from_template(&tpl).len(), n);
        }
    }

    fn toy_set() -> GaussianSet {
        GaussianSet {
            positions: vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)],
            log_scales: vec![Vec3::repeat((0.05 as Real).ln()); 3],
            rotations: vec![Quat::IDENTITY; 3],
            colors: vec![Vec3::repeat(0.5); 3],
            opacity_logits: vec![logit(0.5); 3],
            revision: 4,
        }
    }

    #[test]
    fn densify_noop_bumps_revision() {
        let set = toy_set();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = densify_and_prune(&set, &[0.0; 3], 1.0, &DensifyOptions::default(), &mut rng);
        assert_eq!(out.set.positions, set.positions);
        assert_eq!(out.set.revision, 5);
        assert_eq!(out.origin, vec![0, 1, 2]);
    }

    #[test]
    fn densify_prunes_transparent() {
        let mut set = toy_set();
        set.opacity_logits[1] = logit(0.001);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = densify_and_prune(&set, &[0.0; 3], 1.0, &DensifyOptions::default(), &mut rng);
        assert_eq!(out.set.len(), 2);
        assert_eq!(out.origin, vec![0, 2]);
        assert_eq!(out.pruned, 1);
    }

    #[test]
    fn densify_clone_and_split_counts() {
        let set = toy_set();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let opts = DensifyOptions::default();
        // extent 1.0 -> split threshold 0.01 < 0.05: split
        let out = densify_and_prune(&set, &[1.0, 0.0, 0.0], 1.0, &opts, &mut rng);
        assert_eq!(out.set.len(), 4);
        assert_eq!(out.split, 1);
        assert_eq!(out.origin, vec![1, 2, 0, 0]);
        assert!((out.set.scale(2)[0] - 0.05 / 1.6).abs() < 1e-12);
        // extent 100 -> threshold 1.0 > 0.05: clone
        let out = densify_and_prune(&set, &[1.0, 0.0, 0.0], 100.0, &opts, &mut rng);
        assert_eq!(out.set.len(), 4);
        assert_eq!(out.cloned, 1);
        assert_eq!(out.set.positions[0], Vec3::zeros());
        assert!(out.set.positions[3].norm() < 0.5);
    }

    #[test]
    fn invariants_restored() {
        let mut set = toy_set();
        set.rotations[0] = Quat::new(2.0, 0.0, 0.0, 0.0);
        set.log_scales[1] = Vec3::repeat(100.0);
        set.colors[2] = Vec3::new(-1.0, 2.0, 0.5);
        set.enforce_invariants();
        assert!((set.rotations[0].norm() - 1.0).abs() < 1e-12);
        assert!(set.scale(1).max() < MAX_SCALE);
        assert_eq!(set.colors[2], Vec3::new(0.0, 1.0, 0.5));
    }

    #[test]
    fn fields_round_trip() {
        let set = toy_set();
        let f = set.fields();
        let back = GaussianSet::from_fields(&f[0].1, &f[1].1, &f[2].1, &f[3].1, &f[4].1, set.revision);
        assert_eq!(back, set);
    }
}
