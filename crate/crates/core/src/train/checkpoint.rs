//! Checkpoints: a JSON manifest plus one 32-bit float blob per Gaussian field
//! and per network. The manifest is written last, so a directory with a
//! manifest is complete.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blob;
use crate::gaussians::GaussianSet;
use crate::nets::{ConditionShape, NetDims, TaskNets};
use crate::pipeline::Model;
use crate::train::config::TrainConfig;

pub const MANIFEST: &str = "manifest.json";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {msg}")]
    Invalid { path: PathBuf, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobEntry {
    name: String,
    file: String,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    iteration: usize,
    config_hash: String,
    config: TrainConfig,
    shape: ConditionShape,
    net_dims: NetDims,
    num_gaussians: usize,
    revision: u64,
    gaussians: Vec<BlobEntry>,
    nets: Vec<BlobEntry>,
}

/// A trained (or freshly initialised) model with the configuration that
/// produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: usize,
    pub config: TrainConfig,
    pub model: Model,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<(), CheckpointError> {
        fs::create_dir_all(dir).map_err(|source| CheckpointError::Io { path: dir.into(), source })?;
        let write = |name: &str, values: &[crate::Real]| -> Result<BlobEntry, CheckpointError> {
            let file = format!("{name}.bin");
            let path = dir.join(&file);
            blob::write_f32_blob(&path, values).map_err(|source| CheckpointError::Io { path, source })?;
            Ok(BlobEntry { name: name.into(), file, len: values.len() })
        };
        let set = &self.model.gaussians;
        let gaussians = set.fields().into_iter().map(|(name, v)| write(name, &v)).collect::<Result<Vec<_>, _>>()?;
        let nets = self
            .model
            .nets
            .nets()
            .iter()
            .map(|n| write(&format!("net_{}", n.name), &n.params))
            .collect::<Result<Vec<_>, _>>()?;
        let manifest = Manifest {
            version: VERSION,
            iteration: self.iteration,
            config_hash: self.config.hash(),
            config: self.config.clone(),
            shape: self.model.nets.shape,
            net_dims: self.model.nets.dims.clone(),
            num_gaussians: set.len(),
            revision: set.revision,
            gaussians,
            nets,
        };
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        blob::write_atomic(&path, text.as_bytes()).map_err(|source| CheckpointError::Io { path, source })
    }

    /// Loads from a checkpoint directory or from its manifest file.
    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let dir = if path.is_dir() { path.to_path_buf() } else { path.parent().unwrap_or(Path::new(".")).to_path_buf() };
        let mpath = dir.join(MANIFEST);
        let bytes = fs::read(&mpath).map_err(|source| CheckpointError::Io { path: mpath.clone(), source })?;
        let m: Manifest =
            serde_json::from_slice(&bytes).map_err(|source| CheckpointError::Json { path: mpath.clone(), source })?;
        let invalid = |msg: String| CheckpointError::Invalid { path: mpath.clone(), msg };
        if m.version != VERSION {
            return Err(invalid(format!("unsupported checkpoint version {}", m.version)));
        }
        if m.config.hash() != m.config_hash {
            return Err(invalid("config hash does not match the stored config".into()));
        }
        let read = |e: &BlobEntry, expected: usize| -> Result<Vec<crate::Real>, CheckpointError> {
            if e.len != expected {
                return Err(invalid(format!("{} holds {} values, expected {expected}", e.name, e.len)));
            }
            let path = dir.join(&e.file);
            blob::read_f32_blob(&path, expected).map_err(|source| CheckpointError::Io { path, source })
        };
        let field = |name: &str| -> Result<Vec<crate::Real>, CheckpointError> {
            let e = m.gaussians.iter().find(|e| e.name == name).ok_or_else(|| invalid(format!("missing field {name}")))?;
            let width = GaussianSet::field_width(name).expect("known field");
            read(e, m.num_gaussians * width)
        };
        let gaussians = GaussianSet::from_fields(
            &field("positions")?,
            &field("log_scales")?,
            &field("rotations")?,
            &field("colors")?,
            &field("opacity_logits")?,
            m.revision,
        );
        let mut nets = TaskNets::new(m.shape, m.net_dims.clone(), m.config.seed);
        for net in nets.nets_mut() {
            let name = format!("net_{}", net.name);
            let e = m.nets.iter().find(|e| e.name == name).ok_or_else(|| invalid(format!("missing network {name}")))?;
            let params = read(e, net.num_params())?;
            net.set_params(&params).map_err(|e| invalid(e.to_string()))?;
        }
        Ok(Checkpoint { iteration: m.iteration, config: m.config, model: Model { gaussians, nets } })
    }

    /// The same checkpoint after a save/load round trip.
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        let q = |v: &mut crate::Real| *v = blob::quantize(*v);
        let g = &mut out.model.gaussians;
        for x in g.positions.iter_mut().chain(&mut g.log_scales).chain(&mut g.colors) {
            x.iter_mut().for_each(q);
        }
        for r in &mut g.rotations {
            *r = crate::geometry::Quat::from_array(r.to_array().map(blob::quantize));
        }
        g.opacity_logits.iter_mut().for_each(q);
        for net in out.model.nets.nets_mut() {
            net.params.iter_mut().for_each(q);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{make_synthetic_body, BodyRecipe};
    use crate::gaussians::init_from_template;

    fn sample() -> Checkpoint {
        let tpl = make_synthetic_body(&BodyRecipe::chain(3, 0.3, 0.05, 2, 6), 1).unwrap();
        let config = TrainConfig::default();
        let shape = ConditionShape { num_joints: 3, num_scales: 3, length: 8, tau: 8 };
        let mut nets = TaskNets::new(shape, config.net_dims.clone(), 5);
        nets.nonrigid.params.iter_mut().enumerate().for_each(|(i, p)| *p += 1e-3 * i as crate::Real);
        let mut gaussians = init_from_template(&tpl);
        gaussians.revision = 4;
        Checkpoint { iteration: 12, config, model: Model { gaussians, nets } }
    }

    #[test]
    fn round_trip_equals_quantized_model() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back, ck.quantized());
        let via_file = Checkpoint::load(&dir.path().join(MANIFEST)).unwrap();
        assert_eq!(via_file, back);
        assert!(!dir.path().join("manifest.json.tmp").exists());
    }

    #[test]
    fn tampered_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path()).unwrap();
        let p = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&p).unwrap().replacen("\"iterations\": 3000", "\"iterations\": 3001", 1);
        fs::write(&p, text).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(CheckpointError::Invalid { .. })));
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path()).unwrap();
        let p = dir.path().join("colors.bin");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(Checkpoint::load(dir.path()).is_err());
    }
}
