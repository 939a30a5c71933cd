//! Per-view PSNR/SSIM over a camera split, on frames whose sampled history
//! never reaches before the first frame.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Serialize, Serializer};

use crate::blob;
use crate::datagen::{Dataset, Split};
use crate::pipeline::Model;
use crate::train::config::TrainConfig;
use crate::train::loss::{psnr, ssim_metric};
use crate::train::{Conditioner, TrainError};
use crate::Real;

/// Finite numbers as JSON numbers, infinities and NaN as strings.
fn metric<S: Serializer>(v: &Real, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v as f64)
    } else {
        s.serialize_str(&v.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub frame: usize,
    pub camera: usize,
    #[serde(serialize_with = "metric")]
    pub psnr: Real,
    #[serde(serialize_with = "metric")]
    pub ssim: Real,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub split: String,
    pub frames: Vec<usize>,
    pub cameras: Vec<usize>,
    pub rows: Vec<EvalRow>,
    /// NaN for an empty table.
    #[serde(serialize_with = "metric")]
    pub mean_psnr: Real,
    #[serde(serialize_with = "metric")]
    pub mean_ssim: Real,
}

impl EvalReport {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,camera,psnr,ssim\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{}", r.frame, r.camera, r.psnr, r.ssim).expect("string write");
        }
        s
    }

    /// Writes `path` as JSON and the table next to it with a `.csv`
    /// extension.
    pub fn write(&self, path: &Path) -> Result<(), TrainError> {
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        blob::write_atomic(path, json.as_bytes()).map_err(|source| TrainError::Io { path: path.into(), source })?;
        let csv = path.with_extension("csv");
        blob::write_atomic(&csv, self.to_csv().as_bytes()).map_err(|source| TrainError::Io { path: csv.clone(), source })
    }
}

/// Frames evaluated for `cfg`: every frame from the first one whose full
/// multi-scale history is available.
pub fn eval_frames(cfg: &TrainConfig, data: &Dataset) -> Result<Vec<usize>, TrainError> {
    let start = data.manifest.first_frame + cfg.warmup_frames()?;
    Ok(data.frames().filter(|&t| t >= start).collect())
}

/// Renders every camera of `split` at every evaluation frame.
pub fn evaluate(model: &Model, cfg: &TrainConfig, data: &Dataset, split: Split) -> Result<EvalReport, TrainError> {
    let frames = eval_frames(cfg, data)?;
    let cameras = data.cameras_in(split).to_vec();
    let cond = Conditioner::new(cfg, data, model)?;
    let (w, h) = (data.manifest.width as usize, data.manifest.height as usize);
    let mut rows = Vec::with_capacity(frames.len() * cameras.len());
    for &t in &frames {
        for &c in &cameras {
            let out = cond.render(cfg, data, model, t, &data.cameras[c])?;
            let gt = data.image(c, t)?;
            rows.push(EvalRow { frame: t, camera: c, psnr: psnr(&out.image, &gt)?, ssim: ssim_metric(&out.image, &gt, w, h)? });
        }
    }
    let n = rows.len() as Real;
    let (mean_psnr, mean_ssim) = if rows.is_empty() {
        (Real::NAN, Real::NAN)
    } else {
        (rows.iter().map(|r| r.psnr).sum::<Real>() / n, rows.iter().map(|r| r.ssim).sum::<Real>() / n)
    };
    let split = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    Ok(EvalReport { split: split.into(), frames, cameras, rows, mean_psnr, mean_ssim })
}
