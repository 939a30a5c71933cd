//! Photometric and mask losses with analytic gradients, and image metrics.
//!
//! Images are row-major `height x width x 3` linear RGB; alpha maps and masks
//! are row-major `height x width`.

use serde::{Deserialize, Serialize};

use crate::Real;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: Real = 1.5;
const C1: Real = 0.01 * 0.01;
const C2: Real = 0.03 * 0.03;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("{what}: {a} values vs {b} values")]
    Mismatch { what: &'static str, a: usize, b: usize },
    #[error("image {width}x{height} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")]
    TooSmall { width: usize, height: usize },
}

fn same_len(what: &'static str, a: &[Real], b: &[Real]) -> Result<(), LossError> {
    if a.len() != b.len() {
        return Err(LossError::Mismatch { what, a: a.len(), b: b.len() });
    }
    Ok(())
}

/// Mean absolute difference; the gradient uses `sign(0) = 0`.
pub fn loss_l1(image: &[Real], target: &[Real]) -> Result<(Real, Vec<Real>), LossError> {
    same_len("l1", image, target)?;
    let n = image.len().max(1) as Real;
    let mut sum = 0.0;
    let grad = image
        .iter()
        .zip(target)
        .map(|(a, b)| {
            let d = a - b;
            sum += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((sum / n, grad))
}

/// Mean squared difference between the rendered alpha map and the mask.
pub fn loss_mask(alpha: &[Real], mask: &[Real]) -> Result<(Real, Vec<Real>), LossError> {
    same_len("mask", alpha, mask)?;
    let n = alpha.len().max(1) as Real;
    let mut sum = 0.0;
    let grad = alpha
        .iter()
        .zip(mask)
        .map(|(a, b)| {
            let d = a - b;
            sum += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((sum / n, grad))
}

/// Normalized 1D Gaussian taps of the SSIM window.
pub fn gaussian_window() -> [Real; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as Real;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as Real - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: Real = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid correlation of a `h x w` plane.
fn filter_valid(src: &[Real], w: usize, h: usize, g: &[Real; SSIM_WINDOW]) -> Vec<Real> {
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, gk) in g.iter().enumerate() {
                acc += gk * src[y * w + x + k];
            }
            tmp[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, gk) in g.iter().enumerate() {
                acc += gk * tmp[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
fn filter_valid_adjoint(grad: &[Real], w: usize, h: usize, g: &[Real; SSIM_WINDOW]) -> Vec<Real> {
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..oh {
        for x in 0..ow {
            let v = grad[y * ow + x];
            for (k, gk) in g.iter().enumerate() {
                tmp[(y + k) * ow + x] += gk * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for (k, gk) in g.iter().enumerate() {
                out[y * w + x + k] += gk * v;
            }
        }
    }
    out
}

fn channel(image: &[Real], c: usize) -> Vec<Real> {
    image.iter().skip(c).step_by(3).copied().collect()
}

/// Mean SSIM over valid window positions and channels, with its gradient
/// with respect to `image`.
pub fn ssim(
    image: &[Real],
    target: &[Real],
    width: usize,
    height: usize,
    want_grad: bool,
) -> Result<(Real, Vec<Real>), LossError> {
    same_len("ssim", image, target)?;
    if image.len() != width * height * 3 {
        return Err(LossError::Mismatch { what: "ssim shape", a: image.len(), b: width * height * 3 });
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(LossError::TooSmall { width, height });
    }
    let g = gaussian_window();
    let positions = (width - SSIM_WINDOW + 1) * (height - SSIM_WINDOW + 1);
    let norm = 1.0 / (3 * positions) as Real;
    let mut total = 0.0;
    let mut grad = if want_grad { vec![0.0; image.len()] } else { Vec::new() };
    for c in 0..3 {
        let x = channel(image, c);
        let y = channel(target, c);
        let xx: Vec<Real> = x.iter().map(|v| v * v).collect();
        let yy: Vec<Real> = y.iter().map(|v| v * v).collect();
        let xy: Vec<Real> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let mx = filter_valid(&x, width, height, &g);
        let my = filter_valid(&y, width, height, &g);
        let exx = filter_valid(&xx, width, height, &g);
        let eyy = filter_valid(&yy, width, height, &g);
        let exy = filter_valid(&xy, width, height, &g);
        let mut d_mx = vec![0.0; positions];
        let mut d_exx = vec![0.0; positions];
        let mut d_exy = vec![0.0; positions];
        for p in 0..positions {
            let (ux, uy) = (mx[p], my[p]);
            let sxx = exx[p] - ux * ux;
            let syy = eyy[p] - uy * uy;
            let sxy = exy[p] - ux * uy;
            let a1 = 2.0 * ux * uy + C1;
            let a2 = 2.0 * sxy + C2;
            let b1 = ux * ux + uy * uy + C1;
            let b2 = sxx + syy + C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                d_mx[p] = norm * (2.0 * uy * (a2 - a1) / (b1 * b2) - 2.0 * ux * s * (1.0 / b1 - 1.0 / b2));
                d_exx[p] = norm * (-s / b2);
                d_exy[p] = norm * (2.0 * a1 / (b1 * b2));
            }
        }
        if want_grad {
            let ga = filter_valid_adjoint(&d_mx, width, height, &g);
            let gb = filter_valid_adjoint(&d_exx, width, height, &g);
            let gc = filter_valid_adjoint(&d_exy, width, height, &g);
            for i in 0..width * height {
                grad[3 * i + c] = ga[i] + 2.0 * x[i] * gb[i] + y[i] * gc[i];
            }
        }
    }
    Ok((total * norm, grad))
}

/// `1 - SSIM` and its gradient.
pub fn loss_ssim(image: &[Real], target: &[Real], width: usize, height: usize) -> Result<(Real, Vec<Real>), LossError> {
    let (s, g) = ssim(image, target, width, height, true)?;
    Ok((1.0 - s, g.into_iter().map(|v| -v).collect()))
}

pub fn ssim_metric(image: &[Real], target: &[Real], width: usize, height: usize) -> Result<Real, LossError> {
    Ok(ssim(image, target, width, height, false)?.0)
}

/// `10 log10(1 / MSE)`; identical images give `+inf`.
pub fn psnr(image: &[Real], target: &[Real]) -> Result<Real, LossError> {
    same_len("psnr", image, target)?;
    let mse = image.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<Real>() / image.len().max(1) as Real;
    Ok(if mse == 0.0 { Real::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

/// Weights of the total loss. The perceptual term is kept as a key but
/// contributes nothing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub color: Real,
    pub ssim: Real,
    pub lpips: Real,
    pub mask: Real,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { color: 1.0, ssim: 0.1, lpips: 0.0, mask: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossTerms {
    pub total: Real,
    pub l1: Real,
    pub ssim_loss: Real,
    pub mask: Real,
    pub grad_image: Vec<Real>,
    pub grad_alpha: Vec<Real>,
}

#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    image: &[Real],
    target: &[Real],
    alpha: &[Real],
    mask: &[Real],
    width: usize,
    height: usize,
    w: &LossWeights,
) -> Result<LossTerms, LossError> {
    let (l1, g1) = loss_l1(image, target)?;
    let (ls, gs) = loss_ssim(image, target, width, height)?;
    let (lm, gm) = loss_mask(alpha, mask)?;
    let grad_image = g1.iter().zip(&gs).map(|(a, b)| w.color * a + w.ssim * b).collect();
    let grad_alpha = gm.iter().map(|v| w.mask * v).collect();
    Ok(LossTerms {
        total: w.color * l1 + w.ssim * ls + w.mask * lm,
        l1,
        ssim_loss: ls,
        mask: lm,
        grad_image,
        grad_alpha,
    })
}
