//! Loss functions and evaluation metrics over image pairs.
//!
//! Every loss returns both its scalar value and the exact per-pixel gradient
//! with respect to the prediction, which the trainer feeds to the backward
//! pass as upstream `dL/dI_p`.
//!
//! SSIM uses the standard windowed formulation: 11x11 Gaussian window with
//! sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1.0, evaluated over
//! windows that lie fully inside the image. Images smaller than 11 pixels
//! on a side fall back to the largest odd window that fits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Loss family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L1,
    L2,
    Ssim,
    Psnr,
    Ncc,
    HybridL1,
    HybridSsim,
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(LossKind::L1),
            "l2" => Ok(LossKind::L2),
            "ssim" => Ok(LossKind::Ssim),
            "psnr" => Ok(LossKind::Psnr),
            "ncc" => Ok(LossKind::Ncc),
            "hybrid_l1" | "hybridl1" => Ok(LossKind::HybridL1),
            "hybrid_ssim" | "hybridssim" => Ok(LossKind::HybridSsim),
            other => Err(Error::Config(format!("unknown loss kind '{other}'"))),
        }
    }
}

/// Loss selection plus the hybrid mixing weights.
///
/// Hybrids combine the L1 term and `1 - SSIM`: `hybrid_l1` weights them
/// 0.8 / 0.2, `hybrid_ssim` 0.2 / 0.8. Custom weights must be nonnegative
/// and sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub kind: LossKind,
    /// `(w_l1, w_ssim)`; `None` selects the kind's standard mix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hybrid_weights: Option<(f64, f64)>,
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            hybrid_weights: None,
        }
    }

    /// Effective `(w_l1, w_ssim)` mix for hybrid kinds.
    pub fn weights(&self) -> (f64, f64) {
        if let Some(w) = self.hybrid_weights {
            return w;
        }
        match self.kind {
            LossKind::HybridL1 => (0.8, 0.2),
            LossKind::HybridSsim => (0.2, 0.8),
            _ => (1.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((a, b)) = self.hybrid_weights {
            if a < 0.0 || b < 0.0 || (a + b - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "hybrid weights must be nonnegative and sum to 1, got ({a}, {b})"
                )));
            }
        }
        Ok(())
    }
}

impl Default for LossSpec {
    fn default() -> Self {
        Self::new(LossKind::HybridL1)
    }
}

/// Conventional full-reference image metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub ncc: f64,
}

fn check_shapes(pred: &[f64], target: &[f64], width: usize, height: usize) -> Result<()> {
    if pred.len() != target.len() || pred.len() != width * height {
        return Err(Error::ShapeMismatch(format!(
            "pred {} vs target {} vs grid {}x{}",
            pred.len(),
            target.len(),
            width,
            height
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("empty image".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Elementary losses
// ---------------------------------------------------------------------------

fn l1_with_grad(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len() as f64;
    let mut total = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            total += d.abs();
            // Subgradient 0 at the kink.
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    (total / n, grad)
}

fn l2_with_grad(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len() as f64;
    let mut total = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            total += d * d;
            2.0 * d / n
        })
        .collect();
    (total / n, grad)
}

fn mse(pred: &[f64], target: &[f64]) -> f64 {
    let n = pred.len() as f64;
    pred.iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            d * d
        })
        .sum::<f64>()
        / n
}

/// Peak signal-to-noise ratio for dynamic range 1; infinite for identical
/// images.
pub fn psnr(pred: &[f64], target: &[f64]) -> f64 {
    let m = mse(pred, target);
    if m == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * m.log10()
    }
}

/// Normalized cross-correlation of mean-centered images; `None` when either
/// image is constant.
fn ncc_value(pred: &[f64], target: &[f64]) -> Option<f64> {
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mt = target.iter().sum::<f64>() / n;
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (p, t) in pred.iter().zip(target) {
        let a = p - mp;
        let b = t - mt;
        dot += a * b;
        na += a * a;
        nb += b * b;
    }
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot / (na.sqrt() * nb.sqrt()))
    }
}

fn ncc_with_grad(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mt = target.iter().sum::<f64>() / n;
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (p, t) in pred.iter().zip(target) {
        let a = p - mp;
        let b = t - mt;
        dot += a * b;
        na += a * a;
        nb += b * b;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateInput(
            "NCC undefined for a constant image".into(),
        ));
    }
    let denom = na.sqrt() * nb.sqrt();
    let ncc = dot / denom;
    // d ncc / d p_i = b_i / denom - ncc * a_i / na; both terms are already
    // mean-free, so the centering projector is a no-op.
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let a = p - mp;
            let b = t - mt;
            b / denom - ncc * a / na
        })
        .collect();
    Ok((ncc, grad))
}

// ---------------------------------------------------------------------------
// SSIM
// ---------------------------------------------------------------------------

fn ssim_window_size(width: usize, height: usize) -> usize {
    let mut w = SSIM_WINDOW.min(width).min(height);
    if w % 2 == 0 {
        w -= 1;
    }
    w.max(1)
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as isize;
    let mut w = Vec::with_capacity(size * size);
    let mut sum = 0.0;
    for i in -half..=half {
        for j in -half..=half {
            let v = (-((i * i + j * j) as f64) / (2.0 * sigma * sigma)).exp();
            w.push(v);
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

struct SsimTerms {
    value: f64,
    /// dSSIM/dpred.
    grad: Vec<f64>,
}

/// Mean SSIM over all fully interior windows, with its gradient with
/// respect to `pred`.
fn ssim_with_grad(pred: &[f64], target: &[f64], width: usize, height: usize) -> SsimTerms {
    let size = ssim_window_size(width, height);
    let half = size / 2;
    let win = gaussian_window(size, SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;

    let rows = height - size + 1;
    let cols = width - size + 1;
    let n_windows = (rows * cols) as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0f64; pred.len()];

    for wi in 0..rows {
        for wj in 0..cols {
            // Raw windowed moments.
            let mut mu_x = 0.0;
            let mut mu_y = 0.0;
            let mut mxx = 0.0;
            let mut myy = 0.0;
            let mut mxy = 0.0;
            for a in 0..size {
                for b in 0..size {
                    let idx = (wi + a) * width + (wj + b);
                    let w = win[a * size + b];
                    let x = pred[idx];
                    let y = target[idx];
                    mu_x += w * x;
                    mu_y += w * y;
                    mxx += w * x * x;
                    myy += w * y * y;
                    mxy += w * x * y;
                }
            }
            let a1 = 2.0 * mu_x * mu_y + c1;
            let a2 = 2.0 * (mxy - mu_x * mu_y) + c2;
            let b1 = mu_x * mu_x + mu_y * mu_y + c1;
            let b2 = (mxx - mu_x * mu_x) + (myy - mu_y * mu_y) + c2;
            let s = (a1 * a2) / (b1 * b2);
            total += s;

            // Partials with respect to the raw moments.
            let d_mu_x =
                2.0 * mu_y * (a2 - a1) / (b1 * b2) - 2.0 * mu_x * s * (1.0 / b1 - 1.0 / b2);
            let d_mxx = -s / b2;
            let d_mxy = 2.0 * a1 / (b1 * b2);

            // Spread back through the window taps.
            for a in 0..size {
                for b in 0..size {
                    let idx = (wi + a) * width + (wj + b);
                    let w = win[a * size + b];
                    grad[idx] +=
                        w * (d_mu_x + 2.0 * pred[idx] * d_mxx + target[idx] * d_mxy) / n_windows;
                }
            }
        }
    }
    // Degenerate 0-window case cannot occur: rows, cols >= 1 by window
    // size construction.
    let _ = half;
    SsimTerms {
        value: total / n_windows,
        grad,
    }
}

/// Mean SSIM over fully interior windows (value only).
pub fn ssim(pred: &[f64], target: &[f64], width: usize, height: usize) -> Result<f64> {
    check_shapes(pred, target, width, height)?;
    Ok(ssim_with_grad(pred, target, width, height).value)
}

// ---------------------------------------------------------------------------
// Public entry points
// ---------------------------------------------------------------------------

/// Loss value and exact per-pixel gradient `dL/dpred`.
///
/// Loss terms are oriented so that lower is better: `1 - SSIM`, `-PSNR`,
/// `1 - NCC`. NCC and PSNR error out on degenerate (constant / identical)
/// inputs rather than returning non-finite values.
pub fn loss(
    pred: &[f64],
    target: &[f64],
    width: usize,
    height: usize,
    spec: &LossSpec,
) -> Result<(f64, Vec<f64>)> {
    check_shapes(pred, target, width, height)?;
    spec.validate()?;
    match spec.kind {
        LossKind::L1 => Ok(l1_with_grad(pred, target)),
        LossKind::L2 => Ok(l2_with_grad(pred, target)),
        LossKind::Ssim => {
            let t = ssim_with_grad(pred, target, width, height);
            Ok((1.0 - t.value, t.grad.iter().map(|g| -g).collect()))
        }
        LossKind::Psnr => {
            let m = mse(pred, target);
            if m == 0.0 {
                return Err(Error::DegenerateInput(
                    "PSNR loss undefined for identical images".into(),
                ));
            }
            // -PSNR = 10 log10(mse); d/dp = 10 / (ln10 * mse) * 2 (p - t) / n.
            let n = pred.len() as f64;
            let k = 20.0 / (std::f64::consts::LN_10 * m * n);
            let grad = pred.iter().zip(target).map(|(p, t)| k * (p - t)).collect();
            Ok((10.0 * m.log10(), grad))
        }
        LossKind::Ncc => {
            let (v, g) = ncc_with_grad(pred, target)?;
            Ok((1.0 - v, g.iter().map(|x| -x).collect()))
        }
        LossKind::HybridL1 | LossKind::HybridSsim => {
            let (w_l1, w_ssim) = spec.weights();
            let (l1, g1) = l1_with_grad(pred, target);
            let t = ssim_with_grad(pred, target, width, height);
            let value = w_l1 * l1 + w_ssim * (1.0 - t.value);
            let grad = g1
                .iter()
                .zip(&t.grad)
                .map(|(a, b)| w_l1 * a - w_ssim * b)
                .collect();
            Ok((value, grad))
        }
    }
}

/// Conventional metrics; SSIM windowed as above, NCC reported as 0 for
/// constant images, PSNR infinite for identical ones.
pub fn metrics(pred: &[f64], target: &[f64], width: usize, height: usize) -> Result<Metrics> {
    check_shapes(pred, target, width, height)?;
    let n = pred.len() as f64;
    let mae = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / n;
    let m = mse(pred, target);
    Ok(Metrics {
        mae,
        mse: m,
        psnr: psnr(pred, target),
        ssim: ssim_with_grad(pred, target, width, height).value,
        ncc: ncc_value(pred, target).unwrap_or(0.0),
    })
}

impl Metrics {
    /// Elementwise mean of a set of metric rows.
    pub fn mean(rows: &[Metrics]) -> Metrics {
        let n = rows.len().max(1) as f64;
        let mut out = Metrics {
            mae: 0.0,
            mse: 0.0,
            psnr: 0.0,
            ssim: 0.0,
            ncc: 0.0,
        };
        for r in rows {
            out.mae += r.mae / n;
            out.mse += r.mse / n;
            out.psnr += r.psnr / n;
            out.ssim += r.ssim / n;
            out.ncc += r.ncc / n;
        }
        out
    }
}
