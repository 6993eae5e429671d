//! Differentiable SSIM with Gaussian-weighted local statistics.
//!
//! Per channel, local moments are taken over every fully-contained window
//! (valid convolution, no padding); the score is the mean of the per-window
//! map over windows and channels. The Gaussian blur is applied as two 1-D
//! passes, which equals the 2-D normalised window exactly in real arithmetic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Conv2dParams, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self::with_range(1.0)
    }
}

impl SsimConfig {
    /// 11x11 window, sigma 1.5, `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2`.
    pub fn with_range(dynamic_range: f64) -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            c1: (0.01 * dynamic_range).powi(2),
            c2: (0.03 * dynamic_range).powi(2),
            dynamic_range,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::invalid("ssim", format!("window size must be odd and >= 3, got {}", self.window)));
        }
        if !(self.sigma > 0.0) || !(self.c1 > 0.0) || !(self.c2 > 0.0) {
            return Err(Error::invalid("ssim", "sigma, C1 and C2 must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsimResult {
    pub mean: f64,
    /// `(C, H - window + 1, W - window + 1)` per-window scores.
    pub map: Tensor,
}

pub(crate) fn gaussian_1d(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let raw: Vec<f64> = (0..size).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Normalised `size x size` Gaussian window.
pub fn gaussian_window(size: usize, sigma: f64) -> Result<Tensor> {
    if size < 3 || size.is_multiple_of(2) {
        return Err(Error::invalid("gaussian_window", format!("size must be odd and >= 3, got {size}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid("gaussian_window", format!("sigma must be positive, got {sigma}")));
    }
    let g = gaussian_1d(size, sigma);
    let data = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
    Tensor::new(&[size, size], data)
}

struct Blur {
    horizontal: Var,
    vertical: Var,
    channels: usize,
}

impl Blur {
    fn new(tape: &mut Tape, channels: usize, cfg: &SsimConfig) -> Self {
        let g = gaussian_1d(cfg.window, cfg.sigma);
        let taps: Vec<f64> = (0..channels).flat_map(|_| g.iter().copied()).collect();
        let horizontal = tape.constant(Tensor::from_parts(vec![channels, 1, 1, cfg.window], taps.clone()));
        let vertical = tape.constant(Tensor::from_parts(vec![channels, 1, cfg.window, 1], taps));
        Self { horizontal, vertical, channels }
    }

    fn apply(&self, tape: &mut Tape, v: Var) -> Result<Var> {
        let p = Conv2dParams { stride: 1, pad: 0, groups: self.channels };
        let h = tape.conv2d(v, self.horizontal, p)?;
        tape.conv2d(h, self.vertical, p)
    }
}

/// Record SSIM between `x` and `y` on the tape; returns `(mean, map)`.
pub fn ssim_on_tape(tape: &mut Tape, x: Var, y: Var, cfg: &SsimConfig) -> Result<(Var, Var)> {
    cfg.validate()?;
    let (xs, ys) = (tape.try_value(x)?, tape.try_value(y)?);
    if xs.shape() != ys.shape() {
        return Err(Error::shape("ssim", format!("{:?} vs {:?}", xs.shape(), ys.shape())));
    }
    let (c, h, w) = xs.chw("ssim")?;
    if h < cfg.window || w < cfg.window {
        return Err(Error::shape("ssim", format!("image {h}x{w} smaller than {0}x{0} window", cfg.window)));
    }
    let blur = Blur::new(tape, c, cfg);
    let mu_x = blur.apply(tape, x)?;
    let mu_y = blur.apply(tape, y)?;
    let xx = tape.mul(x, x)?;
    let yy = tape.mul(y, y)?;
    let xy = tape.mul(x, y)?;
    let e_xx = blur.apply(tape, xx)?;
    let e_yy = blur.apply(tape, yy)?;
    let e_xy = blur.apply(tape, xy)?;

    let mu_xx = tape.mul(mu_x, mu_x)?;
    let mu_yy = tape.mul(mu_y, mu_y)?;
    let mu_xy = tape.mul(mu_x, mu_y)?;
    let var_x = tape.sub(e_xx, mu_xx)?;
    let var_y = tape.sub(e_yy, mu_yy)?;
    let cov = tape.sub(e_xy, mu_xy)?;

    let lum_num = tape.mul_scalar(mu_xy, 2.0)?;
    let lum_num = tape.add_scalar(lum_num, cfg.c1)?;
    let cs_num = tape.mul_scalar(cov, 2.0)?;
    let cs_num = tape.add_scalar(cs_num, cfg.c2)?;
    let lum_den = tape.add(mu_xx, mu_yy)?;
    let lum_den = tape.add_scalar(lum_den, cfg.c1)?;
    let cs_den = tape.add(var_x, var_y)?;
    let cs_den = tape.add_scalar(cs_den, cfg.c2)?;

    let num = tape.mul(lum_num, cs_num)?;
    let den = tape.mul(lum_den, cs_den)?;
    let map = tape.div(num, den)?;
    let mean = tape.mean(map)?;
    Ok((mean, map))
}

pub fn ssim(x: &Tensor, y: &Tensor, cfg: &SsimConfig) -> Result<SsimResult> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let (mean, map) = ssim_on_tape(&mut tape, xv, yv, cfg)?;
    Ok(SsimResult { mean: tape.value(mean).item(), map: tape.value(map).clone() })
}

/// Mean SSIM of `x_adv` against the fixed reference `x`, and its gradient
/// w.r.t. `x_adv`.
pub fn ssim_gradient(x_adv: &Tensor, x: &Tensor, cfg: &SsimConfig) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let adv = tape.param(x_adv.clone());
    let reference = tape.constant(x.clone());
    let (mean, _) = ssim_on_tape(&mut tape, adv, reference, cfg)?;
    let mut grads = tape.backward(mean)?;
    Ok((tape.value(mean).item(), grads.take(adv).expect("param")))
}
