//! Baseline L∞ attacks: FGSM, I-FGSM, MI-FGSM, DIM, TIM, TI-DIM and the
//! intermediate-level ILAP / ILAF attacks.
//!
//! Every attack takes a list of source models. Gradients use the mean
//! cross-entropy over the list (plain cross-entropy for a single model);
//! success and the reported prediction always refer to `models[0]` on the
//! untransformed `x_adv`.

mod ila;
mod iterative;

use std::fmt;
use std::str::FromStr;

pub use ila::{ila_attack, ilaf_loss, ilap_loss, IlaKind, IlaObjective};
pub use iterative::{dim, fgsm, ifgsm, input_diversity, input_diversity_on_tape, mifgsm, tidim, tim};

use serde::{Deserialize, Serialize};

use crate::classifier::{ensemble_loss, Model, DEFAULT_ILA_LAYER};
use crate::error::{Error, Result};
use crate::perceptual::{gaussian_1d, ssim, SsimConfig};
use crate::rng::Rng;
use crate::tensor::{kernels, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fgsm,
    Ifgsm,
    Mifgsm,
    Dim,
    Tim,
    Tidim,
    Ilap,
    Ilaf,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Fgsm,
        Method::Ifgsm,
        Method::Mifgsm,
        Method::Dim,
        Method::Tim,
        Method::Tidim,
        Method::Ilap,
        Method::Ilaf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Fgsm => "fgsm",
            Method::Ifgsm => "ifgsm",
            Method::Mifgsm => "mifgsm",
            Method::Dim => "dim",
            Method::Tim => "tim",
            Method::Tidim => "tidim",
            Method::Ilap => "ilap",
            Method::Ilaf => "ilaf",
        }
    }

    pub fn is_ila(self) -> bool {
        matches!(self, Method::Ilap | Method::Ilaf)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
            Error::Config(format!("unknown attack `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Gaussian,
    Delta,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub size: usize,
    pub sigma: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self { kind: KernelKind::Gaussian, size: 7, sigma: 3.0 }
    }
}

impl KernelSpec {
    pub fn delta(size: usize) -> Self {
        Self { kind: KernelKind::Delta, size, sigma: 1.0 }
    }

    /// The normalised `size x size` kernel.
    pub fn realize(&self) -> Result<Tensor> {
        if self.size.is_multiple_of(2) {
            return Err(Error::invalid("kernel", format!("size must be odd, got {}", self.size)));
        }
        let n = self.size;
        match self.kind {
            KernelKind::Delta => {
                let mut data = vec![0.0; n * n];
                data[(n / 2) * n + n / 2] = 1.0;
                Tensor::new(&[n, n], data)
            }
            KernelKind::Gaussian => {
                if !(self.sigma > 0.0) {
                    return Err(Error::invalid("kernel", format!("sigma must be positive, got {}", self.sigma)));
                }
                let g = gaussian_1d(n, self.sigma);
                Tensor::new(&[n, n], g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub method: Method,
    pub eps: f64,
    pub alpha: f64,
    pub iters: usize,
    pub momentum: f64,
    pub p: f64,
    pub kernel: KernelSpec,
    pub ila_c: f64,
    pub layer: String,
    pub seed: u64,
    /// Stop iterating as soon as `models[0]` misclassifies.
    pub early_stop: bool,
    pub record_trajectory: bool,
}

impl AttackConfig {
    /// Defaults: 20 iterations, `alpha = max(eps / 10, 1/255)`, momentum 1,
    /// DIM probability 0.5, Gaussian 7x7 sigma 3 TIM kernel, ILAF C = 1.
    pub fn new(method: Method, eps: f64) -> Self {
        Self {
            method,
            eps,
            alpha: (eps / 10.0).max(1.0 / 255.0),
            iters: 20,
            momentum: 1.0,
            p: 0.5,
            kernel: KernelSpec::default(),
            ila_c: 1.0,
            layer: DEFAULT_ILA_LAYER.to_string(),
            seed: 0,
            early_stop: false,
            record_trajectory: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("{}: {msg}", self.method)));
        if !(self.eps >= 0.0) {
            return bad(format!("eps must be non-negative, got {}", self.eps));
        }
        if !(self.alpha > 0.0) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if self.iters == 0 && !self.method.is_ila() {
            return bad("iters must be at least 1".into());
        }
        if !(self.momentum >= 0.0) {
            return bad(format!("momentum must be non-negative, got {}", self.momentum));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return bad(format!("p must lie in [0, 1], got {}", self.p));
        }
        if !self.ila_c.is_finite() {
            return bad(format!("C must be finite, got {}", self.ila_c));
        }
        self.kernel.realize().map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttackResult {
    #[serde(skip)]
    pub x_adv: Tensor,
    pub success: bool,
    pub predicted: usize,
    pub iterations_used: usize,
    pub final_loss: f64,
    pub ssim_vs_original: f64,
    pub linf_vs_original: f64,
    /// Some gradient (or its L1 norm) was exactly zero along the way.
    pub degenerate: bool,
    #[serde(skip)]
    pub trajectory: Option<Vec<Tensor>>,
}

/// `min(max(x_adv, x - eps, 0), x + eps, 1)` elementwise.
pub fn clip_ball(x_adv: &Tensor, x: &Tensor, eps: f64) -> Result<Tensor> {
    x_adv.zip_map(x, "clip_ball", |v, x0| v.max(x0 - eps).max(0.0).min(x0 + eps).min(1.0))
}

/// Mean cross-entropy over `models` at `x` (optionally input-diversified)
/// and its gradient w.r.t. `x`.
pub fn loss_gradient(
    models: &[Model],
    x: &Tensor,
    y: usize,
    diversity: Option<(f64, &mut Rng)>,
) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let input = match diversity {
        Some((p, rng)) => input_diversity_on_tape(&mut tape, xv, p, rng)?,
        None => xv,
    };
    let loss = ensemble_loss(&mut tape, models, input, y)?;
    let mut grads = tape.backward(loss)?;
    Ok((tape.value(loss).item(), grads.take(xv).expect("param")))
}

/// Translation-invariant smoothing: `kernel` applied per channel with same padding.
pub fn smooth_gradient(g: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    kernels::depthwise_same(g, kernel)
}

pub(crate) fn check_inputs(models: &[Model], x: &Tensor, y: usize) -> Result<()> {
    let Some(m) = models.first() else {
        return Err(Error::invalid("attack", "no source model"));
    };
    if x.shape() != m.input_shape() {
        return Err(Error::shape("attack", format!("model expects {:?}, got {:?}", m.input_shape(), x.shape())));
    }
    if y >= m.classes() {
        return Err(Error::invalid("attack", format!("label {y} out of range for {} classes", m.classes())));
    }
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("attack", "input pixels must lie in [0, 1]"));
    }
    Ok(())
}

/// Summary statistics of a finished attack against the clean input.
pub(crate) struct Outcome {
    pub x_adv: Tensor,
    pub iterations_used: usize,
    pub final_loss: f64,
    pub degenerate: bool,
    pub trajectory: Option<Vec<Tensor>>,
}

pub(crate) fn finish(models: &[Model], x: &Tensor, y: usize, out: Outcome) -> Result<AttackResult> {
    let predicted = models[0].predict(&out.x_adv)?;
    Ok(AttackResult {
        success: predicted != y,
        predicted,
        iterations_used: out.iterations_used,
        final_loss: out.final_loss,
        ssim_vs_original: ssim(&out.x_adv, x, &SsimConfig::default())?.mean,
        linf_vs_original: out.x_adv.max_abs_diff(x)?,
        degenerate: out.degenerate,
        trajectory: out.trajectory,
        x_adv: out.x_adv,
    })
}

pub(crate) fn ensemble_loss_value(models: &[Model], x: &Tensor, y: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let loss = ensemble_loss(&mut tape, models, xv, y)?;
    Ok(tape.value(loss).item())
}

/// Reference example for the ILA attacks: I-FGSM with the same budget.
pub fn default_reference(models: &[Model], x: &Tensor, y: usize, cfg: &AttackConfig) -> Result<Tensor> {
    let ref_cfg = AttackConfig {
        method: Method::Ifgsm,
        iters: cfg.iters.max(1),
        early_stop: false,
        record_trajectory: false,
        ..cfg.clone()
    };
    Ok(ifgsm(models, x, y, &ref_cfg)?.x_adv)
}

/// Dispatch on `cfg.method`. ILA attacks build their reference with
/// [`default_reference`].
pub fn run(models: &[Model], x: &Tensor, y: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    match cfg.method {
        Method::Fgsm => fgsm(models, x, y, cfg),
        Method::Ifgsm => ifgsm(models, x, y, cfg),
        Method::Mifgsm => mifgsm(models, x, y, cfg),
        Method::Dim => dim(models, x, y, cfg),
        Method::Tim => tim(models, x, y, cfg),
        Method::Tidim => tidim(models, x, y, cfg),
        Method::Ilap | Method::Ilaf => {
            let x_ref = default_reference(models, x, y, cfg)?;
            ila_attack(models, x, y, &x_ref, cfg)
        }
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn clip_examples() {
        let x = Tensor::full(&[1, 2, 2], 0.5);
        assert_eq!(clip_ball(&Tensor::full(&[1, 2, 2], 1.0), &x, 0.1).unwrap(), Tensor::full(&[1, 2, 2], 0.6));
        let inside = Tensor::full(&[1, 2, 2], 0.55);
        assert_eq!(clip_ball(&inside, &x, 0.1).unwrap(), inside);
        assert!(clip_ball(&inside, &Tensor::full(&[1, 2, 3], 0.5), 0.1).is_err());
    }

    proptest! {
        #[test]
        fn clip_is_idempotent_and_feasible(
            v in prop::collection::vec(-0.5f64..1.5, 12),
            x in prop::collection::vec(0.0f64..1.0, 12),
            eps in 0.0f64..0.5,
        ) {
            let v = Tensor::new(&[3, 2, 2], v).unwrap();
            let x = Tensor::new(&[3, 2, 2], x).unwrap();
            let once = clip_ball(&v, &x, eps).unwrap();
            let twice = clip_ball(&once, &x, eps).unwrap();
            prop_assert!(once.bit_eq(&twice));
            prop_assert!(once.max_abs_diff(&x).unwrap() <= eps + 1e-12);
            prop_assert!(once.data().iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn kernels_are_normalised() {
        for spec in [KernelSpec::default(), KernelSpec::delta(5), KernelSpec { size: 15, ..KernelSpec::default() }] {
            let k = spec.realize().unwrap();
            assert!((k.sum() - 1.0).abs() < 1e-12);
        }
        assert!(KernelSpec { size: 4, ..KernelSpec::default() }.realize().is_err());
    }

    #[test]
    fn gaussian_smoothing_preserves_interior_mean() {
        let k = KernelSpec::default().realize().unwrap();
        // support well inside the 3 px margin of a 7x7 kernel
        let mut g = Tensor::zeros(&[2, 20, 20]);
        let mut r = crate::rng::stream(4, &[]);
        for c in 0..2 {
            for i in 5..15 {
                for j in 5..15 {
                    g.data_mut()[c * 400 + i * 20 + j] = rand::Rng::gen_range(&mut r, -1.0..1.0);
                }
            }
        }
        let s = smooth_gradient(&g, &k).unwrap();
        assert!((s.mean() - g.mean()).abs() < 1e-10);
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("pgd".parse::<Method>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::new(Method::Ifgsm, 8.0 / 255.0).validate().is_ok());
        let base = AttackConfig::new(Method::Dim, 0.03);
        assert!(AttackConfig { p: 1.5, ..base.clone() }.validate().is_err());
        assert!(AttackConfig { alpha: 0.0, ..base.clone() }.validate().is_err());
        assert!(AttackConfig { iters: 0, ..base.clone() }.validate().is_err());
        assert!(AttackConfig { momentum: -1.0, ..base.clone() }.validate().is_err());
        assert!(AttackConfig { iters: 0, method: Method::Ilap, ..base }.validate().is_ok());
    }

    #[test]
    fn run_rejects_bad_inputs() {
        let m = testutil::logistic(1);
        let x = testutil::image(1);
        let cfg = AttackConfig::new(Method::Ifgsm, 0.03);
        assert!(run(&[], &x, 0, &cfg).is_err());
        assert!(run(std::slice::from_ref(&m), &x, 7, &cfg).is_err());
        assert!(run(std::slice::from_ref(&m), &x.map(|v| v + 1.0), 0, &cfg).is_err());
        assert!(run(&[m], &Tensor::zeros(&[3, 12, 13]), 0, &cfg).is_err());
    }
}
