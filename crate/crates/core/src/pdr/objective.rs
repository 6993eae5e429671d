use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{named_enum, PdrConfig};
use crate::attacks::{
    default_reference, input_diversity_on_tape, smooth_gradient, AttackConfig, IlaKind, IlaObjective, Method,
};
use crate::classifier::{ensemble_loss, Model};
use crate::error::{Error, Result};
use crate::perceptual::{ssim, ssim_on_tape, SsimConfig};
use crate::rng::{self, Rng};
use crate::tensor::{Tape, Tensor, Var};

/// Which misclassification loss `L_mis` the perceptual term is added to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MisKind {
    Ce,
    EnsembleCe,
    DimCe,
    TidimCe,
    Ilap,
    Ilaf,
}

named_enum!(MisKind {
    Ce => "ce",
    EnsembleCe => "ensemble-ce",
    DimCe => "dim-ce",
    TidimCe => "tidim-ce",
    Ilap => "ilap",
    Ilaf => "ilaf",
});

/// `L_mis` bound to one attack: models, label and, for the ILA losses, the
/// reference features. Larger values are more adversarial.
pub struct MisObjective<'a> {
    kind: MisKind,
    models: &'a [Model],
    y: usize,
    start: Tensor,
    ila: Option<IlaObjective>,
    p: f64,
    kernel: Option<Tensor>,
}

impl<'a> MisObjective<'a> {
    /// For `ilap` / `ilaf` this runs I-FGSM on `models[0]` for the
    /// reference example, which also becomes the starting point.
    pub fn new(models: &'a [Model], x: &Tensor, y: usize, cfg: &PdrConfig) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::invalid("pdr", "no source model"));
        }
        let mut start = x.clone();
        let ila = match cfg.mis {
            MisKind::Ilap | MisKind::Ilaf => {
                let eps = cfg.eps.min(1.0);
                let ref_cfg = AttackConfig {
                    iters: cfg.reference_iters.max(1),
                    seed: cfg.seed,
                    ..AttackConfig::new(Method::Ifgsm, eps)
                };
                let x_ref = default_reference(&models[..1], x, y, &ref_cfg)?;
                let kind = if cfg.mis == MisKind::Ilap { IlaKind::Projection } else { IlaKind::Flexible(cfg.ila_c) };
                let obj = IlaObjective::new(&models[0], x, &x_ref, &cfg.layer, kind)?;
                start = x_ref;
                Some(obj)
            }
            _ => None,
        };
        let kernel = if cfg.mis == MisKind::TidimCe { Some(cfg.kernel.realize()?) } else { None };
        Ok(Self { kind: cfg.mis, models, y, start, ila, p: cfg.p, kernel })
    }

    pub fn kind(&self) -> MisKind {
        self.kind
    }

    /// Initial iterate: `x`, or the reference example for the ILA losses.
    pub fn start(&self) -> Tensor {
        self.start.clone()
    }

    fn sources(&self) -> &'a [Model] {
        match self.kind {
            MisKind::EnsembleCe => self.models,
            _ => &self.models[..1],
        }
    }

    /// Record `L_mis` at `x` on the tape. The DIM variants draw their
    /// transform from `rng`.
    pub fn record(&self, tape: &mut Tape, x: Var, rng: Option<&mut Rng>) -> Result<Var> {
        match (&self.ila, self.kind) {
            (Some(obj), _) => {
                let bound = self.models[0].bind(tape, false);
                let loss = obj.record(&self.models[0], tape, &bound, x)?;
                tape.neg(loss)
            }
            (None, MisKind::DimCe | MisKind::TidimCe) => {
                let input = match rng {
                    Some(r) => input_diversity_on_tape(tape, x, self.p, r)?,
                    None => x,
                };
                ensemble_loss(tape, self.sources(), input, self.y)
            }
            (None, _) => ensemble_loss(tape, self.sources(), x, self.y),
        }
    }

    /// `L_mis` and its input gradient. For `tidim-ce` the gradient is
    /// smoothed with the TIM kernel.
    pub fn gradient(&self, x_adv: &Tensor, rng: &mut Rng) -> Result<(f64, Tensor)> {
        let mut tape = Tape::new();
        let xv = tape.param(x_adv.clone());
        let loss = self.record(&mut tape, xv, Some(rng))?;
        let mut grads = tape.backward(loss)?;
        let g = grads.take(xv).expect("param");
        let g = match &self.kernel {
            Some(k) => smooth_gradient(&g, k)?,
            None => g,
        };
        Ok((tape.value(loss).item(), g))
    }

    /// `L_mis` at the untransformed `x_adv`.
    pub fn value(&self, x_adv: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x_adv.clone());
        let loss = self.record(&mut tape, xv, None)?;
        Ok(tape.value(loss).item())
    }
}

/// `L_mis(x_adv) + lambda (SSIM(x_adv, x) - T)` on the tape; exactly `L_mis`
/// when `lambda = 0`.
#[allow(clippy::too_many_arguments)]
pub fn l_total_on_tape(
    tape: &mut Tape,
    mis: &MisObjective,
    x_adv: Var,
    x: &Tensor,
    lambda: f64,
    threshold: f64,
    ssim_cfg: &SsimConfig,
    rng: Option<&mut Rng>,
) -> Result<Var> {
    let l_mis = mis.record(tape, x_adv, rng)?;
    if lambda == 0.0 {
        return Ok(l_mis);
    }
    let reference = tape.constant(x.clone());
    let (s, _) = ssim_on_tape(tape, x_adv, reference, ssim_cfg)?;
    let gap = tape.add_scalar(s, -threshold)?;
    let pen = tape.mul_scalar(gap, lambda)?;
    tape.add(l_mis, pen)
}

/// Value of [`l_total_on_tape`]; the DIM variants draw from a fresh stream for `cfg.seed`.
pub fn l_total(
    mis: &MisObjective,
    x_adv: &Tensor,
    x: &Tensor,
    lambda: f64,
    threshold: f64,
    cfg: &PdrConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x_adv.clone());
    let mut r = rng::stream(cfg.seed, &[0xd1]);
    let out = l_total_on_tape(&mut tape, mis, xv, x, lambda, threshold, &cfg.ssim, Some(&mut r))?;
    Ok(tape.value(out).item())
}

/// `lambda max(T - L_PD, 0)`.
pub fn penalty_term(l_pd: f64, lambda: f64, threshold: f64) -> f64 {
    lambda * (threshold - l_pd).max(0.0)
}

/// Exact-penalty form (minimised): `-L_mis + lambda max(T - SSIM, 0)`.
pub fn penalty_objective(
    mis: &MisObjective,
    x_adv: &Tensor,
    x: &Tensor,
    lambda: f64,
    threshold: f64,
    ssim_cfg: &SsimConfig,
) -> Result<f64> {
    let l_pd = ssim(x_adv, x, ssim_cfg)?.mean;
    Ok(-mis.value(x_adv)? + penalty_term(l_pd, lambda, threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::default_architecture;
    use crate::tensor::finite_diff_check;
    use rand::Rng as _;

    const SHAPE: [usize; 3] = [3, 16, 16];

    fn model(seed: u64) -> Model {
        Model::init(SHAPE, default_architecture(SHAPE, 3), seed).unwrap()
    }

    fn image(seed: u64) -> Tensor {
        let mut r = rng::stream(seed, &[0x2c]);
        Tensor::new(&SHAPE, (0..768).map(|_| r.gen_range(0.1..0.9)).collect()).unwrap()
    }

    #[test]
    fn zero_lambda_is_exactly_the_misclassification_loss() {
        let models = [model(1)];
        let x = image(1);
        let cfg = PdrConfig::default();
        let mis = MisObjective::new(&models, &x, 0, &cfg).unwrap();
        let adv = image(2).zip_map(&x, "m", |a, b| 0.1 * a + 0.9 * b).unwrap();
        assert_eq!(l_total(&mis, &adv, &x, 0.0, 0.9, &cfg).unwrap().to_bits(), mis.value(&adv).unwrap().to_bits());
    }

    #[test]
    fn at_the_clean_input_the_penalty_is_lambda_times_slack() {
        let models = [model(3)];
        let x = image(3);
        let cfg = PdrConfig::default();
        let mis = MisObjective::new(&models, &x, 1, &cfg).unwrap();
        let (lambda, t) = (37.0, 0.92);
        let total = l_total(&mis, &x, &x, lambda, t, &cfg).unwrap();
        assert!((total - (mis.value(&x).unwrap() + lambda * (1.0 - t))).abs() < 1e-10);
    }

    /// The default stack without its ReLUs, so central differences never
    /// straddle a kink.
    fn smooth_model(seed: u64) -> Model {
        let layers = default_architecture(SHAPE, 3)
            .into_iter()
            .filter(|(_, l)| *l != crate::classifier::LayerSpec::Relu)
            .collect();
        Model::init(SHAPE, layers, seed).unwrap()
    }

    #[test]
    fn l_total_gradient_matches_finite_differences() {
        let models = [smooth_model(4), smooth_model(5)];
        let x = image(4);
        let mut r = rng::stream(77, &[]);
        let mut checked = 0;
        for mis_kind in MisKind::ALL {
            let cfg = PdrConfig { mis: *mis_kind, reference_iters: 3, layer: "conv2".into(), ..PdrConfig::default() };
            let mis = MisObjective::new(&models, &x, 2, &cfg).unwrap();
            for _ in 0..2 {
                let noise: Vec<f64> = (0..x.numel()).map(|_| r.gen_range(-0.05..0.05)).collect();
                let adv =
                    x.zip_map(&Tensor::new(x.shape(), noise).unwrap(), "n", |v, n| (v + n).clamp(0.0, 1.0)).unwrap();
                let err = finite_diff_check(
                    |t, v| {
                        let mut stream = rng::stream(12, &[]);
                        l_total_on_tape(t, &mis, v, &x, 3.0, 0.95, &cfg.ssim, Some(&mut stream))
                    },
                    &adv,
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-6, "{mis_kind}: {err}");
                checked += 1;
            }
        }
        assert_eq!(checked, 12);
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(penalty_term(0.97, 50.0, 0.96), 0.0);
        assert!((penalty_term(0.96 - 0.1, 10.0, 0.96) - 1.0).abs() < 1e-12);
        let mut last = f64::INFINITY;
        for s in [0.1, 0.4, 0.7, 0.9, 0.95] {
            let p = penalty_term(s, 10.0, 0.96);
            assert!(p <= last);
            last = p;
        }

        let models = [model(6)];
        let x = image(6);
        let cfg = PdrConfig::default();
        let mis = MisObjective::new(&models, &x, 0, &cfg).unwrap();
        let v = penalty_objective(&mis, &x, &x, 100.0, 0.9, &cfg.ssim).unwrap();
        assert!((v + mis.value(&x).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn ila_losses_start_at_the_reference() {
        let models = [model(7)];
        let x = image(7);
        for kind in [MisKind::Ilap, MisKind::Ilaf] {
            let cfg = PdrConfig { mis: kind, reference_iters: 5, ..PdrConfig::default() };
            let mis = MisObjective::new(&models, &x, 0, &cfg).unwrap();
            assert!(!mis.start().bit_eq(&x));
            assert!(mis.start().max_abs_diff(&x).unwrap() <= cfg.eps + 1e-12);
            // higher is more adversarial: at the reference ILAP equals |d_ref|^2 > 0
            if kind == MisKind::Ilap {
                assert!(mis.value(&mis.start()).unwrap() > 0.0);
            }
        }
    }
}
