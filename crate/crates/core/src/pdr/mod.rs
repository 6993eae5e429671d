//! Perceptual distortion reduction: the attack loss is augmented with an
//! SSIM term, `L_total = L_mis + lambda (SSIM(x_adv, x) - T)`, maximised with
//! Adam while `lambda` follows its own gradient step.

mod objective;
mod optim;

pub use objective::{l_total, l_total_on_tape, penalty_objective, penalty_term, MisKind, MisObjective};
pub use optim::{adam_step, lambda_update, momentum_sgd_step, AdamConfig, PdrState};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attacks::{check_inputs, clip_ball, finish, AttackResult, KernelSpec, Outcome};
use crate::classifier::{Model, DEFAULT_ILA_LAYER};
use crate::error::{Error, Result};
use crate::perceptual::{ssim, ssim_gradient, SsimConfig};
use crate::rng;
use crate::tensor::Tensor;

macro_rules! named_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$variant),+];

            pub fn name(self) -> &'static str {
                match self { $($ty::$variant => $name),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                Self::ALL.iter().copied().find(|v| v.name() == s).ok_or_else(|| {
                    let names: Vec<_> = Self::ALL.iter().map(|v| v.name()).collect();
                    Error::Config(format!("unknown {} `{s}` (expected one of {})", stringify!($ty), names.join(", ")))
                })
            }
        }
    };
}
pub(crate) use named_enum;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaMode {
    Adaptive,
    Constant,
    /// `lambda = 0` throughout, whatever `lambda0` says.
    Off,
}

named_enum!(LambdaMode { Adaptive => "adaptive", Constant => "constant", Off => "off" });

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    MomentumSgd,
}

named_enum!(OptimizerKind { Adam => "adam", MomentumSgd => "momentum-sgd" });

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    /// Stop once `models[0]` misclassifies and SSIM is at least `T`.
    SuccessAndQuality,
    SuccessOnly,
}

named_enum!(Termination { SuccessAndQuality => "success-and-quality", SuccessOnly => "success-only" });

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdrConfig {
    pub lambda0: f64,
    pub lr_lambda: f64,
    pub threshold: f64,
    pub adam: AdamConfig,
    pub sgd_lr: f64,
    pub sgd_momentum: f64,
    pub max_iters: usize,
    pub eps: f64,
    pub mis: MisKind,
    pub lambda_mode: LambdaMode,
    pub optimizer: OptimizerKind,
    pub termination: Termination,
    /// DIM transform probability for `dim-ce` / `tidim-ce`.
    pub p: f64,
    pub kernel: KernelSpec,
    pub ila_c: f64,
    pub layer: String,
    /// Iterations of the I-FGSM reference run used by `ilap` / `ilaf`.
    pub reference_iters: usize,
    pub ssim: SsimConfig,
    pub seed: u64,
    /// Keep every iterate and every `L_total` gradient.
    pub record_steps: bool,
}

impl Default for PdrConfig {
    fn default() -> Self {
        Self {
            lambda0: 1600.0,
            lr_lambda: 100.0,
            threshold: 0.96,
            adam: AdamConfig::default(),
            sgd_lr: 0.01,
            sgd_momentum: 0.9,
            max_iters: 150,
            eps: 16.0 / 255.0,
            mis: MisKind::Ce,
            lambda_mode: LambdaMode::Adaptive,
            optimizer: OptimizerKind::Adam,
            termination: Termination::SuccessAndQuality,
            p: 0.5,
            kernel: KernelSpec::default(),
            ila_c: 1.0,
            layer: DEFAULT_ILA_LAYER.to_string(),
            reference_iters: 20,
            ssim: SsimConfig::default(),
            seed: 0,
            record_steps: false,
        }
    }
}

impl PdrConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("pdr: {msg}")));
        if !(self.lambda0 >= 0.0) || !self.lambda0.is_finite() {
            return bad(format!("lambda0 must be finite and >= 0, got {}", self.lambda0));
        }
        if !(self.lr_lambda >= 0.0) {
            return bad(format!("lr_lambda must be >= 0, got {}", self.lr_lambda));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return bad(format!("T must lie in (0, 1], got {}", self.threshold));
        }
        self.adam.validate()?;
        if !(self.sgd_lr > 0.0) || !(self.sgd_momentum >= 0.0) {
            return bad("momentum-sgd needs lr > 0 and momentum >= 0".into());
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1".into());
        }
        if !(self.eps >= 0.0) {
            return bad(format!("eps must be >= 0, got {}", self.eps));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return bad(format!("p must lie in [0, 1], got {}", self.p));
        }
        self.ssim.validate()?;
        self.kernel.realize().map(|_| ())
    }

    fn initial_lambda(&self) -> f64 {
        match self.lambda_mode {
            LambdaMode::Off => 0.0,
            _ => self.lambda0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRecord {
    pub k: usize,
    /// `L_mis` and SSIM at the point where the gradient was taken.
    pub l_mis: f64,
    pub l_pd: f64,
    /// Factor used for this step's gradient.
    pub lambda: f64,
    /// `models[0]` prediction after the step.
    pub predicted: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PdrTrace {
    pub records: Vec<TraceRecord>,
    #[serde(skip)]
    pub gradients: Option<Vec<Tensor>>,
}

impl PdrTrace {
    pub fn lambdas(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.lambda).collect()
    }
}

/// Gradient of `L_total` (maximisation form) at `x_adv`, plus `L_mis` and
/// SSIM there. With `lambda = 0` the SSIM gradient is not added at all.
fn total_gradient(
    mis: &MisObjective,
    x_adv: &Tensor,
    x: &Tensor,
    lambda: f64,
    cfg: &PdrConfig,
    rng: &mut rng::Rng,
) -> Result<(f64, f64, Tensor)> {
    let (l_mis, g_mis) = mis.gradient(x_adv, rng)?;
    if lambda == 0.0 {
        let l_pd = ssim(x_adv, x, &cfg.ssim)?.mean;
        return Ok((l_mis, l_pd, g_mis));
    }
    let (l_pd, g_pd) = ssim_gradient(x_adv, x, &cfg.ssim)?;
    let g = g_mis.zip_map(&g_pd, "l_total", |a, b| a + lambda * b)?;
    Ok((l_mis, l_pd, g))
}

/// The PDR loop: gradient of `L_total`, optimiser step on `-L_total`,
/// `lambda` update, projection onto the eps-ball, termination check.
pub fn pdr_attack(models: &[Model], x: &Tensor, y: usize, cfg: &PdrConfig) -> Result<(AttackResult, PdrTrace)> {
    cfg.validate()?;
    check_inputs(models, x, y)?;
    let mis = MisObjective::new(models, x, y, cfg)?;
    let mut state = PdrState::new(clip_ball(&mis.start(), x, cfg.eps)?, cfg.initial_lambda());
    let mut rng = rng::stream(cfg.seed, &[0xd1]);
    let mut trace = PdrTrace { records: Vec::new(), gradients: cfg.record_steps.then(Vec::new) };
    let mut trajectory = cfg.record_steps.then(Vec::new);
    let mut degenerate = false;

    for k in 1..=cfg.max_iters {
        let lambda = state.lambda;
        let (l_mis, l_pd, g) = total_gradient(&mis, &state.x_adv, x, lambda, cfg, &mut rng)?;
        if !g.all_finite() {
            return Err(Error::NonFinite { context: "pdr gradient", value: f64::NAN });
        }
        degenerate |= g.data().iter().all(|&v| v == 0.0);
        let descent = g.map(|v| -v);
        match cfg.optimizer {
            OptimizerKind::Adam => adam_step(&mut state, &descent, &cfg.adam)?,
            OptimizerKind::MomentumSgd => momentum_sgd_step(&mut state, &descent, cfg.sgd_lr, cfg.sgd_momentum)?,
        }
        if cfg.lambda_mode == LambdaMode::Adaptive {
            state.lambda = lambda_update(lambda, l_pd, cfg.threshold, cfg.lr_lambda);
        }
        state.x_adv = clip_ball(&state.x_adv, x, cfg.eps)?;

        let predicted = models[0].predict(&state.x_adv)?;
        trace.records.push(TraceRecord { k, l_mis, l_pd, lambda, predicted });
        if let Some(gs) = trace.gradients.as_mut() {
            gs.push(g);
        }
        if let Some(t) = trajectory.as_mut() {
            t.push(state.x_adv.clone());
        }
        let done = predicted != y
            && match cfg.termination {
                Termination::SuccessOnly => true,
                Termination::SuccessAndQuality => ssim(&state.x_adv, x, &cfg.ssim)?.mean >= cfg.threshold,
            };
        if done {
            break;
        }
    }

    let final_loss = mis.value(&state.x_adv)?;
    let outcome =
        Outcome { iterations_used: trace.records.len(), x_adv: state.x_adv, final_loss, degenerate, trajectory };
    Ok((finish(models, x, y, outcome)?, trace))
}

/// [`pdr_attack`] with `lambda` held at `lambda0`.
pub fn constant_lambda_attack(
    models: &[Model],
    x: &Tensor,
    y: usize,
    cfg: &PdrConfig,
) -> Result<(AttackResult, PdrTrace)> {
    let cfg = PdrConfig { lambda_mode: LambdaMode::Constant, ..cfg.clone() };
    pdr_attack(models, x, y, &cfg)
}
