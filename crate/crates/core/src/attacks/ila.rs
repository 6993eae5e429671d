use super::{check_inputs, clip_ball, finish, AttackConfig, AttackResult, Method, Outcome};
use crate::classifier::Model;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum IlaKind {
    Projection,
    /// ILAF with balance constant `C`.
    Flexible(f64),
}

/// Fixed parts of an ILA loss: the target layer, `f_l(x)` and the reference
/// direction `f_l(x_ref) - f_l(x)`.
#[derive(Clone, Debug)]
pub struct IlaObjective {
    layer: usize,
    kind: IlaKind,
    f_x: Tensor,
    d_ref: Tensor,
    ref_norm: f64,
}

impl IlaObjective {
    pub fn new(model: &Model, x: &Tensor, x_ref: &Tensor, layer: &str, kind: IlaKind) -> Result<Self> {
        let idx = model.layer_index(layer)?;
        let (_, f_x) = model.forward_with_intermediate(x, layer)?;
        let (_, f_ref) = model.forward_with_intermediate(x_ref, layer)?;
        let d_ref = f_ref.zip_map(&f_x, "ila", |a, b| a - b)?;
        let ref_norm = d_ref.l2_norm();
        if matches!(kind, IlaKind::Flexible(_)) && ref_norm == 0.0 {
            return Err(Error::invalid("ilaf_loss", "reference features equal the clean features"));
        }
        Ok(Self { layer: idx, kind, f_x, d_ref, ref_norm })
    }

    pub fn from_method(model: &Model, x: &Tensor, x_ref: &Tensor, cfg: &AttackConfig) -> Result<Self> {
        let kind = match cfg.method {
            Method::Ilap => IlaKind::Projection,
            Method::Ilaf => IlaKind::Flexible(cfg.ila_c),
            other => return Err(Error::Config(format!("{other} is not an ILA attack"))),
        };
        Self::new(model, x, x_ref, &cfg.layer, kind)
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    /// Record the loss for the captured activation `f_adv`.
    pub fn loss_on_tape(&self, tape: &mut Tape, f_adv: Var) -> Result<Var> {
        let f_x = tape.constant(self.f_x.clone());
        let d_ref = tape.constant(self.d_ref.clone());
        let d_adv = tape.sub(f_adv, f_x)?;
        match self.kind {
            IlaKind::Projection => {
                let proj = tape.dot(d_ref, d_adv)?;
                tape.neg(proj)
            }
            IlaKind::Flexible(c) => {
                let adv_norm = tape.l2_norm(d_adv)?;
                if tape.value(adv_norm).item() == 0.0 {
                    return Err(Error::invalid("ilaf_loss", "adversarial features equal the clean features"));
                }
                let ratio = tape.mul_scalar(adv_norm, -c / self.ref_norm)?;
                let proj = tape.dot(d_adv, d_ref)?;
                let cos = tape.div(proj, adv_norm)?;
                let cos = tape.mul_scalar(cos, -1.0 / self.ref_norm)?;
                tape.add(ratio, cos)
            }
        }
    }

    /// Loss at `x_adv` and its input gradient, through `model`'s target layer.
    pub fn loss_gradient(&self, model: &Model, x_adv: &Tensor) -> Result<(f64, Tensor)> {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let xv = tape.param(x_adv.clone());
        let loss = self.record(model, &mut tape, &bound, xv)?;
        let mut grads = tape.backward(loss)?;
        Ok((tape.value(loss).item(), grads.take(xv).expect("param")))
    }

    pub(crate) fn record(
        &self,
        model: &Model,
        tape: &mut Tape,
        bound: &crate::classifier::Bound,
        x: Var,
    ) -> Result<Var> {
        let (_, feat) = model.forward_on(tape, bound, x, Some(self.layer))?;
        self.loss_on_tape(tape, feat.expect("captured layer"))
    }

    pub fn loss_value(&self, model: &Model, x_adv: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let xv = tape.constant(x_adv.clone());
        let loss = self.record(model, &mut tape, &bound, xv)?;
        Ok(tape.value(loss).item())
    }
}

fn differences(f_ref: &Tensor, f_x: &Tensor, f_adv: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((f_ref.zip_map(f_x, "ila", |a, b| a - b)?, f_adv.zip_map(f_x, "ila", |a, b| a - b)?))
}

/// `-(f_ref - f_x) . (f_adv - f_x)`.
pub fn ilap_loss(f_ref: &Tensor, f_x: &Tensor, f_adv: &Tensor) -> Result<f64> {
    let (d_ref, d_adv) = differences(f_ref, f_x, f_adv)?;
    Ok(-d_ref.data().iter().zip(d_adv.data()).map(|(a, b)| a * b).sum::<f64>())
}

/// `-C |d_adv| / |d_ref| - (d_adv / |d_adv|) . (d_ref / |d_ref|)`.
pub fn ilaf_loss(f_ref: &Tensor, f_x: &Tensor, f_adv: &Tensor, c: f64) -> Result<f64> {
    let (d_ref, d_adv) = differences(f_ref, f_x, f_adv)?;
    let (nr, na) = (d_ref.l2_norm(), d_adv.l2_norm());
    if nr == 0.0 || na == 0.0 {
        return Err(Error::invalid("ilaf_loss", "feature difference has zero norm"));
    }
    let dot: f64 = d_ref.data().iter().zip(d_adv.data()).map(|(a, b)| a * b).sum();
    Ok(-c * na / nr - dot / (na * nr))
}

/// Start from `x_ref` (clipped to the ball around `x`) and take signed
/// descent steps of size `alpha` on the ILA loss at `cfg.layer` of `models[0]`.
pub fn ila_attack(models: &[Model], x: &Tensor, y: usize, x_ref: &Tensor, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    check_inputs(models, x, y)?;
    let model = &models[0];
    let start = clip_ball(x_ref, x, cfg.eps)?;
    let objective = IlaObjective::from_method(model, x, &start, cfg)?;
    let mut x_adv = start;
    let mut degenerate = false;
    let mut trajectory = cfg.record_trajectory.then(Vec::new);
    let mut used = 0;
    for _ in 0..cfg.iters {
        let (_, g) = objective.loss_gradient(model, &x_adv)?;
        degenerate |= g.data().iter().all(|&v| v == 0.0);
        let stepped = x_adv.zip_map(&g, "ila", |xi, gi| xi - cfg.alpha * crate::tensor::sign(gi))?;
        x_adv = clip_ball(&stepped, x, cfg.eps)?;
        used += 1;
        if let Some(t) = trajectory.as_mut() {
            t.push(x_adv.clone());
        }
        if cfg.early_stop && model.predict(&x_adv)? != y {
            break;
        }
    }
    let final_loss = objective.loss_value(model, &x_adv)?;
    finish(models, x, y, Outcome { x_adv, iterations_used: used, final_loss, degenerate, trajectory })
}
