use rand::Rng as _;

use super::{
    check_inputs, clip_ball, ensemble_loss_value, finish, loss_gradient, smooth_gradient, AttackConfig, AttackResult,
    Outcome,
};
use crate::classifier::Model;
use crate::error::Result;
use crate::rng::{self, Rng};
use crate::tensor::{Tape, Tensor, Var};

/// Random resize-and-pad transform, applied with probability `p`.
///
/// The image is resized (bilinear) to `s x s'` with `s` uniform in
/// `[ceil(0.9 W), W]` and `s'` the proportional height, then zero-padded back
/// to `H x W` at a uniform offset.
pub fn input_diversity_on_tape(tape: &mut Tape, x: Var, p: f64, rng: &mut Rng) -> Result<Var> {
    let draw: f64 = rng.gen();
    if draw >= p {
        return Ok(x);
    }
    let (_, h, w) = tape.try_value(x)?.chw("input_diversity")?;
    let lo = ((0.9 * w as f64).ceil() as usize).max(1);
    let new_w = rng.gen_range(lo..=w);
    let new_h = if h == w { new_w } else { ((new_w * h) as f64 / w as f64).round().clamp(1.0, h as f64) as usize };
    let top = rng.gen_range(0..=h - new_h);
    let left = rng.gen_range(0..=w - new_w);
    let resized = tape.resize_bilinear(x, new_h, new_w)?;
    tape.zero_pad(resized, h, w, top, left)
}

pub fn input_diversity(x: &Tensor, p: f64, rng: &mut Rng) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = input_diversity_on_tape(&mut tape, xv, p, rng)?;
    Ok(tape.value(out).clone())
}

#[derive(Clone, Copy)]
struct Variant {
    momentum: Option<f64>,
    diversity: Option<f64>,
    smooth: bool,
}

fn iterate(models: &[Model], x: &Tensor, y: usize, cfg: &AttackConfig, v: Variant) -> Result<AttackResult> {
    cfg.validate()?;
    check_inputs(models, x, y)?;
    let kernel = if v.smooth { Some(cfg.kernel.realize()?) } else { None };
    let mut rng = rng::stream(cfg.seed, &[0xd1]);
    let mut x_adv = x.clone();
    let mut acc = Tensor::zeros(x.shape());
    let mut degenerate = false;
    let mut trajectory = cfg.record_trajectory.then(Vec::new);
    let mut used = 0;
    for _ in 0..cfg.iters {
        let diversity = v.diversity.map(|p| (p, &mut rng));
        let (_, mut g) = loss_gradient(models, &x_adv, y, diversity)?;
        if let Some(k) = &kernel {
            g = smooth_gradient(&g, k)?;
        }
        let direction = match v.momentum {
            Some(m) => {
                let l1 = g.l1_norm();
                if l1 > 0.0 {
                    acc = acc.zip_map(&g, "mifgsm", |a, gi| m * a + gi / l1)?;
                } else {
                    degenerate = true;
                    acc = acc.map(|a| m * a);
                }
                &acc
            }
            None => {
                degenerate |= g.data().iter().all(|&gi| gi == 0.0);
                &g
            }
        };
        let stepped = x_adv.zip_map(direction, "step", |xi, d| xi + cfg.alpha * crate::tensor::sign(d))?;
        x_adv = clip_ball(&stepped, x, cfg.eps)?;
        used += 1;
        if let Some(t) = trajectory.as_mut() {
            t.push(x_adv.clone());
        }
        if cfg.early_stop && models[0].predict(&x_adv)? != y {
            break;
        }
    }
    let final_loss = ensemble_loss_value(models, &x_adv, y)?;
    finish(models, x, y, Outcome { x_adv, iterations_used: used, final_loss, degenerate, trajectory })
}

/// One step of size `eps` along the gradient sign, clipped to `[0, 1]`.
pub fn fgsm(models: &[Model], x: &Tensor, y: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    check_inputs(models, x, y)?;
    let (_, g) = loss_gradient(models, x, y, None)?;
    let degenerate = g.data().iter().all(|&v| v == 0.0);
    let x_adv = x.zip_map(&g, "fgsm", |xi, gi| (xi + cfg.eps * crate::tensor::sign(gi)).clamp(0.0, 1.0))?;
    let final_loss = ensemble_loss_value(models, &x_adv, y)?;
    let trajectory = cfg.record_trajectory.then(|| vec![x_adv.clone()]);
    finish(models, x, y, Outcome { x_adv, iterations_used: 1, final_loss, degenerate, trajectory })
}

pub fn ifgsm(models: &[Model], x: &Tensor, y: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    iterate(models, x, y, cfg, Variant { momentum: None, diversity: None, smooth: false })
}

/// Accumulates `g_t = m g_{t-1} + grad / ||grad||_1` and steps along its sign.
pub fn mifgsm(models: &[Model], x: &Tensor, y: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    iterate(models, x, y, cfg, Variant { momentum: Some(cfg.momentum), diversity: None, smooth: false })
}

pub fn dim(models: &[Model], x: &Tensor, y: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    iterate(models, x, y, cfg, Variant { momentum: None, diversity: Some(cfg.p), smooth: false })
}

pub fn tim(models: &[Model], x: &Tensor, y: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    iterate(models, x, y, cfg, Variant { momentum: None, diversity: None, smooth: true })
}

pub fn tidim(models: &[Model], x: &Tensor, y: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    iterate(models, x, y, cfg, Variant { momentum: None, diversity: Some(cfg.p), smooth: true })
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{cnn, image, logistic, SHAPE};
    use super::super::{KernelSpec, Method};
    use super::*;
    use crate::tensor::{finite_diff_check, kernels};

    fn cfg(method: Method, eps: f64) -> AttackConfig {
        AttackConfig { record_trajectory: true, seed: 9, iters: 8, ..AttackConfig::new(method, eps) }
    }

    fn same_trajectory(a: &AttackResult, b: &AttackResult) -> bool {
        let (ta, tb) = (a.trajectory.as_ref().unwrap(), b.trajectory.as_ref().unwrap());
        ta.len() == tb.len() && ta.iter().zip(tb).all(|(u, v)| u.bit_eq(v)) && a.x_adv.bit_eq(&b.x_adv)
    }

    #[test]
    fn zero_budget_fgsm_is_identity() {
        let (m, x) = (cnn(2), image(2));
        let r = fgsm(&[m], &x, 1, &cfg(Method::Fgsm, 0.0)).unwrap();
        assert!(r.x_adv.bit_eq(&x));
    }

    // grad_x CE(softmax(Wx + b), y) = W^T (softmax(Wx + b) - e_y)
    #[test]
    fn fgsm_matches_closed_form_on_logistic_model() {
        let m = logistic(5);
        let x = image(5);
        let y = 2;
        let eps = 0.03;
        let dense = &m.layers()[1];
        let (w, b) = (dense.weight.as_ref().unwrap(), dense.bias.as_ref().unwrap());
        let n = x.numel();
        let z: Vec<f64> =
            (0..3).map(|k| b.data()[k] + (0..n).map(|i| w.data()[k * n + i] * x.data()[i]).sum::<f64>()).collect();
        let zmax = z.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
        let s: f64 = e.iter().sum();
        let delta: Vec<f64> = (0..3).map(|k| e[k] / s - if k == y { 1.0 } else { 0.0 }).collect();
        let r = fgsm(std::slice::from_ref(&m), &x, y, &cfg(Method::Fgsm, eps)).unwrap();
        for i in 0..n {
            let g: f64 = (0..3).map(|k| w.data()[k * n + i] * delta[k]).sum();
            let expect = (x.data()[i] + eps * g.signum()).clamp(0.0, 1.0);
            assert!((r.x_adv.data()[i] - expect).abs() < 1e-15);
            // all pixels start inside [0.05, 0.95], so every step is unsaturated
            assert!(((r.x_adv.data()[i] - x.data()[i]).abs() - eps).abs() < 1e-12);
        }
    }

    #[test]
    fn single_step_ifgsm_is_fgsm() {
        let (m, x) = (cnn(3), image(3));
        let eps = 8.0 / 255.0;
        let one = AttackConfig { iters: 1, alpha: eps, ..cfg(Method::Ifgsm, eps) };
        let a = ifgsm(std::slice::from_ref(&m), &x, 0, &one).unwrap();
        let b = fgsm(&[m], &x, 0, &cfg(Method::Fgsm, eps)).unwrap();
        assert!(same_trajectory(&a, &b));
    }

    #[test]
    fn reductions_are_bit_exact() {
        let (m, x) = (cnn(4), image(4));
        let models = [m];
        let eps = 16.0 / 255.0;
        let base = ifgsm(&models, &x, 1, &cfg(Method::Ifgsm, eps)).unwrap();
        let mi = mifgsm(&models, &x, 1, &AttackConfig { momentum: 0.0, ..cfg(Method::Mifgsm, eps) }).unwrap();
        let di = dim(&models, &x, 1, &AttackConfig { p: 0.0, ..cfg(Method::Dim, eps) }).unwrap();
        let ti = tim(&models, &x, 1, &AttackConfig { kernel: KernelSpec::delta(7), ..cfg(Method::Tim, eps) }).unwrap();
        let tidi =
            tidim(&models, &x, 1, &AttackConfig { kernel: KernelSpec::delta(7), p: 0.0, ..cfg(Method::Tidim, eps) })
                .unwrap();
        for other in [&mi, &di, &ti, &tidi] {
            assert!(same_trajectory(&base, other));
        }
        // tidim with a delta kernel keeps the dim trajectory under the same seed
        let d = dim(&models, &x, 1, &cfg(Method::Dim, eps)).unwrap();
        let td =
            tidim(&models, &x, 1, &AttackConfig { kernel: KernelSpec::delta(3), ..cfg(Method::Tidim, eps) }).unwrap();
        assert!(same_trajectory(&d, &td));
    }

    #[test]
    fn full_momentum_in_a_constant_field_matches_ifgsm() {
        // two-class softmax regression: grad = p1 (w1 - w0) for y = 0, so the
        // gradient direction never changes
        let m = super::super::testutil::logistic_k(6, 2);
        let x = image(6);
        let eps = 4.0 / 255.0;
        let a = ifgsm(std::slice::from_ref(&m), &x, 0, &AttackConfig { alpha: 0.5 / 255.0, ..cfg(Method::Ifgsm, eps) })
            .unwrap();
        let b = mifgsm(&[m], &x, 0, &AttackConfig { alpha: 0.5 / 255.0, momentum: 1.0, ..cfg(Method::Mifgsm, eps) })
            .unwrap();
        assert!(same_trajectory(&a, &b));
    }

    #[test]
    fn mifgsm_matches_straight_line_reference() {
        let m = logistic(7);
        let x = image(7);
        let (eps, alpha, mu, y) = (0.05, 0.006, 0.9, 1);
        let c = AttackConfig { iters: 10, alpha, momentum: mu, ..cfg(Method::Mifgsm, eps) };
        let r = mifgsm(std::slice::from_ref(&m), &x, y, &c).unwrap();

        let dense = &m.layers()[1];
        let (w, b) = (dense.weight.as_ref().unwrap().data(), dense.bias.as_ref().unwrap().data());
        let n = x.numel();
        let mut xa = x.data().to_vec();
        let mut acc = vec![0.0; n];
        let traj = r.trajectory.as_ref().unwrap();
        for step in 0..10 {
            let z: Vec<f64> = (0..3).map(|k| b[k] + (0..n).map(|i| w[k * n + i] * xa[i]).sum::<f64>()).collect();
            let zmax = z.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
            let s: f64 = e.iter().sum();
            let g: Vec<f64> =
                (0..n).map(|i| (0..3).map(|k| w[k * n + i] * (e[k] / s - (k == y) as u8 as f64)).sum()).collect();
            let l1: f64 = g.iter().map(|v| v.abs()).sum();
            for i in 0..n {
                acc[i] = mu * acc[i] + g[i] / l1;
                let v = xa[i] + alpha * acc[i].signum();
                xa[i] = v.max(x.data()[i] - eps).max(0.0).min(x.data()[i] + eps).min(1.0);
            }
            for i in 0..n {
                assert!((traj[step].data()[i] - xa[i]).abs() < 1e-12, "step {step} pixel {i}");
            }
        }
    }

    #[test]
    fn ifgsm_loss_rises_on_logistic_model() {
        let m = logistic(8);
        let x = image(8);
        let c = AttackConfig { iters: 10, alpha: 0.5 / 255.0, ..cfg(Method::Ifgsm, 8.0 / 255.0) };
        let r = ifgsm(std::slice::from_ref(&m), &x, 2, &c).unwrap();
        let mut last = ensemble_loss_value(std::slice::from_ref(&m), &x, 2).unwrap();
        for xt in r.trajectory.as_ref().unwrap() {
            assert!(xt.max_abs_diff(&x).unwrap() <= c.eps + 1e-12);
            assert!(xt.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let l = ensemble_loss_value(std::slice::from_ref(&m), xt, 2).unwrap();
            assert!(l >= last, "{l} < {last}");
            last = l;
        }
    }

    #[test]
    fn diversity_probabilities_and_determinism() {
        let x = image(10);
        for seed in 0..20 {
            let mut r = rng::stream(seed, &[]);
            assert!(input_diversity(&x, 0.0, &mut r).unwrap().bit_eq(&x));
        }
        let a = input_diversity(&x, 1.0, &mut rng::stream(3, &[])).unwrap();
        let b = input_diversity(&x, 1.0, &mut rng::stream(3, &[])).unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(a.shape(), &SHAPE);
        // some seed must actually shrink a 12 px image (sizes 11 or 12)
        let changed = (0..20).any(|s| !input_diversity(&x, 1.0, &mut rng::stream(s, &[])).unwrap().bit_eq(&x));
        assert!(changed);
    }

    #[test]
    fn diversity_gradient_matches_finite_differences() {
        let x = image(11);
        let weights = image(12);
        for seed in 0..10 {
            let err = finite_diff_check(
                |t, v| {
                    let mut r = rng::stream(seed, &[]);
                    let out = input_diversity_on_tape(t, v, 1.0, &mut r)?;
                    let w = t.constant(weights.clone());
                    t.dot(out, w)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn outputs_respect_the_ball_and_are_deterministic() {
        let models = [cnn(13), cnn(14)];
        let x = image(13);
        let eps = 8.0 / 255.0;
        for method in [Method::Ifgsm, Method::Mifgsm, Method::Dim, Method::Tim, Method::Tidim] {
            let c = cfg(method, eps);
            let a = super::super::run(&models, &x, 0, &c).unwrap();
            let b = super::super::run(&models, &x, 0, &c).unwrap();
            assert_eq!(a, b);
            assert!(a.linf_vs_original <= eps + 1e-9);
            assert!(a.x_adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(a.success, a.predicted != 0);
        }
    }

    #[test]
    fn early_stop_cuts_iterations() {
        let m = cnn(15);
        let x = image(15);
        let y = m.predict(&x).unwrap();
        let c = AttackConfig { iters: 40, early_stop: true, ..cfg(Method::Ifgsm, 0.3) };
        let r = ifgsm(&[m], &x, y, &c).unwrap();
        if r.success {
            assert!(r.iterations_used <= 40);
            let traj = r.trajectory.unwrap();
            assert_eq!(traj.len(), r.iterations_used);
        }
    }

    #[test]
    fn tim_uses_smoothed_direction() {
        let (m, x) = (cnn(16), image(16));
        let c = AttackConfig { iters: 1, ..cfg(Method::Tim, 0.03) };
        let r = tim(std::slice::from_ref(&m), &x, 1, &c).unwrap();
        let (_, g) = loss_gradient(&[m], &x, 1, None).unwrap();
        let s = kernels::depthwise_same(&g, &c.kernel.realize().unwrap()).unwrap();
        let expect =
            clip_ball(&x.zip_map(&s, "t", |a, b| a + c.alpha * crate::tensor::sign(b)).unwrap(), &x, c.eps).unwrap();
        assert!(r.x_adv.bit_eq(&expect));
    }
}
