use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{cross_entropy, LayerSpec, Model, Sample};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 6, batch_size: 8, learning_rate: 0.05, seed: 1 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("training settings must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

pub fn accuracy(model: &Model, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("accuracy", "empty sample set"));
    }
    let mut correct = 0usize;
    for s in samples {
        if model.predict(&s.image)? == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Mean cross-entropy over `batch`; returns the loss and per-layer
/// `(weight, bias)` gradients in layer order.
pub(crate) fn batch_gradients(
    model: &Model,
    batch: &[&Sample],
) -> Result<(f64, Vec<Option<(crate::Tensor, crate::Tensor)>>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let mut total = None;
    for s in batch {
        let x = tape.constant(s.image.clone());
        let (logits, _) = model.forward_on(&mut tape, &bound, x, None)?;
        let ce = cross_entropy(&mut tape, logits, s.label)?;
        total = Some(match total {
            Some(t) => tape.add(t, ce)?,
            None => ce,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("train", "empty batch"))?;
    let loss = tape.mul_scalar(total, 1.0 / batch.len() as f64)?;
    let mut grads = tape.backward(loss)?;
    let mut per_layer = vec![None; model.layers().len()];
    for (i, w, b) in bound.param_vars() {
        per_layer[i] = Some((grads.take(w).expect("param"), grads.take(b).expect("param")));
    }
    Ok((tape.value(loss).item(), per_layer))
}

/// Plain minibatch gradient descent on mean cross-entropy. Deterministic in
/// `cfg.seed` (initialisation and per-epoch shuffles).
pub fn train(
    train_set: &[Sample],
    test_set: &[Sample],
    architecture: Vec<(String, LayerSpec)>,
    cfg: &TrainConfig,
) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    let Some(first) = train_set.first() else {
        return Err(Error::invalid("train", "empty dataset"));
    };
    let input_shape: [usize; 3] = first
        .image
        .shape()
        .try_into()
        .map_err(|_| Error::shape("train", format!("images must be (C, H, W), got {:?}", first.image.shape())))?;
    let mut model = Model::init(input_shape, architecture, cfg.seed)?;
    if let Some(bad) = train_set.iter().chain(test_set).find(|s| s.label >= model.classes()) {
        return Err(Error::invalid("train", format!("label {} out of range", bad.label)));
    }

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, &[0x7a1, epoch as u64]));
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = batch_gradients(&model, &batch)?;
            for (layer, g) in model.layers_mut().iter_mut().zip(grads) {
                let Some((gw, gb)) = g else { continue };
                let step = |p: &mut crate::Tensor, g: &crate::Tensor| {
                    p.data_mut().iter_mut().zip(g.data()).for_each(|(v, g)| *v -= cfg.learning_rate * g);
                };
                step(layer.weight.as_mut().expect("param"), &gw);
                step(layer.bias.as_mut().expect("param"), &gb);
            }
            sum += loss;
            batches += 1;
        }
        epoch_losses.push(sum / batches as f64);
    }
    if !model.all_finite() {
        return Err(Error::NonFinite { context: "train", value: f64::NAN });
    }
    let report = TrainReport {
        epoch_losses,
        train_accuracy: accuracy(&model, train_set)?,
        test_accuracy: if test_set.is_empty() { None } else { Some(accuracy(&model, test_set)?) },
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::default_architecture;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn sample(seed: u64, label: usize) -> Sample {
        let mut r = rng::stream(seed, &[]);
        let image = Tensor::new(&[3, 12, 12], (0..432).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap();
        Sample { image, label }
    }

    #[test]
    fn memorises_a_single_sample() {
        let data = [sample(1, 2)];
        let cfg = TrainConfig { epochs: 30, batch_size: 1, learning_rate: 0.05, seed: 3 };
        let (_, report) = train(&data, &[], default_architecture([3, 12, 12], 3), &cfg).unwrap();
        assert_eq!(report.train_accuracy, 1.0);
    }

    #[test]
    fn same_seed_same_parameters() {
        let data: Vec<Sample> = (0..6).map(|i| sample(i, i as usize % 3)).collect();
        let cfg = TrainConfig { epochs: 2, batch_size: 4, learning_rate: 0.05, seed: 11 };
        let (a, _) = train(&data, &[], default_architecture([3, 12, 12], 3), &cfg).unwrap();
        let (b, _) = train(&data, &[], default_architecture([3, 12, 12], 3), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_empty_and_out_of_range() {
        let cfg = TrainConfig::default();
        assert!(train(&[], &[], default_architecture([3, 12, 12], 3), &cfg).is_err());
        assert!(train(&[sample(0, 5)], &[], default_architecture([3, 12, 12], 3), &cfg).is_err());
        let bad = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(train(&[sample(0, 1)], &[], default_architecture([3, 12, 12], 3), &bad).is_err());
    }

    // Central differences on every parameter of a 4-sample batch loss.
    #[test]
    fn parameter_gradients_match_finite_differences() {
        let model = Model::init([3, 12, 12], default_architecture([3, 12, 12], 3), 5).unwrap();
        let data: Vec<Sample> = (0..4).map(|i| sample(100 + i, i as usize % 3)).collect();
        let batch: Vec<&Sample> = data.iter().collect();
        let (_, grads) = batch_gradients(&model, &batch).unwrap();
        let loss_at = |m: &Model| -> f64 {
            let mut total = 0.0;
            for s in &data {
                total += super::super::cross_entropy_value(&m.forward(&s.image).unwrap(), s.label).unwrap();
            }
            total / data.len() as f64
        };
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for li in 0..model.layers().len() {
            let Some((gw, gb)) = &grads[li] else { continue };
            for (which, g) in [(0, gw), (1, gb)] {
                for i in 0..g.numel() {
                    let mut plus = model.clone();
                    let mut minus = model.clone();
                    *param_mut(&mut plus, li, which, i) += h;
                    *param_mut(&mut minus, li, which, i) -= h;
                    let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                    worst = worst.max((g.data()[i] - numeric).abs() / numeric.abs().max(1.0));
                }
            }
        }
        assert!(worst < 1e-6, "worst relative error {worst}");
    }

    fn param_mut(m: &mut Model, layer: usize, which: usize, i: usize) -> &mut f64 {
        let l = &mut m.layers_mut()[layer];
        let t = if which == 0 { l.weight.as_mut() } else { l.bias.as_mut() };
        &mut t.unwrap().data_mut()[i]
    }
}
