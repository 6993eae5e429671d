//! Browser demo: train a small classifier on the synthetic patterns, then
//! attack a test image with a baseline or with the SSIM-penalised attack and
//! look at the result, its perturbation and its SSIM map.

use pdr_core::attacks::{self, AttackConfig, Method};
use pdr_core::classifier::{accuracy, default_architecture, train, Model, TrainConfig};
use pdr_core::harness::{gen_dataset, Dataset, DatasetSpec};
use pdr_core::pdr::{pdr_attack, PdrConfig};
use pdr_core::perceptual::{ssim, SsimConfig};
use pdr_core::Tensor;
use wasm_bindgen::prelude::*;

pub const SIDE: usize = 24;

fn demo_spec(seed: u64) -> DatasetSpec {
    DatasetSpec { seed, classes: 5, n_train: 400, n_test: 50, shape: [3, SIDE, SIDE], noise: 0.04 }
}

/// `(C, H, W)` in `[0, 1]` to row-major RGBA bytes. One channel is shown as grey.
pub fn to_rgba(t: &Tensor) -> Vec<u8> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let d = t.data();
    let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut out = Vec::with_capacity(4 * h * w);
    for p in 0..h * w {
        for ch in 0..3 {
            out.push(byte(d[ch.min(c - 1) * h * w + p]));
        }
        out.push(255);
    }
    out
}

/// Perturbation `x_adv - x` scaled so that `±eps` spans the full range around grey.
pub fn perturbation_rgba(x_adv: &Tensor, x: &Tensor, eps: f64) -> Vec<u8> {
    let scale = if eps > 0.0 { 0.5 / eps } else { 0.0 };
    let diff = x_adv.zip_map(x, "perturbation", |a, b| 0.5 + (a - b) * scale).expect("same shape");
    to_rgba(&diff)
}

/// Channel-averaged SSIM map as a dark (low) to bright (high) heat map.
pub fn ssim_map_rgba(map: &Tensor) -> Vec<u8> {
    let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let d = map.data();
    let mut out = Vec::with_capacity(4 * h * w);
    for p in 0..h * w {
        let v = (0..c).map(|ch| d[ch * h * w + p]).sum::<f64>() / c as f64;
        let t = v.clamp(0.0, 1.0);
        out.extend([(255.0 * t) as u8, (255.0 * t * t) as u8, (255.0 * (1.0 - t) * 0.6) as u8, 255]);
    }
    out
}

#[wasm_bindgen]
pub struct AttackView {
    original: Vec<u8>,
    adversarial: Vec<u8>,
    perturbation: Vec<u8>,
    ssim_map: Vec<u8>,
    map_side: usize,
    ssim: f64,
    linf: f64,
    label: usize,
    predicted: usize,
    iterations: usize,
    lambdas: Vec<f64>,
    ssims: Vec<f64>,
}

#[wasm_bindgen]
impl AttackView {
    pub fn original(&self) -> Vec<u8> {
        self.original.clone()
    }
    pub fn adversarial(&self) -> Vec<u8> {
        self.adversarial.clone()
    }
    pub fn perturbation(&self) -> Vec<u8> {
        self.perturbation.clone()
    }
    pub fn ssim_map(&self) -> Vec<u8> {
        self.ssim_map.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn side(&self) -> usize {
        SIDE
    }
    #[wasm_bindgen(getter)]
    pub fn map_side(&self) -> usize {
        self.map_side
    }
    #[wasm_bindgen(getter)]
    pub fn ssim(&self) -> f64 {
        self.ssim
    }
    #[wasm_bindgen(getter)]
    pub fn linf(&self) -> f64 {
        self.linf
    }
    #[wasm_bindgen(getter)]
    pub fn label(&self) -> usize {
        self.label
    }
    #[wasm_bindgen(getter)]
    pub fn predicted(&self) -> usize {
        self.predicted
    }
    #[wasm_bindgen(getter)]
    pub fn success(&self) -> bool {
        self.predicted != self.label
    }
    #[wasm_bindgen(getter)]
    pub fn iterations(&self) -> usize {
        self.iterations
    }
    /// Penalty factor per iteration (empty for baselines).
    pub fn lambdas(&self) -> Vec<f64> {
        self.lambdas.clone()
    }
    pub fn ssims(&self) -> Vec<f64> {
        self.ssims.clone()
    }
}

#[wasm_bindgen]
pub struct Demo {
    data: Dataset,
    model: Model,
    test_accuracy: f64,
}

impl Demo {
    pub fn build(seed: u64, epochs: usize) -> Result<Demo, String> {
        let data = gen_dataset(&demo_spec(seed)).map_err(|e| e.to_string())?;
        let cfg = TrainConfig { epochs, seed: seed.wrapping_add(1), ..TrainConfig::default() };
        let arch = default_architecture(data.spec.shape, data.spec.classes);
        let (model, _) = train(&data.train, &data.test, arch, &cfg).map_err(|e| e.to_string())?;
        let test_accuracy = accuracy(&model, &data.test).map_err(|e| e.to_string())?;
        Ok(Demo { data, model, test_accuracy })
    }

    fn view(
        &self,
        index: usize,
        x_adv: &Tensor,
        eps: f64,
        iterations: usize,
        trace: (Vec<f64>, Vec<f64>),
    ) -> Result<AttackView, String> {
        let s = &self.data.test[index];
        let res = ssim(x_adv, &s.image, &SsimConfig::default()).map_err(|e| e.to_string())?;
        Ok(AttackView {
            original: to_rgba(&s.image),
            adversarial: to_rgba(x_adv),
            perturbation: perturbation_rgba(x_adv, &s.image, eps),
            map_side: res.map.shape()[1],
            ssim_map: ssim_map_rgba(&res.map),
            ssim: res.mean,
            linf: x_adv.max_abs_diff(&s.image).map_err(|e| e.to_string())?,
            label: s.label,
            predicted: self.model.predict(x_adv).map_err(|e| e.to_string())?,
            iterations,
            lambdas: trace.0,
            ssims: trace.1,
        })
    }

    fn sample(&self, index: usize) -> Result<&pdr_core::classifier::Sample, String> {
        self.data.test.get(index).ok_or_else(|| format!("no test image {index}"))
    }

    pub fn run_baseline(&self, index: usize, method: &str, eps: f64) -> Result<AttackView, String> {
        let s = self.sample(index)?;
        let method: Method = method.parse().map_err(|e: pdr_core::Error| e.to_string())?;
        let cfg = AttackConfig::new(method, eps);
        let r = attacks::run(std::slice::from_ref(&self.model), &s.image, s.label, &cfg).map_err(|e| e.to_string())?;
        self.view(index, &r.x_adv, eps, r.iterations_used, (Vec::new(), Vec::new()))
    }

    pub fn run_pdr(&self, index: usize, threshold: f64, lambda0: f64, eps: f64) -> Result<AttackView, String> {
        let s = self.sample(index)?;
        let cfg = PdrConfig { threshold, lambda0, eps, ..PdrConfig::default() };
        let (r, trace) =
            pdr_attack(std::slice::from_ref(&self.model), &s.image, s.label, &cfg).map_err(|e| e.to_string())?;
        let ssims = trace.records.iter().map(|t| t.l_pd).collect();
        self.view(index, &r.x_adv, eps, r.iterations_used, (trace.lambdas(), ssims))
    }
}

#[wasm_bindgen]
impl Demo {
    /// Generates the dataset and trains the model; takes a few seconds.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, epochs: u32) -> Result<Demo, JsError> {
        Demo::build(seed as u64, epochs as usize).map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(getter)]
    pub fn test_accuracy(&self) -> f64 {
        self.test_accuracy
    }

    #[wasm_bindgen(getter)]
    pub fn test_count(&self) -> usize {
        self.data.test.len()
    }

    pub fn baseline(&self, index: usize, method: &str, eps: f64) -> Result<AttackView, JsError> {
        self.run_baseline(index, method, eps).map_err(|e| JsError::new(&e))
    }

    pub fn pdr(&self, index: usize, threshold: f64, lambda0: f64, eps: f64) -> Result<AttackView, JsError> {
        self.run_pdr(index, threshold, lambda0, eps).map_err(|e| JsError::new(&e))
    }
}
