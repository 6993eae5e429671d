use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use super::report::{asr, CurvePoint, SampleError, SampleRecord, SweepReport};
use crate::attacks::{self, AttackConfig, AttackResult, Method};
use crate::classifier::{Model, Sample};
use crate::error::{Error, Result};
use crate::pdr::{pdr_attack, MisKind, PdrConfig};
use crate::rng::derive_seed;

/// Which attack loss PDR wraps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum PdrWrap {
    Plain,
    Mifgsm,
    Dim,
    Tidim,
    Ilap,
    Ilaf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum MethodSpec {
    Baseline(Method),
    Pdr(PdrWrap),
}

const PDR_NAMES: [(PdrWrap, &str); 6] = [
    (PdrWrap::Plain, "pdr"),
    (PdrWrap::Mifgsm, "mifgsm-pdr"),
    (PdrWrap::Dim, "dim-pdr"),
    (PdrWrap::Tidim, "tidim-pdr"),
    (PdrWrap::Ilap, "ilap-pdr"),
    (PdrWrap::Ilaf, "ilaf-pdr"),
];

impl MethodSpec {
    pub fn all() -> Vec<MethodSpec> {
        Method::ALL
            .iter()
            .map(|&m| MethodSpec::Baseline(m))
            .chain(PDR_NAMES.iter().map(|&(w, _)| MethodSpec::Pdr(w)))
            .collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            MethodSpec::Baseline(m) => m.name(),
            MethodSpec::Pdr(w) => PDR_NAMES.iter().find(|(v, _)| *v == w).expect("listed").1,
        }
    }

    pub fn is_pdr(self) -> bool {
        matches!(self, MethodSpec::Pdr(_))
    }

    /// The `L_mis` used for this wrapper; `mifgsm-pdr` averages over all
    /// source models when more than one is given.
    pub fn mis_kind(self, n_models: usize) -> Option<MisKind> {
        let MethodSpec::Pdr(w) = self else { return None };
        Some(match w {
            PdrWrap::Plain => MisKind::Ce,
            PdrWrap::Mifgsm if n_models > 1 => MisKind::EnsembleCe,
            PdrWrap::Mifgsm => MisKind::Ce,
            PdrWrap::Dim => MisKind::DimCe,
            PdrWrap::Tidim => MisKind::TidimCe,
            PdrWrap::Ilap => MisKind::Ilap,
            PdrWrap::Ilaf => MisKind::Ilaf,
        })
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if let Some(&(w, _)) = PDR_NAMES.iter().find(|(_, n)| *n == s) {
            return Ok(MethodSpec::Pdr(w));
        }
        s.parse::<Method>().map(MethodSpec::Baseline).map_err(|_| {
            let names: Vec<&str> = MethodSpec::all().into_iter().map(MethodSpec::name).collect();
            Error::Config(format!("unknown method `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

/// The hyperparameter a sweep varies along its grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Vary {
    Eps,
    Threshold,
    Lambda0,
}

impl Vary {
    pub fn name(self) -> &'static str {
        match self {
            Vary::Eps => "eps",
            Vary::Threshold => "T",
            Vary::Lambda0 => "lambda0",
        }
    }
}

impl fmt::Display for Vary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Vary {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eps" => Ok(Vary::Eps),
            "T" | "threshold" => Ok(Vary::Threshold),
            "lambda0" => Ok(Vary::Lambda0),
            _ => Err(Error::Config(format!("unknown sweep variable `{s}` (expected eps, T or lambda0)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub methods: Vec<MethodSpec>,
    pub vary: Vary,
    pub grid: Vec<f64>,
    pub seed: u64,
    /// Template for baseline methods; `method`, `eps` and `seed` are set per cell.
    pub attack: AttackConfig,
    /// Fixed step size for baselines; `None` keeps the per-eps default.
    pub alpha: Option<f64>,
    /// Template for PDR methods; `mis`, the varied field and `seed` are set per cell.
    pub pdr: PdrConfig,
    /// Evaluate on the first `n_eval` samples only.
    pub n_eval: Option<usize>,
    pub parallel: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            methods: vec![MethodSpec::Baseline(Method::Ifgsm)],
            vary: Vary::Eps,
            grid: [2.0, 4.0, 8.0, 16.0].iter().map(|v| v / 255.0).collect(),
            seed: 0,
            attack: AttackConfig::new(Method::Ifgsm, 16.0 / 255.0),
            alpha: None,
            pdr: PdrConfig::default(),
            n_eval: None,
            parallel: true,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.grid.is_empty() {
            return Err(Error::Config("sweep needs at least one method and one grid value".into()));
        }
        if let Some(v) = self.grid.iter().find(|v| !v.is_finite()) {
            return Err(Error::Config(format!("grid value {v} is not finite")));
        }
        if self.vary != Vary::Eps {
            if let Some(m) = self.methods.iter().find(|m| !m.is_pdr()) {
                return Err(Error::Config(format!(
                    "method `{m}` has no `{}` parameter; baselines only sweep eps",
                    self.vary
                )));
            }
        }
        Ok(())
    }

    fn cell_attack(&self, method: Method, hyper: f64, seed: u64) -> AttackConfig {
        let mut cfg = AttackConfig { method, seed, ..self.attack.clone() };
        cfg.eps = hyper;
        cfg.alpha = self.alpha.unwrap_or(AttackConfig::new(method, hyper).alpha);
        cfg
    }

    fn cell_pdr(&self, mis: MisKind, hyper: f64, seed: u64) -> PdrConfig {
        let mut cfg = PdrConfig { mis, seed, ..self.pdr.clone() };
        match self.vary {
            Vary::Eps => cfg.eps = hyper,
            Vary::Threshold => cfg.threshold = hyper,
            Vary::Lambda0 => cfg.lambda0 = hyper,
        }
        cfg
    }
}

/// Runs one (method, hyper) cell on one sample. The success flag and
/// prediction come from `target` when given, otherwise from `models[0]`.
pub fn run_cell(
    models: &[Model],
    target: Option<&Model>,
    method: MethodSpec,
    hyper: f64,
    sample_id: usize,
    sample: &Sample,
    cfg: &SweepConfig,
) -> Result<SampleRecord> {
    let seed = derive_seed(cfg.seed, &[sample_id as u64]);
    let result: AttackResult = match method {
        MethodSpec::Baseline(m) => attacks::run(models, &sample.image, sample.label, &cfg.cell_attack(m, hyper, seed))?,
        MethodSpec::Pdr(_) => {
            let mis = method.mis_kind(models.len()).expect("pdr method");
            pdr_attack(models, &sample.image, sample.label, &cfg.cell_pdr(mis, hyper, seed))?.0
        }
    };
    let predicted = match target {
        Some(t) => t.predict(&result.x_adv)?,
        None => result.predicted,
    };
    Ok(SampleRecord {
        method: method.name().to_string(),
        hyper,
        sample_id,
        label: sample.label,
        predicted,
        success: predicted != sample.label,
        ssim: result.ssim_vs_original,
        linf: result.linf_vs_original,
        iterations: result.iterations_used,
    })
}

fn map_units<T: Sync, R: Send>(units: &[T], parallel: bool, f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return units.par_iter().map(f).collect();
    }
    let _ = parallel;
    units.iter().map(f).collect()
}

/// Every method at every grid value over the evaluation samples. Per-sample
/// failures are itemised in `errors`; a cell in which every sample failed
/// is an error.
pub fn sweep(models: &[Model], target: Option<&Model>, samples: &[Sample], cfg: &SweepConfig) -> Result<SweepReport> {
    cfg.validate()?;
    if models.is_empty() {
        return Err(Error::invalid("sweep", "no source model"));
    }
    let n = cfg.n_eval.map_or(samples.len(), |n| n.min(samples.len()));
    if n == 0 {
        return Err(Error::invalid("sweep", "empty evaluation set"));
    }
    let cells: Vec<(MethodSpec, f64)> =
        cfg.methods.iter().flat_map(|&m| cfg.grid.iter().map(move |&h| (m, h))).collect();
    let units: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..n).map(move |i| (c, i))).collect();
    let outcomes = map_units(&units, cfg.parallel, |&(c, i)| {
        let (method, hyper) = cells[c];
        run_cell(models, target, method, hyper, i, &samples[i], cfg)
    });

    let mut report = SweepReport::default();
    let mut per_cell: Vec<(Vec<SampleRecord>, usize)> = vec![(Vec::new(), 0); cells.len()];
    for (&(c, i), outcome) in units.iter().zip(outcomes) {
        let (method, hyper) = cells[c];
        match outcome {
            Ok(r) => per_cell[c].0.push(r),
            Err(e) => {
                per_cell[c].1 += 1;
                report.errors.push(SampleError {
                    method: method.name().into(),
                    hyper,
                    sample_id: i,
                    message: e.to_string(),
                });
            }
        }
    }
    for (&(method, hyper), (records, errors)) in cells.iter().zip(per_cell) {
        if records.is_empty() {
            return Err(Error::invalid("sweep", format!("every sample failed for {method} at {} = {hyper}", cfg.vary)));
        }
        report.points.push(CurvePoint {
            method: method.name().into(),
            vary: cfg.vary.name().into(),
            hyper,
            asr: asr(&records)?,
            mean_ssim: records.iter().map(|r| r.ssim).sum::<f64>() / records.len() as f64,
            n: records.len(),
            errors,
        });
        report.records.extend(records);
    }
    Ok(report)
}
