use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleRecord {
    pub method: String,
    /// Value of the swept hyperparameter (eps, T or lambda0).
    pub hyper: f64,
    pub sample_id: usize,
    pub label: usize,
    pub predicted: usize,
    pub success: bool,
    pub ssim: f64,
    pub linf: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleError {
    pub method: String,
    pub hyper: f64,
    pub sample_id: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub method: String,
    /// Name of the swept hyperparameter.
    pub vary: String,
    pub hyper: f64,
    pub asr: f64,
    pub mean_ssim: f64,
    pub n: usize,
    pub errors: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SweepReport {
    pub points: Vec<CurvePoint>,
    pub records: Vec<SampleRecord>,
    pub errors: Vec<SampleError>,
}

impl SweepReport {
    pub fn curve(&self, method: &str) -> Vec<CurvePoint> {
        self.points.iter().filter(|p| p.method == method).cloned().collect()
    }
}

/// `1 - #correct / #total`, where correct means the prediction on `x_adv`
/// still equals the label.
pub fn asr(records: &[SampleRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("asr", "no records"));
    }
    let correct = records.iter().filter(|r| r.predicted == r.label).count();
    Ok(1.0 - correct as f64 / records.len() as f64)
}

/// `%g`-style formatting with 6 significant digits.
pub fn fmt_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return if v.is_nan() {
            "nan".into()
        } else if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-4..6).contains(&exp) {
        trim(&format!("{:.*}", (5 - exp).max(0) as usize, v))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa), exp.abs())
    }
}

const CURVE_HEADER: [&str; 7] = ["method", "vary", "hyper", "asr", "mean_ssim", "n", "errors"];
const SAMPLE_HEADER: [&str; 9] =
    ["method", "hyper", "sample_id", "label", "predicted", "success", "ssim", "linf", "iterations"];

fn sorted_points(points: &[CurvePoint]) -> Vec<&CurvePoint> {
    let mut v: Vec<&CurvePoint> = points.iter().collect();
    v.sort_by(|a, b| a.method.cmp(&b.method).then(a.hyper.total_cmp(&b.hyper)));
    v
}

pub fn write_curve_csv<W: Write>(points: &[CurvePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CURVE_HEADER)?;
    for p in sorted_points(points) {
        w.write_record([
            p.method.clone(),
            p.vary.clone(),
            fmt_sig6(p.hyper),
            fmt_sig6(p.asr),
            fmt_sig6(p.mean_ssim),
            p.n.to_string(),
            p.errors.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("csv", e))
}

pub fn write_samples_csv<W: Write>(records: &[SampleRecord], out: W) -> Result<()> {
    let mut rows: Vec<&SampleRecord> = records.iter().collect();
    rows.sort_by(|a, b| a.method.cmp(&b.method).then(a.hyper.total_cmp(&b.hyper)).then(a.sample_id.cmp(&b.sample_id)));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SAMPLE_HEADER)?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            fmt_sig6(r.hyper),
            r.sample_id.to_string(),
            r.label.to_string(),
            r.predicted.to_string(),
            r.success.to_string(),
            fmt_sig6(r.ssim),
            fmt_sig6(r.linf),
            r.iterations.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("csv", e))
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::io(path, e))
}

pub fn emit_curve_csv(points: &[CurvePoint], path: impl AsRef<Path>) -> Result<()> {
    write_curve_csv(points, create(path.as_ref())?)
}

pub fn emit_samples_csv(records: &[SampleRecord], path: impl AsRef<Path>) -> Result<()> {
    write_samples_csv(records, create(path.as_ref())?)
}

fn rows<R: Read>(input: R, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let found: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if found != header {
        return Err(Error::Config(format!("unexpected CSV header {found:?}, expected {header:?}")));
    }
    r.records().map(|row| row.map_err(Error::from)).collect()
}

fn field<T: std::str::FromStr>(row: &csv::StringRecord, i: usize, name: &str) -> Result<T> {
    let raw = row.get(i).unwrap_or("");
    raw.parse().map_err(|_| Error::Config(format!("bad `{name}` value `{raw}` in CSV")))
}

pub fn read_curve_csv<R: Read>(input: R) -> Result<Vec<CurvePoint>> {
    rows(input, &CURVE_HEADER)?
        .iter()
        .map(|row| {
            Ok(CurvePoint {
                method: field(row, 0, "method")?,
                vary: field(row, 1, "vary")?,
                hyper: field(row, 2, "hyper")?,
                asr: field(row, 3, "asr")?,
                mean_ssim: field(row, 4, "mean_ssim")?,
                n: field(row, 5, "n")?,
                errors: field(row, 6, "errors")?,
            })
        })
        .collect()
}

pub fn read_samples_csv<R: Read>(input: R) -> Result<Vec<SampleRecord>> {
    rows(input, &SAMPLE_HEADER)?
        .iter()
        .map(|row| {
            Ok(SampleRecord {
                method: field(row, 0, "method")?,
                hyper: field(row, 1, "hyper")?,
                sample_id: field(row, 2, "sample_id")?,
                label: field(row, 3, "label")?,
                predicted: field(row, 4, "predicted")?,
                success: field(row, 5, "success")?,
                ssim: field(row, 6, "ssim")?,
                linf: field(row, 7, "linf")?,
                iterations: field(row, 8, "iterations")?,
            })
        })
        .collect()
}

pub fn load_curve_csv(path: impl AsRef<Path>) -> Result<Vec<CurvePoint>> {
    let path = path.as_ref();
    read_curve_csv(File::open(path).map_err(|e| Error::io(path, e))?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub baseline_hyper: f64,
    pub asr: f64,
    pub ssim_baseline: f64,
    /// PDR SSIM interpolated at the same ASR; `None` when out of range.
    pub ssim_pdr: Option<f64>,
    pub delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub matched: usize,
    pub improved: usize,
    /// Every matched point has `delta >= 0` (and at least one matched).
    pub weakly_dominates: bool,
}

/// `(asr, ssim)` sorted by ASR, with points of equal ASR averaged.
fn monotone_curve(points: &[CurvePoint]) -> Vec<(f64, f64)> {
    let mut v: Vec<(f64, f64)> = points.iter().map(|p| (p.asr, p.mean_ssim)).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut out: Vec<(f64, f64, usize)> = Vec::new();
    for (a, s) in v {
        match out.last_mut() {
            Some(last) if last.0 == a => {
                last.1 += s;
                last.2 += 1;
            }
            _ => out.push((a, s, 1)),
        }
    }
    out.into_iter().map(|(a, s, n)| (a, s / n as f64)).collect()
}

fn interpolate(curve: &[(f64, f64)], asr: f64, tol: f64) -> Option<f64> {
    let (first, last) = (curve.first()?, curve.last()?);
    if asr < first.0 - tol || asr > last.0 + tol {
        return None;
    }
    if asr <= first.0 {
        return Some(first.1);
    }
    if asr >= last.0 {
        return Some(last.1);
    }
    let i = curve.iter().position(|p| p.0 >= asr).expect("inside range");
    let (a, b) = (curve[i - 1], curve[i]);
    Some(a.1 + (b.1 - a.1) * (asr - a.0) / (b.0 - a.0))
}

/// For each baseline point, PDR SSIM at equal ASR (linear interpolation
/// along the PDR curve, endpoints extended by `asr_tolerance`).
pub fn pareto_compare(baseline: &[CurvePoint], pdr: &[CurvePoint], asr_tolerance: f64) -> Result<Comparison> {
    if baseline.is_empty() || pdr.is_empty() {
        return Err(Error::invalid("pareto_compare", "both curves need at least one point"));
    }
    let curve = monotone_curve(pdr);
    let mut base: Vec<&CurvePoint> = baseline.iter().collect();
    base.sort_by(|a, b| a.asr.total_cmp(&b.asr).then(a.hyper.total_cmp(&b.hyper)));
    let rows: Vec<ComparisonRow> = base
        .into_iter()
        .map(|p| {
            let ssim_pdr = interpolate(&curve, p.asr, asr_tolerance);
            ComparisonRow {
                baseline_hyper: p.hyper,
                asr: p.asr,
                ssim_baseline: p.mean_ssim,
                ssim_pdr,
                delta: ssim_pdr.map(|s| s - p.mean_ssim),
            }
        })
        .collect();
    let deltas: Vec<f64> = rows.iter().filter_map(|r| r.delta).collect();
    Ok(Comparison {
        matched: deltas.len(),
        improved: deltas.iter().filter(|&&d| d > 0.0).count(),
        weakly_dominates: !deltas.is_empty() && deltas.iter().all(|&d| d >= 0.0),
        rows,
    })
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>10} {:>8} {:>10} {:>10} {:>10}", "hyper", "asr", "ssim_base", "ssim_pdr", "delta")?;
        for r in &self.rows {
            let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), fmt_sig6);
            writeln!(
                f,
                "{:>10} {:>8} {:>10} {:>10} {:>10}",
                fmt_sig6(r.baseline_hyper),
                fmt_sig6(r.asr),
                fmt_sig6(r.ssim_baseline),
                opt(r.ssim_pdr),
                opt(r.delta)
            )?;
        }
        let verdict = if self.matched == 0 {
            "incomparable: no ASR overlap"
        } else if self.weakly_dominates {
            "PDR weakly dominates"
        } else {
            "PDR does not dominate"
        };
        write!(f, "matched {} of {}, improved {}: {verdict}", self.matched, self.rows.len(), self.improved)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: usize, label: usize, predicted: usize) -> SampleRecord {
        SampleRecord {
            method: "ifgsm".into(),
            hyper: 0.1,
            sample_id: id,
            label,
            predicted,
            success: label != predicted,
            ssim: 0.9,
            linf: 0.01,
            iterations: 3,
        }
    }

    fn point(method: &str, hyper: f64, asr: f64, ssim: f64) -> CurvePoint {
        CurvePoint { method: method.into(), vary: "eps".into(), hyper, asr, mean_ssim: ssim, n: 10, errors: 0 }
    }

    #[test]
    fn asr_examples() {
        assert!(asr(&[]).is_err());
        assert_eq!(asr(&[rec(0, 1, 1), rec(1, 2, 2)]).unwrap(), 0.0);
        let big: Vec<_> = (0..1000).map(|i| rec(i, 0, if i < 900 { 0 } else { 1 })).collect();
        assert!((asr(&big).unwrap() - 0.1).abs() < 1e-15);
        let seven: Vec<_> = (0..7).map(|i| rec(i, 0, (i < 3) as usize)).collect();
        assert!((asr(&seven).unwrap() - 3.0 / 7.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn asr_equals_formula(preds in prop::collection::vec((0usize..3, 0usize..3), 1..60)) {
            let recs: Vec<_> = preds.iter().enumerate().map(|(i, &(l, p))| rec(i, l, p)).collect();
            let correct = preds.iter().filter(|(l, p)| l == p).count();
            prop_assert_eq!(asr(&recs).unwrap(), 1.0 - correct as f64 / preds.len() as f64);
        }

        #[test]
        fn sig6_roundtrip(v in prop::num::f64::NORMAL) {
            let back: f64 = fmt_sig6(v).parse().unwrap();
            prop_assert!(((back - v) / v).abs() <= 5e-6, "{} -> {}", v, fmt_sig6(v));
        }
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(fmt_sig6(0.0), "0");
        assert_eq!(fmt_sig6(0.5), "0.5");
        assert_eq!(fmt_sig6(16.0 / 255.0), "0.0627451");
        assert_eq!(fmt_sig6(1234567.0), "1.23457e+06");
        assert_eq!(fmt_sig6(0.00001234567), "1.23457e-05");
        assert_eq!(fmt_sig6(9999.0), "9999");
        assert_eq!(fmt_sig6(-2.5), "-2.5");
        assert_eq!(fmt_sig6(0.9999999), "1");
    }

    #[test]
    fn empty_report_is_header_only() {
        let mut buf = Vec::new();
        write_curve_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "method,vary,hyper,asr,mean_ssim,n,errors\n");
        let mut buf = Vec::new();
        write_samples_csv(&[], &mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 1);
    }

    #[test]
    fn csv_roundtrip_and_order() {
        let points = vec![
            point("tim", 0.5, 0.3, 0.91234567),
            point("dim", 0.25, 0.123456789, 0.8),
            point("dim", 0.125, 0.1, 0.85),
        ];
        let mut buf = Vec::new();
        write_curve_csv(&points, &mut buf).unwrap();
        let back = read_curve_csv(&buf[..]).unwrap();
        assert_eq!(
            back.iter().map(|p| (p.method.as_str(), p.hyper)).collect::<Vec<_>>(),
            vec![("dim", 0.125), ("dim", 0.25), ("tim", 0.5)]
        );
        for p in &points {
            let q = back.iter().find(|q| q.method == p.method && q.hyper == p.hyper).unwrap();
            assert!(((q.asr - p.asr) / p.asr).abs() < 5e-6);
            assert!(((q.mean_ssim - p.mean_ssim) / p.mean_ssim).abs() < 5e-6);
            assert_eq!((q.n, q.errors), (p.n, p.errors));
        }

        let recs = vec![rec(3, 0, 1), rec(1, 2, 2), SampleRecord { hyper: 0.05, ..rec(9, 1, 0) }];
        let mut buf = Vec::new();
        write_samples_csv(&recs, &mut buf).unwrap();
        let back = read_samples_csv(&buf[..]).unwrap();
        assert_eq!(back.iter().map(|r| r.sample_id).collect::<Vec<_>>(), vec![9, 1, 3]);
        assert_eq!(back[2], recs[0]);
        let mut again = Vec::new();
        write_samples_csv(&recs, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn wrong_header_is_rejected() {
        assert!(read_curve_csv("a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn unwritable_path_is_an_error() {
        assert!(emit_curve_csv(&[], "/nonexistent/dir/x.csv").is_err());
    }

    #[test]
    fn self_comparison_has_zero_delta() {
        let c = vec![point("a", 1.0, 0.2, 0.95), point("a", 2.0, 0.5, 0.9), point("a", 3.0, 0.9, 0.8)];
        let cmp = pareto_compare(&c, &c, 0.0).unwrap();
        assert_eq!(cmp.matched, 3);
        assert!(cmp.rows.iter().all(|r| r.delta == Some(0.0)));
        assert!(cmp.weakly_dominates);
    }

    #[test]
    fn shifted_curve_gives_constant_delta() {
        let base = vec![point("a", 1.0, 0.2, 0.7), point("a", 2.0, 0.5, 0.6), point("a", 3.0, 0.9, 0.5)];
        let pdr: Vec<_> = base.iter().map(|p| CurvePoint { mean_ssim: p.mean_ssim + 0.1, ..p.clone() }).collect();
        let cmp = pareto_compare(&base, &pdr, 0.0).unwrap();
        for r in &cmp.rows {
            assert!((r.delta.unwrap() - 0.1).abs() < 1e-12);
        }
        assert_eq!(cmp.improved, 3);
    }

    #[test]
    fn interpolates_and_reports_incomparable_points() {
        let pdr = vec![point("p", 0.92, 0.4, 0.9), point("p", 0.96, 0.6, 0.8)];
        let base = vec![point("b", 1.0, 0.5, 0.7), point("b", 2.0, 0.1, 0.95), point("b", 3.0, 0.61, 0.6)];
        let cmp = pareto_compare(&base, &pdr, 0.02).unwrap();
        let by_hyper = |h: f64| cmp.rows.iter().find(|r| r.baseline_hyper == h).unwrap();
        assert!((by_hyper(1.0).ssim_pdr.unwrap() - 0.85).abs() < 1e-12);
        assert_eq!(by_hyper(2.0).delta, None);
        assert_eq!(by_hyper(3.0).ssim_pdr, Some(0.8));
        assert_eq!(cmp.matched, 2);

        let disjoint = pareto_compare(&[point("b", 1.0, 0.0, 0.9)], &pdr, 0.01).unwrap();
        assert_eq!(disjoint.matched, 0);
        assert!(!disjoint.weakly_dominates);
        assert!(disjoint.to_string().contains("incomparable"));
        assert!(pareto_compare(&[], &pdr, 0.01).is_err());
    }
}
