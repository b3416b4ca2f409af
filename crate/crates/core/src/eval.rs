//! Registration accuracy metrics, cross-validation folds, paired
//! significance tests and study reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::CaseData;
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::training::MetricRecord;
use crate::transform::{warp, DisplacementField};
use crate::volume::{centroid, LabelMap, ScalarField};

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Per-pair distances and their root mean square.
pub fn tre_points(warped: &[[f64; 3]], fixed: &[[f64; 3]]) -> Result<(Vec<f64>, f64)> {
    if warped.is_empty() || warped.len() != fixed.len() {
        return Err(Error::InvalidArgument(format!(
            "need paired, nonempty landmark lists, got {} and {}",
            warped.len(),
            fixed.len()
        )));
    }
    let d: Vec<f64> = warped.iter().zip(fixed).map(|(a, b)| dist(*a, *b)).collect();
    let rms = (d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt();
    Ok((d, rms))
}

/// Target registration error between landmark labels, by centroid.
pub fn tre(warped: &[LabelMap], fixed: &[LabelMap]) -> Result<(Vec<f64>, f64)> {
    let w = warped.iter().map(centroid).collect::<Result<Vec<_>>>()?;
    let f = fixed.iter().map(centroid).collect::<Result<Vec<_>>>()?;
    tre_points(&w, &f)
}

/// Dice overlap of two masks, each binarized at 0.5.
pub fn dsc(a: &LabelMap, b: &LabelMap) -> Result<f64> {
    a.grid().ensure_same(b.grid(), "dsc")?;
    let (mut both, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.values().iter().zip(b.values()) {
        let (x, y) = (x >= 0.5, y >= 0.5);
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    if na + nb == 0 {
        return Err(Error::EmptyLabel);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Disjoint test folds covering every patient.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Vec<String>>,
}

impl FoldPlan {
    /// Every id not held out in fold `k`.
    pub fn train_ids(&self, k: usize) -> Vec<String> {
        self.folds.iter().enumerate().filter(|(j, _)| *j != k).flat_map(|(_, f)| f.iter().cloned()).collect()
    }
}

/// Shuffle patient ids by `seed` and deal them into `k` folds of sizes
/// differing by at most one.
pub fn make_folds(patient_ids: &[String], k: usize, seed: u64) -> Result<FoldPlan> {
    let mut ids = patient_ids.to_vec();
    ids.sort();
    ids.dedup();
    if k == 0 || k > ids.len() {
        return Err(Error::InvalidArgument(format!("cannot make {k} folds from {} patients", ids.len())));
    }
    ids.shuffle(&mut rng_for(seed, &[0xF01D]));
    let mut folds = vec![Vec::new(); k];
    for (i, id) in ids.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    Ok(FoldPlan { folds })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// min(W⁺, W⁻).
    pub statistic: f64,
    pub w_plus: f64,
    /// Nonzero differences used.
    pub n: usize,
    pub p_value: f64,
    pub exact: bool,
}

const EXACT_MAX_N: usize = 25;

/// Two-sided paired signed-rank test of `y - x`.
///
/// Zero differences are dropped and tied magnitudes share their average
/// rank. Up to 25 pairs the null distribution is enumerated exactly (on
/// doubled ranks, so ties stay integral); beyond that a normal
/// approximation with tie-corrected variance is used.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<Wilcoxon> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument("paired samples differ in length".into()));
    }
    let mut d: Vec<f64> = x.iter().zip(y).map(|(a, b)| b - a).filter(|v| *v != 0.0).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("paired differences".into()));
    }
    if d.is_empty() {
        return Err(Error::Degenerate("all paired differences are zero".into()));
    }
    let n = d.len();
    if n < 5 {
        return Err(Error::InvalidArgument(format!("need at least 5 nonzero differences, got {n}")));
    }
    d.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    // Doubled average ranks and tie group sizes.
    let mut rank2 = vec![0usize; n];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[j + 1].abs() == d[i].abs() {
            j += 1;
        }
        for r in &mut rank2[i..=j] {
            *r = i + j + 2;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    let w2_plus: usize = d.iter().zip(&rank2).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total2 = n * (n + 1);
    let w_plus = w2_plus as f64 / 2.0;
    let w_minus = (total2 - w2_plus) as f64 / 2.0;
    let statistic = w_plus.min(w_minus);

    let (p_value, exact) = if n <= EXACT_MAX_N {
        let mut counts = vec![0.0f64; total2 + 1];
        counts[0] = 1.0;
        let mut reach = 0;
        for &r in &rank2 {
            for s in (0..=reach).rev() {
                if counts[s] != 0.0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let all = 2f64.powi(n as i32);
        let lo: f64 = counts[..=w2_plus].iter().sum::<f64>() / all;
        let hi: f64 = counts[w2_plus..].iter().sum::<f64>() / all;
        ((2.0 * lo.min(hi)).min(1.0), true)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let tie: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum();
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie / 48.0;
        let z = (w_plus - mean) / var.sqrt();
        let phi = Normal::new(0.0, 1.0).expect("standard normal");
        ((2.0 * phi.cdf(-z.abs())).min(1.0), false)
    };
    Ok(Wilcoxon { statistic, w_plus, n, p_value, exact })
}

/// Quantile by linear interpolation between order statistics, with
/// position `p·(n−1)` in the sorted sample.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Median with first and third quartiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("summary of no values".into()));
        }
        let mut v = values.to_vec();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("summary input".into()));
        }
        v.sort_by(f64::total_cmp);
        Ok(Self {
            median: quantile(&v, 0.5),
            q1: quantile(&v, 0.25),
            q3: quantile(&v, 0.75),
            min: v[0],
            max: v[v.len() - 1],
            n: v.len(),
        })
    }

    /// `median [q1, q3]` at the given precision, e.g. `6.3 [3.4, 8.7]`.
    pub fn render(&self, decimals: usize) -> String {
        format!("{:.d$} [{:.d$}, {:.d$}]", self.median, self.q1, self.q3, d = decimals)
    }
}

/// Accuracy of one registered case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub case_id: String,
    pub mode: String,
    /// Per-landmark distances in mm.
    pub landmark_tre: Vec<f64>,
    /// Case RMS over landmarks, mm.
    pub tre: f64,
    pub dsc: f64,
}

/// Warp the moving labels of `case` with `composed` and score them
/// against the fixed labels.
pub fn evaluate_case(case: &CaseData, composed: &DisplacementField, mode: &str) -> Result<EvalRecord> {
    case.grid().ensure_same(composed.grid(), "evaluation field")?;
    let warped_gland = warp(&case.moving_gland, composed);
    let d = dsc(&warped_gland, &case.fixed_gland)?;
    let warped: Vec<LabelMap> = case.moving_landmarks.iter().map(|l| warp(l, composed)).collect();
    let (per, rms) = tre(&warped, &case.fixed_landmarks)
        .map_err(|e| Error::Degenerate(format!("case {}: landmark error: {e}", case.id)))?;
    Ok(EvalRecord { case_id: case.id.clone(), mode: mode.into(), landmark_tre: per, tre: rms, dsc: d })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: String,
    pub cases: usize,
    /// Over case RMS values.
    pub tre: Summary,
    /// Over every landmark pair.
    pub tre_pairs: Summary,
    pub dsc: Summary,
    /// Paired tests against the reference mode on shared cases; `None` for
    /// the reference itself or when too few pairs differ.
    pub tre_vs_reference: Option<Wilcoxon>,
    pub dsc_vs_reference: Option<Wilcoxon>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub reference: String,
    /// Brackets are first and third quartiles (linear interpolation).
    pub interval: String,
    pub modes: Vec<ModeSummary>,
    pub records: Vec<EvalRecord>,
    pub errors: Vec<String>,
}

fn paired(a: &[&EvalRecord], b: &[&EvalRecord], f: impl Fn(&EvalRecord) -> f64) -> (Vec<f64>, Vec<f64>) {
    let idx: BTreeMap<&str, &EvalRecord> = a.iter().map(|r| (r.case_id.as_str(), *r)).collect();
    b.iter().filter_map(|r| idx.get(r.case_id.as_str()).map(|ra| (f(ra), f(r)))).unzip()
}

/// Per-mode summaries in first-appearance order, with signed-rank tests
/// of each mode against `reference`.
pub fn report(records: &[EvalRecord], reference: &str, errors: Vec<String>) -> Result<Report> {
    let mut order: Vec<&str> = Vec::new();
    for r in records {
        if !order.contains(&r.mode.as_str()) {
            order.push(&r.mode);
        }
    }
    let by_mode = |m: &str| records.iter().filter(|r| r.mode == m).collect::<Vec<_>>();
    let refs = by_mode(reference);
    let mut modes = Vec::new();
    for m in order {
        let rs = by_mode(m);
        let tre: Vec<f64> = rs.iter().map(|r| r.tre).collect();
        let pairs: Vec<f64> = rs.iter().flat_map(|r| r.landmark_tre.iter().copied()).collect();
        let dscs: Vec<f64> = rs.iter().map(|r| r.dsc).collect();
        let test = |f: fn(&EvalRecord) -> f64| {
            if m == reference || refs.is_empty() {
                return None;
            }
            let (x, y) = paired(&refs, &rs, f);
            wilcoxon_signed_rank(&x, &y).ok()
        };
        modes.push(ModeSummary {
            mode: m.into(),
            cases: rs.len(),
            tre: Summary::of(&tre)?,
            tre_pairs: Summary::of(&pairs)?,
            dsc: Summary::of(&dscs)?,
            tre_vs_reference: test(|r| r.tre),
            dsc_vs_reference: test(|r| r.dsc),
        });
    }
    Ok(Report {
        reference: reference.into(),
        interval: "quartiles".into(),
        modes,
        records: records.to_vec(),
        errors,
    })
}

fn fmt_p(w: &Option<Wilcoxon>) -> String {
    match w {
        Some(w) if w.p_value < 0.001 => "<0.001".into(),
        Some(w) => format!("{:.3}", w.p_value),
        None => "-".into(),
    }
}

impl Report {
    /// Plain-text table: TRE in mm to one decimal, DSC to two.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<14} {:>5}  {:<22} {:<22} {:>8} {:>8}",
            "mode", "cases", "TRE mm median [Q1, Q3]", "DSC median [Q1, Q3]", "p(TRE)", "p(DSC)"
        );
        for m in &self.modes {
            let _ = writeln!(
                s,
                "{:<14} {:>5}  {:<22} {:<22} {:>8} {:>8}",
                m.mode,
                m.cases,
                m.tre.render(1),
                m.dsc.render(2),
                fmt_p(&m.tre_vs_reference),
                fmt_p(&m.dsc_vs_reference)
            );
        }
        let _ = writeln!(s, "p-values: paired two-sided signed-rank tests against '{}'", self.reference);
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain report")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })
    }

    /// Write `report.json`, `report.txt` and box plots of TRE and DSC.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("report.json", self.to_json()),
            ("report.txt", self.table()),
            ("tre.svg", self.box_plot(Metric::Tre)),
            ("dsc.svg", self.box_plot(Metric::Dsc)),
        ];
        let mut out = Vec::new();
        for (name, body) in files {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
            out.push(p);
        }
        Ok(out)
    }

    pub fn box_plot(&self, metric: Metric) -> String {
        let boxes: Vec<(&str, Summary)> = self
            .modes
            .iter()
            .map(|m| (m.mode.as_str(), if metric == Metric::Tre { m.tre } else { m.dsc }))
            .collect();
        svg_box_plot(metric.label(), &boxes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Tre,
    Dsc,
}

impl Metric {
    fn label(self) -> &'static str {
        match self {
            Metric::Tre => "TRE (mm)",
            Metric::Dsc => "DSC",
        }
    }
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 50.0;

fn axis_range(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        let m = 0.05 * (hi - lo);
        (lo - m, hi + m)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

fn svg_open(title: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\">{}</text>", W / 2.0, escape(title));
    s
}

fn y_axis(s: &mut String, lo: f64, hi: f64) {
    let _ = writeln!(s, "<line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>", H - PAD);
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = H - PAD - (H - 2.0 * PAD) * k as f64 / 4.0;
        let _ = writeln!(s, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>", PAD - 4.0, y + 4.0, short(v));
    }
}

fn short(v: f64) -> String {
    if v.abs() >= 100.0 || v == 0.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Box (quartiles), median line and min–max whiskers per group.
pub fn svg_box_plot(title: &str, boxes: &[(&str, Summary)]) -> String {
    let lo = boxes.iter().map(|b| b.1.min).fold(f64::INFINITY, f64::min);
    let hi = boxes.iter().map(|b| b.1.max).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if boxes.is_empty() { (0.0, 1.0) } else { axis_range(lo, hi) };
    let ys = |v: f64| H - PAD - (v - lo) / (hi - lo) * (H - 2.0 * PAD);
    let mut s = svg_open(title);
    y_axis(&mut s, lo, hi);
    let slot = (W - 2.0 * PAD) / boxes.len().max(1) as f64;
    for (i, (name, b)) in boxes.iter().enumerate() {
        let cx = PAD + slot * (i as f64 + 0.5);
        let hw = slot * 0.25;
        let _ = writeln!(
            s,
            "<line x1=\"{cx:.1}\" y1=\"{:.1}\" x2=\"{cx:.1}\" y2=\"{:.1}\" stroke=\"black\"/>",
            ys(b.min),
            ys(b.max)
        );
        let _ = writeln!(
            s,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"#9ecae1\" stroke=\"black\"/>",
            cx - hw,
            ys(b.q3),
            2.0 * hw,
            (ys(b.q1) - ys(b.q3)).max(0.5)
        );
        let _ = writeln!(
            s,
            "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\" stroke-width=\"2\"/>",
            cx - hw,
            ys(b.median),
            cx + hw,
            ys(b.median)
        );
        let _ = writeln!(s, "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", H - PAD + 18.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

/// One panel per logged scalar against the step index.
pub fn svg_metrics(records: &[MetricRecord]) -> String {
    type Get = fn(&MetricRecord) -> Option<f64>;
    let series: [(&str, Get); 7] = [
        ("registration", |r| Some(r.reg)),
        ("discriminator", |r| r.dis),
        ("generator", |r| r.gen),
        ("smoothing term", |r| r.omega),
        ("gamma", |r| r.gamma),
        ("regularizer", |r| r.regularizer),
        ("total", |r| Some(r.total)),
    ];
    let present: Vec<(&str, Vec<(f64, f64)>)> = series
        .iter()
        .map(|(n, f)| (*n, records.iter().filter_map(|r| f(r).map(|v| (r.step as f64, v))).collect::<Vec<_>>()))
        .filter(|(_, pts)| !pts.is_empty())
        .collect();
    let ph = 160.0;
    let total_h = 40.0 + ph * present.len().max(1) as f64;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{total_h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{total_h}\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\">training metrics</text>", W / 2.0);
    let smax = records.iter().map(|r| r.step).max().unwrap_or(0).max(1) as f64;
    for (k, (name, pts)) in present.iter().enumerate() {
        let top = 40.0 + ph * k as f64;
        let lo = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = axis_range(lo, hi);
        let x = |t: f64| PAD + t / smax * (W - 2.0 * PAD);
        let y = |v: f64| top + ph - 30.0 - (v - lo) / (hi - lo) * (ph - 50.0);
        let _ = writeln!(s, "<text x=\"{PAD}\" y=\"{:.1}\">{name}  [{} .. {}]</text>", top + 12.0, short(lo), short(hi));
        let _ = writeln!(
            s,
            "<rect x=\"{PAD}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"#bbb\"/>",
            top + 20.0,
            W - 2.0 * PAD,
            ph - 50.0
        );
        let path: Vec<String> = pts.iter().map(|(t, v)| format!("{:.1},{:.1}", x(*t), y(*v))).collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"#3182bd\" points=\"{}\"/>", path.join(" "));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.25), 1.75);
        assert_eq!(quantile(&[6.3], 0.75), 6.3);
    }
}
