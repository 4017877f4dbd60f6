//! Per-frame average precision and calibrated average precision.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Frame indices ranked by descending score; ties keep ascending frame order.
pub fn rank(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Sum of integer ratios carried as an unevaluated pair `hi + lo`, so the
/// mean is rounded once at the end.
#[derive(Default)]
struct RatioSum {
    hi: f64,
    lo: f64,
}

impl RatioSum {
    fn add(&mut self, num: u128, den: u128) {
        let (n, d) = (num as f64, den as f64);
        let q = n / d;
        let tail = (-q).mul_add(d, n) / d;
        let s = self.hi + q;
        let v = s - self.hi;
        let err = (self.hi - (s - v)) + (q - v);
        self.hi = s;
        self.lo += err + tail;
    }

    fn mean(&self, count: usize) -> f64 {
        let c = count as f64;
        let q = self.hi / c;
        let r = (-q).mul_add(c, self.hi) + self.lo;
        q + r / c
    }
}

/// `Σ_k Prec(k)·I(k) / P`, or `None` when there are no positives.
pub fn per_frame_ap(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    check_lengths(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Ok(None);
    }
    let mut tp = 0u128;
    let mut sum = RatioSum::default();
    for (k, &i) in rank(scores).iter().enumerate() {
        if labels[i] {
            tp += 1;
            sum.add(tp, k as u128 + 1);
        }
    }
    Ok(Some(sum.mean(positives)))
}

/// Negative-to-positive frame ratio `w`; infinite when there are no negatives.
pub fn calibration_ratio(labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return None;
    }
    let neg = labels.len() - pos;
    Some(if neg == 0 { f64::INFINITY } else { neg as f64 / pos as f64 })
}

/// Calibrated AP with `cPrec(k) = TP / (TP + FP/w)`, or `None` when there are no positives.
///
/// With `w = N/P` each term is the integer ratio `TP·N / (TP·N + FP·P)`.
pub fn per_frame_cap(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    check_lengths(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Ok(None);
    }
    let negatives = labels.len() - positives;
    if negatives == 0 {
        return Ok(Some(1.0));
    }
    let (p, n) = (positives as u128, negatives as u128);
    let (mut tp, mut fp) = (0u128, 0u128);
    let mut sum = RatioSum::default();
    for &i in &rank(scores) {
        if labels[i] {
            tp += 1;
            sum.add(tp * n, tp * n + fp * p);
        } else {
            fp += 1;
        }
    }
    Ok(Some(sum.mean(positives)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    MeanAp,
    MeanCap,
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "map" => Ok(Protocol::MeanAp),
            "cap" | "mcap" => Ok(Protocol::MeanCap),
            other => Err(Error::Config(format!("unknown metric `{other}` (expected map or cap)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub class: usize,
    pub positives: usize,
    pub ratio: Option<f64>,
    pub ap: Option<f64>,
    pub cap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub classes: Vec<ClassMetrics>,
    pub mean_ap: Option<f64>,
    pub mean_cap: Option<f64>,
    pub frame_accuracy: f64,
    pub frames: usize,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Evaluates per-frame scores (`probs[t][k]`, `k` in `0..=K`) against labels,
/// frames concatenated across streams. Background (class 0) is excluded.
pub fn evaluate(
    streams: &[(&[Vec<f64>], &[u32])],
    num_classes: usize,
    protocol: Protocol,
) -> Result<EvalReport> {
    if streams.is_empty() {
        return Err(Error::Validation("empty evaluation set".into()));
    }
    let mut scores: Vec<Vec<f64>> = vec![Vec::new(); num_classes + 1];
    let mut labels: Vec<u32> = Vec::new();
    let mut correct = 0usize;
    for (si, (probs, labs)) in streams.iter().enumerate() {
        if probs.len() != labs.len() {
            return Err(Error::Validation(format!(
                "stream {si}: {} score rows for {} labels",
                probs.len(),
                labs.len()
            )));
        }
        for (row, &l) in probs.iter().zip(labs.iter()) {
            if row.len() != num_classes + 1 {
                return Err(Error::Validation(format!(
                    "stream {si}: score row has {} entries, expected {}",
                    row.len(),
                    num_classes + 1
                )));
            }
            if l as usize > num_classes {
                return Err(Error::Validation(format!("stream {si}: label {l} out of range")));
            }
            for (k, &p) in row.iter().enumerate() {
                scores[k].push(p);
            }
            if argmax(row) == l as usize {
                correct += 1;
            }
            labels.push(l);
        }
    }
    if labels.is_empty() {
        return Err(Error::Validation("empty evaluation set".into()));
    }
    let mut classes = Vec::with_capacity(num_classes);
    for k in 1..=num_classes {
        let bin: Vec<bool> = labels.iter().map(|&l| l as usize == k).collect();
        classes.push(ClassMetrics {
            class: k,
            positives: bin.iter().filter(|&&b| b).count(),
            ratio: calibration_ratio(&bin),
            ap: per_frame_ap(&scores[k], &bin)?,
            cap: per_frame_cap(&scores[k], &bin)?,
        });
    }
    Ok(EvalReport {
        protocol,
        mean_ap: mean_defined(classes.iter().map(|c| c.ap)),
        mean_cap: mean_defined(classes.iter().map(|c| c.cap)),
        classes,
        frame_accuracy: correct as f64 / labels.len() as f64,
        frames: labels.len(),
    })
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"))
}

impl EvalReport {
    /// The headline value selected by the protocol.
    pub fn headline(&self) -> Option<f64> {
        match self.protocol {
            Protocol::MeanAp => self.mean_ap,
            Protocol::MeanCap => self.mean_cap,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<8}{:>10}{:>12}{:>12}{:>12}", "class", "P", "w", "AP", "cAP");
        for c in &self.classes {
            let _ = writeln!(
                out,
                "{:<8}{:>10}{:>12}{:>12}{:>12}",
                c.class,
                c.positives,
                c.ratio.map_or("undefined".into(), |w| format!("{w:.4}")),
                fmt_opt(c.ap),
                fmt_opt(c.cap)
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "frames          {}", self.frames);
        let _ = writeln!(out, "mAP             {}", fmt_opt(self.mean_ap));
        let _ = writeln!(out, "mean cAP        {}", fmt_opt(self.mean_cap));
        let _ = writeln!(out, "frame accuracy  {:.6}", self.frame_accuracy);
        let name = match self.protocol {
            Protocol::MeanAp => "mAP",
            Protocol::MeanCap => "mean cAP",
        };
        let _ = writeln!(out, "headline ({name}) {}", fmt_opt(self.headline()));
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,positives,w,ap,cap\n");
        let cell = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        for c in &self.classes {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                c.class,
                c.positives,
                cell(c.ratio),
                cell(c.ap),
                cell(c.cap)
            );
        }
        let _ = writeln!(out, "mean,,,{},{}", cell(self.mean_ap), cell(self.mean_cap));
        out
    }

    /// Static bar chart of the per-class protocol metric.
    pub fn to_svg(&self) -> String {
        let bar_w = 40.0;
        let gap = 20.0;
        let h = 200.0;
        let n = self.classes.len().max(1) as f64;
        let width = 60.0 + n * (bar_w + gap);
        let mut out = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"11\">\n",
            h + 50.0
        );
        let _ = writeln!(
            out,
            "<line x1=\"40\" y1=\"10\" x2=\"40\" y2=\"{}\" stroke=\"black\"/>",
            h + 10.0
        );
        let _ = writeln!(
            out,
            "<line x1=\"40\" y1=\"{0}\" x2=\"{width}\" y2=\"{0}\" stroke=\"black\"/>",
            h + 10.0
        );
        for tick in [0.0, 0.5, 1.0] {
            let y = 10.0 + h * (1.0 - tick);
            let _ = writeln!(out, "<text x=\"5\" y=\"{}\">{tick:.1}</text>", y + 4.0);
        }
        for (i, c) in self.classes.iter().enumerate() {
            let v = match self.protocol {
                Protocol::MeanAp => c.ap,
                Protocol::MeanCap => c.cap,
            };
            let x = 50.0 + i as f64 * (bar_w + gap);
            if let Some(v) = v {
                let bh = h * v;
                let _ = writeln!(
                    out,
                    "<rect x=\"{x}\" y=\"{}\" width=\"{bar_w}\" height=\"{bh}\" fill=\"steelblue\"/>",
                    10.0 + h - bh
                );
            }
            let _ = writeln!(
                out,
                "<text x=\"{x}\" y=\"{}\">{}</text>",
                h + 28.0,
                c.class
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_ap_example() {
        let ap = per_frame_ap(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false])
            .unwrap()
            .unwrap();
        assert_eq!(ap, 5.0 / 6.0);
    }

    #[test]
    fn worked_cap_example() {
        let cap = per_frame_cap(&[0.9, 0.8, 0.2, 0.1], &[false, true, false, false])
            .unwrap()
            .unwrap();
        assert_eq!(cap, 0.75);
    }

    #[test]
    fn single_positive_last() {
        let n = 7;
        let scores: Vec<f64> = (0..n).map(|i| -(i as f64)).collect();
        let mut labels = vec![false; n];
        labels[n - 1] = true;
        assert_eq!(per_frame_ap(&scores, &labels).unwrap(), Some(1.0 / n as f64));
    }

    #[test]
    fn no_positives_is_undefined_and_no_negatives_is_one() {
        assert_eq!(per_frame_ap(&[0.1, 0.2], &[false, false]).unwrap(), None);
        assert_eq!(per_frame_cap(&[0.1, 0.2], &[false, false]).unwrap(), None);
        assert_eq!(per_frame_cap(&[0.1, 0.2], &[true, true]).unwrap(), Some(1.0));
    }

    #[test]
    fn ties_break_by_frame_index() {
        assert_eq!(rank(&[0.5, 0.5, 0.9, 0.5]), vec![2, 0, 1, 3]);
        let ap = per_frame_ap(&[0.5, 0.5], &[false, true]).unwrap().unwrap();
        assert_eq!(ap, 0.5);
    }

    #[test]
    fn evaluate_means_skip_undefined_classes() {
        let probs = vec![vec![0.2, 0.8, 0.0], vec![0.9, 0.1, 0.0], vec![0.1, 0.9, 0.0]];
        let labels = vec![1u32, 0, 1];
        let r = evaluate(&[(&probs, &labels)], 2, Protocol::MeanCap).unwrap();
        assert_eq!(r.classes[1].ap, None);
        assert_eq!(r.mean_ap, r.classes[0].ap);
        assert_eq!(r.frame_accuracy, 1.0);
        assert!(r.to_text().contains("undefined"));
        assert!(r.to_svg().starts_with("<svg"));
    }

    #[test]
    fn evaluate_rejects_length_mismatch_and_empty_sets() {
        let probs = vec![vec![0.5, 0.5]];
        let labels = vec![1u32, 0];
        assert!(matches!(
            evaluate(&[(&probs, &labels)], 1, Protocol::MeanAp),
            Err(Error::Validation(_))
        ));
        assert!(matches!(evaluate(&[], 1, Protocol::MeanAp), Err(Error::Validation(_))));
    }

    #[test]
    fn mean_of_two_classes() {
        assert_eq!(mean_defined([Some(1.0), Some(0.5), None].into_iter()), Some(0.75));
    }

    #[test]
    fn protocol_parsing() {
        assert_eq!("map".parse::<Protocol>().unwrap(), Protocol::MeanAp);
        assert_eq!("cap".parse::<Protocol>().unwrap(), Protocol::MeanCap);
        assert!("f1".parse::<Protocol>().is_err());
    }
}
