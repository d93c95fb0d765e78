//! Typing and relation metrics over label sets.
//!
//! Loose macro averages per-instance precision over instances with a
//! nonempty prediction and per-instance recall over instances with a
//! nonempty gold set. Loose micro pools overlap counts. Per-class macro and
//! micro scores leave out the null label when one is given.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub strict: f64,
    pub loose_macro_p: f64,
    pub loose_macro_r: f64,
    pub loose_macro_f1: f64,
    pub loose_micro_p: f64,
    pub loose_micro_r: f64,
    pub loose_micro_f1: f64,
    pub macro_p: f64,
    pub macro_r: f64,
    pub macro_f1: f64,
    pub micro_p: f64,
    pub micro_r: f64,
    pub micro_f1: f64,
}

impl MetricReport {
    pub fn values(&self) -> [f64; 13] {
        [
            self.strict,
            self.loose_macro_p,
            self.loose_macro_r,
            self.loose_macro_f1,
            self.loose_micro_p,
            self.loose_micro_r,
            self.loose_micro_f1,
            self.macro_p,
            self.macro_r,
            self.macro_f1,
            self.micro_p,
            self.micro_r,
            self.micro_f1,
        ]
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Default)]
struct ClassCounts {
    tp: usize,
    fp: usize,
    fn_: usize,
}

/// Every metric over predicted and gold label sets.
pub fn score(pred: &[BTreeSet<usize>], gold: &[BTreeSet<usize>], null: Option<usize>) -> Result<MetricReport> {
    if pred.len() != gold.len() {
        return Err(Error::TaskData(format!(
            "{} predictions for {} gold instances",
            pred.len(),
            gold.len()
        )));
    }
    let n = pred.len();
    let mut r = MetricReport::default();
    if n == 0 {
        return Ok(r);
    }
    let mut strict = 0;
    let (mut p_sum, mut p_n, mut r_sum, mut r_n) = (0.0, 0, 0.0, 0);
    let (mut overlap, mut pred_total, mut gold_total) = (0, 0, 0);
    let mut classes: BTreeMap<usize, ClassCounts> = BTreeMap::new();
    for (p, g) in pred.iter().zip(gold) {
        strict += usize::from(p == g);
        let common = p.intersection(g).count();
        if !p.is_empty() {
            p_sum += common as f64 / p.len() as f64;
            p_n += 1;
        }
        if !g.is_empty() {
            r_sum += common as f64 / g.len() as f64;
            r_n += 1;
        }
        overlap += common;
        pred_total += p.len();
        gold_total += g.len();
        for &c in p.union(g) {
            if Some(c) == null {
                continue;
            }
            let k = classes.entry(c).or_default();
            match (p.contains(&c), g.contains(&c)) {
                (true, true) => k.tp += 1,
                (true, false) => k.fp += 1,
                _ => k.fn_ += 1,
            }
        }
    }
    r.strict = ratio(strict, n);
    r.loose_macro_p = if p_n == 0 { 0.0 } else { p_sum / p_n as f64 };
    r.loose_macro_r = if r_n == 0 { 0.0 } else { r_sum / r_n as f64 };
    r.loose_macro_f1 = f1(r.loose_macro_p, r.loose_macro_r);
    r.loose_micro_p = ratio(overlap, pred_total);
    r.loose_micro_r = ratio(overlap, gold_total);
    r.loose_micro_f1 = f1(r.loose_micro_p, r.loose_micro_r);

    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let (mut mp, mut mr, mut mf) = (0.0, 0.0, 0.0);
    for k in classes.values() {
        let p = ratio(k.tp, k.tp + k.fp);
        let rc = ratio(k.tp, k.tp + k.fn_);
        mp += p;
        mr += rc;
        mf += f1(p, rc);
        tp += k.tp;
        fp += k.fp;
        fn_ += k.fn_;
    }
    if !classes.is_empty() {
        let c = classes.len() as f64;
        r.macro_p = mp / c;
        r.macro_r = mr / c;
        r.macro_f1 = mf / c;
    }
    r.micro_p = ratio(tp, tp + fp);
    r.micro_r = ratio(tp, tp + fn_);
    r.micro_f1 = f1(r.micro_p, r.micro_r);
    Ok(r)
}

pub fn metrics_typing(pred: &[BTreeSet<usize>], gold: &[BTreeSet<usize>]) -> Result<MetricReport> {
    score(pred, gold, None)
}

pub fn metrics_relation(pred: &[usize], gold: &[usize], null: Option<usize>) -> Result<MetricReport> {
    let wrap = |v: &[usize]| v.iter().map(|&x| BTreeSet::from([x])).collect::<Vec<_>>();
    score(&wrap(pred), &wrap(gold), null)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn perfect_predictions_score_one() {
        let g = vec![set(&[0, 1]), set(&[2]), set(&[1])];
        let r = metrics_typing(&g, &g).unwrap();
        assert!(r.values().iter().all(|&v| v == 1.0), "{r:?}");
        let r = metrics_relation(&[0, 1, 1, 2], &[0, 1, 1, 2], None).unwrap();
        assert!(r.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn one_extra_label() {
        let r = metrics_typing(&[set(&[0, 1])], &[set(&[0])]).unwrap();
        assert_eq!(r.strict, 0.0);
        assert_eq!((r.loose_macro_p, r.loose_macro_r), (0.5, 1.0));
        assert!((r.loose_macro_f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.loose_micro_f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn two_class_confusion() {
        // A→A once, A→B once, B→B twice.
        let (a, b) = (0, 1);
        let r = metrics_relation(&[a, b, b, b], &[a, a, b, b], None).unwrap();
        assert!((r.macro_p - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!((r.macro_r - 0.75).abs() < 1e-15);
        assert!((r.macro_f1 - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-15);
        assert_eq!((r.micro_p, r.micro_r, r.micro_f1), (0.75, 0.75, 0.75));
        assert_eq!(r.strict, 0.75);
    }

    #[test]
    fn all_null_predictions() {
        let r = metrics_relation(&[9, 9, 9], &[0, 1, 9], Some(9)).unwrap();
        assert_eq!((r.micro_p, r.micro_r, r.micro_f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn length_mismatch() {
        assert!(metrics_relation(&[0], &[0, 1], None).is_err());
    }
}
