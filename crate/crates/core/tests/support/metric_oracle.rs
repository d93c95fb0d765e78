//! Brute-force metric counting over an explicit instance × label
//! indicator grid, independent of the library's set arithmetic.

use std::collections::BTreeSet;

use rand::Rng;

pub struct Oracle {
    pub values: [f64; 13],
}

fn div(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Same field order as `MetricReport::values`.
pub fn count(pred: &[BTreeSet<usize>], gold: &[BTreeSet<usize>], labels: usize, null: Option<usize>) -> Oracle {
    let n = pred.len();
    let grid = |sets: &[BTreeSet<usize>]| -> Vec<Vec<bool>> {
        sets.iter().map(|s| (0..labels).map(|l| s.contains(&l)).collect()).collect()
    };
    let (pg, gg) = (grid(pred), grid(gold));

    let mut exact = 0;
    let (mut p_sum, mut p_n, mut r_sum, mut r_n) = (0.0, 0, 0.0, 0);
    let (mut both_all, mut pred_all, mut gold_all) = (0, 0, 0);
    for i in 0..n {
        let mut same = true;
        let (mut both, mut np, mut ng) = (0, 0, 0);
        for l in 0..labels {
            same &= pg[i][l] == gg[i][l];
            both += usize::from(pg[i][l] && gg[i][l]);
            np += usize::from(pg[i][l]);
            ng += usize::from(gg[i][l]);
        }
        exact += usize::from(same);
        if np > 0 {
            p_sum += both as f64 / np as f64;
            p_n += 1;
        }
        if ng > 0 {
            r_sum += both as f64 / ng as f64;
            r_n += 1;
        }
        both_all += both;
        pred_all += np;
        gold_all += ng;
    }
    let lmp = if p_n == 0 { 0.0 } else { p_sum / p_n as f64 };
    let lmr = if r_n == 0 { 0.0 } else { r_sum / r_n as f64 };
    let lup = div(both_all, pred_all);
    let lur = div(both_all, gold_all);

    let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
    let (mut mp, mut mr, mut mf, mut classes) = (0.0, 0.0, 0.0, 0);
    for l in 0..labels {
        if Some(l) == null {
            continue;
        }
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for i in 0..n {
            match (pg[i][l], gg[i][l]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        if tp + fp + fn_ == 0 {
            continue;
        }
        classes += 1;
        let (p, r) = (div(tp, tp + fp), div(tp, tp + fn_));
        mp += p;
        mr += r;
        mf += harmonic(p, r);
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
    }
    let (macro_p, macro_r, macro_f) = if classes == 0 {
        (0.0, 0.0, 0.0)
    } else {
        let c = classes as f64;
        (mp / c, mr / c, mf / c)
    };
    let (mip, mir) = (div(tp_all, tp_all + fp_all), div(tp_all, tp_all + fn_all));
    Oracle {
        values: [
            div(exact, n),
            lmp,
            lmr,
            harmonic(lmp, lmr),
            lup,
            lur,
            harmonic(lup, lur),
            macro_p,
            macro_r,
            macro_f,
            mip,
            mir,
            harmonic(mip, mir),
        ],
    }
}

/// A random instance set: `(pred, gold, labels, null)`. Every third set
/// is single-label with a null class.
#[allow(clippy::type_complexity)]
pub fn random_set<R: Rng>(rng: &mut R, index: usize) -> (Vec<BTreeSet<usize>>, Vec<BTreeSet<usize>>, usize, Option<usize>) {
    let labels = rng.random_range(2..7);
    let n = rng.random_range(1..30);
    if index % 3 == 2 {
        let one = |rng: &mut R| BTreeSet::from([rng.random_range(0..labels)]);
        let pred = (0..n).map(|_| one(rng)).collect();
        let gold = (0..n).map(|_| one(rng)).collect();
        return (pred, gold, labels, Some(labels - 1));
    }
    let set = |rng: &mut R| -> BTreeSet<usize> { (0..labels).filter(|_| rng.random_bool(0.35)).collect() };
    let pred = (0..n).map(|_| set(rng)).collect();
    let gold = (0..n).map(|_| set(rng)).collect();
    (pred, gold, labels, None)
}
