//! Central finite-difference verification of tape gradients.
//!
//! The relative error of a parameter tensor is `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, floor)`
//! over the probed coordinates, where `a` is the analytic gradient and `n` the
//! central difference `(f(x+h) − f(x−h)) / 2h`. The report carries the maximum
//! over tensors. Large tensors may be checked on a subset of coordinates.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub floor: f64,
    /// Probe at most this many coordinates per tensor (all when `None`).
    pub max_probes: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: DEFAULT_STEP,
            floor: DEFAULT_FLOOR,
            max_probes: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    pub probes: usize,
    pub rel_err: f64,
    pub max_abs_err: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

fn evaluate<F>(f: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.scalar(out);
    if !v.is_finite() {
        return Err(Error::Verification(format!("non-finite function value {v}")));
    }
    Ok(v)
}

/// Half of the probes go to the coordinates with the largest analytic
/// gradient, where the check has signal above difference roundoff; the
/// rest are drawn uniformly from the remaining coordinates.
fn probe_coords(analytic: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..analytic.len()).collect();
    order.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()).then(a.cmp(&b)));
    let top = k.div_ceil(2);
    let rest = &order[top..];
    let mut coords: Vec<usize> = order[..top].to_vec();
    coords.extend(sample(rng, rest.len(), k - top).into_iter().map(|i| rest[i]));
    coords.sort_unstable();
    coords
}

/// Compares the tape gradient of the scalar `f` against central differences
/// at `params`.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.scalar(out).is_finite() {
        return Err(Error::Verification("non-finite function value".into()));
    }
    let mut grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    for (index, p) in params.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_probes {
            Some(k) if k < p.len() => probe_coords(&analytic[index], k, &mut rng),
            _ => (0..p.len()).collect(),
        };
        let mut diff_sq = 0.0;
        let mut a_sq = 0.0;
        let mut n_sq = 0.0;
        let mut max_abs = 0.0f64;
        for &c in &coords {
            let orig = p.data()[c];
            work[index].data_mut()[c] = orig + opts.step;
            let plus = evaluate(&f, &work)?;
            work[index].data_mut()[c] = orig - opts.step;
            let minus = evaluate(&f, &work)?;
            work[index].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[index][c];
            diff_sq += (a - numeric).powi(2);
            a_sq += a * a;
            n_sq += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
        }
        let denom = a_sq.sqrt().max(n_sq.sqrt()).max(opts.floor);
        checks.push(ParamCheck {
            index,
            probes: coords.len(),
            rel_err: diff_sq.sqrt() / denom,
            max_abs_err: max_abs,
            grad_norm: a_sq.sqrt(),
        });
    }
    let max_rel_err = checks.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_err,
        params: checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probes_split_between_largest_and_random() {
        let analytic = [0.0, -5.0, 0.1, 3.0, 0.0, 0.2, 0.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = probe_coords(&analytic, 4, &mut rng);
        assert_eq!(c.len(), 4);
        assert!(c.contains(&1) && c.contains(&3));
        assert!(c.windows(2).all(|w| w[0] < w[1]));
    }
}
