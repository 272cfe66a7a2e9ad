//! Central finite-difference verification of analytic gradients.
//!
//! Runs in double precision only; single-precision differences drown in
//! rounding noise. The numeric side re-evaluates the forward function and
//! never touches the backward pass, so it is an independent oracle for it.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{Tape, Tensor};

pub struct GradCheckOptions {
    /// Base step; each coordinate uses `h * max(1, |x|)`.
    pub h: f64,
    pub tol: f64,
    /// Check at most this many randomly sampled coordinates per tensor.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { h: 1e-5, tol: 1e-4, max_coords_per_input: None, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct WorstCoord {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Outcome of a finite-difference check: the largest relative error seen
/// (absolute error where `|analytic| < 1e-6`) against the tolerance.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub tol: f64,
    pub worst: Option<WorstCoord>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Compare the analytic gradient of `f` against central differences
/// `(f(x+h) - f(x-h)) / 2h` for every (sampled) coordinate of `wrt`.
///
/// `f` rebuilds the forward pass from the captured tensors each call and
/// must return a scalar; `wrt` tensors must have `requires_grad` set.
pub fn grad_check<F>(f: F, wrt: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>) -> Result<Tensor<f64>>,
{
    for (i, t) in wrt.iter().enumerate() {
        if !t.requires_grad() {
            return Err(Error::Contract(format!(
                "grad_check: tensor {i} does not track gradients"
            )));
        }
        t.zero_grad();
    }

    let tape = Tape::new();
    let loss = f(&tape)?;
    if loss.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check: f must return a scalar, got shape {}",
            loss.shape()
        )));
    }
    tape.backward(&loss)?;
    drop(tape);
    let analytic: Vec<Vec<f64>> =
        wrt.iter().map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()])).collect();

    let eval = |()| -> Result<f64> {
        let tape = Tape::new();
        let loss = f(&tape)?;
        Ok(loss.item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report =
        GradCheckReport { max_rel_err: 0.0, coords_checked: 0, tol: opts.tol, worst: None };

    for (i, t) in wrt.iter().enumerate() {
        let numel = t.numel();
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(limit) if limit < numel => {
                let mut picked = sample(&mut rng, numel, limit).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..numel).collect(),
        };
        for ci in coords {
            let orig = t.data()[ci];
            let h = opts.h * orig.abs().max(1.0);
            nudge(t, ci, orig + h)?;
            let up = eval(())?;
            nudge(t, ci, orig - h)?;
            let down = eval(())?;
            nudge(t, ci, orig)?;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i][ci];
            let err = if a.abs() < 1e-6 { (numeric - a).abs() } else { ((numeric - a) / a).abs() };
            report.coords_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some(WorstCoord { input: i, coord: ci, analytic: a, numeric });
            }
        }
    }
    Ok(report)
}

fn nudge(t: &Tensor<f64>, coord: usize, value: f64) -> Result<()> {
    t.data_mut()[coord] = value;
    Ok(())
}
