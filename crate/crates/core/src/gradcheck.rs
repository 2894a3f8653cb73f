//! Central finite-difference gradient checking for double-precision graphs.

use candle_core::{DType, Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates probed per variable; larger variables are subsampled.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            max_coords: 24,
            seed: 0,
        }
    }
}

/// Squared norms over the probed coordinates of one variable.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub coords: usize,
    pub analytic_sq: f64,
    pub numeric_sq: f64,
    pub diff_sq: f64,
}

impl GradCheckReport {
    /// `|g_a - g_n| / max(|g_a|, |g_n|)`, 0 when both vanish.
    pub fn relative_error(&self) -> f64 {
        let scale = self.analytic_sq.max(self.numeric_sq).sqrt();
        if scale < 1e-14 {
            0.0
        } else {
            self.diff_sq.sqrt() / scale
        }
    }

    /// Merges reports whose names share `prefix` into one block.
    pub fn merged(name: impl Into<String>, parts: &[&GradCheckReport]) -> Self {
        let mut out = GradCheckReport {
            name: name.into(),
            coords: 0,
            analytic_sq: 0.0,
            numeric_sq: 0.0,
            diff_sq: 0.0,
        };
        for p in parts {
            out.coords += p.coords;
            out.analytic_sq += p.analytic_sq;
            out.numeric_sq += p.numeric_sq;
            out.diff_sq += p.diff_sq;
        }
        out
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Compares the backward pass of `loss` with central differences for each
/// variable. Every variable must be `f64`; `loss` must be a scalar and must
/// rebuild the graph on each call.
pub fn check_gradients<F>(vars: &[(String, Var)], loss: F, opts: GradCheckOptions) -> Result<Vec<GradCheckReport>>
where
    F: Fn() -> Result<Tensor>,
{
    let l = loss()?;
    let grads = l.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::with_capacity(vars.len());
    for (name, var) in vars {
        if var.dtype() != DType::F64 {
            return Err(Error::Config(format!("gradient check needs f64, {name} is {:?}", var.dtype())));
        }
        let shape = var.shape().clone();
        let base: Vec<f64> = var.as_tensor().flatten_all()?.to_vec1()?;
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1()?,
            None => vec![0.0; base.len()],
        };
        let n = base.len();
        let idx: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, opts.max_coords).into_vec();
            v.sort_unstable();
            v
        };
        let mut rep = GradCheckReport {
            name: name.clone(),
            coords: idx.len(),
            analytic_sq: 0.0,
            numeric_sq: 0.0,
            diff_sq: 0.0,
        };
        let mut work = base.clone();
        for &i in &idx {
            work[i] = base[i] + opts.step;
            var.set(&Tensor::from_slice(&work, &shape, var.device())?)?;
            let up = scalar(&loss()?)?;
            work[i] = base[i] - opts.step;
            var.set(&Tensor::from_slice(&work, &shape, var.device())?)?;
            let down = scalar(&loss()?)?;
            work[i] = base[i];
            let numeric = (up - down) / (2.0 * opts.step);
            rep.analytic_sq += analytic[i] * analytic[i];
            rep.numeric_sq += numeric * numeric;
            rep.diff_sq += (analytic[i] - numeric).powi(2);
        }
        var.set(&Tensor::from_slice(&base, &shape, var.device())?)?;
        out.push(rep);
    }
    Ok(out)
}

/// Groups reports by the first `depth` dot-separated components of their names.
pub fn group_reports(reports: &[GradCheckReport], depth: usize) -> Vec<GradCheckReport> {
    let key = |n: &str| n.split('.').take(depth).collect::<Vec<_>>().join(".");
    let mut keys: Vec<String> = reports.iter().map(|r| key(&r.name)).collect();
    let mut seen = std::collections::BTreeSet::new();
    keys.retain(|k| seen.insert(k.clone()));
    keys.iter()
        .map(|k| {
            let parts: Vec<&GradCheckReport> = reports.iter().filter(|r| &key(&r.name) == k).collect();
            GradCheckReport::merged(k.clone(), &parts)
        })
        .collect()
}
