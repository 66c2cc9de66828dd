//! Wall-clock scaling of the external-attention stack against plain
//! self-attention.

use std::time::Instant;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::params::{derived_rng, ParamStore};
use crate::tensor::Tensor;
use crate::transformer::{register_transformer, self_attention_reference, transformer, TransformerConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TimingRow {
    pub n: usize,
    /// Median seconds of one transformer forward pass.
    pub external: f64,
    /// Median seconds of one quadratic self-attention pass.
    pub reference: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingReport {
    pub rows: Vec<TimingRow>,
    /// R² of a least-squares line through `(n, external)`.
    pub external_r2: f64,
    /// Log-log slope of `reference` against `n`.
    pub reference_exponent: f64,
    pub external_exponent: f64,
}

impl ScalingReport {
    pub fn table(&self) -> String {
        let mut s = String::from("n\texternal_s\treference_s\n");
        for r in &self.rows {
            s.push_str(&format!("{}\t{:.6}\t{:.6}\n", r.n, r.external, r.reference));
        }
        s.push_str(&format!(
            "# external: R2 {:.4}, exponent {:.3}; reference exponent {:.3}\n",
            self.external_r2, self.external_exponent, self.reference_exponent
        ));
        s
    }
}

/// Coefficient of determination of the least-squares line `y ≈ a + b·x`.
pub fn linear_r2(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    sxy * sxy / (sxx * syy)
}

/// Slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn time_median(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?;
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64());
    }
    Ok(median(samples))
}

/// Times both attention forms on random `n × d_model` inputs.
pub fn attention_scaling(cfg: &TransformerConfig, sizes: &[usize], repeats: usize, seed: u64) -> Result<ScalingReport> {
    if sizes.len() < 2 || repeats == 0 {
        return Err(Error::Config("need at least two sizes and one repeat".into()));
    }
    let mut store = ParamStore::<f64>::new();
    register_transformer(&mut store, seed, cfg)?;
    let d = cfg.d_model;
    let mut rng = derived_rng(seed, "bench");
    let mut rand = |rows: usize, cols: usize| {
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    };
    let (wq, wk, wv) = (rand(d, d), rand(d, d), rand(d, d));
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let f = rand(n, d);
        let external = time_median(repeats, || transformer(&f, &store, cfg, Mode::Infer).map(drop))?;
        let reference = time_median(repeats, || self_attention_reference(&f, &wq, &wk, &wv).map(drop))?;
        rows.push(TimingRow { n, external, reference });
    }
    let x: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let ext: Vec<f64> = rows.iter().map(|r| r.external).collect();
    let re: Vec<f64> = rows.iter().map(|r| r.reference).collect();
    Ok(ScalingReport {
        external_r2: linear_r2(&x, &ext),
        reference_exponent: log_log_slope(&x, &re),
        external_exponent: log_log_slope(&x, &ext),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_helpers() {
        let x = [1.0, 2.0, 4.0, 8.0];
        assert!((linear_r2(&x, &[3.0, 5.0, 9.0, 17.0]) - 1.0).abs() < 1e-12);
        assert!((log_log_slope(&x, &[1.0, 4.0, 16.0, 64.0]) - 2.0).abs() < 1e-12);
        assert!(linear_r2(&x, &[1.0, 4.0, 16.0, 64.0]) < 0.99);
    }
}
