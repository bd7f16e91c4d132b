//! Training losses: reconstruction term (plain or logarithmic), the weighted
//! quantization penalty with fixed or spacing-adaptive weights, and the
//! codebook loss.

use crate::error::{dim_check, Error, Result};
use crate::quantizer::{Codebook, CodebookBank};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconTerm {
    /// Batch-mean squared error.
    Mse,
    /// Natural log of the batch-mean squared error plus `eps`.
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantWeighting {
    /// No quantization penalty.
    None,
    /// Every output weighted by `beta`.
    Fixed,
    /// Weight from the spacing around the selected codeword.
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub beta: f64,
    pub eps: f64,
    pub recon: ReconTerm,
    pub weighting: QuantWeighting,
}

impl LossConfig {
    const EPS: f64 = 1e-12;

    fn with(beta: f64, recon: ReconTerm, weighting: QuantWeighting) -> Self {
        Self {
            beta,
            eps: Self::EPS,
            recon,
            weighting,
        }
    }

    /// MSE plus fixed-weight quantization penalty.
    pub fn fixed(beta: f64) -> Self {
        Self::with(beta, ReconTerm::Mse, QuantWeighting::Fixed)
    }

    /// Log reconstruction plus adaptive penalty.
    pub fn adaptive_log(beta: f64) -> Self {
        Self::with(beta, ReconTerm::Log, QuantWeighting::Adaptive)
    }

    pub fn adaptive_mse(beta: f64) -> Self {
        Self::with(beta, ReconTerm::Mse, QuantWeighting::Adaptive)
    }

    pub fn fixed_log(beta: f64) -> Self {
        Self::with(beta, ReconTerm::Log, QuantWeighting::Fixed)
    }

    /// Reconstruction only (non-quantized training).
    pub fn recon_only(recon: ReconTerm) -> Self {
        Self::with(1.0, recon, QuantWeighting::None)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config("beta and eps must be positive".into()));
        }
        Ok(())
    }
}

/// Penalty weight for a value quantized to codeword `j`: `beta` times the
/// distance between its neighbors, or twice `beta` times the one-sided gap
/// at either end of the codebook.
pub fn adaptive_weight(cb: &Codebook, j: usize, beta: f64) -> f64 {
    let w = cb.codewords();
    let n = w.len();
    if n < 2 {
        return 0.0;
    }
    if j == 0 {
        2.0 * beta * (w[1] - w[0])
    } else if j == n - 1 {
        2.0 * beta * (w[n - 1] - w[n - 2])
    } else {
        beta * (w[j + 1] - w[j - 1])
    }
}

/// Per-output weights for one sample under `cfg.weighting`.
pub fn quant_weights(cfg: &LossConfig, bank: &CodebookBank, indices: &[usize]) -> Vec<f64> {
    match cfg.weighting {
        QuantWeighting::None => vec![0.0; indices.len()],
        QuantWeighting::Fixed => vec![cfg.beta; indices.len()],
        QuantWeighting::Adaptive => bank
            .books
            .iter()
            .zip(indices)
            .map(|(cb, &j)| adaptive_weight(cb, j, cfg.beta))
            .collect(),
    }
}

/// One batch element: flattened channel, its reconstruction, the latent, its
/// quantized value and the per-output penalty weights.
#[derive(Debug, Clone, Copy)]
pub struct LossSample<'a> {
    pub h: &'a [f64],
    pub h_hat: &'a [f64],
    pub z: &'a [f64],
    pub zq: &'a [f64],
    pub weights: &'a [f64],
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    /// Batch mean of `||h_hat - h||^2`.
    pub recon_mse: f64,
    /// Batch mean of the weighted penalty `sum_m w_m (zq_m - z_m)^2`.
    pub weighted_quant: f64,
    /// Batch mean of `||zq - z||^2`.
    pub quant_mse: f64,
    pub grad_h_hat: Vec<Vec<f64>>,
    /// Gradient of the penalty with respect to `z`, `zq` held constant.
    pub grad_z: Vec<Vec<f64>>,
}

pub fn composite_loss(batch: &[LossSample<'_>], cfg: &LossConfig) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(Error::Input("loss needs a non-empty batch".into()));
    }
    let n = batch.len() as f64;
    let mut recon = 0.0;
    let mut weighted = 0.0;
    let mut qmse = 0.0;
    for s in batch {
        dim_check("reconstruction", s.h.len(), s.h_hat.len())?;
        dim_check("quantized latent", s.z.len(), s.zq.len())?;
        dim_check("penalty weights", s.z.len(), s.weights.len())?;
        recon += s.h_hat.iter().zip(s.h).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        for ((&z, &zq), &w) in s.z.iter().zip(s.zq).zip(s.weights) {
            let r2 = (zq - z) * (zq - z);
            qmse += r2;
            weighted += w * r2;
        }
    }
    recon /= n;
    weighted /= n;
    qmse /= n;
    if cfg.weighting == QuantWeighting::None {
        weighted = 0.0;
    }

    let (recon_term, recon_scale) = match cfg.recon {
        ReconTerm::Mse => (recon, 2.0 / n),
        ReconTerm::Log => ((recon + cfg.eps).ln(), 2.0 / (n * (recon + cfg.eps))),
    };
    let grad_h_hat = batch
        .iter()
        .map(|s| {
            s.h_hat
                .iter()
                .zip(s.h)
                .map(|(a, b)| recon_scale * (a - b))
                .collect()
        })
        .collect();
    let grad_z = batch
        .iter()
        .map(|s| {
            if cfg.weighting == QuantWeighting::None {
                return vec![0.0; s.z.len()];
            }
            s.z.iter()
                .zip(s.zq)
                .zip(s.weights)
                .map(|((&z, &zq), &w)| -2.0 * w * (zq - z) / n)
                .collect()
        })
        .collect();
    let loss = recon_term + weighted;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss (recon {recon}, penalty {weighted})"
        )));
    }
    Ok(LossOutput {
        loss,
        recon_mse: recon,
        weighted_quant: weighted,
        quant_mse: qmse,
        grad_h_hat,
        grad_z,
    })
}

/// Batch-mean squared quantization error and its gradient with respect to
/// every codeword (zero for codewords no sample selected).
pub fn codebook_loss(
    batch: &[(&[f64], &[usize])],
    bank: &CodebookBank,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::Input("codebook loss needs a non-empty batch".into()));
    }
    let n = batch.len() as f64;
    let mut grads: Vec<Vec<f64>> = bank.books.iter().map(|b| vec![0.0; b.len()]).collect();
    let mut loss = 0.0;
    for (z, idx) in batch {
        dim_check("latent vs bank", bank.len(), z.len())?;
        dim_check("indices vs bank", bank.len(), idx.len())?;
        for (m, (&zm, &j)) in z.iter().zip(idx.iter()).enumerate() {
            let w = bank.books[m].codewords()[j];
            loss += (w - zm) * (w - zm);
            grads[m][j] += 2.0 * (w - zm) / n;
        }
    }
    Ok((loss / n, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cb(v: &[f64]) -> Codebook {
        Codebook::new(v.to_vec()).unwrap()
    }

    #[test]
    fn adaptive_weight_examples() {
        let c = cb(&[0.0, 1.0, 2.0, 3.0]);
        assert!((adaptive_weight(&c, 1, 0.1) - 0.2).abs() < 1e-15);
        assert!((adaptive_weight(&c, 3, 0.1) - 0.2).abs() < 1e-15);
        assert!((adaptive_weight(&c, 0, 0.1) - 0.2).abs() < 1e-15);
        let c = cb(&[0.0, 1.0, 2.0, 4.0]);
        assert!((adaptive_weight(&c, 2, 0.1) - 0.3).abs() < 1e-15);
        assert!((adaptive_weight(&c, 3, 0.1) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn uniform_spacing_gives_constant_weight() {
        let c = Codebook::uniform(3, -1.0, 0.4).unwrap();
        let delta = 1.4 / 7.0;
        for j in 0..8 {
            assert!((adaptive_weight(&c, j, 0.05) - 2.0 * 0.05 * delta).abs() < 1e-15);
        }
    }

    fn sample<'a>(h: &'a [f64], hh: &'a [f64], z: &'a [f64], zq: &'a [f64], w: &'a [f64]) -> LossSample<'a> {
        LossSample {
            h,
            h_hat: hh,
            z,
            zq,
            weights: w,
        }
    }

    #[test]
    fn log_loss_examples() {
        let h = [0.0];
        let hh = [1e-2];
        let z = [0.3];
        let out = composite_loss(&[sample(&h, &hh, &z, &z, &[0.2])], &LossConfig::adaptive_log(0.1)).unwrap();
        assert!((out.loss - (1e-4f64 + 1e-12).ln()).abs() < 1e-12);
        assert!((out.loss + 9.2103).abs() < 1e-4);

        let hh = [1.0];
        let zq = [0.8];
        let out = composite_loss(&[sample(&h, &hh, &z, &zq, &[0.2])], &LossConfig::adaptive_log(0.1)).unwrap();
        assert!((out.loss - 0.05).abs() < 1e-11);
    }

    #[test]
    fn fixed_loss_example() {
        let h = [0.0, 0.0];
        let hh = [1.0, 1.0];
        let z = [0.0, 0.0, 0.0];
        let zq = [1.0, 1.0, 1.0];
        let cfg = LossConfig::fixed(0.1);
        let out = composite_loss(&[sample(&h, &hh, &z, &zq, &[0.1; 3])], &cfg).unwrap();
        assert!((out.loss - 2.3).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let h = [0.3, -0.2];
        let hh = [0.1, 0.4];
        let hh2 = [-0.3, 0.2];
        let z = [0.5, -1.0];
        let zq = [0.4, -0.8];
        let w = [0.3, 0.7];
        for cfg in [LossConfig::adaptive_log(0.1), LossConfig::fixed(0.1), LossConfig::adaptive_mse(0.1)] {
            let eval = |hh: &[f64], z: &[f64]| {
                composite_loss(&[sample(&h, hh, z, &zq, &w), sample(&h, &hh2, &z, &zq, &w)], &cfg)
                    .unwrap()
            };
            let base = eval(&hh, &z);
            for i in 0..2 {
                let mut p = hh;
                let mut m = hh;
                p[i] += 1e-6;
                m[i] -= 1e-6;
                let fd = (eval(&p, &z).loss - eval(&m, &z).loss) / 2e-6;
                assert!((fd - base.grad_h_hat[0][i]).abs() < 1e-6);
            }
            // Only sample 0's z is perturbed; its penalty enters with weight 1/|batch|.
            for i in 0..2 {
                let mut p = z;
                let mut m = z;
                p[i] += 1e-6;
                m[i] -= 1e-6;
                let fd = (eval(&hh, &p).loss - eval(&hh, &m).loss) / 2e-6;
                let analytic = base.grad_z[0][i] + base.grad_z[1][i];
                assert!((fd - analytic).abs() < 1e-6, "{fd} vs {analytic}");
            }
        }
    }

    #[test]
    fn zero_residual_has_zero_penalty_gradient() {
        let z = [0.0, 1.0];
        let h = [1.0];
        let out = composite_loss(&[sample(&h, &h, &z, &z, &[0.2, 0.2])], &LossConfig::adaptive_log(0.1)).unwrap();
        assert_eq!(out.weighted_quant, 0.0);
        assert!(out.grad_z[0].iter().all(|&g| g == 0.0));
        assert!(out.loss.is_finite());
    }

    #[test]
    fn empty_batch_rejected() {
        assert!(matches!(composite_loss(&[], &LossConfig::fixed(0.1)), Err(Error::Input(_))));
        let bank = CodebookBank { books: vec![cb(&[0.0, 1.0])] };
        assert!(matches!(codebook_loss(&[], &bank), Err(Error::Input(_))));
    }

    #[test]
    fn codebook_loss_examples() {
        let bank = CodebookBank {
            books: vec![cb(&[-1.0, 0.0, 1.0, 2.0])],
        };
        let (l, g) = codebook_loss(&[(&[0.4][..], &[1usize][..])], &bank).unwrap();
        assert!((l - 0.16).abs() < 1e-15);
        assert!((g[0][1] + 0.8).abs() < 1e-15);
        assert_eq!(g[0][0], 0.0);
        assert_eq!(g[0][2], 0.0);

        let (l, g) = codebook_loss(&[(&[1.0][..], &[2usize][..])], &bank).unwrap();
        assert_eq!(l, 0.0);
        assert!(g[0].iter().all(|&v| v == 0.0));
    }
}
