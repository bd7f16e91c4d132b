//! Reconstruction quality and latent dynamic-range statistics.

use crate::error::{dim_check, Error, Result};

/// NMSE values are floored here; a perfect reconstruction would be -inf dB.
pub const NMSE_FLOOR_DB: f64 = -120.0;

/// `10 log10` of the mean per-sample normalized squared error, floored at
/// [`NMSE_FLOOR_DB`]. Pairs are `(reconstruction, reference)`.
pub fn nmse_db<'a>(pairs: impl IntoIterator<Item = (&'a [f64], &'a [f64])>) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (h_hat, h) in pairs {
        dim_check("reconstruction vs reference", h.len(), h_hat.len())?;
        let energy: f64 = h.iter().map(|v| v * v).sum();
        if energy <= 0.0 {
            return Err(Error::Input(format!("reference sample {n} has zero norm")));
        }
        let err: f64 = h_hat.iter().zip(h).map(|(a, b)| (a - b) * (a - b)).sum();
        sum += err / energy;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Input("NMSE needs at least one sample".into()));
    }
    let db = 10.0 * (sum / n as f64).log10();
    Ok(if db.is_finite() { db.max(NMSE_FLOOR_DB) } else { NMSE_FLOOR_DB })
}

/// Per-output population standard deviations and their ratios to the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputStats {
    pub sigma: Vec<f64>,
    pub mean_sigma: f64,
    pub ratios: Vec<f64>,
}

impl OutputStats {
    /// Largest over smallest normalized standard deviation.
    pub fn spread(&self) -> f64 {
        let max = self.ratios.iter().copied().fold(f64::MIN, f64::max);
        let min = self.ratios.iter().copied().fold(f64::MAX, f64::min);
        max / min
    }

    /// Centered moving average of the ratios (window clipped at the ends).
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        let n = self.ratios.len();
        let half = window / 2;
        (0..n)
            .map(|i| {
                let lo = i.saturating_sub(half);
                let hi = (i + half + 1).min(n);
                self.ratios[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
            })
            .collect()
    }

    /// CSV with one row per output: `m,sigma,ratio,smoothed`.
    pub fn to_csv(&self, window: usize) -> String {
        let smooth = self.moving_average(window);
        let mut s = String::from("m,sigma,ratio,smoothed\n");
        for m in 0..self.sigma.len() {
            s.push_str(&format!("{m},{},{},{}\n", self.sigma[m], self.ratios[m], smooth[m]));
        }
        s
    }
}

pub fn output_stats(latents: &[Vec<f64>]) -> Result<OutputStats> {
    if latents.len() < 2 {
        return Err(Error::Input("output statistics need at least two samples".into()));
    }
    let m = latents[0].len();
    if m == 0 || latents.iter().any(|z| z.len() != m) {
        return Err(Error::Dimension("latent samples differ in length".into()));
    }
    let n = latents.len() as f64;
    let sigma: Vec<f64> = (0..m)
        .map(|k| {
            let mean = latents.iter().map(|z| z[k]).sum::<f64>() / n;
            (latents.iter().map(|z| (z[k] - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect();
    let mean_sigma = sigma.iter().sum::<f64>() / m as f64;
    if !(mean_sigma > 0.0) {
        return Err(Error::Input("every output is constant".into()));
    }
    let ratios = sigma.iter().map(|s| s / mean_sigma).collect();
    Ok(OutputStats {
        sigma,
        mean_sigma,
        ratios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nmse_examples() {
        let h = vec![vec![1.0, 2.0], vec![-1.0, 0.5]];
        let zero = vec![vec![0.0; 2]; 2];
        let db = nmse_db(zero.iter().zip(&h).map(|(a, b)| (&a[..], &b[..]))).unwrap();
        assert!(db.abs() < 1e-12);

        let scaled: Vec<Vec<f64>> = h
            .iter()
            .map(|x| x.iter().map(|v| v * (1.0 + 0.1f64.sqrt())).collect())
            .collect();
        let db = nmse_db(scaled.iter().zip(&h).map(|(a, b)| (&a[..], &b[..]))).unwrap();
        assert!((db + 10.0).abs() < 1e-9);

        let db = nmse_db(h.iter().zip(&h).map(|(a, b)| (&a[..], &b[..]))).unwrap();
        assert_eq!(db, -120.0);
    }

    #[test]
    fn nmse_errors() {
        let z = [0.0, 0.0];
        assert!(matches!(nmse_db([(&z[..], &z[..])]), Err(Error::Input(_))));
        assert!(matches!(nmse_db(std::iter::empty()), Err(Error::Input(_))));
    }

    #[test]
    fn stats_examples() {
        // population std 1 and 3, plus a constant output
        let lat = vec![vec![-1.0, -3.0, 5.0], vec![1.0, 3.0, 5.0]];
        let s = output_stats(&lat).unwrap();
        assert_eq!(s.sigma, vec![1.0, 3.0, 0.0]);
        let r = &s.ratios;
        assert!((r[0] - 0.75).abs() < 1e-12 && (r[1] - 2.25).abs() < 1e-12 && r[2] == 0.0);
        let lat2 = vec![vec![-1.0, -3.0], vec![1.0, 3.0]];
        let s2 = output_stats(&lat2).unwrap();
        assert_eq!(s2.ratios, vec![0.5, 1.5]);
        let mean: f64 = s2.ratios.iter().sum::<f64>() / 2.0;
        assert!((mean - 1.0).abs() < 1e-12);
        assert!(output_stats(&lat[..1]).is_err());
    }

    #[test]
    fn moving_average_window() {
        let s = OutputStats {
            sigma: vec![1.0; 5],
            mean_sigma: 1.0,
            ratios: vec![1.0, 2.0, 3.0, 4.0, 5.0],
        };
        let ma = s.moving_average(5);
        assert_eq!(ma[2], 3.0);
        assert_eq!(ma[0], 2.0);
        assert!(s.to_csv(5).starts_with("m,sigma,ratio,smoothed\n0,1,1,2\n"));
    }
}
