//! Linear (PCA) encoder/decoder expressed as a one-layer-each [`Autoencoder`].

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::nn::{Activation, Autoencoder, Dense, Mlp};

#[derive(Debug, Clone)]
pub struct PcaFit {
    pub autoencoder: Autoencoder,
    pub mean: Vec<f64>,
    /// Eigenvalues of the sample covariance for the kept components, descending.
    pub variances: Vec<f64>,
}

/// Projects onto the top `m` principal components of `data`.
pub fn fit_pca(data: &[Vec<f64>], m: usize) -> Result<PcaFit> {
    let n = data.len();
    let Some(first) = data.first() else {
        return Err(Error::Input("PCA needs samples".into()));
    };
    let d = first.len();
    if m == 0 || m > d {
        return Err(Error::Config(format!("cannot keep {m} of {d} components")));
    }
    if data.iter().any(|x| x.len() != d) {
        return Err(Error::Dimension("PCA samples differ in length".into()));
    }
    let mut mean = vec![0.0; d];
    for x in data {
        for (s, v) in mean.iter_mut().zip(x) {
            *s += v;
        }
    }
    for s in &mut mean {
        *s /= n as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centered = vec![0.0; d];
    for x in data {
        for (c, (v, mu)) in centered.iter_mut().zip(x.iter().zip(&mean)) {
            *c = v - mu;
        }
        for i in 0..d {
            let ci = centered[i];
            for j in i..d {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / n as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut enc = Dense::zeros(d, m, Activation::Linear);
    let mut dec = Dense::zeros(m, d, Activation::Linear);
    let mut variances = Vec::with_capacity(m);
    for (k, &col) in order.iter().take(m).enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(col).iter().copied().collect();
        // Sign convention: largest-magnitude entry positive.
        let pivot = v
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |b, (i, x)| if x.abs() > b.1.abs() { (i, *x) } else { b });
        if pivot.1 < 0.0 {
            for x in &mut v {
                *x = -*x;
            }
        }
        enc.weights[k * d..(k + 1) * d].copy_from_slice(&v);
        enc.bias[k] = -v.iter().zip(&mean).map(|(a, b)| a * b).sum::<f64>();
        for (i, &x) in v.iter().enumerate() {
            dec.weights[i * m + k] = x;
        }
        variances.push(eig.eigenvalues[col].max(0.0));
    }
    dec.bias.copy_from_slice(&mean);
    Ok(PcaFit {
        autoencoder: Autoencoder {
            encoder: Mlp { layers: vec![enc] },
            decoder: Mlp { layers: vec![dec] },
        },
        mean,
        variances,
    })
}
