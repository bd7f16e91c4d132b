//! Shared-codebook vector quantizer used by the vector baseline: the latent
//! is cut into consecutive sub-vectors of length `L` and every sub-vector is
//! replaced by its nearest codevector from one codebook shared by all groups.

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{Reader, Writer};
use crate::error::{dim_check, Error, Result};
use crate::nn::LatentQuantizer;

#[derive(Debug, Clone, PartialEq)]
pub struct VectorQuantizer {
    /// Sub-vector length `L`.
    pub dim: usize,
    /// Codevectors, row-major (`len x dim`).
    pub codebook: Vec<f64>,
}

impl VectorQuantizer {
    pub fn len(&self) -> usize {
        self.codebook.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.codebook.is_empty()
    }

    /// Bits per group index.
    pub fn index_bits(&self) -> u32 {
        self.len().trailing_zeros()
    }

    pub fn codevector(&self, i: usize) -> &[f64] {
        &self.codebook[i * self.dim..(i + 1) * self.dim]
    }

    /// Nearest codevector in Euclidean distance, lower index on ties.
    pub fn nearest(&self, v: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, c) in self.codebook.chunks_exact(self.dim).enumerate() {
            let d: f64 = c.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    /// Index of every group of `z`.
    pub fn indices(&self, z: &[f64]) -> Result<Vec<usize>> {
        if z.len() % self.dim != 0 {
            return Err(Error::Dimension(format!(
                "latent length {} is not a multiple of {}",
                z.len(),
                self.dim
            )));
        }
        Ok(z.chunks_exact(self.dim).map(|g| self.nearest(g)).collect())
    }

    pub fn reconstruct(&self, indices: &[usize]) -> Vec<f64> {
        indices
            .iter()
            .flat_map(|&i| self.codevector(i).iter().copied())
            .collect()
    }

    /// Gradient of the batch-mean squared quantization error with respect to
    /// every codevector entry.
    pub fn codebook_grad(&self, batch: &[(&[f64], &[usize])]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Input("codebook loss needs a non-empty batch".into()));
        }
        let n = batch.len() as f64;
        let mut g = vec![0.0; self.codebook.len()];
        let mut loss = 0.0;
        for (z, idx) in batch {
            dim_check("groups", z.len() / self.dim, idx.len())?;
            for (grp, &i) in z.chunks_exact(self.dim).zip(idx.iter()) {
                for (k, &zv) in grp.iter().enumerate() {
                    let w = self.codebook[i * self.dim + k];
                    loss += (w - zv) * (w - zv);
                    g[i * self.dim + k] += 2.0 * (w - zv) / n;
                }
            }
        }
        Ok((loss / n, g))
    }

    /// K-means over sub-vectors of `latents`, seeded with distinct points
    /// drawn at random (seeded).
    pub fn train(
        latents: &[Vec<f64>],
        dim: usize,
        codes: usize,
        max_points: usize,
        max_iters: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut points: Vec<&[f64]> = latents.iter().flat_map(|z| z.chunks_exact(dim)).collect();
        if points.is_empty() {
            return Err(Error::Input("vector K-means needs samples".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cap = max_points.max(4 * codes);
        if points.len() > cap {
            let mut idx = sample_indices(&mut rng, points.len(), cap).into_vec();
            idx.sort_unstable();
            points = idx.into_iter().map(|i| points[i]).collect();
        }
        let n = points.len();
        let mut centers = Vec::with_capacity(codes * dim);
        for i in sample_indices(&mut rng, n, codes.min(n)).into_vec() {
            centers.extend_from_slice(points[i]);
        }
        // Fewer points than codes: repeat points with a small offset.
        let mut k = 0;
        while centers.len() < codes * dim {
            let p = points[k % n];
            let bump = 1e-6 * (1 + k / n) as f64;
            centers.extend(p.iter().map(|v| v + bump));
            k += 1;
        }
        let mut vq = Self {
            dim,
            codebook: centers,
        };
        let mut assign = vec![0usize; n];
        for _ in 0..max_iters {
            let mut changed = false;
            for (a, p) in assign.iter_mut().zip(&points) {
                let j = vq.nearest(p);
                changed |= *a != j;
                *a = j;
            }
            let mut sums = vec![0.0; codes * dim];
            let mut counts = vec![0usize; codes];
            for (&a, p) in assign.iter().zip(&points) {
                counts[a] += 1;
                for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p.iter()) {
                    *s += v;
                }
            }
            for j in 0..codes {
                if counts[j] > 0 {
                    for k in 0..dim {
                        vq.codebook[j * dim + k] = sums[j * dim + k] / counts[j] as f64;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        Ok(vq)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(VQ_MAGIC);
        w.u32(VQ_VERSION);
        w.u32(self.dim as u32);
        w.u32(self.len() as u32);
        w.f64s(&self.codebook);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "vector codebook");
        r.magic(VQ_MAGIC)?;
        r.version(VQ_VERSION)?;
        let dim = r.u32()? as usize;
        let len = r.u32()? as usize;
        if dim == 0 || !len.is_power_of_two() {
            return Err(Error::Corrupt("vector codebook: bad shape".into()));
        }
        let codebook = r.f64s(dim * len)?;
        r.finish()?;
        Ok(Self { dim, codebook })
    }
}

const VQ_MAGIC: &[u8; 4] = b"CSQV";
const VQ_VERSION: u32 = 1;

impl LatentQuantizer for VectorQuantizer {
    fn quantize_latent(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.reconstruct(&self.indices(z)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_and_reconstruct() {
        let vq = VectorQuantizer {
            dim: 2,
            codebook: vec![0.0, 0.0, 1.0, 1.0, -1.0, 1.0, 2.0, -2.0],
        };
        assert_eq!(vq.index_bits(), 2);
        let z = [0.9, 0.8, -0.6, 0.7];
        let idx = vq.indices(&z).unwrap();
        assert_eq!(idx, vec![1, 2]);
        assert_eq!(vq.quantize_latent(&z).unwrap(), vec![1.0, 1.0, -1.0, 1.0]);
        assert!(vq.indices(&[0.0; 3]).is_err());
        // tie -> lower index
        assert_eq!(vq.nearest(&[0.5, 0.5]), 0);
    }

    #[test]
    fn kmeans_recovers_clusters() {
        let latents: Vec<Vec<f64>> = (0..200)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                vec![s + 1e-3 * (i as f64).sin(), s, -s, -s]
            })
            .collect();
        let vq = VectorQuantizer::train(&latents, 2, 2, 1000, 50, 1).unwrap();
        let mut cv: Vec<Vec<f64>> = (0..2).map(|i| vq.codevector(i).to_vec()).collect();
        cv.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert!((cv[0][0] + 1.0).abs() < 1e-2 && (cv[0][1] + 1.0).abs() < 1e-2);
        assert!((cv[1][0] - 1.0).abs() < 1e-2 && (cv[1][1] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn bytes_round_trip() {
        let vq = VectorQuantizer {
            dim: 2,
            codebook: vec![0.0, 0.5, 1.0, 1.5],
        };
        assert_eq!(VectorQuantizer::from_bytes(&vq.to_bytes()).unwrap(), vq);
    }
}
