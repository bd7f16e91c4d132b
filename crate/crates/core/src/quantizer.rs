//! Per-output scalar codebooks, nearest-codeword quantization, 1-D K-means
//! and the fixed-width bitstream codec.

use std::fs;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alloc::BitAllocation;
use crate::codec::{Reader, Writer};
use crate::error::{dim_check, Error, Result};
use crate::nn::LatentQuantizer;

/// Spacing used to separate coincident codewords.
pub const TIE_EPS: f64 = 1e-9;

/// Largest supported bits per output.
pub const MAX_BITS: u32 = 16;

/// Sorted scalar codebook with `2^b` codewords, `b >= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    codewords: Vec<f64>,
}

impl Codebook {
    /// Validates an already sorted codeword list.
    pub fn new(codewords: Vec<f64>) -> Result<Self> {
        let n = codewords.len();
        if n < 2 || !n.is_power_of_two() || n > 1 << MAX_BITS {
            return Err(Error::Input(format!(
                "codebook length {n} is not 2^b with 1 <= b <= {MAX_BITS}"
            )));
        }
        if codewords.iter().any(|w| !w.is_finite()) {
            return Err(Error::Input("codewords must be finite".into()));
        }
        if codewords.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Input("codewords must be strictly increasing".into()));
        }
        Ok(Self { codewords })
    }

    /// Sorts `values` and separates ties so the result is strictly increasing.
    pub fn from_values(mut values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|w| !w.is_finite()) {
            return Err(Error::Input("codewords must be finite".into()));
        }
        values.sort_by(f64::total_cmp);
        make_strict(&mut values);
        Self::new(values)
    }

    /// `2^b` evenly spaced codewords over `[lo, hi]`.
    pub fn uniform(bits: u32, lo: f64, hi: f64) -> Result<Self> {
        if bits == 0 || bits > MAX_BITS || !(hi > lo) {
            return Err(Error::Input("uniform codebook needs bits >= 1 and hi > lo".into()));
        }
        let n = 1usize << bits;
        let step = (hi - lo) / (n - 1) as f64;
        Self::new((0..n).map(|i| lo + step * i as f64).collect())
    }

    pub fn codewords(&self) -> &[f64] {
        &self.codewords
    }

    pub fn bits(&self) -> u32 {
        self.codewords.len().trailing_zeros()
    }

    pub fn len(&self) -> usize {
        self.codewords.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Applies `update` to the codewords and restores sortedness.
    pub fn update_codewords(&mut self, update: impl FnOnce(&mut [f64])) -> Result<()> {
        update(&mut self.codewords);
        if self.codewords.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numerical("non-finite codeword after update".into()));
        }
        self.codewords.sort_by(f64::total_cmp);
        make_strict(&mut self.codewords);
        Ok(())
    }
}

pub(crate) fn make_strict(v: &mut [f64]) {
    for i in 1..v.len() {
        let floor = v[i - 1] + TIE_EPS * v[i - 1].abs().max(1.0);
        if v[i] < floor {
            v[i] = floor;
        }
    }
}

/// Nearest codeword to `z` (squared distance), lower index on ties.
pub fn quantize_scalar(z: f64, cb: &Codebook) -> (usize, f64) {
    let w = &cb.codewords;
    let i = w.partition_point(|&c| c < z);
    let dist = |j: usize| (w[j] - z) * (w[j] - z);
    let mut j = if i == 0 {
        0
    } else if i == w.len() {
        w.len() - 1
    } else if dist(i - 1) <= dist(i) {
        i - 1
    } else {
        i
    };
    // Rounding can make several far codewords equidistant; the lowest wins.
    while j > 0 && dist(j - 1) <= dist(j) {
        j -= 1;
    }
    (j, w[j])
}

/// Quantized encoder output: values and codeword indices.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLatent {
    pub values: Vec<f64>,
    pub indices: Vec<usize>,
}

/// One codebook per encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookBank {
    pub books: Vec<Codebook>,
}

impl CodebookBank {
    pub fn len(&self) -> usize {
        self.books.len()
    }

    pub fn is_empty(&self) -> bool {
        self.books.is_empty()
    }

    pub fn bits(&self) -> Vec<u32> {
        self.books.iter().map(Codebook::bits).collect()
    }

    pub fn check_allocation(&self, alloc: &BitAllocation) -> Result<()> {
        if self.bits() != alloc.bits() {
            return Err(Error::Dimension(format!(
                "codebook bank bits {:?} do not match allocation {:?}",
                self.bits(),
                alloc.bits()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(BANK_MAGIC);
        w.u32(BANK_VERSION);
        w.u32(self.books.len() as u32);
        for b in &self.books {
            w.u8(b.bits() as u8);
            w.f64s(&b.codewords);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "codebook bank");
        r.magic(BANK_MAGIC)?;
        r.version(BANK_VERSION)?;
        let m = r.u32()? as usize;
        let mut books = Vec::with_capacity(m.min(1 << 16));
        for _ in 0..m {
            let bits = r.u8()? as u32;
            if bits == 0 || bits > MAX_BITS {
                return Err(Error::Corrupt(format!("codebook bank: invalid bit count {bits}")));
            }
            let cw = r.f64s(1 << bits)?;
            books.push(
                Codebook::new(cw).map_err(|e| Error::Corrupt(format!("codebook bank: {e}")))?,
            );
        }
        r.finish()?;
        Ok(Self { books })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

const BANK_MAGIC: &[u8; 4] = b"CSQB";
const BANK_VERSION: u32 = 1;

pub fn quantize_vector(z: &[f64], bank: &CodebookBank) -> Result<QuantizedLatent> {
    dim_check("latent vs codebook bank", bank.len(), z.len())?;
    let (indices, values) = z
        .iter()
        .zip(&bank.books)
        .map(|(&v, cb)| quantize_scalar(v, cb))
        .unzip();
    Ok(QuantizedLatent { values, indices })
}

impl LatentQuantizer for CodebookBank {
    fn quantize_latent(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(quantize_vector(z, self)?.values)
    }
}

/// Mean squared distance from each sample to its nearest codeword.
pub fn estimate_quant_loss(samples: &[f64], cb: &Codebook) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("quantization loss needs at least one sample".into()));
    }
    let total: f64 = samples
        .iter()
        .map(|&z| {
            let (_, q) = quantize_scalar(z, cb);
            (q - z) * (q - z)
        })
        .sum();
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub max_iters: usize,
    /// Stop once no center moves by this much or more.
    pub tol: f64,
    /// Larger sample sets are subsampled to this many points.
    pub batch: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-10,
            batch: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    /// Strictly increasing centers.
    pub centers: Vec<f64>,
    /// Within-cluster SSE of the centers at the start of every iteration,
    /// followed by the SSE of the returned centers.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansFit {
    pub fn sse(&self) -> f64 {
        *self.sse_history.last().unwrap()
    }
}

/// Subsamples to `cfg.batch` points (seeded) when needed and returns them sorted.
pub fn prepare_samples(samples: &[f64], batch: usize, seed: u64) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Input("K-means needs at least one sample".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite K-means sample".into()));
    }
    let mut v: Vec<f64> = if batch > 0 && samples.len() > batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample_indices(&mut rng, samples.len(), batch).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| samples[i]).collect()
    } else {
        samples.to_vec()
    };
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// 1-D K-means with quantile seeding.
pub fn kmeans_train(
    samples: &[f64],
    k: usize,
    cfg: &KMeansConfig,
    seed: u64,
) -> Result<KMeansFit> {
    if k == 0 {
        return Err(Error::Input("K-means needs K >= 1".into()));
    }
    let sorted = prepare_samples(samples, cfg.batch, seed)?;
    Ok(kmeans_sorted(&sorted, k, cfg))
}

/// K-means on already sorted samples, seeded at `k` sample quantiles.
pub fn kmeans_sorted(sorted: &[f64], k: usize, cfg: &KMeansConfig) -> KMeansFit {
    let distinct = distinct_values(sorted);
    if distinct.len() <= k {
        return padded_fit(sorted, distinct, k);
    }
    lloyd(sorted, quantile_centers(sorted, &distinct, k), cfg)
}

/// K-means on sorted samples starting from the given centers.
pub fn kmeans_from(sorted: &[f64], init: Vec<f64>, cfg: &KMeansConfig) -> KMeansFit {
    let k = init.len();
    let distinct = distinct_values(sorted);
    if distinct.len() <= k {
        return padded_fit(sorted, distinct, k);
    }
    let mut c = init;
    c.sort_by(f64::total_cmp);
    make_strict(&mut c);
    lloyd(sorted, c, cfg)
}

fn distinct_values(sorted: &[f64]) -> Vec<f64> {
    let mut d = sorted.to_vec();
    d.dedup();
    d
}

/// Every distinct value is its own codeword; the rest are padding above the maximum.
fn padded_fit(sorted: &[f64], mut distinct: Vec<f64>, k: usize) -> KMeansFit {
    let top = *distinct.last().unwrap();
    let extra = k - distinct.len();
    distinct.extend((1..=extra).map(|i| top + TIE_EPS * i as f64 * top.abs().max(1.0)));
    make_strict(&mut distinct);
    let sse = assign(sorted, &distinct).sse;
    KMeansFit {
        centers: distinct,
        sse_history: vec![sse],
        iterations: 0,
    }
}

pub(crate) fn quantile_centers(sorted: &[f64], distinct: &[f64], k: usize) -> Vec<f64> {
    let n = sorted.len();
    let c: Vec<f64> = (0..k)
        .map(|i| sorted[(((2 * i + 1) * n) / (2 * k)).min(n - 1)])
        .collect();
    if c.windows(2).all(|w| w[0] < w[1]) {
        return c;
    }
    let u = distinct.len();
    (0..k).map(|i| distinct[((2 * i + 1) * u) / (2 * k)]).collect()
}

struct Assignment {
    counts: Vec<usize>,
    sums: Vec<f64>,
    sse: f64,
    /// Squared residual of every sample.
    residuals: Vec<f64>,
}

fn assign(sorted: &[f64], centers: &[f64]) -> Assignment {
    let k = centers.len();
    let mut counts = vec![0usize; k];
    let mut sums = vec![0.0; k];
    let mut residuals = Vec::with_capacity(sorted.len());
    let mut sse = 0.0;
    let mut j = 0usize;
    for &x in sorted {
        // Sorted samples have non-decreasing nearest-center indices.
        while j + 1 < k && (centers[j + 1] - x).powi(2) < (centers[j] - x).powi(2) {
            j += 1;
        }
        let r = (centers[j] - x).powi(2);
        counts[j] += 1;
        sums[j] += x;
        sse += r;
        residuals.push(r);
    }
    Assignment {
        counts,
        sums,
        sse,
        residuals,
    }
}

fn lloyd(sorted: &[f64], mut centers: Vec<f64>, cfg: &KMeansConfig) -> KMeansFit {
    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let a = assign(sorted, &centers);
        history.push(a.sse);
        let mut next: Vec<f64> = centers.clone();
        let mut empty = Vec::new();
        for j in 0..centers.len() {
            if a.counts[j] > 0 {
                next[j] = a.sums[j] / a.counts[j] as f64;
            } else {
                empty.push(j);
            }
        }
        if !empty.is_empty() {
            // Reseed empty clusters at the worst-fit samples.
            let mut order: Vec<usize> = (0..sorted.len()).collect();
            order.sort_by(|&p, &q| a.residuals[q].total_cmp(&a.residuals[p]).then(p.cmp(&q)));
            for (slot, &j) in empty.iter().enumerate() {
                next[j] = sorted[order[slot.min(order.len() - 1)]];
            }
        }
        next.sort_by(f64::total_cmp);
        make_strict(&mut next);
        let moved = next
            .iter()
            .zip(&centers)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        centers = next;
        if moved < cfg.tol {
            break;
        }
    }
    history.push(assign(sorted, &centers).sse);
    KMeansFit {
        centers,
        sse_history: history,
        iterations,
    }
}

/// Trains a `bits`-bit codebook on sorted samples.
pub fn train_codebook(sorted: &[f64], bits: u32, cfg: &KMeansConfig) -> Result<Codebook> {
    if bits == 0 || bits > MAX_BITS {
        return Err(Error::Input(format!("bit count {bits} outside 1..={MAX_BITS}")));
    }
    Codebook::new(kmeans_sorted(sorted, 1 << bits, cfg).centers)
}

/// Packed feedback message; `len_bits` equals the allocation's total bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub bytes: Vec<u8>,
    pub len_bits: usize,
}

impl Bitstream {
    pub fn bit(&self, i: usize) -> bool {
        self.bytes[i / 8] >> (7 - i % 8) & 1 == 1
    }

    pub fn flip(&mut self, i: usize) {
        self.bytes[i / 8] ^= 1 << (7 - i % 8);
    }

    /// Wire form: little-endian u16 bit length followed by the packed bytes.
    pub fn to_wire(&self) -> Result<Vec<u8>> {
        let len = u16::try_from(self.len_bits)
            .map_err(|_| Error::Input(format!("{} bits exceed the u16 length prefix", self.len_bits)))?;
        let mut out = len.to_le_bytes().to_vec();
        out.extend_from_slice(&self.bytes);
        Ok(out)
    }

    /// Parses one wire message from the front of `buf`, returning it and the bytes consumed.
    pub fn from_wire(buf: &[u8]) -> Result<(Self, usize)> {
        if buf.len() < 2 {
            return Err(Error::Corrupt("bitstream: missing length prefix".into()));
        }
        let len_bits = u16::from_le_bytes([buf[0], buf[1]]) as usize;
        let nbytes = len_bits.div_ceil(8);
        if buf.len() < 2 + nbytes {
            return Err(Error::Corrupt(format!(
                "bitstream: {len_bits} bits announced, {} bytes present",
                buf.len() - 2
            )));
        }
        Ok((
            Self {
                bytes: buf[2..2 + nbytes].to_vec(),
                len_bits,
            },
            2 + nbytes,
        ))
    }
}

/// Writes each index in `alloc.bits()[m]` bits, outputs in order, MSB first.
pub fn pack_bitstream(q: &QuantizedLatent, alloc: &BitAllocation) -> Result<Bitstream> {
    let bits = alloc.bits();
    dim_check("indices vs allocation", bits.len(), q.indices.len())?;
    let total: usize = bits.iter().map(|&b| b as usize).sum();
    let mut bytes = vec![0u8; total.div_ceil(8)];
    let mut pos = 0usize;
    for (m, (&idx, &b)) in q.indices.iter().zip(bits).enumerate() {
        if (idx as u64) >> b != 0 {
            return Err(Error::Input(format!(
                "index {idx} of output {m} does not fit in {b} bits"
            )));
        }
        for k in (0..b).rev() {
            if (idx >> k) & 1 == 1 {
                bytes[pos / 8] |= 1 << (7 - pos % 8);
            }
            pos += 1;
        }
    }
    Ok(Bitstream {
        bytes,
        len_bits: total,
    })
}

pub fn unpack_bitstream(
    x: &Bitstream,
    alloc: &BitAllocation,
    bank: &CodebookBank,
) -> Result<QuantizedLatent> {
    bank.check_allocation(alloc)?;
    let bits = alloc.bits();
    let total: usize = bits.iter().map(|&b| b as usize).sum();
    if x.len_bits != total || x.bytes.len() != total.div_ceil(8) {
        return Err(Error::Corrupt(format!(
            "bitstream holds {} bits in {} bytes, allocation needs {total}",
            x.len_bits,
            x.bytes.len()
        )));
    }
    let mut pos = 0usize;
    let mut indices = Vec::with_capacity(bits.len());
    let mut values = Vec::with_capacity(bits.len());
    for (&b, cb) in bits.iter().zip(&bank.books) {
        let mut idx = 0usize;
        for _ in 0..b {
            idx = (idx << 1) | x.bit(pos) as usize;
            pos += 1;
        }
        indices.push(idx);
        values.push(cb.codewords[idx]);
    }
    Ok(QuantizedLatent { values, indices })
}
