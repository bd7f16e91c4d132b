//! Synthetic sparse multipath channels, the angle-delay transform and dataset files.
//!
//! Channels are generated in the spatial-frequency domain (subcarriers by
//! antennas), moved into the angle-delay domain with a unitary 2-D inverse
//! DFT and truncated to the first `N_c` delay rows. The reverse path
//! zero-pads back to the full subcarrier count and applies the unitary
//! forward DFT.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};

/// Dense complex matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Dimension("matrix dimensions must be positive".into()));
        }
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::Input("matrix entries must be finite".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.cols + c]
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    /// Unitary 2-D DFT in place (`inverse` selects the +j kernel).
    fn dft2(&mut self, inverse: bool) {
        let mut planner = FftPlanner::<f64>::new();
        let (rows, cols) = (self.rows, self.cols);
        let row_fft = if inverse {
            planner.plan_fft_inverse(cols)
        } else {
            planner.plan_fft_forward(cols)
        };
        for row in self.data.chunks_exact_mut(cols) {
            row_fft.process(row);
        }
        let col_fft = if inverse {
            planner.plan_fft_inverse(rows)
        } else {
            planner.plan_fft_forward(rows)
        };
        let mut col = vec![Complex64::new(0.0, 0.0); rows];
        for c in 0..cols {
            for r in 0..rows {
                col[r] = self.data[r * cols + c];
            }
            col_fft.process(&mut col);
            for r in 0..rows {
                self.data[r * cols + c] = col[r];
            }
        }
        let scale = 1.0 / ((rows * cols) as f64).sqrt();
        for v in &mut self.data {
            *v *= scale;
        }
    }
}

/// Channel in the spatial-frequency domain: `Ñ_c` subcarrier rows by `N_t` antenna columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialFreqChannel(pub ComplexMatrix);

impl SpatialFreqChannel {
    pub fn subcarriers(&self) -> usize {
        self.0.rows
    }
    pub fn antennas(&self) -> usize {
        self.0.cols
    }
}

/// Truncated angle-delay channel: `N_c` delay rows by `N_t` angle columns.
///
/// Also used for reconstructed channels, which share the shape.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedChannel(pub ComplexMatrix);

impl TruncatedChannel {
    pub fn delay_rows(&self) -> usize {
        self.0.rows
    }
    pub fn antennas(&self) -> usize {
        self.0.cols
    }

    /// Real learning vector: all real parts (row-major) followed by all imaginary parts.
    pub fn to_real_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.0.data.len());
        v.extend(self.0.data.iter().map(|c| c.re));
        v.extend(self.0.data.iter().map(|c| c.im));
        v
    }

    pub fn from_real_vec(n_c: usize, n_t: usize, v: &[f64]) -> Result<Self> {
        let n = n_c * n_t;
        if v.len() != 2 * n {
            return Err(Error::Dimension(format!(
                "real vector of length {} does not fit a {n_c}x{n_t} channel",
                v.len()
            )));
        }
        let data = (0..n).map(|i| Complex64::new(v[i], v[n + i])).collect();
        Ok(Self(ComplexMatrix::from_vec(n_c, n_t, data)?))
    }
}

/// Unitary 2-D inverse DFT followed by keeping the first `n_c` rows.
pub fn to_angle_delay(h: &SpatialFreqChannel, n_c: usize) -> Result<TruncatedChannel> {
    let full = angle_delay_image(h);
    truncate_rows(&full, n_c)
}

/// Full (untruncated) angle-delay image of a channel.
pub fn angle_delay_image(h: &SpatialFreqChannel) -> ComplexMatrix {
    let mut m = h.0.clone();
    m.dft2(true);
    m
}

fn truncate_rows(full: &ComplexMatrix, n_c: usize) -> Result<TruncatedChannel> {
    if n_c == 0 || n_c > full.rows {
        return Err(Error::Dimension(format!(
            "truncation rows {n_c} outside 1..={}",
            full.rows
        )));
    }
    let data = full.data[..n_c * full.cols].to_vec();
    Ok(TruncatedChannel(ComplexMatrix {
        rows: n_c,
        cols: full.cols,
        data,
    }))
}

/// Zero-pads the delay rows to `nc_full` and applies the unitary 2-D DFT.
pub fn from_angle_delay(h: &TruncatedChannel, nc_full: usize) -> Result<SpatialFreqChannel> {
    let src = &h.0;
    if nc_full < src.rows {
        return Err(Error::Dimension(format!(
            "target subcarrier count {nc_full} is below truncated rows {}",
            src.rows
        )));
    }
    let mut m = ComplexMatrix::zeros(nc_full, src.cols);
    m.data[..src.data.len()].copy_from_slice(&src.data);
    m.dft2(false);
    Ok(SpatialFreqChannel(m))
}

/// Parameters of the synthetic multipath generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GenParams {
    pub paths_min: usize,
    pub paths_max: usize,
    /// Transmit antennas `N_t`.
    pub n_t: usize,
    /// Subcarriers `Ñ_c`.
    pub nc_full: usize,
    /// Integer delay taps are drawn from `0..delay_spread`.
    pub delay_spread: usize,
    /// Exponential power-delay profile constant, in taps.
    pub delay_decay: f64,
    /// Angle bins are drawn within `±angle_spread` of a per-channel mean bin.
    pub angle_spread: usize,
    /// Off-grid offset bound, in bins, for both angle and delay.
    pub jitter: f64,
    /// Standard deviation, in bins, of the per-channel mean angle around the
    /// array broadside bin `n_t / 2`; 0 draws the mean uniformly over all bins.
    pub sector_std: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            paths_min: 3,
            paths_max: 6,
            n_t: 32,
            nc_full: 256,
            delay_spread: 16,
            delay_decay: 4.0,
            angle_spread: 16,
            jitter: 0.15,
            sector_std: 0.0,
        }
    }
}

impl GenParams {
    /// Small setting used by the default training runs.
    pub fn desk() -> Self {
        Self {
            n_t: 8,
            nc_full: 64,
            delay_spread: 2,
            delay_decay: 1.0,
            angle_spread: 1,
            sector_std: 0.5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.paths_min == 0 || self.paths_max < self.paths_min {
            return bad("path count range must satisfy 1 <= paths_min <= paths_max");
        }
        if self.n_t == 0 || self.nc_full == 0 {
            return bad("antenna and subcarrier counts must be positive");
        }
        if self.delay_spread == 0 || self.delay_spread > self.nc_full {
            return bad("delay spread must be in 1..=nc_full");
        }
        if !(self.delay_decay > 0.0) {
            return bad("delay decay must be positive");
        }
        if !(self.sector_std >= 0.0 && self.sector_std.is_finite()) {
            return bad("sector spread must be finite and non-negative");
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return bad("jitter must be in [0, 0.5)");
        }
        Ok(())
    }
}

/// Generates `count` channels for sample indices `start..start + count` of `seed`.
///
/// Every sample draws from its own ChaCha stream keyed by its index, so a
/// sample does not depend on how many others are generated alongside it.
pub fn generate_range(
    params: &GenParams,
    seed: u64,
    start: u64,
    count: usize,
) -> Result<Vec<SpatialFreqChannel>> {
    params.validate()?;
    Ok((0..count as u64)
        .map(|i| generate_one(params, seed, start + i))
        .collect())
}

pub fn generate_channels(
    params: &GenParams,
    count: usize,
    seed: u64,
) -> Result<Vec<SpatialFreqChannel>> {
    generate_range(params, seed, 0, count)
}

fn generate_one(p: &GenParams, seed: u64, index: u64) -> SpatialFreqChannel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);

    let paths = rng.gen_range(p.paths_min..=p.paths_max);
    let mean_bin = if p.sector_std > 0.0 {
        let offset: f64 = rng.sample(StandardNormal);
        (p.n_t as f64 / 2.0 + p.sector_std * offset).round() as i64
    } else {
        rng.gen_range(0..p.n_t) as i64
    };
    let spread = p.angle_spread as i64;
    let (nc, nt) = (p.nc_full, p.n_t);
    let mut data = vec![Complex64::new(0.0, 0.0); nc * nt];

    let mut phase_row = vec![Complex64::new(0.0, 0.0); nc];
    let mut steer = vec![Complex64::new(0.0, 0.0); nt];
    for _ in 0..paths {
        let tap = rng.gen_range(0..p.delay_spread);
        let delay = tap as f64 + rng.gen_range(0.0..=p.jitter);
        let bin = (mean_bin + rng.gen_range(-spread..=spread)).rem_euclid(nt as i64);
        let angle = bin as f64 + rng.gen_range(-p.jitter..=p.jitter);
        let power = (-(tap as f64) / p.delay_decay).exp();
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        let gain = Complex64::new(re, im) * (power / 2.0).sqrt();

        for (k, v) in phase_row.iter_mut().enumerate() {
            *v = Complex64::from_polar(1.0, -2.0 * PI * k as f64 * delay / nc as f64);
        }
        for (n, v) in steer.iter_mut().enumerate() {
            *v = Complex64::from_polar(1.0, -2.0 * PI * n as f64 * angle / nt as f64);
        }
        for k in 0..nc {
            let a = gain * phase_row[k];
            for n in 0..nt {
                data[k * nt + n] += a * steer[n];
            }
        }
    }

    let norm = data.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut data {
            *v /= norm;
        }
    }
    SpatialFreqChannel(ComplexMatrix {
        rows: nc,
        cols: nt,
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            _ => Err(Error::Corrupt(format!("unknown split tag {t}"))),
        }
    }

    /// Sample-index offset keeping the splits' random streams disjoint.
    fn stream_base(self) -> u64 {
        (self.tag() as u64) << 40
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDataset {
    pub split: Split,
    pub seed: u64,
    pub params: GenParams,
    pub n_c: usize,
    pub samples: Vec<TruncatedChannel>,
}

const DATASET_MAGIC: &[u8; 4] = b"CSIQ";
const DATASET_VERSION: u32 = 1;

impl ChannelDataset {
    pub fn generate(
        params: &GenParams,
        n_c: usize,
        split: Split,
        count: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_c == 0 || n_c >= params.nc_full {
            return Err(Error::Config(format!(
                "truncation rows {n_c} must be in 1..{}",
                params.nc_full
            )));
        }
        let samples = generate_range(params, seed, split.stream_base(), count)?
            .iter()
            .map(|h| to_angle_delay(h, n_c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            split,
            seed,
            params: params.clone(),
            n_c,
            samples,
        })
    }

    pub fn n_t(&self) -> usize {
        self.params.n_t
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Length of the flattened real learning vector, `2 N_c N_t`.
    pub fn input_dim(&self) -> usize {
        2 * self.n_c * self.n_t()
    }

    pub fn real_vectors(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| s.to_real_vec()).collect()
    }

    /// Header (magic, version, N_c, N_t, count, seed), interleaved `(re, im)`
    /// samples, then a trailer carrying the split tag and generator settings.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        w.u32(self.n_c as u32);
        w.u32(self.n_t() as u32);
        w.u64(self.samples.len() as u64);
        w.u64(self.seed);
        for s in &self.samples {
            for c in &s.0.data {
                w.f64(c.re);
                w.f64(c.im);
            }
        }
        let p = &self.params;
        w.u8(self.split.tag());
        w.u32(p.paths_min as u32);
        w.u32(p.paths_max as u32);
        w.u32(p.nc_full as u32);
        w.u32(p.delay_spread as u32);
        w.u32(p.angle_spread as u32);
        w.f64(p.delay_decay);
        w.f64(p.jitter);
        w.f64(p.sector_std);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "dataset");
        r.magic(DATASET_MAGIC)?;
        r.version(DATASET_VERSION)?;
        let n_c = r.u32()? as usize;
        let n_t = r.u32()? as usize;
        let count = r.u64()?;
        let seed = r.u64()?;
        if n_c == 0 || n_t == 0 {
            return Err(Error::Corrupt("dataset: zero matrix dimension".into()));
        }
        let per = 2 * n_c * n_t;
        let need = (count as u128) * (per as u128) * 8;
        if need > r.remaining() as u128 {
            return Err(Error::Corrupt(format!(
                "dataset: header claims {count} samples but only {} body bytes remain",
                r.remaining()
            )));
        }
        let mut samples = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let vals = r.f64s(per)?;
            let data = vals
                .chunks_exact(2)
                .map(|c| Complex64::new(c[0], c[1]))
                .collect();
            samples.push(TruncatedChannel(ComplexMatrix {
                rows: n_c,
                cols: n_t,
                data,
            }));
        }
        let split = Split::from_tag(r.u8()?)?;
        let params = GenParams {
            paths_min: r.u32()? as usize,
            paths_max: r.u32()? as usize,
            n_t,
            nc_full: r.u32()? as usize,
            delay_spread: r.u32()? as usize,
            angle_spread: r.u32()? as usize,
            delay_decay: r.f64()?,
            jitter: r.f64()?,
            sector_std: r.f64()?,
        };
        r.finish()?;
        Ok(Self {
            split,
            seed,
            params,
            n_c,
            samples,
        })
    }
}

pub fn save_dataset(d: &ChannelDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, d.to_bytes())?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<ChannelDataset> {
    ChannelDataset::from_bytes(&fs::read(path)?)
}
