//! Dense autoencoder with hand-written reverse-mode gradients and ADAM.
//!
//! The quantizer sits between encoder and decoder. During training the
//! forward pass feeds the quantized latent to the decoder while the backward
//! pass treats the quantizer as identity (straight-through estimator).

use rand::Rng;

use crate::codec::{Reader, Writer};
use crate::error::{dim_check, Error, Result};

const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    LeakyRelu,
    Sigmoid,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::LeakyRelu => {
                if pre > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Sigmoid => out * (1.0 - out),
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Linear => 0,
            Activation::LeakyRelu => 1,
            Activation::Sigmoid => 2,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Activation::Linear),
            1 => Ok(Activation::LeakyRelu),
            2 => Ok(Activation::Sigmoid),
            _ => Err(Error::Corrupt(format!("unknown activation tag {t}"))),
        }
    }
}

/// Fully connected layer `y = act(W x + b)` with `W` stored row-major (`outputs x inputs`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            activation,
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng>(inputs: usize, outputs: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| rng.gen_range(-limit..=limit))
            .collect();
        Self {
            inputs,
            outputs,
            weights,
            bias: vec![0.0; outputs],
            activation,
        }
    }

    fn pre_activation(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }
}

/// Intermediate values of one forward pass through an [`Mlp`].
#[derive(Debug, Clone)]
pub struct MlpTape {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        dim_check("network input", self.input_dim(), x.len())?;
        let mut cur = x.to_vec();
        for l in &self.layers {
            let act = l.activation;
            cur = l.pre_activation(&cur).into_iter().map(|p| act.apply(p)).collect();
        }
        Ok(cur)
    }

    pub fn forward_tape(&self, x: &[f64]) -> Result<MlpTape> {
        dim_check("network input", self.input_dim(), x.len())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        for l in &self.layers {
            let p = l.pre_activation(&cur);
            let next = p.iter().map(|&v| l.activation.apply(v)).collect();
            inputs.push(std::mem::replace(&mut cur, next));
            pre.push(p);
        }
        Ok(MlpTape {
            inputs,
            pre,
            output: cur,
        })
    }

    /// Accumulates parameter gradients into `grads` (two tensors per layer,
    /// weights then bias) and returns the gradient with respect to the input.
    pub fn backward(&self, tape: &MlpTape, grad_out: &[f64], grads: &mut [Vec<f64>]) -> Vec<f64> {
        let mut g = grad_out.to_vec();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let out = if i + 1 < self.layers.len() {
                &tape.inputs[i + 1]
            } else {
                &tape.output
            };
            for ((gj, &p), &o) in g.iter_mut().zip(&tape.pre[i]).zip(out) {
                *gj *= l.activation.derivative(p, o);
            }
            let x = &tape.inputs[i];
            let (gw, rest) = grads[2 * i..].split_at_mut(1);
            let gw = &mut gw[0];
            let gb = &mut rest[0];
            for (j, &gj) in g.iter().enumerate() {
                if gj == 0.0 {
                    continue;
                }
                gb[j] += gj;
                for (w, &xv) in gw[j * l.inputs..(j + 1) * l.inputs].iter_mut().zip(x) {
                    *w += gj * xv;
                }
            }
            let mut gin = vec![0.0; l.inputs];
            for (row, &gj) in l.weights.chunks_exact(l.inputs).zip(&g) {
                if gj == 0.0 {
                    continue;
                }
                for (gi, w) in gin.iter_mut().zip(row) {
                    *gi += gj * w;
                }
            }
            g = gin;
        }
        g
    }

    fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .flat_map(|l| [vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]])
            .collect()
    }
}

/// Quantizer placed between encoder and decoder.
pub trait LatentQuantizer {
    fn quantize_latent(&self, z: &[f64]) -> Result<Vec<f64>>;
}

/// Pass-through quantizer used by the non-quantized paths.
pub struct Identity;

impl LatentQuantizer for Identity {
    fn quantize_latent(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(z.to_vec())
    }
}

/// Parameter gradients in [`Autoencoder::params_mut`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            for v in t {
                *v *= s;
            }
        }
    }
}

/// Result of a straight-through forward pass.
#[derive(Debug, Clone)]
pub struct SteForward {
    pub z: Vec<f64>,
    pub zq: Vec<f64>,
    pub h_hat: Vec<f64>,
    enc: MlpTape,
    dec: MlpTape,
}

/// Gradients at the quantizer boundary from [`Autoencoder::backward_ste`].
#[derive(Debug, Clone)]
pub struct BoundaryGrads {
    /// Reconstruction-path gradient at the decoder input.
    pub at_zq: Vec<f64>,
    /// Total gradient handed to the encoder output.
    pub at_z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    pub encoder: Mlp,
    pub decoder: Mlp,
}

impl Autoencoder {
    /// Encoder `input -> hidden -> latent`, decoder mirrored; hidden layers
    /// use leaky ReLU, the decoder output is linear.
    pub fn new<R: Rng>(
        input_dim: usize,
        hidden: usize,
        latent: usize,
        latent_activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || latent == 0 {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        Ok(Self {
            encoder: Mlp {
                layers: vec![
                    Dense::glorot(input_dim, hidden, Activation::LeakyRelu, rng),
                    Dense::glorot(hidden, latent, latent_activation, rng),
                ],
            },
            decoder: Mlp {
                layers: vec![
                    Dense::glorot(latent, hidden, Activation::LeakyRelu, rng),
                    Dense::glorot(hidden, input_dim, Activation::Linear, rng),
                ],
            },
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.layers.is_empty() || self.decoder.layers.is_empty() {
            return Err(Error::Config("encoder and decoder need at least one layer".into()));
        }
        for net in [&self.encoder, &self.decoder] {
            for w in net.layers.windows(2) {
                dim_check("layer chaining", w[0].outputs, w[1].inputs)?;
            }
        }
        dim_check("latent width", self.encoder.output_dim(), self.decoder.input_dim())?;
        dim_check("reconstruction width", self.encoder.input_dim(), self.decoder.output_dim())?;
        Ok(())
    }

    pub fn encode(&self, h: &[f64]) -> Result<Vec<f64>> {
        self.encoder.forward(h)
    }

    pub fn decode(&self, zq: &[f64]) -> Result<Vec<f64>> {
        self.decoder.forward(zq)
    }

    pub fn forward_with_ste(&self, h: &[f64], q: &dyn LatentQuantizer) -> Result<SteForward> {
        let enc = self.encoder.forward_tape(h)?;
        let z = enc.output.clone();
        let zq = q.quantize_latent(&z)?;
        dim_check("quantized latent", z.len(), zq.len())?;
        let dec = self.decoder.forward_tape(&zq)?;
        Ok(SteForward {
            z,
            zq,
            h_hat: dec.output.clone(),
            enc,
            dec,
        })
    }

    pub fn zero_grads(&self) -> Gradients {
        let mut tensors = self.encoder.zero_grads();
        tensors.extend(self.decoder.zero_grads());
        Gradients { tensors }
    }

    /// Backpropagates `grad_h_hat` through the decoder, passes the result
    /// straight through the quantizer, adds `grad_z_direct` (the exact
    /// gradient of any term that reads `z` itself) and backpropagates
    /// through the encoder. Gradients are accumulated into `grads`.
    pub fn backward_ste(
        &self,
        fwd: &SteForward,
        grad_h_hat: &[f64],
        grad_z_direct: &[f64],
        grads: &mut Gradients,
    ) -> Result<BoundaryGrads> {
        dim_check("reconstruction gradient", fwd.h_hat.len(), grad_h_hat.len())?;
        dim_check("latent gradient", fwd.z.len(), grad_z_direct.len())?;
        let n_enc = 2 * self.encoder.layers.len();
        let (enc_g, dec_g) = grads.tensors.split_at_mut(n_enc);
        let at_zq = self.decoder.backward(&fwd.dec, grad_h_hat, dec_g);
        let at_z: Vec<f64> = at_zq.iter().zip(grad_z_direct).map(|(a, b)| a + b).collect();
        self.encoder.backward(&fwd.enc, &at_z, enc_g);
        Ok(BoundaryGrads { at_zq, at_z })
    }

    /// All parameter tensors: per encoder layer weights then bias, then the decoder.
    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.encoder
            .layers
            .iter_mut()
            .chain(self.decoder.layers.iter_mut())
            .flat_map(|l| [&mut l.weights, &mut l.bias])
            .collect()
    }

    pub fn params(&self) -> Vec<&Vec<f64>> {
        self.encoder
            .layers
            .iter()
            .chain(self.decoder.layers.iter())
            .flat_map(|l| [&l.weights, &l.bias])
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MODEL_MAGIC);
        w.u32(MODEL_VERSION);
        for net in [&self.encoder, &self.decoder] {
            w.u32(net.layers.len() as u32);
            for l in &net.layers {
                w.u32(l.inputs as u32);
                w.u32(l.outputs as u32);
                w.u8(l.activation.tag());
                w.f64s(&l.weights);
                w.f64s(&l.bias);
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "model checkpoint");
        r.magic(MODEL_MAGIC)?;
        r.version(MODEL_VERSION)?;
        let mut nets = Vec::with_capacity(2);
        for _ in 0..2 {
            let n = r.u32()? as usize;
            let mut layers = Vec::new();
            for _ in 0..n {
                let inputs = r.u32()? as usize;
                let outputs = r.u32()? as usize;
                let activation = Activation::from_tag(r.u8()?)?;
                let weights = r.f64s(inputs * outputs)?;
                let bias = r.f64s(outputs)?;
                layers.push(Dense {
                    inputs,
                    outputs,
                    weights,
                    bias,
                    activation,
                });
            }
            nets.push(Mlp { layers });
        }
        r.finish()?;
        let decoder = nets.pop().unwrap();
        let encoder = nets.pop().unwrap();
        let ae = Self { encoder, decoder };
        ae.validate()
            .map_err(|e| Error::Corrupt(format!("model checkpoint: {e}")))?;
        Ok(ae)
    }
}

const MODEL_MAGIC: &[u8; 4] = b"CSQM";
const MODEL_VERSION: u32 = 1;

/// ADAM moments and learning-rate schedule for a list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplies the learning rate at every [`AdamState::end_epoch`].
    pub decay: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(shapes: &[usize], lr: f64, decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_autoencoder(ae: &Autoencoder, lr: f64, decay: f64) -> Self {
        let shapes: Vec<usize> = ae.params().iter().map(|t| t.len()).collect();
        Self::new(&shapes, lr, decay)
    }

    pub fn end_epoch(&mut self) {
        self.lr *= self.decay;
    }

    /// One ADAM update of `params` with `grads`; rejects non-finite gradients
    /// before touching any state.
    pub fn update(&mut self, params: &mut [&mut Vec<f64>], grads: &[Vec<f64>]) -> Result<()> {
        dim_check("gradient tensor count", self.m.len(), grads.len())?;
        dim_check("parameter tensor count", self.m.len(), params.len())?;
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            dim_check("parameter tensor", self.m[i].len(), p.len())?;
            dim_check("gradient tensor", self.m[i].len(), g.len())?;
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient {} in tensor {i} at entry {j} (step {})",
                    g[j], self.step
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

pub fn adam_step(ae: &mut Autoencoder, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    let mut params = ae.params_mut();
    state.update(&mut params, &grads.tensors)?;
    if !ae.all_finite() {
        return Err(Error::Numerical(format!(
            "non-finite parameter after ADAM step {}",
            state.step
        )));
    }
    Ok(())
}
