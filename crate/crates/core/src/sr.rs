//! Singular regularization (SR) block.
//!
//! Two branches act on the same input. The vector branch multiplies the
//! channel axis by a `12 x 3` matrix kept near column-orthonormal, which
//! leaves the singular values of the channel-flattened input untouched. The
//! value branch rescales the 2-D Fourier coefficients of every channel. A
//! `1 x 1` convolution fuses the 15 branch channels back to 3, followed by
//! batch normalization.

use candle_core::{DType, Device, Tensor, Var};
use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvInit, Mode, ParamStore};

pub const SR_CHANNELS: usize = 3;
pub const ORTHOGONAL_CHANNELS: usize = 12;

/// Channel-mixing weight `W` (`out x in`) applied at every pixel.
#[derive(Clone)]
pub struct OrthogonalTransform {
    pub weight: Var,
}

impl OrthogonalTransform {
    /// Random matrix with orthonormalized columns.
    pub fn new(store: &mut ParamStore, path: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        if out_ch < in_ch {
            return Err(Error::Config(format!(
                "orthogonal transform needs out >= in, got {out_ch} < {in_ch}"
            )));
        }
        let rng = store.rng();
        let raw = DMatrix::<f64>::from_fn(out_ch, in_ch, |_, _| StandardNormal.sample(rng));
        let q = raw.qr().q();
        let values: Vec<f64> = (0..out_ch)
            .flat_map(|r| (0..in_ch).map(move |c| (r, c)))
            .map(|(r, c)| q[(r, c)])
            .collect();
        let weight = store.param_from_vec(format!("{path}.weight"), values, &[out_ch, in_ch])?;
        Ok(Self { weight })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    /// `(N, in, H, W) -> (N, out, H, W)`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.in_channels() {
            return Err(Error::shape("orthogonal transform channels", &[self.in_channels()], &[c]));
        }
        let flat = x.reshape((n, c, h * w))?;
        let out = self.weight.as_tensor().broadcast_matmul(&flat)?;
        Ok(out.reshape((n, self.out_channels(), h, w))?)
    }

    /// `||W^T W - I||_F^2`.
    pub fn penalty(&self) -> Result<Tensor> {
        orthogonality_penalty(self.weight.as_tensor())
    }
}

/// `||W^T W - I||_F^2` for a `k x c` weight; zero iff the columns are orthonormal.
pub fn orthogonality_penalty(weight: &Tensor) -> Result<Tensor> {
    let (_, c) = weight.dims2()?;
    let gram = weight.t()?.matmul(weight)?;
    let eye = Tensor::eye(c, weight.dtype(), weight.device())?;
    Ok((gram - eye)?.sqr()?.sum_all()?)
}

/// Learnable per-frequency complex scaling of the 2-D DFT of each channel.
///
/// The free parameters `P` (real) and `Q` (imaginary) are symmetrized so the
/// effective scale satisfies `M(u, v) = conj(M(-u, -v))`, which keeps the
/// inverse transform of a real input exactly real.
#[derive(Clone)]
pub struct FourierModulator {
    pub real: Var,
    pub imag: Var,
    size: usize,
    cos: Tensor,
    sin: Tensor,
    flip: Tensor,
}

fn dft_tables(n: usize, dtype: DType, device: &Device) -> Result<(Tensor, Tensor, Tensor)> {
    let mut cos = vec![0.0; n * n];
    let mut sin = vec![0.0; n * n];
    let mut flip = vec![0.0; n * n];
    for j in 0..n {
        for k in 0..n {
            // reduce the phase index first so large n keeps full precision
            let phase = 2.0 * std::f64::consts::PI * ((j * k) % n) as f64 / n as f64;
            cos[j * n + k] = phase.cos();
            sin[j * n + k] = phase.sin();
        }
        flip[j * n + (n - j) % n] = 1.0;
    }
    let make = |v: Vec<f64>| -> Result<Tensor> {
        Ok(Tensor::from_vec(v, (n, n), device)?.to_dtype(dtype)?)
    };
    Ok((make(cos)?, make(sin)?, make(flip)?))
}

impl FourierModulator {
    /// Identity-initialized modulator (`scale = 1 + 0i`).
    pub fn new(store: &mut ParamStore, path: &str, channels: usize, size: usize) -> Result<Self> {
        let real = store.param_const(format!("{path}.real"), &[channels, size, size], 1.0)?;
        let imag = store.param_const(format!("{path}.imag"), &[channels, size, size], 0.0)?;
        let (cos, sin, flip) = dft_tables(size, store.dtype(), store.device())?;
        Ok(Self {
            real,
            imag,
            size,
            cos,
            sin,
            flip,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn channels(&self) -> usize {
        self.real.dims()[0]
    }

    /// Conjugate-symmetric effective scale `(A, B)` with `M = A + iB`.
    pub fn effective_scale(&self) -> Result<(Tensor, Tensor)> {
        let flip = |t: &Tensor| -> Result<Tensor> {
            Ok(self.flip.broadcast_matmul(t)?.broadcast_matmul(&self.flip)?)
        };
        let p = self.real.as_tensor();
        let q = self.imag.as_tensor();
        let a = ((p + flip(p)?)? * 0.5)?;
        let b = ((q - flip(q)?)? * 0.5)?;
        Ok((a, b))
    }

    /// Unnormalized forward DFT of every channel, as `(real, imag)`.
    pub fn forward_dft(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (c, s) = (&self.cos, &self.sin);
        let xc = x.broadcast_matmul(c)?;
        let xs = x.broadcast_matmul(s)?;
        let re = (c.broadcast_matmul(&xc)? - s.broadcast_matmul(&xs)?)?;
        let im = (c.broadcast_matmul(&xs)? + s.broadcast_matmul(&xc)?)?.neg()?;
        Ok((re, im))
    }

    /// Real part of the inverse DFT with `1/(n^2)` synthesis normalization.
    pub fn inverse_dft_real(&self, re: &Tensor, im: &Tensor) -> Result<Tensor> {
        let (c, s) = (&self.cos, &self.sin);
        let rc = re.broadcast_matmul(c)?;
        let rs = re.broadcast_matmul(s)?;
        let ic = im.broadcast_matmul(c)?;
        let is = im.broadcast_matmul(s)?;
        let out = (((c.broadcast_matmul(&rc)? - s.broadcast_matmul(&rs)?)?
            - c.broadcast_matmul(&is)?)?
            - s.broadcast_matmul(&ic)?)?;
        Ok((out / (self.size * self.size) as f64)?)
    }

    /// `(N, C, n, n) -> (N, C, n, n)`: DFT, elementwise complex scaling, inverse DFT.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if h != w {
            return Err(Error::NonSquare { rows: h, cols: w });
        }
        if h != self.size || c != self.channels() {
            return Err(Error::shape(
                "fourier modulator input",
                &[self.channels(), self.size, self.size],
                &[c, h, w],
            ));
        }
        let (re, im) = self.forward_dft(x)?;
        let (a, b) = self.effective_scale()?;
        let mod_re = (re.broadcast_mul(&a)? - im.broadcast_mul(&b)?)?;
        let mod_im = (re.broadcast_mul(&b)? + im.broadcast_mul(&a)?)?;
        self.inverse_dft_real(&mod_re, &mod_im)
    }
}

/// One SR unit operating at a fixed square resolution.
#[derive(Clone)]
pub struct SrBlock {
    pub orthogonal: OrthogonalTransform,
    pub fourier: FourierModulator,
    pub fusion: Conv2d,
    pub norm: BatchNorm2d,
}

impl SrBlock {
    pub fn new(store: &mut ParamStore, path: &str, size: usize) -> Result<Self> {
        Ok(Self {
            orthogonal: OrthogonalTransform::new(
                store,
                &format!("{path}.orthogonal"),
                SR_CHANNELS,
                ORTHOGONAL_CHANNELS,
            )?,
            fourier: FourierModulator::new(store, &format!("{path}.fourier"), SR_CHANNELS, size)?,
            fusion: Conv2d::new(
                store,
                &format!("{path}.fusion"),
                ORTHOGONAL_CHANNELS + SR_CHANNELS,
                SR_CHANNELS,
                1,
                1,
                0,
                true,
                ConvInit::KaimingFanOut,
            )?,
            norm: BatchNorm2d::new(store, &format!("{path}.norm"), SR_CHANNELS)?,
        })
    }

    pub fn size(&self) -> usize {
        self.fourier.size()
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let vectors = self.orthogonal.apply(x)?;
        let values = self.fourier.apply(x)?;
        let fused = self.fusion.forward(&Tensor::cat(&[&vectors, &values], 1)?)?;
        self.norm.forward(&fused, mode)
    }

    pub fn penalty(&self) -> Result<Tensor> {
        self.orthogonal.penalty()
    }

    pub fn macs(&self) -> u64 {
        let n = self.size();
        let pixels = (n * n) as u64;
        let orth = (self.orthogonal.out_channels() * self.orthogonal.in_channels()) as u64 * pixels;
        // two real n x n matrix products per DFT, four real products per complex one
        let dft = 2 * 4 * (SR_CHANNELS * n * n * n) as u64;
        let modulate = 4 * SR_CHANNELS as u64 * pixels;
        orth + 2 * dft + modulate + self.fusion.macs(n, n) + self.norm.macs(n, n)
    }
}
