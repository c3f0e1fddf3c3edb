//! Cosine ground-truth signals, Gaussian blur / subsampling operators and PSNR.

// negated comparisons below are deliberate: NaN parameters must fail them
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{dot, LinearMap, Tensor};
use crate::error::{Error, Result};

pub const KERNEL_SIZE: usize = 7;
pub const DEFAULT_SIGMA_B: f64 = 0.2;
pub const DEFAULT_FACTOR: usize = 4;
pub const NORM_ITERS: usize = 100;
const MSE_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineConfig {
    /// Samples per signal on `[-π/2, π/2]`, endpoints included.
    pub n: usize,
    /// Standard deviation of the measurement noise.
    pub sigma_n: f64,
    pub freq_min: f64,
    pub freq_max: f64,
}

impl Default for CosineConfig {
    fn default() -> Self {
        CosineConfig {
            n: 50,
            sigma_n: 0.01,
            freq_min: 0.0,
            freq_max: 2.0 * PI,
        }
    }
}

impl CosineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::invalid(format!("signal length must be >= 2, got {}", self.n)));
        }
        if !(self.sigma_n >= 0.0) {
            return Err(Error::invalid(format!("sigma_n must be >= 0, got {}", self.sigma_n)));
        }
        if !(self.freq_max > self.freq_min) {
            return Err(Error::invalid("frequency range is empty"));
        }
        Ok(())
    }

    /// Distance between neighbouring sample positions.
    pub fn grid_spacing(&self) -> f64 {
        PI / (self.n - 1) as f64
    }
}

/// `x_i = cos(f ω_i + offset_x) + offset_y` on the sampling grid.
pub fn cosine_signal(n: usize, freq: f64, offset_x: f64, offset_y: f64) -> Vec<f64> {
    let h = PI / (n - 1) as f64;
    (0..n)
        .map(|i| (freq * (-FRAC_PI_2 + i as f64 * h) + offset_x).cos() + offset_y)
        .collect()
}

/// `batch` independent cosines as a `[batch, 1, n]` tensor.
pub fn sample_cosine_batch<R: Rng + ?Sized>(rng: &mut R, batch: usize, cfg: &CosineConfig) -> Tensor {
    let freq = Uniform::new(cfg.freq_min, cfg.freq_max).expect("validated frequency range");
    let mut data = Vec::with_capacity(batch * cfg.n);
    for _ in 0..batch {
        let f = freq.sample(rng);
        let ox: f64 = rng.sample(StandardNormal);
        let oy: f64 = rng.sample(StandardNormal);
        data.extend(cosine_signal(cfg.n, f, ox, oy));
    }
    Tensor::from_parts(vec![batch, 1, cfg.n], data)
}

/// Normalized Gaussian weights `w_j ∝ exp(-(j h)² / 2σ²)`, `j = -size/2 ..= size/2`.
pub fn gaussian_kernel(size: usize, sigma_b: f64, grid_spacing: f64) -> Result<Vec<f64>> {
    if size.is_multiple_of(2) {
        return Err(Error::invalid(format!("kernel size {size} must be odd")));
    }
    if !(sigma_b > 0.0) || !(grid_spacing > 0.0) {
        return Err(Error::invalid("sigma_b and grid spacing must be positive"));
    }
    let half = (size / 2) as isize;
    let raw: Vec<f64> = (-half..=half)
        .map(|j| {
            let d = j as f64 * grid_spacing;
            (-d * d / (2.0 * sigma_b * sigma_b)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Degradation {
    Blur,
    #[serde(alias = "blur-downsample")]
    Downsample,
}

/// The forward model `A`: zero-padded blur, optionally followed by subsampling.
#[derive(Clone, Debug)]
pub struct DegradationOperator {
    kind: Degradation,
    kernel: Vec<f64>,
    sigma_b: Option<f64>,
    factor: usize,
    n: usize,
    m: usize,
    norm: f64,
}

impl DegradationOperator {
    pub fn new(kind: Degradation, n: usize, sigma_b: f64) -> Result<Self> {
        let factor = match kind {
            Degradation::Blur => 1,
            Degradation::Downsample => DEFAULT_FACTOR,
        };
        if n < 2 {
            return Err(Error::invalid(format!("signal length must be >= 2, got {n}")));
        }
        let kernel = gaussian_kernel(KERNEL_SIZE, sigma_b, PI / (n - 1) as f64)?;
        let mut op = Self::from_kernel(kernel, factor, n)?;
        op.kind = kind;
        op.sigma_b = Some(sigma_b);
        Ok(op)
    }

    pub fn blur(n: usize) -> Result<Self> {
        Self::new(Degradation::Blur, n, DEFAULT_SIGMA_B)
    }

    pub fn downsample(n: usize) -> Result<Self> {
        Self::new(Degradation::Downsample, n, DEFAULT_SIGMA_B)
    }

    /// Operator with an explicit (odd-length, not necessarily normalized) kernel.
    pub fn from_kernel(kernel: Vec<f64>, factor: usize, n: usize) -> Result<Self> {
        if kernel.len().is_multiple_of(2) {
            return Err(Error::invalid(format!("kernel length {} must be odd", kernel.len())));
        }
        if factor == 0 || n == 0 {
            return Err(Error::invalid("factor and signal length must be positive"));
        }
        let mut op = DegradationOperator {
            kind: if factor == 1 {
                Degradation::Blur
            } else {
                Degradation::Downsample
            },
            kernel,
            sigma_b: None,
            factor,
            n,
            m: n.div_ceil(factor),
            norm: 0.0,
        };
        op.norm = operator_norm_estimate(&op, NORM_ITERS);
        Ok(op)
    }

    pub fn kind(&self) -> Degradation {
        self.kind
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn sigma_b(&self) -> Option<f64> {
        self.sigma_b
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Power-iteration estimate of `‖A‖₂` computed at construction.
    pub fn norm(&self) -> f64 {
        self.norm
    }

    fn check(&self, t: &Tensor, len: usize) -> Result<(usize, usize)> {
        let (b, c, l) = t.dims3()?;
        if c != 1 || l != len {
            return Err(Error::invalid(format!(
                "operator expects [B, 1, {len}], got {:?}",
                t.shape()
            )));
        }
        Ok((b, l))
    }

    pub fn apply_forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _) = self.check(x, self.n)?;
        let mut out = vec![0.0; b * self.m];
        for (src, dst) in x.data().chunks(self.n).zip(out.chunks_mut(self.m)) {
            self.forward_into(src, dst);
        }
        Tensor::new(vec![b, 1, self.m], out)
    }

    pub fn apply_adjoint(&self, y: &Tensor) -> Result<Tensor> {
        let (b, _) = self.check(y, self.m)?;
        let mut out = vec![0.0; b * self.n];
        for (src, dst) in y.data().chunks(self.m).zip(out.chunks_mut(self.n)) {
            self.adjoint_into(src, dst);
        }
        Tensor::new(vec![b, 1, self.n], out)
    }
}

impl LinearMap for DegradationOperator {
    fn input_len(&self) -> usize {
        self.n
    }

    fn output_len(&self) -> usize {
        self.m
    }

    /// `y[r] = Σ_j k[j] x[r·factor + j - h]`, out-of-range samples read as zero.
    fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        let h = self.kernel.len() / 2;
        for (r, o) in out.iter_mut().enumerate() {
            let (lo, hi, start) = self.taps(r, h);
            *o = dot(&self.kernel[lo..hi], &x[start..start + (hi - lo)]);
        }
    }

    /// Zero-insertion upsampling followed by the transposed zero-padded correlation.
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let h = self.kernel.len() / 2;
        for (r, v) in y.iter().enumerate() {
            let (lo, hi, start) = self.taps(r, h);
            for (o, w) in out[start..start + (hi - lo)].iter_mut().zip(&self.kernel[lo..hi]) {
                *o += w * v;
            }
        }
    }
}

impl DegradationOperator {
    /// Kernel taps `lo..hi` of output row `r` that land inside the signal, and the first sample index.
    #[inline]
    fn taps(&self, r: usize, h: usize) -> (usize, usize, usize) {
        let centre = r * self.factor;
        let lo = h.saturating_sub(centre);
        let hi = (self.n + h).saturating_sub(centre).min(self.kernel.len()).max(lo);
        (lo, hi, centre + lo - h)
    }
}

/// Power iteration on `AᵀA`; returns the square root of the dominant eigenvalue.
pub fn operator_norm_estimate(op: &DegradationOperator, iters: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..op.n)
        .map(|_| 1.0 + 0.1 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut av = vec![0.0; op.m];
    let mut w = vec![0.0; op.n];
    let mut estimate = 0.0;
    for _ in 0..iters.max(1) {
        let norm = dot(&v, &v).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        op.forward_into(&v, &mut av);
        op.adjoint_into(&av, &mut w);
        // Rayleigh quotient of AᵀA at the unit vector v
        estimate = dot(&v, &w);
        std::mem::swap(&mut v, &mut w);
    }
    estimate.max(0.0).sqrt()
}

#[derive(Clone, Debug)]
pub struct SignalBatch {
    pub clean: Tensor,
    pub measured: Tensor,
}

/// Fresh clean signals, their degraded versions, and i.i.d. `N(0, σ_n²)` noise.
pub fn make_batch<R: Rng + ?Sized>(
    rng: &mut R,
    op: &DegradationOperator,
    cfg: &CosineConfig,
    batch: usize,
) -> Result<SignalBatch> {
    let clean = sample_cosine_batch(rng, batch, cfg);
    let mut measured = op.apply_forward(&clean)?;
    if cfg.sigma_n > 0.0 {
        let noise = Normal::new(0.0, cfg.sigma_n).map_err(|e| Error::invalid(e.to_string()))?;
        for v in measured.data_mut() {
            *v += noise.sample(rng);
        }
    }
    Ok(SignalBatch { clean, measured })
}

/// Mean over the batch of `10·log10(peak² / MSE_sample)`, with MSE floored at 1e-12.
pub fn psnr(pred: &Tensor, target: &Tensor, peak: f64) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::invalid(format!(
            "psnr: shape mismatch {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if !(peak > 0.0) {
        return Err(Error::invalid(format!("psnr: peak must be positive, got {peak}")));
    }
    let (b, c, l) = pred.dims3()?;
    let per = c * l;
    let total: f64 = pred
        .data()
        .chunks(per)
        .zip(target.data().chunks(per))
        .map(|(p, t)| {
            let mse = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / per as f64;
            10.0 * (peak * peak / mse.max(MSE_FLOOR)).log10()
        })
        .sum();
    Ok(total / b as f64)
}
