//! Short-time Fourier analysis: a window of the series maps to a
//! 2×H×T′ real tensor (real and imaginary parts of a one-sided DFT per
//! frame) and back, with exact reconstruction.
//!
//! Frames are centered: the series is reflect-padded by n_fft/2 on the
//! left and by whatever remains on the right so that frames tile the
//! padded signal exactly; with the default hop of max(1, n_fft/4) this
//! makes T′ = T for n_fft=4, so spectrogram columns align one-to-one
//! with timesteps. The inverse applies the synthesis window, overlap-adds
//! frames, and divides by the accumulated squared window, which
//! reconstructs the input exactly whenever that accumulation is positive
//! over the original sample range (checked at run time).
//!
//! [`GraphIstft`] is the same inverse expressed as differentiable tensor
//! operations, so a time-domain reconstruction loss can backpropagate
//! into a decoder that emits spectrograms.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Analysis/synthesis window shape.
///
/// `Rect` mirrors the reference implementation's transform defaults and
/// keeps a constant input's energy entirely in the DC row; `Hann` trades
/// that for smoother spectral leakage behavior at larger n_fft.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    #[default]
    Rect,
    Hann,
}

/// Resolved transform parameters (no derived-default sentinels).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftParams {
    pub n_fft: usize,
    pub hop: usize,
    pub window: WindowKind,
}

impl StftParams {
    pub fn new(n_fft: usize, hop: usize, window: WindowKind) -> Result<Self> {
        if n_fft < 2 || n_fft % 2 != 0 {
            return Err(Error::Config(format!(
                "n_fft must be an even integer >= 2, got {n_fft}"
            )));
        }
        if hop == 0 {
            return Err(Error::Config("hop must be >= 1".into()));
        }
        Ok(Self { n_fft, hop, window })
    }

    /// Number of stored frequency rows H = n_fft/2 + 1.
    pub fn freq_rows(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Window coefficients of length n_fft.
    pub fn window_coeffs(&self) -> Vec<f64> {
        let n = self.n_fft;
        match self.window {
            WindowKind::Rect => vec![1.0; n],
            WindowKind::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos())
                .collect(),
        }
    }
}

/// How frames of a padded series of a given original length are laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameLayout {
    pub pad_left: usize,
    pub pad_right: usize,
    pub padded_len: usize,
    pub frames: usize,
}

/// Compute the frame layout for a series of length `series_len`.
pub fn frame_layout(params: &StftParams, series_len: usize) -> Result<FrameLayout> {
    if series_len < params.n_fft {
        return Err(Error::Shape(format!(
            "series length {series_len} shorter than n_fft {}",
            params.n_fft
        )));
    }
    let pad_left = params.n_fft / 2;
    let pad_right = (params.n_fft / 2).saturating_sub(params.hop);
    let padded_len = series_len + pad_left + pad_right;
    let frames = 1 + (padded_len - params.n_fft) / params.hop;
    Ok(FrameLayout {
        pad_left,
        pad_right,
        padded_len,
        frames,
    })
}

/// One-sided real-DFT basis for frames of length n_fft.
///
/// `fold[k]` is the conjugate-symmetry multiplicity of row k in the full
/// spectrum (1 for DC and Nyquist, 2 for every interior row).
#[derive(Debug, Clone)]
pub struct DftBasis {
    pub n_fft: usize,
    pub freq_rows: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
    pub fold: Vec<f64>,
}

impl DftBasis {
    pub fn new(n_fft: usize) -> Self {
        let freq_rows = n_fft / 2 + 1;
        let mut cos = vec![0.0; freq_rows * n_fft];
        let mut sin = vec![0.0; freq_rows * n_fft];
        for k in 0..freq_rows {
            for n in 0..n_fft {
                let angle = std::f64::consts::TAU * (k * n) as f64 / n_fft as f64;
                cos[k * n_fft + n] = angle.cos();
                sin[k * n_fft + n] = angle.sin();
            }
        }
        let fold = (0..freq_rows)
            .map(|k| if k == 0 || k == n_fft / 2 { 1.0 } else { 2.0 })
            .collect();
        Self {
            n_fft,
            freq_rows,
            cos,
            sin,
            fold,
        }
    }

    #[inline]
    pub fn cos(&self, k: usize, n: usize) -> f64 {
        self.cos[k * self.n_fft + n]
    }

    #[inline]
    pub fn sin(&self, k: usize, n: usize) -> f64 {
        self.sin[k * self.n_fft + n]
    }
}

/// Mirror an out-of-range index back into [0, len) (reflection without
/// edge repetition, so index -1 maps to 1 and len maps to len-2).
fn reflect_index(j: isize, len: usize) -> usize {
    debug_assert!(len >= 2);
    let period = 2 * (len as isize - 1);
    let mut r = j.rem_euclid(period);
    if r >= len as isize {
        r = period - r;
    }
    r as usize
}

/// Reflect-pad a series on both sides.
pub fn reflect_pad(x: &[f64], left: usize, right: usize) -> Vec<f64> {
    let len = x.len();
    let mut out = Vec::with_capacity(len + left + right);
    for j in 0..(len + left + right) {
        out.push(x[reflect_index(j as isize - left as isize, len)]);
    }
    out
}

/// Accumulated squared synthesis window over the padded sample range.
pub fn overlap_norm(params: &StftParams, layout: &FrameLayout) -> Vec<f64> {
    let w = params.window_coeffs();
    let mut norm = vec![0.0; layout.padded_len];
    for t in 0..layout.frames {
        for n in 0..params.n_fft {
            norm[t * params.hop + n] += w[n] * w[n];
        }
    }
    norm
}

/// Two-channel time-frequency image of one series window.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    /// Row-major (channel, freq_row, frame); channel 0 real, 1 imaginary.
    data: Vec<f64>,
    pub params: StftParams,
    pub freq_rows: usize,
    pub frames: usize,
    /// Original series length T, required to invert exactly.
    pub series_len: usize,
}

impl Spectrogram {
    pub fn zeros(params: StftParams, series_len: usize) -> Result<Self> {
        let layout = frame_layout(&params, series_len)?;
        let freq_rows = params.freq_rows();
        Ok(Self {
            data: vec![0.0; 2 * freq_rows * layout.frames],
            params,
            freq_rows,
            frames: layout.frames,
            series_len,
        })
    }

    #[inline]
    fn idx(&self, ch: usize, k: usize, t: usize) -> usize {
        (ch * self.freq_rows + k) * self.frames + t
    }

    #[inline]
    pub fn get(&self, ch: usize, k: usize, t: usize) -> f64 {
        self.data[self.idx(ch, k, t)]
    }

    #[inline]
    pub fn set(&mut self, ch: usize, k: usize, t: usize, v: f64) {
        let i = self.idx(ch, k, t);
        self.data[i] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// View as a (2, H, T′) tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(
            &self.data,
            (2, self.freq_rows, self.frames),
            device,
        )?)
    }

    /// Rebuild from a (2, H, T′) tensor produced by a decoder.
    pub fn from_tensor(t: &Tensor, params: StftParams, series_len: usize) -> Result<Self> {
        let layout = frame_layout(&params, series_len)?;
        let (ch, freq_rows, frames) = t.dims3()?;
        if ch != 2 || freq_rows != params.freq_rows() || frames != layout.frames {
            return Err(Error::Shape(format!(
                "tensor {ch}x{freq_rows}x{frames} does not match a {} x {} x {} spectrogram",
                2,
                params.freq_rows(),
                layout.frames
            )));
        }
        let data = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(Self {
            data,
            params,
            freq_rows,
            frames,
            series_len,
        })
    }
}

/// Forward transform: series window -> spectrogram.
pub fn stft(x: &[f64], params: &StftParams) -> Result<Spectrogram> {
    let layout = frame_layout(params, x.len())?;
    let padded = reflect_pad(x, layout.pad_left, layout.pad_right);
    let w = params.window_coeffs();
    let basis = DftBasis::new(params.n_fft);
    let mut spec = Spectrogram::zeros(*params, x.len())?;
    for t in 0..layout.frames {
        let frame = &padded[t * params.hop..t * params.hop + params.n_fft];
        for k in 0..basis.freq_rows {
            let mut re = 0.0;
            let mut im = 0.0;
            for n in 0..params.n_fft {
                let v = w[n] * frame[n];
                re += v * basis.cos(k, n);
                im -= v * basis.sin(k, n);
            }
            spec.set(0, k, t, re);
            spec.set(1, k, t, im);
        }
    }
    Ok(spec)
}

/// Inverse transform: spectrogram -> series window of length T.
///
/// Exact for any spectrogram produced by [`stft`]; for arbitrary tensors
/// (e.g. decoder output) it is the canonical linear left-inverse: each
/// frame is inverse-transformed via conjugate-symmetric extension, then
/// window-weighted frames are overlap-added and normalized.
pub fn istft(spec: &Spectrogram) -> Result<Vec<f64>> {
    let params = &spec.params;
    let layout = frame_layout(params, spec.series_len)?;
    if spec.frames != layout.frames || spec.freq_rows != params.freq_rows() {
        return Err(Error::Shape(format!(
            "spectrogram {}x{} inconsistent with recorded length {}",
            spec.freq_rows, spec.frames, spec.series_len
        )));
    }
    let w = params.window_coeffs();
    let basis = DftBasis::new(params.n_fft);
    let norm = overlap_norm(params, &layout);
    for (i, &v) in norm[layout.pad_left..layout.pad_left + spec.series_len]
        .iter()
        .enumerate()
    {
        if v < 1e-8 {
            return Err(Error::Config(format!(
                "window/hop combination leaves timestep {i} with zero synthesis weight; \
                 reduce hop or change the window"
            )));
        }
    }
    let scale = 1.0 / params.n_fft as f64;
    let mut buf = vec![0.0; layout.padded_len];
    for t in 0..layout.frames {
        for n in 0..params.n_fft {
            let mut y = 0.0;
            for k in 0..basis.freq_rows {
                y += basis.fold[k]
                    * (spec.get(0, k, t) * basis.cos(k, n) - spec.get(1, k, t) * basis.sin(k, n));
            }
            buf[t * params.hop + n] += w[n] * y * scale;
        }
    }
    Ok((0..spec.series_len)
        .map(|i| buf[layout.pad_left + i] / norm[layout.pad_left + i])
        .collect())
}

/// The inverse transform as differentiable tensor operations, fixed to
/// one (params, series length) pair.
///
/// Gradient support constraints rule out the transposed-convolution
/// formulation, so overlap-add is expressed per frame offset: the length
/// n_fft axis is split into diagonals, each zero-interleaved to the hop
/// grid, shifted, and summed.
#[derive(Debug)]
pub struct GraphIstft {
    params: StftParams,
    layout: FrameLayout,
    series_len: usize,
    /// (H, n_fft): fold_k·cos(2πkn/N)/N.
    coeff_re: Tensor,
    /// (H, n_fft): −fold_k·sin(2πkn/N)/N.
    coeff_im: Tensor,
    /// Synthesis window coefficients.
    window: Vec<f64>,
    /// (1, T): overlap normalization restricted to the original range.
    norm: Tensor,
}

impl GraphIstft {
    pub fn new(params: StftParams, series_len: usize, device: &Device) -> Result<Self> {
        let layout = frame_layout(&params, series_len)?;
        let basis = DftBasis::new(params.n_fft);
        let scale = 1.0 / params.n_fft as f64;
        let mut re = vec![0.0; basis.freq_rows * params.n_fft];
        let mut im = vec![0.0; basis.freq_rows * params.n_fft];
        for k in 0..basis.freq_rows {
            for n in 0..params.n_fft {
                re[k * params.n_fft + n] = basis.fold[k] * basis.cos(k, n) * scale;
                im[k * params.n_fft + n] = -basis.fold[k] * basis.sin(k, n) * scale;
            }
        }
        let norm_full = overlap_norm(&params, &layout);
        let norm_window = &norm_full[layout.pad_left..layout.pad_left + series_len];
        if norm_window.iter().any(|&v| v < 1e-8) {
            return Err(Error::Config(
                "window/hop combination leaves timesteps with zero synthesis weight".into(),
            ));
        }
        Ok(Self {
            params,
            layout,
            series_len,
            coeff_re: Tensor::from_slice(&re, (basis.freq_rows, params.n_fft), device)?,
            coeff_im: Tensor::from_slice(&im, (basis.freq_rows, params.n_fft), device)?,
            window: params.window_coeffs(),
            norm: Tensor::from_slice(norm_window, (1, series_len), device)?,
        })
    }

    /// (B, 2, H, T′) spectrogram batch -> (B, T) series batch.
    pub fn apply(&self, spec: &Tensor) -> Result<Tensor> {
        let (batch, ch, freq_rows, frames) = spec.dims4()?;
        if ch != 2 || freq_rows != self.params.freq_rows() || frames != self.layout.frames {
            return Err(Error::Shape(format!(
                "spectrogram batch {batch}x{ch}x{freq_rows}x{frames} does not match layout \
                 2x{}x{}",
                self.params.freq_rows(),
                self.layout.frames
            )));
        }
        let hop = self.params.hop;
        let n_fft = self.params.n_fft;
        // (B, H, T′) -> (B, T′, H) for both channels.
        let re = spec.narrow(1, 0, 1)?.squeeze(1)?.transpose(1, 2)?;
        let im = spec.narrow(1, 1, 1)?.squeeze(1)?.transpose(1, 2)?;
        // Per-frame inverse DFT: (B, T′, n_fft).
        let frames_t = re
            .broadcast_matmul(&self.coeff_re)?
            .add(&im.broadcast_matmul(&self.coeff_im)?)?;
        // Overlap-add one frame offset at a time.
        let mut acc: Option<Tensor> = None;
        for n in 0..n_fft {
            if self.window[n] == 0.0 {
                continue;
            }
            let diag = frames_t
                .narrow(2, n, 1)?
                .squeeze(2)?
                .affine(self.window[n], 0.0)?;
            let up = if hop == 1 {
                diag
            } else {
                // Interleave hop-1 zeros after each frame value so index
                // t lands at padded position t·hop.
                let zeros = Tensor::zeros((batch, frames, hop - 1), DType::F64, diag.device())?;
                Tensor::cat(&[&diag.unsqueeze(2)?, &zeros], 2)?.reshape((batch, frames * hop))?
            };
            // Shift to offset n, then fit to the padded length.
            let shifted = up.pad_with_zeros(1, n, 0)?;
            let len = shifted.dim(1)?;
            let fitted = if len < self.layout.padded_len {
                shifted.pad_with_zeros(1, 0, self.layout.padded_len - len)?
            } else {
                shifted.narrow(1, 0, self.layout.padded_len)?
            };
            acc = Some(match acc {
                None => fitted,
                Some(a) => a.add(&fitted)?,
            });
        }
        let padded = acc.expect("window has at least one nonzero coefficient");
        let trimmed = padded.narrow(1, self.layout.pad_left, self.series_len)?;
        Ok(trimmed.broadcast_div(&self.norm)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn params(n_fft: usize, hop: usize, window: WindowKind) -> StftParams {
        StftParams::new(n_fft, hop, window).unwrap()
    }

    fn default_params() -> StftParams {
        params(4, 1, WindowKind::Rect)
    }

    fn random_series(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    /// Independent per-frame DFT, written from the transform definition
    /// with explicit loops; the production stft must match it exactly.
    fn naive_frame_dft(x: &[f64], p: &StftParams) -> Vec<Vec<(f64, f64)>> {
        let layout = frame_layout(p, x.len()).unwrap();
        let padded = reflect_pad(x, layout.pad_left, layout.pad_right);
        let w = p.window_coeffs();
        let mut out = Vec::new();
        for t in 0..layout.frames {
            let mut rows = Vec::new();
            for k in 0..p.freq_rows() {
                let mut re = 0.0;
                let mut im = 0.0;
                for n in 0..p.n_fft {
                    let angle = std::f64::consts::TAU * (k * n) as f64 / p.n_fft as f64;
                    re += w[n] * padded[t * p.hop + n] * angle.cos();
                    im -= w[n] * padded[t * p.hop + n] * angle.sin();
                }
                rows.push((re, im));
            }
            out.push(rows);
        }
        out
    }

    #[test]
    fn matches_naive_dft_oracle() {
        for (n_fft, hop, window) in [
            (4, 1, WindowKind::Rect),
            (4, 1, WindowKind::Hann),
            (8, 2, WindowKind::Hann),
            (16, 4, WindowKind::Rect),
        ] {
            let p = params(n_fft, hop, window);
            let x = random_series(96, 11);
            let spec = stft(&x, &p).unwrap();
            let oracle = naive_frame_dft(&x, &p);
            for (t, rows) in oracle.iter().enumerate() {
                for (k, &(re, im)) in rows.iter().enumerate() {
                    assert!((spec.get(0, k, t) - re).abs() < 1e-12);
                    assert!((spec.get(1, k, t) - im).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn h_is_half_n_fft_plus_one() {
        assert_eq!(default_params().freq_rows(), 3);
        assert_eq!(params(16, 4, WindowKind::Hann).freq_rows(), 9);
    }

    #[test]
    fn default_layout_keeps_one_column_per_timestep() {
        let layout = frame_layout(&default_params(), 128).unwrap();
        assert_eq!(layout.frames, 128);
        assert_eq!(layout.pad_left, 2);
        assert_eq!(layout.pad_right, 1);
        let layout = frame_layout(&params(8, 2, WindowKind::Hann), 128).unwrap();
        assert_eq!(layout.frames, 64);
    }

    #[test]
    fn zero_series_gives_zero_spectrogram() {
        let spec = stft(&vec![0.0; 64], &default_params()).unwrap();
        assert!(spec.data().iter().all(|&v| v == 0.0));
        let x = istft(&spec).unwrap();
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_series_energy_confined_to_dc_row() {
        let spec = stft(&vec![1.0; 64], &default_params()).unwrap();
        for t in 0..spec.frames {
            assert!(spec.get(0, 0, t).abs() > 1.0);
            for k in 1..spec.freq_rows {
                let mag = spec.get(0, k, t).hypot(spec.get(1, k, t));
                assert!(mag < 1e-10, "row {k} frame {t} magnitude {mag}");
            }
        }
    }

    #[test]
    fn round_trip_is_exact() {
        for &len in &[64usize, 128, 256] {
            for (i, p) in [
                default_params(),
                params(4, 1, WindowKind::Hann),
                params(4, 2, WindowKind::Rect),
                params(8, 2, WindowKind::Hann),
                params(8, 2, WindowKind::Rect),
            ]
            .iter()
            .enumerate()
            {
                let x = random_series(len, 7 + i as u64);
                let back = istft(&stft(&x, p).unwrap()).unwrap();
                let err = x
                    .iter()
                    .zip(&back)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(err < 1e-10, "len {len} params {p:?} err {err}");
            }
        }
    }

    #[test]
    fn linearity() {
        let p = default_params();
        let x = random_series(96, 1);
        let y = random_series(96, 2);
        let sum: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        let sx = stft(&x, &p).unwrap();
        let sy = stft(&y, &p).unwrap();
        let sxy = stft(&sum, &p).unwrap();
        for i in 0..sxy.data().len() {
            assert!((sxy.data()[i] - sx.data()[i] - sy.data()[i]).abs() < 1e-9);
        }
        let scaled = stft(&x.iter().map(|v| 3.5 * v).collect::<Vec<_>>(), &p).unwrap();
        for i in 0..scaled.data().len() {
            assert!((scaled.data()[i] - 3.5 * sx.data()[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn parseval_per_frame() {
        let p = params(8, 2, WindowKind::Hann);
        let x = random_series(64, 3);
        let layout = frame_layout(&p, x.len()).unwrap();
        let padded = reflect_pad(&x, layout.pad_left, layout.pad_right);
        let w = p.window_coeffs();
        let spec = stft(&x, &p).unwrap();
        let basis = DftBasis::new(p.n_fft);
        for t in 0..layout.frames {
            let time_energy: f64 = (0..p.n_fft)
                .map(|n| (w[n] * padded[t * p.hop + n]).powi(2))
                .sum();
            let freq_energy: f64 = (0..p.freq_rows())
                .map(|k| {
                    basis.fold[k] * (spec.get(0, k, t).powi(2) + spec.get(1, k, t).powi(2))
                })
                .sum::<f64>()
                / p.n_fft as f64;
            let rel = (time_energy - freq_energy).abs() / time_energy.max(1e-12);
            assert!(rel < 1e-4, "frame {t}: {time_energy} vs {freq_energy}");
        }
    }

    #[test]
    fn series_shorter_than_n_fft_rejected() {
        let err = stft(&[1.0, 2.0], &default_params()).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn zero_overlap_weight_rejected() {
        // Hann window with hop = n_fft leaves every frame-start sample
        // with zero synthesis weight.
        let p = params(4, 4, WindowKind::Hann);
        let x = random_series(32, 5);
        let spec = stft(&x, &p).unwrap();
        assert!(matches!(istft(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn reflect_pad_mirrors_without_edge_repeat() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(
            reflect_pad(&x, 2, 1),
            vec![3.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0]
        );
    }

    #[test]
    fn graph_istft_matches_scalar_istft() {
        let device = Device::Cpu;
        for p in [
            default_params(),
            params(4, 1, WindowKind::Hann),
            params(8, 2, WindowKind::Hann),
        ] {
            let x = random_series(64, 21);
            let spec = stft(&x, &p).unwrap();
            let scalar = istft(&spec).unwrap();
            let graph = GraphIstft::new(p, 64, &device).unwrap();
            let spec_t = spec.to_tensor(&device).unwrap().unsqueeze(0).unwrap();
            let out = graph.apply(&spec_t).unwrap();
            let out: Vec<f64> = out.squeeze(0).unwrap().to_vec1().unwrap();
            for (a, b) in scalar.iter().zip(&out) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn graph_istft_backpropagates() {
        let device = Device::Cpu;
        let p = default_params();
        let graph = GraphIstft::new(p, 32, &device).unwrap();
        let layout = frame_layout(&p, 32).unwrap();
        let var = Var::zeros((1, 2, 3, layout.frames), DType::F64, &device).unwrap();
        let out = graph.apply(var.as_tensor()).unwrap();
        let loss = out.sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(var.as_tensor()).is_some());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn prop_round_trip(seed in 0u64..1000, len in 8usize..200) {
            let p = default_params();
            let x = random_series(len, seed);
            let back = istft(&stft(&x, &p).unwrap()).unwrap();
            for (a, b) in x.iter().zip(&back) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn prop_linearity(seed in 0u64..1000) {
            let p = params(4, 1, WindowKind::Hann);
            let x = random_series(48, seed);
            let y = random_series(48, seed.wrapping_add(1));
            let sum: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
            let sx = stft(&x, &p).unwrap();
            let sy = stft(&y, &p).unwrap();
            let sxy = stft(&sum, &p).unwrap();
            for i in 0..sxy.data().len() {
                prop_assert!((sxy.data()[i] - sx.data()[i] - sy.data()[i]).abs() < 1e-6);
            }
        }
    }
}
