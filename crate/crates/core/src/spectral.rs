//! Per-plane 2-D Fourier analysis, Gaussian-mask band splitting and radial
//! power profiles.
//!
//! Conventions, fixed once here and relied on everywhere else:
//! * the forward transform is unnormalized; the inverse carries the
//!   `1/(H*W)` factor, so `idft2(dft2(x)) == x`;
//! * masks live in the *centered* layout where the DC bin sits at
//!   `(floor(H/2), floor(W/2))`, and distances are Euclidean from that bin;
//! * the high-pass mask is the exact complement `1 - low`, which makes
//!   band recombination exact up to floating-point error.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::ingest::TrafficSample;

/// Largest imaginary magnitude tolerated when a spectrum is mapped back to
/// a real array; anything above this marks a non-conjugate-symmetric input.
pub const IMAG_RESIDUE_LIMIT: f64 = 1e-5;

/// Floor added to power values before taking log10 in radial profiles.
pub const LOG_POWER_FLOOR: f64 = 1e-12;

/// Where the DC bin lives in the stored array.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectrumLayout {
    /// DC at index `(0, 0)`, the raw transform order.
    Natural,
    /// DC at `(floor(H/2), floor(W/2))`, the mask/display order.
    Centered,
}

/// Complex per-plane transform of a `P x H x W` sample.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub data: Array3<Complex64>,
    pub layout: SpectrumLayout,
}

impl Spectrum {
    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2])
    }

    pub fn into_centered(self) -> Spectrum {
        match self.layout {
            SpectrumLayout::Centered => self,
            SpectrumLayout::Natural => Spectrum {
                data: shift_planes(&self.data, ShiftDir::Center),
                layout: SpectrumLayout::Centered,
            },
        }
    }

    pub fn into_natural(self) -> Spectrum {
        match self.layout {
            SpectrumLayout::Natural => self,
            SpectrumLayout::Centered => Spectrum {
                data: shift_planes(&self.data, ShiftDir::Uncenter),
                layout: SpectrumLayout::Natural,
            },
        }
    }
}

#[derive(Clone, Copy)]
enum ShiftDir {
    Center,
    Uncenter,
}

fn shift_amounts(h: usize, w: usize, dir: ShiftDir) -> (usize, usize) {
    match dir {
        // out[i] = in[(i + ceil(n/2)) % n] moves DC to floor(n/2)
        ShiftDir::Center => (h.div_ceil(2), w.div_ceil(2)),
        ShiftDir::Uncenter => (h / 2, w / 2),
    }
}

fn roll2<T: Copy>(a: ArrayView2<T>, sh: usize, sw: usize) -> Array2<T> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((h, w), |(i, j)| a[[(i + sh) % h, (j + sw) % w]])
}

fn shift_planes(data: &Array3<Complex64>, dir: ShiftDir) -> Array3<Complex64> {
    let (p, h, w) = (data.shape()[0], data.shape()[1], data.shape()[2]);
    let (sh, sw) = shift_amounts(h, w, dir);
    let mut out = Array3::zeros((p, h, w));
    for k in 0..p {
        out.slice_mut(ndarray::s![k, .., ..])
            .assign(&roll2(data.slice(ndarray::s![k, .., ..]), sh, sw));
    }
    out
}

/// Moves the DC bin of a plane from `(0,0)` to the center.
pub fn fftshift2<T: Copy>(plane: ArrayView2<T>) -> Array2<T> {
    let (h, w) = plane.dim();
    let (sh, sw) = shift_amounts(h, w, ShiftDir::Center);
    roll2(plane, sh, sw)
}

/// Inverse of [`fftshift2`]; moves the centered DC bin back to `(0,0)`.
pub fn ifftshift2<T: Copy>(plane: ArrayView2<T>) -> Array2<T> {
    let (h, w) = plane.dim();
    let (sh, sw) = shift_amounts(h, w, ShiftDir::Uncenter);
    roll2(plane, sh, sw)
}

/// Cached FFT plans for one `(H, W)` plane geometry.
///
/// Hot paths (loss evaluation, scoring) should build one of these and reuse
/// it; the free functions below build a fresh one per call.
pub struct Dft2 {
    h: usize,
    w: usize,
    fwd_h: Arc<dyn Fft<f64>>,
    fwd_w: Arc<dyn Fft<f64>>,
    inv_h: Arc<dyn Fft<f64>>,
    inv_w: Arc<dyn Fft<f64>>,
}

impl Dft2 {
    pub fn new(h: usize, w: usize) -> Dft2 {
        let mut planner = FftPlanner::new();
        Dft2 {
            h,
            w,
            fwd_h: planner.plan_fft_forward(h),
            fwd_w: planner.plan_fft_forward(w),
            inv_h: planner.plan_fft_inverse(h),
            inv_w: planner.plan_fft_inverse(w),
        }
    }

    fn check_plane(&self, (h, w): (usize, usize)) {
        assert!(
            h == self.h && w == self.w,
            "plane is {h}x{w}, plans are for {}x{}",
            self.h,
            self.w
        );
    }

    fn transform(&self, mut buf: Array2<Complex64>, row: &Arc<dyn Fft<f64>>, col: &Arc<dyn Fft<f64>>) -> Array2<Complex64> {
        for mut r in buf.rows_mut() {
            let slice = r.as_slice_mut().expect("row-major buffer");
            row.process(slice);
        }
        let mut col_buf = vec![Complex64::default(); self.h];
        for j in 0..self.w {
            for i in 0..self.h {
                col_buf[i] = buf[[i, j]];
            }
            col.process(&mut col_buf);
            for i in 0..self.h {
                buf[[i, j]] = col_buf[i];
            }
        }
        buf
    }

    /// Unnormalized forward transform of one real plane.
    pub fn forward_plane(&self, plane: ArrayView2<f64>) -> Array2<Complex64> {
        self.check_plane(plane.dim());
        let buf = plane.mapv(|v| Complex64::new(v, 0.0));
        self.transform(buf, &self.fwd_w, &self.fwd_h)
    }

    /// Unnormalized inverse transform of one complex plane (no `1/(HW)`).
    pub fn inverse_plane_unnorm(&self, spec: ArrayView2<Complex64>) -> Array2<Complex64> {
        self.check_plane(spec.dim());
        self.transform(spec.to_owned(), &self.inv_w, &self.inv_h)
    }

    /// Normalized inverse transform of one complex plane.
    pub fn inverse_plane(&self, spec: ArrayView2<Complex64>) -> Array2<Complex64> {
        let scale = 1.0 / (self.h * self.w) as f64;
        let mut out = self.inverse_plane_unnorm(spec);
        out.mapv_inplace(|v| v * scale);
        out
    }
}

/// Per-plane unnormalized 2-D DFT of a real sample; natural layout.
pub fn dft2(sample: &Array3<f64>) -> Spectrum {
    let (p, h, w) = (sample.shape()[0], sample.shape()[1], sample.shape()[2]);
    let plans = Dft2::new(h, w);
    let mut data = Array3::zeros((p, h, w));
    for k in 0..p {
        data.slice_mut(ndarray::s![k, .., ..])
            .assign(&plans.forward_plane(sample.slice(ndarray::s![k, .., ..])));
    }
    Spectrum {
        data,
        layout: SpectrumLayout::Natural,
    }
}

/// Normalized per-plane inverse DFT back to a real sample.
///
/// Fails with [`Error::InconsistentSpectrum`] when the reconstruction keeps
/// an imaginary part above [`IMAG_RESIDUE_LIMIT`], which means the input was
/// not the spectrum of a real signal.
pub fn idft2(spectrum: &Spectrum) -> Result<Array3<f64>> {
    let natural = spectrum.clone().into_natural();
    let (p, h, w) = natural.shape();
    let plans = Dft2::new(h, w);
    let mut out = Array3::zeros((p, h, w));
    let mut max_imag = 0.0f64;
    for k in 0..p {
        let plane = plans.inverse_plane(natural.data.slice(ndarray::s![k, .., ..]));
        for ((i, j), v) in plane.indexed_iter() {
            max_imag = max_imag.max(v.im.abs());
            out[[k, i, j]] = v.re;
        }
    }
    if max_imag > IMAG_RESIDUE_LIMIT {
        return Err(Error::InconsistentSpectrum {
            max_imag,
            limit: IMAG_RESIDUE_LIMIT,
        });
    }
    Ok(out)
}

/// Complementary low/high Gaussian masks in the centered layout.
#[derive(Debug, Clone)]
pub struct GaussianMasks {
    pub low: Array2<f64>,
    pub high: Array2<f64>,
    pub cutoff: f64,
}

/// Euclidean distance of every bin from the centered DC bin.
fn radial_distances(h: usize, w: usize) -> Array2<f64> {
    let (ch, cw) = (h / 2, w / 2);
    Array2::from_shape_fn((h, w), |(i, j)| {
        let dy = i as f64 - ch as f64;
        let dx = j as f64 - cw as f64;
        (dy * dy + dx * dx).sqrt()
    })
}

/// Builds the centered Gaussian low-pass mask `exp(-d^2 / (2 cutoff^2))`
/// and its exact complement high-pass mask.
pub fn gaussian_masks(h: usize, w: usize, cutoff: f64) -> Result<GaussianMasks> {
    if h == 0 || w == 0 {
        return Err(Error::Shape("mask dimensions must be positive".into()));
    }
    // `cutoff <= 0.0` is false for NaN, which the finiteness test rejects.
    if cutoff <= 0.0 || !cutoff.is_finite() {
        return Err(Error::Config(format!(
            "gaussian cutoff must be a positive finite number, got {cutoff}"
        )));
    }
    let d = radial_distances(h, w);
    let low = d.mapv(|dist| (-dist * dist / (2.0 * cutoff * cutoff)).exp());
    let high = low.mapv(|v| 1.0 - v);
    Ok(GaussianMasks { low, high, cutoff })
}

/// Spatial-domain low/high bands of a sample; they sum back to the source.
#[derive(Debug, Clone)]
pub struct FrequencyBands {
    pub low: Array3<f64>,
    pub high: Array3<f64>,
}

/// Splits a sample into Gaussian low/high frequency bands.
pub fn decouple(sample: &TrafficSample, cutoff: f64) -> Result<FrequencyBands> {
    decouple_array(&sample.to_f64(), cutoff)
}

/// [`decouple`] on a raw `P x H x W` array.
pub fn decouple_array(x: &Array3<f64>, cutoff: f64) -> Result<FrequencyBands> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let masks = gaussian_masks(h, w, cutoff)?;
    let spectrum = dft2(x).into_centered();
    let low = idft2(&apply_mask(&spectrum, &masks.low))?;
    let high = idft2(&apply_mask(&spectrum, &masks.high))?;
    Ok(FrequencyBands { low, high })
}

/// Multiplies every plane of a centered spectrum by a centered mask.
pub fn apply_mask(spectrum: &Spectrum, mask: &Array2<f64>) -> Spectrum {
    assert_eq!(
        spectrum.layout,
        SpectrumLayout::Centered,
        "masks are defined on centered spectra"
    );
    let (p, h, w) = spectrum.shape();
    assert_eq!((h, w), mask.dim(), "mask shape must match spectrum planes");
    let mut data = spectrum.data.clone();
    for k in 0..p {
        for i in 0..h {
            for j in 0..w {
                data[[k, i, j]] *= mask[[i, j]];
            }
        }
    }
    Spectrum {
        data,
        layout: SpectrumLayout::Centered,
    }
}

/// Radially binned mean log-power of a set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialProfile {
    pub bin_centers: Vec<f64>,
    pub mean_log_power: Vec<f64>,
}

impl RadialProfile {
    pub fn n_bins(&self) -> usize {
        self.bin_centers.len()
    }

    /// Writes `bin_index,radial_center,mean_log_power` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut wtr = csv::Writer::from_writer(file);
        wtr.write_record(["bin_index", "radial_center", "mean_log_power"])
            .map_err(|e| Error::Data(format!("profile write failed: {e}")))?;
        for (i, (c, v)) in self.bin_centers.iter().zip(&self.mean_log_power).enumerate() {
            wtr.write_record([i.to_string(), c.to_string(), v.to_string()])
                .map_err(|e| Error::Data(format!("profile write failed: {e}")))?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))
    }
}

/// Computes the radial distribution of spectral energy over a sample set.
///
/// Per sample the centered power spectrum `|F|^2` is averaged over planes;
/// bins partition radial distance `[0, d_max]` uniformly; each bin holds the
/// mean of `log10(power + floor)` over its cells, then profiles are averaged
/// over samples.
pub fn power_spectrum_profile(samples: &[Array3<f64>], n_bins: usize) -> Result<RadialProfile> {
    if samples.is_empty() {
        return Err(Error::Data("power profile needs at least one sample".into()));
    }
    if n_bins < 2 {
        return Err(Error::Config("power profile needs n_bins >= 2".into()));
    }
    let (h, w) = (samples[0].shape()[1], samples[0].shape()[2]);
    let dist = radial_distances(h, w);
    let d_max = dist.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let bin_of = |d: f64| -> usize { ((d / d_max * n_bins as f64) as usize).min(n_bins - 1) };

    let mut acc = vec![0.0f64; n_bins];
    for sample in samples {
        let (p, sh, sw) = (sample.shape()[0], sample.shape()[1], sample.shape()[2]);
        if (sh, sw) != (h, w) {
            return Err(Error::Shape(
                "profile samples must share one plane shape".into(),
            ));
        }
        let spectrum = dft2(sample).into_centered();
        let mut power = Array2::<f64>::zeros((h, w));
        for k in 0..p {
            for i in 0..h {
                for j in 0..w {
                    power[[i, j]] += spectrum.data[[k, i, j]].norm_sqr();
                }
            }
        }
        power.mapv_inplace(|v| v / p as f64);
        let mut sums = vec![0.0f64; n_bins];
        let mut counts = vec![0usize; n_bins];
        for ((i, j), &pw) in power.indexed_iter() {
            let b = bin_of(dist[[i, j]]);
            sums[b] += (pw + LOG_POWER_FLOOR).log10();
            counts[b] += 1;
        }
        for b in 0..n_bins {
            if counts[b] > 0 {
                acc[b] += sums[b] / counts[b] as f64;
            } else {
                acc[b] += (LOG_POWER_FLOOR).log10();
            }
        }
    }
    let n = samples.len() as f64;
    let width = d_max / n_bins as f64;
    Ok(RadialProfile {
        bin_centers: (0..n_bins).map(|b| (b as f64 + 0.5) * width).collect(),
        mean_log_power: acc.into_iter().map(|v| v / n).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_sample(p: usize, h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = stream(seed, 0xF00D);
        Array3::from_shape_fn((p, h, w), |_| rng.gen_range(0.0..1.0))
    }

    fn max_abs(a: &Array3<f64>) -> f64 {
        a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    #[test]
    fn constant_plane_is_pure_dc() {
        let x = Array3::from_elem((1, 8, 8), 0.7);
        let spec = dft2(&x);
        assert!((spec.data[[0, 0, 0]].re - 0.7 * 64.0).abs() < 1e-9);
        for ((_, i, j), v) in spec.data.indexed_iter() {
            if (i, j) != (0, 0) {
                assert!(v.norm() < 1e-9, "bin ({i},{j}) = {v}");
            }
        }
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut x = Array3::zeros((1, 6, 5));
        x[[0, 0, 0]] = 1.0;
        let spec = dft2(&x);
        for v in spec.data.iter() {
            assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-10);
        }
    }

    #[test]
    fn round_trip_recovers_sample() {
        let x = random_sample(3, 16, 12, 1);
        let back = idft2(&dft2(&x)).unwrap();
        let diff = (&x - &back).mapv(f64::abs);
        assert!(diff.iter().cloned().fold(0.0, f64::max) < 1e-5);
    }

    #[test]
    fn zero_spectrum_inverts_to_zero() {
        let spec = Spectrum {
            data: Array3::zeros((2, 4, 4)),
            layout: SpectrumLayout::Natural,
        };
        let x = idft2(&spec).unwrap();
        assert!(max_abs(&x) == 0.0);
    }

    #[test]
    fn parseval_energy_identity() {
        for seed in 0..5u64 {
            let x = random_sample(2, 10, 14, seed);
            let spec = dft2(&x);
            let spatial: f64 = x.iter().map(|v| v * v).sum();
            let spectral: f64 =
                spec.data.iter().map(|v| v.norm_sqr()).sum::<f64>() / (10.0 * 14.0);
            assert!(
                (spatial - spectral).abs() <= 1e-5 * spatial.abs(),
                "Parseval violated: {spatial} vs {spectral}"
            );
        }
    }

    #[test]
    fn asymmetric_spectrum_is_rejected() {
        // a lone off-DC complex bin is not conjugate symmetric
        let mut data = Array3::zeros((1, 8, 8));
        data[[0, 1, 2]] = Complex64::new(0.0, 32.0);
        let spec = Spectrum {
            data,
            layout: SpectrumLayout::Natural,
        };
        match idft2(&spec) {
            Err(Error::InconsistentSpectrum { max_imag, limit }) => {
                assert!(max_imag > limit);
            }
            other => panic!("expected InconsistentSpectrum, got {other:?}"),
        }
    }

    #[test]
    fn shift_round_trips_even_and_odd() {
        for (h, w) in [(4, 4), (5, 5), (4, 5), (7, 4)] {
            let plane = Array2::from_shape_fn((h, w), |(i, j)| (i * w + j) as f64);
            let back = ifftshift2(fftshift2(plane.view()).view());
            assert_eq!(plane, back);
            // DC lands exactly at the center bin
            let mut dc = Array2::zeros((h, w));
            dc[[0, 0]] = 1.0;
            let shifted = fftshift2(dc.view());
            assert_eq!(shifted[[h / 2, w / 2]], 1.0);
        }
    }

    #[test]
    fn mask_values_at_known_distances() {
        let masks = gaussian_masks(32, 32, 5.0).unwrap();
        // centered DC bin
        assert_eq!(masks.low[[16, 16]], 1.0);
        assert_eq!(masks.high[[16, 16]], 0.0);
        // bins at exact distance D = 5 from center: straight and 3-4-5
        for (i, j) in [(16, 21), (21, 16), (19, 20), (20, 19)] {
            assert!(
                (masks.low[[i, j]] - (-0.5f64).exp()).abs() < 1e-12,
                "bin ({i},{j})"
            );
        }
    }

    #[test]
    fn masks_are_exact_complements() {
        let masks = gaussian_masks(17, 12, 3.0).unwrap();
        for (l, h) in masks.low.iter().zip(masks.high.iter()) {
            assert_eq!(l + h, 1.0);
            assert!((0.0..=1.0).contains(l));
        }
    }

    #[test]
    fn non_positive_cutoff_rejected() {
        assert!(gaussian_masks(8, 8, 0.0).is_err());
        assert!(gaussian_masks(8, 8, -2.0).is_err());
        assert!(gaussian_masks(8, 8, f64::NAN).is_err());
    }

    #[test]
    fn constant_sample_is_all_low_band() {
        let x = Array3::from_elem((2, 16, 16), 0.4);
        let bands = decouple_array(&x, 5.0).unwrap();
        assert!(max_abs(&bands.high) < 1e-5);
        let diff = (&bands.low - &x).mapv(f64::abs);
        assert!(diff.iter().cloned().fold(0.0, f64::max) < 1e-5);
    }

    #[test]
    fn nyquist_checkerboard_is_nearly_all_high_band() {
        let x = Array3::from_shape_fn((1, 32, 32), |(_, i, j)| {
            if (i + j) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        });
        let bands = decouple_array(&x, 5.0).unwrap();
        // checkerboard energy sits at distance sqrt(512) from center, where
        // the low mask is exp(-512/50) = exp(-10.24)
        let expected = (-10.24f64).exp();
        assert!((max_abs(&bands.low) - expected).abs() < 1e-9);
        let recon = &bands.low + &bands.high;
        let diff = (&recon - &x).mapv(f64::abs);
        assert!(diff.iter().cloned().fold(0.0, f64::max) < 1e-9);
    }

    #[test]
    fn bands_recombine_to_source() {
        let x = random_sample(4, 12, 10, 3);
        let bands = decouple_array(&x, 4.0).unwrap();
        let recon = &bands.low + &bands.high;
        let diff = (&recon - &x).mapv(f64::abs);
        assert!(diff.iter().cloned().fold(0.0, f64::max) < 1e-4);
    }

    #[test]
    fn decoupling_is_linear() {
        let x = random_sample(2, 8, 8, 4);
        let y = random_sample(2, 8, 8, 5);
        let (a, b) = (1.7, -0.6);
        let mix = decouple_array(&(&x * a + &y * b), 3.0).unwrap();
        let bx = decouple_array(&x, 3.0).unwrap();
        let by = decouple_array(&y, 3.0).unwrap();
        let low_diff = (&mix.low - (&bx.low * a + &by.low * b)).mapv(f64::abs);
        let high_diff = (&mix.high - (&bx.high * a + &by.high * b)).mapv(f64::abs);
        assert!(low_diff.iter().cloned().fold(0.0, f64::max) < 1e-4);
        assert!(high_diff.iter().cloned().fold(0.0, f64::max) < 1e-4);
    }

    #[test]
    fn refiltering_low_band_changes_little() {
        let x = random_sample(2, 16, 16, 6);
        let bands = decouple_array(&x, 5.0).unwrap();
        let twice = decouple_array(&bands.low, 5.0).unwrap();
        let refilter_residual = max_abs(&(&twice.low - &bands.low).mapv(f64::abs));
        let raw_residual = max_abs(&(&x - &bands.low).mapv(f64::abs));
        assert!(
            refilter_residual < raw_residual,
            "refilter {refilter_residual} vs raw {raw_residual}"
        );
    }

    #[test]
    fn constant_profile_concentrates_in_bin_zero() {
        let samples = vec![Array3::from_elem((1, 32, 32), 0.5); 3];
        let profile = power_spectrum_profile(&samples, 8).unwrap();
        for (i, &v) in profile.mean_log_power.iter().enumerate().skip(1) {
            assert!((v - (-12.0)).abs() < 1e-6, "bin {i} = {v}");
        }
        assert!(profile.mean_log_power[0] > -11.5);
    }

    #[test]
    fn white_noise_profile_is_flat() {
        let samples: Vec<Array3<f64>> = (0..100)
            .map(|s| random_sample(1, 32, 32, 1000 + s))
            .collect();
        let profile = power_spectrum_profile(&samples, 8).unwrap();
        let tail = &profile.mean_log_power[1..];
        let mean = tail.iter().sum::<f64>() / tail.len() as f64;
        for (i, &v) in tail.iter().enumerate() {
            assert!(
                (v - mean).abs() <= 0.5,
                "bin {} deviates: {v} vs mean {mean}",
                i + 1
            );
        }
    }

    #[test]
    fn smooth_blobs_profile_decreases() {
        let mut samples = Vec::new();
        for s in 0..20u64 {
            let mut rng = stream(s, 0xB10B);
            let ch = rng.gen_range(8.0..24.0);
            let cw = rng.gen_range(8.0..24.0);
            let sigma = rng.gen_range(4.0..8.0);
            samples.push(Array3::from_shape_fn((1, 32, 32), |(_, i, j)| {
                let d2 = (i as f64 - ch).powi(2) + (j as f64 - cw).powi(2);
                (-d2 / (2.0 * sigma * sigma)).exp()
            }));
        }
        let profile = power_spectrum_profile(&samples, 8).unwrap();
        for b in 0..3 {
            assert!(
                profile.mean_log_power[b] > profile.mean_log_power[b + 1],
                "profile not decreasing at bin {b}"
            );
        }
    }

    #[test]
    fn profile_rejects_degenerate_inputs() {
        assert!(power_spectrum_profile(&[], 8).is_err());
        let one = vec![Array3::zeros((1, 4, 4))];
        assert!(power_spectrum_profile(&one, 1).is_err());
    }

    #[test]
    fn profile_csv_export() {
        let dir = tempfile::TempDir::new().unwrap();
        let profile = RadialProfile {
            bin_centers: vec![0.5, 1.5],
            mean_log_power: vec![-1.0, -2.0],
        };
        let path = dir.path().join("profile.csv");
        profile.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("bin_index,radial_center,mean_log_power"));
        assert!(text.contains("1,1.5,-2"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn prop_round_trip(p in 1usize..3, h in 2usize..13, w in 2usize..13, seed in 0u64..1000) {
            let x = random_sample(p, h, w, seed);
            let back = idft2(&dft2(&x)).unwrap();
            let err = (&x - &back).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
            prop_assert!(err < 1e-5);
        }

        #[test]
        fn prop_parseval(h in 2usize..13, w in 2usize..13, seed in 0u64..1000) {
            let x = random_sample(1, h, w, seed);
            let spec = dft2(&x);
            let spatial: f64 = x.iter().map(|v| v * v).sum();
            let spectral: f64 = spec.data.iter().map(|v| v.norm_sqr()).sum::<f64>() / (h * w) as f64;
            prop_assert!((spatial - spectral).abs() <= 1e-5 * spatial.max(1.0));
        }

        #[test]
        fn prop_bands_recombine(h in 4usize..13, w in 4usize..13, seed in 0u64..1000, cutoff in 0.5f64..8.0) {
            let x = random_sample(1, h, w, seed);
            let bands = decouple_array(&x, cutoff).unwrap();
            let err = (&(&bands.low + &bands.high) - &x)
                .mapv(f64::abs)
                .iter()
                .cloned()
                .fold(0.0, f64::max);
            prop_assert!(err < 1e-4);
        }

        #[test]
        fn prop_shift_round_trip(h in 1usize..9, w in 1usize..9) {
            let plane = Array2::from_shape_fn((h, w), |(i, j)| (i * w + j) as f64);
            prop_assert_eq!(ifftshift2(fftshift2(plane.view()).view()), plane);
        }
    }
}
