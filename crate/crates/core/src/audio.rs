//! Acoustic front-end: 16 kHz waveform to 240-d log-mel features every 30 ms,
//! and the additive-noise / overlapped-speech corruptions used at evaluation.
//!
//! Pipeline: 25 ms Hann-windowed frames every 10 ms, 512-point power spectrum,
//! 80 triangular mel filters, natural log with a floor, then every three
//! consecutive frames folded into one 240-d vector.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::bail;
use crate::scalar::{self, Scalar, PI};
use crate::tensorops::Tensor;
use crate::Result;

pub const SAMPLE_RATE: u32 = 16_000;
/// 25 ms at 16 kHz.
pub const WINDOW: usize = 400;
/// 10 ms at 16 kHz.
pub const HOP: usize = 160;
pub const MEL_BANDS: usize = 80;
pub const STACK: usize = 3;
pub const FEATURE_DIM: usize = MEL_BANDS * STACK;
/// Period of one stacked feature vector.
pub const FRAME_PERIOD_MS: u32 = 30;
/// Longest allowed overlapping distractor (5 s).
pub const MAX_DISTRACTOR: usize = 5 * SAMPLE_RATE as usize;

/// Mono audio at 16 kHz.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<Scalar>,
}

impl Waveform {
    pub fn new(samples: Vec<Scalar>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            bail!(Input, "sample rate {sample_rate} Hz, expected {SAMPLE_RATE}");
        }
        if samples.iter().any(|s| !s.is_finite()) {
            bail!(Input, "waveform contains non-finite samples");
        }
        Ok(Self { samples })
    }

    pub fn silence(len: usize) -> Self {
        Self {
            samples: vec![0.0; len],
        }
    }

    pub fn samples(&self) -> &[Scalar] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Scalar> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean squared amplitude over the whole clip.
    pub fn power(&self) -> Scalar {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<Scalar>() / self.samples.len() as Scalar
    }

    pub fn scaled(&self, gain: Scalar) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
        }
    }
}

/// Tunables of the log-mel computation that the acoustic model does not fix.
#[derive(Clone, Debug, PartialEq)]
pub struct MelConfig {
    pub fft_size: usize,
    pub f_min: Scalar,
    pub f_max: Scalar,
    pub log_floor: Scalar,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            fft_size: 512,
            f_min: 125.0,
            f_max: 7500.0,
            log_floor: 1e-10,
        }
    }
}

/// Number of whole frames in `len` samples.
pub fn frame_count(len: usize) -> usize {
    if len < WINDOW {
        0
    } else {
        (len - WINDOW) / HOP + 1
    }
}

/// Symmetric Hann window of length `n`.
pub fn hann(n: usize) -> Vec<Scalar> {
    (0..n)
        .map(|i| 0.5 - 0.5 * scalar::cos(2.0 * PI * i as Scalar / (n - 1) as Scalar))
        .collect()
}

/// Frame `i` is samples `[160 i, 160 i + 400)` times the Hann window; a
/// trailing partial frame is dropped.
pub fn frame_hann(w: &Waveform) -> Result<Tensor> {
    let n = frame_count(w.len());
    if n == 0 {
        bail!(Input, "{} samples is shorter than one {WINDOW}-sample window", w.len());
    }
    let win = hann(WINDOW);
    let mut data = Vec::with_capacity(n * WINDOW);
    for i in 0..n {
        let s = &w.samples[i * HOP..i * HOP + WINDOW];
        data.extend(s.iter().zip(&win).map(|(x, h)| x * h));
    }
    Tensor::new(&[n, WINDOW], data)
}

/// In-place iterative radix-2 FFT. `re.len()` must be a power of two.
pub fn fft(re: &mut [Scalar], im: &mut [Scalar]) {
    let n = re.len();
    assert!(n.is_power_of_two() && im.len() == n);
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * PI / len as Scalar;
        for start in (0..n).step_by(len) {
            for k in 0..len / 2 {
                let (wr, wi) = (scalar::cos(ang * k as Scalar), scalar::sin(ang * k as Scalar));
                let (a, b) = (start + k, start + k + len / 2);
                let tr = re[b] * wr - im[b] * wi;
                let ti = re[b] * wi + im[b] * wr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
}

/// `|X_k|^2` for `k = 0..=n/2` of the zero-padded frame.
pub fn power_spectrum(frame: &[Scalar], fft_size: usize) -> Vec<Scalar> {
    let mut re = vec![0.0; fft_size];
    let mut im = vec![0.0; fft_size];
    re[..frame.len()].copy_from_slice(frame);
    fft(&mut re, &mut im);
    (0..=fft_size / 2).map(|k| re[k] * re[k] + im[k] * im[k]).collect()
}

pub fn hz_to_mel(f: Scalar) -> Scalar {
    2595.0 * scalar::log10(1.0 + f / 700.0)
}

pub fn mel_to_hz(m: Scalar) -> Scalar {
    700.0 * (scalar::powf(10.0, m / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, equally spaced in mel between
/// `f_min` and `f_max`, each scaled to unit area over frequency (Hz) so that
/// wider high-frequency filters do not collect more energy from a pure tone.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `[MEL_BANDS][fft_size / 2 + 1]`.
    weights: Vec<Vec<Scalar>>,
    centers: Vec<Scalar>,
}

impl MelFilterbank {
    pub fn new(cfg: &MelConfig) -> Result<Self> {
        if !cfg.fft_size.is_power_of_two() || cfg.fft_size < WINDOW {
            bail!(Config, "fft size {} must be a power of two >= {WINDOW}", cfg.fft_size);
        }
        let nyquist = SAMPLE_RATE as Scalar / 2.0;
        if !(0.0 <= cfg.f_min && cfg.f_min < cfg.f_max && cfg.f_max <= nyquist) {
            bail!(Config, "mel range {}..{} Hz", cfg.f_min, cfg.f_max);
        }
        let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
        let edges: Vec<Scalar> = (0..MEL_BANDS + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as Scalar / (MEL_BANDS + 1) as Scalar))
            .collect();
        let bins = cfg.fft_size / 2 + 1;
        let bin_hz = SAMPLE_RATE as Scalar / cfg.fft_size as Scalar;
        let weights = (0..MEL_BANDS)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                let norm = 2.0 / (r - l);
                (0..bins)
                    .map(|k| {
                        let f = k as Scalar * bin_hz;
                        norm * if f <= l || f >= r {
                            0.0
                        } else if f <= c {
                            (f - l) / (c - l)
                        } else {
                            (r - f) / (r - c)
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            weights,
            centers: edges[1..=MEL_BANDS].to_vec(),
        })
    }

    /// Center frequency of every filter in Hz.
    pub fn centers(&self) -> &[Scalar] {
        &self.centers
    }

    pub fn apply(&self, power: &[Scalar]) -> Vec<Scalar> {
        self.weights
            .iter()
            .map(|w| w.iter().zip(power).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Linear mel energies `[N, 80]` of windowed frames, before the log.
pub fn mel_energies(frames: &Tensor, cfg: &MelConfig) -> Result<Tensor> {
    if frames.rank() != 2 || frames.last_dim() != WINDOW {
        bail!(Dimension, "frames must be [N, {WINDOW}], got {:?}", frames.shape());
    }
    let fb = MelFilterbank::new(cfg)?;
    let mut out = Vec::with_capacity(frames.shape()[0] * MEL_BANDS);
    for frame in frames.data().chunks(WINDOW) {
        out.extend(fb.apply(&power_spectrum(frame, cfg.fft_size)));
    }
    Tensor::new(&[frames.shape()[0], MEL_BANDS], out)
}

/// `log(max(energy, floor))` per mel channel.
pub fn log_mel80(frames: &Tensor, cfg: &MelConfig) -> Result<Tensor> {
    let mut e = mel_energies(frames, cfg)?;
    for v in e.data_mut() {
        *v = scalar::log(v.max(cfg.log_floor));
    }
    Ok(e)
}

/// Stacked log-mel features of one utterance, `[T, 240]` at 30 ms per row.
#[derive(Clone, Debug, PartialEq)]
pub struct AcousticFeatures {
    pub data: Tensor,
}

impl AcousticFeatures {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 2 || data.last_dim() != FEATURE_DIM {
            bail!(Dimension, "acoustic features must be [T, {FEATURE_DIM}], got {:?}", data.shape());
        }
        Ok(Self { data })
    }

    pub fn steps(&self) -> usize {
        self.data.shape()[0]
    }
}

/// Row `t` is the concatenation of rows `3t, 3t+1, 3t+2`; leftover rows are
/// dropped.
pub fn stack3(x: &Tensor) -> Result<AcousticFeatures> {
    if x.rank() != 2 || x.last_dim() != MEL_BANDS {
        bail!(Dimension, "stack3 expects [N, {MEL_BANDS}], got {:?}", x.shape());
    }
    let t = x.shape()[0] / STACK;
    if t == 0 {
        bail!(Input, "{} frames is fewer than {STACK}", x.shape()[0]);
    }
    let data = x.data()[..t * FEATURE_DIM].to_vec();
    AcousticFeatures::new(Tensor::new(&[t, FEATURE_DIM], data)?)
}

/// Inverse of [`stack3`] on the rows it kept.
pub fn unstack3(a: &AcousticFeatures) -> Tensor {
    a.data
        .clone()
        .reshape(&[a.steps() * STACK, MEL_BANDS])
        .expect("same element count")
}

/// Waveform to stacked features.
pub fn features(w: &Waveform, cfg: &MelConfig) -> Result<AcousticFeatures> {
    stack3(&log_mel80(&frame_hann(w)?, cfg)?)
}

/// Samples needed for exactly `steps` feature vectors.
pub fn samples_for_steps(steps: usize) -> usize {
    (steps * STACK - 1) * HOP + WINDOW
}

/// `10 log10(P_signal / P_noise)` over full clips.
pub fn snr_db(signal: &Waveform, noise: &Waveform) -> Scalar {
    10.0 * scalar::log10(signal.power() / noise.power())
}

/// A noisy mixture together with the components it was built from.
#[derive(Clone, Debug)]
pub struct Mixture {
    pub mixed: Waveform,
    pub clean: Waveform,
    /// The noise after tiling/cropping and rescaling.
    pub noise: Waveform,
    pub gain: Scalar,
}

/// Noise tiled or cropped to `len` samples.
fn fit_length(noise: &Waveform, len: usize) -> Waveform {
    Waveform {
        samples: noise.samples.iter().copied().cycle().take(len).collect(),
    }
}

/// Gain that brings `noise` to `snr_db` below `clean`.
pub fn noise_gain(clean: &Waveform, noise: &Waveform, snr_db: Scalar) -> Result<Scalar> {
    let (pc, pn) = (clean.power(), noise.power());
    if pc == 0.0 || pn == 0.0 {
        bail!(Input, "SNR mixing needs nonzero clean and noise power");
    }
    Ok(scalar::sqrt(pc / (pn * scalar::powf(10.0, snr_db / 10.0))))
}

pub fn mix_components(clean: &Waveform, noise: &Waveform, snr_db: Scalar) -> Result<Mixture> {
    if noise.is_empty() {
        bail!(Input, "empty noise");
    }
    let fitted = fit_length(noise, clean.len());
    let gain = noise_gain(clean, &fitted, snr_db)?;
    let noise = fitted.scaled(gain);
    let mixed = Waveform {
        samples: clean.samples.iter().zip(&noise.samples).map(|(a, b)| a + b).collect(),
    };
    Ok(Mixture {
        mixed,
        clean: clean.clone(),
        noise,
        gain,
    })
}

/// Adds `noise` (tiled or cropped to length) at the requested SNR.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: Scalar) -> Result<Waveform> {
    Ok(mix_components(clean, noise, snr_db)?.mixed)
}

/// Sums a short distractor utterance into the start or end of `base` at unity
/// gain.
pub fn overlap_utterance(base: &Waveform, distractor: &Waveform, at_start: bool) -> Result<Waveform> {
    let n = distractor.len();
    if n >= MAX_DISTRACTOR {
        bail!(Input, "distractor of {n} samples is not shorter than 5 s");
    }
    if n > base.len() {
        bail!(Input, "distractor ({n} samples) longer than the utterance ({})", base.len());
    }
    let mut out = base.samples.clone();
    let offset = if at_start { 0 } else { base.len() - n };
    for (o, d) in out[offset..offset + n].iter_mut().zip(&distractor.samples) {
        *o += d;
    }
    Ok(Waveform { samples: out })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: Scalar, len: usize, amp: Scalar) -> Waveform {
        let s = (0..len)
            .map(|i| amp * scalar::sin(2.0 * PI * freq * i as Scalar / SAMPLE_RATE as Scalar))
            .collect();
        Waveform::new(s, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn window_geometry() {
        assert_eq!(WINDOW, 16_000 * 25 / 1000);
        assert_eq!(HOP, 16_000 * 10 / 1000);
        assert_eq!(FEATURE_DIM, 240);
    }

    #[test]
    fn one_second_gives_98_frames() {
        // Enumerate frame start positions that fit.
        let enumerated = (0..16_000).step_by(HOP).filter(|s| s + WINDOW <= 16_000).count();
        assert_eq!(enumerated, 98);
        let f = frame_hann(&Waveform::silence(16_000)).unwrap();
        assert_eq!(f.shape(), &[98, 400]);
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_input_is_rejected() {
        assert!(matches!(frame_hann(&Waveform::silence(399)), Err(crate::Error::Input(_))));
        assert!(Waveform::new(vec![0.0], 8000).is_err());
    }

    #[test]
    fn fft_matches_naive_dft() {
        let n = 64;
        let x: Vec<Scalar> = (0..n).map(|i| scalar::sin(i as Scalar * 0.37) + 0.1 * i as Scalar).collect();
        let (mut re, mut im) = (x.clone(), vec![0.0; n]);
        fft(&mut re, &mut im);
        for k in 0..n {
            let (mut r, mut i) = (0.0, 0.0);
            for (j, v) in x.iter().enumerate() {
                let a = -2.0 * PI * (k * j) as Scalar / n as Scalar;
                r += v * scalar::cos(a);
                i += v * scalar::sin(a);
            }
            assert!((re[k] - r).abs() < 1e-9 && (im[k] - i).abs() < 1e-9);
        }
    }

    #[test]
    fn silence_hits_the_floor() {
        let cfg = MelConfig::default();
        let f = log_mel80(&frame_hann(&Waveform::silence(1600)).unwrap(), &cfg).unwrap();
        assert!(f.data().iter().all(|&v| v == scalar::log(cfg.log_floor)));
    }

    #[test]
    fn tone_peaks_in_nearest_filter() {
        let cfg = MelConfig::default();
        let fb = MelFilterbank::new(&cfg).unwrap();
        let nearest = fb
            .centers()
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 1000.0).abs().partial_cmp(&(b.1 - 1000.0).abs()).unwrap())
            .unwrap()
            .0;
        let f = log_mel80(&frame_hann(&tone(1000.0, 4000, 0.5)).unwrap(), &cfg).unwrap();
        for row in f.data().chunks(MEL_BANDS) {
            let arg = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(arg, nearest);
        }
    }

    #[test]
    fn energy_scales_quadratically() {
        let cfg = MelConfig::default();
        let w = tone(440.0, 2000, 0.3);
        let a = mel_energies(&frame_hann(&w).unwrap(), &cfg).unwrap();
        let b = mel_energies(&frame_hann(&w.scaled(3.0)).unwrap(), &cfg).unwrap();
        let (sa, sb): (Scalar, Scalar) = (a.data().iter().sum(), b.data().iter().sum());
        assert!((sb / sa - 9.0).abs() < 1e-9);
    }

    #[test]
    fn hop_shift_shifts_frames() {
        let cfg = MelConfig::default();
        let s: Vec<Scalar> = (0..3000).map(|i| scalar::sin(i as Scalar * 0.05) * scalar::cos(i as Scalar * 0.003)).collect();
        let a = log_mel80(&frame_hann(&Waveform::new(s.clone(), SAMPLE_RATE).unwrap()).unwrap(), &cfg).unwrap();
        let b = log_mel80(&frame_hann(&Waveform::new(s[HOP..].to_vec(), SAMPLE_RATE).unwrap()).unwrap(), &cfg).unwrap();
        let nb = b.shape()[0];
        assert_eq!(&a.data()[MEL_BANDS..(nb + 1) * MEL_BANDS], b.data());
    }

    #[test]
    fn stack_and_unstack() {
        let x = Tensor::from_fn(&[7, MEL_BANDS], |i| i as Scalar);
        let a = stack3(&x).unwrap();
        assert_eq!(a.data.shape(), &[2, 240]);
        assert_eq!(unstack3(&a).data(), &x.data()[..6 * MEL_BANDS]);
        let three = Tensor::from_fn(&[3, MEL_BANDS], |i| i as Scalar);
        assert_eq!(stack3(&three).unwrap().data.data(), three.data());
        assert!(matches!(
            stack3(&Tensor::zeros(&[2, MEL_BANDS])),
            Err(crate::Error::Input(_))
        ));
    }

    #[test]
    fn features_have_requested_steps() {
        for steps in [1, 4, 13] {
            let w = Waveform::silence(samples_for_steps(steps));
            assert_eq!(features(&w, &MelConfig::default()).unwrap().steps(), steps);
        }
    }

    #[test]
    fn snr_definition() {
        let clean = tone(300.0, 8000, 0.7);
        let noise = tone(1234.0, 3000, 0.05);
        for s in [0.0, 20.0] {
            let m = mix_components(&clean, &noise, s).unwrap();
            let ratio = clean.power() / m.noise.power();
            assert!((ratio / scalar::powf(10.0, s / 10.0) - 1.0).abs() < 1e-9);
        }
        assert!(mix_at_snr(&clean, &Waveform::silence(10), 0.0).is_err());
    }

    #[test]
    fn gain_is_scale_invariant() {
        let clean = tone(300.0, 4000, 0.7);
        let noise = tone(900.0, 4000, 0.2);
        let g1 = noise_gain(&clean, &noise, 10.0).unwrap();
        let g2 = noise_gain(&clean.scaled(5.0), &noise.scaled(5.0), 10.0).unwrap();
        assert!((g1 - g2).abs() < 1e-12);
    }

    #[test]
    fn overlap_contract() {
        let base = tone(300.0, 4000, 0.5);
        assert_eq!(overlap_utterance(&base, &Waveform::silence(1000), true).unwrap(), base);
        assert!(overlap_utterance(&base, &Waveform::silence(5000), true).is_err());
        let long = Waveform::silence(MAX_DISTRACTOR + 10);
        assert!(overlap_utterance(&long, &Waveform::silence(MAX_DISTRACTOR), false).is_err());
    }
}
