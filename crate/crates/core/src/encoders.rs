//! Visual and audio feature encoders with an STFT -> log-Mel audio frontend.
//!
//! Both encoders are small trainable conv stacks standing in for pretrained
//! backbones behind the same interface: multi-scale features at strides
//! 4/8/16/32 for video, one embedding row per one-second frame for audio.

use ndarray::{Array2, Array3, Array4};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Bound, ParamStore};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            sample_rate: 16000,
            n_mels: 64,
            win_ms: 25.0,
            hop_ms: 10.0,
            fft_size: 512,
            log_floor: 1e-10,
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular Mel filterbank, shape `(n_mels, fft_size/2 + 1)`.
pub fn mel_filterbank(cfg: &MelConfig) -> Array2<f64> {
    let n_bins = cfg.fft_size / 2 + 1;
    let f_max = cfg.sample_rate as f64 / 2.0;
    let mel_pts: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(hz_to_mel(0.0) + (hz_to_mel(f_max) - hz_to_mel(0.0)) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let mut fb = Array2::<f64>::zeros((cfg.n_mels, n_bins));
    for m in 0..cfg.n_mels {
        let (lo, ctr, hi) = (mel_pts[m], mel_pts[m + 1], mel_pts[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * cfg.sample_rate as f64 / cfg.fft_size as f64;
            let v = if f >= lo && f <= ctr {
                (f - lo) / (ctr - lo)
            } else if f > ctr && f <= hi {
                (hi - f) / (hi - ctr)
            } else {
                0.0
            };
            fb[[m, k]] = v;
        }
    }
    fb
}

/// Response of each Mel filter at a single frequency (for test oracles).
pub fn mel_response_at(cfg: &MelConfig, freq_hz: f64) -> Vec<f64> {
    let fb = mel_filterbank(cfg);
    let bin = freq_hz * cfg.fft_size as f64 / cfg.sample_rate as f64;
    let k = bin.round() as usize;
    (0..cfg.n_mels).map(|m| fb[[m, k.min(cfg.fft_size / 2)]]).collect()
}

/// One-sided power spectrum of a (windowed) frame, zero-padded to `fft_size`.
pub fn power_spectrum(frame: &[f64], fft_size: usize) -> Vec<f64> {
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(fft_size);
    let mut buf: Vec<Complex<f64>> = frame
        .iter()
        .map(|&x| Complex::new(x, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(fft_size)
        .collect();
    fft.process(&mut buf);
    buf[..fft_size / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos())
        .collect()
}

/// Per-frame-window log-Mel features, shape `(T, M, n_mels)` where `M` is the
/// number of STFT hops inside one window.
pub fn mel_frontend(
    waveform: &[f64],
    sr: u32,
    num_frames: usize,
    cfg: &MelConfig,
) -> Result<Array3<f64>> {
    if waveform.is_empty() {
        return Err(Error::invalid("mel_frontend: zero-length audio"));
    }
    if sr != cfg.sample_rate {
        return Err(Error::invalid(format!(
            "mel_frontend: sample rate {sr} != configured {}",
            cfg.sample_rate
        )));
    }
    if num_frames == 0 || waveform.len() % num_frames != 0 {
        return Err(Error::invalid(format!(
            "mel_frontend: waveform length {} not divisible into {num_frames} windows",
            waveform.len()
        )));
    }
    let window_len = waveform.len() / num_frames;
    let win = (sr as f64 * cfg.win_ms / 1000.0).round() as usize;
    let hop = (sr as f64 * cfg.hop_ms / 1000.0).round() as usize;
    if window_len < win {
        return Err(Error::invalid("mel_frontend: frame window shorter than STFT window"));
    }
    let m_hops = (window_len - win) / hop + 1;
    let fb = mel_filterbank(cfg);
    let hann_w = hann(win);
    let mut out = Array3::<f64>::zeros((num_frames, m_hops, cfg.n_mels));
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.fft_size);
    for t in 0..num_frames {
        let chunk = &waveform[t * window_len..(t + 1) * window_len];
        for m in 0..m_hops {
            let mut buf: Vec<Complex<f64>> = (0..cfg.fft_size)
                .map(|i| {
                    if i < win {
                        Complex::new(chunk[m * hop + i] * hann_w[i], 0.0)
                    } else {
                        Complex::new(0.0, 0.0)
                    }
                })
                .collect();
            fft.process(&mut buf);
            for band in 0..cfg.n_mels {
                let mut acc = 0.0;
                for k in 0..cfg.fft_size / 2 + 1 {
                    acc += fb[[band, k]] * buf[k].norm_sqr();
                }
                out[[t, m, band]] = acc.max(cfg.log_floor).ln();
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Encoders
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Input (H, W); all frames must match.
    pub resolution: (usize, usize),
    /// Stage channels are [c, 2c, 4c, 8c].
    pub base_channels: usize,
    /// Dimension of the pooled per-frame descriptor.
    pub pooled_dim: usize,
    /// Audio embedding dimension D.
    pub audio_dim: usize,
    pub mel: MelConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            resolution: (224, 224),
            base_channels: 32,
            pooled_dim: 128,
            audio_dim: 128,
            mel: MelConfig::default(),
        }
    }
}

impl EncoderConfig {
    pub fn stage_channels(&self) -> [usize; 4] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c, 8 * c]
    }
}

/// Multi-scale visual features on a tape: 4 scales at strides 4/8/16/32 plus
/// a pooled per-frame descriptor `(T, pooled_dim)`.
pub struct VisualFeatureStack {
    pub scales: Vec<Var>,
    pub pooled: Var,
}

pub fn init_visual_encoder(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &EncoderConfig) {
    let [c1, c2, c3, c4] = cfg.stage_channels();
    nn::conv_init(store, rng, "venc.stem_a", 3, c1, 3);
    nn::conv_init(store, rng, "venc.stem_b", c1, c1, 3);
    nn::conv_init(store, rng, "venc.stage2", c1, c2, 3);
    nn::conv_init(store, rng, "venc.stage3", c2, c3, 3);
    nn::conv_init(store, rng, "venc.stage4", c3, c4, 3);
    nn::conv_init(store, rng, "venc.pool_proj", c1, cfg.pooled_dim, 1);
}

pub fn init_audio_encoder(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &EncoderConfig) {
    nn::conv_init(store, rng, "aenc.c1", 1, 16, 3);
    nn::conv_init(store, rng, "aenc.c2", 16, 32, 3);
    nn::linear_init(store, rng, "aenc.fc", 32, cfg.audio_dim);
}

/// Convert raw frames to a `(T, 3, H, W)` f64 tensor in [0, 1].
pub fn frames_to_tensor(frames: &[Array3<u8>]) -> Result<Array4<f64>> {
    if frames.is_empty() {
        return Err(Error::invalid("no frames"));
    }
    let dim = frames[0].dim();
    if frames.iter().any(|f| f.dim() != dim) {
        return Err(Error::shape("non-uniform frame sizes"));
    }
    let (h, w, _) = dim;
    let t = frames.len();
    let mut out = Array4::<f64>::zeros((t, 3, h, w));
    for (ti, f) in frames.iter().enumerate() {
        for i in 0..h {
            for j in 0..w {
                for c in 0..3 {
                    out[[ti, c, i, j]] = f[[i, j, c]] as f64 / 255.0;
                }
            }
        }
    }
    Ok(out)
}

/// Frame-wise 4-stage conv pyramid. Frames form the batch axis, so the
/// encoder commutes with frame permutation by construction.
pub fn encode_visual(
    tape: &Tape,
    bound: &Bound,
    cfg: &EncoderConfig,
    frames: &Array4<f64>,
) -> Result<VisualFeatureStack> {
    let (_, c, h, w) = frames.dim();
    if c != 3 || (h, w) != cfg.resolution {
        return Err(Error::shape(format!(
            "encode_visual: expected (T,3,{},{}), got {:?}",
            cfg.resolution.0,
            cfg.resolution.1,
            frames.dim()
        )));
    }
    let x = tape.constant(frames.clone().into_dyn());
    let s1 = tape.relu(nn::conv2d(tape, bound, "venc.stem_a", x, 2, 1));
    let s1 = tape.relu(nn::conv2d(tape, bound, "venc.stem_b", s1, 2, 1)); // stride 4
    let s2 = tape.relu(nn::conv2d(tape, bound, "venc.stage2", s1, 2, 1)); // stride 8
    let s3 = tape.relu(nn::conv2d(tape, bound, "venc.stage3", s2, 2, 1)); // stride 16
    let s4 = tape.relu(nn::conv2d(tape, bound, "venc.stage4", s3, 2, 1)); // stride 32
    let pooled = pooled_descriptor(tape, bound, s1);
    Ok(VisualFeatureStack { scales: vec![s1, s2, s3, s4], pooled })
}

/// Spatial mean of the finest scale after a 1x1 projection: `(T, pooled_dim)`.
pub fn pooled_descriptor(tape: &Tape, bound: &Bound, finest: Var) -> Var {
    let p = nn::conv2d(tape, bound, "venc.pool_proj", finest, 1, 0);
    let m = tape.mean_axis(p, 3);
    tape.mean_axis(m, 2)
}

/// Two conv blocks over the Mel image plus global pooling, one row per frame.
pub fn encode_audio(tape: &Tape, bound: &Bound, cfg: &EncoderConfig, mel: &Array3<f64>) -> Var {
    let (t, m, b) = mel.dim();
    let x = tape.constant(
        mel.clone()
            .into_shape_with_order((t, 1, m, b))
            .unwrap()
            .into_dyn(),
    );
    let h1 = tape.relu(nn::conv2d(tape, bound, "aenc.c1", x, 2, 1));
    let h2 = tape.relu(nn::conv2d(tape, bound, "aenc.c2", h1, 2, 1));
    let pooled = tape.mean_axis(tape.mean_axis(h2, 3), 2); // (T, 32)
    let _ = cfg;
    nn::linear(tape, bound, "aenc.fc", pooled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tone(freq: f64, sr: u32, secs: usize) -> Vec<f64> {
        (0..sr as usize * secs)
            .map(|k| (std::f64::consts::TAU * freq * k as f64 / sr as f64).sin() * 0.5)
            .collect()
    }

    #[test]
    fn pure_tone_peaks_in_the_right_mel_band() {
        let cfg = MelConfig::default();
        let wav = tone(440.0, 16000, 2);
        let mel = mel_frontend(&wav, 16000, 2, &cfg).unwrap();
        // oracle: the band with max filter response at 440 Hz, computed from
        // independently constructed center frequencies
        let resp = mel_response_at(&cfg, 440.0);
        let expected_band = resp
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        for t in 0..2 {
            for m in 0..mel.shape()[1] {
                let row: Vec<f64> = (0..cfg.n_mels).map(|b| mel[[t, m, b]]).collect();
                let argmax = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                assert_eq!(argmax, expected_band, "window {t} hop {m}");
            }
        }
    }

    #[test]
    fn silence_hits_the_log_floor() {
        let cfg = MelConfig::default();
        let wav = vec![0.0; 16000];
        let mel = mel_frontend(&wav, 16000, 1, &cfg).unwrap();
        let floor = cfg.log_floor.ln();
        assert!(mel.iter().all(|&v| (v - floor).abs() < 1e-12));
    }

    #[test]
    fn two_tone_superposition_dominates_single_tones() {
        let cfg = MelConfig::default();
        let a = tone(440.0, 16000, 1);
        let b = tone(1200.0, 16000, 1);
        let sum: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x + y).collect();
        let mel_a = mel_frontend(&a, 16000, 1, &cfg).unwrap();
        let mel_b = mel_frontend(&b, 16000, 1, &cfg).unwrap();
        let mel_s = mel_frontend(&sum, 16000, 1, &cfg).unwrap();
        // superposition oracle on the filterbank output: at each tone's peak
        // band, the mixture has at least the single tone's energy (within a
        // small cross-term slack in log space)
        for (f, mel_single) in [(440.0, &mel_a), (1200.0, &mel_b)] {
            let resp = mel_response_at(&cfg, f);
            let band = resp
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                .unwrap()
                .0;
            for m in 0..mel_s.shape()[1] {
                assert!(
                    mel_s[[0, m, band]] >= mel_single[[0, m, band]] - 0.2,
                    "band {band} hop {m}"
                );
            }
        }
    }

    #[test]
    fn mel_frontend_rejects_bad_input() {
        let cfg = MelConfig::default();
        assert!(mel_frontend(&[], 16000, 1, &cfg).is_err());
        assert!(mel_frontend(&vec![0.0; 16000], 8000, 1, &cfg).is_err());
        assert!(mel_frontend(&vec![0.0; 16001], 16000, 2, &cfg).is_err());
    }

    #[test]
    fn parseval_energy_preserved_up_to_windowing() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let frame: Vec<f64> = (0..400).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let hann_w = hann(400);
        let windowed: Vec<f64> =
            frame.iter().zip(hann_w.iter()).map(|(&x, &w)| x * w).collect();
        let spec = power_spectrum(&windowed, 512);
        // full-spectrum sum: double all bins except DC and Nyquist
        let mut spec_energy = spec[0] + spec[256];
        for k in 1..256 {
            spec_energy += 2.0 * spec[k];
        }
        let time_energy: f64 = windowed.iter().map(|x| x * x).sum::<f64>() * 512.0;
        assert!(
            (spec_energy - time_energy).abs() / time_energy < 1e-10,
            "Parseval violated: {spec_energy} vs {time_energy}"
        );
    }

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig { resolution: (32, 32), base_channels: 4, ..Default::default() }
    }

    #[test]
    fn visual_shapes_follow_stride_arithmetic() {
        // default config at 224x224 per the shape contract
        let cfg = EncoderConfig { base_channels: 2, ..Default::default() };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        init_visual_encoder(&mut store, &mut rng, &cfg);
        let frames = Array4::<f64>::zeros((5, 3, 224, 224));
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let stack = encode_visual(&tape, &bound, &cfg, &frames).unwrap();
        let [c1, c2, c3, c4] = cfg.stage_channels();
        assert_eq!(tape.shape(stack.scales[0]), vec![5, c1, 56, 56]);
        assert_eq!(tape.shape(stack.scales[1]), vec![5, c2, 28, 28]);
        assert_eq!(tape.shape(stack.scales[2]), vec![5, c3, 14, 14]);
        assert_eq!(tape.shape(stack.scales[3]), vec![5, c4, 7, 7]);
        assert_eq!(tape.shape(stack.pooled), vec![5, cfg.pooled_dim]);
    }

    #[test]
    fn frame_permutation_equivariance() {
        let cfg = tiny_cfg();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        init_visual_encoder(&mut store, &mut rng, &cfg);
        init_audio_encoder(&mut store, &mut rng, &cfg);
        let mut frames = Array4::<f64>::zeros((3, 3, 32, 32));
        for (i, v) in frames.iter_mut().enumerate() {
            *v = ((i * 2654435761) % 1000) as f64 / 1000.0;
        }
        let perm = [2usize, 0, 1];
        let mut permuted = frames.clone();
        for (dst, &src) in perm.iter().enumerate() {
            permuted
                .index_axis_mut(ndarray::Axis(0), dst)
                .assign(&frames.index_axis(ndarray::Axis(0), src));
        }
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let a = encode_visual(&tape, &bound, &cfg, &frames).unwrap();
        let b = encode_visual(&tape, &bound, &cfg, &permuted).unwrap();
        let va = tape.value(a.scales[3]);
        let vb = tape.value(b.scales[3]);
        for (dst, &src) in perm.iter().enumerate() {
            let ra = va.index_axis(ndarray::Axis(0), src);
            let rb = vb.index_axis(ndarray::Axis(0), dst);
            assert!(ra.iter().zip(rb.iter()).all(|(&x, &y)| x == y));
        }
        // duplicated identical frames give identical rows
        let mut dup = frames.clone();
        dup.index_axis_mut(ndarray::Axis(0), 1)
            .assign(&frames.index_axis(ndarray::Axis(0), 0));
        let d = encode_visual(&tape, &bound, &cfg, &dup).unwrap();
        let vd = tape.value(d.pooled);
        let r0 = vd.index_axis(ndarray::Axis(0), 0);
        let r1 = vd.index_axis(ndarray::Axis(0), 1);
        assert!(r0.iter().zip(r1.iter()).all(|(&x, &y)| x == y));
    }

    #[test]
    fn audio_encoder_shape_and_determinism() {
        let cfg = tiny_cfg();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        init_audio_encoder(&mut store, &mut rng, &cfg);
        let wav = tone(440.0, 16000, 5);
        let mel = mel_frontend(&wav, 16000, 5, &cfg.mel).unwrap();
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let a1 = encode_audio(&tape, &bound, &cfg, &mel);
        let a2 = encode_audio(&tape, &bound, &cfg, &mel);
        assert_eq!(tape.shape(a1), vec![5, cfg.audio_dim]);
        assert_eq!(tape.value(a1), tape.value(a2));
        assert!(tape.value(a1).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn no_nan_inf_on_random_inputs() {
        let cfg = tiny_cfg();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        init_visual_encoder(&mut store, &mut rng, &cfg);
        // 1000 random frames in batches to keep runtime sane
        for trial in 0..10 {
            let mut frames = Array4::<f64>::zeros((2, 3, 32, 32));
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(100 + trial);
            for v in frames.iter_mut() {
                *v = r.gen_range(0.0..1.0);
            }
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let s = encode_visual(&tape, &bound, &cfg, &frames).unwrap();
            for sc in &s.scales {
                assert!(tape.value(*sc).iter().all(|v| v.is_finite()));
            }
        }
    }
}
