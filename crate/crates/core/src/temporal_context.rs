//! Temporal context enrichment via channel-dimension attention.
//!
//! Tokens are (frame, channel) pairs: a clip's features R^{T x C x H x W} are
//! flattened to TC rows of length HW, and attention runs over the TC rows.
//! This keeps the correlation matrix at (TC)^2 instead of (THW)^2.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Bound, ParamStore};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentWindow {
    HalfT,
    QuarterT,
}

impl SegmentWindow {
    pub fn size(&self, t: usize) -> usize {
        match self {
            SegmentWindow::HalfT => t.div_ceil(2),
            SegmentWindow::QuarterT => t.div_ceil(4),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GranularityConfig {
    /// Attention temperature; `None` means sqrt(HW).
    pub temperature: Option<f64>,
    pub segment_window: SegmentWindow,
    pub video: bool,
    pub segment: bool,
    pub frame: bool,
}

impl Default for GranularityConfig {
    fn default() -> Self {
        GranularityConfig {
            temperature: None,
            segment_window: SegmentWindow::HalfT,
            video: true,
            segment: true,
            frame: true,
        }
    }
}

impl GranularityConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.temperature {
            if !(t > 0.0) {
                return Err(Error::invalid("granularity: temperature must be positive"));
            }
        }
        if !(self.video || self.segment || self.frame) {
            return Err(Error::invalid("granularity: at least one level must be enabled"));
        }
        Ok(())
    }
}

pub fn init_channel_attention(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    hw: usize,
) {
    nn::linear_init(store, rng, &format!("{prefix}.q"), hw, hw);
    nn::linear_init(store, rng, &format!("{prefix}.k"), hw, hw);
    nn::linear_init(store, rng, &format!("{prefix}.v"), hw, hw);
}

/// Residual channel attention: A = softmax(QK^T / tau) over TC tokens,
/// output F + A V reshaped back to (T, C, H, W).
pub fn channel_attention(
    tape: &Tape,
    bound: &Bound,
    prefix: &str,
    f: Var,
    tau: Option<f64>,
) -> Result<Var> {
    let shape = tape.shape(f);
    if shape.len() != 4 {
        return Err(Error::shape(format!("channel_attention: expected 4-d, got {shape:?}")));
    }
    if !tape.value(f).iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("channel_attention input".into()));
    }
    let (t, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let hw = h * w;
    let tau = tau.unwrap_or((hw as f64).sqrt());
    if !(tau > 0.0) {
        return Err(Error::invalid("channel_attention: tau must be positive"));
    }
    let x = tape.reshape(f, &[t * c, hw]);
    let q = nn::linear(tape, bound, &format!("{prefix}.q"), x);
    let k = nn::linear(tape, bound, &format!("{prefix}.k"), x);
    let v = nn::linear(tape, bound, &format!("{prefix}.v"), x);
    let logits = tape.scale(tape.matmul(q, tape.transpose2(k)), 1.0 / tau);
    debug_assert_eq!(tape.shape(logits), vec![t * c, t * c]);
    let a = tape.softmax(logits);
    let out = tape.add(x, tape.matmul(a, v));
    Ok(tape.reshape(out, &[t, c, h, w]))
}

/// One window per frame covering [t-w+1, t]; indices below 0 repeat frame 0.
pub fn segment_windows(t_frames: usize, w: usize) -> Result<Vec<Vec<usize>>> {
    if t_frames == 0 || w == 0 {
        return Err(Error::invalid("segment_windows: T and w must be >= 1"));
    }
    Ok((0..t_frames)
        .map(|t| {
            (0..w)
                .map(|i| (t + 1 + i).saturating_sub(w))
                .collect()
        })
        .collect())
}

/// Video-, segment-, and frame-level enriched features, each (T, C, H, W).
/// Disabled levels pass the input through unchanged.
pub fn apply_granularity(
    tape: &Tape,
    bound: &Bound,
    prefix: &str,
    cfg: &GranularityConfig,
    f: Var,
) -> Result<(Var, Var, Var)> {
    cfg.validate()?;
    let shape = tape.shape(f);
    let t = shape[0];
    let f_v = if cfg.video {
        channel_attention(tape, bound, prefix, f, cfg.temperature)?
    } else {
        f
    };
    let f_s = if cfg.segment {
        let w = cfg.segment_window.size(t);
        let mut rows = Vec::with_capacity(t);
        for win in segment_windows(t, w)? {
            let block = tape.index_select(f, &win);
            let ctx = channel_attention(tape, bound, prefix, block, cfg.temperature)?;
            rows.push(tape.slice(ctx, 0, w - 1, w));
        }
        tape.concat(&rows, 0)
    } else {
        f
    };
    let f_f = if cfg.frame {
        let mut rows = Vec::with_capacity(t);
        for i in 0..t {
            let frame = tape.slice(f, 0, i, i + 1);
            rows.push(channel_attention(tape, bound, prefix, frame, cfg.temperature)?);
        }
        tape.concat(&rows, 0)
    } else {
        f
    };
    Ok((f_v, f_s, f_f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;

    fn identity_attention(store: &mut ParamStore, prefix: &str, hw: usize) {
        let eye = ndarray::Array2::<f64>::eye(hw).into_dyn();
        for p in ["q", "k", "v"] {
            store.insert(&format!("{prefix}.{p}.w"), eye.clone());
            store.insert(&format!("{prefix}.{p}.b"), ArrayD::zeros(IxDyn(&[hw])));
        }
    }

    #[test]
    fn single_token_identity_maps_double_input() {
        let mut store = ParamStore::new();
        identity_attention(&mut store, "att", 1);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let f = tape.input(ArrayD::from_shape_vec(IxDyn(&[1, 1, 1, 1]), vec![3.5]).unwrap());
        let out = channel_attention(&tape, &bound, "att", f, Some(1.0)).unwrap();
        assert!((tape.value(out)[[0, 0, 0, 0]] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn two_token_hand_oracle() {
        // T=2, C=1, H=W=1, identity maps, F = (0, ln 3), tau = 1
        let mut store = ParamStore::new();
        identity_attention(&mut store, "att", 1);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let x0 = 0.0f64;
        let x1 = 3.0f64.ln();
        let f = tape.input(ArrayD::from_shape_vec(IxDyn(&[2, 1, 1, 1]), vec![x0, x1]).unwrap());
        let out = channel_attention(&tape, &bound, "att", f, Some(1.0)).unwrap();
        // hand oracle: logits row0 = (0, 0), row1 = (0, ln3 * ln3)
        let a00 = 0.5;
        let a01 = 0.5;
        let e = (x1 * x1).exp();
        let a10 = 1.0 / (1.0 + e);
        let a11 = e / (1.0 + e);
        let exp0 = x0 + a00 * x0 + a01 * x1;
        let exp1 = x1 + a10 * x0 + a11 * x1;
        let v = tape.value(out);
        assert!((v[[0, 0, 0, 0]] - exp0).abs() < 1e-6);
        assert!((v[[1, 0, 0, 0]] - exp1).abs() < 1e-6);
    }

    #[test]
    fn correlation_matrix_is_tc_by_tc() {
        // T=5, C=256, H=W=7 must route through a 1280x1280 matrix, never
        // (THW)^2; the debug assert inside channel_attention checks the shape
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        init_channel_attention(&mut store, &mut rng, "att", 49);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let f = tape.input(ArrayD::zeros(IxDyn(&[5, 256, 7, 7])));
        let out = channel_attention(&tape, &bound, "att", f, None).unwrap();
        assert_eq!(tape.shape(out), vec![5, 256, 7, 7]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_zero_v_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        init_channel_attention(&mut store, &mut rng, "att", 4);
        // zero out the V projection: residual form must reduce to identity
        store.set("att.v.w", ArrayD::zeros(IxDyn(&[4, 4])));
        store.set("att.v.b", ArrayD::zeros(IxDyn(&[4])));
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let data = crate::nn::randn(&mut rng, &[3, 2, 2, 2]);
        let f = tape.input(data.clone());
        let out = channel_attention(&tape, &bound, "att", f, None).unwrap();
        let v = tape.value(out);
        assert!(v.iter().zip(data.iter()).all(|(&a, &b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn rejects_non_finite_and_bad_tau() {
        let mut store = ParamStore::new();
        identity_attention(&mut store, "att", 1);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let f = tape.input(ArrayD::from_shape_vec(IxDyn(&[1, 1, 1, 1]), vec![f64::NAN]).unwrap());
        assert!(channel_attention(&tape, &bound, "att", f, Some(1.0)).is_err());
        let g = tape.input(ArrayD::zeros(IxDyn(&[1, 1, 1, 1])));
        assert!(channel_attention(&tape, &bound, "att", g, Some(0.0)).is_err());
    }

    #[test]
    fn segment_windows_enumeration() {
        let w = segment_windows(5, 3).unwrap();
        assert_eq!(w[0], vec![0, 0, 0]);
        assert_eq!(w[1], vec![0, 0, 1]);
        assert_eq!(w[2], vec![0, 1, 2]);
        assert_eq!(w[4], vec![2, 3, 4]);
        // single frame: every window repeats frame 0
        let w1 = segment_windows(1, 4).unwrap();
        assert_eq!(w1, vec![vec![0, 0, 0, 0]]);
        // window of one degenerates to frame level
        let w2 = segment_windows(4, 1).unwrap();
        assert_eq!(w2, vec![vec![0], vec![1], vec![2], vec![3]]);
        assert!(segment_windows(0, 1).is_err());
    }

    #[test]
    fn disabled_levels_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        init_channel_attention(&mut store, &mut rng, "att", 4);
        let cfg = GranularityConfig { segment: false, frame: false, ..Default::default() };
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let data = crate::nn::randn(&mut rng, &[3, 2, 2, 2]);
        let f = tape.input(data.clone());
        let (fv, fs, ff) = apply_granularity(&tape, &bound, "att", &cfg, f).unwrap();
        assert_eq!(tape.value(fs), data);
        assert_eq!(tape.value(ff), data);
        assert_ne!(tape.value(fv), data);
        let none = GranularityConfig {
            video: false,
            segment: false,
            frame: false,
            ..Default::default()
        };
        assert!(apply_granularity(&tape, &bound, "att", &none, f).is_err());
    }

    #[test]
    fn segment_output_ignores_frames_outside_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        init_channel_attention(&mut store, &mut rng, "att", 4);
        let cfg = GranularityConfig {
            segment_window: SegmentWindow::HalfT,
            ..Default::default()
        };
        let data = crate::nn::randn(&mut rng, &[6, 2, 2, 2]);
        // w = ceil(6/2) = 3, so F^s at t=5 covers frames 3..=5; perturb frame 2
        let mut perturbed = data.clone();
        perturbed[[2, 0, 0, 0]] += 10.0;
        let run = |input: &ndarray::ArrayD<f64>| {
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let f = tape.input(input.clone());
            let (_, fs, _) = apply_granularity(&tape, &bound, "att", &cfg, f).unwrap();
            tape.value(fs)
        };
        let a = run(&data);
        let b = run(&perturbed);
        let last_a = a.index_axis(ndarray::Axis(0), 5);
        let last_b = b.index_axis(ndarray::Axis(0), 5);
        assert!(last_a.iter().zip(last_b.iter()).all(|(&x, &y)| x == y));
        // frame 2's own segment output does change
        let f2_a = a.index_axis(ndarray::Axis(0), 2);
        let f2_b = b.index_axis(ndarray::Axis(0), 2);
        assert!(f2_a.iter().zip(f2_b.iter()).any(|(&x, &y)| x != y));
    }

    #[test]
    fn single_frame_collapses_all_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        init_channel_attention(&mut store, &mut rng, "att", 4);
        let cfg = GranularityConfig::default();
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let f = tape.input(crate::nn::randn(&mut rng, &[1, 3, 2, 2]));
        let (fv, fs, ff) = apply_granularity(&tape, &bound, "att", &cfg, f).unwrap();
        assert_eq!(tape.value(fv), tape.value(ff));
        assert_eq!(tape.value(fs), tape.value(ff));
    }
}
