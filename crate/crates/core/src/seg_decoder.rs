//! Query-based mask decoder and the segmentation / total losses.
//!
//! N_q learnable queries cross-attend to audio-conditioned visual tokens
//! (stride-16 scale plus one audio token per frame, optionally the composite
//! text tokens). Masks come from dotting query mask-embeddings with a
//! stride-4 pixel embedding, fused over queries and upsampled bilinearly.

use ndarray::{Array3, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Bound, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegHead {
    Binary,
    /// Class count includes background as class 0.
    Semantic(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub num_queries: usize,
    pub d_q: usize,
    /// Pixel-embedding channels.
    pub d_pix: usize,
    pub head: SegHead,
    /// Feed the composite text tokens to the decoder. Off by default so the
    /// training and inference paths are identical.
    pub use_text: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            num_queries: 16,
            d_q: 128,
            d_pix: 32,
            head: SegHead::Binary,
            use_text: false,
        }
    }
}

impl DecoderConfig {
    pub fn out_channels(&self) -> usize {
        match self.head {
            SegHead::Binary => 1,
            SegHead::Semantic(k) => k,
        }
    }
}

const DECODER_LAYERS: usize = 2;

pub fn init_decoder(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    cfg: &DecoderConfig,
    c_tok: usize,
    c_pix: usize,
    audio_dim: usize,
    text_dim: usize,
) {
    store.insert(
        "dec.queries",
        nn::randn(rng, &[cfg.num_queries, cfg.d_q]) * (1.0 / (cfg.d_q as f64).sqrt()),
    );
    nn::linear_init(store, rng, "dec.tok_proj", c_tok, cfg.d_q);
    nn::linear_init(store, rng, "dec.aud_proj", audio_dim, cfg.d_q);
    nn::linear_init(store, rng, "dec.txt_proj", text_dim, cfg.d_q);
    for l in 0..DECODER_LAYERS {
        nn::linear_init(store, rng, &format!("dec.l{l}.k"), cfg.d_q, cfg.d_q);
        nn::linear_init(store, rng, &format!("dec.l{l}.v"), cfg.d_q, cfg.d_q);
        nn::linear_init(store, rng, &format!("dec.l{l}.q"), cfg.d_q, cfg.d_q);
        nn::linear_init(store, rng, &format!("dec.l{l}.f1"), cfg.d_q, cfg.d_q);
        nn::linear_init(store, rng, &format!("dec.l{l}.f2"), cfg.d_q, cfg.d_q);
    }
    nn::linear_init(store, rng, "dec.mask_embed", cfg.d_q, cfg.d_pix);
    nn::linear_init(store, rng, "dec.q_out", cfg.d_q, cfg.out_channels());
    nn::conv_init(store, rng, "dec.pix", c_pix, cfg.d_pix, 1);
}

/// Mask logits: (T, H, W) in binary mode, (T, K, H, W) in semantic mode.
pub fn decode(
    tape: &Tape,
    bound: &Bound,
    cfg: &DecoderConfig,
    pix_feat: Var,
    tok_feat: Var,
    audio: Var,
    text: Option<Var>,
    out_hw: (usize, usize),
) -> Result<Var> {
    let ps = tape.shape(pix_feat);
    let ts = tape.shape(tok_feat);
    let aus = tape.shape(audio);
    if ps.len() != 4 || ts.len() != 4 {
        return Err(Error::shape("decode: feature maps must be 4-d"));
    }
    let t = ps[0];
    if ts[0] != t || aus != vec![t, aus[1]] {
        return Err(Error::shape("decode: frame counts disagree"));
    }
    if cfg.use_text && text.is_none() {
        return Err(Error::invalid("decode: text conditioning enabled but no text given"));
    }
    let (h4, w4) = (ps[2], ps[3]);
    let (h16, w16) = (ts[2], ts[3]);
    let nq = cfg.num_queries;
    let kc = cfg.out_channels();

    // shared stride-4 pixel embedding: (T, d_pix, H4, W4)
    let pix = nn::conv2d(tape, bound, "dec.pix", pix_feat, 1, 0);
    let queries0 = bound.var("dec.queries");
    let scale = 1.0 / (cfg.d_q as f64).sqrt();

    let mut frames = Vec::with_capacity(t);
    for ti in 0..t {
        // memory tokens: stride-16 pixels, an audio token, optional text
        let ft = tape.slice(tok_feat, 0, ti, ti + 1); // (1, C, h16, w16)
        let ftr = tape.reshape(ft, &[ts[1], h16 * w16]);
        let vis_tok = nn::linear(tape, bound, "dec.tok_proj", tape.transpose2(ftr));
        let at = tape.slice(audio, 0, ti, ti + 1); // (1, D)
        let aud_tok = nn::linear(tape, bound, "dec.aud_proj", at);
        let mem = if let (true, Some(z)) = (cfg.use_text, text) {
            let z_tok = nn::linear(tape, bound, "dec.txt_proj", z);
            tape.concat(&[vis_tok, aud_tok, z_tok], 0)
        } else {
            tape.concat(&[vis_tok, aud_tok], 0)
        };
        let mut q = queries0;
        for l in 0..DECODER_LAYERS {
            let qq = nn::linear(tape, bound, &format!("dec.l{l}.q"), q);
            let kk = nn::linear(tape, bound, &format!("dec.l{l}.k"), mem);
            let vv = nn::linear(tape, bound, &format!("dec.l{l}.v"), mem);
            let att = tape.softmax(tape.scale(tape.matmul(qq, tape.transpose2(kk)), scale));
            q = tape.add(q, tape.matmul(att, vv));
            let ff = nn::linear(
                tape,
                bound,
                &format!("dec.l{l}.f2"),
                tape.relu(nn::linear(tape, bound, &format!("dec.l{l}.f1"), q)),
            );
            q = tape.add(q, ff);
        }
        // per-query masks at stride 4: (nq, h4*w4)
        let membed = nn::linear(tape, bound, "dec.mask_embed", q); // (nq, d_pix)
        let pt = tape.slice(pix, 0, ti, ti + 1);
        let ptr = tape.reshape(pt, &[cfg.d_pix, h4 * w4]);
        let masks = tape.matmul(membed, ptr); // (nq, h4*w4)
        // fuse queries into kc output channels
        let qw = nn::linear(tape, bound, "dec.q_out", q); // (nq, kc)
        let fused = tape.scale(tape.matmul(tape.transpose2(qw), masks), 1.0 / nq as f64);
        frames.push(tape.reshape(fused, &[1, kc, h4, w4]));
    }
    let low = tape.concat(&frames, 0); // (T, kc, h4, w4)
    let up = tape.upsample_bilinear(low, out_hw.0, out_hw.1);
    let out = match cfg.head {
        SegHead::Binary => tape.reshape(up, &[t, out_hw.0, out_hw.1]),
        SegHead::Semantic(_) => up,
    };
    if !tape.value(out).iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("decode output".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub bce: f64,
    pub dice: f64,
    pub focal: f64,
    pub cf: f64,
    pub cdcl: f64,
    pub v_a: f64,
    pub v_l: f64,
    pub a_l: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            bce: 1.0,
            dice: 1.0,
            focal: 2.0,
            cf: 0.1,
            cdcl: 0.5,
            v_a: 1.0,
            v_l: 1.0,
            a_l: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.bce, self.dice, self.focal, self.cf, self.cdcl, self.v_a, self.v_l, self.a_l,
        ];
        if all.iter().any(|&w| w < 0.0) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        if self.bce <= 0.0 && self.dice <= 0.0 && self.focal <= 0.0 {
            return Err(Error::invalid("at least one segmentation weight must be positive"));
        }
        Ok(())
    }
}

const FOCAL_GAMMA: f64 = 2.0;
const FOCAL_ALPHA: f64 = 0.25;
const DICE_SMOOTH: f64 = 1.0;

/// The three binary segmentation terms (BCE, Dice, Focal), each a scalar Var.
pub fn seg_terms_binary(tape: &Tape, logits: Var, gt: &Array3<u8>) -> Result<(Var, Var, Var)> {
    let shape = tape.shape(logits);
    let (t, h, w) = gt.dim();
    if shape != vec![t, h, w] {
        return Err(Error::shape(format!("seg_loss: logits {shape:?} vs gt ({t},{h},{w})")));
    }
    if gt.iter().any(|&v| v > 1) {
        return Err(Error::invalid("seg_loss: binary gt must be 0/1"));
    }
    let y = tape.constant(
        ArrayD::from_shape_vec(IxDyn(&[t, h, w]), gt.iter().map(|&v| v as f64).collect()).unwrap(),
    );
    // BCE with logits: softplus(x) - x y
    let bce = tape.mean_all(tape.sub(tape.softplus(logits), tape.mul(logits, y)));
    // Dice on probabilities with the usual smooth constant
    let p = tape.sigmoid(logits);
    let inter = tape.sum_all(tape.mul(p, y));
    let num = tape.add_scalar(tape.scale(inter, 2.0), DICE_SMOOTH);
    let den = tape.add_scalar(tape.add(tape.sum_all(p), tape.sum_all(y)), DICE_SMOOTH);
    let dice = tape.add_scalar(tape.neg(tape.div(num, den)), 1.0);
    // Focal: alpha y (1-p)^g (-ln p) + (1-alpha)(1-y) p^g (-ln(1-p)),
    // with ln p = -softplus(-x) and ln(1-p) = -softplus(x) for stability
    let one_minus_y = tape.add_scalar(tape.neg(y), 1.0);
    let ln_p = tape.neg(tape.softplus(tape.neg(logits)));
    let ln_q = tape.neg(tape.softplus(logits));
    let pos = tape.mul(
        tape.mul(y, tape.square(tape.add_scalar(tape.neg(p), 1.0))),
        tape.neg(ln_p),
    );
    let neg = tape.mul(tape.mul(one_minus_y, tape.square(p)), tape.neg(ln_q));
    let _ = FOCAL_GAMMA; // exponent 2 realized via square()
    let focal = tape.mean_all(tape.add(tape.scale(pos, FOCAL_ALPHA), tape.scale(neg, 1.0 - FOCAL_ALPHA)));
    Ok((bce, dice, focal))
}

/// Semantic terms: cross-entropy (in the BCE slot), mean one-vs-rest Dice,
/// focal on the true-class probability.
pub fn seg_terms_semantic(
    tape: &Tape,
    logits: Var,
    gt: &Array3<u8>,
    k_cls: usize,
) -> Result<(Var, Var, Var)> {
    let shape = tape.shape(logits);
    let (t, h, w) = gt.dim();
    if shape != vec![t, k_cls, h, w] {
        return Err(Error::shape(format!(
            "seg_loss: logits {shape:?} vs gt ({t},{k_cls},{h},{w})"
        )));
    }
    if gt.iter().any(|&v| v as usize >= k_cls) {
        return Err(Error::invalid("seg_loss: semantic gt label out of range"));
    }
    // softmax over the class axis via permute to put classes last
    let perm = tape.permute(logits, &[0, 2, 3, 1]); // (T, H, W, K)
    let probs = tape.softmax(perm);
    let mut onehot = ArrayD::<f64>::zeros(IxDyn(&[t, h, w, k_cls]));
    for ti in 0..t {
        for i in 0..h {
            for j in 0..w {
                onehot[[ti, i, j, gt[[ti, i, j]] as usize]] = 1.0;
            }
        }
    }
    let y = tape.constant(onehot);
    let ln_probs = tape.ln(tape.add_scalar(probs, 1e-12));
    let ce = tape.neg(tape.mean_all(tape.sum_axis(tape.mul(y, ln_probs), 3)));
    let inter = tape.sum_all(tape.mul(probs, y));
    let num = tape.add_scalar(tape.scale(inter, 2.0), DICE_SMOOTH);
    let den = tape.add_scalar(tape.add(tape.sum_all(probs), tape.sum_all(y)), DICE_SMOOTH);
    let dice = tape.add_scalar(tape.neg(tape.div(num, den)), 1.0);
    let p_true = tape.sum_axis(tape.mul(probs, y), 3);
    let focal_map = tape.mul(
        tape.square(tape.add_scalar(tape.neg(p_true), 1.0)),
        tape.neg(tape.ln(tape.add_scalar(p_true, 1e-12))),
    );
    let focal = tape.scale(tape.mean_all(focal_map), FOCAL_ALPHA);
    Ok((ce, dice, focal))
}

/// Eq. 18: weighted sum of the three segmentation terms.
pub fn seg_loss(
    tape: &Tape,
    cfg: &DecoderConfig,
    logits: Var,
    gt: &Array3<u8>,
    w: &LossWeights,
) -> Result<Var> {
    w.validate()?;
    let (a, d, f) = match cfg.head {
        SegHead::Binary => seg_terms_binary(tape, logits, gt)?,
        SegHead::Semantic(k) => seg_terms_semantic(tape, logits, gt, k)?,
    };
    Ok(tape.add(
        tape.add(tape.scale(a, w.bce), tape.scale(d, w.dice)),
        tape.scale(f, w.focal),
    ))
}

/// Eq. 19: L_Seg + lambda_cf L_cf + lambda_CDCL sum_pair lambda_pair L_pair.
/// Disabled components pass None and contribute zero.
pub fn total_loss(
    tape: &Tape,
    l_seg: Var,
    l_cf: Option<Var>,
    l_v_a: Option<Var>,
    l_v_l: Option<Var>,
    l_a_l: Option<Var>,
    w: &LossWeights,
) -> Var {
    let mut total = l_seg;
    if let Some(cf) = l_cf {
        total = tape.add(total, tape.scale(cf, w.cf));
    }
    let mut cdcl_terms = Vec::new();
    if let Some(va) = l_v_a {
        cdcl_terms.push(tape.scale(va, w.v_a));
    }
    if let Some(vl) = l_v_l {
        cdcl_terms.push(tape.scale(vl, w.v_l));
    }
    if let Some(al) = l_a_l {
        cdcl_terms.push(tape.scale(al, w.a_l));
    }
    for term in cdcl_terms {
        total = tape.add(total, tape.scale(term, w.cdcl));
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference_grad, max_rel_err};
    use ndarray::Array4;
    use rand::SeedableRng;

    fn small_setup(head: SegHead, use_text: bool) -> (ParamStore, DecoderConfig) {
        let cfg = DecoderConfig {
            num_queries: 4,
            d_q: 16,
            d_pix: 8,
            head,
            use_text,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        init_decoder(&mut store, &mut rng, &cfg, 6, 3, 5, 7);
        (store, cfg)
    }

    fn rand4(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        nn::randn(rng, shape)
    }

    #[test]
    fn binary_and_semantic_shape_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (store, cfg) = small_setup(SegHead::Binary, false);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let pix = tape.constant(rand4(&mut rng, &[5, 3, 8, 8]));
        let tok = tape.constant(rand4(&mut rng, &[5, 6, 2, 2]));
        let aud = tape.constant(rand4(&mut rng, &[5, 5]));
        let out = decode(&tape, &bound, &cfg, pix, tok, aud, None, (32, 32)).unwrap();
        assert_eq!(tape.shape(out), vec![5, 32, 32]);

        let (store_s, cfg_s) = small_setup(SegHead::Semantic(13), false);
        let tape2 = Tape::new();
        let bound2 = store_s.bind(&tape2);
        let pix2 = tape2.constant(rand4(&mut rng, &[2, 3, 8, 8]));
        let tok2 = tape2.constant(rand4(&mut rng, &[2, 6, 2, 2]));
        let aud2 = tape2.constant(rand4(&mut rng, &[2, 5]));
        let out2 = decode(&tape2, &bound2, &cfg_s, pix2, tok2, aud2, None, (32, 32)).unwrap();
        assert_eq!(tape2.shape(out2), vec![2, 13, 32, 32]);
    }

    #[test]
    fn audio_path_is_live() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (store, cfg) = small_setup(SegHead::Binary, false);
        let pix_d = rand4(&mut rng, &[2, 3, 8, 8]);
        let tok_d = rand4(&mut rng, &[2, 6, 2, 2]);
        let aud_d = rand4(&mut rng, &[2, 5]);
        let run = |aud_data: &ArrayD<f64>| {
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let pix = tape.constant(pix_d.clone());
            let tok = tape.constant(tok_d.clone());
            let aud = tape.constant(aud_data.clone());
            let out = decode(&tape, &bound, &cfg, pix, tok, aud, None, (32, 32)).unwrap();
            tape.value(out)
        };
        let with_audio = run(&aud_d);
        let zero_audio = run(&ArrayD::zeros(IxDyn(&[2, 5])));
        let diff: f64 = with_audio
            .iter()
            .zip(zero_audio.iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-6, "audio conditioning has no effect");
    }

    #[test]
    fn text_conditioning_errors_and_effects() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (store, cfg) = small_setup(SegHead::Binary, true);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let pix = tape.constant(rand4(&mut rng, &[1, 3, 8, 8]));
        let tok = tape.constant(rand4(&mut rng, &[1, 6, 2, 2]));
        let aud = tape.constant(rand4(&mut rng, &[1, 5]));
        assert!(decode(&tape, &bound, &cfg, pix, tok, aud, None, (32, 32)).is_err());
        let z = tape.constant(rand4(&mut rng, &[3, 7]));
        let out = decode(&tape, &bound, &cfg, pix, tok, aud, Some(z), (32, 32)).unwrap();
        assert_eq!(tape.shape(out), vec![1, 32, 32]);
    }

    #[test]
    fn seg_loss_saturated_predictions() {
        let tape = Tape::new();
        let (_, cfg) = small_setup(SegHead::Binary, false);
        // large enough that the Dice smooth constant is negligible
        let n = 128;
        let gt = Array3::from_shape_fn((1, n, n), |(_, i, j)| ((i + j) % 2) as u8);
        let mut logits = ArrayD::<f64>::zeros(IxDyn(&[1, n, n]));
        for i in 0..n {
            for j in 0..n {
                logits[[0, i, j]] = if gt[[0, i, j]] == 1 { 20.0 } else { -20.0 };
            }
        }
        let lv = tape.constant(logits.clone());
        let (bce, dice, _) = seg_terms_binary(&tape, lv, &gt).unwrap();
        assert!(tape.scalar_value(bce) < 1e-6);
        assert!(tape.scalar_value(dice) < 1e-4);
        // fully inverted: dice within 1e-4 of 1
        let inv = tape.constant(logits.mapv(|v| -v));
        let (_, dice_inv, _) = seg_terms_binary(&tape, inv, &gt).unwrap();
        assert!((tape.scalar_value(dice_inv) - 1.0).abs() < 1e-4);
        // weight validation and ranges
        assert!(LossWeights { bce: 0.0, dice: 0.0, focal: 0.0, ..Default::default() }
            .validate()
            .is_err());
        let _ = cfg;
    }

    #[test]
    fn seg_loss_single_pixel_fixture() {
        // gt = 1, p = 0.5 (logit 0): BCE = ln 2, Focal = 0.25 * 0.25 * ln 2
        let tape = Tape::new();
        let gt = Array3::from_elem((1, 1, 1), 1u8);
        let lv = tape.constant(ArrayD::zeros(IxDyn(&[1, 1, 1])));
        let (bce, _, focal) = seg_terms_binary(&tape, lv, &gt).unwrap();
        assert!((tape.scalar_value(bce) - 2f64.ln()).abs() < 1e-12);
        assert!((tape.scalar_value(focal) - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn seg_loss_rejects_bad_gt() {
        let tape = Tape::new();
        let cfg = DecoderConfig::default();
        let gt = Array3::from_elem((1, 2, 2), 3u8);
        let lv = tape.constant(ArrayD::zeros(IxDyn(&[1, 2, 2])));
        assert!(seg_loss(&tape, &cfg, lv, &gt, &LossWeights::default()).is_err());
        let cfg_s = DecoderConfig { head: SegHead::Semantic(3), ..Default::default() };
        let lv_s = tape.constant(ArrayD::zeros(IxDyn(&[1, 3, 2, 2])));
        assert!(seg_loss(&tape, &cfg_s, lv_s, &gt, &LossWeights::default()).is_err());
    }

    #[test]
    fn seg_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = DecoderConfig::default();
        let w = LossWeights::default();
        let gt = Array3::from_shape_fn((1, 8, 8), |(_, i, j)| ((i * 3 + j) % 2) as u8);
        let logits0 = nn::randn(&mut rng, &[1, 8, 8]);
        let eval = |x: &ArrayD<f64>| -> (f64, Option<ArrayD<f64>>) {
            let tape = Tape::new();
            let lv = tape.input(x.clone());
            let loss = seg_loss(&tape, &cfg, lv, &gt, &w).unwrap();
            let v = tape.scalar_value(loss);
            tape.backward(loss);
            (v, tape.grad(lv))
        };
        let (_, grad) = eval(&logits0);
        let mut f = |xs: &[ArrayD<f64>]| eval(&xs[0]).0;
        let fd = finite_difference_grad(&mut f, &[logits0.clone()], 0, 1e-6);
        let err = max_rel_err(&grad.unwrap(), &fd);
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn semantic_loss_prefers_correct_class() {
        let tape = Tape::new();
        let gt = Array3::from_shape_fn((1, 2, 2), |(_, i, _)| i as u8);
        let mut good = Array4::<f64>::zeros((1, 2, 2, 2));
        let mut bad = Array4::<f64>::zeros((1, 2, 2, 2));
        for i in 0..2 {
            for j in 0..2 {
                good[[0, gt[[0, i, j]] as usize, i, j]] = 8.0;
                bad[[0, 1 - gt[[0, i, j]] as usize, i, j]] = 8.0;
            }
        }
        let cfg = DecoderConfig { head: SegHead::Semantic(2), ..Default::default() };
        let w = LossWeights::default();
        let lg = seg_loss(&tape, &cfg, tape.constant(good.into_dyn()), &gt, &w).unwrap();
        let lb = seg_loss(&tape, &cfg, tape.constant(bad.into_dyn()), &gt, &w).unwrap();
        assert!(tape.scalar_value(lg) < tape.scalar_value(lb));
    }

    #[test]
    fn total_loss_linearity_and_fixture() {
        let tape = Tape::new();
        let seg = tape.scalar(1.0);
        let cf = tape.scalar(2.0);
        let va = tape.scalar(3.0);
        // fixture: 1 + 0.1*2 + 0.5*(1*3) = 2.7
        let w = LossWeights { cf: 0.1, cdcl: 0.5, v_a: 1.0, v_l: 0.0, a_l: 0.0, ..Default::default() };
        let total = total_loss(&tape, seg, Some(cf), Some(va), None, None, &w);
        assert!((tape.scalar_value(total) - 2.7).abs() < 1e-12);
        // all auxiliary weights zero: baseline reduction
        let w0 = LossWeights { cf: 0.0, cdcl: 0.0, ..Default::default() };
        let base = total_loss(&tape, seg, Some(cf), Some(va), None, None, &w0);
        assert_eq!(tape.scalar_value(base), 1.0);
        // doubling lambda_cf doubles the cf contribution
        let w2 = LossWeights { cf: 0.2, cdcl: 0.5, v_a: 1.0, v_l: 0.0, a_l: 0.0, ..Default::default() };
        let t2 = total_loss(&tape, seg, Some(cf), Some(va), None, None, &w2);
        let cf_contrib_1 = tape.scalar_value(total) - 1.0 - 1.5;
        let cf_contrib_2 = tape.scalar_value(t2) - 1.0 - 1.5;
        assert!((cf_contrib_2 - 2.0 * cf_contrib_1).abs() < 1e-12);
    }

    #[test]
    fn decode_gradients_reach_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (mut store, cfg) = small_setup(SegHead::Binary, false);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let pix = tape.constant(rand4(&mut rng, &[1, 3, 8, 8]));
        let tok = tape.constant(rand4(&mut rng, &[1, 6, 2, 2]));
        let aud = tape.constant(rand4(&mut rng, &[1, 5]));
        let out = decode(&tape, &bound, &cfg, pix, tok, aud, None, (32, 32)).unwrap();
        let gt = Array3::from_elem((1, 32, 32), 1u8);
        let loss = seg_loss(&tape, &cfg, out, &gt, &LossWeights::default()).unwrap();
        tape.backward(loss);
        let g = tape.grad(bound.var("dec.queries")).unwrap();
        assert!(g.iter().any(|&v| v != 0.0));
        // a step reduces the loss on this fixture
        let before = tape.scalar_value(loss);
        store.adamw_step(&tape, &bound, 1e-2, 0.0);
        let tape2 = Tape::new();
        let bound2 = store.bind(&tape2);
        let pix2 = tape2.constant(rand4(&mut ChaCha8Rng::seed_from_u64(6), &[1, 3, 8, 8]));
        let tok2 = tape2.constant(tape.value(tok));
        let aud2 = tape2.constant(tape.value(aud));
        let out2 = decode(&tape2, &bound2, &cfg, pix2, tok2, aud2, None, (32, 32)).unwrap();
        let loss2 = seg_loss(&tape2, &cfg, out2, &gt, &LossWeights::default()).unwrap();
        assert!(tape2.scalar_value(loss2) < before);
    }
}
