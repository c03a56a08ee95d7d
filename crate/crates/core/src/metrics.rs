//! Segmentation quality metrics (J, F, J&F) and corpus complexity analysis.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data_synth::RawClip;
use crate::encoders::{mel_frontend, MelConfig};
use crate::error::{Error, Result};

pub const DEFAULT_BETA2: f64 = 0.3;

/// Jaccard index (IoU) in [0, 100]. `empty ∪ empty` counts as a perfect 100.
pub fn jaccard(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape(format!(
            "jaccard: pred {:?} vs gt {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let (p, g) = (p != 0, g != 0);
        inter += (p && g) as u64;
        union += (p || g) as u64;
    }
    if union == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * inter as f64 / union as f64)
}

/// Precision/recall F-measure in [0, 100] with the benchmark's beta^2 = 0.3.
pub fn fscore(pred: &Array2<u8>, gt: &Array2<u8>, beta2: f64) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape(format!(
            "fscore: pred {:?} vs gt {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fnn = 0u64;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let (p, g) = (p != 0, g != 0);
        tp += (p && g) as u64;
        fp += (p && !g) as u64;
        fnn += (!p && g) as u64;
    }
    if tp + fp == 0 && tp + fnn == 0 {
        return Ok(100.0); // both empty
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let prec = tp as f64 / (tp + fp) as f64;
    let rec = tp as f64 / (tp + fnn) as f64;
    Ok(100.0 * (1.0 + beta2) * prec * rec / (beta2 * prec + rec))
}

/// Class-averaged Jaccard for label maps (mIoU over classes present in gt,
/// background class 0 excluded).
pub fn semantic_jaccard(pred: &Array2<u8>, gt: &Array2<u8>, num_classes: usize) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape("semantic_jaccard: shape mismatch"));
    }
    let mut scores = Vec::new();
    for c in 1..num_classes as u8 {
        if !gt.iter().any(|&g| g == c) {
            continue;
        }
        let p: Array2<u8> = pred.mapv(|v| (v == c) as u8);
        let g: Array2<u8> = gt.mapv(|v| (v == c) as u8);
        scores.push(jaccard(&p, &g)?);
    }
    if scores.is_empty() {
        return Ok(100.0);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipScore {
    pub clip_id: String,
    pub j: f64,
    pub f: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub j: f64,
    pub f: f64,
    pub jf: f64,
    pub per_clip: Vec<ClipScore>,
    /// Per-class J in semantic mode.
    pub per_class: Option<Vec<(u8, f64)>>,
}

impl EvalReport {
    pub fn from_clips(per_clip: Vec<ClipScore>, per_class: Option<Vec<(u8, f64)>>) -> Self {
        let n = per_clip.len().max(1) as f64;
        let j = per_clip.iter().map(|c| c.j).sum::<f64>() / n;
        let f = per_clip.iter().map(|c| c.f).sum::<f64>() / n;
        EvalReport { j, f, jf: 0.5 * (j + f), per_clip, per_class }
    }

    /// Structured text serialization: one row per clip, then a summary block.
    /// Columns: clip_id J F.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# clip_id J F\n");
        for c in &self.per_clip {
            out.push_str(&format!("{} {:.4} {:.4}\n", c.clip_id, c.j, c.f));
        }
        out.push_str("# summary\n");
        out.push_str(&format!("J {:.4}\nF {:.4}\nJ&F {:.4}\n", self.j, self.f, self.jf));
        if let Some(pc) = &self.per_class {
            out.push_str("# per_class J\n");
            for (c, j) in pc {
                out.push_str(&format!("class_{c} {j:.4}\n"));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipComplexity {
    pub clip_id: String,
    pub visual_mse: f64,
    pub audio_melchange: f64,
    /// 0 = low/low, 1 = high-visual/low-audio, 2 = low-visual/high-audio, 3 = high/high.
    pub quadrant: u8,
}

/// Mean inter-frame pixel MSE and mean inter-frame Mel change per clip, with
/// quadrant assignment by corpus-median thresholds.
pub fn corpus_complexity(clips: &[RawClip]) -> Result<Vec<ClipComplexity>> {
    let mel_cfg = MelConfig::default();
    let mut rows: Vec<(String, f64, f64)> = Vec::with_capacity(clips.len());
    for clip in clips {
        let t = clip.frames.len();
        if t < 2 {
            return Err(Error::invalid(format!(
                "corpus_complexity: clip {} has T={t} < 2",
                clip.id
            )));
        }
        let mut vmse = 0.0;
        for w in clip.frames.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            let mut acc = 0.0;
            for (&x, &y) in a.iter().zip(b.iter()) {
                let d = x as f64 / 255.0 - y as f64 / 255.0;
                acc += d * d;
            }
            vmse += acc / a.len() as f64;
        }
        vmse /= (t - 1) as f64;

        let mel = mel_frontend(&clip.waveform, clip.audio_sr, t, &mel_cfg)?;
        // consecutive Mel time-frames across the whole clip
        let frames_per_win = mel.shape()[1];
        let bands = mel.shape()[2];
        let mut mchange = 0.0;
        let mut count = 0usize;
        let flat: Vec<Vec<f64>> = (0..t)
            .flat_map(|ti| {
                (0..frames_per_win).map(move |m| (ti, m))
            })
            .map(|(ti, m)| (0..bands).map(|b| mel[[ti, m, b]]).collect())
            .collect();
        for w in flat.windows(2) {
            let l2: f64 = w[0]
                .iter()
                .zip(w[1].iter())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            mchange += l2;
            count += 1;
        }
        mchange /= count.max(1) as f64;
        rows.push((clip.id.clone(), vmse, mchange));
    }

    let median = |mut v: Vec<f64>| -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = v.len();
        if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
    };
    let med_v = median(rows.iter().map(|r| r.1).collect());
    let med_a = median(rows.iter().map(|r| r.2).collect());
    Ok(rows
        .into_iter()
        .map(|(clip_id, visual_mse, audio_melchange)| {
            let hv = visual_mse >= med_v;
            let ha = audio_melchange >= med_a;
            let quadrant = match (hv, ha) {
                (false, false) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (true, true) => 3,
            };
            ClipComplexity { clip_id, visual_mse, audio_melchange, quadrant }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn mask(rows: &[[u8; 4]]) -> Array2<u8> {
        arr2(&[rows[0], rows[1], rows[2], rows[3]])
    }

    #[test]
    fn jaccard_identical_is_100() {
        let m = mask(&[[1, 1, 0, 0]; 4]);
        assert_eq!(jaccard(&m, &m).unwrap(), 100.0);
    }

    #[test]
    fn jaccard_disjoint_is_0() {
        let a = mask(&[[1, 0, 0, 0]; 4]);
        let b = mask(&[[0, 1, 0, 0]; 4]);
        assert_eq!(jaccard(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn jaccard_half_overlap_on_8x8_fixture() {
        // gt = left two columns make "half" of a 4-wide strip; use an 8x8 grid
        let mut gt = Array2::<u8>::zeros((8, 8));
        let mut pred = Array2::<u8>::zeros((8, 8));
        for i in 0..8 {
            for j in 0..4 {
                gt[[i, j]] = 1;
            }
            for j in 0..2 {
                pred[[i, j]] = 1;
            }
        }
        // pred = left half of gt: intersection 16, union 32
        assert!((jaccard(&pred, &gt).unwrap() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn jaccard_empty_union_is_100() {
        let z = Array2::<u8>::zeros((4, 4));
        assert_eq!(jaccard(&z, &z).unwrap(), 100.0);
    }

    #[test]
    fn fscore_hand_value() {
        // P = 1, R = 0.5: gt is two columns, pred the first one
        let mut gt = Array2::<u8>::zeros((4, 4));
        let mut pred = Array2::<u8>::zeros((4, 4));
        for i in 0..4 {
            gt[[i, 0]] = 1;
            gt[[i, 1]] = 1;
            pred[[i, 0]] = 1;
        }
        let f = fscore(&pred, &gt, 0.3).unwrap();
        assert!((f - 81.25).abs() < 1e-9, "got {f}");
    }

    #[test]
    fn fscore_boundaries() {
        let z = Array2::<u8>::zeros((4, 4));
        let m = mask(&[[1, 0, 0, 0]; 4]);
        assert_eq!(fscore(&m, &m, 0.3).unwrap(), 100.0);
        assert_eq!(fscore(&z, &m, 0.3).unwrap(), 0.0);
        assert_eq!(fscore(&z, &z, 0.3).unwrap(), 100.0);
    }

    #[test]
    fn jaccard_symmetric_fscore_not() {
        let mut a = Array2::<u8>::zeros((4, 4));
        let mut b = Array2::<u8>::zeros((4, 4));
        for i in 0..4 {
            a[[i, 0]] = 1;
            b[[i, 0]] = 1;
            b[[i, 1]] = 1;
        }
        assert_eq!(jaccard(&a, &b).unwrap(), jaccard(&b, &a).unwrap());
        assert_ne!(fscore(&a, &b, 0.3).unwrap(), fscore(&b, &a, 0.3).unwrap());
    }

    #[test]
    fn report_jf_is_mean() {
        let report = EvalReport::from_clips(
            vec![
                ClipScore { clip_id: "a".into(), j: 80.0, f: 90.0 },
                ClipScore { clip_id: "b".into(), j: 60.0, f: 70.0 },
            ],
            None,
        );
        assert!((report.j - 70.0).abs() < 1e-12);
        assert!((report.f - 80.0).abs() < 1e-12);
        assert!((report.jf - 75.0).abs() < 1e-12);
    }
}
