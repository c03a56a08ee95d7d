//! Experiment harness: configuration, model assembly, the training loop,
//! checkpointing, evaluation, ablation grids, hyperparameter sweeps, and
//! embedding export.
//!
//! Everything is driven by one `ExperimentConfig` value (JSON on disk, strict
//! schema). A run is deterministic given the config and seed on one device:
//! a single ChaCha8 stream drives shuffling and all stochastic training
//! draws, and its full state travels through checkpoints so a mid-epoch
//! resume replays the uninterrupted trajectory exactly.

use std::fmt;
use std::fs;
use std::io::{Cursor, Read as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::cdcl::{
    self, gaussian_summary, partition_by_audio_anchor, ContrastConfig, GaussianSummary,
};
use crate::counterfactual::{
    cf_loss, generate_pool, init_denoiser, CounterfactualConfig, DenoiserConfig,
    DiffusionSchedule, MixingDim,
};
use crate::data_synth::{
    generate_clip, load_split, pair_swap, save_clip, save_index, ClipSpec, IndexEntry, RawClip,
    ShapeClass, SourceSpec, Split, Subset, ToneSpec, Trajectory, NUM_CONCEPTS, NUM_TIMBRES,
};
use crate::encoders::{
    encode_audio, encode_visual, frames_to_tensor, init_audio_encoder, init_visual_encoder,
    mel_frontend, EncoderConfig,
};
use crate::error::{Error, Result};
use crate::implicit_text::{
    fuse_texts, gate_concat, init_gate_concat, invert_text, seeded_projection, ConceptCodebook,
    ImplicitTextBundle, Modality, TEXT_DIM,
};
use crate::metrics::{fscore, jaccard, semantic_jaccard, ClipScore, EvalReport, DEFAULT_BETA2};
use crate::nn::{self, Bound, ParamStore};
use crate::seg_decoder::{init_decoder, seg_loss, total_loss, DecoderConfig, LossWeights, SegHead};
use crate::temporal_context::{apply_granularity, init_channel_attention, segment_windows, GranularityConfig};

pub const CONFIG_VERSION: u32 = 1;
const CKPT_MAGIC: &[u8; 4] = b"AVCP";
const CKPT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Where training clips come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    /// Procedurally generated clips (see `data_synth`).
    Synthetic {
        num_clips: usize,
        num_frames: usize,
        /// Sources per clip are drawn from 1..=max_sources.
        max_sources: usize,
        /// Emit semantic label maps instead of binary masks.
        semantic: bool,
        /// Sources drop in and out per frame (masks then depend on which
        /// sources currently sound, not just on what is visible).
        #[serde(default)]
        intermittent: bool,
        /// Base seed for clip generation (clip i uses seed + i).
        seed: u64,
    },
    /// An AVSBench-layout directory on disk.
    Directory {
        root: PathBuf,
        split: Split,
        /// Expected frames per clip (model shapes depend on it).
        num_frames: usize,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            num_clips: 16,
            num_frames: 5,
            max_sources: 1,
            semantic: false,
            intermittent: false,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn num_frames(&self) -> usize {
        match self {
            DataConfig::Synthetic { num_frames, .. } => *num_frames,
            DataConfig::Directory { num_frames, .. } => *num_frames,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    /// Linear decay target over the planned step budget (None = constant lr).
    pub lr_final: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    /// Evaluate every n epochs (0 = final epoch only).
    pub eval_every: usize,
    /// Stop early once an evaluation reaches this J&F.
    pub target_jf: Option<f64>,
    /// Hard cap on optimizer steps (None = epochs decide).
    pub max_steps: Option<usize>,
    /// Save a checkpoint every n optimizer steps (for mid-run snapshots).
    pub checkpoint_every_steps: Option<usize>,
    /// Fraction of clips whose audio is swapped with another clip's
    /// (the Pair Swap baseline strategy); 0 disables.
    pub pair_swap_fraction: f64,
}

impl OptimConfig {
    /// Learning rate for the step about to run (`done` steps completed),
    /// linearly interpolated towards `lr_final` over the planned budget.
    pub fn lr_at(&self, done: usize, planned: usize) -> f64 {
        match self.lr_final {
            Some(end) if planned > 0 => {
                let frac = (done as f64 / planned as f64).min(1.0);
                self.lr + (end - self.lr) * frac
            }
            _ => self.lr,
        }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-4,
            lr_final: None,
            batch_size: 8,
            epochs: 40,
            weight_decay: 1e-4,
            eval_every: 1,
            target_jf: None,
            max_steps: None,
            checkpoint_every_steps: None,
            pair_swap_fraction: 0.0,
        }
    }
}

/// Component switches. MIT = implicit-text bridging, SC = counterfactual
/// text generation, CDCL = distribution contrastive learning; the pair_*
/// flags select which contrast pairs contribute when CDCL is on.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub mit: bool,
    pub sc: bool,
    pub cdcl: bool,
    pub pair_v_a: bool,
    pub pair_v_l: bool,
    pub pair_a_l: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles { mit: true, sc: true, cdcl: true, pair_v_a: true, pair_v_l: true, pair_a_l: true }
    }
}

/// Implicit-text and denoiser sizing knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextConfig {
    /// Pseudo-tokens per modality per granularity (k^t).
    pub k_t: usize,
    pub inversion_steps: usize,
    pub inversion_lr: f64,
    pub n_distractors: usize,
    pub codebook_seed: u64,
    pub denoiser_hidden: usize,
    /// Length of the diffusion schedule.
    pub diffusion_steps: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            k_t: 4,
            inversion_steps: 200,
            inversion_lr: 0.05,
            n_distractors: 20,
            codebook_seed: 7,
            denoiser_hidden: 64,
            diffusion_steps: 1000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub granularity: GranularityConfig,
    pub counterfactual: CounterfactualConfig,
    pub contrast: ContrastConfig,
    pub decoder: DecoderConfig,
    pub weights: LossWeights,
    pub optim: OptimConfig,
    pub toggles: Toggles,
    pub text: TextConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} != supported {CONFIG_VERSION}",
                self.version
            )));
        }
        if self.toggles.sc && !self.toggles.mit {
            return Err(Error::Config(
                "counterfactual generation (sc) requires implicit text (mit)".into(),
            ));
        }
        let (h, w) = self.encoder.resolution;
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::Config("encoder resolution must be a positive multiple of 32".into()));
        }
        if self.optim.batch_size == 0 || self.optim.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be >= 1".into()));
        }
        if !(self.optim.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if matches!(self.optim.lr_final, Some(lr) if !(lr > 0.0)) {
            return Err(Error::Config("final learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.optim.pair_swap_fraction) {
            return Err(Error::Config("pair_swap_fraction must be in [0,1]".into()));
        }
        if self.text.k_t == 0 || self.text.diffusion_steps < 2 {
            return Err(Error::Config("k_t >= 1 and diffusion_steps >= 2 required".into()));
        }
        if self.data.num_frames() == 0 {
            return Err(Error::Config("num_frames must be >= 1".into()));
        }
        if let DataConfig::Synthetic { num_clips, max_sources, semantic, .. } = &self.data {
            if *num_clips == 0 || *max_sources == 0 {
                return Err(Error::Config("num_clips and max_sources must be >= 1".into()));
            }
            match (self.decoder.head, semantic) {
                (SegHead::Binary, false) => {}
                (SegHead::Semantic(k), true) => {
                    if k < NUM_CONCEPTS + 1 {
                        return Err(Error::Config(format!(
                            "semantic head needs >= {} classes",
                            NUM_CONCEPTS + 1
                        )));
                    }
                }
                _ => {
                    return Err(Error::Config(
                        "decoder head and data semantic flag disagree".into(),
                    ))
                }
            }
        }
        self.granularity.validate()?;
        self.contrast.validate()?;
        self.weights.validate()?;
        let schedule = DiffusionSchedule::linear(self.text.diffusion_steps)?;
        self.counterfactual.validate(&schedule)?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// SHA-256 of the canonical JSON form; checkpoints carry it and refuse to
/// load under a different config.
pub fn config_hash(cfg: &ExperimentConfig) -> [u8; 32] {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    let mut out = [0u8; 32];
    out.copy_from_slice(&Sha256::digest(&bytes));
    out
}

// ---------------------------------------------------------------------------
// Model assembly
// ---------------------------------------------------------------------------

/// Composite-text token count: video + segment + per-frame visual token sets
/// plus the audio token set, k_t rows each.
pub fn z_token_count(num_frames: usize, k_t: usize) -> usize {
    (3 + num_frames) * k_t
}

pub struct Model {
    pub store: ParamStore,
    pub codebook_v: ConceptCodebook,
    pub codebook_a: ConceptCodebook,
    pub schedule: DiffusionSchedule,
    pub num_frames: usize,
}

pub fn init_model(cfg: &ExperimentConfig) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d6f_64656c);
    let mut store = ParamStore::new();
    init_visual_encoder(&mut store, &mut rng, &cfg.encoder);
    init_audio_encoder(&mut store, &mut rng, &cfg.encoder);
    let (h, w) = cfg.encoder.resolution;
    init_channel_attention(&mut store, &mut rng, "ctx", (h / 16) * (w / 16));
    let ch = cfg.encoder.stage_channels();
    init_decoder(&mut store, &mut rng, &cfg.decoder, ch[2], ch[0], cfg.encoder.audio_dim, TEXT_DIM);
    init_gate_concat(&mut store, &mut rng, TEXT_DIM);
    let lz = z_token_count(cfg.data.num_frames(), cfg.text.k_t);
    store.insert("mit.fuse_w", nn::randn(&mut rng, &[lz]) * 0.01);
    init_denoiser(
        &mut store,
        &mut rng,
        &DenoiserConfig {
            latent_dim: lz * TEXT_DIM,
            hidden: cfg.text.denoiser_hidden,
            cond_dim: TEXT_DIM,
        },
    );
    nn::linear_init(&mut store, &mut rng, "cdcl.proj_v", cfg.encoder.pooled_dim, cfg.contrast.d_e);
    nn::linear_init(&mut store, &mut rng, "cdcl.proj_a", cfg.encoder.audio_dim, cfg.contrast.d_e);
    nn::linear_init(&mut store, &mut rng, "cdcl.proj_t", TEXT_DIM, cfg.contrast.d_e);
    Ok(Model {
        store,
        codebook_v: ConceptCodebook::build(
            Modality::Visual,
            cfg.text.n_distractors,
            TEXT_DIM,
            cfg.text.codebook_seed,
        )?,
        codebook_a: ConceptCodebook::build(
            Modality::Audio,
            cfg.text.n_distractors,
            TEXT_DIM,
            cfg.text.codebook_seed,
        )?,
        schedule: DiffusionSchedule::linear(cfg.text.diffusion_steps)?,
        num_frames: cfg.data.num_frames(),
    })
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// A random scene: 1..=max_sources sources with distinct-ish concepts,
/// linear trajectories, and concept-keyed tone frequencies.
pub fn random_clip_spec(
    seed: u64,
    num_frames: usize,
    resolution: (usize, usize),
    max_sources: usize,
    semantic: bool,
    intermittent: bool,
) -> ClipSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_src = rng.gen_range(1..=max_sources);
    let shapes = [ShapeClass::Circle, ShapeClass::Square, ShapeClass::Triangle, ShapeClass::Bar];
    let mut sources = Vec::with_capacity(n_src);
    for s in 0..n_src {
        let shape_class = shapes[rng.gen_range(0..shapes.len())];
        let timbre = rng.gen_range(0..NUM_TIMBRES) as u8;
        let concept = shape_class.index() * NUM_TIMBRES + timbre as usize;
        // one tone per concept, spread over ~2.3 octaves
        let freq_hz = 220.0 * (1.0 + 0.35 * concept as f64);
        // keep multiple sources in separate horizontal bands; single sources
        // may be large, crowded scenes use smaller objects
        let size = if n_src == 1 {
            rng.gen_range(0.20..0.34)
        } else {
            rng.gen_range(0.10..0.18)
        };
        // leave room for the object extent plus per-frame drift
        let margin = size + 0.001 + 0.02 * num_frames as f64;
        let band = (s as f64 + 0.5) / n_src as f64;
        let start = (
            (band + rng.gen_range(-0.08..0.08)).clamp(margin, 1.0 - margin),
            rng.gen_range(0.3f64..0.7).clamp(margin, 1.0 - margin),
        );
        sources.push(SourceSpec {
            shape_class,
            tone: ToneSpec { freq_hz, timbre },
            trajectory: Trajectory {
                start,
                velocity: (rng.gen_range(-0.02..0.02), rng.gen_range(-0.02..0.02)),
                size,
            },
            active_frames: if intermittent {
                // at least one active frame, sampled per source
                let mut active: Vec<bool> = (0..num_frames).map(|_| rng.gen_bool(0.6)).collect();
                if active.iter().all(|&a| !a) {
                    let i = rng.gen_range(0..num_frames);
                    active[i] = true;
                }
                active
            } else {
                vec![true; num_frames]
            },
            loudness: rng.gen_range(0.5..0.9),
        });
    }
    ClipSpec {
        seed,
        num_frames,
        resolution,
        sources,
        noise_sources: vec![],
        audio_sr: 16000,
        semantic,
    }
}

/// Materialize the dataset described by `data` (clip resolution follows the
/// encoder config for synthetic data).
pub fn build_dataset(data: &DataConfig, resolution: (usize, usize)) -> Result<Vec<RawClip>> {
    match data {
        DataConfig::Synthetic { num_clips, num_frames, max_sources, semantic, intermittent, seed } => {
            (0..*num_clips)
                .map(|i| {
                    generate_clip(&random_clip_spec(
                        seed + i as u64,
                        *num_frames,
                        resolution,
                        *max_sources,
                        *semantic,
                        *intermittent,
                    ))
                })
                .collect()
        }
        DataConfig::Directory { root, split, num_frames } => {
            let (clips, errors) = load_split(root, *split)?;
            if clips.is_empty() {
                return Err(Error::Dataset(format!(
                    "no loadable clips under {} ({} failed)",
                    root.display(),
                    errors.len()
                )));
            }
            for c in &clips {
                if c.frames.len() != *num_frames {
                    return Err(Error::Dataset(format!(
                        "clip {} has {} frames, config expects {num_frames}",
                        c.id,
                        c.frames.len()
                    )));
                }
            }
            Ok(clips)
        }
    }
}

/// Generate a synthetic dataset and write it out in the AVSBench layout.
pub fn generate_dataset_to_dir(
    data: &DataConfig,
    resolution: (usize, usize),
    root: &Path,
    split: Split,
) -> Result<usize> {
    let clips = build_dataset(data, resolution)?;
    let subset = match data {
        DataConfig::Synthetic { semantic: true, .. } => Subset::Avss,
        DataConfig::Synthetic { max_sources, .. } if *max_sources > 1 => Subset::M3,
        _ => Subset::S4,
    };
    let mut entries = Vec::with_capacity(clips.len());
    for clip in &clips {
        save_clip(clip, root, split)?;
        entries.push(IndexEntry { id: clip.id.clone(), subset });
    }
    save_index(root, split, &entries)?;
    Ok(clips.len())
}

/// Per-clip tensors computed once per run.
struct ClipCache {
    frames: Array4<f64>,
    mel: Array3<f64>,
    gt: Array3<u8>,
}

fn stack_masks(clip: &RawClip) -> Array3<u8> {
    let (h, w) = clip.masks[0].dim();
    let mut gt = Array3::<u8>::zeros((clip.masks.len(), h, w));
    for (t, m) in clip.masks.iter().enumerate() {
        gt.index_axis_mut(Axis(0), t).assign(m);
    }
    gt
}

fn precompute(cfg: &ExperimentConfig, clips: &[RawClip]) -> Result<Vec<ClipCache>> {
    clips
        .iter()
        .map(|c| {
            Ok(ClipCache {
                frames: frames_to_tensor(&c.frames)?,
                mel: mel_frontend(&c.waveform, c.audio_sr, c.frames.len(), &cfg.encoder.mel)?,
                gt: stack_masks(c),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Forward pipeline
// ---------------------------------------------------------------------------

/// Counts of training-only computations, used to assert that disabled
/// components are genuinely dead code paths.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounters {
    pub inversions: usize,
    pub cf_losses: usize,
    pub pools_generated: usize,
    pub cdcl_losses: usize,
}

/// Textual inversion for one clip at all granularities (Eq. 3 inputs).
fn invert_clip_texts(
    model: &Model,
    cfg: &ExperimentConfig,
    pooled: &Array2<f64>,
    audio: &Array2<f64>,
    counters: &mut CallCounters,
) -> Result<ImplicitTextBundle> {
    let proj_v = seeded_projection(pooled.ncols(), TEXT_DIM, cfg.text.codebook_seed.wrapping_add(101));
    let proj_a = seeded_projection(audio.ncols(), TEXT_DIM, cfg.text.codebook_seed.wrapping_add(202));
    let vis = pooled.dot(&proj_v);
    let aud = audio.dot(&proj_a);
    let t = vis.nrows();
    let (k, steps, lr) = (cfg.text.k_t, cfg.text.inversion_steps, cfg.text.inversion_lr);

    let l_video = invert_text(&vis, &model.codebook_v, k, steps, lr)?.tokens;
    counters.inversions += 1;

    let w = cfg.granularity.segment_window.size(t);
    let mut seg_feats = Array2::<f64>::zeros((t, TEXT_DIM));
    for (i, win) in segment_windows(t, w)?.iter().enumerate() {
        let mut row = Array1::<f64>::zeros(TEXT_DIM);
        for &j in win {
            row += &vis.row(j);
        }
        seg_feats.row_mut(i).assign(&(row / win.len() as f64));
    }
    let l_segment = invert_text(&seg_feats, &model.codebook_v, k, steps, lr)?.tokens;
    counters.inversions += 1;

    let mut l_frame = Vec::with_capacity(t);
    for i in 0..t {
        let row = vis.row(i).insert_axis(Axis(0)).to_owned();
        l_frame.push(invert_text(&row, &model.codebook_v, k, steps, lr)?.tokens);
        counters.inversions += 1;
    }

    let l_audio = invert_text(&aud, &model.codebook_a, k, steps, lr)?.tokens;
    counters.inversions += 1;

    Ok(ImplicitTextBundle { l_video, l_segment, l_frame, l_audio })
}

struct Fwd {
    logits: Var,
    pooled: Var,
    audio: Var,
    /// Composite text tokens z (L_z, d_t), when text was requested.
    z: Option<Var>,
    /// Softmax-fused text vector (d_t,).
    fused: Option<Var>,
    bundle: Option<ImplicitTextBundle>,
}

/// Encoders -> multi-granularity temporal context -> (optional implicit
/// text) -> mask decoder. The same path serves training and inference.
fn run_pipeline(
    tape: &Tape,
    bound: &Bound,
    model: &Model,
    cfg: &ExperimentConfig,
    cache: &ClipCache,
    with_text: bool,
    counters: &mut CallCounters,
) -> Result<Fwd> {
    let stack = encode_visual(tape, bound, &cfg.encoder, &cache.frames)?;
    let (f_v, f_s, f_f) = apply_granularity(tape, bound, "ctx", &cfg.granularity, stack.scales[2])?;
    let tok = tape.scale(tape.add(tape.add(f_v, f_s), f_f), 1.0 / 3.0);
    let audio = encode_audio(tape, bound, &cfg.encoder, &cache.mel);

    let (mut z, mut fused, mut bundle) = (None, None, None);
    if with_text {
        let pooled_val: Array2<f64> =
            tape.value(stack.pooled).into_dimensionality().expect("pooled is 2-d");
        let audio_val: Array2<f64> =
            tape.value(audio).into_dimensionality().expect("audio features are 2-d");
        let b = invert_clip_texts(model, cfg, &pooled_val, &audio_val, counters)?;
        let vtok = tape.constant(b.visual_tokens().into_dyn());
        let atok = tape.constant(b.l_audio.clone().into_dyn());
        let zv = gate_concat(tape, bound, vtok, atok)?;
        fused = Some(fuse_texts(tape, &[zv], bound.var("mit.fuse_w"))?);
        z = Some(zv);
        bundle = Some(b);
    }

    let text_for_decoder = if cfg.decoder.use_text { z } else { None };
    let logits = crate::seg_decoder::decode(
        tape,
        bound,
        &cfg.decoder,
        stack.scales[0],
        tok,
        audio,
        text_for_decoder,
        cfg.encoder.resolution,
    )?;
    Ok(Fwd { logits, pooled: stack.pooled, audio, z, fused, bundle })
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// L2-normalize each row; the contrastive projection heads feed Gaussian
/// summaries whose Bures distances should stay O(1) for a usable kernel.
fn row_normalize(tape: &Tape, x: Var) -> Var {
    let rows = tape.shape(x)[0];
    let sq = tape.sum_axis(tape.square(x), 1);
    let norm = tape.sqrt(tape.add(sq, tape.scalar(1e-12)));
    tape.div(x, tape.reshape(norm, &[rows, 1]))
}

/// Loss terms of one optimizer step (batch means).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub l_seg: f64,
    pub l_cf: Option<f64>,
    pub l_v_a: Option<f64>,
    pub l_v_l: Option<f64>,
    pub l_a_l: Option<f64>,
    pub total: f64,
}

fn mean_opt(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = vals.flatten().collect();
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// One epoch line of the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub l_seg: f64,
    pub l_cf: Option<f64>,
    pub l_v_a: Option<f64>,
    pub l_v_l: Option<f64>,
    pub l_a_l: Option<f64>,
    pub total: f64,
    pub j: Option<f64>,
    pub f: Option<f64>,
    pub jf: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "-".into(),
    }
}

impl EpochRecord {
    fn from_steps(epoch: usize, steps: &[StepLosses], eval: Option<&EvalReport>) -> Self {
        let n = steps.len().max(1) as f64;
        EpochRecord {
            epoch,
            steps: steps.len(),
            l_seg: steps.iter().map(|s| s.l_seg).sum::<f64>() / n,
            l_cf: mean_opt(steps.iter().map(|s| s.l_cf)),
            l_v_a: mean_opt(steps.iter().map(|s| s.l_v_a)),
            l_v_l: mean_opt(steps.iter().map(|s| s.l_v_l)),
            l_a_l: mean_opt(steps.iter().map(|s| s.l_a_l)),
            total: steps.iter().map(|s| s.total).sum::<f64>() / n,
            j: eval.map(|e| e.j),
            f: eval.map(|e| e.f),
            jf: eval.map(|e| e.jf),
        }
    }

    /// Fixed field order, one record per line.
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} steps={} l_seg={:.6} l_cf={} l_v_a={} l_v_l={} l_a_l={} total={:.6} j={} f={} jf={}",
            self.epoch,
            self.steps,
            self.l_seg,
            fmt_opt(self.l_cf),
            fmt_opt(self.l_v_a),
            fmt_opt(self.l_v_l),
            fmt_opt(self.l_a_l),
            self.total,
            fmt_opt(self.j),
            fmt_opt(self.f),
            fmt_opt(self.jf),
        )
    }
}

/// Mutable training-loop state; checkpoints capture it exactly.
#[derive(Debug)]
pub struct TrainState {
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub batch_idx: usize,
    pub order: Vec<usize>,
    pub epoch_losses: Vec<StepLosses>,
}

impl TrainState {
    fn fresh(cfg: &ExperimentConfig) -> Self {
        TrainState {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            epoch: 0,
            batch_idx: 0,
            order: vec![],
            epoch_losses: vec![],
        }
    }
}

pub struct RunArtifacts {
    pub checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    pub log_text: String,
    pub report: EvalReport,
    pub records: Vec<EpochRecord>,
    /// Loss terms of every optimizer step executed by this call.
    pub step_losses: Vec<StepLosses>,
    pub counters: CallCounters,
}

fn train_step(
    model: &mut Model,
    cfg: &ExperimentConfig,
    caches: &[ClipCache],
    batch: &[usize],
    rng: &mut ChaCha8Rng,
    counters: &mut CallCounters,
    lr: f64,
) -> Result<StepLosses> {
    let tape = Tape::new();
    let bound = model.store.bind(&tape);
    let b = batch.len();
    let need_text = cfg.toggles.mit || cfg.decoder.use_text;

    let mut seg_sum: Option<Var> = None;
    let mut cf_sum: Option<Var> = None;
    let mut vis_sums: Vec<GaussianSummary> = vec![];
    let mut aud_sums: Vec<GaussianSummary> = vec![];
    let mut z_sums: Vec<GaussianSummary> = vec![];
    let mut anchor_rows: Vec<Array1<f64>> = vec![];
    let mut pool_sums: Vec<Vec<GaussianSummary>> = vec![];
    let mut pool_alphas: Vec<Vec<f64>> = vec![];

    for &ci in batch {
        let cache = &caches[ci];
        let fwd = run_pipeline(&tape, &bound, model, cfg, cache, need_text, counters)?;
        let l = seg_loss(&tape, &cfg.decoder, fwd.logits, &cache.gt, &cfg.weights)?;
        seg_sum = Some(match seg_sum {
            Some(s) => tape.add(s, l),
            None => l,
        });

        if cfg.toggles.sc {
            let (z, fused) = (fwd.z.expect("sc implies text"), fwd.fused.expect("sc implies text"));
            let lcf = cf_loss(&tape, &bound, &cfg.counterfactual, &model.schedule, z, fused, rng)?;
            counters.cf_losses += 1;
            cf_sum = Some(match cf_sum {
                Some(s) => tape.add(s, lcf),
                None => lcf,
            });
        }

        if cfg.toggles.cdcl {
            let vproj = row_normalize(&tape, nn::linear(&tape, &bound, "cdcl.proj_v", fwd.pooled));
            vis_sums.push(gaussian_summary(&tape, vproj, cfg.contrast.eps_reg)?);
            let aproj = row_normalize(&tape, nn::linear(&tape, &bound, "cdcl.proj_a", fwd.audio));
            aud_sums.push(gaussian_summary(&tape, aproj, cfg.contrast.eps_reg)?);
            anchor_rows.push(match &fwd.bundle {
                Some(bu) => bu.l_audio.mean_axis(Axis(0)).expect("nonempty tokens"),
                None => {
                    let av: Array2<f64> =
                        tape.value(fwd.audio).into_dimensionality().expect("audio 2-d");
                    av.mean_axis(Axis(0)).expect("nonempty frames")
                }
            });
            if let Some(z) = fwd.z {
                let zproj = row_normalize(&tape, nn::linear(&tape, &bound, "cdcl.proj_t", z));
                z_sums.push(gaussian_summary(&tape, zproj, cfg.contrast.eps_reg)?);
                if cfg.toggles.sc {
                    let z_val: Array2<f64> =
                        tape.value(z).into_dimensionality().expect("z is 2-d");
                    let fused_val: Array1<f64> =
                        tape.value(fwd.fused.expect("fused set")).into_dimensionality().expect("fused 1-d");
                    let pool = generate_pool(
                        &model.store,
                        &cfg.counterfactual,
                        &model.schedule,
                        &z_val,
                        &fused_val,
                        rng,
                    )?;
                    counters.pools_generated += 1;
                    let sums = pool
                        .texts
                        .iter()
                        .map(|t| {
                            let c = tape.constant(t.clone().into_dyn());
                            let p = row_normalize(&tape, nn::linear(&tape, &bound, "cdcl.proj_t", c));
                            gaussian_summary(&tape, p, cfg.contrast.eps_reg)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    pool_sums.push(sums);
                    pool_alphas.push(pool.alphas);
                }
            }
        }
    }

    let l_seg = tape.scale(seg_sum.expect("nonempty batch"), 1.0 / b as f64);
    let l_cf = cf_sum.map(|s| tape.scale(s, 1.0 / b as f64));

    let (mut l_v_a, mut l_v_l, mut l_a_l) = (None, None, None);
    if cfg.toggles.cdcl {
        let mut anchors = Array2::<f64>::zeros((b, anchor_rows[0].len()));
        for (i, r) in anchor_rows.iter().enumerate() {
            anchors.row_mut(i).assign(r);
        }
        let partitions = partition_by_audio_anchor(&anchors, cfg.contrast.theta_pos);
        if cfg.toggles.pair_v_a {
            l_v_a = Some(cdcl::loss_v_a(&tape, &vis_sums, &aud_sums, &partitions, &cfg.contrast)?);
            counters.cdcl_losses += 1;
        }
        if z_sums.len() == b {
            // Negatives: counterfactual pools when SC runs, otherwise the
            // other batch items' composite texts (uniform weights).
            let (pools, alphas) = if cfg.toggles.sc {
                (pool_sums, pool_alphas)
            } else {
                let mut p = Vec::with_capacity(b);
                let mut a = Vec::with_capacity(b);
                for i in 0..b {
                    let others: Vec<GaussianSummary> = (0..b)
                        .filter(|&j| j != i)
                        .map(|j| z_sums[j])
                        .collect();
                    a.push(vec![0.0; others.len()]);
                    p.push(others);
                }
                (p, a)
            };
            if pools.iter().all(|p| !p.is_empty()) {
                if cfg.toggles.pair_v_l {
                    l_v_l = Some(cdcl::loss_v_l(&tape, &vis_sums, &z_sums, &pools, &alphas, &cfg.contrast)?);
                    counters.cdcl_losses += 1;
                }
                if cfg.toggles.pair_a_l {
                    l_a_l = Some(cdcl::loss_a_l(&tape, &aud_sums, &z_sums, &pools, &alphas, &cfg.contrast)?);
                    counters.cdcl_losses += 1;
                }
            }
        }
    }

    let total = total_loss(&tape, l_seg, l_cf, l_v_a, l_v_l, l_a_l, &cfg.weights);
    let out = StepLosses {
        l_seg: tape.scalar_value(l_seg),
        l_cf: l_cf.map(|v| tape.scalar_value(v)),
        l_v_a: l_v_a.map(|v| tape.scalar_value(v)),
        l_v_l: l_v_l.map(|v| tape.scalar_value(v)),
        l_a_l: l_a_l.map(|v| tape.scalar_value(v)),
        total: tape.scalar_value(total),
    };
    if !out.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss (seg={} cf={:?} v_a={:?} v_l={:?} a_l={:?})",
            out.l_seg, out.l_cf, out.l_v_a, out.l_v_l, out.l_a_l
        )));
    }
    tape.backward(total);
    model.store.adamw_step(&tape, &bound, lr, cfg.optim.weight_decay);
    Ok(out)
}

pub fn train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunArtifacts> {
    train_resumable(cfg, out_dir, None)
}

/// Full training run; `resume` continues exactly where a checkpoint stopped.
pub fn train_resumable(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut clips = build_dataset(&cfg.data, cfg.encoder.resolution)?;
    if cfg.optim.pair_swap_fraction > 0.0 {
        clips = pair_swap(&clips, cfg.optim.pair_swap_fraction, cfg.seed ^ 0x7377_6170)?;
    }
    let caches = precompute(cfg, &clips)?;

    let (mut model, mut state) = match resume {
        Some(path) => load_checkpoint(path, cfg)?,
        None => (init_model(cfg)?, TrainState::fresh(cfg)),
    };

    let n = caches.len();
    let bs = cfg.optim.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(bs);
    let planned_steps = cfg.optim.max_steps.unwrap_or(cfg.optim.epochs * steps_per_epoch);
    let mut counters = CallCounters::default();
    let mut step_losses = Vec::new();
    let mut records = Vec::new();
    let mut log_text = String::new();
    let mut stop = false;

    while state.epoch < cfg.optim.epochs && !stop {
        if state.batch_idx == 0 {
            state.order = (0..n).collect();
            state.order.shuffle(&mut state.rng);
            state.epoch_losses.clear();
        }
        while state.batch_idx < steps_per_epoch {
            let lo = state.batch_idx * bs;
            let hi = (lo + bs).min(n);
            let idxs: Vec<usize> = state.order[lo..hi].to_vec();
            let lr = cfg.optim.lr_at(model.store.step as usize, planned_steps);
            let sl =
                train_step(&mut model, cfg, &caches, &idxs, &mut state.rng, &mut counters, lr)?;
            step_losses.push(sl);
            state.epoch_losses.push(sl);
            state.batch_idx += 1;
            if let Some(every) = cfg.optim.checkpoint_every_steps {
                if every > 0 && model.store.step % every as u64 == 0 {
                    save_checkpoint(
                        &model,
                        &state,
                        cfg,
                        &out_dir.join(format!("ckpt_step{}.bin", model.store.step)),
                    )?;
                }
            }
            if let Some(ms) = cfg.optim.max_steps {
                if model.store.step as usize >= ms {
                    stop = true;
                    break;
                }
            }
        }

        let completed_epoch = state.batch_idx >= steps_per_epoch;
        let is_last = stop || state.epoch + 1 == cfg.optim.epochs;
        let do_eval = match cfg.optim.eval_every {
            0 => is_last,
            k => is_last || (state.epoch + 1) % k == 0,
        };
        let eval = if do_eval { Some(evaluate(&model, cfg, &clips)?) } else { None };
        let rec = EpochRecord::from_steps(state.epoch, &state.epoch_losses, eval.as_ref());
        log_text.push_str(&rec.to_line());
        log_text.push('\n');
        records.push(rec);
        if let (Some(target), Some(e)) = (cfg.optim.target_jf, eval.as_ref()) {
            if e.jf >= target {
                stop = true;
            }
        }
        if completed_epoch {
            state.epoch += 1;
            state.batch_idx = 0;
        }
    }

    let report = evaluate(&model, cfg, &clips)?;
    let checkpoint = out_dir.join("checkpoint.bin");
    save_checkpoint(&model, &state, cfg, &checkpoint)?;
    let metrics_log = out_dir.join("metrics.log");
    fs::write(&metrics_log, &log_text)?;
    fs::write(out_dir.join("config.json"), cfg.to_json())?;
    fs::write(out_dir.join("report.txt"), report.to_text())?;
    Ok(RunArtifacts {
        checkpoint,
        metrics_log,
        log_text,
        report,
        records,
        step_losses,
        counters,
    })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Inference for one clip: per-frame label maps (0/1 binary, class ids in
/// semantic mode). Uses encoders, temporal context, and the decoder only;
/// no post-processing.
pub fn predict(model: &Model, cfg: &ExperimentConfig, clip: &RawClip) -> Result<Vec<Array2<u8>>> {
    let cache = ClipCache {
        frames: frames_to_tensor(&clip.frames)?,
        mel: mel_frontend(&clip.waveform, clip.audio_sr, clip.frames.len(), &cfg.encoder.mel)?,
        gt: stack_masks(clip),
    };
    let tape = Tape::new();
    let bound = model.store.bind(&tape);
    let mut scratch = CallCounters::default();
    let fwd = run_pipeline(&tape, &bound, model, cfg, &cache, cfg.decoder.use_text, &mut scratch)?;
    let logits = tape.value(fwd.logits);
    let (h, w) = cfg.encoder.resolution;
    let t = clip.frames.len();
    let mut preds = Vec::with_capacity(t);
    match cfg.decoder.head {
        SegHead::Binary => {
            let l = logits.into_dimensionality::<ndarray::Ix3>().expect("binary logits 3-d");
            for ti in 0..t {
                preds.push(l.index_axis(Axis(0), ti).mapv(|x| u8::from(x > 0.0)));
            }
        }
        SegHead::Semantic(k) => {
            let l = logits.into_dimensionality::<ndarray::Ix4>().expect("semantic logits 4-d");
            for ti in 0..t {
                let mut m = Array2::<u8>::zeros((h, w));
                for i in 0..h {
                    for j in 0..w {
                        let mut best = 0usize;
                        for c in 1..k {
                            if l[[ti, c, i, j]] > l[[ti, best, i, j]] {
                                best = c;
                            }
                        }
                        m[[i, j]] = best as u8;
                    }
                }
                preds.push(m);
            }
        }
    }
    Ok(preds)
}

/// Score externally supplied predictions against clip ground truth.
pub fn score_predictions(
    preds: &[Vec<Array2<u8>>],
    clips: &[RawClip],
    head: SegHead,
) -> Result<EvalReport> {
    if preds.len() != clips.len() {
        return Err(Error::shape("score_predictions: clip count mismatch"));
    }
    let mut per_clip = Vec::with_capacity(clips.len());
    // per-class accumulation in semantic mode
    let mut class_sums: Vec<(f64, usize)> = match head {
        SegHead::Semantic(k) => vec![(0.0, 0); k],
        SegHead::Binary => vec![],
    };
    for (pred, clip) in preds.iter().zip(clips) {
        if pred.len() != clip.masks.len() {
            return Err(Error::shape("score_predictions: frame count mismatch"));
        }
        let mut js = 0.0;
        let mut fs = 0.0;
        for (p, gt) in pred.iter().zip(&clip.masks) {
            match head {
                SegHead::Binary => {
                    js += jaccard(p, gt)?;
                    fs += fscore(p, gt, DEFAULT_BETA2)?;
                }
                SegHead::Semantic(k) => {
                    js += semantic_jaccard(p, gt, k)?;
                    let pb = p.mapv(|v| u8::from(v > 0));
                    let gb = gt.mapv(|v| u8::from(v > 0));
                    fs += fscore(&pb, &gb, DEFAULT_BETA2)?;
                    for c in 1..k {
                        let pc = p.mapv(|v| u8::from(v as usize == c));
                        let gc = gt.mapv(|v| u8::from(v as usize == c));
                        if pc.iter().any(|&v| v != 0) || gc.iter().any(|&v| v != 0) {
                            class_sums[c].0 += jaccard(&pc, &gc)?;
                            class_sums[c].1 += 1;
                        }
                    }
                }
            }
        }
        let t = pred.len() as f64;
        per_clip.push(ClipScore { clip_id: clip.id.clone(), j: js / t, f: fs / t });
    }
    let per_class = match head {
        SegHead::Binary => None,
        SegHead::Semantic(_) => Some(
            class_sums
                .iter()
                .enumerate()
                .skip(1)
                .filter(|(_, (_, n))| *n > 0)
                .map(|(c, (s, n))| (c as u8, s / *n as f64))
                .collect(),
        ),
    };
    Ok(EvalReport::from_clips(per_clip, per_class))
}

/// Inference-only evaluation; independent of all training toggles.
pub fn evaluate(model: &Model, cfg: &ExperimentConfig, clips: &[RawClip]) -> Result<EvalReport> {
    let preds = clips
        .iter()
        .map(|c| predict(model, cfg, c))
        .collect::<Result<Vec<_>>>()?;
    score_predictions(&preds, clips, cfg.decoder.head)
}

pub fn evaluate_checkpoint(
    checkpoint: &Path,
    cfg: &ExperimentConfig,
    clips: &[RawClip],
) -> Result<EvalReport> {
    let (model, _) = load_checkpoint(checkpoint, cfg)?;
    evaluate(&model, cfg, clips)
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

fn write_u64(buf: &mut Vec<u8>, v: u64) {
    buf.write_u64::<LittleEndian>(v).expect("in-memory write");
}

fn write_bytes(buf: &mut Vec<u8>, b: &[u8]) {
    write_u64(buf, b.len() as u64);
    buf.extend_from_slice(b);
}

fn write_array(buf: &mut Vec<u8>, a: &ArrayD<f64>) {
    write_u64(buf, a.ndim() as u64);
    for &d in a.shape() {
        write_u64(buf, d as u64);
    }
    write_u64(buf, a.len() as u64);
    for &x in a.iter() {
        buf.write_u64::<LittleEndian>(x.to_bits()).expect("in-memory write");
    }
}

fn write_opt_f64(buf: &mut Vec<u8>, v: Option<f64>) {
    buf.push(u8::from(v.is_some()));
    buf.write_u64::<LittleEndian>(v.unwrap_or(0.0).to_bits()).expect("in-memory write");
}

fn read_u64(c: &mut Cursor<&[u8]>) -> Result<u64> {
    c.read_u64::<LittleEndian>().map_err(|e| Error::Checkpoint(format!("truncated: {e}")))
}

fn read_bytes(c: &mut Cursor<&[u8]>) -> Result<Vec<u8>> {
    let n = read_u64(c)? as usize;
    let mut b = vec![0u8; n];
    c.read_exact(&mut b).map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
    Ok(b)
}

fn read_array(c: &mut Cursor<&[u8]>) -> Result<ArrayD<f64>> {
    let ndim = read_u64(c)? as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(read_u64(c)? as usize);
    }
    let n = read_u64(c)? as usize;
    if n != dims.iter().product::<usize>() {
        return Err(Error::Checkpoint("array length disagrees with shape".into()));
    }
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(f64::from_bits(
            c.read_u64::<LittleEndian>()
                .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?,
        ));
    }
    ArrayD::from_shape_vec(IxDyn(&dims), data)
        .map_err(|e| Error::Checkpoint(format!("bad array: {e}")))
}

fn read_opt_f64(c: &mut Cursor<&[u8]>) -> Result<Option<f64>> {
    let mut flag = [0u8; 1];
    c.read_exact(&mut flag).map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
    let bits = c
        .read_u64::<LittleEndian>()
        .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
    Ok((flag[0] == 1).then(|| f64::from_bits(bits)))
}

fn write_map(buf: &mut Vec<u8>, map: &std::collections::BTreeMap<String, ArrayD<f64>>) {
    write_u64(buf, map.len() as u64);
    for (name, a) in map {
        write_bytes(buf, name.as_bytes());
        write_array(buf, a);
    }
}

fn read_map(c: &mut Cursor<&[u8]>) -> Result<std::collections::BTreeMap<String, ArrayD<f64>>> {
    let n = read_u64(c)? as usize;
    let mut map = std::collections::BTreeMap::new();
    for _ in 0..n {
        let name = String::from_utf8(read_bytes(c)?)
            .map_err(|_| Error::Checkpoint("non-utf8 parameter name".into()))?;
        map.insert(name, read_array(c)?);
    }
    Ok(map)
}

/// Binary checkpoint: parameters and Adam moments, optimizer step, config
/// hash, rng state, and the exact loop position (epoch, batch index,
/// shuffled order, partial-epoch losses). Round-trips byte-identically.
pub fn save_checkpoint(
    model: &Model,
    state: &TrainState,
    cfg: &ExperimentConfig,
    path: &Path,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.write_u32::<LittleEndian>(CKPT_VERSION).expect("in-memory write");
    buf.extend_from_slice(&config_hash(cfg));
    write_bytes(&mut buf, &serde_json::to_vec(&state.rng)?);
    write_u64(&mut buf, model.num_frames as u64);
    write_u64(&mut buf, model.store.step);
    write_map(&mut buf, &model.store.params);
    write_map(&mut buf, &model.store.adam_m);
    write_map(&mut buf, &model.store.adam_v);
    write_u64(&mut buf, state.epoch as u64);
    write_u64(&mut buf, state.batch_idx as u64);
    write_u64(&mut buf, state.order.len() as u64);
    for &i in &state.order {
        write_u64(&mut buf, i as u64);
    }
    write_u64(&mut buf, state.epoch_losses.len() as u64);
    for sl in &state.epoch_losses {
        buf.write_u64::<LittleEndian>(sl.l_seg.to_bits()).expect("in-memory write");
        write_opt_f64(&mut buf, sl.l_cf);
        write_opt_f64(&mut buf, sl.l_v_a);
        write_opt_f64(&mut buf, sl.l_v_l);
        write_opt_f64(&mut buf, sl.l_a_l);
        buf.write_u64::<LittleEndian>(sl.total.to_bits()).expect("in-memory write");
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, cfg: &ExperimentConfig) -> Result<(Model, TrainState)> {
    let bytes = fs::read(path)?;
    let mut c = Cursor::new(bytes.as_slice());
    let mut magic = [0u8; 4];
    c.read_exact(&mut magic).map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = c
        .read_u32::<LittleEndian>()
        .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let mut hash = [0u8; 32];
    c.read_exact(&mut hash).map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
    if hash != config_hash(cfg) {
        return Err(Error::Checkpoint("config hash mismatch; refusing to resume".into()));
    }
    let rng: ChaCha8Rng = serde_json::from_slice(&read_bytes(&mut c)?)?;
    let num_frames = read_u64(&mut c)? as usize;
    if num_frames != cfg.data.num_frames() {
        return Err(Error::Checkpoint("frame count disagrees with config".into()));
    }
    let step = read_u64(&mut c)?;
    let params = read_map(&mut c)?;
    let adam_m = read_map(&mut c)?;
    let adam_v = read_map(&mut c)?;
    let epoch = read_u64(&mut c)? as usize;
    let batch_idx = read_u64(&mut c)? as usize;
    let n_order = read_u64(&mut c)? as usize;
    let mut order = Vec::with_capacity(n_order);
    for _ in 0..n_order {
        order.push(read_u64(&mut c)? as usize);
    }
    let n_losses = read_u64(&mut c)? as usize;
    let mut epoch_losses = Vec::with_capacity(n_losses);
    for _ in 0..n_losses {
        let l_seg = f64::from_bits(
            c.read_u64::<LittleEndian>()
                .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?,
        );
        let l_cf = read_opt_f64(&mut c)?;
        let l_v_a = read_opt_f64(&mut c)?;
        let l_v_l = read_opt_f64(&mut c)?;
        let l_a_l = read_opt_f64(&mut c)?;
        let total = f64::from_bits(
            c.read_u64::<LittleEndian>()
                .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?,
        );
        epoch_losses.push(StepLosses { l_seg, l_cf, l_v_a, l_v_l, l_a_l, total });
    }

    let mut store = ParamStore::new();
    store.params = params;
    store.adam_m = adam_m;
    store.adam_v = adam_v;
    store.step = step;
    let model = Model {
        store,
        codebook_v: ConceptCodebook::build(
            Modality::Visual,
            cfg.text.n_distractors,
            TEXT_DIM,
            cfg.text.codebook_seed,
        )?,
        codebook_a: ConceptCodebook::build(
            Modality::Audio,
            cfg.text.n_distractors,
            TEXT_DIM,
            cfg.text.codebook_seed,
        )?,
        schedule: DiffusionSchedule::linear(cfg.text.diffusion_steps)?,
        num_frames,
    };
    Ok((model, TrainState { rng, epoch, batch_idx, order, epoch_losses }))
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    Components,
    Granularity,
    CfDimension,
    /// Only the continuous latent space is implemented; the discrete
    /// (vector-quantized) variant is skipped.
    CfSpace,
    ContrastPairs,
    ContrastMode,
    PairSwap,
}

impl FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "components" => Ok(AblationAxis::Components),
            "granularity" => Ok(AblationAxis::Granularity),
            "cf-dimension" => Ok(AblationAxis::CfDimension),
            "cf-space" => Ok(AblationAxis::CfSpace),
            "contrast-pairs" => Ok(AblationAxis::ContrastPairs),
            "contrast-mode" => Ok(AblationAxis::ContrastMode),
            "pair-swap" => Ok(AblationAxis::PairSwap),
            other => Err(Error::invalid(format!("unknown ablation axis '{other}'"))),
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AblationAxis::Components => "components",
            AblationAxis::Granularity => "granularity",
            AblationAxis::CfDimension => "cf-dimension",
            AblationAxis::CfSpace => "cf-space",
            AblationAxis::ContrastPairs => "contrast-pairs",
            AblationAxis::ContrastMode => "contrast-mode",
            AblationAxis::PairSwap => "pair-swap",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub report: EvalReport,
}

/// Rows of configs for one ablation axis.
pub fn ablation_rows(cfg: &ExperimentConfig, axis: AblationAxis) -> Vec<(String, ExperimentConfig)> {
    let mk_toggles = |mit: bool, sc: bool, cdcl: bool| {
        let mut c = cfg.clone();
        c.toggles.mit = mit;
        c.toggles.sc = sc;
        c.toggles.cdcl = cdcl;
        // text conditioning of the decoder only exists while MIT is on
        c.decoder.use_text = cfg.decoder.use_text && mit;
        c
    };
    match axis {
        AblationAxis::Components => vec![
            ("none".into(), mk_toggles(false, false, false)),
            ("mit".into(), mk_toggles(true, false, false)),
            ("mit+sc".into(), mk_toggles(true, true, false)),
            ("cdcl".into(), mk_toggles(false, false, true)),
            ("mit+cdcl".into(), mk_toggles(true, false, true)),
            ("mit+sc+cdcl".into(), mk_toggles(true, true, true)),
        ],
        AblationAxis::Granularity => {
            let mk = |video: bool, segment: bool, frame: bool, label: &str| {
                let mut c = cfg.clone();
                c.granularity.video = video;
                c.granularity.segment = segment;
                c.granularity.frame = frame;
                (label.to_string(), c)
            };
            vec![
                mk(false, false, false, "none"),
                mk(true, false, false, "video"),
                mk(true, true, false, "video+segment"),
                mk(true, true, true, "video+segment+frame"),
            ]
        }
        AblationAxis::CfDimension => [MixingDim::Inter, MixingDim::Intra, MixingDim::Both]
            .into_iter()
            .map(|m| {
                let mut c = mk_toggles(true, true, cfg.toggles.cdcl);
                c.counterfactual.mixing = m;
                (format!("{m:?}").to_lowercase(), c)
            })
            .collect(),
        AblationAxis::CfSpace => vec![("continuous".into(), cfg.clone())],
        AblationAxis::ContrastPairs => {
            let mk = |v_a: bool, v_l: bool, a_l: bool, label: &str| {
                let mut c = cfg.clone();
                c.toggles.cdcl = true;
                c.toggles.pair_v_a = v_a;
                c.toggles.pair_v_l = v_l;
                c.toggles.pair_a_l = a_l;
                (label.to_string(), c)
            };
            vec![
                mk(false, true, false, "v_l"),
                mk(false, true, true, "v_l+a_l"),
                mk(true, true, true, "v_a+v_l+a_l"),
            ]
        }
        AblationAxis::ContrastMode => [
            cdcl::ContrastMode::Prototype,
            cdcl::ContrastMode::Feature,
            cdcl::ContrastMode::Distribution,
        ]
        .into_iter()
        .map(|m| {
            let mut c = cfg.clone();
            c.toggles.cdcl = true;
            c.contrast.mode = m;
            (format!("{m:?}").to_lowercase(), c)
        })
        .collect(),
        AblationAxis::PairSwap => {
            let mut swapped = cfg.clone();
            swapped.optim.pair_swap_fraction = 0.5;
            vec![("no_swap".into(), cfg.clone()), ("pair_swap_0.5".into(), swapped)]
        }
    }
}

/// Train one run per row of the axis with the shared seed and evaluate each.
pub fn ablate(cfg: &ExperimentConfig, axis: AblationAxis, out_dir: &Path) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let rows = ablation_rows(cfg, axis);
    let mut out = Vec::with_capacity(rows.len());
    for (label, row_cfg) in rows {
        row_cfg.validate()?;
        let slug: String = label
            .chars()
            .map(|ch| if ch.is_ascii_alphanumeric() { ch } else { '_' })
            .collect();
        let artifacts = train(&row_cfg, &out_dir.join(format!("{axis}_{slug}")))?;
        out.push(AblationRow { label, report: artifacts.report });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Sweeps and degradations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    /// Counterfactual pool size k^c (training-time).
    KC,
    /// Orthogonality coefficient alpha^o (training-time).
    AlphaO,
    /// Diffusion intervention step s^d (training-time).
    SD,
    /// Audio signal-to-noise ratio in dB (evaluation-time degradation).
    Ra,
    /// Fraction of frames mixed in from other clips (evaluation-time).
    Rv,
}

impl FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k_c" => Ok(SweepParam::KC),
            "alpha_o" => Ok(SweepParam::AlphaO),
            "s_d" => Ok(SweepParam::SD),
            "r_a" => Ok(SweepParam::Ra),
            "r_v" => Ok(SweepParam::Rv),
            other => Err(Error::invalid(format!("unknown sweep parameter '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub jf: f64,
}

/// Additive white noise at the given SNR (dB). `+inf` returns the waveform
/// unchanged, bit for bit.
pub fn add_noise_snr(waveform: &[f64], snr_db: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if snr_db == f64::INFINITY {
        return waveform.to_vec();
    }
    let power = waveform.iter().map(|x| x * x).sum::<f64>() / waveform.len().max(1) as f64;
    let noise_power = power / 10f64.powf(snr_db / 10.0);
    let sigma = noise_power.sqrt();
    waveform.iter().map(|x| x + sigma * nn::randn_scalar(rng)).collect()
}

/// Replace floor(fraction * T) frames of each clip with the same-index frame
/// of the next clip, tagging provenance per frame. Masks are unchanged
/// (this is a robustness degradation, not a relabeling).
pub fn mix_frames(clips: &[RawClip], fraction: f64, seed: u64) -> Result<Vec<RawClip>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid("mix_frames: fraction must be in [0,1]"));
    }
    let n = clips.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for (i, clip) in clips.iter().enumerate() {
        let t = clip.frames.len();
        let m = (fraction * t as f64).floor() as usize;
        let mut mixed = clip.clone();
        let mut provenance = vec![i; t];
        if m > 0 && n > 1 {
            let donor = (i + 1) % n;
            let mut idxs: Vec<usize> = (0..t).collect();
            idxs.shuffle(&mut rng);
            for &fi in idxs.iter().take(m) {
                mixed.frames[fi] = clips[donor].frames[fi].clone();
                provenance[fi] = donor;
            }
        }
        mixed.frame_provenance = Some(provenance);
        out.push(mixed);
    }
    Ok(out)
}

fn degrade_audio(clips: &[RawClip], snr_db: f64, seed: u64) -> Vec<RawClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    clips
        .iter()
        .map(|c| {
            let mut d = c.clone();
            d.waveform = add_noise_snr(&c.waveform, snr_db, &mut rng);
            d
        })
        .collect()
}

fn validate_sweep_values(cfg: &ExperimentConfig, param: SweepParam, values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::invalid("sweep: no values given"));
    }
    for &v in values {
        let ok = match param {
            SweepParam::KC => v >= 1.0 && v.fract() == 0.0,
            SweepParam::AlphaO => (0.0..=1.0).contains(&v),
            SweepParam::SD => {
                v >= 1.0 && v.fract() == 0.0 && (v as usize) < cfg.text.diffusion_steps
            }
            SweepParam::Ra => !v.is_nan() && v != f64::NEG_INFINITY,
            SweepParam::Rv => (0.0..=1.0).contains(&v),
        };
        if !ok {
            return Err(Error::invalid(format!("sweep: illegal value {v} for {param:?}")));
        }
    }
    Ok(())
}

/// One J&F point per value. Training-time parameters (k^c, alpha^o, s^d)
/// retrain per value; degradations (r^a, r^v) train once and perturb the
/// evaluation data.
pub fn sweep(
    cfg: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
    out_dir: &Path,
) -> Result<Vec<SweepPoint>> {
    cfg.validate()?;
    validate_sweep_values(cfg, param, values)?;
    fs::create_dir_all(out_dir)?;
    let mut points = Vec::with_capacity(values.len());
    match param {
        SweepParam::KC | SweepParam::AlphaO | SweepParam::SD => {
            for (i, &v) in values.iter().enumerate() {
                let mut c = cfg.clone();
                match param {
                    SweepParam::KC => c.counterfactual.k_c = v as usize,
                    SweepParam::AlphaO => {
                        c.counterfactual.alpha_lo = v;
                        c.counterfactual.alpha_hi = v;
                    }
                    SweepParam::SD => c.counterfactual.s_d = v as usize,
                    _ => unreachable!(),
                }
                c.validate()?;
                let artifacts = train(&c, &out_dir.join(format!("{param:?}_{i}")))?;
                points.push(SweepPoint { value: v, jf: artifacts.report.jf });
            }
        }
        SweepParam::Ra | SweepParam::Rv => {
            let artifacts = train(cfg, &out_dir.join("base"))?;
            let (model, _) = load_checkpoint(&artifacts.checkpoint, cfg)?;
            let clips = build_dataset(&cfg.data, cfg.encoder.resolution)?;
            for &v in values {
                let degraded = match param {
                    SweepParam::Ra => degrade_audio(&clips, v, cfg.seed ^ 0x6e6f_6973),
                    SweepParam::Rv => mix_frames(&clips, v, cfg.seed ^ 0x6d69_78)?,
                    _ => unreachable!(),
                };
                let report = evaluate(&model, cfg, &degraded)?;
                points.push(SweepPoint { value: v, jf: report.jf });
            }
        }
    }
    Ok(points)
}

// ---------------------------------------------------------------------------
// Embedding export
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub clip_id: String,
    /// One of visual_pre, audio_pre, visual_post, audio_post.
    pub space: String,
    /// Leading entries of the padded row that are meaningful.
    pub dim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingSidecar {
    pub row_width: usize,
    pub rows: Vec<EmbeddingRow>,
}

/// Per-clip mean embeddings before (raw encoder descriptors) and after
/// (projection heads) contrastive alignment, as a flat little-endian f32
/// matrix plus a JSON sidecar describing each row. No plotting here; any
/// external tool can project and render these.
pub fn export_embeddings(
    model: &Model,
    cfg: &ExperimentConfig,
    clips: &[RawClip],
    out_matrix: &Path,
    out_sidecar: &Path,
) -> Result<()> {
    let width = cfg.encoder.pooled_dim.max(cfg.encoder.audio_dim).max(cfg.contrast.d_e);
    let mut rows: Vec<EmbeddingRow> = Vec::new();
    let mut data: Vec<f32> = Vec::new();
    let push = |rows: &mut Vec<EmbeddingRow>, data: &mut Vec<f32>, id: &str, space: &str, v: Array1<f64>| {
        let mut padded = vec![0f32; width];
        for (i, &x) in v.iter().enumerate() {
            padded[i] = x as f32;
        }
        data.extend_from_slice(&padded);
        rows.push(EmbeddingRow { clip_id: id.to_string(), space: space.into(), dim: v.len() });
    };
    for clip in clips {
        let cache = ClipCache {
            frames: frames_to_tensor(&clip.frames)?,
            mel: mel_frontend(&clip.waveform, clip.audio_sr, clip.frames.len(), &cfg.encoder.mel)?,
            gt: stack_masks(clip),
        };
        let tape = Tape::new();
        let bound = model.store.bind(&tape);
        let mut scratch = CallCounters::default();
        let fwd = run_pipeline(&tape, &bound, model, cfg, &cache, false, &mut scratch)?;
        let pooled: Array2<f64> = tape.value(fwd.pooled).into_dimensionality().expect("2-d");
        let audio: Array2<f64> = tape.value(fwd.audio).into_dimensionality().expect("2-d");
        let vproj: Array2<f64> = tape
            .value(row_normalize(&tape, nn::linear(&tape, &bound, "cdcl.proj_v", fwd.pooled)))
            .into_dimensionality()
            .expect("2-d");
        let aproj: Array2<f64> = tape
            .value(row_normalize(&tape, nn::linear(&tape, &bound, "cdcl.proj_a", fwd.audio)))
            .into_dimensionality()
            .expect("2-d");
        push(&mut rows, &mut data, &clip.id, "visual_pre", pooled.mean_axis(Axis(0)).unwrap());
        push(&mut rows, &mut data, &clip.id, "audio_pre", audio.mean_axis(Axis(0)).unwrap());
        push(&mut rows, &mut data, &clip.id, "visual_post", vproj.mean_axis(Axis(0)).unwrap());
        push(&mut rows, &mut data, &clip.id, "audio_post", aproj.mean_axis(Axis(0)).unwrap());
    }
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for x in data {
        bytes.write_f32::<LittleEndian>(x).expect("in-memory write");
    }
    fs::write(out_matrix, bytes)?;
    fs::write(out_sidecar, serde_json::to_string_pretty(&EmbeddingSidecar { row_width: width, rows })?)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
