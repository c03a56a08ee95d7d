//! Deterministic synthetic audio-visual clips with ground-truth masks, plus
//! a loader/saver for datasets laid out in the AVSBench directory convention.
//!
//! The synthetic vocabulary is 12 shape x timbre concept classes. Sources move
//! along linear trajectories, emit harmonic tones while active, and can be
//! configured as distractors: visible but silent, or audible but off-screen.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_SHAPES: usize = 4;
pub const NUM_TIMBRES: usize = 3;
/// 12 concept classes (shape x timbre), label 0 is background.
pub const NUM_CONCEPTS: usize = NUM_SHAPES * NUM_TIMBRES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
    Bar,
}

impl ShapeClass {
    pub fn index(self) -> usize {
        match self {
            ShapeClass::Circle => 0,
            ShapeClass::Square => 1,
            ShapeClass::Triangle => 2,
            ShapeClass::Bar => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ToneSpec {
    pub freq_hz: f64,
    /// Timbre id in 0..3: pure sine, +2nd harmonic, +3rd harmonic.
    pub timbre: u8,
}

/// Linear parametric path in normalized [0,1] frame coordinates.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Trajectory {
    pub start: (f64, f64),
    /// Displacement per frame (normalized units).
    pub velocity: (f64, f64),
    /// Shape half-extent as a fraction of min(H, W).
    pub size: f64,
}

impl Trajectory {
    pub fn center_at(&self, t: usize) -> (f64, f64) {
        (
            self.start.0 + self.velocity.0 * t as f64,
            self.start.1 + self.velocity.1 * t as f64,
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceSpec {
    pub shape_class: ShapeClass,
    pub tone: ToneSpec,
    pub trajectory: Trajectory,
    pub active_frames: Vec<bool>,
    /// Relative gain in [0, 1].
    pub loudness: f64,
}

impl SourceSpec {
    /// Concept class id in 1..=12 (0 is background).
    pub fn class_id(&self) -> u8 {
        (self.shape_class.index() * NUM_TIMBRES + self.tone.timbre as usize) as u8 + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Rendered in frames, contributes neither audio nor mask.
    SilentVisible,
    /// Contributes audio, never rendered and never masked.
    AudibleOffscreen,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSourceSpec {
    pub source: SourceSpec,
    pub kind: NoiseKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipSpec {
    pub seed: u64,
    pub num_frames: usize,
    /// (H, W) pixels.
    pub resolution: (usize, usize),
    pub sources: Vec<SourceSpec>,
    #[serde(default)]
    pub noise_sources: Vec<NoiseSourceSpec>,
    pub audio_sr: u32,
    /// Emit label maps instead of binary masks.
    #[serde(default)]
    pub semantic: bool,
}

impl Default for ClipSpec {
    fn default() -> Self {
        ClipSpec {
            seed: 0,
            num_frames: 5,
            resolution: (224, 224),
            sources: vec![],
            noise_sources: vec![],
            audio_sr: 16000,
            semantic: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RawClip {
    pub id: String,
    /// T images, each (H, W, 3) 8-bit.
    pub frames: Vec<Array3<u8>>,
    /// Mono samples in [-1, 1]; length = T * audio_sr (1 frame per second).
    pub waveform: Vec<f64>,
    /// T maps (H, W): 0/1 in binary mode, labels in [0, num_classes) in semantic mode.
    pub masks: Vec<Array2<u8>>,
    pub semantic: bool,
    pub audio_sr: u32,
    pub class_labels: Vec<u8>,
    /// Source clip index per frame, set by the frame-mixing degradation sweep.
    pub frame_provenance: Option<Vec<usize>>,
}

fn class_color(class_id: u8) -> [u8; 3] {
    // fixed 12-entry palette, away from the (40,40,40) background
    const PALETTE: [[u8; 3]; 12] = [
        [220, 60, 60],
        [60, 200, 60],
        [70, 90, 230],
        [230, 200, 50],
        [200, 70, 200],
        [70, 210, 210],
        [240, 140, 40],
        [140, 80, 220],
        [120, 200, 120],
        [210, 110, 140],
        [90, 160, 240],
        [180, 180, 90],
    ];
    PALETTE[(class_id as usize - 1) % 12]
}

fn inside_shape(shape: ShapeClass, di: f64, dj: f64, r: f64) -> bool {
    match shape {
        ShapeClass::Circle => di * di + dj * dj <= r * r,
        ShapeClass::Square => di.abs() <= r && dj.abs() <= r,
        ShapeClass::Triangle => {
            // upward triangle: apex at (-r, 0), base at +r
            if di < -r || di > r {
                return false;
            }
            let half_width = (di + r) / (2.0 * r) * r;
            dj.abs() <= half_width
        }
        ShapeClass::Bar => di.abs() <= r / 3.0 && dj.abs() <= r,
    }
}

fn validate_spec(spec: &ClipSpec) -> Result<()> {
    if spec.num_frames < 1 {
        return Err(Error::invalid("num_frames must be >= 1"));
    }
    let (h, w) = spec.resolution;
    if h < 8 || w < 8 {
        return Err(Error::invalid(format!("resolution too small: {h}x{w}")));
    }
    if spec.sources.is_empty() {
        return Err(Error::invalid("source list is empty"));
    }
    if spec.audio_sr == 0 {
        return Err(Error::invalid("audio_sr must be positive"));
    }
    let all = spec
        .sources
        .iter()
        .chain(spec.noise_sources.iter().map(|n| &n.source));
    for (i, src) in all.enumerate() {
        if src.active_frames.len() != spec.num_frames {
            return Err(Error::invalid(format!(
                "source {i}: active_frames length {} != T {}",
                src.active_frames.len(),
                spec.num_frames
            )));
        }
        if !(0.0..=1.0).contains(&src.loudness) {
            return Err(Error::invalid(format!("source {i}: loudness out of [0,1]")));
        }
        if src.tone.timbre as usize >= NUM_TIMBRES {
            return Err(Error::invalid(format!("source {i}: timbre id out of range")));
        }
        for t in 0..spec.num_frames {
            let (ci, cj) = src.trajectory.center_at(t);
            let s = src.trajectory.size;
            if ci - s < 0.0 || ci + s > 1.0 || cj - s < 0.0 || cj + s > 1.0 {
                return Err(Error::invalid(format!(
                    "source {i}: trajectory leaves frame bounds at t={t}"
                )));
            }
        }
    }
    Ok(())
}

fn timbre_wave(freq: f64, timbre: u8, t_sec: f64) -> f64 {
    use std::f64::consts::TAU;
    let base = (TAU * freq * t_sec).sin();
    match timbre {
        0 => base,
        1 => (base + 0.5 * (TAU * 2.0 * freq * t_sec).sin()) / 1.5,
        _ => (base + 0.34 * (TAU * 3.0 * freq * t_sec).sin()) / 1.34,
    }
}

/// Deterministic clip synthesis: pure function of the spec.
pub fn generate_clip(spec: &ClipSpec) -> Result<RawClip> {
    validate_spec(spec)?;
    let (h, w) = spec.resolution;
    let t_frames = spec.num_frames;
    let min_dim = h.min(w) as f64;

    let mut frames = Vec::with_capacity(t_frames);
    let mut masks = Vec::with_capacity(t_frames);
    for t in 0..t_frames {
        let mut frame = Array3::<u8>::from_elem((h, w, 3), 40);
        let mut mask = Array2::<u8>::zeros((h, w));
        // draw order: regular sources first, then silent-visible noise on top
        let visible: Vec<(&SourceSpec, bool)> = spec
            .sources
            .iter()
            .map(|s| (s, true))
            .chain(
                spec.noise_sources
                    .iter()
                    .filter(|n| n.kind == NoiseKind::SilentVisible)
                    .map(|n| (&n.source, false)),
            )
            .collect();
        for (src, sounding) in visible {
            let (ci, cj) = src.trajectory.center_at(t);
            let (ci, cj) = (ci * h as f64, cj * w as f64);
            let r = src.trajectory.size * min_dim;
            let color = class_color(src.class_id());
            let i_lo = ((ci - r).floor().max(0.0)) as usize;
            let i_hi = ((ci + r).ceil().min(h as f64 - 1.0)) as usize;
            let j_lo = ((cj - r).floor().max(0.0)) as usize;
            let j_hi = ((cj + r).ceil().min(w as f64 - 1.0)) as usize;
            for i in i_lo..=i_hi {
                for j in j_lo..=j_hi {
                    let di = i as f64 + 0.5 - ci;
                    let dj = j as f64 + 0.5 - cj;
                    if inside_shape(src.shape_class, di, dj, r) {
                        for c in 0..3 {
                            frame[[i, j, c]] = color[c];
                        }
                        if sounding && src.active_frames[t] {
                            mask[[i, j]] = if spec.semantic { src.class_id() } else { 1 };
                        }
                    }
                }
            }
        }
        frames.push(frame);
        masks.push(mask);
    }

    let spf = spec.audio_sr as usize; // 1 fps: one second of audio per frame
    let mut waveform = vec![0.0f64; t_frames * spf];
    let audible: Vec<&SourceSpec> = spec
        .sources
        .iter()
        .chain(
            spec.noise_sources
                .iter()
                .filter(|n| n.kind == NoiseKind::AudibleOffscreen)
                .map(|n| &n.source),
        )
        .collect();
    for t in 0..t_frames {
        for src in &audible {
            if !src.active_frames[t] || src.loudness == 0.0 {
                continue;
            }
            for k in 0..spf {
                let global = t * spf + k;
                let t_sec = global as f64 / spec.audio_sr as f64;
                waveform[global] +=
                    0.3 * src.loudness * timbre_wave(src.tone.freq_hz, src.tone.timbre, t_sec);
            }
        }
    }
    for s in waveform.iter_mut() {
        *s = s.clamp(-1.0, 1.0);
    }

    Ok(RawClip {
        id: format!("synth_{:08x}", spec.seed),
        frames,
        waveform,
        masks,
        semantic: spec.semantic,
        audio_sr: spec.audio_sr,
        class_labels: spec.sources.iter().map(|s| s.class_id()).collect(),
        frame_provenance: None,
    })
}

// ---------------------------------------------------------------------------
// Pair swap (counterfactual strategy baseline)
// ---------------------------------------------------------------------------

/// Swap waveforms among a randomly selected `floor(fraction * B)` subset via a
/// derangement; frames and masks stay put. Deterministic given `seed`.
pub fn pair_swap(batch: &[RawClip], fraction: f64, seed: u64) -> Result<Vec<RawClip>> {
    if batch.len() < 2 {
        return Err(Error::invalid("pair_swap: batch size must be >= 2"));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid("pair_swap: fraction out of [0,1]"));
    }
    let b = batch.len();
    let k = (fraction * b as f64).floor() as usize;
    let mut out: Vec<RawClip> = batch.to_vec();
    if k == 0 {
        return Ok(out);
    }
    if k == 1 {
        return Err(Error::invalid(
            "pair_swap: fraction selects a single item; no derangement of size 1",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..b).collect();
    indices.shuffle(&mut rng);
    let selected: Vec<usize> = indices[..k].to_vec();
    // rejection-sample a derangement of the selected subset
    let perm: Vec<usize>;
    loop {
        let mut p: Vec<usize> = (0..k).collect();
        p.shuffle(&mut rng);
        if p.iter().enumerate().all(|(i, &pi)| pi != i) {
            perm = p;
            break;
        }
    }
    for (slot, &dst) in selected.iter().enumerate() {
        let src = selected[perm[slot]];
        out[dst].waveform = batch[src].waveform.clone();
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// AVSBench directory layout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    S4,
    M3,
    Avss,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub subset: Subset,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexFile {
    pub version: u32,
    pub clips: Vec<IndexEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Per-clip load failure; the stream continues past these.
#[derive(Debug)]
pub struct ClipError {
    pub clip_id: String,
    pub message: String,
}

fn write_png_rgb(path: &Path, img: &Array3<u8>) -> Result<()> {
    let (h, w, _) = img.dim();
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Dataset(e.to_string()))?;
    let data: Vec<u8> = img.iter().cloned().collect();
    writer
        .write_image_data(&data)
        .map_err(|e| Error::Dataset(e.to_string()))?;
    Ok(())
}

fn write_png_mask(path: &Path, mask: &Array2<u8>, semantic: bool) -> Result<()> {
    let (h, w) = mask.dim();
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    if semantic {
        // indexed palette: label value = palette index
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        let mut palette = vec![0u8, 0, 0];
        for c in 1..=NUM_CONCEPTS as u8 {
            palette.extend_from_slice(&class_color(c));
        }
        enc.set_palette(palette);
        let mut writer = enc.write_header().map_err(|e| Error::Dataset(e.to_string()))?;
        let data: Vec<u8> = mask.iter().cloned().collect();
        writer
            .write_image_data(&data)
            .map_err(|e| Error::Dataset(e.to_string()))?;
    } else {
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Dataset(e.to_string()))?;
        let data: Vec<u8> = mask.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
        writer
            .write_image_data(&data)
            .map_err(|e| Error::Dataset(e.to_string()))?;
    }
    Ok(())
}

fn read_png_rgb(path: &Path) -> Result<Array3<u8>> {
    let file = fs::File::open(path)?;
    let decoder = png::Decoder::new(file);
    let mut reader = decoder.read_info().map_err(|e| Error::Dataset(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Dataset(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    if info.color_type != png::ColorType::Rgb {
        return Err(Error::Dataset(format!("{}: expected RGB frame", path.display())));
    }
    Array3::from_shape_vec((h, w, 3), buf[..info.buffer_size()].to_vec())
        .map_err(|e| Error::Dataset(e.to_string()))
}

/// Returns (mask, semantic_mode).
fn read_png_mask(path: &Path) -> Result<(Array2<u8>, bool)> {
    let file = fs::File::open(path)?;
    let mut decoder = png::Decoder::new(file);
    // keep indexed data as palette indices
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| Error::Dataset(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Dataset(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    match info.color_type {
        png::ColorType::Indexed => {
            let m = Array2::from_shape_vec((h, w), buf[..info.buffer_size()].to_vec())
                .map_err(|e| Error::Dataset(e.to_string()))?;
            Ok((m, true))
        }
        png::ColorType::Grayscale => {
            let m = Array2::from_shape_vec(
                (h, w),
                buf[..info.buffer_size()].iter().map(|&v| (v >= 128) as u8).collect(),
            )
            .map_err(|e| Error::Dataset(e.to_string()))?;
            Ok((m, false))
        }
        other => Err(Error::Dataset(format!(
            "{}: unsupported mask color type {other:?}",
            path.display()
        ))),
    }
}

fn write_wav(path: &Path, waveform: &[f64], sr: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: sr,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer =
        hound::WavWriter::create(path, spec).map_err(|e| Error::Dataset(e.to_string()))?;
    for &s in waveform {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
        writer.write_sample(v).map_err(|e| Error::Dataset(e.to_string()))?;
    }
    writer.finalize().map_err(|e| Error::Dataset(e.to_string()))?;
    Ok(())
}

fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let mut reader =
        hound::WavReader::open(path).map_err(|e| Error::Dataset(e.to_string()))?;
    let sr = reader.spec().sample_rate;
    let samples: Vec<f64> = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / i16::MAX as f64))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Dataset(e.to_string()))?;
    Ok((samples, sr))
}

fn clip_dir(root: &Path, split: Split, id: &str) -> PathBuf {
    root.join(split.dir_name()).join(id)
}

/// Serialize one clip into the AVSBench layout under `<root>/<split>/<id>/`.
pub fn save_clip(clip: &RawClip, root: &Path, split: Split) -> Result<()> {
    let dir = clip_dir(root, split, &clip.id);
    fs::create_dir_all(dir.join("frames"))?;
    fs::create_dir_all(dir.join("masks"))?;
    for (t, frame) in clip.frames.iter().enumerate() {
        write_png_rgb(&dir.join("frames").join(format!("{t}.png")), frame)?;
    }
    for (t, mask) in clip.masks.iter().enumerate() {
        write_png_mask(&dir.join("masks").join(format!("{t}.png")), mask, clip.semantic)?;
    }
    write_wav(&dir.join("audio.wav"), &clip.waveform, clip.audio_sr)?;
    Ok(())
}

/// Write the split index file.
pub fn save_index(root: &Path, split: Split, entries: &[IndexEntry]) -> Result<()> {
    let dir = root.join(split.dir_name());
    fs::create_dir_all(&dir)?;
    let idx = IndexFile { version: 1, clips: entries.to_vec() };
    fs::write(dir.join("index.json"), serde_json::to_string_pretty(&idx)?)?;
    Ok(())
}

fn load_one_clip(root: &Path, split: Split, id: &str) -> std::result::Result<RawClip, String> {
    let dir = clip_dir(root, split, id);
    let frames_dir = dir.join("frames");
    if !frames_dir.is_dir() {
        return Err(format!("missing frames dir for clip {id}"));
    }
    let mut t = 0usize;
    while frames_dir.join(format!("{t}.png")).is_file() {
        t += 1;
    }
    if t == 0 {
        return Err(format!("no frames for clip {id}"));
    }
    let mut frames = Vec::with_capacity(t);
    for ti in 0..t {
        frames.push(
            read_png_rgb(&frames_dir.join(format!("{ti}.png"))).map_err(|e| e.to_string())?,
        );
    }
    let mut masks = Vec::with_capacity(t);
    let mut semantic = false;
    for ti in 0..t {
        let p = dir.join("masks").join(format!("{ti}.png"));
        if !p.is_file() {
            return Err(format!("missing mask {ti}.png for clip {id}"));
        }
        let (m, sem) = read_png_mask(&p).map_err(|e| e.to_string())?;
        semantic |= sem;
        masks.push(m);
    }
    let wav_path = dir.join("audio.wav");
    if !wav_path.is_file() {
        return Err(format!("missing audio.wav for clip {id}"));
    }
    let (waveform, sr) = read_wav(&wav_path).map_err(|e| e.to_string())?;
    if waveform.len() != t * sr as usize {
        return Err(format!(
            "clip {id}: waveform length {} != T*sr = {}",
            waveform.len(),
            t * sr as usize
        ));
    }
    Ok(RawClip {
        id: id.to_string(),
        frames,
        waveform,
        masks,
        semantic,
        audio_sr: sr,
        class_labels: vec![],
        frame_provenance: None,
    })
}

/// Stream clips from an AVSBench-layout directory. A malformed index file is
/// fatal; per-clip problems surface as error records and the stream continues.
pub fn load_avsbench_dir(
    root: &Path,
    split: Split,
) -> Result<impl Iterator<Item = std::result::Result<RawClip, ClipError>> + '_> {
    let idx_path = root.join(split.dir_name()).join("index.json");
    let text = fs::read_to_string(&idx_path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", idx_path.display())))?;
    let index: IndexFile = serde_json::from_str(&text)
        .map_err(|e| Error::Dataset(format!("malformed index file: {e}")))?;
    let root = root.to_path_buf();
    Ok(index.clips.into_iter().map(move |entry| {
        load_one_clip(&root, split, &entry.id).map_err(|message| ClipError {
            clip_id: entry.id.clone(),
            message,
        })
    }))
}

/// Collect a whole split, splitting successes from per-clip errors.
pub fn load_split(root: &Path, split: Split) -> Result<(Vec<RawClip>, Vec<ClipError>)> {
    let mut clips = Vec::new();
    let mut errors = Vec::new();
    for item in load_avsbench_dir(root, split)? {
        match item {
            Ok(c) => clips.push(c),
            Err(e) => errors.push(e),
        }
    }
    Ok((clips, errors))
}
