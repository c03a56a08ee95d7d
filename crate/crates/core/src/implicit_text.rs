//! Implicit textual representations via inversion against frozen codebooks.
//!
//! A codebook of unit-norm concept embeddings stands in for a pretrained text
//! tower. Tokens are optimized by gradient ascent to maximize the cosine
//! between a feature summary and the soft codebook lookup of each token, then
//! fused across granularities (learned softmax weights) and combined with the
//! audio text through gated concatenation into the composite sequence z.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read as _, Write as _};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data_synth::{NUM_CONCEPTS, NUM_TIMBRES};
use crate::error::{Error, Result};
use crate::nn::{self, Bound, ParamStore};

pub const TEXT_DIM: usize = 128;
pub const TOKENS_PER_MODALITY: usize = 4;
/// Soft-lookup temperature for the codebook encoder.
pub const ENC_TEMPERATURE: f64 = 0.1;
const DIVERSITY_MARGIN: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Visual,
    Audio,
}

#[derive(Debug, Clone)]
pub struct ConceptCodebook {
    /// N_e x d_t, rows orthonormal and frozen.
    pub entries: Array2<f64>,
    pub vocabulary: Vec<String>,
    pub modality: Modality,
}

fn shape_name(idx: usize) -> &'static str {
    ["circle", "square", "triangle", "bar"][idx]
}

/// Concept class names in label order (class 1 first).
pub fn concept_names() -> Vec<String> {
    (0..NUM_CONCEPTS)
        .map(|c| format!("{}_t{}", shape_name(c / NUM_TIMBRES), c % NUM_TIMBRES))
        .collect()
}

fn gram_schmidt_rows(m: &mut Array2<f64>) -> Result<()> {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let dot: f64 = m.row(i).dot(&m.row(j));
            let rj = m.row(j).to_owned();
            m.row_mut(i).zip_mut_with(&rj, |a, &b| *a -= dot * b);
        }
        let norm = m.row(i).dot(&m.row(i)).sqrt();
        if norm < 1e-10 {
            return Err(Error::invalid("gram_schmidt: degenerate row"));
        }
        m.row_mut(i).mapv_inplace(|x| x / norm);
    }
    Ok(())
}

impl ConceptCodebook {
    /// 12 concept entries plus `n_distractors` fillers, drawn from a fixed
    /// seed and orthonormalized. Requires 12 + n_distractors <= d_t.
    pub fn build(modality: Modality, n_distractors: usize, d_t: usize, seed: u64) -> Result<Self> {
        let n = NUM_CONCEPTS + n_distractors;
        if n > d_t {
            return Err(Error::invalid("codebook: more entries than dimensions"));
        }
        let salt = match modality {
            Modality::Visual => 0,
            Modality::Audio => 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(salt));
        let mut entries = nn::randn(&mut rng, &[n, d_t])
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        gram_schmidt_rows(&mut entries)?;
        let mut vocabulary = concept_names();
        for i in 0..n_distractors {
            vocabulary.push(format!("distractor_{i:02}"));
        }
        Ok(ConceptCodebook { entries, vocabulary, modality })
    }

    pub fn validate(&self) -> Result<()> {
        let (n, _) = self.entries.dim();
        if n < 2 {
            return Err(Error::invalid("codebook: need at least 2 entries"));
        }
        if n != self.vocabulary.len() {
            return Err(Error::invalid("codebook: vocabulary size mismatch"));
        }
        for i in 0..n {
            let norm = self.entries.row(i).dot(&self.entries.row(i)).sqrt();
            if (norm - 1.0).abs() > 1e-8 {
                return Err(Error::invalid(format!("codebook: row {i} not unit-norm")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }
}

const CODEBOOK_MAGIC: &[u8; 4] = b"CBK\0";
const CODEBOOK_VERSION: u32 = 1;

/// Layout: magic, version u32, modality u8, n u32, d u32, row-major f32
/// matrix, then n (len u32, utf8 bytes) name records. Little-endian.
pub fn save_codebook(cb: &ConceptCodebook, path: &Path) -> Result<()> {
    cb.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CODEBOOK_MAGIC)?;
    w.write_u32::<LittleEndian>(CODEBOOK_VERSION)?;
    w.write_u8(match cb.modality {
        Modality::Visual => 0,
        Modality::Audio => 1,
    })?;
    let (n, d) = cb.entries.dim();
    w.write_u32::<LittleEndian>(n as u32)?;
    w.write_u32::<LittleEndian>(d as u32)?;
    for &v in cb.entries.iter() {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    for name in &cb.vocabulary {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
    }
    Ok(())
}

pub fn load_codebook(path: &Path) -> Result<ConceptCodebook> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CODEBOOK_MAGIC {
        return Err(Error::Checkpoint("codebook: bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CODEBOOK_VERSION {
        return Err(Error::Checkpoint(format!("codebook: unsupported version {version}")));
    }
    let modality = match r.read_u8()? {
        0 => Modality::Visual,
        1 => Modality::Audio,
        m => return Err(Error::Checkpoint(format!("codebook: bad modality tag {m}"))),
    };
    let n = r.read_u32::<LittleEndian>()? as usize;
    let d = r.read_u32::<LittleEndian>()? as usize;
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        data.push(r.read_f32::<LittleEndian>()? as f64);
    }
    let mut vocabulary = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        vocabulary.push(String::from_utf8(buf).map_err(|_| Error::Checkpoint("codebook: bad utf8 name".into()))?);
    }
    let entries = Array2::from_shape_vec((n, d), data)
        .map_err(|e| Error::Checkpoint(format!("codebook: {e}")))?;
    // re-normalize rows: f32 storage loses a few bits
    let mut entries = entries;
    for mut row in entries.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|x| x / norm);
        }
    }
    let cb = ConceptCodebook { entries, vocabulary, modality };
    cb.validate()?;
    Ok(cb)
}

/// Fixed (non-learnable) projection for feature-to-text-space adaptation,
/// drawn once from the given seed.
pub fn seeded_projection(d_in: usize, d_out: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = nn::randn(&mut rng, &[d_in, d_out]);
    m.into_dimensionality::<ndarray::Ix2>().unwrap() / (d_in as f64).sqrt()
}

/// Soft codebook lookup enc(l) = softmax(E l / tau)^T E on a tape.
fn encode_tokens(tape: &Tape, entries: Var, tokens: Var) -> Var {
    let logits = tape.scale(tape.matmul(tokens, tape.transpose2(entries)), 1.0 / ENC_TEMPERATURE);
    tape.matmul(tape.softmax(logits), entries)
}

fn normalize_rows_var(tape: &Tape, x: Var) -> Var {
    let sq = tape.sum_axis(tape.square(x), 1); // (k,)
    let k = tape.shape(x)[0];
    let norm = tape.reshape(tape.sqrt(tape.add_scalar(sq, 1e-12)), &[k, 1]);
    tape.div(x, norm)
}

/// Objective value plus token matrix after one evaluation.
fn inversion_objective(
    tape: &Tape,
    entries: Var,
    summary: Var,
    tokens: Var,
) -> Var {
    let enc = encode_tokens(tape, entries, tokens);
    let enc_n = normalize_rows_var(tape, enc);
    let k = tape.shape(tokens)[0];
    let s = tape.reshape(summary, &[1, tape.shape(summary)[0]]);
    let cos = tape.matmul(enc_n, tape.transpose2(s)); // (k, 1), summary unit-norm
    let mean_cos = tape.mean_all(cos);
    // diversity penalty above the margin
    let tok_n = normalize_rows_var(tape, tokens);
    let gram = tape.matmul(tok_n, tape.transpose2(tok_n));
    let excess = tape.relu(tape.add_scalar(gram, -DIVERSITY_MARGIN));
    let eye = tape.constant(Array2::<f64>::eye(k).into_dyn());
    let off_diag = tape.mul(excess, tape.add_scalar(tape.neg(eye), 1.0));
    tape.sub(mean_cos, tape.sum_all(off_diag))
}

/// Result of textual inversion: k^t tokens plus the objective trace.
pub struct InversionResult {
    pub tokens: Array2<f64>,
    pub objective_trace: Vec<f64>,
}

/// Gradient-ascent textual inversion of `features` (rows in text space)
/// against a frozen codebook. Tokens are initialized at the k^t entries
/// closest to the feature summary and refined for `steps` iterations.
pub fn invert_text(
    features: &Array2<f64>,
    codebook: &ConceptCodebook,
    k_t: usize,
    steps: usize,
    lr: f64,
) -> Result<InversionResult> {
    if k_t < 1 {
        return Err(Error::invalid("invert_text: k^t must be >= 1"));
    }
    if features.ncols() != codebook.dim() {
        return Err(Error::shape(format!(
            "invert_text: feature dim {} != codebook dim {}",
            features.ncols(),
            codebook.dim()
        )));
    }
    let mut summary: Array1<f64> = features.mean_axis(Axis(0)).unwrap();
    let norm = summary.dot(&summary).sqrt();
    if norm < 1e-10 {
        return Err(Error::invalid("invert_text: zero-norm feature summary"));
    }
    summary.mapv_inplace(|x| x / norm);

    // greedy init at the codebook entries most similar to the summary
    let mut sims: Vec<(usize, f64)> = (0..codebook.entries.nrows())
        .map(|i| (i, codebook.entries.row(i).dot(&summary)))
        .collect();
    sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut tokens = Array2::<f64>::zeros((k_t, codebook.dim()));
    for (t, &(idx, _)) in sims.iter().take(k_t).enumerate() {
        tokens.row_mut(t).assign(&codebook.entries.row(idx));
    }

    let mut trace = Vec::with_capacity(steps + 1);
    for _ in 0..=steps {
        let tape = Tape::new();
        let e = tape.constant(codebook.entries.clone().into_dyn());
        let s = tape.constant(summary.clone().into_dyn());
        let tok = tape.input(tokens.clone().into_dyn());
        let obj = inversion_objective(&tape, e, s, tok);
        trace.push(tape.scalar_value(obj));
        if trace.len() > steps {
            break;
        }
        tape.backward(obj);
        let g = tape.grad(tok).expect("token gradient");
        let g2 = g.into_dimensionality::<ndarray::Ix2>().unwrap();
        tokens = tokens + lr * g2;
    }
    if tokens.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("invert_text tokens".into()));
    }
    Ok(InversionResult { tokens, objective_trace: trace })
}

/// Index of the codebook entry nearest to each token (cosine).
pub fn nearest_entries(tokens: &Array2<f64>, codebook: &ConceptCodebook) -> Vec<usize> {
    tokens
        .rows()
        .into_iter()
        .map(|t| {
            let tn = t.dot(&t).sqrt().max(1e-12);
            (0..codebook.entries.nrows())
                .max_by(|&a, &b| {
                    let sa = codebook.entries.row(a).dot(&t) / tn;
                    let sb = codebook.entries.row(b).dot(&t) / tn;
                    sa.partial_cmp(&sb).unwrap()
                })
                .unwrap()
        })
        .collect()
}

/// Eq. 4 fusion: softmax over w across all (granularity, token) pairs, then
/// the weighted mean of all tokens. `parts` are (N_p, d_t) token matrices.
pub fn fuse_texts(tape: &Tape, parts: &[Var], w: Var) -> Result<Var> {
    if parts.is_empty() {
        return Err(Error::invalid("fuse_texts: no token sets"));
    }
    let all = if parts.len() == 1 { parts[0] } else { tape.concat(parts, 0) };
    let n = tape.shape(all)[0];
    let d = tape.shape(all)[1];
    if tape.shape(w) != vec![n] {
        return Err(Error::shape(format!(
            "fuse_texts: {n} tokens but {:?} weights",
            tape.shape(w)
        )));
    }
    let sw = tape.softmax(w); // (n,)
    let fused = tape.matmul(tape.reshape(sw, &[1, n]), all);
    Ok(tape.reshape(fused, &[d]))
}

pub fn init_gate_concat(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize) {
    for path in ["mit.gate_v", "mit.gate_a"] {
        nn::linear_init(store, rng, &format!("{path}.l1"), d, d);
        nn::linear_init(store, rng, &format!("{path}.l2"), d, d);
        nn::linear_init(store, rng, &format!("{path}.l3"), d, d);
    }
    nn::linear_init(store, rng, "mit.zproj", d, d);
}

fn gate(tape: &Tape, bound: &Bound, path: &str, x: Var) -> Var {
    let h = tape.relu(nn::linear(tape, bound, &format!("{path}.l1"), x));
    let h = tape.relu(nn::linear(tape, bound, &format!("{path}.l2"), h));
    let g = tape.sigmoid(nn::linear(tape, bound, &format!("{path}.l3"), h));
    tape.mul(x, g)
}

/// Eq. 5: independent 3-layer MLP gates per modality, token-axis
/// concatenation, then a shared projection. z is (L_z, d_t) with L_z = 2 k^t.
pub fn gate_concat(tape: &Tape, bound: &Bound, visual: Var, audio: Var) -> Result<Var> {
    if tape.shape(visual)[1] != tape.shape(audio)[1] {
        return Err(Error::shape("gate_concat: token dims differ"));
    }
    let gv = gate(tape, bound, "mit.gate_v", visual);
    let ga = gate(tape, bound, "mit.gate_a", audio);
    let cat = tape.concat(&[gv, ga], 0);
    Ok(nn::linear(tape, bound, "mit.zproj", cat))
}

/// All implicit-text artifacts for one clip.
pub struct ImplicitTextBundle {
    pub l_video: Array2<f64>,
    pub l_segment: Array2<f64>,
    /// T per-frame token matrices.
    pub l_frame: Vec<Array2<f64>>,
    pub l_audio: Array2<f64>,
}

impl ImplicitTextBundle {
    pub fn total_visual_tokens(&self) -> usize {
        self.l_video.nrows()
            + self.l_segment.nrows()
            + self.l_frame.iter().map(|m| m.nrows()).sum::<usize>()
    }

    /// Stack all visual tokens into one (N, d_t) matrix in a fixed order.
    pub fn visual_tokens(&self) -> Array2<f64> {
        let d = self.l_video.ncols();
        let n = self.total_visual_tokens();
        let mut out = Array2::<f64>::zeros((n, d));
        let mut row = 0;
        for m in std::iter::once(&self.l_video)
            .chain(std::iter::once(&self.l_segment))
            .chain(self.l_frame.iter())
        {
            out.slice_mut(ndarray::s![row..row + m.nrows(), ..]).assign(m);
            row += m.nrows();
        }
        out
    }
}

/// Force a gate path fully open or closed (for tests and probes): the first
/// two layers become identity-free passthroughs and the final bias saturates
/// the sigmoid.
pub fn force_gate(store: &mut ParamStore, path: &str, open: bool, d: usize) {
    store.set(&format!("{path}.l1.w"), Array2::<f64>::eye(d).into_dyn());
    store.set(&format!("{path}.l1.b"), ArrayD::zeros(IxDyn(&[d])));
    store.set(&format!("{path}.l2.w"), Array2::<f64>::eye(d).into_dyn());
    store.set(&format!("{path}.l2.b"), ArrayD::zeros(IxDyn(&[d])));
    store.set(&format!("{path}.l3.w"), ArrayD::zeros(IxDyn(&[d, d])));
    let bias = if open { 50.0 } else { -50.0 };
    store.set(&format!("{path}.l3.b"), ArrayD::from_elem(IxDyn(&[d]), bias));
}
