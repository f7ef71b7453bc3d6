//! Corpus handling: feature sequences, delta extension, per-speaker
//! normalization, padded batches with SortaGrad ordering, and a synthetic
//! corpus generator that stands in for real filterbank data.

use std::collections::BTreeMap;
use std::io::{BufRead, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::io as tensor_io;
use crate::numerics::rng::Stream;
use crate::numerics::tensor::{Scalar, Tensor};

/// Number of base filterbank bins expected from feature files.
pub const BASE_BINS: usize = 80;

#[derive(Debug, thiserror::Error)]
pub enum FeaturesError {
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("utterance {utt_id}: {msg}")]
    Utterance { utt_id: String, msg: String },
    #[error("unknown token {token:?} (vocabulary has {vocab_size} entries)")]
    UnknownToken { token: char, vocab_size: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
}

pub type Result<T> = std::result::Result<T, FeaturesError>;

/// Token inventory with the four reserved ids up front.
///
/// Tokenization is character-level; the token list is sorted so a vocabulary
/// built from a corpus does not depend on utterance order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<char>,
}

impl Vocabulary {
    pub const BLANK: usize = 0;
    pub const SOS: usize = 1;
    pub const EOS: usize = 2;
    pub const PAD: usize = 3;
    /// Id of the first real token.
    pub const FIRST_TOKEN: usize = 4;

    /// Build from transcripts: every distinct character, sorted.
    pub fn from_transcripts<'a>(transcripts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set: Vec<char> = transcripts
            .into_iter()
            .flat_map(|t| t.chars())
            .collect();
        set.sort_unstable();
        set.dedup();
        Vocabulary { tokens: set }
    }

    /// Total id count including the reserved ids.
    pub fn size(&self) -> usize {
        Self::FIRST_TOKEN + self.tokens.len()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.tokens
                    .binary_search(&c)
                    .map(|i| Self::FIRST_TOKEN + i)
                    .map_err(|_| FeaturesError::UnknownToken { token: c, vocab_size: self.size() })
            })
            .collect()
    }

    /// Inverse of [`Vocabulary::encode`]; reserved ids render as markers.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&id| match id {
                Self::BLANK => '␣',
                Self::SOS => '‹',
                Self::EOS => '›',
                Self::PAD => '·',
                _ => self.tokens.get(id - Self::FIRST_TOKEN).copied().unwrap_or('?'),
            })
            .collect()
    }
}

/// One utterance: features plus its token-id transcript.
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    pub utt_id: String,
    pub speaker_id: String,
    /// `t × D` frames, finite, t ≥ 1.
    pub frames: Tensor<f64>,
    /// Token ids, all ≥ [`Vocabulary::FIRST_TOKEN`].
    pub transcript: Vec<usize>,
}

impl FeatureSequence {
    pub fn duration_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn dims(&self) -> usize {
        self.frames.shape()[1]
    }
}

/// Padded batch ready for the encoder.
#[derive(Debug, Clone)]
pub struct Batch<T: Scalar> {
    /// `B × t_max × D`; padding positions are zero.
    pub features: Tensor<T>,
    /// Real frame count per utterance.
    pub feature_lengths: Vec<usize>,
    /// `B × n_max` token ids, padded with [`Vocabulary::PAD`].
    pub targets: Vec<usize>,
    /// Real token count per utterance.
    pub target_lengths: Vec<usize>,
    /// `B × t_max`; true where the position is padding.
    pub pad_mask: Vec<bool>,
    pub utt_ids: Vec<String>,
}

impl<T: Scalar> Batch<T> {
    pub fn batch_size(&self) -> usize {
        self.feature_lengths.len()
    }

    pub fn t_max(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn n_max(&self) -> usize {
        if self.target_lengths.is_empty() {
            0
        } else {
            self.targets.len() / self.target_lengths.len()
        }
    }

    /// Target ids of one utterance, without padding.
    pub fn target(&self, b: usize) -> &[usize] {
        let n_max = self.n_max();
        &self.targets[b * n_max..b * n_max + self.target_lengths[b]]
    }
}

/// Append first- and second-order deltas: `t × D` → `t × 3D`.
///
/// Deltas use the standard ±2 regression window with edge replication:
/// Δ[t] = (1·(x[t+1]−x[t−1]) + 2·(x[t+2]−x[t−2])) / (2·(1²+2²)), and ΔΔ is
/// the same operator applied to Δ.
pub fn add_deltas(frames: &Tensor<f64>) -> Tensor<f64> {
    let t_len = frames.shape()[0];
    let d = frames.shape()[1];
    let x = frames.data();
    let clamp = |i: isize| -> usize { i.clamp(0, t_len as isize - 1) as usize };
    let delta_of = |src: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; t_len * d];
        for t in 0..t_len {
            let (m2, m1) = (clamp(t as isize - 2), clamp(t as isize - 1));
            let (p1, p2) = (clamp(t as isize + 1), clamp(t as isize + 2));
            for j in 0..d {
                out[t * d + j] =
                    (src[p1 * d + j] - src[m1 * d + j] + 2.0 * (src[p2 * d + j] - src[m2 * d + j]))
                        / 10.0;
            }
        }
        out
    };
    let d1 = delta_of(x);
    let d2 = delta_of(&d1);
    let mut out = vec![0.0; t_len * 3 * d];
    for t in 0..t_len {
        out[t * 3 * d..t * 3 * d + d].copy_from_slice(&x[t * d..(t + 1) * d]);
        out[t * 3 * d + d..t * 3 * d + 2 * d].copy_from_slice(&d1[t * d..(t + 1) * d]);
        out[t * 3 * d + 2 * d..t * 3 * d + 3 * d].copy_from_slice(&d2[t * d..(t + 1) * d]);
    }
    Tensor::new(vec![t_len, 3 * d], out)
}

/// Per-speaker, per-dimension standardization over all of a speaker's
/// frames. Dimensions with zero variance are mean-subtracted only.
pub fn speaker_normalize(corpus: &mut [FeatureSequence]) -> Result<()> {
    if corpus.is_empty() {
        return Err(FeaturesError::EmptyCorpus);
    }
    let d = corpus[0].dims();
    // Group utterance indices by speaker; BTreeMap for a fixed order.
    let mut by_speaker: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, u) in corpus.iter().enumerate() {
        by_speaker.entry(u.speaker_id.clone()).or_default().push(i);
    }
    for (_, utts) in by_speaker {
        let total_frames: usize = utts.iter().map(|&i| corpus[i].duration_frames()).sum();
        let mut mean = vec![0.0f64; d];
        for &i in &utts {
            for frame in corpus[i].frames.data().chunks(d) {
                for (m, &v) in mean.iter_mut().zip(frame) {
                    *m += v;
                }
            }
        }
        for m in mean.iter_mut() {
            *m /= total_frames as f64;
        }
        let mut var = vec![0.0f64; d];
        for &i in &utts {
            for frame in corpus[i].frames.data().chunks(d) {
                for (s, (&v, &m)) in var.iter_mut().zip(frame.iter().zip(&mean)) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let inv_std: Vec<f64> = var
            .iter()
            .map(|&s| {
                let v = s / total_frames as f64;
                if v > 0.0 {
                    1.0 / v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        for &i in &utts {
            for frame in corpus[i].frames.data_mut().chunks_mut(d) {
                for (j, v) in frame.iter_mut().enumerate() {
                    *v = (*v - mean[j]) * inv_std[j];
                }
            }
        }
    }
    Ok(())
}

/// Batches for one epoch. Epoch 0 orders utterances by ascending frame
/// count (SortaGrad); later epochs shuffle uniformly under `(seed, epoch)`.
pub fn make_batches<T: Scalar>(
    corpus: &[FeatureSequence],
    batch_size: usize,
    epoch: u64,
    seed: u64,
) -> Vec<Batch<T>> {
    let all: Vec<usize> = (0..corpus.len()).collect();
    make_batches_indexed(corpus, &all, batch_size, epoch, seed)
}

/// As [`make_batches`], but restricted to a subset of utterance indices —
/// the training half of a train/validation split, without cloning features.
pub fn make_batches_indexed<T: Scalar>(
    corpus: &[FeatureSequence],
    indices: &[usize],
    batch_size: usize,
    epoch: u64,
    seed: u64,
) -> Vec<Batch<T>> {
    assert!(batch_size >= 1, "batch_size must be ≥ 1");
    let mut order: Vec<usize> = indices.to_vec();
    if epoch == 0 {
        order.sort_by_key(|&i| corpus[i].duration_frames());
    } else {
        let mut stream = Stream::derived(seed, "epoch_shuffle", &[epoch]);
        stream.shuffle(&mut order);
    }
    order
        .chunks(batch_size)
        .map(|chunk| build_batch(corpus, chunk))
        .collect()
}

/// Standard feature preparation: append delta and delta-delta channels,
/// then standardize per speaker. Call exactly once per corpus — deltas
/// triple the feature dimension.
pub fn prepare_corpus(corpus: &mut [FeatureSequence]) -> Result<()> {
    for u in corpus.iter_mut() {
        u.frames = add_deltas(&u.frames);
    }
    speaker_normalize(corpus)
}

/// Assemble one padded batch from the given utterance indices.
pub fn build_batch<T: Scalar>(corpus: &[FeatureSequence], indices: &[usize]) -> Batch<T> {
    let b = indices.len();
    let t_max = indices.iter().map(|&i| corpus[i].duration_frames()).max().unwrap_or(0);
    let n_max = indices.iter().map(|&i| corpus[i].transcript.len()).max().unwrap_or(0);
    let d = corpus[indices[0]].dims();

    let mut features = Tensor::<T>::zeros(&[b, t_max, d]);
    let mut pad_mask = vec![true; b * t_max];
    let mut targets = vec![Vocabulary::PAD; b * n_max];
    let mut feature_lengths = Vec::with_capacity(b);
    let mut target_lengths = Vec::with_capacity(b);
    let mut utt_ids = Vec::with_capacity(b);

    for (row, &i) in indices.iter().enumerate() {
        let u = &corpus[i];
        let t_len = u.duration_frames();
        let dst = features.data_mut();
        for (t, frame) in u.frames.data().chunks(d).enumerate() {
            for (j, &v) in frame.iter().enumerate() {
                dst[(row * t_max + t) * d + j] = T::from_f64(v);
            }
            pad_mask[row * t_max + t] = false;
        }
        targets[row * n_max..row * n_max + u.transcript.len()].copy_from_slice(&u.transcript);
        feature_lengths.push(t_len);
        target_lengths.push(u.transcript.len());
        utt_ids.push(u.utt_id.clone());
    }
    Batch { features, feature_lengths, targets, target_lengths, pad_mask, utt_ids }
}

/// Shape of a synthetic corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub num_utterances: usize,
    /// Distinct characters; transcripts draw uniformly from them.
    pub alphabet_size: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub frames_per_token: usize,
    pub num_speakers: usize,
    /// 0 → a transcript always yields the same frames, no speaker effects.
    pub noise_level: f64,
    /// Keys the per-token spectral templates. Corpora that must share an
    /// acoustic mapping (pretraining vs fine-tuning splits) share this seed.
    pub template_seed: u64,
    pub base_bins: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            num_utterances: 32,
            alphabet_size: 16,
            min_tokens: 3,
            max_tokens: 8,
            frames_per_token: 8,
            num_speakers: 4,
            noise_level: 0.05,
            template_seed: 7,
            base_bins: BASE_BINS,
        }
    }
}

/// The alphabet a synthesis config draws transcripts from.
pub fn synth_alphabet(alphabet_size: usize) -> Vec<char> {
    (0..alphabet_size)
        .map(|i| char::from_u32('a' as u32 + i as u32).expect("alphabet stays in ASCII"))
        .collect()
}

/// Smooth spectral template for one character: a handful of seeded Gaussian
/// bumps over the mel axis, with a mild per-frame amplitude ramp so the
/// token has temporal structure too.
fn token_template(template_seed: u64, token_index: usize, cfg: &SynthesisConfig) -> Vec<f64> {
    let mut s = Stream::derived(template_seed, "template", &[token_index as u64]);
    let bumps = 2 + s.below(2);
    let mut profile = vec![0.0f64; cfg.base_bins];
    for _ in 0..bumps {
        let center = s.uniform_in(0.0, cfg.base_bins as f64);
        let width = s.uniform_in(2.0, 6.0);
        let height = s.uniform_in(1.0, 3.0);
        for (j, p) in profile.iter_mut().enumerate() {
            let z = (j as f64 - center) / width;
            *p += height * (-0.5 * z * z).exp();
        }
    }
    let ramp = s.uniform_in(-0.3, 0.3);
    let mut out = vec![0.0f64; cfg.frames_per_token * cfg.base_bins];
    for f in 0..cfg.frames_per_token {
        let gain = 1.0 + ramp * (f as f64 / cfg.frames_per_token.max(1) as f64 - 0.5);
        for j in 0..cfg.base_bins {
            out[f * cfg.base_bins + j] = gain * profile[j];
        }
    }
    out
}

/// Deterministic synthetic corpus: each transcript token maps to a
/// characteristic spectral template, plus speaker offset/gain and frame
/// noise that all scale with `noise_level`.
pub fn synthesize_corpus(cfg: &SynthesisConfig, seed: u64) -> (Vec<FeatureSequence>, Vocabulary) {
    assert!(cfg.num_utterances > 0 && cfg.alphabet_size > 0, "synthesis spec must be positive");
    assert!(cfg.min_tokens >= 1 && cfg.max_tokens >= cfg.min_tokens);
    let alphabet = synth_alphabet(cfg.alphabet_size);
    let alphabet_text: String = alphabet.iter().collect();
    let vocab = Vocabulary::from_transcripts([alphabet_text.as_str()]);
    let templates: Vec<Vec<f64>> = (0..cfg.alphabet_size)
        .map(|i| token_template(cfg.template_seed, i, cfg))
        .collect();

    // Per-speaker offset and gain directions (unit-scale; noise_level sets
    // how much they matter).
    let speaker_fx: Vec<(Vec<f64>, f64)> = (0..cfg.num_speakers.max(1))
        .map(|sp| {
            let mut s = Stream::derived(seed, "speaker", &[sp as u64]);
            let offset: Vec<f64> = (0..cfg.base_bins).map(|_| s.normal()).collect();
            let gain = s.normal() * 0.1;
            (offset, gain)
        })
        .collect();

    let mut corpus = Vec::with_capacity(cfg.num_utterances);
    for u in 0..cfg.num_utterances {
        let mut s = Stream::derived(seed, "utterance", &[u as u64]);
        let n_tokens = cfg.min_tokens + s.below(cfg.max_tokens - cfg.min_tokens + 1);
        let token_ids: Vec<usize> = (0..n_tokens).map(|_| s.below(cfg.alphabet_size)).collect();
        let transcript: String = token_ids.iter().map(|&i| alphabet[i]).collect();
        let speaker = u % cfg.num_speakers.max(1);
        let (offset, gain) = &speaker_fx[speaker];

        let t_len = n_tokens * cfg.frames_per_token;
        let mut frames = vec![0.0f64; t_len * cfg.base_bins];
        for (tok_pos, &tok) in token_ids.iter().enumerate() {
            let tpl = &templates[tok];
            let base = tok_pos * cfg.frames_per_token * cfg.base_bins;
            frames[base..base + tpl.len()].copy_from_slice(tpl);
        }
        if cfg.noise_level > 0.0 {
            let mut noise = Stream::derived(seed, "noise", &[u as u64]);
            for (t, chunk) in frames.chunks_mut(cfg.base_bins).enumerate() {
                let _ = t;
                for (j, v) in chunk.iter_mut().enumerate() {
                    *v = *v * (1.0 + cfg.noise_level * gain)
                        + cfg.noise_level * (offset[j] + noise.normal());
                }
            }
        }
        corpus.push(FeatureSequence {
            utt_id: format!("utt-{u:05}"),
            speaker_id: format!("spk-{speaker:03}"),
            frames: Tensor::new(vec![t_len, cfg.base_bins], frames),
            transcript: vocab.encode(&transcript).expect("alphabet is in the vocabulary"),
        });
    }
    (corpus, vocab)
}

/// One line of the JSON-lines manifest.
#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    utt_id: String,
    speaker_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    feature_path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    frames_inline: Option<Vec<Vec<f64>>>,
    transcript: String,
}

/// Read a manifest; relative feature paths resolve against the manifest's
/// directory. Transcripts stay as text — call [`tokenize_corpus`] once a
/// vocabulary exists.
pub fn load_manifest(path: &Path) -> Result<Vec<(FeatureSequence, String)>> {
    let file = std::fs::File::open(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (line_no, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
            FeaturesError::Manifest { line: line_no + 1, msg: e.to_string() }
        })?;
        let frames = match (&rec.feature_path, &rec.frames_inline) {
            (Some(p), None) => tensor_io::load_tensor::<f64>(&base.join(p))?,
            (None, Some(rows)) => {
                let d = rows.first().map(|r| r.len()).unwrap_or(0);
                if d == 0 || rows.iter().any(|r| r.len() != d) {
                    return Err(FeaturesError::Manifest {
                        line: line_no + 1,
                        msg: "frames_inline rows must be nonempty and equal-length".into(),
                    });
                }
                Tensor::new(vec![rows.len(), d], rows.iter().flatten().copied().collect())
            }
            _ => {
                return Err(FeaturesError::Manifest {
                    line: line_no + 1,
                    msg: "record needs exactly one of feature_path or frames_inline".into(),
                })
            }
        };
        if frames.shape()[0] == 0 {
            return Err(FeaturesError::Utterance {
                utt_id: rec.utt_id.clone(),
                msg: "zero frames".into(),
            });
        }
        if !frames.all_finite() {
            return Err(FeaturesError::Utterance {
                utt_id: rec.utt_id.clone(),
                msg: "non-finite frame values".into(),
            });
        }
        out.push((
            FeatureSequence {
                utt_id: rec.utt_id,
                speaker_id: rec.speaker_id,
                frames,
                transcript: Vec::new(),
            },
            rec.transcript,
        ));
    }
    if out.is_empty() {
        return Err(FeaturesError::EmptyCorpus);
    }
    Ok(out)
}

/// Write a corpus (with transcripts rendered through `vocab`) as a manifest
/// with inline frames — handy for small synthetic corpora.
pub fn save_manifest(
    path: &Path,
    corpus: &[FeatureSequence],
    vocab: &Vocabulary,
) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for u in corpus {
        let d = u.dims();
        let rows: Vec<Vec<f64>> = u.frames.data().chunks(d).map(|c| c.to_vec()).collect();
        let rec = ManifestRecord {
            utt_id: u.utt_id.clone(),
            speaker_id: u.speaker_id.clone(),
            feature_path: None,
            frames_inline: Some(rows),
            transcript: vocab.decode(&u.transcript),
        };
        serde_json::to_writer(&mut file, &rec)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

/// Attach token ids to manifest-loaded utterances.
pub fn tokenize_corpus(
    loaded: Vec<(FeatureSequence, String)>,
    vocab: &Vocabulary,
) -> Result<Vec<FeatureSequence>> {
    loaded
        .into_iter()
        .map(|(mut seq, text)| {
            seq.transcript = vocab.encode(&text)?;
            Ok(seq)
        })
        .collect()
}
