//! Deterministic paired corpus: token sequences realized as noisy
//! prototype frames with exact word boundaries and a three-way label.
//!
//! On disk a corpus is a directory holding `manifest.jsonl`, one `TNSR`
//! frame file per utterance under `frames/`, and one boundary text file per
//! utterance under `boundaries/`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cif::{Boundary, BoundarySet};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub vocab: usize,
    pub d_in: usize,
    /// Inclusive range of raw frames emitted per token.
    pub frames_per_token: (usize, usize),
    pub raw_hop_ms: f64,
    pub noise_sigma: f64,
    /// Inclusive range of tokens per utterance.
    pub tokens_per_utt: (usize, usize),
    /// Valence in {-1, 0, 1} per vocabulary entry; empty means the default map.
    pub sentiment_map: Vec<i8>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab: 32,
            d_in: 16,
            frames_per_token: (3, 9),
            raw_hop_ms: 5.0,
            noise_sigma: 0.1,
            tokens_per_utt: (4, 12),
            sentiment_map: Vec::new(),
            seed: 0,
        }
    }
}

/// One negative and one positive entry per eight ids, which keeps the
/// three classes close to balanced for 4 to 12 token utterances.
pub fn default_sentiment_map(vocab: usize) -> Vec<i8> {
    (0..vocab)
        .map(|v| match v % 8 {
            0 => -1,
            4 => 1,
            _ => 0,
        })
        .collect()
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.vocab < 8 {
            return bad("vocab must be at least 8");
        }
        if self.d_in == 0 {
            return bad("d_in must be positive");
        }
        let (f0, f1) = self.frames_per_token;
        let (t0, t1) = self.tokens_per_utt;
        if f0 == 0 || f0 > f1 || t0 == 0 || t0 > t1 {
            return bad("frames_per_token and tokens_per_utt must be non-empty positive ranges");
        }
        if !(self.raw_hop_ms > 0.0) || !(self.noise_sigma >= 0.0) {
            return bad("raw_hop_ms must be positive and noise_sigma non-negative");
        }
        if !self.sentiment_map.is_empty()
            && (self.sentiment_map.len() != self.vocab || self.sentiment_map.iter().any(|v| !(-1..=1).contains(v)))
        {
            return bad("sentiment_map needs one value in {-1, 0, 1} per vocabulary entry");
        }
        Ok(())
    }

    pub fn sentiment(&self) -> Vec<i8> {
        if self.sentiment_map.is_empty() {
            default_sentiment_map(self.vocab)
        } else {
            self.sentiment_map.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub utterance_id: String,
    pub token_ids: Vec<usize>,
    /// `M_raw x d_in`
    pub raw_frames: Tensor,
    pub raw_hop_ms: f64,
    /// Raw-time boundaries, one contiguous segment per token.
    pub gold_boundaries: BoundarySet,
    pub label: usize,
}

impl Utterance {
    pub fn num_tokens(&self) -> usize {
        self.token_ids.len()
    }
}

/// Negative, zero and positive valence sums map to 0, 1 and 2.
pub fn label_for(ids: &[usize], sentiment: &[i8]) -> usize {
    let s: i64 = ids.iter().map(|&i| i64::from(sentiment[i])).sum();
    match s.signum() {
        -1 => 0,
        0 => 1,
        _ => 2,
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn min_pairwise_distance(rows: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let d: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            best = best.min(d.sqrt());
        }
    }
    best
}

/// One standard-normal prototype vector per vocabulary entry, redrawn until
/// every pair is more than `4σ` apart.
pub fn prototypes(config: &SynthConfig) -> Result<Vec<Vec<f64>>> {
    let mut rng = stream(config.seed, 0);
    for _ in 0..1000 {
        let rows: Vec<Vec<f64>> = (0..config.vocab)
            .map(|_| (0..config.d_in).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        if min_pairwise_distance(&rows) > 4.0 * config.noise_sigma {
            return Ok(rows);
        }
    }
    Err(Error::DegenerateData(format!(
        "no prototype set with pairwise distance above {} after 1000 draws",
        4.0 * config.noise_sigma
    )))
}

fn generate_one(config: &SynthConfig, protos: &[Vec<f64>], sentiment: &[i8], index: usize) -> Utterance {
    let mut rng = stream(config.seed, index as u64 + 1);
    let n = rng.random_range(config.tokens_per_utt.0..=config.tokens_per_utt.1);
    let mut ids = Vec::with_capacity(n);
    while ids.len() < n {
        // no immediate repeats: every token boundary is visible in the frames
        let id = rng.random_range(0..config.vocab);
        if ids.last() != Some(&id) {
            ids.push(id);
        }
    }
    let noise = Normal::new(0.0, config.noise_sigma).expect("validated sigma");
    let d = config.d_in;
    let mut data = Vec::new();
    let mut entries = Vec::with_capacity(n);
    let mut start = 0usize;
    for (k, &id) in ids.iter().enumerate() {
        let len = rng.random_range(config.frames_per_token.0..=config.frames_per_token.1);
        for _ in 0..len {
            data.extend(protos[id].iter().map(|p| p + noise.sample(&mut rng)));
        }
        entries.push(Boundary {
            token_index: k,
            left_ms: start as f64 * config.raw_hop_ms,
            right_ms: (start + len) as f64 * config.raw_hop_ms,
        });
        start += len;
    }
    Utterance {
        utterance_id: format!("utt{index:05}"),
        label: label_for(&ids, sentiment),
        token_ids: ids,
        raw_frames: Tensor::matrix(start, d, data).expect("frame count matches"),
        raw_hop_ms: config.raw_hop_ms,
        gold_boundaries: BoundarySet { entries },
    }
}

/// Builds `count` utterances in memory. Utterance `i` depends only on the
/// seed and `i`, so any subset can be regenerated independently.
pub fn generate_utterances(config: &SynthConfig, count: usize) -> Result<Vec<Utterance>> {
    config.validate()?;
    if count == 0 {
        return Err(Error::Config("corpus count must be at least 1".into()));
    }
    let protos = prototypes(config)?;
    let sentiment = config.sentiment();
    Ok((0..count).map(|i| generate_one(config, &protos, &sentiment, i)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    id: String,
    n: usize,
    m_raw: usize,
    label: usize,
    raw_hop_ms: f64,
    token_ids: Vec<usize>,
    frames: String,
    boundaries: String,
}

/// Writes utterances under `dir` in the corpus layout.
pub fn write_corpus(dir: &Path, utterances: &[Utterance]) -> Result<()> {
    for sub in ["frames", "boundaries"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mpath = dir.join(MANIFEST);
    let file = fs::File::create(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut manifest = BufWriter::new(file);
    for u in utterances {
        let rec = ManifestRecord {
            id: u.utterance_id.clone(),
            n: u.num_tokens(),
            m_raw: u.raw_frames.shape()[0],
            label: u.label,
            raw_hop_ms: u.raw_hop_ms,
            token_ids: u.token_ids.clone(),
            frames: format!("frames/{}.tnsr", u.utterance_id),
            boundaries: format!("boundaries/{}.txt", u.utterance_id),
        };
        let fp = dir.join(&rec.frames);
        fs::write(&fp, u.raw_frames.to_bytes()).map_err(|e| Error::io(&fp, e))?;
        let bp = dir.join(&rec.boundaries);
        fs::write(&bp, u.gold_boundaries.to_text()).map_err(|e| Error::io(&bp, e))?;
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(manifest, "{line}").map_err(|e| Error::io(&mpath, e))?;
    }
    manifest.flush().map_err(|e| Error::io(&mpath, e))
}

/// Generates and writes a corpus; identical inputs give identical bytes.
pub fn generate_corpus(config: &SynthConfig, count: usize, dir: &Path) -> Result<Vec<Utterance>> {
    let utts = generate_utterances(config, count)?;
    write_corpus(dir, &utts)?;
    Ok(utts)
}

/// Streams utterances from a corpus directory, one manifest line at a time.
pub struct CorpusReader {
    dir: PathBuf,
    lines: std::io::Lines<BufReader<fs::File>>,
    index: usize,
}

impl CorpusReader {
    pub fn open(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let file = fs::File::open(&mpath).map_err(|e| Error::io(&mpath, e))?;
        Ok(CorpusReader {
            dir: dir.to_path_buf(),
            lines: BufReader::new(file).lines(),
            index: 0,
        })
    }

    fn parse(&self, line: &str) -> Result<Utterance> {
        let corrupt = |path: PathBuf, reason: String| Error::CorruptFile {
            path,
            index: self.index,
            reason,
        };
        let mpath = self.dir.join(MANIFEST);
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| corrupt(mpath.clone(), e.to_string()))?;
        let fp = self.dir.join(&rec.frames);
        let bytes = fs::read(&fp).map_err(|e| Error::io(&fp, e))?;
        let frames = Tensor::from_bytes(&bytes).map_err(|e| corrupt(fp.clone(), e))?;
        if frames.rank() != 2 || frames.shape()[0] != rec.m_raw {
            return Err(corrupt(fp, format!("frame shape {:?}, manifest says {} rows", frames.shape(), rec.m_raw)));
        }
        let bp = self.dir.join(&rec.boundaries);
        let text = fs::read_to_string(&bp).map_err(|e| Error::io(&bp, e))?;
        let gold = BoundarySet::parse(&text).map_err(|e| corrupt(bp.clone(), e))?;
        if gold.len() != rec.n || rec.token_ids.len() != rec.n {
            return Err(corrupt(mpath, format!("token count {} disagrees with ids/boundaries", rec.n)));
        }
        Ok(Utterance {
            utterance_id: rec.id,
            token_ids: rec.token_ids,
            raw_frames: frames,
            raw_hop_ms: rec.raw_hop_ms,
            gold_boundaries: gold,
            label: rec.label,
        })
    }
}

impl Iterator for CorpusReader {
    type Item = Result<Utterance>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(Error::io(self.dir.join(MANIFEST), e))),
            };
            if line.trim().is_empty() {
                continue;
            }
            let item = self.parse(&line);
            self.index += 1;
            return Some(item);
        }
    }
}

pub fn load_corpus(dir: &Path) -> Result<Vec<Utterance>> {
    CorpusReader::open(dir)?.collect()
}

/// Shuffles with `seed` and cuts into train/dev/test by rounded fractions;
/// the test split takes the remainder.
pub fn split_corpus<T: Clone>(corpus: &[T], fractions: [f64; 3], seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::BadFractions(fractions.to_vec()));
    }
    let n = corpus.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_dev = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let pick = |r: &[usize]| r.iter().map(|&i| corpus[i].clone()).collect::<Vec<_>>();
    Ok((
        pick(&idx[..n_train]),
        pick(&idx[n_train..n_train + n_dev]),
        pick(&idx[n_train + n_dev..]),
    ))
}
