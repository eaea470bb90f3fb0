//! Seeded synthetic grounding clips and their JSONL encoding.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FrameBatch;
use crate::config::TrainConfig;
use crate::error::{config_err, Error, Result};
use crate::metrics::{t_iou, BoxCxcywh, GroundTruthTube};
use crate::rng::{derive_seed, normal, seeded, SeededRng};
use crate::tensor::Tensor;

/// Filler words mixed into every query besides the target word.
const FILLER_WORDS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub id: usize,
    pub seed: u64,
    pub batch: FrameBatch,
    pub tube: GroundTruthTube,
}

/// On-disk record, one JSON object per line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: usize,
    pub seed: u64,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub video_features: Vec<f64>,
    pub text_tokens: Vec<f64>,
    pub t_s: usize,
    pub t_e: usize,
    pub boxes: Vec<BoxCxcywh>,
}

/// Fixed visual patterns and word embeddings shared by every split of a
/// configuration. Patterns are orthonormal.
#[derive(Clone, Debug)]
pub struct PatternBank {
    pub patterns: Vec<Vec<f64>>,
    pub words: Vec<Vec<f64>>,
    pub fillers: Vec<Vec<f64>>,
}

fn unit_gaussian(n: usize, rng: &mut SeededRng) -> Vec<f64> {
    let v = normal(&[n], 1.0, rng).into_data();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

impl PatternBank {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        if cfg.num_patterns > cfg.channels {
            return Err(config_err("num_patterns cannot exceed channels"));
        }
        let mut rng = seeded(derive_seed(cfg.seed, "patterns"));
        // Gram-Schmidt over Gaussian draws.
        let mut patterns: Vec<Vec<f64>> = Vec::with_capacity(cfg.num_patterns);
        while patterns.len() < cfg.num_patterns {
            let mut v = unit_gaussian(cfg.channels, &mut rng);
            for p in &patterns {
                let dot: f64 = v.iter().zip(p).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(p).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                patterns.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        let words = (0..cfg.num_patterns)
            .map(|_| unit_gaussian(cfg.text_dim, &mut rng))
            .collect();
        let fillers = (0..FILLER_WORDS)
            .map(|_| unit_gaussian(cfg.text_dim, &mut rng))
            .collect();
        Ok(PatternBank {
            patterns,
            words,
            fillers,
        })
    }
}

fn random_box(rng: &mut SeededRng) -> BoxCxcywh {
    let w = rng.random_range(0.3..0.6);
    let h = rng.random_range(0.3..0.6);
    let cx = rng.random_range(w / 2.0..1.0 - w / 2.0);
    let cy = rng.random_range(h / 2.0..1.0 - h / 2.0);
    [cx, cy, w, h]
}

fn inside(b: &BoxCxcywh, x: f64, y: f64) -> bool {
    (x - b[0]).abs() <= b[2] / 2.0 && (y - b[1]).abs() <= b[3] / 2.0
}

/// Adds `amplitude·pattern` to every pixel of frame `t` whose centre lies
/// in `b`.
fn paint(
    video: &mut [f64],
    cfg: &TrainConfig,
    t: usize,
    b: &BoxCxcywh,
    pattern: &[f64],
    amplitude: f64,
) {
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    for y in 0..h {
        for x in 0..w {
            if inside(b, (x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64) {
                let base = ((t * h + y) * w + x) * c;
                video[base..base + c]
                    .iter_mut()
                    .zip(pattern)
                    .for_each(|(v, p)| *v += amplitude * p);
            }
        }
    }
}

/// Builds one clip: a target pattern painted inside a linearly moving box
/// over `[t_s, t_e]`, a distractor pattern in a static box on every frame,
/// Gaussian noise everywhere, and a query whose first token is the target
/// word.
pub fn generate_sample(
    cfg: &TrainConfig,
    bank: &PatternBank,
    id: usize,
    seed: u64,
) -> Result<SyntheticSample> {
    let mut rng = seeded(seed);
    let frames = cfg.frames;
    let target = rng.random_range(0..cfg.num_patterns);
    let len = rng.random_range(2..=frames);
    let t_s = rng.random_range(0..=frames - len);
    let t_e = t_s + len - 1;
    let (b0, b1) = (random_box(&mut rng), random_box(&mut rng));
    let boxes: Vec<BoxCxcywh> = (0..len)
        .map(|i| {
            let a = if len > 1 {
                i as f64 / (len - 1) as f64
            } else {
                0.0
            };
            std::array::from_fn(|k| b0[k] + a * (b1[k] - b0[k]))
        })
        .collect();
    let mut video = normal(
        &[frames, cfg.height, cfg.width, cfg.channels],
        cfg.noise_std,
        &mut rng,
    )
    .into_data();
    if cfg.num_patterns > 1 {
        let distractor = (target + rng.random_range(1..cfg.num_patterns)) % cfg.num_patterns;
        let db = random_box(&mut rng);
        for t in 0..frames {
            paint(
                &mut video,
                cfg,
                t,
                &db,
                &bank.patterns[distractor],
                cfg.signal_amplitude,
            );
        }
    }
    for (i, b) in boxes.iter().enumerate() {
        paint(
            &mut video,
            cfg,
            t_s + i,
            b,
            &bank.patterns[target],
            cfg.signal_amplitude,
        );
    }
    let mut text = normal(&[cfg.text_tokens, cfg.text_dim], cfg.noise_std, &mut rng).into_data();
    for l in 0..cfg.text_tokens {
        let word = if l == 0 {
            &bank.words[target]
        } else {
            &bank.fillers[rng.random_range(0..FILLER_WORDS)]
        };
        text[l * cfg.text_dim..(l + 1) * cfg.text_dim]
            .iter_mut()
            .zip(word)
            .for_each(|(v, w)| *v += w);
    }
    let batch = FrameBatch::new(
        Tensor::new(&[frames, cfg.height, cfg.width, cfg.channels], video)?,
        Tensor::new(&[cfg.text_tokens, cfg.text_dim], text)?,
    )?;
    Ok(SyntheticSample {
        id,
        seed,
        batch,
        tube: GroundTruthTube::new(t_s, t_e, boxes)?,
    })
}

pub fn generate_dataset(
    cfg: &TrainConfig,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<SyntheticSample>> {
    cfg.validate()?;
    if cfg.frames < 2 {
        return Err(config_err("synthetic clips need at least 2 frames"));
    }
    if n_samples == 0 {
        return Err(config_err("n_samples must be at least 1"));
    }
    let bank = PatternBank::new(cfg)?;
    (0..n_samples)
        .map(|i| generate_sample(cfg, &bank, i, derive_seed(seed, &format!("sample{i}"))))
        .collect()
}

/// Thresholded per-frame response to the known target pattern. Returns the
/// detected segment, or `None` if no frame responds.
pub fn matched_filter_segment(
    cfg: &TrainConfig,
    pattern: &[f64],
    video: &Tensor,
) -> Option<(usize, usize)> {
    let c = cfg.channels;
    let per_frame = cfg.height * cfg.width * c;
    let hits: Vec<usize> = video
        .data()
        .chunks(per_frame)
        .enumerate()
        .filter(|(_, frame)| {
            let best = frame
                .chunks(c)
                .map(|px| px.iter().zip(pattern).map(|(a, b)| a * b).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max);
            best > cfg.signal_amplitude / 2.0
        })
        .map(|(t, _)| t)
        .collect();
    Some((*hits.first()?, *hits.last()?))
}

/// Fraction of samples whose matched-filter segment reaches tIoU ≥ 0.9.
pub fn matched_filter_accuracy(cfg: &TrainConfig, samples: &[SyntheticSample]) -> Result<f64> {
    let bank = PatternBank::new(cfg)?;
    let mut good = 0;
    for s in samples {
        // The target word is the one closest to the first text token.
        let tok = &s.batch.text.data()[..cfg.text_dim];
        let target = (0..bank.words.len())
            .max_by(|&a, &b| {
                let da: f64 = tok.iter().zip(&bank.words[a]).map(|(x, y)| x * y).sum();
                let db: f64 = tok.iter().zip(&bank.words[b]).map(|(x, y)| x * y).sum();
                da.total_cmp(&db)
            })
            .unwrap();
        if let Some(seg) = matched_filter_segment(cfg, &bank.patterns[target], &s.batch.video) {
            if t_iou(seg, (s.tube.t_s, s.tube.t_e))? >= 0.9 {
                good += 1;
            }
        }
    }
    Ok(good as f64 / samples.len() as f64)
}

impl SyntheticSample {
    pub fn to_record(&self) -> SampleRecord {
        let v = self.batch.video.shape();
        SampleRecord {
            id: self.id,
            seed: self.seed,
            t: v[0],
            h: v[1],
            w: v[2],
            c: v[3],
            l: self.batch.text.shape()[0],
            video_features: self.batch.video.data().to_vec(),
            text_tokens: self.batch.text.data().to_vec(),
            t_s: self.tube.t_s,
            t_e: self.tube.t_e,
            boxes: self.tube.boxes.clone(),
        }
    }

    pub fn from_record(r: SampleRecord) -> Result<Self> {
        if r.l == 0 || !r.text_tokens.len().is_multiple_of(r.l) {
            return Err(Error::Validation(format!(
                "sample {}: text tokens do not split into {} rows",
                r.id, r.l
            )));
        }
        let text_dim = r.text_tokens.len() / r.l;
        let batch = FrameBatch::new(
            Tensor::new(&[r.t, r.h, r.w, r.c], r.video_features)?,
            Tensor::new(&[r.l, text_dim], r.text_tokens)?,
        )?;
        let tube = GroundTruthTube::new(r.t_s, r.t_e, r.boxes)?;
        if tube.t_e >= r.t {
            return Err(Error::Validation(format!(
                "sample {}: segment ends past frame {}",
                r.id,
                r.t - 1
            )));
        }
        Ok(SyntheticSample {
            id: r.id,
            seed: r.seed,
            batch,
            tube,
        })
    }
}

pub fn write_jsonl(path: &Path, samples: &[SyntheticSample]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut out, &s.to_record())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SyntheticSample>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut samples = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Validation(format!("{}:{}: {e}", path.display(), i + 1)))?;
        samples.push(SyntheticSample::from_record(rec)?);
    }
    if samples.is_empty() {
        return Err(Error::Validation(format!(
            "{} contains no samples",
            path.display()
        )));
    }
    Ok(samples)
}
