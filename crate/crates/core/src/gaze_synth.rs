//! Surrogate serial reading simulator producing synthetic fixation durations.
//!
//! Words are visited left to right. Each word is skipped with a probability
//! that grows with frequency and shrinks with length; otherwise it receives a
//! gamma-distributed fixation whose mean grows with length and shrinks with
//! frequency. Occasionally a regression adds a shorter refixation to an
//! earlier word. Durations are summed per word within a run.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::config::config_record;
use crate::error::{Error, Result};
use crate::numeric::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct LexiconEntry {
    pub token: String,
    /// Natural log of the corpus count.
    pub log_frequency: f64,
    /// Characters in `token`.
    pub length: usize,
}

/// Corpus counts per token; unknown tokens fall back to a count of one.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Lexicon {
    counts: HashMap<String, u64>,
}

impl Lexicon {
    pub fn new() -> Self {
        Lexicon::default()
    }

    pub fn from_counts<I, S>(counts: I) -> Self
    where
        I: IntoIterator<Item = (S, u64)>,
        S: Into<String>,
    {
        Lexicon {
            counts: counts.into_iter().map(|(t, c)| (t.into(), c.max(1))).collect(),
        }
    }

    pub fn insert(&mut self, token: impl Into<String>, count: u64) {
        self.counts.insert(token.into(), count.max(1));
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn count(&self, token: &str) -> Option<u64> {
        self.counts.get(token).copied()
    }

    pub fn entry(&self, token: &str) -> LexiconEntry {
        let count = self.counts.get(token).copied().unwrap_or(1);
        LexiconEntry {
            token: token.to_string(),
            log_frequency: (count as f64).ln(),
            length: token.chars().count().max(1),
        }
    }

    /// Entries sorted by token.
    pub fn sorted(&self) -> Vec<(&str, u64)> {
        let mut v: Vec<_> = self.counts.iter().map(|(t, c)| (t.as_str(), *c)).collect();
        v.sort();
        v
    }

    /// Reads `token<TAB>count` lines; blank lines are skipped.
    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let origin = path.display().to_string();
        let mut lex = Lexicon::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let (token, count) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(&origin, i + 1, "expected token<TAB>count"))?;
            let count = count
                .trim()
                .parse::<u64>()
                .map_err(|_| Error::format(&origin, i + 1, format!("invalid count '{count}'")))?;
            lex.insert(token, count);
        }
        Ok(lex)
    }

    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (token, count) in self.sorted() {
            writeln!(out, "{token}\t{count}")?;
        }
        Ok(())
    }
}

/// Constants of the surrogate simulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulatorParams {
    /// Skip logit intercept; `-inf` disables skipping.
    pub skip_bias: f64,
    pub skip_length: f64,
    pub skip_frequency: f64,
    pub max_skip: f64,
    /// Mean fixation duration intercept (ms).
    pub base_ms: f64,
    pub length_ms: f64,
    pub frequency_ms: f64,
    /// Floor on both the mean and every sampled fixation (ms).
    pub min_ms: f64,
    pub gamma_shape: f64,
    pub regression_prob: f64,
    /// Mean of a regression refixation relative to the word's first-pass mean.
    pub regression_fraction: f64,
}

impl Default for SimulatorParams {
    fn default() -> Self {
        SimulatorParams {
            skip_bias: 1.5,
            skip_length: 0.35,
            skip_frequency: 0.25,
            max_skip: 0.6,
            base_ms: 180.0,
            length_ms: 12.0,
            frequency_ms: 18.0,
            min_ms: 50.0,
            gamma_shape: 9.0,
            regression_prob: 0.1,
            regression_fraction: 0.5,
        }
    }
}

/// Config prefix of the pretraining simulator.
pub const CONFIG_PREFIX: &str = "gaze";

config_record!(SimulatorParams {
    skip_bias,
    skip_length,
    skip_frequency,
    max_skip,
    base_ms,
    length_ms,
    frequency_ms,
    min_ms,
    gamma_shape,
    regression_prob,
    regression_fraction,
});

impl SimulatorParams {
    pub fn skip_probability(&self, entry: &LexiconEntry) -> f64 {
        let z = self.skip_bias - self.skip_length * entry.length as f64 + self.skip_frequency * entry.log_frequency;
        let p = if z == f64::NEG_INFINITY {
            0.0
        } else {
            1.0 / (1.0 + (-z).exp())
        };
        p.clamp(0.0, self.max_skip)
    }

    pub fn mean_duration(&self, entry: &LexiconEntry) -> f64 {
        (self.base_ms + self.length_ms * entry.length as f64 - self.frequency_ms * entry.log_frequency).max(self.min_ms)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.gamma_shape > 0.0) || !(0.0..=1.0).contains(&self.regression_prob) || !(self.min_ms >= 0.0) {
            return Err(Error::Config(format!("invalid simulator parameters {self:?}")));
        }
        Ok(())
    }
}

/// Per-token reading durations of one sentence by one reader or run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GazeRecord {
    pub sentence_id: String,
    pub reader_id: String,
    pub tokens: Vec<String>,
    pub durations: Vec<f64>,
    pub normalized: bool,
}

impl GazeRecord {
    /// Divides by the sentence total; an all-zero record becomes uniform.
    pub fn normalize(mut self) -> Self {
        self.durations = normalize_durations(&self.durations);
        self.normalized = true;
        self
    }

    pub fn check_normalized(&self) -> Result<()> {
        let sum: f64 = self.durations.iter().sum();
        let in_range = self.durations.iter().all(|d| (0.0..=1.0).contains(d));
        if self.durations.len() != self.tokens.len() || !in_range || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "record {}/{} is not a normalized duration vector (sum {sum})",
                self.sentence_id, self.reader_id
            )));
        }
        Ok(())
    }
}

pub fn normalize_durations(durations: &[f64]) -> Vec<f64> {
    let total: f64 = durations.iter().sum();
    if total > 0.0 {
        durations.iter().map(|d| d / total).collect()
    } else {
        vec![1.0 / durations.len() as f64; durations.len()]
    }
}

fn gamma_sample(rng: &mut Rng, mean: f64, shape: f64, floor: f64) -> f64 {
    let g = Gamma::new(shape, mean / shape).expect("positive gamma parameters");
    g.sample(rng.inner()).max(floor)
}

/// One simulated reading pass; durations in milliseconds.
pub fn simulate_reading<S: AsRef<str>>(
    sentence: &[S],
    lexicon: &Lexicon,
    params: &SimulatorParams,
    seed: u64,
) -> Result<GazeRecord> {
    if sentence.is_empty() {
        return Err(Error::Contract("cannot simulate reading of an empty sentence".into()));
    }
    params.check()?;
    let entries: Vec<LexiconEntry> = sentence.iter().map(|t| lexicon.entry(t.as_ref())).collect();
    let mut rng = Rng::new(seed);
    let mut durations = vec![0.0; entries.len()];
    for (i, entry) in entries.iter().enumerate() {
        if rng.bernoulli(params.skip_probability(entry)) {
            continue;
        }
        durations[i] += gamma_sample(&mut rng, params.mean_duration(entry), params.gamma_shape, params.min_ms);
        if i > 0 && rng.bernoulli(params.regression_prob) {
            let j = rng.below(i);
            let mean = (params.regression_fraction * params.mean_duration(&entries[j])).max(params.min_ms);
            durations[j] += gamma_sample(&mut rng, mean, params.gamma_shape, params.min_ms);
        }
    }
    Ok(GazeRecord {
        sentence_id: String::new(),
        reader_id: "run".into(),
        tokens: sentence.iter().map(|t| t.as_ref().to_string()).collect(),
        durations,
        normalized: false,
    })
}

/// Per-token mean raw duration over `runs` independent runs (ms).
pub fn mean_raw_durations<S: AsRef<str>>(
    sentence: &[S],
    lexicon: &Lexicon,
    params: &SimulatorParams,
    runs: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if runs == 0 {
        return Err(Error::Contract("synth_gaze needs at least one run".into()));
    }
    let base = Rng::new(seed);
    let mut sum = vec![0.0; sentence.len()];
    for r in 0..runs {
        let run_seed = base.fork_index("run", r as u64).seed();
        let rec = simulate_reading(sentence, lexicon, params, run_seed)?;
        sum.iter_mut().zip(&rec.durations).for_each(|(s, d)| *s += d);
    }
    Ok(sum.into_iter().map(|s| s / runs as f64).collect())
}

/// Averages `runs` simulated passes and normalizes to a distribution.
pub fn synth_gaze<S: AsRef<str>>(
    sentence: &[S],
    lexicon: &Lexicon,
    params: &SimulatorParams,
    runs: usize,
    seed: u64,
) -> Result<GazeRecord> {
    let mean = mean_raw_durations(sentence, lexicon, params, runs, seed)?;
    Ok(GazeRecord {
        sentence_id: String::new(),
        reader_id: "synthetic".into(),
        tokens: sentence.iter().map(|t| t.as_ref().to_string()).collect(),
        durations: normalize_durations(&mean),
        normalized: true,
    })
}

/// One normalized synthetic record per sentence, ids `s0, s1, …`.
pub fn generate_pretraining_corpus<S: AsRef<str>>(
    sentences: &[Vec<S>],
    lexicon: &Lexicon,
    params: &SimulatorParams,
    runs: usize,
    seed: u64,
) -> Result<Vec<GazeRecord>> {
    let base = Rng::new(seed);
    sentences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rec = synth_gaze(s, lexicon, params, runs, base.fork_index("sentence", i as u64).seed())?;
            rec.sentence_id = format!("s{i}");
            Ok(rec)
        })
        .collect()
}
