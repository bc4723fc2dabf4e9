//! Paraphrase generator: GRU encoder, GRU decoder with saliency-modulated
//! multiplicative attention over the encoder states.
//!
//! Each decoder step scores the previous hidden state against `S`, feeds
//! `[embed(prev_token); context]` into the decoder GRU and projects the new
//! hidden state onto the vocabulary. The decoder starts from the encoder's
//! final state.

use serde::{Deserialize, Serialize};

use crate::attention::{attend, score_paragen, AblationMode, Attended, AttentionParams, SaliencySource};
use crate::checkpoint::{Checkpoint, Provenance, Stage, Task};
use crate::config::{config_record, ConfigRecord, FlatConfig};
use crate::corpus::build_vocab;
use crate::embeddings::{EmbeddingTable, Vocabulary, BOS, EOS};
use crate::error::{Error, Result};
use crate::joint::{JointTrainer, TaskNetwork};
use crate::layers;
use crate::numeric::{AdamState, BoundParams, ParamStore, Rng, Tape, Var};
use crate::trace::AttentionTrace;

pub const CONFIG_PREFIX: &str = "paragen";

#[derive(Clone, Debug, PartialEq)]
pub struct ParagenConfig {
    pub embed_dim: usize,
    pub hidden_size: usize,
    pub dropout_p: f64,
    pub learning_rate: f64,
    pub max_decode_len: usize,
    pub teacher_forcing: bool,
    pub ablation: AblationMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub beam_width: usize,
    pub train_embeddings: bool,
    /// Space-separated probe sentence; empty means the first source.
    pub probe: String,
}

impl Default for ParagenConfig {
    fn default() -> Self {
        ParagenConfig {
            embed_dim: 300,
            hidden_size: 1024,
            dropout_p: 0.2,
            learning_rate: 1e-4,
            max_decode_len: 30,
            teacher_forcing: true,
            ablation: AblationMode::Full,
            epochs: 10,
            batch_size: 32,
            beam_width: 1,
            train_embeddings: false,
            probe: String::new(),
        }
    }
}

impl ParagenConfig {
    fn check(&self) -> Result<()> {
        if [
            self.embed_dim,
            self.hidden_size,
            self.max_decode_len,
            self.batch_size,
            self.beam_width,
        ]
        .contains(&0)
        {
            return Err(Error::Config(format!("paragen sizes must be positive: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout_p) || !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "invalid dropout {} or learning rate {}",
                self.dropout_p, self.learning_rate
            )));
        }
        Ok(())
    }

    fn probe_tokens(&self) -> Option<Vec<String>> {
        let t: Vec<String> = self.probe.split_whitespace().map(String::from).collect();
        (!t.is_empty()).then_some(t)
    }
}

config_record!(ParagenConfig {
    embed_dim,
    hidden_size,
    dropout_p,
    learning_rate,
    max_decode_len,
    teacher_forcing,
    ablation,
    epochs,
    batch_size,
    beam_width,
    train_embeddings,
    probe,
});

/// A source sentence and its paraphrase.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

impl SentencePair {
    pub fn new(source: Vec<String>, target: Vec<String>) -> Result<Self> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::Contract(
                "sentence pairs need non-empty source and target".into(),
            ));
        }
        Ok(SentencePair { source, target })
    }
}

/// Handles for one decoder step.
#[derive(Clone, Copy, Debug)]
pub struct DecodeStep {
    pub logits: Var,
    pub hidden: Var,
    pub attention: Attended,
}

/// Decoder output plus the attention rows behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Emitted tokens without the end marker.
    pub tokens: Vec<String>,
    /// One row per emitted token, end marker included.
    pub attention: Vec<Vec<f64>>,
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParagenModel {
    pub config: ParagenConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
}

impl ParagenModel {
    pub fn new(config: ParagenConfig, vocab: Vocabulary, embeddings: &EmbeddingTable, seed: u64) -> Result<Self> {
        config.check()?;
        if embeddings.dimension != config.embed_dim || embeddings.matrix.shape()[0] != vocab.len() {
            return Err(Error::Config(format!(
                "embedding table {:?} does not match vocabulary {} x embed_dim {}",
                embeddings.matrix.shape(),
                vocab.len(),
                config.embed_dim
            )));
        }
        let (e, h, v) = (config.embed_dim, config.hidden_size, vocab.len());
        let mut rng = Rng::new(seed).fork("paragen-init");
        let mut params = ParamStore::new();
        params.insert("embedding", embeddings.to_param());
        layers::init_gru(&mut params, &mut rng, "enc", e, h);
        layers::init_gru(&mut params, &mut rng, "dec", e + h, h);
        AttentionParams::multiplicative(&mut rng, h, h).insert_into(&mut params, "attn");
        layers::init_linear(&mut params, &mut rng, "out", h, v);
        Ok(ParagenModel { config, vocab, params })
    }

    /// Vocabulary over every source and target token, with a seeded random
    /// embedding table (trainable per `config.train_embeddings`).
    pub fn for_corpus(config: ParagenConfig, corpus: &[SentencePair], seed: u64) -> Result<Self> {
        let vocab = paragen_vocab(corpus);
        let mut table = EmbeddingTable::random(
            &vocab,
            config.embed_dim,
            Rng::new(seed).fork("paragen-embedding").seed(),
        );
        table.trainable = config.train_embeddings;
        Self::new(config, vocab, &table, seed)
    }

    pub fn flat_config(&self) -> FlatConfig {
        self.config.to_flat(CONFIG_PREFIX)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.provenance.task != Some(Task::Paragen) || ckpt.params.get("dec.w_ih").is_none() {
            return Err(Error::Config("checkpoint does not hold a paraphrase generator".into()));
        }
        let mut config = ParagenConfig::default();
        config.apply(CONFIG_PREFIX, &ckpt.config)?;
        Ok(ParagenModel {
            config,
            vocab: ckpt.vocabulary.clone(),
            params: ckpt.params.clone(),
        })
    }

    pub fn to_checkpoint(&self, provenance: Provenance, optimizer: AdamState) -> Checkpoint {
        let mut c = Checkpoint::new(self.params.clone(), self.vocab.clone(), self.flat_config(), provenance);
        c.optimizer = optimizer;
        c
    }

    /// Encoder states `S` (`[n, hidden]`) and the final hidden state.
    pub fn encode_source(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        source: &[String],
        train: bool,
    ) -> Result<(Var, Var)> {
        if source.is_empty() {
            return Err(Error::Contract("cannot encode an empty source".into()));
        }
        let h_dim = self.config.hidden_size;
        let ids = self.vocab.encode_all(source);
        let table = p.get("embedding")?;
        let emb = tape.embedding_lookup(table, &ids)?;
        let emb = tape.dropout(emb, self.config.dropout_p, train)?;
        let proj = layers::gru_input(tape, p, "enc", emb)?;
        let mut h = tape.constant(&[1, h_dim], vec![0.0; h_dim])?;
        let mut states = Vec::with_capacity(ids.len());
        for t in 0..ids.len() {
            let x = tape.row(proj, t)?;
            h = layers::gru_cell(tape, p, "enc", x, h, h_dim)?;
            states.push(h);
        }
        Ok((tape.concat(&states, 0)?, h))
    }

    pub fn decode_step(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        prev_token: usize,
        prev_hidden: Var,
        s: Var,
        u: Option<Var>,
        train: bool,
    ) -> Result<DecodeStep> {
        let w_a = p.get("attn.w_a")?;
        let scores = score_paragen(tape, prev_hidden, s, w_a, u)?;
        let attention = attend(tape, scores, s)?;
        let table = p.get("embedding")?;
        let emb = tape.embedding_lookup(table, &[prev_token])?;
        let emb = tape.dropout(emb, self.config.dropout_p, train)?;
        let input = tape.concat(&[emb, attention.context], 1)?;
        let proj = layers::gru_input(tape, p, "dec", input)?;
        let hidden = layers::gru_cell(tape, p, "dec", proj, prev_hidden, self.config.hidden_size)?;
        let logits = layers::linear(tape, p, "out", hidden)?;
        Ok(DecodeStep {
            logits,
            hidden,
            attention,
        })
    }

    /// Decoder targets: the paraphrase followed by the end marker.
    pub fn target_ids(&self, pair: &SentencePair) -> Vec<usize> {
        let mut ids = self.vocab.encode_all(&pair.target);
        ids.push(EOS);
        ids
    }

    /// Per-step logits `[len(target) + 1, |V|]`, teacher forced unless the
    /// config says otherwise (then fed back greedily).
    pub fn decoder_logits(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        pair: &SentencePair,
        u: Option<Var>,
        train: bool,
    ) -> Result<Var> {
        let (s, mut h) = self.encode_source(tape, p, &pair.source, train)?;
        let targets = self.target_ids(pair);
        let mut prev = BOS;
        let mut rows = Vec::with_capacity(targets.len());
        for &gold in &targets {
            let step = self.decode_step(tape, p, prev, h, s, u, train)?;
            h = step.hidden;
            prev = if self.config.teacher_forcing || !train {
                gold
            } else {
                argmax(tape.value(step.logits))
            };
            rows.push(step.logits);
        }
        tape.concat(&rows, 0)
    }

    /// Mean cross-entropy per target token.
    pub fn pair_loss(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        pair: &SentencePair,
        u: Option<Var>,
        train: bool,
    ) -> Result<Var> {
        let logits = self.decoder_logits(tape, p, pair, u, train)?;
        tape.cross_entropy_loss(logits, &self.target_ids(pair))
    }

    /// Teacher-forced argmax accuracy over target tokens (end marker
    /// included), evaluation mode.
    pub fn token_accuracy(&self, corpus: &[SentencePair], saliency: &SaliencySource) -> Result<f64> {
        let mut correct = 0usize;
        let mut total = 0usize;
        for pair in corpus {
            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape, false);
            let tsm = saliency.bind(&mut tape);
            let u = saliency.saliency(&mut tape, tsm.as_ref(), &pair.source)?;
            let logits = self.decoder_logits(&mut tape, &p, pair, u, false)?;
            let v = self.vocab.len();
            for (row, &gold) in tape.value(logits).chunks(v).zip(&self.target_ids(pair)) {
                correct += usize::from(argmax(row) == gold);
                total += 1;
            }
        }
        if total == 0 {
            return Err(Error::InsufficientData("no target tokens to score".into()));
        }
        Ok(correct as f64 / total as f64)
    }

    /// Beam search (greedy at width 1) until the end marker or
    /// `max_decode_len` tokens. `u` holds one value per source token.
    pub fn generate(&self, source: &[String], u: Option<&[f64]>, beam_width: usize) -> Result<Generation> {
        if beam_width == 0 {
            return Err(Error::Contract("beam width must be at least 1".into()));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let u = match u {
            Some(u) if u.len() != source.len() => {
                return Err(Error::Contract(format!(
                    "saliency covers {} tokens, source {}",
                    u.len(),
                    source.len()
                )))
            }
            Some(u) => Some(tape.constant(&[1, u.len()], u.to_vec())?),
            None => None,
        };
        let (s, h0) = self.encode_source(&mut tape, &p, source, false)?;
        let mut beams = vec![Hypothesis {
            ids: Vec::new(),
            rows: Vec::new(),
            hidden: h0,
            log_prob: 0.0,
        }];
        let mut finished: Vec<Hypothesis> = Vec::new();
        for _ in 0..self.config.max_decode_len {
            let mut candidates: Vec<(f64, usize, usize, Var, Vec<f64>)> = Vec::new();
            for (b, hyp) in beams.iter().enumerate() {
                let prev = hyp.ids.last().copied().unwrap_or(BOS);
                let step = self.decode_step(&mut tape, &p, prev, hyp.hidden, s, u, false)?;
                let lp = log_softmax(tape.value(step.logits));
                let weights = tape.value(step.attention.weights).to_vec();
                for (tok, score) in top_k(&lp, beam_width) {
                    candidates.push((hyp.log_prob + score, b, tok, step.hidden, weights.clone()));
                }
            }
            // Highest score first; ties resolved by beam then token order.
            candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut next = Vec::with_capacity(beam_width);
            for (log_prob, b, tok, hidden, weights) in candidates.into_iter().take(beam_width) {
                let mut hyp = Hypothesis {
                    ids: beams[b].ids.clone(),
                    rows: beams[b].rows.clone(),
                    hidden,
                    log_prob,
                };
                hyp.ids.push(tok);
                hyp.rows.push(weights);
                if tok == EOS {
                    finished.push(hyp);
                } else {
                    next.push(hyp);
                }
            }
            beams = next;
            let best_open = beams.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            let best_done = finished.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            if beams.is_empty() || best_done >= best_open {
                break;
            }
        }
        let (best, truncated) = match finished.into_iter().max_by(|a, b| a.log_prob.total_cmp(&b.log_prob)) {
            Some(h) => (h, false),
            None => (
                beams
                    .into_iter()
                    .max_by(|a, b| a.log_prob.total_cmp(&b.log_prob))
                    .expect("at least one open hypothesis"),
                true,
            ),
        };
        let tokens = best
            .ids
            .iter()
            .filter(|&&t| t != EOS)
            .map(|&t| self.vocab.decode(t).unwrap_or("<unk>").to_string())
            .collect();
        Ok(Generation {
            tokens,
            attention: best.rows,
            truncated,
        })
    }
}

struct Hypothesis {
    ids: Vec<usize>,
    rows: Vec<Vec<f64>>,
    hidden: Var,
    log_prob: f64,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn top_k(row: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| (i, row[i])).collect()
}

/// Every source and target token, counted once per occurrence.
pub fn paragen_vocab(corpus: &[SentencePair]) -> Vocabulary {
    build_vocab(corpus.iter().flat_map(|p| p.source.iter().chain(&p.target)), 1)
}

impl TaskNetwork for ParagenModel {
    type Example = SentencePair;

    const TASK: Task = Task::Paragen;

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn saliency_tokens<'e>(&self, example: &'e SentencePair) -> &'e [String] {
        &example.source
    }

    fn loss(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        example: &SentencePair,
        u: Option<Var>,
        train: bool,
    ) -> Result<Var> {
        self.pair_loss(tape, p, example, u, train)
    }
}

/// Outcome of joint training for either task.
#[derive(Clone, Debug)]
pub struct JointRun {
    pub task: Checkpoint,
    /// Absent without fixations; the unchanged input in frozen mode.
    pub tsm: Option<Checkpoint>,
    pub epoch_losses: Vec<f64>,
    pub trace: AttentionTrace,
}

/// Joint training of `model` with the saliency model in `tsm` under the
/// config's ablation mode.
pub fn train_paragen(
    model: ParagenModel,
    corpus: &[SentencePair],
    tsm: Option<&Checkpoint>,
    seed: u64,
) -> Result<JointRun> {
    if corpus.is_empty() {
        return Err(Error::Contract("paraphrase corpus is empty".into()));
    }
    let config = model.config.clone();
    let saliency = SaliencySource::new(config.ablation, tsm, Task::Paragen, seed)?;
    let probe = config.probe_tokens().unwrap_or_else(|| corpus[0].source.clone());
    let mut trainer =
        JointTrainer::new(model, saliency, config.learning_rate, config.batch_size, seed)?.with_probe(probe.clone());
    trainer.train(corpus, config.epochs)?;
    let tsm_ckpt = trainer.tsm_checkpoint(seed);
    let u = trainer.current_u(&probe)?;
    let losses = trainer.epoch_losses().to_vec();
    let history = trainer.history().clone();
    let (model, _, optimizer) = trainer.into_parts();
    let generation = model.generate(&probe, u.as_deref(), 1)?;
    let mut output_tokens = generation.tokens.clone();
    if !generation.truncated {
        output_tokens.push(model.vocab.decode(EOS).unwrap_or("</s>").to_string());
    }
    let trace = AttentionTrace {
        task: Some(Task::Paragen),
        probe_tokens: probe,
        epoch_saliency: history.saliency.clone(),
        attention: generation.attention,
        output_tokens,
        truncated: generation.truncated,
    };
    let mut prov = Provenance::new(Stage::Joint, &model.flat_config(), seed);
    prov.task = Some(Task::Paragen);
    prov.ablation = Some(config.ablation.to_string());
    prov.epochs = config.epochs;
    prov.epoch_losses = losses.clone();
    prov.probe = tsm_ckpt.as_ref().map(|_| history);
    Ok(JointRun {
        task: model.to_checkpoint(prov, optimizer),
        tsm: tsm_ckpt,
        epoch_losses: losses,
        trace,
    })
}
