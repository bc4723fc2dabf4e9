//! Deletion-based sentence compression as per-token keep/delete tagging.
//!
//! Three stacked BiLSTMs feed an additive self-attention in which every
//! position queries all positions of the last layer; `[h_i; c_i]` then goes
//! through two fully connected layers to a keep logit.

use serde::{Deserialize, Serialize};

use crate::attention::{attend, AblationMode, AdditiveKeys, AttentionParams, SaliencySource};
use crate::checkpoint::{Checkpoint, Provenance, Stage, Task};
use crate::config::{config_record, ConfigRecord, FlatConfig};
use crate::corpus::build_vocab;
use crate::embeddings::{EmbeddingTable, Vocabulary};
use crate::error::{Error, Result};
use crate::joint::{JointTrainer, TaskNetwork};
use crate::layers;
use crate::numeric::{AdamState, BoundParams, ParamStore, Rng, Tape, Var};
use crate::paragen::JointRun;
use crate::trace::AttentionTrace;

pub const CONFIG_PREFIX: &str = "sentcomp";
pub const LAYERS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct SentcompConfig {
    pub embed_dim: usize,
    pub hidden_size: usize,
    pub layers: usize,
    pub dropout_p: f64,
    pub learning_rate: f64,
    pub ablation: AblationMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub threshold: f64,
    pub train_embeddings: bool,
    pub probe: String,
}

impl Default for SentcompConfig {
    fn default() -> Self {
        SentcompConfig {
            embed_dim: 300,
            hidden_size: 1024,
            layers: LAYERS,
            dropout_p: 0.1,
            learning_rate: 1e-4,
            ablation: AblationMode::Full,
            epochs: 10,
            batch_size: 32,
            threshold: 0.5,
            train_embeddings: false,
            probe: String::new(),
        }
    }
}

impl SentcompConfig {
    fn check(&self) -> Result<()> {
        if self.layers != LAYERS {
            return Err(Error::Config(format!(
                "the compressor has {LAYERS} BiLSTM layers, got {}",
                self.layers
            )));
        }
        if [self.embed_dim, self.hidden_size, self.batch_size].contains(&0) {
            return Err(Error::Config(format!("sentcomp sizes must be positive: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout_p)
            || !(self.learning_rate > 0.0)
            || !(self.threshold > 0.0 && self.threshold < 1.0)
        {
            return Err(Error::Config(format!(
                "invalid dropout {}, learning rate {} or threshold {}",
                self.dropout_p, self.learning_rate, self.threshold
            )));
        }
        Ok(())
    }

    fn probe_tokens(&self) -> Option<Vec<String>> {
        let t: Vec<String> = self.probe.split_whitespace().map(String::from).collect();
        (!t.is_empty()).then_some(t)
    }
}

config_record!(SentcompConfig {
    embed_dim,
    hidden_size,
    layers,
    dropout_p,
    learning_rate,
    ablation,
    epochs,
    batch_size,
    threshold,
    train_embeddings,
    probe,
});

/// Tokens with their gold keep mask (`true` = kept).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeletionExample {
    pub tokens: Vec<String>,
    pub keep: Vec<bool>,
}

impl DeletionExample {
    pub fn new(tokens: Vec<String>, keep: Vec<bool>) -> Result<Self> {
        if tokens.is_empty() || tokens.len() != keep.len() {
            return Err(Error::Contract(format!(
                "deletion example needs equal non-zero lengths, got {} tokens and {} flags",
                tokens.len(),
                keep.len()
            )));
        }
        Ok(DeletionExample { tokens, keep })
    }
}

/// Tape handles from one forward pass.
#[derive(Clone, Debug)]
pub struct CompressForward {
    /// Keep logits as a `[n, 1]` column.
    pub logits: Var,
    pub probabilities: Var,
    /// Self-attention weights, one `[1, n]` row per position.
    pub attention: Vec<Var>,
}

/// Thresholded output of [`SentcompModel::compress`].
#[derive(Clone, Debug, PartialEq)]
pub struct Compression {
    pub keep: Vec<bool>,
    pub tokens: Vec<String>,
    pub probabilities: Vec<f64>,
    pub attention: Vec<Vec<f64>>,
    /// Nothing survived the threshold.
    pub empty: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentcompModel {
    pub config: SentcompConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
}

impl SentcompModel {
    pub fn new(config: SentcompConfig, vocab: Vocabulary, embeddings: &EmbeddingTable, seed: u64) -> Result<Self> {
        config.check()?;
        if embeddings.dimension != config.embed_dim || embeddings.matrix.shape()[0] != vocab.len() {
            return Err(Error::Config(format!(
                "embedding table {:?} does not match vocabulary {} x embed_dim {}",
                embeddings.matrix.shape(),
                vocab.len(),
                config.embed_dim
            )));
        }
        let (e, h) = (config.embed_dim, config.hidden_size);
        let mut rng = Rng::new(seed).fork("sentcomp-init");
        let mut params = ParamStore::new();
        params.insert("embedding", embeddings.to_param());
        for l in 0..LAYERS {
            let input = if l == 0 { e } else { 2 * h };
            layers::init_bilstm(&mut params, &mut rng, &format!("lstm{l}"), input, h);
        }
        AttentionParams::additive(&mut rng, h, 2 * h, 2 * h).insert_into(&mut params, "attn");
        layers::init_linear(&mut params, &mut rng, "fc1", 4 * h, h);
        layers::init_linear(&mut params, &mut rng, "fc2", h, 1);
        Ok(SentcompModel { config, vocab, params })
    }

    pub fn for_corpus(config: SentcompConfig, corpus: &[DeletionExample], seed: u64) -> Result<Self> {
        let vocab = build_vocab(corpus.iter().flat_map(|ex| &ex.tokens), 1);
        let mut table = EmbeddingTable::random(
            &vocab,
            config.embed_dim,
            Rng::new(seed).fork("sentcomp-embedding").seed(),
        );
        table.trainable = config.train_embeddings;
        Self::new(config, vocab, &table, seed)
    }

    pub fn flat_config(&self) -> FlatConfig {
        self.config.to_flat(CONFIG_PREFIX)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.provenance.task != Some(Task::Sentcomp) || ckpt.params.get("fc2.w").is_none() {
            return Err(Error::Config("checkpoint does not hold a sentence compressor".into()));
        }
        let mut config = SentcompConfig::default();
        config.apply(CONFIG_PREFIX, &ckpt.config)?;
        Ok(SentcompModel {
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

    pub fn compress_forward(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        tokens: &[String],
        u: Option<Var>,
        train: bool,
    ) -> Result<CompressForward> {
        if tokens.is_empty() {
            return Err(Error::Contract("cannot compress an empty sentence".into()));
        }
        let (h, drop) = (self.config.hidden_size, self.config.dropout_p);
        let ids = self.vocab.encode_all(tokens);
        let table = p.get("embedding")?;
        let mut x = tape.embedding_lookup(table, &ids)?;
        for l in 0..LAYERS {
            x = layers::bilstm(tape, p, &format!("lstm{l}"), x, h)?;
            x = tape.dropout(x, drop, train)?;
        }
        let keys = AdditiveKeys::new(tape, x, p.get("attn.w_a")?, p.get("attn.v_a")?, 2 * h)?;
        let mut rows = Vec::with_capacity(ids.len());
        let mut attention = Vec::with_capacity(ids.len());
        for i in 0..ids.len() {
            let hi = tape.row(x, i)?;
            let scores = keys.scores(tape, hi, u)?;
            let att = attend(tape, scores, x)?;
            attention.push(att.weights);
            rows.push(tape.concat(&[hi, att.context], 1)?);
        }
        let features = tape.concat(&rows, 0)?;
        let hidden = layers::linear(tape, p, "fc1", features)?;
        let hidden = tape.tanh(hidden);
        let logits = layers::linear(tape, p, "fc2", hidden)?;
        let probabilities = tape.sigmoid(logits);
        Ok(CompressForward {
            logits,
            probabilities,
            attention,
        })
    }

    /// Mean binary cross-entropy over tokens.
    pub fn example_loss(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        ex: &DeletionExample,
        u: Option<Var>,
        train: bool,
    ) -> Result<Var> {
        let out = self.compress_forward(tape, p, &ex.tokens, u, train)?;
        let targets: Vec<f64> = ex.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        tape.bce_with_logits(out.logits, &targets)
    }

    /// Evaluation-mode keep probabilities thresholded at `threshold`.
    pub fn compress(&self, tokens: &[String], u: Option<&[f64]>, threshold: f64) -> Result<Compression> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let u = match u {
            Some(u) if u.len() != tokens.len() => {
                return Err(Error::Contract(format!(
                    "saliency covers {} tokens, sentence {}",
                    u.len(),
                    tokens.len()
                )))
            }
            Some(u) => Some(tape.constant(&[1, u.len()], u.to_vec())?),
            None => None,
        };
        let out = self.compress_forward(&mut tape, &p, tokens, u, false)?;
        let probabilities = tape.value(out.probabilities).to_vec();
        let attention = out.attention.iter().map(|&w| tape.value(w).to_vec()).collect();
        let (keep, kept) = apply_threshold(tokens, &probabilities, threshold)?;
        Ok(Compression {
            empty: kept.is_empty(),
            keep,
            tokens: kept,
            probabilities,
            attention,
        })
    }

    /// Fraction of tokens whose thresholded decision matches the gold mask.
    pub fn token_accuracy(&self, corpus: &[DeletionExample], saliency: &SaliencySource) -> Result<f64> {
        let mut correct = 0usize;
        let mut total = 0usize;
        for ex in corpus {
            let u = saliency.predict(&ex.tokens)?.map(|d| d.u);
            let c = self.compress(&ex.tokens, u.as_deref(), self.config.threshold)?;
            correct += c.keep.iter().zip(&ex.keep).filter(|(a, b)| a == b).count();
            total += ex.keep.len();
        }
        if total == 0 {
            return Err(Error::InsufficientData("no tokens to score".into()));
        }
        Ok(correct as f64 / total as f64)
    }
}

/// `keep_i = p_i >= threshold`, plus the kept tokens in order.
pub fn apply_threshold(tokens: &[String], probabilities: &[f64], threshold: f64) -> Result<(Vec<bool>, Vec<String>)> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Domain(format!("threshold {threshold} outside (0, 1)")));
    }
    if tokens.len() != probabilities.len() {
        return Err(Error::Contract(format!(
            "{} probabilities for {} tokens",
            probabilities.len(),
            tokens.len()
        )));
    }
    let keep: Vec<bool> = probabilities.iter().map(|&p| p >= threshold).collect();
    let kept = tokens
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(t, _)| t.clone())
        .collect();
    Ok((keep, kept))
}

impl TaskNetwork for SentcompModel {
    type Example = DeletionExample;

    const TASK: Task = Task::Sentcomp;

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn saliency_tokens<'e>(&self, example: &'e DeletionExample) -> &'e [String] {
        &example.tokens
    }

    fn loss(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        example: &DeletionExample,
        u: Option<Var>,
        train: bool,
    ) -> Result<Var> {
        self.example_loss(tape, p, example, u, train)
    }
}

pub fn train_sentcomp(
    model: SentcompModel,
    corpus: &[DeletionExample],
    tsm: Option<&Checkpoint>,
    seed: u64,
) -> Result<JointRun> {
    if corpus.is_empty() {
        return Err(Error::Contract("compression corpus is empty".into()));
    }
    let config = model.config.clone();
    let saliency = SaliencySource::new(config.ablation, tsm, Task::Sentcomp, seed)?;
    let probe = config.probe_tokens().unwrap_or_else(|| corpus[0].tokens.clone());
    let mut trainer =
        JointTrainer::new(model, saliency, config.learning_rate, config.batch_size, seed)?.with_probe(probe.clone());
    trainer.train(corpus, config.epochs)?;
    let tsm_ckpt = trainer.tsm_checkpoint(seed);
    let u = trainer.current_u(&probe)?;
    let losses = trainer.epoch_losses().to_vec();
    let history = trainer.history().clone();
    let (model, _, optimizer) = trainer.into_parts();
    let out = model.compress(&probe, u.as_deref(), config.threshold)?;
    let trace = AttentionTrace {
        task: Some(Task::Sentcomp),
        probe_tokens: probe,
        epoch_saliency: history.saliency.clone(),
        attention: out.attention,
        output_tokens: out.tokens,
        truncated: false,
    };
    let mut prov = Provenance::new(Stage::Joint, &model.flat_config(), seed);
    prov.task = Some(Task::Sentcomp);
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn small() -> SentcompModel {
        let config = SentcompConfig {
            embed_dim: 5,
            hidden_size: 4,
            dropout_p: 0.0,
            ablation: AblationMode::NoFixation,
            ..SentcompConfig::default()
        };
        let ex = DeletionExample::new(toks("the big cat sat"), vec![true, false, true, true]).unwrap();
        SentcompModel::for_corpus(config, &[ex], 4).unwrap()
    }

    #[test]
    fn shapes_and_ranges() {
        let m = small();
        let c = m.compress(&toks("the big cat sat"), None, 0.5).unwrap();
        assert_eq!(c.probabilities.len(), 4);
        assert!(c.probabilities.iter().all(|p| *p > 0.0 && *p < 1.0));
        assert_eq!(c.attention.len(), 4);
        for row in &c.attention {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let c = small().compress(&toks("cat"), None, 0.5).unwrap();
        assert_eq!(c.attention, vec![vec![1.0]]);
    }

    #[test]
    fn zero_head_gives_one_half() {
        let mut m = small();
        m.params.insert("fc2.w", Tensor::zeros(&[4, 1]));
        m.params.insert("fc2.b", Tensor::zeros(&[1]));
        let c = m.compress(&toks("the cat"), None, 0.5).unwrap();
        assert_eq!(c.probabilities, vec![0.5, 0.5]);
    }

    #[test]
    fn thresholding() {
        let t = toks("a b c");
        let (keep, kept) = apply_threshold(&t, &[0.9, 0.4, 0.6], 0.5).unwrap();
        assert_eq!(keep, vec![true, false, true]);
        assert_eq!(kept, toks("a c"));
        let (_, none) = apply_threshold(&t, &[0.0; 3], 0.5).unwrap();
        assert!(none.is_empty());
        let (_, all) = apply_threshold(&t, &[1.0; 3], 0.5).unwrap();
        assert_eq!(all, t);
    }

    #[test]
    fn layer_count_is_fixed() {
        let mut c = SentcompConfig::default();
        c.layers = 2;
        assert!(c.check().is_err());
    }
}
