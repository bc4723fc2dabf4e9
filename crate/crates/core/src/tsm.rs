//! Text saliency model: embeddings, one BiLSTM layer, a Transformer encoder
//! stack without positional encodings, and a per-token sigmoid head whose
//! outputs are normalized into a distribution over the sentence.
//!
//! Trained in two stages: pretraining on simulator output, then fine-tuning
//! on (sentence, reader) gaze records.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Provenance, Stage};
use crate::config::{config_record, ConfigRecord, FlatConfig};
use crate::embeddings::{EmbeddingTable, Vocabulary};
use crate::error::{Error, Result};
use crate::gaze_synth::GazeRecord;
use crate::layers;
use crate::numeric::{adam_step, AdamState, BoundParams, ParamStore, Rng, Tape, Var};

pub const CONFIG_PREFIX: &str = "tsm";

/// Lower bound on each per-token head score before normalization.
pub const SCORE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsmConfig {
    pub embed_dim: usize,
    pub hidden_size: usize,
    pub transformer_layers: usize,
    pub attention_heads: usize,
    pub feedforward_dim: usize,
    pub dropout_p: f64,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for TsmConfig {
    fn default() -> Self {
        TsmConfig {
            embed_dim: 300,
            hidden_size: 128,
            transformer_layers: 4,
            attention_heads: 4,
            feedforward_dim: 512,
            dropout_p: 0.5,
            pretrain_epochs: 4,
            finetune_epochs: 10,
            learning_rate: 1e-5,
            batch_size: 100,
        }
    }
}

impl TsmConfig {
    fn check(&self) -> Result<()> {
        let sizes = [
            self.embed_dim,
            self.hidden_size,
            self.transformer_layers,
            self.attention_heads,
            self.feedforward_dim,
            self.batch_size,
        ];
        if sizes.contains(&0) {
            return Err(Error::Config(format!("TSM sizes must be positive: {self:?}")));
        }
        if self.hidden_size % self.attention_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} not divisible by attention_heads {}",
                self.hidden_size, self.attention_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) || !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "invalid dropout {} or learning rate {}",
                self.dropout_p, self.learning_rate
            )));
        }
        Ok(())
    }

    /// Whether two configs build parameter-compatible networks.
    pub fn same_architecture(&self, other: &TsmConfig) -> bool {
        (
            self.embed_dim,
            self.hidden_size,
            self.transformer_layers,
            self.attention_heads,
            self.feedforward_dim,
        ) == (
            other.embed_dim,
            other.hidden_size,
            other.transformer_layers,
            other.attention_heads,
            other.feedforward_dim,
        )
    }
}

config_record!(TsmConfig {
    embed_dim,
    hidden_size,
    transformer_layers,
    attention_heads,
    feedforward_dim,
    dropout_p,
    pretrain_epochs,
    finetune_epochs,
    learning_rate,
    batch_size,
});

/// Per-token saliency `u`; entries positive and summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyDistribution {
    pub tokens: Vec<String>,
    pub u: Vec<f64>,
}

impl SaliencyDistribution {
    pub fn uniform(tokens: Vec<String>) -> Self {
        let n = tokens.len();
        SaliencyDistribution {
            tokens,
            u: vec![1.0 / n as f64; n],
        }
    }

    pub fn check(&self) -> Result<()> {
        let sum: f64 = self.u.iter().sum();
        let single = self.u.len() == 1 && self.u[0] == 1.0;
        let open = self.u.iter().all(|v| *v > 0.0 && *v < 1.0);
        if self.u.len() != self.tokens.len() || self.u.is_empty() || !(single || open) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!("invalid saliency distribution {:?}", self.u)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsmModel {
    pub config: TsmConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
}

impl TsmModel {
    /// Seeded initialization around a pretrained (by default frozen) table.
    pub fn new(config: TsmConfig, vocab: Vocabulary, embeddings: &EmbeddingTable, seed: u64) -> Result<Self> {
        config.check()?;
        if embeddings.dimension != config.embed_dim || embeddings.matrix.shape()[0] != vocab.len() {
            return Err(Error::Config(format!(
                "embedding table {:?} does not match vocabulary {} x embed_dim {}",
                embeddings.matrix.shape(),
                vocab.len(),
                config.embed_dim
            )));
        }
        let mut params = ParamStore::new();
        params.insert("embedding", embeddings.to_param());
        let mut model = TsmModel { config, vocab, params };
        model.reinitialize(seed);
        Ok(model)
    }

    /// Fresh random weights for everything except the embedding table.
    pub fn reinitialize(&mut self, seed: u64) {
        let c = &self.config;
        let mut rng = Rng::new(seed).fork("tsm-init");
        let p = &mut self.params;
        layers::init_bilstm(p, &mut rng, "lstm", c.embed_dim, c.hidden_size);
        layers::init_linear(p, &mut rng, "proj", 2 * c.hidden_size, c.hidden_size);
        for l in 0..c.transformer_layers {
            layers::init_encoder_layer(p, &mut rng, &format!("enc{l}"), c.hidden_size, c.feedforward_dim);
        }
        layers::init_linear(p, &mut rng, "head", c.hidden_size, 1);
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut config = TsmConfig::default();
        config.apply(CONFIG_PREFIX, &ckpt.config)?;
        let model = TsmModel {
            config,
            vocab: ckpt.vocabulary.clone(),
            params: ckpt.params.clone(),
        };
        if model.params.get("head.w").is_none() || model.params.get("embedding").is_none() {
            return Err(Error::Config("checkpoint does not hold a saliency model".into()));
        }
        Ok(model)
    }

    pub fn flat_config(&self) -> FlatConfig {
        self.config.to_flat(CONFIG_PREFIX)
    }

    pub fn to_checkpoint(&self, provenance: Provenance, optimizer: AdamState) -> Checkpoint {
        let mut c = Checkpoint::new(self.params.clone(), self.vocab.clone(), self.flat_config(), provenance);
        c.optimizer = optimizer;
        c
    }

    /// Checkpoint of an untrained model, the entry point for fine-tuning
    /// without pretraining.
    pub fn random_init_checkpoint(&self, seed: u64) -> Checkpoint {
        let prov = Provenance::new(Stage::RandomInit, &self.flat_config(), seed);
        self.to_checkpoint(prov, AdamState::default())
    }

    /// Records the forward pass; returns `u` as a `[1, n]` row.
    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, tokens: &[String], train: bool) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Contract("saliency of an empty sentence".into()));
        }
        let c = &self.config;
        let ids = self.vocab.encode_all(tokens);
        let table = p.get("embedding")?;
        let emb = tape.embedding_lookup(table, &ids)?;
        let emb = tape.dropout(emb, c.dropout_p, train)?;
        let states = layers::bilstm(tape, p, "lstm", emb, c.hidden_size)?;
        let states = tape.dropout(states, c.dropout_p, train)?;
        let mut x = layers::linear(tape, p, "proj", states)?;
        for l in 0..c.transformer_layers {
            x = layers::encoder_layer(tape, p, &format!("enc{l}"), x, c.attention_heads)?;
        }
        let logits = layers::linear(tape, p, "head", x)?;
        let scores = tape.sigmoid(logits);
        // Keeps every share strictly inside (0, 1) even when the sigmoid saturates.
        let scores = tape.affine(scores, 1.0 - 2.0 * SCORE_FLOOR, SCORE_FLOOR);
        let row = tape.transpose(scores)?;
        tape.normalize(row)
    }

    /// Evaluation-mode prediction.
    pub fn predict(&self, tokens: &[String]) -> Result<SaliencyDistribution> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let u = self.forward(&mut tape, &p, tokens, false)?;
        Ok(SaliencyDistribution {
            tokens: tokens.to_vec(),
            u: tape.value(u).to_vec(),
        })
    }

    /// Mean per-record MSE in evaluation mode.
    pub fn evaluate(&self, corpus: &[GazeRecord]) -> Result<f64> {
        if corpus.is_empty() {
            return Err(Error::InsufficientData("empty evaluation corpus".into()));
        }
        let mut total = 0.0;
        for rec in corpus {
            total += tsm_loss(&self.predict(&rec.tokens)?, rec)?;
        }
        Ok(total / corpus.len() as f64)
    }
}

/// Forward pass with explicit train flag and dropout seed.
pub fn tsm_forward(model: &TsmModel, tokens: &[String], train: bool, seed: u64) -> Result<SaliencyDistribution> {
    let mut tape = Tape::with_seed(seed);
    let p = model.params.bind(&mut tape, false);
    let u = model.forward(&mut tape, &p, tokens, train)?;
    Ok(SaliencyDistribution {
        tokens: tokens.to_vec(),
        u: tape.value(u).to_vec(),
    })
}

/// Mean squared error between predicted saliency and normalized durations.
pub fn tsm_loss(predicted: &SaliencyDistribution, target: &GazeRecord) -> Result<f64> {
    if predicted.u.len() != target.durations.len() {
        return Err(Error::Contract(format!(
            "prediction covers {} tokens, target {}",
            predicted.u.len(),
            target.durations.len()
        )));
    }
    if !target.normalized {
        return Err(Error::Contract(format!(
            "target {} is not normalized",
            target.sentence_id
        )));
    }
    let n = predicted.u.len() as f64;
    Ok(predicted
        .u
        .iter()
        .zip(&target.durations)
        .map(|(u, t)| (u - t).powi(2))
        .sum::<f64>()
        / n)
}

fn record_loss(model: &TsmModel, tape: &mut Tape, p: &BoundParams, rec: &GazeRecord, train: bool) -> Result<Var> {
    if rec.durations.len() != rec.tokens.len() {
        return Err(Error::Contract(format!(
            "record {} has mismatched lengths",
            rec.sentence_id
        )));
    }
    let u = model.forward(tape, p, &rec.tokens, train)?;
    let target = tape.constant(&[1, rec.durations.len()], rec.durations.clone())?;
    tape.mse_loss(u, target)
}

/// ADAM over shuffled mini-batches; returns the mean training loss per epoch.
fn train_epochs(
    model: &mut TsmModel,
    optimizer: &mut AdamState,
    corpus: &[GazeRecord],
    epochs: usize,
    seed: u64,
    stage: &str,
) -> Result<Vec<f64>> {
    let rng = Rng::new(seed).fork(stage);
    let batch_size = model.config.batch_size;
    let lr = model.config.learning_rate;
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        rng.fork_index("shuffle", epoch as u64).shuffle(&mut order);
        let mut epoch_total = 0.0;
        for (b, batch) in order.chunks(batch_size).enumerate() {
            let mut batch_total = 0.0;
            for &i in batch {
                let mut tape = Tape::with_seed(rng.fork_index("dropout", (epoch * corpus.len() + i) as u64).seed());
                let p = model.params.bind(&mut tape, true);
                let loss = record_loss(model, &mut tape, &p, &corpus[i], true)?;
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "{stage}: non-finite loss at epoch {} batch {b} (record {})",
                        epoch + 1,
                        corpus[i].sentence_id
                    )));
                }
                batch_total += value;
                let grads = tape.backward(loss)?;
                model.params.accumulate(&p, &grads)?;
            }
            model.params.scale_grads(1.0 / batch.len() as f64);
            adam_step(&mut model.params, optimizer, lr)
                .map_err(|e| Error::Numeric(format!("{stage}: epoch {} batch {b}: {e}", epoch + 1)))?;
            epoch_total += batch_total;
        }
        let mean = epoch_total / corpus.len() as f64;
        log::debug!("{stage} epoch {} loss {mean:.6e}", epoch + 1);
        losses.push(mean);
    }
    Ok(losses)
}

/// First stage: training on synthetic gaze for `pretrain_epochs`.
pub fn pretrain(mut model: TsmModel, synthetic: &[GazeRecord], seed: u64) -> Result<Checkpoint> {
    if synthetic.is_empty() {
        return Err(Error::Contract("pretraining corpus is empty".into()));
    }
    let mut optimizer = AdamState::default();
    let epochs = model.config.pretrain_epochs;
    let losses = train_epochs(&mut model, &mut optimizer, synthetic, epochs, seed, "pretrain")?;
    let mut prov = Provenance::new(Stage::Pretrained, &model.flat_config(), seed);
    prov.epochs = epochs;
    prov.epoch_losses = losses;
    Ok(model.to_checkpoint(prov, optimizer))
}

/// Second stage: continues training on human records, one sample per
/// (sentence, reader). Training hyperparameters come from `config`; the
/// architecture must match the checkpoint.
pub fn finetune(checkpoint: &Checkpoint, human: &[GazeRecord], config: &TsmConfig, seed: u64) -> Result<Checkpoint> {
    if !matches!(checkpoint.provenance.stage, Stage::Pretrained | Stage::RandomInit) {
        return Err(Error::Config(format!(
            "fine-tuning needs a pretrained or random-init checkpoint, got {}",
            checkpoint.provenance.stage
        )));
    }
    if human.is_empty() {
        return Err(Error::Contract("fine-tuning corpus is empty".into()));
    }
    let mut model = TsmModel::from_checkpoint(checkpoint)?;
    if !model.config.same_architecture(config) {
        return Err(Error::Config("fine-tuning config changes the architecture".into()));
    }
    model.config = config.clone();
    let mut optimizer = checkpoint.optimizer.clone();
    let epochs = config.finetune_epochs;
    let losses = train_epochs(&mut model, &mut optimizer, human, epochs, seed, "finetune")?;
    let mut prov = Provenance::new(Stage::Finetuned, &model.flat_config(), seed);
    prov.epochs = epochs;
    prov.epoch_losses = losses;
    Ok(model.to_checkpoint(prov, optimizer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::grad_check_params;

    pub(crate) fn tiny_config() -> TsmConfig {
        TsmConfig {
            embed_dim: 6,
            hidden_size: 8,
            transformer_layers: 2,
            attention_heads: 2,
            feedforward_dim: 16,
            dropout_p: 0.0,
            pretrain_epochs: 1,
            finetune_epochs: 1,
            learning_rate: 1e-3,
            batch_size: 2,
        }
    }

    fn toks(s: &str) -> Vec<String> {
        s.split(' ').map(String::from).collect()
    }

    fn tiny_model(seed: u64) -> TsmModel {
        let vocab = Vocabulary::from_tokens(["the", "cat", "sat", "on", "mat"]);
        let emb = EmbeddingTable::random(&vocab, 6, 1);
        TsmModel::new(tiny_config(), vocab, &emb, seed).unwrap()
    }

    fn target(tokens: &[String], durations: Vec<f64>) -> GazeRecord {
        GazeRecord {
            sentence_id: "t".into(),
            reader_id: "r".into(),
            tokens: tokens.to_vec(),
            durations,
            normalized: true,
        }
    }

    #[test]
    fn single_token_gets_all_mass() {
        let d = tiny_model(0).predict(&toks("cat")).unwrap();
        assert_eq!(d.u, vec![1.0]);
        d.check().unwrap();
    }

    #[test]
    fn zero_parameters_give_uniform() {
        let mut m = tiny_model(0);
        for (_, t) in m.params.iter_mut() {
            t.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let d = m.predict(&toks("the cat sat on")).unwrap();
        for u in d.u {
            assert!((u - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_sentence_rejected() {
        assert!(matches!(tiny_model(0).predict(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn loss_examples() {
        let t = toks("a b");
        let pred = SaliencyDistribution {
            tokens: t.clone(),
            u: vec![0.5, 0.5],
        };
        assert_eq!(tsm_loss(&pred, &target(&t, vec![0.5, 0.5])).unwrap(), 0.0);
        assert_eq!(tsm_loss(&pred, &target(&t, vec![1.0, 0.0])).unwrap(), 0.25);
        let swapped = SaliencyDistribution {
            tokens: t.clone(),
            u: vec![1.0, 0.0],
        };
        assert_eq!(
            tsm_loss(&swapped, &target(&t, vec![0.5, 0.5])).unwrap(),
            tsm_loss(&pred, &target(&t, vec![1.0, 0.0])).unwrap()
        );
        assert!(tsm_loss(&pred, &target(&toks("a"), vec![1.0])).is_err());
    }

    #[test]
    fn order_matters() {
        let m = tiny_model(3);
        let a = m.predict(&toks("the cat sat")).unwrap();
        let b = m.predict(&toks("sat the cat")).unwrap();
        // position j of `b` holds the token at position (j + 1) % 3 of `a`
        let permuted = [a.u[2], a.u[0], a.u[1]];
        let diff = permuted
            .iter()
            .zip(&b.u)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-6, "{diff}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // Embeddings at pretrained-vector scale; at the +-0.05 random init
        // the attention gradients sit near 1e-11, below what a central
        // difference can resolve in f64.
        let mut m = tiny_model(7);
        m.params
            .get_mut("embedding")
            .unwrap()
            .values_mut()
            .iter_mut()
            .for_each(|v| *v *= 20.0);
        let rec = target(&toks("the cat sat"), vec![0.6, 0.1, 0.3]);
        let report = grad_check_params(|tape, p| record_loss(&m, tape, p, &rec, false), &m.params, 1e-5, None).unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    #[test]
    fn overfits_one_pair() {
        let mut m = tiny_model(7);
        let rec = target(&toks("the cat sat"), vec![0.5, 0.3, 0.2]);
        let mut opt = AdamState::default();
        m.config.batch_size = 1;
        m.config.learning_rate = 3e-3;
        train_epochs(&mut m, &mut opt, std::slice::from_ref(&rec), 500, 1, "overfit").unwrap();
        let mse = tsm_loss(&m.predict(&rec.tokens).unwrap(), &rec).unwrap();
        assert!(mse < 1e-4, "{mse}");
    }

    #[test]
    fn zero_epoch_pretrain_is_initialization() {
        let mut m = tiny_model(2);
        m.config.pretrain_epochs = 0;
        let rec = target(&toks("the cat"), vec![0.5, 0.5]);
        let ck = pretrain(m.clone(), &[rec], 0).unwrap();
        assert!(ck.params.bit_identical(&m.params));
        assert!(ck.provenance.epoch_losses.is_empty());
        assert_eq!(ck.provenance.stage, Stage::Pretrained);
    }

    #[test]
    fn finetune_stage_gate() {
        let m = tiny_model(2);
        let rec = target(&toks("the cat"), vec![0.5, 0.5]);
        let ck = m.random_init_checkpoint(0);
        let mut cfg = m.config.clone();
        cfg.finetune_epochs = 0;
        let out = finetune(&ck, std::slice::from_ref(&rec), &cfg, 0).unwrap();
        assert!(out.params.bit_identical(&ck.params));
        assert_eq!(out.provenance.stage, Stage::Finetuned);
        assert!(matches!(finetune(&out, &[rec], &cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn config_round_trips_through_flat() {
        let c = tiny_config();
        let flat = c.to_flat(CONFIG_PREFIX);
        let mut back = TsmConfig::default();
        back.apply(CONFIG_PREFIX, &flat).unwrap();
        assert_eq!(back, c);
        let mut bad = flat.clone();
        bad.set("tsm.attention_heads", "3");
        assert!(TsmConfig::default().apply(CONFIG_PREFIX, &bad).is_err());
    }
}
