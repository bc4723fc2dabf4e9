//! Joint training of an upstream task network with the saliency model.
//!
//! Both parameter sets are bound on one tape per example, so the task loss
//! reaches the TSM through `u` whenever the ablation mode lets it.

use crate::attention::SaliencySource;
use crate::checkpoint::{Checkpoint, ProbeHistory, Task};
use crate::error::{Error, Result};
use crate::numeric::{adam_step, AdamState, BoundParams, ParamStore, Rng, Tape, Var};

/// An upstream network trainable with saliency-modulated attention.
pub trait TaskNetwork {
    type Example;

    const TASK: Task;

    fn params(&self) -> &ParamStore;

    fn params_mut(&mut self) -> &mut ParamStore;

    /// Tokens the saliency row is computed over.
    fn saliency_tokens<'e>(&self, example: &'e Self::Example) -> &'e [String];

    fn loss(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        example: &Self::Example,
        u: Option<Var>,
        train: bool,
    ) -> Result<Var>;
}

pub struct JointTrainer<N: TaskNetwork> {
    network: N,
    saliency: SaliencySource,
    optimizer: AdamState,
    learning_rate: f64,
    batch_size: usize,
    rng: Rng,
    probe: Option<Vec<String>>,
    history: ProbeHistory,
    losses: Vec<f64>,
    steps: u64,
}

impl<N: TaskNetwork> JointTrainer<N> {
    pub fn new(network: N, saliency: SaliencySource, learning_rate: f64, batch_size: usize, seed: u64) -> Result<Self> {
        if !(learning_rate > 0.0) || batch_size == 0 {
            return Err(Error::Config(format!(
                "joint training needs a positive learning rate and batch size, got {learning_rate} and {batch_size}"
            )));
        }
        Ok(JointTrainer {
            network,
            saliency,
            optimizer: AdamState::default(),
            learning_rate,
            batch_size,
            rng: Rng::new(seed).fork("joint"),
            probe: None,
            history: ProbeHistory::default(),
            losses: Vec::new(),
            steps: 0,
        })
    }

    /// Sentence whose saliency is recorded after every epoch.
    pub fn with_probe(mut self, tokens: Vec<String>) -> Self {
        self.history.tokens = tokens.clone();
        self.probe = Some(tokens);
        self
    }

    pub fn network(&self) -> &N {
        &self.network
    }

    pub fn saliency(&self) -> &SaliencySource {
        &self.saliency
    }

    pub fn history(&self) -> &ProbeHistory {
        &self.history
    }

    pub fn epoch_losses(&self) -> &[f64] {
        &self.losses
    }

    /// Evaluation-mode saliency for `tokens` from the current TSM.
    pub fn current_u(&self, tokens: &[String]) -> Result<Option<Vec<f64>>> {
        Ok(self.saliency.predict(tokens)?.map(|d| d.u))
    }

    /// Accumulates gradients over `batch`, then one ADAM step for the task
    /// network and, when trainable, the TSM. Returns the summed loss.
    pub fn step(&mut self, batch: &[&N::Example]) -> Result<f64> {
        let mut total = 0.0;
        for (k, example) in batch.iter().enumerate() {
            let seed = self.rng.fork_index("dropout", self.steps).seed();
            self.steps += 1;
            let mut tape = Tape::with_seed(seed);
            let p = self.network.params().bind(&mut tape, true);
            let tsm = self.saliency.bind(&mut tape);
            let u = self
                .saliency
                .saliency(&mut tape, tsm.as_ref(), self.network.saliency_tokens(example))?;
            let loss = self.network.loss(&mut tape, &p, example, u, true)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "{} joint training: non-finite loss on batch item {k} after {} examples",
                    N::TASK,
                    self.steps - 1
                )));
            }
            total += value;
            let grads = tape.backward(loss)?;
            self.network.params_mut().accumulate(&p, &grads)?;
            self.saliency.accumulate(tsm.as_ref(), &grads)?;
        }
        let scale = 1.0 / batch.len().max(1) as f64;
        self.network.params_mut().scale_grads(scale);
        adam_step(self.network.params_mut(), &mut self.optimizer, self.learning_rate)
            .map_err(|e| Error::Numeric(format!("{} task step: {e}", N::TASK)))?;
        self.saliency
            .step(scale, self.learning_rate)
            .map_err(|e| Error::Numeric(format!("{} TSM step: {e}", N::TASK)))?;
        Ok(total)
    }

    /// One shuffled pass; returns the mean per-example loss.
    pub fn epoch(&mut self, corpus: &[N::Example]) -> Result<f64> {
        if corpus.is_empty() {
            return Err(Error::Contract(format!("{} training corpus is empty", N::TASK)));
        }
        let epoch = self.losses.len();
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        self.rng.fork_index("shuffle", epoch as u64).shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(self.batch_size) {
            let batch: Vec<&N::Example> = chunk.iter().map(|&i| &corpus[i]).collect();
            total += self.step(&batch)?;
        }
        let mean = total / corpus.len() as f64;
        log::debug!("{} epoch {} loss {mean:.6e}", N::TASK, epoch + 1);
        self.losses.push(mean);
        if let Some(tokens) = &self.probe {
            if let Some(u) = self.saliency.predict(tokens)? {
                self.history.saliency.push(u.u);
            }
        }
        Ok(mean)
    }

    pub fn train(&mut self, corpus: &[N::Example], epochs: usize) -> Result<()> {
        for _ in 0..epochs {
            self.epoch(corpus)?;
        }
        Ok(())
    }

    pub fn tsm_checkpoint(&self, seed: u64) -> Option<Checkpoint> {
        let probe = self.probe.as_ref().map(|_| self.history.clone());
        self.saliency
            .to_checkpoint(self.losses.len(), seed, &self.losses, probe)
    }

    pub fn optimizer(&self) -> &AdamState {
        &self.optimizer
    }

    pub fn into_parts(self) -> (N, SaliencySource, AdamState) {
        (self.network, self.saliency, self.optimizer)
    }
}
