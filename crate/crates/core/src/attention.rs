//! Saliency-modulated Luong attention and the saliency source used by the
//! ablation grid.
//!
//! Scores are computed for one decoder (or query) state `h` against the
//! encoder states `S` (`[n, d]`), returning a `[1, n]` row. A saliency row
//! `u` multiplies the raw scores position by position before the softmax.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ProbeHistory, Provenance, Stage, Task};
use crate::error::{Error, Result};
use crate::numeric::{
    adam_step, xavier_uniform, AdamState, BoundParams, Gradients, ParamStore, Rng, Tape, Tensor, Var,
};
use crate::tsm::{SaliencyDistribution, TsmModel};

/// The five conditions of the ablation grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    #[default]
    Full,
    NoFixation,
    RandomInit,
    Frozen,
    WeightSwap,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::Full,
        AblationMode::NoFixation,
        AblationMode::RandomInit,
        AblationMode::Frozen,
        AblationMode::WeightSwap,
    ];

    /// Whether the upstream loss trains the saliency model.
    pub fn trains_tsm(self) -> bool {
        matches!(
            self,
            AblationMode::Full | AblationMode::RandomInit | AblationMode::WeightSwap
        )
    }

    pub fn needs_checkpoint(self) -> bool {
        self != AblationMode::NoFixation
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationMode::Full => "full",
            AblationMode::NoFixation => "no-fixation",
            AblationMode::RandomInit => "random-init",
            AblationMode::Frozen => "frozen",
            AblationMode::WeightSwap => "weight-swap",
        })
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode '{s}'")))
    }
}

/// `W_a` (and `v_a` for the additive score) as standalone tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_a: Tensor,
    pub v_a: Option<Tensor>,
}

impl AttentionParams {
    /// `W_a: [dec_hidden, enc_hidden]`.
    pub fn multiplicative(rng: &mut Rng, dec_hidden: usize, enc_hidden: usize) -> Self {
        AttentionParams {
            w_a: xavier_uniform(rng, dec_hidden, enc_hidden),
            v_a: None,
        }
    }

    /// `W_a: [v_dim, dec_hidden + enc_hidden]`, `v_a: [v_dim]`.
    pub fn additive(rng: &mut Rng, v_dim: usize, dec_hidden: usize, enc_hidden: usize) -> Self {
        let v = xavier_uniform(rng, v_dim, 1);
        AttentionParams {
            w_a: xavier_uniform(rng, v_dim, dec_hidden + enc_hidden),
            v_a: Some(
                Tensor::new(vec![v_dim], v.into_values())
                    .expect("sized")
                    .with_requires_grad(true),
            ),
        }
    }

    pub fn check(&self, dec_hidden: usize, enc_hidden: usize) -> Result<()> {
        let w = self.w_a.shape();
        let ok = match &self.v_a {
            None => w == [dec_hidden, enc_hidden],
            Some(v) => w.len() == 2 && w[1] == dec_hidden + enc_hidden && v.shape() == [w[0]],
        };
        if ok {
            Ok(())
        } else {
            Err(Error::dim(
                "attention params",
                &[w, self.v_a.as_ref().map_or(&[], |v| v.shape())],
            ))
        }
    }

    /// Stores the tensors as `{prefix}.w_a` and `{prefix}.v_a`.
    pub fn insert_into(self, store: &mut ParamStore, prefix: &str) {
        store.insert(format!("{prefix}.w_a"), self.w_a);
        if let Some(v) = self.v_a {
            store.insert(format!("{prefix}.v_a"), v);
        }
    }
}

fn check_query(tape: &Tape, op: &'static str, h: Var, s: Var) -> Result<(usize, usize, usize)> {
    let hs = tape.shape(h);
    let ss = tape.shape(s);
    if hs.len() != 2 || hs[0] != 1 || ss.len() != 2 || ss[0] == 0 {
        return Err(Error::dim(op, &[hs, ss]));
    }
    Ok((hs[1], ss[0], ss[1]))
}

fn modulate(tape: &mut Tape, scores: Var, u: Option<Var>) -> Result<Var> {
    let Some(u) = u else { return Ok(scores) };
    let n = tape.shape(scores)[1];
    if tape.value(u).len() != n {
        return Err(Error::Contract(format!(
            "saliency covers {} positions, encoder has {n}",
            tape.value(u).len()
        )));
    }
    let u = tape.reshape(u, &[1, n])?;
    tape.mul(scores, u)
}

/// `h W_a s_j` for every encoder position `j`.
pub fn score_general(tape: &mut Tape, h: Var, s: Var, w_a: Var) -> Result<Var> {
    let (dh, _, de) = check_query(tape, "score_general", h, s)?;
    if tape.shape(w_a) != [dh, de] {
        return Err(Error::dim(
            "score_general",
            &[tape.shape(h), tape.shape(w_a), tape.shape(s)],
        ));
    }
    let hw = tape.matmul(h, w_a)?;
    let st = tape.transpose(s)?;
    tape.matmul(hw, st)
}

/// General scores times `u`; `u = None` leaves them unmodified.
pub fn score_paragen(tape: &mut Tape, h: Var, s: Var, w_a: Var, u: Option<Var>) -> Result<Var> {
    let scores = score_general(tape, h, s, w_a)?;
    modulate(tape, scores, u)
}

/// Precomputed `W_s s_j` halves of the additive score for a fixed `S`.
#[derive(Clone, Copy, Debug)]
pub struct AdditiveKeys {
    w_h: Var,
    keys: Var,
    v_a: Var,
}

impl AdditiveKeys {
    pub fn new(tape: &mut Tape, s: Var, w_a: Var, v_a: Var, dec_hidden: usize) -> Result<Self> {
        let ss = tape.shape(s).to_vec();
        let ws = tape.shape(w_a).to_vec();
        let vs = tape.shape(v_a).to_vec();
        if ss.len() != 2 || ws.len() != 2 || ws[1] != dec_hidden + ss[1] || vs.iter().product::<usize>() != ws[0] {
            return Err(Error::dim("score_textcomp", &[&ss, &ws, &vs]));
        }
        let w_h = tape.narrow(w_a, 1, 0, dec_hidden)?;
        let w_s = tape.narrow(w_a, 1, dec_hidden, ss[1])?;
        let w_st = tape.transpose(w_s)?;
        let keys = tape.matmul(s, w_st)?;
        let v_a = tape.reshape(v_a, &[ws[0], 1])?;
        Ok(AdditiveKeys { w_h, keys, v_a })
    }

    /// `v_a tanh(W_a [h; s_j])` for every `j`, times `u`.
    pub fn scores(&self, tape: &mut Tape, h: Var, u: Option<Var>) -> Result<Var> {
        let w_ht = tape.transpose(self.w_h)?;
        let query = tape.matmul(h, w_ht)?;
        let pre = tape.add(self.keys, query)?;
        let act = tape.tanh(pre);
        let col = tape.matmul(act, self.v_a)?;
        let scores = tape.transpose(col)?;
        modulate(tape, scores, u)
    }
}

/// Additive score `u_j · v_aᵀ tanh(W_a [h; s_j])`.
pub fn score_textcomp(tape: &mut Tape, h: Var, s: Var, w_a: Var, v_a: Var, u: Option<Var>) -> Result<Var> {
    let (dh, _, _) = check_query(tape, "score_textcomp", h, s)?;
    AdditiveKeys::new(tape, s, w_a, v_a, dh)?.scores(tape, h, u)
}

/// Tape handles for one attention step.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub scores: Var,
    pub weights: Var,
    pub context: Var,
}

impl Attended {
    pub fn row(&self, tape: &Tape) -> AttentionRow {
        AttentionRow {
            weights: tape.value(self.weights).to_vec(),
            context: tape.tensor(self.context),
            raw_scores: tape.value(self.scores).to_vec(),
        }
    }
}

/// Softmax over positions and the weighted sum of `S`.
pub fn attend(tape: &mut Tape, scores: Var, s: Var) -> Result<Attended> {
    let ss = tape.shape(s).to_vec();
    if ss.len() != 2 || ss[0] == 0 {
        return Err(Error::Contract(format!("attention over empty encoder states {ss:?}")));
    }
    if tape.shape(scores) != [1, ss[0]] {
        return Err(Error::dim("attend", &[tape.shape(scores), &ss]));
    }
    let weights = tape.softmax(scores, 1)?;
    let context = tape.matmul(weights, s)?;
    Ok(Attended {
        scores,
        weights,
        context,
    })
}

/// Attention values read back from a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRow {
    pub weights: Vec<f64>,
    pub context: Tensor,
    pub raw_scores: Vec<f64>,
}

/// Where `u` comes from during joint training, per ablation mode.
#[derive(Clone, Debug)]
pub struct SaliencySource {
    mode: AblationMode,
    task: Task,
    model: Option<TsmModel>,
    original: Option<Checkpoint>,
    optimizer: AdamState,
}

impl SaliencySource {
    /// Random-init keeps the checkpoint's architecture, vocabulary and
    /// embeddings but redraws every other weight from `seed`. Weight-swap
    /// expects a checkpoint jointly trained on the other task.
    pub fn new(mode: AblationMode, checkpoint: Option<&Checkpoint>, task: Task, seed: u64) -> Result<Self> {
        if !mode.needs_checkpoint() {
            return Ok(SaliencySource {
                mode,
                task,
                model: None,
                original: None,
                optimizer: AdamState::default(),
            });
        }
        let ckpt = checkpoint.ok_or_else(|| Error::Config(format!("ablation mode {mode} needs a TSM checkpoint")))?;
        if mode == AblationMode::WeightSwap && ckpt.provenance.task != Some(task.other()) {
            return Err(Error::Config(format!(
                "weight-swap for {task} needs a TSM trained with {}, checkpoint has {:?}",
                task.other(),
                ckpt.provenance.task
            )));
        }
        let mut model = TsmModel::from_checkpoint(ckpt)?;
        if mode == AblationMode::RandomInit {
            model.reinitialize(Rng::new(seed).fork("random-init-tsm").seed());
        }
        Ok(SaliencySource {
            mode,
            task,
            model: Some(model),
            original: Some(ckpt.clone()),
            optimizer: AdamState::default(),
        })
    }

    pub fn mode(&self) -> AblationMode {
        self.mode
    }

    pub fn model(&self) -> Option<&TsmModel> {
        self.model.as_ref()
    }

    /// Records the TSM parameters, trainable only in modes that adapt it.
    pub fn bind(&self, tape: &mut Tape) -> Option<BoundParams> {
        self.model.as_ref().map(|m| m.params.bind(tape, self.mode.trains_tsm()))
    }

    /// `u` for `tokens` as a `[1, n]` row, or `None` without fixations.
    /// The TSM runs in evaluation mode; frozen mode cuts the gradient at `u`.
    pub fn saliency(&self, tape: &mut Tape, bound: Option<&BoundParams>, tokens: &[String]) -> Result<Option<Var>> {
        let (Some(model), Some(p)) = (&self.model, bound) else {
            return Ok(None);
        };
        let u = model.forward(tape, p, tokens, false)?;
        Ok(Some(if self.mode == AblationMode::Frozen {
            tape.detach(u)
        } else {
            u
        }))
    }

    /// Evaluation-mode `u` values, for probes and inference.
    pub fn predict(&self, tokens: &[String]) -> Result<Option<SaliencyDistribution>> {
        self.model.as_ref().map(|m| m.predict(tokens)).transpose()
    }

    pub fn accumulate(&mut self, bound: Option<&BoundParams>, grads: &Gradients) -> Result<()> {
        if let (true, Some(m), Some(p)) = (self.mode.trains_tsm(), self.model.as_mut(), bound) {
            m.params.accumulate(p, grads)?;
        }
        Ok(())
    }

    /// One ADAM step on the TSM after `scale`-averaging its gradients.
    pub fn step(&mut self, scale: f64, lr: f64) -> Result<()> {
        if let (true, Some(m)) = (self.mode.trains_tsm(), self.model.as_mut()) {
            m.params.scale_grads(scale);
            adam_step(&mut m.params, &mut self.optimizer, lr)?;
        }
        Ok(())
    }

    /// The saliency model after joint training. Frozen mode returns the
    /// input checkpoint untouched; no-fixation has none.
    pub fn to_checkpoint(
        &self,
        epochs: usize,
        seed: u64,
        losses: &[f64],
        probe: Option<ProbeHistory>,
    ) -> Option<Checkpoint> {
        let model = self.model.as_ref()?;
        if !self.mode.trains_tsm() {
            return self.original.clone();
        }
        let mut prov = Provenance::new(Stage::Joint, &model.flat_config(), seed);
        prov.task = Some(self.task);
        prov.ablation = Some(self.mode.to_string());
        prov.epochs = epochs;
        prov.epoch_losses = losses.to_vec();
        prov.probe = probe;
        Some(model.to_checkpoint(prov, self.optimizer.clone()))
    }
}

/// Evaluation-mode saliency for one sentence under `mode`; `None` for
/// no-fixation.
pub fn make_u(
    mode: AblationMode,
    checkpoint: Option<&Checkpoint>,
    task: Task,
    sentence: &[String],
    seed: u64,
) -> Result<Option<SaliencyDistribution>> {
    SaliencySource::new(mode, checkpoint, task, seed)?.predict(sentence)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn c(tape: &mut Tape, shape: &[usize], v: Vec<f64>) -> Var {
        tape.constant(shape, v).unwrap()
    }

    #[test]
    fn general_hand_case() {
        let mut t = Tape::new();
        let h = c(&mut t, &[1, 2], vec![1.0, 0.0]);
        let s = c(&mut t, &[2, 2], vec![2.0, 0.0, 0.0, 3.0]);
        let w = c(&mut t, &[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let sc = score_general(&mut t, h, s, w).unwrap();
        assert_eq!(t.value(sc), &[2.0, 0.0]);
    }

    #[test]
    fn zero_saliency_keeps_positive_weight() {
        let mut t = Tape::new();
        let scores = c(&mut t, &[1, 2], vec![2.0, 3.0]);
        let u = c(&mut t, &[1, 2], vec![1.0, 0.0]);
        let m = modulate(&mut t, scores, Some(u)).unwrap();
        assert_eq!(t.value(m), &[2.0, 0.0]);
        let s = c(&mut t, &[2, 1], vec![1.0, 2.0]);
        let a = attend(&mut t, m, s).unwrap();
        assert_abs_diff_eq!(t.value(a.weights)[0], 0.8808, epsilon = 1e-4);
        assert_abs_diff_eq!(t.value(a.weights)[1], 0.1192, epsilon = 1e-4);
    }

    #[test]
    fn textcomp_scalar_case() {
        let mut t = Tape::new();
        let h = c(&mut t, &[1, 1], vec![0.5]);
        let s = c(&mut t, &[1, 1], vec![0.5]);
        let w = c(&mut t, &[1, 2], vec![1.0, 1.0]);
        let v = c(&mut t, &[1], vec![1.0]);
        let u = c(&mut t, &[1, 1], vec![1.0]);
        let sc = score_textcomp(&mut t, h, s, w, v, Some(u)).unwrap();
        assert_abs_diff_eq!(t.value(sc)[0], 0.76159, epsilon = 1e-5);
    }

    #[test]
    fn attend_hand_cases() {
        let mut t = Tape::new();
        let scores = c(&mut t, &[1, 2], vec![3f64.ln(), 0.0]);
        let s = c(&mut t, &[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let a = attend(&mut t, scores, s).unwrap();
        assert_abs_diff_eq!(t.value(a.weights)[0], 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(t.value(a.context)[1], 0.25, epsilon = 1e-12);
        let flat = c(&mut t, &[1, 2], vec![0.5, 0.5]);
        let a = attend(&mut t, flat, s).unwrap();
        assert_eq!(t.value(a.context), &[0.5, 0.5]);
    }

    #[test]
    fn misaligned_saliency_is_contract_error() {
        let mut t = Tape::new();
        let h = c(&mut t, &[1, 1], vec![1.0]);
        let s = c(&mut t, &[2, 1], vec![1.0, 2.0]);
        let w = c(&mut t, &[1, 1], vec![1.0]);
        let u = c(&mut t, &[1, 3], vec![0.2, 0.3, 0.5]);
        assert!(matches!(
            score_paragen(&mut t, h, s, w, Some(u)),
            Err(Error::Contract(_))
        ));
        let empty = c(&mut t, &[0, 1], vec![]);
        let sc = c(&mut t, &[1, 0], vec![]);
        assert!(matches!(attend(&mut t, sc, empty), Err(Error::Contract(_))));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in AblationMode::ALL {
            assert_eq!(m.to_string().parse::<AblationMode>().unwrap(), m);
        }
        assert!("everything".parse::<AblationMode>().is_err());
    }

    #[test]
    fn modes_needing_checkpoint_reject_none() {
        for m in AblationMode::ALL {
            let r = SaliencySource::new(m, None, Task::Paragen, 1);
            assert_eq!(r.is_ok(), m == AblationMode::NoFixation, "{m}");
        }
    }
}
