//! Desk-scale corpora, configs and experiments shared by the test suites,
//! the benches and the CLI smoke runs.

use crate::attention::{AblationMode, SaliencySource};
use crate::checkpoint::Checkpoint;
use crate::corpus::{build_vocab, grammar_sentences, make_synthetic_task_corpora, paraphrase, CorpusSizes};
use crate::embeddings::EmbeddingTable;
use crate::embeddings::Vocabulary;
use crate::error::Result;
use crate::gaze_synth::{generate_pretraining_corpus, GazeRecord, SimulatorParams};
use crate::joint::{JointTrainer, TaskNetwork};
use crate::numeric::{grad_check, grad_check_params, GradCheckReport, ParamStore, Rng, Tape, Tensor, Var};
use crate::paragen::{ParagenConfig, ParagenModel, SentencePair};
use crate::sentcomp::{DeletionExample, SentcompConfig, SentcompModel};
use crate::tsm::{finetune, pretrain, TsmConfig, TsmModel};

/// Token inserted into toy compression sentences; everything after it is deleted.
pub const CUT_MARKER: &str = "xx";

pub fn toy_tsm_config() -> TsmConfig {
    TsmConfig {
        embed_dim: 16,
        hidden_size: 16,
        transformer_layers: 1,
        attention_heads: 2,
        feedforward_dim: 32,
        dropout_p: 0.0,
        pretrain_epochs: 10,
        finetune_epochs: 10,
        learning_rate: 3e-3,
        batch_size: 10,
    }
}

/// Untrained small TSM over `sentences`, used where only the joint mechanics matter.
pub fn toy_tsm_checkpoint(sentences: &[Vec<String>], seed: u64) -> Result<Checkpoint> {
    let vocab = build_vocab(sentences.iter().flatten(), 1);
    let config = toy_tsm_config();
    let emb = EmbeddingTable::random(&vocab, config.embed_dim, seed);
    Ok(TsmModel::new(config, vocab, &emb, seed)?.random_init_checkpoint(seed))
}

/// 16 grammar sentences paired with their synonym paraphrases.
pub fn toy_paraphrase_corpus(seed: u64) -> Result<Vec<SentencePair>> {
    grammar_sentences(seed, 16)
        .into_iter()
        .map(|s| {
            let t = paraphrase(&s);
            SentencePair::new(s, t)
        })
        .collect()
}

/// 16 grammar sentences with a cut marker; gold keeps tokens up to and including it.
pub fn toy_compression_corpus(seed: u64) -> Result<Vec<DeletionExample>> {
    grammar_sentences(seed, 16)
        .into_iter()
        .enumerate()
        .map(|(i, mut tokens)| {
            let pos = 1 + i % (tokens.len() - 1);
            tokens.insert(pos, CUT_MARKER.to_string());
            let keep = (0..tokens.len()).map(|j| j <= pos).collect();
            DeletionExample::new(tokens, keep)
        })
        .collect()
}

pub fn toy_paragen_config() -> ParagenConfig {
    ParagenConfig {
        embed_dim: 16,
        hidden_size: 64,
        dropout_p: 0.0,
        learning_rate: 3e-3,
        max_decode_len: 20,
        ablation: AblationMode::Full,
        epochs: 30,
        batch_size: 4,
        train_embeddings: true,
        ..ParagenConfig::default()
    }
}

pub fn toy_sentcomp_config() -> SentcompConfig {
    SentcompConfig {
        embed_dim: 16,
        hidden_size: 64,
        dropout_p: 0.0,
        learning_rate: 3e-3,
        ablation: AblationMode::Full,
        epochs: 30,
        batch_size: 4,
        train_embeddings: true,
        ..SentcompConfig::default()
    }
}

/// Result of [`overfit`].
#[derive(Clone, Debug)]
pub struct OverfitRun {
    pub epochs: usize,
    pub accuracy: f64,
    pub epoch_losses: Vec<f64>,
    /// Probe saliency after every epoch (empty without a trainable TSM).
    pub probe_saliency: Vec<Vec<f64>>,
}

/// Joint training until `accuracy` reaches `target` (checked every
/// `check_every` epochs) or `max_epochs` is spent.
pub fn overfit<N, A>(
    trainer: &mut JointTrainer<N>,
    corpus: &[N::Example],
    max_epochs: usize,
    check_every: usize,
    target: f64,
    accuracy: A,
) -> Result<OverfitRun>
where
    N: TaskNetwork,
    A: Fn(&N, &[N::Example], &SaliencySource) -> Result<f64>,
{
    let mut epochs = 0;
    let mut acc = accuracy(trainer.network(), corpus, trainer.saliency())?;
    while epochs < max_epochs && acc < target {
        let chunk = check_every.max(1).min(max_epochs - epochs);
        trainer.train(corpus, chunk)?;
        epochs += chunk;
        acc = accuracy(trainer.network(), corpus, trainer.saliency())?;
        log::debug!("overfit {} epochs {epochs} accuracy {acc:.4}", N::TASK);
    }
    Ok(OverfitRun {
        epochs,
        accuracy: acc,
        epoch_losses: trainer.epoch_losses().to_vec(),
        probe_saliency: trainer.history().saliency.clone(),
    })
}

pub fn overfit_paragen(seed: u64, max_epochs: usize) -> Result<OverfitRun> {
    let corpus = toy_paraphrase_corpus(5)?;
    let sources: Vec<Vec<String>> = corpus.iter().map(|p| p.source.clone()).collect();
    let tsm = toy_tsm_checkpoint(&sources, seed)?;
    let config = toy_paragen_config();
    let model = ParagenModel::for_corpus(config.clone(), &corpus, seed)?;
    let saliency = SaliencySource::new(config.ablation, Some(&tsm), crate::Task::Paragen, seed)?;
    let mut trainer = JointTrainer::new(model, saliency, config.learning_rate, config.batch_size, seed)?
        .with_probe(sources[0].clone());
    overfit(&mut trainer, &corpus, max_epochs, 10, 0.99, |m, c, s| {
        m.token_accuracy(c, s)
    })
}

pub fn overfit_sentcomp(seed: u64, max_epochs: usize) -> Result<OverfitRun> {
    let corpus = toy_compression_corpus(7)?;
    let sentences: Vec<Vec<String>> = corpus.iter().map(|e| e.tokens.clone()).collect();
    let tsm = toy_tsm_checkpoint(&sentences, seed)?;
    let config = toy_sentcomp_config();
    let model = SentcompModel::for_corpus(config.clone(), &corpus, seed)?;
    let saliency = SaliencySource::new(config.ablation, Some(&tsm), crate::Task::Sentcomp, seed)?;
    let mut trainer = JointTrainer::new(model, saliency, config.learning_rate, config.batch_size, seed)?
        .with_probe(sentences[0].clone());
    overfit(&mut trainer, &corpus, max_epochs, 10, 0.99, |m, c, s| {
        m.token_accuracy(c, s)
    })
}

/// Held-out MSE of the three TSM training regimes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HybridResult {
    pub finetuned_after_pretraining: f64,
    pub finetuned_only: f64,
    pub pretrained_only: f64,
}

/// Pretraining data come from the default simulator, "human" data from
/// [`crate::corpus::human_simulator_params`]; 60 sentences × 3 readers
/// train, 30 held-out sentences × 3 readers evaluate.
pub fn hybrid_experiment(seed: u64) -> Result<HybridResult> {
    const TRAIN: usize = 60;
    const HELD_OUT: usize = 30;
    let corpora = make_synthetic_task_corpora(
        100 + seed,
        CorpusSizes {
            pairs: 1,
            compression: 1,
            gaze_sentences: TRAIN + HELD_OUT,
            readers: 3,
        },
    )?;
    let (train, held): (Vec<GazeRecord>, Vec<GazeRecord>) = corpora
        .gaze
        .iter()
        .cloned()
        .partition(|r| r.sentence_id[1..].parse::<usize>().is_ok_and(|i| i < TRAIN));
    let synth_sentences = grammar_sentences(900 + seed, 300);
    let synthetic = generate_pretraining_corpus(
        &synth_sentences,
        &corpora.lexicon,
        &SimulatorParams::default(),
        20,
        seed,
    )?;

    let mut words: Vec<&String> = synth_sentences.iter().flatten().collect();
    words.extend(corpora.gaze.iter().flat_map(|r| &r.tokens));
    let vocab = build_vocab(words, 1);
    let config = toy_tsm_config();
    let emb = EmbeddingTable::random(&vocab, config.embed_dim, seed);
    let model = TsmModel::new(config.clone(), vocab, &emb, seed)?;
    let random = model.random_init_checkpoint(seed);
    let pretrained = pretrain(model, &synthetic, seed)?;
    let after = finetune(&pretrained, &train, &config, seed)?;
    let only = finetune(&random, &train, &config, seed)?;
    let eval = |c: &Checkpoint| TsmModel::from_checkpoint(c)?.evaluate(&held);
    Ok(HybridResult {
        finetuned_after_pretraining: eval(&after)?,
        finetuned_only: eval(&only)?,
        pretrained_only: eval(&pretrained)?,
    })
}

fn random_tensor(rng: &mut Rng, shape: &[usize], low: f64, high: f64) -> Tensor {
    let n = shape.iter().product();
    let values = (0..n)
        .map(|_| {
            let v = rng.uniform_range(low, high);
            // Keep clear of the relu kink.
            if v.abs() < 0.05 {
                v + 0.1f64.copysign(v)
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), values).expect("shape and values agree")
}

/// Finite-difference checks of every differentiable primitive with respect
/// to each of its inputs, at `points` random points each.
/// Returns `(primitive/argument, max relative error)`.
pub fn primitive_grad_checks(seed: u64, points: usize, eps: f64) -> Result<Vec<(String, f64)>> {
    type Case = (
        &'static str,
        Vec<usize>,
        Box<dyn Fn(&mut Tape, Var, &[Tensor]) -> Result<Var>>,
        Vec<Vec<usize>>,
    );
    let cases: Vec<Case> = vec![
        (
            "matmul/lhs",
            vec![2, 3],
            Box::new(|t, x, c| {
                let b = t.leaf(&c[0]);
                t.matmul(x, b)
            }),
            vec![vec![3, 4]],
        ),
        (
            "matmul/rhs",
            vec![3, 4],
            Box::new(|t, x, c| {
                let a = t.leaf(&c[0]);
                t.matmul(a, x)
            }),
            vec![vec![2, 3]],
        ),
        (
            "add",
            vec![2, 3],
            Box::new(|t, x, c| {
                let b = t.leaf(&c[0]);
                t.add(x, b)
            }),
            vec![vec![2, 3]],
        ),
        (
            "add/broadcast-row",
            vec![1, 3],
            Box::new(|t, x, c| {
                let b = t.leaf(&c[0]);
                t.add(b, x)
            }),
            vec![vec![2, 3]],
        ),
        (
            "sub/lhs",
            vec![2, 3],
            Box::new(|t, x, c| {
                let b = t.leaf(&c[0]);
                t.sub(x, b)
            }),
            vec![vec![2, 3]],
        ),
        (
            "sub/rhs",
            vec![2, 3],
            Box::new(|t, x, c| {
                let a = t.leaf(&c[0]);
                t.sub(a, x)
            }),
            vec![vec![2, 3]],
        ),
        (
            "elementwise_mul",
            vec![2, 3],
            Box::new(|t, x, c| {
                let b = t.leaf(&c[0]);
                t.mul(x, b)
            }),
            vec![vec![2, 3]],
        ),
        (
            "elementwise_mul/square",
            vec![2, 3],
            Box::new(|t, x, _| t.mul(x, x)),
            vec![],
        ),
        (
            "concat/axis0",
            vec![2, 3],
            Box::new(|t, x, c| {
                let b = t.leaf(&c[0]);
                t.concat(&[b, x], 0)
            }),
            vec![vec![1, 3]],
        ),
        (
            "concat/axis1",
            vec![2, 3],
            Box::new(|t, x, c| {
                let b = t.leaf(&c[0]);
                t.concat(&[x, b], 1)
            }),
            vec![vec![2, 2]],
        ),
        ("narrow", vec![3, 4], Box::new(|t, x, _| t.narrow(x, 1, 1, 2)), vec![]),
        ("transpose", vec![2, 3], Box::new(|t, x, _| t.transpose(x)), vec![]),
        ("reshape", vec![2, 3], Box::new(|t, x, _| t.reshape(x, &[3, 2])), vec![]),
        (
            "affine",
            vec![2, 3],
            Box::new(|t, x, _| Ok(t.affine(x, -1.7, 0.3))),
            vec![],
        ),
        ("sigmoid", vec![2, 3], Box::new(|t, x, _| Ok(t.sigmoid(x))), vec![]),
        ("tanh", vec![2, 3], Box::new(|t, x, _| Ok(t.tanh(x))), vec![]),
        ("relu", vec![2, 3], Box::new(|t, x, _| Ok(t.relu(x))), vec![]),
        ("softmax/axis1", vec![2, 4], Box::new(|t, x, _| t.softmax(x, 1)), vec![]),
        ("softmax/axis0", vec![3, 2], Box::new(|t, x, _| t.softmax(x, 0)), vec![]),
        (
            "normalize",
            vec![1, 4],
            Box::new(|t, x, _| {
                let p = t.sigmoid(x);
                t.normalize(p)
            }),
            vec![],
        ),
        (
            "dropout",
            vec![2, 3],
            Box::new(|t, x, _| t.dropout_with_mask(x, vec![2.0, 0.0, 2.0, 2.0, 0.0, 2.0])),
            vec![],
        ),
        (
            "embedding_lookup",
            vec![4, 3],
            Box::new(|t, x, _| t.embedding_lookup(x, &[2, 0, 2, 3])),
            vec![],
        ),
        (
            "linear/x",
            vec![2, 3],
            Box::new(|t, x, c| {
                let w = t.leaf(&c[0]);
                let b = t.leaf(&c[1]);
                t.linear(x, w, b)
            }),
            vec![vec![3, 4], vec![1, 4]],
        ),
        (
            "linear/w",
            vec![3, 4],
            Box::new(|t, w, c| {
                let x = t.leaf(&c[0]);
                let b = t.leaf(&c[1]);
                t.linear(x, w, b)
            }),
            vec![vec![2, 3], vec![1, 4]],
        ),
        (
            "linear/b",
            vec![1, 4],
            Box::new(|t, b, c| {
                let x = t.leaf(&c[0]);
                let w = t.leaf(&c[1]);
                t.linear(x, w, b)
            }),
            vec![vec![2, 3], vec![3, 4]],
        ),
        (
            "layer_norm/x",
            vec![2, 4],
            Box::new(|t, x, c| {
                let g = t.leaf(&c[0]);
                let b = t.leaf(&c[1]);
                t.layer_norm(x, g, b, 1e-5)
            }),
            vec![vec![1, 4], vec![1, 4]],
        ),
        (
            "layer_norm/gamma",
            vec![1, 4],
            Box::new(|t, g, c| {
                let x = t.leaf(&c[0]);
                let b = t.leaf(&c[1]);
                t.layer_norm(x, g, b, 1e-5)
            }),
            vec![vec![2, 4], vec![1, 4]],
        ),
        (
            "layer_norm/beta",
            vec![1, 4],
            Box::new(|t, b, c| {
                let x = t.leaf(&c[0]);
                let g = t.leaf(&c[1]);
                t.layer_norm(x, g, b, 1e-5)
            }),
            vec![vec![2, 4], vec![1, 4]],
        ),
        (
            "mse_loss/pred",
            vec![1, 4],
            Box::new(|t, x, c| {
                let y = t.leaf(&c[0]);
                t.mse_loss(x, y)
            }),
            vec![vec![1, 4]],
        ),
        (
            "mse_loss/target",
            vec![1, 4],
            Box::new(|t, y, c| {
                let x = t.leaf(&c[0]);
                t.mse_loss(x, y)
            }),
            vec![vec![1, 4]],
        ),
        (
            "cross_entropy_loss",
            vec![2, 3],
            Box::new(|t, x, _| t.cross_entropy_loss(x, &[2, 0])),
            vec![],
        ),
        (
            "bce_with_logits",
            vec![3, 1],
            Box::new(|t, x, _| t.bce_with_logits(x, &[1.0, 0.0, 1.0])),
            vec![],
        ),
        ("sum", vec![2, 3], Box::new(|t, x, _| Ok(t.sum(x))), vec![]),
    ];

    let root = Rng::new(seed).fork("primitive-gradcheck");
    let mut report = Vec::with_capacity(cases.len());
    for (name, shape, op, others) in &cases {
        let mut worst = 0.0f64;
        for k in 0..points {
            let mut rng = root.fork(name).fork_index("point", k as u64);
            let point = random_tensor(&mut rng, shape, -1.5, 1.5);
            let consts: Vec<Tensor> = others.iter().map(|s| random_tensor(&mut rng, s, -1.5, 1.5)).collect();
            // Project non-scalar outputs onto fixed random weights so every
            // output coordinate contributes to the checked scalar.
            let f = |tape: &mut Tape, x: Var| -> Result<Var> {
                let out = op(tape, x, &consts)?;
                if tape.value(out).len() == 1 {
                    return Ok(out);
                }
                let mut wrng = root.fork(name).fork_index("weights", k as u64);
                let w = random_tensor(&mut wrng, tape.shape(out), -1.0, 1.0);
                let w = tape.leaf(&w);
                let y = tape.mul(out, w)?;
                Ok(tape.sum(y))
            };
            worst = worst.max(grad_check(f, &point, eps)?);
        }
        report.push((name.to_string(), worst));
    }
    Ok(report)
}

fn tokens(s: &str) -> Vec<String> {
    s.split(' ').map(String::from).collect()
}

/// Pretrained vectors are about unit scale; the random table is +-0.05.
/// Below unit scale the attention gradients shrink under what a central
/// difference resolves.
fn scale_embedding(params: &mut ParamStore) {
    scale_params(params, "embedding", 20.0);
}

fn scale_params(params: &mut ParamStore, prefix: &str, factor: f64) {
    for (name, t) in params.iter_mut() {
        if name.starts_with(prefix) {
            t.values_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
}

fn gradcheck_tsm(seed: u64) -> Result<TsmModel> {
    let vocab = Vocabulary::from_tokens(["the", "cat", "sat", "on", "mat"]);
    let config = TsmConfig {
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
    };
    let emb = EmbeddingTable::random(&vocab, config.embed_dim, 1);
    let mut model = TsmModel::new(config, vocab, &emb, seed)?;
    scale_embedding(&mut model.params);
    Ok(model)
}

/// Finite-difference checks of the full TSM, paraphrase and compression
/// losses over every trainable coordinate, plus the TSM output head seen
/// through each task loss (`"paragen/tsm"`, `"sentcomp/tsm"`). Small
/// configs, eps 1e-5.
pub fn model_grad_checks(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    const EPS: f64 = 1e-5;
    let mut out = Vec::new();
    let tsm = gradcheck_tsm(seed)?;
    let mut head_only = tsm.params.clone();
    for (name, t) in head_only.iter_mut() {
        t.set_requires_grad(name == "head.w");
    }
    let sentence = tokens("the cat sat");
    let target = [0.6, 0.1, 0.3];
    let report = grad_check_params(
        |tape, p| {
            let u = tsm.forward(tape, p, &sentence, false)?;
            let t = tape.constant(&[1, 3], target.to_vec())?;
            tape.mse_loss(u, t)
        },
        &tsm.params,
        EPS,
        None,
    )?;
    out.push(("tsm".to_string(), report));

    let pair = SentencePair::new(tokens("the cat sat"), tokens("a cat sat down"))?;
    let paragen_config = ParagenConfig {
        embed_dim: 6,
        hidden_size: 8,
        dropout_p: 0.0,
        max_decode_len: 8,
        ablation: AblationMode::Full,
        train_embeddings: true,
        ..ParagenConfig::default()
    };
    let mut paragen = ParagenModel::for_corpus(paragen_config, std::slice::from_ref(&pair), seed)?;
    scale_embedding(&mut paragen.params);
    let u_fixed = [0.5, 0.2, 0.3];
    let report = grad_check_params(
        |tape, p| {
            let u = tape.constant(&[1, 3], u_fixed.to_vec())?;
            paragen.pair_loss(tape, p, &pair, Some(u), false)
        },
        &paragen.params,
        EPS,
        None,
    )?;
    out.push(("paragen".to_string(), report));
    let report = grad_check_params(
        |tape, tp| {
            let u = tsm.forward(tape, tp, &pair.source, false)?;
            let p = paragen.params.bind(tape, false);
            paragen.pair_loss(tape, &p, &pair, Some(u), false)
        },
        &head_only,
        EPS,
        None,
    )?;
    out.push(("paragen/tsm".to_string(), report));

    let example = DeletionExample::new(tokens("the cat sat"), vec![true, false, true])?;
    let sentcomp_config = SentcompConfig {
        embed_dim: 5,
        hidden_size: 4,
        dropout_p: 0.0,
        ablation: AblationMode::Full,
        train_embeddings: true,
        ..SentcompConfig::default()
    };
    let mut sentcomp = SentcompModel::for_corpus(sentcomp_config, std::slice::from_ref(&example), seed)?;
    scale_embedding(&mut sentcomp.params);
    // Signals fade through three stacked layers at init scale; widen them so
    // the deepest gradients stay above finite-difference noise.
    scale_params(&mut sentcomp.params, "lstm", 3.0);
    scale_params(&mut sentcomp.params, "attn", 5.0);
    scale_params(&mut sentcomp.params, "fc", 3.0);
    let report = grad_check_params(
        |tape, p| {
            let u = tape.constant(&[1, 3], u_fixed.to_vec())?;
            sentcomp.example_loss(tape, p, &example, Some(u), false)
        },
        &sentcomp.params,
        EPS,
        None,
    )?;
    out.push(("sentcomp".to_string(), report));
    let report = grad_check_params(
        |tape, tp| {
            let u = tsm.forward(tape, tp, &example.tokens, false)?;
            let p = sentcomp.params.bind(tape, false);
            sentcomp.example_loss(tape, &p, &example, Some(u), false)
        },
        &head_only,
        EPS,
        None,
    )?;
    out.push(("sentcomp/tsm".to_string(), report));
    Ok(out)
}
