//! Evaluation measures for both tasks and for saliency predictions.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{PosTag, WordClass};
use crate::error::{Error, Result};

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_default() += 1;
        }
    }
    counts
}

/// Corpus BLEU-4 in `[0, 100]`: clipped n-gram precisions for n = 1..4,
/// uniform geometric mean, brevity penalty, no smoothing.
pub fn bleu4(hypotheses: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::Contract("BLEU over an empty corpus".into()));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let hc = ngrams(h, n);
            let rc = ngrams(r, n);
            matches[n - 1] += hc
                .iter()
                .map(|(g, c)| (*c).min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if matches.iter().zip(&totals).any(|(m, t)| *m == 0 || *t == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = matches
        .iter()
        .zip(&totals)
        .map(|(m, t)| (*m as f64 / *t as f64).ln())
        .sum::<f64>()
        / 4.0;
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * log_p.exp())
}

/// Precision, recall and F1 over kept tokens.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeletionScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Neither mask keeps anything; the score is 0 by convention.
    pub nothing_kept: bool,
}

pub fn deletion_score(pred: &[bool], gold: &[bool]) -> Result<DeletionScore> {
    if pred.len() != gold.len() {
        return Err(Error::Contract(format!(
            "mask lengths {} and {} differ",
            pred.len(),
            gold.len()
        )));
    }
    let tp = pred.iter().zip(gold).filter(|(p, g)| **p && **g).count() as f64;
    let kept_pred = pred.iter().filter(|p| **p).count() as f64;
    let kept_gold = gold.iter().filter(|g| **g).count() as f64;
    let precision = if kept_pred > 0.0 { tp / kept_pred } else { 0.0 };
    let recall = if kept_gold > 0.0 { tp / kept_gold } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(DeletionScore {
        precision,
        recall,
        f1,
        nothing_kept: kept_pred == 0.0 && kept_gold == 0.0,
    })
}

pub fn deletion_f1(pred: &[bool], gold: &[bool]) -> Result<f64> {
    Ok(deletion_score(pred, gold)?.f1)
}

/// Mean per-sentence F1.
pub fn mean_deletion_f1(pairs: &[(Vec<bool>, Vec<bool>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InsufficientData("no masks to score".into()));
    }
    let mut total = 0.0;
    for (p, g) in pairs {
        total += deletion_f1(p, g)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Characters of the space-joined output over characters of the input.
pub fn compression_ratio(input: &[String], output: &[String]) -> Result<f64> {
    let chars = |t: &[String]| t.join(" ").chars().count();
    let denom = chars(input);
    if denom == 0 {
        return Err(Error::Contract("compression ratio of an empty input".into()));
    }
    Ok(chars(output) as f64 / denom as f64)
}

/// Mean squared difference over all tokens of all sentences.
pub fn duration_mse(predicted: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} targets",
            predicted.len(),
            truth.len()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, t) in predicted.iter().zip(truth) {
        if p.len() != t.len() {
            return Err(Error::Contract(format!(
                "sentence lengths {} and {} differ",
                p.len(),
                t.len()
            )));
        }
        sum += p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        n += p.len();
    }
    if n == 0 {
        return Err(Error::InsufficientData("no tokens to compare".into()));
    }
    Ok(sum / n as f64)
}

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|v| *v < 0.0 || !v.is_finite()) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!(
            "{name} is not a probability vector (sum {sum})"
        )));
    }
    Ok(())
}

/// Jensen-Shannon divergence with base-2 logarithms, in `[0, 1]`.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Contract(format!(
            "distribution lengths {} and {} differ",
            p.len(),
            q.len()
        )));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter()
            .zip(m)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * (x / y).log2())
            .sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok((0.5 * kl(p, &m) + 0.5 * kl(q, &m)).clamp(0.0, 1.0))
}

/// Mean JSD over aligned sentences.
pub fn mean_jsd(predicted: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    if predicted.len() != truth.len() || predicted.is_empty() {
        return Err(Error::Contract(format!(
            "{} predictions for {} targets",
            predicted.len(),
            truth.len()
        )));
    }
    let mut total = 0.0;
    for (p, t) in predicted.iter().zip(truth) {
        total += jsd(p, t)?;
    }
    Ok(total / predicted.len() as f64)
}

/// Mean normalized duration (or saliency) per POS tag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosDistribution {
    pub shares: BTreeMap<PosTag, f64>,
}

impl PosDistribution {
    pub fn from_records(values: &[Vec<f64>], tags: &[Vec<PosTag>]) -> Result<Self> {
        if values.len() != tags.len() {
            return Err(Error::Contract(format!(
                "{} records for {} tag rows",
                values.len(),
                tags.len()
            )));
        }
        let mut acc: BTreeMap<PosTag, (f64, usize)> = BTreeMap::new();
        for (v, t) in values.iter().zip(tags) {
            if v.len() != t.len() {
                return Err(Error::Contract(format!("{} values for {} tags", v.len(), t.len())));
            }
            for (x, tag) in v.iter().zip(t) {
                if *x < 0.0 {
                    return Err(Error::Domain(format!("negative share {x}")));
                }
                let e = acc.entry(*tag).or_default();
                e.0 += x;
                e.1 += 1;
            }
        }
        Ok(PosDistribution {
            shares: acc.into_iter().map(|(t, (s, n))| (t, s / n as f64)).collect(),
        })
    }
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation: Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "rank correlation over {} and {} values",
            a.len(),
            b.len()
        )));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Err(Error::InsufficientData("rank correlation of a constant ranking".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

/// Spearman's rho between model and human mean share per tag.
pub fn spearman_pos(model: &[Vec<f64>], human: &[Vec<f64>], tags: &[Vec<PosTag>]) -> Result<f64> {
    let m = PosDistribution::from_records(model, tags)?;
    let h = PosDistribution::from_records(human, tags)?;
    if m.shares.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "{} distinct tags observed, need 3",
            m.shares.len()
        )));
    }
    let a: Vec<f64> = m.shares.values().copied().collect();
    let b: Vec<f64> = m.shares.keys().map(|t| h.shares[t]).collect();
    spearman(&a, &b)
}

/// Content and function shares: per-sentence class sums averaged over the
/// corpus and renormalized to sum to one.
pub fn content_function_split(records: &[Vec<f64>], tags: &[Vec<PosTag>]) -> Result<(f64, f64)> {
    if records.len() != tags.len() {
        return Err(Error::Contract(format!(
            "{} records for {} tag rows",
            records.len(),
            tags.len()
        )));
    }
    let (mut content, mut function) = (0.0, 0.0);
    let mut classified = 0usize;
    for (v, t) in records.iter().zip(tags) {
        if v.len() != t.len() {
            return Err(Error::Contract(format!("{} values for {} tags", v.len(), t.len())));
        }
        for (x, tag) in v.iter().zip(t) {
            match tag.class() {
                Some(WordClass::Content) => content += x,
                Some(WordClass::Function) => function += x,
                None => continue,
            }
            classified += 1;
        }
    }
    let total = content + function;
    if classified == 0 || total <= 0.0 {
        return Err(Error::InsufficientData("no content or function tokens".into()));
    }
    // Averaging over sentences scales both sums equally and cancels here.
    Ok((content / total, function / total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use PosTag::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn bleu_cases() {
        let r = vec![toks("a b c d e")];
        assert_abs_diff_eq!(bleu4(&[toks("a b c d e")], &r).unwrap(), 100.0, epsilon = 1e-9);
        assert_abs_diff_eq!(bleu4(&[toks("a b c d")], &r).unwrap(), 77.880078, epsilon = 1e-5);
        assert_eq!(bleu4(&[toks("a c b d e")], &r).unwrap(), 0.0);
        assert!(bleu4(&[], &[]).is_err());
    }

    #[test]
    fn f1_cases() {
        let f = deletion_f1(&[false, true, true, false], &[false, false, true, true]).unwrap();
        assert_abs_diff_eq!(f, 0.5, epsilon = 1e-12);
        assert_eq!(deletion_f1(&[true, true], &[true, true]).unwrap(), 1.0);
        assert_eq!(deletion_f1(&[false, false], &[true, false]).unwrap(), 0.0);
        assert!(deletion_score(&[false], &[false]).unwrap().nothing_kept);
        assert!(deletion_f1(&[true], &[true, false]).is_err());
    }

    #[test]
    fn ratio_cases() {
        assert_abs_diff_eq!(
            compression_ratio(&toks("the cat sat"), &toks("cat sat")).unwrap(),
            7.0 / 11.0,
            epsilon = 1e-12
        );
        assert_eq!(compression_ratio(&toks("a b"), &[]).unwrap(), 0.0);
    }

    #[test]
    fn mse_and_jsd() {
        assert_eq!(duration_mse(&[vec![1.0, 0.0]], &[vec![0.0, 1.0]]).unwrap(), 1.0);
        assert_abs_diff_eq!(jsd(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), 0.3113, epsilon = 1e-4);
        assert_eq!(jsd(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert!(jsd(&[0.5, 0.6], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn spearman_cases() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[2.0, 1.0, 3.0]).unwrap(), 0.5);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
        let tags = vec![vec![Noun, Verb, Det]];
        assert!(spearman_pos(&[vec![0.5, 0.3, 0.2]], &[vec![0.5, 0.3, 0.2]], &tags).unwrap() > 0.999);
        let two = vec![vec![Noun, Det]];
        assert!(matches!(
            spearman_pos(&[vec![0.5, 0.5]], &[vec![0.5, 0.5]], &two),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn content_function_cases() {
        let (c, f) = content_function_split(&[vec![0.4, 0.3, 0.3]], &[vec![Noun, Verb, Det]]).unwrap();
        assert_abs_diff_eq!(c, 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(f, 0.3, epsilon = 1e-12);
        let (c, _) = content_function_split(&[vec![1.0, 0.0]], &[vec![Noun, Det]]).unwrap();
        assert_eq!(c, 1.0);
        assert!(content_function_split(&[vec![1.0]], &[vec![Other]]).is_err());
    }
}
