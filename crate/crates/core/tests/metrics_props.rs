use std::collections::BTreeMap;

use gazeattn_core::corpus::PosTag;
use gazeattn_core::metrics::{bleu4, compression_ratio, deletion_f1, jsd, spearman, spearman_pos};
use proptest::prelude::*;

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn distribution(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, len).prop_filter_map("all zero", |v| {
        let s: f64 = v.iter().sum();
        (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
    })
}

fn sentence() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 1..9)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

/// Pearson on average ranks, computed by counting rather than sorting.
fn rank_oracle(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .map(|&x| {
            let below = values.iter().filter(|&&y| y < x).count() as f64;
            let equal = values.iter().filter(|&&y| y == x).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn per_tag_means(values: &[Vec<f64>], tags: &[Vec<PosTag>]) -> BTreeMap<PosTag, f64> {
    let mut acc: BTreeMap<PosTag, Vec<f64>> = BTreeMap::new();
    for (v, t) in values.iter().zip(tags) {
        for (x, tag) in v.iter().zip(t) {
            acc.entry(*tag).or_default().push(*x);
        }
    }
    acc.into_iter()
        .map(|(t, xs)| (t, xs.iter().sum::<f64>() / xs.len() as f64))
        .collect()
}

proptest! {
    #[test]
    fn bleu_ignores_corpus_order(
        pairs in prop::collection::vec((sentence(), sentence()), 1..8),
        seed in any::<u64>(),
    ) {
        let (hyps, refs): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        gazeattn_core::numeric::Rng::new(seed).shuffle(&mut order);
        let h2: Vec<_> = order.iter().map(|&i| hyps[i].clone()).collect();
        let r2: Vec<_> = order.iter().map(|&i| refs[i].clone()).collect();
        let a = bleu4(&hyps, &refs).unwrap();
        let b = bleu4(&h2, &r2).unwrap();
        prop_assert!((a - b).abs() <= 1e-9, "{} vs {}", a, b);
    }

    #[test]
    fn jsd_is_a_bounded_symmetric_divergence(pq in (1usize..10).prop_flat_map(|n| (distribution(n), distribution(n)))) {
        let (p, q) = pq;
        let d = jsd(&p, &q).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!((d - jsd(&q, &p).unwrap()).abs() <= 1e-12);
        prop_assert!(jsd(&p, &p).unwrap().abs() <= 1e-9);
        let max_gap = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if max_gap > 1e-3 {
            prop_assert!(d > 1e-9);
        }
    }

    #[test]
    fn deletion_f1_matches_set_oracle(masks in (1usize..25).prop_flat_map(|n| (prop::collection::vec(any::<bool>(), n), prop::collection::vec(any::<bool>(), n)))) {
        let (pred, gold) = masks;
        let tp = pred.iter().zip(&gold).filter(|(p, g)| **p && **g).count() as f64;
        let want = if tp == 0.0 {
            0.0
        } else {
            let p = tp / pred.iter().filter(|x| **x).count() as f64;
            let r = tp / gold.iter().filter(|x| **x).count() as f64;
            2.0 * p * r / (p + r)
        };
        prop_assert!((deletion_f1(&pred, &gold).unwrap() - want).abs() <= 1e-12);
    }

    #[test]
    fn spearman_matches_counting_oracle(v in prop::collection::vec((0u8..6, 0u8..6), 3..12)) {
        let a: Vec<f64> = v.iter().map(|x| x.0 as f64).collect();
        let b: Vec<f64> = v.iter().map(|x| x.1 as f64).collect();
        let (ra, rb) = (rank_oracle(&a), rank_oracle(&b));
        let constant = |r: &[f64]| r.iter().all(|x| *x == r[0]);
        match spearman(&a, &b) {
            Ok(rho) => prop_assert!((rho - pearson(&ra, &rb)).abs() <= 1e-12),
            Err(_) => prop_assert!(constant(&ra) || constant(&rb)),
        }
    }
}

#[test]
fn spearman_pos_matches_oracle_on_random_distributions() {
    let mut rng = gazeattn_core::numeric::Rng::new(61);
    let mut checked = 0;
    for _ in 0..100 {
        let sentences = 1 + rng.below(5);
        let mut tags = Vec::new();
        let mut model = Vec::new();
        let mut human = Vec::new();
        for _ in 0..sentences {
            let n = 2 + rng.below(8);
            tags.push(
                (0..n)
                    .map(|_| PosTag::ALL[rng.below(PosTag::ALL.len())])
                    .collect::<Vec<_>>(),
            );
            for out in [&mut model, &mut human] {
                let raw: Vec<f64> = (0..n).map(|_| rng.uniform() + 1e-3).collect();
                let s: f64 = raw.iter().sum();
                out.push(raw.iter().map(|x| x / s).collect::<Vec<_>>());
            }
        }
        let m = per_tag_means(&model, &tags);
        let h = per_tag_means(&human, &tags);
        match spearman_pos(&model, &human, &tags) {
            Ok(rho) => {
                let a: Vec<f64> = m.values().copied().collect();
                let b: Vec<f64> = m.keys().map(|t| h[t]).collect();
                let want = pearson(&rank_oracle(&a), &rank_oracle(&b));
                assert!((rho - want).abs() <= 1e-12, "{rho} vs {want}");
                checked += 1;
            }
            Err(_) => assert!(m.len() < 3),
        }
    }
    assert!(checked > 50);
}

#[test]
fn hand_cases() {
    assert!((bleu4(&[toks("x y z w")], &[toks("x y z w")]).unwrap() - 100.0).abs() < 1e-9);
    assert_eq!(bleu4(&[toks("a b c d")], &[toks("d c b a")]).unwrap(), 0.0);
    let f = deletion_f1(&[false, true, true, false], &[false, false, true, true]).unwrap();
    assert!((f - 0.5).abs() < 1e-12);
    let cr = compression_ratio(&toks("the cat sat"), &toks("cat sat")).unwrap();
    assert!((cr - 7.0 / 11.0).abs() < 1e-4);
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
}
