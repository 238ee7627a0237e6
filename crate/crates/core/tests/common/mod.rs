//! Brute-force references shared by the oracle and acceptance targets.
#![allow(dead_code)]

use hybridna::numerics::Rng;

pub fn brute_mcc(preds: &[usize], labels: &[usize]) -> f64 {
    let (mut tp, mut tn, mut fp, mut fneg) = (0i128, 0i128, 0i128, 0i128);
    for (&p, &y) in preds.iter().zip(labels) {
        match (p, y) {
            (1, 1) => tp += 1,
            (0, 0) => tn += 1,
            (1, 0) => fp += 1,
            _ => fneg += 1,
        }
    }
    let den = (tp + fp) * (tp + fneg) * (tn + fp) * (tn + fneg);
    if den == 0 {
        return 0.0;
    }
    (tp * tn - fp * fneg) as f64 / (den as f64).sqrt()
}

pub fn brute_f1(preds: &[usize], labels: &[usize]) -> f64 {
    let tp = preds
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| p == 1 && y == 1)
        .count() as u64;
    let predicted = preds.iter().filter(|&&p| p == 1).count() as u64;
    let actual = labels.iter().filter(|&&y| y == 1).count() as u64;
    if tp == 0 {
        return 0.0;
    }
    (2 * tp) as f64 / (predicted + actual) as f64
}

pub fn brute_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins2 = 0u64;
    let (mut pos, mut neg) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li {
            pos += 1;
        } else {
            neg += 1;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                wins2 += if scores[i] > scores[j] {
                    2
                } else if scores[i] == scores[j] {
                    1
                } else {
                    0
                };
            }
        }
    }
    wins2 as f64 / (2 * pos * neg) as f64
}

pub fn brute_auprc(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut prev_tp = 0u64;
    let mut ap = 0.0;
    for t in thresholds {
        let tp = scores
            .iter()
            .zip(labels)
            .filter(|(&s, &l)| s >= t && l)
            .count() as u64;
        let fp = scores
            .iter()
            .zip(labels)
            .filter(|(&s, &l)| s >= t && !l)
            .count() as u64;
        if tp > prev_tp {
            ap += ((tp - prev_tp) as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
        prev_tp = tp;
    }
    ap
}

pub fn brute_levenshtein(a: &[u8], b: &[u8]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let cost = if a[i - 1] == b[j - 1] { 0 } else { 1 };
            d[i][j] = (d[i - 1][j] + 1)
                .min(d[i][j - 1] + 1)
                .min(d[i - 1][j - 1] + cost);
        }
    }
    d[a.len()][b.len()]
}

pub fn random_dna(rng: &mut Rng, max: usize) -> String {
    let len = rng.below(max + 1);
    (0..len)
        .map(|_| ['A', 'C', 'G', 'T'][rng.below(4)])
        .collect()
}
