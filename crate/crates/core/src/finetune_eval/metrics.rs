use super::{FinetuneError, Result};

fn aligned(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(FinetuneError::LengthMismatch { left: a, right: b });
    }
    if a == 0 {
        return Err(FinetuneError::EmptyDataset);
    }
    Ok(())
}

/// Matthews correlation over any number of classes; 0 when either marginal
/// is constant.
pub fn mcc(preds: &[usize], labels: &[usize]) -> Result<f64> {
    aligned(preds.len(), labels.len())?;
    let k = preds.iter().chain(labels).max().copied().unwrap_or(0) + 1;
    let mut predicted = vec![0i128; k];
    let mut truth = vec![0i128; k];
    let mut correct = 0i128;
    for (&p, &y) in preds.iter().zip(labels) {
        predicted[p] += 1;
        truth[y] += 1;
        correct += (p == y) as i128;
    }
    let n = preds.len() as i128;
    let cross: i128 = predicted.iter().zip(&truth).map(|(p, t)| p * t).sum();
    let num = correct * n - cross;
    let den_p = n * n - predicted.iter().map(|p| p * p).sum::<i128>();
    let den_t = n * n - truth.iter().map(|t| t * t).sum::<i128>();
    let den = den_p * den_t;
    if den == 0 {
        return Ok(0.0);
    }
    Ok(num as f64 / (den as f64).sqrt())
}

/// Binary F1 of the positive class 1; 0 when there are no true positives.
pub fn f1(preds: &[usize], labels: &[usize]) -> Result<f64> {
    aligned(preds.len(), labels.len())?;
    let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
    for (&p, &y) in preds.iter().zip(labels) {
        match (p == 1, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    Ok((2 * tp) as f64 / (2 * tp + fp + fneg) as f64)
}

fn class_counts(labels: &[bool]) -> Result<(u64, u64)> {
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(FinetuneError::SingleClass);
    }
    Ok((pos, neg))
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(FinetuneError::NonFiniteScore);
    }
    Ok(())
}

/// Area under the ROC curve as the Mann-Whitney rank statistic, ties
/// getting average ranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    aligned(scores.len(), labels.len())?;
    check_scores(scores)?;
    let (pos, neg) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Ranks are kept doubled so tie averages stay integral.
    let mut rank_sum2 = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let rank2 = (i + j + 2) as u64;
        rank_sum2 += rank2 * order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        i = j + 1;
    }
    let u2 = rank_sum2 - pos * (pos + 1);
    Ok(u2 as f64 / (2 * pos * neg) as f64)
}

/// Average precision: recall increments weighted by precision at each
/// distinct score threshold, highest first.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    aligned(scores.len(), labels.len())?;
    check_scores(scores)?;
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    if pos == 0 {
        return Err(FinetuneError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut ap) = (0u64, 0u64, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let dtp = order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        tp += dtp;
        fp += (j + 1 - i) as u64 - dtp;
        if dtp > 0 {
            ap += (dtp as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
        i = j + 1;
    }
    Ok(ap)
}

pub fn levenshtein(a: &[u8], b: &[u8]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + (ca != cb) as usize;
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Mean edit distance over all unordered pairs.
pub fn diversity<S: AsRef<str>>(seqs: &[S]) -> Result<f64> {
    if seqs.len() < 2 {
        return Err(FinetuneError::TooFewSequences(seqs.len()));
    }
    let mut total = 0usize;
    let mut pairs = 0usize;
    for i in 0..seqs.len() {
        for j in i + 1..seqs.len() {
            total += levenshtein(seqs[i].as_ref().as_bytes(), seqs[j].as_ref().as_bytes());
            pairs += 1;
        }
    }
    Ok(total as f64 / pairs as f64)
}
