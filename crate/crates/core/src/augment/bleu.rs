use std::collections::HashMap;

const MAX_ORDER: usize = 4;

fn ngram_counts<'a>(words: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut counts = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence-level BLEU in `[0, 100]` over whitespace tokens.
///
/// Up to 4-grams, standard brevity penalty, and add-one smoothing of the
/// n ≥ 2 precisions (one is added to both matches and totals). Scores 0 when
/// nothing matches at any order or the hypothesis is empty.
pub fn sentence_bleu(hypothesis: &str, reference: &str) -> f64 {
    let hyp: Vec<&str> = hypothesis.split_whitespace().collect();
    let refw: Vec<&str> = reference.split_whitespace().collect();
    let (sys_len, ref_len) = (hyp.len() as f64, refw.len() as f64);
    let mut correct = [0.0f64; MAX_ORDER];
    let mut total = [0.0f64; MAX_ORDER];
    for n in 1..=MAX_ORDER {
        let h = ngram_counts(&hyp, n);
        let r = ngram_counts(&refw, n);
        total[n - 1] = hyp.len().saturating_sub(n - 1) as f64;
        correct[n - 1] = h.iter().map(|(g, &c)| c.min(*r.get(g).unwrap_or(&0))).sum::<usize>() as f64;
    }
    if sys_len == 0.0 || correct.iter().all(|&c| c == 0.0) {
        return 0.0;
    }
    let bp = if sys_len < ref_len { (1.0 - ref_len / sys_len).exp() } else { 1.0 };
    let mut log_sum = 0.0;
    for n in 0..MAX_ORDER {
        let (c, t) = if n > 0 { (correct[n] + 1.0, total[n] + 1.0) } else { (correct[n], total[n]) };
        if c == 0.0 {
            return 0.0;
        }
        log_sum += (c / t).ln();
    }
    (100.0 * bp * (log_sum / MAX_ORDER as f64).exp()).min(100.0)
}
