use std::collections::BTreeMap;

/// Lowercased whitespace tokens.
pub fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 of `hyp` against `reference`; `None` for an empty reference.
pub fn rouge_l_f1(hyp: &str, reference: &str) -> Option<f64> {
    let r = tokens(reference);
    if r.is_empty() {
        return None;
    }
    let h = tokens(hyp);
    let l = lcs(&h, &r);
    if l == 0 {
        return Some(0.0);
    }
    let p = l as f64 / h.len() as f64;
    let rec = l as f64 / r.len() as f64;
    Some(2.0 * p * rec / (p + rec))
}

/// Cosine similarity of term-frequency vectors; 0 when either is empty.
pub fn sem_c(a: &str, b: &str) -> f64 {
    let mut tf: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for t in tokens(a) {
        tf.entry(t).or_default().0 += 1.0;
    }
    for t in tokens(b) {
        tf.entry(t).or_default().1 += 1.0;
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in tf.values() {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb).sqrt()
    }
}

/// Cosine of two dense vectors; 0 for a zero vector or a length mismatch.
pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
