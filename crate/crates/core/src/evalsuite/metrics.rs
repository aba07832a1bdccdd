use std::collections::HashMap;

use crate::error::{Error, Result};

/// Prediction equals any of the valid captions (whitespace-normalized).
pub fn exact_match(prediction: &str, valid: &[String]) -> bool {
    let p: Vec<&str> = prediction.split_whitespace().collect();
    valid
        .iter()
        .any(|v| v.split_whitespace().eq(p.iter().copied()))
}

fn counts<'a>(words: &[&'a str]) -> HashMap<&'a str, usize> {
    let mut m = HashMap::new();
    for w in words {
        *m.entry(*w).or_insert(0) += 1;
    }
    m
}

/// Bag-of-words F1 between prediction and reference.
pub fn token_f1(prediction: &str, reference: &str) -> f64 {
    let p: Vec<&str> = prediction.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    if p.is_empty() || r.is_empty() {
        return 0.0;
    }
    let rc = counts(&r);
    let common: usize = counts(&p)
        .iter()
        .map(|(w, c)| (*c).min(rc.get(w).copied().unwrap_or(0)))
        .sum();
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / r.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Corpus-level BLEU-4 with one reference per prediction: geometric mean of
/// clipped 1..4-gram precisions times the brevity penalty. Zero when any
/// precision is zero.
pub fn bleu4_lite(predictions: &[String], references: &[String]) -> f64 {
    let mut matched = [0usize; 4];
    let mut possible = [0usize; 4];
    let (mut pred_len, mut ref_len) = (0usize, 0usize);
    for (p, r) in predictions.iter().zip(references) {
        let p: Vec<&str> = p.split_whitespace().collect();
        let r: Vec<&str> = r.split_whitespace().collect();
        pred_len += p.len();
        ref_len += r.len();
        for n in 1..=4 {
            if p.len() < n {
                continue;
            }
            let grams = |ws: &[&str]| {
                let mut m: HashMap<Vec<String>, usize> = HashMap::new();
                for g in ws.windows(n) {
                    *m.entry(g.iter().map(|s| s.to_string()).collect())
                        .or_insert(0) += 1;
                }
                m
            };
            let pg = grams(&p);
            let rg = if r.len() >= n {
                grams(&r)
            } else {
                HashMap::new()
            };
            possible[n - 1] += p.len() + 1 - n;
            matched[n - 1] += pg
                .iter()
                .map(|(g, c)| (*c).min(rg.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    if pred_len == 0 || matched.contains(&0) {
        return 0.0;
    }
    let log_p: f64 = (0..4)
        .map(|i| (matched[i] as f64 / possible[i] as f64).ln())
        .sum::<f64>()
        / 4.0;
    let bp = if pred_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / pred_len as f64).exp()
    };
    bp * log_p.exp()
}

/// Fraction of rows whose diagonal entry ranks within the top `k`; rank is
/// one plus the number of strictly larger scores in the row.
pub fn recall_at_k(scores: &[Vec<f64>], k: usize) -> Result<f64> {
    let n = scores.len();
    if n < k {
        return Err(Error::Config(format!(
            "split of {n} is smaller than K = {k}"
        )));
    }
    let hits = scores
        .iter()
        .enumerate()
        .filter(|(i, row)| 1 + row.iter().filter(|&&s| s > row[*i]).count() <= k)
        .count();
    Ok(hits as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(x: &str) -> String {
        x.to_string()
    }

    #[test]
    fn exact_match_accepts_any_template() {
        let valid = vec![s("a b c"), s("x y")];
        assert!(exact_match("x  y", &valid));
        assert!(!exact_match("a b", &valid));
        assert!(!exact_match("", &valid));
    }

    #[test]
    fn f1_cases() {
        assert_eq!(token_f1("", "a b"), 0.0);
        assert_eq!(token_f1("a b", "a b"), 1.0);
        // common = 1, p = 1/2, r = 1/3
        assert!((token_f1("a x", "a b c") - 0.4).abs() < 1e-12);
    }

    #[test]
    fn bleu_identity_and_brevity() {
        let r = vec![s("a b c d e")];
        assert!((bleu4_lite(&r, &r) - 1.0).abs() < 1e-12);
        let short = vec![s("a b c d")];
        // all precisions 1, BP = exp(1 - 5/4)
        assert!((bleu4_lite(&short, &r) - (-0.25f64).exp()).abs() < 1e-12);
        assert_eq!(bleu4_lite(&[s("q")], &r), 0.0);
    }

    #[test]
    fn recall_cases() {
        let diag = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        assert_eq!(recall_at_k(&diag, 1).unwrap(), 1.0);
        let worst = vec![
            vec![0.0, 1.0, 1.0],
            vec![1.0, 0.0, 1.0],
            vec![1.0, 1.0, 0.0],
        ];
        assert_eq!(recall_at_k(&worst, 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&worst, 3).unwrap(), 1.0);
        assert!(recall_at_k(&diag, 5).is_err());
    }
}
