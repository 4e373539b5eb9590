//! Chunk-level precision/recall/F1 per the CoNLL convention and McNemar's
//! significance test between two systems.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::corpus::{extract_chunks, Sentence, TagLabel};
use crate::error::{Error, Result};

/// Critical value of chi-squared with one degree of freedom at p = 0.05.
pub const CHI2_CRITICAL_05: f64 = 3.8415;

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct PrfCounts {
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

impl PrfCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.correct, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.correct, self.gold)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Evaluation result with per-slot breakdown. All values are fractions.
#[derive(Clone, Debug, Serialize)]
pub struct EvalMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_slot: BTreeMap<String, SlotMetrics>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SlotMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

/// Chunk-level F1: a predicted chunk is correct iff its slot, start, and
/// end all match a gold chunk.
pub fn conll_f1(gold: &[Sentence], pred: &[Vec<TagLabel>]) -> Result<EvalMetrics> {
    if gold.len() != pred.len() {
        return Err(Error::Invalid(format!(
            "gold has {} sentences, predictions {}",
            gold.len(),
            pred.len()
        )));
    }
    let mut total = PrfCounts::default();
    let mut per_slot: BTreeMap<String, PrfCounts> = BTreeMap::new();
    for (s, p) in gold.iter().zip(pred) {
        if s.len() != p.len() {
            return Err(Error::Invalid(format!(
                "sentence has {} tokens but prediction has {} tags",
                s.len(),
                p.len()
            )));
        }
        let gold_chunks = extract_chunks(&s.tags);
        let pred_chunks = extract_chunks(p);
        total.gold += gold_chunks.len();
        total.predicted += pred_chunks.len();
        for ch in &gold_chunks {
            per_slot.entry(ch.slot.clone()).or_default().gold += 1;
        }
        for ch in &pred_chunks {
            per_slot.entry(ch.slot.clone()).or_default().predicted += 1;
        }
        for ch in &pred_chunks {
            if gold_chunks.contains(ch) {
                total.correct += 1;
                per_slot.entry(ch.slot.clone()).or_default().correct += 1;
            }
        }
    }
    Ok(EvalMetrics {
        precision: total.precision(),
        recall: total.recall(),
        f1: total.f1(),
        per_slot: per_slot
            .into_iter()
            .map(|(slot, c)| {
                (
                    slot,
                    SlotMetrics {
                        precision: c.precision(),
                        recall: c.recall(),
                        f1: c.f1(),
                        gold: c.gold,
                        predicted: c.predicted,
                        correct: c.correct,
                    },
                )
            })
            .collect(),
    })
}

/// Correctness pairing unit for McNemar's test.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum McnemarUnit {
    /// Pair per token (default): correctness = predicted tag equals gold.
    Token,
    /// Pair per sentence: correctness = whole tag sequence matches.
    Sentence,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct McnemarResult {
    /// Pairs where system A is correct and B wrong.
    pub b: usize,
    /// Pairs where system A is wrong and B correct.
    pub c: usize,
    pub chi2: f64,
    pub significant: bool,
}

/// Continuity-corrected McNemar's test on paired correctness:
/// `chi2 = (|b - c| - 1)^2 / (b + c)`, significant at p < 0.05 iff
/// `chi2 > 3.8415`. With no discordant pairs the statistic is 0.
pub fn mcnemar(
    gold: &[Sentence],
    pred_a: &[Vec<TagLabel>],
    pred_b: &[Vec<TagLabel>],
    unit: McnemarUnit,
) -> Result<McnemarResult> {
    if gold.len() != pred_a.len() || gold.len() != pred_b.len() {
        return Err(Error::Invalid(
            "mcnemar requires aligned gold and prediction sets".into(),
        ));
    }
    let mut b = 0usize;
    let mut c = 0usize;
    for ((s, pa), pb) in gold.iter().zip(pred_a).zip(pred_b) {
        if s.len() != pa.len() || s.len() != pb.len() {
            return Err(Error::Invalid("prediction length mismatch".into()));
        }
        match unit {
            McnemarUnit::Token => {
                for i in 0..s.len() {
                    let a_ok = pa[i] == s.tags[i];
                    let b_ok = pb[i] == s.tags[i];
                    match (a_ok, b_ok) {
                        (true, false) => b += 1,
                        (false, true) => c += 1,
                        _ => {}
                    }
                }
            }
            McnemarUnit::Sentence => {
                let a_ok = pa == &s.tags;
                let b_ok = pb == &s.tags;
                match (a_ok, b_ok) {
                    (true, false) => b += 1,
                    (false, true) => c += 1,
                    _ => {}
                }
            }
        }
    }
    Ok(mcnemar_from_counts(b, c))
}

/// The statistic itself, from discordant counts.
pub fn mcnemar_from_counts(b: usize, c: usize) -> McnemarResult {
    if b + c == 0 {
        return McnemarResult {
            b,
            c,
            chi2: 0.0,
            significant: false,
        };
    }
    let diff = (b as f64 - c as f64).abs() - 1.0;
    let chi2 = diff * diff / (b + c) as f64;
    McnemarResult {
        b,
        c,
        chi2,
        significant: chi2 > CHI2_CRITICAL_05,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::render_chunks;
    use crate::corpus::Chunk;
    use approx::assert_abs_diff_eq;

    fn sentence_with(chunks: &[Chunk], len: usize) -> Sentence {
        let tags = render_chunks(chunks, len);
        Sentence::new(
            (0..len).map(|i| format!("w{i}")).collect(),
            tags,
            "d",
        )
        .unwrap()
    }

    fn ch(slot: &str, start: usize, end: usize) -> Chunk {
        Chunk { slot: slot.into(), start, end }
    }

    #[test]
    fn half_right_prediction() {
        let gold = vec![sentence_with(&[ch("from_city", 1, 2), ch("date", 4, 4)], 5)];
        let pred = vec![render_chunks(&[ch("from_city", 1, 2), ch("to_city", 4, 4)], 5)];
        let m = conll_f1(&gold, &pred).unwrap();
        assert_abs_diff_eq!(m.precision, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(m.recall, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(m.f1, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn perfect_prediction() {
        let gold = vec![sentence_with(&[ch("a", 1, 1), ch("b", 3, 4)], 5)];
        let pred = vec![gold[0].tags.clone()];
        let m = conll_f1(&gold, &pred).unwrap();
        assert_abs_diff_eq!(m.f1, 1.0, epsilon = 1e-12);
        assert_eq!(m.per_slot["a"].correct, 1);
    }

    #[test]
    fn zero_over_zero_is_zero() {
        let gold = vec![sentence_with(&[], 3)];
        let pred = vec![vec![TagLabel::Outside; 3]];
        let m = conll_f1(&gold, &pred).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn boundary_error_is_wrong() {
        let gold = vec![sentence_with(&[ch("a", 2, 3)], 4)];
        let pred = vec![render_chunks(&[ch("a", 2, 2)], 4)];
        let m = conll_f1(&gold, &pred).unwrap();
        assert_eq!(m.f1, 0.0);
    }

    #[test]
    fn sentence_order_invariant() {
        let s1 = sentence_with(&[ch("a", 1, 1)], 3);
        let s2 = sentence_with(&[ch("b", 2, 3)], 4);
        let p1 = render_chunks(&[ch("a", 1, 1)], 3);
        let p2 = render_chunks(&[ch("a", 2, 3)], 4);
        let m12 = conll_f1(&[s1.clone(), s2.clone()], &[p1.clone(), p2.clone()]).unwrap();
        let m21 = conll_f1(&[s2, s1], &[p2, p1]).unwrap();
        assert_eq!((m12.precision, m12.recall, m12.f1), (m21.precision, m21.recall, m21.f1));
    }

    #[test]
    fn mcnemar_hand_computed() {
        let r = mcnemar_from_counts(15, 5);
        assert_abs_diff_eq!(r.chi2, 4.05, epsilon = 1e-12);
        assert!(r.significant);
    }

    #[test]
    fn mcnemar_symmetric_counts_not_significant() {
        for b in [1usize, 4, 50] {
            let r = mcnemar_from_counts(b, b);
            assert_abs_diff_eq!(r.chi2, 1.0 / (2.0 * b as f64), epsilon = 1e-12);
            assert!(!r.significant);
        }
    }

    #[test]
    fn mcnemar_identical_systems() {
        let gold = vec![sentence_with(&[ch("a", 1, 1)], 2)];
        let pred = vec![gold[0].tags.clone()];
        let r = mcnemar(&gold, &pred, &pred, McnemarUnit::Token).unwrap();
        assert_eq!((r.b, r.c, r.chi2), (0, 0, 0.0));
        assert!(!r.significant);
    }

    #[test]
    fn mcnemar_statistic_symmetric_under_swap() {
        let a = mcnemar_from_counts(12, 3);
        let b = mcnemar_from_counts(3, 12);
        assert_eq!(a.chi2, b.chi2);
        assert_eq!((a.b, a.c), (b.c, b.b));
    }

    #[test]
    fn mcnemar_token_unit_counts_tokens() {
        let gold = vec![sentence_with(&[ch("a", 1, 2)], 3)];
        // A right everywhere; B wrong at positions 1 and 2
        let pa = gold[0].tags.clone();
        let pb = vec![TagLabel::Outside; 3];
        let r = mcnemar(&gold, &[pa.clone()], &[pb.clone()], McnemarUnit::Token).unwrap();
        assert_eq!((r.b, r.c), (2, 0));
        let rs = mcnemar(&gold, &[pa], &[pb], McnemarUnit::Sentence).unwrap();
        assert_eq!((rs.b, rs.c), (1, 0));
    }
}
