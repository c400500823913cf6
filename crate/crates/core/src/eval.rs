//! Full-length ROUGE and perplexity.
//!
//! Tokens are compared lowercased and exactly: no stemming, no stopword
//! removal, one reference per candidate.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::asc::LanguageModelPrior;
use crate::data::{Sentence, SourceView};
use crate::error::{Error, Result};
use crate::fsc::fsc_log_prob_on_tape;
use crate::model::SentenceModel;
use crate::tape::Tape;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

impl RougeScore {
    fn from_counts(overlap: f64, reference: f64, candidate: f64) -> Self {
        let recall = if reference > 0.0 {
            overlap / reference
        } else {
            0.0
        };
        let precision = if candidate > 0.0 {
            overlap / candidate
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        RougeScore {
            recall,
            precision,
            f1,
        }
    }
}

fn lowered<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    tokens.iter().map(|t| t.as_ref().to_lowercase()).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap.
pub fn rouge_n<S: AsRef<str>, T: AsRef<str>>(
    candidate: &[S],
    reference: &[T],
    n: usize,
) -> Result<RougeScore> {
    if n == 0 {
        return Err(Error::invalid("ROUGE-N needs n >= 1"));
    }
    let (cand, refr) = (lowered(candidate), lowered(reference));
    let cc = ngram_counts(&cand, n);
    let rc = ngram_counts(&refr, n);
    let overlap: usize = rc
        .iter()
        .map(|(gram, &r)| cc.get(gram).map_or(0, |&c| c.min(r)))
        .sum();
    let total = |len: usize| len.saturating_sub(n - 1) as f64;
    Ok(RougeScore::from_counts(
        overlap as f64,
        total(refr.len()),
        total(cand.len()),
    ))
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

pub fn rouge_l<S: AsRef<str>, T: AsRef<str>>(candidate: &[S], reference: &[T]) -> RougeScore {
    let (cand, refr) = (lowered(candidate), lowered(reference));
    let lcs = lcs_len(&cand, &refr) as f64;
    RougeScore::from_counts(lcs, refr.len() as f64, cand.len() as f64)
}

/// Corpus means of R-1, R-2 and R-L, each as recall, precision and F1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeSummary {
    pub rouge_1: RougeScore,
    pub rouge_2: RougeScore,
    pub rouge_l: RougeScore,
    pub pairs: usize,
}

impl RougeSummary {
    pub fn table(&self) -> String {
        let mut out = String::from("metric\trecall\tprecision\tf1\n");
        for (name, s) in [
            ("R-1", self.rouge_1),
            ("R-2", self.rouge_2),
            ("R-L", self.rouge_l),
        ] {
            out.push_str(&format!(
                "{name}\t{:.4}\t{:.4}\t{:.4}\n",
                s.recall, s.precision, s.f1
            ));
        }
        out
    }
}

/// Averages per-pair scores over aligned candidate/reference lists.
pub fn rouge_corpus<S: AsRef<str>, T: AsRef<str>>(
    candidates: &[Vec<S>],
    references: &[Vec<T>],
) -> Result<RougeSummary> {
    if candidates.len() != references.len() {
        return Err(Error::invalid(format!(
            "{} candidates for {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::invalid("no sentence pairs to score"));
    }
    let mut sum = [RougeScore::default(); 3];
    for (c, r) in candidates.iter().zip(references) {
        let scores = [rouge_n(c, r, 1)?, rouge_n(c, r, 2)?, rouge_l(c, r)];
        for (acc, s) in sum.iter_mut().zip(scores) {
            acc.recall += s.recall;
            acc.precision += s.precision;
            acc.f1 += s.f1;
        }
    }
    let n = candidates.len() as f64;
    let mean = |s: RougeScore| RougeScore {
        recall: s.recall / n,
        precision: s.precision / n,
        f1: s.f1 / n,
    };
    Ok(RougeSummary {
        rouge_1: mean(sum[0]),
        rouge_2: mean(sum[1]),
        rouge_l: mean(sum[2]),
        pairs: candidates.len(),
    })
}

fn read_token_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

/// Scores two aligned files of space-tokenized sentences.
pub fn rouge_files(candidates: &Path, references: &Path) -> Result<RougeSummary> {
    let c = read_token_lines(candidates)?;
    let r = read_token_lines(references)?;
    if c.len() != r.len() {
        let line = c.len().min(r.len()) + 1;
        return Err(Error::data(
            candidates,
            line,
            format!(
                "{} candidate lines but {} reference lines",
                c.len(),
                r.len()
            ),
        ));
    }
    rouge_corpus(&c, &r)
}

/// `exp(-log_prob / tokens)`.
pub fn perplexity_from(total_log_prob: f64, tokens: usize) -> Result<f64> {
    if tokens == 0 {
        return Err(Error::invalid("perplexity over an empty dataset"));
    }
    Ok((-total_log_prob / tokens as f64).exp())
}

/// Perplexity of the forced-attention model on reference compressions; the
/// end symbol counts as a token.
pub fn fsc_perplexity(model: &SentenceModel, pairs: &[(SourceView, Sentence)]) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0;
    for (src, c) in pairs {
        let mut tape = Tape::frozen(&model.store);
        let enc = model.compression.encode(&mut tape, src)?;
        let lp = fsc_log_prob_on_tape(
            &mut tape,
            &model.compression,
            &model.fsc,
            &model.vocabs.compressor,
            src,
            &enc,
            c,
        )?;
        total += tape.scalar(lp);
        tokens += c.len() + 1;
    }
    perplexity_from(total, tokens)
}

pub fn lm_perplexity(prior: &LanguageModelPrior, sentences: &[Sentence]) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0;
    for s in sentences {
        total += prior.log_prob(s)?;
        tokens += s.len() + 1;
    }
    perplexity_from(total, tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PriorConfig;
    use crate::data::{VocabRole, Vocabulary};
    use proptest::prelude::*;

    fn w(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn identical_sequences_score_one() {
        let a = w("the cat sat");
        for s in [
            rouge_n(&a, &a, 1).unwrap(),
            rouge_n(&a, &a, 2).unwrap(),
            rouge_l(&a, &a),
        ] {
            assert_eq!(
                s,
                RougeScore {
                    recall: 1.0,
                    precision: 1.0,
                    f1: 1.0
                }
            );
        }
    }

    #[test]
    fn worked_example() {
        let (c, r) = (w("a b c"), w("a b d"));
        let r1 = rouge_n(&c, &r, 1).unwrap();
        assert!((r1.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((r1.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((r1.f1 - 2.0 / 3.0).abs() < 1e-15);
        let r2 = rouge_n(&c, &r, 2).unwrap();
        assert_eq!((r2.recall, r2.precision), (0.5, 0.5));
        let rl = rouge_l(&c, &r);
        assert!((rl.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((rl.precision - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn disjoint_and_empty_inputs_score_zero() {
        let z = RougeScore::default();
        assert_eq!(rouge_n(&w("a b"), &w("c d"), 1).unwrap(), z);
        assert_eq!(rouge_l(&w("a b"), &w("c d")), z);
        assert_eq!(rouge_n(&w("a"), &w("a"), 2).unwrap(), z);
        assert_eq!(rouge_l(&Vec::<String>::new(), &w("a")), z);
        assert!(rouge_n(&w("a"), &w("a"), 0).is_err());
    }

    #[test]
    fn matching_is_case_insensitive_and_clipped() {
        let s = rouge_n(&w("The the the"), &w("the cat"), 1).unwrap();
        assert_eq!(s.recall, 0.5);
        assert!((s.precision - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn subsequence_reference_has_full_lcs_recall() {
        assert_eq!(rouge_l(&w("x a y b z c"), &w("a b c")).recall, 1.0);
    }

    #[test]
    fn corpus_and_files() {
        let dir = tempfile::tempdir().unwrap();
        let (c, r) = (dir.path().join("c.txt"), dir.path().join("r.txt"));
        std::fs::write(&c, "a b c\nx y\n").unwrap();
        std::fs::write(&r, "a b d\nx y\n").unwrap();
        let s = rouge_files(&c, &r).unwrap();
        assert_eq!(s.pairs, 2);
        assert!((s.rouge_1.recall - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15);
        assert!((s.rouge_2.f1 - 0.75).abs() < 1e-15);
        assert_eq!(s.table().lines().count(), 4);
        std::fs::write(&r, "a b d\n").unwrap();
        assert!(matches!(rouge_files(&c, &r), Err(Error::Data { .. })));
    }

    #[test]
    fn uniform_lm_perplexity_is_vocabulary_size() {
        let vocab = Vocabulary::build(["a", "b", "c", "d"], 10, 1, VocabRole::Lm).unwrap();
        let cfg = PriorConfig {
            embed_dim: 3,
            hidden_dim: 3,
            layers: 1,
            dropout: 0.0,
            vocab_size: vocab.len(),
        };
        let mut prior = LanguageModelPrior::new(cfg, vocab, 0).unwrap();
        let w_out = prior.output.weight;
        prior.store.get_mut(w_out).data_mut().fill(0.0);
        let ppl = lm_perplexity(&prior, &[w("a b"), w("d c a b")]).unwrap();
        assert!((ppl - prior.vocab.len() as f64).abs() < 1e-9);
        assert!(lm_perplexity(&prior, &[]).is_err());
    }

    #[test]
    fn unigram_recall_can_trail_bigram_recall() {
        // Clipping caps the unigram overlap at 2 of 3 while both bigrams match.
        let (c, r) = (w("c b c"), w("b c b"));
        let r1 = rouge_n(&c, &r, 1).unwrap();
        let r2 = rouge_n(&c, &r, 2).unwrap();
        assert!((r1.recall - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r2.recall, 1.0);
    }

    /// Brute-force n-gram overlap by pairing off matches.
    fn brute_overlap(c: &[String], r: &[String], n: usize) -> usize {
        if c.len() < n || r.len() < n {
            return 0;
        }
        let mut used = vec![false; c.len() - n + 1];
        let mut hits = 0;
        for i in 0..=r.len() - n {
            if let Some(j) = (0..used.len()).find(|&j| !used[j] && c[j..j + n] == r[i..i + n]) {
                used[j] = true;
                hits += 1;
            }
        }
        hits
    }

    /// LCS by trying every subsequence of the shorter side.
    fn brute_lcs(a: &[String], b: &[String]) -> usize {
        let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
        let is_subseq = |s: &[&String]| {
            let mut it = long.iter();
            s.iter().all(|x| it.any(|y| y == *x))
        };
        let mut best = 0;
        for mask in 0u32..(1 << short.len()) {
            let sub: Vec<&String> = (0..short.len())
                .filter(|i| mask >> i & 1 == 1)
                .map(|i| &short[i])
                .collect();
            if sub.len() > best && is_subseq(&sub) {
                best = sub.len();
            }
        }
        best
    }

    fn tokens() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), 0..9)
            .prop_map(|v| v.into_iter().map(str::to_string).collect())
    }

    proptest! {
        #[test]
        fn matches_brute_force(c in tokens(), r in tokens()) {
            for n in 1..=2 {
                let s = rouge_n(&c, &r, n).unwrap();
                let o = brute_overlap(&c, &r, n) as f64;
                let expect = RougeScore::from_counts(
                    o,
                    r.len().saturating_sub(n - 1) as f64,
                    c.len().saturating_sub(n - 1) as f64,
                );
                prop_assert_eq!(s, expect);
            }
            prop_assert_eq!(lcs_len(&c, &r), brute_lcs(&c, &r));
        }

        #[test]
        fn swap_exchanges_recall_and_precision(c in tokens(), r in tokens()) {
            for (a, b) in [
                (rouge_n(&c, &r, 1).unwrap(), rouge_n(&r, &c, 1).unwrap()),
                (rouge_n(&c, &r, 2).unwrap(), rouge_n(&r, &c, 2).unwrap()),
                (rouge_l(&c, &r), rouge_l(&r, &c)),
            ] {
                prop_assert_eq!(a.recall, b.precision);
                prop_assert_eq!(a.precision, b.recall);
                prop_assert!((a.f1 - b.f1).abs() < 1e-15);
            }
        }

        #[test]
        fn scores_are_bounded(c in tokens(), r in tokens()) {
            let r1 = rouge_n(&c, &r, 1).unwrap();
            let r2 = rouge_n(&c, &r, 2).unwrap();
            for s in [r1, r2, rouge_l(&c, &r)] {
                for x in [s.recall, s.precision, s.f1] {
                    prop_assert!((0.0..=1.0).contains(&x));
                }
            }
        }
    }
}
