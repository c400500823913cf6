//! Forced-attention compression: the pointer distribution mixed with a
//! full-vocabulary softmax through a learned selection gate.

use rand::Rng;

use crate::asc::{CompressionNetwork, EncodedSource};
use crate::config::ModelConfig;
use crate::data::{Pair, SourceView, Vocabulary, BOS, EOS, UNK};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Group, ParamId, ParamStore};

/// Vocabulary projection `W` and bilinear selection matrix. The pointer
/// network itself is the shared [`CompressionNetwork`].
#[derive(Clone, Debug)]
pub struct FscHead {
    pub vocab: ParamId,
    pub select: ParamId,
    pub vocab_size: usize,
}

/// Per-step quantities of the combined distribution.
#[derive(Clone, Copy, Debug)]
pub struct CombinedStep {
    /// Pointer distribution over source positions and the end position.
    pub alpha: Var,
    /// Softmax over the compression vocabulary.
    pub beta: Var,
    /// Probability of copying rather than generating.
    pub t: Var,
}

impl FscHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        vocab_size: usize,
        rng: &mut R,
    ) -> Self {
        let h = cfg.hidden_dim;
        let vocab = store.add_uniform("fsc.vocab", Group::Compression, &[vocab_size, h], rng);
        let select = store.add_uniform("fsc.select", Group::Compression, &[2 * h, h], rng);
        FscHead {
            vocab,
            select,
            vocab_size,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.vocab, self.select]
    }

    /// `β = softmax(W h^c)`.
    pub fn vocab_scores(&self, tape: &mut Tape<'_>, h_c: Var) -> Result<Var> {
        let w = tape.param(self.vocab);
        let logits = tape.matvec(w, h_c)?;
        tape.softmax(logits)
    }

    /// `t = σ(ηᵀ M h^c)` with `η = Σ_i α_i h^e_i`.
    pub fn selection_factor(
        &self,
        tape: &mut Tape<'_>,
        alpha: Var,
        memory: Var,
        h_c: Var,
    ) -> Result<Var> {
        let eta = tape.matvec_t(memory, alpha)?;
        let m = tape.param(self.select);
        let projected = tape.matvec(m, h_c)?;
        let score = tape.dot(eta, projected)?;
        Ok(tape.sigmoid(score))
    }

    pub fn step(
        &self,
        tape: &mut Tape<'_>,
        net: &CompressionNetwork,
        enc: &EncodedSource,
        h_c: Var,
        step: usize,
    ) -> Result<CombinedStep> {
        let alpha = net.pointer_probs(tape, enc, h_c, step)?;
        let beta = self.vocab_scores(tape, h_c)?;
        let t = self.selection_factor(tape, alpha, enc.memory, h_c)?;
        Ok(CombinedStep { alpha, beta, t })
    }
}

/// Source positions and vocabulary entry that make up one output event.
/// `None` is the end-of-compression event.
fn event(src: &SourceView, vocab: &Vocabulary, word: Option<&str>) -> (Vec<usize>, Option<usize>) {
    match word {
        None => (vec![src.eos_position()], Some(EOS)),
        Some(w) => {
            let positions = src.positions_of(w);
            let id = vocab.get(w);
            if positions.is_empty() && id.is_none() {
                (src.positions_of(vocab.token(UNK)), Some(UNK))
            } else {
                (positions, id)
            }
        }
    }
}

/// `t Σ_{i∈I} α_i + (1 - t) β_w`, dropping either branch when the word is
/// absent from the source or from the vocabulary.
pub fn combined_word_prob(
    alpha: &[f64],
    beta: &[f64],
    t: f64,
    src: &SourceView,
    vocab: &Vocabulary,
    word: Option<&str>,
) -> f64 {
    let (positions, id) = event(src, vocab, word);
    let copy: f64 = positions.iter().map(|&i| alpha[i]).sum();
    let generate = id.map_or(0.0, |v| beta[v]);
    t * copy + (1.0 - t) * generate
}

/// The combined distribution over every distinct output event.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinedDistribution {
    /// Indices below the vocabulary size are vocabulary entries; the rest are
    /// source words outside the vocabulary, in `oov_words` order.
    pub probs: Vec<f64>,
    pub oov_words: Vec<String>,
}

impl CombinedDistribution {
    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }
}

pub fn combined_distribution(
    alpha: &[f64],
    beta: &[f64],
    t: f64,
    src: &SourceView,
    vocab: &Vocabulary,
) -> CombinedDistribution {
    let mut probs: Vec<f64> = beta.iter().map(|b| (1.0 - t) * b).collect();
    let mut oov_words = Vec::new();
    probs[EOS] += t * alpha[src.eos_position()];
    for (i, w) in src.words.iter().enumerate() {
        match vocab.get(w) {
            Some(v) => probs[v] += t * alpha[i],
            None => {
                let k = match oov_words.iter().position(|o| o == w) {
                    Some(k) => k,
                    None => {
                        oov_words.push(w.clone());
                        probs.push(0.0);
                        oov_words.len() - 1
                    }
                };
                probs[beta.len() + k] += t * alpha[i];
            }
        }
    }
    CombinedDistribution { probs, oov_words }
}

/// Log-probability node for one output event under the combined distribution.
pub fn combined_log_prob_on_tape(
    tape: &mut Tape<'_>,
    step: &CombinedStep,
    src: &SourceView,
    vocab: &Vocabulary,
    word: Option<&str>,
) -> Result<Var> {
    let (positions, id) = event(src, vocab, word);
    let copy = if positions.is_empty() {
        None
    } else {
        let mass = tape.sum_at(step.alpha, &positions)?;
        Some(tape.mul(step.t, mass)?)
    };
    let generate = match id {
        Some(v) => {
            let b = tape.select(step.beta, v)?;
            let gate = tape.rsub_scalar(1.0, step.t);
            Some(tape.mul(gate, b)?)
        }
        None => None,
    };
    let p = match (copy, generate) {
        (Some(a), Some(b)) => tape.add(a, b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => unreachable!("every event has a copy or a generate branch"),
    };
    Ok(tape.log(p))
}

/// Teacher-forced `log p(c|s)` under the combined distribution, including
/// the end event.
pub fn fsc_log_prob_on_tape(
    tape: &mut Tape<'_>,
    net: &CompressionNetwork,
    head: &FscHead,
    vocab: &Vocabulary,
    src: &SourceView,
    enc: &EncodedSource,
    target: &[String],
) -> Result<Var> {
    if target.is_empty() {
        return Err(Error::invalid("compression must contain at least one word"));
    }
    let mut state = net.initial_state(tape, enc)?;
    let mut input = BOS;
    let mut terms = Vec::with_capacity(target.len() + 1);
    let words = target
        .iter()
        .map(|w| Some(w.as_str()))
        .chain(std::iter::once(None));
    for (j, word) in words.enumerate() {
        let (h, next) = net.step(tape, &state, input)?;
        state = next;
        let step = head.step(tape, net, enc, h, j)?;
        terms.push(combined_log_prob_on_tape(tape, &step, src, vocab, word)?);
        if let Some(w) = word {
            input = vocab.id(w);
        }
    }
    tape.sum_scalars(&terms)
}

/// Mean negative log-likelihood of a labelled batch, for minimisation.
pub fn fsc_loss(
    tape: &mut Tape<'_>,
    net: &CompressionNetwork,
    head: &FscHead,
    vocab: &Vocabulary,
    batch: &[(&SourceView, &[String])],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("FSC loss needs a nonempty batch"));
    }
    let mut terms = Vec::with_capacity(batch.len());
    for (src, target) in batch {
        let enc = net.encode(tape, src)?;
        terms.push(fsc_log_prob_on_tape(
            tape, net, head, vocab, src, &enc, target,
        )?);
    }
    let total = tape.sum_scalars(&terms)?;
    Ok(tape.scale(total, -1.0 / batch.len() as f64))
}

/// Convenience wrapper: evaluation-mode `log p(c|s)` for one pair.
pub fn fsc_log_prob(
    store: &ParamStore,
    net: &CompressionNetwork,
    head: &FscHead,
    vocab: &Vocabulary,
    src: &SourceView,
    pair: &Pair,
) -> Result<f64> {
    let mut tape = Tape::frozen(store);
    let enc = net.encode(&mut tape, src)?;
    let lp = fsc_log_prob_on_tape(&mut tape, net, head, vocab, src, &enc, &pair.compression)?;
    Ok(tape.scalar(lp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{VocabRole, Vocabularies};
    use crate::gradcheck::{finite_diff_check, redraw_uniform};
    use crate::tensor::{GradStore, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn vocab(s: &str) -> Vocabulary {
        Vocabulary::build(s.split_whitespace(), 64, 1, VocabRole::Compressor).unwrap()
    }

    fn vocabs(v: &Vocabulary) -> Vocabularies {
        Vocabularies {
            encoder: v.with_role(VocabRole::Encoder),
            compressor: v.clone(),
            decoder: v.with_role(VocabRole::Decoder),
        }
    }

    fn setup(dim: usize, seed: u64, v: &Vocabulary) -> (ParamStore, CompressionNetwork, FscHead) {
        let cfg = ModelConfig::tiny(dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = CompressionNetwork::new(&mut store, &cfg, v.len(), v.len(), &mut rng).unwrap();
        let head = FscHead::new(&mut store, &cfg, v.len(), &mut rng);
        (store, net, head)
    }

    #[test]
    fn zero_projection_gives_uniform_vocab_scores() {
        let v = vocab("a b c");
        let (mut store, _, head) = setup(4, 0, &v);
        store.get_mut(head.vocab).data_mut().fill(0.0);
        let mut tape = Tape::frozen(&store);
        let h = tape.constant(Tensor::vector(vec![0.3, -0.2, 0.1, 0.5]));
        let beta = head.vocab_scores(&mut tape, h).unwrap();
        for b in tape.value(beta) {
            assert!((b - 1.0 / v.len() as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_set_vocab_scores() {
        let mut store = ParamStore::new();
        let w = store.add(
            "w",
            Group::Compression,
            Tensor::matrix(5, 1, vec![0.0, 1.0, 2.0, -1.0, 0.5]).unwrap(),
        );
        let head = FscHead {
            vocab: w,
            select: w,
            vocab_size: 5,
        };
        let mut tape = Tape::frozen(&store);
        let h = tape.constant(Tensor::vector(vec![1.0]));
        let beta = head.vocab_scores(&mut tape, h).unwrap();
        let logits = [0.0f64, 1.0, 2.0, -1.0, 0.5];
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for (b, l) in tape.value(beta).iter().zip(logits) {
            assert!((b - l.exp() / z).abs() < 1e-15);
        }
        let sum: f64 = tape.value(beta).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        // Shifting the logits keeps the argmax.
        let shifted = tape.constant(Tensor::vector(logits.iter().map(|l| l + 7.0).collect()));
        let p = tape.softmax(shifted).unwrap();
        let argmax = |xs: &[f64]| {
            xs.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0
        };
        assert_eq!(argmax(tape.value(p)), argmax(tape.value(beta)));
    }

    #[test]
    fn zero_selection_matrix_gives_half() {
        let v = vocab("a b c");
        let (mut store, net, head) = setup(4, 1, &v);
        store.get_mut(head.select).data_mut().fill(0.0);
        let src = vocabs(&v).view(&words("a b c")).unwrap();
        let mut tape = Tape::frozen(&store);
        let enc = net.encode(&mut tape, &src).unwrap();
        let init = net.initial_state(&mut tape, &enc).unwrap();
        let (h, _) = net.step(&mut tape, &init, BOS).unwrap();
        let step = head.step(&mut tape, &net, &enc, h, 0).unwrap();
        assert_eq!(tape.scalar(step.t), 0.5);
    }

    #[test]
    fn selection_factor_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let m = store.add(
            "m",
            Group::Compression,
            Tensor::uniform(&[4, 2], 1.0, &mut rng),
        );
        let head = FscHead {
            vocab: m,
            select: m,
            vocab_size: 0,
        };
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|_| Tensor::uniform(&[4], 1.0, &mut rng).into_data())
            .collect();
        let alpha = [0.2, 0.5, 0.3];
        let perm = [2, 0, 1];
        let mut tape = Tape::frozen(&store);
        let h = tape.constant(Tensor::vector(vec![0.4, -0.7]));
        let mem = tape.constant(Tensor::matrix(3, 4, rows.concat()).unwrap());
        let a = tape.constant(Tensor::vector(alpha.to_vec()));
        let t1 = head.selection_factor(&mut tape, a, mem, h).unwrap();
        let permuted: Vec<f64> = perm.iter().flat_map(|&i| rows[i].clone()).collect();
        let mem2 = tape.constant(Tensor::matrix(3, 4, permuted).unwrap());
        let a2 = tape.constant(Tensor::vector(perm.iter().map(|&i| alpha[i]).collect()));
        let t2 = head.selection_factor(&mut tape, a2, mem2, h).unwrap();
        assert!((tape.scalar(t1) - tape.scalar(t2)).abs() < 1e-15);
        assert!(tape.scalar(t1) > 0.0 && tape.scalar(t1) < 1.0);
    }

    #[test]
    fn selection_factor_gradients_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let m = store.add(
            "m",
            Group::Compression,
            Tensor::uniform(&[4, 2], 1.0, &mut rng),
        );
        let mem = store.add(
            "mem",
            Group::Compression,
            Tensor::uniform(&[3, 4], 1.0, &mut rng),
        );
        let logits = store.add(
            "alpha",
            Group::Compression,
            Tensor::uniform(&[3], 1.0, &mut rng),
        );
        let h = Tensor::vector(vec![0.4, -0.7]);
        let head = FscHead {
            vocab: m,
            select: m,
            vocab_size: 0,
        };
        let report = finite_diff_check(
            |t| {
                let hv = t.constant(h.clone());
                let l = t.param(logits);
                let a = t.softmax(l)?;
                let mv = t.param(mem);
                head.selection_factor(t, a, mv, hv)
            },
            &mut store,
            &[m, mem, logits],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn hand_computed_mixture() {
        // V = reserved + {x, y}; s = "x z" with z outside V.
        let v = vocab("x y");
        let vs = vocabs(&v);
        let src = vs.view(&words("x z")).unwrap();
        let alpha = [0.5, 0.3, 0.2];
        let beta = [0.05, 0.05, 0.1, 0.1, 0.4, 0.3];
        let t = 0.6;
        let p = |w: Option<&str>| combined_word_prob(&alpha, &beta, t, &src, &v, w);
        assert!((p(Some("x")) - (0.6 * 0.5 + 0.4 * 0.4)).abs() < 1e-15);
        assert!((p(Some("y")) - 0.4 * 0.3).abs() < 1e-15);
        assert!((p(Some("z")) - 0.6 * 0.3).abs() < 1e-15);
        assert!((p(None) - (0.6 * 0.2 + 0.4 * 0.1)).abs() < 1e-15);
        assert!((p(Some("never")) - 0.4 * 0.1).abs() < 1e-15);
        let dist = combined_distribution(&alpha, &beta, t, &src, &v);
        assert_eq!(dist.oov_words, vec!["z".to_string()]);
        assert!((dist.total() - 1.0).abs() < 1e-12);
        assert!((dist.probs[4] - p(Some("x"))).abs() < 1e-15);
        assert!((dist.probs[6] - p(Some("z"))).abs() < 1e-15);
    }

    #[test]
    fn degenerate_gates() {
        let v = vocab("x y w");
        let src = vocabs(&v).view(&words("x y x")).unwrap();
        let alpha = [0.1, 0.3, 0.4, 0.2];
        let beta: Vec<f64> = (0..v.len()).map(|i| (i + 1) as f64).collect();
        let z: f64 = beta.iter().sum();
        let beta: Vec<f64> = beta.iter().map(|b| b / z).collect();
        let d0 = combined_distribution(&alpha, &beta, 0.0, &src, &v);
        for (a, b) in d0.probs.iter().zip(&beta) {
            assert!((a - b).abs() < 1e-15);
        }
        let d1 = combined_distribution(&alpha, &beta, 1.0, &src, &v);
        assert!((d1.probs[v.id("x")] - 0.5).abs() < 1e-15);
        assert!((d1.probs[v.id("y")] - 0.3).abs() < 1e-15);
        assert!((d1.probs[EOS] - 0.2).abs() < 1e-15);
        assert_eq!(d1.probs[v.id("w")], 0.0);
    }

    #[test]
    fn tape_and_plain_probabilities_agree() {
        let v = vocab("a b c d e");
        let vs = vocabs(&v);
        let (mut store, net, head) = setup(4, 6, &v);
        let all: Vec<ParamId> = store.ids().collect();
        redraw_uniform(&mut store, &all, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let src = vs.view(&words("a q b a")).unwrap();
        let mut tape = Tape::frozen(&store);
        let enc = net.encode(&mut tape, &src).unwrap();
        let init = net.initial_state(&mut tape, &enc).unwrap();
        let (h, _) = net.step(&mut tape, &init, BOS).unwrap();
        let step = head.step(&mut tape, &net, &enc, h, 1).unwrap();
        let alpha = tape.value(step.alpha).to_vec();
        let beta = tape.value(step.beta).to_vec();
        let t = tape.scalar(step.t);
        for w in [Some("a"), Some("q"), Some("c"), Some("zzz"), None] {
            let lp = combined_log_prob_on_tape(&mut tape, &step, &src, &v, w).unwrap();
            let plain = combined_word_prob(&alpha, &beta, t, &src, &v, w);
            assert!((tape.scalar(lp).exp() - plain).abs() < 1e-14);
        }
        let dist = combined_distribution(&alpha, &beta, t, &src, &v);
        assert!((dist.total() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn oov_extractive_target_has_positive_probability() {
        let v = vocab("a b");
        let vs = vocabs(&v);
        let (store, net, head) = setup(4, 7, &v);
        let src = vs.view(&words("a rare b")).unwrap();
        let pair = Pair {
            source: src.words.clone(),
            compression: words("rare"),
        };
        let lp = fsc_log_prob(&store, &net, &head, &v, &src, &pair).unwrap();
        assert!(lp.is_finite() && lp < 0.0);
    }

    #[test]
    fn fsc_loss_rejects_empty_batch_and_skips_reconstruction() {
        let v = vocab("a b c");
        let vs = vocabs(&v);
        let (store, net, head) = setup(4, 8, &v);
        let mut tape = Tape::new(&store);
        assert!(fsc_loss(&mut tape, &net, &head, &v, &[]).is_err());
        let src = vs.view(&words("a b c")).unwrap();
        let target = words("a c");
        let loss = fsc_loss(&mut tape, &net, &head, &v, &[(&src, &target)]).unwrap();
        assert!(tape.scalar(loss) > 0.0);
        let mut grads = GradStore::new(&store);
        tape.backward(loss).unwrap().accumulate_into(&mut grads);
        assert!(!grads.is_zero(&net.params()));
        assert!(!grads.is_zero(&head.params()));
    }

    #[test]
    fn fsc_gradients_pass_finite_differences() {
        let v = vocab("a b c d");
        let vs = vocabs(&v);
        let (mut store, net, head) = setup(4, 9, &v);
        let all: Vec<ParamId> = store.ids().collect();
        redraw_uniform(&mut store, &all, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let src = vs.view(&words("a b q c")).unwrap();
        let target = words("a q d");
        let report = finite_diff_check(
            |t| fsc_loss(t, &net, &head, &v, &[(&src, &target)]),
            &mut store,
            &all,
            3e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}
