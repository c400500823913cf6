//! Auto-encoding compression: the pointer-network compressor `q(c|s)`, the
//! attentive reconstruction decoder `p(s|c)` and the language-model prior `p(c)`.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, PriorConfig};
use crate::data::{SourceView, Vocabulary, BOS, EOS};
use crate::error::{Error, Result};
use crate::nn::{BiEncoder, CellKind, Embedding, LayerState, Linear, StackedRnn};
use crate::tape::{Tape, Var};
use crate::tensor::{Group, ParamId, ParamStore, Tensor};

/// Encoder, compressor and pointer attention (`W1`, `W2`, `w3`).
#[derive(Clone, Debug)]
pub struct CompressionNetwork {
    pub encoder_embedding: Embedding,
    /// Same table as `encoder_embedding` when embeddings are shared.
    pub compressor_embedding: Embedding,
    pub encoder: BiEncoder,
    pub compressor: StackedRnn,
    /// One affine map per compressor layer from the last source state.
    pub bridge: Vec<Linear>,
    pub w1: ParamId,
    pub w2: ParamId,
    pub w3: ParamId,
}

/// Encoder output for one source, including the appended end position.
#[derive(Clone, Debug)]
pub struct EncodedSource {
    pub states: Vec<Var>,
    /// `[n + 1, 2H]` matrix of the states.
    pub memory: Var,
    /// `memory · W2ᵀ`, shared by every pointer step.
    pub keys: Var,
}

impl EncodedSource {
    pub fn positions(&self) -> usize {
        self.states.len()
    }
}

impl CompressionNetwork {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        encoder_vocab: usize,
        compressor_vocab: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let g = Group::Compression;
        let (e, h, a) = (cfg.embed_dim, cfg.hidden_dim, cfg.attention_dim);
        let encoder_embedding = Embedding::new(store, "enc.embed", g, encoder_vocab, e, rng);
        let compressor_embedding = if cfg.share_embeddings {
            if compressor_vocab != encoder_vocab {
                return Err(Error::invalid(
                    "shared embeddings need identical encoder and compressor vocabularies",
                ));
            }
            encoder_embedding.clone()
        } else {
            Embedding::new(store, "com.embed", g, compressor_vocab, e, rng)
        };
        let stack = |store: &mut ParamStore, name: &str, depth, rng: &mut R| {
            StackedRnn::new(
                store,
                name,
                g,
                CellKind::Lstm,
                depth,
                e,
                h,
                cfg.skip_connections,
                0.0,
                rng,
            )
        };
        let encoder = BiEncoder {
            forward: stack(store, "enc.fwd", cfg.encoder_layers, rng)?,
            backward: stack(store, "enc.bwd", cfg.encoder_layers, rng)?,
        };
        let compressor = stack(store, "com.rnn", cfg.compressor_layers, rng)?;
        let bridge = (0..cfg.compressor_layers)
            .map(|l| Linear::new(store, &format!("com.bridge{l}"), g, 2 * h, h, true, rng))
            .collect();
        let w1 = store.add_uniform("ptr.w1", g, &[a, h], rng);
        let w2 = store.add_uniform("ptr.w2", g, &[a, 2 * h], rng);
        let w3 = store.add_uniform("ptr.w3", g, &[a], rng);
        Ok(CompressionNetwork {
            encoder_embedding,
            compressor_embedding,
            encoder,
            compressor,
            bridge,
            w1,
            w2,
            w3,
        })
    }

    /// Every parameter of the network, without duplicates.
    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.encoder_embedding.table];
        if self.compressor_embedding.table != self.encoder_embedding.table {
            p.push(self.compressor_embedding.table);
        }
        p.extend(self.encoder.params());
        p.extend(self.compressor.params());
        p.extend(self.bridge.iter().flat_map(Linear::params));
        p.extend([self.w1, self.w2, self.w3]);
        p
    }

    /// Runs the bidirectional encoder over the source followed by `</s>`.
    pub fn encode(&self, tape: &mut Tape<'_>, src: &SourceView) -> Result<EncodedSource> {
        if src.is_empty() {
            return Err(Error::invalid("cannot encode an empty source"));
        }
        let inputs = src
            .encoder_ids
            .iter()
            .chain(std::iter::once(&EOS))
            .map(|&id| self.encoder_embedding.lookup(tape, id))
            .collect::<Result<Vec<_>>>()?;
        let states = self.encoder.encode(tape, &inputs)?;
        let memory = tape.stack(&states)?;
        let w2 = tape.param(self.w2);
        let keys = tape.matmul_nt(memory, w2)?;
        Ok(EncodedSource {
            states,
            memory,
            keys,
        })
    }

    /// Compressor state before the first step, projected from the encoder
    /// state at the last source word. LSTM memories start at zero.
    pub fn initial_state(
        &self,
        tape: &mut Tape<'_>,
        enc: &EncodedSource,
    ) -> Result<Vec<LayerState>> {
        let last = enc.states[enc.positions() - 2];
        self.bridge
            .iter()
            .zip(&self.compressor.layers)
            .map(|(proj, cell)| {
                let hidden = proj.forward(tape, last)?;
                let memory = matches!(cell, crate::nn::Cell::Lstm(_))
                    .then(|| tape.constant(Tensor::zeros(&[cell.hidden_dim()])));
                Ok(LayerState { hidden, memory })
            })
            .collect()
    }

    /// Feeds one compressor-vocabulary token and returns `h^c` with the new state.
    pub fn step(
        &self,
        tape: &mut Tape<'_>,
        state: &[LayerState],
        input: usize,
    ) -> Result<(Var, Vec<LayerState>)> {
        let x = self.compressor_embedding.lookup(tape, input)?;
        self.compressor.step(tape, state, x, None)
    }

    /// `u_i = w3ᵀ tanh(W1 h^c + W2 h^e_i)` for every position.
    pub fn pointer_scores(
        &self,
        tape: &mut Tape<'_>,
        enc: &EncodedSource,
        h_c: Var,
    ) -> Result<Var> {
        let w1 = tape.param(self.w1);
        let query = tape.matvec(w1, h_c)?;
        let pre = tape.add_row(enc.keys, query)?;
        let act = tape.tanh(pre);
        let w3 = tape.param(self.w3);
        tape.matvec(act, w3)
    }

    /// Log pointer distribution at step `step` (0-based). The end position
    /// is masked on the first step so compressions are never empty.
    pub fn pointer_log_probs(
        &self,
        tape: &mut Tape<'_>,
        enc: &EncodedSource,
        h_c: Var,
        step: usize,
    ) -> Result<Var> {
        let u = self.pointer_scores(tape, enc, h_c)?;
        let u = mask_first_step(tape, u, step)?;
        tape.log_softmax(u)
    }

    pub fn pointer_probs(
        &self,
        tape: &mut Tape<'_>,
        enc: &EncodedSource,
        h_c: Var,
        step: usize,
    ) -> Result<Var> {
        let u = self.pointer_scores(tape, enc, h_c)?;
        let u = mask_first_step(tape, u, step)?;
        tape.softmax(u)
    }

    /// Compressor states over `c` from a zero state, without source context.
    /// The outputs are detached so reconstruction gradients stop here.
    pub fn reencode(&self, tape: &mut Tape<'_>, compressor_ids: &[usize]) -> Result<Vec<Var>> {
        if compressor_ids.is_empty() {
            return Err(Error::invalid("cannot re-encode an empty compression"));
        }
        let inputs = compressor_ids
            .iter()
            .map(|&id| self.compressor_embedding.lookup(tape, id))
            .collect::<Result<Vec<_>>>()?;
        let init = self.compressor.zero_state(tape);
        let states = self.compressor.run(tape, init, &inputs, None)?;
        Ok(states.into_iter().map(|s| tape.detach(s)).collect())
    }

    /// Teacher-forced `log q(c|s)`. A word occurring several times in the
    /// source is scored by the total mass of its positions. A compression
    /// shorter than `max_len` is closed by an end step.
    pub fn log_prob_on_tape(
        &self,
        tape: &mut Tape<'_>,
        src: &SourceView,
        enc: &EncodedSource,
        words: &[String],
        max_len: usize,
    ) -> Result<Var> {
        if words.is_empty() {
            return Err(Error::invalid("compression must contain at least one word"));
        }
        if words.len() > max_len {
            return Err(Error::invalid(format!(
                "compression of {} words exceeds the cap of {max_len}",
                words.len()
            )));
        }
        let mut state = self.initial_state(tape, enc)?;
        let mut input = BOS;
        let mut terms = Vec::with_capacity(words.len() + 1);
        for (j, w) in words.iter().enumerate() {
            let positions = src.positions_of(w);
            if positions.is_empty() {
                return Err(Error::UnsupportedSequence(w.clone()));
            }
            let (h, next) = self.step(tape, &state, input)?;
            let lp = self.pointer_log_probs(tape, enc, h, j)?;
            terms.push(tape.log_sum_exp_at(lp, &positions)?);
            state = next;
            input = src.compressor_ids[positions[0]];
        }
        if words.len() < max_len {
            let (h, _) = self.step(tape, &state, input)?;
            let lp = self.pointer_log_probs(tape, enc, h, words.len())?;
            terms.push(tape.select(lp, src.eos_position())?);
        }
        tape.sum_scalars(&terms)
    }

    /// Ancestral sample from `q(c|s)`, returning the sample and its
    /// log-probability node.
    pub fn sample_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        src: &SourceView,
        enc: &EncodedSource,
        max_len: usize,
        rng: &mut R,
    ) -> Result<(CompressionSample, Var)> {
        if max_len < 1 {
            return Err(Error::invalid("max_len must be at least 1"));
        }
        let eos = src.eos_position();
        let mut state = self.initial_state(tape, enc)?;
        let mut input = BOS;
        let mut sample = CompressionSample::default();
        let mut terms = Vec::new();
        loop {
            let j = sample.positions.len();
            let (h, next) = self.step(tape, &state, input)?;
            let lp = self.pointer_log_probs(tape, enc, h, j)?;
            let pos = draw(tape.value(lp), rng);
            let term = if pos == eos {
                tape.select(lp, eos)?
            } else {
                let positions = src.positions_of(&src.words[pos]);
                tape.log_sum_exp_at(lp, &positions)?
            };
            sample.step_log_q.push(tape.scalar(term));
            terms.push(term);
            if pos == eos {
                sample.ended_with_eos = true;
                break;
            }
            sample.positions.push(pos);
            sample.words.push(src.words[pos].clone());
            sample.compressor_ids.push(src.compressor_ids[pos]);
            state = next;
            input = src.compressor_ids[pos];
            if sample.positions.len() == max_len {
                break;
            }
        }
        let log_q = tape.sum_scalars(&terms)?;
        sample.log_q = tape.scalar(log_q);
        Ok((sample, log_q))
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        src: &SourceView,
        max_len: usize,
        rng: &mut R,
    ) -> Result<CompressionSample> {
        let mut tape = Tape::frozen(store);
        let enc = self.encode(&mut tape, src)?;
        Ok(self.sample_on_tape(&mut tape, src, &enc, max_len, rng)?.0)
    }

    pub fn log_prob(
        &self,
        store: &ParamStore,
        src: &SourceView,
        words: &[String],
        max_len: usize,
    ) -> Result<f64> {
        let mut tape = Tape::frozen(store);
        let enc = self.encode(&mut tape, src)?;
        let lp = self.log_prob_on_tape(&mut tape, src, &enc, words, max_len)?;
        Ok(tape.scalar(lp))
    }
}

fn mask_first_step(tape: &mut Tape<'_>, u: Var, step: usize) -> Result<Var> {
    if step > 0 {
        return Ok(u);
    }
    let n = tape.value(u).len();
    let mut mask = vec![0.0; n];
    mask[n - 1] = f64::NEG_INFINITY;
    tape.add_const(u, &mask)
}

/// Inverse-CDF draw from a vector of log-probabilities.
pub(crate) fn draw<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, lp) in log_probs.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// One draw from the compression distribution.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CompressionSample {
    /// Sampled source positions, end step excluded.
    pub positions: Vec<usize>,
    pub words: Vec<String>,
    pub compressor_ids: Vec<usize>,
    /// Log-probability of every step, including the end step when taken.
    pub step_log_q: Vec<f64>,
    pub log_q: f64,
    pub ended_with_eos: bool,
}

impl CompressionSample {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Single-layer Elman decoder with attention over re-encoded compression
/// states (`W4`, `W5`, `w6`) and output projection `W7`.
#[derive(Clone, Debug)]
pub struct ReconstructionNetwork {
    pub embedding: Embedding,
    pub decoder: StackedRnn,
    pub bridge: Linear,
    pub w4: ParamId,
    pub w5: ParamId,
    pub w6: ParamId,
    pub w7: ParamId,
    pub vocab_size: usize,
}

impl ReconstructionNetwork {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        decoder_vocab: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let g = Group::Reconstruction;
        let (e, h, a) = (cfg.embed_dim, cfg.hidden_dim, cfg.attention_dim);
        let embedding = Embedding::new(store, "dec.embed", g, decoder_vocab, e, rng);
        let decoder = StackedRnn::new(
            store,
            "dec.rnn",
            g,
            CellKind::Vanilla,
            1,
            e,
            h,
            false,
            0.0,
            rng,
        )?;
        let bridge = Linear::new(store, "dec.bridge", g, h, h, true, rng);
        let w4 = store.add_uniform("att.w4", g, &[a, h], rng);
        let w5 = store.add_uniform("att.w5", g, &[a, h], rng);
        let w6 = store.add_uniform("att.w6", g, &[a], rng);
        let w7 = store.add_uniform("out.w7", g, &[decoder_vocab, h], rng);
        Ok(ReconstructionNetwork {
            embedding,
            decoder,
            bridge,
            w4,
            w5,
            w6,
            w7,
            vocab_size: decoder_vocab,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.embedding.table];
        p.extend(self.decoder.params());
        p.extend(self.bridge.params());
        p.extend([self.w4, self.w5, self.w6, self.w7]);
        p
    }

    /// Teacher-forced `log p(s|c)` over `targets` followed by `</s>`.
    pub fn log_prob(
        &self,
        tape: &mut Tape<'_>,
        targets: &[usize],
        compressed: &[Var],
    ) -> Result<Var> {
        Ok(self.log_prob_traced(tape, targets, compressed, false)?.0)
    }

    /// Like [`log_prob`](Self::log_prob), also returning the attention
    /// weights of every step when `trace` is set.
    pub fn log_prob_traced(
        &self,
        tape: &mut Tape<'_>,
        targets: &[usize],
        compressed: &[Var],
        trace: bool,
    ) -> Result<(Var, Vec<Vec<f64>>)> {
        let Some(&last) = compressed.last() else {
            return Err(Error::invalid(
                "reconstruction needs at least one compression state",
            ));
        };
        let memory = tape.stack(compressed)?;
        let w5 = tape.param(self.w5);
        let keys = tape.matmul_nt(memory, w5)?;
        let w4 = tape.param(self.w4);
        let w6 = tape.param(self.w6);
        let w7 = tape.param(self.w7);
        let mut state = vec![LayerState {
            hidden: self.bridge.forward(tape, last)?,
            memory: None,
        }];
        let mut prev = BOS;
        let mut terms = Vec::with_capacity(targets.len() + 1);
        let mut attention = Vec::new();
        for &target in targets.iter().chain(std::iter::once(&EOS)) {
            let x = self.embedding.lookup(tape, prev)?;
            let (h, next) = self.decoder.step(tape, &state, x, None)?;
            state = next;
            let query = tape.matvec(w4, h)?;
            let pre = tape.add_row(keys, query)?;
            let act = tape.tanh(pre);
            let v = tape.matvec(act, w6)?;
            let gamma = tape.softmax(v)?;
            if trace {
                attention.push(tape.value(gamma).to_vec());
            }
            let d = tape.matvec_t(memory, gamma)?;
            let logits = tape.matvec(w7, d)?;
            let lp = tape.log_softmax(logits)?;
            terms.push(tape.select(lp, target)?);
            prev = target;
        }
        Ok((tape.sum_scalars(&terms)?, attention))
    }
}

/// Frozen recurrent language model over compressions, with its own store.
#[derive(Clone, Debug)]
pub struct LanguageModelPrior {
    pub config: PriorConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub embedding: Embedding,
    pub rnn: StackedRnn,
    pub output: Linear,
}

impl LanguageModelPrior {
    pub fn new(config: PriorConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let g = Group::Prior;
        let (e, h) = (config.embed_dim, config.hidden_dim);
        let embedding = Embedding::new(&mut store, "lm.embed", g, vocab.len(), e, &mut rng);
        let rnn = StackedRnn::new(
            &mut store,
            "lm.rnn",
            g,
            CellKind::Vanilla,
            config.layers,
            e,
            h,
            false,
            config.dropout,
            &mut rng,
        )?;
        let output = Linear::new(&mut store, "lm.out", g, h, vocab.len(), true, &mut rng);
        Ok(LanguageModelPrior {
            config,
            vocab,
            store,
            embedding,
            rnn,
            output,
        })
    }

    /// Builds the tape-level `log p(c)` over `ids` then `</s>`. Passing an
    /// rng enables dropout.
    pub fn log_prob_on_tape(
        &self,
        tape: &mut Tape<'_>,
        ids: &[usize],
        mut rng: Option<&mut (dyn RngCore + 'static)>,
    ) -> Result<Var> {
        let mut state = self.rnn.zero_state(tape);
        let mut prev = BOS;
        let mut terms = Vec::with_capacity(ids.len() + 1);
        for &target in ids.iter().chain(std::iter::once(&EOS)) {
            let x = self.embedding.lookup(tape, prev)?;
            let (h, next) = self.rnn.step(tape, &state, x, rng.as_deref_mut())?;
            state = next;
            let logits = self.output.forward(tape, h)?;
            let lp = tape.log_softmax(logits)?;
            terms.push(tape.select(lp, target)?);
            prev = target;
        }
        tape.sum_scalars(&terms)
    }

    /// Evaluation-mode `log p(c)`; words outside the vocabulary score as `<unk>`.
    pub fn log_prob<S: AsRef<str>>(&self, words: &[S]) -> Result<f64> {
        let ids = self.vocab.encode(words);
        let mut tape = Tape::frozen(&self.store);
        let lp = self.log_prob_on_tape(&mut tape, &ids, None)?;
        Ok(tape.scalar(lp))
    }
}

/// Terms of the single-sample scaled lower bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LowerBound {
    /// `log p(s|c) - λ (log q(c|s) - log p(c))`.
    pub estimate: f64,
    pub reconstruction: f64,
    /// `log q(c|s) - log p(c)` for the sample.
    pub kl_sample: f64,
}

pub fn lower_bound(
    reconstruction: f64,
    log_q: f64,
    log_prior: f64,
    lambda: f64,
) -> Result<LowerBound> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!(
            "lambda {lambda} must be non-negative"
        )));
    }
    let kl_sample = log_q - log_prior;
    Ok(LowerBound {
        estimate: reconstruction - lambda * kl_sample,
        reconstruction,
        kl_sample,
    })
}
