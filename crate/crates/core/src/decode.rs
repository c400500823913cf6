//! Beam search and greedy decoding over per-step output distributions.

use std::cell::RefCell;

use crate::asc::EncodedSource;
use crate::data::{SourceView, BOS, EOS, PAD, UNK};
use crate::error::{Error, Result};
use crate::fsc::combined_distribution;
use crate::model::SentenceModel;
use crate::nn::LayerState;
use crate::tape::{log_sum_exp, Tape, Var};

/// A left-to-right model exposed to the search.
pub trait SearchModel {
    type State: Clone;

    fn start(&self) -> Result<Self::State>;

    /// Log-probabilities of every symbol at `step` (0-based). Disallowed
    /// symbols carry `-inf`.
    fn log_probs(&self, state: &Self::State, step: usize) -> Result<Vec<f64>>;

    fn advance(&self, state: &Self::State, symbol: usize) -> Result<Self::State>;

    fn eos(&self) -> usize;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted symbols, end symbol excluded.
    pub tokens: Vec<usize>,
    /// Total log-probability, end step included when finished.
    pub score: f64,
    pub finished: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Maximum number of steps, the end step included.
    pub max_steps: usize,
    /// When set, final ranking divides scores by `len^alpha`.
    pub length_penalty: Option<f64>,
}

impl BeamConfig {
    pub fn new(beam_size: usize, max_steps: usize) -> Self {
        BeamConfig {
            beam_size,
            max_steps,
            length_penalty: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub best: Hypothesis,
    /// Completed hypotheses in retirement order.
    pub finished: Vec<Hypothesis>,
    /// Set when nothing finished and `best` is the top unfinished hypothesis.
    pub unfinished: bool,
}

fn ranking(h: &Hypothesis, penalty: Option<f64>) -> f64 {
    match penalty {
        Some(alpha) => {
            h.score / ((h.tokens.len() + usize::from(h.finished)).max(1) as f64).powf(alpha)
        }
        None => h.score,
    }
}

/// First index of the maximum; `-inf` everywhere yields `None`.
fn argmax(xs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in xs.iter().enumerate() {
        if x > f64::NEG_INFINITY && best.is_none_or(|b| x > xs[b]) {
            best = Some(i);
        }
    }
    best
}

/// Length-synchronous beam search. Candidates are ranked by score with ties
/// kept in expansion order (parent rank, then symbol index).
pub fn beam_search<M: SearchModel>(model: &M, cfg: BeamConfig) -> Result<SearchResult> {
    if cfg.beam_size == 0 {
        return Err(Error::invalid("beam size must be at least 1"));
    }
    let eos = model.eos();
    let mut active: Vec<(Hypothesis, M::State)> = vec![(
        Hypothesis {
            tokens: Vec::new(),
            score: 0.0,
            finished: false,
        },
        model.start()?,
    )];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for step in 0..cfg.max_steps {
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (parent, (hyp, state)) in active.iter().enumerate() {
            for (sym, lp) in model.log_probs(state, step)?.into_iter().enumerate() {
                if lp > f64::NEG_INFINITY {
                    candidates.push((hyp.score + lp, parent, sym));
                }
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
        candidates.truncate(cfg.beam_size);

        let mut next = Vec::with_capacity(candidates.len());
        for (score, parent, sym) in candidates {
            let (hyp, state) = &active[parent];
            if sym == eos {
                finished.push(Hypothesis {
                    tokens: hyp.tokens.clone(),
                    score,
                    finished: true,
                });
            } else {
                let mut tokens = hyp.tokens.clone();
                tokens.push(sym);
                let h = Hypothesis {
                    tokens,
                    score,
                    finished: false,
                };
                next.push((h, model.advance(state, sym)?));
            }
        }
        active = next;
        if active.is_empty() {
            break;
        }
        // Scores never increase, so no active hypothesis can overtake.
        if cfg.length_penalty.is_none() {
            let best_done = finished
                .iter()
                .map(|h| h.score)
                .fold(f64::NEG_INFINITY, f64::max);
            if best_done >= active[0].0.score {
                break;
            }
        }
    }

    let pick = |pool: &[Hypothesis]| -> Option<Hypothesis> {
        let mut best: Option<&Hypothesis> = None;
        for h in pool {
            if best.is_none_or(|b| ranking(h, cfg.length_penalty) > ranking(b, cfg.length_penalty))
            {
                best = Some(h);
            }
        }
        best.cloned()
    };
    if let Some(best) = pick(&finished) {
        return Ok(SearchResult {
            best,
            finished,
            unfinished: false,
        });
    }
    let leftovers: Vec<Hypothesis> = active.into_iter().map(|(h, _)| h).collect();
    match pick(&leftovers) {
        Some(best) => Ok(SearchResult {
            best,
            finished,
            unfinished: true,
        }),
        None => Err(Error::invalid("search produced no hypothesis")),
    }
}

/// Argmax decoding; ties go to the lowest symbol index.
pub fn greedy<M: SearchModel>(model: &M, max_steps: usize) -> Result<Hypothesis> {
    let mut state = model.start()?;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
    };
    for step in 0..max_steps {
        let lps = model.log_probs(&state, step)?;
        let Some(sym) = argmax(&lps) else { break };
        hyp.score += lps[sym];
        if sym == model.eos() {
            hyp.finished = true;
            break;
        }
        hyp.tokens.push(sym);
        state = model.advance(&state, sym)?;
    }
    Ok(hyp)
}

/// Compressor state after consuming the previous output, with its output.
#[derive(Clone, Debug)]
pub struct DecoderState {
    layers: Vec<LayerState>,
    output: Var,
}

/// Pointer-only decoding over source positions. Repeated words are merged
/// into their first position, and the end symbol is forced at the cap.
pub struct ExtractiveDecoder<'m> {
    model: &'m SentenceModel,
    src: &'m SourceView,
    tape: RefCell<Tape<'m>>,
    enc: EncodedSource,
    cap: usize,
}

impl<'m> ExtractiveDecoder<'m> {
    pub fn new(model: &'m SentenceModel, src: &'m SourceView) -> Result<Self> {
        let mut tape = Tape::frozen(&model.store);
        let enc = model.compression.encode(&mut tape, src)?;
        Ok(ExtractiveDecoder {
            model,
            src,
            tape: RefCell::new(tape),
            enc,
            cap: model.max_len(src),
        })
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn words(&self, tokens: &[usize]) -> Vec<String> {
        tokens.iter().map(|&p| self.src.words[p].clone()).collect()
    }
}

impl SearchModel for ExtractiveDecoder<'_> {
    type State = DecoderState;

    fn start(&self) -> Result<DecoderState> {
        let mut tape = self.tape.borrow_mut();
        let init = self.model.compression.initial_state(&mut tape, &self.enc)?;
        let (output, layers) = self.model.compression.step(&mut tape, &init, BOS)?;
        Ok(DecoderState { layers, output })
    }

    fn log_probs(&self, state: &DecoderState, step: usize) -> Result<Vec<f64>> {
        let eos = self.src.eos_position();
        if step >= self.cap {
            let mut forced = vec![f64::NEG_INFINITY; eos + 1];
            forced[eos] = 0.0;
            return Ok(forced);
        }
        let mut tape = self.tape.borrow_mut();
        let lp =
            self.model
                .compression
                .pointer_log_probs(&mut tape, &self.enc, state.output, step)?;
        let lp = tape.value(lp);
        let mut out = vec![f64::NEG_INFINITY; eos + 1];
        for i in self.src.distinct_positions() {
            let class = &self.src.classes;
            out[i] = log_sum_exp((0..eos).filter(|&j| class[j] == i).map(|j| lp[j]));
        }
        out[eos] = lp[eos];
        Ok(out)
    }

    fn advance(&self, state: &DecoderState, symbol: usize) -> Result<DecoderState> {
        let mut tape = self.tape.borrow_mut();
        let input = self.src.compressor_ids[symbol];
        let (output, layers) = self
            .model
            .compression
            .step(&mut tape, &state.layers, input)?;
        Ok(DecoderState { layers, output })
    }

    fn eos(&self) -> usize {
        self.src.eos_position()
    }
}

/// Decoding with the forced-attention mixture. Symbols are compressor
/// vocabulary ids followed by the source's out-of-vocabulary words.
pub struct AbstractiveDecoder<'m> {
    model: &'m SentenceModel,
    src: &'m SourceView,
    tape: RefCell<Tape<'m>>,
    enc: EncodedSource,
    oov_words: Vec<String>,
    cap: usize,
}

impl<'m> AbstractiveDecoder<'m> {
    pub fn new(model: &'m SentenceModel, src: &'m SourceView) -> Result<Self> {
        let mut tape = Tape::frozen(&model.store);
        let enc = model.compression.encode(&mut tape, src)?;
        let vocab = &model.vocabs.compressor;
        let mut oov_words: Vec<String> = Vec::new();
        for w in &src.words {
            if vocab.get(w).is_none() && !oov_words.contains(w) {
                oov_words.push(w.clone());
            }
        }
        Ok(AbstractiveDecoder {
            model,
            src,
            tape: RefCell::new(tape),
            enc,
            oov_words,
            cap: model.max_len(src),
        })
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    fn symbols(&self) -> usize {
        self.model.vocabs.compressor.len() + self.oov_words.len()
    }

    pub fn words(&self, tokens: &[usize]) -> Vec<String> {
        let vocab = &self.model.vocabs.compressor;
        tokens
            .iter()
            .map(|&t| match t.checked_sub(vocab.len()) {
                Some(k) => self.oov_words[k].clone(),
                None => vocab.token(t).to_string(),
            })
            .collect()
    }
}

impl SearchModel for AbstractiveDecoder<'_> {
    type State = DecoderState;

    fn start(&self) -> Result<DecoderState> {
        let mut tape = self.tape.borrow_mut();
        let init = self.model.compression.initial_state(&mut tape, &self.enc)?;
        let (output, layers) = self.model.compression.step(&mut tape, &init, BOS)?;
        Ok(DecoderState { layers, output })
    }

    fn log_probs(&self, state: &DecoderState, step: usize) -> Result<Vec<f64>> {
        if step >= self.cap {
            let mut forced = vec![f64::NEG_INFINITY; self.symbols()];
            forced[EOS] = 0.0;
            return Ok(forced);
        }
        let mut tape = self.tape.borrow_mut();
        let s = self.model.fsc.step(
            &mut tape,
            &self.model.compression,
            &self.enc,
            state.output,
            step,
        )?;
        let dist = combined_distribution(
            tape.value(s.alpha),
            tape.value(s.beta),
            tape.scalar(s.t),
            self.src,
            &self.model.vocabs.compressor,
        );
        debug_assert_eq!(dist.oov_words, self.oov_words);
        let mut out: Vec<f64> = dist.probs.iter().map(|p| p.ln()).collect();
        out[PAD] = f64::NEG_INFINITY;
        out[BOS] = f64::NEG_INFINITY;
        if step == 0 {
            out[EOS] = f64::NEG_INFINITY;
        }
        Ok(out)
    }

    fn advance(&self, state: &DecoderState, symbol: usize) -> Result<DecoderState> {
        let mut tape = self.tape.borrow_mut();
        let input = if symbol < self.model.vocabs.compressor.len() {
            symbol
        } else {
            UNK
        };
        let (output, layers) = self
            .model
            .compression
            .step(&mut tape, &state.layers, input)?;
        Ok(DecoderState { layers, output })
    }

    fn eos(&self) -> usize {
        EOS
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Extractive,
    Abstractive,
}

/// A decoded compression.
#[derive(Clone, Debug, PartialEq)]
pub struct Compression {
    pub words: Vec<String>,
    pub score: f64,
    pub finished: bool,
}

/// Beam-decodes one source sentence; `max_steps` is the cap plus the end step.
pub fn compress(
    model: &SentenceModel,
    src: &SourceView,
    mode: DecodeMode,
    beam_size: usize,
    length_penalty: Option<f64>,
) -> Result<Compression> {
    let steps = model.max_len(src) + 1;
    let cfg = BeamConfig {
        beam_size,
        max_steps: steps,
        length_penalty,
    };
    let (words, result) = match mode {
        DecodeMode::Extractive => {
            let d = ExtractiveDecoder::new(model, src)?;
            let r = beam_search(&d, cfg)?;
            (d.words(&r.best.tokens), r)
        }
        DecodeMode::Abstractive => {
            let d = AbstractiveDecoder::new(model, src)?;
            let r = beam_search(&d, cfg)?;
            (d.words(&r.best.tokens), r)
        }
    };
    Ok(Compression {
        words,
        score: result.best.score,
        finished: !result.unfinished,
    })
}
