//! Gradient estimation and optimisation.
//!
//! The compression parameters get a score-function estimate weighted by the
//! baseline-centred learning signal, the reconstruction parameters get direct
//! gradients of `log p(s|c)`, and the two baselines regress onto the signal.
//! All three are expressed as one surrogate loss per example so a single
//! backward pass fills every group.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::asc::{lower_bound, CompressionSample, EncodedSource, LanguageModelPrior, LowerBound};
use crate::config::{AdamConfig, Mode, ModelConfig, TrainingConfig};
use crate::data::{Pair, Sentence, SourceView};
use crate::error::{Error, Result};
use crate::fsc::fsc_loss;
use crate::model::SentenceModel;
use crate::nn::Mlp;
use crate::tape::{Tape, Var};
use crate::tensor::{GradStore, Group, ParamId, ParamStore, Tensor};

/// Learned scalar `b` and input-dependent `b(s)`.
#[derive(Clone, Debug)]
pub struct Baselines {
    pub bias: ParamId,
    pub mlp: Mlp,
}

impl Baselines {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let bias = store.add_zeros("base.b", Group::Baseline, &[1]);
        let dims = [2 * cfg.hidden_dim + 1, cfg.baseline_hidden, 1];
        let mlp = Mlp::new(store, "base.mlp", Group::Baseline, &dims, rng)?;
        Ok(Baselines { bias, mlp })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.bias];
        p.extend(self.mlp.params());
        p
    }

    /// Mean of the encoder states over the real words, cut from the graph,
    /// followed by the word count. The learning signal grows with sentence
    /// length, which a mean cannot represent.
    pub fn pooled(&self, tape: &mut Tape<'_>, enc: &EncodedSource) -> Result<Var> {
        let n = enc.positions() - 1;
        let mut weights = vec![1.0 / n as f64; n];
        weights.push(0.0);
        let memory = tape.detach(enc.memory);
        let w = tape.constant(Tensor::vector(weights));
        let mean = tape.matvec_t(memory, w)?;
        let len = tape.constant(Tensor::vector(vec![n as f64]));
        tape.concat(&[mean, len])
    }

    /// `b + b(s)` for a pooled sentence representation.
    pub fn evaluate_pooled(&self, tape: &mut Tape<'_>, pooled: Var) -> Result<Var> {
        let b = tape.param(self.bias);
        let bs = self.mlp.forward(tape, pooled)?;
        tape.add(b, bs)
    }

    pub fn evaluate(&self, tape: &mut Tape<'_>, enc: &EncodedSource) -> Result<Var> {
        let pooled = self.pooled(tape, enc)?;
        self.evaluate_pooled(tape, pooled)
    }
}

/// `l(s,c) = log p(s|c) - λ (log q(c|s) - log p(c))`.
pub fn learning_signal(
    reconstruction: f64,
    log_q: f64,
    log_prior: f64,
    lambda: f64,
) -> Result<f64> {
    Ok(lower_bound(reconstruction, log_q, log_prior, lambda)?.estimate)
}

/// Which baseline centres the learning signal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BaselineChoice {
    /// The model's `b + b(s)`, also trained by the regression term.
    Learned,
    /// A constant subtracted from the signal; nothing is regressed.
    Fixed(f64),
}

/// Values behind one single-sample surrogate.
#[derive(Clone, Debug)]
pub struct AscTerms {
    pub sample: CompressionSample,
    pub log_prior: f64,
    /// `estimate` is the learning signal `l`.
    pub bound: LowerBound,
    /// Value subtracted from `l`.
    pub baseline: f64,
}

impl AscTerms {
    pub fn residual(&self) -> f64 {
        self.bound.estimate - self.baseline
    }
}

/// Draws `c ~ q(c|s)` and builds the loss whose gradient is the negated
/// estimator: `-log p(s|c) - (l - b - b(s)) log q(c|s) + (l - b - b(s))²`,
/// with `l` and the weight held constant. The squared term is present only
/// for learned baselines and reaches only their parameters.
#[allow(clippy::too_many_arguments)]
pub fn asc_surrogate<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    model: &SentenceModel,
    prior: &LanguageModelPrior,
    src: &SourceView,
    lambda: f64,
    baseline: BaselineChoice,
    rng: &mut R,
) -> Result<(Var, AscTerms)> {
    let net = &model.compression;
    let enc = net.encode(tape, src)?;
    let (sample, log_q) = net.sample_on_tape(tape, src, &enc, model.max_len(src), rng)?;
    let compressed = net.reencode(tape, &sample.compressor_ids)?;
    let rec = model
        .reconstruction
        .log_prob(tape, &src.decoder_ids, &compressed)?;
    let log_prior = prior.log_prob(&sample.words)?;
    let bound = lower_bound(tape.scalar(rec), sample.log_q, log_prior, lambda)?;
    let l = bound.estimate;

    let (base_value, regression) = match baseline {
        BaselineChoice::Learned => {
            let base = model.baselines.evaluate(tape, &enc)?;
            let residual = tape.rsub_scalar(l, base);
            (tape.scalar(base), Some(tape.square(residual)))
        }
        BaselineChoice::Fixed(b) => (b, None),
    };
    let score = tape.scale(log_q, -(l - base_value));
    let neg_rec = tape.neg(rec);
    let mut loss = tape.add(neg_rec, score)?;
    if let Some(r) = regression {
        loss = tape.add(loss, r)?;
    }
    let terms = AscTerms {
        sample,
        log_prior,
        bound,
        baseline: base_value,
    };
    Ok((loss, terms))
}

/// Gradient of one surrogate. Negating the compression and reconstruction
/// entries gives the single-sample estimate of `∂L/∂φ` and `∂L/∂θ`.
pub fn surrogate_gradient<R: Rng + ?Sized>(
    model: &SentenceModel,
    prior: &LanguageModelPrior,
    src: &SourceView,
    lambda: f64,
    baseline: BaselineChoice,
    rng: &mut R,
) -> Result<(GradStore, AscTerms)> {
    let mut tape = Tape::new(&model.store);
    let (loss, terms) = asc_surrogate(&mut tape, model, prior, src, lambda, baseline, rng)?;
    let mut grads = GradStore::new(&model.store);
    tape.backward(loss)?.accumulate_into(&mut grads);
    Ok((grads, terms))
}

pub const DEFAULT_ENUMERATION_CAP: usize = 100_000;

/// One latent compression with its exact log-probabilities.
#[derive(Clone, Debug)]
pub struct EnumeratedCompression {
    pub words: Vec<String>,
    pub log_q: f64,
    pub reconstruction: f64,
    pub log_prior: f64,
}

/// The scaled lower bound computed by summing over the whole latent space.
#[derive(Clone, Debug)]
pub struct ExactObjective {
    /// `Σ_c q(c|s) (log p(s|c) - λ (log q(c|s) - log p(c)))`.
    pub value: f64,
    /// Gradient of `value` (ascent direction).
    pub gradient: GradStore,
    pub compressions: Vec<EnumeratedCompression>,
}

impl ExactObjective {
    pub fn total_q(&self) -> f64 {
        self.compressions.iter().map(|c| c.log_q.exp()).sum()
    }

    /// `log Σ_c p(c) p(s|c)` over the enumerated support.
    pub fn log_marginal(&self) -> f64 {
        crate::tape::log_sum_exp(
            self.compressions
                .iter()
                .map(|c| c.log_prior + c.reconstruction),
        )
    }
}

/// Exact objective and gradient by enumerating every word sequence the
/// pointer can emit. Rejected when the number of sequences exceeds `cap`.
pub fn enumerate_exact_gradient(
    model: &SentenceModel,
    prior: &LanguageModelPrior,
    src: &SourceView,
    lambda: f64,
    cap: usize,
) -> Result<ExactObjective> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!(
            "lambda {lambda} must be non-negative"
        )));
    }
    let classes = src.distinct_positions();
    let max_len = model.max_len(src);
    let d = classes.len();
    let mut count = 0usize;
    let mut layer = 1usize;
    for _ in 0..max_len {
        layer = layer.saturating_mul(d);
        count = count.saturating_add(layer);
    }
    if count > cap {
        return Err(Error::invalid(format!(
            "{count} latent sequences exceed the enumeration cap of {cap}"
        )));
    }

    let net = &model.compression;
    let mut tape = Tape::new(&model.store);
    let enc = net.encode(&mut tape, src)?;
    let mut terms = Vec::with_capacity(count);
    let mut compressions = Vec::with_capacity(count);
    for len in 1..=max_len {
        let mut digits = vec![0usize; len];
        loop {
            let words: Vec<String> = digits
                .iter()
                .map(|&k| src.words[classes[k]].clone())
                .collect();
            let ids: Vec<usize> = digits
                .iter()
                .map(|&k| src.compressor_ids[classes[k]])
                .collect();
            let log_q = net.log_prob_on_tape(&mut tape, src, &enc, &words, max_len)?;
            let compressed = net.reencode(&mut tape, &ids)?;
            let rec = model
                .reconstruction
                .log_prob(&mut tape, &src.decoder_ids, &compressed)?;
            let log_prior = prior.log_prob(&words)?;
            let kl = tape.add_const(log_q, &[-log_prior])?;
            let kl = tape.scale(kl, lambda);
            let inner = tape.sub(rec, kl)?;
            let weight = tape.exp(log_q);
            terms.push(tape.mul(weight, inner)?);
            compressions.push(EnumeratedCompression {
                words,
                log_q: tape.scalar(log_q),
                reconstruction: tape.scalar(rec),
                log_prior,
            });
            // Odometer increment over the word classes.
            let mut i = len;
            loop {
                if i == 0 {
                    break;
                }
                i -= 1;
                digits[i] += 1;
                if digits[i] < d {
                    break;
                }
                digits[i] = 0;
                if i == 0 {
                    i = usize::MAX;
                    break;
                }
            }
            if i == usize::MAX {
                break;
            }
        }
    }
    let total = tape.sum_scalars(&terms)?;
    let mut gradient = GradStore::new(&model.store);
    tape.backward(total)?.accumulate_into(&mut gradient);
    Ok(ExactObjective {
        value: tape.scalar(total),
        gradient,
        compressions,
    })
}

/// Bias-corrected Adam with one step counter per parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    /// Updates taken so far, indexed by [`Group::tag`].
    pub steps: [u64; 4],
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .iter()
            .map(|(_, p)| vec![0.0; p.value.numel()])
            .collect();
        Adam {
            config,
            first: zeros.clone(),
            second: zeros,
            steps: [0; 4],
        }
    }

    pub fn steps(&self, group: Group) -> u64 {
        self.steps[group.tag() as usize]
    }

    /// Updates every parameter of `group`. A non-finite gradient aborts the
    /// step before anything changes.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradStore, group: Group) -> Result<()> {
        let ids = store.ids_in(group);
        if let Some(&bad) = ids.iter().find(|&&id| !grads.get(id).is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient for {}",
                store.name(bad)
            )));
        }
        let c = &self.config;
        let lr = c.rate(group);
        let t = &mut self.steps[group.tag() as usize];
        *t += 1;
        let correction1 = 1.0 - c.beta1.powi(*t as i32);
        let correction2 = 1.0 - c.beta2.powi(*t as i32);
        for id in ids {
            let g = grads.get(id).data();
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            for (i, p) in store.get_mut(id).data_mut().iter_mut().enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / correction1;
                let v_hat = v[i] / correction2;
                *p -= lr * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` over `ids` to norm at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_global_norm(grads: &mut GradStore, ids: &[ParamId], max_norm: f64) -> f64 {
    let norm = grads.norm(ids);
    if norm > max_norm {
        let k = max_norm / norm;
        for &id in ids {
            for g in grads.get_mut(id).data_mut() {
                *g *= k;
            }
        }
    }
    norm
}

/// Indexed training sets.
#[derive(Clone, Debug, Default)]
pub struct TrainingData {
    pub labelled: Vec<(SourceView, Sentence)>,
    pub unlabelled: Vec<SourceView>,
}

impl TrainingData {
    pub fn new(model: &SentenceModel, labelled: &[Pair], unlabelled: &[Sentence]) -> Result<Self> {
        Ok(TrainingData {
            labelled: labelled
                .iter()
                .map(|p| Ok((model.view(&p.source)?, p.compression.clone())))
                .collect::<Result<_>>()?,
            unlabelled: unlabelled
                .iter()
                .map(|s| model.view(s))
                .collect::<Result<_>>()?,
        })
    }
}

/// Dataset indices for batch `step`: consecutive slices of a per-epoch
/// shuffle, so the schedule depends only on `(seed, step)`.
pub fn batch_indices(len: usize, batch: usize, step: u64, seed: u64) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    let mut perm_epoch = u64::MAX;
    let mut perm: Vec<usize> = Vec::new();
    (0..batch as u64)
        .map(|k| {
            let g = step * batch as u64 + k;
            let epoch = g / len as u64;
            if epoch != perm_epoch {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(epoch);
                perm = (0..len).collect();
                perm.shuffle(&mut rng);
                perm_epoch = epoch;
            }
            perm[(g % len as u64) as usize]
        })
        .collect()
}

/// One record of the metrics stream. Absent terms print as NaN.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    /// Mean single-sample lower-bound estimate on the unlabelled batch.
    pub elbo: Option<f64>,
    /// Mean negative log-likelihood of the labelled batch.
    pub fsc_nll: Option<f64>,
    pub kl_sample: Option<f64>,
    pub mean_clen: Option<f64>,
    /// Mean squared `l - b - b(s)`.
    pub baseline_residual: Option<f64>,
}

impl StepMetrics {
    pub const HEADER: &'static str = "step\telbo\tfsc_nll\tkl_sample\tmean_clen\tbaseline_residual";

    pub fn to_tsv(&self) -> String {
        let f = |x: Option<f64>| x.unwrap_or(f64::NAN).to_string();
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.step,
            f(self.elbo),
            f(self.fsc_nll),
            f(self.kl_sample),
            f(self.mean_clen),
            f(self.baseline_residual)
        )
    }

    /// The joint objective as a quantity to minimise: `F_nll - L̂`.
    pub fn negated_objective(&self) -> f64 {
        self.fsc_nll.unwrap_or(0.0) - self.elbo.unwrap_or(0.0)
    }
}

/// Runs the semi-supervised loop over a model and its optimiser state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: SentenceModel,
    pub prior: Option<LanguageModelPrior>,
    pub config: TrainingConfig,
    pub adam: Adam,
    /// Steps completed; the next step uses this value for its randomness.
    pub step: u64,
}

const UNLABELLED_SALT: u64 = 0x5eed0f1abe11ed;

impl Trainer {
    pub fn new(
        model: SentenceModel,
        prior: Option<LanguageModelPrior>,
        config: TrainingConfig,
    ) -> Result<Self> {
        config.validate()?;
        if config.mode.uses_unlabelled() && prior.is_none() {
            return Err(Error::MissingComponent("language model prior"));
        }
        let adam = Adam::new(config.adam.clone(), &model.store);
        Ok(Trainer {
            model,
            prior,
            config,
            adam,
            step: 0,
        })
    }

    fn groups(&self) -> &'static [Group] {
        match self.config.mode {
            Mode::FscOnly => &[Group::Compression],
            Mode::AscOnly | Mode::Joint => {
                &[Group::Compression, Group::Reconstruction, Group::Baseline]
            }
        }
    }

    /// One optimiser step on explicit batches. Only the batches the mode uses
    /// are read; each of those must be nonempty.
    pub fn train_step(
        &mut self,
        labelled: &[(&SourceView, &[String])],
        unlabelled: &[&SourceView],
    ) -> Result<StepMetrics> {
        let mode = self.config.mode;
        if labelled.is_empty() && unlabelled.is_empty() {
            return Err(Error::invalid("both batches are empty"));
        }
        if mode.uses_labelled() && labelled.is_empty() {
            return Err(Error::invalid(format!(
                "{mode:?} training needs a labelled batch"
            )));
        }
        if mode.uses_unlabelled() && unlabelled.is_empty() {
            return Err(Error::invalid(format!(
                "{mode:?} training needs an unlabelled batch"
            )));
        }

        let mut metrics = StepMetrics {
            step: self.step,
            ..StepMetrics::default()
        };
        let model = &self.model;
        let mut grads = GradStore::new(&model.store);

        if mode.uses_labelled() {
            let mut nll = 0.0;
            let scale = 1.0 / labelled.len() as f64;
            for example in labelled {
                let mut tape = Tape::new(&model.store);
                let loss = fsc_loss(
                    &mut tape,
                    &model.compression,
                    &model.fsc,
                    &model.vocabs.compressor,
                    std::slice::from_ref(example),
                )?;
                nll += tape.scalar(loss) * scale;
                let loss = tape.scale(loss, scale);
                tape.backward(loss)?.accumulate_into(&mut grads);
            }
            metrics.fsc_nll = Some(nll);
        }

        if mode.uses_unlabelled() {
            let prior = self
                .prior
                .as_ref()
                .ok_or(Error::MissingComponent("language model prior"))?;
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            rng.set_stream(self.step);
            let draws = unlabelled.len() * self.config.samples;
            let scale = 1.0 / draws as f64;
            let (mut elbo, mut kl, mut clen, mut resid) = (0.0, 0.0, 0.0, 0.0);
            for src in unlabelled {
                for _ in 0..self.config.samples {
                    let mut tape = Tape::new(&model.store);
                    let (loss, terms) = asc_surrogate(
                        &mut tape,
                        model,
                        prior,
                        src,
                        self.config.lambda,
                        BaselineChoice::Learned,
                        &mut rng,
                    )?;
                    let loss = tape.scale(loss, scale);
                    tape.backward(loss)?.accumulate_into(&mut grads);
                    elbo += terms.bound.estimate * scale;
                    kl += terms.bound.kl_sample * scale;
                    clen += terms.sample.len() as f64 * scale;
                    resid += terms.residual().powi(2) * scale;
                }
            }
            metrics.elbo = Some(elbo);
            metrics.kl_sample = Some(kl);
            metrics.mean_clen = Some(clen);
            metrics.baseline_residual = Some(resid);
        }

        if !grads.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite gradient at step {}",
                self.step
            )));
        }
        let groups = self.groups();
        if let Some(max_norm) = self.config.clip_norm {
            let ids: Vec<ParamId> = groups.iter().flat_map(|&g| self.model.group(g)).collect();
            clip_global_norm(&mut grads, &ids, max_norm);
        }
        for &g in groups {
            self.adam.step(&mut self.model.store, &grads, g)?;
        }
        self.step += 1;
        Ok(metrics)
    }

    /// One step on batches drawn deterministically from `data`.
    pub fn step_on(&mut self, data: &TrainingData) -> Result<StepMetrics> {
        let mode = self.config.mode;
        let b = self.config.batch_size;
        let labelled: Vec<(&SourceView, &[String])> = if mode.uses_labelled() {
            batch_indices(data.labelled.len(), b, self.step, self.config.seed)
                .into_iter()
                .map(|i| (&data.labelled[i].0, data.labelled[i].1.as_slice()))
                .collect()
        } else {
            Vec::new()
        };
        let unlabelled: Vec<&SourceView> = if mode.uses_unlabelled() {
            let bu = b * if mode == Mode::Joint {
                self.config.unlabelled_per_labelled
            } else {
                1
            };
            batch_indices(
                data.unlabelled.len(),
                bu,
                self.step,
                self.config.seed ^ UNLABELLED_SALT,
            )
            .into_iter()
            .map(|i| &data.unlabelled[i])
            .collect()
        } else {
            Vec::new()
        };
        self.train_step(&labelled, &unlabelled)
    }

    /// Runs `steps` more steps, handing every record to `sink`.
    pub fn run<F>(&mut self, data: &TrainingData, steps: u64, mut sink: F) -> Result<()>
    where
        F: FnMut(&StepMetrics) -> Result<()>,
    {
        for _ in 0..steps {
            let m = self.step_on(data)?;
            sink(&m)?;
        }
        Ok(())
    }

    /// Steps per pass over the larger dataset the mode reads.
    pub fn steps_per_epoch(&self, data: &TrainingData) -> u64 {
        let b = self.config.batch_size;
        let mode = self.config.mode;
        let l = if mode.uses_labelled() {
            data.labelled.len().div_ceil(b)
        } else {
            0
        };
        let u = if mode.uses_unlabelled() {
            let bu = b * if mode == Mode::Joint {
                self.config.unlabelled_per_labelled
            } else {
                1
            };
            data.unlabelled.len().div_ceil(bu)
        } else {
            0
        };
        l.max(u).max(1) as u64
    }
}

/// Options for pre-training the language-model prior.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorTraining {
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for PriorTraining {
    fn default() -> Self {
        PriorTraining {
            steps: 1000,
            batch_size: 64,
            adam: AdamConfig::default(),
            clip_norm: Some(5.0),
            seed: 0,
        }
    }
}

/// Maximum-likelihood training of the prior with dropout; returns the
/// per-token negative log-likelihood of every batch.
pub fn train_prior(
    prior: &mut LanguageModelPrior,
    sentences: &[Sentence],
    opts: &PriorTraining,
) -> Result<Vec<f64>> {
    if sentences.is_empty() {
        return Err(Error::invalid("prior training needs at least one sentence"));
    }
    if opts.batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    let encoded: Vec<Vec<usize>> = sentences.iter().map(|s| prior.vocab.encode(s)).collect();
    let mut adam = Adam::new(opts.adam.clone(), &prior.store);
    let ids = prior.store.ids_in(Group::Prior);
    let mut history = Vec::with_capacity(opts.steps as usize);
    for step in 0..opts.steps {
        let batch = batch_indices(encoded.len(), opts.batch_size, step, opts.seed);
        let tokens: usize = batch.iter().map(|&i| encoded[i].len() + 1).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(step);
        let mut grads = GradStore::new(&prior.store);
        let mut nll = 0.0;
        for &i in &batch {
            let mut tape = Tape::new(&prior.store);
            let lp = prior.log_prob_on_tape(&mut tape, &encoded[i], Some(&mut rng))?;
            nll -= tape.scalar(lp);
            let loss = tape.scale(lp, -1.0 / tokens as f64);
            tape.backward(loss)?.accumulate_into(&mut grads);
        }
        if !grads.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite prior gradient at step {step}"
            )));
        }
        if let Some(max_norm) = opts.clip_norm {
            clip_global_norm(&mut grads, &ids, max_norm);
        }
        adam.step(&mut prior.store, &grads, Group::Prior)?;
        history.push(nll / tokens as f64);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PriorConfig;
    use crate::data::{VocabRole, Vocabularies, Vocabulary};
    use crate::gradcheck::finite_diff_check;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn fixture(dim: usize, seed: u64) -> (SentenceModel, LanguageModelPrior) {
        let pairs = vec![
            Pair {
                source: words("the cat sat on the mat"),
                compression: words("cat sat mat"),
            },
            Pair {
                source: words("a dog ran far away"),
                compression: words("dog ran"),
            },
        ];
        let unlabelled = vec![words("the dog sat"), words("a cat ran on")];
        let vocabs = Vocabularies::build(&pairs, &unlabelled, 30, 30, 30, 1, false).unwrap();
        let model = SentenceModel::new(ModelConfig::tiny(dim), vocabs.clone(), seed).unwrap();
        let lm_vocab = vocabs.compressor.with_role(VocabRole::Lm);
        let prior_cfg = PriorConfig {
            embed_dim: dim,
            hidden_dim: dim,
            layers: 1,
            dropout: 0.0,
            vocab_size: lm_vocab.len(),
        };
        let prior = LanguageModelPrior::new(prior_cfg, lm_vocab, seed + 100).unwrap();
        (model, prior)
    }

    #[test]
    fn learning_signal_values() {
        assert_eq!(learning_signal(-3.0, -1.0, -2.0, 0.0).unwrap(), -3.0);
        assert_eq!(learning_signal(-3.0, -2.0, -2.0, 1.0).unwrap(), -3.0);
        let l = learning_signal(-4.5, -1.25, -6.0, 0.1).unwrap();
        assert!((l - (-4.5 - 0.1 * (-1.25 + 6.0))).abs() < 1e-15);
        assert!(learning_signal(0.0, 0.0, 0.0, -0.1).is_err());
    }

    #[test]
    fn signal_from_oracle_log_probs() {
        let (model, prior) = fixture(4, 1);
        let src = model.view(&words("the cat sat on the mat")).unwrap();
        let c = words("cat mat");
        let max_len = model.max_len(&src);
        let log_q = model
            .compression
            .log_prob(&model.store, &src, &c, max_len)
            .unwrap();
        let mut tape = Tape::frozen(&model.store);
        let ids = model.vocabs.compressor.encode(&c);
        let states = model.compression.reencode(&mut tape, &ids).unwrap();
        let rec = model
            .reconstruction
            .log_prob(&mut tape, &src.decoder_ids, &states)
            .unwrap();
        let rec = tape.scalar(rec);
        let lp = prior.log_prob(&c).unwrap();
        let l = learning_signal(rec, log_q, lp, 0.1).unwrap();
        assert!((l - (rec - 0.1 * (log_q - lp))).abs() < 1e-12);
        assert!(l.is_finite() && l < 0.0);
    }

    #[test]
    fn surrogate_partitions_gradients() {
        let (model, prior) = fixture(4, 2);
        let src = model.view(&words("the cat sat on the mat")).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);

        // Reconstruction alone: nothing reaches the compressor or baselines.
        let mut tape = Tape::new(&model.store);
        let enc = model.compression.encode(&mut tape, &src).unwrap();
        let (sample, _) = model
            .compression
            .sample_on_tape(&mut tape, &src, &enc, model.max_len(&src), &mut rng)
            .unwrap();
        let states = model
            .compression
            .reencode(&mut tape, &sample.compressor_ids)
            .unwrap();
        let rec = model
            .reconstruction
            .log_prob(&mut tape, &src.decoder_ids, &states)
            .unwrap();
        let mut g = GradStore::new(&model.store);
        tape.backward(rec).unwrap().accumulate_into(&mut g);
        assert!(g.is_zero(&model.group(Group::Compression)));
        assert!(g.is_zero(&model.group(Group::Baseline)));
        assert!(!g.is_zero(&model.group(Group::Reconstruction)));

        // Baseline regression alone: nothing reaches φ or θ.
        let mut tape = Tape::new(&model.store);
        let enc = model.compression.encode(&mut tape, &src).unwrap();
        let base = model.baselines.evaluate(&mut tape, &enc).unwrap();
        let r = tape.rsub_scalar(-7.0, base);
        let r = tape.square(r);
        let mut g = GradStore::new(&model.store);
        tape.backward(r).unwrap().accumulate_into(&mut g);
        assert!(g.is_zero(&model.group(Group::Compression)));
        assert!(g.is_zero(&model.group(Group::Reconstruction)));
        assert!(!g.is_zero(&model.group(Group::Baseline)));

        // The full surrogate reaches all three.
        let (g, terms) =
            surrogate_gradient(&model, &prior, &src, 0.1, BaselineChoice::Learned, &mut rng)
                .unwrap();
        for group in [Group::Compression, Group::Reconstruction, Group::Baseline] {
            assert!(!g.is_zero(&model.group(group)), "{group:?}");
        }
        assert!(terms.sample.words.iter().all(|w| src.words.contains(w)));
    }

    #[test]
    fn fsc_loss_leaves_decoder_and_baselines_alone() {
        let (model, _) = fixture(4, 3);
        let src = model.view(&words("a dog ran far away")).unwrap();
        let c = words("dog ran");
        let mut tape = Tape::new(&model.store);
        let loss = fsc_loss(
            &mut tape,
            &model.compression,
            &model.fsc,
            &model.vocabs.compressor,
            &[(&src, &c)],
        )
        .unwrap();
        let mut g = GradStore::new(&model.store);
        tape.backward(loss).unwrap().accumulate_into(&mut g);
        assert!(g.is_zero(&model.group(Group::Reconstruction)));
        assert!(g.is_zero(&model.group(Group::Baseline)));
        assert!(!g.is_zero(&model.group(Group::Compression)));
    }

    #[test]
    fn baseline_residual_gradient_check() {
        let (mut model, _) = fixture(4, 4);
        let src = model.view(&words("the cat sat on the mat")).unwrap();
        let ids = model.baselines.params();
        let baselines = model.baselines.clone();
        let compression = model.compression.clone();
        let report = finite_diff_check(
            |t| {
                let enc = compression.encode(t, &src)?;
                let base = baselines.evaluate(t, &enc)?;
                let r = t.rsub_scalar(-3.0, base);
                Ok(t.square(r))
            },
            &mut model.store,
            &ids,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn baselines_regress_to_a_constant_signal() {
        let (mut model, _) = fixture(4, 5);
        let sources = [
            "the cat sat on the mat",
            "a dog ran far away",
            "the dog sat",
            "a cat ran on",
        ];
        let pooled: Vec<Vec<f64>> = sources
            .iter()
            .map(|s| {
                let src = model.view(&words(s)).unwrap();
                let mut tape = Tape::frozen(&model.store);
                let enc = model.compression.encode(&mut tape, &src).unwrap();
                let p = model.baselines.pooled(&mut tape, &enc).unwrap();
                tape.value(p).to_vec()
            })
            .collect();
        let target = -12.5;
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate: 1e-3,
                ..AdamConfig::default()
            },
            &model.store,
        );
        let residual = |model: &SentenceModel| -> f64 {
            let mut tape = Tape::frozen(&model.store);
            pooled
                .iter()
                .map(|p| {
                    let x = tape.constant(Tensor::vector(p.clone()));
                    let b = model.baselines.evaluate_pooled(&mut tape, x).unwrap();
                    (target - tape.scalar(b)).powi(2)
                })
                .sum::<f64>()
                / pooled.len() as f64
        };
        for _ in 0..20_000 {
            let mut grads = GradStore::new(&model.store);
            {
                let mut tape = Tape::new(&model.store);
                for p in &pooled {
                    let x = tape.constant(Tensor::vector(p.clone()));
                    let b = model.baselines.evaluate_pooled(&mut tape, x).unwrap();
                    let r = tape.rsub_scalar(target, b);
                    let r = tape.square(r);
                    let r = tape.scale(r, 0.25);
                    tape.backward(r).unwrap().accumulate_into(&mut grads);
                }
            }
            adam.step(&mut model.store, &grads, Group::Baseline)
                .unwrap();
        }
        let r = residual(&model);
        assert!(r < 1e-4, "residual {r}");
    }

    #[test]
    fn adam_constant_gradient_update_tends_to_learning_rate() {
        let mut store = ParamStore::new();
        let w = store.add("w", Group::Compression, Tensor::vector(vec![1.0, -2.0]));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let mut grads = GradStore::new(&store);
        grads.get_mut(w).data_mut().copy_from_slice(&[0.5, -3.0]);
        let lr = adam.config.learning_rate;
        for _ in 0..1000 {
            let before = store.get(w).data().to_vec();
            adam.step(&mut store, &grads, Group::Compression).unwrap();
            let after = store.get(w).data();
            assert!(((before[0] - after[0]) - lr).abs() < lr * 1e-6);
            assert!(((after[1] - before[1]) - lr).abs() < lr * 1e-6);
        }
        assert_eq!(adam.steps(Group::Compression), 1000);
        assert_eq!(adam.steps(Group::Reconstruction), 0);
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let mut store = ParamStore::new();
        let w = store.add("w", Group::Compression, Tensor::vector(vec![0.3, 0.7]));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let grads = GradStore::new(&store);
        for _ in 0..10 {
            adam.step(&mut store, &grads, Group::Compression).unwrap();
        }
        assert_eq!(store.get(w).data(), &[0.3, 0.7]);
    }

    #[test]
    fn adam_rejects_nan_without_updating() {
        let mut store = ParamStore::new();
        let w = store.add("w", Group::Compression, Tensor::vector(vec![0.3, 0.7]));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let mut grads = GradStore::new(&store);
        grads.get_mut(w).data_mut()[1] = f64::NAN;
        assert!(matches!(
            adam.step(&mut store, &grads, Group::Compression),
            Err(Error::Numerical(_))
        ));
        assert_eq!(store.get(w).data(), &[0.3, 0.7]);
        assert_eq!(adam.steps(Group::Compression), 0);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut store = ParamStore::new();
        let a = store.add("a", Group::Compression, Tensor::vector(vec![0.0, 0.0]));
        let b = store.add("b", Group::Reconstruction, Tensor::vector(vec![0.0]));
        let mut grads = GradStore::new(&store);
        grads.get_mut(a).data_mut().copy_from_slice(&[3.0, 4.0]);
        grads.get_mut(b).data_mut()[0] = 12.0;
        let before = clip_global_norm(&mut grads, &[a, b], 5.0);
        assert_eq!(before, 13.0);
        assert!((grads.norm(&[a, b]) - 5.0).abs() < 1e-12);
        assert!((grads.get(a).data()[0] - 3.0 * 5.0 / 13.0).abs() < 1e-15);
        let untouched = clip_global_norm(&mut grads, &[a, b], 100.0);
        assert!((untouched - 5.0).abs() < 1e-12);
    }

    #[test]
    fn enumeration_is_complete_and_theta_gradient_matches() {
        let (model, prior) = fixture(4, 6);
        let src = model.view(&words("the dog sat")).unwrap();
        let exact =
            enumerate_exact_gradient(&model, &prior, &src, 0.1, DEFAULT_ENUMERATION_CAP).unwrap();
        // 3 classes, cap 2: 3 + 9 sequences.
        assert_eq!(exact.compressions.len(), 12);
        assert!((exact.total_q() - 1.0).abs() < 1e-9);

        // ∂L/∂θ = Σ_c q(c) ∂log p(s|c)/∂θ.
        let theta = model.group(Group::Reconstruction);
        let mut weighted = GradStore::new(&model.store);
        let mut value = 0.0;
        for c in &exact.compressions {
            let mut tape = Tape::new(&model.store);
            let ids = model.vocabs.compressor.encode(&c.words);
            let states = model.compression.reencode(&mut tape, &ids).unwrap();
            let rec = model
                .reconstruction
                .log_prob(&mut tape, &src.decoder_ids, &states)
                .unwrap();
            let mut g = GradStore::new(&model.store);
            tape.backward(rec).unwrap().accumulate_into(&mut g);
            weighted.add_scaled(&g, c.log_q.exp());
            value += c.log_q.exp() * (c.reconstruction - 0.1 * (c.log_q - c.log_prior));
        }
        assert!((value - exact.value).abs() < 1e-10);
        for (a, b) in exact
            .gradient
            .flatten(&theta)
            .iter()
            .zip(weighted.flatten(&theta))
        {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn enumeration_cap_is_enforced() {
        let (model, prior) = fixture(4, 7);
        let src = model.view(&words("the cat sat on the mat")).unwrap();
        // 5 classes, cap 4: 5 + 25 + 125 + 625 = 780 sequences.
        assert!(enumerate_exact_gradient(&model, &prior, &src, 0.1, 779).is_err());
    }

    #[test]
    fn batch_schedule_is_a_pure_function_of_step() {
        let a = batch_indices(10, 4, 3, 9);
        assert_eq!(a, batch_indices(10, 4, 3, 9));
        assert_ne!(a, batch_indices(10, 4, 3, 10));
        let mut epoch: Vec<usize> = (0..5).flat_map(|s| batch_indices(10, 2, s, 1)).collect();
        epoch.sort_unstable();
        assert_eq!(epoch, (0..10).collect::<Vec<_>>());
        assert!(batch_indices(0, 4, 0, 0).is_empty());
    }

    fn training_data(model: &SentenceModel) -> TrainingData {
        let pairs = vec![
            Pair {
                source: words("the cat sat on the mat"),
                compression: words("cat sat mat"),
            },
            Pair {
                source: words("a dog ran far away"),
                compression: words("dog ran"),
            },
        ];
        TrainingData::new(
            model,
            &pairs,
            &[words("the dog sat"), words("a cat ran on")],
        )
        .unwrap()
    }

    fn small_config(mode: Mode) -> TrainingConfig {
        TrainingConfig {
            mode,
            batch_size: 2,
            adam: AdamConfig {
                learning_rate: 1e-2,
                ..AdamConfig::default()
            },
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn joint_step_moves_both_sides() {
        let (model, prior) = fixture(4, 8);
        let data = training_data(&model);
        let w1_before = model.store.get(model.compression.w1).clone();
        let w7_before = model.store.get(model.reconstruction.w7).clone();
        let mut trainer = Trainer::new(model, Some(prior), small_config(Mode::Joint)).unwrap();
        let m = trainer.step_on(&data).unwrap();
        assert!(m.elbo.is_some() && m.fsc_nll.is_some());
        let model = &trainer.model;
        assert_ne!(model.store.get(model.compression.w1), &w1_before);
        assert_ne!(model.store.get(model.reconstruction.w7), &w7_before);
    }

    #[test]
    fn fsc_only_never_touches_the_decoder() {
        let (model, _) = fixture(4, 9);
        let data = training_data(&model);
        let theta = model.group(Group::Reconstruction);
        let before = model.store.flatten(&theta);
        let mut trainer = Trainer::new(model, None, small_config(Mode::FscOnly)).unwrap();
        for _ in 0..3 {
            let m = trainer.step_on(&data).unwrap();
            assert!(m.elbo.is_none() && m.fsc_nll.is_some());
        }
        assert_eq!(trainer.model.store.flatten(&theta), before);
    }

    #[test]
    fn mode_preconditions() {
        let (model, prior) = fixture(4, 10);
        assert!(matches!(
            Trainer::new(model.clone(), None, small_config(Mode::Joint)),
            Err(Error::MissingComponent(_))
        ));
        let data = training_data(&model);
        let mut t = Trainer::new(model, Some(prior), small_config(Mode::Joint)).unwrap();
        let (src, c) = &data.labelled[0];
        assert!(t.train_step(&[(src, c.as_slice())], &[]).is_err());
        assert!(t.train_step(&[], &[&data.unlabelled[0]]).is_err());
        assert!(t.train_step(&[], &[]).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let (model, prior) = fixture(4, 11);
            let data = training_data(&model);
            let mut t = Trainer::new(model, Some(prior), small_config(Mode::Joint)).unwrap();
            let mut lines = Vec::new();
            t.run(&data, 5, |m| {
                lines.push(m.to_tsv());
                Ok(())
            })
            .unwrap();
            let ids: Vec<ParamId> = t.model.store.ids().collect();
            (lines, t.model.store.flatten(&ids))
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(
            pa.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            pb.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn metrics_line_has_six_fields() {
        let m = StepMetrics {
            step: 7,
            fsc_nll: Some(1.5),
            ..StepMetrics::default()
        };
        let line = m.to_tsv();
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 6);
        assert_eq!(fields[0], "7");
        assert_eq!(fields[1], "NaN");
        assert_eq!(fields[2], "1.5");
        assert_eq!(StepMetrics::HEADER.split('\t').count(), 6);
    }

    #[test]
    fn prior_training_lowers_nll() {
        let sentences: Vec<Sentence> = (0..20)
            .map(|i| {
                if i % 2 == 0 {
                    words("x y z")
                } else {
                    words("y z x")
                }
            })
            .collect();
        let vocab = Vocabulary::build(["x", "y", "z"], 10, 1, VocabRole::Lm).unwrap();
        let cfg = PriorConfig {
            embed_dim: 8,
            hidden_dim: 8,
            layers: 2,
            dropout: 0.1,
            vocab_size: vocab.len(),
        };
        let mut prior = LanguageModelPrior::new(cfg, vocab, 0).unwrap();
        let before = prior.log_prob(&words("x y z")).unwrap();
        let opts = PriorTraining {
            steps: 150,
            batch_size: 4,
            adam: AdamConfig {
                learning_rate: 1e-2,
                ..AdamConfig::default()
            },
            ..PriorTraining::default()
        };
        let history = train_prior(&mut prior, &sentences, &opts).unwrap();
        assert!(history.last().unwrap() < &history[0]);
        assert!(prior.log_prob(&words("x y z")).unwrap() > before);
    }
}
