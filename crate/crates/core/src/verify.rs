//! Self-checks run by `grad-check` and `oracle-check`: finite-difference
//! gradients, estimator unbiasedness against exact enumeration, baseline
//! variance reduction, bound consistency and pointer support.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::asc::LanguageModelPrior;
use crate::config::{Mode, ModelConfig, PriorConfig};
use crate::data::{Pair, SourceView, VocabRole, Vocabularies};
use crate::error::{Error, Result};
use crate::experiment::{ToyConfig, ToyTask};
use crate::fsc::{combined_distribution, fsc_loss};
use crate::gradcheck::{finite_diff_check, redraw_uniform, GradCheckReport};
use crate::model::SentenceModel;
use crate::nn::{BiEncoder, CellKind, Embedding, Linear, LstmCell, Mlp, RnnCell, StackedRnn};
use crate::tape::Tape;
use crate::tensor::{Group, ParamId, ParamStore, Tensor};
use crate::train::{
    enumerate_exact_gradient, surrogate_gradient, BaselineChoice, ExactObjective,
    DEFAULT_ENUMERATION_CAP,
};

/// Words of the tiny instances; with the four reserved tokens every
/// vocabulary has 12 entries.
pub const TINY_WORDS: [&str; 8] = ["ant", "bee", "cat", "dog", "eel", "fox", "gnu", "hen"];

pub const LAYER_EPSILON: f64 = 1e-5;
/// Whole-model losses sit at the roundoff floor with 1e-5.
pub const COMPOSITE_EPSILON: f64 = 3e-4;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

/// Absolute slack for coordinates whose estimator has (near) zero variance.
pub const ZERO_VARIANCE_FLOOR: f64 = 1e-10;

fn words(ws: &[&str]) -> Vec<String> {
    ws.iter().map(|w| w.to_string()).collect()
}

/// A small model and prior over [`TINY_WORDS`] with weights redrawn
/// uniformly in `[-scale, scale]`.
pub fn tiny_model(
    dim: usize,
    seed: u64,
    scale: f64,
) -> Result<(SentenceModel, LanguageModelPrior)> {
    let all = words(&TINY_WORDS);
    let pairs = vec![Pair {
        source: all.clone(),
        compression: all,
    }];
    let vocabs = Vocabularies::build(&pairs, &[], 12, 12, 12, 1, false)?;
    let mut model = SentenceModel::new(ModelConfig::tiny(dim), vocabs, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let ids: Vec<ParamId> = model.store.ids().collect();
    redraw_uniform(&mut model.store, &ids, scale, &mut rng);

    let lm_vocab = model.vocabs.compressor.with_role(VocabRole::Lm);
    let cfg = PriorConfig {
        embed_dim: dim,
        hidden_dim: dim,
        layers: 1,
        dropout: 0.0,
        vocab_size: lm_vocab.len(),
    };
    let mut prior = LanguageModelPrior::new(cfg, lm_vocab, seed + 1)?;
    let ids: Vec<ParamId> = prior.store.ids().collect();
    redraw_uniform(&mut prior.store, &ids, scale, &mut rng);
    Ok((model, prior))
}

/// Random sentence over [`TINY_WORDS`] with a length in `lengths`.
pub fn tiny_sentence<R: Rng + ?Sized>(
    rng: &mut R,
    lengths: std::ops::RangeInclusive<usize>,
) -> Vec<String> {
    let n = rng.random_range(lengths);
    (0..n)
        .map(|_| TINY_WORDS[rng.random_range(0..TINY_WORDS.len())].to_string())
        .collect()
}

#[derive(Clone, Debug)]
pub struct GradientCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

/// Finite-difference checks of every layer type, then of the pointer,
/// forced-attention, reconstruction, baseline and prior losses on a tiny
/// model (8 dimensions, 12-word vocabularies).
pub fn gradient_suite(seed: u64) -> Result<Vec<GradientCase>> {
    let mut cases = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut push = |name, report| cases.push(GradientCase { name, report });

    {
        let mut store = ParamStore::new();
        let e = Embedding::new(&mut store, "e", Group::Compression, 12, 6, &mut rng);
        let w = Tensor::uniform(&[6], 1.0, &mut rng);
        let report = finite_diff_check(
            |t| {
                let mut acc = t.constant(w.clone());
                for i in [1, 5, 1, 11] {
                    let x = e.lookup(t, i)?;
                    let y = t.mul(acc, x)?;
                    acc = t.tanh(y);
                    acc = t.add(acc, x)?;
                }
                Ok(t.sum(acc))
            },
            &mut store,
            &[e.table],
            LAYER_EPSILON,
            GRADIENT_TOLERANCE,
        )?;
        push("embedding", report);
    }
    {
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "c", Group::Compression, 5, 6, &mut rng);
        let ids = [cell.weight, cell.bias];
        redraw_uniform(&mut store, &ids, 1.0, &mut rng);
        let xs: Vec<Tensor> = (0..4)
            .map(|_| Tensor::uniform(&[5], 1.0, &mut rng))
            .collect();
        let report = finite_diff_check(
            |t| {
                let mut h = t.constant(Tensor::zeros(&[6]));
                let mut c = t.constant(Tensor::zeros(&[6]));
                for x in &xs {
                    let xv = t.constant(x.clone());
                    (h, c) = cell.step(t, h, c, xv)?;
                }
                let hc = t.add(h, c)?;
                Ok(t.sum(hc))
            },
            &mut store,
            &ids,
            LAYER_EPSILON,
            GRADIENT_TOLERANCE,
        )?;
        push("lstm cell", report);
    }
    {
        let mut store = ParamStore::new();
        let cell = RnnCell::new(&mut store, "r", Group::Reconstruction, 5, 6, &mut rng);
        let ids = [cell.weight, cell.bias];
        redraw_uniform(&mut store, &ids, 1.0, &mut rng);
        let xs: Vec<Tensor> = (0..4)
            .map(|_| Tensor::uniform(&[5], 1.0, &mut rng))
            .collect();
        let report = finite_diff_check(
            |t| {
                let mut h = t.constant(Tensor::zeros(&[6]));
                for x in &xs {
                    let xv = t.constant(x.clone());
                    h = cell.step(t, h, xv)?;
                }
                Ok(t.sum(h))
            },
            &mut store,
            &ids,
            LAYER_EPSILON,
            GRADIENT_TOLERANCE,
        )?;
        push("elman cell", report);
    }
    {
        let mut store = ParamStore::new();
        let stack = StackedRnn::new(
            &mut store,
            "s",
            Group::Compression,
            CellKind::Lstm,
            3,
            4,
            4,
            true,
            0.0,
            &mut rng,
        )?;
        let ids = stack.params();
        redraw_uniform(&mut store, &ids, 1.0, &mut rng);
        let xs: Vec<Tensor> = (0..3)
            .map(|_| Tensor::uniform(&[4], 1.0, &mut rng))
            .collect();
        let report = finite_diff_check(
            |t| {
                let inputs: Vec<_> = xs.iter().map(|x| t.constant(x.clone())).collect();
                let init = stack.zero_state(t);
                let out = stack.run(t, init, &inputs, None)?;
                let all = t.stack(&out)?;
                Ok(t.sum(all))
            },
            &mut store,
            &ids,
            LAYER_EPSILON,
            GRADIENT_TOLERANCE,
        )?;
        push("stacked lstm with skips", report);
    }
    {
        let mut store = ParamStore::new();
        let mk = |store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng| {
            StackedRnn::new(
                store,
                name,
                Group::Compression,
                CellKind::Lstm,
                2,
                3,
                4,
                true,
                0.0,
                rng,
            )
        };
        let enc = BiEncoder {
            forward: mk(&mut store, "f", &mut rng)?,
            backward: mk(&mut store, "b", &mut rng)?,
        };
        let ids = enc.params();
        redraw_uniform(&mut store, &ids, 1.0, &mut rng);
        let xs: Vec<Tensor> = (0..4)
            .map(|_| Tensor::uniform(&[3], 1.0, &mut rng))
            .collect();
        let w = Tensor::uniform(&[4, 8], 1.0, &mut rng);
        let report = finite_diff_check(
            |t| {
                let inputs: Vec<_> = xs.iter().map(|x| t.constant(x.clone())).collect();
                let h = enc.encode(t, &inputs)?;
                let m = t.stack(&h)?;
                let wv = t.constant(w.clone());
                let z = t.matmul_nt(m, wv)?;
                let z = t.tanh(z);
                Ok(t.sum(z))
            },
            &mut store,
            &ids,
            LAYER_EPSILON,
            GRADIENT_TOLERANCE,
        )?;
        push("bidirectional encoder", report);
    }
    {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", Group::Reconstruction, 5, 3, true, &mut rng);
        let ids = lin.params();
        redraw_uniform(&mut store, &ids, 1.0, &mut rng);
        let x = Tensor::uniform(&[5], 1.0, &mut rng);
        let report = finite_diff_check(
            |t| {
                let xv = t.constant(x.clone());
                let y = lin.forward(t, xv)?;
                let lp = t.log_softmax(y)?;
                t.select(lp, 1)
            },
            &mut store,
            &ids,
            LAYER_EPSILON,
            GRADIENT_TOLERANCE,
        )?;
        push("linear", report);
    }
    {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", Group::Baseline, &[5, 6, 1], &mut rng)?;
        let ids = mlp.params();
        redraw_uniform(&mut store, &ids, 1.0, &mut rng);
        let x = Tensor::uniform(&[5], 1.0, &mut rng);
        let report = finite_diff_check(
            |t| {
                let xv = t.constant(x.clone());
                let y = mlp.forward(t, xv)?;
                Ok(t.square(y))
            },
            &mut store,
            &ids,
            LAYER_EPSILON,
            GRADIENT_TOLERANCE,
        )?;
        push("mlp", report);
    }

    let (mut model, prior) = tiny_model(8, seed, 1.0)?;
    let mut src_rng = ChaCha8Rng::seed_from_u64(seed + 7);
    let source = tiny_sentence(&mut src_rng, 5..=5);
    let target: Vec<String> = vec![source[1].clone(), "hen".to_string(), source[3].clone()];
    let src = model.view(&source)?;
    let cap = model.max_len(&src);

    let SentenceModel {
        store,
        compression,
        fsc,
        reconstruction,
        baselines,
        vocabs,
        ..
    } = &mut model;
    let compression_ids = compression.params();
    let report = finite_diff_check(
        |t| {
            let enc = compression.encode(t, &src)?;
            compression.log_prob_on_tape(t, &src, &enc, &target[..1], cap)
        },
        store,
        &compression_ids,
        COMPOSITE_EPSILON,
        GRADIENT_TOLERANCE,
    )?;
    push("pointer log q", report);

    let mut fsc_ids = compression_ids.clone();
    fsc_ids.extend(fsc.params());
    let report = finite_diff_check(
        |t| fsc_loss(t, compression, fsc, &vocabs.compressor, &[(&src, &target)]),
        store,
        &fsc_ids,
        COMPOSITE_EPSILON,
        GRADIENT_TOLERANCE,
    )?;
    push("forced-attention loss", report);

    let rec_ids = reconstruction.params();
    let latent = [src.compressor_ids[0], src.compressor_ids[2]];
    let report = finite_diff_check(
        |t| {
            let states = compression.reencode(t, &latent)?;
            let lp = reconstruction.log_prob(t, &src.decoder_ids, &states)?;
            Ok(t.neg(lp))
        },
        store,
        &rec_ids,
        COMPOSITE_EPSILON,
        GRADIENT_TOLERANCE,
    )?;
    push("reconstruction loss", report);

    let base_ids = baselines.params();
    let report = finite_diff_check(
        |t| {
            let enc = compression.encode(t, &src)?;
            let b = baselines.evaluate(t, &enc)?;
            let r = t.rsub_scalar(-7.5, b);
            Ok(t.square(r))
        },
        store,
        &base_ids,
        COMPOSITE_EPSILON,
        GRADIENT_TOLERANCE,
    )?;
    push("baseline regression", report);

    let mut prior_store = prior.store.clone();
    let prior_ids: Vec<ParamId> = prior_store.ids().collect();
    let ids = prior.vocab.encode(&target);
    let report = finite_diff_check(
        |t| prior.log_prob_on_tape(t, &ids, None),
        &mut prior_store,
        &prior_ids,
        LAYER_EPSILON,
        GRADIENT_TOLERANCE,
    )?;
    push("prior log p(c)", report);
    Ok(cases)
}

/// Running mean and variance per coordinate.
#[derive(Clone, Debug)]
struct Moments {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Moments {
            n: 0.0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    fn push(&mut self, xs: &[f64]) {
        self.n += 1.0;
        for ((m, s), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(xs) {
            let d = x - *m;
            *m += d / self.n;
            *s += d * (x - *m);
        }
    }

    fn variance(&self, i: usize) -> f64 {
        self.m2[i] / (self.n - 1.0)
    }

    fn standard_error(&self, i: usize) -> f64 {
        (self.variance(i) / self.n).sqrt()
    }

    fn total_variance(&self) -> f64 {
        (0..self.mean.len()).map(|i| self.variance(i)).sum()
    }
}

/// Sample mean of the score-function estimate of the pointer gradient for
/// one tiny instance, compared with the enumerated gradient.
#[derive(Clone, Debug)]
pub struct UnbiasedInstance {
    pub source: Vec<String>,
    pub lambda: f64,
    pub latent_sequences: usize,
    pub coordinates: usize,
    /// Coordinates whose estimate varies across draws.
    pub active: usize,
    /// Coordinates with `|mean - exact| <= 3 SE + ZERO_VARIANCE_FLOOR`.
    pub within: usize,
    /// Largest `|mean - exact| / SE` over coordinates with nonzero SE.
    pub max_z: f64,
}

impl UnbiasedInstance {
    pub fn fraction(&self) -> f64 {
        self.within as f64 / self.coordinates as f64
    }
}

/// Averages `samples` single-sample estimates of `∂L/∂φ` on `instances`
/// seeded tiny models (sources of 3 or 4 words, so at most 3 compression
/// words) and compares each coordinate with exact enumeration.
pub fn unbiasedness(instances: usize, samples: usize, seed: u64) -> Result<Vec<UnbiasedInstance>> {
    if samples < 2 {
        return Err(Error::invalid("need at least two samples"));
    }
    let mut out = Vec::with_capacity(instances);
    for k in 0..instances as u64 {
        let (model, prior) = tiny_model(4, seed + 31 * k, 1.0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k << 20));
        let source = tiny_sentence(&mut rng, 3..=4);
        let lambda = if k % 2 == 0 { 0.1 } else { 1.0 };
        let src = model.view(&source)?;
        let exact =
            enumerate_exact_gradient(&model, &prior, &src, lambda, DEFAULT_ENUMERATION_CAP)?;
        let (active, within, max_z) =
            compare_with_exact(&model, &prior, &src, lambda, &exact, samples, &mut rng)?;
        out.push(UnbiasedInstance {
            source,
            lambda,
            latent_sequences: exact.compressions.len(),
            coordinates: model.store.num_values(&model.compression.params()),
            active,
            within,
            max_z,
        });
    }
    Ok(out)
}

/// `(active, within, max_z)` of the sampled pointer gradient at `lambda`
/// against `exact`.
fn compare_with_exact(
    model: &SentenceModel,
    prior: &LanguageModelPrior,
    src: &SourceView,
    lambda: f64,
    exact: &ExactObjective,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, usize, f64)> {
    let ids = model.compression.params();
    let target = exact.gradient.flatten(&ids);
    let mut moments = Moments::new(target.len());
    for _ in 0..samples {
        let (grads, _) =
            surrogate_gradient(model, prior, src, lambda, BaselineChoice::Learned, rng)?;
        let estimate: Vec<f64> = grads.flatten(&ids).into_iter().map(|g| -g).collect();
        moments.push(&estimate);
    }
    let mut within = 0;
    let mut active = 0;
    let mut max_z: f64 = 0.0;
    for (i, &t) in target.iter().enumerate() {
        let se = moments.standard_error(i);
        let gap = (moments.mean[i] - t).abs();
        if gap <= 3.0 * se + ZERO_VARIANCE_FLOOR {
            within += 1;
        }
        if se > 0.0 {
            active += 1;
            max_z = max_z.max(gap / se);
        }
    }
    Ok((active, within, max_z))
}

/// Summed per-coordinate variance of the pointer-gradient estimate.
#[derive(Clone, Copy, Debug)]
pub struct VarianceComparison {
    pub learned: f64,
    pub zero: f64,
    pub samples: usize,
}

impl VarianceComparison {
    /// `1 - learned / zero`.
    pub fn reduction(&self) -> f64 {
        1.0 - self.learned / self.zero
    }
}

/// Compares trained baselines with a zero baseline, splitting `samples`
/// evenly across `sources` and summing their per-source variances.
pub fn variance_reduction(
    model: &SentenceModel,
    prior: &LanguageModelPrior,
    sources: &[SourceView],
    lambda: f64,
    samples: usize,
    seed: u64,
) -> Result<VarianceComparison> {
    if sources.is_empty() || samples < 2 * sources.len() {
        return Err(Error::invalid(
            "need sources and at least two samples per source",
        ));
    }
    let per = samples / sources.len();
    let ids = model.compression.params();
    let mut totals = [0.0; 2];
    for (choice, total) in [BaselineChoice::Learned, BaselineChoice::Fixed(0.0)]
        .into_iter()
        .zip(&mut totals)
    {
        for (i, src) in sources.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + i as u64);
            let mut moments = Moments::new(model.store.num_values(&ids));
            for _ in 0..per {
                let (grads, _) = surrogate_gradient(model, prior, src, lambda, choice, &mut rng)?;
                moments.push(&grads.flatten(&ids));
            }
            *total += moments.total_variance();
        }
    }
    Ok(VarianceComparison {
        learned: totals[0],
        zero: totals[1],
        samples: per * sources.len(),
    })
}

/// Joint training on a reduced keyword task, stopped part way.
pub struct Snapshot {
    pub model: SentenceModel,
    pub prior: LanguageModelPrior,
    pub sources: Vec<SourceView>,
    pub lambda: f64,
}

pub fn mid_training_snapshot(steps: u64, seed: u64) -> Result<Snapshot> {
    let config = ToyConfig {
        labelled: 100,
        unlabelled: 1000,
        test: 8,
        keywords: 40,
        noise: 10,
        dim: 8,
        init_scale: 0.3,
        steps,
        prior_steps: 200,
        data_seed: seed,
        ..ToyConfig::default()
    };
    let task = ToyTask::prepare(config)?;
    let result = task.run(Mode::Joint, task.labelled.len(), seed, |_| {})?;
    let sources = task
        .test
        .iter()
        .map(|p| result.model.view(&p.source))
        .collect::<Result<Vec<_>>>()?;
    Ok(Snapshot {
        lambda: task.config.lambda,
        model: result.model,
        prior: task.prior,
        sources,
    })
}

/// Enumerated bound against the enumerated marginal and a Monte-Carlo
/// average of the single-sample estimate.
#[derive(Clone, Debug)]
pub struct BoundInstance {
    pub source: Vec<String>,
    pub elbo: f64,
    pub log_marginal: f64,
    pub total_q: f64,
    pub mc_mean: f64,
    pub mc_se: f64,
}

impl BoundInstance {
    pub fn bound_holds(&self) -> bool {
        self.elbo <= self.log_marginal + 1e-9
    }

    pub fn mc_agrees(&self) -> bool {
        (self.mc_mean - self.elbo).abs() <= 3.0 * self.mc_se
    }
}

/// Runs at λ = 1, where the enumerated objective is the usual evidence
/// lower bound.
pub fn lower_bound_consistency(
    instances: usize,
    samples: usize,
    seed: u64,
) -> Result<Vec<BoundInstance>> {
    let mut out = Vec::with_capacity(instances);
    for k in 0..instances as u64 {
        let (model, prior) = tiny_model(4, seed + 17 * k, 1.0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k << 24));
        let source = tiny_sentence(&mut rng, 2..=4);
        let src = model.view(&source)?;
        let exact = enumerate_exact_gradient(&model, &prior, &src, 1.0, DEFAULT_ENUMERATION_CAP)?;
        let mut moments = Moments::new(1);
        for _ in 0..samples {
            let mut tape = Tape::frozen(&model.store);
            let net = &model.compression;
            let enc = net.encode(&mut tape, &src)?;
            let (sample, _) =
                net.sample_on_tape(&mut tape, &src, &enc, model.max_len(&src), &mut rng)?;
            let states = net.reencode(&mut tape, &sample.compressor_ids)?;
            let rec = model
                .reconstruction
                .log_prob(&mut tape, &src.decoder_ids, &states)?;
            let log_prior = prior.log_prob(&sample.words)?;
            let bound = crate::asc::lower_bound(tape.scalar(rec), sample.log_q, log_prior, 1.0)?;
            moments.push(&[bound.estimate]);
        }
        out.push(BoundInstance {
            source,
            elbo: exact.value,
            log_marginal: exact.log_marginal(),
            total_q: exact.total_q(),
            mc_mean: moments.mean[0],
            mc_se: moments.standard_error(0),
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SupportReport {
    pub trials: usize,
    pub out_of_source: usize,
    /// Largest `|Σ p - 1|` of the combined distribution over checked steps.
    pub max_mass_error: f64,
    pub steps_checked: usize,
}

/// Each trial draws a source (possibly with out-of-vocabulary words),
/// samples a compression from the pointer and checks the combined
/// distribution at every step along it. A fresh random model is built every
/// `trials_per_model` trials.
pub fn support_trials(trials: usize, trials_per_model: usize, seed: u64) -> Result<SupportReport> {
    let mut report = SupportReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extra = ["yak", "zebu"];
    let mut current: Option<SentenceModel> = None;
    for trial in 0..trials {
        if trial % trials_per_model.max(1) == 0 {
            let scale = rng.random_range(0.1..2.0);
            current = Some(tiny_model(4, seed + trial as u64, scale)?.0);
        }
        let Some(model) = current.as_ref() else {
            unreachable!()
        };
        let mut source = tiny_sentence(&mut rng, 1..=6);
        if rng.random_bool(0.3) {
            let at = rng.random_range(0..=source.len());
            source.insert(at, extra[rng.random_range(0..extra.len())].to_string());
        }
        let src = model.view(&source)?;
        let net = &model.compression;
        let mut tape = Tape::frozen(&model.store);
        let enc = net.encode(&mut tape, &src)?;
        let (sample, _) =
            net.sample_on_tape(&mut tape, &src, &enc, model.max_len(&src), &mut rng)?;
        let inside = sample
            .positions
            .iter()
            .zip(&sample.words)
            .all(|(&p, w)| p < src.len() && src.words[p] == *w);
        if !inside || sample.words.iter().any(|w| !source.contains(w)) {
            report.out_of_source += 1;
        }
        let mut state = net.initial_state(&mut tape, &enc)?;
        let mut input = crate::data::BOS;
        for j in 0..=sample.len().min(model.max_len(&src) - 1) {
            let (h, next) = net.step(&mut tape, &state, input)?;
            let step = model.fsc.step(&mut tape, net, &enc, h, j)?;
            let dist = combined_distribution(
                tape.value(step.alpha),
                tape.value(step.beta),
                tape.scalar(step.t),
                &src,
                &model.vocabs.compressor,
            );
            report.max_mass_error = report.max_mass_error.max((dist.total() - 1.0).abs());
            report.steps_checked += 1;
            if j < sample.len() {
                input = sample.compressor_ids[j];
                state = next;
            }
        }
        report.trials += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_suite_passes() {
        for case in gradient_suite(3).unwrap() {
            assert!(case.report.passed(), "{}\n{}", case.name, case.report);
        }
    }

    #[test]
    fn small_unbiasedness_run() {
        for inst in unbiasedness(2, 4000, 5).unwrap() {
            assert!(inst.fraction() >= 0.95, "{inst:?}");
        }
    }

    #[test]
    fn comparison_rejects_a_mismatched_signal() {
        let (model, prior) = tiny_model(4, 8, 1.0).unwrap();
        let src = model.view(&words(&["ant", "cat", "dog", "ant"])).unwrap();
        let exact =
            enumerate_exact_gradient(&model, &prior, &src, 0.1, DEFAULT_ENUMERATION_CAP).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (active, within, max_z) =
            compare_with_exact(&model, &prior, &src, 1.0, &exact, 20_000, &mut rng).unwrap();
        let coordinates = model.store.num_values(&model.compression.params());
        assert!(active > 0 && max_z > 10.0, "{max_z}");
        assert!(
            (within as f64) < 0.9 * coordinates as f64,
            "{within}/{coordinates}"
        );
    }

    #[test]
    fn bound_and_support_on_small_runs() {
        for b in lower_bound_consistency(3, 2000, 2).unwrap() {
            assert!(b.bound_holds() && (b.total_q - 1.0).abs() < 1e-9, "{b:?}");
        }
        let s = support_trials(300, 50, 1).unwrap();
        assert_eq!(s.out_of_source, 0);
        assert!(s.max_mass_error < 1e-9);
    }
}
