//! Desk-scale semi-supervised experiment on the synthetic keyword task.
//!
//! A labelled subset trains the forced-attention head; the remaining sources
//! serve as unlabelled data for the auto-encoder. Systems are scored by
//! ROUGE on extractive (pointer-only) beam decodes of a held-out split.

use crate::asc::LanguageModelPrior;
use crate::config::{AdamConfig, Mode, ModelConfig, PriorConfig, TrainingConfig};
use crate::data::{
    generate_synthetic_task, Pair, Sentence, SynthConfig, VocabRole, Vocabularies, Vocabulary,
};
use crate::decode::{compress, DecodeMode};
use crate::error::{Error, Result};
use crate::eval::{rouge_corpus, RougeSummary};
use crate::model::SentenceModel;
use crate::train::{train_prior, PriorTraining, StepMetrics, Trainer, TrainingData};

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub labelled: usize,
    pub unlabelled: usize,
    pub test: usize,
    pub keywords: usize,
    pub noise: usize,
    pub dim: usize,
    pub init_scale: f64,
    pub learning_rate: f64,
    pub baseline_learning_rate: f64,
    pub batch_size: usize,
    pub lambda: f64,
    /// Optimiser steps for every system.
    pub steps: u64,
    /// Leading steps of a joint run spent on the labelled loss alone.
    pub warmup_steps: u64,
    pub unlabelled_per_labelled: usize,
    pub prior_steps: u64,
    pub beam_size: usize,
    /// Seed for the corpus; each system run adds its own.
    pub data_seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            labelled: 2000,
            unlabelled: 20_000,
            test: 500,
            keywords: 400,
            noise: 20,
            dim: 16,
            init_scale: 0.3,
            learning_rate: 3e-2,
            baseline_learning_rate: 5e-2,
            batch_size: 32,
            lambda: 0.1,
            steps: 3000,
            warmup_steps: 0,
            unlabelled_per_labelled: 1,
            prior_steps: 600,
            beam_size: 5,
            data_seed: 7,
        }
    }
}

/// Corpus, vocabularies and pre-trained prior shared by every system.
#[derive(Clone, Debug)]
pub struct ToyTask {
    pub config: ToyConfig,
    pub labelled: Vec<Pair>,
    pub unlabelled: Vec<Sentence>,
    pub test: Vec<Pair>,
    pub vocabs: Vocabularies,
    pub prior: LanguageModelPrior,
}

impl ToyTask {
    /// Generates the corpus and pre-trains the prior on the unlabelled sources.
    pub fn prepare(config: ToyConfig) -> Result<Self> {
        let synth = SynthConfig::with_sizes(
            config.labelled + config.unlabelled,
            config.test,
            config.keywords,
            config.noise,
            config.data_seed,
        );
        let task = generate_synthetic_task(&synth)?;
        let mut train = task.train.labelled;
        let unlabelled: Vec<Sentence> = train
            .split_off(config.labelled)
            .into_iter()
            .map(|p| p.source)
            .collect();
        let labelled = train;
        let big = 1 << 20;
        let vocabs = Vocabularies::build(&labelled, &unlabelled, big, big, big, 1, true)?;
        let lm_vocab = Vocabulary::build(
            unlabelled.iter().flatten().map(String::as_str),
            big,
            1,
            VocabRole::Lm,
        )?;
        let prior_cfg = PriorConfig {
            embed_dim: config.dim,
            hidden_dim: config.dim,
            layers: 1,
            dropout: 0.0,
            vocab_size: lm_vocab.len(),
        };
        let mut prior = LanguageModelPrior::new(prior_cfg, lm_vocab, config.data_seed)?;
        let opts = PriorTraining {
            steps: config.prior_steps,
            batch_size: config.batch_size,
            adam: AdamConfig {
                learning_rate: config.learning_rate,
                ..AdamConfig::default()
            },
            clip_norm: Some(5.0),
            seed: config.data_seed,
        };
        train_prior(&mut prior, &unlabelled, &opts)?;
        Ok(ToyTask {
            config,
            labelled,
            unlabelled,
            test: task.test.labelled,
            vocabs,
            prior,
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            share_embeddings: true,
            init_scale: self.config.init_scale,
            ..ModelConfig::tiny(self.config.dim)
        }
    }

    /// Trains one system on the first `labelled` pairs (plus every unlabelled
    /// source for joint training) and scores it on the test split.
    pub fn run(
        &self,
        mode: Mode,
        labelled: usize,
        seed: u64,
        mut sink: impl FnMut(&StepMetrics),
    ) -> Result<ToyResult> {
        if labelled > self.labelled.len() {
            return Err(Error::invalid(
                "more labelled pairs requested than generated",
            ));
        }
        let model = SentenceModel::new(self.model_config(), self.vocabs.clone(), seed)?;
        let pairs = &self.labelled[..labelled];
        let unlabelled: &[Sentence] = if mode.uses_unlabelled() {
            &self.unlabelled
        } else {
            &[]
        };
        let data = TrainingData::new(&model, pairs, unlabelled)?;
        let cfg = TrainingConfig {
            mode,
            batch_size: self.config.batch_size,
            lambda: self.config.lambda,
            adam: AdamConfig {
                learning_rate: self.config.learning_rate,
                baseline_learning_rate: Some(self.config.baseline_learning_rate),
                ..AdamConfig::default()
            },
            unlabelled_per_labelled: self.config.unlabelled_per_labelled,
            seed,
            ..TrainingConfig::default()
        };
        let prior = mode.uses_unlabelled().then(|| self.prior.clone());
        let warmup = if mode == Mode::Joint {
            self.config.warmup_steps.min(self.config.steps)
        } else {
            0
        };
        let mut trainer = Trainer::new(
            model,
            prior,
            TrainingConfig {
                mode: Mode::FscOnly,
                ..cfg.clone()
            },
        )?;
        trainer.run(&data, warmup, |m| {
            sink(m);
            Ok(())
        })?;
        trainer.config = cfg;
        trainer.run(&data, self.config.steps - warmup, |m| {
            sink(m);
            Ok(())
        })?;
        let rouge = self.score(&trainer.model)?;
        Ok(ToyResult {
            rouge,
            model: trainer.model,
        })
    }

    pub fn score(&self, model: &SentenceModel) -> Result<RougeSummary> {
        let mut candidates = Vec::with_capacity(self.test.len());
        let mut references = Vec::with_capacity(self.test.len());
        for pair in &self.test {
            let src = model.view(&pair.source)?;
            let c = compress(
                model,
                &src,
                DecodeMode::Extractive,
                self.config.beam_size,
                None,
            )?;
            candidates.push(c.words);
            references.push(pair.compression.clone());
        }
        rouge_corpus(&candidates, &references)
    }
}

#[derive(Clone, Debug)]
pub struct ToyResult {
    pub rouge: RougeSummary,
    pub model: SentenceModel,
}
