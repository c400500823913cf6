//! The complete compression model: shared pointer network, forced-attention
//! head, reconstruction decoder and learning-signal baselines in one store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::asc::{CompressionNetwork, ReconstructionNetwork};
use crate::config::ModelConfig;
use crate::data::{SourceView, Vocabularies};
use crate::error::{Error, Result};
use crate::fsc::FscHead;
use crate::tensor::{Group, ParamId, ParamStore};
use crate::train::Baselines;

#[derive(Clone, Debug)]
pub struct SentenceModel {
    pub config: ModelConfig,
    pub vocabs: Vocabularies,
    pub store: ParamStore,
    pub compression: CompressionNetwork,
    pub fsc: FscHead,
    pub reconstruction: ReconstructionNetwork,
    pub baselines: Baselines,
}

impl SentenceModel {
    /// Builds every component with weights drawn from `seed`. Parameter
    /// creation order is fixed, so names and ids are stable across builds.
    pub fn new(config: ModelConfig, vocabs: Vocabularies, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.share_embeddings && vocabs.compressor.tokens() != vocabs.encoder.tokens() {
            return Err(Error::invalid(
                "shared embeddings need the compressor vocabulary to equal the encoder vocabulary",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::with_init_scale(config.init_scale);
        let compression = CompressionNetwork::new(
            &mut store,
            &config,
            vocabs.encoder.len(),
            vocabs.compressor.len(),
            &mut rng,
        )?;
        let fsc = FscHead::new(&mut store, &config, vocabs.compressor.len(), &mut rng);
        let reconstruction =
            ReconstructionNetwork::new(&mut store, &config, vocabs.decoder.len(), &mut rng)?;
        let baselines = Baselines::new(&mut store, &config, &mut rng)?;
        Ok(SentenceModel {
            config,
            vocabs,
            store,
            compression,
            fsc,
            reconstruction,
            baselines,
        })
    }

    pub fn view(&self, words: &[String]) -> Result<SourceView> {
        self.vocabs.view(words)
    }

    /// Compression length cap for a source.
    pub fn max_len(&self, src: &SourceView) -> usize {
        self.config.max_compression_len(src.len())
    }

    pub fn group(&self, group: Group) -> Vec<ParamId> {
        self.store.ids_in(group)
    }
}
