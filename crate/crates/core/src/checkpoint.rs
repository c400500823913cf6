//! Versioned binary checkpoints.
//!
//! Layout: the magic `SVAECKPT`, a little-endian `u32` format version, the
//! body length as `u64`, the SHA-256 of the body, then the body. The body is
//! a run of sections, each a 4-byte tag, a `u64` length and the payload:
//!
//! | tag | payload |
//! |-----|---------|
//! | `MANI` | JSON manifest: kind, step, parameter names, groups and shapes |
//! | `CONF` | JSON model, training and prior configuration |
//! | `VOCB` | JSON vocabularies |
//! | `PARM` | model parameters as raw little-endian `f64`, manifest order |
//! | `ADAM` | per-group step counters, then first and second moments |
//! | `PRIR` | prior parameters as raw little-endian `f64` |

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::asc::LanguageModelPrior;
use crate::config::{ModelConfig, PriorConfig, TrainingConfig};
use crate::data::{Vocabularies, Vocabulary};
use crate::error::{Error, Result};
use crate::model::SentenceModel;
use crate::tensor::{Group, ParamStore};
use crate::train::{Adam, Trainer};

pub const MAGIC: &[u8; 8] = b"SVAECKPT";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Model,
    Prior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    group: Group,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    kind: Kind,
    step: u64,
    params: Vec<ParamEntry>,
    prior_params: Vec<ParamEntry>,
    has_adam: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Configs {
    model: Option<ModelConfig>,
    training: Option<TrainingConfig>,
    prior: Option<PriorConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Vocabs {
    model: Option<Vocabularies>,
    prior: Option<Vocabulary>,
}

/// Everything needed to resume training or to decode.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: SentenceModel,
    pub prior: Option<LanguageModelPrior>,
    pub training: TrainingConfig,
    pub adam: Option<Adam>,
    pub step: u64,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer) -> Self {
        Checkpoint {
            model: trainer.model.clone(),
            prior: trainer.prior.clone(),
            training: trainer.config.clone(),
            adam: Some(trainer.adam.clone()),
            step: trainer.step,
        }
    }

    /// Rebuilds a trainer; fails when the mode needs a prior the checkpoint
    /// does not carry.
    pub fn into_trainer(self) -> Result<Trainer> {
        let mut trainer = Trainer::new(self.model, self.prior, self.training)?;
        if let Some(adam) = self.adam {
            trainer.adam = adam;
        }
        trainer.step = self.step;
        Ok(trainer)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            kind: Kind::Model,
            step: self.step,
            params: entries(&self.model.store),
            prior_params: self
                .prior
                .as_ref()
                .map(|p| entries(&p.store))
                .unwrap_or_default(),
            has_adam: self.adam.is_some(),
        };
        let configs = Configs {
            model: Some(self.model.config.clone()),
            training: Some(self.training.clone()),
            prior: self.prior.as_ref().map(|p| p.config.clone()),
        };
        let vocabs = Vocabs {
            model: Some(self.model.vocabs.clone()),
            prior: self.prior.as_ref().map(|p| p.vocab.clone()),
        };
        let mut sections = vec![
            (*b"MANI", json(&manifest)?),
            (*b"CONF", json(&configs)?),
            (*b"VOCB", json(&vocabs)?),
            (*b"PARM", raw_params(&self.model.store)),
        ];
        if let Some(adam) = &self.adam {
            sections.push((*b"ADAM", raw_adam(adam)));
        }
        if let Some(prior) = &self.prior {
            sections.push((*b"PRIR", raw_params(&prior.store)));
        }
        Ok(write_container(&sections))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let sections = read_container(bytes)?;
        let manifest: Manifest = parse(section(&sections, b"MANI")?)?;
        if manifest.kind != Kind::Model {
            return Err(Error::Checkpoint("file holds a prior, not a model".into()));
        }
        let configs: Configs = parse(section(&sections, b"CONF")?)?;
        let vocabs: Vocabs = parse(section(&sections, b"VOCB")?)?;
        let (Some(model_cfg), Some(training), Some(model_vocabs)) =
            (configs.model, configs.training, vocabs.model)
        else {
            return Err(Error::Checkpoint(
                "model configuration or vocabulary missing".into(),
            ));
        };
        let mut model = SentenceModel::new(model_cfg, model_vocabs, 0)?;
        restore_params(
            &mut model.store,
            &manifest.params,
            section(&sections, b"PARM")?,
        )?;

        let prior = match (configs.prior, vocabs.prior) {
            (Some(cfg), Some(vocab)) => {
                let mut prior = LanguageModelPrior::new(cfg, vocab, 0)?;
                restore_params(
                    &mut prior.store,
                    &manifest.prior_params,
                    section(&sections, b"PRIR")?,
                )?;
                Some(prior)
            }
            (None, None) => None,
            _ => {
                return Err(Error::Checkpoint(
                    "prior configuration and vocabulary disagree".into(),
                ))
            }
        };
        let adam = if manifest.has_adam {
            Some(restore_adam(
                section(&sections, b"ADAM")?,
                &model.store,
                training.adam.clone(),
            )?)
        } else {
            None
        };
        Ok(Checkpoint {
            model,
            prior,
            training,
            adam,
            step: manifest.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Stores a pre-trained prior on its own.
pub fn prior_to_bytes(prior: &LanguageModelPrior) -> Result<Vec<u8>> {
    let manifest = Manifest {
        kind: Kind::Prior,
        step: 0,
        params: Vec::new(),
        prior_params: entries(&prior.store),
        has_adam: false,
    };
    let configs = Configs {
        model: None,
        training: None,
        prior: Some(prior.config.clone()),
    };
    let vocabs = Vocabs {
        model: None,
        prior: Some(prior.vocab.clone()),
    };
    Ok(write_container(&[
        (*b"MANI", json(&manifest)?),
        (*b"CONF", json(&configs)?),
        (*b"VOCB", json(&vocabs)?),
        (*b"PRIR", raw_params(&prior.store)),
    ]))
}

/// Reads a prior from either a prior file or a model checkpoint carrying one.
pub fn prior_from_bytes(bytes: &[u8]) -> Result<LanguageModelPrior> {
    let sections = read_container(bytes)?;
    let manifest: Manifest = parse(section(&sections, b"MANI")?)?;
    let configs: Configs = parse(section(&sections, b"CONF")?)?;
    let vocabs: Vocabs = parse(section(&sections, b"VOCB")?)?;
    let (Some(cfg), Some(vocab)) = (configs.prior, vocabs.prior) else {
        return Err(Error::MissingComponent("language model prior"));
    };
    let mut prior = LanguageModelPrior::new(cfg, vocab, 0)?;
    restore_params(
        &mut prior.store,
        &manifest.prior_params,
        section(&sections, b"PRIR")?,
    )?;
    Ok(prior)
}

pub fn save_prior(path: &Path, prior: &LanguageModelPrior) -> Result<()> {
    std::fs::write(path, prior_to_bytes(prior)?)?;
    Ok(())
}

pub fn load_prior(path: &Path) -> Result<LanguageModelPrior> {
    prior_from_bytes(&std::fs::read(path)?)
}

fn json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    serde_json::to_vec(value).map_err(|e| Error::Checkpoint(format!("encoding: {e}")))
}

fn parse<'a, T: Deserialize<'a>>(bytes: &'a [u8]) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Error::Checkpoint(format!("decoding: {e}")))
}

fn entries(store: &ParamStore) -> Vec<ParamEntry> {
    store
        .iter()
        .map(|(_, p)| ParamEntry {
            name: p.name.clone(),
            group: p.group,
            shape: p.value.shape().to_vec(),
        })
        .collect()
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn raw_params(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    for (_, p) in store.iter() {
        push_f64s(&mut out, p.value.data());
    }
    out
}

fn raw_adam(adam: &Adam) -> Vec<u8> {
    let mut out = Vec::new();
    for s in adam.steps {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for (m, v) in adam.first.iter().zip(&adam.second) {
        push_f64s(&mut out, m);
        push_f64s(&mut out, v);
    }
    out
}

/// Sequential reader over a payload that reports truncation.
struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint("section is truncated".into()));
        };
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, out: &mut [f64]) -> Result<()> {
        let bytes = self.take(out.len() * 8)?;
        for (v, chunk) in out.iter_mut().zip(bytes.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(Error::Checkpoint("section has trailing bytes".into()));
        }
        Ok(())
    }
}

fn restore_params(store: &mut ParamStore, manifest: &[ParamEntry], payload: &[u8]) -> Result<()> {
    let expected = entries(store);
    if expected != manifest {
        return Err(Error::Checkpoint(
            "parameter layout does not match the configuration".into(),
        ));
    }
    let ids: Vec<_> = store.ids().collect();
    let mut r = Reader {
        bytes: payload,
        at: 0,
    };
    for id in ids {
        r.f64s(store.get_mut(id).data_mut())?;
    }
    r.finish()
}

fn restore_adam(
    payload: &[u8],
    store: &ParamStore,
    config: crate::config::AdamConfig,
) -> Result<Adam> {
    let mut adam = Adam::new(config, store);
    let mut r = Reader {
        bytes: payload,
        at: 0,
    };
    for s in &mut adam.steps {
        *s = r.u64()?;
    }
    for (m, v) in adam.first.iter_mut().zip(adam.second.iter_mut()) {
        r.f64s(m)?;
        r.f64s(v)?;
    }
    r.finish()?;
    Ok(adam)
}

fn write_container(sections: &[([u8; 4], Vec<u8>)]) -> Vec<u8> {
    let mut body = Vec::new();
    for (tag, payload) in sections {
        body.extend_from_slice(tag);
        body.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        body.extend_from_slice(payload);
    }
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&body));
    out.extend_from_slice(&body);
    out
}

fn read_container(bytes: &[u8]) -> Result<Vec<([u8; 4], &[u8])>> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let body_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let body = &bytes[HEADER_LEN..];
    if body.len() as u64 != body_len {
        return Err(Error::Checkpoint(format!(
            "integrity check failed: body is {} bytes, header says {body_len}",
            body.len()
        )));
    }
    if Sha256::digest(body)[..] != bytes[20..52] {
        return Err(Error::Checkpoint(
            "integrity check failed: checksum mismatch".into(),
        ));
    }
    let mut r = Reader { bytes: body, at: 0 };
    let mut sections = Vec::new();
    while r.at < body.len() {
        let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
        let len = r.u64()?;
        let len =
            usize::try_from(len).map_err(|_| Error::Checkpoint("section too large".into()))?;
        sections.push((tag, r.take(len)?));
    }
    Ok(sections)
}

fn section<'a>(sections: &[([u8; 4], &'a [u8])], tag: &[u8; 4]) -> Result<&'a [u8]> {
    sections
        .iter()
        .find(|(t, _)| t == tag)
        .map(|(_, s)| *s)
        .ok_or_else(|| {
            Error::Checkpoint(format!("missing section {}", String::from_utf8_lossy(tag)))
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Mode, PriorConfig};
    use crate::data::{Pair, VocabRole};
    use crate::tensor::ParamId;
    use crate::train::TrainingData;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn trainer(mode: Mode, with_prior: bool) -> (Trainer, TrainingData) {
        let pairs = vec![
            Pair {
                source: words("a b c d e"),
                compression: words("a c"),
            },
            Pair {
                source: words("b d f a"),
                compression: words("d a"),
            },
        ];
        let unlabelled = vec![words("e f a b"), words("c c d")];
        let vocabs = Vocabularies::build(&pairs, &unlabelled, 20, 20, 20, 1, false).unwrap();
        let model = SentenceModel::new(ModelConfig::tiny(4), vocabs.clone(), 1).unwrap();
        let prior = with_prior.then(|| {
            let vocab = vocabs.compressor.with_role(VocabRole::Lm);
            let cfg = PriorConfig {
                embed_dim: 4,
                hidden_dim: 4,
                layers: 1,
                dropout: 0.0,
                vocab_size: vocab.len(),
            };
            LanguageModelPrior::new(cfg, vocab, 2).unwrap()
        });
        let cfg = TrainingConfig {
            mode,
            batch_size: 2,
            ..TrainingConfig::default()
        };
        let data = TrainingData::new(&model, &pairs, &unlabelled).unwrap();
        (Trainer::new(model, prior, cfg).unwrap(), data)
    }

    fn bits(store: &ParamStore) -> Vec<u64> {
        let ids: Vec<ParamId> = store.ids().collect();
        store.flatten(&ids).iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (mut t, data) = trainer(Mode::Joint, true);
        t.run(&data, 3, |_| Ok(())).unwrap();
        let ck = Checkpoint::from_trainer(&t);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(bits(&back.model.store), bits(&t.model.store));
        assert_eq!(
            bits(&back.prior.as_ref().unwrap().store),
            bits(&t.prior.as_ref().unwrap().store)
        );
        assert_eq!(back.adam.as_ref().unwrap(), &t.adam);
        assert_eq!(back.step, 3);
        assert_eq!(back.training, t.config);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corruption_and_version_are_rejected() {
        let (t, _) = trainer(Mode::FscOnly, false);
        let bytes = Checkpoint::from_trainer(&t).to_bytes().unwrap();
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 1;
        let err = Checkpoint::from_bytes(&flipped).unwrap_err().to_string();
        assert!(err.contains("integrity"), "{err}");
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 10])
            .unwrap_err()
            .to_string();
        assert!(err.contains("integrity"), "{err}");
        let mut versioned = bytes.clone();
        versioned[8] = 9;
        let err = Checkpoint::from_bytes(&versioned).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
        assert!(Checkpoint::from_bytes(b"nope").is_err());
    }

    #[test]
    fn asc_mode_without_prior_is_a_missing_component() {
        let (t, _) = trainer(Mode::FscOnly, false);
        let mut ck =
            Checkpoint::from_bytes(&Checkpoint::from_trainer(&t).to_bytes().unwrap()).unwrap();
        ck.training.mode = Mode::AscOnly;
        assert!(matches!(
            ck.clone().into_trainer(),
            Err(Error::MissingComponent(_))
        ));
        let bytes = Checkpoint::from_trainer(&t).to_bytes().unwrap();
        assert!(matches!(
            prior_from_bytes(&bytes),
            Err(Error::MissingComponent(_))
        ));
    }

    #[test]
    fn prior_files_round_trip() {
        let (t, _) = trainer(Mode::Joint, true);
        let prior = t.prior.as_ref().unwrap();
        let bytes = prior_to_bytes(prior).unwrap();
        let back = prior_from_bytes(&bytes).unwrap();
        assert_eq!(bits(&back.store), bits(&prior.store));
        assert_eq!(back.vocab, prior.vocab);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        let from_model =
            prior_from_bytes(&Checkpoint::from_trainer(&t).to_bytes().unwrap()).unwrap();
        assert_eq!(bits(&from_model.store), bits(&prior.store));
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let (mut straight, data) = trainer(Mode::Joint, true);
        let mut a = Vec::new();
        straight
            .run(&data, 100, |m| {
                a.push(m.to_tsv());
                Ok(())
            })
            .unwrap();

        let (mut first, data) = trainer(Mode::Joint, true);
        let mut b = Vec::new();
        first
            .run(&data, 40, |m| {
                b.push(m.to_tsv());
                Ok(())
            })
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        Checkpoint::from_trainer(&first).save(&path).unwrap();
        drop(first);
        let mut resumed = Checkpoint::load(&path).unwrap().into_trainer().unwrap();
        resumed
            .run(&data, 60, |m| {
                b.push(m.to_tsv());
                Ok(())
            })
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(bits(&straight.model.store), bits(&resumed.model.store));
    }
}
