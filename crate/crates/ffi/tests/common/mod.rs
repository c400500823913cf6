use std::path::Path;

use sentvae::checkpoint::Checkpoint;
use sentvae::config::{ModelConfig, TrainingConfig};
use sentvae::data::{Pair, Vocabularies};
use sentvae::model::SentenceModel;

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Writes an untrained tiny model to `path`.
pub fn write_checkpoint(path: &Path) {
    let pairs = vec![
        Pair {
            source: words("the cat sat on the mat"),
            compression: words("cat sat"),
        },
        Pair {
            source: words("a dog ran in the park"),
            compression: words("dog ran"),
        },
    ];
    let unlabelled = vec![words("the bird sang"), words("a fish swam")];
    let vocabs = Vocabularies::build(&pairs, &unlabelled, 50, 50, 50, 1, false).unwrap();
    let model = SentenceModel::new(ModelConfig::tiny(6), vocabs, 3).unwrap();
    let checkpoint = Checkpoint {
        model,
        prior: None,
        training: TrainingConfig::default(),
        adam: None,
        step: 17,
    };
    checkpoint.save(path).unwrap();
}
