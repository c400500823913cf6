//! Vocabularies, corpora and the synthetic keyword-compression task.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

pub type Sentence = Vec<String>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabRole {
    Encoder,
    Compressor,
    Decoder,
    Lm,
}

/// Token ↔ index map with the four reserved symbols at indices 0–3.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    role: VocabRole,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    role: VocabRole,
    tokens: Vec<String>,
}

impl From<VocabRepr> for Vocabulary {
    fn from(r: VocabRepr) -> Self {
        Vocabulary::from_tokens(r.role, r.tokens)
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        VocabRepr {
            role: v.role,
            tokens: v.tokens,
        }
    }
}

impl Vocabulary {
    fn from_tokens(role: VocabRole, tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            role,
            tokens,
            index,
        }
    }

    /// Ranks tokens by descending frequency, breaking ties lexicographically,
    /// and keeps at most `max_size` entries including the reserved symbols.
    pub fn build<'a, I>(
        stream: I,
        max_size: usize,
        min_count: usize,
        role: VocabRole,
    ) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if max_size <= RESERVED.len() {
            return Err(Error::invalid(format!(
                "vocabulary max_size {max_size} must exceed the {} reserved symbols",
                RESERVED.len()
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut seen_any = false;
        for tok in stream {
            seen_any = true;
            if !RESERVED.contains(&tok) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if !seen_any {
            return Err(Error::invalid(
                "cannot build a vocabulary from an empty stream",
            ));
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
            .take(max_size)
            .collect();
        Ok(Vocabulary::from_tokens(role, tokens))
    }

    /// The `max_size` most frequent entries of this vocabulary (reserved included).
    pub fn prefix(&self, max_size: usize, role: VocabRole) -> Self {
        let n = max_size.max(RESERVED.len()).min(self.tokens.len());
        Vocabulary::from_tokens(role, self.tokens[..n].to_vec())
    }

    pub fn with_role(&self, role: VocabRole) -> Self {
        Vocabulary {
            role,
            ..self.clone()
        }
    }

    pub fn role(&self) -> VocabRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Index of `token`, or `<unk>`.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, sentence: &[S]) -> Vec<usize> {
        sentence.iter().map(|t| self.id(t.as_ref())).collect()
    }
}

/// The three vocabularies a compression model indexes into.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub encoder: Vocabulary,
    pub compressor: Vocabulary,
    pub decoder: Vocabulary,
}

impl Vocabularies {
    /// Encoder vocabulary from every source sentence, decoder vocabulary as its
    /// most frequent prefix, compressor vocabulary from the labelled
    /// compressions (sources when there are none) unless embeddings are shared.
    pub fn build(
        labelled: &[Pair],
        unlabelled: &[Sentence],
        encoder_size: usize,
        compressor_size: usize,
        decoder_size: usize,
        min_count: usize,
        share: bool,
    ) -> Result<Self> {
        let sources = labelled
            .iter()
            .map(|p| &p.source)
            .chain(unlabelled)
            .flat_map(|s| s.iter().map(String::as_str));
        let encoder = Vocabulary::build(sources, encoder_size, min_count, VocabRole::Encoder)?;
        let decoder = encoder.prefix(decoder_size, VocabRole::Decoder);
        let compressor = if share {
            encoder.with_role(VocabRole::Compressor)
        } else if labelled.is_empty() {
            let sources = unlabelled.iter().flat_map(|s| s.iter().map(String::as_str));
            Vocabulary::build(sources, compressor_size, min_count, VocabRole::Compressor)?
        } else {
            let comps = labelled
                .iter()
                .flat_map(|p| p.compression.iter().map(String::as_str));
            Vocabulary::build(comps, compressor_size, min_count, VocabRole::Compressor)?
        };
        Ok(Vocabularies {
            encoder,
            compressor,
            decoder,
        })
    }

    pub fn view(&self, words: &[String]) -> Result<SourceView> {
        SourceView::new(words, self)
    }
}

/// A source sentence indexed into every vocabulary. Pointer positions are
/// `0..len()` for the words plus `len()` for end-of-compression.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceView {
    pub words: Vec<String>,
    pub encoder_ids: Vec<usize>,
    pub compressor_ids: Vec<usize>,
    pub decoder_ids: Vec<usize>,
    /// First position holding the same word as each position.
    pub classes: Vec<usize>,
}

impl SourceView {
    pub fn new(words: &[String], vocabs: &Vocabularies) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::invalid("source sentence is empty"));
        }
        if let Some(w) = words.iter().find(|w| RESERVED[..3].contains(&w.as_str())) {
            return Err(Error::invalid(format!(
                "source contains the reserved token {w}"
            )));
        }
        let mut first: HashMap<&str, usize> = HashMap::new();
        let classes = words
            .iter()
            .enumerate()
            .map(|(i, w)| *first.entry(w.as_str()).or_insert(i))
            .collect();
        Ok(SourceView {
            words: words.to_vec(),
            encoder_ids: vocabs.encoder.encode(words),
            compressor_ids: vocabs.compressor.encode(words),
            decoder_ids: vocabs.decoder.encode(words),
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn eos_position(&self) -> usize {
        self.words.len()
    }

    pub fn positions_of(&self, word: &str) -> Vec<usize> {
        self.words
            .iter()
            .enumerate()
            .filter(|(_, w)| *w == word)
            .map(|(i, _)| i)
            .collect()
    }

    /// Positions that start a distinct word, in source order.
    pub fn distinct_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.classes[i] == i).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub source: Sentence,
    pub compression: Sentence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Labelled pairs and unlabelled sources for one split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub labelled: Vec<Pair>,
    pub unlabelled: Vec<Sentence>,
    pub split: Split,
}

impl Corpus {
    pub fn new(split: Split) -> Self {
        Corpus {
            labelled: Vec::new(),
            unlabelled: Vec::new(),
            split,
        }
    }

    pub fn sources(&self) -> impl Iterator<Item = &Sentence> {
        self.labelled
            .iter()
            .map(|p| &p.source)
            .chain(self.unlabelled.iter())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    /// `source TAB compression` per line.
    PairedTsv,
    /// Two aligned files: sources and compressions.
    ParallelFiles,
    /// One source sentence per line.
    UnlabelledLines,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoadOptions {
    pub mask_digits: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { mask_digits: true }
    }
}

/// Replaces every ASCII digit with `#`.
pub fn mask_digits(token: &str) -> String {
    token
        .chars()
        .map(|c| if c.is_ascii_digit() { '#' } else { c })
        .collect()
}

pub fn tokenize(line: &str, opts: LoadOptions) -> Sentence {
    line.split_whitespace()
        .map(|t| {
            if opts.mask_digits {
                mask_digits(t)
            } else {
                t.to_string()
            }
        })
        .collect()
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::data(path, 0, e.to_string()))?;
    Ok(text.lines().map(str::to_string).collect())
}

pub fn load_corpus(paths: &[PathBuf], format: CorpusFormat, opts: LoadOptions) -> Result<Corpus> {
    let mut corpus = Corpus::new(Split::Train);
    match format {
        CorpusFormat::PairedTsv => {
            for path in paths {
                for (i, line) in read_lines(path)?.iter().enumerate() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    let (src, comp) = line
                        .split_once('\t')
                        .ok_or_else(|| Error::data(path, i + 1, "missing TAB separator"))?;
                    if comp.contains('\t') {
                        return Err(Error::data(path, i + 1, "more than one TAB separator"));
                    }
                    let pair = Pair {
                        source: tokenize(src, opts),
                        compression: tokenize(comp, opts),
                    };
                    if pair.source.is_empty() {
                        return Err(Error::data(path, i + 1, "empty source field"));
                    }
                    if pair.compression.is_empty() {
                        return Err(Error::data(path, i + 1, "empty compression field"));
                    }
                    corpus.labelled.push(pair);
                }
            }
        }
        CorpusFormat::ParallelFiles => {
            let [src_path, comp_path] = paths else {
                return Err(Error::invalid(
                    "parallel-files format needs exactly two paths",
                ));
            };
            let sources = read_lines(src_path)?;
            let comps = read_lines(comp_path)?;
            if sources.len() != comps.len() {
                let line = sources.len().min(comps.len()) + 1;
                let short = if sources.len() < comps.len() {
                    src_path
                } else {
                    comp_path
                };
                return Err(Error::data(
                    short,
                    line,
                    format!(
                        "parallel files misaligned: {} source lines vs {} compression lines",
                        sources.len(),
                        comps.len()
                    ),
                ));
            }
            for (i, (s, c)) in sources.iter().zip(&comps).enumerate() {
                let pair = Pair {
                    source: tokenize(s, opts),
                    compression: tokenize(c, opts),
                };
                if pair.source.is_empty() || pair.compression.is_empty() {
                    let path = if pair.source.is_empty() {
                        src_path
                    } else {
                        comp_path
                    };
                    return Err(Error::data(path, i + 1, "empty sentence"));
                }
                corpus.labelled.push(pair);
            }
        }
        CorpusFormat::UnlabelledLines => {
            for path in paths {
                for line in read_lines(path)? {
                    let s = tokenize(&line, opts);
                    if !s.is_empty() {
                        corpus.unlabelled.push(s);
                    }
                }
            }
        }
    }
    Ok(corpus)
}

pub fn write_paired_tsv(path: &Path, pairs: &[Pair]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for p in pairs {
        writeln!(w, "{}\t{}", p.source.join(" "), p.compression.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_lines(path: &Path, sentences: &[Sentence]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for s in sentences {
        writeln!(w, "{}", s.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub keyword_vocab: Vec<String>,
    pub noise_vocab: Vec<String>,
    pub seed: u64,
}

impl SynthConfig {
    /// Keywords `kw-a, kw-b, ..` and noise words `nz-a, ..`. Names avoid
    /// digits so digit masking leaves them intact.
    pub fn with_sizes(
        n_train: usize,
        n_test: usize,
        keywords: usize,
        noise: usize,
        seed: u64,
    ) -> Self {
        SynthConfig {
            n_train,
            n_test,
            keyword_vocab: (0..keywords)
                .map(|i| format!("kw-{}", letters(i)))
                .collect(),
            noise_vocab: (0..noise).map(|i| format!("nz-{}", letters(i))).collect(),
            seed,
        }
    }
}

/// Bijective base-26 name: 0 → a, 25 → z, 26 → aa.
fn letters(mut i: usize) -> String {
    let mut out = Vec::new();
    loop {
        out.push(b'a' + (i % 26) as u8);
        if i < 26 {
            break;
        }
        i = i / 26 - 1;
    }
    out.reverse();
    String::from_utf8(out).expect("ascii")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticTask {
    pub train: Corpus,
    pub test: Corpus,
}

/// Sources interleave 2–4 distinct keywords with 3–8 noise words; the gold
/// compression is the keyword subsequence in source order.
pub fn generate_synthetic_task(cfg: &SynthConfig) -> Result<SyntheticTask> {
    let keywords: HashSet<&String> = cfg.keyword_vocab.iter().collect();
    if let Some(w) = cfg.noise_vocab.iter().find(|w| keywords.contains(w)) {
        return Err(Error::invalid(format!(
            "keyword and noise vocabularies overlap on `{w}`"
        )));
    }
    if cfg.keyword_vocab.len() < 4 || cfg.noise_vocab.is_empty() {
        return Err(Error::invalid(
            "synthetic task needs at least 4 keywords and 1 noise word",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut make = |n: usize, split: Split| {
        let mut corpus = Corpus::new(split);
        for _ in 0..n {
            corpus.labelled.push(synth_pair(cfg, &mut rng));
        }
        corpus
    };
    let train = make(cfg.n_train, Split::Train);
    let test = make(cfg.n_test, Split::Test);
    Ok(SyntheticTask { train, test })
}

fn synth_pair<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Pair {
    let n_kw = rng.random_range(2..=4);
    let n_noise = rng.random_range(3..=8);
    let kws: Vec<String> = cfg
        .keyword_vocab
        .choose_multiple(rng, n_kw)
        .cloned()
        .collect();
    let mut slots: Vec<bool> = std::iter::repeat_n(true, n_kw)
        .chain(std::iter::repeat_n(false, n_noise))
        .collect();
    slots.shuffle(rng);
    let mut next_kw = kws.iter();
    let source = slots
        .iter()
        .map(|&is_kw| {
            if is_kw {
                next_kw.next().expect("one keyword per slot").clone()
            } else {
                cfg.noise_vocab[rng.random_range(0..cfg.noise_vocab.len())].clone()
            }
        })
        .collect();
    Pair {
        source,
        compression: kws,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn frequency_order() {
        let v = Vocabulary::build(words("a a b"), 6, 1, VocabRole::Encoder).unwrap();
        assert_eq!(v.get("a"), Some(4));
        assert_eq!(v.get("b"), Some(5));
    }

    #[test]
    fn lexicographic_tie_break() {
        let v = Vocabulary::build(words("b a"), 6, 1, VocabRole::Encoder).unwrap();
        assert!(v.get("a").unwrap() < v.get("b").unwrap());
    }

    #[test]
    fn reserved_symbols_fixed() {
        let v = Vocabulary::build(words("x y z"), 10, 1, VocabRole::Lm).unwrap();
        for (i, r) in RESERVED.iter().enumerate() {
            assert_eq!(v.get(r), Some(i));
        }
        assert_eq!(v.id("never-seen"), UNK);
    }

    #[test]
    fn truncation_and_min_count() {
        let v = Vocabulary::build(words("a a a b b c"), 6, 1, VocabRole::Encoder).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("c"), UNK);
        let v = Vocabulary::build(words("a a a b b c"), 10, 2, VocabRole::Encoder).unwrap();
        assert_eq!(v.id("c"), UNK);
        assert_ne!(v.id("b"), UNK);
    }

    #[test]
    fn build_errors() {
        assert!(Vocabulary::build(words("a"), 4, 1, VocabRole::Encoder).is_err());
        assert!(Vocabulary::build(Vec::<&str>::new(), 8, 1, VocabRole::Encoder).is_err());
    }

    #[test]
    fn decoder_prefix_is_subset_of_encoder() {
        let enc =
            Vocabulary::build(words("a a a b b c d d d d"), 100, 1, VocabRole::Encoder).unwrap();
        let dec = enc.prefix(6, VocabRole::Decoder);
        assert_eq!(dec.len(), 6);
        assert_eq!(dec.tokens(), &enc.tokens()[..6]);
        assert_eq!(dec.role(), VocabRole::Decoder);
    }

    #[test]
    fn digit_masking() {
        let s = tokenize("rose 4.2 percent", LoadOptions::default());
        assert_eq!(s.join(" "), "rose #.# percent");
        let s = tokenize("rose 4.2 percent", LoadOptions { mask_digits: false });
        assert_eq!(s.join(" "), "rose 4.2 percent");
    }

    #[test]
    fn paired_tsv_loading_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.tsv");
        fs::write(&p, "a b c\ta c\nd e\te\nf g h\tg\n").unwrap();
        let c = load_corpus(
            std::slice::from_ref(&p),
            CorpusFormat::PairedTsv,
            LoadOptions::default(),
        )
        .unwrap();
        assert_eq!(c.labelled.len(), 3);

        fs::write(&p, "a b c\ta c\nd e\t \n").unwrap();
        let err = load_corpus(&[p], CorpusFormat::PairedTsv, LoadOptions::default()).unwrap_err();
        match err {
            Error::Data { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn parallel_files_misaligned() {
        let dir = tempfile::tempdir().unwrap();
        let s = dir.path().join("s.txt");
        let c = dir.path().join("c.txt");
        fs::write(&s, "a b\nc d\ne f\n").unwrap();
        fs::write(&c, "a\nc\n").unwrap();
        let err =
            load_corpus(&[s, c], CorpusFormat::ParallelFiles, LoadOptions::default()).unwrap_err();
        match err {
            Error::Data { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn synthetic_gold_is_extractive_and_seeded() {
        let cfg = SynthConfig::with_sizes(200, 20, 50, 10, 9);
        let a = generate_synthetic_task(&cfg).unwrap();
        let b = generate_synthetic_task(&cfg).unwrap();
        assert_eq!(a, b);
        for p in a.train.labelled.iter().chain(&a.test.labelled) {
            let kws = p.compression.len();
            assert!((2..=4).contains(&kws));
            assert!((5..=12).contains(&p.source.len()));
            let mut it = p.source.iter();
            for w in &p.compression {
                assert!(it.any(|s| s == w), "gold not an ordered subsequence");
            }
        }
    }

    #[test]
    fn synthetic_names_are_distinct() {
        assert_eq!(letters(0), "a");
        assert_eq!(letters(25), "z");
        assert_eq!(letters(26), "aa");
        assert_eq!(letters(27), "ab");
        let names: HashSet<String> = (0..2000).map(letters).collect();
        assert_eq!(names.len(), 2000);
    }

    #[test]
    fn synthetic_rejects_overlapping_vocabularies() {
        let mut cfg = SynthConfig::with_sizes(1, 1, 10, 3, 0);
        cfg.noise_vocab.push("kw-d".into());
        assert!(generate_synthetic_task(&cfg).is_err());
    }

    #[test]
    fn corpus_round_trip_through_files() {
        let cfg = SynthConfig::with_sizes(30, 0, 20, 5, 1);
        let task = generate_synthetic_task(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tsv");
        write_paired_tsv(&p, &task.train.labelled).unwrap();
        let back = load_corpus(&[p], CorpusFormat::PairedTsv, LoadOptions::default()).unwrap();
        assert_eq!(back.labelled, task.train.labelled);
    }
}
