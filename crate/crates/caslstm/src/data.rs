//! Vocabulary, labeled examples, batching, and the toy task generators
//! used for desk-scale training runs.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Reserved padding index.
pub const PAD: usize = 0;
/// Reserved unknown-token index.
pub const UNK: usize = 1;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token-to-index map with reserved `PAD` and `UNK` entries. Indices are
/// assigned in insertion order; freezing makes later lookups map unseen
/// tokens to `UNK`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
    frozen: bool,
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: BTreeMap::new(),
            frozen: false,
        };
        v.intern(PAD_TOKEN);
        v.intern(UNK_TOKEN);
        v
    }

    /// Index of `token`, inserting it when unseen. Panics on a frozen
    /// vocabulary; use [`Vocab::index_or_unk`] after freezing.
    pub fn intern(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        assert!(!self.frozen, "cannot grow a frozen vocabulary");
        let i = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), i);
        i
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn index_or_unk(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// All tokens in index order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Rebuilds a vocabulary from an index-ordered token list.
    pub fn from_tokens(tokens: &[String]) -> Result<Self> {
        if tokens.len() < 2 || tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN {
            return Err(Error::InvalidConfig(
                "vocabulary must start with the reserved pad/unk tokens".into(),
            ));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidConfig(alloc::format!(
                    "duplicate vocabulary token {t:?}"
                )));
            }
        }
        Ok(Vocab {
            tokens: tokens.to_vec(),
            index,
            frozen: true,
        })
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

/// A tokenized sentence (or sentence pair) with its class label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledExample {
    pub tokens: Vec<usize>,
    pub tokens2: Option<Vec<usize>>,
    pub label: usize,
}

impl LabeledExample {
    pub fn single(tokens: Vec<usize>, label: usize) -> Self {
        LabeledExample {
            tokens,
            tokens2: None,
            label,
        }
    }

    pub fn pair(tokens: Vec<usize>, tokens2: Vec<usize>, label: usize) -> Self {
        LabeledExample {
            tokens,
            tokens2: Some(tokens2),
            label,
        }
    }
}

/// One padded sentence slot of a batch: an index matrix plus a mask whose
/// `true` region is exactly the non-PAD prefix of each row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedSlot {
    pub tokens: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
}

impl PaddedSlot {
    fn build(seqs: &[&[usize]]) -> Self {
        let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut tokens = Vec::with_capacity(seqs.len());
        let mut mask = Vec::with_capacity(seqs.len());
        for s in seqs {
            let mut row = s.to_vec();
            let mut m = vec![true; s.len()];
            row.resize(width, PAD);
            m.resize(width, false);
            tokens.push(row);
            mask.push(m);
        }
        PaddedSlot { tokens, mask }
    }

    /// The valid (non-PAD) prefix of row `i`.
    pub fn valid_tokens(&self, i: usize) -> Vec<usize> {
        self.tokens[i]
            .iter()
            .zip(&self.mask[i])
            .filter(|(_, &m)| m)
            .map(|(&t, _)| t)
            .collect()
    }
}

/// A shuffled, padded slice of a corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub first: PaddedSlot,
    pub second: Option<PaddedSlot>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Reconstructs example `i` by stripping padding via the mask.
    pub fn example(&self, i: usize) -> LabeledExample {
        LabeledExample {
            tokens: self.first.valid_tokens(i),
            tokens2: self.second.as_ref().map(|s| s.valid_tokens(i)),
            label: self.labels[i],
        }
    }
}

/// Shuffles (seeded) and slices examples into padded batches; no example
/// is dropped.
pub fn make_batches(
    examples: &[LabeledExample],
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    if examples.is_empty() {
        return Err(Error::Empty("example set"));
    }
    let pair = examples[0].tokens2.is_some();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    rng.shuffle(&mut order);

    let mut batches = Vec::with_capacity(examples.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let firsts: Vec<&[usize]> = chunk.iter().map(|&i| examples[i].tokens.as_slice()).collect();
        let second = if pair {
            let seconds: Vec<&[usize]> = chunk
                .iter()
                .map(|&i| {
                    examples[i]
                        .tokens2
                        .as_deref()
                        .expect("pair corpus rows all carry a second sentence")
                })
                .collect();
            Some(PaddedSlot::build(&seconds))
        } else {
            None
        };
        batches.push(Batch {
            first: PaddedSlot::build(&firsts),
            second,
            labels: chunk.iter().map(|&i| examples[i].label).collect(),
        });
    }
    Ok(batches)
}

/// A generated corpus: examples plus the vocabulary and label names they
/// index into.
#[derive(Clone, Debug)]
pub struct ToyCorpus {
    pub vocab: Vocab,
    pub labels: Vec<String>,
    pub examples: Vec<LabeledExample>,
}

fn toy_vocab() -> (Vocab, usize, usize) {
    let mut vocab = Vocab::new();
    let a = vocab.intern("a");
    let b = vocab.intern("b");
    vocab.freeze();
    (vocab, a, b)
}

/// Draws a length-`t` sequence over `{a, b}` whose majority token is
/// `want_a`. Sampling is uniform conditioned on the majority: a uniform
/// draw is flipped wholesale when its majority disagrees, which exactly
/// inverts the majority.
fn majority_sequence(t: usize, want_a: bool, a: usize, b: usize, rng: &mut Rng) -> Vec<usize> {
    let mut seq: Vec<usize> = (0..t).map(|_| if rng.flip() { a } else { b }).collect();
    let count_a = seq.iter().filter(|&&x| x == a).count();
    let has_a_majority = 2 * count_a > t;
    if has_a_majority != want_a {
        for x in seq.iter_mut() {
            *x = if *x == a { b } else { a };
        }
    }
    seq
}

/// Single-sentence majority task: label is the majority token. `t` must be
/// odd so ties cannot occur; classes are exactly balanced by construction.
pub fn gen_majority(n: usize, t: usize, seed: u64) -> Result<ToyCorpus> {
    if t % 2 == 0 {
        return Err(Error::InvalidConfig(alloc::format!(
            "sequence length must be odd to avoid ties, got {t}"
        )));
    }
    let (vocab, a, b) = toy_vocab();
    let mut rng = Rng::new(seed);
    let examples = (0..n)
        .map(|k| {
            let want_a = k % 2 == 0;
            let seq = majority_sequence(t, want_a, a, b, &mut rng);
            LabeledExample::single(seq, usize::from(!want_a))
        })
        .collect();
    Ok(ToyCorpus {
        vocab,
        labels: vec!["a".to_string(), "b".to_string()],
        examples,
    })
}

/// Sentence-pair task: label 1 iff both sequences have the same majority
/// token. Classes are exactly balanced by construction.
pub fn gen_pair_match(n: usize, t: usize, seed: u64) -> Result<ToyCorpus> {
    if t % 2 == 0 {
        return Err(Error::InvalidConfig(alloc::format!(
            "sequence length must be odd to avoid ties, got {t}"
        )));
    }
    let (vocab, a, b) = toy_vocab();
    let mut rng = Rng::new(seed);
    let examples = (0..n)
        .map(|k| {
            let same = k % 2 == 0;
            let first_a = rng.flip();
            let second_a = if same { first_a } else { !first_a };
            let s1 = majority_sequence(t, first_a, a, b, &mut rng);
            let s2 = majority_sequence(t, second_a, a, b, &mut rng);
            LabeledExample::pair(s1, s2, usize::from(same))
        })
        .collect();
    Ok(ToyCorpus {
        vocab,
        labels: vec!["0".to_string(), "1".to_string()],
        examples,
    })
}
