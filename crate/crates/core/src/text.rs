//! Text embeddings and vocabularies.
//!
//! Embeddings are treated as data: a toy hash encoder stands in for a frozen
//! text encoder, and [`load_embeddings`] accepts vectors produced elsewhere.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::io::write_atomic;
use crate::rng;
use crate::tensor::{l2_normalize, Tensor};

/// Default online vocabulary size.
pub const DEFAULT_VOCAB_SIZE: usize = 80;

/// `C` nouns with one unit-norm `D`-vector each.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddings {
    nouns: Vec<String>,
    matrix: Tensor,
}

impl TextEmbeddings {
    /// Builds embeddings, normalizing every row.
    pub fn new(nouns: Vec<String>, matrix: &Tensor) -> Result<Self> {
        let (c, _) = matrix.dims2()?;
        if nouns.is_empty() {
            return Err(input_err("empty noun list"));
        }
        if c != nouns.len() {
            return Err(input_err(format!("{} nouns but {c} embedding rows", nouns.len())));
        }
        check_unique(&nouns)?;
        Ok(Self { nouns, matrix: l2_normalize(matrix)? })
    }

    pub fn nouns(&self) -> &[String] {
        &self.nouns
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn len(&self) -> usize {
        self.nouns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nouns.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.last_dim()
    }

    pub fn index_of(&self, noun: &str) -> Option<usize> {
        self.nouns.iter().position(|n| n == noun)
    }

    /// Reorders rows; `order[i]` is the source row of new row `i`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.len() {
            return Err(input_err("permutation length mismatch"));
        }
        let nouns: Vec<String> = order.iter().map(|&i| self.nouns[i].clone()).collect();
        check_unique(&nouns)?;
        let data = order.iter().flat_map(|&i| self.matrix.row(i).to_vec()).collect();
        Ok(Self { nouns, matrix: Tensor::matrix(self.len(), self.dim(), data)? })
    }

    fn to_file(&self) -> EmbeddingsFile {
        EmbeddingsFile {
            dim: self.dim(),
            entries: self
                .nouns
                .iter()
                .zip(self.matrix.rows())
                .map(|(n, v)| EmbeddingEntry { noun: n.clone(), vec: v.to_vec() })
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_file())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: EmbeddingsFile =
            serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        file.try_into()
    }
}

fn check_unique(nouns: &[String]) -> Result<()> {
    let mut seen = HashSet::new();
    match nouns.iter().find(|n| !seen.insert(n.as_str())) {
        Some(dup) => Err(input_err(format!("duplicate noun {dup:?}"))),
        None => Ok(()),
    }
}

/// On-disk embeddings: `{"dim": D, "entries": [{"noun": .., "vec": [..]}]}`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingsFile {
    pub dim: usize,
    pub entries: Vec<EmbeddingEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingEntry {
    pub noun: String,
    pub vec: Vec<f64>,
}

impl TryFrom<EmbeddingsFile> for TextEmbeddings {
    type Error = Error;

    fn try_from(file: EmbeddingsFile) -> Result<Self> {
        if file.entries.is_empty() {
            return Err(Error::Schema("no entries".into()));
        }
        if file.dim < 1 {
            return Err(Error::Schema("dim must be positive".into()));
        }
        let mut nouns = Vec::with_capacity(file.entries.len());
        let mut data = Vec::with_capacity(file.entries.len() * file.dim);
        for e in file.entries {
            if e.vec.len() != file.dim {
                return Err(Error::Schema(format!(
                    "{:?} has {} components, expected {}",
                    e.noun,
                    e.vec.len(),
                    file.dim
                )));
            }
            nouns.push(e.noun);
            data.extend(e.vec);
        }
        let matrix = Tensor::matrix(nouns.len(), file.dim, data)?;
        TextEmbeddings::new(nouns, &matrix)
    }
}

fn noun_seed(noun: &str, seed: u64) -> u64 {
    rng::derive(seed, noun)
}

/// Deterministic stand-in for a text encoder: each noun's bytes are hashed
/// with `seed`, the hash seeds a generator that draws `dim` uniform
/// components, and the result is normalized.
pub fn toy_encode<S: AsRef<str>>(nouns: &[S], dim: usize, seed: u64) -> Result<TextEmbeddings> {
    if dim < 2 {
        return Err(input_err("embedding dim must be at least 2"));
    }
    let nouns: Vec<String> = nouns.iter().map(|n| n.as_ref().to_owned()).collect();
    if nouns.is_empty() {
        return Err(input_err("empty noun list"));
    }
    check_unique(&nouns)?;
    let mut data = Vec::with_capacity(nouns.len() * dim);
    for noun in &nouns {
        let mut r = rng::seeded(noun_seed(noun, seed));
        data.extend((0..dim).map(|_| r.gen_range(-1.0..1.0)));
    }
    TextEmbeddings::new(nouns.clone(), &Tensor::matrix(nouns.len(), dim, data)?)
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<TextEmbeddings> {
    TextEmbeddings::from_json(&std::fs::read_to_string(path)?)
}

/// Writes the offline vocabulary so inference needs no encoder.
pub fn bake_offline_vocabulary(emb: &TextEmbeddings, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, emb.to_json()?.as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub noun: String,
    pub origin: Origin,
}

/// Per-sample training vocabulary: positives first, then sampled negatives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub m: usize,
    pub entries: Vec<VocabEntry>,
    /// Positives cut by the size limit; not serialized.
    #[serde(skip)]
    pub overflow: Vec<String>,
}

impl Vocabulary {
    pub fn nouns(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.noun.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn dedup_in_order<S: AsRef<str>>(items: &[S]) -> Vec<String> {
    let mut seen = HashSet::new();
    items
        .iter()
        .map(AsRef::as_ref)
        .filter(|s| seen.insert(*s))
        .map(str::to_owned)
        .collect()
}

/// Builds the online vocabulary for one training sample.
///
/// All positives are kept (the first `m` if there are more than `m`, with a
/// warning); free slots are filled by uniform sampling without replacement
/// from `negative_pool`.
pub fn build_online_vocabulary<P: AsRef<str>, N: AsRef<str>>(
    positives: &[P],
    negative_pool: &[N],
    m: usize,
    seed: u64,
) -> Result<Vocabulary> {
    if m == 0 {
        return Err(input_err("vocabulary size must be at least 1"));
    }
    let mut pos = dedup_in_order(positives);
    let pool = dedup_in_order(negative_pool);
    if pos.is_empty() && pool.is_empty() {
        return Err(input_err("no positives and no negative pool"));
    }
    let pos_set: HashSet<&str> = pos.iter().map(String::as_str).collect();
    if let Some(shared) = pool.iter().find(|n| pos_set.contains(n.as_str())) {
        return Err(input_err(format!("{shared:?} is both positive and negative")));
    }
    let overflow = if pos.len() > m { pos.split_off(m) } else { Vec::new() };
    if !overflow.is_empty() {
        log::warn!("{} positives exceed vocabulary size {m}; truncating", overflow.len());
    }
    let slots = m - pos.len();
    let mut r = rng::seeded(seed);
    let negatives: Vec<&String> = pool.choose_multiple(&mut r, slots.min(pool.len())).collect();

    let mut entries: Vec<VocabEntry> = pos
        .into_iter()
        .map(|noun| VocabEntry { noun, origin: Origin::Positive })
        .collect();
    entries.extend(
        negatives
            .into_iter()
            .map(|n| VocabEntry { noun: n.clone(), origin: Origin::Negative }),
    );
    Ok(Vocabulary { m, entries, overflow })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{dot, norm};

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("noun{i}")).collect()
    }

    #[test]
    fn toy_encode_is_deterministic_and_unit_norm() {
        let a = toy_encode(&["dog"], 32, 7).unwrap();
        let b = toy_encode(&["dog"], 32, 7).unwrap();
        assert_eq!(a, b);
        let e = toy_encode(&["dog", "cat"], 32, 7).unwrap();
        for r in e.matrix().rows() {
            assert!((norm(r) - 1.0).abs() < 1e-12);
        }
        assert!(dot(e.matrix().row(0), e.matrix().row(1)) < 1.0 - 1e-6);
        assert_eq!(e.matrix().row(0), a.matrix().row(0));
        assert_ne!(toy_encode(&["dog"], 32, 8).unwrap(), a);
    }

    #[test]
    fn toy_encode_rejects_duplicates_and_tiny_dims() {
        assert!(matches!(toy_encode(&["a", "a"], 8, 0), Err(Error::Input(_))));
        assert!(toy_encode(&["a"], 1, 0).is_err());
        assert!(toy_encode::<&str>(&[], 8, 0).is_err());
    }

    #[test]
    fn toy_encode_has_no_near_collisions() {
        let nouns = names(10_000);
        let e = toy_encode(&nouns, 32, 11).unwrap();
        // Bucket by the sign pattern of the first 16 components and compare
        // within buckets only.
        let mut buckets: std::collections::HashMap<u16, Vec<usize>> = Default::default();
        for (i, r) in e.matrix().rows().enumerate() {
            let key = r[..16].iter().enumerate().fold(0u16, |k, (b, &v)| k | (u16::from(v > 0.0) << b));
            buckets.entry(key).or_default().push(i);
        }
        for ids in buckets.values() {
            for (a, &i) in ids.iter().enumerate() {
                for &j in &ids[a + 1..] {
                    let c = dot(e.matrix().row(i), e.matrix().row(j));
                    assert!(c < 1.0 - 1e-6, "{i} and {j} collide");
                }
            }
        }
    }

    #[test]
    fn load_renormalizes_and_rejects_duplicates() {
        let e = TextEmbeddings::from_json(r#"{"dim":2,"entries":[{"noun":"x","vec":[3,4]}]}"#).unwrap();
        assert!((e.matrix().data()[0] - 0.6).abs() < 1e-15);
        assert!((e.matrix().data()[1] - 0.8).abs() < 1e-15);
        let dup = r#"{"dim":2,"entries":[{"noun":"person","vec":[1,0]},{"noun":"person","vec":[0,1]}]}"#;
        assert!(TextEmbeddings::from_json(dup).is_err());
        assert!(matches!(
            TextEmbeddings::from_json(r#"{"dim":3,"entries":[{"noun":"x","vec":[1,0]}]}"#),
            Err(Error::Schema(_))
        ));
        assert!(matches!(TextEmbeddings::from_json("{"), Err(Error::Schema(_))));
        assert!(matches!(
            TextEmbeddings::from_json(r#"{"dim":2,"entries":[{"noun":"x","vec":[0,0]}]}"#),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn bake_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        let e = toy_encode(&names(1203), 16, 3).unwrap();
        bake_offline_vocabulary(&e, &path).unwrap();
        let back = load_embeddings(&path).unwrap();
        assert_eq!(back.nouns(), e.nouns());
        for (a, b) in back.matrix().data().iter().zip(e.matrix().data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(TextEmbeddings::new(vec![], &Tensor::zeros(&[1, 2]).unwrap()).is_err());
    }

    #[test]
    fn online_vocabulary_sizes() {
        let v = build_online_vocabulary(&["a", "b"], &["c", "d", "e"], 4, 1).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.entries[0].noun, "a");
        assert_eq!(v.entries[1].noun, "b");
        assert!(v.entries[2..].iter().all(|e| e.origin == Origin::Negative));

        let pos = names(80);
        let pool: Vec<String> = (0..20).map(|i| format!("neg{i}")).collect();
        let v = build_online_vocabulary(&pos, &pool, 80, 1).unwrap();
        assert_eq!(v.len(), 80);
        assert!(v.entries.iter().all(|e| e.origin == Origin::Positive));

        let v = build_online_vocabulary::<&str, &str>(&["a"], &[], DEFAULT_VOCAB_SIZE, 1).unwrap();
        assert_eq!(v.len(), 1);

        let v = build_online_vocabulary(&names(90), &pool, 80, 1).unwrap();
        assert_eq!(v.len(), 80);
        assert_eq!(v.overflow.len(), 10);
        assert_eq!(v.overflow[0], "noun80");

        assert!(build_online_vocabulary::<&str, &str>(&[], &[], 5, 1).is_err());
        assert!(build_online_vocabulary(&["a"], &["a"], 5, 1).is_err());
        assert!(build_online_vocabulary(&["a"], &["b"], 0, 1).is_err());
    }

    #[test]
    fn online_vocabulary_is_seeded() {
        let pool: Vec<String> = (0..30).map(|i| format!("neg{i}")).collect();
        let a = build_online_vocabulary(&["p"], &pool, 6, 5).unwrap();
        let b = build_online_vocabulary(&["p"], &pool, 6, 5).unwrap();
        let c = build_online_vocabulary(&["p"], &pool, 6, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut seen = HashSet::new();
        assert!(a.nouns().all(|n| seen.insert(n)));
    }

    #[test]
    fn vocabulary_json_shape() {
        let v = build_online_vocabulary(&["a"], &["b"], 2, 0).unwrap();
        assert_eq!(
            serde_json::to_string(&v).unwrap(),
            r#"{"m":2,"entries":[{"noun":"a","origin":"positive"},{"noun":"b","origin":"negative"}]}"#
        );
    }
}
