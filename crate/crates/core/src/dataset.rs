//! Images paired with reference captions over a shared vocabulary.

use thiserror::Error;

use crate::features::FeatureRecord;
use crate::vocab::{tokenize, Caption, CaptionError, Vocabulary};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("image {image:?}, reference {index}: {source}")]
    Reference {
        image: String,
        index: usize,
        source: CaptionError,
    },
    #[error("image {0:?} has no references")]
    NoReferences(String),
    #[error("image {image:?} has feature width {actual}, dataset has {expected}")]
    FeatureWidth {
        image: String,
        expected: usize,
        actual: usize,
    },
    #[error("dataset is empty")]
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: FeatureRecord,
    /// Tokenized reference texts, kept verbatim for scoring.
    pub references: Vec<Vec<String>>,
    /// The same references as vocabulary ids (unseen words become `<unk>`).
    pub refs: Vec<Caption>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub max_len: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    /// Encodes raw reference strings against `vocab`.
    pub fn encode(
        vocab: Vocabulary,
        max_len: usize,
        items: Vec<(FeatureRecord, Vec<String>)>,
    ) -> Result<Self, DatasetError> {
        let dim = items.first().ok_or(DatasetError::Empty)?.0.dim();
        let mut examples = Vec::with_capacity(items.len());
        for (features, texts) in items {
            if features.dim() != dim {
                return Err(DatasetError::FeatureWidth {
                    image: features.image_id().to_string(),
                    expected: dim,
                    actual: features.dim(),
                });
            }
            if texts.is_empty() {
                return Err(DatasetError::NoReferences(features.image_id().to_string()));
            }
            let references: Vec<Vec<String>> = texts.iter().map(|t| tokenize(t)).collect();
            let refs = references
                .iter()
                .enumerate()
                .map(|(index, toks)| {
                    Caption::new(vocab.encode(toks), max_len).map_err(|source| DatasetError::Reference {
                        image: features.image_id().to_string(),
                        index,
                        source,
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            examples.push(Example {
                features,
                references,
                refs,
            });
        }
        Ok(Self {
            vocab,
            max_len,
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.examples.first().map_or(0, |e| e.features.dim())
    }

    pub fn caption_count(&self) -> usize {
        self.examples.iter().map(|e| e.refs.len()).sum()
    }

    /// Keeps only the first reference of every image.
    pub fn first_reference_only(&self) -> Self {
        let mut out = self.clone();
        for e in &mut out.examples {
            e.references.truncate(1);
            e.refs.truncate(1);
        }
        out
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            vocab: self.vocab.clone(),
            max_len: self.max_len,
            examples: self.examples[range].to_vec(),
        }
    }
}
