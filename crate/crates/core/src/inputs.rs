//! Input batches: real-valued patch vectors or token ids.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, Modality};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::rng::stream;

/// A batch of tokenized inputs, indexed (sample α, token t).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "F: Serialize", deserialize = "F: serde::de::DeserializeOwned"))]
pub enum Batch<F> {
    /// (|D|, T, n_patch) real vectors.
    Vision(Array3<F>),
    /// (|D|, T) token ids below n_vocab.
    Language(Array2<usize>),
}

impl<F: Float> Batch<F> {
    pub fn samples(&self) -> usize {
        match self {
            Batch::Vision(x) => x.shape()[0],
            Batch::Language(ids) => ids.shape()[0],
        }
    }

    pub fn tokens(&self) -> usize {
        match self {
            Batch::Vision(x) => x.shape()[1],
            Batch::Language(ids) => ids.shape()[1],
        }
    }

    /// Number of (sample, token) pairs.
    pub fn positions(&self) -> usize {
        self.samples() * self.tokens()
    }

    pub fn modality(&self) -> Modality {
        match self {
            Batch::Vision(_) => Modality::Vision,
            Batch::Language(_) => Modality::Language,
        }
    }

    pub fn validate(&self, arch: &ArchSpec) -> Result<()> {
        if self.samples() == 0 {
            return Err(Error::EmptyBatch);
        }
        if self.modality() != arch.modality {
            return Err(Error::ShapeMismatch("batch modality does not match architecture".into()));
        }
        if self.tokens() != arch.tokens {
            return Err(Error::ShapeMismatch(format!(
                "batch has {} tokens, architecture expects {}",
                self.tokens(),
                arch.tokens
            )));
        }
        match self {
            Batch::Vision(x) => {
                if x.shape()[2] != arch.n_in {
                    return Err(Error::ShapeMismatch(format!(
                        "patch dim {} != n_patch {}",
                        x.shape()[2],
                        arch.n_in
                    )));
                }
            }
            Batch::Language(ids) => {
                if let Some(&bad) = ids.iter().find(|&&id| id >= arch.n_in) {
                    return Err(Error::ShapeMismatch(format!(
                        "token id {bad} outside vocabulary of size {}",
                        arch.n_in
                    )));
                }
            }
        }
        Ok(())
    }

    /// Standard-normal patch vectors; entries are order one so the input
    /// kernel diagonal sits near 1.
    pub fn random_vision(samples: usize, tokens: usize, n_patch: usize, seed: u64) -> Self {
        let mut rng = stream(seed, "inputs/vision", 0);
        let x = Array3::from_shape_simple_fn((samples, tokens, n_patch), || F::standard_normal(&mut rng));
        Batch::Vision(x)
    }

    /// Token ids drawn uniformly from the vocabulary.
    pub fn random_language(samples: usize, tokens: usize, n_vocab: usize, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = stream(seed, "inputs/language", 0);
        let ids = Array2::from_shape_simple_fn((samples, tokens), || rng.gen_range(0..n_vocab));
        Batch::Language(ids)
    }
}
