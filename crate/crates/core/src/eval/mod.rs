mod cluster;
mod metrics;
mod report;
mod spaces;
mod topics;

pub use cluster::{clustering_scores, ClusterScores};
pub use metrics::{
    entropy_estimate, fluency_metrics, jeffreys_approx, max_word_repeat, per_dim_std, EntropyEstimate,
    FluencyMetrics, FluencyScorer, JeffreysEstimate,
};
pub use report::{format_sig6, run_property_suite, PropertyReport, PropertyRow, SuiteConfig, SuiteInputs, REPORT_COLUMNS, REPORT_SCHEMA_VERSION};
pub use spaces::{build_interpolation_space, build_noise_space, InterpolationSpec, NoiseSpec, Provenance, SpacePoint};
pub use topics::{convex_hull_samples, hull_point, parse_topics, read_topics, HullSample, TopicSet, MIN_TOPIC_SENTENCES};

use crate::corpus::{decode_tokens, Sentence, TokenId, Vocab, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{EmbeddingVector, Model};
use crate::tensor::Real;

/// Anchor sentences with their cached embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub sentences: Vec<Sentence>,
    pub embeddings: Vec<EmbeddingVector>,
}

impl EvalSet {
    pub fn new<T: Real>(model: &Model<T>, sentences: Vec<Sentence>) -> Result<Self> {
        let embeddings = embed_all(model, &sentences)?;
        Ok(Self { sentences, embeddings })
    }

    pub fn from_parts(sentences: Vec<Sentence>, embeddings: Vec<EmbeddingVector>) -> Result<Self> {
        if sentences.len() != embeddings.len() {
            return Err(Error::Shape(format!(
                "{} sentences but {} embeddings",
                sentences.len(),
                embeddings.len()
            )));
        }
        if let Some(first) = embeddings.first() {
            if embeddings.iter().any(|e| e.dim() != first.dim()) {
                return Err(Error::Shape("embeddings differ in length".into()));
            }
        }
        Ok(Self { sentences, embeddings })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

pub(crate) fn embed_all<T: Real>(model: &Model<T>, sentences: &[Sentence]) -> Result<Vec<EmbeddingVector>> {
    let ids: Vec<&[TokenId]> = sentences.iter().map(|s| s.ids()).collect();
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(64) {
        out.extend(model.encode_batch(chunk)?);
    }
    Ok(out)
}

/// Turns decoder output into a sentence, dropping any PAD or BOS the model emitted.
pub fn decoded_sentence(vocab: &Vocab, tokens: &[TokenId]) -> Result<Sentence> {
    let mut ids: Vec<TokenId> = tokens.iter().copied().take_while(|&t| t != EOS).filter(|&t| t != PAD && t != BOS).collect();
    ids.push(EOS);
    let text = decode_tokens(vocab, &ids)?;
    Ok(Sentence::from_parts(text, ids))
}
