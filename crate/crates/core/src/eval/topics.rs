use std::path::Path;

use rand_distr::{Distribution, Exp1};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::EmbeddingVector;
use crate::rng::Rng;

pub const MIN_TOPIC_SENTENCES: usize = 3;

/// Sentences sharing a topic label.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopicSet {
    pub label: String,
    pub sentences: Vec<String>,
}

/// Parses `# label` headers, each followed by one sentence per line. Blank
/// lines are ignored. Every topic needs at least three sentences and labels
/// must be unique.
pub fn parse_topics(text: &str) -> Result<Vec<TopicSet>> {
    let mut topics: Vec<TopicSet> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(label) = line.strip_prefix('#') {
            let label = label.trim();
            if label.is_empty() {
                return Err(Error::Format(format!("line {}: empty topic label", lineno + 1)));
            }
            if topics.iter().any(|t| t.label == label) {
                return Err(Error::Format(format!("line {}: duplicate topic {label:?}", lineno + 1)));
            }
            topics.push(TopicSet {
                label: label.to_string(),
                sentences: Vec::new(),
            });
        } else {
            match topics.last_mut() {
                Some(t) => t.sentences.push(line.to_string()),
                None => return Err(Error::Format(format!("line {}: sentence before any '# topic' header", lineno + 1))),
            }
        }
    }
    if let Some(t) = topics.iter().find(|t| t.sentences.len() < MIN_TOPIC_SENTENCES) {
        return Err(Error::Data(format!(
            "topic {:?} has {} sentences, need at least {MIN_TOPIC_SENTENCES}",
            t.label,
            t.sentences.len()
        )));
    }
    Ok(topics)
}

pub fn read_topics(path: &Path) -> Result<Vec<TopicSet>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_topics(&text).map_err(|e| e.context(format!("reading topics from {}", path.display())))
}

/// `Σ_j w_j e_j`.
pub fn hull_point(vertices: &[EmbeddingVector], weights: &[f64]) -> Result<EmbeddingVector> {
    if vertices.is_empty() || vertices.len() != weights.len() {
        return Err(Error::Shape(format!("{} vertices but {} weights", vertices.len(), weights.len())));
    }
    let d = vertices[0].dim();
    let mut out = vec![0.0; d];
    for (v, &w) in vertices.iter().zip(weights) {
        if v.dim() != d {
            return Err(Error::Shape(format!("vertex of length {} among length {d}", v.dim())));
        }
        out.iter_mut().zip(v.values()).for_each(|(o, x)| *o += w * x);
    }
    Ok(EmbeddingVector(out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HullSample {
    pub weights: Vec<f64>,
    pub embedding: EmbeddingVector,
}

/// Points drawn uniformly from the simplex spanned by `vertices` (flat
/// Dirichlet weights from normalized exponential draws).
pub fn convex_hull_samples(vertices: &[EmbeddingVector], n: usize, rng: &mut Rng) -> Result<Vec<HullSample>> {
    if vertices.len() < 2 {
        return Err(Error::Data(format!("convex hull needs at least 2 vertices, got {}", vertices.len())));
    }
    (0..n)
        .map(|_| {
            let raw: Vec<f64> = vertices.iter().map(|_| Exp1.sample(rng)).collect();
            let total: f64 = raw.iter().sum();
            let weights: Vec<f64> = raw.into_iter().map(|w| w / total).collect();
            Ok(HullSample {
                embedding: hull_point(vertices, &weights)?,
                weights,
            })
        })
        .collect()
}
