//! Task embeddings: ingestion of precomputed vectors, a deterministic stub
//! embedder, description templates and caption-mean task descriptions.
//!
//! Every embedding leaving this module has unit L2 norm. The modality that
//! produced a vector (text, image prototypes, ...) is not tracked beyond the
//! [`EmbeddingSource`] tag; downstream code only sees vectors.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CLASS_NAME: &str = "<class name>";
pub const CLASS_LIST: &str = "<class list>";

/// Single-class retrieval description.
pub const PHOTO_TEMPLATE: &str = "a photo of a <class name>";

/// Richer description naming the member classes of a classification task.
pub const CLASSIFICATION_TEMPLATE: &str = "images of <class name>, covering the classes <class list>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    Ingested,
    Stub,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskEmbedding {
    pub task_id: String,
    pub description: String,
    pub vector: Vec<f32>,
    pub source: EmbeddingSource,
}

impl TaskEmbedding {
    /// Normalizes `vector`; fails on a zero vector.
    pub fn new(
        task_id: impl Into<String>,
        description: impl Into<String>,
        vector: Vec<f32>,
        source: EmbeddingSource,
    ) -> Result<Self> {
        let task_id = task_id.into();
        let vector = normalize(&vector).ok_or_else(|| Error::ZeroVector(task_id.clone()))?;
        Ok(Self {
            task_id,
            description: description.into(),
            vector,
            source,
        })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// L2-normalizes in f64; `None` for zero or non-finite input. Vectors
/// already within 1e-6 of unit norm are returned unchanged, so normalizing
/// twice is bit-stable.
pub fn normalize(v: &[f32]) -> Option<Vec<f32>> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if !(norm.is_finite() && norm > 0.0) {
        return None;
    }
    if (norm - 1.0).abs() <= 1e-6 {
        return Some(v.to_vec());
    }
    Some(v.iter().map(|&x| (x as f64 / norm) as f32).collect())
}

#[derive(Deserialize)]
struct EmbeddingLine {
    task_id: String,
    #[serde(default)]
    description: Option<String>,
    embedding: Vec<f32>,
}

#[derive(Serialize)]
struct EmbeddingLineOut<'a> {
    task_id: &'a str,
    description: &'a str,
    embedding: &'a [f32],
}

/// Parses JSON Lines of `{"task_id", "description"?, "embedding"}`.
/// Blank lines are skipped.
pub fn parse_embeddings(text: &str, path: &Path) -> Result<Vec<TaskEmbedding>> {
    let mut out: Vec<TaskEmbedding> = Vec::new();
    let mut seen = HashSet::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: EmbeddingLine = serde_json::from_str(line).map_err(|e| Error::EmbeddingParse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        let expected = *dim.get_or_insert(parsed.embedding.len());
        if parsed.embedding.len() != expected {
            return Err(Error::EmbeddingDim {
                path: path.to_path_buf(),
                line: line_no,
                expected,
                found: parsed.embedding.len(),
            });
        }
        if !seen.insert(parsed.task_id.clone()) {
            return Err(Error::DuplicateTask {
                path: path.to_path_buf(),
                line: line_no,
                task_id: parsed.task_id,
            });
        }
        out.push(TaskEmbedding::new(
            parsed.task_id,
            parsed.description.unwrap_or_default(),
            parsed.embedding,
            EmbeddingSource::Ingested,
        )?);
    }
    Ok(out)
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Vec<TaskEmbedding>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text, path)
}

pub fn write_embeddings(path: impl AsRef<Path>, embeddings: &[TaskEmbedding]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for e in embeddings {
        text.push_str(&serde_json::to_string(&EmbeddingLineOut {
            task_id: &e.task_id,
            description: &e.description,
            embedding: &e.vector,
        })?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// First eight bytes of SHA-256, little-endian.
pub fn stable_hash(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Deterministic stand-in for a text encoder: `dim` standard normals from a
/// ChaCha8 stream seeded by [`stable_hash`] of `text`, normalized.
pub fn stub_embed(text: &str, dim: usize) -> Result<TaskEmbedding> {
    if text.is_empty() {
        return Err(Error::Parameter("cannot embed empty text".into()));
    }
    if dim < 2 {
        return Err(Error::Parameter(format!("embedding dim {dim} < 2")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(text));
    let raw: Vec<f32> = (0..dim)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v as f32
        })
        .collect();
    TaskEmbedding::new(text, text, raw, EmbeddingSource::Stub)
}

/// Substitutes `<class name>`; the template must contain it.
pub fn apply_template(class_name: &str, template: &str) -> Result<String> {
    apply_template_with_classes(class_name, &[], template)
}

/// Substitutes `<class name>` and, if present, `<class list>` (members
/// joined by `", "`).
pub fn apply_template_with_classes(class_name: &str, classes: &[&str], template: &str) -> Result<String> {
    if !template.contains(CLASS_NAME) {
        return Err(Error::Parameter(format!(
            "template {template:?} has no {CLASS_NAME} placeholder"
        )));
    }
    let mut out = template.replace(CLASS_NAME, class_name);
    if out.contains(CLASS_LIST) {
        if classes.is_empty() {
            return Err(Error::Parameter(format!(
                "template uses {CLASS_LIST} but no classes were given"
            )));
        }
        out = out.replace(CLASS_LIST, &classes.join(", "));
    }
    Ok(out)
}

/// Mean of unit embeddings, renormalized.
pub fn mean_embedding(task_id: &str, embs: &[TaskEmbedding]) -> Result<TaskEmbedding> {
    let first = embs
        .first()
        .ok_or_else(|| Error::Empty("mean_embedding needs at least one embedding".into()))?;
    let dim = first.dim();
    let mut acc = vec![0.0f64; dim];
    for e in embs {
        if e.dim() != dim {
            return Err(Error::shape(format!(
                "mean_embedding: {} has dim {}, expected {dim}",
                e.task_id,
                e.dim()
            )));
        }
        for (a, &v) in acc.iter_mut().zip(&e.vector) {
            *a += v as f64;
        }
    }
    let n = embs.len() as f64;
    let norm = acc.iter().map(|a| (a / n) * (a / n)).sum::<f64>().sqrt();
    if norm < 1e-9 {
        return Err(Error::DegenerateMean(norm));
    }
    let vector = acc.iter().map(|a| (a / n / norm) as f32).collect();
    let description = embs
        .iter()
        .map(|e| e.description.as_str())
        .collect::<Vec<_>>()
        .join(" | ");
    Ok(TaskEmbedding {
        task_id: task_id.to_string(),
        description,
        vector,
        source: first.source,
    })
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}
