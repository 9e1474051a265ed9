use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde_json::Value;

use super::{
    ExpertEntry, Repository, RepositoryManifest, TaskRecord, EMBEDDINGS_FILE, MANIFEST_FILE, MANIFEST_VERSION,
};
use crate::adapters::{flatten, load_adapter, load_tensors, save_adapter, save_tensors, unflatten, Tensor};
use crate::error::{Error, Result};
use crate::semantics::{load_embeddings, write_embeddings, EmbeddingSource, TaskEmbedding};

/// Writes the manifest, one embeddings file for every task, expert moment
/// blobs and per-task checkpoint blobs under `dir`.
pub fn save_repository(repo: &Repository, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let m = repo.manifest();
    for sub in ["experts", "checkpoints"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let layout = repo.layout();
    for (r, e) in m.experts.iter().zip(repo.experts()) {
        save_adapter(&unflatten(&e.mean, layout)?, dir.join(&r.mean_blob))?;
        save_adapter(&unflatten(&e.var, layout)?, dir.join(&r.var_blob))?;
    }
    for c in &m.checkpoints {
        let task = repo
            .task(&c.task_id)
            .ok_or_else(|| Error::Validation(format!("no record for {}", c.task_id)))?;
        let tensors: Vec<Tensor> = task
            .checkpoints
            .iter()
            .enumerate()
            .map(|(j, v)| Tensor::f32(format!("ckpt{j}"), vec![v.len() as u64], v.clone()))
            .collect();
        save_tensors(dir.join(&c.blob), &tensors)?;
    }
    let mut embs = Vec::new();
    for e in repo.experts() {
        embs.push(embedding_line(&e.task_id, "", &e.embedding));
    }
    for t in repo.tasks() {
        embs.push(embedding_line(&t.task_id, &t.description, &t.embedding));
    }
    write_embeddings(dir.join(EMBEDDINGS_FILE), &embs)?;
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(m)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

fn embedding_line(task_id: &str, description: &str, v: &[f32]) -> TaskEmbedding {
    TaskEmbedding {
        task_id: task_id.to_string(),
        description: description.to_string(),
        vector: v.to_vec(),
        source: EmbeddingSource::Ingested,
    }
}

pub fn load_repository(dir: impl AsRef<Path>) -> Result<Repository> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = validate_manifest_json(&text)?;

    let blobs = manifest
        .experts
        .iter()
        .flat_map(|e| [&e.mean_blob, &e.var_blob, &e.embedding_file])
        .chain(manifest.checkpoints.iter().map(|c| &c.blob));
    for b in blobs {
        let p = dir.join(b);
        if !p.is_file() {
            return Err(Error::MissingBlob(p));
        }
    }

    let mut emb_cache: HashMap<String, HashMap<String, TaskEmbedding>> = HashMap::new();
    let mut embedding_of = |file: &str, id: &str| -> Result<TaskEmbedding> {
        if !emb_cache.contains_key(file) {
            let map = load_embeddings(dir.join(file))?
                .into_iter()
                .map(|e| (e.task_id.clone(), e))
                .collect();
            emb_cache.insert(file.to_string(), map);
        }
        emb_cache[file]
            .get(id)
            .cloned()
            .ok_or_else(|| Error::Validation(format!("no embedding for {id} in {file}")))
    };

    let layout = &manifest.layout;
    let mut experts = Vec::with_capacity(manifest.experts.len());
    for r in &manifest.experts {
        let (mean, _) = flatten(&load_adapter(dir.join(&r.mean_blob), layout)?);
        let (var, _) = flatten(&load_adapter(dir.join(&r.var_blob), layout)?);
        let emb = embedding_of(&r.embedding_file, &r.task_id)?;
        experts.push(ExpertEntry {
            task_id: r.task_id.clone(),
            embedding: emb.vector,
            mean,
            var,
        });
    }

    let mut tasks = Vec::with_capacity(manifest.checkpoints.len());
    for c in &manifest.checkpoints {
        let tensors = load_tensors(dir.join(&c.blob))?;
        let mut checkpoints = Vec::with_capacity(tensors.len());
        for t in &tensors {
            checkpoints.push(t.as_f32()?.to_vec());
        }
        let emb = embedding_of(EMBEDDINGS_FILE, &c.task_id)?;
        tasks.push(TaskRecord {
            task_id: c.task_id.clone(),
            description: emb.description,
            embedding: emb.vector,
            checkpoints,
        });
    }
    for id in manifest.train.iter().chain(&manifest.eval) {
        if !manifest.checkpoints.iter().any(|c| &c.task_id == id) {
            let emb = embedding_of(EMBEDDINGS_FILE, id)?;
            tasks.push(TaskRecord {
                task_id: id.clone(),
                description: emb.description,
                embedding: emb.vector,
                checkpoints: Vec::new(),
            });
        }
    }
    Repository::from_parts(manifest, experts, tasks)
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.into(),
        message: message.into(),
    }
}

fn field<'a>(obj: &'a Value, key: &str, path: &str) -> Result<&'a Value> {
    let map = obj.as_object().ok_or_else(|| schema(path, "expected an object"))?;
    map.get(key)
        .ok_or_else(|| schema(format!("{path}.{key}"), "missing field"))
}

fn string_at(v: &Value, path: &str) -> Result<()> {
    v.as_str().map(|_| ()).ok_or_else(|| schema(path, "expected a string"))
}

fn uint_at(v: &Value, path: &str) -> Result<u64> {
    v.as_u64()
        .ok_or_else(|| schema(path, "expected a non-negative integer"))
}

fn array_at<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>> {
    v.as_array().ok_or_else(|| schema(path, "expected an array"))
}

/// Parses a manifest, reporting the JSON path of the first schema violation.
/// A version other than the supported one is reported before anything else.
pub fn validate_manifest_json(text: &str) -> Result<RepositoryManifest> {
    let root: Value = serde_json::from_str(text).map_err(|e| schema("$", e.to_string()))?;
    let version = uint_at(field(&root, "version", "$")?, "$.version")?;
    if version != MANIFEST_VERSION as u64 {
        return Err(Error::Version {
            found: version.min(u32::MAX as u64) as u32,
            supported: MANIFEST_VERSION,
        });
    }
    let layout = field(&root, "layout", "$")?;
    let modules = array_at(field(layout, "modules", "$.layout")?, "$.layout.modules")?;
    for (i, m) in modules.iter().enumerate() {
        let p = format!("$.layout.modules[{i}]");
        string_at(field(m, "placement", &p)?, &format!("{p}.placement"))?;
        for k in ["m", "n", "r"] {
            uint_at(field(m, k, &p)?, &format!("{p}.{k}"))?;
        }
        field(m, "alpha", &p)?
            .as_f64()
            .ok_or_else(|| schema(format!("{p}.alpha"), "expected a number"))?;
    }
    uint_at(field(&root, "embedding_dim", "$")?, "$.embedding_dim")?;
    let experts = array_at(field(&root, "experts", "$")?, "$.experts")?;
    for (i, e) in experts.iter().enumerate() {
        let p = format!("$.experts[{i}]");
        for k in ["task_id", "embedding_file", "mean_blob", "var_blob"] {
            string_at(field(e, k, &p)?, &format!("{p}.{k}"))?;
        }
    }
    for split in ["train", "eval"] {
        let items = array_at(field(&root, split, "$")?, &format!("$.{split}"))?;
        for (i, v) in items.iter().enumerate() {
            string_at(v, &format!("$.{split}[{i}]"))?;
        }
    }
    if let Some(c) = root.get("checkpoints") {
        for (i, v) in array_at(c, "$.checkpoints")?.iter().enumerate() {
            let p = format!("$.checkpoints[{i}]");
            for k in ["task_id", "blob"] {
                string_at(field(v, k, &p)?, &format!("{p}.{k}"))?;
            }
        }
    }
    serde_json::from_value(root).map_err(|e| schema("$", e.to_string()))
}
