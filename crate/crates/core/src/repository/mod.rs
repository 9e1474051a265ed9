//! The parameter dataset and the expert repository: per-expert checkpoint
//! moments, train/eval partitioning, and on-disk persistence.

mod expert;
mod store;

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use expert::{build_expert, ExpertEntry, TaskRecord};
pub use store::{load_repository, save_repository, validate_manifest_json};

use crate::adapters::Layout;
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertRef {
    pub task_id: String,
    pub embedding_file: String,
    pub mean_blob: String,
    pub var_blob: String,
}

/// Checkpoints of a non-expert task, kept so a generator can be trained from
/// a saved repository.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub task_id: String,
    pub blob: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepositoryManifest {
    pub version: u32,
    pub layout: Layout,
    pub embedding_dim: usize,
    pub experts: Vec<ExpertRef>,
    pub train: Vec<String>,
    pub eval: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checkpoints: Vec<CheckpointRef>,
}

#[derive(Clone, Debug)]
pub struct BuildOptions {
    /// Share of non-expert tasks assigned to training (rounded).
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Expert moments plus the non-expert task records. Immutable once built or
/// loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct Repository {
    manifest: RepositoryManifest,
    experts: Vec<ExpertEntry<f32>>,
    tasks: Vec<TaskRecord>,
}

impl Repository {
    pub fn manifest(&self) -> &RepositoryManifest {
        &self.manifest
    }

    pub fn layout(&self) -> &Layout {
        &self.manifest.layout
    }

    pub fn embedding_dim(&self) -> usize {
        self.manifest.embedding_dim
    }

    /// Flattened parameter length `D`.
    pub fn param_len(&self) -> usize {
        self.manifest.layout.total_len()
    }

    pub fn experts(&self) -> &[ExpertEntry<f32>] {
        &self.experts
    }

    pub fn experts_as<T: crate::Scalar>(&self) -> Vec<ExpertEntry<T>> {
        self.experts.iter().map(ExpertEntry::cast).collect()
    }

    pub fn expert(&self, task_id: &str) -> Option<&ExpertEntry<f32>> {
        self.experts.iter().find(|e| e.task_id == task_id)
    }

    pub fn tasks(&self) -> &[TaskRecord] {
        &self.tasks
    }

    pub fn task(&self, task_id: &str) -> Option<&TaskRecord> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    pub fn train_tasks(&self) -> Vec<&TaskRecord> {
        self.manifest.train.iter().filter_map(|id| self.task(id)).collect()
    }

    pub fn eval_tasks(&self) -> Vec<&TaskRecord> {
        self.manifest.eval.iter().filter_map(|id| self.task(id)).collect()
    }

    /// Hex SHA-256 over the layout and every expert's id, embedding and
    /// moments. Identifies the routing targets a generator was trained with.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.manifest.layout.hash().as_bytes());
        h.update((self.manifest.embedding_dim as u64).to_le_bytes());
        for e in &self.experts {
            h.update((e.task_id.len() as u64).to_le_bytes());
            h.update(e.task_id.as_bytes());
            for v in e.embedding.iter().chain(&e.mean).chain(&e.var) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Unions several repositories sharing layout and embedding dimension
    /// into one mixed-source repository.
    pub fn union(parts: &[Repository]) -> Result<Repository> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Empty("no repositories to union".into()))?;
        let mut manifest = first.manifest.clone();
        let mut experts = first.experts.clone();
        let mut tasks = first.tasks.clone();
        for p in &parts[1..] {
            if p.manifest.layout != manifest.layout {
                return Err(Error::Layout("cannot union repositories with different layouts".into()));
            }
            if p.manifest.embedding_dim != manifest.embedding_dim {
                return Err(Error::Validation(format!(
                    "cannot union embedding dims {} and {}",
                    manifest.embedding_dim, p.manifest.embedding_dim
                )));
            }
            manifest.experts.extend(p.manifest.experts.iter().cloned());
            manifest.train.extend(p.manifest.train.iter().cloned());
            manifest.eval.extend(p.manifest.eval.iter().cloned());
            manifest.checkpoints.extend(p.manifest.checkpoints.iter().cloned());
            experts.extend(p.experts.iter().cloned());
            tasks.extend(p.tasks.iter().cloned());
        }
        let repo = Repository {
            manifest,
            experts,
            tasks,
        };
        repo.validate()?;
        Ok(repo)
    }

    pub(crate) fn from_parts(
        manifest: RepositoryManifest,
        experts: Vec<ExpertEntry<f32>>,
        tasks: Vec<TaskRecord>,
    ) -> Result<Self> {
        let repo = Self {
            manifest,
            experts,
            tasks,
        };
        repo.validate()?;
        Ok(repo)
    }

    /// Checks the manifest/content invariants.
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Version {
                found: m.version,
                supported: MANIFEST_VERSION,
            });
        }
        m.layout.validate()?;
        let d = m.layout.total_len();
        let mut ids = HashSet::new();
        for e in &self.experts {
            if !ids.insert(e.task_id.as_str()) {
                return Err(Error::Validation(format!("duplicate expert {}", e.task_id)));
            }
            if e.mean.len() != d || e.var.len() != d {
                return Err(Error::Layout(format!(
                    "expert {} has wrong parameter length",
                    e.task_id
                )));
            }
            if e.embedding.len() != m.embedding_dim {
                return Err(Error::Validation(format!(
                    "expert {} has embedding dim {}, manifest says {}",
                    e.task_id,
                    e.embedding.len(),
                    m.embedding_dim
                )));
            }
            if e.mean.iter().any(|v| !v.is_finite()) || e.var.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::Validation(format!("expert {} has invalid moments", e.task_id)));
            }
        }
        let overlap: Vec<&str> = m
            .eval
            .iter()
            .filter(|id| ids.contains(id.as_str()))
            .map(String::as_str)
            .collect();
        if !overlap.is_empty() {
            return Err(Error::Validation(format!(
                "expert ids also listed for evaluation: {}",
                overlap.join(", ")
            )));
        }
        for t in &self.tasks {
            if t.embedding.len() != m.embedding_dim {
                return Err(Error::Validation(format!("task {} has wrong embedding dim", t.task_id)));
            }
            if t.checkpoints.iter().any(|c| c.len() != d) {
                return Err(Error::Layout(format!("task {} has wrong checkpoint length", t.task_id)));
            }
        }
        Ok(())
    }
}

/// Builds experts for `expert_ids` and splits the remaining tasks into
/// train/eval with a seeded shuffle. Returns warnings alongside.
pub fn build_repository(
    records: &[TaskRecord],
    expert_ids: &[String],
    layout: &Layout,
    options: &BuildOptions,
) -> Result<(Repository, Vec<String>)> {
    if records.is_empty() {
        return Err(Error::Empty("no task records".into()));
    }
    if !(0.0..=1.0).contains(&options.train_fraction) {
        return Err(Error::Parameter(format!(
            "train fraction {} outside [0, 1]",
            options.train_fraction
        )));
    }
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.task_id.as_str()) {
            return Err(Error::Validation(format!("duplicate task id {}", r.task_id)));
        }
    }
    let d = layout.total_len();
    let bad_layout: Vec<&str> = records
        .iter()
        .filter(|r| r.checkpoints.is_empty() || r.checkpoints.iter().any(|c| c.len() != d))
        .map(|r| r.task_id.as_str())
        .collect();
    if !bad_layout.is_empty() {
        return Err(Error::Validation(format!(
            "checkpoints do not match layout (D = {d}): {}",
            bad_layout.join(", ")
        )));
    }
    let e_dim = records[0].embedding.len();
    let bad_emb: Vec<&str> = records
        .iter()
        .filter(|r| {
            let norm = r.embedding.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            r.embedding.len() != e_dim || (norm - 1.0).abs() > 1e-5
        })
        .map(|r| r.task_id.as_str())
        .collect();
    if !bad_emb.is_empty() {
        return Err(Error::Validation(format!(
            "embeddings must be unit vectors of dim {e_dim}: {}",
            bad_emb.join(", ")
        )));
    }
    let unknown: Vec<&str> = expert_ids
        .iter()
        .filter(|id| !seen.contains(id.as_str()))
        .map(String::as_str)
        .collect();
    if !unknown.is_empty() {
        return Err(Error::Validation(format!("unknown expert ids: {}", unknown.join(", "))));
    }

    let expert_set: BTreeSet<&str> = expert_ids.iter().map(String::as_str).collect();
    let mut warnings = Vec::new();
    let mut experts = Vec::new();
    let mut rest = Vec::new();
    for r in records {
        if expert_set.contains(r.task_id.as_str()) {
            experts.push(build_expert::<f32>(r)?);
        } else {
            rest.push(r.clone());
        }
    }
    if experts.is_empty() {
        warnings.push("no experts selected; routing will fail".to_string());
    }
    if rest.is_empty() {
        warnings.push("every task is an expert; train and eval splits are empty".to_string());
    }
    let mut order: Vec<usize> = (0..rest.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(options.seed));
    let n_train = (options.train_fraction * rest.len() as f64).round() as usize;
    let train: Vec<String> = order[..n_train].iter().map(|&i| rest[i].task_id.clone()).collect();
    let eval: Vec<String> = order[n_train..].iter().map(|&i| rest[i].task_id.clone()).collect();
    if !rest.is_empty() && eval.is_empty() {
        warnings.push("evaluation split is empty".to_string());
    }

    let manifest = RepositoryManifest {
        version: MANIFEST_VERSION,
        layout: layout.clone(),
        embedding_dim: e_dim,
        experts: experts
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let stem = blob_stem(i, &e.task_id);
                ExpertRef {
                    task_id: e.task_id.clone(),
                    embedding_file: EMBEDDINGS_FILE.to_string(),
                    mean_blob: format!("experts/{stem}.mean.sglr"),
                    var_blob: format!("experts/{stem}.var.sglr"),
                }
            })
            .collect(),
        train,
        eval,
        checkpoints: rest
            .iter()
            .enumerate()
            .map(|(i, r)| CheckpointRef {
                task_id: r.task_id.clone(),
                blob: format!("checkpoints/{}.sglr", blob_stem(i, &r.task_id)),
            })
            .collect(),
    };
    Ok((Repository::from_parts(manifest, experts, rest)?, warnings))
}

/// `count` distinct ids drawn with a seeded shuffle, returned in input order.
pub fn pick_experts(ids: &[String], count: usize, seed: u64) -> Result<Vec<String>> {
    if count > ids.len() {
        return Err(Error::Parameter(format!(
            "cannot pick {count} experts from {}",
            ids.len()
        )));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = order[..count].to_vec();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| ids[i].clone()).collect())
}

fn blob_stem(index: usize, task_id: &str) -> String {
    let safe: String = task_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{index:04}-{safe}")
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::semantics::stub_embed;

    pub(crate) fn records(n: usize, layout: &Layout) -> Vec<TaskRecord> {
        (0..n)
            .map(|i| {
                let id = format!("task{i}");
                TaskRecord {
                    embedding: stub_embed(&id, 8).unwrap().vector,
                    description: format!("task number {i}"),
                    checkpoints: (0..3)
                        .map(|j| (0..layout.total_len()).map(|c| (i + j * c) as f32 * 0.01).collect())
                        .collect(),
                    task_id: id,
                }
            })
            .collect()
    }

    fn ids(v: &[usize]) -> Vec<String> {
        v.iter().map(|i| format!("task{i}")).collect()
    }

    #[test]
    fn counting_split() {
        let layout = Layout::attention_qkv(1, 4, 1, 1.0).unwrap();
        let recs = records(10, &layout);
        let (repo, warnings) = build_repository(&recs, &ids(&[0, 3, 5, 9]), &layout, &BuildOptions::default()).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(repo.experts().len(), 4);
        assert_eq!(repo.manifest().train.len(), 5);
        assert_eq!(repo.manifest().eval.len(), 1);
        let all: BTreeSet<_> = repo
            .manifest()
            .train
            .iter()
            .chain(&repo.manifest().eval)
            .cloned()
            .collect();
        assert_eq!(all, ids(&[1, 2, 4, 6, 7, 8]).into_iter().collect());
        let (again, _) = build_repository(&recs, &ids(&[0, 3, 5, 9]), &layout, &BuildOptions::default()).unwrap();
        assert_eq!(again, repo);
    }

    #[test]
    fn all_experts_warns() {
        let layout = Layout::attention_qkv(1, 4, 1, 1.0).unwrap();
        let recs = records(3, &layout);
        let (repo, warnings) = build_repository(&recs, &ids(&[0, 1, 2]), &layout, &BuildOptions::default()).unwrap();
        assert!(repo.manifest().train.is_empty() && repo.manifest().eval.is_empty());
        assert!(!warnings.is_empty());
    }

    #[test]
    fn mixed_layouts_list_offenders() {
        let layout = Layout::attention_qkv(1, 4, 1, 1.0).unwrap();
        let mut recs = records(4, &layout);
        recs[2].checkpoints[1].pop();
        recs[3].checkpoints = vec![vec![0.0; 5]];
        let err = build_repository(&recs, &ids(&[0]), &layout, &BuildOptions::default()).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Validation(_)));
        assert!(msg.contains("task2") && msg.contains("task3") && !msg.contains("task1"));
    }

    #[test]
    fn unknown_expert_id() {
        let layout = Layout::attention_qkv(1, 4, 1, 1.0).unwrap();
        let recs = records(3, &layout);
        let err = build_repository(&recs, &ids(&[7]), &layout, &BuildOptions::default()).unwrap_err();
        assert!(err.to_string().contains("task7"));
    }

    #[test]
    fn union_and_hash() {
        let layout = Layout::attention_qkv(1, 4, 1, 1.0).unwrap();
        let recs = records(6, &layout);
        let (a, _) = build_repository(&recs[..3], &ids(&[0]), &layout, &BuildOptions::default()).unwrap();
        let (b, _) = build_repository(&recs[3..], &ids(&[3, 4]), &layout, &BuildOptions::default()).unwrap();
        let u = Repository::union(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(u.experts().len(), 3);
        assert_ne!(u.hash(), a.hash());
        assert_eq!(a.hash(), a.clone().hash());
        assert!(Repository::union(&[a.clone(), a.clone()]).is_err());
        let other = Layout::attention_qkv(1, 4, 2, 1.0).unwrap();
        let (c, _) = build_repository(&records(2, &other), &ids(&[0]), &other, &BuildOptions::default()).unwrap();
        assert!(matches!(Repository::union(&[a, c]), Err(Error::Layout(_))));
    }

    #[test]
    fn pick_is_seeded_subset() {
        let all = ids(&[0, 1, 2, 3, 4, 5]);
        let a = pick_experts(&all, 3, 9).unwrap();
        assert_eq!(a, pick_experts(&all, 3, 9).unwrap());
        assert_eq!(a.len(), 3);
        assert!(pick_experts(&all, 7, 0).is_err());
    }
}
