//! Semantic routing: similarity to the experts, top-k selection, softmax
//! fusion, the fused Gaussian prior, and the merging baselines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Scalar;
use crate::repository::ExpertEntry;

pub const DEFAULT_TAU: f64 = 0.05;
pub const DEFAULT_K: usize = 4;
/// Lower bound on the fused variance; also the offset inside the log.
pub const VAR_FLOOR: f64 = 1e-8;

/// Cosine similarity of a unit query to every expert (dot product, since
/// embeddings are unit norm). Accumulated in f64.
pub fn similarities<T: Scalar>(query: &[f32], experts: &[ExpertEntry<T>]) -> Result<Vec<T>> {
    experts
        .iter()
        .map(|e| {
            if e.embedding.len() != query.len() {
                return Err(Error::shape(format!(
                    "query dim {} vs expert {} dim {}",
                    query.len(),
                    e.task_id,
                    e.embedding.len()
                )));
            }
            let s: f64 = query.iter().zip(&e.embedding).map(|(&a, &b)| a as f64 * b as f64).sum();
            Ok(T::lit(s))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopK {
    /// Descending similarity, ascending index on ties.
    pub indices: Vec<usize>,
    /// `k` exceeded the expert count and was reduced.
    pub clamped: bool,
}

pub fn select_topk<T: Scalar>(sims: &[T], k: usize) -> Result<TopK> {
    if sims.is_empty() {
        return Err(Error::Empty("repository has no experts".into()));
    }
    if k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| {
        sims[b]
            .partial_cmp(&sims[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let clamped = k > sims.len();
    if clamped {
        log::warn!("k = {k} exceeds the {} available experts; using all", sims.len());
    }
    order.truncate(k.min(sims.len()));
    Ok(TopK {
        indices: order,
        clamped,
    })
}

/// Softmax of `sims / tau` with max-subtraction.
pub fn fusion_weights<T: Scalar>(sims: &[T], tau: f64) -> Result<Vec<T>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    if sims.is_empty() {
        return Err(Error::Empty("no similarities to fuse".into()));
    }
    let scaled: Vec<f64> = sims.iter().map(|s| s.as_f64() / tau).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| T::lit(e / total)).collect())
}

fn check_aligned<T: Scalar>(weights: &[T], experts: &[&ExpertEntry<T>]) -> Result<usize> {
    if weights.len() != experts.len() || experts.is_empty() {
        return Err(Error::shape(format!(
            "{} weights for {} experts",
            weights.len(),
            experts.len()
        )));
    }
    let d = experts[0].dim();
    if let Some(e) = experts.iter().find(|e| e.dim() != d || e.var.len() != d) {
        return Err(Error::shape(format!(
            "expert {} has length {}, expected {d}",
            e.task_id,
            e.dim()
        )));
    }
    Ok(d)
}

/// `Σ αᵢ μᵢ`.
pub fn prior_mean<T: Scalar>(weights: &[T], experts: &[&ExpertEntry<T>]) -> Result<Vec<T>> {
    let d = check_aligned(weights, experts)?;
    let mut out = vec![T::zero(); d];
    for (&w, e) in weights.iter().zip(experts) {
        for (o, &m) in out.iter_mut().zip(&e.mean) {
            *o += w * m;
        }
    }
    Ok(out)
}

/// Variance of the mixture `Σ αᵢ N(μᵢ, σᵢ²)` per coordinate, floored at
/// [`VAR_FLOOR`]. Computed as `Σ αᵢ (σᵢ² + (μᵢ − μ*)²)`.
pub fn prior_variance<T: Scalar>(mu_star: &[T], weights: &[T], experts: &[&ExpertEntry<T>]) -> Result<Vec<T>> {
    let d = check_aligned(weights, experts)?;
    if mu_star.len() != d {
        return Err(Error::shape(format!(
            "prior mean has length {}, expected {d}",
            mu_star.len()
        )));
    }
    let mut out = vec![T::zero(); d];
    for (&w, e) in weights.iter().zip(experts) {
        for (((o, &m), &v), &ms) in out.iter_mut().zip(&e.mean).zip(&e.var).zip(mu_star) {
            let dev = m - ms;
            *o += w * (v + dev * dev);
        }
    }
    let floor = T::lit(VAR_FLOOR);
    Ok(out.into_iter().map(|v| v.max(floor)).collect())
}

/// The fused prior for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticPrior<T> {
    pub query: Vec<f32>,
    /// Positions in the expert list passed to [`build_prior`].
    pub indices: Vec<usize>,
    pub task_ids: Vec<String>,
    pub similarities: Vec<T>,
    pub weights: Vec<T>,
    pub tau: f64,
    /// Requested k (before any clamping).
    pub k: usize,
    pub clamped: bool,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> SemanticPrior<T> {
    /// `[μ*, log(σ*² + ε)]`, length `2D`.
    pub fn condition(&self) -> Vec<T> {
        let eps = T::lit(VAR_FLOOR);
        self.mean
            .iter()
            .cloned()
            .chain(self.var.iter().map(|&v| (v + eps).ln()))
            .collect()
    }

    pub fn report(&self, query_id: impl Into<String>) -> RouteReport {
        RouteReport {
            query_id: query_id.into(),
            selected: self
                .task_ids
                .iter()
                .zip(&self.similarities)
                .zip(&self.weights)
                .map(|((id, s), w)| RouteSelection {
                    task_id: id.clone(),
                    similarity: s.as_f64(),
                    weight: w.as_f64(),
                })
                .collect(),
            tau: self.tau,
            k: self.k,
        }
    }
}

/// Routes `query` to the top-k experts and fuses their moments. An expert
/// whose id equals `exclude` is skipped (leave-self-out).
pub fn build_prior<T: Scalar>(
    query: &[f32],
    experts: &[ExpertEntry<T>],
    k: usize,
    tau: f64,
    exclude: Option<&str>,
) -> Result<SemanticPrior<T>> {
    let pool: Vec<usize> = (0..experts.len())
        .filter(|&i| Some(experts[i].task_id.as_str()) != exclude)
        .collect();
    let all_sims = similarities(query, experts)?;
    let pool_sims: Vec<T> = pool.iter().map(|&i| all_sims[i]).collect();
    let top = select_topk(&pool_sims, k)?;
    let indices: Vec<usize> = top.indices.iter().map(|&j| pool[j]).collect();
    let sims: Vec<T> = indices.iter().map(|&i| all_sims[i]).collect();
    let weights = fusion_weights(&sims, tau)?;
    let chosen: Vec<&ExpertEntry<T>> = indices.iter().map(|&i| &experts[i]).collect();
    let mean = prior_mean(&weights, &chosen)?;
    let var = prior_variance(&mean, &weights, &chosen)?;
    Ok(SemanticPrior {
        query: query.to_vec(),
        task_ids: chosen.iter().map(|e| e.task_id.clone()).collect(),
        indices,
        similarities: sims,
        weights,
        tau,
        k,
        clamped: top.clamped,
        mean,
        var,
    })
}

/// Uniform mean of every expert mean.
pub fn baseline_model_soup<T: Scalar>(experts: &[ExpertEntry<T>]) -> Result<Vec<T>> {
    if experts.is_empty() {
        return Err(Error::Empty("repository has no experts".into()));
    }
    let w = vec![T::one() / T::lit(experts.len() as f64); experts.len()];
    prior_mean(&w, &experts.iter().collect::<Vec<_>>())
}

/// Mean of the top-k expert means, each weighted `1/k`.
pub fn baseline_topk_merge<T: Scalar>(query: &[f32], experts: &[ExpertEntry<T>], k: usize) -> Result<Vec<T>> {
    let mut chosen = select_topk(&similarities(query, experts)?, k)?.indices;
    // Index order, so that k = N reproduces the soup bit for bit.
    chosen.sort_unstable();
    let w = vec![T::one() / T::lit(chosen.len() as f64); chosen.len()];
    prior_mean(&w, &chosen.iter().map(|&i| &experts[i]).collect::<Vec<_>>())
}

/// Softmax-weighted top-k merge; the prior mean.
pub fn baseline_topk_weighted<T: Scalar>(
    query: &[f32],
    experts: &[ExpertEntry<T>],
    k: usize,
    tau: f64,
) -> Result<Vec<T>> {
    Ok(build_prior(query, experts, k, tau, None)?.mean)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeMethod {
    ModelSoup,
    TopkMerge,
    TopkWeighted,
}

impl MergeMethod {
    pub fn merge<T: Scalar>(self, query: &[f32], experts: &[ExpertEntry<T>], k: usize, tau: f64) -> Result<Vec<T>> {
        match self {
            MergeMethod::ModelSoup => baseline_model_soup(experts),
            MergeMethod::TopkMerge => baseline_topk_merge(query, experts, k),
            MergeMethod::TopkWeighted => baseline_topk_weighted(query, experts, k, tau),
        }
    }
}

impl std::str::FromStr for MergeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model-soup" | "soup" => Ok(MergeMethod::ModelSoup),
            "topk-merge" => Ok(MergeMethod::TopkMerge),
            "topk-weighted" => Ok(MergeMethod::TopkWeighted),
            other => Err(Error::Parameter(format!(
                "unknown merge method {other:?} (model-soup, topk-merge, topk-weighted)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteSelection {
    pub task_id: String,
    pub similarity: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteReport {
    pub query_id: String,
    pub selected: Vec<RouteSelection>,
    pub tau: f64,
    pub k: usize,
}

impl RouteReport {
    /// Weights strictly positive, non-increasing, summing to 1 within `tol`.
    pub fn is_well_formed(&self, tol: f64) -> bool {
        let total: f64 = self.selected.iter().map(|s| s.weight).sum();
        (total - 1.0).abs() <= tol
            && self.selected.iter().all(|s| s.weight > 0.0)
            && self.selected.windows(2).all(|w| w[0].weight >= w[1].weight)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    use super::*;
    use crate::semantics::stub_embed;

    fn expert(id: &str, emb: Vec<f32>, mean: Vec<f64>, var: Vec<f64>) -> ExpertEntry<f64> {
        ExpertEntry {
            task_id: id.into(),
            embedding: emb,
            mean,
            var,
        }
    }

    fn random_experts(n: usize, d: usize, seed: u64) -> Vec<ExpertEntry<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                expert(
                    &format!("e{i}"),
                    stub_embed(&format!("expert {seed} {i}"), 8).unwrap().vector,
                    (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
                    (0..d).map(|_| rng.random_range(0.0..0.5)).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn similarity_cases() {
        let ex = random_experts(3, 2, 1);
        let s = similarities(&ex[1].embedding, &ex).unwrap();
        assert!((s[1] - 1.0).abs() < 1e-6);
        let orth = vec![expert("o", vec![0.0, 1.0], vec![0.0], vec![0.0])];
        assert_eq!(similarities(&[1.0, 0.0], &orth).unwrap(), vec![0.0]);
        assert!(similarities(&[1.0, 0.0, 0.0], &orth).is_err());
        let q = stub_embed("query", 8).unwrap().vector;
        let s = similarities(&q, &ex).unwrap();
        for (e, si) in ex.iter().zip(&s) {
            let mut acc = 0.0f64;
            for c in 0..8 {
                acc += q[c] as f64 * e.embedding[c] as f64;
            }
            assert!((acc - si).abs() < 1e-6);
        }
    }

    #[test]
    fn topk_ordering_ties_and_clamp() {
        assert_eq!(select_topk(&[0.9, 0.1, 0.8, 0.7], 2).unwrap().indices, vec![0, 2]);
        assert_eq!(select_topk(&[0.5; 4], 2).unwrap().indices, vec![0, 1]);
        let t = select_topk(&[0.1, 0.4, 0.3, 0.2], 10).unwrap();
        assert_eq!(t.indices, vec![1, 2, 3, 0]);
        assert!(t.clamped);
        assert!(select_topk::<f64>(&[], 1).is_err());
        assert!(select_topk(&[0.1], 0).is_err());
    }

    #[test]
    fn fusion_closed_form() {
        let w = fusion_weights(&[0.9f64, 0.8], 0.1).unwrap();
        let e = 1.0f64.exp();
        assert!((w[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((w[0] - 0.7311).abs() < 1e-4 && (w[1] - 0.2689).abs() < 1e-4);
        let w = fusion_weights(&[0.9f64, -0.3, 0.1, 0.5], 1e6).unwrap();
        assert!(w.iter().all(|x| (x - 0.25).abs() < 1e-3));
        assert!(matches!(fusion_weights(&[0.1f64], 0.0), Err(Error::Parameter(_))));
        assert!(fusion_weights(&[0.1f64], -1.0).is_err());
        let w = fusion_weights(&[1.0f64, -1.0], 1e-4).unwrap();
        assert!(w.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn reported_weights_shape_contract() {
        // A well-formed report of four selected experts, as in a mixed-source route.
        let weights = [0.9221, 0.0692, 0.0082, 0.0005];
        let report = RouteReport {
            query_id: "q".into(),
            selected: weights
                .iter()
                .enumerate()
                .map(|(i, &w)| RouteSelection {
                    task_id: format!("e{i}"),
                    similarity: 0.0,
                    weight: w,
                })
                .collect(),
            tau: DEFAULT_TAU,
            k: 4,
        };
        assert!(report.is_well_formed(1e-3));
    }

    #[test]
    fn prior_mean_cases() {
        let ex = [
            expert("a", vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]),
            expert("b", vec![0.0, 1.0], vec![2.0, 2.0], vec![0.0, 0.0]),
        ];
        let refs: Vec<_> = ex.iter().collect();
        assert_eq!(prior_mean(&[0.5, 0.5], &refs).unwrap(), vec![1.0, 1.0]);
        assert_eq!(prior_mean(&[1.0], &refs[1..]).unwrap(), ex[1].mean);
        assert!(prior_mean(&[1.0], &refs).is_err());
        let ex = random_experts(5, 6, 2);
        let refs: Vec<_> = ex.iter().collect();
        let w = fusion_weights(&[0.3, 0.1, 0.9, 0.2, 0.4], 0.2).unwrap();
        let got = prior_mean(&w, &refs).unwrap();
        for c in 0..6 {
            let mut acc = 0.0;
            for i in 0..5 {
                acc += w[i] * ex[i].mean[c];
            }
            assert!((acc - got[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn prior_variance_cases() {
        let ex = random_experts(3, 4, 3);
        let one = prior_variance(&ex[0].mean, &[1.0], &[&ex[0]]).unwrap();
        for (v, s) in one.iter().zip(&ex[0].var) {
            assert_eq!(*v, s.max(VAR_FLOOR));
        }
        let same = [ex[1].clone(), ex[1].clone()];
        let refs: Vec<_> = same.iter().collect();
        let mu = prior_mean(&[0.3, 0.7], &refs).unwrap();
        let v = prior_variance(&mu, &[0.3, 0.7], &refs).unwrap();
        for (a, b) in v.iter().zip(&ex[1].var) {
            assert!((a - b.max(VAR_FLOOR)).abs() < 1e-12);
        }
        let z = expert("z", vec![1.0, 0.0], vec![3.0], vec![0.0]);
        assert_eq!(prior_variance(&[3.0], &[1.0], &[&z]).unwrap(), vec![VAR_FLOOR]);
    }

    #[test]
    fn mixture_variance_matches_monte_carlo() {
        let ex = [
            expert("a", vec![1.0, 0.0], vec![0.0], vec![1.0]),
            expert("b", vec![0.0, 1.0], vec![2.0], vec![1.0]),
        ];
        let refs: Vec<_> = ex.iter().collect();
        let mu = prior_mean(&[0.5, 0.5], &refs).unwrap();
        let var = prior_variance(&mu, &[0.5, 0.5], &refs).unwrap();
        assert_eq!(mu, vec![1.0]);
        assert!((var[0] - 2.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000;
        let (n0, n1) = (Normal::new(0.0, 1.0).unwrap(), Normal::new(2.0, 1.0).unwrap());
        let (mut s, mut s2) = (0.0f64, 0.0f64);
        for _ in 0..n {
            let x = if rng.random_bool(0.5) {
                n0.sample(&mut rng)
            } else {
                n1.sample(&mut rng)
            };
            s += x;
            s2 += x * x;
        }
        let m = s / n as f64;
        let v = s2 / n as f64 - m * m;
        assert!((v - var[0]).abs() / var[0] < 0.02);
        assert!((m - mu[0]).abs() < 0.02);
    }

    #[test]
    fn build_prior_shapes_and_exclusion() {
        let ex = random_experts(6, 5, 4);
        let p = build_prior(&ex[2].embedding, &ex, 3, 0.1, None).unwrap();
        assert_eq!(p.indices[0], 2);
        assert_eq!(p.condition().len(), 10);
        assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let p = build_prior(&ex[2].embedding, &ex, 3, 0.1, Some("e2")).unwrap();
        assert!(!p.indices.contains(&2));
        assert_eq!(p.indices.len(), 3);
        let c = p.condition();
        for (ci, v) in c[5..].iter().zip(&p.var) {
            assert!((ci - (v + VAR_FLOOR).ln()).abs() < 1e-12);
        }
        let report = p.report("q");
        assert_eq!(report.selected.len(), 3);
        let json = serde_json::to_value(&report).unwrap();
        assert!(json["selected"][0]["task_id"].is_string());
        assert_eq!(json["k"], 3);
    }

    #[test]
    fn baselines() {
        let ex = vec![
            expert("a", vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]),
            expert("b", vec![0.0, 1.0], vec![2.0, 2.0], vec![0.0, 0.0]),
        ];
        assert_eq!(baseline_model_soup(&ex).unwrap(), vec![1.0, 1.0]);
        assert_eq!(baseline_model_soup(&ex[..1]).unwrap(), ex[0].mean);
        assert!(baseline_model_soup::<f64>(&[]).is_err());

        let ex = random_experts(7, 4, 5);
        let soup = baseline_model_soup(&ex).unwrap();
        for c in 0..4 {
            let oracle = ex.iter().map(|e| e.mean[c]).sum::<f64>() / 7.0;
            assert!((soup[c] - oracle).abs() < 1e-12);
        }
        let q = stub_embed("q", 8).unwrap().vector;
        let full = baseline_topk_merge(&q, &ex, 7).unwrap();
        for (a, b) in full.iter().zip(&soup) {
            assert!((a - b).abs() < 1e-12);
        }
        let nearest = select_topk(&similarities(&q, &ex).unwrap(), 1).unwrap().indices[0];
        assert_eq!(baseline_topk_merge(&q, &ex, 1).unwrap(), ex[nearest].mean);
        let hot = baseline_topk_weighted(&q, &ex, 3, 1e6).unwrap();
        let flat = baseline_topk_merge(&q, &ex, 3).unwrap();
        assert!(hot.iter().zip(&flat).all(|(a, b)| (a - b).abs() < 1e-3));
        let p = build_prior(&q, &ex, 3, 0.05, None).unwrap();
        let chosen: Vec<_> = p.indices.iter().map(|&i| &ex[i]).collect();
        let direct = prior_mean(&fusion_weights(&p.similarities, 0.05).unwrap(), &chosen).unwrap();
        assert_eq!(baseline_topk_weighted(&q, &ex, 3, 0.05).unwrap(), direct);
        assert_eq!("topk-merge".parse::<MergeMethod>().unwrap(), MergeMethod::TopkMerge);
        assert!("best".parse::<MergeMethod>().is_err());
    }

    proptest! {
        #[test]
        fn weights_are_a_distribution(sims in proptest::collection::vec(-1.0f64..1.0, 1..10), tau in 0.01f64..10.0) {
            let w = fusion_weights(&sims, tau).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(w.iter().all(|&x| x > 0.0));
        }

        #[test]
        fn topk_set_invariant_under_positive_scaling(
            sims in proptest::collection::vec(-1.0f64..1.0, 1..10),
            scale in 0.01f64..100.0,
            k in 1usize..6,
        ) {
            let a = select_topk(&sims, k).unwrap();
            let scaled: Vec<f64> = sims.iter().map(|s| s * scale).collect();
            let b = select_topk(&scaled, k).unwrap();
            let mut ai = a.indices.clone();
            let mut bi = b.indices.clone();
            ai.sort_unstable();
            bi.sort_unstable();
            prop_assert_eq!(ai, bi);
        }

        #[test]
        fn prior_mean_in_convex_hull(seed in 0u64..500, k in 1usize..5, tau in 0.01f64..1.0) {
            let ex = random_experts(5, 4, seed);
            let q = stub_embed(&format!("q{seed}"), 8).unwrap().vector;
            let p = build_prior(&q, &ex, k, tau, None).unwrap();
            for c in 0..4 {
                let vals: Vec<f64> = p.indices.iter().map(|&i| ex[i].mean[c]).collect();
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(p.mean[c] >= lo - 1e-12 && p.mean[c] <= hi + 1e-12);
                prop_assert!(p.var[c] >= VAR_FLOOR);
            }
            prop_assert!(p.similarities.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}
