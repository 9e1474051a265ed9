use proptest::prelude::*;

use sglora::adapters::flatten;
use sglora::cvae::{train, CvaeConfig, GenerateMode};
use sglora::repository::{build_repository, BuildOptions, ExpertEntry};
use sglora::router::{build_prior, MergeMethod};
use sglora::semantics::{apply_template, mean_embedding, stub_embed, PHOTO_TEMPLATE};
use sglora::synthbench::{eval_task, make_family, train_oracle, BenchConfig};

fn small() -> BenchConfig {
    BenchConfig {
        n_tasks: 8,
        n_experts: 4,
        n_train: 2,
        oracle_epochs: 150,
        checkpoints: 8,
        ..BenchConfig::default()
    }
}

#[test]
fn library_end_to_end() {
    let config = small();
    let family = make_family(&config, 11).unwrap();
    let options = config.oracle_options();
    let records: Vec<_> = family
        .tasks
        .iter()
        .map(|t| train_oracle(t, &family, &options, 11).unwrap().record)
        .collect();
    let experts: Vec<String> = config
        .expert_indices()
        .into_iter()
        .map(|i| family.tasks[i].task_id.clone())
        .collect();
    let (repo, warnings) = build_repository(
        &records,
        &experts,
        &family.layout,
        &BuildOptions {
            train_fraction: 0.5,
            seed: 11,
        },
    )
    .unwrap();
    assert!(warnings.is_empty(), "{warnings:?}");
    assert_eq!(repo.experts().len(), 4);
    assert_eq!(repo.manifest().train.len() + repo.manifest().eval.len(), 4);

    let cvae = CvaeConfig {
        epochs: 40,
        hidden: 32,
        latent_dim: 4,
        cond_dim: 16,
        batch_size: 4,
        ..config.cvae.clone()
    };
    let (model, trace) = train::<f32>(&repo, &repo.manifest().train, &cvae).unwrap();
    assert_eq!(trace.len(), 40);
    assert!(trace.last().unwrap().total < trace[0].total);

    let eval_id = &repo.manifest().eval[0];
    let task = family.task(eval_id).unwrap();
    let prior = build_prior::<f32>(&task.embedding, repo.experts(), cvae.k, cvae.tau, None).unwrap();
    let a = model.generate(&prior, 1, GenerateMode::Mean, 0).unwrap();
    let b = model.generate(&prior, 1, GenerateMode::Mean, 99).unwrap();
    assert_eq!(a, b);
    let v: Vec<f64> = flatten(&a[0]).0.iter().map(|&x| x as f64).collect();
    let generated = eval_task(&v, task, &family).unwrap();
    let zero = eval_task(&vec![0.0; v.len()], task, &family).unwrap();
    assert!(generated.loss.is_finite());
    assert!(
        generated.loss < zero.loss,
        "{} vs zero-shot {}",
        generated.loss,
        zero.loss
    );

    let draws = model.generate(&prior, 3, GenerateMode::Stochastic, 5).unwrap();
    assert_eq!(draws.len(), 3);
    assert_ne!(draws[0], draws[1]);
    assert_eq!(draws, model.generate(&prior, 3, GenerateMode::Stochastic, 5).unwrap());
}

#[test]
fn described_tasks_embed_and_route() {
    let captions: Vec<_> = ["red fox", "arctic fox", "fennec fox"]
        .iter()
        .map(|c| stub_embed(&apply_template(c, PHOTO_TEMPLATE).unwrap(), 12).unwrap())
        .collect();
    assert_eq!(captions[0].description, "a photo of a red fox");
    let fox = mean_embedding("fox", &captions).unwrap();
    assert_eq!(fox.task_id, "fox");
    let norm: f32 = fox.vector.iter().map(|v| v * v).sum::<f32>().sqrt();
    assert!((norm - 1.0).abs() < 1e-5);
    let experts: Vec<ExpertEntry<f64>> = captions
        .iter()
        .enumerate()
        .map(|(i, c)| ExpertEntry {
            task_id: c.task_id.clone(),
            embedding: c.vector.clone(),
            mean: vec![i as f64; 3],
            var: vec![0.1; 3],
        })
        .collect();
    let prior = build_prior(&fox.vector, &experts, 2, 0.05, Some(&captions[0].task_id)).unwrap();
    assert!(!prior.task_ids.contains(&captions[0].task_id));
    assert_eq!(prior.task_ids.len(), 2);
}

fn experts_strategy() -> impl Strategy<Value = (Vec<ExpertEntry<f64>>, Vec<f32>)> {
    (2usize..7, 1usize..6).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(
                (
                    prop::collection::vec(-1.0f32..1.0, 4),
                    prop::collection::vec(-5.0f64..5.0, d),
                    prop::collection::vec(0.01f64..2.0, d),
                ),
                n,
            ),
            prop::collection::vec(-1.0f32..1.0, 4),
        )
            .prop_filter_map("non-degenerate embeddings", |(raw, q)| {
                let unit = |v: &[f32]| {
                    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
                    (n > 1e-3).then(|| v.iter().map(|x| x / n).collect::<Vec<f32>>())
                };
                let experts = raw
                    .iter()
                    .enumerate()
                    .map(|(i, (e, m, v))| {
                        Some(ExpertEntry {
                            task_id: format!("e{i}"),
                            embedding: unit(e)?,
                            mean: m.clone(),
                            var: v.clone(),
                        })
                    })
                    .collect::<Option<Vec<_>>>()?;
                Some((experts, unit(&q)?))
            })
    })
}

proptest! {
    #[test]
    fn merges_stay_inside_the_expert_hull((experts, query) in experts_strategy(), k in 1usize..8, tau in 0.01f64..10.0) {
        for method in [MergeMethod::ModelSoup, MergeMethod::TopkMerge, MergeMethod::TopkWeighted] {
            let merged = method.merge(&query, &experts, k, tau).unwrap();
            for (c, &v) in merged.iter().enumerate() {
                let lo = experts.iter().map(|e| e.mean[c]).fold(f64::INFINITY, f64::min);
                let hi = experts.iter().map(|e| e.mean[c]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn prior_variance_dominates_the_weighted_expert_variance((experts, query) in experts_strategy(), k in 1usize..8) {
        let prior = build_prior(&query, &experts, k, 0.05, None).unwrap();
        let total: f64 = prior.weights.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        for c in 0..prior.var.len() {
            let within: f64 = prior
                .indices
                .iter()
                .zip(&prior.weights)
                .map(|(&i, w)| w * experts[i].var[c])
                .sum();
            prop_assert!(prior.var[c] >= within - 1e-9);
        }
    }
}
