use serde::{Deserialize, Serialize};

use super::family::{make_family, make_family_with, Family};
use super::metrics::{eval_task, TaskScore};
use super::oracle::{train_oracle, OracleFit};
use super::BenchConfig;
use crate::cvae::{train, CvaeConfig, EpochLoss, GenerateMode};
use crate::error::{Error, Result, StageExt};
use crate::repository::{build_repository, BuildOptions, Repository};
use crate::router::{baseline_model_soup, baseline_topk_merge, build_prior, RouteReport};

/// Reported methods, in report order.
pub const METHODS: [&str; 7] = [
    "zero-shot",
    "model-soup",
    "topk-merge",
    "topk-weighted",
    "sg-lora",
    "sg-lora-best-of-n",
    "oracle",
];

/// Methods expected to improve left to right; the oracle check is separate.
const ORDER_CHAIN: [&str; 6] = [
    "oracle",
    "sg-lora",
    "topk-weighted",
    "topk-merge",
    "model-soup",
    "zero-shot",
];

/// Slack allowed when the oracle is compared against every other method.
const ORACLE_SLACK: f64 = 0.01;

/// Everything in a benchmark run that does not depend on the router's `k`.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub config: BenchConfig,
    pub seed: u64,
    pub family: Family,
    /// One per family task, same order.
    pub fits: Vec<OracleFit>,
    pub repository: Repository,
    pub warnings: Vec<String>,
    /// Repository with a second, tilted family's experts added.
    pub mixed: Option<Repository>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub task_id: String,
    pub loss: f64,
    /// L2 distance to the mean of the task's oracle checkpoints.
    pub param_l2: f64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub method: String,
    pub loss: f64,
    pub param_l2: f64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub seed: u64,
    pub k: usize,
    pub config: BenchConfig,
    pub repository_hash: String,
    pub experts: Vec<String>,
    pub train: Vec<String>,
    pub eval: Vec<String>,
    /// Largest final/initial oracle loss ratio across tasks.
    pub oracle_worst_ratio: f64,
    pub rows: Vec<MethodRow>,
    pub aggregates: Vec<MethodAggregate>,
    pub training: Vec<EpochLoss>,
    /// Route of the first eval task against the mixed-family repository.
    pub mixed_route: Option<RouteReport>,
    pub warnings: Vec<String>,
}

impl BenchReport {
    pub fn aggregate(&self, method: &str) -> Option<&MethodAggregate> {
        self.aggregates.iter().find(|a| a.method == method)
    }

    /// One line per method and task: `method,task_id,loss,r1,r5,r10`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,task_id,loss,r1,r5,r10\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:e},{},{},{}\n",
                r.method, r.task_id, r.loss, r.r1, r.r5, r.r10
            ));
        }
        out
    }
}

/// Builds the family, trains every oracle, and assembles the repository.
pub fn prepare(config: &BenchConfig, seed: u64) -> Result<Prepared> {
    config.validate()?;
    let family = make_family(config, seed).stage("family")?;
    let options = config.oracle_options();
    let fits = family
        .tasks
        .iter()
        .map(|t| train_oracle(t, &family, &options, seed))
        .collect::<Result<Vec<_>>>()
        .stage("oracle")?;
    let records: Vec<_> = fits.iter().map(|f| f.record.clone()).collect();
    let expert_ids: Vec<String> = config
        .expert_indices()
        .into_iter()
        .map(|i| family.tasks[i].task_id.clone())
        .collect();
    let rest = config.n_tasks - config.n_experts;
    let options = BuildOptions {
        train_fraction: config.n_train as f64 / rest as f64,
        seed,
    };
    let (repository, warnings) =
        build_repository(&records, &expert_ids, &family.layout, &options).stage("repository")?;
    let mixed = if config.mixed_family {
        Some(mixed_repository(config, seed, &repository).stage("mixed family")?)
    } else {
        None
    };
    Ok(Prepared {
        config: config.clone(),
        seed,
        family,
        fits,
        repository,
        warnings,
        mixed,
    })
}

/// Experts of a second family, offset by half a task spacing and tilted
/// out of the first family's embedding plane, joined with `base`.
fn mixed_repository(config: &BenchConfig, seed: u64, base: &Repository) -> Result<Repository> {
    let phase = std::f64::consts::PI / config.n_tasks as f64;
    let alt = make_family_with(config, seed, "alt", phase, config.mixed_tilt)?;
    let options = config.oracle_options();
    let records = config
        .expert_indices()
        .into_iter()
        .map(|i| train_oracle(&alt.tasks[i], &alt, &options, seed).map(|f| f.record))
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = records.iter().map(|r| r.task_id.clone()).collect();
    let (alt_repo, _) = build_repository(
        &records,
        &ids,
        &alt.layout,
        &BuildOptions {
            train_fraction: 0.0,
            seed,
        },
    )?;
    Repository::union(&[base.clone(), alt_repo])
}

fn mean_f64(rows: &[Vec<f32>]) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    for r in rows {
        out.iter_mut().zip(r).for_each(|(o, &v)| *o += v as f64);
    }
    out.iter_mut().for_each(|o| *o /= rows.len() as f64);
    out
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Trains the generator with routing width `k` and scores every method on
/// the eval tasks.
pub fn evaluate(prepared: &Prepared, k: usize) -> Result<BenchReport> {
    let config = &prepared.config;
    let repo = &prepared.repository;
    let family = &prepared.family;
    let cvae = CvaeConfig {
        k,
        tau: config.tau,
        seed: config.cvae.seed.wrapping_add(prepared.seed),
        ..config.cvae.clone()
    };
    let train_ids = repo.manifest().train.clone();
    let (model, training) = train::<f32>(repo, &train_ids, &cvae).stage("generator")?;

    let experts = repo.experts_as::<f64>();
    let soup = baseline_model_soup(&experts).stage("evaluation")?;
    let mut rows = Vec::new();
    for task_id in &repo.manifest().eval {
        let idx = family
            .tasks
            .iter()
            .position(|t| &t.task_id == task_id)
            .ok_or_else(|| Error::Validation(format!("eval task {task_id} is not in the family")))?;
        let task = &family.tasks[idx];
        let fit = &prepared.fits[idx];
        let target = mean_f64(&fit.record.checkpoints);
        let q = &task.embedding;

        let prior = build_prior(q, repo.experts(), k, config.tau, None).stage("evaluation")?;
        let to64 = |v: &[f32]| -> Vec<f64> { v.iter().map(|&x| x as f64).collect() };
        let mean = model.generate_vectors(&prior, 1, GenerateMode::Mean, 0)?.remove(0);
        let draws = model.generate_vectors(
            &prior,
            config.best_of,
            GenerateMode::Stochastic,
            cvae.seed.wrapping_add(idx as u64),
        )?;
        let mut best: Option<(TaskScore, Vec<f64>)> = None;
        for d in draws {
            let v = to64(&d);
            let s = eval_task(&v, task, family)?;
            if best.as_ref().is_none_or(|(b, _)| s.loss < b.loss) {
                best = Some((s, v));
            }
        }
        let best = best.expect("best_of >= 1");

        let candidates: [(&str, Vec<f64>); 6] = [
            ("zero-shot", vec![0.0; repo.param_len()]),
            ("model-soup", soup.clone()),
            ("topk-merge", baseline_topk_merge(q, &experts, k)?),
            ("topk-weighted", to64(&prior.mean)),
            ("sg-lora", to64(&mean)),
            ("oracle", fit.final_params.clone()),
        ];
        let mut scored: Vec<(&str, TaskScore, f64)> = Vec::with_capacity(METHODS.len());
        for (name, v) in &candidates {
            scored.push((name, eval_task(v, task, family).stage("evaluation")?, l2(v, &target)));
        }
        scored.insert(5, ("sg-lora-best-of-n", best.0, l2(&best.1, &target)));
        for (name, s, p) in scored {
            rows.push(MethodRow {
                method: name.to_string(),
                task_id: task_id.clone(),
                loss: s.loss,
                param_l2: p,
                r1: s.r1,
                r5: s.r5,
                r10: s.r10,
            });
        }
    }
    let mixed_route = match (&prepared.mixed, repo.manifest().eval.first()) {
        (Some(mixed), Some(first)) => {
            let task = family.task(first).expect("eval task in family");
            let prior =
                build_prior::<f32>(&task.embedding, mixed.experts(), k, config.tau, None).stage("mixed route")?;
            Some(prior.report(first.clone()))
        }
        _ => None,
    };
    let oracle_worst_ratio = prepared
        .fits
        .iter()
        .map(|f| f.final_loss / f.initial_loss)
        .fold(0.0, f64::max);
    Ok(BenchReport {
        seed: prepared.seed,
        k,
        config: config.clone(),
        repository_hash: repo.hash(),
        experts: repo.experts().iter().map(|e| e.task_id.clone()).collect(),
        train: train_ids,
        eval: repo.manifest().eval.clone(),
        oracle_worst_ratio,
        aggregates: aggregate(&rows),
        rows,
        training,
        mixed_route,
        warnings: prepared.warnings.clone(),
    })
}

fn aggregate(rows: &[MethodRow]) -> Vec<MethodAggregate> {
    METHODS
        .iter()
        .filter_map(|&m| {
            let mine: Vec<&MethodRow> = rows.iter().filter(|r| r.method == m).collect();
            if mine.is_empty() {
                return None;
            }
            let n = mine.len() as f64;
            let avg = |f: fn(&MethodRow) -> f64| mine.iter().map(|r| f(r)).sum::<f64>() / n;
            Some(MethodAggregate {
                method: m.to_string(),
                loss: avg(|r| r.loss),
                param_l2: avg(|r| r.param_l2),
                r1: avg(|r| r.r1),
                r5: avg(|r| r.r5),
                r10: avg(|r| r.r10),
            })
        })
        .collect()
}

/// One full run at the configured `k`.
pub fn run_benchmark(config: &BenchConfig, seed: u64) -> Result<BenchReport> {
    evaluate(&prepare(config, seed)?, config.k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairCheck {
    pub better: String,
    pub worse: String,
    pub better_loss: f64,
    pub worse_loss: f64,
    pub holds: bool,
    pub strict: bool,
}

/// Pooled-loss ordering of the method chain from oracle to zero-shot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub pairs: Vec<PairCheck>,
    pub strict_pairs: usize,
    /// Oracle within the slack of every other method.
    pub oracle_best: bool,
    pub passed: bool,
}

impl OrderingCheck {
    /// All adjacent pairs after the oracle hold, at least all but one
    /// strictly, and the oracle is best within 1%.
    pub fn from_aggregates(aggs: &[MethodAggregate]) -> Result<Self> {
        let loss = |m: &str| {
            aggs.iter()
                .find(|a| a.method == m)
                .map(|a| a.loss)
                .ok_or_else(|| Error::Validation(format!("method {m} missing from aggregates")))
        };
        let oracle = loss("oracle")?;
        let mut oracle_best = true;
        for a in aggs.iter().filter(|a| a.method != "oracle") {
            oracle_best &= oracle <= a.loss * (1.0 + ORACLE_SLACK);
        }
        let mut pairs = Vec::new();
        for w in ORDER_CHAIN[1..].windows(2) {
            let (b, l) = (loss(w[0])?, loss(w[1])?);
            pairs.push(PairCheck {
                better: w[0].to_string(),
                worse: w[1].to_string(),
                better_loss: b,
                worse_loss: l,
                holds: b <= l,
                strict: b < l,
            });
        }
        let strict_pairs = pairs.iter().filter(|p| p.strict).count();
        let passed = oracle_best && pairs.iter().all(|p| p.holds) && strict_pairs + 1 >= pairs.len();
        Ok(Self {
            pairs,
            strict_pairs,
            oracle_best,
            passed,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedReport {
    pub seeds: Vec<u64>,
    pub reports: Vec<BenchReport>,
    /// Per-method means pooled over every seed's eval tasks.
    pub aggregates: Vec<MethodAggregate>,
    pub ordering: OrderingCheck,
}

impl MultiSeedReport {
    pub fn aggregate(&self, method: &str) -> Option<&MethodAggregate> {
        self.aggregates.iter().find(|a| a.method == method)
    }

    /// Per-seed rows with the seed prefixed to the task id.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,task_id,loss,r1,r5,r10\n");
        for rep in &self.reports {
            for line in rep.to_csv().lines().skip(1) {
                let (method, rest) = line.split_once(',').expect("csv row");
                out.push_str(&format!("{method},seed{}/{rest}\n", rep.seed));
            }
        }
        out
    }
}

/// Runs `seeds` independently, one thread each up to the available
/// parallelism. Results do not depend on the thread count.
pub fn run_seeds(config: &BenchConfig, seeds: &[u64]) -> Result<MultiSeedReport> {
    if seeds.is_empty() {
        return Err(Error::Empty("no seeds".into()));
    }
    let reports = parallel_map(seeds, |&s| run_benchmark(config, s))?;
    let rows: Vec<MethodRow> = reports.iter().flat_map(|r| r.rows.clone()).collect();
    let aggregates = aggregate(&rows);
    let ordering = OrderingCheck::from_aggregates(&aggregates)?;
    Ok(MultiSeedReport {
        seeds: seeds.to_vec(),
        reports,
        aggregates,
        ordering,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KSweepEntry {
    pub k: usize,
    pub seeds: Vec<u64>,
    /// Pooled over seeds.
    pub aggregates: Vec<MethodAggregate>,
    pub clamped: bool,
}

/// Evaluates each `k` on shared oracle runs, retraining the generator per
/// `k`.
pub fn k_sweep(config: &BenchConfig, seeds: &[u64], ks: &[usize]) -> Result<Vec<KSweepEntry>> {
    if seeds.is_empty() || ks.is_empty() {
        return Err(Error::Empty("k sweep needs seeds and k values".into()));
    }
    let prepared = parallel_map(seeds, |&s| prepare(config, s))?;
    let mut jobs = Vec::new();
    for &k in ks {
        for p in &prepared {
            jobs.push((k, p));
        }
    }
    let reports = parallel_map(&jobs, |(k, p)| evaluate(p, *k))?;
    Ok(ks
        .iter()
        .map(|&k| {
            let rows: Vec<MethodRow> = reports
                .iter()
                .filter(|r| r.k == k)
                .flat_map(|r| r.rows.clone())
                .collect();
            KSweepEntry {
                k,
                seeds: seeds.to_vec(),
                aggregates: aggregate(&rows),
                clamped: k > config.n_experts,
            }
        })
        .collect())
}

fn parallel_map<I: Sync, O: Send>(items: &[I], f: impl Fn(&I) -> Result<O> + Sync) -> Result<Vec<O>> {
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(items.len().max(1));
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk.max(1))
            .map(|part| scope.spawn(move || part.iter().map(f).collect::<Result<Vec<O>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("benchmark worker panicked")?);
        }
        Ok(out)
    })
}

/// Fraction of steps over which the `window`-epoch moving average of the
/// total training loss does not increase.
pub fn smoothed_nonincreasing_fraction(trace: &[EpochLoss], window: usize) -> Option<f64> {
    if window == 0 || trace.len() < window + 1 {
        return None;
    }
    let smooth: Vec<f64> = trace
        .windows(window)
        .map(|w| w.iter().map(|e| e.total).sum::<f64>() / window as f64)
        .collect();
    let steps = smooth.len() - 1;
    let ok = smooth.windows(2).filter(|p| p[1] <= p[0]).count();
    Some(ok as f64 / steps as f64)
}
