//! End-to-end acceptance checks. Each criterion prints one PASS or FAIL
//! line; the process exits non-zero if any fails.

mod common;

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use sitemeta_core::backbone::{batch_loss, init_params, Batch, ModelSpec};
use sitemeta_core::episodes::{mosaic_preprocess, synth_generate, Episode, SiteTable, SynthConfig};
use sitemeta_core::eval::{
    auc_permutation_p_value, finetune_few_shot, roc_auc, scratch_baseline, transfer_baseline,
    zero_shot_eval, BaselineConfig,
};
use sitemeta_core::metalearn::{
    episode_loss, meta_train, Checkpoint, CheckpointRing, LearnableLRTable, Learner, MetaConfig,
    MetaModel, Order, RING_CAPACITY,
};
use sitemeta_core::tensor::{finite_diff_grad, grad, grad_tensors, ParamSet, Tensor};
use sitemeta_core::util::rng_stream;
use sitemeta_core::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    diff / b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-8)
}

fn rand_batch(rng: &mut impl Rng, n: usize, d: usize) -> Batch {
    let x = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y = (0..n).map(|i| (i % 2) as f64).collect();
    Batch::new(
        Tensor::new(&[n, d], x).unwrap(),
        Tensor::from_vec(y).unwrap(),
    )
    .unwrap()
}

fn episode(support: Batch, target: Batch) -> Episode {
    Episode {
        site_ids: vec![0],
        support_indices: vec![(0..support.len()).collect()],
        target_indices: vec![(0..target.len()).collect()],
        support,
        target,
    }
}

fn steps_config(steps: usize, order: Order) -> MetaConfig {
    MetaConfig {
        inner_steps: steps,
        order,
        msl_anneal_epochs: 4,
        ..MetaConfig::default()
    }
}

fn meta_gradient_oracle() -> Outcome {
    let start = Instant::now();
    let spec = ModelSpec::mlp(&[4, 6, 1]).unwrap();
    let mut worst: f64 = 0.0;
    for trial in 0..20u64 {
        let mut rng = rng_stream(trial, 100);
        let steps = 1 + (trial % 3) as usize;
        let ep = episode(rand_batch(&mut rng, 6, 4), rand_batch(&mut rng, 4, 4));
        let cfg = steps_config(steps, Order::Second);
        let p = init_params(&spec, trial).unwrap();
        let table = LearnableLRTable::new(&p, steps, 0.4).unwrap();
        let leaves = p.to_leaves();
        let (loss, _) = episode_loss(&spec, &leaves, &ep, &table.tensors(true), &cfg, 1).unwrap();
        let analytic = grad(&loss, &leaves, false).unwrap();
        let numeric = finite_diff_grad(
            |q| {
                Ok(episode_loss(&spec, q, &ep, &table.tensors(false), &cfg, 1)?
                    .0
                    .item())
            },
            &p,
            1e-6,
        )
        .unwrap();
        worst = worst.max(rel_err(&analytic.flatten(), &numeric.flatten()));
    }
    let elapsed = start.elapsed();
    outcome(
        spec.num_params() <= 50 && worst < 1e-4 && elapsed < Duration::from_secs(30),
        format!(
            "{} params, worst relative error {worst:.2e} over 20 trials, {elapsed:.2?}",
            spec.num_params()
        ),
    )
}

/// `L(θ) = Σ θ²`, independent of the batch.
struct Quadratic;

impl Learner for Quadratic {
    fn loss(&self, params: &ParamSet, _batch: &Batch) -> Result<Tensor> {
        let t = params.tensor(0);
        t.mul(t)?.sum()
    }
}

fn dummy_episode() -> Episode {
    let b = Batch::new(
        Tensor::zeros(&[2, 1]).unwrap(),
        Tensor::from_vec(vec![0.0, 1.0]).unwrap(),
    )
    .unwrap();
    episode(b.clone(), b)
}

fn quadratic_oracle() -> Outcome {
    let theta = ParamSet::new(vec![("theta".into(), Tensor::from_vec(vec![1.0]).unwrap())])
        .unwrap()
        .to_leaves();
    let table = LearnableLRTable::new(&theta, 1, 0.1).unwrap();
    let (loss, _) = episode_loss(
        &Quadratic,
        &theta,
        &dummy_episode(),
        &table.tensors(false),
        &steps_config(1, Order::Second),
        0,
    )
    .unwrap();
    let g = grad(&loss, &theta, false).unwrap().tensor(0).item();
    let (l, g_err) = (loss.item(), (g - 1.28).abs());
    outcome(
        (l - 0.64).abs() < 1e-10 && g_err < 1e-10,
        format!("loss {l}, meta-gradient {g}"),
    )
}

fn zero_rate_degeneracy() -> Outcome {
    let spec = ModelSpec::mlp(&[4, 6, 1]).unwrap();
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let mut rng = rng_stream(seed, 101);
        let ep = episode(rand_batch(&mut rng, 6, 4), rand_batch(&mut rng, 4, 4));
        let theta = init_params(&spec, seed).unwrap().to_leaves();
        for steps in 1..=3 {
            let zero = LearnableLRTable::from_rates(
                theta.names().map(String::from).collect(),
                vec![vec![0.0; steps]; theta.len()],
            )
            .unwrap();
            let (loss, _) = episode_loss(
                &spec,
                &theta,
                &ep,
                &zero.tensors(true),
                &steps_config(steps, Order::Second),
                2,
            )
            .unwrap();
            let plain = batch_loss(&spec, &theta, &ep.target).unwrap();
            worst = worst.max((loss.item() - plain.item()).abs());
            let meta = grad(&loss, &theta, false).unwrap().flatten();
            let ordinary = grad(&plain, &theta, false).unwrap().flatten();
            worst = meta
                .iter()
                .zip(&ordinary)
                .fold(worst, |w, (a, b)| w.max((a - b).abs()));
        }
    }
    outcome(worst < 1e-10, format!("max deviation {worst:.2e}"))
}

/// Negated mean signed score, linear in θ.
struct Linear;

impl Learner for Linear {
    fn loss(&self, params: &ParamSet, batch: &Batch) -> Result<Tensor> {
        let n = batch.len();
        let signs = Tensor::new(
            &[n, 1],
            batch.labels.data().iter().map(|y| 1.0 - 2.0 * y).collect(),
        )?;
        batch.features.matmul(params.tensor(0))?.mul(&signs)?.mean()
    }
}

fn first_second_order_agreement() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let mut rng = rng_stream(seed, 102);
        let ep = episode(rand_batch(&mut rng, 8, 5), rand_batch(&mut rng, 6, 5));
        let init = Tensor::new(
            &[5, 1],
            (0..5).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let theta = ParamSet::new(vec![("w".into(), init)]).unwrap().to_leaves();
        let table = LearnableLRTable::new(&theta, 3, 0.3).unwrap();
        let grads = [Order::First, Order::Second].map(|order| {
            let rates = table.tensors(true);
            let (loss, _) =
                episode_loss(&Linear, &theta, &ep, &rates, &steps_config(3, order), 0).unwrap();
            let mut wrt = vec![theta.tensor(0)];
            wrt.extend((0..3).map(|s| rates.get(0, s)));
            grad_tensors(&loss, &wrt, false).unwrap()
        });
        for (a, b) in grads[0].iter().zip(&grads[1]) {
            worst = a
                .data()
                .iter()
                .zip(b.data())
                .fold(worst, |w, (x, y)| w.max((x - y).abs()));
        }
    }
    outcome(
        worst < 1e-8,
        format!("max difference {worst:.2e} over 10 seeds"),
    )
}

fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn auc_oracle() -> Outcome {
    let mut rng = rng_stream(0, 103);
    let mut failures = Vec::new();
    let mut instances = 0;
    while instances < 200 {
        let n = rng.random_range(2..=12);
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        if !labels.contains(&0) || !labels.contains(&1) {
            continue;
        }
        instances += 1;
        // Coarse values so that ties are common.
        let scores: Vec<f64> = (0..n)
            .map(|_| f64::from(rng.random_range(0..6u8)) * 0.25 - 0.5)
            .collect();
        let auc = roc_auc(&scores, &labels).unwrap();
        if (auc - brute_force_auc(&scores, &labels)).abs() > 1e-12 {
            failures.push(format!("brute force #{instances}"));
        }
        let moved: Vec<f64> = scores.iter().map(|s| (1.7 * s + 0.3).exp()).collect();
        if roc_auc(&moved, &labels).unwrap() != auc {
            failures.push(format!("monotone #{instances}"));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let y: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        if roc_auc(&s, &y).unwrap() != auc {
            failures.push(format!("order #{instances}"));
        }
        let mut distinct: Vec<f64> = (0..n).map(|i| i as f64).collect();
        distinct.shuffle(&mut rng);
        let flipped: Vec<u8> = labels.iter().map(|y| 1 - y).collect();
        let sum = roc_auc(&distinct, &labels).unwrap() + roc_auc(&distinct, &flipped).unwrap();
        if (sum - 1.0).abs() > 1e-12 {
            failures.push(format!("label flip #{instances}"));
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "200 instances; brute force, label flip, monotone and order checks hold".to_string()
        } else {
            format!("failed: {}", failures.join(", "))
        },
    )
}

fn mosaic_contract() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    for extents in [[32, 32, 32], [91, 91, 91], [128, 96, 80]] {
        let n: usize = extents.iter().product();
        let varied = Tensor::new(
            &extents,
            (0..n)
                .map(|i| ((i * 7919) % 1013) as f64 / 1013.0)
                .collect(),
        )
        .unwrap();
        let shape = mosaic_preprocess(&varied).unwrap().shape().to_vec();
        let constant = mosaic_preprocess(&Tensor::new(&extents, vec![3.25; n]).unwrap()).unwrap();
        let spread = constant
            .data()
            .iter()
            .fold(0.0f64, |m, v| m.max((v - 3.25).abs()));
        pass &= shape == [68, 432] && spread < 1e-9;
        notes.push(format!(
            "{}x{}x{} -> {:?} (constant spread {spread:.1e})",
            extents[0], extents[1], extents[2], shape
        ));
    }
    outcome(pass, notes.join("; "))
}

struct SeedResult {
    seed: u64,
    meta: f64,
    transfer: f64,
    scratch: f64,
    p_value: f64,
    zero_shot: f64,
    null_p95: f64,
    zero_shot_untouched: bool,
    candidates: usize,
    ring_len: usize,
    selected: Option<usize>,
}

fn table(seed: u64) -> SiteTable {
    synth_generate(&SynthConfig {
        heterogeneity: 1.0,
        split: [30, 7, 1],
        n_sites: 38,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn run_seed(seed: u64) -> SeedResult {
    let t = table(seed);
    let spec = ModelSpec::mlp(&[16, 32, 1]).unwrap();
    let config = MetaConfig {
        k_support: 20,
        t_target: 10,
        seed,
        ..MetaConfig::default()
    };
    let trained =
        meta_train(&t, &spec, &config).unwrap_or_else(|f| panic!("seed {seed}: {}", f.error));
    let meta = finetune_few_shot(&trained.ring, &t, &config, &mut rng_stream(seed, 7)).unwrap();
    let (scores, labels): (Vec<f64>, Vec<u8>) = meta
        .predictions
        .iter()
        .flat_map(|p| p.scores.iter().copied().zip(p.labels.iter().copied()))
        .unzip();
    let p_value =
        auc_permutation_p_value(&scores, &labels, 1000, &mut rng_stream(seed, 104)).unwrap();

    let baseline = BaselineConfig {
        k_support: 20,
        seed,
        ..BaselineConfig::default()
    };
    let transfer = transfer_baseline(&t, &spec, &baseline).unwrap();
    let scratch = scratch_baseline(&t, &spec, &baseline).unwrap();

    let best = trained.ring.best().unwrap();
    let before = best.params.fingerprint();
    let zero_shot = zero_shot_eval(best, &t).unwrap();
    let zero_shot_untouched = best.params.fingerprint() == before;
    let mut null: Vec<f64> = (0..100u64)
        .map(|i| {
            let model = MetaModel::init(
                &spec,
                &MetaConfig {
                    seed: 10_000 + i,
                    ..config.clone()
                },
            )
            .unwrap();
            let ckpt = Checkpoint {
                score: 0.0,
                epoch: 0,
                spec: spec.clone(),
                params: model.params,
                lr_table: model.lr_table,
                config: config.clone(),
            };
            zero_shot_eval(&ckpt, &t).unwrap().pooled_auc
        })
        .collect();
    null.sort_by(f64::total_cmp);

    SeedResult {
        seed,
        meta: meta.pooled_auc,
        transfer: transfer.meta_test.pooled_auc,
        scratch: scratch.pooled_auc,
        p_value,
        zero_shot: zero_shot.pooled_auc,
        null_p95: null[94],
        zero_shot_untouched,
        candidates: meta.candidates,
        ring_len: trained.ring.len(),
        selected: meta.selected_checkpoint,
    }
}

fn ordering(results: &[SeedResult], elapsed: Duration) -> Outcome {
    let ordered = results
        .iter()
        .filter(|r| r.meta > r.transfer && r.transfer > r.scratch)
        .count();
    let significant = results.iter().filter(|r| r.p_value < 0.01).count();
    for r in results {
        println!(
            "    seed {}: meta {:.3} > transfer {:.3} > scratch {:.3}: {}, permutation p {:.4}",
            r.seed,
            r.meta,
            r.transfer,
            r.scratch,
            r.meta > r.transfer && r.transfer > r.scratch,
            r.p_value
        );
    }
    outcome(
        ordered >= 8 && significant == results.len() && elapsed < Duration::from_secs(15 * 60),
        format!(
            "ordering holds in {ordered}/10 seeds, p < 0.01 in {significant}/10, {elapsed:.1?}"
        ),
    )
}

fn zero_shot_contract(results: &[SeedResult]) -> Outcome {
    let untouched = results.iter().all(|r| r.zero_shot_untouched);
    let above = results.iter().filter(|r| r.zero_shot > r.null_p95).count();
    for r in results {
        println!(
            "    seed {}: zero-shot AUC {:.3} vs null p95 {:.3}",
            r.seed, r.zero_shot, r.null_p95
        );
    }
    outcome(
        untouched && above >= 7,
        format!("parameters unchanged: {untouched}; above the null p95 in {above}/10 seeds"),
    )
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    common::small_pipeline(&out);
    let first = common::snapshot(&out);
    common::small_pipeline(&out);
    let second = common::snapshot(&out);
    let differing: Vec<&String> = first
        .keys()
        .filter(|k| second.get(*k) != first.get(*k))
        .collect();
    let same_files = first.len() == second.len();
    outcome(
        same_files && differing.is_empty(),
        format!(
            "{} output files compared, {} differ",
            first.len(),
            differing.len()
        ),
    )
}

fn ring_contract(results: &[SeedResult]) -> Outcome {
    use proptest::test_runner::{Config, TestRunner};
    let ckpt = |score: f64, epoch: usize| {
        let params =
            ParamSet::new(vec![("w".into(), Tensor::from_vec(vec![0.0]).unwrap())]).unwrap();
        Checkpoint {
            score,
            epoch,
            spec: ModelSpec::mlp(&[1, 1]).unwrap(),
            lr_table: LearnableLRTable::new(&params, 1, 0.1).unwrap(),
            params,
            config: MetaConfig::default(),
        }
    };
    let mut runner = TestRunner::new(Config {
        cases: 256,
        failure_persistence: None,
        ..Config::default()
    });
    let property = runner.run(&proptest::collection::vec(0u8..6, 0..40), |scores| {
        let mut ring = CheckpointRing::new();
        for (epoch, &s) in scores.iter().enumerate() {
            ring.offer(ckpt(f64::from(s), epoch));
        }
        let kept: Vec<(f64, usize)> = ring.entries().iter().map(|c| (c.score, c.epoch)).collect();
        let mut expected: Vec<(f64, usize)> = scores
            .iter()
            .enumerate()
            .map(|(e, &s)| (f64::from(s), e))
            .collect();
        expected.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        expected.truncate(RING_CAPACITY);
        proptest::prop_assert_eq!(kept, expected);
        Ok(())
    });
    let consumed = results
        .iter()
        .all(|r| r.ring_len == 5 && r.candidates == 5 && r.selected.is_some_and(|s| s < 5));
    outcome(
        property.is_ok() && consumed,
        format!(
            "ring property {}; meta-test compared 5 of 5 ring entries in {}/10 seeds",
            if property.is_ok() {
                "holds over 256 streams"
            } else {
                "fails"
            },
            results.iter().filter(|r| r.candidates == 5).count()
        ),
    )
}

fn main() {
    let mut all = true;
    let mut report = |n: usize, name: &str, o: Outcome| {
        all &= o.pass;
        println!(
            "criterion {n:>2} {name}: {} ({})",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    };
    report(
        1,
        "meta-gradient finite differences",
        meta_gradient_oracle(),
    );
    report(2, "analytic bilevel quadratic", quadratic_oracle());
    report(3, "zero-rate degeneracy", zero_rate_degeneracy());
    report(
        4,
        "first/second-order agreement",
        first_second_order_agreement(),
    );
    report(5, "roc_auc oracle and invariants", auc_oracle());
    report(6, "mosaic shape contract", mosaic_contract());

    let start = Instant::now();
    let results: Vec<SeedResult> = (0..10u64).into_par_iter().map(run_seed).collect();
    let elapsed = start.elapsed();
    report(7, "synthetic ordering", ordering(&results, elapsed));
    report(8, "zero-shot contract", zero_shot_contract(&results));
    report(9, "CLI determinism", cli_determinism());
    report(10, "checkpoint ring", ring_contract(&results));

    if !all {
        std::process::exit(1);
    }
}
