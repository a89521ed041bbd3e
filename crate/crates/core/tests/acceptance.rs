//! Acceptance checks, one line per criterion. Run with
//! `cargo test -p fewshot-ec --test acceptance`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use fewshot_ec::corpus::{EventExample, LabeledCorpus, SyntheticSpec};
use fewshot_ec::episodes::{
    partition_support, perturb_labels, perturbation_count, sample_episode, EpisodeSpec, SupportPartition,
};
use fewshot_ec::evalcli::gradsuite::{loss_suite, primitive_suite, GRAD_TOLERANCE};
use fewshot_ec::evalcli::{cli, evaluate, init_model, prepare_data, render_report, run_grid, RunConfig};
use fewshot_ec::model::{
    argmax, classify, classify_distances, prototypes_attention, prototypes_mean, AttentionActivation, EncoderConfig,
    HeadConfig, HeadKind, ModelParams,
};
use fewshot_ec::numkernel::Tensor;
use fewshot_ec::rng::SeedRng;
use fewshot_ec::training::{
    aux_loss_from_encodings, loss_query, loss_total, query_loss_from_encodings, train, LogRecord, TrainConfig,
};
use rand::seq::SliceRandom;
use rand::Rng;

const GRAD_MAX_REL_ERROR: f64 = 1e-4;
const GRAD_CASES: usize = 5;
const GRAD_BUDGET_SECS: f64 = 60.0;

const ORACLE_TOLERANCE: f64 = 1e-10;
const ORACLE_INSTANCES: usize = 1000;
const ORACLE_BUDGET_SECS: f64 = 120.0;

const NORMALIZATION_TOLERANCE: f64 = 1e-12;
const ATTENTION_MEAN_TOLERANCE: f64 = 1e-12;
const INVARIANT_SAMPLES: usize = 1000;
const INCLUSION_DRAWS: usize = 10_000;
const INCLUSION_TARGET: f64 = 0.4;
const INCLUSION_TOLERANCE: f64 = 0.02;

const E2E_EPISODES: usize = 2000;
const E2E_EVAL_EPISODES: usize = 1000;
const E2E_MIN_ACCURACY: f64 = 0.90;
const E2E_BUDGET_SECS: f64 = 900.0;

/// Seeds shared by the LoLoss and noise comparisons.
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const COMPARE_EPISODES: usize = 500;
const COMPARE_EVAL_EPISODES: usize = 300;
const NOISE_RATE: f64 = 0.5;
const GRID_NOISE_RATES: [f64; 3] = [0.2, 0.3, 0.5];

/// Criteria that cannot hold as stated. They still run and print FAIL, but
/// do not fail the process; if one starts passing, the process fails so the
/// list is revisited.
const EXPECTED_FAILURES: &[&str] = &["end-to-end convergence, 28 labels split 20/4/4"];

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_suite() -> Outcome {
    assert_eq!(GRAD_TOLERANCE, GRAD_MAX_REL_ERROR);
    let start = Instant::now();
    let mut results = primitive_suite(11, GRAD_CASES).map_err(|e| e.to_string())?;
    results.extend(loss_suite(11, GRAD_CASES, 0.1, 200).map_err(|e| e.to_string())?);
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed() || r.cases < GRAD_CASES)
        .map(|r| format!("{} ({:.2e})", r.name, r.max_rel_error))
        .collect();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let detail = format!(
        "{} suites, worst relative error {worst:.2e} ≤ {GRAD_MAX_REL_ERROR:e}, {secs:.1}s < {GRAD_BUDGET_SECS}s{}",
        results.len(),
        if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(", ")) }
    );
    check(failed.is_empty() && secs < GRAD_BUDGET_SECS, detail)
}

// Independent scalar re-implementations of the head computations.

type V = Vec<f64>;

struct RelationWeights {
    w1: V,
    b1: V,
    w2: V,
    b2: f64,
    hidden: usize,
}

fn o_mean(support: &[V]) -> V {
    let d = support[0].len();
    let mut out = vec![0.0; d];
    for s in support {
        for k in 0..d {
            out[k] += s[k];
        }
    }
    for v in &mut out {
        *v /= support.len() as f64;
    }
    out
}

fn o_attention(support: &[V], q: &V, tanh: bool) -> V {
    let d = q.len();
    let mut b = Vec::new();
    for s in support {
        let mut t = 0.0;
        for k in 0..d {
            let x = s[k] * q[k];
            t += if tanh { x.tanh() } else { x };
        }
        b.push(t);
    }
    let m = b.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = b.iter().map(|x| (x - m).exp()).sum();
    let mut out = vec![0.0; d];
    for (s, bj) in support.iter().zip(&b) {
        let a = (bj - m).exp() / z;
        for k in 0..d {
            out[k] += a * s[k];
        }
    }
    out
}

fn o_distance(kind: HeadKind, a: &V, b: &V, rel: &RelationWeights) -> f64 {
    match kind {
        HeadKind::Proto | HeadKind::ProtoAtt => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
        HeadKind::Matching => {
            let mut dot = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            for k in 0..a.len() {
                dot += a[k] * b[k];
                na += a[k] * a[k];
                nb += b[k] * b[k];
            }
            1.0 - dot / (na.sqrt() * nb.sqrt())
        }
        HeadKind::Relation => {
            let pair: V = a.iter().chain(b).cloned().collect();
            let mut out = rel.b2;
            for j in 0..rel.hidden {
                let mut h = rel.b1[j];
                for (i, x) in pair.iter().enumerate() {
                    h += x * rel.w1[i * rel.hidden + j];
                }
                out += h.max(0.0) * rel.w2[j];
            }
            1.0 - 1.0 / (1.0 + (-out).exp())
        }
    }
}

fn o_prototypes(kind: HeadKind, support: &[Vec<V>], q: &V) -> Vec<V> {
    support
        .iter()
        .map(|c| if kind == HeadKind::ProtoAtt { o_attention(c, q, true) } else { o_mean(c) })
        .collect()
}

fn o_probabilities(kind: HeadKind, support: &[Vec<V>], q: &V, rel: &RelationWeights) -> V {
    let d: V = o_prototypes(kind, support, q).iter().map(|c| o_distance(kind, q, c, rel)).collect();
    let m = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let z: f64 = d.iter().map(|x| (m - x).exp()).sum();
    d.iter().map(|x| (m - x).exp() / z).collect()
}

fn o_nll(kind: HeadKind, support: &[Vec<V>], q: &V, target: usize, rel: &RelationWeights) -> f64 {
    let d: V = o_prototypes(kind, support, q).iter().map(|c| o_distance(kind, q, c, rel)).collect();
    let m = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let z: f64 = d.iter().map(|x| (m - x).exp()).sum();
    d[target] - m + z.ln()
}

fn o_query_loss(kind: HeadKind, support: &[Vec<V>], queries: &[(V, usize)], rel: &RelationWeights) -> f64 {
    let mut total = 0.0;
    for (q, t) in queries {
        total += o_nll(kind, support, q, *t, rel);
    }
    total / queries.len() as f64
}

fn o_aux_loss(kind: HeadKind, support: &[Vec<V>], part: &SupportPartition, rel: &RelationWeights) -> f64 {
    let reduced: Vec<Vec<V>> = support
        .iter()
        .zip(&part.aux_support)
        .map(|(c, rows)| rows.iter().map(|&j| c[j].clone()).collect())
        .collect();
    let mut total = 0.0;
    for (c, rows) in part.aux_query.iter().enumerate() {
        for &j in rows {
            total += o_nll(kind, &reduced, &support[c][j], c, rel);
        }
    }
    total
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = SeedRng::new(2024);
    let mut worst = [0.0f64; 5];
    let names = ["mean prototype", "attention prototype", "classifier", "query loss", "leave-out loss"];
    for _ in 0..ORACLE_INSTANCES {
        for kind in HeadKind::ALL {
            let n = rng.gen_range(2..=4);
            let k = rng.gen_range(2..=5);
            let d = rng.gen_range(1..=8);
            let mut draw = |len: usize| -> V { (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect() };
            let support: Vec<Vec<V>> = (0..n).map(|_| (0..k).map(|_| draw(d)).collect()).collect();
            let q = draw(d);
            let hidden = 3;
            let rel = RelationWeights {
                w1: draw(2 * d * hidden),
                b1: draw(hidden),
                w2: draw(hidden),
                b2: draw(1)[0],
                hidden,
            };
            let queries: Vec<(V, usize)> = (0..n).flat_map(|c| (0..2).map(move |_| c)).map(|c| (draw(d), c)).collect();
            let mut rows: Vec<usize> = (0..k).collect();
            let q_aux = rng.gen_range(1..k);
            let mut part = SupportPartition { aux_support: Vec::new(), aux_query: Vec::new() };
            for _ in 0..n {
                rows.shuffle(&mut rng);
                part.aux_query.push(rows[..q_aux].to_vec());
                part.aux_support.push(rows[q_aux..].to_vec());
            }

            let t = |v: &V| Tensor::vector(v.clone());
            let t_support: Vec<Vec<Tensor>> = support.iter().map(|c| c.iter().map(t).collect()).collect();
            let t_queries: Vec<(Tensor, usize)> = queries.iter().map(|(v, c)| (t(v), *c)).collect();
            let params = ModelParams::from_map(BTreeMap::from([
                ("relation.w1".to_string(), Tensor::matrix(2 * d, hidden, rel.w1.clone()).unwrap()),
                ("relation.b1".to_string(), t(&rel.b1)),
                ("relation.w2".to_string(), Tensor::matrix(hidden, 1, rel.w2.clone()).unwrap()),
                ("relation.b2".to_string(), Tensor::vector(vec![rel.b2])),
            ]));
            let head = HeadConfig::new(kind);
            let relation = (kind == HeadKind::Relation).then_some(&params);
            let err = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);

            let means = prototypes_mean(&t_support).map_err(|e| e.to_string())?;
            for (m, c) in means.iter().zip(&support) {
                worst[0] = worst[0].max(err(&m.data(), &o_mean(c)));
            }
            for (act, tanh) in [(AttentionActivation::Tanh, true), (AttentionActivation::Identity, false)] {
                let att = prototypes_attention(&t_support, &t(&q), act).map_err(|e| e.to_string())?;
                for (a, c) in att.iter().zip(&support) {
                    worst[1] = worst[1].max(err(&a.data(), &o_attention(c, &q, tanh)));
                }
            }
            let protos = if kind == HeadKind::ProtoAtt {
                prototypes_attention(&t_support, &t(&q), AttentionActivation::Tanh).map_err(|e| e.to_string())?
            } else {
                means
            };
            let p = classify(&t(&q), &protos, &head, relation).map_err(|e| e.to_string())?;
            worst[2] = worst[2].max(err(&p, &o_probabilities(kind, &support, &q, &rel)));
            let lq = query_loss_from_encodings(&head, relation, &t_support, &t_queries).map_err(|e| e.to_string())?;
            worst[3] = worst[3].max((lq - o_query_loss(kind, &support, &queries, &rel)).abs());
            let la = aux_loss_from_encodings(&head, relation, &t_support, &part).map_err(|e| e.to_string())?;
            worst[4] = worst[4].max((la - o_aux_loss(kind, &support, &part, &rel)).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let parts: Vec<String> = names.iter().zip(&worst).map(|(n, w)| format!("{n} {w:.1e}")).collect();
    let detail = format!(
        "{ORACLE_INSTANCES}×4 heads, max |diff| {} (≤ {ORACLE_TOLERANCE:e}), {secs:.1}s < {ORACLE_BUDGET_SECS}s",
        parts.join(", ")
    );
    check(worst.iter().all(|w| *w <= ORACLE_TOLERANCE) && secs < ORACLE_BUDGET_SECS, detail)
}

fn toy_corpus(labels: usize, per_label: usize) -> LabeledCorpus {
    let mut v = Vec::new();
    for l in 0..labels {
        for i in 0..per_label {
            v.push(EventExample::new(vec![format!("t{l}_{i}"), "x".into()], i % 2, format!("L{l:02}")).unwrap());
        }
    }
    LabeledCorpus::new(v)
}

fn invariant_suite() -> Outcome {
    let mut rng = SeedRng::new(99);
    let mut problems = Vec::new();

    let mut norm_err = 0.0f64;
    for _ in 0..INVARIANT_SAMPLES {
        let n = rng.gen_range(2..10);
        let d: V = (0..n).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let p = classify_distances(&d);
        norm_err = norm_err.max((p.iter().sum::<f64>() - 1.0).abs());
        let nearest = (0..n).fold(0, |b, i| if d[i] < d[b] { i } else { b });
        if argmax(&p) != nearest || p.iter().any(|x| *x < 0.0) {
            problems.push("argmax differs from nearest prototype".to_string());
            break;
        }
    }
    if norm_err > NORMALIZATION_TOLERANCE {
        problems.push(format!("probabilities sum off by {norm_err:e}"));
    }

    let mut att_err = 0.0f64;
    for _ in 0..INVARIANT_SAMPLES {
        let d = rng.gen_range(1..9);
        let v: V = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let q = Tensor::vector((0..d).map(|_| rng.gen_range(-3.0..3.0)).collect());
        let support = vec![vec![Tensor::vector(v.clone()); rng.gen_range(1..6)]];
        let att = prototypes_attention(&support, &q, AttentionActivation::Tanh).map_err(|e| e.to_string())?;
        for (a, b) in att[0].data().iter().zip(&v) {
            att_err = att_err.max((a - b).abs());
        }
    }
    if att_err > ATTENTION_MEAN_TOLERANCE {
        problems.push(format!("attention prototype differs from mean by {att_err:e}"));
    }

    let corpus = toy_corpus(6, 7);
    let ep = sample_episode(&corpus, &EpisodeSpec::new(3, 5, 1).unwrap(), &mut SeedRng::new(1)).unwrap();
    let root = SeedRng::new(77);
    let mut hits = [0usize; 5];
    for i in 0..INCLUSION_DRAWS {
        let p = partition_support(&ep, 2, &mut root.split("draw", i as u64)).map_err(|e| e.to_string())?;
        for c in 0..3 {
            let mut all: Vec<usize> = p.aux_support[c].iter().chain(&p.aux_query[c]).copied().collect();
            all.sort_unstable();
            if all != [0, 1, 2, 3, 4] || p.aux_query[c].len() != 2 {
                problems.push(format!("partition {i} does not split class {c} exactly"));
            }
        }
        for &j in &p.aux_query[0] {
            hits[j] += 1;
        }
    }
    let freq: Vec<f64> = hits.iter().map(|h| *h as f64 / INCLUSION_DRAWS as f64).collect();
    if freq.iter().any(|f| (f - INCLUSION_TARGET).abs() > INCLUSION_TOLERANCE) {
        problems.push(format!("inclusion frequencies {freq:?}"));
    }

    for i in 0..INVARIANT_SAMPLES {
        let n = rng.gen_range(2..7);
        let q = rng.gen_range(1..6);
        let rate = rng.gen_range(0.0..=1.0);
        let c = toy_corpus(n, 1 + q);
        let ep = sample_episode(&c, &EpisodeSpec::new(n, 1, q).unwrap(), &mut SeedRng::new(i as u64)).unwrap();
        let noisy = perturb_labels(&ep, rate, &mut rng).map_err(|e| e.to_string())?;
        let changed = ep.query.iter().zip(&noisy.query).filter(|(a, b)| a.class != b.class).count();
        let want = (rate * (n * q) as f64 + 1e-9).floor() as usize;
        if changed != want || perturbation_count(rate, n * q) != want {
            problems.push(format!("rate {rate} over {} queries changed {changed}, want {want}", n * q));
            break;
        }
    }

    for i in 0..INVARIANT_SAMPLES {
        let labels = rng.gen_range(2..9);
        let n = rng.gen_range(2..=labels);
        let (k, q) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let c = toy_corpus(labels, k + q + rng.gen_range(0..3));
        let ep = sample_episode(&c, &EpisodeSpec::new(n, k, q).unwrap(), &mut SeedRng::new(i as u64)).unwrap();
        let support: HashSet<usize> = ep.support.iter().flatten().map(|s| s.id).collect();
        let query: HashSet<usize> = ep.query.iter().map(|x| x.shot.id).collect();
        if support.len() != n * k || query.len() != n * q || !support.is_disjoint(&query) {
            problems.push(format!("episode {i} support and query overlap"));
            break;
        }
    }

    check(
        problems.is_empty(),
        if problems.is_empty() {
            format!(
                "sum err {norm_err:.1e}, attention-mean err {att_err:.1e}, inclusion {:.4}..{:.4}",
                freq.iter().cloned().fold(1.0, f64::min),
                freq.iter().cloned().fold(0.0, f64::max)
            )
        } else {
            problems.join("; ")
        },
    )
}

fn reduced(run: &mut RunConfig) {
    run.encoder = EncoderConfig {
        word_dim: 50,
        pos_dim: 10,
        cnn_filters: 100,
        ..EncoderConfig::default()
    };
}

fn trained_checkpoint(run: &RunConfig) -> Result<String, String> {
    let data = prepare_data(&run.data).map_err(|e| e.to_string())?;
    let model = init_model(run, &data.vocab).map_err(|e| e.to_string())?;
    let spec = run.eval.spec().map_err(|e| e.to_string())?;
    let out = train(&data.splits.train, Some(&data.splits.dev), model, &run.train, &spec).map_err(|e| e.to_string())?;
    out.best.to_json().map_err(|e| e.to_string())
}

fn baseline_recovery() -> Outcome {
    let mut run = RunConfig::default();
    reduced(&mut run);
    run.head = HeadConfig::new(HeadKind::ProtoAtt);
    let data = prepare_data(&run.data).map_err(|e| e.to_string())?;
    let model = init_model(&run, &data.vocab).map_err(|e| e.to_string())?;
    let spec = run.eval.spec().map_err(|e| e.to_string())?;
    for s in 0..20 {
        let ep = sample_episode(&data.splits.train, &spec, &mut SeedRng::new(s)).map_err(|e| e.to_string())?;
        let q = loss_query(&model, &ep).map_err(|e| e.to_string())?;
        let t = loss_total(&model, &ep, 2, 0.0, &mut SeedRng::new(s + 100)).map_err(|e| e.to_string())?;
        if q.to_bits() != t.to_bits() {
            return Err(format!("episode {s}: loss_total {t} ≠ loss_query {q}"));
        }
    }
    run.train.episodes = 30;
    run.train.eval_every = 10;
    run.train.dev_episodes = 20;
    let off = TrainConfig { lolos: false, ..run.train.clone() };
    let zero = TrainConfig { lolos: true, lambda: 0.0, ..run.train.clone() };
    let a = trained_checkpoint(&RunConfig { train: off, ..run.clone() })?;
    let b = trained_checkpoint(&RunConfig { train: zero, ..run.clone() })?;
    check(a == b, format!("20 episodes bitwise equal losses; 30-episode checkpoints equal: {}", a == b))
}

fn e2e_run(num_labels: usize, split: [usize; 3]) -> Outcome {
    let start = Instant::now();
    let mut run = RunConfig::default();
    run.data.synthetic = SyntheticSpec {
        num_labels,
        examples_per_label: 50,
        vocab_size: 2000,
        signal_strength: 1.0,
        seed: 7,
        ..SyntheticSpec::default()
    };
    run.data.split = split;
    run.head = HeadConfig::new(HeadKind::Proto);
    run.train.lolos = false;
    run.train.episodes = E2E_EPISODES;
    run.train.learning_rate = 1e-3;
    run.eval.episodes = E2E_EVAL_EPISODES;
    let data = prepare_data(&run.data).map_err(|e| e.to_string())?;
    let model = init_model(&run, &data.vocab).map_err(|e| e.to_string())?;
    let spec = run.eval.spec().map_err(|e| e.to_string())?;
    let out = train(&data.splits.train, Some(&data.splits.dev), model, &run.train, &spec)
        .map_err(|e| format!("training failed: {e}"))?;
    let report = evaluate(&data.splits.test, &out.best, &spec, run.eval.episodes, run.eval.seed)
        .map_err(|e| format!("evaluation failed: {e}"))?;
    let secs = start.elapsed().as_secs_f64();
    check(
        report.mean_accuracy >= E2E_MIN_ACCURACY && secs < E2E_BUDGET_SECS,
        format!(
            "test 5-way 5-shot {:.4} ± {:.4} (≥ {E2E_MIN_ACCURACY}), best dev {:.4}, {secs:.0}s < {E2E_BUDGET_SECS}s",
            report.mean_accuracy,
            report.ci95,
            out.best_dev_accuracy.unwrap_or(f64::NAN)
        ),
    )
}

fn e2e_as_stated() -> Outcome {
    e2e_run(28, [20, 4, 4])
}

fn e2e_five_test_labels() -> Outcome {
    e2e_run(30, [20, 5, 5])
}

/// Runs shared by the LoLoss and noise checks are trained once.
static LOW_SIGNAL_RUNS: Mutex<Option<HashMap<(u64, bool, u64), (f64, bool)>>> = Mutex::new(None);

fn low_signal_run(seed: u64, lolos: bool, noise_rate: f64) -> Result<(f64, bool), String> {
    let key = (seed, lolos, noise_rate.to_bits());
    if let Some(hit) = LOW_SIGNAL_RUNS.lock().unwrap().get_or_insert_with(HashMap::new).get(&key) {
        return Ok(*hit);
    }
    let result = train_low_signal(seed, lolos, noise_rate)?;
    LOW_SIGNAL_RUNS.lock().unwrap().get_or_insert_with(HashMap::new).insert(key, result);
    Ok(result)
}

fn train_low_signal(seed: u64, lolos: bool, noise_rate: f64) -> Result<(f64, bool), String> {
    let mut run = RunConfig::default();
    reduced(&mut run);
    run.data.synthetic.signal_strength = 0.7;
    run.data.synthetic.examples_per_label = 20;
    run.head = HeadConfig::new(HeadKind::Proto);
    run.train.lolos = lolos;
    run.train.lambda = 0.1;
    run.train.q_aux = 2;
    run.train.noise_rate = noise_rate;
    run.train.episodes = COMPARE_EPISODES;
    run.train.eval_every = 100;
    run.train.dev_episodes = 50;
    run.train.seed = seed;
    run.eval.episodes = COMPARE_EVAL_EPISODES;
    run.eval.seed = seed;
    let data = prepare_data(&run.data).map_err(|e| e.to_string())?;
    let model = init_model(&run, &data.vocab).map_err(|e| e.to_string())?;
    let spec = run.eval.spec().map_err(|e| e.to_string())?;
    let out = train(&data.splits.train, Some(&data.splits.dev), model, &run.train, &spec).map_err(|e| e.to_string())?;
    let finite = out.log.iter().all(|r| match r {
        LogRecord::Step { loss_total, .. } => loss_total.is_finite(),
        LogRecord::Dev { dev_accuracy, .. } => dev_accuracy.is_finite(),
    });
    let report = evaluate(&data.splits.test, &out.best, &spec, run.eval.episodes, run.eval.seed).map_err(|e| e.to_string())?;
    Ok((report.mean_accuracy, finite))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt_all(v: &[f64]) -> String {
    v.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(" ")
}

fn lolos_direction() -> Outcome {
    let mut base = Vec::new();
    let mut lolos = Vec::new();
    for s in SEEDS {
        base.push(low_signal_run(s, false, 0.0)?.0);
        lolos.push(low_signal_run(s, true, 0.0)?.0);
    }
    check(
        mean(&lolos) >= mean(&base),
        format!(
            "Proto+LoLoss mean {:.4} [{}] vs Proto {:.4} [{}]",
            mean(&lolos),
            fmt_all(&lolos),
            mean(&base),
            fmt_all(&base)
        ),
    )
}

fn noise_protocol() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for lolos in [false, true] {
        let mut clean = Vec::new();
        let mut noisy = Vec::new();
        for s in SEEDS {
            let (a, fa) = low_signal_run(s, lolos, 0.0)?;
            let (b, fb) = low_signal_run(s, lolos, NOISE_RATE)?;
            ok &= fa && fb;
            clean.push(a);
            noisy.push(b);
        }
        ok &= mean(&noisy) < mean(&clean);
        lines.push(format!(
            "{} rate 0 {:.4} → rate {NOISE_RATE} {:.4}",
            if lolos { "Proto+LoLoss" } else { "Proto" },
            mean(&clean),
            mean(&noisy)
        ));
    }

    let mut run = RunConfig::default();
    reduced(&mut run);
    run.data.synthetic.signal_strength = 0.7;
    run.data.synthetic.examples_per_label = 20;
    run.train.episodes = 50;
    run.train.eval_every = 25;
    run.train.dev_episodes = 20;
    run.eval.episodes = 50;
    run.eval.grid.heads = vec![HeadKind::Proto];
    run.eval.grid.shots = vec![[5, 5]];
    run.eval.grid.noise_rates = GRID_NOISE_RATES.to_vec();
    let data = prepare_data(&run.data).map_err(|e| e.to_string())?;
    let grid = run_grid(&data, &run).map_err(|e| e.to_string())?;
    let rendered = render_report(&grid, true).map_err(|e| e.to_string())?;
    let rates: HashSet<u64> = grid
        .cells
        .iter()
        .filter(|c| c.report.is_some())
        .map(|c| c.key.noise_rate.to_bits())
        .collect();
    let emitted = GRID_NOISE_RATES.iter().all(|r| rates.contains(&r.to_bits())) && !rendered.text.is_empty();
    ok &= emitted;
    lines.push(format!("grid cells {} over rates {GRID_NOISE_RATES:?}", grid.cells.len()));
    check(ok, lines.join("; "))
}

fn files(dir: &Path, names: &[&str]) -> Vec<Vec<u8>> {
    names.iter().map(|n| fs::read(dir.join(n)).unwrap_or_default()).collect()
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = tmp.path().join("config.json");
    fs::write(
        &config,
        r#"{"data": {"synthetic": {"examples_per_label": 20}},
            "encoder": {"word_dim": 30, "pos_dim": 6, "cnn_filters": 40},
            "train": {"episodes": 40, "eval_every": 20, "dev_episodes": 20},
            "eval": {"episodes": 100}}"#,
    )
    .map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        for cmd in ["train", "eval"] {
            let args = ["fewshot-ec", cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "5"];
            let code = cli::run(args);
            if code != 0 {
                return Err(format!("{cmd} exited with {code}"));
            }
        }
        outputs.push(files(&out, &["checkpoint.json", "train_log.jsonl", "eval_report.json"]));
    }
    let same = outputs[0] == outputs[1] && outputs[0].iter().all(|f| !f.is_empty());
    check(same, format!("checkpoint, log and report identical across two runs: {same}"))
}

fn main() {
    let checks: [(&str, fn() -> Outcome); 9] = [
        ("gradient suite", gradient_suite),
        ("oracle equivalence", oracle_equivalence),
        ("invariant suite", invariant_suite),
        ("baseline recovery", baseline_recovery),
        ("end-to-end convergence, 28 labels split 20/4/4", e2e_as_stated),
        ("end-to-end convergence, 30 labels split 20/5/5", e2e_five_test_labels),
        ("LoLoss directional check", lolos_direction),
        ("noise protocol", noise_protocol),
        ("determinism", determinism),
    ];
    let mut unexpected = 0;
    let mut failed = 0;
    for (name, f) in checks {
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        let expected = EXPECTED_FAILURES.contains(&name);
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("{tag}  {name}: {detail} [{secs:.1}s]{}", if expected { " (expected: infeasible as stated)" } else { "" });
        if outcome.is_err() {
            failed += 1;
        }
        if outcome.is_err() != expected {
            unexpected += 1;
        }
    }
    println!("{} passed, {failed} failed, {unexpected} unexpected", checks.len() - failed);
    if unexpected > 0 {
        std::process::exit(1);
    }
}
