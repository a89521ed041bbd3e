//! Central finite-difference checks of every differentiable primitive and
//! of the full training objective on a reduced model.

use std::collections::BTreeMap;

use rand::Rng;

use crate::corpus::{generate_synthetic, SyntheticSpec, Vocabulary};
use crate::episodes::{partition_support, sample_episode, EpisodeSpec};
use crate::error::Result;
use crate::model::{Bound, EncoderConfig, EncoderKind, HeadConfig, HeadKind, Model, ModelConfig, ModelParams};
use crate::numkernel::gradcheck::CoordMismatch;
use crate::numkernel::{check_gradients, multi_head_self_attention, AttentionParams, GradCheckConfig, Tape, Tensor, Var};
use crate::rng::SeedRng;
use crate::training::episode_loss;

/// Largest accepted relative error between analytic and numeric slopes.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Finite-difference step.
pub const GRAD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub cases: usize,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub worst: Option<CoordMismatch>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error <= GRAD_TOLERANCE
    }
}

type Objective = Box<dyn for<'t> Fn(&'t Tape, &BTreeMap<String, Tensor>) -> Result<Var<'t>> + Sync>;

fn random(rng: &mut SeedRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("random tensor")
        .trainable()
}

/// `Σ out ⊙ W` with `W` fixed by `seed`, so every output coordinate
/// contributes a distinct slope.
fn probe(out: Var<'_>, seed: u64) -> Var<'_> {
    let shape = out.shape();
    let mut rng = SeedRng::new(seed);
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("probe weights");
    out.mul(out.tape().constant(&w)).expect("probe shape").sum()
}

fn p<'t>(tape: &'t Tape, params: &BTreeMap<String, Tensor>, name: &str) -> Var<'t> {
    tape.param(name, &params[name])
}

struct Case {
    params: BTreeMap<String, Tensor>,
    objective: Objective,
}

fn case(params: Vec<(&str, Tensor)>, objective: Objective) -> Case {
    Case {
        params: params.into_iter().map(|(n, t)| (n.to_string(), t)).collect(),
        objective,
    }
}

fn primitive_case(name: &str, rng: &mut SeedRng, seed: u64) -> Case {
    let m = rng.gen_range(1..=4);
    let n = rng.gen_range(2..=5);
    let k = rng.gen_range(1..=4);
    match name {
        "matmul" => case(
            vec![("a", random(rng, &[m, k])), ("b", random(rng, &[k, n]))],
            Box::new(move |t, ps| Ok(probe(p(t, ps, "a").matmul(p(t, ps, "b"))?, seed))),
        ),
        "add" | "sub" | "mul" => {
            let op = name.to_string();
            case(
                vec![("a", random(rng, &[m, n])), ("b", random(rng, &[m, n]))],
                Box::new(move |t, ps| {
                    let (a, b) = (p(t, ps, "a"), p(t, ps, "b"));
                    let out = match op.as_str() {
                        "add" => a.add(b)?,
                        "sub" => a.sub(b)?,
                        _ => a.mul(b)?,
                    };
                    Ok(probe(out, seed))
                }),
            )
        }
        "add_row" | "mul_row" => {
            let mul = name == "mul_row";
            case(
                vec![("a", random(rng, &[m, n])), ("b", random(rng, &[n]))],
                Box::new(move |t, ps| {
                    let (a, b) = (p(t, ps, "a"), p(t, ps, "b"));
                    Ok(probe(if mul { a.mul_row(b)? } else { a.add_row(b)? }, seed))
                }),
            )
        }
        "affine" | "tanh" | "sigmoid" | "relu" | "sum" | "mean" | "transpose" | "softmax" | "layer_norm"
        | "reshape" | "sum_axis" | "mean_axis" => {
            let op = name.to_string();
            case(
                vec![("a", random(rng, &[m, n]))],
                Box::new(move |t, ps| {
                    let a = p(t, ps, "a");
                    let out = match op.as_str() {
                        "affine" => a.affine(1.7, -0.3),
                        "tanh" => a.tanh(),
                        "sigmoid" => a.sigmoid(),
                        "relu" => a.relu(),
                        "sum" => a.sum(),
                        "mean" => a.mean(),
                        "transpose" => a.transpose()?,
                        "softmax" => a.softmax()?,
                        "layer_norm" => a.layer_norm()?,
                        "reshape" => a.reshape(&[m * n])?,
                        "sum_axis" => a.sum_axis(0)?,
                        _ => a.mean_axis(1)?,
                    };
                    Ok(probe(out, seed))
                }),
            )
        }
        "concat" => case(
            vec![("a", random(rng, &[m, n])), ("b", random(rng, &[m, k]))],
            Box::new(move |t, ps| Ok(probe(t.concat(&[p(t, ps, "a"), p(t, ps, "b")])?, seed))),
        ),
        "stack" => case(
            vec![("a", random(rng, &[n])), ("b", random(rng, &[n])), ("c", random(rng, &[n]))],
            Box::new(move |t, ps| Ok(probe(t.stack(&[p(t, ps, "a"), p(t, ps, "b"), p(t, ps, "c")])?, seed))),
        ),
        "concat_rows" => case(
            vec![("a", random(rng, &[m, n])), ("b", random(rng, &[k, n]))],
            Box::new(move |t, ps| Ok(probe(t.concat_rows(&[p(t, ps, "a"), p(t, ps, "b")])?, seed))),
        ),
        "gather_rows" => {
            let rows: Vec<usize> = (0..m + 2).map(|_| rng.gen_range(0..m)).collect();
            case(
                vec![("a", random(rng, &[m, n]))],
                Box::new(move |t, ps| Ok(probe(p(t, ps, "a").gather_rows(&rows)?, seed))),
            )
        }
        "slice_cols" => {
            let start = rng.gen_range(0..n - 1);
            let end = rng.gen_range(start + 1..=n);
            case(
                vec![("a", random(rng, &[m, n]))],
                Box::new(move |t, ps| Ok(probe(p(t, ps, "a").slice_cols(start, end)?, seed))),
            )
        }
        "sq_euclidean" | "cosine" => {
            let cos = name == "cosine";
            case(
                vec![("a", random(rng, &[n])), ("b", random(rng, &[n]))],
                Box::new(move |t, ps| {
                    let (a, b) = (p(t, ps, "a"), p(t, ps, "b"));
                    Ok(if cos { a.cosine(b)? } else { a.sq_euclidean(b)? }.scale(0.9))
                }),
            )
        }
        "softmax_neglogprob" => {
            let target = rng.gen_range(0..n);
            case(
                vec![("a", random(rng, &[n]))],
                Box::new(move |t, ps| p(t, ps, "a").softmax_neglogprob(target)),
            )
        }
        "conv1d_maxpool" => {
            let window = [1, 3, 5][rng.gen_range(0..3)];
            let lengths: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(1..=5)).collect();
            let total = lengths.iter().sum();
            let d = rng.gen_range(1..=3);
            let f = rng.gen_range(1..=4);
            case(
                vec![
                    ("seq", random(rng, &[total, d])),
                    ("filters", random(rng, &[window * d, f])),
                    ("bias", random(rng, &[f])),
                ],
                Box::new(move |t, ps| {
                    let out = t.conv1d_maxpool_segments(
                        p(t, ps, "seq"),
                        &lengths,
                        p(t, ps, "filters"),
                        p(t, ps, "bias"),
                        window,
                    )?;
                    Ok(probe(out, seed))
                }),
            )
        }
        "self_attention" => {
            let heads = rng.gen_range(1..=2);
            let d = heads * rng.gen_range(1..=3);
            let l = rng.gen_range(1..=4);
            let mut params = vec![("seq", random(rng, &[l, d]))];
            for name in ["wq", "wk", "wv", "wo"] {
                params.push((name, random(rng, &[d, d])));
            }
            for name in ["bq", "bk", "bv", "bo"] {
                params.push((name, random(rng, &[d])));
            }
            case(
                params,
                Box::new(move |t, ps| {
                    let attn = AttentionParams {
                        query: p(t, ps, "wq"),
                        query_bias: p(t, ps, "bq"),
                        key: p(t, ps, "wk"),
                        key_bias: p(t, ps, "bk"),
                        value: p(t, ps, "wv"),
                        value_bias: p(t, ps, "bv"),
                        output: p(t, ps, "wo"),
                        output_bias: p(t, ps, "bo"),
                    };
                    Ok(probe(multi_head_self_attention(p(t, ps, "seq"), &attn, heads)?.output, seed))
                }),
            )
        }
        other => panic!("unknown primitive {other}"),
    }
}

pub const PRIMITIVES: [&str; 28] = [
    "matmul",
    "add",
    "sub",
    "mul",
    "add_row",
    "mul_row",
    "affine",
    "tanh",
    "sigmoid",
    "relu",
    "sum",
    "mean",
    "sum_axis",
    "mean_axis",
    "reshape",
    "transpose",
    "softmax",
    "layer_norm",
    "concat",
    "stack",
    "concat_rows",
    "gather_rows",
    "slice_cols",
    "sq_euclidean",
    "cosine",
    "softmax_neglogprob",
    "conv1d_maxpool",
    "self_attention",
];

fn run_cases(name: &str, cases: Vec<Case>, config: &GradCheckConfig) -> Result<SuiteResult> {
    let mut result = SuiteResult {
        name: name.to_string(),
        cases: cases.len(),
        checked: 0,
        skipped_kinks: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for c in cases {
        let report = check_gradients(&c.params, config, &c.objective)?;
        result.checked += report.checked;
        result.skipped_kinks += report.skipped_kinks;
        if report.max_rel_error >= result.max_rel_error {
            result.max_rel_error = report.max_rel_error;
            result.worst = report.worst;
        }
    }
    Ok(result)
}

/// Checks every primitive on `cases` random shapes.
pub fn primitive_suite(seed: u64, cases: usize) -> Result<Vec<SuiteResult>> {
    let config = GradCheckConfig {
        step: GRAD_STEP,
        ..GradCheckConfig::default()
    };
    PRIMITIVES
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let mut rng = SeedRng::new(seed).split(name, 0);
            let built = (0..cases)
                .map(|c| primitive_case(name, &mut rng, seed ^ ((i * 1000 + c) as u64)))
                .collect();
            run_cases(name, built, &config)
        })
        .collect()
}

/// Model configuration small enough for exhaustive finite differences.
pub fn reduced_model_config(encoder: EncoderKind, head: HeadKind) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            kind: encoder,
            word_dim: 8,
            pos_dim: 4,
            cnn_window: 3,
            cnn_filters: 6,
            tf_layers: 1,
            tf_dim: 8,
            tf_heads: 2,
            tf_ff_dim: 8,
            max_pos_dist: 4,
        },
        head: HeadConfig {
            relation_hidden: 5,
            ..HeadConfig::new(head)
        },
    }
}

/// Checks `L_query + λ·L_aux` for every encoder and head on `cases`
/// random tiny episodes. At most `max_coords` coordinates are perturbed
/// per case.
pub fn loss_suite(seed: u64, cases: usize, lambda: f64, max_coords: usize) -> Result<Vec<SuiteResult>> {
    let corpus = generate_synthetic(&SyntheticSpec {
        num_labels: 4,
        examples_per_label: 6,
        vocab_size: 30,
        min_len: 2,
        max_len: 6,
        signal_strength: 0.8,
        signatures_per_label: 2,
        seed,
    })?;
    let vocab = Vocabulary::from_corpora([&corpus]);
    let mut out = Vec::new();
    for encoder in [EncoderKind::Cnn, EncoderKind::Transformer] {
        for head in HeadKind::ALL {
            let name = format!("loss_total {encoder} {head}");
            let root = SeedRng::new(seed).split(&name, 0);
            let mut built = Vec::new();
            for c in 0..cases as u64 {
                let model = Model::random(reduced_model_config(encoder, head), vocab.clone(), &mut root.split("init", c))?;
                let spec = EpisodeSpec::new(3, 3, 2)?;
                let episode = sample_episode(&corpus, &spec, &mut root.split("episode", c))?;
                let partition = partition_support(&episode, 1, &mut root.split("partition", c))?;
                let (config, vocab) = (model.config.clone(), vocab.clone());
                built.push(Case {
                    params: model.params.as_map().clone(),
                    objective: Box::new(move |t, ps| {
                        let params = ModelParams::from_map(ps.clone());
                        let bound = Bound::trainable(t, &params);
                        Ok(episode_loss(&bound, &config, &vocab, &episode, Some(&partition), lambda)?.total)
                    }),
                });
            }
            let config = GradCheckConfig {
                step: GRAD_STEP,
                max_coords: Some(max_coords),
                seed,
                ..GradCheckConfig::default()
            };
            out.push(run_cases(&name, built, &config)?);
        }
    }
    Ok(out)
}
