//! Browser demo: prototype classification of 2-D points, the leave-out
//! loss breakdown of a labelled point set, and query label perturbation.

use fewshot_ec::corpus::{generate_synthetic, EventExample, SyntheticSpec};
use fewshot_ec::episodes::{partition_support, perturb_labels, sample_episode, Episode, EpisodeSpec, Shot};
use fewshot_ec::model::{argmax, classify, prototypes_attention, prototypes_mean, HeadConfig, HeadKind};
use fewshot_ec::numkernel::Tensor;
use fewshot_ec::rng::SeedRng;
use fewshot_ec::training::{aux_loss_from_encodings, query_loss_from_encodings};
use fewshot_ec::{Error, Result};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

/// A point of the canvas; `query` points are classified, the rest form the
/// support set.
#[derive(Debug, Clone, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub class: usize,
    #[serde(default)]
    pub query: bool,
}

fn head(name: &str) -> Result<HeadConfig> {
    let kind: HeadKind = serde_json::from_value(serde_json::Value::String(name.into()))
        .map_err(|_| Error::Config(format!("unknown head {name}")))?;
    if kind == HeadKind::Relation {
        return Err(Error::Config("the relation head needs trained weights".into()));
    }
    Ok(HeadConfig::new(kind))
}

fn vec2(p: &Point) -> Tensor {
    Tensor::vector(vec![p.x, p.y])
}

/// Support vectors grouped by class, classes `0..n` all present.
fn support(points: &[Point]) -> Result<Vec<Vec<Tensor>>> {
    let n = points.iter().filter(|p| !p.query).map(|p| p.class + 1).max().unwrap_or(0);
    let mut classes = vec![Vec::new(); n];
    for p in points.iter().filter(|p| !p.query) {
        classes[p.class].push(vec2(p));
    }
    if n < 2 || classes.iter().any(Vec::is_empty) {
        return Err(Error::Config("every class needs at least one support point".into()));
    }
    Ok(classes)
}

#[derive(Debug, Serialize)]
pub struct Field {
    pub resolution: usize,
    /// Row-major winning class per cell, from the top-left corner.
    pub classes: Vec<usize>,
    pub confidence: Vec<f64>,
    pub means: Vec<[f64; 2]>,
}

/// Classifies every cell centre of a `resolution`² grid over `[-1, 1]²`.
pub fn field(points: &[Point], head_name: &str, resolution: usize) -> Result<Field> {
    let head = head(head_name)?;
    let support = support(points)?;
    let means = prototypes_mean(&support)?;
    let mut out = Field {
        resolution,
        classes: Vec::with_capacity(resolution * resolution),
        confidence: Vec::with_capacity(resolution * resolution),
        means: means.iter().map(|m| [m.data()[0], m.data()[1]]).collect(),
    };
    let step = 2.0 / resolution as f64;
    for row in 0..resolution {
        for col in 0..resolution {
            let q = Tensor::vector(vec![-1.0 + (col as f64 + 0.5) * step, 1.0 - (row as f64 + 0.5) * step]);
            let protos = if head.kind == HeadKind::ProtoAtt {
                prototypes_attention(&support, &q, head.attention_activation)?
            } else {
                means.clone()
            };
            let p = classify(&q, &protos, &head, None)?;
            let best = argmax(&p);
            out.classes.push(best);
            out.confidence.push(p[best]);
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct Breakdown {
    pub query: f64,
    pub aux: f64,
    pub total: f64,
    /// Positions, within each class's support points, held out as
    /// auxiliary queries.
    pub aux_query: Vec<Vec<usize>>,
}

/// Query, leave-out and combined losses of the point set. Classes are cut
/// to the smallest class's support size so every class has K points.
pub fn breakdown(points: &[Point], head_name: &str, q_aux: usize, lambda: f64, seed: u64) -> Result<Breakdown> {
    let head = head(head_name)?;
    let mut support = support(points)?;
    let k = support.iter().map(Vec::len).min().unwrap_or(0);
    for class in &mut support {
        class.truncate(k);
    }
    let queries: Vec<(Tensor, usize)> = points
        .iter()
        .filter(|p| p.query && p.class < support.len())
        .map(|p| (vec2(p), p.class))
        .collect();
    if queries.is_empty() {
        return Err(Error::Config("add at least one query point".into()));
    }
    // the partition only looks at the episode's shape
    let episode = Episode {
        label_universe: (0..support.len()).map(|c| c.to_string()).collect(),
        support: (0..support.len())
            .map(|c| {
                (0..k)
                    .map(|i| Shot {
                        id: c * k + i,
                        example: EventExample::new(vec!["·".into()], 0, c.to_string()).expect("one-token example"),
                    })
                    .collect()
            })
            .collect(),
        query: Vec::new(),
    };
    let partition = partition_support(&episode, q_aux, &mut SeedRng::new(seed))?;
    let query = query_loss_from_encodings(&head, None, &support, &queries)?;
    let aux = aux_loss_from_encodings(&head, None, &support, &partition)?;
    Ok(Breakdown {
        query,
        aux,
        total: query + lambda * aux,
        aux_query: partition.aux_query,
    })
}

#[derive(Debug, Serialize)]
pub struct Perturbed {
    pub labels: Vec<String>,
    /// `(trigger word, true class, training class)` for every query.
    pub queries: Vec<(String, usize, usize)>,
    pub changed: usize,
}

/// Samples an episode from a small synthetic corpus and perturbs its
/// query labels at `rate`.
pub fn perturb(n_way: usize, q_query: usize, rate: f64, seed: u64) -> Result<Perturbed> {
    let corpus = generate_synthetic(&SyntheticSpec {
        num_labels: n_way,
        examples_per_label: 1 + q_query,
        vocab_size: 200,
        seed,
        ..SyntheticSpec::default()
    })?;
    let episode = sample_episode(&corpus, &EpisodeSpec::new(n_way, 1, q_query)?, &mut SeedRng::new(seed))?;
    let noisy = perturb_labels(&episode, rate, &mut SeedRng::new(seed).split("noise", 0))?;
    let queries: Vec<(String, usize, usize)> = episode
        .query
        .iter()
        .zip(&noisy.query)
        .map(|(a, b)| (a.shot.example.trigger_word().to_string(), a.class, b.class))
        .collect();
    Ok(Perturbed {
        changed: queries.iter().filter(|q| q.1 != q.2).count(),
        labels: episode.label_universe,
        queries,
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsValue> {
    r.and_then(|v| Ok(serde_json::to_string(&v)?))
        .map_err(|e| JsValue::from_str(&e.to_string()))
}

fn parse_points(json: &str) -> Result<Vec<Point>> {
    serde_json::from_str(json).map_err(|e| Error::Config(format!("points: {e}")))
}

#[wasm_bindgen(js_name = classifyField)]
pub fn classify_field(points: &str, head: &str, resolution: usize) -> std::result::Result<String, JsValue> {
    to_js(parse_points(points).and_then(|p| field(&p, head, resolution)))
}

#[wasm_bindgen(js_name = lossBreakdown)]
pub fn loss_breakdown(points: &str, head: &str, q_aux: usize, lambda: f64, seed: u64) -> std::result::Result<String, JsValue> {
    to_js(parse_points(points).and_then(|p| breakdown(&p, head, q_aux, lambda, seed)))
}

#[wasm_bindgen(js_name = perturbEpisode)]
pub fn perturb_episode(n_way: usize, q_query: usize, rate: f64, seed: u64) -> std::result::Result<String, JsValue> {
    to_js(perturb(n_way, q_query, rate, seed))
}
