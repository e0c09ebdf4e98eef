//! Finite-difference verification of analytic gradients.
//!
//! Checks run in `f64`. The relative error of one element is
//! `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)` where `numeric`
//! is the central difference `(f(x + ε) − f(x − ε)) / 2ε`. A non-finite error
//! is reported as NaN and always fails.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Bindings, Graph, NodeId, NodeKind, Op};
use crate::ops::{
    Add, ConcatChannels, Conv2d, MaxPool2, Mse, Mul, Relu, Scale, SoftmaxCrossEntropy, Sum, TransposedConv2x2,
    UpsampleBilinear2, WeightedSum, IGNORE_INDEX,
};
use crate::model::{build, Connectivity, PathwaySpec, Task, UmcConfig, UpsampleMode, INPUT_NAME, TINY_FILTERS};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const OP_TOLERANCE: f64 = 1e-6;
pub const MODEL_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_EPSILON: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
    if err.is_finite() {
        err
    } else {
        f64::NAN
    }
}

fn fold_max(acc: f64, e: f64) -> f64 {
    if acc.is_nan() || e.is_nan() {
        f64::NAN
    } else {
        acc.max(e)
    }
}

#[derive(Clone, Debug)]
pub struct CheckInput {
    pub tensor: Tensor<f64>,
    pub differentiable: bool,
}

impl CheckInput {
    pub fn var(tensor: Tensor<f64>) -> Self {
        Self {
            tensor,
            differentiable: true,
        }
    }

    pub fn constant(tensor: Tensor<f64>) -> Self {
        Self {
            tensor,
            differentiable: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Per input; `None` for non-differentiable inputs.
    pub per_input: Vec<Option<f64>>,
    pub elements_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < tolerance
    }
}

/// Check `op` at `inputs`. The op output is contracted with a fixed random
/// projection so every output element contributes to the scalar under test.
pub fn grad_check(op: Arc<dyn Op<f64>>, inputs: &[CheckInput], epsilon: f64, rng: &mut Rng) -> Result<GradCheckReport> {
    let mut g = Graph::<f64>::new();
    let mut ids = Vec::with_capacity(inputs.len());
    for (i, inp) in inputs.iter().enumerate() {
        let shape = inp.tensor.shape().iter().map(|&d| Some(d)).collect();
        ids.push(g.input(&format!("in{i}"), shape, inp.differentiable)?);
    }
    let arg_shapes: Vec<&[usize]> = inputs.iter().map(|c| c.tensor.shape()).collect();
    let out_shape = op.output_shape(&arg_shapes)?;
    let y = g.apply_arc(op, &ids)?;
    let proj = g.input("projection", out_shape.iter().map(|&d| Some(d)).collect(), false)?;
    let weighted = g.apply(Mul, &[y, proj])?;
    let loss = g.apply(Sum, &[weighted])?;

    let n: usize = out_shape.iter().product();
    let projection = Tensor::new(out_shape, (0..n).map(|_| rng.normal()).collect())?;
    let mut bindings: Bindings<f64> = inputs
        .iter()
        .enumerate()
        .map(|(i, c)| (format!("in{i}"), c.tensor.clone()))
        .collect();
    bindings.insert("projection".into(), projection);

    g.run(&bindings, &[loss])?;
    let analytic = g.backward(loss)?;

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut max_err = 0.0;
    let mut checked = 0;
    for (i, c) in inputs.iter().enumerate() {
        if !c.differentiable {
            per_input.push(None);
            continue;
        }
        let name = format!("in{i}");
        let grad = analytic[&name].clone();
        let mut input_max = 0.0;
        for k in 0..c.tensor.numel() {
            let original = c.tensor.data()[k];
            let eval = |v: f64, b: &mut Bindings<f64>, g: &mut Graph<f64>| -> Result<f64> {
                b.get_mut(&name).expect("bound").data_mut()[k] = v;
                g.run(b, &[loss])?;
                Ok(g.value(loss).expect("loss").item())
            };
            let plus = eval(original + epsilon, &mut bindings, &mut g)?;
            let minus = eval(original - epsilon, &mut bindings, &mut g)?;
            eval(original, &mut bindings, &mut g)?;
            let numeric = (plus - minus) / (2.0 * epsilon);
            input_max = fold_max(input_max, relative_error(grad.data()[k], numeric));
            checked += 1;
        }
        max_err = fold_max(max_err, input_max);
        per_input.push(Some(input_max));
    }
    Ok(GradCheckReport {
        max_rel_error: max_err,
        per_input,
        elements_checked: checked,
    })
}

/// Which side of every kink the current forward values sit on: the sign of
/// each ReLU input and the argmax of each max-pool window.
fn kink_pattern(graph: &Graph<f64>) -> Vec<u32> {
    let mut pattern = Vec::new();
    for node in graph.nodes() {
        let NodeKind::Op { op, inputs } = &node.kind else {
            continue;
        };
        let Some(x) = graph.value(inputs[0]) else {
            continue;
        };
        match op.kind() {
            "relu" => pattern.extend(x.data().iter().map(|&v| (v > 0.0) as u32)),
            "maxpool2" => {
                let s = x.shape();
                let (h, w) = (s[2], s[3]);
                for plane in x.data().chunks_exact(h * w) {
                    for y in (0..h).step_by(2) {
                        for xx in (0..w).step_by(2) {
                            let cand = [y * w + xx, y * w + xx + 1, (y + 1) * w + xx, (y + 1) * w + xx + 1];
                            let mut best = 0;
                            for (i, &c) in cand.iter().enumerate() {
                                if plane[c] > plane[cand[best]] {
                                    best = i;
                                }
                            }
                            pattern.push(best as u32);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    pattern
}

/// End-to-end check of a graph's parameter gradients.
#[derive(Clone, Debug)]
pub struct GraphCheck {
    /// Worst relative error per parameter tensor.
    pub per_param: BTreeMap<String, f64>,
    pub probes: usize,
    /// Probes discarded because `x ± ε` crossed a ReLU or max-pool kink.
    pub skipped_kinks: usize,
}

/// Check parameter gradients of an already-built graph against `loss` with
/// directional derivatives: for `per_param` random unit directions `d` per
/// parameter tensor, `(L(θ + εd) − L(θ − εd)) / 2ε` is compared with `∇L·d`.
/// Single elements can carry gradients near the f64 roundoff floor; a
/// direction aggregates the whole tensor. A probe whose perturbation changes
/// any ReLU sign or max-pool argmax straddles a point of non-differentiability
/// and is discarded; after each discard the step for that tensor shrinks
/// tenfold, down to `ε / 100` (at most `4 · per_param` attempts per tensor).
pub fn graph_grad_check(
    graph: &mut Graph<f64>,
    bindings: &Bindings<f64>,
    loss: NodeId,
    epsilon: f64,
    per_param: usize,
    rng: &mut Rng,
) -> Result<GraphCheck> {
    graph.run(bindings, &[loss])?;
    let base = kink_pattern(graph);
    let analytic = graph.backward(loss)?;
    let mut out = GraphCheck {
        per_param: BTreeMap::new(),
        probes: 0,
        skipped_kinks: 0,
    };
    for name in graph.param_names() {
        let original = graph.param_value(&name).expect("param").clone();
        let g = &analytic[&name];
        let mut worst = 0.0;
        let mut done = 0;
        let mut step = epsilon;
        for _ in 0..4 * per_param {
            if done == per_param {
                break;
            }
            let mut d: Vec<f64> = (0..original.numel()).map(|_| rng.normal()).collect();
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            d.iter_mut().for_each(|v| *v /= norm);
            let eval = |sign: f64, gr: &mut Graph<f64>| -> Result<(f64, bool)> {
                let p = gr.param_data_mut(&name).expect("param");
                for ((p, &o), &dv) in p.iter_mut().zip(original.data()).zip(&d) {
                    *p = o + sign * step * dv;
                }
                gr.run(bindings, &[loss])?;
                Ok((gr.value(loss).expect("loss").item(), kink_pattern(gr) == base))
            };
            let (plus, smooth_plus) = eval(1.0, graph)?;
            let (minus, smooth_minus) = eval(-1.0, graph)?;
            graph.param_data_mut(&name).expect("param").copy_from_slice(original.data());
            if !(smooth_plus && smooth_minus) {
                out.skipped_kinks += 1;
                step = (step / 10.0).max(epsilon / 100.0);
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let exact: f64 = g.data().iter().zip(&d).map(|(a, b)| a * b).sum();
            worst = fold_max(worst, relative_error(exact, numeric));
            done += 1;
            out.probes += 1;
        }
        if done == 0 {
            return Err(Error::invalid(format!("every probe of '{name}' crossed a kink")));
        }
        out.per_param.insert(name, worst);
    }
    Ok(out)
}

/// Result of an end-to-end check on one model.
#[derive(Clone, Debug)]
pub struct ModelCheck {
    pub label: String,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub probes: usize,
    pub skipped_kinks: usize,
    pub per_param: BTreeMap<String, f64>,
}

impl ModelCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < tolerance
    }
}

/// Two-pathway model (3-channel regression + 4-class segmentation) on the
/// tiny ladder, used for end-to-end checks.
pub fn tiny_check_config(connectivity: Connectivity, upsample: UpsampleMode) -> UmcConfig {
    let mut c = UmcConfig::umc(
        3,
        &TINY_FILTERS,
        connectivity,
        vec![
            PathwaySpec::new("denoise", 3, Task::Regression),
            PathwaySpec::new("seg", 4, Task::Classification),
        ],
    );
    c.upsample_mode = upsample;
    c
}

/// Joint-loss gradient check of `config` in `f64` on a random
/// `[1, C, size, size]` input with random targets.
pub fn model_grad_check(
    config: &UmcConfig,
    size: usize,
    seed: u64,
    epsilon: f64,
    per_param: usize,
) -> Result<ModelCheck> {
    let mut model = build::<f64>(config, seed)?;
    let mut rng = Rng::derived(seed, crate::rng::stream::GRADCHECK);
    let mut bindings: Bindings<f64> = Bindings::new();
    bindings.insert(INPUT_NAME.to_string(), normal(&[1, config.in_channels, size, size], &mut rng));
    for p in &model.pathways {
        let t = match p.task {
            Task::Regression => normal(&[1, config.pathway(&p.name).unwrap().out_channels, size, size], &mut rng),
            Task::Classification => labels(&[1, size, size], config.pathway(&p.name).unwrap().out_channels, &mut rng),
        };
        bindings.insert(p.target_input.clone(), t);
    }
    let loss = model.loss;
    let check = graph_grad_check(&mut model.graph, &bindings, loss, epsilon, per_param, &mut rng)?;
    let (mut worst, mut worst_param) = (0.0, String::new());
    for (name, &e) in &check.per_param {
        if e.is_nan() || e > worst || worst_param.is_empty() {
            worst_param = name.clone();
        }
        worst = fold_max(worst, e);
    }
    Ok(ModelCheck {
        label: format!("{} / {:?}", config.connectivity.as_str(), config.upsample_mode),
        max_rel_error: worst,
        worst_param,
        probes: check.probes,
        skipped_kinks: check.skipped_kinks,
        per_param: check.per_param,
    })
}

/// One op with a generator of representative inputs.
#[derive(Clone)]
pub struct OpCase {
    pub name: &'static str,
    pub op: Arc<dyn Op<f64>>,
    pub inputs: fn(&mut Rng) -> Vec<CheckInput>,
}

fn normal(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).expect("shape")
}

/// Normal samples pushed at least 0.05 away from zero (ReLU kink).
fn off_zero(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    normal(shape, rng).map(|v| v.signum() * (0.05 + v.abs()))
}

/// Distinct values, pairwise at least 0.05 apart, in random order, so the
/// max-pool argmax is stable under ε-perturbation.
fn distinct(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 - n as f64 * 0.05 + rng.uniform() * 0.05).collect();
    rng.shuffle(&mut v);
    Tensor::new(shape.to_vec(), v).expect("shape")
}

fn labels(shape: &[usize], classes: usize, rng: &mut Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.coin(0.1) { IGNORE_INDEX as f64 } else { rng.below(classes) as f64 })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Every differentiable op the models use.
pub fn standard_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "conv3x3",
            op: Arc::new(Conv2d::K3),
            inputs: |r| {
                vec![
                    CheckInput::var(normal(&[1, 2, 6, 6], r)),
                    CheckInput::var(normal(&[3, 2, 3, 3], r)),
                    CheckInput::var(normal(&[3], r)),
                ]
            },
        },
        OpCase {
            name: "conv1x1",
            op: Arc::new(Conv2d::K1),
            inputs: |r| {
                vec![
                    CheckInput::var(normal(&[2, 3, 4, 4], r)),
                    CheckInput::var(normal(&[2, 3, 1, 1], r)),
                    CheckInput::var(normal(&[2], r)),
                ]
            },
        },
        OpCase {
            name: "transposed_conv2x2",
            op: Arc::new(TransposedConv2x2),
            inputs: |r| {
                vec![
                    CheckInput::var(normal(&[1, 3, 3, 3], r)),
                    CheckInput::var(normal(&[2, 3, 2, 2], r)),
                    CheckInput::var(normal(&[2], r)),
                ]
            },
        },
        OpCase {
            name: "maxpool2",
            op: Arc::new(MaxPool2),
            inputs: |r| vec![CheckInput::var(distinct(&[1, 2, 4, 6], r))],
        },
        OpCase {
            name: "upsample_bilinear2",
            op: Arc::new(UpsampleBilinear2),
            inputs: |r| vec![CheckInput::var(normal(&[1, 2, 3, 4], r))],
        },
        OpCase {
            name: "relu",
            op: Arc::new(Relu),
            inputs: |r| vec![CheckInput::var(off_zero(&[2, 3, 4], r))],
        },
        OpCase {
            name: "add",
            op: Arc::new(Add),
            inputs: |r| vec![CheckInput::var(normal(&[2, 5], r)), CheckInput::var(normal(&[2, 5], r))],
        },
        OpCase {
            name: "mul",
            op: Arc::new(Mul),
            inputs: |r| vec![CheckInput::var(normal(&[7], r)), CheckInput::var(normal(&[7], r))],
        },
        OpCase {
            name: "scale",
            op: Arc::new(Scale(3.0)),
            inputs: |r| vec![CheckInput::var(normal(&[6], r))],
        },
        OpCase {
            name: "sum",
            op: Arc::new(Sum),
            inputs: |r| vec![CheckInput::var(normal(&[2, 3], r))],
        },
        OpCase {
            name: "concat_channels",
            op: Arc::new(ConcatChannels),
            inputs: |r| {
                vec![
                    CheckInput::var(normal(&[2, 1, 2, 3], r)),
                    CheckInput::var(normal(&[2, 3, 2, 3], r)),
                    CheckInput::var(normal(&[2, 2, 2, 3], r)),
                ]
            },
        },
        OpCase {
            name: "softmax_cross_entropy",
            op: Arc::new(SoftmaxCrossEntropy::default()),
            inputs: |r| {
                vec![
                    CheckInput::var(normal(&[1, 5, 4, 4], r)),
                    CheckInput::constant(labels(&[1, 4, 4], 5, r)),
                ]
            },
        },
        OpCase {
            name: "mse",
            op: Arc::new(Mse),
            inputs: |r| vec![CheckInput::var(normal(&[1, 3, 4, 4], r)), CheckInput::var(normal(&[1, 3, 4, 4], r))],
        },
        OpCase {
            name: "weighted_sum",
            op: Arc::new(WeightedSum {
                weights: vec![1.0, 0.5, 2.0],
            }),
            inputs: |r| {
                vec![
                    CheckInput::var(normal(&[1], r)),
                    CheckInput::var(normal(&[1], r)),
                    CheckInput::var(normal(&[1], r)),
                ]
            },
        },
    ]
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Run every case over `seeds` seeds derived from `seed`.
pub fn run_cases(cases: &[OpCase], seed: u64, seeds: usize, epsilon: f64, tolerance: f64) -> Result<Vec<CaseResult>> {
    if seeds == 0 {
        return Err(Error::invalid("at least one seed is required"));
    }
    cases
        .iter()
        .map(|case| {
            let mut worst = 0.0;
            for s in 0..seeds {
                let mut rng = Rng::derived(seed, crate::rng::stream::GRADCHECK ^ ((s as u64) << 16));
                let inputs = (case.inputs)(&mut rng);
                let report = grad_check(case.op.clone(), &inputs, epsilon, &mut rng)?;
                worst = fold_max(worst, report.max_rel_error);
            }
            Ok(CaseResult {
                name: case.name.to_string(),
                seeds,
                max_rel_error: worst,
                passed: worst.is_finite() && worst < tolerance,
            })
        })
        .collect()
}
