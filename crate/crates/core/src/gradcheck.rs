//! Central finite differences and the per-operation gradient check suite.
//!
//! The finite-difference path only ever evaluates forward values; it never
//! touches the backward rules it is used to verify.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::features::{embed_text_mock, mock_scene_features, FeatureBundle, SCENE_LAYOUT_WIDTH};
use crate::graph::{Graph, OpKind, Var};
use crate::model::{
    forward_loss, forward_loss_in, param_group, InputWidths, ModelConfig, ModelParams,
};
use crate::tensor::Tensor;
use crate::trajectory::{TrajectoryEncoderConfig, TrajectoryStats};
use crate::world::generator::{sample_episode, GenConfig};

/// Default step for central differences at 64-bit precision.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for relative errors, so entries whose true gradient is
/// zero are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// Pass threshold for single-operation checks.
pub const OP_TOLERANCE: f64 = 1e-4;

/// Pass threshold for end-to-end model checks.
pub const MODEL_TOLERANCE: f64 = 1e-3;

/// Central-difference gradient of a scalar function at `x`.
pub fn finite_diff_grad(f: impl Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, h: f64) -> Tensor<f64> {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut out = vec![0.0; x.len()];
    for (i, slot) in out.iter_mut().enumerate() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        *slot = (plus - minus) / (2.0 * h);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest elementwise [`relative_error`] between two same-shaped tensors.
pub fn max_relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, |worst, e| {
            if e.is_nan() || worst.is_nan() {
                f64::NAN
            } else {
                worst.max(e)
            }
        })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < self.tolerance
    }
}

type Builder = fn(&mut Graph<f64>, &[Var]) -> std::result::Result<Var, TensorError>;

struct OpCase {
    name: &'static str,
    inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    build: Builder,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_parts(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let t = rand_tensor(rng, shape, 0.1, 2.0);
    let signs: Vec<f64> = (0..t.len())
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    Tensor::from_parts(
        shape.to_vec(),
        t.data().iter().zip(signs).map(|(v, s)| v * s).collect(),
    )
}

fn cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            inputs: |r| {
                vec![
                    rand_tensor(r, &[4, 5], -1.0, 1.0),
                    rand_tensor(r, &[5, 3], -1.0, 1.0),
                ]
            },
            build: |g, v| g.matmul(v[0], v[1]),
        },
        OpCase {
            name: "transpose",
            inputs: |r| vec![rand_tensor(r, &[3, 4], -1.0, 1.0)],
            build: |g, v| g.transpose(v[0]),
        },
        OpCase {
            name: "add",
            inputs: |r| {
                vec![
                    rand_tensor(r, &[3, 4], -1.0, 1.0),
                    rand_tensor(r, &[3, 4], -1.0, 1.0),
                ]
            },
            build: |g, v| g.add(v[0], v[1]),
        },
        OpCase {
            name: "add_row",
            inputs: |r| {
                vec![
                    rand_tensor(r, &[3, 4], -1.0, 1.0),
                    rand_tensor(r, &[4], -1.0, 1.0),
                ]
            },
            build: |g, v| g.add_row(v[0], v[1]),
        },
        OpCase {
            name: "mul",
            inputs: |r| {
                vec![
                    rand_tensor(r, &[3, 4], -1.0, 1.0),
                    rand_tensor(r, &[3, 4], -1.0, 1.0),
                ]
            },
            build: |g, v| g.mul(v[0], v[1]),
        },
        OpCase {
            name: "scale",
            inputs: |r| vec![rand_tensor(r, &[2, 5], -1.0, 1.0)],
            build: |g, v| Ok(g.scale(v[0], -0.75)),
        },
        OpCase {
            name: "tanh",
            inputs: |r| vec![rand_tensor(r, &[3, 4], -2.0, 2.0)],
            build: |g, v| Ok(g.tanh(v[0])),
        },
        OpCase {
            name: "sigmoid",
            inputs: |r| vec![rand_tensor(r, &[3, 4], -3.0, 3.0)],
            build: |g, v| Ok(g.sigmoid(v[0])),
        },
        OpCase {
            name: "relu",
            inputs: |r| vec![away_from_zero(r, &[3, 4])],
            build: |g, v| Ok(g.relu(v[0])),
        },
        OpCase {
            name: "gelu",
            inputs: |r| vec![rand_tensor(r, &[3, 4], -3.0, 3.0)],
            build: |g, v| Ok(g.gelu(v[0])),
        },
        OpCase {
            name: "conv1d",
            inputs: |r| {
                vec![
                    rand_tensor(r, &[8, 24], -1.0, 1.0),
                    rand_tensor(r, &[8, 8, 5], -0.5, 0.5),
                    rand_tensor(r, &[8], -0.5, 0.5),
                ]
            },
            build: |g, v| g.conv1d(v[0], v[1], v[2], 1, 2),
        },
        OpCase {
            name: "conv1d_depthwise",
            inputs: |r| {
                vec![
                    rand_tensor(r, &[8, 24], -1.0, 1.0),
                    rand_tensor(r, &[8, 1, 5], -0.5, 0.5),
                    rand_tensor(r, &[8], -0.5, 0.5),
                ]
            },
            build: |g, v| g.conv1d_grouped(v[0], v[1], v[2], 1, 2, 8),
        },
        OpCase {
            name: "conv1d_strided",
            inputs: |r| {
                vec![
                    rand_tensor(r, &[3, 11], -1.0, 1.0),
                    rand_tensor(r, &[2, 3, 3], -0.5, 0.5),
                    rand_tensor(r, &[2], -0.5, 0.5),
                ]
            },
            build: |g, v| g.conv1d(v[0], v[1], v[2], 2, 1),
        },
        OpCase {
            name: "adaptive_avg_pool1d",
            inputs: |r| vec![rand_tensor(r, &[3, 13], -1.0, 1.0)],
            build: |g, v| g.adaptive_avg_pool1d(v[0], 5),
        },
        OpCase {
            name: "adaptive_max_pool1d",
            inputs: |r| vec![rand_tensor(r, &[3, 13], -1.0, 1.0)],
            build: |g, v| g.adaptive_max_pool1d(v[0], 4),
        },
        OpCase {
            name: "softmax",
            inputs: |r| vec![rand_tensor(r, &[3, 5], -2.0, 2.0)],
            build: |g, v| g.softmax(v[0], 1),
        },
        OpCase {
            name: "softmax_axis0",
            inputs: |r| vec![rand_tensor(r, &[4, 3], -2.0, 2.0)],
            build: |g, v| g.softmax(v[0], 0),
        },
        OpCase {
            name: "layer_norm",
            inputs: |r| {
                vec![
                    rand_tensor(r, &[3, 6], -2.0, 2.0),
                    rand_tensor(r, &[6], 0.5, 1.5),
                    rand_tensor(r, &[6], -0.5, 0.5),
                ]
            },
            build: |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
        },
        OpCase {
            name: "bce_loss",
            inputs: |r| vec![rand_tensor(r, &[6], 0.05, 0.95)],
            build: |g, v| g.bce_loss(v[0], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0], 1e-7),
        },
        OpCase {
            name: "sum",
            inputs: |r| vec![rand_tensor(r, &[3, 4], -1.0, 1.0)],
            build: |g, v| Ok(g.sum(v[0])),
        },
        OpCase {
            name: "mean",
            inputs: |r| vec![rand_tensor(r, &[3, 4], -1.0, 1.0)],
            build: |g, v| Ok(g.mean(v[0])),
        },
        OpCase {
            name: "mean_rows",
            inputs: |r| vec![rand_tensor(r, &[5, 3], -1.0, 1.0)],
            build: |g, v| g.mean_rows(v[0]),
        },
        OpCase {
            name: "concat_rows",
            inputs: |r| {
                vec![
                    rand_tensor(r, &[2, 3], -1.0, 1.0),
                    rand_tensor(r, &[4, 3], -1.0, 1.0),
                ]
            },
            build: |g, v| g.concat_rows(&[v[0], v[1]]),
        },
        OpCase {
            name: "concat_cols",
            inputs: |r| {
                vec![
                    rand_tensor(r, &[3, 2], -1.0, 1.0),
                    rand_tensor(r, &[3, 4], -1.0, 1.0),
                ]
            },
            build: |g, v| g.concat_cols(&[v[0], v[1]]),
        },
        OpCase {
            name: "slice_cols",
            inputs: |r| vec![rand_tensor(r, &[3, 6], -1.0, 1.0)],
            build: |g, v| g.slice_cols(v[0], 1, 4),
        },
        OpCase {
            name: "scaled_dot_attention",
            inputs: |r| {
                vec![
                    rand_tensor(r, &[3, 4], -1.0, 1.0),
                    rand_tensor(r, &[5, 4], -1.0, 1.0),
                    rand_tensor(r, &[5, 2], -1.0, 1.0),
                ]
            },
            build: |g, v| g.scaled_dot_attention(v[0], v[1], v[2]).map(|(out, _)| out),
        },
    ]
}

/// Names of every case in [`check_ops`], in report order.
pub fn op_case_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// Scalarizes an op output as `Σ wᵢ·yᵢ` with fixed random weights, so every
/// output entry contributes a distinct gradient.
fn weighted_loss(
    g: &mut Graph<f64>,
    out: Var,
    weights: &Tensor<f64>,
) -> std::result::Result<Var, TensorError> {
    let w = g.constant(weights.reshape(g.shape(out))?);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn eval_case(case: &OpCase, inputs: &[Tensor<f64>], weights: &Tensor<f64>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = (case.build)(&mut g, &vars).expect("op case must build");
    let loss = weighted_loss(&mut g, out, weights).expect("weights match output");
    g.value(loss).data()[0]
}

fn check_case(
    case: &OpCase,
    rng: &mut ChaCha8Rng,
    fault: Option<OpKind>,
) -> std::result::Result<f64, TensorError> {
    let inputs = (case.inputs)(rng);
    let mut g = match fault {
        Some(kind) => Graph::with_fault(kind),
        None => Graph::new(),
    };
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.build)(&mut g, &vars)?;
    let weights = rand_tensor(rng, &[g.value(out).len()], -1.0, 1.0);
    let loss = weighted_loss(&mut g, out, &weights)?;
    let grads = g.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, (&v, input)) in vars.iter().zip(&inputs).enumerate() {
        let analytic = grads.get_or_zeros(v, input);
        let numeric = finite_diff_grad(
            |probe| {
                let mut probed = inputs.clone();
                probed[i] = probe.clone();
                eval_case(case, &probed, &weights)
            },
            input,
            FD_STEP,
        );
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Checks every differentiable operation against central differences on
/// `instances` random inputs each. `fault` injects a broken backward rule.
pub fn check_ops(seed: u64, instances: usize, fault: Option<OpKind>) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cases()
        .iter()
        .map(|case| {
            let worst = (0..instances)
                .map(|_| check_case(case, &mut rng, fault).unwrap_or(f64::INFINITY))
                .fold(0.0, f64::max);
            CheckResult {
                name: case.name.to_string(),
                max_rel_error: worst,
                tolerance: OP_TOLERANCE,
            }
        })
        .collect()
}

/// Small model used by the end-to-end check.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        layers: 1,
        heads: 2,
        ff_dim: 12,
        head_hidden: 6,
        dropout: 0.0,
        trajectory: TrajectoryEncoderConfig {
            d_trm: 4,
            kernel_size: 3,
            resample_len: 6,
            ..TrajectoryEncoderConfig::default()
        },
        ..ModelConfig::default()
    }
}

/// Widths of the synthetic bundles built by [`check_model`]; both differ
/// from any small `d_model` so the input projections are exercised.
pub const CHECK_WIDTHS: InputWidths = InputWidths {
    lambda: SCENE_LAYOUT_WIDTH,
    text: 6,
};

fn check_bundles(seed: u64) -> Result<Vec<(FeatureBundle, u8)>> {
    let gen = GenConfig {
        min_steps: 12,
        max_steps: 20,
        ..GenConfig::default()
    };
    (0..2)
        .map(|i| {
            let ep = sample_episode("check", seed.wrapping_add(i), &gen)?;
            let bundle = FeatureBundle {
                episode_id: format!("check{i}"),
                h_lambda: mock_scene_features(&ep.scene, CHECK_WIDTHS.lambda),
                h_txt: embed_text_mock(&ep.instruction, seed, CHECK_WIDTHS.text)?,
                trajectory: TrajectoryStats::identity().normalize(&ep.trajectory, &ep.id)?,
            };
            Ok((bundle, ep.label))
        })
        .collect()
}

/// 64-bit finite-difference check of the batch loss with respect to every
/// parameter, reported per parameter group (each group exactly once).
pub fn check_model(
    config: &ModelConfig,
    seed: u64,
    fault: Option<OpKind>,
) -> Result<Vec<CheckResult>> {
    let mut config = config.clone();
    config.dropout = 0.0;
    let params = ModelParams::<f64>::init(&config, CHECK_WIDTHS, seed)?;
    let data = check_bundles(seed)?;
    let bundles: Vec<&FeatureBundle> = data.iter().map(|(b, _)| b).collect();
    let labels: Vec<u8> = data.iter().map(|&(_, y)| y).collect();

    let graph = match fault {
        Some(kind) => Graph::with_fault(kind),
        None => Graph::new(),
    };
    let analytic = forward_loss_in(graph, &params, &bundles, &labels, None)?.gradients(&params)?;
    let mut results: Vec<CheckResult> = Vec::new();
    for (i, name) in params.names().iter().enumerate() {
        let x = &params.tensors()[i];
        let numeric = finite_diff_grad(
            |probe| {
                let mut p = params.clone();
                p.tensors_mut()[i] = probe.clone();
                forward_loss(&p, &bundles, &labels, None).map_or(f64::NAN, |l| l.loss_value())
            },
            x,
            FD_STEP,
        );
        let err = max_relative_error(&analytic[i], &numeric);
        let err = if err.is_nan() { f64::INFINITY } else { err };
        let group = param_group(name);
        match results.last_mut() {
            Some(r) if r.name == group => r.max_rel_error = r.max_rel_error.max(err),
            _ => results.push(CheckResult {
                name: group.to_string(),
                max_rel_error: err,
                tolerance: MODEL_TOLERANCE,
            }),
        }
    }
    Ok(results)
}
