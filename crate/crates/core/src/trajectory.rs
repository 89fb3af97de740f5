//! End-effector trajectories and the trajectory encoder.
//!
//! A trajectory is a `D×T` matrix (`D = 8`: seven manipulator action
//! dimensions plus the gripper aperture). The encoder filters it with a
//! learnable temporal convolution that keeps the `D×T` shape, then pools the
//! time axis down to `d_trm` steps. The linear baseline replaces both stages
//! with a resample-to-fixed-length followed by a learned linear map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Rows of a trajectory matrix.
pub const DOF: usize = 8;
/// Row holding the gripper aperture (0 open, 1 closed).
pub const GRIPPER_ROW: usize = 7;
/// Stored trajectory entries must lie within `±RANGE_LIMIT`.
pub const RANGE_LIMIT: f64 = 1.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    values: Tensor<f64>,
}

impl Trajectory {
    /// `values` is `DOF×T`, row-major. Checks the shape, finiteness and the
    /// `±1.5` range.
    pub fn new(values: Tensor<f64>) -> Result<Self> {
        let traj = Self::unchecked_range(values)?;
        if let Some(v) = traj.values.data().iter().find(|v| v.abs() > RANGE_LIMIT) {
            return Err(Error::Data(format!(
                "trajectory value {v} outside ±{RANGE_LIMIT}"
            )));
        }
        Ok(traj)
    }

    /// Shape check only; used for standardized trajectories whose entries may
    /// leave the raw range.
    fn unchecked_range(values: Tensor<f64>) -> Result<Self> {
        match values.shape() {
            &[DOF, t] if t >= 1 => {}
            other => {
                return Err(Error::Data(format!(
                    "trajectory must be {DOF}×T with T ≥ 1, got {other:?}"
                )))
            }
        }
        if !values.all_finite() {
            return Err(Error::Data("trajectory contains non-finite values".into()));
        }
        Ok(Self { values })
    }

    /// Builds from `T` time steps of `DOF` values each.
    pub fn from_steps(steps: &[[f64; DOF]]) -> Result<Self> {
        let t = steps.len();
        if t == 0 {
            return Err(Error::Data("trajectory has no time steps".into()));
        }
        let mut data = vec![0.0; DOF * t];
        for (s, step) in steps.iter().enumerate() {
            for (d, &v) in step.iter().enumerate() {
                data[d * t + s] = v;
            }
        }
        Self::new(Tensor::new(&[DOF, t], data).map_err(|e| Error::Data(e.to_string()))?)
    }

    pub fn steps(&self) -> Vec<[f64; DOF]> {
        (0..self.len()).map(|t| self.step(t)).collect()
    }

    pub fn step(&self, t: usize) -> [f64; DOF] {
        let n = self.len();
        std::array::from_fn(|d| self.values.data()[d * n + t])
    }

    /// Number of time steps `T`.
    pub fn len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn channel(&self, d: usize) -> &[f64] {
        self.values.row(d)
    }

    pub fn values(&self) -> &Tensor<f64> {
        &self.values
    }

    pub fn reversed(&self) -> Self {
        let t = self.len();
        let mut data = self.values.data().to_vec();
        for row in data.chunks_mut(t) {
            row.reverse();
        }
        Self {
            values: Tensor::from_parts(vec![DOF, t], data),
        }
    }
}

/// Per-dimension standardization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStats {
    pub mean: [f64; DOF],
    pub std: [f64; DOF],
}

impl Default for TrajectoryStats {
    fn default() -> Self {
        Self::identity()
    }
}

impl TrajectoryStats {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; DOF],
            std: [1.0; DOF],
        }
    }

    /// Population mean and standard deviation over every time step of every
    /// trajectory. The gripper row is left as identity.
    pub fn fit<'a>(trajectories: impl IntoIterator<Item = &'a Trajectory>) -> Self {
        let mut count = 0usize;
        let mut sum = [0.0; DOF];
        let mut sum_sq = [0.0; DOF];
        for traj in trajectories {
            for d in 0..DOF {
                for &v in traj.channel(d) {
                    sum[d] += v;
                    sum_sq[d] += v * v;
                }
            }
            count += traj.len();
        }
        let mut stats = Self::identity();
        if count == 0 {
            return stats;
        }
        let n = count as f64;
        for d in 0..DOF {
            if d == GRIPPER_ROW {
                continue;
            }
            let mean = sum[d] / n;
            let var = (sum_sq[d] / n - mean * mean).max(0.0);
            stats.mean[d] = mean;
            // Round-off can leave a tiny positive variance on a constant row.
            stats.std[d] = if var.sqrt() <= 1e-12 * mean.abs().max(1.0) {
                0.0
            } else {
                var.sqrt()
            };
        }
        stats
    }

    fn scaled(&self, d: usize) -> bool {
        d != GRIPPER_ROW && self.std[d] > 0.0
    }

    /// `(x − mean) / std` per dimension. The gripper row and zero-variance
    /// rows pass through unchanged.
    pub fn normalize(&self, raw: &Trajectory, episode_id: &str) -> Result<Trajectory> {
        self.apply(raw, episode_id, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, normalized: &Trajectory, episode_id: &str) -> Result<Trajectory> {
        self.apply(normalized, episode_id, |v, m, s| v * s + m)
    }

    fn apply(
        &self,
        input: &Trajectory,
        episode_id: &str,
        f: impl Fn(f64, f64, f64) -> f64,
    ) -> Result<Trajectory> {
        let t = input.len();
        let mut data = input.values.data().to_vec();
        for (d, row) in data.chunks_mut(t).enumerate() {
            if !self.scaled(d) {
                continue;
            }
            row.iter_mut()
                .for_each(|v| *v = f(*v, self.mean[d], self.std[d]));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "episode {episode_id}: non-finite trajectory value at dimension {}, step {}",
                i / t,
                i % t
            )));
        }
        Ok(Trajectory {
            values: Tensor::from_parts(vec![DOF, t], data),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryMode {
    /// Temporal convolution followed by temporal pooling.
    ConvPool,
    /// Resample to a fixed length, then a learned linear map.
    LinearBaseline,
    /// No trajectory input; a learned constant token stands in for it.
    Disabled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvMixing {
    /// One temporal filter per trajectory dimension.
    Depthwise,
    /// Every output dimension sees every input dimension.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Average,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryEncoderConfig {
    pub mode: TrajectoryMode,
    /// Pooled time length.
    pub d_trm: usize,
    /// Odd, so the convolution can keep the time length with symmetric padding.
    pub kernel_size: usize,
    pub mixing: ConvMixing,
    pub pool: PoolKind,
    /// `tanh` after the convolution.
    pub activation: bool,
    /// Resample length of the linear baseline.
    pub resample_len: usize,
}

impl Default for TrajectoryEncoderConfig {
    fn default() -> Self {
        Self {
            mode: TrajectoryMode::ConvPool,
            d_trm: 16,
            kernel_size: 5,
            mixing: ConvMixing::Depthwise,
            pool: PoolKind::Average,
            activation: true,
            resample_len: 64,
        }
    }
}

impl TrajectoryEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_trm < 1 {
            return Err(Error::Config("trajectory.d_trm must be at least 1".into()));
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config("trajectory.kernel_size must be odd".into()));
        }
        if self.resample_len < 1 {
            return Err(Error::Config(
                "trajectory.resample_len must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn padding(&self) -> usize {
        (self.kernel_size - 1) / 2
    }

    pub fn kernel_shape(&self) -> [usize; 3] {
        match self.mixing {
            ConvMixing::Depthwise => [DOF, 1, self.kernel_size],
            ConvMixing::Full => [DOF, DOF, self.kernel_size],
        }
    }

    fn groups(&self) -> usize {
        match self.mixing {
            ConvMixing::Depthwise => DOF,
            ConvMixing::Full => 1,
        }
    }
}

/// Learnable tensors of the trajectory encoder.
#[derive(Clone, Debug, PartialEq)]
pub enum TrajEncoderParams<T> {
    ConvPool { kernel: Tensor<T>, bias: Tensor<T> },
    Linear { weight: Tensor<T>, bias: Tensor<T> },
}

impl<T: Scalar> TrajEncoderParams<T> {
    /// Depthwise delta kernels with zero bias: the convolution is an identity.
    pub fn delta(config: &TrajectoryEncoderConfig) -> Self {
        let [o, i, k] = config.kernel_shape();
        let mut data = vec![T::zero(); o * i * k];
        for c in 0..o {
            let ci = if i == 1 { 0 } else { c };
            data[(c * i + ci) * k + k / 2] = T::one();
        }
        Self::ConvPool {
            kernel: Tensor::from_parts(vec![o, i, k], data),
            bias: Tensor::zeros(&[DOF]),
        }
    }

    /// Linear baseline whose map is the identity (requires
    /// `resample_len == d_trm`).
    pub fn linear_identity(config: &TrajectoryEncoderConfig) -> Self {
        assert_eq!(
            config.resample_len, config.d_trm,
            "identity map needs resample_len == d_trm"
        );
        Self::Linear {
            weight: Tensor::identity(config.d_trm),
            bias: Tensor::zeros(&[config.d_trm]),
        }
    }
}

/// Graph handles of the encoder parameters.
#[derive(Clone, Copy, Debug)]
pub enum EncoderVars {
    ConvPool { kernel: Var, bias: Var },
    Linear { weight: Var, bias: Var },
}

impl EncoderVars {
    pub fn register<T: Scalar>(g: &mut Graph<T>, params: &TrajEncoderParams<T>) -> Self {
        match params {
            TrajEncoderParams::ConvPool { kernel, bias } => Self::ConvPool {
                kernel: g.param(kernel.clone()),
                bias: g.param(bias.clone()),
            },
            TrajEncoderParams::Linear { weight, bias } => Self::Linear {
                weight: g.param(weight.clone()),
                bias: g.param(bias.clone()),
            },
        }
    }
}

/// Places a trajectory in the graph, tiling a single step to two.
pub fn trajectory_input<T: Scalar>(g: &mut Graph<T>, traj: &Trajectory) -> Var {
    let values = if traj.len() == 1 {
        let data: Vec<T> = traj
            .values
            .data()
            .iter()
            .flat_map(|&v| [T::of(v), T::of(v)])
            .collect();
        Tensor::from_parts(vec![DOF, 2], data)
    } else {
        traj.values.cast()
    };
    g.constant(values)
}

/// Encodes `x` (`D×T`) to `D×d_trm` inside `g`.
pub fn encode_in_graph<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    vars: EncoderVars,
    config: &TrajectoryEncoderConfig,
) -> Result<Var, TensorError> {
    match vars {
        EncoderVars::ConvPool { kernel, bias } => {
            let conv = g.conv1d_grouped(x, kernel, bias, 1, config.padding(), config.groups())?;
            let conv = if config.activation {
                g.tanh(conv)
            } else {
                conv
            };
            match config.pool {
                PoolKind::Average => g.adaptive_avg_pool1d(conv, config.d_trm),
                PoolKind::Max => g.adaptive_max_pool1d(conv, config.d_trm),
            }
        }
        EncoderVars::Linear { weight, bias } => {
            let len = g.shape(x)[1];
            let resample = g.constant(resample_matrix(len, config.resample_len));
            let fixed = g.matmul(x, resample)?;
            let mapped = g.matmul(fixed, weight)?;
            g.add_row(mapped, bias)
        }
    }
}

/// `T×L` matrix `M` such that `x·M` linearly interpolates each row of `x`
/// from `T` to `L` evenly spaced samples (end points included).
pub fn resample_matrix<T: Scalar>(len: usize, out_len: usize) -> Tensor<T> {
    let mut m = vec![T::zero(); len * out_len];
    for j in 0..out_len {
        if len == 1 {
            m[j] = T::one();
            continue;
        }
        let pos = if out_len == 1 {
            0.0
        } else {
            j as f64 * (len - 1) as f64 / (out_len - 1) as f64
        };
        let lo = (pos.floor() as usize).min(len - 2);
        let frac = pos - lo as f64;
        m[lo * out_len + j] += T::of(1.0 - frac);
        m[(lo + 1) * out_len + j] += T::of(frac);
    }
    Tensor::from_parts(vec![len, out_len], m)
}

/// Standalone encoder pass (conv-pool or linear baseline, per `params`).
pub fn encode_trajectory<T: Scalar>(
    traj: &Trajectory,
    params: &TrajEncoderParams<T>,
    config: &TrajectoryEncoderConfig,
) -> Result<Tensor<T>> {
    config.validate()?;
    let mut g = Graph::new();
    let x = trajectory_input(&mut g, traj);
    let vars = EncoderVars::register(&mut g, params);
    let out = encode_in_graph(&mut g, x, vars, config)?;
    Ok(g.value(out).clone())
}
