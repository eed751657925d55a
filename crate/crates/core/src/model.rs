//! The CCNN classifier.
//!
//! ```text
//! x[12,T] → standardize → lift (1×1) → n_blocks × [ sample kernel → depthwise causal conv
//!          → 1×1 mixer → norm → nonlinearity → + residual ]
//!          → head (average pool | moving average) → dense → logit
//! ```
//!
//! Both heads share every weight. The moving-average head emits a logit per
//! timestep using only the past, and its last element equals the pooled
//! logit exactly.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::gradcore::{sigmoid, Graph, NodeId, Parameters, Tensor};
use crate::kernels::{CoordinateGrid, KernelConfig, KernelVars, MagnetKernel, DEFAULT_STEP_S};
use crate::shots::N_FEATURES;

pub const MODEL_FORMAT: &str = "ccnn-magnet-model";
pub const MODEL_VERSION: u64 = 1;
/// Largest model a config may describe.
pub const MAX_PARAMS: usize = 10_000_000;
/// Most kernel taps a config may request.
pub const MAX_TAPS: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    AvgPool,
    MovingAvg,
    Windowed,
    Exponential,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Layer,
    Batch,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CcnnConfig {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub n_blocks: usize,
    pub n_f: usize,
    pub hidden_width: usize,
    pub horizon_s: f64,
    pub step_s: f64,
    pub mask_threshold: f64,
    pub omega0_base: f64,
    pub omega_divisor: f64,
    pub head: Head,
    pub norm: NormKind,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for CcnnConfig {
    /// The shipped reference configuration.
    fn default() -> Self {
        Self {
            in_channels: N_FEATURES,
            hidden_channels: 8,
            n_blocks: 2,
            n_f: 2,
            hidden_width: 10,
            horizon_s: 2.0,
            step_s: DEFAULT_STEP_S,
            mask_threshold: 0.1,
            omega0_base: 25.0,
            omega_divisor: 250.0,
            head: Head::AvgPool,
            norm: NormKind::Layer,
            activation: Activation::Gelu,
            seed: 0,
        }
    }
}

impl CcnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels != N_FEATURES {
            return Err(Error::Config(format!(
                "in_channels must be {N_FEATURES} (the feature schema), got {}",
                self.in_channels
            )));
        }
        if self.hidden_channels == 0 || self.n_blocks == 0 || self.hidden_width == 0 {
            return Err(Error::Config(
                "hidden_channels, n_blocks and hidden_width must be positive".into(),
            ));
        }
        if !(self.step_s.is_finite() && self.step_s > 0.0) {
            return Err(Error::Config(format!(
                "step_s must be positive, got {}",
                self.step_s
            )));
        }
        let taps = self.horizon_s / self.step_s;
        if taps.is_nan() || taps > MAX_TAPS as f64 {
            return Err(Error::Config(format!(
                "horizon_s / step_s must not exceed {MAX_TAPS} taps, got {taps}"
            )));
        }
        let (h, w) = (self.hidden_channels as f64, self.hidden_width as f64);
        let approx_params = self.n_blocks as f64
            * (self.n_f as f64 * (w * w + 5.0 * w) + w * h + h * h)
            + h * self.in_channels as f64;
        if approx_params > MAX_PARAMS as f64 {
            return Err(Error::Config(format!(
                "configuration has about {approx_params:.0} parameters, more than {MAX_PARAMS}"
            )));
        }
        match self.head {
            Head::AvgPool | Head::MovingAvg => {}
            other => {
                return Err(Error::NotImplemented(format!("{other:?} head")));
            }
        }
        if self.norm == NormKind::Batch {
            return Err(Error::NotImplemented(
                "batch norm over variable-length causal sequences; use layer or none".into(),
            ));
        }
        self.kernel_config().validate()
    }

    pub fn kernel_config(&self) -> KernelConfig {
        KernelConfig {
            hidden_width: self.hidden_width,
            n_f: self.n_f,
            out_channels: self.hidden_channels,
            horizon_s: self.horizon_s,
            mask_threshold: self.mask_threshold,
            omega0_base: self.omega0_base,
            omega_divisor: self.omega_divisor,
        }
    }

    /// Learnable scalars in one block.
    pub fn block_param_count(&self) -> usize {
        let h = self.hidden_channels;
        let norm = match self.norm {
            NormKind::Layer => 2 * h,
            NormKind::Batch | NormKind::None => 0,
        };
        self.kernel_config().param_count() + h * h + h + norm
    }

    /// Closed-form parameter count; no model is built.
    pub fn param_count(&self) -> usize {
        let h = self.hidden_channels;
        let lift = h * self.in_channels + h;
        let dense = h + 1;
        lift + self.n_blocks * self.block_param_count() + dense
    }

    /// Kernel sampling grid long enough for a `t_len`-sample input.
    pub fn grid_for(&self, t_len: usize) -> Result<CoordinateGrid> {
        CoordinateGrid::with_len(self.step_s, self.horizon_s, t_len)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub kernel: MagnetKernel,
    pub mixer_w: Tensor,
    pub mixer_b: Tensor,
    pub norm_gain: Option<Tensor>,
    pub norm_bias: Option<Tensor>,
}

/// Fixed per-channel standardization applied to the input,
/// `(x - mean) / scale`. Estimated from training data, never trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            scale: vec![1.0; channels],
        }
    }

    /// Per-channel mean and standard deviation over every finite sample of
    /// `inputs` (each `[C, T]`). Constant or empty channels get scale 1.
    pub fn estimate<'a>(
        channels: usize,
        inputs: impl IntoIterator<Item = &'a Tensor>,
    ) -> Result<Self> {
        let inputs: Vec<&Tensor> = inputs.into_iter().collect();
        let mut sum = vec![0.0; channels];
        let mut count = vec![0usize; channels];
        for x in &inputs {
            let (c, _) = x.dims2()?;
            if c != channels {
                return Err(Error::Input(format!(
                    "expected {channels} input channels, got {c}"
                )));
            }
            for ch in 0..channels {
                for v in x.row(ch).iter().filter(|v| v.is_finite()) {
                    sum[ch] += v;
                    count[ch] += 1;
                }
            }
        }
        let mean: Vec<f64> = (0..channels)
            .map(|ch| {
                if count[ch] > 0 {
                    sum[ch] / count[ch] as f64
                } else {
                    0.0
                }
            })
            .collect();
        let mut sq = vec![0.0; channels];
        for x in &inputs {
            for ch in 0..channels {
                sq[ch] += x
                    .row(ch)
                    .iter()
                    .filter(|v| v.is_finite())
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        let scale = (0..channels)
            .map(|ch| {
                let sd = (sq[ch] / count[ch].max(1) as f64).sqrt();
                if sd > 1e-12 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn is_identity(&self) -> bool {
        self.mean.iter().all(|&m| m == 0.0) && self.scale.iter().all(|&s| s == 1.0)
    }

    fn validate(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.scale.len() != channels {
            return Err(Error::ModelFormat(format!(
                "input normalization needs {channels} entries per vector"
            )));
        }
        if self.mean.iter().any(|v| !v.is_finite())
            || self.scale.iter().any(|v| !(v.is_finite() && *v > 0.0))
        {
            return Err(Error::ModelFormat(
                "input normalization must be finite with positive scales".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CcnnModel {
    pub config: CcnnConfig,
    pub input_norm: InputNorm,
    pub lift_w: Tensor,
    pub lift_b: Tensor,
    pub blocks: Vec<Block>,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

#[derive(Clone, Debug)]
pub struct BlockVars {
    pub kernel: KernelVars,
    pub mixer_w: NodeId,
    pub mixer_b: NodeId,
    pub norm: Option<(NodeId, NodeId)>,
}

/// Graph handles for every parameter of a bound [`CcnnModel`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub lift_w: NodeId,
    pub lift_b: NodeId,
    pub blocks: Vec<BlockVars>,
    pub out_w: NodeId,
    pub out_b: NodeId,
}

impl ModelVars {
    /// Node ids in [`Parameters::visit`] order.
    pub fn ids(&self) -> Vec<NodeId> {
        let mut ids = vec![self.lift_w, self.lift_b];
        for b in &self.blocks {
            ids.extend(b.kernel.ids());
            ids.extend([b.mixer_w, b.mixer_b]);
            if let Some((g, bias)) = b.norm {
                ids.extend([g, bias]);
            }
        }
        ids.extend([self.out_w, self.out_b]);
        ids
    }
}

/// Which head to apply after the block stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// One logit per sequence (average pooling).
    Label,
    /// One logit per timestep (causal moving average).
    Trace,
}

impl CcnnModel {
    pub fn init(config: &CcnnConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = config.hidden_channels;
        let lift_bound = (1.0 / config.in_channels as f64).sqrt();
        let mix_bound = (1.0 / h as f64).sqrt();
        let lift_w = uniform(&mut rng, vec![h, config.in_channels], lift_bound);
        let lift_b = Tensor::zeros(vec![h]);
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for _ in 0..config.n_blocks {
            let kernel_seed = rng.random::<u64>();
            let kernel = MagnetKernel::init(&config.kernel_config(), kernel_seed)?;
            let mixer_w = uniform(&mut rng, vec![h, h], mix_bound);
            let (norm_gain, norm_bias) = match config.norm {
                NormKind::Layer => (
                    Some(Tensor::full(vec![h], 1.0)),
                    Some(Tensor::zeros(vec![h])),
                ),
                _ => (None, None),
            };
            blocks.push(Block {
                kernel,
                mixer_w,
                mixer_b: Tensor::zeros(vec![h]),
                norm_gain,
                norm_bias,
            });
        }
        let out_w = uniform(&mut rng, vec![1, h], mix_bound);
        let mut model = Self {
            config: config.clone(),
            input_norm: InputNorm::identity(config.in_channels),
            lift_w,
            lift_b,
            blocks,
            out_w,
            out_b: Tensor::zeros(vec![1]),
        };
        model.visit_mut("", &mut |_, t| t.set_requires_grad(true));
        Ok(model)
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ModelVars {
        let put = |g: &mut Graph, t: &Tensor| {
            if trainable {
                g.leaf(t)
            } else {
                g.constant(t.clone())
            }
        };
        let lift_w = put(g, &self.lift_w);
        let lift_b = put(g, &self.lift_b);
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let kernel = b.kernel.bind(g, trainable);
                let mixer_w = put(g, &b.mixer_w);
                let mixer_b = put(g, &b.mixer_b);
                let norm = match (&b.norm_gain, &b.norm_bias) {
                    (Some(gain), Some(bias)) => Some((put(g, gain), put(g, bias))),
                    _ => None,
                };
                BlockVars {
                    kernel,
                    mixer_w,
                    mixer_b,
                    norm,
                }
            })
            .collect();
        let out_w = put(g, &self.out_w);
        let out_b = put(g, &self.out_b);
        ModelVars {
            lift_w,
            lift_b,
            blocks,
            out_w,
            out_b,
        }
    }

    /// Samples every block's filter on `grid`.
    pub fn sample_kernels(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        grid: &CoordinateGrid,
    ) -> Result<Vec<NodeId>> {
        self.blocks
            .iter()
            .zip(&vars.blocks)
            .map(|(b, v)| b.kernel.sample_on_graph(g, &v.kernel, grid))
            .collect()
    }

    /// Runs the network on `x` (`[12, T]`) with pre-sampled kernels, which
    /// must have at least as many taps as are wanted (taps past `T` are
    /// never reached). Returns a `[1, 1]` logit in [`Mode::Label`] and a
    /// `[1, T]` logit row in [`Mode::Trace`].
    pub fn forward_on_graph(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        kernels: &[NodeId],
        x: NodeId,
        mode: Mode,
    ) -> Result<NodeId> {
        let (c, _) = g.value(x).dims2()?;
        if c != self.config.in_channels {
            return Err(Error::Input(format!(
                "expected {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let x = if self.input_norm.is_identity() {
            x
        } else {
            let c = self.config.in_channels;
            let mean = g.constant(Tensor::new(vec![c, 1], self.input_norm.mean.clone())?);
            let inv = self.input_norm.scale.iter().map(|s| 1.0 / s).collect();
            let inv = g.constant(Tensor::new(vec![c, 1], inv)?);
            let centered = g.sub(x, mean)?;
            g.mul(centered, inv)?
        };
        let mut h = g.pointwise_linear(x, vars.lift_w, vars.lift_b)?;
        for (bv, &kernel) in vars.blocks.iter().zip(kernels) {
            let conv = g.causal_conv1d(h, kernel)?;
            let mut y = g.pointwise_linear(conv, bv.mixer_w, bv.mixer_b)?;
            if let Some((gain, bias)) = bv.norm {
                y = g.layer_norm(y, gain, bias)?;
            }
            let act = match self.config.activation {
                Activation::Gelu => g.gelu(y),
                Activation::Relu => g.relu(y),
            };
            h = g.add(h, act)?;
        }
        let pooled = match mode {
            Mode::Label => g.mean_time(h)?,
            Mode::Trace => g.moving_average(h)?,
        };
        g.pointwise_linear(pooled, vars.out_w, vars.out_b)
    }

    fn run_frozen(&self, x: &Tensor, mode: Mode) -> Result<Vec<f64>> {
        let (c, t_len) = x.dims2()?;
        if c != self.config.in_channels {
            return Err(Error::Input(format!(
                "expected {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let grid = self.config.grid_for(t_len)?;
        let kernels = self.sample_kernels(&mut g, &vars, &grid)?;
        let xn = g.constant(x.clone());
        let out = self.forward_on_graph(&mut g, &vars, &kernels, xn, mode)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Sequence-to-label logit for one shot; disruptivity is its sigmoid.
    pub fn forward_label(&self, x: &Tensor) -> Result<f64> {
        Ok(self.run_frozen(x, Mode::Label)?[0])
    }

    /// Disruptivity at every timestep, each using only data up to that step.
    pub fn forward_trace(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self
            .run_frozen(x, Mode::Trace)?
            .into_iter()
            .map(sigmoid)
            .collect())
    }

    /// Applies the configured head: average pooling yields one score,
    /// the moving-average head yields a full trace.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        match self.config.head {
            Head::AvgPool => Ok(vec![sigmoid(self.forward_label(x)?)]),
            _ => self.forward_trace(x),
        }
    }

    pub fn param_count(&self) -> usize {
        self.num_params()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut params = Vec::new();
        self.visit("", &mut |name, t| {
            params.push(NamedArray {
                name,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
        });
        let doc = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            config: self.config.clone(),
            input_norm: self.input_norm.clone(),
            params,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Parses a model document, checking version, names and shapes.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Value = serde_json::from_str(text)
            .map_err(|e| Error::ModelFormat(format!("not a JSON document: {e}")))?;
        let version = raw
            .get("version")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::ModelFormat("missing integer field `version`".into()))?;
        if version != MODEL_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: MODEL_VERSION,
            });
        }
        let doc: ModelFile = serde_json::from_value(raw)
            .map_err(|e| Error::ModelFormat(format!("malformed model document: {e}")))?;
        if doc.format != MODEL_FORMAT {
            return Err(Error::ModelFormat(format!(
                "unexpected format tag `{}`",
                doc.format
            )));
        }
        let mut model = Self::init(&doc.config)?;
        doc.input_norm.validate(doc.config.in_channels)?;
        model.input_norm = doc.input_norm;
        let mut arrays: std::collections::BTreeMap<String, NamedArray> = doc
            .params
            .into_iter()
            .map(|a| (a.name.clone(), a))
            .collect();
        let mut failure = None;
        model.visit_mut("", &mut |name, t| {
            if failure.is_some() {
                return;
            }
            match arrays.remove(&name) {
                None => failure = Some(Error::ModelFormat(format!("missing array `{name}`"))),
                Some(a) if a.shape != t.shape() => {
                    failure = Some(Error::ModelFormat(format!(
                        "array `{name}` has shape {:?}, expected {:?}",
                        a.shape,
                        t.shape()
                    )))
                }
                Some(a) if a.data.len() != t.numel() => {
                    failure = Some(Error::ModelFormat(format!(
                        "array `{name}` holds {} values, shape needs {}",
                        a.data.len(),
                        t.numel()
                    )))
                }
                Some(a) if a.data.iter().any(|v| !v.is_finite()) => {
                    failure = Some(Error::ModelFormat(format!(
                        "array `{name}` has non-finite values"
                    )))
                }
                Some(a) => t.data_mut().copy_from_slice(&a.data),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if let Some(extra) = arrays.keys().next() {
            return Err(Error::ModelFormat(format!("unknown array `{extra}`")));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Input(format!("cannot read model {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Copies gradients from a graph built with [`CcnnModel::bind`] into the
    /// parameters' `grad` slots.
    pub fn collect_grads(&mut self, g: &Graph, vars: &ModelVars) -> Result<()> {
        let ids = vars.ids();
        let mut i = 0;
        let mut failure = None;
        self.visit_mut("", &mut |_, t| {
            let grad = g
                .grad(ids[i])
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            if let Err(e) = t.set_grad(grad) {
                failure = Some(e);
            }
            i += 1;
        });
        failure.map_or(Ok(()), Err)
    }
}

impl Parameters for CcnnModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}lift.weight"), &self.lift_w);
        f(format!("{prefix}lift.bias"), &self.lift_b);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("{prefix}blocks.{i}.");
            b.kernel.visit(&format!("{p}kernel."), f);
            f(format!("{p}mixer.weight"), &b.mixer_w);
            f(format!("{p}mixer.bias"), &b.mixer_b);
            if let (Some(gain), Some(bias)) = (&b.norm_gain, &b.norm_bias) {
                f(format!("{p}norm.gain"), gain);
                f(format!("{p}norm.bias"), bias);
            }
        }
        f(format!("{prefix}dense.weight"), &self.out_w);
        f(format!("{prefix}dense.bias"), &self.out_b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}lift.weight"), &mut self.lift_w);
        f(format!("{prefix}lift.bias"), &mut self.lift_b);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("{prefix}blocks.{i}.");
            b.kernel.visit_mut(&format!("{p}kernel."), f);
            f(format!("{p}mixer.weight"), &mut b.mixer_w);
            f(format!("{p}mixer.bias"), &mut b.mixer_b);
            if let (Some(gain), Some(bias)) = (&mut b.norm_gain, &mut b.norm_bias) {
                f(format!("{p}norm.gain"), gain);
                f(format!("{p}norm.bias"), bias);
            }
        }
        f(format!("{prefix}dense.weight"), &mut self.out_w);
        f(format!("{prefix}dense.bias"), &mut self.out_b);
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    version: u64,
    config: CcnnConfig,
    input_norm: InputNorm,
    params: Vec<NamedArray>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedArray {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("positive shape")
}
