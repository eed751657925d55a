//! Continuous MAGNet kernels.
//!
//! A kernel network maps a normalised time coordinate to one filter weight
//! per output channel. Coordinates live in `[−1, 0]`, where `0` is the most
//! recent sample and `−1` is `horizon_s` seconds in the past. The coordinate
//! is lifted to `hidden_width` features, passed through `n_f` multiplicative
//! Gabor layers
//!
//! ```text
//! g_u(x) = exp(−γ_u²·(x − μ_u)²/2) · sin(ω_u·x + β_u)
//! h_{l+1} = W_l·(g ⊙ h_l) + b_l
//! ```
//!
//! and finally mixed down to `out_channels`. A learned Gaussian mask scales
//! the result and truncates every tap whose mask value falls below
//! `mask_threshold`. Because the kernel is a function of the coordinate, it
//! can be sampled at any rate.

use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{Graph, NodeId, Parameters, Tensor};

/// Default sampling period (200 Hz).
pub const DEFAULT_STEP_S: f64 = 0.005;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub hidden_width: usize,
    pub n_f: usize,
    pub out_channels: usize,
    /// Longest filter history, in seconds; the span of the coordinate axis.
    pub horizon_s: f64,
    pub mask_threshold: f64,
    pub omega0_base: f64,
    /// Initial frequencies are drawn at `omega0_base` scale and divided by this.
    pub omega_divisor: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            hidden_width: 8,
            n_f: 2,
            out_channels: 8,
            horizon_s: 2.0,
            mask_threshold: 0.1,
            omega0_base: 25.0,
            omega_divisor: 250.0,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 || self.out_channels == 0 {
            return Err(Error::Config(
                "kernel hidden_width and out_channels must be positive".into(),
            ));
        }
        if !(self.horizon_s.is_finite() && self.horizon_s > 0.0) {
            return Err(Error::Config(format!(
                "kernel horizon_s must be positive, got {}",
                self.horizon_s
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_threshold) {
            return Err(Error::Config(format!(
                "mask_threshold must lie in [0, 1], got {}",
                self.mask_threshold
            )));
        }
        if !(self.omega_divisor.is_finite() && self.omega_divisor > 0.0)
            || !self.omega0_base.is_finite()
        {
            return Err(Error::Config(
                "omega0_base/omega_divisor must be finite, divisor positive".into(),
            ));
        }
        Ok(())
    }

    /// Number of learnable scalars in one kernel network.
    pub fn param_count(&self) -> usize {
        let w = self.hidden_width;
        let lift = 2 * w;
        let layer = 4 * w + w * w + w;
        let mixer = self.out_channels * w + self.out_channels;
        let mask = 2;
        lift + self.n_f * layer + mixer + mask
    }
}

/// One multiplicative Gabor layer. All per-unit tensors are `[W, 1]` columns
/// so they broadcast against a `[1, K]` coordinate row.
#[derive(Clone, Debug, PartialEq)]
pub struct GaborLayer {
    pub mu: Tensor,
    pub log_gamma: Tensor,
    pub omega: Tensor,
    pub beta: Tensor,
    pub mix_w: Tensor,
    pub mix_b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MagnetKernel {
    pub config: KernelConfig,
    pub lift_w: Tensor,
    pub lift_b: Tensor,
    pub layers: Vec<GaborLayer>,
    pub mixer_w: Tensor,
    pub mixer_b: Tensor,
    pub mask_mu: Tensor,
    pub mask_log_sigma: Tensor,
}

/// Graph handles for a bound [`GaborLayer`].
#[derive(Clone, Copy, Debug)]
pub struct GaborVars {
    pub mu: NodeId,
    pub log_gamma: NodeId,
    pub omega: NodeId,
    pub beta: NodeId,
    pub mix_w: NodeId,
    pub mix_b: NodeId,
}

/// Graph handles for a bound [`MagnetKernel`].
#[derive(Clone, Debug)]
pub struct KernelVars {
    pub lift_w: NodeId,
    pub lift_b: NodeId,
    pub layers: Vec<GaborVars>,
    pub mixer_w: NodeId,
    pub mixer_b: NodeId,
    pub mask_mu: NodeId,
    pub mask_log_sigma: NodeId,
}

impl KernelVars {
    /// Node ids in [`Parameters::visit`] order.
    pub fn ids(&self) -> Vec<NodeId> {
        let mut ids = vec![self.lift_w, self.lift_b];
        for l in &self.layers {
            ids.extend([l.mu, l.log_gamma, l.omega, l.beta, l.mix_w, l.mix_b]);
        }
        ids.extend([
            self.mixer_w,
            self.mixer_b,
            self.mask_mu,
            self.mask_log_sigma,
        ]);
        ids
    }
}

/// Sample positions of a causal filter on the normalised coordinate axis.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateGrid {
    step_s: f64,
    horizon_s: f64,
    coords: Vec<f64>,
}

impl CoordinateGrid {
    /// Every tap from the present back to the full horizon.
    pub fn full(step_s: f64, horizon_s: f64) -> Result<Self> {
        Self::with_len(step_s, horizon_s, usize::MAX)
    }

    /// The first `len` taps, capped at the full horizon.
    pub fn with_len(step_s: f64, horizon_s: f64, len: usize) -> Result<Self> {
        if !(step_s.is_finite() && step_s > 0.0 && horizon_s.is_finite() && horizon_s > 0.0) {
            return Err(Error::Config(format!(
                "grid needs positive step and horizon, got {step_s} / {horizon_s}"
            )));
        }
        if len == 0 {
            return Err(Error::Config("a kernel needs at least one tap".into()));
        }
        let ratio = step_s / horizon_s;
        let full = (1.0 / ratio + 1e-9).floor() as usize + 1;
        let coords = (0..full.min(len)).map(|k| -(k as f64) * ratio).collect();
        Ok(Self {
            step_s,
            horizon_s,
            coords,
        })
    }

    pub fn step_s(&self) -> f64 {
        self.step_s
    }

    pub fn horizon_s(&self) -> f64 {
        self.horizon_s
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    fn row(&self) -> Tensor {
        Tensor::new(vec![1, self.coords.len()], self.coords.clone()).expect("non-empty grid")
    }
}

/// Gaussian mask `exp(−½((x − μ)/σ)²)` evaluated at each coordinate.
pub fn gaussian_mask(coords: &[f64], mask_mu: f64, mask_sigma: f64) -> Vec<f64> {
    coords
        .iter()
        .map(|&x| {
            let z = (x - mask_mu) / mask_sigma;
            (-0.5 * z * z).exp()
        })
        .collect()
}

/// The scalar Gabor response of one unit at one coordinate.
pub fn gabor_value(x: f64, mu: f64, gamma: f64, omega: f64, beta: f64) -> f64 {
    let z = gamma * (x - mu);
    (-0.5 * z * z).exp() * (omega * x + beta).sin()
}

/// One Gabor layer on the graph: `W·(g ⊙ h) + b`, where `g` is evaluated on
/// the coordinate row `x` (`[1, K]`) and `h` is the previous layer (`[W, K]`).
pub fn gabor_eval(g: &mut Graph, layer: &GaborVars, x: NodeId, h: NodeId) -> Result<NodeId> {
    let diff = g.sub(x, layer.mu)?;
    let gamma = g.exp(layer.log_gamma);
    let z = g.mul(diff, gamma)?;
    let z2 = g.square(z);
    let half = g.scale(z2, -0.5);
    let envelope = g.exp(half);
    let wx = g.mul(layer.omega, x)?;
    let phase = g.add(wx, layer.beta)?;
    let wave = g.sin(phase);
    let gabor = g.mul(envelope, wave)?;
    let gated = g.mul(gabor, h)?;
    g.pointwise_linear(gated, layer.mix_w, layer.mix_b)
}

impl MagnetKernel {
    pub fn init(config: &KernelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.hidden_width;
        let mix_bound = (1.0 / w as f64).sqrt();
        let omega_scale = config.omega0_base / config.omega_divisor;

        let lift_w = uniform(&mut rng, vec![w, 1], -1.0, 1.0);
        let lift_b = uniform(&mut rng, vec![w], -1.0, 1.0);
        let layers = (0..config.n_f)
            .map(|_| {
                let mu = uniform(&mut rng, vec![w, 1], -1.0, 0.0);
                let gammas = uniform(&mut rng, vec![w, 1], 0.5, 2.0);
                let log_gamma = map(gammas, f64::ln);
                let omega = map(uniform(&mut rng, vec![w, 1], -1.0, 1.0), |u| {
                    u * omega_scale
                });
                let beta = uniform(&mut rng, vec![w, 1], -PI, PI);
                let mix_w = uniform(&mut rng, vec![w, w], -mix_bound, mix_bound);
                let mix_b = Tensor::zeros(vec![w]);
                GaborLayer {
                    mu,
                    log_gamma,
                    omega,
                    beta,
                    mix_w,
                    mix_b,
                }
            })
            .collect();
        let mixer_w = uniform(
            &mut rng,
            vec![config.out_channels, w],
            -mix_bound,
            mix_bound,
        );
        let mixer_b = Tensor::zeros(vec![config.out_channels]);
        let mut kernel = Self {
            config: config.clone(),
            lift_w,
            lift_b,
            layers,
            mixer_w,
            mixer_b,
            mask_mu: Tensor::zeros(vec![1, 1]),
            // σ = 1 keeps the mask above 0.6 over the whole span.
            mask_log_sigma: Tensor::zeros(vec![1, 1]),
        };
        kernel.visit_mut("", &mut |_, t| t.set_requires_grad(true));
        Ok(kernel)
    }

    pub fn out_channels(&self) -> usize {
        self.config.out_channels
    }

    pub fn mask_sigma(&self) -> f64 {
        self.mask_log_sigma.data()[0].exp()
    }

    /// Adds the kernel's parameters to `g`. With `trainable == false` they
    /// enter as constants and no gradient is tracked.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> KernelVars {
        let mut put = |t: &Tensor| {
            if trainable {
                g.leaf(t)
            } else {
                g.constant(t.clone())
            }
        };
        let lift_w = put(&self.lift_w);
        let lift_b = put(&self.lift_b);
        let layers = self
            .layers
            .iter()
            .map(|l| GaborVars {
                mu: put(&l.mu),
                log_gamma: put(&l.log_gamma),
                omega: put(&l.omega),
                beta: put(&l.beta),
                mix_w: put(&l.mix_w),
                mix_b: put(&l.mix_b),
            })
            .collect();
        KernelVars {
            lift_w,
            lift_b,
            layers,
            mixer_w: put(&self.mixer_w),
            mixer_b: put(&self.mixer_b),
            mask_mu: put(&self.mask_mu),
            mask_log_sigma: put(&self.mask_log_sigma),
        }
    }

    /// The unmasked kernel, `[out_channels, K]`, at the coordinate row `x`.
    pub fn continuous_on_graph(g: &mut Graph, vars: &KernelVars, x: NodeId) -> Result<NodeId> {
        let mut h = g.pointwise_linear(x, vars.lift_w, vars.lift_b)?;
        for layer in &vars.layers {
            h = gabor_eval(g, layer, x, h)?;
        }
        g.pointwise_linear(h, vars.mixer_w, vars.mixer_b)
    }

    /// The Gaussian mask, `[1, K]`, at the coordinate row `x`.
    pub fn mask_on_graph(g: &mut Graph, vars: &KernelVars, x: NodeId) -> Result<NodeId> {
        let diff = g.sub(x, vars.mask_mu)?;
        let neg_log_sigma = g.neg(vars.mask_log_sigma);
        let inv_sigma = g.exp(neg_log_sigma);
        let z = g.mul(diff, inv_sigma)?;
        let z2 = g.square(z);
        let half = g.scale(z2, -0.5);
        Ok(g.exp(half))
    }

    /// Samples the masked, truncated filter `[out_channels, K]` on `grid`.
    /// Taps whose mask value is below the threshold are exactly zero; all
    /// other taps stay differentiable in every kernel parameter.
    pub fn sample_on_graph(
        &self,
        g: &mut Graph,
        vars: &KernelVars,
        grid: &CoordinateGrid,
    ) -> Result<NodeId> {
        if grid.is_empty() {
            return Err(Error::Config("a kernel needs at least one tap".into()));
        }
        let x = g.constant(grid.row());
        let cont = Self::continuous_on_graph(g, vars, x)?;
        let mask = Self::mask_on_graph(g, vars, x)?;
        let keep: Vec<f64> = g
            .value(mask)
            .data()
            .iter()
            .map(|&m| {
                if m >= self.config.mask_threshold {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let keep = g.constant(Tensor::new(vec![1, grid.len()], keep)?);
        let masked = g.mul(cont, mask)?;
        g.mul(masked, keep)
    }

    /// Samples the filter without tracking gradients.
    pub fn sample(&self, grid: &CoordinateGrid) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let out = self.sample_on_graph(&mut g, &vars, grid)?;
        Ok(g.value(out).clone())
    }

    /// The unmasked continuous kernel at arbitrary coordinates.
    pub fn continuous(&self, coords: &[f64]) -> Result<Tensor> {
        if coords.is_empty() {
            return Err(Error::Config("no coordinates to evaluate".into()));
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(Tensor::new(vec![1, coords.len()], coords.to_vec())?);
        let out = Self::continuous_on_graph(&mut g, &vars, x)?;
        Ok(g.value(out).clone())
    }

    pub fn mask_values(&self, coords: &[f64]) -> Vec<f64> {
        gaussian_mask(coords, self.mask_mu.data()[0], self.mask_sigma())
    }

    /// Support length of the sampled filter across all channels.
    pub fn effective_length(&self, grid: &CoordinateGrid) -> Result<EffectiveLength> {
        let sampled = self.sample(grid)?;
        Ok(effective_length_of(&sampled, grid.step_s()))
    }

    /// One row per (channel, tap) for plotting the learned filter.
    pub fn export_rows(&self, grid: &CoordinateGrid) -> Result<Vec<KernelRow>> {
        let cont = self.continuous(grid.coords())?;
        let mask = self.mask_values(grid.coords());
        let sampled = self.sample(grid)?;
        let k_len = grid.len();
        let mut rows = Vec::with_capacity(self.out_channels() * k_len);
        for c in 0..self.out_channels() {
            for k in 0..k_len {
                rows.push(KernelRow {
                    channel: c,
                    coord: grid.coords()[k],
                    continuous_value: cont.data()[c * k_len + k],
                    mask_value: mask[k],
                    sampled_tap: sampled.data()[c * k_len + k],
                });
            }
        }
        Ok(rows)
    }
}

impl Parameters for GaborLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}mu"), &self.mu);
        f(format!("{prefix}log_gamma"), &self.log_gamma);
        f(format!("{prefix}omega"), &self.omega);
        f(format!("{prefix}beta"), &self.beta);
        f(format!("{prefix}mix_w"), &self.mix_w);
        f(format!("{prefix}mix_b"), &self.mix_b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}mu"), &mut self.mu);
        f(format!("{prefix}log_gamma"), &mut self.log_gamma);
        f(format!("{prefix}omega"), &mut self.omega);
        f(format!("{prefix}beta"), &mut self.beta);
        f(format!("{prefix}mix_w"), &mut self.mix_w);
        f(format!("{prefix}mix_b"), &mut self.mix_b);
    }
}

impl Parameters for MagnetKernel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}lift_w"), &self.lift_w);
        f(format!("{prefix}lift_b"), &self.lift_b);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}gabor.{i}."), f);
        }
        f(format!("{prefix}mixer_w"), &self.mixer_w);
        f(format!("{prefix}mixer_b"), &self.mixer_b);
        f(format!("{prefix}mask_mu"), &self.mask_mu);
        f(format!("{prefix}mask_log_sigma"), &self.mask_log_sigma);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}lift_w"), &mut self.lift_w);
        f(format!("{prefix}lift_b"), &mut self.lift_b);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}gabor.{i}."), f);
        }
        f(format!("{prefix}mixer_w"), &mut self.mixer_w);
        f(format!("{prefix}mixer_b"), &mut self.mixer_b);
        f(format!("{prefix}mask_mu"), &mut self.mask_mu);
        f(format!("{prefix}mask_log_sigma"), &mut self.mask_log_sigma);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EffectiveLength {
    pub ms: f64,
    /// Set when every tap was truncated.
    pub all_zero: bool,
}

/// `(last nonzero tap + 1) × step`, in milliseconds, over all channels of a
/// `[C, K]` filter.
pub fn effective_length_of(filter: &Tensor, step_s: f64) -> EffectiveLength {
    let k_len = filter.shape()[filter.shape().len() - 1];
    let last = filter
        .data()
        .chunks(k_len)
        .filter_map(|row| row.iter().rposition(|&v| v != 0.0))
        .max();
    match last {
        Some(k) => EffectiveLength {
            ms: (k + 1) as f64 * step_s * 1000.0,
            all_zero: false,
        },
        None => {
            log::warn!("filter is entirely truncated by its mask");
            EffectiveLength {
                ms: 0.0,
                all_zero: true,
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KernelRow {
    pub channel: usize,
    pub coord: f64,
    pub continuous_value: f64,
    pub mask_value: f64,
    pub sampled_tap: f64,
}

pub fn write_kernel_csv<W: Write>(out: W, rows: &[KernelRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("positive shape")
}

fn map(t: Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let shape = t.shape().to_vec();
    Tensor::new(shape, t.into_data().into_iter().map(f).collect()).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn degenerate_kernel(n_f: usize) -> MagnetKernel {
        let cfg = KernelConfig {
            hidden_width: 1,
            n_f,
            out_channels: 1,
            mask_threshold: 0.0,
            ..KernelConfig::default()
        };
        let mut k = MagnetKernel::init(&cfg, 0).unwrap();
        k.lift_w = Tensor::full(vec![1, 1], 1.0);
        k.lift_b = Tensor::zeros(vec![1]);
        k.mixer_w = Tensor::full(vec![1, 1], 1.0);
        k.mixer_b = Tensor::zeros(vec![1]);
        // σ = e^20: mask is 1 to within 1e-17 on [−1, 0].
        k.mask_log_sigma = Tensor::full(vec![1, 1], 20.0);
        k
    }

    #[test]
    fn gabor_value_examples() {
        assert_eq!(gabor_value(0.0, 0.0, 1.3, 2.0, PI / 2.0), 1.0);
        assert_eq!(gabor_value(0.4, 0.4, 1.0, 0.0, 0.0), 0.0);
        let v = gabor_value(0.5, 0.0, 2.0, PI, 0.0);
        // exp(−0.5)·sin(π/2)
        assert!((v - 0.606_530_659_712_633_4).abs() < 1e-15, "{v}");
    }

    #[test]
    fn gabor_eval_matches_scalar_formula() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 3], vec![0.0, -0.25, -0.5]).unwrap());
        let h = g.constant(Tensor::full(vec![1, 3], 1.0));
        let vars = GaborVars {
            mu: g.constant(Tensor::full(vec![1, 1], -0.1)),
            log_gamma: g.constant(Tensor::full(vec![1, 1], 2.0f64.ln())),
            omega: g.constant(Tensor::full(vec![1, 1], PI)),
            beta: g.constant(Tensor::full(vec![1, 1], 0.3)),
            mix_w: g.constant(Tensor::full(vec![1, 1], 1.0)),
            mix_b: g.constant(Tensor::zeros(vec![1])),
        };
        let out = gabor_eval(&mut g, &vars, x, h).unwrap();
        for (k, &xv) in [0.0, -0.25, -0.5].iter().enumerate() {
            let want = gabor_value(xv, -0.1, 2.0, PI, 0.3);
            assert!((g.value(out).data()[k] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn grid_layout() {
        let grid = CoordinateGrid::full(0.005, 2.0).unwrap();
        assert_eq!(grid.len(), 401);
        assert_eq!(grid.coords()[0], 0.0);
        assert!((grid.coords()[400] + 1.0).abs() < 1e-12);
        assert!(grid.coords().windows(2).all(|w| w[1] < w[0]));
        assert_eq!(CoordinateGrid::with_len(0.005, 2.0, 10).unwrap().len(), 10);
        assert!(CoordinateGrid::with_len(0.005, 2.0, 0).is_err());
    }

    #[test]
    fn degenerate_kernel_returns_coordinates() {
        let k = degenerate_kernel(0);
        let grid = CoordinateGrid::with_len(0.005, 2.0, 50).unwrap();
        let s = k.sample(&grid).unwrap();
        for (a, b) in s.data().iter().zip(grid.coords()) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn threshold_one_truncates_everything() {
        let mut k = MagnetKernel::init(&KernelConfig::default(), 3).unwrap();
        k.config.mask_threshold = 1.0;
        k.mask_mu = Tensor::full(vec![1, 1], 0.5); // peak lies outside [−1, 0]
        let grid = CoordinateGrid::full(0.005, 2.0).unwrap();
        let s = k.sample(&grid).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
        let len = k.effective_length(&grid).unwrap();
        assert_eq!(len.ms, 0.0);
        assert!(len.all_zero);
    }

    #[test]
    fn mask_examples() {
        assert_eq!(gaussian_mask(&[-0.3], -0.3, 0.7), vec![1.0]);
        let sigma = 0.2;
        let z = (2.0 * 10f64.ln()).sqrt();
        assert!((z - 2.145_966_026_289_347).abs() < 1e-15);
        let at_cut = gaussian_mask(&[-sigma * z], 0.0, sigma)[0];
        assert!((at_cut - 0.1).abs() < 1e-15, "{at_cut}");
        let wide = gaussian_mask(&[0.0, -0.5, -1.0], 0.0, 1e3);
        assert!(wide.iter().all(|&m| (1.0 - m) < 1e-6));
    }

    #[test]
    fn effective_length_examples() {
        let mut k = MagnetKernel::init(&KernelConfig::default(), 5).unwrap();
        k.mask_mu = Tensor::zeros(vec![1, 1]);
        k.mask_log_sigma = Tensor::full(vec![1, 1], 0.2f64.ln());
        k.mixer_b = Tensor::full(vec![8], 1.0); // keep every surviving tap nonzero
        let grid = CoordinateGrid::full(0.005, 2.0).unwrap();
        // cutoff at 0.2·√(2 ln 10)·2000 ms = 858.4 ms; last kept tap 171.
        let len = k.effective_length(&grid).unwrap();
        assert_eq!(len.ms, 860.0);
        assert!(!len.all_zero);

        k.config.mask_threshold = 0.0;
        assert_eq!(k.effective_length(&grid).unwrap().ms, 2005.0);
    }

    #[test]
    fn truncated_taps_are_exact_zeros() {
        let mut k = MagnetKernel::init(&KernelConfig::default(), 9).unwrap();
        k.mask_mu = Tensor::full(vec![1, 1], -0.2);
        k.mask_log_sigma = Tensor::full(vec![1, 1], 0.15f64.ln());
        let grid = CoordinateGrid::full(0.005, 2.0).unwrap();
        let s = k.sample(&grid).unwrap();
        let mask = k.mask_values(grid.coords());
        let k_len = grid.len();
        for c in 0..k.out_channels() {
            for (i, &m) in mask.iter().enumerate() {
                if m < k.config.mask_threshold {
                    assert_eq!(s.data()[c * k_len + i], 0.0);
                }
            }
        }
        assert!(mask.iter().any(|&m| m < 0.1));
    }

    #[test]
    fn resampling_is_consistent_at_shared_points() {
        let k = MagnetKernel::init(&KernelConfig::default(), 21).unwrap();
        let coarse = CoordinateGrid::full(0.005, 2.0).unwrap();
        let fine = CoordinateGrid::full(0.0025, 2.0).unwrap();
        let a = k.continuous(coarse.coords()).unwrap();
        let b = k.continuous(fine.coords()).unwrap();
        let (kc, kf) = (coarse.len(), fine.len());
        for c in 0..k.out_channels() {
            for i in 0..kc {
                let d = (a.data()[c * kc + i] - b.data()[c * kf + 2 * i]).abs();
                assert!(d <= 1e-12);
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_scales_omega() {
        let cfg = KernelConfig::default();
        assert_eq!(
            MagnetKernel::init(&cfg, 4).unwrap(),
            MagnetKernel::init(&cfg, 4).unwrap()
        );
        let raw = MagnetKernel::init(
            &KernelConfig {
                omega_divisor: 1.0,
                ..cfg.clone()
            },
            4,
        )
        .unwrap();
        let low = MagnetKernel::init(&cfg, 4).unwrap();
        for (a, b) in raw.layers.iter().zip(&low.layers) {
            for (x, y) in a.omega.data().iter().zip(b.omega.data()) {
                assert!(((x / y) - 250.0).abs() < 1e-12);
            }
        }
        assert!(MagnetKernel::init(
            &KernelConfig {
                hidden_width: 0,
                ..cfg
            },
            0
        )
        .is_err());
    }

    #[test]
    fn param_count_matches_enumeration() {
        for (w, n_f, c) in [(1, 0, 1), (1, 1, 1), (4, 3, 2), (10, 2, 8)] {
            let cfg = KernelConfig {
                hidden_width: w,
                n_f,
                out_channels: c,
                ..KernelConfig::default()
            };
            let k = MagnetKernel::init(&cfg, 0).unwrap();
            let mut n = 0;
            k.visit("", &mut |_, t| n += t.numel());
            assert_eq!(n, cfg.param_count());
            let mut g = Graph::new();
            assert_eq!(k.bind(&mut g, true).ids().len(), k.param_names().len());
        }
    }

    #[test]
    fn kernel_csv_has_expected_header() {
        let k = MagnetKernel::init(&KernelConfig::default(), 2).unwrap();
        let grid = CoordinateGrid::with_len(0.005, 2.0, 3).unwrap();
        let rows = k.export_rows(&grid).unwrap();
        assert_eq!(rows.len(), 3 * 8);
        let mut buf = Vec::new();
        write_kernel_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("channel,coord,continuous_value,mask_value,sampled_tap\n"));
    }
}
