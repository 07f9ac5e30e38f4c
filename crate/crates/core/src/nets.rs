//! KAN and MLP layers, probabilistic / point heads, model assembly and the
//! binary model file format.
//!
//! A model is a trunk (a stack of layers mapping the `c`-wide context to a
//! hidden representation) followed by one head per output quantity. KAN
//! families use KAN layers everywhere, including the heads; MLP families use
//! SiLU dense layers in the trunk and linear heads.
//!
//! Everything inside the network runs in standardized units; [`ModelState::predict`]
//! converts the outputs back to the data scale.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::data::Standardizer;
use crate::likelihood::{Family, PredictiveDistribution};
use crate::spline::{ConnectionParams, SplineError, SplineSpec};

/// Floor added to every predicted scale (standardized units).
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Floor added to `ν - 2` so that `ν > 2` survives softplus underflow.
pub const NU_EXCESS_FLOOR: f64 = 1e-6;

const MAGIC: &[u8; 4] = b"PKAN";
const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum NetsError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("layer {layer} expects input width {expected}, got {actual}")]
    InputWidth {
        layer: usize,
        expected: usize,
        actual: usize,
    },
    #[error("layer {layer} produced a non-finite value")]
    NonFinite { layer: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error("model file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, NetsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    PKan,
    PMlp,
    KanPf,
    MlpPf,
}

impl ModelFamily {
    pub fn is_kan(self) -> bool {
        matches!(self, ModelFamily::PKan | ModelFamily::KanPf)
    }

    pub fn is_point(self) -> bool {
        matches!(self, ModelFamily::KanPf | ModelFamily::MlpPf)
    }

    pub fn label(self) -> &'static str {
        match self {
            ModelFamily::PKan => "p_kan",
            ModelFamily::PMlp => "p_mlp",
            ModelFamily::KanPf => "kan_pf",
            ModelFamily::MlpPf => "mlp_pf",
        }
    }

    fn code(self) -> u8 {
        match self {
            ModelFamily::PKan => 0,
            ModelFamily::PMlp => 1,
            ModelFamily::KanPf => 2,
            ModelFamily::MlpPf => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => ModelFamily::PKan,
            1 => ModelFamily::PMlp,
            2 => ModelFamily::KanPf,
            3 => ModelFamily::MlpPf,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodKind {
    Gaussian,
    StudentT,
    None,
}

impl LikelihoodKind {
    pub fn family(self) -> Option<Family> {
        match self {
            LikelihoodKind::Gaussian => Some(Family::Gaussian),
            LikelihoodKind::StudentT => Some(Family::StudentT),
            LikelihoodKind::None => None,
        }
    }

    /// Number of output heads.
    pub fn num_heads(self) -> usize {
        match self {
            LikelihoodKind::Gaussian => 2,
            LikelihoodKind::StudentT => 3,
            LikelihoodKind::None => 1,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            LikelihoodKind::Gaussian => "gaussian",
            LikelihoodKind::StudentT => "student_t",
            LikelihoodKind::None => "none",
        }
    }

    fn code(self) -> u8 {
        match self {
            LikelihoodKind::Gaussian => 0,
            LikelihoodKind::StudentT => 1,
            LikelihoodKind::None => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => LikelihoodKind::Gaussian,
            1 => LikelihoodKind::StudentT,
            2 => LikelihoodKind::None,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplineConfig {
    /// Polynomial degree `k` of the B-spline pieces.
    pub order: usize,
    pub num_basis: usize,
    pub grid_min: f64,
    pub grid_max: f64,
}

impl Default for SplineConfig {
    fn default() -> Self {
        Self {
            order: 3,
            num_basis: 8,
            grid_min: -3.0,
            grid_max: 3.0,
        }
    }
}

impl SplineConfig {
    pub fn spec(&self) -> std::result::Result<SplineSpec, SplineError> {
        SplineSpec::new(self.order, self.num_basis, self.grid_min, self.grid_max)
    }
}

/// Default KAN hidden widths `[c → 44 → 12]`.
pub const DEFAULT_KAN_HIDDEN: [usize; 2] = [44, 12];
/// Default MLP hidden widths `[c → 512 → 256 → 128]`.
pub const DEFAULT_MLP_HIDDEN: [usize; 3] = [512, 256, 128];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: ModelFamily,
    pub likelihood: LikelihoodKind,
    pub context: usize,
    pub horizon: usize,
    pub hidden_sizes: Vec<usize>,
    #[serde(default)]
    pub spline: SplineConfig,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    /// Full-scale defaults (`c = 168`, `h = 24`) for a family/likelihood pair.
    pub fn defaults(family: ModelFamily, likelihood: LikelihoodKind) -> Self {
        let hidden_sizes = if family.is_kan() {
            DEFAULT_KAN_HIDDEN.to_vec()
        } else {
            DEFAULT_MLP_HIDDEN.to_vec()
        };
        Self {
            family,
            likelihood: if family.is_point() {
                LikelihoodKind::None
            } else {
                likelihood
            },
            context: 168,
            horizon: 24,
            hidden_sizes,
            spline: SplineConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.context == 0 || self.horizon == 0 {
            return Err(NetsError::Config("context and horizon must be positive".into()));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(NetsError::Config("hidden widths must be positive".into()));
        }
        if self.family.is_point() != (self.likelihood == LikelihoodKind::None) {
            return Err(NetsError::Config(format!(
                "family {} cannot use likelihood {}",
                self.family.label(),
                self.likelihood.label()
            )));
        }
        if self.family.is_kan() {
            self.spline.spec()?;
        }
        Ok(())
    }

    /// `family` or `family:likelihood`, e.g. `p_kan:student_t`.
    pub fn variant_label(&self) -> String {
        match self.likelihood {
            LikelihoodKind::None => self.family.label().to_string(),
            l => format!("{}:{}", self.family.label(), l.label()),
        }
    }

    fn widths(&self) -> Vec<usize> {
        std::iter::once(self.context)
            .chain(self.hidden_sizes.iter().copied())
            .collect()
    }
}

/// Trainable scalar count from the architecture alone: KAN layers carry
/// `n_out · n_in · (R + 2)`, dense layers `n_out · (n_in + 1)`.
pub fn count_parameters(config: &ModelConfig) -> usize {
    let layer = |n_in: usize, n_out: usize| {
        if config.family.is_kan() {
            n_out * n_in * (config.spline.num_basis + 2)
        } else {
            n_out * (n_in + 1)
        }
    };
    let widths = config.widths();
    let trunk: usize = widths.windows(2).map(|w| layer(w[0], w[1])).sum();
    let last = *widths.last().expect("widths start with the context");
    trunk + config.likelihood.num_heads() * layer(last, config.horizon)
}

/// One KAN layer: `out_t = Σ_i φ_{t,i}(x_i)`, with no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct KanLayer {
    pub n_in: usize,
    pub n_out: usize,
    pub spec: SplineSpec,
    /// Base weights `w`, shape `[n_out, n_in]`.
    pub base_weight: Tensor,
    /// Spline weights `s`, shape `[n_out, n_in]`.
    pub spline_weight: Tensor,
    /// Coefficients `c`, shape `[n_out, n_in, R]`.
    pub coeffs: Tensor,
}

impl KanLayer {
    /// `w ~ N(0, 1/√n_in)`, `s = 1`, `c_r ~ N(0, 0.1)` (standard deviations).
    pub fn init(n_in: usize, n_out: usize, spec: SplineSpec, rng: &mut ChaCha8Rng) -> Self {
        let r = spec.num_basis();
        let w_dist = Normal::new(0.0, 1.0 / (n_in as f64).sqrt()).expect("positive std");
        let c_dist = Normal::new(0.0, 0.1).expect("positive std");
        let w: Vec<f64> = (0..n_out * n_in).map(|_| w_dist.sample(rng)).collect();
        let c: Vec<f64> = (0..n_out * n_in * r).map(|_| c_dist.sample(rng)).collect();
        Self {
            n_in,
            n_out,
            base_weight: Tensor::new(vec![n_out, n_in], w).expect("sized"),
            spline_weight: Tensor::full(&[n_out, n_in], 1.0),
            coeffs: Tensor::new(vec![n_out, n_in, r], c).expect("sized"),
            spec,
        }
    }

    /// Layer with every connection set to `params`.
    pub fn uniform(n_in: usize, n_out: usize, spec: SplineSpec, params: &ConnectionParams) -> Self {
        let mut layer = Self {
            n_in,
            n_out,
            base_weight: Tensor::zeros(&[n_out, n_in]),
            spline_weight: Tensor::zeros(&[n_out, n_in]),
            coeffs: Tensor::zeros(&[n_out, n_in, spec.num_basis()]),
            spec,
        };
        for o in 0..n_out {
            for i in 0..n_in {
                layer.set_edge(o, i, params);
            }
        }
        layer
    }

    pub fn edge(&self, out: usize, input: usize) -> ConnectionParams {
        let e = out * self.n_in + input;
        let r = self.spec.num_basis();
        ConnectionParams {
            w: self.base_weight.data()[e],
            s: self.spline_weight.data()[e],
            c: self.coeffs.data()[e * r..(e + 1) * r].to_vec(),
        }
    }

    pub fn set_edge(&mut self, out: usize, input: usize, params: &ConnectionParams) {
        let e = out * self.n_in + input;
        let r = self.spec.num_basis();
        self.base_weight.data_mut()[e] = params.w;
        self.spline_weight.data_mut()[e] = params.s;
        self.coeffs.data_mut()[e * r..(e + 1) * r].copy_from_slice(&params.c);
    }

    /// Batched forward for `x` of shape `[N, n_in]`, given the layer's
    /// parameters bound as `[w, s, c]`.
    ///
    /// Both paths reduce to a matrix product: `silu(x) · wᵀ` for the base
    /// path and `B(x) · (s ⊙ c)ᵀ` for the spline path, where `B(x)` is the
    /// `[N, n_in·R]` basis expansion.
    fn forward<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        let (w, s, c) = (params[0], params[1], params[2]);
        let r = self.spec.num_basis();
        let (lo, hi) = self.spec.grid();
        let base = x.silu()?.matmul(w.transpose()?)?;
        let basis = self.spec.basis_var(x.clamp(lo, hi)?);
        let scaled = c
            .reshape(&[self.n_out * self.n_in, r])?
            .mul(s.reshape(&[self.n_out * self.n_in, 1])?)?
            .reshape(&[self.n_out, self.n_in * r])?
            .transpose()?;
        Ok(base.add(basis.matmul(scaled)?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Identity,
}

/// Dense layer `act(x Wᵀ + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpLayer {
    /// Shape `[n_out, n_in]`.
    pub weight: Tensor,
    /// Shape `[n_out]`.
    pub bias: Tensor,
    pub activation: Activation,
}

impl MlpLayer {
    /// Kaiming-uniform fan-in weights, zero bias.
    pub fn init(n_in: usize, n_out: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / n_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bounds");
        let w: Vec<f64> = (0..n_out * n_in).map(|_| dist.sample(rng)).collect();
        Self {
            weight: Tensor::new(vec![n_out, n_in], w).expect("sized"),
            bias: Tensor::zeros(&[n_out]),
            activation,
        }
    }

    pub fn n_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn n_out(&self) -> usize {
        self.weight.shape()[0]
    }

    fn forward<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(params[0].transpose()?)?.add(params[1])?;
        Ok(match self.activation {
            Activation::Silu => y.silu()?,
            Activation::Identity => y,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Kan(KanLayer),
    Mlp(MlpLayer),
}

impl Layer {
    pub fn n_in(&self) -> usize {
        match self {
            Layer::Kan(l) => l.n_in,
            Layer::Mlp(l) => l.n_in(),
        }
    }

    pub fn n_out(&self) -> usize {
        match self {
            Layer::Kan(l) => l.n_out,
            Layer::Mlp(l) => l.n_out(),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Kan(l) => vec![&l.base_weight, &l.spline_weight, &l.coeffs],
            Layer::Mlp(l) => vec![&l.weight, &l.bias],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Kan(l) => vec![&mut l.base_weight, &mut l.spline_weight, &mut l.coeffs],
            Layer::Mlp(l) => vec![&mut l.weight, &mut l.bias],
        }
    }

    /// Forward on a tape. `x` may be `[n_in]` or `[N, n_in]`; the output has
    /// matching rank.
    pub fn forward<'t>(&self, index: usize, params: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let (rows, width, vector) = match shape.as_slice() {
            [w] => (1, *w, true),
            [n, w] => (*n, *w, false),
            _ => (0, 0, false),
        };
        if width != self.n_in() || shape.len() > 2 || shape.is_empty() {
            return Err(NetsError::InputWidth {
                layer: index,
                expected: self.n_in(),
                actual: shape.last().copied().unwrap_or(0),
            });
        }
        let x2 = if vector { x.reshape(&[1, width])? } else { x };
        let y = match self {
            Layer::Kan(l) => l.forward(params, x2)?,
            Layer::Mlp(l) => l.forward(params, x2)?,
        };
        if !y.value().all_finite() {
            return Err(NetsError::NonFinite { layer: index });
        }
        Ok(if vector { y.reshape(&[self.n_out()])? } else { y.reshape(&[rows, self.n_out()])? })
    }
}

/// Single-sample KAN forward, `x` of shape `[n_in]`.
pub fn kan_layer_forward<'t>(layer: &KanLayer, params: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
    Layer::Kan(layer.clone()).forward(0, params, x)
}

/// Runs a dense stack; `params` holds `[W, b]` per layer in order.
pub fn mlp_forward<'t>(layers: &[MlpLayer], params: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
    let mut h = x;
    for (i, l) in layers.iter().enumerate() {
        h = Layer::Mlp(l.clone()).forward(i, &params[2 * i..2 * i + 2], h)?;
    }
    Ok(h)
}

/// Predictive parameters for one context, in data units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub nu: Option<Vec<f64>>,
}

impl DistributionParams {
    pub fn horizon(&self) -> usize {
        self.mu.len()
    }

    pub fn step(&self, i: usize) -> std::result::Result<PredictiveDistribution, crate::likelihood::LikelihoodError> {
        match &self.nu {
            None => PredictiveDistribution::gaussian(self.mu[i], self.sigma[i]),
            Some(nu) => PredictiveDistribution::student_t(self.mu[i], self.sigma[i], nu[i]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    Distribution(DistributionParams),
    Point(Vec<f64>),
}

/// Head outputs on a tape, in standardized units and after the positivity
/// transforms. Each is `[N, h]`.
#[derive(Debug, Clone, Copy)]
pub enum HeadOutputs<'t> {
    Distribution {
        mu: Var<'t>,
        sigma: Var<'t>,
        nu: Option<Var<'t>>,
    },
    Point(Var<'t>),
}

/// All trainable state of a forecaster.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub trunk: Vec<Layer>,
    pub heads: Vec<Layer>,
    pub standardizer: Standardizer,
}

impl ModelState {
    /// Fresh model initialised from `config.seed`.
    pub fn new(config: ModelConfig, standardizer: Standardizer) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let widths = config.widths();
        let last = *widths.last().expect("non-empty");
        let (trunk, heads) = if config.family.is_kan() {
            let spec = config.spline.spec()?;
            let trunk = widths
                .windows(2)
                .map(|w| Layer::Kan(KanLayer::init(w[0], w[1], spec.clone(), &mut rng)))
                .collect();
            let heads = (0..config.likelihood.num_heads())
                .map(|_| Layer::Kan(KanLayer::init(last, config.horizon, spec.clone(), &mut rng)))
                .collect();
            (trunk, heads)
        } else {
            let trunk = widths
                .windows(2)
                .map(|w| Layer::Mlp(MlpLayer::init(w[0], w[1], Activation::Silu, &mut rng)))
                .collect();
            let heads = (0..config.likelihood.num_heads())
                .map(|_| Layer::Mlp(MlpLayer::init(last, config.horizon, Activation::Identity, &mut rng)))
                .collect();
            (trunk, heads)
        };
        Ok(Self {
            config,
            trunk,
            heads,
            standardizer,
        })
    }

    fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.trunk.iter().chain(&self.heads)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.trunk
            .iter_mut()
            .chain(self.heads.iter_mut())
            .flat_map(Layer::params_mut)
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// All parameters concatenated in layer order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn load_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_parameters() {
            return Err(NetsError::Format(format!(
                "expected {} parameters, got {}",
                self.num_parameters(),
                values.len()
            )));
        }
        let mut offset = 0;
        for t in self.params_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// CRC-32 of the little-endian parameter bytes.
    pub fn checksum(&self) -> u32 {
        let mut hasher = crc32fast::Hasher::new();
        for t in self.params() {
            for v in t.data() {
                hasher.update(&v.to_le_bytes());
            }
        }
        hasher.finalize()
    }

    /// Puts every parameter on `tape` as a leaf, in [`Self::params`] order.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params().into_iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Network forward in standardized units. `x` is `[N, c]` (already
    /// standardized); `params` comes from [`Self::bind`].
    pub fn forward<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Result<HeadOutputs<'t>> {
        let mut offset = 0;
        let mut index = 0;
        let mut h = x;
        for layer in &self.trunk {
            let n = layer.params().len();
            h = layer.forward(index, &params[offset..offset + n], h)?;
            offset += n;
            index += 1;
        }
        let mut raw = Vec::with_capacity(self.heads.len());
        for layer in &self.heads {
            let n = layer.params().len();
            raw.push(layer.forward(index, &params[offset..offset + n], h)?);
            offset += n;
            index += 1;
        }
        Ok(match self.config.likelihood {
            LikelihoodKind::None => HeadOutputs::Point(raw[0]),
            kind => {
                let sigma = raw[1].softplus()?.affine(1.0, SIGMA_FLOOR);
                let nu = match kind {
                    LikelihoodKind::StudentT => Some(raw[2].softplus()?.affine(1.0, 2.0 + NU_EXCESS_FLOOR)),
                    _ => None,
                };
                HeadOutputs::Distribution { mu: raw[0], sigma, nu }
            }
        })
    }

    /// Forecast for a batch of raw contexts (each of length `c`).
    pub fn predict_batch(&self, contexts: &[&[f64]]) -> Result<Vec<Prediction>> {
        let c = self.config.context;
        if let Some(bad) = contexts.iter().find(|ctx| ctx.len() != c) {
            return Err(NetsError::InputWidth {
                layer: 0,
                expected: c,
                actual: bad.len(),
            });
        }
        if contexts.is_empty() {
            return Ok(Vec::new());
        }
        let n = contexts.len();
        let h = self.config.horizon;
        let data: Vec<f64> = contexts
            .iter()
            .flat_map(|ctx| ctx.iter().map(|&v| self.standardizer.apply(v)))
            .collect();
        let tape = Tape::new();
        let params = self.bind(&tape);
        let x = tape.leaf(Tensor::new(vec![n, c], data)?);
        let out = self.forward(&params, x)?;
        let (mean, std) = (self.standardizer.mean, self.standardizer.std);
        let rows = |v: Var<'_>, f: &dyn Fn(f64) -> f64| -> Vec<Vec<f64>> {
            v.value().data().chunks(h).map(|r| r.iter().map(|&x| f(x)).collect()).collect()
        };
        Ok(match out {
            HeadOutputs::Point(p) => rows(p, &|x| x * std + mean).into_iter().map(Prediction::Point).collect(),
            HeadOutputs::Distribution { mu, sigma, nu } => {
                let mus = rows(mu, &|x| x * std + mean);
                let sigmas = rows(sigma, &|x| x * std);
                let nus = nu.map(|v| rows(v, &|x| x));
                (0..n)
                    .map(|i| {
                        Prediction::Distribution(DistributionParams {
                            mu: mus[i].clone(),
                            sigma: sigmas[i].clone(),
                            nu: nus.as_ref().map(|v| v[i].clone()),
                        })
                    })
                    .collect()
            }
        })
    }

    pub fn predict(&self, context: &[f64]) -> Result<Prediction> {
        Ok(self.predict_batch(&[context])?.remove(0))
    }

    /// Model file bytes: header, standardizer, parameters, CRC-32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = &self.config;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.push(cfg.family.code());
        buf.push(cfg.likelihood.code());
        buf.extend_from_slice(&(cfg.context as u32).to_le_bytes());
        buf.extend_from_slice(&(cfg.horizon as u32).to_le_bytes());
        buf.extend_from_slice(&(cfg.hidden_sizes.len() as u32).to_le_bytes());
        for &w in &cfg.hidden_sizes {
            buf.extend_from_slice(&(w as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(cfg.spline.order as u32).to_le_bytes());
        buf.extend_from_slice(&(cfg.spline.num_basis as u32).to_le_bytes());
        buf.extend_from_slice(&cfg.spline.grid_min.to_le_bytes());
        buf.extend_from_slice(&cfg.spline.grid_max.to_le_bytes());
        buf.extend_from_slice(&cfg.seed.to_le_bytes());
        buf.extend_from_slice(&self.standardizer.mean.to_le_bytes());
        buf.extend_from_slice(&self.standardizer.std.to_le_bytes());
        let params = self.flatten();
        buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for v in params {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(NetsError::Format("file too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if &body[..4] != MAGIC {
            return Err(NetsError::Format("bad magic".into()));
        }
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(NetsError::Format("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = u16::from_le_bytes(r.take()?);
        if version != FORMAT_VERSION {
            return Err(NetsError::Format(format!("unsupported format version {version}")));
        }
        let family = ModelFamily::from_code(r.take::<1>()?[0])
            .ok_or_else(|| NetsError::Format("unknown family code".into()))?;
        let likelihood = LikelihoodKind::from_code(r.take::<1>()?[0])
            .ok_or_else(|| NetsError::Format("unknown likelihood code".into()))?;
        let context = r.u32()? as usize;
        let horizon = r.u32()? as usize;
        let n_hidden = r.u32()? as usize;
        let hidden_sizes = (0..n_hidden).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let spline = SplineConfig {
            order: r.u32()? as usize,
            num_basis: r.u32()? as usize,
            grid_min: r.f64()?,
            grid_max: r.f64()?,
        };
        let seed = u64::from_le_bytes(r.take()?);
        let standardizer = Standardizer {
            mean: r.f64()?,
            std: r.f64()?,
        };
        let n_params = u64::from_le_bytes(r.take()?) as usize;
        let config = ModelConfig {
            family,
            likelihood,
            context,
            horizon,
            hidden_sizes,
            spline,
            seed,
        };
        let mut model = ModelState::new(config, standardizer)?;
        if n_params != model.num_parameters() {
            return Err(NetsError::Format(format!(
                "header describes {} parameters, file holds {n_params}",
                model.num_parameters()
            )));
        }
        let values = (0..n_params).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if r.pos != body.len() {
            return Err(NetsError::Format("trailing bytes".into()));
        }
        model.load_flat(&values)?;
        Ok(model)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let slice = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| NetsError::Format("truncated".into()))?;
        self.pos = end;
        Ok(slice.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::silu;

    fn tiny(family: ModelFamily, likelihood: LikelihoodKind) -> ModelConfig {
        ModelConfig {
            family,
            likelihood,
            context: 6,
            horizon: 3,
            hidden_sizes: vec![4],
            spline: SplineConfig::default(),
            seed: 11,
        }
    }

    fn zero_model(family: ModelFamily, likelihood: LikelihoodKind) -> ModelState {
        let mut m = ModelState::new(
            tiny(family, likelihood),
            Standardizer { mean: 40.0, std: 5.0 },
        )
        .unwrap();
        let n = m.num_parameters();
        m.load_flat(&vec![0.0; n]).unwrap();
        m
    }

    #[test]
    fn config_validation() {
        assert!(tiny(ModelFamily::PKan, LikelihoodKind::None).validate().is_err());
        assert!(tiny(ModelFamily::KanPf, LikelihoodKind::Gaussian).validate().is_err());
        let mut c = tiny(ModelFamily::PMlp, LikelihoodKind::Gaussian);
        c.horizon = 0;
        assert!(c.validate().is_err());
        assert_eq!(
            ModelConfig::defaults(ModelFamily::KanPf, LikelihoodKind::Gaussian).likelihood,
            LikelihoodKind::None
        );
    }

    #[test]
    fn layer_counts() {
        let spec = SplineSpec::new(3, 8, -3.0, 3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let kan = Layer::Kan(KanLayer::init(3, 2, spec, &mut rng));
        assert_eq!(kan.params().iter().map(|t| t.len()).sum::<usize>(), 60);
        let mlp = Layer::Mlp(MlpLayer::init(3, 2, Activation::Silu, &mut rng));
        assert_eq!(mlp.params().iter().map(|t| t.len()).sum::<usize>(), 8);
    }

    #[test]
    fn zero_gaussian_model_predicts_standardizer() {
        let m = zero_model(ModelFamily::PKan, LikelihoodKind::Gaussian);
        let Prediction::Distribution(d) = m.predict(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap() else {
            panic!("expected distribution")
        };
        for i in 0..3 {
            assert_eq!(d.mu[i], 40.0);
            assert!((d.sigma[i] - (std::f64::consts::LN_2 + SIGMA_FLOOR) * 5.0).abs() < 1e-12);
        }
        assert!(d.nu.is_none());
    }

    #[test]
    fn zero_student_t_model_has_nu_near_two_plus_ln2() {
        let m = zero_model(ModelFamily::PMlp, LikelihoodKind::StudentT);
        let Prediction::Distribution(d) = m.predict(&[0.0; 6]).unwrap() else {
            panic!("expected distribution")
        };
        for nu in d.nu.unwrap() {
            assert!((nu - 2.693_147).abs() < 1e-5);
        }
    }

    #[test]
    fn point_families_emit_raw_values() {
        let m = zero_model(ModelFamily::MlpPf, LikelihoodKind::None);
        assert_eq!(m.predict(&[3.0; 6]).unwrap(), Prediction::Point(vec![40.0; 3]));
    }

    #[test]
    fn wrong_context_length_is_rejected() {
        let m = zero_model(ModelFamily::PKan, LikelihoodKind::Gaussian);
        assert!(matches!(
            m.predict(&[1.0; 5]),
            Err(NetsError::InputWidth { expected: 6, actual: 5, .. })
        ));
    }

    #[test]
    fn kan_layer_special_cases() {
        let spec = SplineSpec::new(3, 8, -3.0, 3.0).unwrap();
        let off = ConnectionParams::new(&spec, 0.0, 0.0, vec![0.3; 8]).unwrap();
        let layer = KanLayer::uniform(3, 2, spec.clone(), &off);
        let tape = Tape::new();
        let params = Layer::Kan(layer.clone()).params().into_iter().map(|t| tape.leaf(t.clone())).collect::<Vec<_>>();
        let x = tape.leaf(Tensor::from_vec(vec![0.4, -1.2, 2.0]));
        let y = kan_layer_forward(&layer, &params, x).unwrap();
        assert_eq!(y.value().data(), &[0.0, 0.0]);

        let silu_edge = ConnectionParams::new(&spec, 1.0, 0.0, vec![0.0; 8]).unwrap();
        let layer = KanLayer::uniform(1, 1, spec, &silu_edge);
        let params = Layer::Kan(layer.clone()).params().into_iter().map(|t| tape.leaf(t.clone())).collect::<Vec<_>>();
        let x = tape.leaf(Tensor::from_vec(vec![0.7]));
        let y = kan_layer_forward(&layer, &params, x).unwrap();
        assert_eq!(y.value().data(), &[silu(0.7)]);
    }

    #[test]
    fn mlp_identity_and_zero_weights() {
        let tape = Tape::new();
        let eye = MlpLayer {
            weight: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: Tensor::zeros(&[2]),
            activation: Activation::Identity,
        };
        let params = vec![tape.leaf(eye.weight.clone()), tape.leaf(eye.bias.clone())];
        let x = tape.leaf(Tensor::from_vec(vec![3.0, -4.0]));
        assert_eq!(mlp_forward(&[eye], &params, x).unwrap().value().data(), &[3.0, -4.0]);

        let zero = MlpLayer {
            weight: Tensor::zeros(&[3, 2]),
            bias: Tensor::from_vec(vec![1.0, 2.0, 3.0]),
            activation: Activation::Identity,
        };
        let params = vec![tape.leaf(zero.weight.clone()), tape.leaf(zero.bias.clone())];
        assert_eq!(mlp_forward(&[zero], &params, x).unwrap().value().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn model_file_round_trip_and_corruption() {
        let m = ModelState::new(
            tiny(ModelFamily::PKan, LikelihoodKind::StudentT),
            Standardizer { mean: 1.5, std: 0.25 },
        )
        .unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"PKAN");
        let back = ModelState::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);

        let mut bad = bytes.clone();
        bad[40] ^= 1;
        assert!(matches!(ModelState::from_bytes(&bad), Err(NetsError::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ModelState::from_bytes(&bad).is_err());
        assert!(ModelState::from_bytes(&bytes[..bytes.len() - 9]).is_err());
    }

    #[test]
    fn count_matches_flattened_length() {
        for family in [ModelFamily::PKan, ModelFamily::PMlp, ModelFamily::KanPf, ModelFamily::MlpPf] {
            for likelihood in [LikelihoodKind::Gaussian, LikelihoodKind::StudentT] {
                let mut cfg = tiny(family, likelihood);
                if family.is_point() {
                    cfg.likelihood = LikelihoodKind::None;
                }
                let m = ModelState::new(cfg.clone(), Standardizer::identity()).unwrap();
                assert_eq!(count_parameters(&cfg), m.flatten().len());
            }
        }
    }
}
