use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::layers::{self, NormCache};
use super::tensor::{Real, Tensor};
use super::NnetError;
use crate::imaging::BinaryMask;
use crate::metrics::ProbabilityMap;

/// Output probabilities are clamped to `[PROB_EPSILON, 1 - PROB_EPSILON]`.
pub const PROB_EPSILON: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Plain,
    Residual,
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub block_kind: BlockKind,
    /// Number of downsampling levels.
    pub depth: usize,
    /// Channels at full resolution; doubled per level.
    pub base_channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub growth_rate: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense_layers_per_block: Option<usize>,
    /// U-Net++ topology.
    pub nested_skips: bool,
    /// Per-channel normalization after each convolution.
    pub use_norm: bool,
    /// Per-image, per-channel standardization of the network input.
    #[serde(default)]
    pub input_norm: bool,
    pub input_channels: usize,
    pub output_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    /// Seed for parameter initialization.
    #[serde(default)]
    pub init_seed: u64,
}

impl ModelConfig {
    /// Small residual U-Net on 64x64 RGB input.
    pub fn unet(depth: usize, base_channels: usize) -> Self {
        ModelConfig {
            block_kind: BlockKind::Residual,
            depth,
            base_channels,
            growth_rate: None,
            dense_layers_per_block: None,
            nested_skips: false,
            use_norm: false,
            input_norm: false,
            input_channels: 3,
            output_channels: 1,
            input_height: 64,
            input_width: 64,
            init_seed: 0,
        }
    }

    pub fn unet_plus_plus(depth: usize, base_channels: usize) -> Self {
        ModelConfig {
            nested_skips: true,
            ..Self::unet(depth, base_channels)
        }
    }

    pub fn dense(depth: usize, base_channels: usize, growth_rate: usize, layers: usize) -> Self {
        ModelConfig {
            block_kind: BlockKind::Dense,
            growth_rate: Some(growth_rate),
            dense_layers_per_block: Some(layers),
            ..Self::unet(depth, base_channels)
        }
    }

    pub fn validate(&self) -> Result<(), NnetError> {
        let bad = |m: String| Err(NnetError::Config(m));
        if self.depth == 0 || self.depth > 8 {
            return bad(format!("depth must be in 1..=8, got {}", self.depth));
        }
        if self.base_channels == 0 || self.input_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.output_channels != 1 {
            return bad(format!("output_channels must be 1, got {}", self.output_channels));
        }
        let div = 1usize << self.depth;
        if self.input_height == 0
            || self.input_width == 0
            || self.input_height % div != 0
            || self.input_width % div != 0
        {
            return bad(format!(
                "input {}x{} is not divisible by 2^depth = {div}",
                self.input_width, self.input_height
            ));
        }
        let dense = self.block_kind == BlockKind::Dense;
        match (dense, self.growth_rate, self.dense_layers_per_block) {
            (true, Some(g), Some(l)) if g >= 1 && l >= 1 => Ok(()),
            (true, _, _) => bad("dense blocks need growth_rate >= 1 and dense_layers_per_block >= 1".into()),
            (false, None, None) => Ok(()),
            (false, _, _) => bad("growth_rate / dense_layers_per_block only apply to dense blocks".into()),
        }
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Nodes `(level, column)` in evaluation order.
    fn nodes(&self) -> Vec<(usize, usize)> {
        let d = self.depth;
        let mut out = Vec::new();
        for j in 0..=d {
            for i in 0..=d - j {
                if j == 0 || self.nested_skips || i + j == d {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Same-level predecessors concatenated into node `(i, j)`, `j >= 1`.
    fn skips(&self, i: usize, j: usize) -> Vec<(usize, usize)> {
        if self.nested_skips {
            (0..j).map(|k| (i, k)).collect()
        } else {
            vec![(i, 0)]
        }
    }

    fn node_in_channels(&self, i: usize, j: usize) -> usize {
        match (i, j) {
            (0, 0) => self.input_channels,
            (_, 0) => self.channels(i - 1),
            _ => self.skips(i, j).len() * self.channels(i) + self.channels(i + 1),
        }
    }
}

fn node_name(i: usize, j: usize) -> String {
    format!("x{i}_{j}")
}

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Parameters<T> {
    pub fn new(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    fn require(&self, name: &str) -> Result<&Tensor<T>, NnetError> {
        self.tensors.get(name).ok_or_else(|| NnetError::Shape {
            layer: name.to_string(),
            expected: "parameter present".into(),
            got: "missing".into(),
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Parameters<U> {
        Parameters {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    fn accumulate(&mut self, name: &str, g: &Tensor<T>) {
        self.tensors
            .get_mut(name)
            .expect("gradient buffers mirror the parameters")
            .add_assign(g);
    }

    pub fn into_inner(self) -> BTreeMap<String, Tensor<T>> {
        self.tensors
    }
}

/// Parameter layout derived from a config: `(name, shape, fan_in)`.
/// `fan_in == 0` marks tensors initialized to a constant.
pub(crate) fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, usize, f64)> {
    let mut specs = Vec::new();
    let conv = |specs: &mut Vec<_>, name: String, cin: usize, cout: usize, k: usize| {
        specs.push((format!("{name}.w"), vec![cout, cin, k, k], cin * k * k, 0.0));
        specs.push((format!("{name}.b"), vec![cout], 0, 0.0));
    };
    let norm = |specs: &mut Vec<_>, name: String, c: usize| {
        if cfg.use_norm {
            specs.push((format!("{name}.g"), vec![c], 0, 1.0));
            specs.push((format!("{name}.b"), vec![c], 0, 0.0));
        }
    };
    for (i, j) in cfg.nodes() {
        let p = node_name(i, j);
        let (cin, cout) = (cfg.node_in_channels(i, j), cfg.channels(i));
        match cfg.block_kind {
            BlockKind::Plain | BlockKind::Residual => {
                conv(&mut specs, format!("{p}.c1"), cin, cout, 3);
                norm(&mut specs, format!("{p}.n1"), cout);
                conv(&mut specs, format!("{p}.c2"), cout, cout, 3);
                norm(&mut specs, format!("{p}.n2"), cout);
                if cfg.block_kind == BlockKind::Residual && cin != cout {
                    conv(&mut specs, format!("{p}.proj"), cin, cout, 1);
                }
            }
            BlockKind::Dense => {
                let g = cfg.growth_rate.unwrap_or(1);
                let layers = cfg.dense_layers_per_block.unwrap_or(1);
                for l in 0..layers {
                    conv(&mut specs, format!("{p}.d{l}"), cin + l * g, g, 3);
                    norm(&mut specs, format!("{p}.dn{l}"), g);
                }
                conv(&mut specs, format!("{p}.trans"), cin + layers * g, cout, 1);
            }
        }
    }
    conv(&mut specs, "head".into(), cfg.channels(0), cfg.output_channels, 1);
    specs
}

enum Op<T> {
    Input,
    Conv { x: usize, w: String, b: String },
    Relu { x: usize },
    MaxPool { x: usize, arg: Vec<u32> },
    Upsample { x: usize },
    Concat { xs: Vec<usize> },
    Add { a: usize, b: usize },
    Norm { x: usize, g: String, b: String, cache: NormCache<T> },
}

/// Forward record: every intermediate value plus the op that produced it.
struct Tape<'p, T: Real> {
    params: &'p Parameters<T>,
    values: Vec<Tensor<T>>,
    ops: Vec<(String, Op<T>)>,
}

impl<'p, T: Real> Tape<'p, T> {
    fn new(params: &'p Parameters<T>, input: Tensor<T>) -> Self {
        Self {
            params,
            values: vec![input],
            ops: vec![("input".into(), Op::Input)],
        }
    }

    fn push(&mut self, name: String, value: Tensor<T>, op: Op<T>) -> Result<usize, NnetError> {
        if !value.is_finite() {
            return Err(NnetError::NonFinite { layer: name });
        }
        self.values.push(value);
        self.ops.push((name, op));
        Ok(self.values.len() - 1)
    }

    fn conv(&mut self, name: &str, x: usize) -> Result<usize, NnetError> {
        let (w, b) = (format!("{name}.w"), format!("{name}.b"));
        let y = layers::conv_forward(name, &self.values[x], self.params.require(&w)?, self.params.require(&b)?)?;
        self.push(name.into(), y, Op::Conv { x, w, b })
    }

    fn norm(&mut self, name: &str, x: usize) -> Result<usize, NnetError> {
        let (g, b) = (format!("{name}.g"), format!("{name}.b"));
        let (y, cache) = layers::norm_forward(name, &self.values[x], self.params.require(&g)?, self.params.require(&b)?)?;
        self.push(name.into(), y, Op::Norm { x, g, b, cache })
    }

    fn relu(&mut self, name: &str, x: usize) -> Result<usize, NnetError> {
        let y = layers::relu_forward(&self.values[x]);
        self.push(format!("{name}.relu"), y, Op::Relu { x })
    }

    fn maxpool(&mut self, name: &str, x: usize) -> Result<usize, NnetError> {
        let (y, arg) = layers::maxpool_forward(name, &self.values[x])?;
        self.push(name.into(), y, Op::MaxPool { x, arg })
    }

    fn upsample(&mut self, name: &str, x: usize) -> Result<usize, NnetError> {
        let y = layers::upsample_forward(name, &self.values[x])?;
        self.push(name.into(), y, Op::Upsample { x })
    }

    fn concat(&mut self, name: &str, xs: Vec<usize>) -> Result<usize, NnetError> {
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        let refs: Vec<&Tensor<T>> = xs.iter().map(|&i| &self.values[i]).collect();
        let y = layers::concat_forward(name, &refs)?;
        self.push(name.into(), y, Op::Concat { xs })
    }

    fn add(&mut self, name: &str, a: usize, b: usize) -> Result<usize, NnetError> {
        let mut y = self.values[a].clone();
        y.add_assign(&self.values[b]);
        self.push(name.into(), y, Op::Add { a, b })
    }

    /// conv, then normalization when enabled.
    fn conv_unit(&mut self, cfg: &ModelConfig, conv: &str, norm: &str, x: usize) -> Result<usize, NnetError> {
        let y = self.conv(conv, x)?;
        if cfg.use_norm {
            self.norm(norm, y)
        } else {
            Ok(y)
        }
    }

    fn block(&mut self, cfg: &ModelConfig, p: &str, x: usize) -> Result<usize, NnetError> {
        match cfg.block_kind {
            BlockKind::Plain => {
                let h = self.conv_unit(cfg, &format!("{p}.c1"), &format!("{p}.n1"), x)?;
                let h = self.relu(&format!("{p}.c1"), h)?;
                let h = self.conv_unit(cfg, &format!("{p}.c2"), &format!("{p}.n2"), h)?;
                self.relu(&format!("{p}.c2"), h)
            }
            BlockKind::Residual => {
                let h = self.conv_unit(cfg, &format!("{p}.c1"), &format!("{p}.n1"), x)?;
                let h = self.relu(&format!("{p}.c1"), h)?;
                let h = self.conv_unit(cfg, &format!("{p}.c2"), &format!("{p}.n2"), h)?;
                let proj = format!("{p}.proj");
                let skip = if self.params.get(&format!("{proj}.w")).is_some() {
                    self.conv(&proj, x)?
                } else {
                    x
                };
                let s = self.add(&format!("{p}.add"), h, skip)?;
                self.relu(&format!("{p}.out"), s)
            }
            BlockKind::Dense => {
                let layers = cfg.dense_layers_per_block.unwrap_or(1);
                let mut feats = vec![x];
                for l in 0..layers {
                    let inp = self.concat(&format!("{p}.cat{l}"), feats.clone())?;
                    let y = self.conv_unit(cfg, &format!("{p}.d{l}"), &format!("{p}.dn{l}"), inp)?;
                    let y = self.relu(&format!("{p}.d{l}"), y)?;
                    feats.push(y);
                }
                let all = self.concat(&format!("{p}.cat"), feats)?;
                let t = self.conv(&format!("{p}.trans"), all)?;
                self.relu(&format!("{p}.trans"), t)
            }
        }
    }

    /// Runs the whole network; returns the value id of the logits.
    fn network(&mut self, cfg: &ModelConfig) -> Result<usize, NnetError> {
        let mut ids: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for (i, j) in cfg.nodes() {
            let p = node_name(i, j);
            let input = match (i, j) {
                (0, 0) => 0,
                (_, 0) => self.maxpool(&format!("{p}.pool"), ids[&(i - 1, 0)])?,
                _ => {
                    let up = self.upsample(&format!("{p}.up"), ids[&(i + 1, j - 1)])?;
                    let mut xs: Vec<usize> = cfg.skips(i, j).iter().map(|k| ids[k]).collect();
                    xs.push(up);
                    self.concat(&format!("{p}.cat"), xs)?
                }
            };
            let out = self.block(cfg, &p, input)?;
            ids.insert((i, j), out);
        }
        self.conv("head", ids[&(0, cfg.depth)])
    }

    /// Reverse pass from `d_out` on value `out`.
    fn backward(&self, out: usize, d_out: Tensor<T>) -> Result<Parameters<T>, NnetError> {
        let mut grads = self.params.zeros_like();
        let mut dv: Vec<Option<Tensor<T>>> = vec![None; self.values.len()];
        dv[out] = Some(d_out);
        let acc = |dv: &mut Vec<Option<Tensor<T>>>, i: usize, g: Tensor<T>| match &mut dv[i] {
            Some(t) => t.add_assign(&g),
            slot => *slot = Some(g),
        };
        for id in (1..self.values.len()).rev() {
            let Some(dy) = dv[id].take() else { continue };
            let (name, op) = &self.ops[id];
            match op {
                Op::Input => {}
                Op::Conv { x, w, b } => {
                    let (dx, dw, db) = layers::conv_backward(
                        name,
                        &self.values[*x],
                        self.params.require(w)?,
                        self.params.require(b)?,
                        &dy,
                    )?;
                    grads.accumulate(w, &dw);
                    grads.accumulate(b, &db);
                    if *x != 0 {
                        acc(&mut dv, *x, dx);
                    }
                }
                Op::Relu { x } => acc(&mut dv, *x, layers::relu_backward(name, &self.values[*x], &dy)?),
                Op::MaxPool { x, arg } => {
                    let dx = layers::maxpool_backward(name, self.values[*x].shape(), arg, &dy)?;
                    acc(&mut dv, *x, dx)
                }
                Op::Upsample { x } => acc(&mut dv, *x, layers::upsample_backward(name, &dy)?),
                Op::Concat { xs } => {
                    let channels: Vec<usize> = xs.iter().map(|&i| self.values[i].shape()[1]).collect();
                    for (&i, g) in xs.iter().zip(layers::concat_backward(name, &channels, &dy)?) {
                        acc(&mut dv, i, g);
                    }
                }
                Op::Add { a, b } => {
                    acc(&mut dv, *b, dy.clone());
                    acc(&mut dv, *a, dy);
                }
                Op::Norm { x, g, b, cache } => {
                    let (dx, dg, db) = layers::norm_backward(name, cache, self.params.require(g)?, &dy)?;
                    grads.accumulate(g, &dg);
                    grads.accumulate(b, &db);
                    acc(&mut dv, *x, dx);
                }
            }
        }
        Ok(grads)
    }
}

/// Result of one forward/backward pass over a batch.
#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    /// Mean binary cross-entropy over every pixel of the batch.
    pub loss: f64,
    pub grads: Parameters<T>,
    /// Output probabilities, `(n, 1, h, w)`.
    pub probs: Tensor<T>,
}

/// A configured network with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: Parameters<T>,
}

impl Model<f32> {
    /// Initializes weights with He normal draws (variance 2 / fan_in) from a
    /// ChaCha stream seeded by `config.init_seed`; biases start at zero.
    pub fn build(config: ModelConfig) -> Result<Self, NnetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut tensors = BTreeMap::new();
        for (name, shape, fan_in, constant) in param_specs(&config) {
            let t = if fan_in > 0 {
                let std = (2.0 / fan_in as f64).sqrt();
                Tensor::from_fn(shape, |_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z * std) as f32
                })
            } else {
                Tensor::filled(shape, constant as f32)
            };
            tensors.insert(name, t);
        }
        Ok(Model {
            config,
            params: Parameters::new(tensors),
        })
    }
}

impl<T: Real> Model<T> {
    pub fn from_parts(config: ModelConfig, params: Parameters<T>) -> Result<Self, NnetError> {
        config.validate()?;
        validate_shapes(&config, params.iter().map(|(k, v)| (k.as_str(), v.shape())))?;
        Ok(Self { config, params })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn prepare(&self, input: &Tensor<T>) -> Result<Tensor<T>, NnetError> {
        let c = &self.config;
        let ok = input.shape().len() == 4 && {
            let (n, ch, h, w) = input.dims4();
            n >= 1 && ch == c.input_channels && h == c.input_height && w == c.input_width
        };
        if !ok {
            return Err(NnetError::Shape {
                layer: "input".into(),
                expected: format!("[n, {}, {}, {}]", c.input_channels, c.input_height, c.input_width),
                got: format!("{:?}", input.shape()),
            });
        }
        if !input.is_finite() {
            return Err(NnetError::NonFinite { layer: "input".into() });
        }
        if !c.input_norm {
            return Ok(input.clone());
        }
        let mut x = input.clone();
        let hw = c.input_height * c.input_width;
        let eps = T::from_f64(1e-5);
        for plane in x.data_mut().chunks_mut(hw) {
            let m = T::from_f64(hw as f64);
            let mean = plane.iter().copied().sum::<T>() / m;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
            let is = T::one() / (var.sqrt() + eps);
            plane.iter_mut().for_each(|v| *v = (*v - mean) * is);
        }
        Ok(x)
    }

    /// Pre-sigmoid network output, `(n, 1, h, w)`.
    pub fn forward_logits(&self, input: &Tensor<T>) -> Result<Tensor<T>, NnetError> {
        let mut tape = Tape::new(&self.params, self.prepare(input)?);
        let out = tape.network(&self.config)?;
        Ok(tape.values.swap_remove(out))
    }

    /// Per-pixel stone probabilities, `(n, 1, h, w)`, strictly inside (0, 1).
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>, NnetError> {
        Ok(probabilities(&self.forward_logits(input)?))
    }

    /// Mean BCE against `target` (0/1 values, same shape as the output) and
    /// its gradient for every parameter.
    pub fn loss_and_grads(&self, input: &Tensor<T>, target: &Tensor<T>) -> Result<StepOutput<T>, NnetError> {
        let mut tape = Tape::new(&self.params, self.prepare(input)?);
        let out = tape.network(&self.config)?;
        let logits = &tape.values[out];
        if target.shape() != logits.shape() {
            return Err(NnetError::Shape {
                layer: "loss".into(),
                expected: format!("target {:?}", logits.shape()),
                got: format!("{:?}", target.shape()),
            });
        }
        let m = logits.len() as f64;
        let mut loss = 0.0f64;
        let mut grad = Vec::with_capacity(logits.len());
        let inv_m = T::from_f64(1.0 / m);
        for (&z, &y) in logits.data().iter().zip(target.data()) {
            // log(1 + e^z) - y z, evaluated without overflow
            let zf = z.as_f64();
            let yf = y.as_f64();
            loss += zf.max(0.0) - zf * yf + (-zf.abs()).exp().ln_1p();
            grad.push((layers::sigmoid(z) - y) * inv_m);
        }
        let loss = loss / m;
        if !loss.is_finite() {
            return Err(NnetError::NonFinite { layer: "loss".into() });
        }
        let probs = probabilities(logits);
        let grads = tape.backward(out, Tensor::new(logits.shape().to_vec(), grad))?;
        Ok(StepOutput { loss, grads, probs })
    }
}

fn probabilities<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let lo = T::from_f64(PROB_EPSILON);
    let hi = T::one() - lo;
    Tensor::new(
        logits.shape().to_vec(),
        logits.data().iter().map(|&z| layers::sigmoid(z).max(lo).min(hi)).collect(),
    )
}

pub(crate) fn validate_shapes<'a>(
    cfg: &ModelConfig,
    tensors: impl Iterator<Item = (&'a str, &'a [usize])>,
) -> Result<(), NnetError> {
    let expected: BTreeMap<String, Vec<usize>> = param_specs(cfg).into_iter().map(|(n, s, _, _)| (n, s)).collect();
    let mut seen = 0;
    for (name, shape) in tensors {
        match expected.get(name) {
            Some(s) if s.as_slice() == shape => seen += 1,
            other => {
                return Err(NnetError::CheckpointShape {
                    name: name.to_string(),
                    expected: other.cloned(),
                    got: Some(shape.to_vec()),
                })
            }
        }
    }
    if seen != expected.len() {
        let (name, shape) = expected.into_iter().next().expect("non-empty spec");
        return Err(NnetError::CheckpointShape {
            name,
            expected: Some(shape),
            got: None,
        });
    }
    Ok(())
}

/// Thresholds a probability map at 0.5 (inclusive).
pub fn predict_mask(prob: &ProbabilityMap) -> BinaryMask {
    prob.predict_mask()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(cfg: &ModelConfig, n: usize, seed: u64) -> Tensor<f32> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![n, cfg.input_channels, cfg.input_height, cfg.input_width], |_| rng.random())
    }

    #[test]
    fn plain_depth2_preserves_shape() {
        let cfg = ModelConfig {
            block_kind: BlockKind::Plain,
            input_channels: 1,
            input_height: 32,
            input_width: 32,
            ..ModelConfig::unet(2, 8)
        };
        let m = Model::build(cfg.clone()).unwrap();
        let y = m.forward(&input(&cfg, 1, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 32, 32]);
        assert!(y.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn every_variant_runs_and_nesting_adds_parameters() {
        for kind in [BlockKind::Plain, BlockKind::Residual, BlockKind::Dense] {
            for depth in 2..=3 {
                let base = ModelConfig {
                    block_kind: kind,
                    growth_rate: (kind == BlockKind::Dense).then_some(4),
                    dense_layers_per_block: (kind == BlockKind::Dense).then_some(2),
                    input_height: 16,
                    input_width: 24,
                    ..ModelConfig::unet(depth, 4)
                };
                let nested = ModelConfig {
                    nested_skips: true,
                    ..base.clone()
                };
                let (a, b) = (Model::build(base.clone()).unwrap(), Model::build(nested.clone()).unwrap());
                assert!(b.parameter_count() > a.parameter_count(), "{kind:?} depth {depth}");
                for m in [&a, &b] {
                    let y = m.forward(&input(&base, 2, 1)).unwrap();
                    assert_eq!(y.shape(), &[2, 1, 16, 24]);
                }
            }
        }
    }

    #[test]
    fn depth_five_shapes() {
        let cfg = ModelConfig {
            input_height: 32,
            input_width: 32,
            ..ModelConfig::unet_plus_plus(5, 1)
        };
        let m = Model::build(cfg.clone()).unwrap();
        assert_eq!(m.forward(&input(&cfg, 1, 2)).unwrap().shape(), &[1, 1, 32, 32]);
    }

    #[test]
    fn invalid_configs() {
        let mut c = ModelConfig::unet(3, 4);
        c.input_height = 36;
        assert!(matches!(Model::build(c), Err(NnetError::Config(_))));
        let mut d = ModelConfig::unet(2, 4);
        d.growth_rate = Some(3);
        assert!(matches!(Model::build(d), Err(NnetError::Config(_))));
        let mut e = ModelConfig::dense(2, 4, 2, 2);
        e.dense_layers_per_block = None;
        assert!(matches!(Model::build(e), Err(NnetError::Config(_))));
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = ModelConfig::unet_plus_plus(2, 4);
        assert_eq!(Model::build(cfg.clone()).unwrap(), Model::build(cfg.clone()).unwrap());
        let other = ModelConfig { init_seed: 1, ..cfg.clone() };
        assert_ne!(Model::build(cfg).unwrap().params, Model::build(other).unwrap().params);
    }

    #[test]
    fn zero_input_and_zero_head_give_one_half() {
        let cfg = ModelConfig::unet(2, 4);
        let mut m = Model::build(cfg.clone()).unwrap();
        for (name, t) in m.params.iter_mut() {
            if name.starts_with("head") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let x = Tensor::zeros(vec![1, 3, 64, 64]);
        assert!(m.forward(&x).unwrap().data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn single_and_double_precision_agree() {
        let cfg = ModelConfig::unet_plus_plus(2, 4);
        let m = Model::build(cfg.clone()).unwrap();
        let x = input(&cfg, 2, 3);
        let a = m.forward(&x).unwrap();
        let b = m.cast::<f64>().forward(&x.cast()).unwrap();
        let max = a.data().iter().zip(b.data()).map(|(&p, &q)| (p as f64 - q).abs()).fold(0.0, f64::max);
        assert!(max <= 1e-4, "max diff {max}");
    }

    #[test]
    fn forward_is_deterministic_and_rejects_bad_input() {
        let cfg = ModelConfig::dense(2, 4, 4, 2);
        let m = Model::build(cfg.clone()).unwrap();
        let x = input(&cfg, 1, 4);
        assert_eq!(m.forward(&x).unwrap(), m.forward(&x).unwrap());
        let wrong = Tensor::<f32>::zeros(vec![1, 1, 64, 64]);
        assert!(matches!(m.forward(&wrong), Err(NnetError::Shape { .. })));
        let mut nan = x.clone();
        nan.data_mut()[7] = f32::NAN;
        assert!(matches!(m.forward(&nan), Err(NnetError::NonFinite { .. })));
    }

    #[test]
    fn saturated_correct_output_has_tiny_gradients() {
        let cfg = ModelConfig::unet(1, 2);
        let mut m = Model::build(cfg.clone()).unwrap().cast::<f64>();
        for (name, t) in m.params.iter_mut() {
            if name == "head.w" {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
            if name == "head.b" {
                t.data_mut()[0] = 40.0;
            }
        }
        let x = input(&cfg, 1, 5).cast::<f64>();
        let target = Tensor::filled(vec![1, 1, 64, 64], 1.0);
        let out = m.loss_and_grads(&x, &target).unwrap();
        assert!(out.loss < 1e-15);
        let max = out.grads.iter().flat_map(|(_, g)| g.data().iter().map(|v| v.abs())).fold(0.0, f64::max);
        assert!(max < 1e-15, "max grad {max}");
    }

    #[test]
    fn duplicated_batch_has_same_mean_gradient() {
        let cfg = ModelConfig {
            input_height: 8,
            input_width: 8,
            ..ModelConfig::unet_plus_plus(2, 2)
        };
        let m = Model::build(cfg.clone()).unwrap().cast::<f64>();
        let x = input(&cfg, 1, 6).cast::<f64>();
        let t = Tensor::from_fn(vec![1, 1, 8, 8], |i| ((i * 7) % 3 == 0) as u8 as f64);
        let one = m.loss_and_grads(&x, &t).unwrap();
        let xx = Tensor::new(vec![2, 3, 8, 8], [x.data(), x.data()].concat());
        let tt = Tensor::new(vec![2, 1, 8, 8], [t.data(), t.data()].concat());
        let two = m.loss_and_grads(&xx, &tt).unwrap();
        assert!((one.loss - two.loss).abs() < 1e-12);
        for ((_, a), (_, b)) in one.grads.iter().zip(two.grads.iter()) {
            for (p, q) in a.data().iter().zip(b.data()) {
                assert!((p - q).abs() <= 1e-12 * (1.0 + p.abs()));
            }
        }
    }
}
