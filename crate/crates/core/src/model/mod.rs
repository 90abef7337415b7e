//! Channel-independent patch transformer with an MLP regression head.
//!
//! Every channel of a sample is cut into overlapping patches, embedded, and
//! encoded as its own token sequence with weights shared across channels.
//! The per-channel encodings are flattened and fed to the head, which emits
//! one scalar in standardized target space.

mod checkpoint;
mod config;
mod hint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionBias, AttentionShape, Graph, Var};
use crate::dataset::{prepare_sample, NormScheme, SampleTensor, WaferRun};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use hint::{attention, hinted_attention, AttentionHint};

const LN_EPS: f64 = 1e-5;

/// Affine map between the model's standardized output and nm/min.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetStats {
    pub mean: f64,
    pub std: f64,
}

impl TargetStats {
    pub fn fit(targets: &[f64]) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::Data("no targets to standardize".into()));
        }
        let n = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let var = targets.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Ok(Self { mean, std })
    }

    pub fn to_z(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn from_z(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

impl Default for TargetStats {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

/// Input and target standardization carried with the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub input: NormScheme,
    pub target: TargetStats,
}

impl Default for Standardization {
    fn default() -> Self {
        Self { input: NormScheme::PerSample, target: TargetStats::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<S> {
    /// `in × out`
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = uniform(rng, &[fan_in, fan_out], bound);
        let bias = uniform(rng, &[fan_out], bound);
        Self { weight, bias }
    }

    fn apply<'a>(&'a self, g: &mut Graph<'a, S>, x: Var, vars: &mut Vec<Var>) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        vars.extend([w, b]);
        let y = g.matmul(x, w)?;
        g.add_tiled(y, b)
    }
}

fn uniform<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<S> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| S::from_f64_lossy(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("nonzero init shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<S> {
    pub gain: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Norm<S> {
    fn init(dim: usize) -> Self {
        Self { gain: Tensor::full(&[dim], S::one()), bias: Tensor::zeros(&[dim]) }
    }

    fn apply<'a>(&'a self, g: &mut Graph<'a, S>, x: Var, vars: &mut Vec<Var>) -> Result<Var> {
        let gain = g.param(&self.gain);
        let bias = g.param(&self.bias);
        vars.extend([gain, bias]);
        g.layer_norm(x, gain, bias, S::from_f64_lossy(LN_EPS))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<S> {
    pub norm_attn: Norm<S>,
    pub query: Linear<S>,
    /// `d_model × d_model`. No bias: a key offset adds the same score to
    /// every key of a query row and cancels in the softmax.
    pub key: Tensor<S>,
    pub value: Linear<S>,
    pub out: Linear<S>,
    pub norm_ffn: Norm<S>,
    pub ffn_in: Linear<S>,
    pub ffn_out: Linear<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub standardization: Standardization,
    pub embed: Linear<S>,
    /// Learned positional table, `patches × d_model`.
    pub position: Tensor<S>,
    pub layers: Vec<EncoderLayer<S>>,
    pub head: Vec<Linear<S>>,
}

/// Graph handles produced by [`Model::build`].
pub struct ForwardVars {
    /// `batch × 1`, standardized target space.
    pub prediction: Var,
    /// One fused attention node per encoder layer.
    pub attention: Vec<Var>,
    /// Final encoder output, `(batch·channels·patches) × d_model`.
    pub encoding: Var,
    /// Parameter leaves in [`Model::named_params`] order.
    pub params: Vec<Var>,
}

/// Post-softmax attention for one (layer, head, channel) of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub layer: usize,
    pub head: usize,
    pub channel: usize,
    pub patches: usize,
    /// Row-stochastic `A`, row-major `patches × patches`.
    pub scores: Vec<f64>,
    /// `Â = A + λH` when a hint was active on this layer.
    pub hinted: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// nm/min
    pub prediction: f64,
    pub maps: Vec<AttentionMap>,
}

/// Splits each channel into patches: `C×T -> C×N_p×patch_len`, flattened.
pub fn patchify(values: &[f64], channels: usize, cfg: &ModelConfig) -> Result<Vec<f64>> {
    if values.len() != channels * cfg.seq_len {
        return Err(Error::shape(
            "patchify",
            format!("expected {channels}x{} values, got {}", cfg.seq_len, values.len()),
        ));
    }
    let n = cfg.n_patches();
    let mut out = Vec::with_capacity(channels * n * cfg.patch_len);
    for row in values.chunks(cfg.seq_len) {
        for p in 0..n {
            out.extend_from_slice(&row[p * cfg.stride..p * cfg.stride + cfg.patch_len]);
        }
    }
    Ok(out)
}

impl<S: Scalar> Model<S> {
    /// Fan-in scaled uniform initialization, deterministic in `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let embed = Linear::init(&mut rng, config.patch_len, d);
        let n = config.n_patches();
        let position = uniform(&mut rng, &[n, d], 0.02);
        let layers = (0..config.n_layers)
            .map(|_| EncoderLayer {
                norm_attn: Norm::init(d),
                query: Linear::init(&mut rng, d, d),
                key: uniform(&mut rng, &[d, d], 1.0 / (d as f64).sqrt()),
                value: Linear::init(&mut rng, d, d),
                out: Linear::init(&mut rng, d, d),
                norm_ffn: Norm::init(d),
                ffn_in: Linear::init(&mut rng, d, config.ffn_dim),
                ffn_out: Linear::init(&mut rng, config.ffn_dim, d),
            })
            .collect();
        let mut dims = vec![config.flatten_len()];
        dims.extend(&config.head_dims);
        dims.push(1);
        let head = dims.windows(2).map(|w| Linear::init(&mut rng, w[0], w[1])).collect();
        Ok(Self { config, standardization: Standardization::default(), embed, position, layers, head })
    }

    /// Every parameter with a stable dotted name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<S>)> {
        fn lin<'m, S>(out: &mut Vec<(String, &'m Tensor<S>)>, name: String, l: &'m Linear<S>) {
            out.push((format!("{name}.weight"), &l.weight));
            out.push((format!("{name}.bias"), &l.bias));
        }
        let mut out = Vec::new();
        lin(&mut out, "embed".into(), &self.embed);
        out.push(("position".into(), &self.position));
        for (i, layer) in self.layers.iter().enumerate() {
            let p = format!("encoder.{i}");
            out.push((format!("{p}.norm_attn.gain"), &layer.norm_attn.gain));
            out.push((format!("{p}.norm_attn.bias"), &layer.norm_attn.bias));
            lin(&mut out, format!("{p}.query"), &layer.query);
            out.push((format!("{p}.key.weight"), &layer.key));
            lin(&mut out, format!("{p}.value"), &layer.value);
            lin(&mut out, format!("{p}.out"), &layer.out);
            out.push((format!("{p}.norm_ffn.gain"), &layer.norm_ffn.gain));
            out.push((format!("{p}.norm_ffn.bias"), &layer.norm_ffn.bias));
            lin(&mut out, format!("{p}.ffn_in"), &layer.ffn_in);
            lin(&mut out, format!("{p}.ffn_out"), &layer.ffn_out);
        }
        for (i, l) in self.head.iter().enumerate() {
            lin(&mut out, format!("head.{i}"), l);
        }
        out
    }

    /// Mutable parameters in the same order as [`Model::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out: Vec<&mut Tensor<S>> = vec![&mut self.embed.weight, &mut self.embed.bias, &mut self.position];
        for layer in &mut self.layers {
            out.extend([&mut layer.norm_attn.gain, &mut layer.norm_attn.bias]);
            out.extend([&mut layer.query.weight, &mut layer.query.bias, &mut layer.key]);
            for l in [&mut layer.value, &mut layer.out] {
                out.extend([&mut l.weight, &mut l.bias]);
            }
            out.extend([&mut layer.norm_ffn.gain, &mut layer.norm_ffn.bias]);
            for l in [&mut layer.ffn_in, &mut layer.ffn_out] {
                out.extend([&mut l.weight, &mut l.bias]);
            }
        }
        for l in &mut self.head {
            out.extend([&mut l.weight, &mut l.bias]);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Stacks samples into the `(batch·channels) × seq_len` input matrix.
    pub fn batch_input(&self, samples: &[&SampleTensor]) -> Result<Tensor<S>> {
        let cfg = &self.config;
        let mut data = Vec::with_capacity(samples.len() * cfg.n_channels * cfg.seq_len);
        for s in samples {
            if s.channels != cfg.n_channels || s.length != cfg.seq_len {
                return Err(Error::shape(
                    "model input",
                    format!(
                        "sample {} is {}x{}, model expects {}x{}",
                        s.run_id, s.channels, s.length, cfg.n_channels, cfg.seq_len
                    ),
                ));
            }
            data.extend(s.values.iter().map(|&v| S::from_f64_lossy(v)));
        }
        Tensor::new(&[samples.len() * cfg.n_channels, cfg.seq_len], data)
    }

    fn bias_for(&self, hint: Option<&AttentionHint>) -> Result<Option<AttentionBias<S>>> {
        match hint {
            None => Ok(None),
            Some(h) => {
                let n = self.config.n_patches();
                if h.matrix.shape() != [n, n] {
                    return Err(Error::shape(
                        "attention hint",
                        format!("hint is {:?}, attention is [{n}, {n}]", h.matrix.shape()),
                    ));
                }
                Ok(Some(AttentionBias {
                    matrix: h.matrix.cast(),
                    lambda: S::from_f64_lossy(h.lambda),
                    renormalize: self.config.renormalize_hint,
                }))
            }
        }
    }

    /// Runs patch embedding and the encoder stack. `input` is
    /// `(batch·channels) × seq_len`.
    pub fn encode<'a>(
        &'a self,
        g: &mut Graph<'a, S>,
        input: Var,
        batch: usize,
        hint: Option<&AttentionHint>,
        params: &mut Vec<Var>,
        attention: &mut Vec<Var>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let bias = self.bias_for(hint)?;
        let patches = g.unfold(input, cfg.patch_len, cfg.stride)?;
        let mut x = self.embed.apply(g, patches, params)?;
        let pos = g.param(&self.position);
        params.push(pos);
        x = g.add_tiled(x, pos)?;
        let shape = AttentionShape {
            groups: batch * cfg.n_channels,
            tokens: cfg.n_patches(),
            heads: cfg.n_heads,
            head_dim: cfg.head_dim(),
        };
        for (i, layer) in self.layers.iter().enumerate() {
            let h = layer.norm_attn.apply(g, x, params)?;
            let q = layer.query.apply(g, h, params)?;
            let wk = g.param(&layer.key);
            params.push(wk);
            let k = g.matmul(h, wk)?;
            let v = layer.value.apply(g, h, params)?;
            let layer_bias = bias.as_ref().filter(|_| cfg.hint_active(i));
            let ctx = g.attention(q, k, v, shape, layer_bias)?;
            attention.push(ctx);
            let o = layer.out.apply(g, ctx, params)?;
            x = g.add(x, o)?;
            let h = layer.norm_ffn.apply(g, x, params)?;
            let f = layer.ffn_in.apply(g, h, params)?;
            let f = g.activation(f, cfg.ffn_activation)?;
            let f = layer.ffn_out.apply(g, f, params)?;
            x = g.add(x, f)?;
        }
        Ok(x)
    }

    /// Flattens per-sample encodings and applies the MLP head.
    pub fn regress<'a>(
        &'a self,
        g: &mut Graph<'a, S>,
        encoding: Var,
        batch: usize,
        params: &mut Vec<Var>,
    ) -> Result<Var> {
        let mut x = g.reshape(encoding, &[batch, self.config.flatten_len()])?;
        let last = self.head.len() - 1;
        for (i, l) in self.head.iter().enumerate() {
            x = l.apply(g, x, params)?;
            if i < last {
                x = g.relu(x)?;
            }
        }
        Ok(x)
    }

    /// Records the full forward pass for a batch on `g`.
    pub fn build<'a>(
        &'a self,
        g: &mut Graph<'a, S>,
        input: Var,
        batch: usize,
        hint: Option<&AttentionHint>,
    ) -> Result<ForwardVars> {
        let mut params = Vec::new();
        let mut attention = Vec::new();
        let encoding = self.encode(g, input, batch, hint, &mut params, &mut attention)?;
        let prediction = self.regress(g, encoding, batch, &mut params)?;
        Ok(ForwardVars { prediction, attention, encoding, params })
    }

    /// Standardized-space predictions for a batch.
    pub fn predict_z(&self, samples: &[&SampleTensor], hint: Option<&AttentionHint>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let input = g.constant(self.batch_input(samples)?);
        let vars = self.build(&mut g, input, samples.len(), hint)?;
        Ok(g.value(vars.prediction).to_f64_vec())
    }

    /// Predictions in nm/min, evaluated in chunks.
    /// Resamples and standardizes runs the way this model expects.
    pub fn prepare(&self, runs: &[WaferRun]) -> Result<Vec<SampleTensor>> {
        runs.iter().map(|r| prepare_sample(r, self.config.seq_len, &self.standardization.input)).collect()
    }

    pub fn predict(&self, samples: &[SampleTensor], hint: Option<&AttentionHint>) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(32) {
            let refs: Vec<&SampleTensor> = chunk.iter().collect();
            let z = self.predict_z(&refs, hint)?;
            out.extend(z.into_iter().map(|v| self.standardization.target.from_z(v)));
        }
        Ok(out)
    }

    /// Single-sample forward pass with every attention map.
    pub fn forward(&self, sample: &SampleTensor, hint: Option<&AttentionHint>) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let input = g.constant(self.batch_input(&[sample])?);
        let vars = self.build(&mut g, input, 1, hint)?;
        let z = g.value(vars.prediction).data()[0].as_f64();
        let prediction = self.standardization.target.from_z(z);
        if !prediction.is_finite() {
            return Err(Error::NonFinite("prediction".into()));
        }
        let maps = collect_maps(&g, &vars.attention, 0, self.config.n_channels);
        Ok(ForwardOutput { prediction, maps })
    }
}

/// Extracts the maps of sample `index` from the attention nodes of a batch.
pub fn collect_maps<S: Scalar>(g: &Graph<'_, S>, attention: &[Var], index: usize, channels: usize) -> Vec<AttentionMap> {
    let mut maps = Vec::new();
    for (layer, &var) in attention.iter().enumerate() {
        let rec = g.attention_record(var).expect("attention node");
        for channel in 0..channels {
            let group = index * channels + channel;
            for head in 0..rec.shape.heads {
                maps.push(AttentionMap {
                    layer,
                    head,
                    channel,
                    patches: rec.shape.tokens,
                    scores: rec.map(group, head).iter().map(|v| v.as_f64()).collect(),
                    hinted: rec.biased.as_ref().map(|_| rec.biased_map(group, head).iter().map(|v| v.as_f64()).collect()),
                });
            }
        }
    }
    maps
}
