//! Gradient saliency, top-k insight maps and before/after diffs.

use std::path::Path;

use crate::autodiff::{Graph, Var};
use crate::dataset::SampleTensor;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// A differentiable scalar function of one `channels × length` input.
pub trait SaliencyTarget {
    fn input_shape(&self) -> (usize, usize);
    /// Builds the scalar output from input leaf `x`.
    fn output<'a>(&'a self, g: &mut Graph<'a, f64>, x: Var) -> Result<Var>;
}

impl SaliencyTarget for Model<f64> {
    fn input_shape(&self) -> (usize, usize) {
        (self.config.n_channels, self.config.seq_len)
    }

    /// The prediction in nm/min. The target mean is a constant shift and is
    /// left out.
    fn output<'a>(&'a self, g: &mut Graph<'a, f64>, x: Var) -> Result<Var> {
        let vars = self.build(g, x, 1, None)?;
        g.scale(vars.prediction, self.standardization.target.std)
    }
}

/// `f(x) = Σ w·x`.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    pub weights: Tensor<f64>,
}

impl SaliencyTarget for LinearProbe {
    fn input_shape(&self) -> (usize, usize) {
        (self.weights.rows(), self.weights.cols())
    }

    fn output<'a>(&'a self, g: &mut Graph<'a, f64>, x: Var) -> Result<Var> {
        let w = g.constant(self.weights.clone());
        let prod = g.mul(x, w)?;
        g.sum(prod)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    /// `channels × length`, entries `|∂f/∂x|`.
    pub values: Tensor<f64>,
    /// Sample id, or `aggregate` for averaged maps.
    pub sample_id: String,
    pub checkpoint: Option<String>,
}

/// Absolute input gradient of `target` at the (normalized) sample.
pub fn saliency<T: SaliencyTarget>(target: &T, sample: &SampleTensor) -> Result<SaliencyMap> {
    let (c, t) = target.input_shape();
    if sample.channels != c || sample.length != t {
        return Err(Error::shape(
            "saliency",
            format!("sample {} is {}x{}, expected {c}x{t}", sample.run_id, sample.channels, sample.length),
        ));
    }
    let mut g = Graph::new();
    let x = g.input(Tensor::new(&[c, t], sample.values.clone())?);
    let y = target.output(&mut g, x)?;
    if g.value(y).len() != 1 {
        return Err(Error::shape("saliency", "target output must be a scalar"));
    }
    let y = g.sum(y)?;
    let grads = g.backward(y)?;
    let values = grads.get(x).map(f64::abs);
    values.ensure_finite("saliency")?;
    Ok(SaliencyMap { values, sample_id: sample.run_id.clone(), checkpoint: None })
}

/// The `k` ids with the smallest error; ties go to the smaller id.
pub fn top_k_by_error(errors: &[(String, f64)], k: usize) -> Result<Vec<String>> {
    if k == 0 || k > errors.len() {
        return Err(Error::InvalidArgument(format!("k = {k} with {} samples", errors.len())));
    }
    if let Some((id, e)) = errors.iter().find(|(_, e)| !e.is_finite()) {
        return Err(Error::NonFinite(format!("error of sample {id}: {e}")));
    }
    let mut ranked: Vec<&(String, f64)> = errors.iter().collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    Ok(ranked.into_iter().take(k).map(|(id, _)| id.clone()).collect())
}

/// Best-predicted samples of `set` by `|prediction − target|`.
pub fn top_k_best(model: &Model<f64>, set: &[SampleTensor], k: usize) -> Result<Vec<String>> {
    let pred = model.predict(set, None)?;
    let errors: Vec<(String, f64)> =
        set.iter().zip(pred).map(|(s, p)| (s.run_id.clone(), (p - s.target).abs())).collect();
    top_k_by_error(&errors, k)
}

/// Averaged maps of the best samples, with derived rankings.
#[derive(Clone, Debug, PartialEq)]
pub struct InsightBundle {
    pub sample_ids: Vec<String>,
    /// Encoder layer the attention comes from.
    pub layer: usize,
    /// `patches × patches`, mean over samples, heads and channels.
    pub attention: Tensor<f64>,
    /// `channels × length`, mean saliency.
    pub saliency: Tensor<f64>,
    /// Mean saliency per channel.
    pub feature_mass: Vec<f64>,
    /// Mean saliency per timestep.
    pub timestep_mass: Vec<f64>,
    /// Mean attention received per key patch.
    pub patch_mass: Vec<f64>,
    pub top_features: Vec<usize>,
    pub top_timesteps: Vec<usize>,
    pub top_patches: Vec<usize>,
}

/// Indices sorted by descending value; ties by index.
pub fn rank_desc(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

fn mean_of(maps: &[Tensor<f64>], what: &str) -> Result<Tensor<f64>> {
    let first = maps.first().ok_or_else(|| Error::InvalidArgument(format!("no {what} maps to average")))?;
    let mut acc = Tensor::zeros(first.shape());
    for m in maps {
        if m.shape() != first.shape() {
            return Err(Error::shape("insight", format!("{what} maps {:?} and {:?}", first.shape(), m.shape())));
        }
        acc.add_assign(m);
    }
    let n = maps.len() as f64;
    Ok(acc.map(|v| v / n))
}

/// Builds a bundle from per-sample attention (`patches × patches`) and
/// saliency (`channels × length`) maps.
pub fn insight_from_maps(
    sample_ids: Vec<String>,
    layer: usize,
    attention: &[Tensor<f64>],
    saliency: &[Tensor<f64>],
) -> Result<InsightBundle> {
    if attention.len() != saliency.len() || attention.len() != sample_ids.len() {
        return Err(Error::InvalidArgument("one attention and one saliency map per sample".into()));
    }
    let attention = mean_of(attention, "attention")?;
    let saliency = mean_of(saliency, "saliency")?;
    if attention.shape().len() != 2 || attention.rows() != attention.cols() || saliency.shape().len() != 2 {
        return Err(Error::shape("insight", "attention must be square and saliency a matrix"));
    }
    let (c, t, n) = (saliency.rows(), saliency.cols(), attention.rows());
    let s = saliency.data();
    let feature_mass: Vec<f64> = (0..c).map(|i| s[i * t..(i + 1) * t].iter().sum::<f64>() / t as f64).collect();
    let timestep_mass: Vec<f64> = (0..t).map(|j| (0..c).map(|i| s[i * t + j]).sum::<f64>() / c as f64).collect();
    let a = attention.data();
    let patch_mass: Vec<f64> = (0..n).map(|q| (0..n).map(|p| a[p * n + q]).sum::<f64>() / n as f64).collect();
    Ok(InsightBundle {
        top_features: rank_desc(&feature_mass),
        top_timesteps: rank_desc(&timestep_mass),
        top_patches: rank_desc(&patch_mass),
        sample_ids,
        layer,
        attention,
        saliency,
        feature_mass,
        timestep_mass,
        patch_mass,
    })
}

/// Last-layer attention of one sample, averaged over heads and channels.
pub fn last_layer_attention(model: &Model<f64>, sample: &SampleTensor) -> Result<Tensor<f64>> {
    let out = model.forward(sample, None)?;
    let layer = model.config.n_layers - 1;
    let n = model.config.n_patches();
    let maps: Vec<Tensor<f64>> = out
        .maps
        .into_iter()
        .filter(|m| m.layer == layer)
        .map(|m| Tensor::new(&[n, n], m.scores))
        .collect::<Result<_>>()?;
    mean_of(&maps, "attention")
}

/// Top-`k` insight over `set`.
pub fn insight(model: &Model<f64>, set: &[SampleTensor], k: usize) -> Result<InsightBundle> {
    let ids = top_k_best(model, set, k)?;
    let mut attention = Vec::with_capacity(k);
    let mut sal = Vec::with_capacity(k);
    for id in &ids {
        let sample = set.iter().find(|s| &s.run_id == id).expect("id comes from set");
        attention.push(last_layer_attention(model, sample)?);
        sal.push(saliency(model, sample)?.values);
    }
    insight_from_maps(ids, model.config.n_layers - 1, &attention, &sal)
}

/// `|after − before|`.
pub fn diff_maps(before: &Tensor<f64>, after: &Tensor<f64>) -> Result<Tensor<f64>> {
    if before.shape() != after.shape() {
        return Err(Error::shape("diff_maps", format!("{:?} vs {:?}", before.shape(), after.shape())));
    }
    after.zip_map(before, |a, b| (a - b).abs())
}

/// Writes a 2-D map as CSV, one matrix row per line.
pub fn write_matrix_csv(path: &Path, m: &Tensor<f64>) -> Result<()> {
    if m.shape().len() != 2 {
        return Err(Error::shape("write_matrix_csv", format!("expected a matrix, got {:?}", m.shape())));
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in m.data().chunks(m.cols()) {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_matrix_csv(path: &Path) -> Result<Tensor<f64>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row: Vec<f64> = rec
            .iter()
            .map(|s| s.parse().map_err(|_| Error::Data(format!("{}: bad number {s:?}", path.display()))))
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: empty matrix", path.display())));
    }
    Tensor::from_rows(&rows)
}

const PALETTE: [[f64; 3]; 5] = [
    [13.0, 8.0, 135.0],
    [126.0, 3.0, 168.0],
    [204.0, 71.0, 120.0],
    [248.0, 149.0, 64.0],
    [240.0, 249.0, 33.0],
];

fn color(t: f64) -> [u8; 3] {
    let x = t.clamp(0.0, 1.0) * (PALETTE.len() - 1) as f64;
    let i = (x.floor() as usize).min(PALETTE.len() - 2);
    let f = x - i as f64;
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        *o = (PALETTE[i][c] + f * (PALETTE[i + 1][c] - PALETTE[i][c])).round() as u8;
    }
    out
}

/// Renders a 2-D map as a PNG heatmap scaled between its min and max.
pub fn write_heatmap_png(path: &Path, m: &Tensor<f64>) -> Result<()> {
    if m.shape().len() != 2 {
        return Err(Error::shape("write_heatmap_png", format!("expected a matrix, got {:?}", m.shape())));
    }
    let (rows, cols) = (m.rows(), m.cols());
    let cw = (512 / cols).clamp(1, 32) as u32;
    let ch = (256 / rows).clamp(1, 32) as u32;
    let lo = m.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let img = image::RgbImage::from_fn(cols as u32 * cw, rows as u32 * ch, |x, y| {
        let v = m.get2((y / ch) as usize, (x / cw) as usize);
        image::Rgb(color((v - lo) / span))
    });
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
