use crate::autodiff::{AttentionBias, AttentionShape, Graph};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Additive attention hint: a `patches × patches` matrix in `[0, 1]` and its
/// weight. Applied after the softmax as `Â = A + λH`; `λ = 0` is inert.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHint {
    pub matrix: Tensor<f64>,
    pub lambda: f64,
}

impl AttentionHint {
    pub fn new(matrix: Tensor<f64>, lambda: f64) -> Result<Self> {
        let s = matrix.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::shape("attention hint", format!("must be square, got {s:?}")));
        }
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("hint lambda must be >= 0, got {lambda}")));
        }
        if matrix.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("hint entries must lie in [0, 1]".into()));
        }
        Ok(Self { matrix, lambda })
    }

    pub fn zeros(patches: usize, lambda: f64) -> Self {
        Self { matrix: Tensor::zeros(&[patches, patches]), lambda }
    }

    pub fn patches(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn is_inert(&self) -> bool {
        self.lambda == 0.0 || self.matrix.data().iter().all(|&v| v == 0.0)
    }

    /// Hex digest of shape, λ and matrix bytes.
    pub fn sha256(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for &d in self.matrix.shape() {
            h.update((d as u64).to_le_bytes());
        }
        h.update(self.lambda.to_le_bytes());
        for v in self.matrix.data() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// `A + λH` for a single map.
pub fn hinted_attention(scores: &Tensor<f64>, hint: &AttentionHint) -> Result<Tensor<f64>> {
    scores.zip_map(&hint.matrix, |a, h| a + hint.lambda * h)
}

/// Single-head attention on `tokens × head_dim` matrices.
///
/// Returns `(context, A, Â)` where `Â` equals `A` when no hint is given.
pub fn attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    hint: Option<&AttentionHint>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    if q.shape().len() != 2 || q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::shape("attention", format!("{:?} {:?} {:?}", q.shape(), k.shape(), v.shape())));
    }
    let (n, dk) = (q.shape()[0], q.shape()[1]);
    let bias = hint.map(|h| AttentionBias {
        matrix: h.matrix.cast(),
        lambda: S::from_f64_lossy(h.lambda),
        renormalize: false,
    });
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let shape = AttentionShape { groups: 1, tokens: n, heads: 1, head_dim: dk };
    let ctx = g.attention(qv, kv, vv, shape, bias.as_ref())?;
    let rec = g.attention_record(ctx).expect("attention node");
    let a = Tensor::new(&[n, n], rec.map(0, 0).to_vec())?;
    let hat = Tensor::new(&[n, n], rec.biased_map(0, 0).to_vec())?;
    Ok((g.value(ctx).clone(), a, hat))
}
