//! Small feed-forward networks over adapted and frozen linear layers.
//!
//! A network is a chain of layers, each `activation(W x + bias)` where `W`
//! is either an adapted layer ([`LoraLinear`]) paired with its own
//! [`ImportanceState`], or a plain frozen matrix. Biases are always
//! trainable. Inputs and activations flow as column-major batches
//! (`features x batch`).
//!
//! `forward` captures per-layer inputs and pre-activations in a cache that
//! `backward` consumes; the cache is tagged with the network's layer shapes
//! and the batch width and is rejected if it no longer matches, so a stale
//! cache cannot silently produce garbage gradients.

use serde::{Deserialize, Serialize};

use crate::adapter::{LayerGrads, LoraLinear};
use crate::error::{shape_mismatch, Error, Result};
use crate::importance::ImportanceState;
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(&self, z: &Matrix) -> Matrix {
        match self {
            Activation::Relu => z.map(|v| v.max(0.0)),
            Activation::Identity => z.clone(),
        }
    }

    /// Derivative mask applied to the upstream gradient. The relu
    /// subgradient at exactly zero is taken as zero.
    fn mask_gradient(&self, d: &Matrix, preact: &Matrix) -> Result<Matrix> {
        match self {
            Activation::Relu => d.zip_map(preact, "relu_mask", |g, z| if z > 0.0 { g } else { 0.0 }),
            Activation::Identity => Ok(d.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    SoftmaxCrossEntropy,
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
enum LayerKind {
    Adapted {
        adapter: LoraLinear,
        importance: ImportanceState,
    },
    Frozen {
        w: Matrix,
    },
}

#[derive(Debug, Clone)]
pub struct NetLayer {
    kind: LayerKind,
    bias: Matrix,
    activation: Activation,
}

impl NetLayer {
    /// Adapted layer with a fresh importance tracker and zero bias.
    pub fn adapted(
        adapter: LoraLinear,
        activation: Activation,
        beta1: f64,
        beta2: f64,
    ) -> Result<NetLayer> {
        let importance = ImportanceState::for_layer(&adapter, beta1, beta2)?;
        let bias = Matrix::zeros(adapter.out_dim(), 1);
        Ok(NetLayer {
            kind: LayerKind::Adapted {
                adapter,
                importance,
            },
            bias,
            activation,
        })
    }

    /// Fully frozen layer; only its bias trains.
    pub fn frozen(w: Matrix, activation: Activation) -> NetLayer {
        let bias = Matrix::zeros(w.rows(), 1);
        NetLayer {
            kind: LayerKind::Frozen { w },
            bias,
            activation,
        }
    }

    pub fn is_adapted(&self) -> bool {
        matches!(self.kind, LayerKind::Adapted { .. })
    }

    pub fn adapter(&self) -> Option<&LoraLinear> {
        match &self.kind {
            LayerKind::Adapted { adapter, .. } => Some(adapter),
            LayerKind::Frozen { .. } => None,
        }
    }

    pub fn importance(&self) -> Option<&ImportanceState> {
        match &self.kind {
            LayerKind::Adapted { importance, .. } => Some(importance),
            LayerKind::Frozen { .. } => None,
        }
    }

    /// Split mutable borrow of the adapter and its importance tracker.
    pub fn adapted_parts_mut(&mut self) -> Option<(&mut LoraLinear, &mut ImportanceState)> {
        match &mut self.kind {
            LayerKind::Adapted {
                adapter,
                importance,
            } => Some((adapter, importance)),
            LayerKind::Frozen { .. } => None,
        }
    }

    /// The frozen base weight: `w` of the adapter, or the frozen matrix.
    pub fn base_weight(&self) -> &Matrix {
        match &self.kind {
            LayerKind::Adapted { adapter, .. } => adapter.w(),
            LayerKind::Frozen { w } => w,
        }
    }

    pub fn bias(&self) -> &Matrix {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut Matrix {
        &mut self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn out_dim(&self) -> usize {
        match &self.kind {
            LayerKind::Adapted { adapter, .. } => adapter.out_dim(),
            LayerKind::Frozen { w } => w.rows(),
        }
    }

    pub fn in_dim(&self) -> usize {
        match &self.kind {
            LayerKind::Adapted { adapter, .. } => adapter.in_dim(),
            LayerKind::Frozen { w } => w.cols(),
        }
    }

    fn linear_forward(&self, x: &Matrix) -> Result<Matrix> {
        let z = match &self.kind {
            LayerKind::Adapted { adapter, .. } => adapter.forward(x)?,
            LayerKind::Frozen { w } => w.matmul(x)?,
        };
        z.add_col_broadcast(&self.bias)
    }

    pub(crate) fn from_parts(kind_adapted: Option<(LoraLinear, ImportanceState)>, frozen: Option<Matrix>, bias: Matrix, activation: Activation) -> Result<NetLayer> {
        let kind = match (kind_adapted, frozen) {
            (Some((adapter, importance)), None) => LayerKind::Adapted { adapter, importance },
            (None, Some(w)) => LayerKind::Frozen { w },
            _ => {
                return Err(Error::InvalidArgument(
                    "layer must be exactly one of adapted or frozen".to_string(),
                ))
            }
        };
        Ok(NetLayer {
            kind,
            bias,
            activation,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SrloraNet {
    layers: Vec<NetLayer>,
}

/// Per-layer tensors captured on the forward pass.
#[derive(Debug, Clone)]
struct LayerCache {
    input: Matrix,
    preact: Matrix,
}

#[derive(Debug, Clone)]
pub struct NetCache {
    per_layer: Vec<LayerCache>,
    batch: usize,
    shapes: Vec<(usize, usize)>,
}

/// Gradients for one layer of the net. `adapter` is `None` for frozen
/// layers, whose only trainable parameter is the bias.
#[derive(Debug, Clone)]
pub struct LayerGradEntry {
    pub bias: Matrix,
    pub adapter: Option<LayerGrads>,
}

#[derive(Debug, Clone)]
pub struct NetGrads {
    pub layers: Vec<LayerGradEntry>,
}

impl SrloraNet {
    /// Validates that consecutive layer dimensions chain.
    pub fn new(layers: Vec<NetLayer>) -> Result<SrloraNet> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument(
                "network needs at least one layer".to_string(),
            ));
        }
        for i in 1..layers.len() {
            if layers[i].in_dim() != layers[i - 1].out_dim() {
                return Err(Error::InvalidArgument(format!(
                    "layer {i} expects {} inputs but layer {} produces {}",
                    layers[i].in_dim(),
                    i - 1,
                    layers[i - 1].out_dim()
                )));
            }
        }
        Ok(SrloraNet { layers })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, i: usize) -> &NetLayer {
        &self.layers[i]
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut NetLayer {
        &mut self.layers[i]
    }

    pub fn layers(&self) -> &[NetLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    /// Trainable parameter count: adapter factors plus every bias.
    pub fn num_trainable(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                let adapter = l.adapter().map_or(0, |a| a.num_trainable());
                adapter + l.out_dim()
            })
            .sum()
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, NetCache)> {
        if x.rows() != self.input_dim() {
            return Err(shape_mismatch(
                "net_forward",
                (self.input_dim(), 0),
                x.shape(),
            ));
        }
        let mut cur = x.clone();
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let preact = layer.linear_forward(&cur)?;
            let out = layer.activation.apply(&preact);
            per_layer.push(LayerCache { input: cur, preact });
            cur = out;
        }
        let cache = NetCache {
            per_layer,
            batch: x.cols(),
            shapes: self.layers.iter().map(|l| (l.out_dim(), l.in_dim())).collect(),
        };
        Ok((cur, cache))
    }

    /// Chain-rule pass from the loss gradient at the output. Frozen base
    /// weights receive no gradient entries at all.
    pub fn backward(&self, cache: &NetCache, d_out: &Matrix) -> Result<NetGrads> {
        let shapes: Vec<(usize, usize)> =
            self.layers.iter().map(|l| (l.out_dim(), l.in_dim())).collect();
        if cache.shapes != shapes || cache.per_layer.len() != self.layers.len() {
            return Err(Error::InvalidArgument(
                "forward cache does not match this network".to_string(),
            ));
        }
        if d_out.shape() != (self.output_dim(), cache.batch) {
            return Err(shape_mismatch(
                "net_backward",
                (self.output_dim(), cache.batch),
                d_out.shape(),
            ));
        }
        let mut entries: Vec<LayerGradEntry> = Vec::with_capacity(self.layers.len());
        let mut d = d_out.clone();
        for (layer, lc) in self.layers.iter().zip(&cache.per_layer).rev() {
            let d_z = layer.activation.mask_gradient(&d, &lc.preact)?;
            let bias = d_z.row_sums();
            match &layer.kind {
                LayerKind::Adapted { adapter, .. } => {
                    let grads = adapter.backward(&lc.input, &d_z)?;
                    d = grads.d_x.clone();
                    entries.push(LayerGradEntry {
                        bias,
                        adapter: Some(grads),
                    });
                }
                LayerKind::Frozen { w } => {
                    d = w.matmul_tn(&d_z)?;
                    entries.push(LayerGradEntry {
                        bias,
                        adapter: None,
                    });
                }
            }
        }
        entries.reverse();
        Ok(NetGrads { layers: entries })
    }
}

/// Loss and its gradient with respect to the predictions, both averaged
/// over the batch.
///
/// `Mse` is `mean_over_batch(0.5 * ||y_hat_col - y_col||^2)`.
/// `SoftmaxCrossEntropy` applies a max-subtracted softmax per column and
/// scores against one-hot targets; its gradient is `(softmax - y) / batch`.
pub fn loss_and_grad(kind: LossKind, y_hat: &Matrix, y: &Matrix) -> Result<(f64, Matrix)> {
    if y_hat.shape() != y.shape() {
        return Err(shape_mismatch("loss", y_hat.shape(), y.shape()));
    }
    let batch = y_hat.cols() as f64;
    match kind {
        LossKind::Mse => {
            let diff = y_hat.sub(y)?;
            let loss = 0.5 * diff.frobenius_norm().powi(2) / batch;
            Ok((loss, diff.scale(1.0 / batch)))
        }
        LossKind::SoftmaxCrossEntropy => {
            let classes = y_hat.rows();
            let mut grad = Matrix::zeros(classes, y_hat.cols());
            let mut total = 0.0;
            for c in 0..y_hat.cols() {
                let col = y_hat.column(c);
                let target = y.column(c);
                let hot = validate_one_hot(&target, c)?;
                let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = col.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                total += z.ln() - (col[hot] - max);
                for (i, &e) in exps.iter().enumerate() {
                    grad.set(i, c, (e / z - target[i]) / batch);
                }
            }
            Ok((total / batch, grad))
        }
    }
}

fn validate_one_hot(target: &[f64], col: usize) -> Result<usize> {
    let mut hot = None;
    for (i, &v) in target.iter().enumerate() {
        if v == 1.0 {
            if hot.is_some() {
                return Err(Error::InvalidArgument(format!(
                    "target column {col} has more than one active class"
                )));
            }
            hot = Some(i);
        } else if v != 0.0 {
            return Err(Error::InvalidArgument(format!(
                "target column {col} is not one-hot"
            )));
        }
    }
    hot.ok_or_else(|| {
        Error::InvalidArgument(format!("target column {col} has no active class"))
    })
}
