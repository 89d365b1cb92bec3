//! The unfolded interference-cancellation network.
//!
//! Each layer `t` carries the quantized estimate `x_q` and the residual `v`
//! from the previous layer and computes
//!
//! ```text
//! v_tilde = W2 (W1 v + b1) + b2          (16QAM only, otherwise v_tilde = v)
//! v_next  = D^-1 (H^T y - H^T H x_q)
//! x_next  = x_q + v_next + alpha1 * v_tilde
//! combo   = (1 - alpha2) * x_next + alpha2 * x_q
//! x_q'    = Q[combo]
//! ```
//!
//! The first layer starts from the unquantized matched-filter estimate with
//! `v = 0`, and its `(alpha1, alpha2) = (0, 0.5)` pair is fixed.
//!
//! Training uses a straight-through quantizer: the forward pass quantizes,
//! the reverse pass treats `Q` as the identity.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::baseline::{matched_filter_init, DiagonalGram};
use crate::error::{Error, Result};
use crate::system_model::{Constellation, Modulation, RealSystem};

/// Residual-injection gain of the first layer.
pub const FIXED_ALPHA1: f64 = 0.0;
/// Convex-combination weight of the first layer.
pub const FIXED_ALPHA2: f64 = 0.5;
/// Starting `alpha1` of trainable layers.
pub const INIT_ALPHA1: f64 = 0.0;
/// Starting `alpha2` of trainable layers. With both at zero every trainable
/// layer is one quantized interference-cancellation step.
pub const INIT_ALPHA2: f64 = 0.0;

/// Model file schema version written by [`NetworkParams::save`].
pub const MODEL_VERSION: u32 = 1;

/// Two stacked affine maps applied to the incoming residual (no activation).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearTransform {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

impl LinearTransform {
    pub fn identity(dim: usize) -> Self {
        Self {
            w1: DMatrix::identity(dim, dim),
            b1: DVector::zeros(dim),
            w2: DMatrix::identity(dim, dim),
            b2: DVector::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.b1.len()
    }

    /// Returns the hidden value `W1 v + b1` and the output.
    pub fn apply(&self, v: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let hidden = &self.w1 * v + &self.b1;
        let out = &self.w2 * &hidden + &self.b2;
        (hidden, out)
    }

    fn scalar_count(&self) -> usize {
        let n = self.dim();
        2 * n * n + 2 * n
    }

    fn is_consistent(&self) -> bool {
        let n = self.dim();
        self.w1.shape() == (n, n) && self.w2.shape() == (n, n) && self.b2.len() == n
    }

    fn is_finite(&self) -> bool {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
            .all(|v| v.is_finite())
    }
}

/// Parameters of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub alpha1: f64,
    pub alpha2: f64,
    /// Present iff the network runs in 16QAM mode.
    pub transform: Option<LinearTransform>,
}

/// The full trainable set for an `L`-layer network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<LayerParams>,
    pub modulation: Modulation,
    pub n_users: usize,
}

impl NetworkParams {
    /// Untrained network: the fixed first layer, then `(INIT_ALPHA1,
    /// INIT_ALPHA2)` on every trainable layer and, for 16QAM, identity
    /// transforms with zero biases.
    pub fn init(modulation: Modulation, n_users: usize, n_layers: usize) -> Result<Self> {
        if n_users == 0 || n_layers == 0 {
            return Err(Error::Config(format!(
                "need n_users >= 1 and n_layers >= 1, got {n_users} and {n_layers}"
            )));
        }
        let transform = match modulation {
            Modulation::Qpsk => None,
            Modulation::Qam16 => Some(LinearTransform::identity(2 * n_users)),
        };
        let layers = (0..n_layers)
            .map(|t| {
                let (alpha1, alpha2) = if t == 0 {
                    (FIXED_ALPHA1, FIXED_ALPHA2)
                } else {
                    (INIT_ALPHA1, INIT_ALPHA2)
                };
                LayerParams {
                    alpha1,
                    alpha2,
                    transform: transform.clone(),
                }
            })
            .collect();
        Ok(Self {
            layers,
            modulation,
            n_users,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Number of alpha scalars, `2L`, counting the fixed first-layer pair.
    pub fn scalar_count(&self) -> usize {
        2 * self.layers.len()
    }

    /// Number of trainable alpha scalars, `2(L - 1)`.
    pub fn trainable_scalar_count(&self) -> usize {
        2 * (self.layers.len().saturating_sub(1))
    }

    /// Length of [`Self::trainable_vector`], transform entries included.
    pub fn trainable_len(&self) -> usize {
        self.layers
            .iter()
            .skip(1)
            .map(|l| {
                2 + l
                    .transform
                    .as_ref()
                    .map_or(0, LinearTransform::scalar_count)
            })
            .sum()
    }

    /// Checks shapes, finiteness, the transform/modulation pairing and the
    /// fixed first-layer values.
    pub fn validate(&self) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::Invariant("network has no layers".into()))?;
        if first.alpha1 != FIXED_ALPHA1 || first.alpha2 != FIXED_ALPHA2 {
            return Err(Error::Invariant(format!(
                "first layer must have alpha1 = {FIXED_ALPHA1}, alpha2 = {FIXED_ALPHA2}; got {}, {}",
                first.alpha1, first.alpha2
            )));
        }
        self.validate_shapes()
    }

    /// Like [`Self::validate`] but without pinning the first layer.
    pub fn validate_shapes(&self) -> Result<()> {
        if self.n_users == 0 || self.layers.is_empty() {
            return Err(Error::Invariant("empty network".into()));
        }
        let dim = 2 * self.n_users;
        for (t, layer) in self.layers.iter().enumerate() {
            if !layer.alpha1.is_finite() || !layer.alpha2.is_finite() {
                return Err(Error::Invariant(format!("layer {t}: non-finite alpha")));
            }
            match (self.modulation, &layer.transform) {
                (Modulation::Qpsk, None) => {}
                (Modulation::Qam16, Some(tr)) => {
                    if tr.dim() != dim || !tr.is_consistent() {
                        return Err(Error::Invariant(format!(
                            "layer {t}: transform must be {dim}x{dim}"
                        )));
                    }
                    if !tr.is_finite() {
                        return Err(Error::Invariant(format!("layer {t}: non-finite transform")));
                    }
                }
                (Modulation::Qpsk, Some(_)) => {
                    return Err(Error::Invariant(format!(
                        "layer {t}: QPSK network must not carry a transform"
                    )))
                }
                (Modulation::Qam16, None) => {
                    return Err(Error::Invariant(format!(
                        "layer {t}: 16QAM network needs a transform"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Errors unless this network was built for `modulation` and `n_users`.
    pub fn check_compatible(&self, modulation: Modulation, n_users: usize) -> Result<()> {
        if self.modulation != modulation {
            return Err(Error::ModeMismatch {
                model: self.modulation.to_string(),
                run: modulation.to_string(),
            });
        }
        if self.n_users != n_users {
            return Err(Error::Dimension(format!(
                "model has {} users, system has {n_users}",
                self.n_users
            )));
        }
        Ok(())
    }

    /// Flattened trainable parameters, layers `1..L` in order:
    /// `alpha1, alpha2, w1 (row-major), b1, w2 (row-major), b2`.
    pub fn trainable_vector(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trainable_len());
        for layer in self.layers.iter().skip(1) {
            out.push(layer.alpha1);
            out.push(layer.alpha2);
            if let Some(tr) = &layer.transform {
                push_transform(&mut out, &tr.w1, &tr.b1, &tr.w2, &tr.b2);
            }
        }
        out
    }

    /// Inverse of [`Self::trainable_vector`].
    pub fn set_trainable(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.trainable_len() {
            return Err(Error::Length {
                expected: self.trainable_len(),
                got: values.len(),
            });
        }
        let mut it = values.iter().copied();
        for layer in self.layers.iter_mut().skip(1) {
            layer.alpha1 = it.next().unwrap();
            layer.alpha2 = it.next().unwrap();
            if let Some(tr) = &mut layer.transform {
                let n = tr.dim();
                tr.w1 = DMatrix::from_row_iterator(n, n, it.by_ref().take(n * n));
                tr.b1 = DVector::from_iterator(n, it.by_ref().take(n));
                tr.w2 = DMatrix::from_row_iterator(n, n, it.by_ref().take(n * n));
                tr.b2 = DVector::from_iterator(n, it.by_ref().take(n));
            }
        }
        Ok(())
    }

    pub fn to_model_string(&self) -> Result<String> {
        let file = ModelFile {
            version: MODEL_VERSION,
            modulation: self.modulation,
            n_users: self.n_users,
            n_layers: self.layers.len(),
            alpha1: self.layers.iter().map(|l| l.alpha1).collect(),
            alpha2: self.layers.iter().map(|l| l.alpha2).collect(),
            transform: self
                .layers
                .iter()
                .filter_map(|l| l.transform.as_ref())
                .map(|tr| TransformRecord {
                    w1: row_major(&tr.w1),
                    b1: tr.b1.as_slice().to_vec(),
                    w2: row_major(&tr.w2),
                    b2: tr.b2.as_slice().to_vec(),
                })
                .collect(),
        };
        toml::to_string(&file).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn from_model_str(text: &str) -> Result<Self> {
        let file: ModelFile = toml::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        if file.version != MODEL_VERSION {
            return Err(Error::Schema(format!(
                "unsupported model version {} (expected {MODEL_VERSION})",
                file.version
            )));
        }
        let l = file.n_layers;
        if file.alpha1.len() != l || file.alpha2.len() != l {
            return Err(Error::Schema(format!(
                "n_layers = {l} but alpha1/alpha2 have {}/{} entries",
                file.alpha1.len(),
                file.alpha2.len()
            )));
        }
        let dim = 2 * file.n_users;
        let transforms: Vec<Option<LinearTransform>> = match (file.modulation, file.transform.len())
        {
            (Modulation::Qpsk, 0) => vec![None; l],
            (Modulation::Qam16, n) if n == l => file
                .transform
                .into_iter()
                .map(|rec| rec.into_transform(dim).map(Some))
                .collect::<Result<_>>()?,
            (m, n) => {
                return Err(Error::Schema(format!(
                    "{m} model with {l} layers carries {n} transform records"
                )))
            }
        };
        let layers = file
            .alpha1
            .into_iter()
            .zip(file.alpha2)
            .zip(transforms)
            .map(|((alpha1, alpha2), transform)| LayerParams {
                alpha1,
                alpha2,
                transform,
            })
            .collect();
        let params = Self {
            layers,
            modulation: file.modulation,
            n_users: file.n_users,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_model_string()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_model_str(&std::fs::read_to_string(path)?)
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn push_transform(
    out: &mut Vec<f64>,
    w1: &DMatrix<f64>,
    b1: &DVector<f64>,
    w2: &DMatrix<f64>,
    b2: &DVector<f64>,
) {
    out.extend(row_major(w1));
    out.extend(b1.iter());
    out.extend(row_major(w2));
    out.extend(b2.iter());
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    modulation: Modulation,
    n_users: usize,
    n_layers: usize,
    alpha1: Vec<f64>,
    alpha2: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    transform: Vec<TransformRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TransformRecord {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl TransformRecord {
    fn into_transform(self, dim: usize) -> Result<LinearTransform> {
        if self.w1.len() != dim * dim
            || self.w2.len() != dim * dim
            || self.b1.len() != dim
            || self.b2.len() != dim
        {
            return Err(Error::Schema(format!(
                "transform record is not {dim}x{dim}"
            )));
        }
        Ok(LinearTransform {
            w1: DMatrix::from_row_slice(dim, dim, &self.w1),
            b1: DVector::from_vec(self.b1),
            w2: DMatrix::from_row_slice(dim, dim, &self.w2),
            b2: DVector::from_vec(self.b2),
        })
    }
}

/// Values crossing a layer boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    /// Quantized estimate handed to the next layer.
    pub x_q: DVector<f64>,
    /// Residual handed to the next layer.
    pub v: DVector<f64>,
    /// Pre-quantization combination computed by this layer.
    pub x_soft: DVector<f64>,
}

/// How a layer treats the quantizer.
///
/// Both modes produce identical forward values; `StraightThrough` marks the
/// training path whose reverse pass passes gradients through `Q` unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizerMode {
    Hard,
    StraightThrough,
}

/// Matched-filter start with a zero residual. Not quantized.
pub fn init_state(g: &DiagonalGram) -> LayerState {
    let x0 = matched_filter_init(g);
    LayerState {
        x_q: x0.clone(),
        v: DVector::zeros(x0.len()),
        x_soft: x0,
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerRecord {
    x_q_in: DVector<f64>,
    v_in: DVector<f64>,
    hidden: Option<DVector<f64>>,
    v_tilde: DVector<f64>,
    x_next: DVector<f64>,
}

fn layer_step(
    state: &LayerState,
    layer: &LayerParams,
    g: &DiagonalGram,
    c: &Constellation,
) -> (LayerState, LayerRecord) {
    let (hidden, v_tilde) = match &layer.transform {
        Some(tr) => {
            let (h, out) = tr.apply(&state.v);
            (Some(h), out)
        }
        None => (None, state.v.clone()),
    };
    let mut v_next = &g.matched - &g.gram * &state.x_q;
    v_next.component_div_assign(&g.d);
    let x_next = &state.x_q + &v_next + &v_tilde * layer.alpha1;
    let combo = &x_next * (1.0 - layer.alpha2) + &state.x_q * layer.alpha2;
    let next = LayerState {
        x_q: c.quantize(&combo),
        v: v_next,
        x_soft: combo,
    };
    let record = LayerRecord {
        x_q_in: state.x_q.clone(),
        v_in: state.v.clone(),
        hidden,
        v_tilde,
        x_next,
    };
    (next, record)
}

/// One unfolded layer.
pub fn layer_forward(
    state: &LayerState,
    layer: &LayerParams,
    g: &DiagonalGram,
    c: &Constellation,
    _mode: QuantizerMode,
) -> LayerState {
    layer_step(state, layer, g, c).0
}

fn check_run(sys_users: usize, c: &Constellation, params: &NetworkParams) -> Result<()> {
    params.check_compatible(c.kind(), sys_users)?;
    params.validate_shapes()
}

/// Full hard-decision forward pass on a precomputed Gram.
pub fn detect_with_gram(
    g: &DiagonalGram,
    c: &Constellation,
    params: &NetworkParams,
) -> DVector<f64> {
    let mut state = init_state(g);
    for layer in &params.layers {
        state = layer_step(&state, layer, g, c).0;
    }
    state.x_q
}

/// Hard-decision detection: `L` layers from the matched-filter start.
pub fn detect(sys: &RealSystem, c: &Constellation, params: &NetworkParams) -> Result<DVector<f64>> {
    check_run(sys.n_users, c, params)?;
    let g = DiagonalGram::precompute(sys)?;
    Ok(detect_with_gram(&g, c, params))
}

/// Everything the reverse pass needs from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    params: NetworkParams,
    gram: DiagonalGram,
    records: Vec<LayerRecord>,
    combos: Vec<DVector<f64>>,
}

impl Tape {
    /// Pre-quantization output of the last layer.
    pub fn output(&self) -> &DVector<f64> {
        self.combos.last().expect("tape has at least one layer")
    }

    /// Pre-quantization combination of every layer, in order.
    pub fn layer_outputs(&self) -> &[DVector<f64>] {
        &self.combos
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    /// Re-run the recorded forward pass from the stored inputs.
    pub fn replay(&self, c: &Constellation) -> DVector<f64> {
        let mut state = init_state(&self.gram);
        for layer in &self.params.layers {
            state = layer_step(&state, layer, &self.gram, c).0;
        }
        state.x_soft
    }
}

/// Training-time forward pass on a precomputed Gram.
pub fn forward_soft_with_gram(
    g: &DiagonalGram,
    c: &Constellation,
    params: &NetworkParams,
) -> (DVector<f64>, Tape) {
    let mut state = init_state(g);
    let mut records = Vec::with_capacity(params.n_layers());
    let mut combos = Vec::with_capacity(params.n_layers());
    for layer in &params.layers {
        let (next, record) = layer_step(&state, layer, g, c);
        records.push(record);
        combos.push(next.x_soft.clone());
        state = next;
    }
    let tape = Tape {
        params: params.clone(),
        gram: g.clone(),
        records,
        combos,
    };
    (state.x_soft, tape)
}

/// Training-time forward pass: same arithmetic as [`detect`], returning the
/// final pre-quantization vector and a tape for [`param_gradients`].
pub fn forward_soft(
    sys: &RealSystem,
    c: &Constellation,
    params: &NetworkParams,
) -> Result<(DVector<f64>, Tape)> {
    check_run(sys.n_users, c, params)?;
    let g = DiagonalGram::precompute(sys)?;
    Ok(forward_soft_with_gram(&g, c, params))
}

/// Gradient of one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub alpha1: f64,
    pub alpha2: f64,
    pub transform: Option<LinearTransform>,
}

/// Gradients shaped like [`NetworkParams`]; the first layer is always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub layers: Vec<LayerGradient>,
}

impl ParamGradients {
    /// Same ordering as [`NetworkParams::trainable_vector`].
    pub fn trainable_vector(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in self.layers.iter().skip(1) {
            out.push(layer.alpha1);
            out.push(layer.alpha2);
            if let Some(tr) = &layer.transform {
                push_transform(&mut out, &tr.w1, &tr.b1, &tr.w2, &tr.b2);
            }
        }
        out
    }
}

/// Reverse pass through a tape.
///
/// `loss_grad` is the gradient of the loss with respect to the final
/// pre-quantization output. `params` must be the parameters the tape was
/// recorded with.
pub fn param_gradients(
    tape: &Tape,
    params: &NetworkParams,
    loss_grad: &DVector<f64>,
) -> Result<ParamGradients> {
    if *params != tape.params {
        return Err(Error::Tape(
            "parameters changed since the tape was recorded".into(),
        ));
    }
    let n = tape.gram.dim();
    if loss_grad.len() != n {
        return Err(Error::Tape(format!(
            "loss gradient has length {}, tape output has {n}",
            loss_grad.len()
        )));
    }
    if tape.records.len() != params.n_layers() {
        return Err(Error::Tape("tape does not cover every layer".into()));
    }

    let d = &tape.gram.d;
    let gram = &tape.gram.gram;
    let last = params.n_layers() - 1;
    // gradients w.r.t. the (x_q, v) handed to the layer after the current one
    let mut g_xq_out = DVector::zeros(n);
    let mut g_v_out = DVector::zeros(n);
    let mut layers = Vec::with_capacity(params.n_layers());

    for t in (0..=last).rev() {
        let rec = &tape.records[t];
        let p = &params.layers[t];
        // straight-through: d x_q' / d combo = I
        let g_combo = if t == last {
            loss_grad.clone()
        } else {
            g_xq_out.clone()
        };

        let g_xnext = &g_combo * (1.0 - p.alpha2);
        let alpha2 = g_combo.dot(&(&rec.x_q_in - &rec.x_next));
        let alpha1 = g_xnext.dot(&rec.v_tilde);

        let mut g_xq_in = &g_combo * p.alpha2 + &g_xnext;
        let g_resid = (&g_xnext + &g_v_out).component_div(d);
        g_xq_in -= gram * g_resid;

        let g_vtilde = &g_xnext * p.alpha1;
        let (g_v_in, transform) = match (&p.transform, &rec.hidden) {
            (Some(tr), Some(hidden)) => {
                let g_hidden = tr.w2.tr_mul(&g_vtilde);
                let grad = LinearTransform {
                    w1: &g_hidden * rec.v_in.transpose(),
                    b1: g_hidden.clone(),
                    w2: &g_vtilde * hidden.transpose(),
                    b2: g_vtilde.clone(),
                };
                (tr.w1.tr_mul(&g_hidden), Some(grad))
            }
            (None, None) => (g_vtilde, None),
            _ => {
                return Err(Error::Tape(format!(
                    "layer {t}: transform does not match tape"
                )))
            }
        };

        layers.push(LayerGradient {
            alpha1,
            alpha2,
            transform,
        });
        g_xq_out = g_xq_in;
        g_v_out = g_v_in;
    }
    layers.reverse();

    let first = &mut layers[0];
    first.alpha1 = 0.0;
    first.alpha2 = 0.0;
    if let Some(tr) = &mut first.transform {
        tr.w1.fill(0.0);
        tr.b1.fill(0.0);
        tr.w2.fill(0.0);
        tr.b2.fill(0.0);
    }
    Ok(ParamGradients { layers })
}
