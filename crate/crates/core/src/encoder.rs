//! Online/momentum encoder stack.
//!
//! The online network is `h ∘ g ∘ f` (backbone, projector, predictor); the
//! momentum copy holds only `f` and `g`. Queries go through the full online
//! stack, keys through the momentum `g ∘ f`. Both outputs are l2-normalized.
//!
//! Gradients are computed by reverse accumulation over a [`GradientTape`]
//! recorded during [`EncoderState::encode_queries`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{norm, Matrix};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the pre-activation value.
    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
            Activation::Linear => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Linear => "linear",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            "linear" => Some(Activation::Linear),
            _ => None,
        }
    }
}

/// Layer widths of each stage. Each list holds the output width of
/// successive linear layers; the backbone applies the nonlinearity after
/// every layer, projector and predictor after every layer but the last.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub backbone: Vec<usize>,
    pub projector: Vec<usize>,
    pub predictor: Vec<usize>,
    pub activation: Activation,
}

impl Architecture {
    /// Desk-scale stack: 2-hidden-layer backbone, 2-layer projector and predictor.
    pub fn desk(input_dim: usize, backbone_hidden: usize, head_hidden: usize, d: usize) -> Self {
        Self {
            input_dim,
            backbone: vec![backbone_hidden, backbone_hidden],
            projector: vec![head_hidden, d],
            predictor: vec![head_hidden, d],
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        for (name, dims) in [
            ("backbone", &self.backbone),
            ("projector", &self.projector),
            ("predictor", &self.predictor),
        ] {
            if dims.is_empty() || dims.contains(&0) {
                return Err(Error::Config(format!(
                    "{name} needs at least one layer and positive widths, got {dims:?}"
                )));
            }
        }
        if self.predictor.last() != self.projector.last() {
            return Err(Error::Config(format!(
                "predictor output {:?} must equal projector output {:?}",
                self.predictor.last(),
                self.projector.last()
            )));
        }
        Ok(())
    }

    /// Representation dimension `d`.
    pub fn embed_dim(&self) -> usize {
        *self.projector.last().expect("validated architecture")
    }

    pub fn feature_dim(&self) -> usize {
        *self.backbone.last().expect("validated architecture")
    }

    fn stage_dims(&self, stage: Stage) -> (usize, &[usize]) {
        match stage {
            Stage::Backbone => (self.input_dim, &self.backbone),
            Stage::Projector => (self.feature_dim(), &self.projector),
            Stage::Predictor => (self.embed_dim(), &self.predictor),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Backbone,
    Projector,
    Predictor,
}

/// `y = W x + b` with `W` stored as out×in.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul_t(&self.weight)?;
        for i in 0..y.rows() {
            for (v, b) in y.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    fn zeros(input: usize, widths: &[usize]) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = input;
        for &w in widths {
            layers.push(Linear::zeros(fan_in, w));
            fan_in = w;
        }
        Self { layers }
    }

    fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
    }

    fn same_shape(&self, other: &Mlp) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.shape() == b.weight.shape() && a.bias.len() == b.bias.len())
    }

    fn forward(
        &self,
        x: &Matrix,
        activation: Activation,
        final_activation: bool,
        mut record: Option<&mut Vec<LayerRecord>>,
    ) -> Result<Matrix> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            let pre = layer.forward(&h)?;
            let activate = li < last || final_activation;
            let mut out = pre.clone();
            if activate {
                out.as_mut_slice()
                    .iter_mut()
                    .for_each(|v| *v = activation.apply(*v));
            }
            if let Some(rec) = record.as_deref_mut() {
                rec.push(LayerRecord {
                    input: std::mem::replace(&mut h, Matrix::zeros(0, 0)),
                    pre,
                    activated: activate,
                });
            }
            h = out;
        }
        Ok(h)
    }
}

/// The online parameters θ. The same structure also carries gradients and
/// optimizer buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub backbone: Mlp,
    pub projector: Mlp,
    pub predictor: Mlp,
}

pub type Gradients = Params;

impl Params {
    pub fn zeros(arch: &Architecture) -> Self {
        let mlp = |s| {
            let (input, widths) = arch.stage_dims(s);
            Mlp::zeros(input, widths)
        };
        Self {
            backbone: mlp(Stage::Backbone),
            projector: mlp(Stage::Projector),
            predictor: mlp(Stage::Predictor),
        }
    }

    /// Fan-in scaled uniform initialization, `U(-√(6/fan_in), √(6/fan_in))`
    /// for weights so activation scale is kept through ReLU layers; biases
    /// start at zero.
    pub fn init(arch: &Architecture, rng: &mut impl rand::Rng) -> Self {
        let mut p = Self::zeros(arch);
        for mlp in [&mut p.backbone, &mut p.projector, &mut p.predictor] {
            for layer in &mut mlp.layers {
                let bound = (6.0 / layer.input_dim() as f64).sqrt();
                for w in layer.weight.as_mut_slice() {
                    *w = rng.random_range(-bound..bound);
                }
            }
        }
        p
    }

    pub fn stage(&self, stage: Stage) -> &Mlp {
        match stage {
            Stage::Backbone => &self.backbone,
            Stage::Projector => &self.projector,
            Stage::Predictor => &self.predictor,
        }
    }

    pub fn stage_mut(&mut self, stage: Stage) -> &mut Mlp {
        match stage {
            Stage::Backbone => &mut self.backbone,
            Stage::Projector => &mut self.projector,
            Stage::Predictor => &mut self.predictor,
        }
    }

    /// All parameter tensors in a fixed order: backbone, projector, predictor;
    /// within a stage, each layer's weight then bias.
    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.backbone
            .tensors()
            .chain(self.projector.tensors())
            .chain(self.predictor.tensors())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.backbone
            .tensors_mut()
            .chain(self.projector.tensors_mut())
            .chain(self.predictor.tensors_mut())
    }

    pub fn len(&self) -> usize {
        self.tensors().map(<[f64]>::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.tensors().flatten().copied().collect()
    }

    pub fn copy_from_slice(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.len(),
                flat.len()
            )));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[off..off + t.len()]);
            off += t.len();
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &Params) -> bool {
        self.backbone.same_shape(&other.backbone)
            && self.projector.same_shape(&other.projector)
            && self.predictor.same_shape(&other.predictor)
    }
}

/// The momentum parameters φ: copies of the backbone and projector only.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumParams {
    pub backbone: Mlp,
    pub projector: Mlp,
}

impl MomentumParams {
    pub fn copy_of(theta: &Params) -> Self {
        Self {
            backbone: theta.backbone.clone(),
            projector: theta.projector.clone(),
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.backbone.tensors().chain(self.projector.tensors())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.backbone
            .tensors_mut()
            .chain(self.projector.tensors_mut())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.tensors().flatten().copied().collect()
    }

    fn mirrors(&self, theta: &Params) -> bool {
        self.backbone.same_shape(&theta.backbone) && self.projector.same_shape(&theta.projector)
    }
}

#[derive(Debug, Clone)]
struct LayerRecord {
    input: Matrix,
    pre: Matrix,
    activated: bool,
}

/// Forward intermediates of one recorded query pass.
#[derive(Debug, Clone, Default)]
pub struct GradientTape {
    pass: Option<RecordedPass>,
}

#[derive(Debug, Clone)]
struct RecordedPass {
    /// Empty when the pass started from precomputed backbone features.
    backbone: Vec<LayerRecord>,
    projector: Vec<LayerRecord>,
    predictor: Vec<LayerRecord>,
    output: Matrix,
    norms: Vec<f64>,
}

impl GradientTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.pass.is_none()
    }

    pub fn clear(&mut self) {
        self.pass = None;
    }
}

/// l2-normalizes a vector. Zero or non-finite input is an error.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    normalize_in_place(&mut out)?;
    Ok(out)
}

fn normalize_in_place(v: &mut [f64]) -> Result<f64> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Normalize("non-finite entry".into()));
    }
    let n = norm(v);
    if n == 0.0 {
        return Err(Error::Normalize("zero vector".into()));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(n)
}

/// Normalizes every row, returning the pre-normalization norms.
pub fn normalize_rows(m: &mut Matrix) -> Result<Vec<f64>> {
    (0..m.rows())
        .map(|i| normalize_in_place(m.row_mut(i)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    arch: Architecture,
    pub theta: Params,
    pub phi: MomentumParams,
}

impl EncoderState {
    /// Seeded random initialization with φ an exact copy of θ.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::stream(seed, Stream::Init, 0);
        let theta = Params::init(&arch, &mut rng);
        Self::from_params(arch, theta)
    }

    pub fn from_params(arch: Architecture, theta: Params) -> Result<Self> {
        arch.validate()?;
        if !theta.same_shape(&Params::zeros(&arch)) {
            return Err(Error::Shape("parameters do not match architecture".into()));
        }
        let phi = MomentumParams::copy_of(&theta);
        Ok(Self { arch, theta, phi })
    }

    pub fn from_parts(arch: Architecture, theta: Params, phi: MomentumParams) -> Result<Self> {
        let mut s = Self::from_params(arch, theta)?;
        if !phi.mirrors(&s.theta) {
            return Err(Error::Shape("momentum parameters do not mirror θ".into()));
        }
        s.phi = phi;
        Ok(s)
    }

    /// Single-layer stages initialized to the identity (bias 0); with a linear
    /// activation the whole stack reduces to l2 normalization.
    pub fn identity(dim: usize, activation: Activation) -> Self {
        let arch = Architecture {
            input_dim: dim,
            backbone: vec![dim],
            projector: vec![dim],
            predictor: vec![dim],
            activation,
        };
        let mut theta = Params::zeros(&arch);
        for mlp in [&mut theta.backbone, &mut theta.projector, &mut theta.predictor] {
            mlp.layers[0].weight = Matrix::identity(dim);
        }
        Self::from_params(arch, theta).expect("identity stack is well formed")
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn embed_dim(&self) -> usize {
        self.arch.embed_dim()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.arch.input_dim {
            return Err(Error::Shape(format!(
                "input has {} features, backbone expects {}",
                x.cols(),
                self.arch.input_dim
            )));
        }
        Ok(())
    }

    /// `Normalize(h_θ(g_θ(f_θ(x))))` for every row of `x`, recording the pass
    /// on `tape` (any previous recording is replaced).
    pub fn encode_queries(&self, x: &Matrix, tape: &mut GradientTape) -> Result<Matrix> {
        self.check_input(x)?;
        let act = self.arch.activation;
        let mut backbone = Vec::new();
        let feats = self.theta.backbone.forward(x, act, true, Some(&mut backbone))?;
        self.record_heads(feats, backbone, tape)
    }

    /// Like [`Self::encode_queries`] but starting from backbone features; the
    /// recorded pass only yields projector and predictor gradients.
    pub fn encode_queries_from_features(
        &self,
        features: &Matrix,
        tape: &mut GradientTape,
    ) -> Result<Matrix> {
        if features.cols() != self.arch.feature_dim() {
            return Err(Error::Shape(format!(
                "features have {} columns, projector expects {}",
                features.cols(),
                self.arch.feature_dim()
            )));
        }
        self.record_heads(features.clone(), Vec::new(), tape)
    }

    fn record_heads(
        &self,
        feats: Matrix,
        backbone: Vec<LayerRecord>,
        tape: &mut GradientTape,
    ) -> Result<Matrix> {
        let act = self.arch.activation;
        let mut projector = Vec::new();
        let mut predictor = Vec::new();
        let proj = self.theta.projector.forward(&feats, act, false, Some(&mut projector))?;
        let mut out = self.theta.predictor.forward(&proj, act, false, Some(&mut predictor))?;
        let norms = normalize_rows(&mut out)?;
        tape.pass = Some(RecordedPass {
            backbone,
            projector,
            predictor,
            output: out.clone(),
            norms,
        });
        Ok(out)
    }

    pub fn encode_query(&self, x: &[f64], tape: &mut GradientTape) -> Result<Vec<f64>> {
        let x = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.encode_queries(&x, tape)?.into_vec())
    }

    /// `Normalize(g_φ(f_φ(x)))` per row. Nothing is recorded.
    pub fn encode_keys(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let act = self.arch.activation;
        let feats = self.phi.backbone.forward(x, act, true, None)?;
        let mut z = self.phi.projector.forward(&feats, act, false, None)?;
        normalize_rows(&mut z)?;
        Ok(z)
    }

    pub fn encode_key(&self, x: &[f64]) -> Result<Vec<f64>> {
        let x = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.encode_keys(&x)?.into_vec())
    }

    /// Online backbone features `f_θ(x)`.
    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        self.theta.backbone.forward(x, self.arch.activation, true, None)
    }

    /// `Normalize(g_θ(f_θ(x)))`: the support path at meta-test time.
    pub fn embed_online(&self, x: &Matrix) -> Result<Matrix> {
        let feats = self.features(x)?;
        self.project_features(&feats)
    }

    /// `Normalize(g_θ(features))`.
    pub fn project_features(&self, features: &Matrix) -> Result<Matrix> {
        let mut z = self
            .theta
            .projector
            .forward(features, self.arch.activation, false, None)?;
        normalize_rows(&mut z)?;
        Ok(z)
    }

    /// `Normalize(h_θ(g_θ(f_θ(x))))` without recording.
    pub fn query_online(&self, x: &Matrix) -> Result<Matrix> {
        let mut tape = GradientTape::new();
        self.encode_queries(x, &mut tape)
    }

    /// `φ ← m·φ + (1−m)·θ` over the backbone and projector.
    pub fn ema_update(&mut self, m: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&m) {
            return Err(Error::Config(format!("EMA momentum {m} outside [0, 1]")));
        }
        let theta = self
            .theta
            .backbone
            .tensors()
            .chain(self.theta.projector.tensors());
        for (p, t) in self.phi.tensors_mut().zip(theta) {
            for (pi, ti) in p.iter_mut().zip(t) {
                *pi = m * *pi + (1.0 - m) * ti;
            }
        }
        Ok(())
    }

    /// Reverse pass: `∂loss/∂θ` given `∂loss/∂q` for every recorded query row.
    /// Stages that were not part of the recorded pass get zero gradients.
    pub fn backward(&self, tape: &GradientTape, loss_grad: &Matrix) -> Result<Gradients> {
        let pass = tape
            .pass
            .as_ref()
            .ok_or_else(|| Error::Tape("backward called on an empty tape".into()))?;
        if loss_grad.shape() != pass.output.shape() {
            return Err(Error::Shape(format!(
                "loss gradient {:?} does not match recorded output {:?}",
                loss_grad.shape(),
                pass.output.shape()
            )));
        }
        // through y = u/‖u‖: ∂u = (∂y − y (y·∂y)) / ‖u‖
        let mut grad = loss_grad.clone();
        for i in 0..grad.rows() {
            let y = pass.output.row(i);
            let g = grad.row_mut(i);
            let yg = crate::matrix::dot(y, g);
            let n = pass.norms[i];
            for (gi, yi) in g.iter_mut().zip(y) {
                *gi = (*gi - yi * yg) / n;
            }
        }
        let act = self.arch.activation;
        let mut grads = Params::zeros(&self.arch);
        let grad = mlp_backward(&self.theta.predictor, &pass.predictor, act, grad, &mut grads.predictor)?;
        let grad = mlp_backward(&self.theta.projector, &pass.projector, act, grad, &mut grads.projector)?;
        if !pass.backbone.is_empty() {
            mlp_backward(&self.theta.backbone, &pass.backbone, act, grad, &mut grads.backbone)?;
        }
        Ok(grads)
    }
}

fn mlp_backward(
    mlp: &Mlp,
    records: &[LayerRecord],
    act: Activation,
    mut grad: Matrix,
    out: &mut Mlp,
) -> Result<Matrix> {
    for ((layer, rec), g) in mlp
        .layers
        .iter()
        .zip(records)
        .zip(out.layers.iter_mut())
        .rev()
    {
        if rec.activated {
            for (gi, p) in grad.as_mut_slice().iter_mut().zip(rec.pre.as_slice()) {
                *gi *= act.derivative(*p);
            }
        }
        g.weight = grad.t_matmul(&rec.input)?;
        for row in grad.iter_rows() {
            for (b, v) in g.bias.iter_mut().zip(row) {
                *b += v;
            }
        }
        grad = grad.matmul(&layer.weight)?;
    }
    Ok(grad)
}
