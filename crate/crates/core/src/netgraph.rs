//! Sequential networks with one parameter store shared by every input size.
//!
//! A [`NetworkSpec`] is a chain of layers. [`NetworkInstance`] binds the spec
//! to one input size and a [`SharedParams`] handle; instances built from the
//! same handle read and write the same tensors, so training through a 24x24
//! instance updates the 32x32 one as well.

use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{FeatureGeometry, GeomLayer};
use crate::ops::{
    conv_backward, conv_forward, dropout, dropout_backward, fc_backward, fc_forward, maxpool_backward,
    maxpool_forward, relu_backward, relu_forward, softmax, ArgmaxMap, ConvSpec, PoolSpec,
};
use crate::spp::{bin_range, sliding_pool_params, spp_backward, spp_forward, BinRange, PyramidSpec, SppArgmax};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv(ConvSpec),
    MaxPool(PoolSpec),
    Spp(PyramidSpec),
    Fc { out: usize },
    Relu,
    Dropout { rate: f64 },
    /// Terminal layer; [`NetworkInstance::forward`] returns its input (the logits).
    Softmax,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

impl Layer {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Layer { name: name.into(), kind }
    }

    fn is_spatial(&self) -> bool {
        matches!(self.kind, LayerKind::Conv(_) | LayerKind::MaxPool(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    name: String,
    input_channels: usize,
    layers: Vec<Layer>,
}

/// Shape and name of one learnable tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotSpec {
    pub name: String,
    pub shape: Shape,
    /// Fan-in layer kind: `true` for conv slots.
    pub conv: bool,
}

impl NetworkSpec {
    pub fn new(name: impl Into<String>, input_channels: usize, layers: Vec<Layer>) -> Result<Self> {
        let spec = NetworkSpec {
            name: name.into(),
            input_channels,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::invalid("network needs at least one input channel"));
        }
        let mut seen = std::collections::HashSet::new();
        for l in &self.layers {
            if !seen.insert(l.name.as_str()) {
                return Err(Error::invalid(format!("duplicate layer name `{}`", l.name)));
            }
        }
        let spp: Vec<usize> = self.positions(|k| matches!(k, LayerKind::Spp(_)));
        if spp.len() > 1 {
            return Err(Error::invalid("at most one spatial pyramid pooling layer is allowed"));
        }
        let first_fc = self.positions(|k| matches!(k, LayerKind::Fc { .. })).first().copied();
        let last_spatial = self.layers.iter().rposition(Layer::is_spatial);
        if let Some(fc) = first_fc {
            match spp.first() {
                Some(&s) if s < fc => {}
                _ => return Err(Error::invalid("fc layers must follow the spatial pyramid pooling layer")),
            }
        }
        if let (Some(&s), Some(ls)) = (spp.first(), last_spatial) {
            if ls > s {
                return Err(Error::invalid(format!(
                    "spatial layer `{}` follows the pyramid pooling layer",
                    self.layers[ls].name
                )));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            match &l.kind {
                LayerKind::Softmax if i + 1 != self.layers.len() => {
                    return Err(Error::invalid("softmax must be the last layer"));
                }
                LayerKind::Dropout { rate } if !(0.0..1.0).contains(rate) => {
                    return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
                }
                LayerKind::Conv(c) if c.out_channels == 0 || c.kernel == 0 || c.stride == 0 => {
                    return Err(Error::invalid(format!("conv layer `{}` has a zero dimension", l.name)));
                }
                LayerKind::Fc { out: 0 } => {
                    return Err(Error::invalid(format!("fc layer `{}` has no outputs", l.name)));
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn positions(&self, pred: impl Fn(&LayerKind) -> bool) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| pred(&l.kind))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn spp_index(&self) -> Option<usize> {
        self.layers.iter().position(|l| matches!(l.kind, LayerKind::Spp(_)))
    }

    pub fn pyramid(&self) -> Option<&PyramidSpec> {
        self.layers.iter().find_map(|l| match &l.kind {
            LayerKind::Spp(p) => Some(p),
            _ => None,
        })
    }

    /// Channel count entering the pyramid pooling layer.
    pub fn trunk_channels(&self) -> usize {
        let end = self.spp_index().unwrap_or(self.layers.len());
        self.layers[..end]
            .iter()
            .rev()
            .find_map(|l| match &l.kind {
                LayerKind::Conv(c) => Some(c.out_channels),
                _ => None,
            })
            .unwrap_or(self.input_channels)
    }

    /// Length of the pooled representation (`k * M`).
    pub fn pooled_len(&self) -> Option<usize> {
        self.pyramid().map(|p| p.output_len(self.trunk_channels()))
    }

    pub fn num_outputs(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l.kind {
            LayerKind::Fc { out } => Some(out),
            _ => None,
        })
    }

    /// Learnable slots in layer order.
    pub fn slots(&self) -> Vec<SlotSpec> {
        let mut out = Vec::new();
        let mut channels = self.input_channels;
        let mut flat: Option<usize> = None;
        for l in &self.layers {
            match &l.kind {
                LayerKind::Conv(c) => {
                    out.push(SlotSpec {
                        name: format!("{}.weight", l.name),
                        shape: Shape::new(c.out_channels, channels, c.kernel, c.kernel),
                        conv: true,
                    });
                    out.push(SlotSpec {
                        name: format!("{}.bias", l.name),
                        shape: Shape::new(1, c.out_channels, 1, 1),
                        conv: true,
                    });
                    channels = c.out_channels;
                }
                LayerKind::Spp(p) => flat = Some(p.output_len(channels)),
                LayerKind::Fc { out: n } => {
                    let din = flat.expect("validated: fc follows spp");
                    out.push(SlotSpec {
                        name: format!("{}.weight", l.name),
                        shape: Shape::new(*n, din, 1, 1),
                        conv: false,
                    });
                    out.push(SlotSpec {
                        name: format!("{}.bias", l.name),
                        shape: Shape::new(1, *n, 1, 1),
                        conv: false,
                    });
                    flat = Some(*n);
                }
                _ => {}
            }
        }
        out
    }

    /// Coordinate geometry of the layers before pyramid pooling.
    pub fn geometry(&self) -> Result<FeatureGeometry> {
        let end = self.spp_index().unwrap_or(self.layers.len());
        let layers = self.layers[..end]
            .iter()
            .filter_map(|l| match &l.kind {
                LayerKind::Conv(c) => Some(GeomLayer::new(&l.name, c.kernel, c.stride, c.padding)),
                LayerKind::MaxPool(p) => {
                    if p.window.0 != p.window.1 || p.stride.0 != p.stride.1 || p.padding.0 != p.padding.1 {
                        // non-square pools get reported through the padding rule on the row axis
                        Some(GeomLayer::new(&l.name, p.window.0, p.stride.0, usize::MAX))
                    } else {
                        Some(GeomLayer::new(&l.name, p.window.0, p.stride.0, p.padding.0))
                    }
                }
                _ => None,
            })
            .collect();
        FeatureGeometry::new(layers)
    }

    /// Desk-scale classifier: two 3x3 conv layers, each followed by a 3x3/2 max pool,
    /// a `{4x4, 2x2, 1x1}` pyramid, then `fc6` (64) and the `classes`-way `fc7`.
    pub fn toy(classes: usize) -> Self {
        Self::toy_with_pyramid(classes, PyramidSpec::new(vec![4, 2, 1]).expect("valid"))
    }

    pub fn toy_with_pyramid(classes: usize, pyr: PyramidSpec) -> Self {
        use LayerKind::*;
        let layers = vec![
            Layer::new("conv1", Conv(ConvSpec::same(8, 3, 1))),
            Layer::new("relu1", Relu),
            Layer::new("pool1", MaxPool(PoolSpec::same(3, 2))),
            Layer::new("conv2", Conv(ConvSpec::same(16, 3, 1))),
            Layer::new("relu2", Relu),
            Layer::new("pool2", MaxPool(PoolSpec::same(3, 2))),
            Layer::new("spp", Spp(pyr)),
            Layer::new("fc6", Fc { out: 64 }),
            Layer::new("relu6", Relu),
            Layer::new("drop6", Dropout { rate: 0.3 }),
            Layer::new("fc7", Fc { out: classes }),
            Layer::new("prob", Softmax),
        ];
        NetworkSpec::new("toy", 1, layers).expect("toy spec is valid")
    }

    /// ZF-5 conv stack (96-256-384-384-256 filters) with a `{6,3,2,1}` pyramid and narrow fc layers.
    ///
    /// With `deploy_padding` every layer pads `floor(p/2)` (cumulative stride 16);
    /// otherwise paddings are chosen so a 224x224 input yields a 13x13 conv5 map.
    pub fn zf5_shaped(classes: usize, deploy_padding: bool) -> Self {
        use LayerKind::*;
        let pad = |p: usize, tbl: usize| if deploy_padding { p / 2 } else { tbl };
        let conv = |k, p, s, tbl| Conv(ConvSpec::new(k, p, s, pad(p, tbl)));
        let pool = |tbl| {
            let mut p = PoolSpec::new((3, 3), (2, 2));
            p.padding = (pad(3, tbl), pad(3, tbl));
            MaxPool(p)
        };
        let layers = vec![
            Layer::new("conv1", conv(96, 7, 2, 2)),
            Layer::new("relu1", Relu),
            Layer::new("pool1", pool(0)),
            Layer::new("conv2", conv(256, 5, 2, 2)),
            Layer::new("relu2", Relu),
            Layer::new("pool2", pool(0)),
            Layer::new("conv3", conv(384, 3, 1, 1)),
            Layer::new("relu3", Relu),
            Layer::new("conv4", conv(384, 3, 1, 1)),
            Layer::new("relu4", Relu),
            Layer::new("conv5", conv(256, 3, 1, 1)),
            Layer::new("relu5", Relu),
            Layer::new("spp", Spp(PyramidSpec::standard())),
            Layer::new("fc6", Fc { out: 64 }),
            Layer::new("relu6", Relu),
            Layer::new("fc7", Fc { out: classes }),
            Layer::new("prob", Softmax),
        ];
        NetworkSpec::new("zf5", 3, layers).expect("zf5 spec is valid")
    }

    /// Looks up a built-in spec by name (`toy`, `zf5`).
    pub fn by_name(name: &str, classes: usize, pyramid: Option<PyramidSpec>) -> Result<Self> {
        match name {
            "toy" => Ok(match pyramid {
                Some(p) => Self::toy_with_pyramid(classes, p),
                None => Self::toy(classes),
            }),
            "zf5" => Ok(Self::zf5_shaped(classes, true)),
            other => Err(Error::invalid(format!("unknown network `{other}`"))),
        }
    }
}

/// One learnable tensor with its gradient (inside `value`) and momentum buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Slot<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub momentum: Vec<T>,
    pub conv: bool,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParameterStore<T: Real = f32> {
    slots: Vec<Slot<T>>,
}

impl<T: Real> ParameterStore<T> {
    /// Gaussian weights with standard deviation `std`, zero biases.
    pub fn init(spec: &NetworkSpec, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std.max(0.0)).expect("finite std");
        let slots = spec
            .slots()
            .into_iter()
            .map(|s| {
                let value = if s.name.ends_with(".bias") {
                    Tensor::zeros(s.shape)
                } else {
                    let data = (0..s.shape.numel()).map(|_| T::from_f64(normal.sample(&mut rng))).collect();
                    Tensor::from_vec(s.shape, data).expect("slot shape")
                };
                Slot {
                    momentum: vec![T::zero(); s.shape.numel()],
                    name: s.name,
                    value,
                    conv: s.conv,
                    frozen: false,
                }
            })
            .collect();
        ParameterStore { slots }
    }

    pub fn from_tensors(spec: &NetworkSpec, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let expected = spec.slots();
        if expected.len() != tensors.len() {
            return Err(Error::CheckpointMismatch(format!(
                "network `{}` has {} slots, checkpoint has {}",
                spec.name(),
                expected.len(),
                tensors.len()
            )));
        }
        let mut slots = Vec::with_capacity(expected.len());
        for (want, (name, t)) in expected.into_iter().zip(tensors) {
            if want.name != name || want.shape != t.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "expected slot `{}` {}, found `{}` {}",
                    want.name,
                    want.shape,
                    name,
                    t.shape()
                )));
            }
            slots.push(Slot {
                momentum: vec![T::zero(); t.len()],
                name,
                value: t,
                conv: want.conv,
                frozen: false,
            });
        }
        Ok(ParameterStore { slots })
    }

    pub fn slots(&self) -> &[Slot<T>] {
        &self.slots
    }

    pub fn slots_mut(&mut self) -> &mut [Slot<T>] {
        &mut self.slots
    }

    pub fn get(&self, name: &str) -> Option<&Slot<T>> {
        self.slots.iter().find(|s| s.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Slot<T>> {
        self.slots.iter_mut().find(|s| s.name == name)
    }

    fn value(&self, name: &str) -> &Tensor<T> {
        &self.get(name).expect("slot exists for validated spec").value
    }

    /// Replaces a slot tensor (same name) with a freshly initialised one of a new shape.
    pub fn replace(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self.get_mut(name).ok_or_else(|| Error::UnknownLayer(name.to_string()))?;
        slot.momentum = vec![T::zero(); value.len()];
        slot.value = value;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for s in &mut self.slots {
            s.value.clear_grad();
        }
    }

    pub fn set_frozen(&mut self, pred: impl Fn(&Slot<T>) -> bool) {
        for s in &mut self.slots {
            s.frozen = pred(s);
        }
    }

    pub fn num_params(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    fn accumulate(&mut self, name: &str, grad: &[T]) {
        let slot = self.get_mut(name).expect("slot exists for validated spec");
        for (g, d) in slot.value.grad_mut().iter_mut().zip(grad) {
            *g = *g + *d;
        }
    }
}

pub type SharedParams<T = f32> = Arc<RwLock<ParameterStore<T>>>;

pub fn shared<T: Real>(store: ParameterStore<T>) -> SharedParams<T> {
    Arc::new(RwLock::new(store))
}

pub(crate) fn read<T: Real>(p: &SharedParams<T>) -> RwLockReadGuard<'_, ParameterStore<T>> {
    p.read().unwrap_or_else(|e| e.into_inner())
}

pub(crate) fn write<T: Real>(p: &SharedParams<T>) -> RwLockWriteGuard<'_, ParameterStore<T>> {
    p.write().unwrap_or_else(|e| e.into_inner())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Training; dropout masks derive from `seed`.
    Train { seed: u64 },
}

impl Mode {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

#[derive(Clone, Debug)]
enum Cache<T: Real> {
    Conv(Tensor<T>),
    Pool(ArgmaxMap),
    Spp(SppArgmax),
    Fc(Tensor<T>),
    Relu(Tensor<T>),
    Dropout(Vec<T>),
    None,
}

/// Activations saved by a training-mode forward pass over `layers`.
#[derive(Clone, Debug)]
pub struct Trace<T: Real> {
    layers: std::ops::Range<usize>,
    input_shape: Shape,
    train: bool,
    caches: Vec<Cache<T>>,
}

impl<T: Real> Trace<T> {
    pub fn is_train(&self) -> bool {
        self.train
    }
}

/// Runs `spec.layers[range]` on `input`. Softmax layers are skipped unless `apply_softmax`.
fn run_layers<T: Real>(
    spec: &NetworkSpec,
    params: &ParameterStore<T>,
    range: std::ops::Range<usize>,
    input: &Tensor<T>,
    mode: Mode,
    keep: bool,
    apply_softmax: bool,
) -> Result<(Tensor<T>, Trace<T>)> {
    let mut caches = Vec::with_capacity(if keep { range.len() } else { 0 });
    let mut x = input.clone();
    for idx in range.clone() {
        let layer = &spec.layers[idx];
        let (y, cache) = match &layer.kind {
            LayerKind::Conv(c) => {
                let w = params.value(&format!("{}.weight", layer.name));
                let b = params.value(&format!("{}.bias", layer.name));
                let y = conv_forward(&x, w, b.data(), c)?;
                (y, Cache::Conv(x))
            }
            LayerKind::MaxPool(p) => {
                let (y, am) = maxpool_forward(&x, p)?;
                (y, Cache::Pool(am))
            }
            LayerKind::Spp(p) => {
                let (y, am) = spp_forward(&x, p)?;
                (y, Cache::Spp(am))
            }
            LayerKind::Fc { .. } => {
                let w = params.value(&format!("{}.weight", layer.name));
                let b = params.value(&format!("{}.bias", layer.name));
                let y = fc_forward(&x, w, b.data())?;
                (y, Cache::Fc(x))
            }
            LayerKind::Relu => (relu_forward(&x), Cache::Relu(x)),
            LayerKind::Dropout { rate } => match mode {
                Mode::Train { seed } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    let (y, mask) = dropout(&x, *rate, true, &mut rng)?;
                    (y, Cache::Dropout(mask))
                }
                Mode::Eval => (x, Cache::None),
            },
            LayerKind::Softmax => {
                if apply_softmax {
                    (softmax(&x), Cache::None)
                } else {
                    (x, Cache::None)
                }
            }
        };
        if keep {
            caches.push(cache);
        }
        x = y;
    }
    Ok((
        x,
        Trace {
            layers: range,
            input_shape: input.shape(),
            train: mode.is_train(),
            caches,
        },
    ))
}

/// Back-propagates through the traced layers, accumulating parameter gradients.
/// Returns the gradient with respect to the traced input.
fn backward_layers<T: Real>(
    spec: &NetworkSpec,
    params: &SharedParams<T>,
    trace: &Trace<T>,
    grad: &Tensor<T>,
) -> Result<Tensor<T>> {
    if !trace.train || trace.caches.len() != trace.layers.len() {
        return Err(Error::StaleActivations(
            "backward needs a training-mode forward pass with saved activations".into(),
        ));
    }
    let mut g = grad.clone();
    let mut updates: Vec<(String, Vec<T>)> = Vec::new();
    {
        let store = read(params);
        for (idx, cache) in trace.layers.clone().zip(&trace.caches).rev() {
            let layer = &spec.layers[idx];
            g = match (&layer.kind, cache) {
                (LayerKind::Conv(c), Cache::Conv(input)) => {
                    let wname = format!("{}.weight", layer.name);
                    let grads = conv_backward(&g, Some(input), store.value(&wname), c)?;
                    updates.push((wname, grads.weights.into_data()));
                    updates.push((format!("{}.bias", layer.name), grads.bias));
                    grads.input
                }
                (LayerKind::MaxPool(_), Cache::Pool(am)) => maxpool_backward(&g, am, am.input_shape)?,
                (LayerKind::Spp(_), Cache::Spp(am)) => spp_backward(&g, am, am.input_shape)?,
                (LayerKind::Fc { .. }, Cache::Fc(input)) => {
                    let wname = format!("{}.weight", layer.name);
                    let grads = fc_backward(&g, Some(input), store.value(&wname))?;
                    updates.push((wname, grads.weights.into_data()));
                    updates.push((format!("{}.bias", layer.name), grads.bias));
                    grads.input
                }
                (LayerKind::Relu, Cache::Relu(input)) => relu_backward(&g, input)?,
                (LayerKind::Dropout { .. }, Cache::Dropout(mask)) => dropout_backward(&g, mask)?,
                (LayerKind::Softmax, Cache::None) => g,
                _ => {
                    return Err(Error::StaleActivations(format!(
                        "saved activation for layer `{}` has the wrong kind",
                        layer.name
                    )))
                }
            };
        }
    }
    let mut store = write(params);
    for (name, grad) in updates {
        store.accumulate(&name, &grad);
    }
    Ok(g)
}

/// Precomputed pyramid bins for one feature-map size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SppLevelPlan {
    pub n: usize,
    /// Sliding-window (window, stride) when the map is square and `n <= a`.
    pub sliding: Option<(usize, usize)>,
    pub bins: Vec<BinRange>,
}

/// A spec bound to one input size and a shared parameter store.
#[derive(Clone, Debug)]
pub struct NetworkInstance<T: Real = f32> {
    spec: Arc<NetworkSpec>,
    input_size: (usize, usize),
    shapes: Vec<Shape>,
    spp_plan: Vec<SppLevelPlan>,
    params: SharedParams<T>,
}

/// Per-item output shapes of every layer for an `(h, w)` input.
pub fn layer_shapes(spec: &NetworkSpec, input_size: (usize, usize)) -> Result<Vec<Shape>> {
    let (h, w) = input_size;
    let mut cur = Shape::new(1, spec.input_channels, h, w);
    if h == 0 || w == 0 {
        return Err(Error::DegenerateFeatureMap {
            layer: "input".into(),
            h,
            w,
        });
    }
    let mut out = Vec::with_capacity(spec.layers.len());
    for l in &spec.layers {
        let collapse = || Error::DegenerateFeatureMap {
            layer: l.name.clone(),
            h,
            w,
        };
        cur = match &l.kind {
            LayerKind::Conv(c) => Shape::new(
                1,
                c.out_channels,
                c.output_side(cur.height).ok_or_else(collapse)?,
                c.output_side(cur.width).ok_or_else(collapse)?,
            ),
            LayerKind::MaxPool(p) => {
                let (oh, ow) = p.output_size(cur.height, cur.width).ok_or_else(collapse)?;
                Shape::new(1, cur.channels, oh, ow)
            }
            LayerKind::Spp(p) => Shape::new(1, p.output_len(cur.channels), 1, 1),
            LayerKind::Fc { out } => Shape::new(1, *out, 1, 1),
            _ => cur,
        };
        out.push(cur);
    }
    Ok(out)
}

impl<T: Real> NetworkInstance<T> {
    pub fn new(spec: Arc<NetworkSpec>, input_size: (usize, usize), params: SharedParams<T>) -> Result<Self> {
        let shapes = layer_shapes(&spec, input_size)?;
        let spp_plan = match spec.spp_index() {
            Some(i) => {
                let map = if i == 0 {
                    Shape::new(1, spec.input_channels, input_size.0, input_size.1)
                } else {
                    shapes[i - 1]
                };
                let (h, w) = (map.height, map.width);
                spec.pyramid()
                    .expect("spp index implies pyramid")
                    .levels()
                    .iter()
                    .map(|&n| {
                        let sliding = (h == w).then(|| sliding_pool_params(h, n).ok()).flatten();
                        let mut bins = Vec::with_capacity(n * n);
                        for j in 1..=n {
                            for i in 1..=n {
                                bins.push(bin_range(i, j, n, w, h)?);
                            }
                        }
                        Ok(SppLevelPlan { n, sliding, bins })
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            None => Vec::new(),
        };
        Ok(NetworkInstance {
            spec,
            input_size,
            shapes,
            spp_plan,
            params,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn input_size(&self) -> (usize, usize) {
        self.input_size
    }

    pub fn params(&self) -> &SharedParams<T> {
        &self.params
    }

    /// Whether both instances resolve every slot to the same storage.
    pub fn shares_parameters_with(&self, other: &NetworkInstance<T>) -> bool {
        Arc::ptr_eq(&self.params, &other.params)
    }

    /// Per-item output shape of every layer.
    pub fn layer_shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn shape_of(&self, layer: &str) -> Result<Shape> {
        Ok(self.shapes[self.spec.layer_index(layer)?])
    }

    pub fn spp_plan(&self) -> &[SppLevelPlan] {
        &self.spp_plan
    }

    /// Length of the vector entering the first fc layer.
    pub fn fc_input_len(&self) -> Option<usize> {
        self.spec.spp_index().map(|i| self.shapes[i].item_len())
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<()> {
        let s = batch.shape();
        if s.channels != self.spec.input_channels {
            return Err(Error::shape("forward", "input channels", s.channels, self.spec.input_channels));
        }
        if s.height != self.input_size.0 {
            return Err(Error::shape("forward", "input height", s.height, self.input_size.0));
        }
        if s.width != self.input_size.1 {
            return Err(Error::shape("forward", "input width", s.width, self.input_size.1));
        }
        Ok(())
    }

    /// Logits (the input to the softmax layer) and, in training mode, the saved activations.
    pub fn forward(&self, batch: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Trace<T>)> {
        self.check_input(batch)?;
        let store = read(&self.params);
        run_layers(&self.spec, &store, 0..self.spec.layers.len(), batch, mode, mode.is_train(), false)
    }

    pub fn backward(&self, trace: &Trace<T>, grad_logits: &Tensor<T>) -> Result<()> {
        if trace.layers != (0..self.spec.layers.len()) {
            return Err(Error::StaleActivations("trace covers a different layer range".into()));
        }
        let s = trace.input_shape;
        if (s.height, s.width) != self.input_size {
            return Err(Error::StaleActivations(format!(
                "trace was recorded at {}x{}, instance is {}x{}",
                s.height, s.width, self.input_size.0, self.input_size.1
            )));
        }
        backward_layers(&self.spec, &self.params, trace, grad_logits)?;
        Ok(())
    }

    /// Eval-mode activation at `layer` (probabilities for a softmax layer).
    pub fn feature_at(&self, batch: &Tensor<T>, layer: &str) -> Result<Tensor<T>> {
        self.check_input(batch)?;
        let idx = self.spec.layer_index(layer)?;
        let store = read(&self.params);
        Ok(run_layers(&self.spec, &store, 0..idx + 1, batch, Mode::Eval, false, true)?.0)
    }
}

/// Layers before the pyramid pooling layer, run on an input of any valid size.
pub fn trunk_forward<T: Real>(spec: &NetworkSpec, params: &SharedParams<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    let end = spec
        .spp_index()
        .ok_or_else(|| Error::invalid("network has no pyramid pooling layer"))?;
    let s = input.shape();
    layer_shapes(spec, (s.height, s.width))?;
    let store = read(params);
    Ok(run_layers(spec, &store, 0..end, input, Mode::Eval, false, false)?.0)
}

/// Layers after the pyramid pooling layer applied to pooled vectors `(batch, k*M, 1, 1)`.
/// Returns logits, or probabilities with `apply_softmax`.
pub fn head_forward<T: Real>(
    spec: &NetworkSpec,
    params: &SharedParams<T>,
    pooled: &Tensor<T>,
    apply_softmax: bool,
) -> Result<Tensor<T>> {
    let start = spec
        .spp_index()
        .ok_or_else(|| Error::invalid("network has no pyramid pooling layer"))?
        + 1;
    let store = read(params);
    Ok(run_layers(spec, &store, start..spec.layers.len(), pooled, Mode::Eval, false, apply_softmax)?.0)
}

/// Trainable view of the fc head, fed with fixed-length pooled features.
pub fn head_forward_train<T: Real>(
    spec: &NetworkSpec,
    params: &SharedParams<T>,
    pooled: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Trace<T>)> {
    let start = spec
        .spp_index()
        .ok_or_else(|| Error::invalid("network has no pyramid pooling layer"))?
        + 1;
    let store = read(params);
    run_layers(spec, &store, start..spec.layers.len(), pooled, mode, mode.is_train(), false)
}

pub fn head_backward<T: Real>(spec: &NetworkSpec, params: &SharedParams<T>, trace: &Trace<T>, grad_logits: &Tensor<T>) -> Result<()> {
    let start = spec.spp_index().map(|i| i + 1);
    if start != Some(trace.layers.start) || trace.layers.end != spec.layers.len() {
        return Err(Error::StaleActivations("trace does not cover the fc head".into()));
    }
    backward_layers(spec, params, trace, grad_logits)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_spp21() -> NetworkSpec {
        use LayerKind::*;
        NetworkSpec::new(
            "toy21",
            1,
            vec![
                Layer::new("conv1", Conv(ConvSpec::same(4, 3, 1))),
                Layer::new("relu1", Relu),
                Layer::new("conv2", Conv(ConvSpec::same(6, 3, 2))),
                Layer::new("spp", Spp(PyramidSpec::new(vec![2, 1]).unwrap())),
                Layer::new("fc", Fc { out: 3 }),
                Layer::new("prob", Softmax),
            ],
        )
        .unwrap()
    }

    #[test]
    fn fc_input_length_independent_of_size() {
        let spec = Arc::new(toy_spp21());
        let params = shared(ParameterStore::<f32>::init(&spec, 0.01, 1));
        let a = NetworkInstance::new(spec.clone(), (32, 32), params.clone()).unwrap();
        let b = NetworkInstance::new(spec.clone(), (24, 24), params.clone()).unwrap();
        assert_eq!(a.fc_input_len(), Some(30));
        assert_eq!(a.fc_input_len(), b.fc_input_len());
        assert!(a.shares_parameters_with(&b));
        assert_eq!(a.spp_plan()[0].sliding, Some((8, 8)));
        assert_eq!(b.spp_plan()[0].sliding, Some((6, 6)));
    }

    #[test]
    fn zf5_conv5_map_is_13() {
        let spec = Arc::new(NetworkSpec::zf5_shaped(10, false));
        let params = shared(ParameterStore::<f32>::init(&spec, 0.01, 1));
        let inst = NetworkInstance::new(spec, (224, 224), params).unwrap();
        let s = inst.shape_of("conv5").unwrap();
        assert_eq!((s.height, s.width, s.channels), (13, 13, 256));
        assert_eq!(inst.fc_input_len(), Some(12_800));
        assert!(NetworkSpec::zf5_shaped(10, false).geometry().is_err());
        assert_eq!(NetworkSpec::zf5_shaped(10, true).geometry().unwrap().stride(), 16);
    }

    #[test]
    fn tiny_input_rejected() {
        let spec = Arc::new(NetworkSpec::zf5_shaped(10, false));
        let params = shared(ParameterStore::<f32>::init(&spec, 0.01, 1));
        let err = NetworkInstance::new(spec, (4, 4), params).unwrap_err();
        assert!(matches!(err, Error::DegenerateFeatureMap { .. }), "{err}");
    }

    #[test]
    fn spec_validation() {
        use LayerKind::*;
        let two_spp = NetworkSpec::new(
            "x",
            1,
            vec![
                Layer::new("s1", Spp(PyramidSpec::standard())),
                Layer::new("s2", Spp(PyramidSpec::standard())),
            ],
        );
        assert!(two_spp.is_err());
        let conv_after = NetworkSpec::new(
            "x",
            1,
            vec![
                Layer::new("s", Spp(PyramidSpec::standard())),
                Layer::new("c", Conv(ConvSpec::same(2, 3, 1))),
            ],
        );
        assert!(conv_after.is_err());
        let fc_first = NetworkSpec::new("x", 1, vec![Layer::new("f", Fc { out: 2 })]);
        assert!(fc_first.is_err());
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let spec = Arc::new(NetworkSpec::toy(5));
        let params = shared(ParameterStore::<f32>::init(&spec, 0.0, 1));
        for size in [(24, 24), (33, 29)] {
            let inst = NetworkInstance::new(spec.clone(), size, params.clone()).unwrap();
            let x = Tensor::full(Shape::new(2, 1, size.0, size.1), 17.0);
            let p = inst.feature_at(&x, "prob").unwrap();
            assert!(p.data().iter().all(|&v| (v - 0.2).abs() < 1e-7));
        }
    }

    #[test]
    fn feature_at_layers() {
        let spec = Arc::new(NetworkSpec::toy(5));
        let params = shared(ParameterStore::<f32>::init(&spec, 0.05, 3));
        let inst = NetworkInstance::new(spec.clone(), (32, 32), params).unwrap();
        let x = Tensor::from_vec(Shape::new(1, 1, 32, 32), (0..1024).map(|v| ((v * 31) % 255) as f32 - 128.0).collect()).unwrap();
        assert_eq!(inst.feature_at(&x, "conv2").unwrap().shape().channels, 16);
        assert_eq!(inst.feature_at(&x, "spp").unwrap().len(), 16 * 21);
        assert_eq!(inst.feature_at(&x, "drop6").unwrap(), inst.feature_at(&x, "relu6").unwrap());
        assert!(matches!(inst.feature_at(&x, "nope"), Err(Error::UnknownLayer(_))));
    }

    #[test]
    fn backward_requires_training_trace() {
        let spec = Arc::new(NetworkSpec::toy(5));
        let params = shared(ParameterStore::<f32>::init(&spec, 0.05, 3));
        let inst = NetworkInstance::new(spec.clone(), (24, 24), params.clone()).unwrap();
        let x = Tensor::full(Shape::new(1, 1, 24, 24), 1.0);
        let (logits, trace) = inst.forward(&x, Mode::Eval).unwrap();
        assert!(matches!(inst.backward(&trace, &logits), Err(Error::StaleActivations(_))));
        let (logits, trace) = inst.forward(&x, Mode::Train { seed: 1 }).unwrap();
        let other = NetworkInstance::new(spec, (32, 32), params).unwrap();
        assert!(other.backward(&trace, &logits).is_err());
        inst.backward(&trace, &logits).unwrap();
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = Arc::new(NetworkSpec::toy(5));
        let x = Tensor::from_vec(Shape::new(3, 1, 28, 30), (0..2520).map(|v| ((v * 17) % 200) as f32 - 100.0).collect()).unwrap();
        let run = || {
            let params = shared(ParameterStore::<f32>::init(&spec, 0.05, 9));
            let inst = NetworkInstance::new(spec.clone(), (28, 30), params).unwrap();
            inst.forward(&x, Mode::Train { seed: 4 }).unwrap().0
        };
        assert_eq!(run(), run());
    }
}
