//! Model construction, forward/backward over a layer stack, checkpoints.
//!
//! The forward and backward passes are free functions over `&[LayerState]`
//! rather than methods, so the partitioned-training host and worker can run
//! the exact same code over a slice of the stack. [`Model`] wraps the full
//! stack with initialization, freeze bookkeeping, and serialization.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::arch::{self, LayerSpec};
use crate::error::{Error, Result};
use crate::ops::{
    conv2d, conv2d_backward, conv_out_dim, dropout, dropout_backward, fully_connected,
    fully_connected_backward, maxpool2d, maxpool2d_backward, pool_out_dim, relu, relu_backward,
    DropoutMode, PoolOut, KERNEL,
};
use crate::rng::{derive_rng, STREAM_DROPOUT, STREAM_INIT};
use crate::tensor::{ParamTensor, Tensor};

pub const CONV_STRIDE: usize = 1;
pub const CONV_PAD: usize = 1;
pub const POOL_SIZE: usize = 2;
pub const POOL_STRIDE: usize = 2;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LSCP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Weight and bias of one parameterized layer. The freeze flag is kept on
/// both tensors and always toggled together.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub weights: ParamTensor,
    pub bias: ParamTensor,
}

impl LayerParams {
    fn new(weights: Tensor, bias: Tensor) -> Self {
        LayerParams {
            weights: ParamTensor::new(weights),
            bias: ParamTensor::new(bias),
        }
    }

    pub fn numel(&self) -> usize {
        self.weights.value.numel() + self.bias.value.numel()
    }

    pub fn frozen(&self) -> bool {
        self.weights.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.weights.frozen = frozen;
        self.bias.frozen = frozen;
    }
}

/// One compiled layer: its spec, per-example input/output shapes, and
/// parameters if it has any. Fully connected layers see their input
/// flattened, so their `in_shape` has a single dimension.
#[derive(Debug, Clone)]
pub struct LayerState {
    pub spec: LayerSpec,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    pub params: Option<LayerParams>,
}

impl LayerState {
    pub fn in_numel(&self) -> usize {
        self.in_shape.iter().product()
    }

    pub fn out_numel(&self) -> usize {
        self.out_shape.iter().product()
    }
}

/// Position of a batch within a training run. Dropout masks are drawn from
/// a stream keyed on (root seed, epoch, batch, absolute layer index), so a
/// layer draws the same mask no matter which process runs it or how the
/// stack is partitioned.
#[derive(Debug, Clone, Copy, Default)]
pub struct BatchCtx {
    pub root_seed: u64,
    pub epoch: u64,
    pub batch: u64,
}

impl BatchCtx {
    /// Placeholder for evaluation passes, which never draw randomness.
    pub const EVAL: BatchCtx = BatchCtx {
        root_seed: 0,
        epoch: 0,
        batch: 0,
    };
}

/// Per-layer state recorded by a training forward pass, consumed by backward.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Conv { input: Tensor, pre: Tensor },
    Pool { argmax: Vec<usize>, in_shape: Vec<usize> },
    Linear { input: Tensor, pre: Tensor, relu: bool },
    Dropout { mask: Vec<f64>, rate: f64 },
}

fn full_shape(n: usize, per_sample: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(per_sample.len() + 1);
    s.push(n);
    s.extend_from_slice(per_sample);
    s
}

/// Run `layers` forward on a batch. `base_idx` is the absolute index of
/// `layers[0]` in the full model, which keys dropout streams. With `record`
/// set, returns one [`LayerCache`] per layer for the backward pass.
pub fn forward_layers(
    layers: &[LayerState],
    base_idx: usize,
    input: &Tensor,
    mode: DropoutMode,
    ctx: &BatchCtx,
    record: bool,
) -> Result<(Tensor, Vec<LayerCache>)> {
    let first = match layers.first() {
        Some(l) => l,
        None => return Ok((input.clone(), Vec::new())),
    };
    if input.shape().is_empty() {
        return Err(Error::Shape("forward input must have a batch dimension".into()));
    }
    let n = input.dim(0);
    if input.numel() != n * first.in_numel() {
        return Err(Error::Shape(format!(
            "forward input shape {:?} does not match layer input {:?}",
            input.shape(),
            first.in_shape
        )));
    }

    let mut x = input.clone();
    let mut caches = Vec::with_capacity(if record { layers.len() } else { 0 });
    for (i, layer) in layers.iter().enumerate() {
        x = x.into_reshaped(&full_shape(n, &layer.in_shape))?;
        match layer.spec {
            LayerSpec::Conv { .. } => {
                let p = layer.params.as_ref().expect("conv layer has params");
                let pre = conv2d(&x, &p.weights.value, &p.bias.value, CONV_STRIDE, CONV_PAD)?;
                let out = relu(&pre);
                if record {
                    caches.push(LayerCache::Conv { input: x, pre });
                }
                x = out;
            }
            LayerSpec::MaxPool => {
                let PoolOut { output, argmax } = maxpool2d(&x, POOL_SIZE, POOL_STRIDE)?;
                if record {
                    caches.push(LayerCache::Pool {
                        argmax,
                        in_shape: x.shape().to_vec(),
                    });
                }
                x = output;
            }
            LayerSpec::FullyConnected { .. } | LayerSpec::SoftmaxHead { .. } => {
                let relu_after = matches!(layer.spec, LayerSpec::FullyConnected { .. });
                let p = layer.params.as_ref().expect("linear layer has params");
                let pre = fully_connected(&x, &p.weights.value, &p.bias.value)?;
                let out = if relu_after { relu(&pre) } else { pre.clone() };
                if record {
                    caches.push(LayerCache::Linear {
                        input: x,
                        pre,
                        relu: relu_after,
                    });
                }
                x = out;
            }
            LayerSpec::Dropout { rate } => {
                let mut rng = derive_rng(
                    ctx.root_seed,
                    &[STREAM_DROPOUT, ctx.epoch, ctx.batch, (base_idx + i) as u64],
                );
                let d = dropout(&x, rate, mode, &mut rng)?;
                if record {
                    caches.push(LayerCache::Dropout { mask: d.mask, rate });
                }
                x = d.output;
            }
        }
    }
    Ok((x, caches))
}

/// Backpropagate `grad_out` (gradient of the stack output) through `layers`,
/// writing gradients into every unfrozen layer's parameter buffers. Frozen
/// layers keep their (zero) gradients. The walk stops below the lowest
/// unfrozen layer unless `want_input_grad` asks for the gradient at the
/// stack input, as the partition host does to continue backward on its side.
pub fn backward_layers(
    layers: &mut [LayerState],
    caches: &[LayerCache],
    grad_out: &Tensor,
    want_input_grad: bool,
) -> Result<Option<Tensor>> {
    if caches.len() != layers.len() {
        return Err(Error::InvalidArg(format!(
            "backward needs one cache per layer ({} caches for {} layers)",
            caches.len(),
            layers.len()
        )));
    }
    let lowest = layers
        .iter()
        .position(|l| l.params.as_ref().is_some_and(|p| !p.frozen()));
    let floor = match (lowest, want_input_grad) {
        (_, true) => 0,
        (Some(i), false) => i,
        (None, false) => return Ok(None),
    };
    if layers.is_empty() {
        return Ok(Some(grad_out.clone()));
    }

    let n = grad_out.dim(0);
    let mut g = grad_out.clone();
    for idx in (floor..layers.len()).rev() {
        let layer = &mut layers[idx];
        let trainable = layer.params.as_ref().is_some_and(|p| !p.frozen());
        let need_below = idx > floor || (idx == 0 && want_input_grad);
        g = g.into_reshaped(&full_shape(n, &layer.out_shape))?;
        match (&layer.spec, &caches[idx]) {
            (LayerSpec::Conv { .. }, LayerCache::Conv { input, pre }) => {
                let g_pre = relu_backward(pre, &g);
                let p = layer.params.as_mut().expect("conv layer has params");
                let grads =
                    conv2d_backward(input, &p.weights.value, &g_pre, CONV_STRIDE, CONV_PAD, need_below)?;
                if trainable {
                    p.weights.grad = grads.kernels;
                    p.bias.grad = grads.bias;
                }
                if need_below {
                    g = grads.input.expect("input grad was requested");
                }
            }
            (LayerSpec::MaxPool, LayerCache::Pool { argmax, in_shape }) => {
                if need_below {
                    g = maxpool2d_backward(in_shape, argmax, &g);
                }
            }
            (
                LayerSpec::FullyConnected { .. } | LayerSpec::SoftmaxHead { .. },
                LayerCache::Linear { input, pre, relu },
            ) => {
                let g_pre = if *relu { relu_backward(pre, &g) } else { g.clone() };
                let p = layer.params.as_mut().expect("linear layer has params");
                let grads = fully_connected_backward(input, &p.weights.value, &g_pre, need_below)?;
                if trainable {
                    p.weights.grad = grads.weights;
                    p.bias.grad = grads.bias;
                }
                if need_below {
                    g = grads.input.expect("input grad was requested");
                }
            }
            (LayerSpec::Dropout { rate }, LayerCache::Dropout { mask, .. }) => {
                if need_below {
                    g = dropout_backward(mask, *rate, &g);
                }
            }
            _ => {
                return Err(Error::InvalidArg(
                    "forward trace does not match the layer stack".into(),
                ));
            }
        }
    }
    Ok(if want_input_grad { Some(g) } else { None })
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal parameters");
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(shape, data).expect("data sized to shape")
}

/// Per-example (input, output) shape of every layer in a spec list. This is
/// the shape-compilation half of model building; the partition worker uses
/// it to size its suffix without allocating any prefix parameters.
pub fn layer_shapes(
    specs: &[LayerSpec],
    input_shape: [usize; 3],
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if input_shape.contains(&0) {
        return Err(Error::ModelBuild(format!(
            "input shape {input_shape:?} has a zero dimension"
        )));
    }
    let mut cur: Vec<usize> = input_shape.to_vec();
    let mut shapes = Vec::with_capacity(specs.len());
    for (idx, spec) in specs.iter().enumerate() {
        let (in_shape, out_shape) = match *spec {
            LayerSpec::Conv { filters } => {
                if cur.len() != 3 {
                    return Err(Error::ModelBuild(format!(
                        "layer {idx}: conv needs [C,H,W] input, got {cur:?}"
                    )));
                }
                let ho = conv_out_dim(cur[1], CONV_STRIDE, CONV_PAD)?;
                let wo = conv_out_dim(cur[2], CONV_STRIDE, CONV_PAD)?;
                (cur.clone(), vec![filters, ho, wo])
            }
            LayerSpec::MaxPool => {
                if cur.len() != 3 {
                    return Err(Error::ModelBuild(format!(
                        "layer {idx}: maxpool needs [C,H,W] input, got {cur:?}"
                    )));
                }
                let ho = pool_out_dim(cur[1], POOL_SIZE, POOL_STRIDE)?;
                let wo = pool_out_dim(cur[2], POOL_SIZE, POOL_STRIDE)?;
                (cur.clone(), vec![cur[0], ho, wo])
            }
            LayerSpec::FullyConnected { units } | LayerSpec::SoftmaxHead { classes: units } => {
                (vec![cur.iter().product()], vec![units])
            }
            LayerSpec::Dropout { .. } => (cur.clone(), cur.clone()),
        };
        cur = out_shape.clone();
        shapes.push((in_shape, out_shape));
    }
    Ok(shapes)
}

/// A complete network: parsed architecture, compiled layer stack, and the
/// seed its weights were drawn from.
#[derive(Debug, Clone)]
pub struct Model {
    arch: Vec<LayerSpec>,
    input_shape: [usize; 3],
    init_seed: u64,
    layers: Vec<LayerState>,
}

impl Model {
    /// Build and He-initialize a model from an architecture string.
    /// Each layer draws from its own init stream, so two models with the
    /// same seed agree bit-for-bit regardless of construction order.
    pub fn new(arch_str: &str, input_shape: [usize; 3], seed: u64) -> Result<Model> {
        Model::from_specs(arch::parse_arch(arch_str)?, input_shape, seed)
    }

    pub fn from_specs(specs: Vec<LayerSpec>, input_shape: [usize; 3], seed: u64) -> Result<Model> {
        let shapes = layer_shapes(&specs, input_shape)?;
        let mut layers = Vec::with_capacity(specs.len());
        for (idx, (spec, (in_shape, out_shape))) in specs.iter().zip(shapes).enumerate() {
            let params = match *spec {
                LayerSpec::Conv { filters } => {
                    let c = in_shape[0];
                    let mut rng = derive_rng(seed, &[STREAM_INIT, idx as u64]);
                    let weights =
                        he_normal(&[filters, c, KERNEL, KERNEL], c * KERNEL * KERNEL, &mut rng);
                    Some(LayerParams::new(weights, Tensor::zeros(&[filters])))
                }
                LayerSpec::FullyConnected { units } | LayerSpec::SoftmaxHead { classes: units } => {
                    let d = in_shape[0];
                    let mut rng = derive_rng(seed, &[STREAM_INIT, idx as u64]);
                    let weights = he_normal(&[d, units], d, &mut rng);
                    Some(LayerParams::new(weights, Tensor::zeros(&[units])))
                }
                LayerSpec::MaxPool | LayerSpec::Dropout { .. } => None,
            };
            layers.push(LayerState {
                spec: *spec,
                in_shape,
                out_shape,
                params,
            });
        }
        Ok(Model {
            arch: specs,
            input_shape,
            init_seed: seed,
            layers,
        })
    }

    pub fn arch(&self) -> &[LayerSpec] {
        &self.arch
    }

    pub fn arch_string(&self) -> String {
        arch::arch_to_string(&self.arch)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn layers(&self) -> &[LayerState] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerState] {
        &mut self.layers
    }

    pub fn num_classes(&self) -> usize {
        match self.arch.last() {
            Some(LayerSpec::SoftmaxHead { classes }) => *classes,
            _ => unreachable!("parser guarantees a softmax head"),
        }
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.params.as_ref())
            .map(|p| p.numel())
            .sum()
    }

    /// Absolute indices of the layers the exposure analysis targets
    /// (conv and fully connected, head excluded), in depth order.
    pub fn measurable_indices(&self) -> Vec<usize> {
        self.arch
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_measurable())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn forward_train(&self, input: &Tensor, ctx: &BatchCtx) -> Result<(Tensor, Vec<LayerCache>)> {
        forward_layers(&self.layers, 0, input, DropoutMode::Train, ctx, true)
    }

    /// Logits only; dropout is the identity and nothing is recorded.
    pub fn forward_eval(&self, input: &Tensor) -> Result<Tensor> {
        forward_layers(
            &self.layers,
            0,
            input,
            DropoutMode::Eval,
            &BatchCtx::EVAL,
            false,
        )
        .map(|(logits, _)| logits)
    }

    pub fn backward(&mut self, caches: &[LayerCache], grad_logits: &Tensor) -> Result<()> {
        backward_layers(&mut self.layers, caches, grad_logits, false).map(|_| ())
    }

    /// All parameter tensors in a stable order: layer by layer, weights
    /// before bias. The optimizer and checkpoints both rely on this order.
    pub fn params(&self) -> Vec<&ParamTensor> {
        self.layers
            .iter()
            .filter_map(|l| l.params.as_ref())
            .flat_map(|p| [&p.weights, &p.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        self.layers
            .iter_mut()
            .filter_map(|l| l.params.as_mut())
            .flat_map(|p| [&mut p.weights, &mut p.bias])
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn freeze_all(&mut self) {
        self.set_all_frozen(true);
    }

    pub fn unfreeze_all(&mut self) {
        self.set_all_frozen(false);
    }

    fn set_all_frozen(&mut self, frozen: bool) {
        for l in &mut self.layers {
            if let Some(p) = l.params.as_mut() {
                p.set_frozen(frozen);
            }
        }
    }

    /// Freeze or unfreeze the layer at an absolute index.
    pub fn set_layer_trainable(&mut self, idx: usize, trainable: bool) -> Result<()> {
        match self.layers.get_mut(idx).and_then(|l| l.params.as_mut()) {
            Some(p) => {
                p.set_frozen(!trainable);
                Ok(())
            }
            None => Err(Error::InvalidArg(format!(
                "layer {idx} has no trainable parameters"
            ))),
        }
    }

    /// Freeze everything except the `mi`-th measurable layer, as the
    /// layer-wise fine-tuning passes require.
    pub fn train_only_measurable(&mut self, mi: usize) -> Result<()> {
        let targets = self.measurable_indices();
        let idx = *targets.get(mi).ok_or_else(|| {
            Error::InvalidArg(format!(
                "measurable layer {mi} out of range (model has {})",
                targets.len()
            ))
        })?;
        self.freeze_all();
        self.set_layer_trainable(idx, true)
    }

    /// Absolute index of the lowest layer with unfrozen parameters.
    pub fn lowest_trainable(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| l.params.as_ref().is_some_and(|p| !p.frozen()))
    }

    /// Clone out all parameter values in stable order.
    pub fn export_params(&self) -> Vec<Tensor> {
        self.params().iter().map(|p| p.value.clone()).collect()
    }

    /// Replace all parameter values; shapes must match in order.
    pub fn import_params(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        let slots = self.params_mut();
        if tensors.len() != slots.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.value.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter shape mismatch: model has {:?}, checkpoint has {:?}",
                    slot.value.shape(),
                    t.shape()
                )));
            }
            slot.value = t;
        }
        Ok(())
    }

    /// Write the model to the bit-exact binary checkpoint format.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.init_seed.to_le_bytes())?;
        for d in self.input_shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let arch_str = self.arch_string();
        w.write_all(&(arch_str.len() as u32).to_le_bytes())?;
        w.write_all(arch_str.as_bytes())?;
        let values: Vec<&Tensor> = self.params().iter().map(|p| &p.value).collect();
        write_param_blob(&mut w, &values)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Model> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                path: path.display().to_string(),
                expected: u32::from_be_bytes(CHECKPOINT_MAGIC),
                found: u32::from_be_bytes(magic),
            });
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let seed = read_u64(&mut r)?;
        let mut input_shape = [0usize; 3];
        for d in &mut input_shape {
            *d = read_u64(&mut r)? as usize;
        }
        let arch_len = read_u32(&mut r)? as usize;
        let mut arch_bytes = vec![0u8; arch_len];
        r.read_exact(&mut arch_bytes)?;
        let arch_str = String::from_utf8(arch_bytes)
            .map_err(|_| Error::Checkpoint("architecture string is not UTF-8".into()))?;
        let mut model = Model::new(&arch_str, input_shape, seed)?;
        model.import_params(read_param_blob(&mut r)?)?;
        Ok(model)
    }
}

/// Write a bare list of tensors: count, then per tensor the shape and the
/// little-endian `f64` payload. Also used to ship parameters to and from
/// the partition worker.
pub fn write_param_blob<W: Write>(w: &mut W, tensors: &[&Tensor]) -> Result<()> {
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_param_blob<R: Read>(r: &mut R) -> Result<Vec<Tensor>> {
    let count = read_u32(r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let ndim = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        tensors.push(Tensor::from_vec(&shape, data)?);
    }
    Ok(tensors)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
