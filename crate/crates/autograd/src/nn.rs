//! Parameters, stores and the small set of layers the codec networks share.

use crate::conv::conv2d;
use crate::tensor::{fresh_leaf_id, Arr, ArrRc, LeafId, Tensor};
use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

/// A named trainable array. Cheap to clone; all clones share storage.
#[derive(Clone)]
pub struct Param {
    inner: Rc<ParamInner>,
}

struct ParamInner {
    name: String,
    leaf: LeafId,
    value: RefCell<ArrRc>,
    trainable: Cell<bool>,
}

impl Param {
    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn leaf_id(&self) -> LeafId {
        self.inner.leaf
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.value.borrow().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.inner.value.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn trainable(&self) -> bool {
        self.inner.trainable.get()
    }

    pub fn set_trainable(&self, t: bool) {
        self.inner.trainable.set(t);
    }

    pub fn value(&self) -> ArrRc {
        Rc::clone(&self.inner.value.borrow())
    }

    pub fn set_value(&self, v: Arr) {
        *self.inner.value.borrow_mut() = Rc::new(v);
    }

    /// Leaf tensor for use in a forward pass. Gradients are tracked only
    /// while the parameter is trainable.
    pub fn tensor(&self) -> Tensor {
        Tensor::leaf_from(self.value(), self.inner.leaf, self.inner.trainable.get())
    }

    /// Leaf tensor that always tracks gradients regardless of the freeze mask.
    pub fn tensor_tracked(&self) -> Tensor {
        Tensor::leaf_from(self.value(), self.inner.leaf, true)
    }
}

/// Registry of every parameter in a model, keyed by unique name.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Arr) -> Param {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name: {name}"
        );
        let p = Param {
            inner: Rc::new(ParamInner {
                name: name.to_string(),
                leaf: fresh_leaf_id(),
                value: RefCell::new(Rc::new(value)),
                trainable: Cell::new(true),
            }),
        };
        self.by_name.insert(name.to_string(), self.params.len());
        self.params.push(p.clone());
        p
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    /// All parameters in registration order.
    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn trainable_params(&self) -> Vec<Param> {
        self.params.iter().filter(|p| p.trainable()).cloned().collect()
    }

    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Set the freeze mask: only parameters whose name matches `pred` train.
    pub fn set_trainable_where(&self, pred: impl Fn(&str) -> bool) {
        for p in &self.params {
            p.set_trainable(pred(p.name()));
        }
    }

    pub fn set_all_trainable(&self) {
        for p in &self.params {
            p.set_trainable(true);
        }
    }
}

// ----- initialization ------------------------------------------------------

pub fn he_normal(rng: &mut ChaCha12Rng, shape: &[usize], fan_in: usize) -> Arr {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    Arr::from_shape_fn(IxDyn(shape), |_| normal.sample(rng))
}

pub fn uniform_init(rng: &mut ChaCha12Rng, shape: &[usize], bound: f64) -> Arr {
    Arr::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-bound..bound))
}

// ----- layers --------------------------------------------------------------

/// Low-rank additive update attached to a convolution.
///
/// The effective kernel becomes `W + scale * up x down` where `down` has
/// `rank` filters with the base kernel's spatial size and `up` is 1x1.
/// `up` starts at zero so attaching the pair does not change the output.
#[derive(Clone)]
pub struct LoraPair {
    pub down: Param,
    pub up: Param,
    pub rank: usize,
    pub scale: f64,
}

/// 2-D convolution layer with optional bias and optional LoRA pair.
#[derive(Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub pad: usize,
    lora: RefCell<Option<LoraPair>>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let weight = store.register(&format!("{name}.weight"), he_normal(rng, &[out_ch, in_ch, k, k], fan_in));
        let bias = Some(store.register(&format!("{name}.bias"), Arr::zeros(IxDyn(&[out_ch]))));
        Conv2d { weight, bias, stride, pad, lora: RefCell::new(None) }
    }

    /// Same-padding 3x3 convenience constructor.
    pub fn k3(store: &mut ParamStore, rng: &mut ChaCha12Rng, name: &str, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        Conv2d::new(store, rng, name, in_ch, out_ch, 3, stride, 1)
    }

    pub fn k1(store: &mut ParamStore, rng: &mut ChaCha12Rng, name: &str, in_ch: usize, out_ch: usize) -> Self {
        Conv2d::new(store, rng, name, in_ch, out_ch, 1, 1, 0)
    }

    /// Zero-initialized convolution (weights and bias exactly zero).
    pub fn zeroed(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize) -> Self {
        let weight = store.register(&format!("{name}.weight"), Arr::zeros(IxDyn(&[out_ch, in_ch, k, k])));
        let bias = Some(store.register(&format!("{name}.bias"), Arr::zeros(IxDyn(&[out_ch]))));
        Conv2d { weight, bias, stride, pad, lora: RefCell::new(None) }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let bias = self.bias.as_ref().map(|b| b.tensor());
        let base = conv2d(x, &self.weight.tensor(), bias.as_ref(), self.stride, self.pad);
        let lora = self.lora.borrow();
        match lora.as_ref() {
            None => base,
            Some(pair) => {
                let mid = conv2d(x, &pair.down.tensor(), None, self.stride, self.pad);
                let delta = conv2d(&mid, &pair.up.tensor(), None, 1, 0);
                base.add(&delta.scale(pair.scale))
            }
        }
    }

    /// Attach a LoRA pair. `down` gets a small random init, `up` is zero so
    /// the wrapped layer is output-identical until training moves `up`.
    pub fn attach_lora(&self, store: &mut ParamStore, rng: &mut ChaCha12Rng, rank: usize, alpha: f64) {
        assert!(rank >= 1, "lora rank must be >= 1");
        let (out_ch, in_ch, k) = (self.out_channels(), self.in_channels(), self.kernel());
        let name = self.weight.name().trim_end_matches(".weight").to_string();
        let fan_in = in_ch * k * k;
        let down = store.register(
            &format!("{name}.lora_down"),
            he_normal(rng, &[rank, in_ch, k, k], fan_in),
        );
        let up = store.register(&format!("{name}.lora_up"), Arr::zeros(IxDyn(&[out_ch, rank, 1, 1])));
        *self.lora.borrow_mut() = Some(LoraPair { down, up, rank, scale: alpha / rank as f64 });
    }

    pub fn has_lora(&self) -> bool {
        self.lora.borrow().is_some()
    }

    pub fn lora_rank(&self) -> Option<usize> {
        self.lora.borrow().as_ref().map(|p| p.rank)
    }

    /// Merged low-rank kernel update, `[Co, Ci, k, k]`, for audits.
    pub fn merged_lora_delta(&self) -> Option<Arr> {
        let lora = self.lora.borrow();
        let pair = lora.as_ref()?;
        let down = pair.down.value();
        let up = pair.up.value();
        let (rank, in_ch, k) = (down.shape()[0], down.shape()[1], down.shape()[2]);
        let out_ch = up.shape()[0];
        let mut delta = Arr::zeros(IxDyn(&[out_ch, in_ch, k, k]));
        for co in 0..out_ch {
            for r in 0..rank {
                let uv = up[[co, r, 0, 0]];
                if uv == 0.0 {
                    continue;
                }
                for ci in 0..in_ch {
                    for ky in 0..k {
                        for kx in 0..k {
                            delta[[co, ci, ky, kx]] += pair.scale * uv * down[[r, ci, ky, kx]];
                        }
                    }
                }
            }
        }
        Some(delta)
    }
}

/// Group normalization with learned per-channel scale and shift.
#[derive(Clone)]
pub struct GroupNorm {
    pub gamma: Param,
    pub beta: Param,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        assert!(channels % groups == 0, "GroupNorm: {channels} channels not divisible by {groups} groups");
        let gamma = store.register(&format!("{name}.gamma"), Arr::from_elem(IxDyn(&[channels]), 1.0));
        let beta = store.register(&format!("{name}.beta"), Arr::zeros(IxDyn(&[channels])));
        GroupNorm { gamma, beta, groups, eps: 1e-5 }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 4, "GroupNorm input must be NCHW");
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let g = self.groups;
        let grouped = x.reshape(&[n, g, c / g * h * w]);
        let m = grouped.sum_axis_keep(2).scale(1.0 / (c / g * h * w) as f64);
        let centered = grouped.sub(&m.broadcast_to(&[n, g, c / g * h * w]));
        let var = centered.square().sum_axis_keep(2).scale(1.0 / (c / g * h * w) as f64);
        let inv_std = var.add_scalar(self.eps).sqrt();
        let normed = centered.div(&inv_std.broadcast_to(&[n, g, c / g * h * w]));
        let back = normed.reshape(&[n, c, h, w]);
        let gamma = self.gamma.tensor().reshape(&[1, c, 1, 1]).broadcast_to(&[n, c, h, w]);
        let beta = self.beta.tensor().reshape(&[1, c, 1, 1]).broadcast_to(&[n, c, h, w]);
        back.mul(&gamma).add(&beta)
    }
}
