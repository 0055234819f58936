//! U-net built from 4x4/stride-2 convolutions, with skip concatenations
//! between mirrored encoder and decoder stages.
//!
//! For a patch side `N = 2^d` the encoder has `d` stages, each halving the
//! spatial size until the 1x1 hidden representation `h`:
//!
//! ```text
//! stage 1        conv -> LeakyReLU            (no BN, outermost)
//! stage 2..d-1   conv -> BN -> LeakyReLU
//! stage d        conv                          (-> h, no BN)
//! ```
//!
//! The decoder has `d` stages, each doubling the spatial size:
//!
//! ```text
//! stage 1        ReLU(h) -> tconv -> BN [-> dropout]
//! stage j        ReLU(concat(dec_{j-1}, enc_{d-j+1})) -> tconv -> BN [-> dropout]
//! stage d        ReLU(concat(dec_{d-1}, enc_1)) -> tconv   (1 channel, linear)
//! ```
//!
//! Dropout is active on decoder stages whose output side is below N/16.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{
    batchnorm_backward, batchnorm_infer, batchnorm_train, conv2d, conv2d_backward, dropout, dropout_backward,
    leaky_relu, leaky_relu_backward, relu, relu_backward, tconv2d, tconv2d_backward, BnCache, Mode,
};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Architecture and fixed hyper-parameters of a U-net.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnetSpec {
    /// Input patch side, a power of two.
    pub n: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub leaky_slope: f64,
    pub dropout_rate: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub init_std: f64,
}

impl UnetSpec {
    /// Full-width network for patches of side `n` (16 to 256, power of two).
    pub fn new(n: usize) -> Result<Self> {
        if !n.is_power_of_two() || !(16..=256).contains(&n) {
            return Err(Error::Param(format!(
                "patch side must be a power of two in [16, 256], got {n}"
            )));
        }
        Ok(UnetSpec {
            n,
            base_channels: 64,
            max_channels: 512,
            leaky_slope: 0.2,
            dropout_rate: 0.5,
            bn_eps: 1e-5,
            bn_momentum: 0.99,
            init_std: 0.02,
        })
    }

    /// Same topology with a narrower channel ladder.
    pub fn with_width(mut self, base: usize, max: usize) -> Self {
        self.base_channels = base.max(1);
        self.max_channels = max.max(1);
        self
    }

    pub fn depth(&self) -> usize {
        self.n.trailing_zeros() as usize
    }

    /// Output channels of encoder stage `i` (1-based): doubling from the
    /// base width, capped.
    pub fn enc_channels(&self, i: usize) -> usize {
        (self.base_channels << (i - 1).min(20)).min(self.max_channels)
    }

    pub fn enc_in_channels(&self, i: usize) -> usize {
        if i == 1 {
            1
        } else {
            self.enc_channels(i - 1)
        }
    }

    pub fn enc_has_bn(&self, i: usize) -> bool {
        i != 1 && i != self.depth()
    }

    /// Output channels of decoder stage `j` (1-based).
    pub fn dec_channels(&self, j: usize) -> usize {
        let d = self.depth();
        if j == d {
            1
        } else {
            self.enc_channels(d - j)
        }
    }

    pub fn dec_in_channels(&self, j: usize) -> usize {
        let d = self.depth();
        if j == 1 {
            self.enc_channels(d)
        } else {
            self.dec_channels(j - 1) + self.enc_channels(d - j + 1)
        }
    }

    pub fn dec_has_bn(&self, j: usize) -> bool {
        j != self.depth()
    }

    pub fn dec_has_dropout(&self, j: usize) -> bool {
        (1usize << j) * 16 < self.n
    }

    /// Shape of `h` for one patch: (channels, 1, 1).
    pub fn hidden_shape(&self) -> (usize, usize, usize) {
        (self.enc_channels(self.depth()), 1, 1)
    }
}

/// A named parameter or running-statistic tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    /// Running statistics are stored here too but are not optimised.
    pub trainable: bool,
}

impl<T: Real> Param<T> {
    fn new(name: String, shape: Vec<usize>, value: Vec<T>, trainable: bool) -> Self {
        let len = value.len();
        debug_assert_eq!(len, shape.iter().product::<usize>());
        Param {
            name,
            shape,
            value,
            grad: if trainable { vec![T::zero(); len] } else { Vec::new() },
            trainable,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct BnIdx {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone, Copy)]
struct StageIdx {
    weight: usize,
    bias: usize,
    bn: Option<BnIdx>,
}

#[derive(Debug, Clone)]
struct EncCache<T> {
    input: Tensor<T>,
    bn: Option<BnCache<T>>,
    output: Tensor<T>,
}

#[derive(Debug, Clone)]
struct DecCache<T> {
    pre_relu: Tensor<T>,
    post_relu: Tensor<T>,
    bn: Option<BnCache<T>>,
    dropout: Option<Vec<T>>,
}

#[derive(Debug, Clone)]
struct Cache<T> {
    enc: Vec<EncCache<T>>,
    dec: Vec<DecCache<T>>,
}

/// Output of a forward pass.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    /// Reconstructed patches, same shape as the input.
    pub y: Tensor<T>,
    /// Hidden representation (innermost encoder activation).
    pub h: Tensor<T>,
}

/// U-net parameters plus the cache of the last training-mode pass.
#[derive(Debug, Clone)]
pub struct Unet<T> {
    spec: UnetSpec,
    init_seed: u64,
    params: Vec<Param<T>>,
    enc: Vec<StageIdx>,
    dec: Vec<StageIdx>,
    cache: Option<Cache<T>>,
}

impl<T: Real> Unet<T> {
    /// Builds and initialises a network: kernels ~ N(0, init_std), biases
    /// 0, BN scale 1 / shift 0, running mean 0 / variance 1.
    pub fn new(spec: UnetSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, spec.init_std).expect("init std is finite");
        let mut params: Vec<Param<T>> = Vec::new();
        let push = |params: &mut Vec<Param<T>>, name: String, shape: Vec<usize>, value: Vec<T>, trainable| {
            params.push(Param::new(name, shape, value, trainable));
            params.len() - 1
        };
        let kernel = |rng: &mut ChaCha8Rng, len: usize| -> Vec<T> {
            (0..len).map(|_| T::from_f64_lossy(normal.sample(rng))).collect()
        };
        let add_bn = |params: &mut Vec<Param<T>>, prefix: &str, ch: usize| BnIdx {
            gamma: push(params, format!("{prefix}.bn.gamma"), vec![ch], vec![T::one(); ch], true),
            beta: push(params, format!("{prefix}.bn.beta"), vec![ch], vec![T::zero(); ch], true),
            mean: push(params, format!("{prefix}.bn.running_mean"), vec![ch], vec![T::zero(); ch], false),
            var: push(params, format!("{prefix}.bn.running_var"), vec![ch], vec![T::one(); ch], false),
        };

        let d = spec.depth();
        let mut enc = Vec::with_capacity(d);
        for i in 1..=d {
            let (cin, cout) = (spec.enc_in_channels(i), spec.enc_channels(i));
            let prefix = format!("enc{i}");
            let shape = vec![cout, cin, 4, 4];
            let len = cout * cin * 16;
            let weight = push(&mut params, format!("{prefix}.conv.weight"), shape, kernel(&mut rng, len), true);
            let bias = push(&mut params, format!("{prefix}.conv.bias"), vec![cout], vec![T::zero(); cout], true);
            let bn = spec.enc_has_bn(i).then(|| add_bn(&mut params, &prefix, cout));
            enc.push(StageIdx { weight, bias, bn });
        }
        let mut dec = Vec::with_capacity(d);
        for j in 1..=d {
            let (cin, cout) = (spec.dec_in_channels(j), spec.dec_channels(j));
            let prefix = format!("dec{j}");
            let shape = vec![cin, cout, 4, 4];
            let len = cout * cin * 16;
            let weight = push(&mut params, format!("{prefix}.tconv.weight"), shape, kernel(&mut rng, len), true);
            let bias = push(&mut params, format!("{prefix}.tconv.bias"), vec![cout], vec![T::zero(); cout], true);
            let bn = spec.dec_has_bn(j).then(|| add_bn(&mut params, &prefix, cout));
            dec.push(StageIdx { weight, bias, bn });
        }
        Unet {
            spec,
            init_seed: seed,
            params,
            enc,
            dec,
            cache: None,
        }
    }

    /// Rebuilds a network from a spec and a full tensor table (as read from
    /// a checkpoint). Tensor names and shapes must match `spec`.
    pub fn from_tensors(spec: UnetSpec, init_seed: u64, tensors: Vec<(String, Vec<usize>, Vec<T>)>) -> Result<Self> {
        let mut model = Unet::<T>::new_uninit(spec, init_seed);
        if tensors.len() != model.params.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                tensors.len()
            )));
        }
        for (p, (name, shape, value)) in model.params.iter_mut().zip(tensors) {
            if p.name != name || p.shape != shape || value.len() != p.value.len() {
                return Err(Error::Shape(format!(
                    "tensor {name} {shape:?} does not match expected {} {:?}",
                    p.name, p.shape
                )));
            }
            p.value = value;
        }
        Ok(model)
    }

    /// Same layout as `new` without drawing random kernels.
    fn new_uninit(spec: UnetSpec, seed: u64) -> Self {
        let zero_std = UnetSpec {
            init_std: 0.0,
            ..spec.clone()
        };
        let mut m = Unet::new(zero_std, seed);
        m.spec = spec;
        m
    }

    pub fn spec(&self) -> &UnetSpec {
        &self.spec
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Copies parameter values (and running statistics) from `other`.
    pub fn load_values_from(&mut self, other: &Unet<T>) {
        for (p, q) in self.params.iter_mut().zip(&other.params) {
            p.value.clone_from(&q.value);
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let n = self.spec.n;
        if x.channels() != 1 || x.height() != n || x.width() != n || x.batch() == 0 {
            return Err(Error::Shape(format!(
                "network expects (B, 1, {n}, {n}) input, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    fn value(&self, i: usize) -> &[T] {
        &self.params[i].value
    }

    fn slope(&self) -> T {
        T::from_f64_lossy(self.spec.leaky_slope)
    }

    fn eps(&self) -> T {
        T::from_f64_lossy(self.spec.bn_eps)
    }

    /// Shared forward pass. In training mode it returns the reverse-pass
    /// cache and the batch statistics for the running averages.
    #[allow(clippy::type_complexity)]
    fn run(&self, x: &Tensor<T>, mode: Mode, seed: u64) -> Result<(Forward<T>, Option<Cache<T>>, Vec<(BnIdx, Vec<T>, Vec<T>)>)> {
        self.check_input(x)?;
        let spec = &self.spec;
        let d = spec.depth();
        let train = mode == Mode::Train;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stats = Vec::new();
        let mut enc_cache = Vec::with_capacity(d);
        let mut skips: Vec<Tensor<T>> = Vec::with_capacity(d);

        let bn_apply = |z: Tensor<T>, idx: BnIdx, stats: &mut Vec<_>| -> (Tensor<T>, Option<BnCache<T>>) {
            if train {
                let (y, cache, s) = batchnorm_train(&z, self.value(idx.gamma), self.value(idx.beta), self.eps());
                stats.push((idx, s.mean, s.var));
                (y, Some(cache))
            } else {
                let y = batchnorm_infer(
                    &z,
                    self.value(idx.gamma),
                    self.value(idx.beta),
                    self.value(idx.mean),
                    self.value(idx.var),
                    self.eps(),
                );
                (y, None)
            }
        };

        let mut cur = x.clone();
        for (i, st) in self.enc.iter().enumerate() {
            let stage = i + 1;
            let mut z = conv2d(&cur, self.value(st.weight), self.value(st.bias), spec.enc_channels(stage))?;
            let mut bn_cache = None;
            if let Some(idx) = st.bn {
                let (y, c) = bn_apply(z, idx, &mut stats);
                z = y;
                bn_cache = c;
            }
            let out = if stage < d { leaky_relu(&z, self.slope()) } else { z };
            if train {
                enc_cache.push(EncCache {
                    input: std::mem::replace(&mut cur, out.clone()),
                    bn: bn_cache,
                    output: out.clone(),
                });
            } else {
                cur = out.clone();
            }
            skips.push(out);
        }
        let h = cur;

        let mut dec_cache = Vec::with_capacity(d);
        let mut cur = h.clone();
        for (j0, st) in self.dec.iter().enumerate() {
            let stage = j0 + 1;
            let pre = if stage == 1 {
                cur
            } else {
                cur.concat_channels(&skips[d - stage])?
            };
            let post = relu(&pre);
            let mut z = tconv2d(&post, self.value(st.weight), self.value(st.bias), spec.dec_channels(stage))?;
            let mut bn_cache = None;
            if let Some(idx) = st.bn {
                let (y, c) = bn_apply(z, idx, &mut stats);
                z = y;
                bn_cache = c;
            }
            let mut mask = None;
            if spec.dec_has_dropout(stage) {
                let (y, m) = dropout(&z, spec.dropout_rate, mode, &mut rng);
                z = y;
                mask = m;
            }
            if train {
                dec_cache.push(DecCache {
                    pre_relu: pre,
                    post_relu: post,
                    bn: bn_cache,
                    dropout: mask,
                });
            }
            cur = z;
        }
        let cache = train.then_some(Cache {
            enc: enc_cache,
            dec: dec_cache,
        });
        Ok((Forward { y: cur, h }, cache, stats))
    }

    /// Inference-mode pass: running BN statistics, no dropout. Pure.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Forward<T>> {
        Ok(self.run(x, Mode::Infer, 0)?.0)
    }

    /// Forward pass in the given mode. Training mode updates the BN running
    /// statistics and keeps the cache needed by [`Unet::backward`]; `seed`
    /// drives the dropout masks.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode, seed: u64) -> Result<Forward<T>> {
        let (out, cache, stats) = self.run(x, mode, seed)?;
        if mode == Mode::Train {
            let m = T::from_f64_lossy(self.spec.bn_momentum);
            let one_m = T::one() - m;
            for (idx, mean, var) in stats {
                for (r, b) in self.params[idx.mean].value.iter_mut().zip(&mean) {
                    *r = m * *r + one_m * *b;
                }
                for (r, b) in self.params[idx.var].value.iter_mut().zip(&var) {
                    *r = m * *r + one_m * *b;
                }
            }
            self.cache = cache;
        }
        Ok(out)
    }

    /// Signs of every rectifier input recorded by the last training-mode
    /// pass (`true` = positive). Finite-difference checks compare patterns
    /// to reject probes that cross a kink.
    pub fn rectifier_pattern(&self) -> Option<Vec<bool>> {
        let cache = self.cache.as_ref()?;
        let d = self.spec.depth();
        let mut out = Vec::new();
        for c in &cache.enc[..d - 1] {
            out.extend(c.output.data().iter().map(|&v| v > T::zero()));
        }
        for c in &cache.dec {
            out.extend(c.pre_relu.data().iter().map(|&v| v > T::zero()));
        }
        Some(out)
    }

    /// Back-propagates `dy` (gradient of the loss w.r.t. the output of the
    /// last training-mode forward pass), accumulating into `Param::grad`.
    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<()> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Config("backward called without a training-mode forward pass".into()))?;
        let spec = self.spec.clone();
        let d = spec.depth();
        let slope = self.slope();
        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; d];

        let mut g = dy.clone();
        for j0 in (0..d).rev() {
            let stage = j0 + 1;
            let st = self.dec[j0];
            let c = &cache.dec[j0];
            g = dropout_backward(&g, c.dropout.as_deref());
            if let (Some(idx), Some(bc)) = (st.bn, c.bn.as_ref()) {
                g = self.bn_backward(&g, bc, idx);
            }
            g = self.conv_like_backward(&c.post_relu, &g, st, true);
            g = relu_backward(&g, &c.pre_relu);
            if stage > 1 {
                let (gd, gs) = g.split_channels(spec.dec_channels(stage - 1));
                skip_grads[d - stage] = Some(gs);
                g = gd;
            }
        }

        // g is now the gradient w.r.t. h, the last encoder output.
        for i0 in (0..d).rev() {
            let stage = i0 + 1;
            let st = self.enc[i0];
            let c = &cache.enc[i0];
            if let Some(s) = skip_grads[i0].take() {
                g.data_mut().iter_mut().zip(s.data()).for_each(|(a, &b)| *a += b);
            }
            if stage < d {
                g = leaky_relu_backward(&g, &c.output, slope);
            }
            if let (Some(idx), Some(bc)) = (st.bn, c.bn.as_ref()) {
                g = self.bn_backward(&g, bc, idx);
            }
            g = self.conv_like_backward(&c.input, &g, st, false);
        }
        Ok(())
    }

    fn bn_backward(&mut self, g: &Tensor<T>, cache: &BnCache<T>, idx: BnIdx) -> Tensor<T> {
        let gamma = std::mem::take(&mut self.params[idx.gamma].value);
        let mut dgamma = std::mem::take(&mut self.params[idx.gamma].grad);
        let mut dbeta = std::mem::take(&mut self.params[idx.beta].grad);
        let out = batchnorm_backward(g, cache, &gamma, &mut dgamma, &mut dbeta);
        self.params[idx.gamma].value = gamma;
        self.params[idx.gamma].grad = dgamma;
        self.params[idx.beta].grad = dbeta;
        out
    }

    fn conv_like_backward(&mut self, input: &Tensor<T>, g: &Tensor<T>, st: StageIdx, transposed: bool) -> Tensor<T> {
        let weight = std::mem::take(&mut self.params[st.weight].value);
        let mut dw = std::mem::take(&mut self.params[st.weight].grad);
        let mut db = std::mem::take(&mut self.params[st.bias].grad);
        let out = if transposed {
            tconv2d_backward(input, &weight, g, &mut dw, &mut db)
        } else {
            conv2d_backward(input, &weight, g, &mut dw, &mut db)
        };
        self.params[st.weight].value = weight;
        self.params[st.weight].grad = dw;
        self.params[st.bias].grad = db;
        out
    }

    /// Converts every tensor to another element type.
    pub fn cast<U: Real>(&self) -> Unet<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.to_f64().unwrap())).collect::<Vec<U>>();
        Unet {
            spec: self.spec.clone(),
            init_seed: self.init_seed,
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    value: conv(&p.value),
                    grad: conv(&p.grad),
                    trainable: p.trainable,
                })
                .collect(),
            enc: self.enc.clone(),
            dec: self.dec.clone(),
            cache: None,
        }
    }
}

/// Builds a full-width U-net for `n x n` patches.
pub fn build_unet(n: usize, seed: u64) -> Result<Unet<f32>> {
    Ok(Unet::new(UnetSpec::new(n)?, seed))
}

/// Trainable parameter count of a spec, from shapes alone.
pub fn count_parameters(spec: &UnetSpec) -> usize {
    let d = spec.depth();
    let bn = |has: bool, ch: usize| if has { 2 * ch } else { 0 };
    let enc: usize = (1..=d)
        .map(|i| {
            let (ci, co) = (spec.enc_in_channels(i), spec.enc_channels(i));
            ci * co * 16 + co + bn(spec.enc_has_bn(i), co)
        })
        .sum();
    let dec: usize = (1..=d)
        .map(|j| {
            let (ci, co) = (spec.dec_in_channels(j), spec.dec_channels(j));
            ci * co * 16 + co + bn(spec.dec_has_bn(j), co)
        })
        .sum();
    enc + dec
}
