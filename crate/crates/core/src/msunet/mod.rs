//! Multi-scale supervised 3D U-Net.
//!
//! Encoder levels downsample with stride-2 convolutions, decoder levels
//! upsample with 2x2x2 transposed convolutions and concatenate the encoder
//! features of the same resolution. Every conv is followed by instance
//! normalization and a leaky ReLU. A 1x1x1 segmentation head sits on each of
//! the first `supervised_levels` decoder outputs, full resolution first.
//!
//! All learnable tensors live in one flat buffer so the optimizer and the
//! checkpoint code can treat them uniformly.

mod checkpoint;
mod layers;
mod tensor;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, TrainingSnapshot, CHECKPOINT_VERSION};
pub use tensor::{Features, Real};

use layers::{
    conv3_backward, conv3_forward, norm_act_backward, norm_act_forward, pointwise_backward,
    pointwise_forward, up_backward, up_forward, NormCache,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    /// Resolution levels including the bottleneck.
    pub levels: usize,
    /// Feature count at full resolution; level `l` has `base_features * 2^l`.
    pub base_features: usize,
    pub convs_per_level: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Number of decoder heads, full resolution first.
    pub supervised_levels: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            levels: 5,
            base_features: 30,
            convs_per_level: 2,
            in_channels: 1,
            num_classes: 3,
            supervised_levels: 4,
        }
    }
}

impl NetworkSpec {
    /// The small preset used for desk-scale runs.
    pub fn toy() -> Self {
        NetworkSpec {
            levels: 4,
            base_features: 8,
            supervised_levels: 3,
            ..Self::default()
        }
    }

    pub fn features(&self, level: usize) -> usize {
        self.base_features << level
    }

    /// Input dims must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.levels < 2 {
            v.push(format!("network.levels must be >= 2, got {}", self.levels));
        }
        if self.levels > 12 {
            v.push(format!("network.levels must be <= 12, got {}", self.levels));
        }
        if self.supervised_levels == 0 || self.supervised_levels + 1 > self.levels.max(1) {
            v.push(format!(
                "network.supervised_levels must be in 1..={}, got {}",
                self.levels.saturating_sub(1),
                self.supervised_levels
            ));
        }
        for (name, val) in [
            ("base_features", self.base_features),
            ("convs_per_level", self.convs_per_level),
            ("in_channels", self.in_channels),
            ("num_classes", self.num_classes),
        ] {
            if val == 0 {
                v.push(format!("network.{name} must be >= 1"));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().first() {
            None => Ok(()),
            Some(msg) => Err(Error::InvalidSpec(msg.clone())),
        }
    }

    pub fn check_input(&self, dims: [usize; 3]) -> Result<()> {
        let d = self.divisor();
        if dims.iter().any(|&n| n == 0 || n % d != 0) {
            return Err(Error::Divisibility {
                dims: dims.to_vec(),
                divisor: d,
            });
        }
        Ok(())
    }

    /// Head output dims for an input of `dims`, full resolution first.
    pub fn head_dims(&self, dims: [usize; 3]) -> Vec<[usize; 3]> {
        (0..self.supervised_levels).map(|l| dims.map(|n| n >> l)).collect()
    }
}

/// Name and shape of one learnable tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone)]
struct ConvBlock {
    cout: usize,
    stride: usize,
    weight: Range<usize>,
    gamma: Range<usize>,
    beta: Range<usize>,
}

#[derive(Debug, Clone)]
struct UpLayer {
    cout: usize,
    weight: Range<usize>,
}

#[derive(Debug, Clone)]
struct Head {
    weight: Range<usize>,
    bias: Range<usize>,
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: Vec<Vec<ConvBlock>>,
    /// `decoder[l]` produces level-`l` features, for `l < levels - 1`.
    up: Vec<UpLayer>,
    decoder: Vec<Vec<ConvBlock>>,
    heads: Vec<Head>,
    params: Vec<ParamInfo>,
    offsets: Vec<usize>,
    total: usize,
}

impl Layout {
    fn new(spec: &NetworkSpec) -> Self {
        let mut b = LayoutBuilder::default();
        let mut encoder = Vec::new();
        for l in 0..spec.levels {
            let cout = spec.features(l);
            let mut blocks = Vec::new();
            for i in 0..spec.convs_per_level {
                let (cin, stride) = match (l, i) {
                    (0, 0) => (spec.in_channels, 1),
                    (_, 0) => (spec.features(l - 1), 2),
                    _ => (cout, 1),
                };
                blocks.push(b.block(&format!("encoder.{l}.{i}"), cin, cout, stride));
            }
            encoder.push(blocks);
        }
        let mut up = Vec::new();
        let mut decoder = Vec::new();
        for l in 0..spec.levels - 1 {
            let f = spec.features(l);
            let cin = spec.features(l + 1);
            up.push(UpLayer {
                cout: f,
                weight: b.param(&format!("up.{l}.weight"), vec![cin, f, 2, 2, 2]),
            });
            let blocks = (0..spec.convs_per_level)
                .map(|i| {
                    let cin = if i == 0 { 2 * f } else { f };
                    b.block(&format!("decoder.{l}.{i}"), cin, f, 1)
                })
                .collect();
            decoder.push(blocks);
        }
        let heads = (0..spec.supervised_levels)
            .map(|l| Head {
                weight: b.param(&format!("head.{l}.weight"), vec![spec.num_classes, spec.features(l)]),
                bias: b.param(&format!("head.{l}.bias"), vec![spec.num_classes]),
            })
            .collect();
        Layout {
            encoder,
            up,
            decoder,
            heads,
            params: b.params,
            offsets: b.offsets,
            total: b.total,
        }
    }
}

#[derive(Default)]
struct LayoutBuilder {
    params: Vec<ParamInfo>,
    offsets: Vec<usize>,
    total: usize,
}

impl LayoutBuilder {
    fn param(&mut self, name: &str, shape: Vec<usize>) -> Range<usize> {
        let len: usize = shape.iter().product();
        let range = self.total..self.total + len;
        self.offsets.push(self.total);
        self.params.push(ParamInfo {
            name: name.to_string(),
            shape,
        });
        self.total += len;
        range
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> ConvBlock {
        ConvBlock {
            cout,
            stride,
            weight: self.param(&format!("{name}.conv.weight"), vec![cout, cin, 3, 3, 3]),
            gamma: self.param(&format!("{name}.norm.weight"), vec![cout]),
            beta: self.param(&format!("{name}.norm.bias"), vec![cout]),
        }
    }
}

/// Per-sample activations kept for the backward pass.
pub struct ForwardCache<T> {
    encoder: Vec<Vec<BlockCache<T>>>,
    skip_channels: Vec<usize>,
    ups: Vec<Features<T>>,
    decoder: Vec<Vec<BlockCache<T>>>,
    head_inputs: Vec<Features<T>>,
}

struct BlockCache<T> {
    input: Features<T>,
    norm: NormCache<T>,
}

/// The network: its spec, parameter layout and flat parameter buffer.
#[derive(Debug, Clone)]
pub struct MsUNet<T: Real = f32> {
    spec: NetworkSpec,
    layout: Layout,
    params: Vec<T>,
}

impl<T: Real> MsUNet<T> {
    /// Builds a network with seeded He-normal initialization.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::new(spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![T::zero(); layout.total];
        for (info, &off) in layout.params.iter().zip(&layout.offsets) {
            let len: usize = info.shape.iter().product();
            let slot = &mut params[off..off + len];
            let std = if info.name.ends_with("conv.weight") {
                (2.0 / (info.shape[1] * 27) as f64).sqrt()
            } else if info.name.starts_with("up.") {
                (2.0 / info.shape[0] as f64).sqrt()
            } else if info.name.starts_with("head.") && info.name.ends_with(".weight") {
                (1.0 / info.shape[1] as f64).sqrt()
            } else if info.name.ends_with("norm.weight") {
                slot.fill(T::one());
                continue;
            } else {
                continue;
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in slot.iter_mut() {
                *v = T::cst(normal.sample(&mut rng));
            }
        }
        Ok(MsUNet {
            spec: spec.clone(),
            layout,
            params,
        })
    }

    /// Rebuilds a network from a spec and previously saved parameters.
    pub fn from_params(spec: &NetworkSpec, params: Vec<T>) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::new(spec);
        if params.len() != layout.total {
            return Err(Error::ShapeMismatch {
                what: "parameter count",
                expected: vec![layout.total],
                found: vec![params.len()],
            });
        }
        Ok(MsUNet {
            spec: spec.clone(),
            layout,
            params,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn param_infos(&self) -> &[ParamInfo] {
        &self.layout.params
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Flat-buffer range of the named tensor.
    pub fn param_range(&self, name: &str) -> Option<Range<usize>> {
        let i = self.layout.params.iter().position(|p| p.name == name)?;
        let len: usize = self.layout.params[i].shape.iter().product();
        let off = self.layout.offsets[i];
        Some(off..off + len)
    }

    pub fn cast<U: Real>(&self) -> MsUNet<U> {
        MsUNet {
            spec: self.spec.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|v| U::cst(v.to_f64().unwrap_or(0.0))).collect(),
        }
    }

    fn p(&self, r: &Range<usize>) -> &[T] {
        &self.params[r.clone()]
    }

    fn check(&self, input: &Features<T>) -> Result<()> {
        if input.channels != self.spec.in_channels {
            return Err(Error::ShapeMismatch {
                what: "input channels",
                expected: vec![self.spec.in_channels],
                found: vec![input.channels],
            });
        }
        self.spec.check_input(input.dims)
    }

    /// Logits of every head for one sample, full resolution first.
    pub fn forward(&self, input: &Features<T>) -> Result<Vec<Features<T>>> {
        self.check(input)?;
        Ok(self.run(input.clone(), false, self.spec.supervised_levels).0)
    }

    /// Logits of the full-resolution head only; skips the deeper heads.
    pub fn forward_full_res(&self, input: &Features<T>) -> Result<Features<T>> {
        self.check(input)?;
        let mut heads = self.run(input.clone(), false, 1).0;
        Ok(heads.swap_remove(0))
    }

    /// Forward pass that keeps what [`MsUNet::backward`] needs.
    pub fn forward_train(&self, input: &Features<T>) -> Result<(Vec<Features<T>>, ForwardCache<T>)> {
        self.check(input)?;
        let (heads, cache) = self.run(input.clone(), true, self.spec.supervised_levels);
        Ok((heads, cache.expect("cache requested")))
    }

    pub fn forward_batch(&self, inputs: &[Features<T>]) -> Result<Vec<Vec<Features<T>>>> {
        inputs.iter().map(|x| self.forward(x)).collect()
    }

    fn block_forward(&self, b: &ConvBlock, x: Features<T>, train: bool) -> (Features<T>, Option<BlockCache<T>>) {
        let y = conv3_forward(&x, self.p(&b.weight), b.cout, b.stride);
        let (out, norm) = norm_act_forward(y, self.p(&b.gamma), self.p(&b.beta), train);
        let cache = norm.map(|norm| BlockCache { input: x, norm });
        (out, cache)
    }

    fn run(&self, input: Features<T>, train: bool, n_heads: usize) -> (Vec<Features<T>>, Option<ForwardCache<T>>) {
        let levels = self.spec.levels;
        let mut enc_cache = Vec::new();
        let mut skips = Vec::with_capacity(levels);
        let mut x = input;
        for blocks in &self.layout.encoder {
            let mut caches = Vec::new();
            for b in blocks {
                let (out, c) = self.block_forward(b, x, train);
                caches.extend(c);
                x = out;
            }
            enc_cache.push(caches);
            skips.push(x.clone());
        }
        drop(x);
        let skip_channels = skips.iter().map(|s| s.channels).collect();

        let mut heads = vec![None; n_heads];
        let mut ups = vec![None; levels - 1];
        let mut dec_cache: Vec<Vec<BlockCache<T>>> = (0..levels - 1).map(|_| Vec::new()).collect();
        let mut head_inputs = vec![None; n_heads];
        let mut d = skips.pop().expect("bottleneck");
        for l in (0..levels - 1).rev() {
            let up = &self.layout.up[l];
            let u = up_forward(&d, self.p(&up.weight), up.cout);
            if train {
                ups[l] = Some(d);
            }
            let skip = skips.pop().expect("skip");
            let mut h = Features::concat(&u, &skip);
            drop((u, skip));
            for b in &self.layout.decoder[l] {
                let (out, c) = self.block_forward(b, h, train);
                dec_cache[l].extend(c);
                h = out;
            }
            if l < n_heads {
                let head = &self.layout.heads[l];
                heads[l] = Some(pointwise_forward(&h, self.p(&head.weight), self.p(&head.bias)));
                if train {
                    head_inputs[l] = Some(h.clone());
                }
            }
            d = h;
        }
        let heads = heads.into_iter().map(|h| h.expect("head computed")).collect();
        let cache = train.then(|| ForwardCache {
            encoder: enc_cache,
            skip_channels,
            ups: ups.into_iter().map(|u| u.expect("cached")).collect(),
            decoder: dec_cache,
            head_inputs: head_inputs.into_iter().map(|h| h.expect("cached")).collect(),
        });
        (heads, cache)
    }

    fn block_backward(&self, b: &ConvBlock, cache: &BlockCache<T>, dout: Features<T>, grads: &mut [T], want_dinput: bool) -> Option<Features<T>> {
        let (dg, db) = two_ranges(grads, &b.gamma, &b.beta);
        let dy = norm_act_backward(&cache.norm, self.p(&b.gamma), self.p(&b.beta), dout, dg, db);
        conv3_backward(&cache.input, self.p(&b.weight), b.stride, &dy, &mut grads[b.weight.clone()], want_dinput)
    }

    /// Accumulates parameter gradients for one sample into `grads`.
    ///
    /// `dlogits[l]` is the loss gradient with respect to head `l`'s logits.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &[Features<T>], grads: &mut [T]) {
        assert_eq!(grads.len(), self.params.len());
        assert_eq!(dlogits.len(), self.layout.heads.len());
        let levels = self.spec.levels;
        let mut dskips: Vec<Option<Features<T>>> = (0..levels).map(|_| None).collect();
        // Gradient flowing into decoder output of level l from the level above it.
        let mut dd: Option<Features<T>> = None;
        for l in 0..levels - 1 {
            let mut g = dd.take();
            if l < dlogits.len() {
                let head = &self.layout.heads[l];
                let (dw, dbias) = two_ranges(grads, &head.weight, &head.bias);
                let dh = pointwise_backward(&cache.head_inputs[l], self.p(&head.weight), &dlogits[l], dw, dbias);
                g = Some(match g {
                    Some(mut acc) => {
                        acc.add_assign(&dh);
                        acc
                    }
                    None => dh,
                });
            }
            // Head 0 always exists, so every decoder level receives gradient.
            let mut g = g.expect("decoder gradient");
            for (b, bc) in self.layout.decoder[l].iter().zip(&cache.decoder[l]).rev() {
                g = self.block_backward(b, bc, g, grads, true).expect("input grad");
            }
            let f = self.spec.features(l);
            let (du, dskip) = g.split(f);
            dskips[l] = Some(dskip);
            let up = &self.layout.up[l];
            dd = Some(up_backward(&cache.ups[l], self.p(&up.weight), &du, &mut grads[up.weight.clone()]));
        }
        // dd now holds the gradient of the bottleneck output.
        dskips[levels - 1] = dd;
        let mut carry: Option<Features<T>> = None;
        for l in (0..levels).rev() {
            let g = match (dskips[l].take(), carry.take()) {
                (Some(mut a), Some(b)) => {
                    a.add_assign(&b);
                    a
                }
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => unreachable!("level {l} of {} channels has no gradient", cache.skip_channels[l]),
            };
            let blocks = &self.layout.encoder[l];
            let mut g = Some(g);
            for (i, (b, bc)) in blocks.iter().zip(&cache.encoder[l]).enumerate().rev() {
                // The network input needs no gradient.
                let want = !(l == 0 && i == 0);
                g = self.block_backward(b, bc, g.take().expect("gradient"), grads, want);
            }
            carry = g;
        }
    }
}

fn two_ranges<'a, T>(buf: &'a mut [T], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [T], &'a mut [T]) {
    assert!(a.end <= b.start, "ranges must be ordered and disjoint");
    let (left, right) = buf.split_at_mut(b.start);
    (&mut left[a.clone()], &mut right[..b.end - b.start])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tiny() -> NetworkSpec {
        NetworkSpec {
            levels: 3,
            base_features: 2,
            convs_per_level: 2,
            in_channels: 1,
            num_classes: 3,
            supervised_levels: 2,
        }
    }

    fn input<T: Real>(seed: u64, dims: [usize; 3]) -> Features<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = dims.iter().product();
        Features::from_vec(1, dims, (0..n).map(|_| T::cst(rng.random_range(-1.0..1.0))).collect())
    }

    #[test]
    fn minimal_spec_builds_and_runs() {
        let spec = NetworkSpec {
            levels: 2,
            base_features: 1,
            num_classes: 1,
            supervised_levels: 1,
            ..NetworkSpec::default()
        };
        let net = MsUNet::<f32>::build(&spec, 0).unwrap();
        let out = net.forward(&input(1, [4, 4, 4])).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].channels, out[0].dims), (1, [4, 4, 4]));
    }

    #[test]
    fn default_spec_has_four_heads() {
        let net = MsUNet::<f32>::build(&NetworkSpec::default(), 0).unwrap();
        let heads = net.param_infos().iter().filter(|p| p.name.starts_with("head.") && p.name.ends_with(".weight"));
        assert_eq!(heads.count(), 4);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for spec in [
            NetworkSpec { levels: 1, ..NetworkSpec::default() },
            NetworkSpec { supervised_levels: 5, ..NetworkSpec::default() },
            NetworkSpec { base_features: 0, ..NetworkSpec::default() },
        ] {
            assert!(MsUNet::<f32>::build(&spec, 0).is_err());
        }
        let net = MsUNet::<f32>::build(&NetworkSpec::toy(), 0).unwrap();
        assert!(matches!(net.forward(&input(0, [20, 24, 24])), Err(Error::Divisibility { divisor: 8, .. })));
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = MsUNet::<f32>::build(&tiny(), 42).unwrap();
        let b = MsUNet::<f32>::build(&tiny(), 42).unwrap();
        let c = MsUNet::<f32>::build(&tiny(), 43).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        assert_eq!(a.num_params(), c.num_params());
    }

    #[test]
    fn zero_heads_give_uniform_softmax() {
        let mut net = MsUNet::<f64>::build(&tiny(), 1).unwrap();
        for name in ["head.0.weight", "head.0.bias"] {
            let r = net.param_range(name).unwrap();
            net.params_mut()[r].fill(0.0);
        }
        let out = net.forward(&input(2, [8, 8, 8])).unwrap();
        assert!(out[0].data.iter().all(|&v| v == 0.0));
        let p = crate::loss::softmax(&out[0].data);
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    /// Loss = Σ r·logits for fixed random r; compare parameter gradients to
    /// central differences in f64.
    #[test]
    fn backward_matches_finite_differences() {
        let spec = tiny();
        let mut net = MsUNet::<f64>::build(&spec, 3).unwrap();
        let x = input::<f64>(4, [8, 8, 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r: Vec<Features<f64>> = spec
            .head_dims(x.dims)
            .into_iter()
            .map(|d| {
                let n = 3 * d.iter().product::<usize>();
                Features::from_vec(3, d, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            })
            .collect();
        let objective = |net: &MsUNet<f64>| -> f64 {
            net.forward(&x)
                .unwrap()
                .iter()
                .zip(&r)
                .map(|(h, w)| h.data.iter().zip(&w.data).map(|(a, b)| a * b).sum::<f64>())
                .sum()
        };
        let (heads, cache) = net.forward_train(&x).unwrap();
        assert_eq!(heads, net.forward(&x).unwrap());
        let mut grads = vec![0.0; net.num_params()];
        net.backward(&cache, &r, &mut grads);
        // Large enough to keep roundoff in the objective (~1e3 terms) below
        // the truncation error.
        let h = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..net.num_params() {
            let orig = net.params[i];
            net.params[i] = orig + h;
            let up = objective(&net);
            net.params[i] = orig - h;
            let down = objective(&net);
            net.params[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = (fd - grads[i]).abs() / (fd.abs() + grads[i].abs() + 1e-4);
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "worst relative gradient error {worst}");
    }
}
