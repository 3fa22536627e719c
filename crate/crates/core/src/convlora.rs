//! Low-rank adapters for convolution layers and per-task plugin sets.
//!
//! An adapter replaces nothing: it adds `(α/r)·(B ∗ (A ∗ x))` to the output
//! of a frozen convolution, where `A` is an `r × C_in × K × K` kernel sharing
//! the target layer's stride and padding and `B` is a `C_out × r` pointwise
//! kernel. `B` starts at zero so a fresh adapter is an exact no-op.

use ndarray::{Array2, Array4, ArrayView4};
use rand_distr::{Distribution, Normal};

use crate::error::{dim_err, Error, Result};
use crate::nn::backbone::{AdapterSlots, ConvLayer, FeatureExtractor};
use crate::nn::ops::{cols_to_map, conv2d, im2col, kernel_matrix, out_size, swap_nc};
use crate::nn::optim::Sgd;
use crate::nn::params::ParamVisitor;
use crate::rng;
use crate::serialize::{Reader, Writer};

pub const ADAPTER_MAGIC: &[u8; 4] = b"DLCA";
pub const PLUGIN_SET_MAGIC: &[u8; 4] = b"DLCP";

/// Standard deviation of the Gaussian used for `A`.
pub const A_INIT_STD: f32 = 0.02;

/// Stored scalars of one adapter: `r·(C_in·K² + C_out)`.
pub fn plugin_param_count(c_in: usize, c_out: usize, kernel: usize, rank: usize) -> Result<usize> {
    if c_in == 0 || c_out == 0 || kernel == 0 || rank == 0 {
        return Err(Error::Config("adapter dimensions and rank must all be at least 1".into()));
    }
    Ok(rank * (c_in * kernel * kernel + c_out))
}

/// Rank used when none is configured: 8 for layers up to 64 output channels,
/// 16 from 512 channels up; layers in between use 8.
pub fn default_rank(c_out: usize) -> usize {
    if c_out >= 512 {
        16
    } else {
        8
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLoraAdapter {
    pub target_tap: String,
    /// `(r, C_in, K, K)`
    pub a: Array4<f32>,
    /// `(C_out, r, 1, 1)`
    pub b: Array4<f32>,
    pub alpha: f32,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct AdapterGrads {
    pub a: Array4<f32>,
    pub b: Array4<f32>,
}

impl ConvLoraAdapter {
    /// Fresh adapter with `A ~ N(0, 0.02²)` and `B = 0`, same-padding, stride 1.
    pub fn init(c_in: usize, c_out: usize, kernel: usize, rank: usize, alpha: f32, seed: u64) -> Result<Self> {
        plugin_param_count(c_in, c_out, kernel, rank)?;
        if !alpha.is_finite() {
            return Err(Error::Config("adapter alpha must be finite".into()));
        }
        let normal = Normal::new(0.0f32, A_INIT_STD).expect("positive std");
        let mut r = rng::stream(seed, "adapter", &[]);
        let a = Array4::from_shape_simple_fn((rank, c_in, kernel, kernel), || normal.sample(&mut r));
        Ok(Self {
            target_tap: String::new(),
            a,
            b: Array4::zeros((c_out, rank, 1, 1)),
            alpha,
            stride: 1,
            padding: kernel / 2,
        })
    }

    /// Fresh adapter matching a backbone layer's shape and geometry.
    pub fn for_layer(layer: &ConvLayer, rank: usize, alpha: f32, seed: u64) -> Result<Self> {
        let mut a = Self::init(layer.c_in(), layer.c_out(), layer.kernel(), rank, alpha, seed)?;
        a.target_tap = layer.name.clone();
        a.stride = layer.stride;
        a.padding = layer.padding;
        Ok(a)
    }

    pub fn rank(&self) -> usize {
        self.a.dim().0
    }
    pub fn c_in(&self) -> usize {
        self.a.dim().1
    }
    pub fn kernel(&self) -> usize {
        self.a.dim().2
    }
    pub fn c_out(&self) -> usize {
        self.b.dim().0
    }
    pub fn scale(&self) -> f32 {
        self.alpha / self.rank() as f32
    }

    pub fn check_target(&self, layer: &ConvLayer) -> Result<()> {
        if (self.c_in(), self.c_out(), self.kernel()) != (layer.c_in(), layer.c_out(), layer.kernel()) {
            return Err(Error::Dimension(format!(
                "adapter ({}, {}, {}) does not fit layer {} ({}, {}, {})",
                self.c_in(),
                self.c_out(),
                self.kernel(),
                layer.name,
                layer.c_in(),
                layer.c_out(),
                layer.kernel()
            )));
        }
        if (self.stride, self.padding) != (layer.stride, layer.padding) {
            return Err(Error::Config(format!(
                "adapter geometry stride {} padding {} differs from layer {} (stride {} padding {})",
                self.stride, self.padding, layer.name, layer.stride, layer.padding
            )));
        }
        Ok(())
    }

    fn b_matrix(&self) -> ndarray::ArrayView2<'_, f32> {
        let (co, r, _, _) = self.b.dim();
        self.b.view().into_shape_with_order((co, r)).expect("contiguous")
    }

    /// Residual from the target layer's im2col matrix; also returns `z = A ∗ x`.
    pub fn residual_cols(&self, cols: &Array2<f32>) -> (Array2<f32>, Array2<f32>) {
        let z = kernel_matrix(self.a.view()).dot(cols);
        let mut res = self.b_matrix().dot(&z);
        res *= self.scale();
        (res, z)
    }

    /// Given the gradient w.r.t. the layer's pre-normalisation output, returns
    /// the adapter gradients and, if requested, the column-space input gradient.
    pub fn backward_cols(
        &self,
        cols: &Array2<f32>,
        z: &Array2<f32>,
        grad_out: &Array2<f32>,
        input_grad: bool,
    ) -> (AdapterGrads, Option<Array2<f32>>) {
        let s = self.scale();
        let gb = grad_out.dot(&z.t()) * s;
        let gz = self.b_matrix().t().dot(grad_out) * s;
        let ga = gz.dot(&cols.t());
        let gcols = input_grad.then(|| kernel_matrix(self.a.view()).t().dot(&gz));
        (
            AdapterGrads {
                a: ga.into_shape_with_order(self.a.dim()).expect("A shape"),
                b: gb.into_shape_with_order(self.b.dim()).expect("B shape"),
            },
            gcols,
        )
    }

    /// Residual path alone on an `(N, C_in, H, W)` batch.
    pub fn forward(&self, x: ArrayView4<f32>) -> Result<Array4<f32>> {
        let (n, c, h, w) = x.dim();
        if c != self.c_in() {
            return Err(dim_err("adapter input channels", self.c_in(), c));
        }
        let k = self.kernel();
        let cols = im2col(swap_nc(x).view(), k, self.stride, self.padding);
        let (res, _) = self.residual_cols(&cols);
        let ho = out_size(h, k, self.stride, self.padding);
        let wo = out_size(w, k, self.stride, self.padding);
        Ok(swap_nc(cols_to_map(res, n, ho, wo).view()))
    }

    /// Dense kernel `W_eq[o,i] = Σ_ρ B[o,ρ]·A[ρ,i]`, without the `α/r` factor.
    pub fn merge_equivalent_kernel(&self) -> Result<Array4<f32>> {
        let (_, _, bh, bw) = self.b.dim();
        if (bh, bw) != (1, 1) {
            return Err(Error::Unsupported("merging requires a 1x1 up-projection".into()));
        }
        let (_, ci, k, _) = self.a.dim();
        let merged = self.b_matrix().dot(&kernel_matrix(self.a.view()));
        Ok(merged.into_shape_with_order((self.c_out(), ci, k, k)).expect("kernel shape"))
    }

    pub fn apply_grads(&mut self, sgd: &mut Sgd, slot: usize, grads: &AdapterGrads) {
        sgd.step_array(slot, &mut self.a, &grads.a);
        sgd.step_array(slot + 1, &mut self.b, &grads.b);
    }

    pub fn write(&self, task_id: usize, w: &mut Writer) {
        w.bytes(ADAPTER_MAGIC);
        w.u32(task_id as u32);
        w.str(&self.target_tap);
        for d in [self.c_out(), self.c_in(), self.kernel(), self.stride, self.padding] {
            w.u32(d as u32);
        }
        w.f32(self.alpha);
        w.u32(self.rank() as u32);
        w.f32s(self.a.as_slice().expect("contiguous"));
        w.f32s(self.b.as_slice().expect("contiguous"));
    }

    /// Reads one adapter record, returning it with its task id.
    pub fn read(r: &mut Reader<'_>) -> Result<(usize, Self)> {
        r.expect_magic(ADAPTER_MAGIC)?;
        let task_id = r.u32()? as usize;
        let target_tap = r.str()?;
        let c_out = r.u32()? as usize;
        let c_in = r.u32()? as usize;
        let kernel = r.u32()? as usize;
        let stride = r.u32()? as usize;
        let padding = r.u32()? as usize;
        let alpha = r.f32()?;
        let rank = r.u32()? as usize;
        plugin_param_count(c_in, c_out, kernel, rank).map_err(|e| Error::Format(e.to_string()))?;
        let a = Array4::from_shape_vec((rank, c_in, kernel, kernel), r.f32s(rank * c_in * kernel * kernel)?)
            .expect("sized read");
        let b = Array4::from_shape_vec((c_out, rank, 1, 1), r.f32s(c_out * rank)?).expect("sized read");
        Ok((task_id, Self { target_tap, a, b, alpha, stride, padding }))
    }
}

impl ParamVisitor for ConvLoraAdapter {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f32])) {
        f("A", self.a.as_slice().expect("contiguous"));
        f("B", self.b.as_slice().expect("contiguous"));
    }
    fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// `conv(x, W) + (α/r)·(B ∗ (A ∗ x))` for a bare kernel, over `(N, C, H, W)`.
pub fn adapted_forward(
    conv_weight: ArrayView4<f32>,
    stride: usize,
    padding: usize,
    adapter: &ConvLoraAdapter,
    x: ArrayView4<f32>,
) -> Result<Array4<f32>> {
    let (co, ci, k, _) = conv_weight.dim();
    if (co, ci, k) != (adapter.c_out(), adapter.c_in(), adapter.kernel()) {
        return Err(Error::Dimension(format!(
            "conv kernel ({co}, {ci}, {k}) vs adapter ({}, {}, {})",
            adapter.c_out(),
            adapter.c_in(),
            adapter.kernel()
        )));
    }
    if (stride, padding) != (adapter.stride, adapter.padding) {
        return Err(Error::Config(format!(
            "stride/padding ({stride}, {padding}) differ from adapter ({}, {})",
            adapter.stride, adapter.padding
        )));
    }
    if x.dim().1 != ci {
        return Err(dim_err("input channels", ci, x.dim().1));
    }
    let base = conv2d(x, conv_weight, stride, padding);
    Ok(base + adapter.forward(x)?)
}

/// The adapters owned by one task, ordered deepest layer first.
#[derive(Debug, Clone, PartialEq)]
pub struct PluginSet {
    pub task_id: usize,
    pub adapters: Vec<ConvLoraAdapter>,
    frozen: bool,
}

impl PluginSet {
    /// Builds adapters for the `k_plugins` deepest layers of `phi`.
    ///
    /// `rank` of `None` applies [`default_rank`] per layer; `alpha` of `None`
    /// uses `α = r`.
    pub fn new(
        task_id: usize,
        phi: &FeatureExtractor,
        k_plugins: usize,
        rank: Option<usize>,
        alpha: Option<f32>,
        seed: u64,
    ) -> Result<Self> {
        let layers = phi.layers();
        if k_plugins == 0 || k_plugins > layers.len() {
            return Err(Error::Config(format!(
                "plugin depth {k_plugins} must be between 1 and {}",
                layers.len()
            )));
        }
        let adapters = layers
            .iter()
            .rev()
            .take(k_plugins)
            .enumerate()
            .map(|(i, layer)| {
                let r = rank.unwrap_or_else(|| default_rank(layer.c_out()));
                let a = alpha.unwrap_or(r as f32);
                ConvLoraAdapter::for_layer(layer, r, a, rng::derive_seed(seed, "plugin", &[task_id as u64, i as u64]))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { task_id, adapters, frozen: false })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Sum of stored scalars over all adapters.
    pub fn lora_param_count(&self) -> usize {
        self.adapters.iter().map(ParamVisitor::param_count).sum()
    }

    /// Adapter per backbone layer, `None` where nothing is attached.
    pub fn slots<'a>(&'a self, phi: &FeatureExtractor) -> Result<Vec<Option<&'a ConvLoraAdapter>>> {
        let mut slots: Vec<Option<&ConvLoraAdapter>> = vec![None; phi.layers().len()];
        for a in &self.adapters {
            let idx = phi
                .layer_index(&a.target_tap)
                .ok_or_else(|| Error::Config(format!("tap '{}' not in registry", a.target_tap)))?;
            a.check_target(&phi.layers()[idx])?;
            slots[idx] = Some(a);
        }
        Ok(slots)
    }

    /// Index of the shallowest adapted layer.
    pub fn first_layer(&self, phi: &FeatureExtractor) -> Result<usize> {
        self.adapters
            .iter()
            .map(|a| {
                phi.layer_index(&a.target_tap)
                    .ok_or_else(|| Error::Config(format!("tap '{}' not in registry", a.target_tap)))
            })
            .try_fold(usize::MAX, |m, i| i.map(|i| m.min(i)))
    }

    /// Applies adapter gradients laid out per backbone layer.
    pub fn apply_grads(
        &mut self,
        phi: &FeatureExtractor,
        sgd: &mut Sgd,
        grads: &[Option<AdapterGrads>],
        slot_base: usize,
    ) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen(format!("plugin set of task {}", self.task_id)));
        }
        for (i, a) in self.adapters.iter_mut().enumerate() {
            let idx = phi.layer_index(&a.target_tap).expect("validated at attach");
            if let Some(g) = &grads[idx] {
                a.apply_grads(sgd, slot_base + 2 * i, g);
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(PLUGIN_SET_MAGIC);
        w.u32(self.task_id as u32);
        w.u8(u8::from(self.frozen));
        w.u32(self.adapters.len() as u32);
        for a in &self.adapters {
            a.write(self.task_id, &mut w);
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(PLUGIN_SET_MAGIC)?;
        let task_id = r.u32()? as usize;
        let frozen = r.u8()? != 0;
        let n = r.u32()? as usize;
        let mut adapters = Vec::with_capacity(n);
        for _ in 0..n {
            let (tid, a) = ConvLoraAdapter::read(&mut r)?;
            if tid != task_id {
                return Err(Error::Format(format!("adapter task {tid} inside plugin set {task_id}")));
            }
            adapters.push(a);
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after plugin set".into()));
        }
        Ok(Self { task_id, adapters, frozen })
    }
}

impl ParamVisitor for PluginSet {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f32])) {
        for a in &self.adapters {
            f(&format!("{}.A", a.target_tap), a.a.as_slice().expect("contiguous"));
            f(&format!("{}.B", a.target_tap), a.b.as_slice().expect("contiguous"));
        }
    }
    fn param_count(&self) -> usize {
        self.lora_param_count()
    }
}

/// Read-only view of an extractor with one plugin set attached. Dropping the
/// view detaches the plugins; the extractor itself is never modified.
pub struct AdaptedExtractor<'a> {
    phi: &'a FeatureExtractor,
    slots: Vec<Option<&'a ConvLoraAdapter>>,
}

pub fn attach_plugin_set<'a>(phi: &'a FeatureExtractor, plugins: &'a PluginSet) -> Result<AdaptedExtractor<'a>> {
    Ok(AdaptedExtractor { phi, slots: plugins.slots(phi)? })
}

impl<'a> AdaptedExtractor<'a> {
    pub fn forward_features(&self, batch: ArrayView4<f32>) -> Result<Array2<f32>> {
        self.phi.forward_features_with(batch, &self.slots)
    }

    pub fn layer_outputs(&self, batch: ArrayView4<f32>) -> Result<Vec<Array2<f32>>> {
        self.phi.layer_outputs(batch, &self.slots)
    }

    pub fn slots(&self) -> &AdapterSlots<'a> {
        &self.slots
    }

    pub fn detach(self) -> &'a FeatureExtractor {
        self.phi
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::backbone::BackboneSpec;
    use crate::nn::params::checksum;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform4(r: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f32> {
        Array::from_shape_fn(shape, |_| r.random_range(-1.0f32..1.0))
    }

    fn max_abs(a: &Array4<f32>, b: &Array4<f32>) -> f32 {
        assert_eq!(a.dim(), b.dim());
        (a - b).iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }

    #[test]
    fn table_counts() {
        assert_eq!(plugin_param_count(64, 64, 3, 8).unwrap(), 5120);
        assert_eq!(plugin_param_count(64, 64, 3, 8).unwrap() * 10, 51_200);
        assert_eq!(plugin_param_count(512, 512, 3, 16).unwrap(), 81_920);
        assert_eq!(plugin_param_count(512, 512, 3, 16).unwrap() * 6, 491_520);
        assert_eq!(plugin_param_count(64, 64, 3, 16).unwrap(), 2 * plugin_param_count(64, 64, 3, 8).unwrap());
        assert!(plugin_param_count(64, 64, 3, 0).is_err());
    }

    #[test]
    fn count_matches_stored_scalars() {
        let a = ConvLoraAdapter::init(64, 64, 3, 8, 8.0, 1).unwrap();
        assert_eq!(a.param_count(), 5120);
        assert_eq!(a.param_count(), plugin_param_count(64, 64, 3, 8).unwrap());
    }

    #[test]
    fn rank_zero_is_rejected() {
        assert!(matches!(ConvLoraAdapter::init(4, 4, 3, 0, 1.0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn fresh_adapter_has_zero_residual() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let a = ConvLoraAdapter::init(3, 5, 3, 2, 2.0, 7).unwrap();
        let x = uniform4(&mut r, (2, 3, 6, 6));
        assert!(a.forward(x.view()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_composition_scales_input() {
        let c = 3;
        let mut a = ConvLoraAdapter::init(c, c, 1, c, 1.5, 0).unwrap();
        a.a.fill(0.0);
        a.b.fill(0.0);
        for i in 0..c {
            a.a[[i, i, 0, 0]] = 1.0;
            a.b[[i, i, 0, 0]] = 1.0;
        }
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let x = uniform4(&mut r, (2, c, 4, 4));
        let out = a.forward(x.view()).unwrap();
        let expected = &x * (1.5 / c as f32);
        assert!(max_abs(&out, &expected) < 1e-7);
    }

    #[test]
    fn adapter_matches_merged_kernel_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let mut a = ConvLoraAdapter::init(4, 6, 3, 2, 2.0, 3).unwrap();
        a.a = uniform4(&mut r, (2, 4, 3, 3));
        a.b = uniform4(&mut r, (6, 2, 1, 1));
        let x = uniform4(&mut r, (2, 4, 8, 8));
        let merged = oracle_merge(&a);
        let oracle = conv2d(x.view(), merged.view(), 1, 1) * a.scale();
        assert!(max_abs(&a.forward(x.view()).unwrap(), &oracle) < 1e-5);
        assert!(max_abs(&a.merge_equivalent_kernel().unwrap(), &merged) < 1e-6);
    }

    /// Independent elementwise sum for the merged kernel.
    fn oracle_merge(a: &ConvLoraAdapter) -> Array4<f32> {
        let (r, ci, k, _) = a.a.dim();
        Array4::from_shape_fn((a.c_out(), ci, k, k), |(o, i, y, x)| {
            (0..r).map(|p| a.b[[o, p, 0, 0]] * a.a[[p, i, y, x]]).sum()
        })
    }

    #[test]
    fn merge_edge_cases() {
        let a = ConvLoraAdapter::init(2, 3, 3, 2, 2.0, 4).unwrap();
        assert!(a.merge_equivalent_kernel().unwrap().iter().all(|&v| v == 0.0));

        let mut rank1 = ConvLoraAdapter::init(2, 1, 3, 1, 1.0, 5).unwrap();
        rank1.b[[0, 0, 0, 0]] = -2.5;
        let merged = rank1.merge_equivalent_kernel().unwrap();
        let expected = rank1.a.clone() * -2.5;
        assert!(max_abs(&merged, &expected) == 0.0);

        let mut wide = a.clone();
        wide.b = Array4::zeros((3, 2, 3, 3));
        assert!(matches!(wide.merge_equivalent_kernel(), Err(Error::Unsupported(_))));
    }

    #[test]
    fn adapted_forward_cases() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let w = uniform4(&mut r, (5, 3, 3, 3));
        let x = uniform4(&mut r, (2, 3, 6, 6));
        let mut a = ConvLoraAdapter::init(3, 5, 3, 2, 4.0, 1).unwrap();
        let plain = conv2d(x.view(), w.view(), 1, 1);
        assert!(max_abs(&adapted_forward(w.view(), 1, 1, &a, x.view()).unwrap(), &plain) <= 1e-7);

        a.b = uniform4(&mut r, (5, 2, 1, 1));
        let zero = Array4::zeros(w.dim());
        let only = adapted_forward(zero.view(), 1, 1, &a, x.view()).unwrap();
        assert!(max_abs(&only, &a.forward(x.view()).unwrap()) < 1e-6);

        let full = adapted_forward(w.view(), 1, 1, &a, x.view()).unwrap();
        let oracle = &plain + &(conv2d(x.view(), oracle_merge(&a).view(), 1, 1) * a.scale());
        assert!(max_abs(&full, &oracle) < 1e-5);

        assert!(matches!(adapted_forward(w.view(), 2, 1, &a, x.view()), Err(Error::Config(_))));
    }

    #[test]
    fn adapter_backward_matches_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(12);
        let mut a = ConvLoraAdapter::init(3, 4, 3, 2, 2.0, 1).unwrap();
        a.a = uniform4(&mut r, a.a.dim());
        a.b = uniform4(&mut r, a.b.dim());
        let x = uniform4(&mut r, (2, 3, 5, 5));
        let cols = im2col(swap_nc(x.view()).view(), 3, 1, 1);
        let (res, z) = a.residual_cols(&cols);
        let g = Array::from_shape_fn(res.dim(), |_| r.random_range(-1.0f32..1.0));
        let (grads, _) = a.backward_cols(&cols, &z, &g, false);
        let loss = |ad: &ConvLoraAdapter| -> f64 {
            let (res, _) = ad.residual_cols(&cols);
            (&res * &g).iter().map(|&v| f64::from(v)).sum()
        };
        let eps = 1e-2;
        let mut p = a.clone();
        p.a[[1, 2, 0, 1]] += eps;
        let mut m = a.clone();
        m.a[[1, 2, 0, 1]] -= eps;
        let fd = (loss(&p) - loss(&m)) / (2.0 * f64::from(eps));
        assert!((fd - f64::from(grads.a[[1, 2, 0, 1]])).abs() < 1e-2);
        let mut p = a.clone();
        p.b[[3, 1, 0, 0]] += eps;
        let mut m = a.clone();
        m.b[[3, 1, 0, 0]] -= eps;
        let fd = (loss(&p) - loss(&m)) / (2.0 * f64::from(eps));
        assert!((fd - f64::from(grads.b[[3, 1, 0, 0]])).abs() < 1e-2);
    }

    fn phi() -> FeatureExtractor {
        FeatureExtractor::build(&BackboneSpec::from_channels(2, 6, &[3, 4, 4], &[1, 2, 1], 3), 3).unwrap()
    }

    #[test]
    fn attach_fresh_and_detach_leave_plain_forward() {
        let phi = phi();
        let before = checksum(&phi);
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let x = uniform4(&mut r, (3, 2, 6, 6));
        let plain = phi.forward_features(x.view()).unwrap();
        let set = PluginSet::new(1, &phi, 2, Some(2), None, 0).unwrap();
        let view = attach_plugin_set(&phi, &set).unwrap();
        let adapted = view.forward_features(x.view()).unwrap();
        let diff = (&adapted - &plain).iter().fold(0.0f32, |m, &v| m.max(v.abs()));
        assert!(diff <= 1e-7);
        let phi_back = view.detach();
        assert_eq!(phi_back.forward_features(x.view()).unwrap(), plain);
        assert_eq!(checksum(phi_back), before);
    }

    #[test]
    fn two_plugins_adapt_exactly_the_two_deepest_layers() {
        let phi = phi();
        let mut set = PluginSet::new(1, &phi, 2, Some(2), None, 0).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(10);
        for a in &mut set.adapters {
            a.b = uniform4(&mut r, a.b.dim());
        }
        assert_eq!(set.adapters[0].target_tap, "conv3");
        assert_eq!(set.adapters[1].target_tap, "conv2");
        let x = uniform4(&mut r, (2, 2, 6, 6));
        let plain = phi.layer_outputs(x.view(), &[]).unwrap();
        let adapted = attach_plugin_set(&phi, &set).unwrap().layer_outputs(x.view()).unwrap();
        assert_eq!(plain[0], adapted[0]);
        assert_ne!(plain[1], adapted[1]);
        assert_ne!(plain[2], adapted[2]);
    }

    #[test]
    fn unknown_tap_is_rejected() {
        let phi = phi();
        let mut set = PluginSet::new(1, &phi, 1, Some(2), None, 0).unwrap();
        set.adapters[0].target_tap = "conv9".into();
        assert!(attach_plugin_set(&phi, &set).is_err());
    }

    #[test]
    fn frozen_set_refuses_updates() {
        let phi = phi();
        let mut set = PluginSet::new(1, &phi, 1, Some(2), None, 0).unwrap();
        set.freeze();
        let mut sgd = Sgd::new(0.1, 0.9, 0.0);
        let grads = vec![None; 3];
        assert!(matches!(set.apply_grads(&phi, &mut sgd, &grads, 0), Err(Error::Frozen(_))));
    }

    #[test]
    fn plugin_set_round_trip_is_bitwise() {
        let phi = phi();
        let mut set = PluginSet::new(4, &phi, 2, None, Some(3.0), 11).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(10);
        set.adapters[0].b = uniform4(&mut r, set.adapters[0].b.dim());
        set.freeze();
        let back = PluginSet::from_bytes(&set.to_bytes()).unwrap();
        assert_eq!(checksum(&back), checksum(&set));
        assert_eq!(back, set);
        assert!(back.is_frozen());
    }
}
