use ndarray::{Array1, Array2, Array4, ArrayView4};
use rand_distr::{Distribution, Normal};

use super::batchnorm::{BatchNorm2d, BatchStats, BnCache};
use super::ops::{cols_to_map, col2im, global_avg_pool, im2col, kernel_matrix, out_size, swap_nc};
use super::optim::Sgd;
use super::params::ParamVisitor;
use crate::convlora::{AdapterGrads, ConvLoraAdapter};
use crate::error::{Error, Result};
use crate::rng;
use crate::serialize::ArrayFile;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running estimates updated by the owner.
    Train,
    /// Running statistics; parameters and buffers untouched.
    Eval,
}

/// One conv → batch-norm → ReLU stage. Padding is always `kernel / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneSpec {
    pub input_side: usize,
    pub stages: Vec<StageSpec>,
}

impl BackboneSpec {
    /// Four 3×3 stages, 16→32→64→64 channels, the third one strided.
    pub fn desk_default(in_channels: usize, input_side: usize) -> Self {
        Self::from_channels(in_channels, input_side, &[16, 32, 64, 64], &[1, 1, 2, 1], 3)
    }

    pub fn from_channels(
        in_channels: usize,
        input_side: usize,
        channels: &[usize],
        strides: &[usize],
        kernel: usize,
    ) -> Self {
        let mut c_in = in_channels;
        let stages = channels
            .iter()
            .enumerate()
            .map(|(i, &c_out)| {
                let st = StageSpec { c_in, c_out, kernel, stride: strides.get(i).copied().unwrap_or(1) };
                c_in = c_out;
                st
            })
            .collect();
        Self { input_side, stages }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("backbone needs at least one conv stage".into()));
        }
        if self.input_side == 0 {
            return Err(Error::Config("input side must be positive".into()));
        }
        let mut side = self.input_side;
        for (i, st) in self.stages.iter().enumerate() {
            if st.c_in == 0 || st.c_out == 0 || st.kernel == 0 || st.stride == 0 {
                return Err(Error::Config(format!("stage {} has a zero dimension", i + 1)));
            }
            if st.kernel % 2 == 0 {
                return Err(Error::Config(format!("stage {} kernel must be odd", i + 1)));
            }
            if let Some(next) = self.stages.get(i + 1) {
                if next.c_in != st.c_out {
                    return Err(Error::Config(format!(
                        "channel mismatch: stage {} outputs {} channels but stage {} expects {}",
                        i + 1,
                        st.c_out,
                        i + 2,
                        next.c_in
                    )));
                }
            }
            side = out_size(side, st.kernel, st.stride, st.kernel / 2);
        }
        if side == 0 {
            return Err(Error::Config("input side too small for the stage strides".into()));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.stages[0].c_in
    }

    pub fn feature_dim(&self) -> usize {
        self.stages.last().map_or(0, |s| s.c_out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub weight: Array4<f32>,
    pub stride: usize,
    pub padding: usize,
    pub bn: BatchNorm2d,
}

impl ConvLayer {
    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }
    pub fn c_in(&self) -> usize {
        self.weight.dim().1
    }
    pub fn c_out(&self) -> usize {
        self.weight.dim().0
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    in_dims: (usize, usize, usize, usize),
    cols: Array2<f32>,
    z: Option<Array2<f32>>,
    bn: BnCache,
    out: Array2<f32>,
}

/// Activations kept by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    start: usize,
    layers: Vec<LayerCache>,
    final_dims: (usize, usize, usize, usize),
}

#[derive(Debug, Clone, Default)]
pub struct ExtractorGrads {
    pub conv: Vec<Option<Array4<f32>>>,
    pub gamma: Vec<Option<Array1<f32>>>,
    pub beta: Vec<Option<Array1<f32>>>,
    pub adapters: Vec<Option<AdapterGrads>>,
}

/// The convolutional feature extractor. Layers are addressed by tap names
/// `conv1..convN` (shallowest first in storage).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    spec: BackboneSpec,
    layers: Vec<ConvLayer>,
}

pub type AdapterSlots<'a> = [Option<&'a ConvLoraAdapter>];

impl FeatureExtractor {
    /// Kaiming-normal conv kernels, unit/zero batch-norm affine parameters.
    pub fn build(spec: &BackboneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .stages
            .iter()
            .enumerate()
            .map(|(i, st)| {
                let fan_in = (st.c_in * st.kernel * st.kernel) as f32;
                let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("positive std");
                let mut r = rng::stream(seed, "backbone", &[i as u64]);
                let weight = Array4::from_shape_simple_fn((st.c_out, st.c_in, st.kernel, st.kernel), || {
                    normal.sample(&mut r)
                });
                ConvLayer {
                    name: format!("conv{}", i + 1),
                    weight,
                    stride: st.stride,
                    padding: st.kernel / 2,
                    bn: BatchNorm2d::new(st.c_out),
                }
            })
            .collect();
        Ok(Self { spec: spec.clone(), layers })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvLayer] {
        &mut self.layers
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    /// Conv layer names, deepest first.
    pub fn taps(&self) -> Vec<&str> {
        self.layers.iter().rev().map(|l| l.name.as_str()).collect()
    }

    pub fn layer_index(&self, tap: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == tap)
    }

    fn check_batch(&self, batch: &ArrayView4<f32>) -> Result<()> {
        let (n, c, h, w) = batch.dim();
        let side = self.spec.input_side;
        if n == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        if c != self.spec.in_channels() || h != side || w != side {
            return Err(Error::Input(format!(
                "batch shape {:?} does not match ({}, {side}, {side})",
                (c, h, w),
                self.spec.in_channels()
            )));
        }
        Ok(())
    }

    fn check_slots(&self, adapters: &AdapterSlots<'_>) -> Result<()> {
        if !adapters.is_empty() && adapters.len() != self.layers.len() {
            return Err(Error::Dimension(format!(
                "adapter slots: expected {} entries, got {}",
                self.layers.len(),
                adapters.len()
            )));
        }
        for (layer, slot) in self.layers.iter().zip(adapters) {
            if let Some(a) = slot {
                a.check_target(layer)?;
            }
        }
        Ok(())
    }

    /// Eval-mode features of an `(N, C, H, W)` batch.
    pub fn forward_features(&self, batch: ArrayView4<f32>) -> Result<Array2<f32>> {
        self.forward_features_with(batch, &[])
    }

    pub fn forward_features_with(&self, batch: ArrayView4<f32>, adapters: &AdapterSlots<'_>) -> Result<Array2<f32>> {
        self.check_batch(&batch)?;
        self.check_slots(adapters)?;
        let x = swap_nc(batch);
        Ok(self.run(x, 0, adapters, Mode::Eval, false).0)
    }

    /// Training-mode forward; batch-norm running statistics are updated.
    pub fn forward_train(&mut self, batch: ArrayView4<f32>) -> Result<(Array2<f32>, ForwardCache)> {
        self.check_batch(&batch)?;
        let x = swap_nc(batch);
        let (feat, cache, stats) = self.run(x, 0, &[], Mode::Train, true);
        for (layer, st) in self.layers.iter_mut().zip(stats) {
            layer.bn.update_running(&st);
        }
        Ok((feat, cache.expect("cache requested")))
    }

    /// Eval-mode output of layers `0..upto` in channel-major layout.
    pub fn prefix(&self, batch: ArrayView4<f32>, upto: usize) -> Result<Array4<f32>> {
        self.check_batch(&batch)?;
        let mut x = swap_nc(batch);
        for l in 0..upto.min(self.layers.len()) {
            let (out, _, _) = self.layer_forward(l, &x, None, Mode::Eval);
            x = out;
        }
        Ok(x)
    }

    /// Eval-mode forward of layers `start..` from a channel-major map produced
    /// by [`prefix`](Self::prefix), keeping the cache for a backward pass.
    pub fn forward_from(
        &self,
        input: &Array4<f32>,
        start: usize,
        adapters: &AdapterSlots<'_>,
    ) -> Result<(Array2<f32>, ForwardCache)> {
        self.check_slots(adapters)?;
        let expected_c = self.layers[start].c_in();
        if input.dim().0 != expected_c {
            return Err(Error::Dimension(format!(
                "layer {} expects {expected_c} channels, got {}",
                start + 1,
                input.dim().0
            )));
        }
        let (feat, cache, _) = self.run(input.clone(), start, adapters, Mode::Eval, true);
        Ok((feat, cache.expect("cache requested")))
    }

    /// Eval-mode post-activation output of every layer, flattened per sample.
    pub fn layer_outputs(&self, batch: ArrayView4<f32>, adapters: &AdapterSlots<'_>) -> Result<Vec<Array2<f32>>> {
        self.check_batch(&batch)?;
        self.check_slots(adapters)?;
        let mut x = swap_nc(batch);
        let mut outs = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let (out, _, _) = self.layer_forward(l, &x, adapters.get(l).copied().flatten(), Mode::Eval);
            let (c, n, h, w) = out.dim();
            let per_sample = swap_nc(out.view())
                .into_shape_with_order((n, c * h * w))
                .expect("contiguous");
            outs.push(per_sample);
            x = out;
        }
        Ok(outs)
    }

    fn layer_forward(
        &self,
        l: usize,
        x: &Array4<f32>,
        adapter: Option<&ConvLoraAdapter>,
        mode: Mode,
    ) -> (Array4<f32>, LayerCache, Option<BatchStats>) {
        let layer = &self.layers[l];
        let (_, n, h, w) = x.dim();
        let k = layer.kernel();
        let cols = im2col(x.view(), k, layer.stride, layer.padding);
        let mut pre = kernel_matrix(layer.weight.view()).dot(&cols);
        let z = adapter.map(|a| {
            let (res, z) = a.residual_cols(&cols);
            pre += &res;
            z
        });
        let (mut y, bn, stats) = layer.bn.forward(&pre, mode);
        y.mapv_inplace(|v| v.max(0.0));
        let ho = out_size(h, k, layer.stride, layer.padding);
        let wo = out_size(w, k, layer.stride, layer.padding);
        let map = cols_to_map(y.clone(), n, ho, wo);
        (map, LayerCache { in_dims: x.dim(), cols, z, bn, out: y }, stats)
    }

    fn run(
        &self,
        mut x: Array4<f32>,
        start: usize,
        adapters: &AdapterSlots<'_>,
        mode: Mode,
        keep: bool,
    ) -> (Array2<f32>, Option<ForwardCache>, Vec<BatchStats>) {
        let mut caches = Vec::new();
        let mut stats = Vec::new();
        for l in start..self.layers.len() {
            let (out, cache, st) = self.layer_forward(l, &x, adapters.get(l).copied().flatten(), mode);
            if keep {
                caches.push(cache);
            }
            stats.extend(st);
            x = out;
        }
        let feat = global_avg_pool(x.view());
        let cache = keep.then(|| ForwardCache { start, layers: caches, final_dims: x.dim() });
        (feat, cache, stats)
    }

    /// Backpropagates `grad_features` through the cached layers, deepest first.
    ///
    /// With `weight_grads == false` the extractor's own gradients are skipped
    /// and the pass stops below the shallowest adapted layer.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_features: &Array2<f32>,
        adapters: &AdapterSlots<'_>,
        weight_grads: bool,
    ) -> ExtractorGrads {
        let nl = self.layers.len();
        let mut grads = ExtractorGrads {
            conv: vec![None; nl],
            gamma: vec![None; nl],
            beta: vec![None; nl],
            adapters: vec![None; nl],
        };
        let stop = if weight_grads {
            cache.start
        } else {
            match (cache.start..nl).find(|&l| adapters.get(l).copied().flatten().is_some()) {
                Some(l) => l,
                None => return grads,
            }
        };
        let (c, n, h, w) = cache.final_dims;
        let hw = (h * w) as f32;
        // GAP backward: every spatial position receives grad / (H·W).
        let mut g = Array2::<f32>::zeros((c, n * h * w));
        for ci in 0..c {
            for ni in 0..n {
                let v = grad_features[[ni, ci]] / hw;
                g.row_mut(ci).slice_mut(ndarray::s![ni * h * w..(ni + 1) * h * w]).fill(v);
            }
        }
        for l in (stop..nl).rev() {
            let lc = &cache.layers[l - cache.start];
            let layer = &self.layers[l];
            g.zip_mut_with(&lc.out, |gv, &o| {
                if o <= 0.0 {
                    *gv = 0.0;
                }
            });
            let (gpre, dgamma, dbeta) = layer.bn.backward(&lc.bn, &g);
            if weight_grads {
                let gw = gpre.dot(&lc.cols.t());
                grads.conv[l] = Some(
                    gw.into_shape_with_order(layer.weight.dim()).expect("kernel shape"),
                );
                grads.gamma[l] = Some(dgamma);
                grads.beta[l] = Some(dbeta);
            }
            let mut gcols = if l > stop { Some(kernel_matrix(layer.weight.view()).t().dot(&gpre)) } else { None };
            if let Some(a) = adapters.get(l).copied().flatten() {
                let z = lc.z.as_ref().expect("adapter forward cached z");
                let (ga, gz_cols) = a.backward_cols(&lc.cols, z, &gpre, l > stop);
                grads.adapters[l] = Some(ga);
                if let (Some(gc), Some(extra)) = (gcols.as_mut(), gz_cols) {
                    *gc += &extra;
                }
            }
            if let Some(gc) = gcols {
                let gx = col2im(gc.view(), lc.in_dims, layer.kernel(), layer.stride, layer.padding);
                let (ci, ni, hi, wi) = lc.in_dims;
                g = gx.into_shape_with_order((ci, ni * hi * wi)).expect("contiguous");
            }
        }
        grads
    }

    /// Applies SGD to every layer with a gradient. Slots `4l..4l+3` are used.
    pub fn apply_grads(&mut self, sgd: &mut Sgd, grads: &ExtractorGrads) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            if let Some(g) = &grads.conv[l] {
                sgd.step_array(4 * l, &mut layer.weight, g);
            }
            if let Some(g) = &grads.gamma[l] {
                sgd.step_array(4 * l + 1, &mut layer.bn.gamma, g);
            }
            if let Some(g) = &grads.beta[l] {
                sgd.step_array(4 * l + 2, &mut layer.bn.beta, g);
            }
        }
    }

    /// Every weight and batch-norm buffer, named as in [`ParamVisitor::visit`].
    pub fn to_array_file(&self) -> ArrayFile {
        let mut f = ArrayFile::default();
        for layer in &self.layers {
            let n = &layer.name;
            f.push(format!("{n}.weight"), layer.weight.shape(), layer.weight.as_slice().expect("contiguous"));
            for (field, v) in [
                ("gamma", &layer.bn.gamma),
                ("beta", &layer.bn.beta),
                ("running_mean", &layer.bn.running_mean),
                ("running_var", &layer.bn.running_var),
            ] {
                f.push(format!("{n}.bn.{field}"), v.shape(), v.as_slice().expect("contiguous"));
            }
        }
        f
    }

    /// Rebuilds an extractor for `spec` from [`FeatureExtractor::to_array_file`] output.
    pub fn from_array_file(spec: &BackboneSpec, file: &ArrayFile) -> Result<Self> {
        let mut phi = Self::build(spec, 0)?;
        for layer in &mut phi.layers {
            let n = layer.name.clone();
            file.fill(&format!("{n}.weight"), &mut layer.weight)?;
            file.fill(&format!("{n}.bn.gamma"), &mut layer.bn.gamma)?;
            file.fill(&format!("{n}.bn.beta"), &mut layer.bn.beta)?;
            file.fill(&format!("{n}.bn.running_mean"), &mut layer.bn.running_mean)?;
            file.fill(&format!("{n}.bn.running_var"), &mut layer.bn.running_var)?;
        }
        if file.arrays.len() != 5 * phi.layers.len() {
            return Err(Error::Format("extractor checkpoint has extra arrays".into()));
        }
        Ok(phi)
    }
}

impl ParamVisitor for FeatureExtractor {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f32])) {
        for layer in &self.layers {
            f(&format!("{}.weight", layer.name), layer.weight.as_slice().expect("contiguous"));
            f(&format!("{}.bn.gamma", layer.name), layer.bn.gamma.as_slice().expect("contiguous"));
            f(&format!("{}.bn.beta", layer.name), layer.bn.beta.as_slice().expect("contiguous"));
            f(&format!("{}.bn.running_mean", layer.name), layer.bn.running_mean.as_slice().expect("contiguous"));
            f(&format!("{}.bn.running_var", layer.name), layer.bn.running_var.as_slice().expect("contiguous"));
        }
    }

    fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + 2 * l.bn.channels()).sum()
    }
}
