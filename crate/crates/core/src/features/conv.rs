//! Small convolutional stack: valid-mode forward pass and exact
//! reverse-mode gradients for weights and input.
//!
//! Layers run conv -> optional rectifier -> optional 2x2 max-pool. Kernels
//! carry no bias. Every layer's output is exposed (the cascade correlates
//! templates at each depth), so the forward pass returns one feature map
//! per layer and the traced variant additionally caches what the backward
//! pass needs: layer inputs, pre-rectifier activations, and pool argmax
//! routing.

use crate::error::{invalid, mismatch, Result};
use crate::features::FeatureMap;
use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One convolutional layer: kernel geometry plus pool/rectifier flags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// 2x2 max-pool with stride 2 after the rectifier.
    pub max_pool: bool,
    /// Rectified-linear nonlinearity after the convolution.
    pub relu: bool,
}

/// Ordered layer descriptors for the whole stack.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvStackSpec {
    pub layers: Vec<ConvLayerSpec>,
}

impl ConvStackSpec {
    /// Default stack: first layer 5x5/stride 2 with pool, then 3x3/stride 1
    /// layers; channels 1 -> 8 -> 16 -> 16 -> ...; rectifier everywhere but
    /// the last layer. `depth` must be in `1..=5`.
    pub fn desk_default(depth: usize) -> Result<Self> {
        if !(1..=5).contains(&depth) {
            return Err(invalid!("conv depth {depth} outside 1..=5"));
        }
        let out_channels = [8usize, 16, 16, 16, 16];
        let mut layers = Vec::with_capacity(depth);
        let mut in_ch = 1;
        for i in 0..depth {
            let first = i == 0;
            layers.push(ConvLayerSpec {
                kernel_h: if first { 5 } else { 3 },
                kernel_w: if first { 5 } else { 3 },
                in_channels: in_ch,
                out_channels: out_channels[i],
                stride: if first { 2 } else { 1 },
                max_pool: first,
                relu: i + 1 != depth,
            });
            in_ch = out_channels[i];
        }
        Ok(Self { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(invalid!("conv stack needs at least one layer"));
        }
        let mut in_ch = self.layers[0].in_channels;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.in_channels != in_ch {
                return Err(mismatch!(
                    "layer {i} expects {} input channels, previous layer emits {in_ch}",
                    layer.in_channels
                ));
            }
            if layer.stride == 0
                || layer.kernel_h == 0
                || layer.kernel_w == 0
                || layer.out_channels == 0
            {
                return Err(invalid!("layer {i} has a zero dimension"));
            }
            in_ch = layer.out_channels;
        }
        Ok(())
    }

    /// Total number of scalar weights across all kernels.
    pub fn weight_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.out_channels * l.in_channels * l.kernel_h * l.kernel_w)
            .sum()
    }
}

/// Kernel tensors, one per layer, indexed `[out, in, ky, kx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights {
    pub kernels: Vec<Array4<f64>>,
}

impl ConvWeights {
    /// Fan-in-scaled uniform initialization, deterministic given the rng.
    pub fn seeded(spec: &ConvStackSpec, rng: &mut ChaCha8Rng) -> Self {
        let kernels = spec
            .layers
            .iter()
            .map(|l| {
                let fan_in = (l.in_channels * l.kernel_h * l.kernel_w) as f64;
                let bound = 1.0 / fan_in.sqrt();
                let shape = (l.out_channels, l.in_channels, l.kernel_h, l.kernel_w);
                let mut k = Array4::zeros(shape);
                for v in k.iter_mut() {
                    *v = rng.gen_range(-bound..bound);
                }
                k
            })
            .collect();
        Self { kernels }
    }

    pub fn zeros(spec: &ConvStackSpec) -> Self {
        let kernels = spec
            .layers
            .iter()
            .map(|l| Array4::zeros((l.out_channels, l.in_channels, l.kernel_h, l.kernel_w)))
            .collect();
        Self { kernels }
    }

    pub fn matches(&self, spec: &ConvStackSpec) -> Result<()> {
        if self.kernels.len() != spec.layers.len() {
            return Err(mismatch!(
                "{} kernel tensors for {} layers",
                self.kernels.len(),
                spec.layers.len()
            ));
        }
        for (i, (k, l)) in self.kernels.iter().zip(&spec.layers).enumerate() {
            let want = (l.out_channels, l.in_channels, l.kernel_h, l.kernel_w);
            if k.dim() != want {
                return Err(mismatch!("kernel {i} has shape {:?}, spec wants {:?}", k.dim(), want));
            }
        }
        Ok(())
    }
}

/// Cached activations of one layer, as needed by the backward pass.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// Input to the convolution.
    pub input: Array3<f64>,
    /// Pre-rectifier convolution output.
    pub conv_out: Array3<f64>,
    /// Layer output (post rectifier and pool).
    pub output: Array3<f64>,
    /// Source coordinates of each pooled cell, when the layer pools.
    pub pool_src: Option<Array3<(usize, usize)>>,
}

fn conv_valid(input: &Array3<f64>, kernel: &Array4<f64>, stride: usize) -> Result<Array3<f64>> {
    let (h, w, cin) = input.dim();
    let (cout, kin, kh, kw) = kernel.dim();
    if kin != cin {
        return Err(mismatch!("kernel expects {kin} channels, input has {cin}"));
    }
    if kh > h || kw > w {
        return Err(mismatch!("kernel {kh}x{kw} larger than input {h}x{w}"));
    }
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    let mut out = Array3::zeros((oh, ow, cout));
    for oy in 0..oh {
        for ox in 0..ow {
            for oc in 0..cout {
                let mut acc = 0.0;
                for ky in 0..kh {
                    for kx in 0..kw {
                        for ic in 0..cin {
                            acc += input[[oy * stride + ky, ox * stride + kx, ic]]
                                * kernel[[oc, ic, ky, kx]];
                        }
                    }
                }
                out[[oy, ox, oc]] = acc;
            }
        }
    }
    Ok(out)
}

fn max_pool_2x2(input: &Array3<f64>) -> Result<(Array3<f64>, Array3<(usize, usize)>)> {
    let (h, w, c) = input.dim();
    if h < 2 || w < 2 {
        return Err(mismatch!("cannot 2x2-pool a {h}x{w} map"));
    }
    let oh = (h - 2) / 2 + 1;
    let ow = (w - 2) / 2 + 1;
    let mut out = Array3::zeros((oh, ow, c));
    let mut src = Array3::from_elem((oh, ow, c), (0usize, 0usize));
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = (0, 0);
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (y, x) = (oy * 2 + dy, ox * 2 + dx);
                        if input[[y, x, ch]] > best {
                            best = input[[y, x, ch]];
                            best_at = (y, x);
                        }
                    }
                }
                out[[oy, ox, ch]] = best;
                src[[oy, ox, ch]] = best_at;
            }
        }
    }
    Ok((out, src))
}

fn forward_impl(
    spec: &ConvStackSpec,
    weights: &ConvWeights,
    window: &Array2<f64>,
    traced: bool,
) -> Result<(Vec<FeatureMap>, Vec<LayerTrace>)> {
    spec.validate()?;
    weights.matches(spec)?;
    if spec.layers[0].in_channels != 1 {
        return Err(mismatch!("stack input must be single-channel"));
    }
    let (h, w) = window.dim();
    let mut current = Array3::from_shape_fn((h, w, 1), |(r, c, _)| window[[r, c]]);
    let mut stride = 1usize;
    let mut maps = Vec::with_capacity(spec.depth());
    let mut traces = Vec::new();

    for (layer, kernel) in spec.layers.iter().zip(&weights.kernels) {
        let input = current;
        let conv_out = conv_valid(&input, kernel, layer.stride)?;
        stride *= layer.stride;
        let rectified = if layer.relu {
            conv_out.mapv(|v| v.max(0.0))
        } else {
            conv_out.clone()
        };
        let (output, pool_src) = if layer.max_pool {
            let (pooled, src) = max_pool_2x2(&rectified)?;
            stride *= 2;
            (pooled, Some(src))
        } else {
            (rectified, None)
        };
        maps.push(FeatureMap::new(output.clone(), stride));
        if traced {
            traces.push(LayerTrace {
                input,
                conv_out,
                output: output.clone(),
                pool_src,
            });
        }
        current = output;
    }
    Ok((maps, traces))
}

/// Run the stack on a single-channel window; one feature map per layer,
/// each carrying the cumulative stride of conv and pool steps so far.
pub fn conv_forward(
    spec: &ConvStackSpec,
    weights: &ConvWeights,
    window: &Array2<f64>,
) -> Result<Vec<FeatureMap>> {
    forward_impl(spec, weights, window, false).map(|(maps, _)| maps)
}

/// Forward pass truncated after layer `upto` (inclusive); the cascade
/// never pays for layers it does not visit.
pub fn conv_forward_upto(
    spec: &ConvStackSpec,
    weights: &ConvWeights,
    window: &Array2<f64>,
    upto: usize,
) -> Result<Vec<FeatureMap>> {
    if upto >= spec.depth() {
        return Err(invalid!("layer {upto} out of range for depth {}", spec.depth()));
    }
    let truncated = ConvStackSpec {
        layers: spec.layers[..=upto].to_vec(),
    };
    let truncated_weights = ConvWeights {
        kernels: weights.kernels[..=upto].to_vec(),
    };
    forward_impl(&truncated, &truncated_weights, window, false).map(|(maps, _)| maps)
}

/// Forward pass that also caches per-layer activations for [`conv_backward`].
pub fn conv_forward_traced(
    spec: &ConvStackSpec,
    weights: &ConvWeights,
    window: &Array2<f64>,
) -> Result<(Vec<FeatureMap>, Vec<LayerTrace>)> {
    forward_impl(spec, weights, window, true)
}

/// Gradients produced by the backward pass.
#[derive(Clone, Debug)]
pub struct ConvGradients {
    /// One tensor per layer, same shapes as the kernels.
    pub weights: Vec<Array4<f64>>,
    /// Gradient with respect to the input window.
    pub input: Array2<f64>,
}

/// Exact reverse-mode gradients through the stack.
///
/// `upstream[l]`, when present, is the loss gradient with respect to layer
/// `l`'s output; gradients flowing into deeper layers are chained down
/// automatically. Requires the traces from [`conv_forward_traced`].
pub fn conv_backward(
    spec: &ConvStackSpec,
    weights: &ConvWeights,
    traces: &[LayerTrace],
    upstream: &[Option<Array3<f64>>],
) -> Result<ConvGradients> {
    spec.validate()?;
    weights.matches(spec)?;
    if traces.len() != spec.depth() {
        return Err(mismatch!(
            "{} cached activations for {} layers",
            traces.len(),
            spec.depth()
        ));
    }
    if upstream.len() != spec.depth() {
        return Err(mismatch!(
            "{} upstream gradients for {} layers",
            upstream.len(),
            spec.depth()
        ));
    }

    let mut weight_grads: Vec<Array4<f64>> =
        weights.kernels.iter().map(|k| Array4::zeros(k.dim())).collect();
    let mut flowing: Option<Array3<f64>> = None;

    for l in (0..spec.depth()).rev() {
        let layer = &spec.layers[l];
        let trace = &traces[l];
        let mut g_out = match (flowing.take(), upstream[l].as_ref()) {
            (Some(mut f), Some(u)) => {
                if f.dim() != u.dim() {
                    return Err(mismatch!("upstream gradient {l} has shape {:?}", u.dim()));
                }
                f += u;
                f
            }
            (Some(f), None) => f,
            (None, Some(u)) => u.clone(),
            (None, None) => Array3::zeros(trace.output.dim()),
        };
        if g_out.dim() != trace.output.dim() {
            return Err(mismatch!(
                "gradient for layer {l} has shape {:?}, output is {:?}",
                g_out.dim(),
                trace.output.dim()
            ));
        }

        // pool backward: route each pooled gradient to its argmax source
        if let Some(src) = &trace.pool_src {
            let mut g_rect = Array3::zeros(trace.conv_out.dim());
            for ((oy, ox, ch), &(y, x)) in src.indexed_iter() {
                g_rect[[y, x, ch]] += g_out[[oy, ox, ch]];
            }
            g_out = g_rect;
        }

        // rectifier backward: mask where the pre-activation was non-positive
        if layer.relu {
            for (g, &a) in g_out.iter_mut().zip(trace.conv_out.iter()) {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }
        }

        // conv backward: accumulate kernel gradient and input gradient
        let kernel = &weights.kernels[l];
        let (oh, ow, cout) = g_out.dim();
        let (_, _, cin) = trace.input.dim();
        let (kh, kw) = (layer.kernel_h, layer.kernel_w);
        let mut g_in = Array3::zeros(trace.input.dim());
        for oy in 0..oh {
            for ox in 0..ow {
                for oc in 0..cout {
                    let g = g_out[[oy, ox, oc]];
                    if g == 0.0 {
                        continue;
                    }
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let (y, x) = (oy * layer.stride + ky, ox * layer.stride + kx);
                            for ic in 0..cin {
                                weight_grads[l][[oc, ic, ky, kx]] += g * trace.input[[y, x, ic]];
                                g_in[[y, x, ic]] += g * kernel[[oc, ic, ky, kx]];
                            }
                        }
                    }
                }
            }
        }
        flowing = Some(g_in);
    }

    let g_window3 = flowing.expect("at least one layer");
    let (h, w, _) = g_window3.dim();
    let input = Array2::from_shape_fn((h, w), |(r, c)| g_window3[[r, c, 0]]);
    Ok(ConvGradients {
        weights: weight_grads,
        input,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::finite_diff;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_window(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn desk_default_shapes_chain() {
        let spec = ConvStackSpec::desk_default(3).unwrap();
        spec.validate().unwrap();
        assert_eq!(spec.layers[0].out_channels, 8);
        assert_eq!(spec.layers[1].in_channels, 8);
        assert_eq!(spec.layers[2].out_channels, 16);
        assert!(spec.layers[0].max_pool && !spec.layers[2].max_pool);
        assert!(spec.layers[0].relu && spec.layers[1].relu && !spec.layers[2].relu);
        assert!(ConvStackSpec::desk_default(0).is_err());
        assert!(ConvStackSpec::desk_default(6).is_err());
    }

    #[test]
    fn default_stack_strides_and_sizes() {
        let spec = ConvStackSpec::desk_default(3).unwrap();
        let weights = ConvWeights::seeded(&spec, &mut rng(0));
        let maps = conv_forward(&spec, &weights, &random_window(&mut rng(1), 64, 64)).unwrap();
        assert_eq!(maps[0].data.dim(), (15, 15, 8));
        assert_eq!(maps[0].stride, 4);
        assert_eq!(maps[1].data.dim(), (13, 13, 16));
        assert_eq!(maps[1].stride, 4);
        assert_eq!(maps[2].data.dim(), (11, 11, 16));
        assert_eq!(maps[2].stride, 4);
        let tmaps = conv_forward(&spec, &weights, &random_window(&mut rng(2), 32, 32)).unwrap();
        assert_eq!(tmaps[2].data.dim(), (3, 3, 16));
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let spec = ConvStackSpec {
            layers: vec![ConvLayerSpec {
                kernel_h: 1,
                kernel_w: 1,
                in_channels: 1,
                out_channels: 1,
                stride: 1,
                max_pool: false,
                relu: false,
            }],
        };
        let mut weights = ConvWeights::zeros(&spec);
        weights.kernels[0][[0, 0, 0, 0]] = 1.0;
        let window = random_window(&mut rng(4), 6, 5);
        let maps = conv_forward(&spec, &weights, &window).unwrap();
        for ((r, c), &v) in window.indexed_iter() {
            assert_eq!(maps[0].data[[r, c, 0]], v);
        }
    }

    #[test]
    fn zero_weights_with_relu_give_zero_maps() {
        let spec = ConvStackSpec::desk_default(2).unwrap();
        let weights = ConvWeights::zeros(&spec);
        let maps = conv_forward(&spec, &weights, &random_window(&mut rng(5), 32, 32)).unwrap();
        assert!(maps.iter().all(|m| m.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn forward_matches_nested_loop_oracle() {
        // single 5x5 layer, no pool/relu, against a direct quadruple loop
        let spec = ConvStackSpec {
            layers: vec![ConvLayerSpec {
                kernel_h: 5,
                kernel_w: 5,
                in_channels: 1,
                out_channels: 1,
                stride: 1,
                max_pool: false,
                relu: false,
            }],
        };
        let mut r = rng(6);
        let mut weights = ConvWeights::zeros(&spec);
        for v in weights.kernels[0].iter_mut() {
            *v = r.gen_range(-1.0..1.0);
        }
        let window = random_window(&mut r, 9, 9);
        let maps = conv_forward(&spec, &weights, &window).unwrap();
        for oy in 0..5 {
            for ox in 0..5 {
                let mut acc = 0.0;
                for ky in 0..5 {
                    for kx in 0..5 {
                        acc += window[[oy + ky, ox + kx]] * weights.kernels[0][[0, 0, ky, kx]];
                    }
                }
                assert!((maps[0].data[[oy, ox, 0]] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_linear_in_weights_without_pool_relu() {
        let spec = ConvStackSpec {
            layers: vec![
                ConvLayerSpec {
                    kernel_h: 3,
                    kernel_w: 3,
                    in_channels: 1,
                    out_channels: 4,
                    stride: 1,
                    max_pool: false,
                    relu: false,
                },
            ],
        };
        let mut r = rng(7);
        let mut weights = ConvWeights::zeros(&spec);
        for v in weights.kernels[0].iter_mut() {
            *v = r.gen_range(-1.0..1.0);
        }
        let window = random_window(&mut r, 10, 10);
        let base = conv_forward(&spec, &weights, &window).unwrap();
        let alpha = 3.5;
        let mut scaled = weights.clone();
        scaled.kernels[0].mapv_inplace(|v| v * alpha);
        let out = conv_forward(&spec, &scaled, &window).unwrap();
        for (a, b) in base[0].data.iter().zip(out[0].data.iter()) {
            assert!((b - alpha * a).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let spec = ConvStackSpec::desk_default(2).unwrap();
        let weights = ConvWeights::seeded(&spec, &mut rng(8));
        let window = random_window(&mut rng(9), 20, 20);
        let (maps, traces) = conv_forward_traced(&spec, &weights, &window).unwrap();
        let upstream = vec![
            Some(Array3::zeros(maps[0].data.dim())),
            Some(Array3::zeros(maps[1].data.dim())),
        ];
        let grads = conv_backward(&spec, &weights, &traces, &upstream).unwrap();
        assert!(grads.weights.iter().all(|g| g.iter().all(|&v| v == 0.0)));
        assert!(grads.input.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_missing_traces() {
        let spec = ConvStackSpec::desk_default(2).unwrap();
        let weights = ConvWeights::seeded(&spec, &mut rng(10));
        let err = conv_backward(&spec, &weights, &[], &[None, None]);
        assert!(err.is_err());
    }

    /// Scalar loss: inner product of every layer output with a fixed random
    /// projection. Its gradient exercises upstream accumulation across layers.
    fn projection_loss(
        spec: &ConvStackSpec,
        weights: &ConvWeights,
        window: &Array2<f64>,
        projections: &[Array3<f64>],
    ) -> f64 {
        let maps = conv_forward(spec, weights, window).unwrap();
        maps.iter()
            .zip(projections)
            .map(|(m, p)| (&m.data * p).sum())
            .sum()
    }

    fn check_weight_gradients(depth: usize, seed: u64, probes: usize, tol: f64) {
        let spec = ConvStackSpec::desk_default(depth).unwrap();
        let mut r = rng(seed);
        let weights = ConvWeights::seeded(&spec, &mut r);
        let window = random_window(&mut r, 24, 24);
        let maps = conv_forward(&spec, &weights, &window).unwrap();
        let projections: Vec<Array3<f64>> = maps
            .iter()
            .map(|m| Array3::from_shape_fn(m.data.dim(), |_| r.gen_range(-1.0..1.0)))
            .collect();

        let (_, traces) = conv_forward_traced(&spec, &weights, &window).unwrap();
        let upstream: Vec<Option<Array3<f64>>> =
            projections.iter().map(|p| Some(p.clone())).collect();
        let analytic = conv_backward(&spec, &weights, &traces, &upstream).unwrap();

        for _ in 0..probes {
            let layer = r.gen_range(0..depth);
            let len = weights.kernels[layer].len();
            let idx = r.gen_range(0..len);
            let fd = finite_diff(
                |v| {
                    let mut w2 = weights.clone();
                    w2.kernels[layer].as_slice_mut().unwrap()[idx] = v[0];
                    projection_loss(&spec, &w2, &window, &projections)
                },
                &[weights.kernels[layer].as_slice().unwrap()[idx]],
                1e-5,
            )[0];
            let an = analytic.weights[layer].as_slice().unwrap()[idx];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                (fd - an).abs() / denom < tol,
                "layer {layer} idx {idx}: fd {fd} analytic {an}"
            );
        }
    }

    #[test]
    fn single_layer_gradient_matches_finite_differences() {
        check_weight_gradients(1, 20, 12, 1e-4);
    }

    #[test]
    fn three_layer_gradient_matches_finite_differences() {
        check_weight_gradients(3, 21, 10, 1e-4);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let spec = ConvStackSpec::desk_default(2).unwrap();
        let mut r = rng(22);
        let weights = ConvWeights::seeded(&spec, &mut r);
        let window = random_window(&mut r, 16, 16);
        let maps = conv_forward(&spec, &weights, &window).unwrap();
        let projections: Vec<Array3<f64>> = maps
            .iter()
            .map(|m| Array3::from_shape_fn(m.data.dim(), |_| r.gen_range(-1.0..1.0)))
            .collect();
        let (_, traces) = conv_forward_traced(&spec, &weights, &window).unwrap();
        let upstream: Vec<Option<Array3<f64>>> =
            projections.iter().map(|p| Some(p.clone())).collect();
        let analytic = conv_backward(&spec, &weights, &traces, &upstream).unwrap();

        for _ in 0..10 {
            let (y, x) = (r.gen_range(0..16), r.gen_range(0..16));
            let fd = finite_diff(
                |v| {
                    let mut w2 = window.clone();
                    w2[[y, x]] = v[0];
                    projection_loss(&spec, &weights, &w2, &projections)
                },
                &[window[[y, x]]],
                1e-5,
            )[0];
            let an = analytic.input[[y, x]];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!((fd - an).abs() / denom < 1e-4, "({y},{x}): fd {fd} vs {an}");
        }
    }
}
