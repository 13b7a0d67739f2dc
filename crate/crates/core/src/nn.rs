//! Small convolutional backbone with hand-written backpropagation.
//!
//! A block is `3x3 conv (+bias) -> ReLU -> layer norm with per-channel affine`.
//! The affine output can take either sign, so block outputs are usable as
//! attention logits. Samples are processed one at a time and normalisation
//! never looks across the batch, which keeps every forward pass independent.
//! The head is global average pooling followed by a `Q x C` affine map.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DarError, Result};
use crate::seed::rng_for;
use crate::volume::Patch;

const NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    /// Number of convolutional blocks.
    pub m: usize,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    /// Side of the square input patch.
    pub input_size: usize,
    pub q: usize,
}

impl BackboneSpec {
    /// Channels double every second block from 8 (capped at 64); stride 2 on
    /// every other block while the map is larger than 2 pixels.
    pub fn with_blocks(m: usize, input_size: usize, q: usize) -> Self {
        let mut channels = Vec::with_capacity(m);
        let mut strides = Vec::with_capacity(m);
        let mut side = input_size;
        for j in 0..m {
            channels.push((8usize << (j / 2)).min(64));
            let stride = if j % 2 == 0 && side > 2 { 2 } else { 1 };
            side = (side - 1) / stride + 1;
            strides.push(stride);
        }
        Self { m, channels, strides, input_size, q }
    }

    pub fn desk(input_size: usize, q: usize) -> Self {
        Self::with_blocks(6, input_size, q)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(DarError::Config(format!("backbone needs m >= 2 blocks, got {}", self.m)));
        }
        if self.channels.len() != self.m || self.strides.len() != self.m {
            return Err(DarError::Config("channel/stride plan must list one entry per block".into()));
        }
        if self.channels.contains(&0) || self.strides.contains(&0) || self.input_size == 0 || self.q == 0 {
            return Err(DarError::Config("zero-sized backbone entry".into()));
        }
        Ok(())
    }

    /// `(C, H, W)` emitted by block `j` (0-based).
    pub fn block_shape(&self, j: usize) -> (usize, usize, usize) {
        let mut side = self.input_size;
        for s in &self.strides[..=j] {
            side = (side - 1) / s + 1;
        }
        (self.channels[j], side, side)
    }

    fn in_channels(&self, j: usize) -> usize {
        if j == 0 {
            1
        } else {
            self.channels[j - 1]
        }
    }

    fn in_side(&self, j: usize) -> usize {
        if j == 0 {
            self.input_size
        } else {
            self.block_shape(j - 1).1
        }
    }

    /// Tensor names and shapes in parameter order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::with_capacity(4 * self.m + 2);
        for j in 0..self.m {
            let (cin, cout) = (self.in_channels(j), self.channels[j]);
            out.push((format!("block{}.conv_w", j + 1), vec![cout, cin, 3, 3]));
            out.push((format!("block{}.conv_b", j + 1), vec![cout]));
            out.push((format!("block{}.norm_gamma", j + 1), vec![cout]));
            out.push((format!("block{}.norm_beta", j + 1), vec![cout]));
        }
        out.push(("head.w".into(), vec![self.q, self.channels[self.m - 1]]));
        out.push(("head.b".into(), vec![self.q]));
        out
    }
}

/// First transferred block (1-based) scaled from 11-of-16 to `m` blocks:
/// the last `ceil(6m/16)` blocks are transferred.
pub fn default_k(m: usize) -> usize {
    let transferred = (6 * m).div_ceil(16);
    m - transferred + 1
}

/// Activation of one block for one sample, `C x H x W` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// 1-based block index.
    pub block: usize,
    pub values: Vec<f32>,
}

impl FeatureMap {
    pub fn new(shape: (usize, usize, usize), block: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != shape.0 * shape.1 * shape.2 {
            return Err(DarError::ShapeMismatch(format!("{} values for shape {:?}", values.len(), shape)));
        }
        Ok(Self { channels: shape.0, height: shape.1, width: shape.2, block, values })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    fn check_same(&self, other: &FeatureMap) -> Result<()> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(DarError::ShapeMismatch(format!("feature maps {:?} vs {:?}", self.shape(), other.shape())))
        }
    }

    /// Sum over channels, `H x W`.
    pub fn channel_sum(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; hw];
        for c in 0..self.channels {
            for (o, v) in out.iter_mut().zip(&self.values[c * hw..(c + 1) * hw]) {
                *o += v;
            }
        }
        out
    }
}

/// `(1 - sigmoid(f_cf)) * f_prd`.
pub fn na_module(f_cf: &FeatureMap, f_prd: &FeatureMap) -> Result<FeatureMap> {
    f_cf.check_same(f_prd)?;
    let values = crate::attention::negative_attention(&f_cf.values, &f_prd.values)?;
    Ok(FeatureMap { values, ..f_prd.clone() })
}

/// `(1 - |sigmoid(f_lr) - sigmoid(f_prd)|) * f_prd`.
pub fn ca_module(f_lr: &FeatureMap, f_prd: &FeatureMap) -> Result<FeatureMap> {
    f_lr.check_same(f_prd)?;
    let values = crate::attention::consistent_attention(&f_lr.values, &f_prd.values)?;
    Ok(FeatureMap { values, ..f_prd.clone() })
}

pub fn fuse_features(f_prd: &FeatureMap, o_na: &FeatureMap, o_ca: &FeatureMap) -> Result<FeatureMap> {
    f_prd.check_same(o_na)?;
    f_prd.check_same(o_ca)?;
    let values = crate::attention::fuse(&f_prd.values, &o_na.values, &o_ca.values)?;
    Ok(FeatureMap { values, ..f_prd.clone() })
}

/// `c[m x n] = beta * c + a[m x k] * b[k x n]`, with optional transposes given
/// as row/column strides of the stored matrices.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths match the stated dimensions and strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Saved intermediates for one block's backward pass.
#[derive(Debug, Clone)]
pub struct BlockCache {
    cols: Vec<f32>,
    pre: Vec<f32>,
    xhat: Vec<f32>,
    inv_std: f32,
}

/// Saved intermediates for the head.
#[derive(Debug, Clone)]
pub struct HeadCache {
    pooled: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: BackboneSpec,
    /// Parameter tensors in [`BackboneSpec::param_shapes`] order.
    pub params: Vec<Vec<f32>>,
}

/// Forward result of a plain network.
#[derive(Debug, Clone)]
pub struct NetOutput {
    pub features: Vec<FeatureMap>,
    pub logits: Vec<f32>,
}

/// Forward record needed for backpropagation.
#[derive(Debug, Clone)]
pub struct NetTape {
    pub blocks: Vec<BlockCache>,
    /// Output of every block.
    pub outputs: Vec<Vec<f32>>,
    pub head: HeadCache,
    pub logits: Vec<f32>,
}

impl Network {
    /// He-normal convolutions, unit norm gain, zero biases, small head.
    pub fn init(spec: &BackboneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng_for(seed, "network-init", 0);
        let mut params = Vec::new();
        for j in 0..spec.m {
            let (cin, cout) = (spec.in_channels(j), spec.channels[j]);
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            params.push((0..cout * cin * 9).map(|_| normal.sample(&mut rng) as f32).collect());
            params.push(vec![0.0; cout]);
            params.push(vec![1.0; cout]);
            params.push(vec![0.0; cout]);
        }
        let c = spec.channels[spec.m - 1];
        let bound = (1.0 / c as f64).sqrt();
        params.push((0..spec.q * c).map(|_| rng.gen_range(-bound..bound) as f32).collect());
        params.push(vec![0.0; spec.q]);
        Ok(Self { spec: spec.clone(), params })
    }

    pub fn zeros(spec: &BackboneSpec) -> Result<Self> {
        spec.validate()?;
        let params = spec.param_shapes().iter().map(|(_, s)| vec![0.0; s.iter().product()]).collect();
        Ok(Self { spec: spec.clone(), params })
    }

    pub fn from_params(spec: &BackboneSpec, params: Vec<Vec<f32>>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        if shapes.len() != params.len() {
            return Err(DarError::ShapeMismatch(format!("{} tensors, expected {}", params.len(), shapes.len())));
        }
        for ((name, shape), p) in shapes.iter().zip(&params) {
            if shape.iter().product::<usize>() != p.len() {
                return Err(DarError::ShapeMismatch(format!("{name}: {} values for {:?}", p.len(), shape)));
            }
        }
        Ok(Self { spec: spec.clone(), params })
    }

    pub fn zero_grads(&self) -> Vec<Vec<f32>> {
        self.params.iter().map(|p| vec![0.0; p.len()]).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    pub fn check_input(&self, patch: &Patch) -> Result<()> {
        if patch.size != self.spec.input_size || patch.data.len() != patch.size * patch.size {
            return Err(DarError::ShapeMismatch(format!(
                "input patch {}x{} for a {}x{} backbone",
                patch.size, patch.size, self.spec.input_size, self.spec.input_size
            )));
        }
        Ok(())
    }

    /// Runs block `j` (0-based) on `input`.
    pub fn block_forward(&self, j: usize, input: &[f32]) -> (Vec<f32>, BlockCache) {
        let spec = &self.spec;
        let (cin, side_in) = (spec.in_channels(j), spec.in_side(j));
        let (cout, ho, wo) = spec.block_shape(j);
        let stride = spec.strides[j];
        let p = ho * wo;
        let k = cin * 9;
        let mut cols = vec![0.0f32; k * p];
        for ci in 0..cin {
            let plane = &input[ci * side_in * side_in..(ci + 1) * side_in * side_in];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut cols[(ci * 9 + ky * 3 + kx) * p..(ci * 9 + ky * 3 + kx + 1) * p];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= side_in as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * side_in..(iy as usize + 1) * side_in];
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < side_in as isize {
                                row[oy * wo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        let (w, b) = (&self.params[4 * j], &self.params[4 * j + 1]);
        let (gamma, beta) = (&self.params[4 * j + 2], &self.params[4 * j + 3]);
        let mut pre = vec![0.0f32; cout * p];
        for (c, chunk) in pre.chunks_mut(p).enumerate() {
            chunk.fill(b[c]);
        }
        gemm(cout, k, p, w, false, &cols, false, 1.0, &mut pre);
        let n = (cout * p) as f32;
        let mean = pre.iter().map(|&z| z.max(0.0)).sum::<f32>() / n;
        let var = pre.iter().map(|&z| (z.max(0.0) - mean).powi(2)).sum::<f32>() / n;
        let inv_std = 1.0 / (var + NORM_EPS).sqrt();
        let xhat: Vec<f32> = pre.iter().map(|&z| (z.max(0.0) - mean) * inv_std).collect();
        let mut out = vec![0.0f32; cout * p];
        for c in 0..cout {
            for i in c * p..(c + 1) * p {
                out[i] = gamma[c] * xhat[i] + beta[c];
            }
        }
        (out, BlockCache { cols, pre, xhat, inv_std })
    }

    /// Accumulates block `j` parameter gradients and returns the input gradient
    /// (skipped for the first block, whose input is the image).
    pub fn block_backward(
        &self,
        j: usize,
        cache: &BlockCache,
        grad_out: &[f32],
        grads: &mut [Vec<f32>],
    ) -> Option<Vec<f32>> {
        let spec = &self.spec;
        let (cin, side_in) = (spec.in_channels(j), spec.in_side(j));
        let (cout, ho, wo) = spec.block_shape(j);
        let stride = spec.strides[j];
        let p = ho * wo;
        let k = cin * 9;
        let gamma = &self.params[4 * j + 2];
        {
            let dg = &mut grads[4 * j + 2];
            for c in 0..cout {
                let mut s = 0.0;
                for i in c * p..(c + 1) * p {
                    s += grad_out[i] * cache.xhat[i];
                }
                dg[c] += s;
            }
        }
        {
            let dbeta = &mut grads[4 * j + 3];
            for c in 0..cout {
                dbeta[c] += grad_out[c * p..(c + 1) * p].iter().sum::<f32>();
            }
        }
        let mut dxhat = vec![0.0f32; cout * p];
        for c in 0..cout {
            for i in c * p..(c + 1) * p {
                dxhat[i] = grad_out[i] * gamma[c];
            }
        }
        let n = (cout * p) as f32;
        let sum_d: f32 = dxhat.iter().sum();
        let sum_dx: f32 = dxhat.iter().zip(&cache.xhat).map(|(a, b)| a * b).sum();
        let mut dz = vec![0.0f32; cout * p];
        for i in 0..cout * p {
            if cache.pre[i] > 0.0 {
                dz[i] = cache.inv_std * (dxhat[i] - sum_d / n - cache.xhat[i] * sum_dx / n);
            }
        }
        {
            let dbias = &mut grads[4 * j + 1];
            for c in 0..cout {
                dbias[c] += dz[c * p..(c + 1) * p].iter().sum::<f32>();
            }
        }
        gemm(cout, p, k, &dz, false, &cache.cols, true, 1.0, &mut grads[4 * j]);
        if j == 0 {
            return None;
        }
        let mut dcols = vec![0.0f32; k * p];
        gemm(k, cout, p, &self.params[4 * j], true, &dz, false, 0.0, &mut dcols);
        let mut dx = vec![0.0f32; cin * side_in * side_in];
        for ci in 0..cin {
            let plane = &mut dx[ci * side_in * side_in..(ci + 1) * side_in * side_in];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &dcols[(ci * 9 + ky * 3 + kx) * p..(ci * 9 + ky * 3 + kx + 1) * p];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= side_in as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < side_in as isize {
                                plane[iy as usize * side_in + ix as usize] += row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        Some(dx)
    }

    /// Global average pooling followed by the affine head.
    pub fn head_forward(&self, features: &[f32]) -> (Vec<f32>, HeadCache) {
        let m = self.spec.m;
        let (c, h, w) = self.spec.block_shape(m - 1);
        let p = h * w;
        let pooled: Vec<f32> = (0..c).map(|ch| features[ch * p..(ch + 1) * p].iter().sum::<f32>() / p as f32).collect();
        let (hw, hb) = (&self.params[4 * m], &self.params[4 * m + 1]);
        let logits = (0..self.spec.q)
            .map(|q| hb[q] + hw[q * c..(q + 1) * c].iter().zip(&pooled).map(|(a, b)| a * b).sum::<f32>())
            .collect();
        (logits, HeadCache { pooled })
    }

    /// Accumulates head gradients and returns the gradient of the last block output.
    pub fn head_backward(&self, cache: &HeadCache, grad_logits: &[f32], grads: &mut [Vec<f32>]) -> Vec<f32> {
        let m = self.spec.m;
        let (c, h, w) = self.spec.block_shape(m - 1);
        let p = h * w;
        let hw = &self.params[4 * m];
        for (q, &g) in grad_logits.iter().enumerate() {
            for ch in 0..c {
                grads[4 * m][q * c + ch] += g * cache.pooled[ch];
            }
            grads[4 * m + 1][q] += g;
        }
        let mut df = vec![0.0f32; c * p];
        for ch in 0..c {
            let dp: f32 = grad_logits.iter().enumerate().map(|(q, &g)| g * hw[q * c + ch]).sum::<f32>() / p as f32;
            df[ch * p..(ch + 1) * p].fill(dp);
        }
        df
    }

    /// Plain forward with everything needed for backpropagation.
    pub fn forward_tape(&self, patch: &Patch) -> Result<NetTape> {
        self.check_input(patch)?;
        let mut blocks = Vec::with_capacity(self.spec.m);
        let mut outputs: Vec<Vec<f32>> = Vec::with_capacity(self.spec.m);
        for j in 0..self.spec.m {
            let input = if j == 0 { &patch.data } else { &outputs[j - 1] };
            let (out, cache) = self.block_forward(j, input);
            blocks.push(cache);
            outputs.push(out);
        }
        let (logits, head) = self.head_forward(&outputs[self.spec.m - 1]);
        Ok(NetTape { blocks, outputs, head, logits })
    }

    /// Backpropagates logit gradients through a plain tape. `extra[j]`, when
    /// present, is added to the gradient of block `j`'s output.
    pub fn backward_tape(
        &self,
        tape: &NetTape,
        grad_logits: &[f32],
        extra: Option<&[Vec<f32>]>,
        grads: &mut [Vec<f32>],
    ) {
        let mut g = self.head_backward(&tape.head, grad_logits, grads);
        for j in (0..self.spec.m).rev() {
            if let Some(extra) = extra {
                if !extra[j].is_empty() {
                    for (a, b) in g.iter_mut().zip(&extra[j]) {
                        *a += b;
                    }
                }
            }
            match self.block_backward(j, &tape.blocks[j], &g, grads) {
                Some(next) => g = next,
                None => break,
            }
        }
    }

    /// Block feature maps for blocks `1..=m` and the head logits.
    pub fn backbone_forward(&self, patch: &Patch) -> Result<NetOutput> {
        let tape = self.forward_tape(patch)?;
        let features = tape
            .outputs
            .into_iter()
            .enumerate()
            .map(|(j, v)| FeatureMap::new(self.spec.block_shape(j), j + 1, v))
            .collect::<Result<_>>()?;
        Ok(NetOutput { features, logits: tape.logits })
    }

    pub fn logits(&self, patch: &Patch) -> Result<Vec<f32>> {
        self.check_input(patch)?;
        let mut h = patch.data.clone();
        for j in 0..self.spec.m {
            h = self.block_forward(j, &h).0;
        }
        Ok(self.head_forward(&h).0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_patch(size: usize, seed: u64) -> Patch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Patch { size, data: (0..size * size).map(|_| rng.gen_range(0.0..1.0)).collect() }
    }

    #[test]
    fn desk_spec_shapes() {
        let spec = BackboneSpec::desk(32, 5);
        assert_eq!(spec.m, 6);
        assert_eq!(spec.block_shape(0), (8, 16, 16));
        assert_eq!(spec.block_shape(5), (32, 4, 4));
        assert_eq!(default_k(6), 4);
        assert_eq!(default_k(16), 11);
    }

    #[test]
    fn zero_network_zero_logits() {
        let net = Network::zeros(&BackboneSpec::desk(16, 5)).unwrap();
        assert_eq!(net.logits(&random_patch(16, 1)).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn wrong_input_size_rejected() {
        let net = Network::init(&BackboneSpec::desk(16, 5), 1).unwrap();
        assert!(net.logits(&random_patch(16, 1)).is_ok());
        assert!(matches!(net.logits(&random_patch(12, 1)), Err(DarError::ShapeMismatch(_))));
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = BackboneSpec::desk(16, 5);
        let a = Network::init(&spec, 3).unwrap();
        let b = Network::init(&spec, 3).unwrap();
        assert_eq!(a, b);
        let x = random_patch(16, 2);
        let la = a.backbone_forward(&x).unwrap();
        let lb = b.backbone_forward(&x).unwrap();
        assert_eq!(la.logits.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), lb.logits.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(la.features.len(), 6);
        for (j, f) in la.features.iter().enumerate() {
            assert_eq!(f.shape(), spec.block_shape(j));
            assert!(f.values.iter().all(|v| v.is_finite()));
        }
    }

    /// Finite-difference check of every parameter tensor through a scalar
    /// objective `sum(w_i * logit_i)`. f32 arithmetic, so tolerances are loose.
    #[test]
    fn backprop_matches_finite_differences() {
        let spec = BackboneSpec { m: 3, channels: vec![3, 4, 4], strides: vec![2, 1, 2], input_size: 8, q: 3 };
        let mut net = Network::init(&spec, 11).unwrap();
        // non-trivial affine params
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for j in 0..spec.m {
            for v in net.params[4 * j + 1].iter_mut() {
                *v = rng.gen_range(-0.1..0.1);
            }
            for v in net.params[4 * j + 2].iter_mut() {
                *v = rng.gen_range(0.5..1.5);
            }
            for v in net.params[4 * j + 3].iter_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
        let x = random_patch(8, 9);
        let w = [0.7f32, -1.3, 0.4];
        let objective = |n: &Network| -> f64 {
            n.logits(&x).unwrap().iter().zip(&w).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let tape = net.forward_tape(&x).unwrap();
        let mut grads = net.zero_grads();
        net.backward_tape(&tape, &w, None, &mut grads);
        let h = 2e-3f32;
        let mut checked = 0;
        for t in 0..net.params.len() {
            for i in (0..net.params[t].len()).step_by(3) {
                let orig = net.params[t][i];
                net.params[t][i] = orig + h;
                let up = objective(&net);
                net.params[t][i] = orig - h;
                let down = objective(&net);
                net.params[t][i] = orig;
                let fd = (up - down) / (2.0 * h as f64);
                let an = grads[t][i] as f64;
                let tol = 2e-2 * an.abs().max(fd.abs()).max(0.05);
                assert!((fd - an).abs() <= tol, "tensor {t} idx {i}: fd {fd} vs analytic {an}");
                checked += 1;
            }
        }
        assert!(checked > 50);
    }
}
