//! Single-view divide-and-rule model and the multi-view fusion head.

use serde::{Deserialize, Serialize};

use crate::attention::{transfer, transfer_backward};
use crate::error::{DarError, Result};
use crate::nn::{BackboneSpec, BlockCache, FeatureMap, HeadCache, NetTape, Network};
use crate::objectives::{sigmoid, softmax};
use crate::volume::{Patch, PatchTriplet, View};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Prd,
    Cf,
    Lr,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Prd, Role::Cf, Role::Lr];

    pub fn name(self) -> &'static str {
        match self {
            Role::Prd => "prd",
            Role::Cf => "cf",
            Role::Lr => "lr",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.name() == s)
    }
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DarModel {
    pub prd: Network,
    pub cf: Network,
    pub lr: Network,
    /// First transferred block, 1-based; `m + 1` disables transfer.
    pub k: usize,
}

/// Per-block maps of one forward. `fused` holds blocks `k..=m` only.
#[derive(Debug, Clone)]
pub struct BlockFeatures {
    pub prd: Vec<FeatureMap>,
    pub cf: Vec<FeatureMap>,
    pub lr: Vec<FeatureMap>,
    pub fused: Vec<FeatureMap>,
}

#[derive(Debug, Clone)]
pub struct DarOutput {
    pub y_prd: Vec<f64>,
    pub y_cf: Vec<f64>,
    pub y_lr: Vec<f64>,
    pub logits_prd: Vec<f64>,
    pub logits_cf: Vec<f64>,
    pub logits_lr: Vec<f64>,
    pub features: BlockFeatures,
}

/// Everything the DAR backward pass needs.
#[derive(Debug, Clone)]
pub struct DarTape {
    prd_blocks: Vec<BlockCache>,
    /// Prd block outputs before augmentation.
    prd_raw: Vec<Vec<f32>>,
    /// Augmented maps at transferred blocks, empty elsewhere.
    prd_fused: Vec<Vec<f32>>,
    prd_head: HeadCache,
    pub cf: NetTape,
    pub lr: NetTape,
    pub logits_prd: Vec<f32>,
}

/// Gradient buffers for the three parameter sets.
#[derive(Debug, Clone)]
pub struct DarGrads {
    pub prd: Vec<Vec<f32>>,
    pub cf: Vec<Vec<f32>>,
    pub lr: Vec<Vec<f32>>,
}

impl DarModel {
    pub fn new(prd: Network, cf: Network, lr: Network, k: usize) -> Result<Self> {
        for (role, net) in [(Role::Cf, &cf), (Role::Lr, &lr)] {
            if net.spec != prd.spec {
                return Err(DarError::SpecMismatch(format!(
                    "{} backbone {:?} differs from prd {:?}",
                    role.name(),
                    net.spec,
                    prd.spec
                )));
            }
        }
        let m = prd.spec.m;
        if k == 0 || k > m + 1 {
            return Err(DarError::Config(format!("k must lie in 1..={} (m+1 disables transfer), got {k}", m + 1)));
        }
        Ok(Self { prd, cf, lr, k })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.prd.spec
    }

    pub fn net(&self, role: Role) -> &Network {
        match role {
            Role::Prd => &self.prd,
            Role::Cf => &self.cf,
            Role::Lr => &self.lr,
        }
    }

    pub fn net_mut(&mut self, role: Role) -> &mut Network {
        match role {
            Role::Prd => &mut self.prd,
            Role::Cf => &mut self.cf,
            Role::Lr => &mut self.lr,
        }
    }

    pub fn zero_grads(&self) -> DarGrads {
        DarGrads { prd: self.prd.zero_grads(), cf: self.cf.zero_grads(), lr: self.lr.zero_grads() }
    }

    fn transferred(&self, j: usize) -> bool {
        j + 1 >= self.k
    }

    pub fn forward_tape(&self, patch: &Patch) -> Result<DarTape> {
        let cf = self.cf.forward_tape(patch)?;
        let lr = self.lr.forward_tape(patch)?;
        let m = self.spec().m;
        let mut prd_blocks = Vec::with_capacity(m);
        let mut prd_raw: Vec<Vec<f32>> = Vec::with_capacity(m);
        let mut prd_fused: Vec<Vec<f32>> = Vec::with_capacity(m);
        for j in 0..m {
            let (raw, cache) = {
                let input = if j == 0 {
                    &patch.data
                } else if self.transferred(j - 1) {
                    &prd_fused[j - 1]
                } else {
                    &prd_raw[j - 1]
                };
                self.prd.block_forward(j, input)
            };
            let fused = if self.transferred(j) { transfer(&raw, &cf.outputs[j], &lr.outputs[j])? } else { Vec::new() };
            prd_blocks.push(cache);
            prd_raw.push(raw);
            prd_fused.push(fused);
        }
        let last = if self.transferred(m - 1) { &prd_fused[m - 1] } else { &prd_raw[m - 1] };
        let (logits_prd, prd_head) = self.prd.head_forward(last);
        Ok(DarTape { prd_blocks, prd_raw, prd_fused, prd_head, cf, lr, logits_prd })
    }

    /// Backpropagates head-logit gradients. Sibling parameters receive
    /// gradients from their own heads and through the attention modules;
    /// `siblings = false` skips their backward pass entirely.
    pub fn backward_tape(
        &self,
        tape: &DarTape,
        g_prd: &[f32],
        g_cf: &[f32],
        g_lr: &[f32],
        grads: &mut DarGrads,
        siblings: bool,
    ) {
        self.backward_split(tape, g_prd, g_cf, g_lr, &mut grads.prd, &mut grads.cf, &mut grads.lr, siblings);
    }

    /// [`Self::backward_tape`] writing into three separate gradient slices.
    #[allow(clippy::too_many_arguments)]
    pub fn backward_split(
        &self,
        tape: &DarTape,
        g_prd: &[f32],
        g_cf: &[f32],
        g_lr: &[f32],
        grads_prd: &mut [Vec<f32>],
        grads_cf: &mut [Vec<f32>],
        grads_lr: &mut [Vec<f32>],
        siblings: bool,
    ) {
        let m = self.spec().m;
        let mut extra_cf: Vec<Vec<f32>> = vec![Vec::new(); m];
        let mut extra_lr: Vec<Vec<f32>> = vec![Vec::new(); m];
        let mut g = self.prd.head_backward(&tape.prd_head, g_prd, grads_prd);
        for j in (0..m).rev() {
            if self.transferred(j) {
                let n = g.len();
                let mut g_raw = vec![0.0f32; n];
                let mut gc = vec![0.0f32; n];
                let mut gl = vec![0.0f32; n];
                transfer_backward(
                    &tape.prd_raw[j],
                    &tape.cf.outputs[j],
                    &tape.lr.outputs[j],
                    &g,
                    &mut g_raw,
                    &mut gc,
                    &mut gl,
                );
                extra_cf[j] = gc;
                extra_lr[j] = gl;
                g = g_raw;
            }
            match self.prd.block_backward(j, &tape.prd_blocks[j], &g, grads_prd) {
                Some(next) => g = next,
                None => break,
            }
        }
        if siblings {
            self.cf.backward_tape(&tape.cf, g_cf, Some(&extra_cf), grads_cf);
            self.lr.backward_tape(&tape.lr, g_lr, Some(&extra_lr), grads_lr);
        }
    }

    pub fn dar_forward(&self, patch: &Patch) -> Result<DarOutput> {
        let tape = self.forward_tape(patch)?;
        let spec = self.spec();
        let maps = |vals: &[Vec<f32>]| -> Result<Vec<FeatureMap>> {
            vals.iter().enumerate().map(|(j, v)| FeatureMap::new(spec.block_shape(j), j + 1, v.clone())).collect()
        };
        let fused = tape
            .prd_fused
            .iter()
            .enumerate()
            .filter(|(j, _)| self.transferred(*j))
            .map(|(j, v)| FeatureMap::new(spec.block_shape(j), j + 1, v.clone()))
            .collect::<Result<_>>()?;
        let features = BlockFeatures {
            prd: maps(&tape.prd_raw)?,
            cf: maps(&tape.cf.outputs)?,
            lr: maps(&tape.lr.outputs)?,
            fused,
        };
        let logits_prd = to_f64(&tape.logits_prd);
        let logits_cf = to_f64(&tape.cf.logits);
        let logits_lr = to_f64(&tape.lr.logits);
        Ok(DarOutput {
            y_prd: softmax(&logits_prd),
            y_cf: logits_cf.iter().map(|&z| sigmoid(z)).collect(),
            y_lr: softmax(&logits_lr),
            logits_prd,
            logits_cf,
            logits_lr,
            features,
        })
    }

    /// Prd logits only; sibling forwards run only when transfer is active.
    pub fn prd_logits(&self, patch: &Patch) -> Result<Vec<f32>> {
        if self.k > self.spec().m {
            return self.prd.logits(patch);
        }
        Ok(self.forward_tape(patch)?.logits_prd)
    }
}

/// One view's classifier inside a multi-view model.
#[derive(Debug, Clone, PartialEq)]
pub enum ViewNet {
    Plain(Network),
    Dar(DarModel),
}

impl ViewNet {
    pub fn spec(&self) -> &BackboneSpec {
        match self {
            ViewNet::Plain(n) => &n.spec,
            ViewNet::Dar(d) => d.spec(),
        }
    }

    pub fn prd_logits(&self, patch: &Patch) -> Result<Vec<f32>> {
        match self {
            ViewNet::Plain(n) => n.logits(patch),
            ViewNet::Dar(d) => d.prd_logits(patch),
        }
    }

    pub fn y_prd(&self, patch: &Patch) -> Result<Vec<f64>> {
        Ok(softmax(&to_f64(&self.prd_logits(patch)?)))
    }
}

/// Affine map from the concatenated per-view probabilities (3Q) to Q logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Fusion {
    pub q: usize,
    /// `Q x 3Q`, row-major.
    pub w: Vec<f32>,
    pub b: Vec<f32>,
}

impl Fusion {
    /// `[I | I | I] / 3` with zero bias: the fused logits are the view average.
    pub fn averaging(q: usize) -> Self {
        let mut w = vec![0.0; q * 3 * q];
        for r in 0..q {
            for v in 0..3 {
                w[r * 3 * q + v * q + r] = 1.0 / 3.0;
            }
        }
        Self { q, w, b: vec![0.0; q] }
    }

    pub fn from_parts(q: usize, w: Vec<f32>, b: Vec<f32>) -> Result<Self> {
        if w.len() != q * 3 * q || b.len() != q {
            return Err(DarError::ShapeMismatch(format!(
                "fusion needs {}x{} weights and {} biases, got {} and {}",
                q,
                3 * q,
                q,
                w.len(),
                b.len()
            )));
        }
        Ok(Self { q, w, b })
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn forward(&self, concat: &[f64]) -> Result<Vec<f64>> {
        if concat.len() != 3 * self.q {
            return Err(DarError::ShapeMismatch(format!("fusion input {} vs {}", concat.len(), 3 * self.q)));
        }
        let n = 3 * self.q;
        Ok((0..self.q)
            .map(|r| self.b[r] as f64 + self.w[r * n..(r + 1) * n].iter().zip(concat).map(|(&w, &x)| w as f64 * x).sum::<f64>())
            .collect())
    }

    /// Accumulates `(dW, db)` and returns the input gradient.
    pub fn backward(&self, concat: &[f64], grad: &[f64], gw: &mut [f64], gb: &mut [f64]) -> Vec<f64> {
        let n = 3 * self.q;
        let mut gx = vec![0.0; n];
        for r in 0..self.q {
            gb[r] += grad[r];
            for i in 0..n {
                gw[r * n + i] += grad[r] * concat[i];
                gx[i] += grad[r] * self.w[r * n + i] as f64;
            }
        }
        gx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MvModel {
    /// Axial, sagittal, coronal.
    pub views: [ViewNet; 3],
    pub fusion: Fusion,
}

impl MvModel {
    pub fn new(views: [ViewNet; 3], fusion: Fusion) -> Result<Self> {
        for (v, net) in View::ALL.iter().zip(&views) {
            if net.spec().q != fusion.q {
                return Err(DarError::ViewMismatch(format!(
                    "{} view emits Q={} but fusion expects Q={}",
                    v.name(),
                    net.spec().q,
                    fusion.q
                )));
            }
            if net.spec().input_size != views[0].spec().input_size {
                return Err(DarError::ViewMismatch(format!("{} view input size differs", v.name())));
            }
        }
        Ok(Self { views, fusion })
    }

    /// Per-view prediction probabilities concatenated in view order.
    pub fn concat_probs(&self, triplet: &PatchTriplet) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(3 * self.fusion.q);
        for (view, net) in View::ALL.iter().zip(&self.views) {
            out.extend(net.y_prd(triplet.view(*view))?);
        }
        Ok(out)
    }

    /// Fused logits; apply softmax for probabilities.
    pub fn mv_forward(&self, triplet: &PatchTriplet) -> Result<Vec<f64>> {
        self.fusion.forward(&self.concat_probs(triplet)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_spec() -> BackboneSpec {
        BackboneSpec { m: 2, channels: vec![3, 4], strides: vec![2, 1], input_size: 6, q: 3 }
    }

    fn random_patch(size: usize, seed: u64) -> Patch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Patch { size, data: (0..size * size).map(|_| rng.gen_range(0.0..1.0)).collect() }
    }

    fn model(spec: &BackboneSpec, k: usize) -> DarModel {
        DarModel::new(
            Network::init(spec, 1).unwrap(),
            Network::init(spec, 2).unwrap(),
            Network::init(spec, 3).unwrap(),
            k,
        )
        .unwrap()
    }

    #[test]
    fn k_range_and_spec_checks() {
        let spec = toy_spec();
        let a = Network::init(&spec, 1).unwrap();
        assert!(DarModel::new(a.clone(), a.clone(), a.clone(), 0).is_err());
        assert!(DarModel::new(a.clone(), a.clone(), a.clone(), 3).is_ok());
        assert!(DarModel::new(a.clone(), a.clone(), a.clone(), 4).is_err());
        let other = Network::init(&BackboneSpec { q: 4, ..spec }, 1).unwrap();
        assert!(matches!(DarModel::new(a.clone(), other, a, 1), Err(DarError::SpecMismatch(_))));
    }

    #[test]
    fn disabled_transfer_is_plain_forward() {
        let spec = BackboneSpec::desk(16, 5);
        let d = model(&spec, spec.m + 1);
        let x = random_patch(16, 4);
        let out = d.dar_forward(&x).unwrap();
        let plain = d.prd.logits(&x).unwrap();
        assert_eq!(out.logits_prd, to_f64(&plain));
        assert_eq!(out.logits_cf, to_f64(&d.cf.logits(&x).unwrap()));
        assert_eq!(out.logits_lr, to_f64(&d.lr.logits(&x).unwrap()));
        assert!(out.features.fused.is_empty());
    }

    #[test]
    fn heads_are_distributions() {
        let spec = BackboneSpec::desk(16, 5);
        let d = model(&spec, 4);
        for s in 0..5 {
            let out = d.dar_forward(&random_patch(16, s)).unwrap();
            assert!((out.y_prd.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!((out.y_lr.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(out.y_cf.iter().all(|&p| p > 0.0 && p < 1.0));
            assert_eq!(out.features.fused.len(), 3);
        }
    }

    /// cf forced to emit -40 everywhere, lr cloned from prd, transfer at the
    /// last block: the transferred map must be exactly three times the raw prd
    /// map. The reference forward is written out block by block here.
    #[test]
    fn forced_siblings_triple_prd_features() {
        let spec = toy_spec();
        let prd = Network::init(&spec, 7).unwrap();
        let mut cf = Network::init(&spec, 8).unwrap();
        for j in 0..spec.m {
            cf.params[4 * j].fill(0.0);
            cf.params[4 * j + 1].fill(0.0);
            cf.params[4 * j + 3].fill(-40.0);
        }
        let d = DarModel::new(prd.clone(), cf, prd.clone(), 2).unwrap();
        let x = random_patch(6, 9);

        let (b1, _) = prd.block_forward(0, &x.data);
        let (b2, _) = prd.block_forward(1, &b1);
        let f2: Vec<f32> = b2.iter().map(|v| 3.0 * v).collect();
        let (reference, _) = prd.head_forward(&f2);

        let out = d.dar_forward(&x).unwrap();
        assert_eq!(out.features.fused.len(), 1);
        assert_eq!(out.features.fused[0].values, f2);
        assert_eq!(out.features.cf[1].values, vec![-40.0; b2.len()]);
        assert_eq!(out.features.prd[1].values, b2);
        for (a, b) in out.logits_prd.iter().zip(&reference) {
            assert_eq!(*a, *b as f64);
        }
    }

    /// Finite differences through the transfer path into all three networks.
    #[test]
    fn dar_backward_matches_finite_differences() {
        let spec = toy_spec();
        let mut d = model(&spec, 1);
        let x = random_patch(6, 5);
        let (wp, wc, wl) = ([0.5f32, -1.0, 0.8], [0.3f32, 0.2, -0.6], [-0.4f32, 0.9, 0.1]);
        let objective = |d: &DarModel| -> f64 {
            let t = d.forward_tape(&x).unwrap();
            let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| (*x as f64) * (*y as f64)).sum::<f64>();
            dot(&t.logits_prd, &wp) + dot(&t.cf.logits, &wc) + dot(&t.lr.logits, &wl)
        };
        let tape = d.forward_tape(&x).unwrap();
        let mut grads = d.zero_grads();
        d.backward_tape(&tape, &wp, &wc, &wl, &mut grads, true);
        let h = 2e-3f32;
        for role in Role::ALL {
            let g = match role {
                Role::Prd => grads.prd.clone(),
                Role::Cf => grads.cf.clone(),
                Role::Lr => grads.lr.clone(),
            };
            for t in 0..g.len() {
                for i in (0..g[t].len()).step_by(5) {
                    let orig = d.net(role).params[t][i];
                    d.net_mut(role).params[t][i] = orig + h;
                    let up = objective(&d);
                    d.net_mut(role).params[t][i] = orig - h;
                    let down = objective(&d);
                    d.net_mut(role).params[t][i] = orig;
                    let fd = (up - down) / (2.0 * h as f64);
                    let an = g[t][i] as f64;
                    let tol = 3e-2 * an.abs().max(fd.abs()).max(0.05);
                    assert!((fd - an).abs() <= tol, "{} tensor {t} idx {i}: fd {fd} vs {an}", role.name());
                }
            }
        }
    }

    #[test]
    fn fusion_identities() {
        let q = 5;
        let f = Fusion::averaging(q);
        assert_eq!(f.param_count(), 80);
        let y = [0.1, 0.2, 0.3, 0.25, 0.15];
        let concat: Vec<f64> = y.iter().chain(&y).chain(&y).cloned().collect();
        assert_eq!(concat.len(), 15);
        let p = f.forward(&concat).unwrap();
        assert_eq!(p.len(), 5);
        for (a, b) in p.iter().zip(&y) {
            assert!((a - b).abs() < 1e-7);
        }
        let bias = vec![0.5f32, -1.0, 2.0, 0.0, 3.0];
        let z = Fusion::from_parts(q, vec![0.0; 75], bias.clone()).unwrap();
        assert_eq!(z.forward(&concat).unwrap(), to_f64(&bias));
        assert!(z.forward(&concat[..10]).is_err());
    }

    #[test]
    fn mv_forward_view_order() {
        let spec = BackboneSpec::desk(16, 5);
        let nets = [1u64, 2, 3].map(|s| ViewNet::Plain(Network::init(&spec, s).unwrap()));
        let mv = MvModel::new(nets, Fusion::averaging(5)).unwrap();
        let t = PatchTriplet { axial: random_patch(16, 1), sagittal: random_patch(16, 2), coronal: random_patch(16, 3) };
        let concat = mv.concat_probs(&t).unwrap();
        assert_eq!(&concat[5..10], mv.views[1].y_prd(&t.sagittal).unwrap().as_slice());
        assert_eq!(mv.mv_forward(&t).unwrap().len(), 5);
    }
}
