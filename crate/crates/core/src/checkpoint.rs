//! Single-file model container.
//!
//! Layout: `"DARC"`, `u32` version, `u64` header length, JSON header, then the
//! tensors as consecutive little-endian `f32` blobs. Offsets in the header
//! count `f32` elements from the start of the blob section.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dar::{DarModel, Fusion, MvModel, Role, ViewNet};
use crate::error::{DarError, Result};
use crate::nn::{BackboneSpec, Network};
use crate::volume::View;

const MAGIC: &[u8; 4] = b"DARC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Network,
    Dar,
    Mv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub view: View,
    /// `None` for a plain prediction network.
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    pub q: usize,
    pub spec: BackboneSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view: Option<View>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub views: Vec<ViewEntry>,
    pub tensors: Vec<TensorEntry>,
}

/// Any model the container can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Network(Network),
    Dar(DarModel),
    Mv(MvModel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Vec<f32>>,
}

struct Builder {
    entries: Vec<TensorEntry>,
    tensors: Vec<Vec<f32>>,
    offset: usize,
}

impl Builder {
    fn new() -> Self {
        Self { entries: Vec::new(), tensors: Vec::new(), offset: 0 }
    }

    fn push(&mut self, name: String, shape: Vec<usize>, data: &[f32]) {
        self.entries.push(TensorEntry { name, shape, offset: self.offset });
        self.offset += data.len();
        self.tensors.push(data.to_vec());
    }

    fn network(&mut self, prefix: &str, net: &Network) {
        for ((name, shape), data) in net.spec.param_shapes().into_iter().zip(&net.params) {
            self.push(format!("{prefix}{name}"), shape, data);
        }
    }
}

fn network_from(spec: &BackboneSpec, tensors: &mut std::slice::Iter<'_, Vec<f32>>) -> Result<Network> {
    let n = spec.param_shapes().len();
    let params: Vec<Vec<f32>> = tensors.by_ref().take(n).cloned().collect();
    if params.len() != n {
        return Err(DarError::Checkpoint("too few tensors for backbone".into()));
    }
    Network::from_params(spec, params)
}

impl Checkpoint {
    pub fn from_network(net: &Network, role: Option<Role>, view: Option<View>) -> Self {
        let mut b = Builder::new();
        b.network("", net);
        Self {
            header: CheckpointHeader {
                kind: ModelKind::Network,
                q: net.spec.q,
                spec: net.spec.clone(),
                k: None,
                role,
                view,
                views: Vec::new(),
                tensors: b.entries,
            },
            tensors: b.tensors,
        }
    }

    pub fn from_dar(dar: &DarModel, view: Option<View>) -> Self {
        let mut b = Builder::new();
        for role in Role::ALL {
            b.network(&format!("{}.", role.name()), dar.net(role));
        }
        Self {
            header: CheckpointHeader {
                kind: ModelKind::Dar,
                q: dar.spec().q,
                spec: dar.spec().clone(),
                k: Some(dar.k),
                role: None,
                view,
                views: Vec::new(),
                tensors: b.entries,
            },
            tensors: b.tensors,
        }
    }

    pub fn from_mv(mv: &MvModel) -> Self {
        let mut b = Builder::new();
        let mut views = Vec::new();
        for (view, net) in View::ALL.iter().zip(&mv.views) {
            match net {
                ViewNet::Plain(n) => {
                    b.network(&format!("{}.prd.", view.name()), n);
                    views.push(ViewEntry { view: *view, k: None });
                }
                ViewNet::Dar(d) => {
                    for role in Role::ALL {
                        b.network(&format!("{}.{}.", view.name(), role.name()), d.net(role));
                    }
                    views.push(ViewEntry { view: *view, k: Some(d.k) });
                }
            }
        }
        let q = mv.fusion.q;
        b.push("fusion.w".into(), vec![q, 3 * q], &mv.fusion.w);
        b.push("fusion.b".into(), vec![q], &mv.fusion.b);
        Self {
            header: CheckpointHeader {
                kind: ModelKind::Mv,
                q,
                spec: mv.views[0].spec().clone(),
                k: None,
                role: None,
                view: None,
                views,
                tensors: b.entries,
            },
            tensors: b.tensors,
        }
    }

    pub fn from_model(model: &Model) -> Self {
        match model {
            Model::Network(n) => Self::from_network(n, None, None),
            Model::Dar(d) => Self::from_dar(d, None),
            Model::Mv(m) => Self::from_mv(m),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let total: usize = self.tensors.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 4 * total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(DarError::Checkpoint("missing DARC magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(DarError::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16usize.saturating_add(hlen)).ok_or_else(|| DarError::Checkpoint("truncated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        let blob = &bytes[16 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected_offset = 0;
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected_offset {
                return Err(DarError::Checkpoint(format!("tensor {} at offset {} expected {}", e.name, e.offset, expected_offset)));
            }
            let raw = blob
                .get(4 * e.offset..4 * (e.offset + n))
                .ok_or_else(|| DarError::Checkpoint(format!("tensor {} runs past the end of the file", e.name)))?;
            tensors.push(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect());
            expected_offset += n;
        }
        if blob.len() != 4 * expected_offset {
            return Err(DarError::Checkpoint(format!("{} trailing bytes", blob.len() as isize - 4 * expected_offset as isize)));
        }
        Ok(Self { header, tensors })
    }

    fn check_names(&self, expected: &Checkpoint) -> Result<()> {
        if expected.header.tensors.len() != self.header.tensors.len() {
            return Err(DarError::Checkpoint(format!(
                "{} tensors, header implies {}",
                self.header.tensors.len(),
                expected.header.tensors.len()
            )));
        }
        for (a, b) in self.header.tensors.iter().zip(&expected.header.tensors) {
            if a.name != b.name || a.shape != b.shape {
                return Err(DarError::Checkpoint(format!("tensor {} {:?} does not match expected {} {:?}", a.name, a.shape, b.name, b.shape)));
            }
        }
        Ok(())
    }

    /// Rebuilds the model, validating every tensor name and shape.
    pub fn to_model(&self) -> Result<Model> {
        let h = &self.header;
        h.spec.validate()?;
        if h.spec.q != h.q {
            return Err(DarError::Checkpoint(format!("header Q={} but backbone Q={}", h.q, h.spec.q)));
        }
        let mut it = self.tensors.iter();
        let model = match h.kind {
            ModelKind::Network => Model::Network(network_from(&h.spec, &mut it)?),
            ModelKind::Dar => {
                let k = h.k.ok_or_else(|| DarError::Checkpoint("dar checkpoint without k".into()))?;
                let prd = network_from(&h.spec, &mut it)?;
                let cf = network_from(&h.spec, &mut it)?;
                let lr = network_from(&h.spec, &mut it)?;
                Model::Dar(DarModel::new(prd, cf, lr, k)?)
            }
            ModelKind::Mv => {
                if h.views.len() != 3 || h.views.iter().zip(View::ALL).any(|(e, v)| e.view != v) {
                    return Err(DarError::Checkpoint("mv checkpoint must list axial, sagittal, coronal".into()));
                }
                let mut nets = Vec::with_capacity(3);
                for e in &h.views {
                    nets.push(match e.k {
                        None => ViewNet::Plain(network_from(&h.spec, &mut it)?),
                        Some(k) => {
                            let prd = network_from(&h.spec, &mut it)?;
                            let cf = network_from(&h.spec, &mut it)?;
                            let lr = network_from(&h.spec, &mut it)?;
                            ViewNet::Dar(DarModel::new(prd, cf, lr, k)?)
                        }
                    });
                }
                let w = it.next().cloned().ok_or_else(|| DarError::Checkpoint("missing fusion.w".into()))?;
                let b = it.next().cloned().ok_or_else(|| DarError::Checkpoint("missing fusion.b".into()))?;
                let views: [ViewNet; 3] = nets.try_into().expect("three views");
                Model::Mv(MvModel::new(views, Fusion::from_parts(h.q, w, b)?)?)
            }
        };
        if it.next().is_some() {
            return Err(DarError::Checkpoint("unexpected extra tensors".into()));
        }
        let mut rebuilt = Checkpoint::from_model(&model);
        rebuilt.header.role = h.role;
        rebuilt.header.view = h.view;
        self.check_names(&rebuilt)?;
        Ok(model)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| DarError::io(parent, e))?;
    }
    std::fs::write(path, ckpt.encode()?).map_err(|e| DarError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| DarError::io(path, e))?;
    Checkpoint::decode(&bytes)
}

pub fn load_network(path: &Path) -> Result<Network> {
    match load_checkpoint(path)?.to_model()? {
        Model::Network(n) => Ok(n),
        _ => Err(DarError::Checkpoint(format!("{} does not hold a single network", path.display()))),
    }
}

pub fn load_dar(path: &Path) -> Result<DarModel> {
    match load_checkpoint(path)?.to_model()? {
        Model::Dar(d) => Ok(d),
        _ => Err(DarError::Checkpoint(format!("{} does not hold a DAR model", path.display()))),
    }
}

pub fn load_mv(path: &Path) -> Result<MvModel> {
    match load_checkpoint(path)?.to_model()? {
        Model::Mv(m) => Ok(m),
        _ => Err(DarError::Checkpoint(format!("{} does not hold a multi-view model", path.display()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> BackboneSpec {
        BackboneSpec::desk(16, 5)
    }

    #[test]
    fn network_round_trip() {
        let net = Network::init(&spec(), 4).unwrap();
        let c = Checkpoint::from_network(&net, Some(Role::Cf), Some(View::Coronal));
        let back = Checkpoint::decode(&c.encode().unwrap()).unwrap();
        assert_eq!(back.header.role, Some(Role::Cf));
        assert_eq!(back.header.view, Some(View::Coronal));
        assert_eq!(back.to_model().unwrap(), Model::Network(net));
    }

    #[test]
    fn mv_round_trip_mixed_views() {
        let s = spec();
        let n = |seed| Network::init(&s, seed).unwrap();
        let dar = DarModel::new(n(1), n(2), n(3), 4).unwrap();
        let mut fusion = Fusion::averaging(5);
        fusion.b[2] = 0.25;
        let mv = MvModel::new([ViewNet::Dar(dar.clone()), ViewNet::Plain(n(5)), ViewNet::Dar(dar)], fusion).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mv.ckpt");
        save_checkpoint(&Checkpoint::from_mv(&mv), &path).unwrap();
        assert_eq!(load_mv(&path).unwrap(), mv);
        assert!(load_dar(&path).is_err());
    }

    #[test]
    fn shape_tampering_rejected() {
        let net = Network::init(&spec(), 4).unwrap();
        let mut c = Checkpoint::from_network(&net, None, None);
        c.header.spec.channels[0] = 9;
        let bytes = c.encode().unwrap();
        assert!(Checkpoint::decode(&bytes).unwrap().to_model().is_err());

        let good = Checkpoint::from_network(&net, None, None).encode().unwrap();
        assert!(Checkpoint::decode(&good[..good.len() - 4]).is_err());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
    }
}
