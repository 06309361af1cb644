//! Density regressor, domain discriminator and the parameter store they
//! share.
//!
//! The regressor is a compact multi-dilation network that maps a
//! single-channel `H x W` patch to a nonnegative `H/4 x W/4` density map.
//! The discriminator reads density maps and outputs the probability that a
//! map was produced from a source-domain image (label 1) rather than a
//! target-domain image (label 0).

use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::tensor::{BnMode, BnStats, ConvSpec, Graph, Tensor, Var};

pub const ARCHITECTURE: &str = "countshift/md-regressor-v1+bn-discriminator-v1";
pub const FORMAT_VERSION: u32 = 1;
pub const OUTPUT_STRIDE: usize = 4;
/// Fixed factor on the regressor head. Ground-truth cells are of order
/// 1e-2, far below what a freshly initialized head emits.
pub const DENSITY_GAIN: f64 = 0.01;

pub const SOURCE_LABEL: f64 = 1.0;
pub const TARGET_LABEL: f64 = 0.0;

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    name: &'static str,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    spec: ConvSpec,
}

const fn layer(name: &'static str, in_ch: usize, out_ch: usize, kernel: usize, spec: ConvSpec) -> ConvLayer {
    ConvLayer {
        name,
        in_ch,
        out_ch,
        kernel,
        spec,
    }
}

const REGRESSOR: [ConvLayer; 6] = [
    layer("reg.conv1", 1, 16, 3, ConvSpec::new(1, 1, 1)),
    layer("reg.conv2", 16, 16, 3, ConvSpec::new(1, 1, 1)),
    layer("reg.conv3", 16, 32, 3, ConvSpec::new(1, 1, 1)),
    layer("reg.conv4", 32, 32, 3, ConvSpec::new(1, 2, 2)),
    layer("reg.conv5", 32, 32, 3, ConvSpec::new(1, 3, 3)),
    layer("reg.head", 32, 1, 1, ConvSpec::new(1, 1, 0)),
];

const DISC_CONV1: ConvLayer = layer("disc.conv1", 1, 8, 3, ConvSpec::new(2, 1, 1));
const DISC_CONV2: ConvLayer = layer("disc.conv2", 8, 1, 3, ConvSpec::new(2, 1, 1));
const DISC_BN: &str = "disc.bn1";

pub fn is_regressor_param(name: &str) -> bool {
    name.starts_with("reg.")
}

pub fn is_discriminator_param(name: &str) -> bool {
    name.starts_with("disc.")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named tensors in architecture order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    architecture: String,
    entries: IndexMap<String, ParamEntry>,
}

impl ParameterStore {
    pub fn new(architecture: impl Into<String>) -> Self {
        ParameterStore {
            architecture: architecture.into(),
            entries: IndexMap::new(),
        }
    }

    pub fn architecture(&self) -> &str {
        &self.architecture
    }

    pub fn format_version(&self) -> u32 {
        FORMAT_VERSION
    }

    /// Inserts or replaces; replacing keeps the original position.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) {
        self.entries.insert(name.into(), ParamEntry { tensor, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensor(name)
            .ok_or_else(|| Error::MalformedModel(format!("missing parameter {name}")))
    }

    /// Places every trainable tensor on `graph`; those accepted by
    /// `differentiate` become gradient-carrying leaves.
    pub fn bind(&self, graph: &mut Graph, differentiate: impl Fn(&str) -> bool) -> Bound {
        let mut vars = IndexMap::new();
        for (name, e) in &self.entries {
            if !e.trainable {
                continue;
            }
            let v = graph.leaf(e.tensor.clone(), differentiate(name));
            vars.insert(name.clone(), v);
        }
        Bound { vars }
    }

    pub fn bn_stats(&self) -> Result<BnStats> {
        Ok(BnStats {
            mean: self.require(&format!("{DISC_BN}.running_mean"))?.data().to_vec(),
            var: self.require(&format!("{DISC_BN}.running_var"))?.data().to_vec(),
        })
    }

    pub fn set_bn_stats(&mut self, stats: &BnStats) -> Result<()> {
        for (suffix, values) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let name = format!("{DISC_BN}.{suffix}");
            let e = self
                .entries
                .get_mut(&name)
                .ok_or_else(|| Error::MalformedModel(format!("missing parameter {name}")))?;
            e.tensor.data_mut().copy_from_slice(values);
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(|e| e.tensor.is_finite())
    }
}

/// Graph handles for the parameters of one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    /// Handles for leaves already placed on a graph by the caller.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Collects gradients for the differentiated parameters after a
    /// backward pass.
    pub fn gradients(&self, graph: &Graph) -> crate::adam::Gradients {
        self.vars
            .iter()
            .filter_map(|(name, &v)| graph.grad(v).map(|g| (name.clone(), g.to_vec())))
            .collect()
    }
}

/// Fresh parameters: fan-in scaled uniform conv weights in
/// `[-sqrt(6/fan_in), sqrt(6/fan_in)]`, zero biases, unit batch-norm scale.
pub fn init_params(seed: u64) -> ParameterStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new(ARCHITECTURE);
    let mut conv = |store: &mut ParameterStore, l: &ConvLayer| {
        let fan_in = l.in_ch * l.kernel * l.kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = l.out_ch * fan_in;
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        store.insert(
            format!("{}.weight", l.name),
            Tensor::new(vec![l.out_ch, l.in_ch, l.kernel, l.kernel], w).expect("layer table"),
            true,
        );
        store.insert(format!("{}.bias", l.name), Tensor::zeros(&[l.out_ch]), true);
    };
    for l in &REGRESSOR {
        conv(&mut store, l);
    }
    conv(&mut store, &DISC_CONV1);
    let c = DISC_CONV1.out_ch;
    store.insert(format!("{DISC_BN}.gamma"), Tensor::full(&[c], 1.0), true);
    store.insert(format!("{DISC_BN}.beta"), Tensor::zeros(&[c]), true);
    store.insert(format!("{DISC_BN}.running_mean"), Tensor::zeros(&[c]), false);
    store.insert(format!("{DISC_BN}.running_var"), Tensor::full(&[c], 1.0), false);
    conv(&mut store, &DISC_CONV2);
    store
}

fn conv(graph: &mut Graph, p: &Bound, l: &ConvLayer, x: Var) -> Result<Var> {
    graph.conv2d(
        x,
        p.var(&format!("{}.weight", l.name)),
        p.var(&format!("{}.bias", l.name)),
        l.spec,
    )
}

/// Regressor forward over `[N, 1, H, W]` (or `[1, H, W]`) images.
pub fn regressor_forward(graph: &mut Graph, p: &Bound, images: Var) -> Result<Var> {
    let shape = graph.value(images).shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
        return Err(Error::InvalidShape(format!(
            "regressor input {h}x{w} is not divisible by {OUTPUT_STRIDE}"
        )));
    }
    let [c1, c2, c3, c4, c5, head] = &REGRESSOR;
    let mut x = conv(graph, p, c1, images)?;
    x = graph.relu(x);
    x = conv(graph, p, c2, x)?;
    x = graph.relu(x);
    x = graph.avgpool2(x)?;
    x = conv(graph, p, c3, x)?;
    x = graph.relu(x);
    x = graph.avgpool2(x)?;
    x = conv(graph, p, c4, x)?;
    x = graph.relu(x);
    x = conv(graph, p, c5, x)?;
    x = graph.relu(x);
    x = conv(graph, p, head, x)?;
    x = graph.relu(x);
    Ok(graph.scale(x, DENSITY_GAIN))
}

/// Discriminator forward over `[N, 1, h, w]` maps; returns `[N]`
/// source-probabilities.
pub fn discriminator_forward(
    graph: &mut Graph,
    p: &Bound,
    maps: Var,
    mode: BnMode,
    stats: &mut BnStats,
) -> Result<Var> {
    let mut x = conv(graph, p, &DISC_CONV1, maps)?;
    x = graph.batchnorm(
        x,
        p.var(&format!("{DISC_BN}.gamma")),
        p.var(&format!("{DISC_BN}.beta")),
        mode,
        stats,
    )?;
    x = graph.relu(x);
    x = conv(graph, p, &DISC_CONV2, x)?;
    x = graph.mean_per_item(x);
    Ok(graph.sigmoid(x))
}

/// Gradient reversal followed by the discriminator.
pub fn discriminate_on_graph(
    graph: &mut Graph,
    p: &Bound,
    maps: Var,
    mu: f64,
    mode: BnMode,
    stats: &mut BnStats,
) -> Result<Var> {
    let reversed = graph.grad_reverse(maps, mu)?;
    discriminator_forward(graph, p, reversed, mode, stats)
}

/// Predicted density map of a single `[0,1]`-valued `H x W` image.
pub fn regress_density(params: &ParameterStore, image: &Tensor) -> Result<DensityMap> {
    let mut maps = regress_batch(params, image)?;
    Ok(maps.remove(0))
}

/// Predicted maps for `[N, 1, H, W]` or `[1, H, W]` images.
pub fn regress_batch(params: &ParameterStore, images: &Tensor) -> Result<Vec<DensityMap>> {
    let images = match images.shape().len() {
        2 => {
            let s = images.shape().to_vec();
            images.clone().reshape(vec![1, 1, s[0], s[1]])?
        }
        3 => {
            let s = images.shape().to_vec();
            images.clone().reshape(vec![1, s[0], s[1], s[2]])?
        }
        _ => images.clone(),
    };
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph, |_| false);
    let x = graph.input(images);
    let y = regressor_forward(&mut graph, &bound, x)?;
    let out = graph.value(y);
    let (n, h, w) = (out.shape()[0], out.shape()[2], out.shape()[3]);
    Ok(out
        .data()
        .chunks_exact(h * w)
        .take(n)
        .map(|c| DensityMap::from_data(h, w, OUTPUT_STRIDE, c.to_vec()).expect("extents"))
        .collect())
}

/// Source-probability of one map, using the stored running statistics.
pub fn discriminate(params: &ParameterStore, map: &DensityMap, mu: f64) -> Result<f64> {
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph, |_| false);
    let mut stats = params.bn_stats()?;
    let x = graph.input(map.to_tensor().reshape(vec![1, 1, map.height(), map.width()])?);
    let p = discriminate_on_graph(&mut graph, &bound, x, mu, BnMode::Eval, &mut stats)?;
    Ok(graph.scalar(p))
}

/// Hyperparameters recorded in a model file header: the loss weights that
/// were in effect while producing the weights, and the optimizer constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub margin: f64,
    pub pair_threshold: f64,
    pub sub_fraction: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            alpha: 0.0,
            lambda1: 0.0,
            lambda2: 0.0,
            margin: 0.0,
            pair_threshold: 5.0,
            sub_fraction: 0.8,
            adam_beta1: ADAM_BETA1,
            adam_beta2: ADAM_BETA2,
            adam_eps: ADAM_EPS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ModelHeader {
    format_version: u32,
    architecture: String,
    hyperparameters: Hyperparameters,
    seed: u64,
    tensors: Vec<TensorHeader>,
}

/// A stored model: parameters plus provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub params: ParameterStore,
    pub hyperparameters: Hyperparameters,
    pub seed: u64,
}

impl Model {
    /// Header line of compact JSON, `\n`, then every tensor as
    /// little-endian f64 in header order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = ModelHeader {
            format_version: FORMAT_VERSION,
            architecture: self.params.architecture.clone(),
            hyperparameters: self.hyperparameters.clone(),
            seed: self.seed,
            tensors: self
                .params
                .iter()
                .map(|(n, e)| TensorHeader {
                    name: n.to_string(),
                    shape: e.tensor.shape().to_vec(),
                    trainable: e.trainable,
                })
                .collect(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        for (_, e) in self.params.iter() {
            for v in e.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::MalformedModel("missing header terminator".into()))?;
        let header: ModelHeader = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::MalformedModel(format!("bad header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::MalformedModel(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let mut blob = &bytes[nl + 1..];
        let mut params = ParameterStore::new(header.architecture);
        for t in header.tensors {
            let n: usize = t.shape.iter().product();
            if blob.len() < 8 * n {
                return Err(Error::MalformedModel(format!("blob truncated at {}", t.name)));
            }
            let data = blob[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            blob = &blob[8 * n..];
            params.insert(t.name, Tensor::new(t.shape, data)?, t.trainable);
        }
        if !blob.is_empty() {
            return Err(Error::MalformedModel(format!("{} trailing bytes", blob.len())));
        }
        Ok(Model {
            params,
            hyperparameters: header.hyperparameters,
            seed: header.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(store: &ParameterStore) -> Vec<u64> {
        store
            .iter()
            .flat_map(|(_, e)| e.tensor.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect()
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        assert_eq!(bits(&init_params(7)), bits(&init_params(7)));
        assert_ne!(bits(&init_params(7)), bits(&init_params(8)));
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let store = init_params(3);
        for (name, e) in store.iter() {
            if !name.ends_with(".weight") {
                continue;
            }
            let s = e.tensor.shape();
            let fan_in = s[1] * s[2] * s[3];
            let bound = (6.0 / fan_in as f64).sqrt();
            assert!(e.tensor.data().iter().all(|w| w.abs() <= bound), "{name}");
        }
        assert!(store.tensor("reg.conv1.bias").unwrap().data().iter().all(|&b| b == 0.0));
        assert!(store.tensor("disc.bn1.gamma").unwrap().data().iter().all(|&b| b == 1.0));
    }

    #[test]
    fn regressor_output_shape_and_sign() {
        let store = init_params(1);
        let img = Tensor::new(
            vec![1, 32, 32],
            (0..1024).map(|i| ((i * 37) % 255) as f64 / 255.0).collect(),
        )
        .unwrap();
        let map = regress_density(&store, &img).unwrap();
        assert_eq!((map.height(), map.width()), (8, 8));
        assert!(map.data().iter().all(|&v| v >= 0.0));
        let again = regress_density(&store, &img).unwrap();
        assert_eq!(map, again);
    }

    #[test]
    fn zero_head_predicts_nothing() {
        let mut store = init_params(1);
        for n in ["reg.head.weight", "reg.head.bias"] {
            store.get_mut(n).unwrap().tensor.data_mut().fill(0.0);
        }
        let img = Tensor::full(&[1, 16, 16], 0.5);
        let map = regress_density(&store, &img).unwrap();
        assert_eq!(crate::density::count_of(&map), 0.0);
    }

    #[test]
    fn rejects_indivisible_input() {
        let store = init_params(1);
        let img = Tensor::full(&[1, 18, 16], 0.5);
        assert!(matches!(
            regress_density(&store, &img),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn discriminator_output_in_unit_interval_and_grl_invisible_forward() {
        let store = init_params(5);
        let map = DensityMap::from_data(8, 8, 4, (0..64).map(|i| i as f64 * 0.01).collect()).unwrap();
        let a = discriminate(&store, &map, 0.0).unwrap();
        let b = discriminate(&store, &map, 1.0).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(a > 0.0 && a < 1.0);
    }

    #[test]
    fn model_bytes_roundtrip_exactly() {
        let model = Model {
            params: init_params(11),
            hyperparameters: Hyperparameters {
                alpha: 0.1,
                lambda2: 1.0 / 26.0,
                ..Hyperparameters::default()
            },
            seed: 11,
        };
        let bytes = model.to_bytes().unwrap();
        let back = Model::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(bits(&back.params), bits(&model.params));
        assert_eq!(back.hyperparameters, model.hyperparameters);
    }

    #[test]
    fn truncated_model_rejected() {
        let model = Model {
            params: init_params(2),
            hyperparameters: Hyperparameters::default(),
            seed: 2,
        };
        let bytes = model.to_bytes().unwrap();
        assert!(Model::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Model::from_bytes(b"{}").is_err());
    }
}
