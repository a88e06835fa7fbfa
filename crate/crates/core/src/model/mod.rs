//! Shared-encoder, multi-decoder U-Net.
//!
//! One encoder turns the input into a pyramid of skip features; each decoder
//! owns a bottleneck on the pooled coarsest feature and upsamples back to the
//! input resolution, concatenating the matching skip at every level. The
//! `MultiUNet` architecture gives every decoder a private encoder instead and
//! exists for the parameter-count ablation.

pub mod weights;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, WbError};
use crate::tensor::{Graph, Parameter, Tensor4, Var};

pub use weights::{read_checkpoint, write_checkpoint, TrainProgress, FORMAT_VERSION, MAGIC};

/// Target white-balance setting rendered by one decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderId {
    Awb,
    Tungsten,
    Shade,
}

impl DecoderId {
    pub const ALL: [DecoderId; 3] = [DecoderId::Awb, DecoderId::Tungsten, DecoderId::Shade];

    pub fn as_str(self) -> &'static str {
        match self {
            DecoderId::Awb => "awb",
            DecoderId::Tungsten => "tungsten",
            DecoderId::Shade => "shade",
        }
    }

    /// Correlated color temperature of the preset, if it has one.
    pub fn temperature(self) -> Option<f64> {
        match self {
            DecoderId::Awb => None,
            DecoderId::Tungsten => Some(2850.0),
            DecoderId::Shade => Some(7500.0),
        }
    }
}

impl fmt::Display for DecoderId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DecoderId {
    type Err = WbError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "awb" => Ok(DecoderId::Awb),
            "tungsten" | "incandescent" => Ok(DecoderId::Tungsten),
            "shade" => Ok(DecoderId::Shade),
            _ => Err(WbError::UnknownDecoder(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    SharedEncoder,
    MultiUNet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub decoder_ids: Vec<DecoderId>,
    pub conv_kernel: usize,
    pub architecture: Architecture,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            levels: 4,
            base_channels: 24,
            decoder_ids: DecoderId::ALL.to_vec(),
            conv_kernel: 3,
            architecture: Architecture::SharedEncoder,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(WbError::Config(format!("levels must be >= 2, got {}", self.levels)));
        }
        if self.levels > 8 {
            return Err(WbError::Config(format!("levels must be <= 8, got {}", self.levels)));
        }
        if self.base_channels == 0 {
            return Err(WbError::Config("base_channels must be >= 1".into()));
        }
        if self.conv_kernel == 0 || self.conv_kernel.is_multiple_of(2) {
            return Err(WbError::Config(format!(
                "conv_kernel must be odd for same padding, got {}",
                self.conv_kernel
            )));
        }
        if self.decoder_ids.is_empty() {
            return Err(WbError::Config("at least one decoder is required".into()));
        }
        let unique: HashSet<_> = self.decoder_ids.iter().collect();
        if unique.len() != self.decoder_ids.len() {
            return Err(WbError::Config("decoder ids must be unique".into()));
        }
        Ok(())
    }

    /// Channels of 1-based level `level`; `levels + 1` is the bottleneck.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    /// Channel count of every encoder level, finest first.
    pub fn level_channels(&self) -> Vec<usize> {
        (1..=self.levels).map(|l| self.channels(l)).collect()
    }

    /// Input height and width must be multiples of this.
    pub fn required_multiple(&self) -> usize {
        1 << self.levels
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: usize,
    bias: usize,
    pad: usize,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    first: Conv,
    second: Conv,
}

#[derive(Clone, Debug)]
struct Encoder {
    blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
struct Up {
    tconv: Conv,
    block: Block,
}

#[derive(Clone, Debug)]
struct Decoder {
    id: DecoderId,
    encoder: usize,
    bottleneck: Block,
    /// Coarsest first.
    ups: Vec<Up>,
    head: Conv,
}

/// Multi-scale encoder output: one skip feature per level, coarsest last.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPyramid {
    pub skips: Vec<Tensor4>,
    encoder: usize,
}

#[derive(Clone, Debug)]
pub struct WbNet {
    config: NetConfig,
    params: Vec<Parameter>,
    encoders: Vec<Encoder>,
    decoders: Vec<Decoder>,
}

struct Builder {
    params: Vec<Parameter>,
    rng: ChaCha8Rng,
    kernel: usize,
}

impl Builder {
    fn he(&mut self, name: String, dims: [usize; 4], fan_in: usize) -> usize {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let rng = &mut self.rng;
        let t = Tensor4::from_fn(dims, |_| normal.sample(rng) as f32);
        self.params.push(Parameter::new(name, t));
        self.params.len() - 1
    }

    fn zeros(&mut self, name: String, n: usize) -> usize {
        self.params.push(Parameter::new(name, Tensor4::zeros([1, 1, 1, n])));
        self.params.len() - 1
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) -> Conv {
        let weight = self.he(format!("{prefix}.weight"), [cout, cin, k, k], cin * k * k);
        let bias = self.zeros(format!("{prefix}.bias"), cout);
        Conv { weight, bias, pad: k / 2 }
    }

    /// Stride-2 2x2 upsampler. Each output pixel sees exactly `cin` inputs,
    /// which is the fan-in used for He scaling.
    fn tconv(&mut self, prefix: &str, cin: usize, cout: usize) -> Conv {
        let weight = self.he(format!("{prefix}.weight"), [cin, cout, 2, 2], cin);
        let bias = self.zeros(format!("{prefix}.bias"), cout);
        Conv { weight, bias, pad: 0 }
    }

    fn block(&mut self, prefix: &str, cin: usize, cout: usize) -> Block {
        let k = self.kernel;
        Block {
            first: self.conv(&format!("{prefix}.conv1"), cin, cout, k),
            second: self.conv(&format!("{prefix}.conv2"), cout, cout, k),
        }
    }
}

impl WbNet {
    /// Builds a network with He-normal weights and zero biases; deterministic
    /// in `seed`.
    pub fn build(config: NetConfig, seed: u64) -> Result<WbNet> {
        config.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            kernel: config.conv_kernel,
        };
        let levels = config.levels;
        let mut encoders = Vec::new();
        let mut decoders = Vec::new();

        let encoder_prefixes: Vec<String> = match config.architecture {
            Architecture::SharedEncoder => vec!["encoder".to_string()],
            Architecture::MultiUNet => config
                .decoder_ids
                .iter()
                .map(|d| format!("encoder.{d}"))
                .collect(),
        };
        for prefix in &encoder_prefixes {
            let mut blocks = Vec::with_capacity(levels);
            let mut cin = 3;
            for level in 1..=levels {
                let cout = config.channels(level);
                blocks.push(b.block(&format!("{prefix}.level{level}"), cin, cout));
                cin = cout;
            }
            encoders.push(Encoder { blocks });
        }

        for (i, &id) in config.decoder_ids.iter().enumerate() {
            let prefix = format!("decoder.{id}");
            let bottleneck_c = config.channels(levels + 1);
            let bottleneck = b.block(&format!("{prefix}.bottleneck"), config.channels(levels), bottleneck_c);
            let mut ups = Vec::with_capacity(levels);
            let mut cin = bottleneck_c;
            for level in (1..=levels).rev() {
                let c = config.channels(level);
                let tconv = b.tconv(&format!("{prefix}.level{level}.up"), cin, c);
                let block = b.block(&format!("{prefix}.level{level}"), 2 * c, c);
                ups.push(Up { tconv, block });
                cin = c;
            }
            let head = b.conv(&format!("{prefix}.head"), config.channels(1), 3, 1);
            let encoder = match config.architecture {
                Architecture::SharedEncoder => 0,
                Architecture::MultiUNet => i,
            };
            decoders.push(Decoder { id, encoder, bottleneck, ups, head });
        }

        Ok(WbNet {
            config,
            params: b.params,
            encoders,
            decoders,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Parameter::len).sum()
    }

    pub fn decoder_ids(&self) -> &[DecoderId] {
        &self.config.decoder_ids
    }

    fn decoder_index(&self, id: DecoderId) -> Result<usize> {
        self.decoders
            .iter()
            .position(|d| d.id == id)
            .ok_or_else(|| WbError::UnknownDecoder(id.to_string()))
    }

    /// Parameter indices belonging to decoder `id` (its private encoder
    /// excluded).
    pub fn decoder_param_indices(&self, id: DecoderId) -> Result<Vec<usize>> {
        self.decoder_index(id)?;
        let prefix = format!("decoder.{id}.");
        Ok(self
            .params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.name.starts_with(&prefix))
            .map(|(i, _)| i)
            .collect())
    }

    /// Parameter indices of encoder units.
    pub fn encoder_param_indices(&self) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.name.starts_with("encoder"))
            .map(|(i, _)| i)
            .collect()
    }

    /// Puts every parameter on the tape, as tracked leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.tensor.clone())
                } else {
                    g.constant(p.tensor.clone())
                }
            })
            .collect()
    }

    pub fn check_input(&self, dims: [usize; 4]) -> Result<()> {
        let [_, c, h, w] = dims;
        if c != 3 {
            return Err(WbError::shape("encode", "3 input channels", crate::tensor::fmt_dims(dims)));
        }
        let m = self.config.required_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(WbError::NotMultiple {
                op: "encode",
                height: h,
                width: w,
                multiple: m,
            });
        }
        Ok(())
    }

    fn apply_conv(g: &mut Graph, pv: &[Var], c: &Conv, x: Var, relu: bool) -> Result<Var> {
        let y = g.conv2d(x, pv[c.weight], pv[c.bias], 1, c.pad)?;
        Ok(if relu { g.relu(y) } else { y })
    }

    fn apply_block(g: &mut Graph, pv: &[Var], b: &Block, x: Var) -> Result<Var> {
        let h = Self::apply_conv(g, pv, &b.first, x, true)?;
        Self::apply_conv(g, pv, &b.second, h, true)
    }

    /// Records encoder `encoder` on the tape and returns its skip features.
    pub fn encode_graph(&self, g: &mut Graph, pv: &[Var], encoder: usize, x: Var) -> Result<Vec<Var>> {
        self.check_input(g.value(x).dims())?;
        let enc = self
            .encoders
            .get(encoder)
            .ok_or_else(|| WbError::Config(format!("no encoder #{encoder}")))?;
        let mut skips = Vec::with_capacity(enc.blocks.len());
        let mut h = x;
        for (i, block) in enc.blocks.iter().enumerate() {
            if i > 0 {
                h = g.maxpool2x2(h)?;
            }
            h = Self::apply_block(g, pv, block, h)?;
            skips.push(h);
        }
        Ok(skips)
    }

    /// Records decoder `id` on the tape given the skips of its encoder.
    pub fn decode_graph(&self, g: &mut Graph, pv: &[Var], skips: &[Var], id: DecoderId) -> Result<Var> {
        let dec = &self.decoders[self.decoder_index(id)?];
        if skips.len() != self.config.levels {
            return Err(WbError::shape("decode", self.config.levels, skips.len()));
        }
        let coarsest = *skips.last().expect("levels >= 2");
        let pooled = g.maxpool2x2(coarsest)?;
        let mut h = Self::apply_block(g, pv, &dec.bottleneck, pooled)?;
        for (up, &skip) in dec.ups.iter().zip(skips.iter().rev()) {
            let u = g.conv_transpose2d(h, pv[up.tconv.weight], pv[up.tconv.bias], 2)?;
            let cat = g.concat_channels(&[u, skip])?;
            h = Self::apply_block(g, pv, &up.block, cat)?;
        }
        Self::apply_conv(g, pv, &dec.head, h, false)
    }

    /// One encode per encoder unit, then every configured decoder.
    pub fn forward_all_graph(&self, g: &mut Graph, pv: &[Var], x: Var) -> Result<Vec<(DecoderId, Var)>> {
        let ids = self.config.decoder_ids.clone();
        self.forward_graph(g, pv, x, &ids)
    }

    pub fn forward_graph(&self, g: &mut Graph, pv: &[Var], x: Var, ids: &[DecoderId]) -> Result<Vec<(DecoderId, Var)>> {
        let mut pyramids: BTreeMap<usize, Vec<Var>> = BTreeMap::new();
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            let enc = self.decoders[self.decoder_index(id)?].encoder;
            if let std::collections::btree_map::Entry::Vacant(e) = pyramids.entry(enc) {
                let skips = self.encode_graph(g, pv, enc, x)?;
                e.insert(skips);
            }
            let y = self.decode_graph(g, pv, &pyramids[&enc], id)?;
            out.push((id, y));
        }
        Ok(out)
    }

    /// Runs the shared encoder (or, for `MultiUNet`, the first decoder's).
    pub fn encode(&self, image: &Tensor4) -> Result<LatentPyramid> {
        self.encode_with(image, 0)
    }

    /// Runs the encoder that feeds decoder `id`.
    pub fn encode_for(&self, image: &Tensor4, id: DecoderId) -> Result<LatentPyramid> {
        let enc = self.decoders[self.decoder_index(id)?].encoder;
        self.encode_with(image, enc)
    }

    fn encode_with(&self, image: &Tensor4, encoder: usize) -> Result<LatentPyramid> {
        let mut g = Graph::new();
        let pv = self.bind(&mut g, false);
        let x = g.constant(image.clone());
        let skips = self.encode_graph(&mut g, &pv, encoder, x)?;
        Ok(LatentPyramid {
            skips: skips.iter().map(|&s| g.value(s).clone()).collect(),
            encoder,
        })
    }

    pub fn decode(&self, latent: &LatentPyramid, id: DecoderId) -> Result<Tensor4> {
        let dec = &self.decoders[self.decoder_index(id)?];
        if dec.encoder != latent.encoder {
            return Err(WbError::Config(format!(
                "decoder {id} reads encoder #{}, latent came from #{}",
                dec.encoder, latent.encoder
            )));
        }
        let mut g = Graph::new();
        let pv = self.bind(&mut g, false);
        let skips: Vec<Var> = latent.skips.iter().map(|s| g.constant(s.clone())).collect();
        let y = self.decode_graph(&mut g, &pv, &skips, id)?;
        Ok(g.value(y).clone())
    }

    /// Outputs of the requested decoders, sharing encoder passes.
    pub fn forward(&self, image: &Tensor4, ids: &[DecoderId]) -> Result<BTreeMap<DecoderId, Tensor4>> {
        let mut g = Graph::new();
        let pv = self.bind(&mut g, false);
        let x = g.constant(image.clone());
        let outs = self.forward_graph(&mut g, &pv, x, ids)?;
        Ok(outs.into_iter().map(|(id, v)| (id, g.value(v).clone())).collect())
    }

    pub fn forward_all(&self, image: &Tensor4) -> Result<BTreeMap<DecoderId, Tensor4>> {
        let ids = self.config.decoder_ids.clone();
        self.forward(image, &ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Reduction;
    use rand::Rng;

    fn small(arch: Architecture) -> NetConfig {
        NetConfig {
            levels: 2,
            base_channels: 4,
            architecture: arch,
            ..NetConfig::default()
        }
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn([1, 3, h, w], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn default_channel_schedule() {
        assert_eq!(NetConfig::default().level_channels(), vec![24, 48, 96, 192]);
        assert_eq!(NetConfig::default().required_multiple(), 16);
    }

    #[test]
    fn config_validation() {
        let bad = [
            NetConfig { levels: 1, ..NetConfig::default() },
            NetConfig { base_channels: 0, ..NetConfig::default() },
            NetConfig { decoder_ids: vec![], ..NetConfig::default() },
            NetConfig { decoder_ids: vec![DecoderId::Awb, DecoderId::Awb], ..NetConfig::default() },
            NetConfig { conv_kernel: 2, ..NetConfig::default() },
        ];
        for cfg in bad {
            assert!(WbNet::build(cfg.clone(), 0).is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = WbNet::build(small(Architecture::SharedEncoder), 7).unwrap();
        let b = WbNet::build(small(Architecture::SharedEncoder), 7).unwrap();
        let c = WbNet::build(small(Architecture::SharedEncoder), 8).unwrap();
        for (p, q) in a.params().iter().zip(b.params()) {
            assert_eq!(p.tensor, q.tensor);
        }
        assert_ne!(a.params()[0].tensor, c.params()[0].tensor);
        assert!(a.params().iter().filter(|p| p.name.ends_with(".bias")).all(|p| p.tensor.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn he_init_variance() {
        let net = WbNet::build(NetConfig::default(), 3).unwrap();
        let p = net.parameter("encoder.level3.conv2.weight").unwrap();
        assert!(p.len() >= 10_000);
        let n = p.len() as f64;
        let mean = p.tensor.sum() / n;
        let var = p.tensor.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let want = 2.0 / (96.0 * 9.0);
        assert!((var / want - 1.0).abs() < 0.1, "var {var} want {want}");
    }

    #[test]
    fn pyramid_shapes() {
        let net = WbNet::build(NetConfig { base_channels: 2, ..NetConfig::default() }, 1).unwrap();
        let lat = net.encode(&random_image(128, 128, 1)).unwrap();
        let sizes: Vec<_> = lat.skips.iter().map(|s| (s.channels(), s.height())).collect();
        assert_eq!(sizes, vec![(2, 128), (4, 64), (8, 32), (16, 16)]);

        let lat = net.encode(&random_image(16, 16, 2)).unwrap();
        assert_eq!(lat.skips.last().unwrap().dims(), [1, 16, 2, 2]);
    }

    #[test]
    fn rejects_non_multiple_input() {
        let net = WbNet::build(small(Architecture::SharedEncoder), 1).unwrap();
        let err = net.encode(&random_image(18, 16, 1)).unwrap_err();
        assert!(matches!(err, WbError::NotMultiple { multiple: 4, .. }), "{err}");
        assert!(net.encode(&Tensor4::zeros([1, 1, 16, 16])).is_err());
    }

    #[test]
    fn zero_image_gives_zero_skips() {
        let net = WbNet::build(small(Architecture::SharedEncoder), 1).unwrap();
        let lat = net.encode(&Tensor4::zeros([1, 3, 16, 16])).unwrap();
        assert!(lat.skips.iter().all(|s| s.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn decoders_preserve_shape_and_are_deterministic() {
        let net = WbNet::build(small(Architecture::SharedEncoder), 2).unwrap();
        let x = random_image(16, 24, 3);
        let lat = net.encode(&x).unwrap();
        for id in DecoderId::ALL {
            let a = net.decode(&lat, id).unwrap();
            assert_eq!(a.dims(), [1, 3, 16, 24]);
            assert_eq!(a, net.decode(&lat, id).unwrap());
        }
    }

    #[test]
    fn forward_all_equals_encode_then_decode() {
        let net = WbNet::build(small(Architecture::SharedEncoder), 2).unwrap();
        let x = random_image(16, 16, 4);
        let all = net.forward_all(&x).unwrap();
        assert_eq!(all.len(), 3);
        let lat = net.encode(&x).unwrap();
        for (id, y) in &all {
            assert_eq!(y, &net.decode(&lat, *id).unwrap());
        }
    }

    #[test]
    fn unknown_decoder() {
        let cfg = NetConfig { decoder_ids: vec![DecoderId::Awb], ..small(Architecture::SharedEncoder) };
        let net = WbNet::build(cfg, 0).unwrap();
        let lat = net.encode(&random_image(16, 16, 1)).unwrap();
        assert!(matches!(net.decode(&lat, DecoderId::Shade), Err(WbError::UnknownDecoder(_))));
        assert!("daylight".parse::<DecoderId>().is_err());
    }

    #[test]
    fn editing_one_decoder_leaves_others() {
        let mut net = WbNet::build(small(Architecture::SharedEncoder), 5).unwrap();
        let x = random_image(16, 16, 5);
        let lat = net.encode(&x).unwrap();
        let before = net.decode(&lat, DecoderId::Awb).unwrap();
        let before_t = net.decode(&lat, DecoderId::Tungsten).unwrap();
        for i in net.decoder_param_indices(DecoderId::Tungsten).unwrap() {
            net.params_mut()[i].tensor.data_mut().iter_mut().for_each(|v| *v += 0.3);
        }
        assert_eq!(net.decode(&lat, DecoderId::Awb).unwrap(), before);
        assert_ne!(net.decode(&lat, DecoderId::Tungsten).unwrap(), before_t);
    }

    #[test]
    fn multi_unet_matches_independent_nets() {
        let multi = WbNet::build(small(Architecture::MultiUNet), 9).unwrap();
        let x = random_image(16, 16, 6);
        let outs = multi.forward_all(&x).unwrap();
        for (k, id) in DecoderId::ALL.into_iter().enumerate() {
            let cfg = NetConfig { decoder_ids: vec![id], ..small(Architecture::SharedEncoder) };
            let mut single = WbNet::build(cfg, 100 + k as u64).unwrap();
            for p in single.params_mut() {
                let src = if let Some(rest) = p.name.strip_prefix("encoder.") {
                    format!("encoder.{id}.{rest}")
                } else {
                    p.name.clone()
                };
                p.tensor = multi.parameter(&src).unwrap().tensor.clone();
            }
            assert_eq!(single.forward_all(&x).unwrap()[&id], outs[&id]);
        }
    }

    #[test]
    fn param_count_properties() {
        let shared = WbNet::build(small(Architecture::SharedEncoder), 0).unwrap();
        let sum: usize = shared.params().iter().map(|p| p.tensor.len()).sum();
        assert_eq!(shared.param_count(), sum);

        let single = WbNet::build(
            NetConfig { decoder_ids: vec![DecoderId::Awb], ..small(Architecture::SharedEncoder) },
            0,
        )
        .unwrap();
        assert!(shared.param_count() < 3 * single.param_count());
        let multi = WbNet::build(small(Architecture::MultiUNet), 0).unwrap();
        assert_eq!(multi.param_count(), 3 * single.param_count());

        let base = WbNet::build(NetConfig::default(), 0).unwrap().param_count() as f64;
        let doubled = WbNet::build(NetConfig { base_channels: 48, ..NetConfig::default() }, 0)
            .unwrap()
            .param_count() as f64;
        assert!(doubled / base > 3.0 && doubled / base < 5.0);
    }

    #[test]
    fn shared_encoder_gradients_aggregate() {
        let net = WbNet::build(small(Architecture::SharedEncoder), 11).unwrap();
        let x = random_image(16, 16, 12);
        let targets: Vec<Tensor4> = (0..3).map(|i| random_image(16, 16, 20 + i)).collect();

        let run = |which: Option<usize>| -> Vec<Option<Tensor4>> {
            let mut g = Graph::new();
            let pv = net.bind(&mut g, true);
            let xv = g.constant(x.clone());
            let outs = net.forward_all_graph(&mut g, &pv, xv).unwrap();
            let mut losses = Vec::new();
            for (i, (_, y)) in outs.iter().enumerate() {
                if which.is_none_or(|w| w == i) {
                    let t = g.constant(targets[i].clone());
                    losses.push(g.l1_loss(*y, t, Reduction::Mean).unwrap());
                }
            }
            let total = g.sum_all(&losses).unwrap();
            let mut grads = g.backward(total).unwrap();
            pv.iter().map(|&v| grads.take(v)).collect()
        };

        let joint = run(None);
        let parts: Vec<_> = (0..3).map(|i| run(Some(i))).collect();
        for &i in &net.encoder_param_indices() {
            let j = joint[i].as_ref().unwrap().data();
            let (mut diff, mut norm) = (0.0f64, 0.0f64);
            for (k, &jv) in j.iter().enumerate() {
                let s: f64 = parts.iter().map(|p| p[i].as_ref().unwrap().data()[k] as f64).sum();
                diff += (jv as f64 - s).powi(2);
                norm += s * s;
            }
            let rel = (diff / norm).sqrt();
            assert!(rel <= 1e-5, "{}: {rel}", net.params()[i].name);
        }
        for (d, id) in DecoderId::ALL.into_iter().enumerate() {
            for other in DecoderId::ALL.into_iter().filter(|&o| o != id) {
                for i in net.decoder_param_indices(other).unwrap() {
                    let g = parts[d][i].as_ref().map(|t| t.data().iter().all(|&v| v == 0.0)).unwrap_or(true);
                    assert!(g, "decoder {id} loss leaked into {}", net.params()[i].name);
                }
            }
        }
    }
}
