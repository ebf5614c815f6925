//! The dual network: a texture mini U-Net, and a topology mini U-Net whose
//! encoder ends in a squeeze-and-excitation gate and whose decoder answers
//! the binary foreground question.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, BoundParams, Graph, ParamId, ParamStore, Tensor, Var};
use crate::types::{one_hot, ClassKind, FeatureEmbedding, InputImage, ProbabilityMap, SegmentationMask};

/// Shape of one mini U-Net.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiniUNetSpec {
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub bilinear_upsampling: bool,
}

impl MiniUNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.base_channels < 1 || self.in_channels < 1 || self.out_channels < 1 {
            return Err(Error::Config(format!("degenerate mini U-Net {self:?}")));
        }
        if !self.bilinear_upsampling {
            return Err(Error::Config(
                "only bilinear upsampling is implemented".into(),
            ));
        }
        Ok(())
    }

    /// Channels at encoder level `l`; level `depth` is the bottleneck.
    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn stride(&self) -> usize {
        1 << self.depth
    }
}

/// User-facing model settings shared by both mini U-Nets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub base_channels: usize,
    /// Upper bound on group-norm groups; the largest divisor of each layer's
    /// channel count not exceeding it is used.
    pub norm_groups: usize,
    pub se_reduction: usize,
    pub bilinear_upsampling: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 32,
            norm_groups: 8,
            se_reduction: 4,
            bilinear_upsampling: true,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.norm_groups == 0 || self.se_reduction == 0 {
            return Err(Error::Config("norm_groups and se_reduction must be positive".into()));
        }
        self.texture_spec(1, 1).validate()
    }

    pub fn texture_spec(&self, image_channels: usize, num_classes: usize) -> MiniUNetSpec {
        MiniUNetSpec {
            depth: self.depth,
            base_channels: self.base_channels,
            in_channels: image_channels,
            out_channels: num_classes + 1,
            bilinear_upsampling: self.bilinear_upsampling,
        }
    }

    pub fn topology_spec(&self, num_classes: usize) -> MiniUNetSpec {
        MiniUNetSpec {
            depth: self.depth,
            base_channels: self.base_channels,
            in_channels: num_classes + 1,
            out_channels: 1,
            bilinear_upsampling: self.bilinear_upsampling,
        }
    }
}

fn groups_for(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

/// Registers parameters either He-initialized from `rng` or zero-filled.
struct Init<'a> {
    store: &'a mut ParamStore,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl Init<'_> {
    fn weight(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> ParamId {
        match self.rng.as_deref_mut() {
            Some(rng) => self.store.register_he(name, shape, fan_in, rng),
            None => self.store.register(name, Tensor::zeros(shape)),
        }
    }

    fn fill(&mut self, name: String, len: usize, value: f64) -> ParamId {
        self.store.register(name, Tensor::full(vec![len], value))
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn new(init: &mut Init<'_>, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        Self {
            w: init.weight(format!("{name}.w"), vec![cout, cin, k, k], cin * k * k),
            b: init.fill(format!("{name}.b"), cout, 0.0),
        }
    }

    fn apply(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Var {
        g.conv2d(x, p.var(self.w), p.var(self.b))
    }
}

/// Two rounds of 3x3 convolution, group normalization and ReLU.
#[derive(Debug, Clone)]
struct ConvBlock {
    convs: [Conv; 2],
    norms: [(ParamId, ParamId); 2],
    groups: usize,
}

impl ConvBlock {
    fn new(init: &mut Init<'_>, name: &str, cin: usize, cout: usize, max_groups: usize) -> Self {
        let mut norm = |i: usize| {
            (
                init.fill(format!("{name}.norm{i}.gamma"), cout, 1.0),
                init.fill(format!("{name}.norm{i}.beta"), cout, 0.0),
            )
        };
        let norms = [norm(1), norm(2)];
        Self {
            convs: [
                Conv::new(init, &format!("{name}.conv1"), cin, cout, 3),
                Conv::new(init, &format!("{name}.conv2"), cout, cout, 3),
            ],
            norms,
            groups: groups_for(cout, max_groups),
        }
    }

    fn apply(&self, g: &mut Graph, p: &BoundParams, mut x: Var) -> Var {
        for (conv, &(gamma, beta)) in self.convs.iter().zip(&self.norms) {
            x = conv.apply(g, p, x);
            x = g.group_norm(x, p.var(gamma), p.var(beta), self.groups);
            x = g.relu(x);
        }
        x
    }
}

/// Contracting path: one block per level plus the bottleneck block.
#[derive(Debug, Clone)]
struct Encoder {
    blocks: Vec<ConvBlock>,
}

impl Encoder {
    fn new(init: &mut Init<'_>, name: &str, spec: &MiniUNetSpec, max_groups: usize) -> Self {
        let blocks = (0..=spec.depth)
            .map(|l| {
                let cin = if l == 0 { spec.in_channels } else { spec.level_channels(l - 1) };
                ConvBlock::new(init, &format!("{name}.enc{l}"), cin, spec.level_channels(l), max_groups)
            })
            .collect();
        Self { blocks }
    }

    /// Returns the bottleneck and the pre-pool skip tensor of each level.
    fn apply(&self, g: &mut Graph, p: &BoundParams, x: Var) -> (Var, Vec<Var>) {
        let depth = self.blocks.len() - 1;
        let mut skips = Vec::with_capacity(depth);
        let mut x = x;
        for (l, block) in self.blocks.iter().enumerate() {
            if l > 0 {
                x = g.max_pool2(x);
            }
            x = block.apply(g, p, x);
            if l < depth {
                skips.push(x);
            }
        }
        (x, skips)
    }
}

/// Expanding path followed by a 1x1 projection.
#[derive(Debug, Clone)]
struct Decoder {
    blocks: Vec<ConvBlock>,
    head: Conv,
}

impl Decoder {
    fn new(init: &mut Init<'_>, name: &str, spec: &MiniUNetSpec, max_groups: usize) -> Self {
        // blocks[l] consumes upsampled level l+1 concatenated with skip l
        let blocks = (0..spec.depth)
            .map(|l| {
                let cin = spec.level_channels(l + 1) + spec.level_channels(l);
                ConvBlock::new(init, &format!("{name}.dec{l}"), cin, spec.level_channels(l), max_groups)
            })
            .collect();
        let head = Conv::new(init, &format!("{name}.head"), spec.base_channels, spec.out_channels, 1);
        Self { blocks, head }
    }

    fn apply(&self, g: &mut Graph, p: &BoundParams, bottleneck: Var, skips: &[Var]) -> Var {
        let mut x = bottleneck;
        for l in (0..self.blocks.len()).rev() {
            let up = g.upsample2(x);
            let cat = g.concat(up, skips[l]);
            x = self.blocks[l].apply(g, p, cat);
        }
        self.head.apply(g, p, x)
    }
}

/// Squeeze-and-excitation gate: channel means through a two-layer MLP and a
/// sigmoid, multiplied back onto the feature map.
#[derive(Debug, Clone, Copy)]
struct SeBlock {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl SeBlock {
    fn new(init: &mut Init<'_>, name: &str, channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction).max(1);
        Self {
            w1: init.weight(format!("{name}.fc1.w"), vec![hidden, channels], channels),
            b1: init.fill(format!("{name}.fc1.b"), hidden, 0.0),
            w2: init.weight(format!("{name}.fc2.w"), vec![channels, hidden], hidden),
            b2: init.fill(format!("{name}.fc2.b"), channels, 0.0),
        }
    }

    fn apply(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Var {
        let pooled = g.global_avg_pool(x);
        let h = g.linear(pooled, p.var(self.w1), p.var(self.b1));
        let h = g.relu(h);
        let s = g.linear(h, p.var(self.w2), p.var(self.b2));
        let s = g.sigmoid(s);
        g.scale_channels(x, s)
    }
}

/// Whether a forward pass builds the positive and negative branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone)]
pub struct GraphOutputs {
    pub p_tex: Var,
    pub p_top: Var,
    pub anchor: Var,
    pub pos: Option<Var>,
    pub neg: Option<Var>,
}

/// Skip tensors from the topology encoder, finest level first.
#[derive(Debug, Clone, PartialEq)]
pub struct Skips(pub Vec<Tensor>);

#[derive(Debug, Clone, PartialEq)]
pub struct DtuOutputs {
    pub p_tex: ProbabilityMap,
    pub p_top: ProbabilityMap,
    pub anchor: FeatureEmbedding,
    pub pos: Option<FeatureEmbedding>,
    pub neg: Option<FeatureEmbedding>,
}

#[derive(Debug, Clone)]
pub struct DtuNet {
    config: ModelConfig,
    image_channels: usize,
    class_kinds: Vec<ClassKind>,
    params: ParamStore,
    tex_enc: Encoder,
    tex_dec: Decoder,
    top_enc: Encoder,
    se: SeBlock,
    top_dec: Decoder,
}

impl DtuNet {
    /// Fresh network with He-initialized weights drawn from `config.init_seed`.
    pub fn new(config: ModelConfig, image_channels: usize, class_kinds: Vec<ClassKind>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        Self::build(config, image_channels, class_kinds, Some(&mut rng))
    }

    fn build(
        config: ModelConfig,
        image_channels: usize,
        class_kinds: Vec<ClassKind>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Self> {
        config.validate()?;
        if image_channels != 1 && image_channels != 3 {
            return Err(Error::Config(format!("image channels must be 1 or 3, got {image_channels}")));
        }
        if class_kinds.is_empty() {
            return Err(Error::Config("model needs at least one foreground class".into()));
        }
        let c = class_kinds.len();
        let tex = config.texture_spec(image_channels, c);
        let top = config.topology_spec(c);
        let mut params = ParamStore::new();
        let mut init = Init { store: &mut params, rng };
        let g = config.norm_groups;
        let tex_enc = Encoder::new(&mut init, "texture", &tex, g);
        let tex_dec = Decoder::new(&mut init, "texture", &tex, g);
        let top_enc = Encoder::new(&mut init, "topology", &top, g);
        let se = SeBlock::new(&mut init, "topology.se", top.level_channels(top.depth), config.se_reduction);
        let top_dec = Decoder::new(&mut init, "topology", &top, g);
        Ok(Self {
            config,
            image_channels,
            class_kinds,
            params,
            tex_enc,
            tex_dec,
            top_enc,
            se,
            top_dec,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn image_channels(&self) -> usize {
        self.image_channels
    }

    pub fn num_classes(&self) -> usize {
        self.class_kinds.len()
    }

    pub fn class_kinds(&self) -> &[ClassKind] {
        &self.class_kinds
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn texture_spec(&self) -> MiniUNetSpec {
        self.config.texture_spec(self.image_channels, self.num_classes())
    }

    pub fn topology_spec(&self) -> MiniUNetSpec {
        self.config.topology_spec(self.num_classes())
    }

    pub fn stride(&self) -> usize {
        1 << self.config.depth
    }

    /// Parameter count of the texture net alone.
    pub fn texture_numel(&self) -> usize {
        self.params
            .names()
            .iter()
            .zip(self.params.tensors())
            .filter(|(n, _)| n.starts_with("texture."))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Ids of the SE gate's MLP weights and biases.
    pub fn se_params(&self) -> [ParamId; 4] {
        [self.se.w1, self.se.b1, self.se.w2, self.se.b2]
    }

    /// Ids of the topology decoder's final 1x1 projection.
    pub fn topology_head_params(&self) -> [ParamId; 2] {
        [self.top_dec.head.w, self.top_dec.head.b]
    }

    pub fn check_spatial(&self, height: usize, width: usize) -> Result<()> {
        let s = self.stride();
        if height % s != 0 || width % s != 0 {
            return Err(Error::shape(
                format!("sides divisible by {s}"),
                format!("{height}x{width}"),
            ));
        }
        Ok(())
    }

    fn check_image(&self, image: &InputImage) -> Result<()> {
        if image.channels() != self.image_channels {
            return Err(Error::shape(
                format!("{} image channels", self.image_channels),
                image.channels(),
            ));
        }
        self.check_spatial(image.height(), image.width())
    }

    fn check_mask(&self, mask: &SegmentationMask, h: usize, w: usize) -> Result<()> {
        if mask.height() != h || mask.width() != w || mask.num_classes() != self.num_classes() {
            return Err(Error::shape(
                format!("{h}x{w} mask with {} classes", self.num_classes()),
                format!("{}x{} mask with {} classes", mask.height(), mask.width(), mask.num_classes()),
            ));
        }
        Ok(())
    }

    /// Θ: softmax over `c + 1` classes.
    pub fn texture_vars(&self, g: &mut Graph, p: &BoundParams, image: Var) -> Var {
        let (bottleneck, skips) = self.tex_enc.apply(g, p, image);
        let logits = self.tex_dec.apply(g, p, bottleneck, &skips);
        g.softmax_channels(logits)
    }

    /// Ψ: gated bottleneck embedding and skips.
    pub fn encode_vars(&self, g: &mut Graph, p: &BoundParams, probs: Var) -> (Var, Vec<Var>) {
        let (bottleneck, skips) = self.top_enc.apply(g, p, probs);
        (self.se.apply(g, p, bottleneck), skips)
    }

    /// Ω: single-channel foreground probability.
    pub fn decode_vars(&self, g: &mut Graph, p: &BoundParams, emb: Var, skips: &[Var]) -> Var {
        let logits = self.top_dec.apply(g, p, emb, skips);
        g.sigmoid(logits)
    }

    /// Records a full forward pass. With `targets`, the positive and
    /// negative branches run through the same Ψ weights as the anchor.
    pub fn forward_vars(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        image: &InputImage,
        targets: Option<(&SegmentationMask, &SegmentationMask)>,
    ) -> Result<GraphOutputs> {
        self.check_image(image)?;
        let (h, w) = (image.height(), image.width());
        let x = g.constant(Tensor::new(vec![image.channels(), h, w], image.data().to_vec()));
        let p_tex = self.texture_vars(g, p, x);
        let (anchor, skips) = self.encode_vars(g, p, p_tex);
        let p_top = self.decode_vars(g, p, anchor, &skips);
        let (pos, neg) = match targets {
            Some((gt, corrupted)) => {
                self.check_mask(gt, h, w)?;
                self.check_mask(corrupted, h, w)?;
                let mut branch = |m: &SegmentationMask| -> Result<Var> {
                    let oh = one_hot(m)?;
                    let v = g.constant(Tensor::new(vec![oh.channels(), h, w], oh.into_data()));
                    Ok(self.encode_vars(g, p, v).0)
                };
                (Some(branch(gt)?), Some(branch(corrupted)?))
            }
            None => (None, None),
        };
        Ok(GraphOutputs { p_tex, p_top, anchor, pos, neg })
    }

    fn embedding(&self, t: &Tensor) -> Result<FeatureEmbedding> {
        let (c, h, w) = t.chw();
        FeatureEmbedding::new(c, h, w, self.stride(), t.data().to_vec())
    }

    fn probmap(t: &Tensor) -> Result<ProbabilityMap> {
        let (c, h, w) = t.chw();
        // softmax rounding can leave sums a few ulps from 1; clamp only
        ProbabilityMap::new(h, w, c, t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    pub fn texture_forward(&self, image: &InputImage) -> Result<ProbabilityMap> {
        self.check_image(image)?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(Tensor::new(
            vec![image.channels(), image.height(), image.width()],
            image.data().to_vec(),
        ));
        let out = self.texture_vars(&mut g, &p, x);
        Self::probmap(g.value(out))
    }

    pub fn topology_encode(&self, probs: &ProbabilityMap) -> Result<(FeatureEmbedding, Skips)> {
        if probs.channels() != self.num_classes() + 1 {
            return Err(Error::shape(self.num_classes() + 1, probs.channels()));
        }
        self.check_spatial(probs.height(), probs.width())?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(Tensor::new(
            vec![probs.channels(), probs.height(), probs.width()],
            probs.data().to_vec(),
        ));
        let (emb, skips) = self.encode_vars(&mut g, &p, x);
        let skips = Skips(skips.iter().map(|&s| g.value(s).clone()).collect());
        Ok((self.embedding(g.value(emb))?, skips))
    }

    pub fn topology_decode(&self, emb: &FeatureEmbedding, skips: &Skips) -> Result<ProbabilityMap> {
        let spec = self.topology_spec();
        let bottleneck_c = spec.level_channels(spec.depth);
        if emb.channels() != bottleneck_c || skips.0.len() != spec.depth {
            return Err(Error::shape(
                format!("{bottleneck_c}-channel embedding with {} skips", spec.depth),
                format!("{}-channel embedding with {} skips", emb.channels(), skips.0.len()),
            ));
        }
        for (l, s) in skips.0.iter().enumerate() {
            let expected = [spec.level_channels(l), emb.height() << (spec.depth - l), emb.width() << (spec.depth - l)];
            if s.shape() != expected {
                return Err(Error::shape(format!("skip {l} of {expected:?}"), format!("{:?}", s.shape())));
            }
        }
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let e = g.constant(Tensor::new(emb.shape().to_vec(), emb.data().to_vec()));
        let s: Vec<Var> = skips.0.iter().map(|t| g.constant(t.clone())).collect();
        let out = self.decode_vars(&mut g, &p, e, &s);
        Self::probmap(g.value(out))
    }

    /// Full forward pass on domain types. Training mode requires both the
    /// ground truth and the corrupted mask.
    pub fn dtu_forward(
        &self,
        image: &InputImage,
        gt: Option<&SegmentationMask>,
        corrupted: Option<&SegmentationMask>,
        mode: Mode,
    ) -> Result<DtuOutputs> {
        let targets = match (mode, gt, corrupted) {
            (Mode::Train, Some(a), Some(b)) => Some((a, b)),
            (Mode::Train, _, _) => return Err(Error::MissingTrainingTargets),
            (Mode::Inference, _, _) => None,
        };
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let out = self.forward_vars(&mut g, &p, image, targets)?;
        let emb = |v: Option<Var>| v.map(|v| self.embedding(g.value(v))).transpose();
        Ok(DtuOutputs {
            p_tex: Self::probmap(g.value(out.p_tex))?,
            p_top: Self::probmap(g.value(out.p_top))?,
            anchor: self.embedding(g.value(out.anchor))?,
            pos: emb(out.pos)?,
            neg: emb(out.neg)?,
        })
    }
}

const MAGIC: &[u8; 8] = b"DTUCKPT1";

/// Bookkeeping stored with the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub lambda: f64,
    pub step: u64,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    model: ModelConfig,
    texture_spec: MiniUNetSpec,
    topology_spec: MiniUNetSpec,
    image_channels: usize,
    class_kinds: Vec<ClassKind>,
    meta: CheckpointMeta,
    params: Vec<(String, Vec<usize>)>,
    adam: Option<(AdamConfig, u64)>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: DtuNet,
    pub meta: CheckpointMeta,
    pub adam: Option<Adam>,
}

/// Writes `MAGIC`, a little-endian u64 manifest length, the JSON manifest,
/// then every parameter (and optionally both Adam moments) as raw f64.
pub fn save_checkpoint(path: &Path, model: &DtuNet, meta: &CheckpointMeta, adam: Option<&Adam>) -> Result<()> {
    let manifest = Manifest {
        model: model.config,
        texture_spec: model.texture_spec(),
        topology_spec: model.topology_spec(),
        image_channels: model.image_channels,
        class_kinds: model.class_kinds.clone(),
        meta: meta.clone(),
        params: model
            .params
            .names()
            .iter()
            .zip(model.params.tensors())
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect(),
        adam: adam.map(|a| (a.config, a.step)),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    let mut arrays: Vec<&Tensor> = model.params.tensors().iter().collect();
    if let Some(a) = adam {
        arrays.extend(a.first.iter().chain(&a.second));
    }
    for t in arrays {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + json_len).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(body)?;
    let mut model = DtuNet::build(manifest.model, manifest.image_channels, manifest.class_kinds, None)?;
    let layout: Vec<(String, Vec<usize>)> = model
        .params
        .names()
        .iter()
        .zip(model.params.tensors())
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect();
    if layout != manifest.params {
        return Err(bad("parameter layout does not match the declared model"));
    }
    let mut cursor = 16 + json_len;
    let mut read_into = |t: &mut Tensor| -> Result<()> {
        let n = t.len() * 8;
        let chunk = bytes.get(cursor..cursor + n).ok_or_else(|| bad("truncated weights"))?;
        for (dst, src) in t.data_mut().iter_mut().zip(chunk.chunks_exact(8)) {
            *dst = f64::from_le_bytes(src.try_into().expect("8 bytes"));
        }
        cursor += n;
        Ok(())
    };
    for t in model.params.tensors_mut() {
        read_into(t)?;
    }
    let adam = match manifest.adam {
        Some((config, step)) => {
            let mut a = Adam::new(config, &model.params);
            a.step = step;
            for t in a.first.iter_mut().chain(a.second.iter_mut()) {
                read_into(t)?;
            }
            Some(a)
        }
        None => None,
    };
    if cursor != bytes.len() {
        return Err(bad("trailing bytes after weights"));
    }
    Ok(Checkpoint {
        model,
        meta: manifest.meta,
        adam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::triplet_terms;
    use rand::Rng;

    fn small(c: usize) -> DtuNet {
        let cfg = ModelConfig { depth: 2, base_channels: 4, norm_groups: 2, ..Default::default() };
        DtuNet::new(cfg, 1, vec![ClassKind::Curvilinear; c]).unwrap()
    }

    fn image(seed: u64, side: usize) -> InputImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        InputImage::grayscale(side, side, (0..side * side).map(|_| rng.random()).collect()).unwrap()
    }

    fn line_mask(side: usize, c: usize, row: usize) -> SegmentationMask {
        let labels = (0..side * side).map(|i| u8::from(i / side == row)).collect();
        SegmentationMask::new(side, side, labels, vec![ClassKind::Curvilinear; c]).unwrap()
    }

    #[test]
    fn texture_forward_contract() {
        let net = small(3);
        let img = image(1, 16);
        let p = net.texture_forward(&img).unwrap();
        assert_eq!((p.channels(), p.height(), p.width()), (4, 16, 16));
        assert!(p.max_sum_deviation().unwrap() <= 1e-5);
        assert_eq!(p, net.texture_forward(&img).unwrap());
    }

    #[test]
    fn encoder_stride_and_determinism() {
        let net = small(2);
        let m = line_mask(16, 2, 7);
        let oh = one_hot(&m).unwrap();
        let (a, _) = net.topology_encode(&oh).unwrap();
        let (b, _) = net.topology_encode(&oh).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.height(), a.width(), a.stride()), (4, 4, 4));
    }

    #[test]
    fn zero_se_mlp_halves_features() {
        let mut net = small(1);
        for id in net.se_params() {
            net.params_mut().get_mut(id).data_mut().fill(0.0);
        }
        let probs = one_hot(&line_mask(16, 1, 3)).unwrap();
        let (gated, _) = net.topology_encode(&probs).unwrap();
        // the ungated bottleneck, recorded directly
        let mut g = Graph::new();
        let p = net.params.bind_frozen(&mut g);
        let x = g.constant(Tensor::new(vec![2, 16, 16], probs.data().to_vec()));
        let (raw, _) = net.top_enc.apply(&mut g, &p, x);
        for (a, b) in gated.data().iter().zip(g.value(raw).data()) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn decoder_contract() {
        let mut net = small(2);
        let img = image(2, 16);
        let (emb, skips) = net.topology_encode(&net.texture_forward(&img).unwrap()).unwrap();
        let top = net.topology_decode(&emb, &skips).unwrap();
        assert_eq!((top.channels(), top.height(), top.width()), (1, 16, 16));
        assert!(top.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let mut short = skips.clone();
        short.0.pop();
        assert!(net.topology_decode(&emb, &short).is_err());
        for id in net.topology_head_params() {
            net.params_mut().get_mut(id).data_mut().fill(0.0);
        }
        let top = net.topology_decode(&emb, &skips).unwrap();
        assert!(top.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn forward_modes() {
        let net = small(2);
        let img = image(3, 16);
        let m = line_mask(16, 2, 4);
        let inf = net.dtu_forward(&img, None, None, Mode::Inference).unwrap();
        assert!(inf.pos.is_none() && inf.neg.is_none());
        assert!(matches!(
            net.dtu_forward(&img, Some(&m), None, Mode::Train).unwrap_err(),
            Error::MissingTrainingTargets
        ));
        let tr = net.dtu_forward(&img, Some(&m), Some(&m), Mode::Train).unwrap();
        assert_eq!(tr.pos, tr.neg);
        assert_eq!(tr.anchor, inf.anchor);
        assert!(net.dtu_forward(&image(3, 18), None, None, Mode::Inference).is_err());
    }

    #[test]
    fn parameter_ratio_at_default_shape() {
        let net = DtuNet::new(ModelConfig::default(), 1, vec![ClassKind::Curvilinear; 3]).unwrap();
        let ratio = net.params().numel() as f64 / net.texture_numel() as f64;
        assert!((1.9..=2.3).contains(&ratio), "{ratio}");
    }

    #[test]
    fn every_parameter_gets_a_gradient() {
        // wide enough that the SE hidden layer is not dead at initialization
        let cfg = ModelConfig { depth: 2, base_channels: 8, norm_groups: 2, ..Default::default() };
        let net = DtuNet::new(cfg, 1, vec![ClassKind::Curvilinear; 2]).unwrap();
        let img = image(4, 16);
        let gt = line_mask(16, 2, 5);
        let corrupted = line_mask(16, 2, 9);
        let mut g = Graph::new();
        let p = net.params.bind(&mut g);
        let out = net.forward_vars(&mut g, &p, &img, Some((&gt, &corrupted))).unwrap();
        let ones = |v: Var| Tensor::full(g.value(v).shape().to_vec(), 1.0);
        let seeds = vec![
            (out.p_tex, ones(out.p_tex)),
            (out.p_top, ones(out.p_top)),
            (out.anchor, ones(out.anchor)),
            (out.pos.unwrap(), ones(out.pos.unwrap())),
            (out.neg.unwrap(), ones(out.neg.unwrap())),
        ];
        // a softmax output seeded uniformly has zero gradient; use a ramp
        let mut seeds = seeds;
        let ramp: Vec<f64> = (0..g.value(out.p_tex).len()).map(|i| (i % 7) as f64).collect();
        seeds[0].1 = Tensor::new(g.value(out.p_tex).shape().to_vec(), ramp);
        let mut grads = g.backward(seeds);
        let collected = p.collect(&net.params, &mut grads);
        for (name, t) in net.params.names().iter().zip(&collected) {
            assert!(t.data().iter().any(|&v| v != 0.0), "{name} received no gradient");
        }
    }

    /// Triplet loss as a function of the model parameters.
    fn triplet_of(net: &DtuNet, img: &InputImage, gt: &SegmentationMask, neg: &SegmentationMask) -> f64 {
        let out = net.dtu_forward(img, Some(gt), Some(neg), Mode::Train).unwrap();
        let (a, p, n) = (out.anchor, out.pos.unwrap(), out.neg.unwrap());
        triplet_terms(a.data(), p.data(), n.data(), a.channels(), 10.0).loss
    }

    #[test]
    fn triplet_gradient_reaches_texture_net() {
        let net = small(1);
        let img = image(5, 16);
        let gt = line_mask(16, 1, 6);
        let neg = line_mask(16, 1, 11);
        let mut g = Graph::new();
        let p = net.params.bind(&mut g);
        let out = net.forward_vars(&mut g, &p, &img, Some((&gt, &neg))).unwrap();
        let c = g.value(out.anchor).shape()[0];
        let t = triplet_terms(
            g.value(out.anchor).data(),
            g.value(out.pos.unwrap()).data(),
            g.value(out.neg.unwrap()).data(),
            c,
            10.0,
        );
        assert!(t.loss > 0.0);
        let shape = g.value(out.anchor).shape().to_vec();
        let mut grads = g.backward(vec![
            (out.anchor, Tensor::new(shape.clone(), t.grad_anchor)),
            (out.pos.unwrap(), Tensor::new(shape.clone(), t.grad_pos)),
            (out.neg.unwrap(), Tensor::new(shape, t.grad_neg)),
        ]);
        let analytic = p.collect(&net.params, &mut grads);
        let names = net.params.names();
        let mut checked = 0;
        for (pi, name) in names.iter().enumerate() {
            if !(name.starts_with("texture.enc0.conv1.w") || name.starts_with("texture.head.w")) {
                continue;
            }
            for j in [0, 3, 7] {
                let a = analytic[pi].data()[j];
                let h = 1e-5;
                let mut up = net.clone();
                up.params_mut().tensors_mut()[pi].data_mut()[j] += h;
                let mut down = net.clone();
                down.params_mut().tensors_mut()[pi].data_mut()[j] -= h;
                let numeric = (triplet_of(&up, &img, &gt, &neg) - triplet_of(&down, &img, &gt, &neg)) / (2.0 * h);
                assert!(numeric.abs() > 1e-9, "{name}[{j}] has no effect");
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
                assert!(rel < 1e-3, "{name}[{j}]: analytic {a} numeric {numeric}");
                checked += 1;
            }
        }
        assert_eq!(checked, 6);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let net = small(3);
        let mut adam = Adam::new(AdamConfig::default(), net.params());
        let grads: Vec<Tensor> = net.params().tensors().iter().map(|t| t.map(|v| v * 0.5 + 0.1)).collect();
        let mut trained = net.clone();
        adam.update(trained.params_mut(), &grads);
        let meta = CheckpointMeta { epoch: 4, lambda: 0.3, step: 17, extra: serde_json::json!({"note": "x"}) };
        save_checkpoint(&path, &trained, &meta, Some(&adam)).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.meta, meta);
        assert_eq!(back.model.params(), trained.params());
        assert_eq!(back.adam.as_ref(), Some(&adam));
        assert_eq!(back.model.class_kinds(), trained.class_kinds());
        save_checkpoint(&path, &trained, &meta, None).unwrap();
        assert!(load_checkpoint(&path).unwrap().adam.is_none());
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path).unwrap_err(), Error::Checkpoint(_)));
    }
}
