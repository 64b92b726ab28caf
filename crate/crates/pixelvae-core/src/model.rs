//! Network assembly: the encoder trunk with per-level posterior heads, the
//! pixel decoder in its variant forms, the autoregressive prior over the
//! lower latent level, and the unit-Gaussian top prior.
//!
//! Latent convention: a level with 1x1 resolution is "flat" and its z, mu
//! and logvar tensors are rank-2 [N, channels]; spatial levels use
//! [N, channels, h, w]. Spatial latent levels must live at the encoder
//! trunk resolution.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::dist::DiagGaussianParams;
use crate::error::{Error, Result};
use crate::nn::{
    build_mask, conv2d, conv2d_transposed, gated_block, glorot_uniform, masked_conv2d,
    vertical_chain_mask, CondParams, Condition, ConvSpec, GatedBlockParams, MaskKind, MaskSpec,
    StackKind,
};
use crate::rng::{domain, Stream};
use crate::tensor::Tensor;

pub const MASKED_KERNEL: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Factorized decoder: latents only, no autoregressive pixel layers.
    VaeOnly,
    /// Autoregressive pixel layers only, no latents.
    PixelcnnOnly,
    /// Latents upsampled to image resolution feed the first masked layer;
    /// masked layers use ReLU single-stack convolutions.
    Pixelvae,
    /// Same conditioning, but gated vertical/horizontal masked stacks with
    /// per-layer feature conditioning.
    GatedPixelvae,
    /// No upsampling stack: a linear map of the flat latent conditions
    /// every gated layer instead.
    GatedNoUpsampling,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::VaeOnly => "vae-only",
            Variant::PixelcnnOnly => "pixelcnn-only",
            Variant::Pixelvae => "pixelvae",
            Variant::GatedPixelvae => "gated-pixelvae",
            Variant::GatedNoUpsampling => "gated-no-upsampling",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Ok(match s {
            "vae-only" => Variant::VaeOnly,
            "pixelcnn-only" => Variant::PixelcnnOnly,
            "pixelvae" => Variant::Pixelvae,
            "gated-pixelvae" => Variant::GatedPixelvae,
            "gated-no-upsampling" => Variant::GatedNoUpsampling,
            _ => return Err(Error::Config(format!("unknown variant '{s}'"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFamily {
    Bernoulli,
    Softmax256,
}

impl OutputFamily {
    pub fn name(self) -> &'static str {
        match self {
            OutputFamily::Bernoulli => "bernoulli",
            OutputFamily::Softmax256 => "softmax256",
        }
    }

    pub fn parse(s: &str) -> Result<OutputFamily> {
        Ok(match s {
            "bernoulli" => OutputFamily::Bernoulli,
            "softmax256" => OutputFamily::Softmax256,
            _ => return Err(Error::Config(format!("unknown output family '{s}'"))),
        })
    }
}

/// One latent level: `channels` values at `height` x `width` locations.
/// 1x1 levels are flat vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentSpec {
    pub fn flat(channels: usize) -> LatentSpec {
        LatentSpec { channels, height: 1, width: 1 }
    }

    pub fn spatial(channels: usize, height: usize, width: usize) -> LatentSpec {
        LatentSpec { channels, height, width }
    }

    pub fn is_flat(&self) -> bool {
        self.height == 1 && self.width == 1
    }

    pub fn z_shape(&self, n: usize) -> Vec<usize> {
        if self.is_flat() {
            vec![n, self.channels]
        } else {
            vec![n, self.channels, self.height, self.width]
        }
    }

    pub fn dim(&self) -> usize {
        self.channels * self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Bottom-up: levels[0] is the level the pixel decoder conditions on.
    /// Empty exactly for the pixelcnn-only variant.
    pub levels: Vec<LatentSpec>,
    /// Masked pixel layers k; the first is kind A on the image.
    pub pixel_layers: usize,
    /// Masked layers in the latent prior network (two-level models).
    pub prior_layers: usize,
    /// Channel width of every hidden feature map.
    pub hidden: usize,
    pub variant: Variant,
    pub output: OutputFamily,
}

/// Downsampling geometry shared by encoder and decoder: up to two stride-2
/// stages while the resolution stays even and at least 8, plus an optional
/// extra stage in front of the top posterior head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrunkPlan {
    pub stages: usize,
    pub trunk_h: usize,
    pub trunk_w: usize,
    pub extra_top: bool,
    pub top_h: usize,
    pub top_w: usize,
}

fn trunk_dims(image_h: usize, image_w: usize) -> (usize, usize, usize) {
    let (mut h, mut w, mut stages) = (image_h, image_w, 0);
    while stages < 2 && h % 2 == 0 && w % 2 == 0 && h >= 8 && w >= 8 {
        h /= 2;
        w /= 2;
        stages += 1;
    }
    (stages, h, w)
}

impl ModelConfig {
    pub fn trunk_plan(&self) -> TrunkPlan {
        let (stages, th, tw) = trunk_dims(self.image_height, self.image_width);
        let extra_top = self.levels.len() == 2 && th >= 4 && tw >= 4;
        let (top_h, top_w) = if extra_top {
            ((th - 2) / 2 + 1, (tw - 2) / 2 + 1)
        } else {
            (th, tw)
        };
        TrunkPlan { stages, trunk_h: th, trunk_w: tw, extra_top, top_h, top_w }
    }

    pub fn out_channels(&self) -> usize {
        match self.output {
            OutputFamily::Bernoulli => self.image_channels,
            OutputFamily::Softmax256 => 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.image_height == 0 || self.image_width == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        if self.output == OutputFamily::Softmax256 && self.image_channels != 1 {
            return Err(Error::Config("softmax256 output supports single-channel images".into()));
        }
        match self.variant {
            Variant::PixelcnnOnly => {
                if !self.levels.is_empty() {
                    return Err(Error::Config("pixelcnn-only models carry no latent levels".into()));
                }
            }
            _ => {
                if self.levels.is_empty() || self.levels.len() > 2 {
                    return Err(Error::Config(format!(
                        "{} needs 1 or 2 latent levels, got {}",
                        self.variant.name(),
                        self.levels.len()
                    )));
                }
            }
        }
        if self.variant == Variant::VaeOnly && self.pixel_layers != 0 {
            return Err(Error::Config("vae-only means zero pixel layers".into()));
        }
        if self.variant == Variant::GatedNoUpsampling {
            if self.pixel_layers == 0 {
                return Err(Error::Config(
                    "gated-no-upsampling conditions through its pixel layers; needs k >= 1".into(),
                ));
            }
            if !self.levels[0].is_flat() {
                return Err(Error::Config(
                    "gated-no-upsampling conditions on a flat latent vector".into(),
                ));
            }
        }
        for l in &self.levels {
            if l.channels == 0 || l.height == 0 || l.width == 0 {
                return Err(Error::Config("latent dimensions must be positive".into()));
            }
        }
        let (_, th, tw) = trunk_dims(self.image_height, self.image_width);
        if let Some(l1) = self.levels.first() {
            if !l1.is_flat() && (l1.height, l1.width) != (th, tw) {
                return Err(Error::Config(format!(
                    "spatial level-1 resolution {}x{} must equal the trunk resolution {th}x{tw}",
                    l1.height, l1.width
                )));
            }
        }
        if self.levels.len() == 2 {
            let (l1, l2) = (&self.levels[0], &self.levels[1]);
            if !l2.is_flat() {
                return Err(Error::Config("the top level must be 1x1".into()));
            }
            if l2.height * l2.width > l1.height * l1.width {
                return Err(Error::Config("latent resolution may not grow upward".into()));
            }
        }
        Ok(())
    }

    /// Serialized as one key=value per line, in fixed order.
    pub fn to_kv(&self) -> String {
        let levels = if self.levels.is_empty() {
            "none".to_string()
        } else {
            self.levels
                .iter()
                .map(|l| format!("{}@{}x{}", l.channels, l.height, l.width))
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "variant={}\noutput={}\nimage={}x{}x{}\nlevels={}\npixel_layers={}\nprior_layers={}\nhidden={}\n",
            self.variant.name(),
            self.output.name(),
            self.image_channels,
            self.image_height,
            self.image_width,
            levels,
            self.pixel_layers,
            self.prior_layers,
            self.hidden,
        )
    }

    pub fn from_kv(text: &str) -> Result<ModelConfig> {
        let mut map: BTreeMap<&str, &str> = BTreeMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got '{line}'")))?;
            if map.insert(k.trim(), v.trim()).is_some() {
                return Err(Error::Config(format!("duplicate key '{}'", k.trim())));
            }
        }
        const KEYS: [&str; 7] =
            ["variant", "output", "image", "levels", "pixel_layers", "prior_layers", "hidden"];
        for k in KEYS {
            if !map.contains_key(k) {
                return Err(Error::Config(format!("missing key '{k}'")));
            }
        }
        for k in map.keys() {
            if !KEYS.contains(k) {
                return Err(Error::Config(format!("unknown key '{k}'")));
            }
        }
        let int = |v: &str, what: &str| -> Result<usize> {
            v.parse::<usize>().map_err(|_| Error::Config(format!("bad {what} '{v}'")))
        };
        let image: Vec<&str> = map["image"].split('x').collect();
        if image.len() != 3 {
            return Err(Error::Config(format!("image must be CxHxW, got '{}'", map["image"])));
        }
        let levels = if map["levels"] == "none" {
            Vec::new()
        } else {
            let mut out = Vec::new();
            for part in map["levels"].split(',') {
                let (ch, hw) = part
                    .split_once('@')
                    .ok_or_else(|| Error::Config(format!("level must be C@HxW, got '{part}'")))?;
                let (h, w) = hw
                    .split_once('x')
                    .ok_or_else(|| Error::Config(format!("level must be C@HxW, got '{part}'")))?;
                out.push(LatentSpec {
                    channels: int(ch, "level channels")?,
                    height: int(h, "level height")?,
                    width: int(w, "level width")?,
                });
            }
            out
        };
        let config = ModelConfig {
            image_channels: int(image[0], "image channels")?,
            image_height: int(image[1], "image height")?,
            image_width: int(image[2], "image width")?,
            levels,
            pixel_layers: int(map["pixel_layers"], "pixel_layers")?,
            prior_layers: int(map["prior_layers"], "prior_layers")?,
            hidden: int(map["hidden"], "hidden")?,
            variant: Variant::parse(map["variant"])?,
            output: OutputFamily::parse(map["output"])?,
        };
        config.validate()?;
        Ok(config)
    }
}

/// An initialized network. Parameters are tracked leaf tensors keyed by
/// stable names; forward passes borrow them, the optimizer replaces them.
#[derive(Clone)]
pub struct Model {
    pub config: ModelConfig,
    params: BTreeMap<String, Tensor>,
}

// ---- construction ----

struct Init {
    params: BTreeMap<String, Tensor>,
    seed: u64,
    next_stream: u64,
}

impl Init {
    /// Weights use the full-window Glorot fans even under a mask; the bound
    /// only shrinks, which is harmless, and keeps init independent of mask
    /// choice.
    fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<()> {
        let mut s = Stream::new(self.seed, domain::INIT, self.next_stream);
        self.next_stream += 1;
        let t = glorot_uniform(shape, fan_in, fan_out, &mut s)?.tracked_view();
        self.params.insert(name.to_string(), t);
        Ok(())
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.params.insert(name.to_string(), Tensor::zeros(shape)?.tracked_view());
        Ok(())
    }

    fn conv(&mut self, name: &str, spec: &ConvSpec) -> Result<()> {
        let (ci, co, kh, kw) = (spec.in_channels, spec.out_channels, spec.kernel_h, spec.kernel_w);
        self.weight(&format!("{name}.w"), &[co, ci, kh, kw], ci * kh * kw, co * kh * kw)?;
        self.zeros(&format!("{name}.b"), &[co])
    }

    /// Condition and link paths carry no bias; the feature path's bias
    /// covers the sum.
    fn conv_nobias(&mut self, name: &str, spec: &ConvSpec) -> Result<()> {
        let (ci, co, kh, kw) = (spec.in_channels, spec.out_channels, spec.kernel_h, spec.kernel_w);
        self.weight(&format!("{name}.w"), &[co, ci, kh, kw], ci * kh * kw, co * kh * kw)
    }

    /// Bias length follows the op's output channels, which for a transposed
    /// conv is the spec's in_channels.
    fn conv_t(&mut self, name: &str, spec: &ConvSpec) -> Result<()> {
        let (ci, co, kh, kw) = (spec.in_channels, spec.out_channels, spec.kernel_h, spec.kernel_w);
        self.weight(&format!("{name}.w"), &[co, ci, kh, kw], co * kh * kw, ci * kh * kw)?;
        self.zeros(&format!("{name}.b"), &[ci])
    }

    fn dense(&mut self, name: &str, out: usize, inp: usize) -> Result<()> {
        self.weight(&format!("{name}.w"), &[out, inp], inp, out)?;
        self.zeros(&format!("{name}.b"), &[out])
    }

    fn dense_nobias(&mut self, name: &str, out: usize, inp: usize) -> Result<()> {
        self.weight(&format!("{name}.w"), &[out, inp], inp, out)
    }
}

fn down_spec(hidden: usize) -> ConvSpec {
    ConvSpec::new(hidden, hidden, 4, 2, 1)
}

/// Initializes all parameters the variant's forward pass uses, and no
/// others. Deterministic in (config, seed): each tensor draws from its own
/// stream index in build order.
pub fn build_model(config: ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut init = Init { params: BTreeMap::new(), seed, next_stream: 0 };
    let hid = config.hidden;
    let c_img = config.image_channels;
    let out_ch = config.out_channels();
    let plan = config.trunk_plan();
    let k = config.pixel_layers;

    if !config.levels.is_empty() {
        // Encoder trunk and posterior heads.
        init.conv("enc.in", &ConvSpec::same(c_img, hid, 3))?;
        for i in 0..plan.stages {
            init.conv(&format!("enc.down{i}"), &down_spec(hid))?;
        }
        let l1 = config.levels[0];
        if l1.is_flat() {
            init.dense("post1", 2 * l1.channels, hid * plan.trunk_h * plan.trunk_w)?;
        } else {
            init.conv("post1", &ConvSpec::new(hid, 2 * l1.channels, 1, 1, 0))?;
        }
        if config.levels.len() == 2 {
            if plan.extra_top {
                init.conv("enc.top", &down_spec(hid))?;
            }
            let l2 = config.levels[1];
            init.dense("post2", 2 * l2.channels, hid * plan.top_h * plan.top_w)?;

            // Latent prior network over the level-1 map, conditioned on the
            // broadcast top latent.
            init.conv("prior.from_z", &ConvSpec::new(l2.channels, hid, 1, 1, 0))?;
            if config.prior_layers >= 1 {
                init.conv("prior.in", &ConvSpec::same(l1.channels, hid, MASKED_KERNEL))?;
                init.conv_nobias("prior.in.cond", &ConvSpec::same(hid, hid, MASKED_KERNEL))?;
                for l in 2..=config.prior_layers {
                    init.conv(&format!("prior.mid{l}"), &ConvSpec::same(hid, hid, MASKED_KERNEL))?;
                }
            }
            init.conv("prior.head", &ConvSpec::new(hid, 2 * l1.channels, 1, 1, 0))?;
        }
    }

    // Decoder feature path (latent upsampled to image resolution).
    let has_feature_path = matches!(
        config.variant,
        Variant::VaeOnly | Variant::Pixelvae | Variant::GatedPixelvae
    );
    if has_feature_path {
        let l1 = config.levels[0];
        if l1.is_flat() {
            init.dense("dec.from_z", hid * plan.trunk_h * plan.trunk_w, l1.channels)?;
        } else {
            init.conv("dec.from_z", &ConvSpec::new(l1.channels, hid, 1, 1, 0))?;
        }
        for i in 0..plan.stages {
            init.conv_t(&format!("dec.up{i}"), &down_spec(hid))?;
        }
        init.conv("dec.feat", &ConvSpec::same(hid, hid, 3))?;
    }

    // Pixel-autoregressive path.
    match config.variant {
        Variant::VaeOnly => {}
        Variant::PixelcnnOnly if k == 0 => {
            // Degenerate depth: a learned constant logit map.
            init.zeros("dec.bias", &[out_ch, config.image_height, config.image_width])?;
        }
        Variant::Pixelvae | Variant::PixelcnnOnly => {
            if k >= 1 {
                init.conv("pix1", &ConvSpec::same(c_img, hid, MASKED_KERNEL))?;
                if config.variant == Variant::Pixelvae {
                    init.conv_nobias("pix1.cond", &ConvSpec::same(hid, hid, MASKED_KERNEL))?;
                }
                for l in 2..=k {
                    init.conv(&format!("pix{l}"), &ConvSpec::same(hid, hid, MASKED_KERNEL))?;
                }
            }
        }
        Variant::GatedPixelvae | Variant::GatedNoUpsampling => {
            let c1 = config.levels[0].channels;
            for l in 1..=k {
                let cin = if l == 1 { c_img } else { hid };
                init.conv(&format!("pix{l}.v"), &ConvSpec::same(cin, 2 * hid, MASKED_KERNEL))?;
                init.conv(&format!("pix{l}.h"), &ConvSpec::same(cin, 2 * hid, MASKED_KERNEL))?;
                init.conv_nobias(&format!("pix{l}.link"), &ConvSpec::new(hid, 2 * hid, 1, 1, 0))?;
                if config.variant == Variant::GatedPixelvae {
                    init.conv_nobias(&format!("pix{l}.vcond"), &ConvSpec::new(hid, 2 * hid, 1, 1, 0))?;
                    init.conv_nobias(&format!("pix{l}.hcond"), &ConvSpec::new(hid, 2 * hid, 1, 1, 0))?;
                } else {
                    init.dense_nobias(&format!("pix{l}.vcond"), 2 * hid, c1)?;
                    init.dense_nobias(&format!("pix{l}.hcond"), 2 * hid, c1)?;
                }
            }
        }
    }
    let needs_head = !(config.variant == Variant::PixelcnnOnly && k == 0);
    if needs_head {
        init.conv("dec.head", &ConvSpec::new(hid, out_ch, 1, 1, 0))?;
    }

    Ok(Model { config, params: init.params })
}

impl Model {
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    fn p(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("parameter '{name}' not in this model")))
    }

    /// Swap in new values for an existing parameter, as a fresh tracked
    /// leaf. The shape is fixed by the build.
    pub fn replace_param(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let shape = self.p(name)?.shape().to_vec();
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::InvalidShape(format!(
                "parameter '{name}' holds {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        self.set_param(name, Tensor::from_vec(&shape, data)?.tracked_view())
    }

    /// Install `tensor` itself (keeping its id, tracked or not) as an
    /// existing parameter. Gradient probes rely on the id surviving.
    pub fn set_param(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let shape = self.p(name)?.shape();
        if tensor.shape() != shape {
            return Err(Error::InvalidShape(format!(
                "parameter '{name}' has shape {shape:?}, got {:?}",
                tensor.shape()
            )));
        }
        self.params.insert(name.to_string(), tensor);
        Ok(())
    }

    /// Same weights, untracked: forward passes build no graph. Use for
    /// sampling and evaluation loops.
    pub fn detached(&self) -> Model {
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.detach())).collect(),
        }
    }

    fn check_image(&self, x: &Tensor) -> Result<usize> {
        let want =
            [self.config.image_channels, self.config.image_height, self.config.image_width];
        let s = x.shape();
        if s.len() != 4 || s[1..] != want {
            return Err(Error::InvalidShape(format!(
                "image batch {s:?}, model expects [N,{},{},{}]",
                want[0], want[1], want[2]
            )));
        }
        Ok(s[0])
    }

    fn check_z(&self, level: usize, z: &Tensor) -> Result<usize> {
        let spec = self.config.levels[level];
        let n = z.shape()[0];
        if z.shape() != spec.z_shape(n) {
            return Err(Error::InvalidShape(format!(
                "level-{} latent {:?}, expected {:?}",
                level + 1,
                z.shape(),
                spec.z_shape(n)
            )));
        }
        Ok(n)
    }

    fn conv(&self, x: &Tensor, name: &str, spec: &ConvSpec) -> Result<Tensor> {
        conv2d(x, spec, self.p(&format!("{name}.w"))?, self.p(&format!("{name}.b"))?)
    }

    fn conv1x1(&self, x: &Tensor, name: &str, out: usize) -> Result<Tensor> {
        self.conv(x, name, &ConvSpec::new(x.shape()[1], out, 1, 1, 0))
    }

    /// Bias-free convolution for condition and link paths.
    fn cond_conv(&self, x: &Tensor, name: &str, spec: &ConvSpec) -> Result<Tensor> {
        conv2d(x, spec, self.p(&format!("{name}.w"))?, &Tensor::zeros(&[spec.out_channels])?)
    }

    // ---- encoder ----

    /// Posterior parameters per level, bottom-up. The trunk is shared;
    /// every level reads the image only.
    pub fn encode(&self, x: &Tensor) -> Result<Vec<DiagGaussianParams>> {
        let n = self.check_image(x)?;
        if self.config.levels.is_empty() {
            return Ok(Vec::new());
        }
        let hid = self.config.hidden;
        let plan = self.config.trunk_plan();
        let mut t = self.conv(x, "enc.in", &ConvSpec::same(self.config.image_channels, hid, 3))?.relu();
        for i in 0..plan.stages {
            t = self.conv(&t, &format!("enc.down{i}"), &down_spec(hid))?.relu();
        }
        let mut out = Vec::new();
        let l1 = self.config.levels[0];
        out.push(if l1.is_flat() {
            let flat = t.reshape(&[n, hid * plan.trunk_h * plan.trunk_w])?;
            let h = flat.dense(self.p("post1.w")?, self.p("post1.b")?)?;
            split_flat_params(&h, l1.channels)?
        } else {
            let h = self.conv1x1(&t, "post1", 2 * l1.channels)?;
            split_spatial_params(&h, l1.channels)?
        });
        if self.config.levels.len() == 2 {
            let t2 = if plan.extra_top {
                self.conv(&t, "enc.top", &down_spec(hid))?.relu()
            } else {
                t
            };
            let l2 = self.config.levels[1];
            let flat = t2.reshape(&[n, hid * plan.top_h * plan.top_w])?;
            let h = flat.dense(self.p("post2.w")?, self.p("post2.b")?)?;
            out.push(split_flat_params(&h, l2.channels)?);
        }
        Ok(out)
    }

    // ---- decoder ----

    /// Latent-to-image feature stack: dense or 1x1 from z, transposed-conv
    /// upsampling back to image resolution, and a 3x3 mixing layer. `None`
    /// for variants without this path.
    pub fn decoder_features(&self, z1: Option<&Tensor>) -> Result<Option<Tensor>> {
        if matches!(self.config.variant, Variant::PixelcnnOnly | Variant::GatedNoUpsampling) {
            return Ok(None);
        }
        let z1 = z1.ok_or_else(|| {
            Error::Contract(format!("{} decoding needs z1", self.config.variant.name()))
        })?;
        let n = self.check_z(0, z1)?;
        let hid = self.config.hidden;
        let plan = self.config.trunk_plan();
        let l1 = self.config.levels[0];
        let mut f = if l1.is_flat() {
            z1.dense(self.p("dec.from_z.w")?, self.p("dec.from_z.b")?)?
                .relu()
                .reshape(&[n, hid, plan.trunk_h, plan.trunk_w])?
        } else {
            self.conv1x1(z1, "dec.from_z", hid)?.relu()
        };
        for i in (0..plan.stages).rev() {
            f = conv2d_transposed(
                &f,
                &down_spec(hid),
                self.p(&format!("dec.up{i}.w"))?,
                self.p(&format!("dec.up{i}.b"))?,
            )?
            .relu();
        }
        f = self.conv(&f, "dec.feat", &ConvSpec::same(hid, hid, 3))?.relu();
        Ok(Some(f))
    }

    /// Pixel logits from a teacher image plus precomputed decoder features.
    /// Splitting this from [`Model::decode_pixel_logits`] lets generation
    /// reuse the features across the pixel sweep.
    pub fn decode_from_features(
        &self,
        x_teacher: &Tensor,
        features: Option<&Tensor>,
        z1: Option<&Tensor>,
    ) -> Result<Tensor> {
        let n = self.check_image(x_teacher)?;
        let hid = self.config.hidden;
        let c_img = self.config.image_channels;
        let out_ch = self.config.out_channels();
        let k = self.config.pixel_layers;
        let head = |t: &Tensor| self.conv1x1(t, "dec.head", out_ch);
        let need_features = || {
            features.ok_or_else(|| {
                Error::Contract(format!("{} decoding needs decoder features", self.config.variant.name()))
            })
        };
        match self.config.variant {
            Variant::VaeOnly => head(need_features()?),
            Variant::Pixelvae if k == 0 => head(need_features()?),
            Variant::GatedPixelvae if k == 0 => head(need_features()?),
            Variant::Pixelvae => {
                let f = need_features()?;
                let a = MaskSpec::new(MaskKind::A, MASKED_KERNEL, StackKind::Single);
                let b = MaskSpec::new(MaskKind::B, MASKED_KERNEL, StackKind::Single);
                let mut h = masked_conv2d(
                    x_teacher,
                    &a,
                    &ConvSpec::same(c_img, hid, MASKED_KERNEL),
                    self.p("pix1.w")?,
                    self.p("pix1.b")?,
                )?
                .add(&self.cond_conv(f, "pix1.cond", &ConvSpec::same(hid, hid, MASKED_KERNEL))?)?
                .relu();
                for l in 2..=k {
                    h = masked_conv2d(
                        &h,
                        &b,
                        &ConvSpec::same(hid, hid, MASKED_KERNEL),
                        self.p(&format!("pix{l}.w"))?,
                        self.p(&format!("pix{l}.b"))?,
                    )?
                    .relu();
                }
                head(&h)
            }
            Variant::PixelcnnOnly => {
                if k == 0 {
                    return self.p("dec.bias")?.broadcast_batch(n);
                }
                let a = MaskSpec::new(MaskKind::A, MASKED_KERNEL, StackKind::Single);
                let b = MaskSpec::new(MaskKind::B, MASKED_KERNEL, StackKind::Single);
                let mut h = masked_conv2d(
                    x_teacher,
                    &a,
                    &ConvSpec::same(c_img, hid, MASKED_KERNEL),
                    self.p("pix1.w")?,
                    self.p("pix1.b")?,
                )?
                .relu();
                for l in 2..=k {
                    h = masked_conv2d(
                        &h,
                        &b,
                        &ConvSpec::same(hid, hid, MASKED_KERNEL),
                        self.p(&format!("pix{l}.w"))?,
                        self.p(&format!("pix{l}.b"))?,
                    )?
                    .relu();
                }
                head(&h)
            }
            Variant::GatedPixelvae | Variant::GatedNoUpsampling => {
                let spatial_cond = self.config.variant == Variant::GatedPixelvae;
                let f = if spatial_cond { Some(need_features()?) } else { None };
                let z_flat = if spatial_cond {
                    None
                } else {
                    let z = z1.ok_or_else(|| {
                        Error::Contract("gated-no-upsampling decoding needs z1".into())
                    })?;
                    self.check_z(0, z)?;
                    Some(z)
                };
                let h = self.gated_stack(x_teacher, f, z_flat)?;
                head(&h)
            }
        }
    }

    /// Gated vertical/horizontal masked stacks. The vertical stack sees
    /// strictly-higher rows (chained downward-inclusively after layer 1),
    /// feeds the horizontal stack through a 1x1 link, and every layer's
    /// gate is shifted by the conditioning signal.
    fn gated_stack(
        &self,
        x: &Tensor,
        features: Option<&Tensor>,
        z_flat: Option<&Tensor>,
    ) -> Result<Tensor> {
        let hid = self.config.hidden;
        let c_img = self.config.image_channels;
        let k = self.config.pixel_layers;
        let strict_above = build_mask(&MaskSpec::new(MaskKind::A, MASKED_KERNEL, StackKind::Vertical))?;
        let chain = vertical_chain_mask(MASKED_KERNEL)?;
        let (hh, ww) = (self.config.image_height, self.config.image_width);

        let cond_for = |name: &str| -> Result<Option<CondParams>> {
            Ok(Some(if features.is_some() {
                CondParams::Conv1x1 {
                    weights: self.p(&format!("{name}.w"))?.clone(),
                    bias: Tensor::zeros(&[2 * hid])?,
                }
            } else {
                CondParams::Dense {
                    weights: self.p(&format!("{name}.w"))?.clone(),
                    bias: Tensor::zeros(&[2 * hid])?,
                }
            }))
        };

        let mut v: Option<Tensor> = None;
        let mut h: Option<Tensor> = None;
        for l in 1..=k {
            let cin = if l == 1 { c_img } else { hid };
            let vparams = GatedBlockParams {
                spec: ConvSpec::same(cin, 2 * hid, MASKED_KERNEL),
                mask: Some(if l == 1 { strict_above.clone() } else { chain.clone() }),
                weights: self.p(&format!("pix{l}.v.w"))?.clone(),
                bias: self.p(&format!("pix{l}.v.b"))?.clone(),
                condition: cond_for(&format!("pix{l}.vcond"))?,
            };
            let condition = match (features, z_flat) {
                (Some(f), _) => Some(Condition::Spatial(f)),
                (None, Some(z)) => Some(Condition::Flat(z)),
                _ => None,
            };
            let vin = if l == 1 { x } else { v.as_ref().expect("set after layer 1") };
            let v_new = gated_block(vin, condition, &vparams)?;

            let hmask = MaskSpec::new(
                if l == 1 { MaskKind::A } else { MaskKind::B },
                MASKED_KERNEL,
                StackKind::Horizontal,
            );
            let hin = if l == 1 { x } else { h.as_ref().expect("set after layer 1") };
            let mut h_pre = masked_conv2d(
                hin,
                &hmask,
                &ConvSpec::same(cin, 2 * hid, MASKED_KERNEL),
                self.p(&format!("pix{l}.h.w"))?,
                self.p(&format!("pix{l}.h.b"))?,
            )?
            .add(&self.cond_conv(&v_new, &format!("pix{l}.link"), &ConvSpec::new(hid, 2 * hid, 1, 1, 0))?)?;
            h_pre = match (features, z_flat) {
                (Some(f), _) => h_pre.add(&self.cond_conv(
                    f,
                    &format!("pix{l}.hcond"),
                    &ConvSpec::new(hid, 2 * hid, 1, 1, 0),
                )?)?,
                (None, Some(z)) => {
                    let c = z
                        .dense(self.p(&format!("pix{l}.hcond.w"))?, &Tensor::zeros(&[2 * hid])?)?
                        .broadcast_spatial(hh, ww)?;
                    h_pre.add(&c)?
                }
                _ => h_pre,
            };
            let h_act = crate::nn::gated_activation(&h_pre)?;
            let h_new = match &h {
                Some(prev) if l >= 2 => h_act.add(prev)?,
                _ => h_act,
            };
            v = Some(v_new);
            h = Some(h_new);
        }
        h.ok_or_else(|| Error::Contract("gated stack needs at least one layer".into()))
    }

    /// Teacher-forced pixel logits: [N, out_channels, H, W].
    pub fn decode_pixel_logits(&self, x_teacher: &Tensor, z1: Option<&Tensor>) -> Result<Tensor> {
        let features = self.decoder_features(z1)?;
        self.decode_from_features(x_teacher, features.as_ref(), z1)
    }

    // ---- priors ----

    /// Conditional prior over the level-1 latent map: the top latent is
    /// broadcast over the map and mixed 1x1; masked layers over the
    /// teacher latents keep the map autoregressive in raster order.
    pub fn latent_prior_params(
        &self,
        z_above: &Tensor,
        z_teacher: &Tensor,
    ) -> Result<DiagGaussianParams> {
        if self.config.levels.len() != 2 {
            return Err(Error::Contract("latent prior requires a two-level model".into()));
        }
        let n = self.check_z(1, z_above)?;
        if self.check_z(0, z_teacher)? != n {
            return Err(Error::InvalidShape("latent batch sizes differ".into()));
        }
        let l1 = self.config.levels[0];
        let hid = self.config.hidden;
        let zt = if l1.is_flat() {
            z_teacher.reshape(&[n, l1.channels, 1, 1])?
        } else {
            z_teacher.clone()
        };
        let p_map = self
            .conv1x1(&z_above.broadcast_spatial(l1.height, l1.width)?, "prior.from_z", hid)?
            .relu();
        let g = if self.config.prior_layers == 0 {
            p_map
        } else {
            let a = MaskSpec::new(MaskKind::A, MASKED_KERNEL, StackKind::Single);
            let b = MaskSpec::new(MaskKind::B, MASKED_KERNEL, StackKind::Single);
            let mut g = masked_conv2d(
                &zt,
                &a,
                &ConvSpec::same(l1.channels, hid, MASKED_KERNEL),
                self.p("prior.in.w")?,
                self.p("prior.in.b")?,
            )?
            .add(&self.cond_conv(&p_map, "prior.in.cond", &ConvSpec::same(hid, hid, MASKED_KERNEL))?)?
            .relu();
            for l in 2..=self.config.prior_layers {
                g = masked_conv2d(
                    &g,
                    &b,
                    &ConvSpec::same(hid, hid, MASKED_KERNEL),
                    self.p(&format!("prior.mid{l}.w"))?,
                    self.p(&format!("prior.mid{l}.b"))?,
                )?
                .relu();
            }
            g
        };
        let headed = self.conv1x1(&g, "prior.head", 2 * l1.channels)?;
        if l1.is_flat() {
            let h = headed.reshape(&[n, 2 * l1.channels])?;
            split_flat_params(&h, l1.channels)
        } else {
            split_spatial_params(&headed, l1.channels)
        }
    }

    /// Unit Gaussian over the top level's shape.
    pub fn top_prior(&self, n: usize) -> Result<DiagGaussianParams> {
        let top = self
            .config
            .levels
            .last()
            .ok_or_else(|| Error::Contract("this model has no latent levels".into()))?;
        let shape = top.z_shape(n);
        DiagGaussianParams::new(Tensor::zeros(&shape)?, Tensor::zeros(&shape)?)
    }
}

/// [N, 2C] -> mu, logvar halves as [N, C].
fn split_flat_params(h: &Tensor, c: usize) -> Result<DiagGaussianParams> {
    let n = h.shape()[0];
    let h4 = h.reshape(&[n, 2 * c, 1, 1])?;
    DiagGaussianParams::new(
        h4.slice_channels(0, c)?.reshape(&[n, c])?,
        h4.slice_channels(c, 2 * c)?.reshape(&[n, c])?,
    )
}

/// [N, 2C, H, W] -> mu, logvar halves as [N, C, H, W].
fn split_spatial_params(h: &Tensor, c: usize) -> Result<DiagGaussianParams> {
    DiagGaussianParams::new(h.slice_channels(0, c)?, h.slice_channels(c, 2 * c)?)
}
