//! The full segmentation network: a five-stage convolutional encoder,
//! residual Swin skip connections, a shift-MLP bottleneck and a
//! concatenating decoder with a one-logit head.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Conv, Graph, ParamBuilder, ParamStore};
use crate::pcas::{PcasBlock, PcasConfig};
use crate::rng::{SeededRng, Stream};
use crate::swin::{SwinConfig, SwinPair};
use crate::tensor::{Scalar, Tensor};

/// Encoder/decoder depth; `channels` must have this many entries.
pub const LEVELS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub channels: Vec<usize>,
    /// `(H, W)`
    pub input_size: (usize, usize),
    pub in_channels: usize,
    /// Swin window side `M`.
    pub window: usize,
    /// Number of axial shift groups in the bottleneck.
    pub shift_size: usize,
    /// Bottleneck hidden width multiplier.
    pub expand_ratio: usize,
    /// Swin MLP hidden width multiplier.
    pub mlp_ratio: usize,
    /// Channels per attention head; at least one head per level.
    pub head_dim: usize,
    /// conv3×3+ReLU layers per encoder and decoder stage.
    pub stage_convs: usize,
    pub bottleneck_depth: usize,
    pub use_swin_skips: bool,
    pub use_parallel_conv: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: vec![32, 64, 128, 256, 512],
            input_size: (512, 512),
            in_channels: 3,
            window: 8,
            shift_size: 5,
            expand_ratio: 1,
            mlp_ratio: 2,
            head_dim: 32,
            stage_convs: 1,
            bottleneck_depth: 1,
            use_swin_skips: true,
            use_parallel_conv: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small configuration for desk-scale runs: channels `[8,16,32,64,128]`,
    /// 64×64 input, window 4, shift size 3.
    pub fn tiny() -> Self {
        Self {
            channels: vec![8, 16, 32, 64, 128],
            input_size: (64, 64),
            window: 4,
            shift_size: 3,
            ..Self::default()
        }
    }

    pub fn heads(&self, dim: usize) -> usize {
        (dim / self.head_dim.max(1)).max(1)
    }

    pub fn swin(&self, level: usize) -> SwinConfig {
        let dim = self.channels[level];
        SwinConfig {
            heads: self.heads(dim),
            mlp_ratio: self.mlp_ratio,
            ..SwinConfig::new(dim, self.window)
        }
    }

    pub fn pcas(&self) -> PcasConfig {
        PcasConfig {
            dim: self.channels[LEVELS - 1],
            shift_size: self.shift_size,
            expand_ratio: self.expand_ratio,
            parallel_conv: self.use_parallel_conv,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.channels.len() != LEVELS {
            return fail(format!("channels needs {LEVELS} entries, got {}", self.channels.len()));
        }
        if self.channels[0] == 0 || self.channels.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!("channels {:?} must be positive and strictly increasing", self.channels));
        }
        let (h, w) = self.input_size;
        let pools = 1 << (LEVELS - 1);
        if h == 0 || w == 0 || h % pools != 0 || w % pools != 0 {
            return fail(format!("input size {h}x{w} must be a positive multiple of {pools}"));
        }
        if self.in_channels == 0 || self.stage_convs == 0 || self.bottleneck_depth == 0 || self.head_dim == 0 {
            return fail("in_channels, stage_convs, bottleneck_depth and head_dim must be positive".into());
        }
        if self.window < 2 {
            return fail(format!("window {} must be at least 2", self.window));
        }
        for level in 0..LEVELS - 1 {
            let (lh, lw) = (h >> level, w >> level);
            if lh % self.window != 0 || lw % self.window != 0 {
                return fail(format!(
                    "level {level} size {lh}x{lw} is not divisible by window {}",
                    self.window
                ));
            }
            self.swin(level).validate()?;
        }
        self.pcas().validate()
    }

    /// Flat `key=value` pairs, the inverse of [`ModelConfig::set`].
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let ch: Vec<String> = self.channels.iter().map(usize::to_string).collect();
        vec![
            ("channels".into(), ch.join(",")),
            ("input_size".into(), format!("{}x{}", self.input_size.0, self.input_size.1)),
            ("in_channels".into(), self.in_channels.to_string()),
            ("window".into(), self.window.to_string()),
            ("shift_size".into(), self.shift_size.to_string()),
            ("expand_ratio".into(), self.expand_ratio.to_string()),
            ("mlp_ratio".into(), self.mlp_ratio.to_string()),
            ("head_dim".into(), self.head_dim.to_string()),
            ("stage_convs".into(), self.stage_convs.to_string()),
            ("bottleneck_depth".into(), self.bottleneck_depth.to_string()),
            ("use_swin_skips".into(), self.use_swin_skips.to_string()),
            ("use_parallel_conv".into(), self.use_parallel_conv.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "channels" => self.channels = parse_list(key, value)?,
            "input_size" => self.input_size = parse_size(key, value)?,
            "in_channels" => self.in_channels = parse(key, value)?,
            "window" => self.window = parse(key, value)?,
            "shift_size" => self.shift_size = parse(key, value)?,
            "expand_ratio" => self.expand_ratio = parse(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, value)?,
            "head_dim" => self.head_dim = parse(key, value)?,
            "stage_convs" => self.stage_convs = parse(key, value)?,
            "bottleneck_depth" => self.bottleneck_depth = parse(key, value)?,
            "use_swin_skips" => self.use_swin_skips = parse(key, value)?,
            "use_parallel_conv" => self.use_parallel_conv = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown model key `{key}`"))),
        }
        Ok(())
    }
}

pub(crate) fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

pub(crate) fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .trim_matches(|c| c == '[' || c == ']')
        .split(',')
        .map(|v| parse(key, v))
        .collect()
}

/// Accepts `HxW`, `H,W` or a single side for square inputs.
pub(crate) fn parse_size(key: &str, value: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = value.split(['x', 'X', ',']).collect();
    match parts.as_slice() {
        [s] => {
            let s = parse(key, s)?;
            Ok((s, s))
        }
        [h, w] => Ok((parse(key, h)?, parse(key, w)?)),
        _ => Err(Error::Config(format!("invalid size `{value}` for `{key}`"))),
    }
}

#[derive(Debug, Clone)]
pub struct StmUNet<T: Scalar> {
    cfg: ModelConfig,
    store: ParamStore<T>,
    encoder: Vec<Vec<Conv>>,
    skips: Vec<Option<SwinPair>>,
    bottleneck: Vec<PcasBlock>,
    decoder: Vec<Vec<Conv>>,
    head: Conv,
}

impl<T: Scalar> StmUNet<T> {
    /// Builds the network with freshly initialized weights drawn from the
    /// config seed.
    pub fn build(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(cfg.seed, Stream::Init);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let ch = &cfg.channels;
        let k = cfg.stage_convs;

        let mut encoder = Vec::with_capacity(LEVELS);
        {
            let mut enc = b.scope("encoder");
            for level in 0..LEVELS {
                let mut stage = enc.scope(level);
                let c_in = if level == 0 { cfg.in_channels } else { ch[level - 1] };
                let mut convs = Vec::with_capacity(k);
                for j in 0..k {
                    let from = if j == 0 { c_in } else { ch[level] };
                    convs.push(stage.conv(&format!("conv{j}"), from, ch[level], 3)?);
                }
                encoder.push(convs);
            }
        }

        let mut skips = Vec::with_capacity(LEVELS - 1);
        for level in 0..LEVELS - 1 {
            skips.push(if cfg.use_swin_skips {
                Some(SwinPair::build(&mut b.scope(format!("skip.{level}")), cfg.swin(level))?)
            } else {
                None
            });
        }

        let mut bottleneck = Vec::with_capacity(cfg.bottleneck_depth);
        for i in 0..cfg.bottleneck_depth {
            bottleneck.push(PcasBlock::build(&mut b.scope(format!("bottleneck.{i}")), cfg.pcas())?);
        }

        let mut decoder = vec![Vec::new(); LEVELS - 1];
        {
            let mut dec = b.scope("decoder");
            for level in (0..LEVELS - 1).rev() {
                let mut stage = dec.scope(level);
                for j in 0..k {
                    let from = if j == 0 { ch[level + 1] + ch[level] } else { ch[level] };
                    decoder[level].push(stage.conv(&format!("conv{j}"), from, ch[level], 3)?);
                }
            }
        }

        let head = b.conv("head", ch[0], 1, 1)?;

        Ok(Self {
            cfg,
            store,
            encoder,
            skips,
            bottleneck,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    pub fn skips(&self) -> &[Option<SwinPair>] {
        &self.skips
    }

    pub fn bottleneck(&self) -> &[PcasBlock] {
        &self.bottleneck
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (h, w) = self.cfg.input_size;
        if shape.len() != 4 || shape[1] != self.cfg.in_channels || shape[2] != h || shape[3] != w {
            return Err(Error::shape(
                "forward",
                shape,
                &[shape.first().copied().unwrap_or(1), self.cfg.in_channels, h, w],
            ));
        }
        Ok(())
    }

    /// `(N, in_channels, H, W)` → logits `(N, 1, H, W)`.
    pub fn forward<'t>(&self, g: &Graph<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_input(&x.shape())?;
        let mut h = x;
        let mut features = Vec::with_capacity(LEVELS - 1);
        for (level, stage) in self.encoder.iter().enumerate() {
            if level > 0 {
                h = h.maxpool2d()?;
            }
            for conv in stage {
                h = conv.forward(g, h)?.relu();
            }
            if level < LEVELS - 1 {
                features.push(h);
            }
        }

        for block in &self.bottleneck {
            h = block.forward(g, h)?;
        }

        for level in (0..LEVELS - 1).rev() {
            let skip = match &self.skips[level] {
                Some(pair) => pair.residual(g, features[level])?,
                None => features[level],
            };
            h = Var::concat(&[h.upsample2x()?, skip], 1)?;
            for conv in &self.decoder[level] {
                h = conv.forward(g, h)?.relu();
            }
        }
        self.head.forward(g, h)
    }

    /// Logits without recording a backward graph.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let g = self.store.bind(&tape);
        let out = self.forward(&g, tape.constant(x.clone()))?;
        let value = out.value();
        Ok((*value).clone())
    }
}
