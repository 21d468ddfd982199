//! Encoder and decoder building blocks.

use super::config::{norm_groups, ModelConfig, SkipMode};
use super::params::{Init, ParamSpec, ParamVars};
use super::{fuse, SkipState};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};

pub(crate) const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
struct Conv {
    name: String,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
}

impl Conv {
    fn new(name: String, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Conv {
            name,
            in_ch,
            out_ch,
            kernel,
            stride,
        }
    }

    fn specs(&self, out: &mut Vec<ParamSpec>) {
        out.push(ParamSpec {
            name: format!("{}.weight", self.name),
            shape: vec![self.out_ch, self.in_ch, self.kernel, self.kernel],
            init: Init::HeNormal {
                fan_in: self.in_ch * self.kernel * self.kernel,
            },
        });
        out.push(ParamSpec {
            name: format!("{}.bias", self.name),
            shape: vec![self.out_ch],
            init: Init::Zeros,
        });
    }

    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, pv: &ParamVars, x: Var) -> Result<Var> {
        let w = pv.get(&format!("{}.weight", self.name))?;
        let b = pv.get(&format!("{}.bias", self.name))?;
        tape.conv2d(x, w, b, self.stride, self.kernel / 2)
    }
}

#[derive(Clone, Debug)]
struct Norm {
    name: String,
    channels: usize,
}

impl Norm {
    fn specs(&self, out: &mut Vec<ParamSpec>) {
        out.push(ParamSpec {
            name: format!("{}.gamma", self.name),
            shape: vec![self.channels],
            init: Init::Ones,
        });
        out.push(ParamSpec {
            name: format!("{}.beta", self.name),
            shape: vec![self.channels],
            init: Init::Zeros,
        });
    }

    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, pv: &ParamVars, x: Var) -> Result<Var> {
        let g = pv.get(&format!("{}.gamma", self.name))?;
        let b = pv.get(&format!("{}.beta", self.name))?;
        tape.group_norm(x, norm_groups(self.channels), g, b, NORM_EPS)
    }
}

/// conv -> group norm -> relu
#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv,
    norm: Norm,
}

impl ConvBlock {
    fn new(prefix: &str, conv_name: &str, norm_name: &str, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        ConvBlock {
            conv: Conv::new(format!("{prefix}.{conv_name}"), in_ch, out_ch, 3, stride),
            norm: Norm {
                name: format!("{prefix}.{norm_name}"),
                channels: out_ch,
            },
        }
    }

    fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.conv.specs(out);
        self.norm.specs(out);
    }

    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, pv: &ParamVars, x: Var) -> Result<Var> {
        let y = self.conv.apply(tape, pv, x)?;
        let y = self.norm.apply(tape, pv, y)?;
        tape.relu(y)
    }
}

/// Downsampling basic block: two 3x3 convs plus a strided 1x1 projection.
#[derive(Clone, Debug)]
struct ResidualStage {
    conv1: Conv,
    norm1: Norm,
    conv2: Conv,
    norm2: Norm,
    proj: Conv,
    proj_norm: Norm,
}

impl ResidualStage {
    fn new(prefix: &str, in_ch: usize, out_ch: usize) -> Self {
        let norm = |n: &str| Norm {
            name: format!("{prefix}.{n}"),
            channels: out_ch,
        };
        ResidualStage {
            conv1: Conv::new(format!("{prefix}.conv1"), in_ch, out_ch, 3, 2),
            norm1: norm("norm1"),
            conv2: Conv::new(format!("{prefix}.conv2"), out_ch, out_ch, 3, 1),
            norm2: norm("norm2"),
            proj: Conv::new(format!("{prefix}.proj"), in_ch, out_ch, 1, 2),
            proj_norm: norm("proj_norm"),
        }
    }

    fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.conv1.specs(out);
        self.norm1.specs(out);
        self.conv2.specs(out);
        self.norm2.specs(out);
        self.proj.specs(out);
        self.proj_norm.specs(out);
    }

    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, pv: &ParamVars, x: Var) -> Result<Var> {
        let h = self.conv1.apply(tape, pv, x)?;
        let h = self.norm1.apply(tape, pv, h)?;
        let h = tape.relu(h)?;
        let h = self.conv2.apply(tape, pv, h)?;
        let h = self.norm2.apply(tape, pv, h)?;
        let s = self.proj.apply(tape, pv, x)?;
        let s = self.proj_norm.apply(tape, pv, s)?;
        let y = tape.add(h, s)?;
        tape.relu(y)
    }
}

/// Latent code plus the feature taps used by skip connections.
#[derive(Clone, Debug)]
pub struct Encoding {
    pub latent: Var,
    /// Stem output followed by each stage output, finest first.
    pub pyramid: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    prefix: String,
    resolution: usize,
    stem: ConvBlock,
    stages: Vec<ResidualStage>,
}

impl Encoder {
    pub(crate) fn new(prefix: &str, cfg: &ModelConfig) -> Self {
        let stem = ConvBlock::new(&format!("{prefix}.stem"), "conv", "norm", 3, cfg.base_width, 2);
        let mut stages = Vec::with_capacity(cfg.n_stages);
        let mut in_ch = cfg.base_width;
        for s in 1..=cfg.n_stages {
            let out_ch = cfg.stage_width(s);
            stages.push(ResidualStage::new(&format!("{prefix}.stage{s}"), in_ch, out_ch));
            in_ch = out_ch;
        }
        Encoder {
            prefix: prefix.to_string(),
            resolution: cfg.input_resolution,
            stem,
            stages,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub(crate) fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.stem.specs(out);
        for s in &self.stages {
            s.specs(out);
        }
    }

    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, pv: &ParamVars, input: Var) -> Result<Encoding> {
        let [_, c, h, w] = tape.value(input).dims4("encode")?;
        if c != 3 || h != self.resolution || w != self.resolution {
            return Err(Error::invalid(
                "encode",
                format!(
                    "{} expects Bx3x{r}x{r} input, got {:?}",
                    self.prefix,
                    tape.shape(input),
                    r = self.resolution
                ),
            ));
        }
        let mut x = self.stem.apply(tape, pv, input)?;
        let mut pyramid = vec![x];
        for stage in &self.stages {
            x = stage.apply(tape, pv, x)?;
            pyramid.push(x);
        }
        Ok(Encoding { latent: x, pyramid })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Fusion {
    Max,
    Concat,
    Off,
}

#[derive(Clone, Debug)]
struct DecoderSite {
    upsample: bool,
    pre: ConvBlock,
    tail: usize,
    post: ConvBlock,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    prefix: String,
    fusion: Fusion,
    sites: Vec<DecoderSite>,
    head: Conv,
    sigmoid_head: bool,
}

impl Decoder {
    /// Site `k` works at the resolution of encoder tap `n_stages - k`. Its
    /// first conv emits `2m` channels whose last `m` form the fusion tail.
    pub(crate) fn new(prefix: &str, cfg: &ModelConfig, with_skips: bool, sigmoid_head: bool) -> Self {
        let fusion = match (with_skips, cfg.skip_mode) {
            (false, _) | (true, SkipMode::None) => Fusion::Off,
            (true, SkipMode::Deactivable) => Fusion::Max,
            (true, SkipMode::StandardConcat) => Fusion::Concat,
        };
        let taps = cfg.tap_channels();
        let mut sites = Vec::with_capacity(taps.len());
        let mut in_ch = cfg.latent_channels;
        for k in 0..taps.len() {
            let tap = taps.len() - 1 - k;
            let m = taps[tap];
            let out_ch = if tap == 0 { cfg.base_width } else { taps[tap - 1] };
            let site_prefix = format!("{prefix}.site{k}");
            let (post_name, post_in) = match fusion {
                Fusion::Concat => ("post_cat", 3 * m),
                _ => ("post", 2 * m),
            };
            sites.push(DecoderSite {
                upsample: k > 0,
                pre: ConvBlock::new(&site_prefix, "pre", "pre_norm", in_ch, 2 * m, 1),
                tail: m,
                post: ConvBlock::new(&site_prefix, post_name, "post_norm", post_in, out_ch, 1),
            });
            in_ch = out_ch;
        }
        Decoder {
            prefix: prefix.to_string(),
            fusion,
            sites,
            head: Conv::new(format!("{prefix}.head"), in_ch, 3, 3, 1),
            sigmoid_head,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Whether this decoder has fusion sites at all.
    pub fn has_skips(&self) -> bool {
        self.fusion != Fusion::Off
    }

    pub(crate) fn specs(&self, out: &mut Vec<ParamSpec>) {
        for s in &self.sites {
            s.pre.specs(out);
            s.post.specs(out);
        }
        self.head.specs(out);
    }

    pub fn decode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        latent: Var,
        pyramid: Option<&[Var]>,
        state: SkipState,
    ) -> Result<Var> {
        match (self.fusion, pyramid, state) {
            (Fusion::Off, Some(_), _) => {
                return Err(Error::invalid(
                    "decode",
                    format!("{} has no skip connections but received a pyramid", self.prefix),
                ))
            }
            (Fusion::Off, None, SkipState::Active) => {
                return Err(Error::invalid(
                    "decode",
                    format!("{} has no skip connections to activate", self.prefix),
                ))
            }
            (_, None, SkipState::Active) => {
                return Err(Error::invalid("decode", "active skip connections need a pyramid"))
            }
            (Fusion::Concat, _, SkipState::Inactive) => {
                return Err(Error::invalid(
                    "decode",
                    "standard concatenation skips cannot be deactivated",
                ))
            }
            _ => {}
        }
        if let Some(p) = pyramid {
            if p.len() != self.sites.len() {
                return Err(Error::invalid(
                    "decode",
                    format!("pyramid has {} levels, decoder has {} sites", p.len(), self.sites.len()),
                ));
            }
        }
        let mut x = latent;
        for (k, site) in self.sites.iter().enumerate() {
            if site.upsample {
                x = tape.upsample_nearest(x, 2)?;
            }
            let h = site.pre.apply(tape, pv, x)?;
            let enc = pyramid.map(|p| p[p.len() - 1 - k]);
            if let Some(e) = enc {
                if tape.shape(e)[1] != site.tail {
                    return Err(Error::shape("skip link", tape.shape(h), tape.shape(e)));
                }
            }
            let h = match self.fusion {
                Fusion::Off => h,
                Fusion::Max => fuse(tape, h, enc, state)?,
                Fusion::Concat => {
                    let enc = enc.expect("checked above");
                    check_spatial(tape, h, enc)?;
                    tape.concat_channels(h, enc)?
                }
            };
            x = site.post.apply(tape, pv, h)?;
        }
        x = tape.upsample_nearest(x, 2)?;
        let out = self.head.apply(tape, pv, x)?;
        if self.sigmoid_head {
            tape.sigmoid(out)
        } else {
            Ok(out)
        }
    }
}

fn check_spatial<T: Scalar>(tape: &Tape<T>, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa[0] != sb[0] || sa[2..] != sb[2..] {
        return Err(Error::shape("skip link", sa, sb));
    }
    Ok(())
}
