//! The cross-modal architecture.
//!
//! `E_I` (image encoder) and `E_N` (normal encoder) map 3-channel rasters to
//! latents of one shared shape; `D_I` and `D_N` decode them back. Skip
//! connections link `E_I` to `D_N` only. In the default
//! [`SkipMode::Deactivable`] mode each link max-fuses an encoder tap into the
//! last `m` channels of the matching decoder features, so a decoder pass
//! without the link (normal auto-encoding) sees the same channel layout.

mod config;
mod network;
mod params;

pub use config::{ModelConfig, SkipMode, Variant};
pub use network::{Decoder, Encoder, Encoding};
pub use params::{ParamStore, ParamVars};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use params::ParamSpec;

/// Whether a decoder pass consumes encoder features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipState {
    Active,
    Inactive,
}

/// Translation performed by one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    ImageToNormal,
    ImageToImage,
    NormalToNormal,
}

/// One of the four sub-networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Net {
    ImageEncoder,
    NormalEncoder,
    ImageDecoder,
    NormalDecoder,
}

impl Net {
    pub const ALL: [Net; 4] = [
        Net::ImageEncoder,
        Net::NormalEncoder,
        Net::ImageDecoder,
        Net::NormalDecoder,
    ];

    /// Registry prefix, including the trailing dot.
    pub fn prefix(self) -> &'static str {
        match self {
            Net::ImageEncoder => "e_i.",
            Net::NormalEncoder => "e_n.",
            Net::ImageDecoder => "d_i.",
            Net::NormalDecoder => "d_n.",
        }
    }
}

impl Mode {
    pub fn networks(self) -> &'static [Net] {
        match self {
            Mode::ImageToNormal => &[Net::ImageEncoder, Net::NormalDecoder],
            Mode::ImageToImage => &[Net::ImageEncoder, Net::ImageDecoder],
            Mode::NormalToNormal => &[Net::NormalEncoder, Net::NormalDecoder],
        }
    }
}

/// Fuses encoder features into the tail of decoder features.
///
/// `Inactive` returns `decoder_feats` untouched. `Active` keeps the first
/// `C` channels and replaces the last `m` (the encoder's channel count) with
/// `max(encoder, tail)`; ties send the gradient to the decoder side.
pub fn fuse<T: Scalar>(
    tape: &mut Tape<T>,
    decoder_feats: Var,
    encoder_feats: Option<Var>,
    state: SkipState,
) -> Result<Var> {
    if state == SkipState::Inactive {
        return Ok(decoder_feats);
    }
    let enc = encoder_feats
        .ok_or_else(|| Error::invalid("fuse", "active fusion needs encoder features"))?;
    let [b, total, h, w] = tape.value(decoder_feats).dims4("fuse")?;
    let [eb, m, eh, ew] = tape.value(enc).dims4("fuse")?;
    if eb != b || eh != h || ew != w || m > total {
        return Err(Error::shape("fuse", tape.shape(decoder_feats), tape.shape(enc)));
    }
    let keep = total - m;
    let head = tape.slice_channels(decoder_feats, 0, keep)?;
    let tail = tape.slice_channels(decoder_feats, keep, m)?;
    let fused = tape.elementwise_max(enc, tail)?;
    tape.concat_channels(head, fused)
}

/// The four networks, their wiring, and the parameter registry.
#[derive(Clone, Debug)]
pub struct CrossModalModel<T: Scalar = f32> {
    config: ModelConfig,
    e_i: Encoder,
    e_n: Option<Encoder>,
    d_i: Option<Decoder>,
    d_n: Decoder,
    pub params: ParamStore<T>,
}

fn build_networks(config: &ModelConfig) -> (Encoder, Option<Encoder>, Option<Decoder>, Decoder) {
    let e_i = Encoder::new("e_i", config);
    let e_n = config.has_normal_encoder.then(|| Encoder::new("e_n", config));
    let d_i = config
        .has_image_decoder
        .then(|| Decoder::new("d_i", config, false, true));
    let d_n = Decoder::new("d_n", config, true, false);
    (e_i, e_n, d_i, d_n)
}

impl<T: Scalar> CrossModalModel<T> {
    /// Freshly initialized model, seeded from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (e_i, e_n, d_i, d_n) = build_networks(&config);
        let mut model = CrossModalModel {
            config,
            e_i,
            e_n,
            d_i,
            d_n,
            params: ParamStore::from_map(Default::default()),
        };
        model.params = ParamStore::initialize(&model.param_specs(), model.config.seed);
        Ok(model)
    }

    /// Model with externally supplied parameters; the registry must match
    /// the configuration exactly.
    pub fn with_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config)?;
        for spec in model.param_specs() {
            let t = params
                .get(&spec.name)
                .ok_or_else(|| Error::Config(format!("parameter `{}` missing", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::DimMismatch {
                    name: spec.name,
                    expected: spec.shape,
                    found: t.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = params.names().find(|n| !model.params.contains(n)) {
            return Err(Error::UnknownParameter(extra.to_string()));
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub(crate) fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        self.e_i.specs(&mut specs);
        if let Some(e) = &self.e_n {
            e.specs(&mut specs);
        }
        if let Some(d) = &self.d_i {
            d.specs(&mut specs);
        }
        self.d_n.specs(&mut specs);
        specs
    }

    pub fn has_network(&self, net: Net) -> bool {
        match net {
            Net::ImageEncoder | Net::NormalDecoder => true,
            Net::NormalEncoder => self.e_n.is_some(),
            Net::ImageDecoder => self.d_i.is_some(),
        }
    }

    pub fn supports(&self, mode: Mode) -> bool {
        mode.networks().iter().all(|n| self.has_network(*n))
    }

    fn require(&self, mode: Mode) -> Result<()> {
        if self.supports(mode) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{mode:?} needs networks {:?} but this configuration lacks one of them",
                mode.networks()
            )))
        }
    }

    /// Binds the parameters of `nets` as differentiable tape leaves.
    pub fn bind(&self, tape: &mut Tape<T>, nets: &[Net]) -> ParamVars {
        let prefixes: Vec<&str> = nets.iter().map(|n| n.prefix()).collect();
        self.params.bind(tape, &prefixes)
    }

    pub fn image_encoder(&self) -> &Encoder {
        &self.e_i
    }

    pub fn normal_encoder(&self) -> Result<&Encoder> {
        self.e_n
            .as_ref()
            .ok_or_else(|| Error::Config("this configuration has no normal encoder".into()))
    }

    pub fn image_decoder(&self) -> Result<&Decoder> {
        self.d_i
            .as_ref()
            .ok_or_else(|| Error::Config("this configuration has no image decoder".into()))
    }

    pub fn normal_decoder(&self) -> &Decoder {
        &self.d_n
    }

    fn normal_from_image(&self, tape: &mut Tape<T>, pv: &ParamVars, enc: &Encoding) -> Result<Var> {
        match self.config.skip_mode {
            SkipMode::None => self.d_n.decode(tape, pv, enc.latent, None, SkipState::Inactive),
            SkipMode::Deactivable | SkipMode::StandardConcat => {
                self.d_n
                    .decode(tape, pv, enc.latent, Some(&enc.pyramid), SkipState::Active)
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, pv: &ParamVars, input: Var, mode: Mode) -> Result<Var> {
        self.require(mode)?;
        match mode {
            Mode::ImageToNormal => {
                let enc = self.e_i.encode(tape, pv, input)?;
                self.normal_from_image(tape, pv, &enc)
            }
            Mode::ImageToImage => {
                let enc = self.e_i.encode(tape, pv, input)?;
                self.image_decoder()?
                    .decode(tape, pv, enc.latent, None, SkipState::Inactive)
            }
            Mode::NormalToNormal => {
                let enc = self.normal_encoder()?.encode(tape, pv, input)?;
                self.d_n.decode(tape, pv, enc.latent, None, SkipState::Inactive)
            }
        }
    }

    /// One image encoding feeding both decoders: returns the raw normal
    /// prediction and, when the image decoder exists, the reconstruction.
    pub fn forward_paired(&self, tape: &mut Tape<T>, pv: &ParamVars, image: Var) -> Result<(Var, Option<Var>)> {
        let enc = self.e_i.encode(tape, pv, image)?;
        let normals = self.normal_from_image(tape, pv, &enc)?;
        let recon = match &self.d_i {
            Some(d) => Some(d.decode(tape, pv, enc.latent, None, SkipState::Inactive)?),
            None => None,
        };
        Ok((normals, recon))
    }

    /// Gradient-free forward pass on a concrete tensor.
    pub fn infer(&self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.require(mode)?;
        let mut tape = Tape::new();
        let prefixes: Vec<&str> = mode.networks().iter().map(|n| n.prefix()).collect();
        let pv = self.params.bind_frozen(&mut tape, &prefixes);
        let x = tape.constant(input.clone());
        let y = self.forward(&mut tape, &pv, x, mode)?;
        Ok(tape.value(y).clone())
    }

    /// Same architecture and weights in another precision.
    pub fn cast<U: Scalar>(&self) -> CrossModalModel<U> {
        CrossModalModel {
            config: self.config.clone(),
            e_i: self.e_i.clone(),
            e_n: self.e_n.clone(),
            d_i: self.d_i.clone(),
            d_n: self.d_n.clone(),
            params: self.params.cast(),
        }
    }
}
