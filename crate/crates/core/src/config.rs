//! Model configuration, presets and the flat `key = value` text format.
//!
//! A config file is UTF-8 text with one `key = value` pair per line. Blank
//! lines and lines starting with `#` are ignored. Values that need leading
//! or trailing spaces are written in double quotes. Lists are
//! comma-separated. A `preset = paper|desk` line supplies defaults for every
//! key not given explicitly; without it every key is required.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write as _;
use core::str::FromStr;

use crate::avmodel::{DecoderConfig, EncoderConfig, Vocabulary};
use crate::audio::FEATURE_DIM;
use crate::conv_frontend::Vgg21dConfig;
use crate::error::bail;
use crate::video::{TubeletWindow, VideoGeometry};
use crate::vit_frontend::{PoolMode, VitConfig};
use crate::{Error, Result};

/// Parsed `key = value` lines, in key order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    map: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = Self::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!(Config, "line {}: expected `key = value`", n + 1);
            };
            let k = k.trim();
            let mut v = v.trim();
            if v.len() >= 2 && v.starts_with('"') && v.ends_with('"') {
                v = &v[1..v.len() - 1];
            }
            if k.is_empty() {
                bail!(Config, "line {}: empty key", n + 1);
            }
            if kv.map.insert(k.to_string(), v.to_string()).is_some() {
                bail!(Config, "line {}: duplicate key {k}", n + 1);
            }
        }
        Ok(kv)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Adds every pair of `other`, replacing existing keys.
    pub fn extend(&mut self, other: &KeyValues) {
        for (k, v) in other.iter() {
            self.set(k, v);
        }
    }

    pub fn parse_value<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("cannot parse {key} = {v:?}"))),
        }
    }

    pub fn parse_list(&self, key: &str) -> Result<Option<Vec<usize>>> {
        match self.get(key) {
            None => Ok(None),
            Some("") => Ok(Some(Vec::new())),
            Some(v) => v
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("cannot parse {key} = {v:?}")))
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }

    /// Renders in key order; values with edge spaces are quoted.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.iter() {
            if v != v.trim() || (v.starts_with('"') && v.ends_with('"')) {
                let _ = writeln!(out, "{k} = \"{v}\"");
            } else {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }
}

/// Which video front-end feeds the fusion, if any.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FrontEndKind {
    Vgg21d,
    Vit,
    /// No video input and no video front-end.
    AudioOnly,
}

impl FrontEndKind {
    pub const ALL: [FrontEndKind; 3] = [FrontEndKind::Vgg21d, FrontEndKind::Vit, FrontEndKind::AudioOnly];

    pub fn name(&self) -> &'static str {
        match self {
            FrontEndKind::Vgg21d => "vgg21d",
            FrontEndKind::Vit => "vit",
            FrontEndKind::AudioOnly => "audio-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown front-end {s:?} (vgg21d, vit, audio-only)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Desk,
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            _ => bail!(Config, "unknown preset {s:?} (paper, desk)"),
        }
    }
}

/// Everything needed to build an [`crate::avmodel::AvModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub front_end: FrontEndKind,
    pub vgg: Vgg21dConfig,
    pub vit: VitConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub vocab: Vocabulary,
}

const KEYS: &[&str] = &[
    "model.front_end",
    "vgg.channels",
    "vgg.pool_after",
    "vgg.output_dim",
    "vgg.frame",
    "vit.layers",
    "vit.heads",
    "vit.d_model",
    "vit.d_ff",
    "vit.pool",
    "video.frame",
    "video.patch",
    "video.depth",
    "video.window",
    "encoder.layers",
    "encoder.d_model",
    "encoder.heads",
    "encoder.d_ff",
    "decoder.embed_dim",
    "decoder.hidden",
    "decoder.layers",
    "decoder.joint_dim",
    "vocab.symbols",
];

fn join(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ModelConfig {
    pub fn preset(preset: Preset, front_end: FrontEndKind) -> Self {
        match preset {
            Preset::Paper => Self {
                front_end,
                vgg: Vgg21dConfig::paper(),
                vit: VitConfig::paper(),
                encoder: EncoderConfig::paper(),
                decoder: DecoderConfig::paper(),
                vocab: Vocabulary::default(),
            },
            Preset::Desk => Self {
                front_end,
                vgg: Vgg21dConfig::desk(),
                vit: VitConfig::desk(),
                encoder: EncoderConfig::desk(),
                decoder: DecoderConfig::desk(),
                vocab: Vocabulary::default(),
            },
        }
    }

    pub fn paper(front_end: FrontEndKind) -> Self {
        Self::preset(Preset::Paper, front_end)
    }

    pub fn desk(front_end: FrontEndKind) -> Self {
        Self::preset(Preset::Desk, front_end)
    }

    /// Width of the visual features entering fusion (0 without video).
    pub fn video_dim(&self) -> usize {
        match self.front_end {
            FrontEndKind::Vgg21d => self.vgg.output_dim,
            FrontEndKind::Vit => self.vit.d_model,
            FrontEndKind::AudioOnly => 0,
        }
    }

    /// Width of the fused features.
    pub fn fused_dim(&self) -> usize {
        FEATURE_DIM + self.video_dim()
    }

    /// Square frame size the selected front-end expects (0 without video).
    pub fn video_frame(&self) -> usize {
        match self.front_end {
            FrontEndKind::Vgg21d => self.vgg.frame,
            FrontEndKind::Vit => self.vit.geometry.frame,
            FrontEndKind::AudioOnly => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.front_end {
            FrontEndKind::Vgg21d => self.vgg.validate()?,
            FrontEndKind::Vit => self.vit.validate()?,
            FrontEndKind::AudioOnly => {}
        }
        let e = &self.encoder;
        if e.layers == 0 || e.heads == 0 || !e.d_model.is_multiple_of(e.heads) || e.d_ff == 0 {
            bail!(Config, "encoder needs layers > 0 and d_model divisible by heads");
        }
        let d = &self.decoder;
        if d.layers == 0 || d.hidden == 0 || d.embed_dim == 0 || d.joint_dim == 0 {
            bail!(Config, "decoder sizes must be positive");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("model.front_end", self.front_end.name());
        kv.set("vgg.channels", join(&self.vgg.layer_channels));
        kv.set("vgg.pool_after", join(&self.vgg.pool_after));
        kv.set("vgg.output_dim", self.vgg.output_dim);
        kv.set("vgg.frame", self.vgg.frame);
        kv.set("vit.layers", self.vit.layers);
        kv.set("vit.heads", self.vit.heads);
        kv.set("vit.d_model", self.vit.d_model);
        kv.set("vit.d_ff", self.vit.d_ff);
        kv.set("vit.pool", self.vit.pool.name());
        let geo = &self.vit.geometry;
        kv.set("video.frame", geo.frame);
        kv.set("video.patch", geo.patch);
        kv.set("video.depth", geo.depth);
        kv.set("video.window", geo.window.name());
        kv.set("encoder.layers", self.encoder.layers);
        kv.set("encoder.d_model", self.encoder.d_model);
        kv.set("encoder.heads", self.encoder.heads);
        kv.set("encoder.d_ff", self.encoder.d_ff);
        kv.set("decoder.embed_dim", self.decoder.embed_dim);
        kv.set("decoder.hidden", self.decoder.hidden);
        kv.set("decoder.layers", self.decoder.layers);
        kv.set("decoder.joint_dim", self.decoder.joint_dim);
        kv.set("vocab.symbols", self.vocab.symbols());
        kv
    }

    /// Reads the model keys of `kv`. Other keys are ignored.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut full = match kv.get("preset") {
            Some(p) => {
                let fe = match kv.get("model.front_end") {
                    Some(f) => FrontEndKind::parse(f)?,
                    None => FrontEndKind::Vit,
                };
                Self::preset(Preset::parse(p)?, fe).to_kv()
            }
            None => {
                let missing: Vec<&str> = KEYS.iter().copied().filter(|k| !kv.contains(k)).collect();
                if !missing.is_empty() {
                    bail!(Config, "missing fields: {}", missing.join(", "));
                }
                KeyValues::new()
            }
        };
        full.extend(kv);
        let need = |k: &str| -> Result<usize> { full.parse_value(k)?.ok_or_else(|| Error::Config(format!("missing field {k}"))) };
        let cfg = Self {
            front_end: FrontEndKind::parse(full.get("model.front_end").unwrap_or_default())?,
            vgg: Vgg21dConfig {
                layer_channels: full.parse_list("vgg.channels")?.unwrap_or_default(),
                pool_after: full.parse_list("vgg.pool_after")?.unwrap_or_default(),
                output_dim: need("vgg.output_dim")?,
                frame: need("vgg.frame")?,
            },
            vit: VitConfig {
                layers: need("vit.layers")?,
                heads: need("vit.heads")?,
                d_model: need("vit.d_model")?,
                d_ff: need("vit.d_ff")?,
                pool: PoolMode::parse(full.get("vit.pool").unwrap_or_default())?,
                geometry: VideoGeometry {
                    frame: need("video.frame")?,
                    patch: need("video.patch")?,
                    depth: need("video.depth")?,
                    window: TubeletWindow::parse(full.get("video.window").unwrap_or_default())?,
                },
            },
            encoder: EncoderConfig {
                layers: need("encoder.layers")?,
                d_model: need("encoder.d_model")?,
                heads: need("encoder.heads")?,
                d_ff: need("encoder.d_ff")?,
            },
            decoder: DecoderConfig {
                embed_dim: need("decoder.embed_dim")?,
                hidden: need("decoder.hidden")?,
                layers: need("decoder.layers")?,
                joint_dim: need("decoder.joint_dim")?,
            },
            vocab: Vocabulary::new(full.get("vocab.symbols").unwrap_or_default())?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.to_kv().render()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_kv(&KeyValues::parse(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        for preset in [Preset::Paper, Preset::Desk] {
            for fe in FrontEndKind::ALL {
                let cfg = ModelConfig::preset(preset, fe);
                assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
            }
        }
    }

    #[test]
    fn missing_fields_are_listed() {
        let err = ModelConfig::from_text("model.front_end = vit\nencoder.layers = 2\n").unwrap_err();
        let Error::Config(msg) = err else { panic!("{err:?}") };
        assert!(msg.contains("vit.d_ff") && msg.contains("decoder.hidden"));
        assert!(!msg.contains("encoder.layers"));
    }

    #[test]
    fn preset_with_overrides() {
        let cfg = ModelConfig::from_text("preset = desk\nmodel.front_end = vgg21d\nencoder.layers = 3\n").unwrap();
        assert_eq!(cfg.front_end, FrontEndKind::Vgg21d);
        assert_eq!(cfg.encoder.layers, 3);
        assert_eq!(cfg.decoder, DecoderConfig::desk());
        assert!(ModelConfig::from_text("preset = huge\n").is_err());
    }

    #[test]
    fn fused_width() {
        assert_eq!(ModelConfig::paper(FrontEndKind::Vit).fused_dim(), 752);
        assert_eq!(ModelConfig::paper(FrontEndKind::Vgg21d).fused_dim(), 752);
        assert_eq!(ModelConfig::paper(FrontEndKind::AudioOnly).fused_dim(), 240);
    }
}
