use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::DEFAULT_GROUPS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Ubotnet,
    UbotnetLite,
    Unet128,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Ubotnet => "ubotnet",
            Variant::UbotnetLite => "ubotnet_lite",
            Variant::Unet128 => "unet128",
        }
    }

    pub fn separable(self) -> bool {
        self == Variant::UbotnetLite
    }

    pub fn has_bottleneck_attention(self) -> bool {
        self != Variant::Unet128
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ubotnet" => Ok(Variant::Ubotnet),
            "ubotnet_lite" | "lite" => Ok(Variant::UbotnetLite),
            "unet128" | "unet" => Ok(Variant::Unet128),
            _ => Err(Error::invalid(format!("unknown model variant {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub base_channels: usize,
    /// Resolution levels; level `i` carries `base_channels * 2^i` channels.
    pub levels: usize,
    pub bot_blocks: usize,
    pub heads: usize,
    pub height: usize,
    pub width: usize,
    /// Hidden width of each output head; `0` means `base_channels`.
    pub head_hidden_width: usize,
    pub groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk(Variant::Ubotnet)
    }
}

impl ModelConfig {
    /// Small configuration for CPU experiments.
    pub fn desk(variant: Variant) -> Self {
        ModelConfig {
            variant,
            base_channels: 8,
            levels: 3,
            bot_blocks: if variant.has_bottleneck_attention() { 1 } else { 0 },
            heads: 4,
            height: 64,
            width: 128,
            head_hidden_width: 0,
            groups: DEFAULT_GROUPS,
        }
    }

    /// Full-size configuration at 512x256 input.
    pub fn full(variant: Variant) -> Self {
        ModelConfig {
            variant,
            base_channels: 128,
            levels: 5,
            bot_blocks: if variant.has_bottleneck_attention() { 3 } else { 0 },
            heads: 4,
            height: 256,
            width: 512,
            head_hidden_width: 0,
            groups: DEFAULT_GROUPS,
        }
    }

    pub fn with_input(mut self, height: usize, width: usize) -> Self {
        self.height = height;
        self.width = width;
        self
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.channels(self.levels - 1)
    }

    /// Width inside each attention block.
    pub fn bot_width(&self) -> usize {
        self.bottleneck_channels() / 2
    }

    pub fn head_hidden(&self) -> usize {
        if self.head_hidden_width == 0 {
            self.base_channels
        } else {
            self.head_hidden_width
        }
    }

    /// Spatial extent `(h, w)` at the lowest resolution.
    pub fn bottleneck_size(&self) -> (usize, usize) {
        let f = 1 << (self.levels - 1);
        (self.height / f, self.width / f)
    }

    pub fn bot_blocks_effective(&self) -> usize {
        if self.variant.has_bottleneck_attention() {
            self.bot_blocks
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.levels < 2 {
            return bad(format!("levels must be at least 2, got {}", self.levels));
        }
        if self.base_channels == 0 || self.groups == 0 || self.base_channels % self.groups != 0 {
            return bad(format!(
                "base_channels {} must be a positive multiple of groups {}",
                self.base_channels, self.groups
            ));
        }
        if self.height == 0 || self.width != 2 * self.height {
            return bad(format!("input must be W = 2H, got {}x{}", self.width, self.height));
        }
        let f = 1 << (self.levels - 1);
        if self.height % f != 0 {
            return bad(format!("height {} not divisible by 2^{}", self.height, self.levels - 1));
        }
        if self.variant.has_bottleneck_attention() {
            if !(1..=3).contains(&self.bot_blocks) {
                return bad(format!("bot_blocks must be in 1..=3, got {}", self.bot_blocks));
            }
            let m = self.bot_width();
            if self.heads == 0 || m % self.heads != 0 {
                return bad(format!("attention width {m} not divisible into {} heads", self.heads));
            }
            if m % self.groups != 0 {
                return bad(format!("attention width {m} not divisible into {} groups", self.groups));
            }
        }
        Ok(())
    }

    /// Input resolution check for a batch.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != 3 || shape[2] != self.height || shape[3] != self.width {
            return Err(Error::shape("model input", shape, &[0, 3, self.height, self.width]));
        }
        Ok(())
    }
}

/// Closed-form parameter count of a configuration.
pub fn count_parameters(cfg: &ModelConfig) -> usize {
    let sep = cfg.variant.separable();
    let conv3 = |cin: usize, cout: usize| {
        if sep {
            9 * cin + cin * cout + cout
        } else {
            9 * cin * cout + cout
        }
    };
    let gn = |c: usize| 2 * c;
    let c = |i: usize| cfg.channels(i);
    let mut total = 0;
    for i in 0..cfg.levels {
        let cin = if i == 0 { 3 } else { c(i - 1) };
        total += conv3(cin, c(i)) + conv3(c(i), c(i)) + 2 * gn(c(i));
    }
    for i in 0..cfg.levels - 1 {
        total += conv3(c(i) + c(i + 1), c(i)) + conv3(c(i), c(i)) + 2 * gn(c(i));
    }
    let cb = cfg.bottleneck_channels();
    let m = cb / 2;
    let (hb, wb) = cfg.bottleneck_size();
    let block = (cb * m + m)
        + gn(m)
        + 4 * m * m
        + (2 * hb - 1 + 2 * wb - 1) * (m / cfg.heads.max(1))
        + gn(m)
        + (m * cb + cb)
        + gn(cb);
    total += cfg.bot_blocks_effective() * block;
    let hid = cfg.head_hidden();
    let fc1 = cfg.base_channels * hid + hid;
    total += (fc1 + hid + 1) + (fc1 + 3 * hid + 3);
    total
}
