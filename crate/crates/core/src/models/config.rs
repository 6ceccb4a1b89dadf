use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    FullUnet,
    /// conv2, conv4 and conv5 removed.
    NoConv245,
    /// Pooling, conv4, conv5, upsampling and the skip concatenation removed.
    NoPoolBlock,
    Bilstm,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::FullUnet,
        Variant::NoConv245,
        Variant::NoPoolBlock,
        Variant::Bilstm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::FullUnet => "full_unet",
            Variant::NoConv245 => "no_conv245",
            Variant::NoPoolBlock => "no_pool_block",
            Variant::Bilstm => "bilstm",
        }
    }

    pub fn is_cnn(self) -> bool {
        self != Variant::Bilstm
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Accepts both the canonical names and the command-line aliases.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full_unet" | "unet" => Variant::FullUnet,
            "no_conv245" | "unet-noconv245" => Variant::NoConv245,
            "no_pool_block" | "unet-nopool" => Variant::NoPoolBlock,
            "bilstm" => Variant::Bilstm,
            other => return Err(Error::config(format!("unknown model variant {other:?}"))),
        })
    }
}

/// Output channel widths of every U-Net layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Channels {
    pub conv1: usize,
    pub conv2: usize,
    pub conv3: usize,
    pub conv4: usize,
    pub deconv: usize,
    pub conv5: usize,
    pub conv6: usize,
    pub conv7: usize,
}

impl Default for Channels {
    fn default() -> Self {
        Channels {
            conv1: 64,
            conv2: 64,
            conv3: 128,
            conv4: 128,
            deconv: 64,
            conv5: 256,
            conv6: 256,
            conv7: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Feature channels per token: the embedding width, or 768 per contextual layer.
    pub input_channels: usize,
    pub seq_len: usize,
    pub channels: Channels,
    /// Hidden width per direction.
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub dropout_p: f32,
    pub head_classes: usize,
}

impl ModelConfig {
    pub fn new(variant: Variant, input_channels: usize) -> Self {
        ModelConfig {
            variant,
            input_channels,
            seq_len: 64,
            channels: Channels::default(),
            lstm_hidden: 100,
            lstm_layers: 3,
            dropout_p: 0.5,
            head_classes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.input_channels == 0 {
            return fail("input_channels must be positive".into());
        }
        if self.seq_len == 0 || !self.seq_len.is_multiple_of(2) {
            return fail(format!("seq_len {} must be positive and even", self.seq_len));
        }
        if self.head_classes < 2 {
            return fail(format!("head_classes {} < 2", self.head_classes));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        match self.variant {
            Variant::Bilstm => {
                if self.lstm_hidden == 0 || self.lstm_layers == 0 {
                    return fail("BiLSTM needs positive hidden width and depth".into());
                }
            }
            variant => {
                let c = &self.channels;
                let widths = [c.conv1, c.conv2, c.conv3, c.conv4, c.deconv, c.conv5, c.conv6, c.conv7];
                if widths.contains(&0) {
                    return fail(format!("zero channel width in {c:?}"));
                }
                if variant == Variant::FullUnet && (c.conv4 != 128 || c.conv6 != 256) {
                    return fail(format!(
                        "full_unet uses conv4 = 128 and conv6 = 256, got {} and {}",
                        c.conv4, c.conv6
                    ));
                }
            }
        }
        Ok(())
    }

    /// `key=value` lines, one per field.
    pub fn to_kv(&self) -> String {
        let c = &self.channels;
        let pairs: [(&str, String); 15] = [
            ("variant", self.variant.to_string()),
            ("input_channels", self.input_channels.to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("conv1", c.conv1.to_string()),
            ("conv2", c.conv2.to_string()),
            ("conv3", c.conv3.to_string()),
            ("conv4", c.conv4.to_string()),
            ("deconv", c.deconv.to_string()),
            ("conv5", c.conv5.to_string()),
            ("conv6", c.conv6.to_string()),
            ("conv7", c.conv7.to_string()),
            ("lstm_hidden", self.lstm_hidden.to_string()),
            ("lstm_layers", self.lstm_layers.to_string()),
            // bit pattern keeps the round trip exact
            ("dropout_p_bits", format!("{:#010x}", self.dropout_p.to_bits())),
            ("head_classes", self.head_classes.to_string()),
        ];
        pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::new(Variant::FullUnet, 1);
        let mut seen = 0;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("config line {line:?} has no '='")))?;
            let num = || {
                v.parse::<usize>()
                    .map_err(|_| Error::Format(format!("config {k}: {v:?} is not an integer")))
            };
            let c = &mut cfg.channels;
            match k {
                "variant" => cfg.variant = v.parse()?,
                "input_channels" => cfg.input_channels = num()?,
                "seq_len" => cfg.seq_len = num()?,
                "conv1" => c.conv1 = num()?,
                "conv2" => c.conv2 = num()?,
                "conv3" => c.conv3 = num()?,
                "conv4" => c.conv4 = num()?,
                "deconv" => c.deconv = num()?,
                "conv5" => c.conv5 = num()?,
                "conv6" => c.conv6 = num()?,
                "conv7" => c.conv7 = num()?,
                "lstm_hidden" => cfg.lstm_hidden = num()?,
                "lstm_layers" => cfg.lstm_layers = num()?,
                "dropout_p_bits" => {
                    let bits = u32::from_str_radix(v.trim_start_matches("0x"), 16)
                        .map_err(|_| Error::Format(format!("bad dropout bits {v:?}")))?;
                    cfg.dropout_p = f32::from_bits(bits);
                }
                "head_classes" => cfg.head_classes = num()?,
                other => return Err(Error::Format(format!("unknown config key {other:?}"))),
            }
            seen += 1;
        }
        if seen != 15 {
            return Err(Error::Format(format!("config block has {seen} of 15 keys")));
        }
        Ok(cfg)
    }
}
