use serde::{Deserialize, Serialize};

use super::{ModelError, Result};
use crate::dataset::ImageSize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[serde(alias = "cnn")]
    ShallowCnn,
    #[serde(alias = "resnet")]
    MiniResNet,
    #[serde(alias = "vit")]
    MiniVit,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::ShallowCnn, Family::MiniResNet, Family::MiniVit];

    /// Short name used on the command line and in reports.
    pub fn short_name(self) -> &'static str {
        match self {
            Family::ShallowCnn => "cnn",
            Family::MiniResNet => "resnet",
            Family::MiniVit => "vit",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Family::ShallowCnn => "CNN",
            Family::MiniResNet => "ResNet",
            Family::MiniVit => "ViT",
        }
    }

    pub fn supports_channels(self, channels: usize) -> bool {
        match self {
            Family::MiniVit => channels == 3,
            _ => channels == 3 || channels == 6,
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.short_name())
    }
}

impl std::str::FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cnn" | "shallow_cnn" | "shallowcnn" => Ok(Family::ShallowCnn),
            "resnet" | "mini_resnet" | "miniresnet" => Ok(Family::MiniResNet),
            "vit" | "mini_vit" | "minivit" => Ok(Family::MiniVit),
            other => Err(format!("unknown model family `{other}` (cnn, resnet, vit)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct CnnParams {
    pub widths: [usize; 2],
    pub kernel: usize,
    pub fc_hidden: usize,
}

impl Default for CnnParams {
    fn default() -> Self {
        Self { widths: [16, 32], kernel: 3, fc_hidden: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ResNetParams {
    pub stem_width: usize,
    /// Output width of each residual block; a change of width also halves the resolution.
    pub block_widths: Vec<usize>,
    pub fc_hidden: usize,
}

impl Default for ResNetParams {
    fn default() -> Self {
        Self { stem_width: 16, block_widths: vec![16, 16, 32, 32], fc_hidden: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct VitParams {
    pub patch: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for VitParams {
    fn default() -> Self {
        Self { patch: 16, embed_dim: 128, depth: 4, heads: 4, mlp_ratio: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Architecture {
    ShallowCnn(CnnParams),
    MiniResNet(ResNetParams),
    MiniVit(VitParams),
}

impl Architecture {
    pub fn default_for(family: Family) -> Self {
        match family {
            Family::ShallowCnn => Architecture::ShallowCnn(CnnParams::default()),
            Family::MiniResNet => Architecture::MiniResNet(ResNetParams::default()),
            Family::MiniVit => Architecture::MiniVit(VitParams::default()),
        }
    }

    pub fn family(&self) -> Family {
        match self {
            Architecture::ShallowCnn(_) => Family::ShallowCnn,
            Architecture::MiniResNet(_) => Family::MiniResNet,
            Architecture::MiniVit(_) => Family::MiniVit,
        }
    }
}

/// Everything needed to rebuild a model and its initial weights.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub in_channels: usize,
    pub image_size: ImageSize,
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn new(architecture: Architecture, in_channels: usize, image_size: ImageSize, init_seed: u64) -> Self {
        Self { architecture, in_channels, image_size, init_seed }
    }

    pub fn default_for(family: Family, in_channels: usize, image_size: ImageSize, init_seed: u64) -> Self {
        Self::new(Architecture::default_for(family), in_channels, image_size, init_seed)
    }

    pub fn family(&self) -> Family {
        self.architecture.family()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        let ImageSize { height: h, width: w } = self.image_size;
        if self.family() == Family::MiniVit && self.in_channels != 3 {
            return Err(ModelError::FusionUnsupported { channels: self.in_channels });
        }
        if !self.family().supports_channels(self.in_channels) {
            return bad(format!("{} input channels; expected 3 or 6", self.in_channels));
        }
        match &self.architecture {
            Architecture::ShallowCnn(p) => {
                if p.kernel == 0 || p.kernel % 2 == 0 {
                    return bad(format!("kernel {} must be odd", p.kernel));
                }
                if p.widths.contains(&0) || p.fc_hidden == 0 {
                    return bad("layer widths must be positive".into());
                }
                if h < 4 || w < 4 {
                    return bad(format!("{h}x{w} image is too small for two pooling stages"));
                }
            }
            Architecture::MiniResNet(p) => {
                if p.stem_width == 0 || p.fc_hidden == 0 || p.block_widths.contains(&0) {
                    return bad("layer widths must be positive".into());
                }
                let downsamples = 2 + p.block_widths.iter().scan(p.stem_width, |prev, &wd| {
                    let changed = wd != *prev;
                    *prev = wd;
                    Some(changed as u32)
                }).sum::<u32>();
                let factor = 1usize << downsamples;
                if h < factor || w < factor {
                    return bad(format!("{h}x{w} image is too small for {downsamples} downsampling stages"));
                }
            }
            Architecture::MiniVit(p) => {
                if p.patch == 0 || h % p.patch != 0 || w % p.patch != 0 {
                    return bad(format!("patch {} must divide the {h}x{w} image", p.patch));
                }
                if p.heads == 0 || p.embed_dim == 0 || p.embed_dim % p.heads != 0 {
                    return bad(format!("embed dim {} must split evenly over {} heads", p.embed_dim, p.heads));
                }
                if p.depth == 0 || p.mlp_ratio == 0 {
                    return bad("depth and mlp ratio must be positive".into());
                }
            }
        }
        Ok(())
    }

    /// Tokens seen by the transformer, class token included.
    pub fn vit_tokens(&self) -> Option<usize> {
        match &self.architecture {
            Architecture::MiniVit(p) => Some((self.image_size.height / p.patch) * (self.image_size.width / p.patch) + 1),
            _ => None,
        }
    }
}
