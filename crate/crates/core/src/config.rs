use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which layers feature-map modulation reaches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModulationScope {
    /// Every GridNet block and the first layer of each inter coupling net.
    #[default]
    All,
    GridNet,
    /// The last GridNet column of the full-resolution row.
    GridNetLast,
}

/// Architecture hyper-parameters. Stored in every checkpoint manifest so a
/// checkpoint rebuilds its own network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Channels of every main latent (stride 16).
    pub latent_channels: usize,
    /// Channels of every hyper latent (stride 64).
    pub hyper_channels: usize,
    /// Width of the coupling and hyperprior transforms.
    pub coupling_hidden: usize,
    /// Per-level widths of the pyramid flow estimator.
    pub flow_hidden: [usize; 4],
    pub extrap_hidden: usize,
    /// Feature pyramid / GridNet row widths at strides 1, 2, 4.
    pub pyramid_channels: [usize; 3],
    /// Length of the global descriptor driving feature-map modulation.
    pub sigma_dim: usize,
    pub sigma_hidden: usize,
    /// Kernel size of the descriptor convolutions (1 makes it pointwise).
    pub sigma_kernel: usize,
    pub context_hidden: usize,
    /// Multi-scale GridNet motion compensation (otherwise a single-scale
    /// warp-and-refine predictor).
    pub multiscale: bool,
    pub feature_mod: bool,
    pub modulation_scope: ModulationScope,
    /// Quadtree spatial-channel context in the motion and inter codecs.
    pub quadtree: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_channels: 128,
            hyper_channels: 64,
            coupling_hidden: 64,
            flow_hidden: [32, 64, 64, 32],
            extrap_hidden: 32,
            pyramid_channels: [32, 64, 96],
            sigma_dim: 64,
            sigma_hidden: 32,
            sigma_kernel: 3,
            context_hidden: 64,
            multiscale: true,
            feature_mod: true,
            modulation_scope: ModulationScope::All,
            quadtree: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Narrow variant used by tests and quick experiments.
    pub fn tiny() -> Self {
        Self {
            latent_channels: 16,
            hyper_channels: 8,
            coupling_hidden: 16,
            flow_hidden: [8, 16, 16, 8],
            extrap_hidden: 8,
            pyramid_channels: [8, 12, 16],
            sigma_dim: 16,
            sigma_hidden: 8,
            sigma_kernel: 3,
            context_hidden: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.latent_channels % 4 != 0 {
            return Err(Error::Config(format!(
                "latent_channels = {} must be a positive multiple of 4",
                self.latent_channels
            )));
        }
        let zero = [self.hyper_channels, self.coupling_hidden, self.extrap_hidden, self.sigma_dim, self.sigma_hidden, self.context_hidden]
            .contains(&0)
            || self.flow_hidden.contains(&0)
            || self.pyramid_channels.contains(&0);
        if zero {
            return Err(Error::Config("layer widths must be > 0".into()));
        }
        if self.sigma_kernel % 2 == 0 {
            return Err(Error::Config("sigma_kernel must be odd".into()));
        }
        Ok(())
    }
}
