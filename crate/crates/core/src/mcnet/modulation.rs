//! Global flow descriptor and channel-wise affine modulation.

use std::collections::BTreeMap;

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{leaky_relu, Conv2d, ConvConfig, Init, Linear, Path};

/// `alpha ⊙ x + beta` with per-channel vectors broadcast over space.
///
/// `alpha` and `beta` are `(C,)` or `(N, C)`.
pub fn modulate(x: &Tensor, alpha: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (n, c, _, _) = x.dims4()?;
    let shape_ok = |t: &Tensor| t.dims() == [c] || t.dims() == [n, c] || t.dims() == [1, c];
    if !shape_ok(alpha) || !shape_ok(beta) {
        return Err(Error::Shape(format!(
            "modulation vectors {:?}/{:?} for {c} channels",
            alpha.dims(),
            beta.dims()
        )));
    }
    let view = |t: &Tensor| -> Result<Tensor> {
        let b = if t.rank() == 1 { 1 } else { t.dim(0)? };
        Ok(t.reshape((b, c, 1, 1))?)
    };
    Ok(x.broadcast_mul(&view(alpha)?)?.broadcast_add(&view(beta)?)?)
}

/// Per-site `(alpha, beta)` for one frame, plus the descriptor they came
/// from.
#[derive(Debug, Clone)]
pub struct ModulationState {
    pub sigma: Tensor,
    sites: BTreeMap<String, (Tensor, Tensor)>,
}

impl ModulationState {
    pub fn get(&self, site: &str) -> Option<&(Tensor, Tensor)> {
        self.sites.get(site)
    }

    pub fn sites(&self) -> impl Iterator<Item = &str> {
        self.sites.keys().map(|s| s.as_str())
    }
}

/// Applies the modulation registered for `site`, if any.
pub fn apply_site(x: &Tensor, state: Option<&ModulationState>, site: &str) -> Result<Tensor> {
    match state.and_then(|s| s.get(site)) {
        Some((a, b)) => modulate(x, a, b),
        None => Ok(x.clone()),
    }
}

/// Extracts Σ from the propagated flow and maps it to per-layer (α, β).
pub struct Modulator {
    conv0: Conv2d,
    conv1: Conv2d,
    heads: BTreeMap<String, (Linear, Linear)>,
    sigma_dim: usize,
}

impl Modulator {
    /// `sites` lists every modulated layer with its channel count.
    pub fn new(p: &Path, cfg: &ModelConfig, sites: &[(String, usize)]) -> Result<Self> {
        let k = cfg.sigma_kernel;
        let conv0 = Conv2d::new(&p.pp("sigma.conv0"), 2, cfg.sigma_hidden, ConvConfig::same(k))?;
        let conv1 = Conv2d::new(&p.pp("sigma.conv1"), cfg.sigma_hidden, cfg.sigma_dim, ConvConfig::same(k))?;
        let mut heads = BTreeMap::new();
        for (site, ch) in sites {
            let hp = p.pp("heads").pp(site);
            let alpha = Linear::new(&hp.pp("alpha"), cfg.sigma_dim, *ch, Init::Zeros, Init::Const(1.0))?;
            let beta = Linear::new(&hp.pp("beta"), cfg.sigma_dim, *ch, Init::Zeros, Init::Zeros)?;
            heads.insert(site.clone(), (alpha, beta));
        }
        Ok(Self {
            conv0,
            conv1,
            heads,
            sigma_dim: cfg.sigma_dim,
        })
    }

    pub fn sigma_dim(&self) -> usize {
        self.sigma_dim
    }

    /// Σ of shape (N, sigma_dim): conv stack followed by a global spatial
    /// mean.
    pub fn extract_sigma(&self, flow_to_first: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = flow_to_first.dims4()?;
        if c != 2 {
            return Err(Error::Shape(format!("descriptor input has {c} channels, expected a flow")));
        }
        let h = leaky_relu(&self.conv0.forward(flow_to_first)?)?;
        let h = self.conv1.forward(&h)?;
        Ok(h.mean(3)?.mean(2)?)
    }

    pub fn make_alpha_beta(&self, sigma: &Tensor, site: &str) -> Result<(Tensor, Tensor)> {
        let (a, b) = self.heads.get(site).ok_or_else(|| Error::UnknownLayer(site.to_string()))?;
        Ok((a.forward(sigma)?, b.forward(sigma)?))
    }

    pub fn state(&self, flow_to_first: &Tensor) -> Result<ModulationState> {
        let sigma = self.extract_sigma(flow_to_first)?;
        let mut sites = BTreeMap::new();
        for name in self.heads.keys() {
            sites.insert(name.clone(), self.make_alpha_beta(&sigma, name)?);
        }
        Ok(ModulationState { sigma, sites })
    }
}
