use serde::{Deserialize, Serialize};

use crate::dataset::schema::Modality;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub d_z: usize,
    pub n_heads: usize,
    /// Hidden widths of the MRI encoder.
    pub mri_hidden: Vec<usize>,
    /// Hidden widths of every other modality encoder.
    pub other_hidden: Vec<usize>,
    pub n_res_blocks: usize,
    /// Residual layers plus the linear output head.
    pub decoder_layers: usize,
    pub dropout: f64,
    pub include_demographics: bool,
    pub window: usize,
    pub sigma_init: f64,
    pub rho_init: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ArchConfig {
    /// Small configuration for laptop-scale experiments and tests.
    pub fn desk() -> Self {
        Self {
            d_z: 16,
            n_heads: 4,
            mri_hidden: vec![24, 12],
            other_hidden: vec![8, 4],
            n_res_blocks: 5,
            decoder_layers: 3,
            dropout: 0.1,
            include_demographics: true,
            window: 3,
            sigma_init: 1e-2,
            rho_init: 0.99,
        }
    }

    /// Full-size architecture: 360-dim latent, MRI 180→120, others 90→20,
    /// eight heads.
    pub fn adni_full() -> Self {
        Self {
            d_z: 360,
            n_heads: 8,
            mri_hidden: vec![180, 120],
            other_hidden: vec![90, 20],
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "adni-full" => Ok(Self::adni_full()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected desk or adni-full)"
            ))),
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_z / self.n_heads.max(1)
    }

    pub fn groups(&self) -> Vec<Modality> {
        Modality::ALL
            .into_iter()
            .filter(|m| self.include_demographics || *m != Modality::Demographics)
            .collect()
    }

    pub fn input_width(&self) -> usize {
        self.groups().iter().map(|g| g.width()).sum()
    }

    pub fn hidden(&self, g: Modality) -> &[usize] {
        if g == Modality::Mri {
            &self.mri_hidden
        } else {
            &self.other_hidden
        }
    }

    /// Width of the embedding produced by the encoder for `g`.
    pub fn embed_dim(&self, g: Modality) -> usize {
        self.hidden(g).last().copied().unwrap_or(g.width())
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_z == 0 || self.n_heads == 0 || self.d_z % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_z ({}) must be a positive multiple of n_heads ({})",
                self.d_z, self.n_heads
            )));
        }
        if self.hidden(Modality::Mri).is_empty() || self.other_hidden.is_empty() {
            return Err(Error::Config(
                "encoders need at least one hidden layer".into(),
            ));
        }
        if self.mri_hidden.contains(&0) || self.other_hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if self.decoder_layers == 0 {
            return Err(Error::Config("decoder_layers must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be ≥ 1".into()));
        }
        if !(self.rho_init > 0.0) || self.sigma_init < 0.0 {
            return Err(Error::Config(
                "rho_init must be > 0 and sigma_init ≥ 0".into(),
            ));
        }
        let w = self.input_width();
        if w != 44 && w != 25 {
            return Err(Error::Config(format!(
                "input width {w} is neither 44 nor 25"
            )));
        }
        Ok(())
    }
}

/// Component switches for ablation runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub no_control: bool,
    pub no_temporal_attention: bool,
    pub no_feature_attention: bool,
    pub no_spectral_reg: bool,
}

impl AblationFlags {
    pub fn count(&self) -> usize {
        [
            self.no_control,
            self.no_temporal_attention,
            self.no_feature_attention,
            self.no_spectral_reg,
        ]
        .iter()
        .filter(|&&b| b)
        .count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.count() > 1 {
            return Err(Error::Config(
                "at most one ablation flag may be set per run".into(),
            ));
        }
        Ok(())
    }
}
