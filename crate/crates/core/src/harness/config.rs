use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::esp::KernelSpec;
use crate::flow::RegistrationConfig;
use crate::swd::SimilaritySearch;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preconditioning {
    #[default]
    None,
    /// Estimate scale and rotation from spherical wave profiles and undo
    /// them before the deformable stage.
    SwdSimilarity,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    #[default]
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(Error::InvalidConfig(format!(
                "unknown report format {other:?}"
            ))),
        }
    }
}

/// How a moving volume on a different grid is brought onto the fixed one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResampleMethod {
    #[default]
    Trilinear,
    Swd,
}

/// Point the similarity transform is taken about.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityCenter {
    /// Intensity centroid of the fixed volume (negative values ignored).
    #[default]
    Centroid,
    GridCenter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwdSettings {
    pub l_max: usize,
    pub n_max: usize,
    pub resample: ResampleMethod,
    pub center: SimilarityCenter,
    pub search: SimilaritySearch,
}

impl Default for SwdSettings {
    fn default() -> Self {
        SwdSettings {
            l_max: 16,
            n_max: 16,
            resample: ResampleMethod::Trilinear,
            center: SimilarityCenter::Centroid,
            search: SimilaritySearch::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PanelSettings {
    /// Multiplies every default warp amplitude.
    pub amplitude_scale: f64,
    pub subject: String,
}

impl Default for PanelSettings {
    fn default() -> Self {
        PanelSettings {
            amplitude_scale: 1.0,
            subject: "subject".into(),
        }
    }
}

/// Everything a harness run needs. Loaded from TOML; command-line flags
/// override individual keys afterwards.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub preconditioning: Preconditioning,
    pub swd: SwdSettings,
    /// Coupling for the non-local momentum equation. Shorthand for
    /// `flow.regularizer`; setting both is an error.
    pub esp: Option<KernelSpec>,
    pub flow: RegistrationConfig,
    pub output_dir: Option<PathBuf>,
    pub report_format: ReportFormat,
    pub panel: PanelSettings,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.esp.is_some() && self.flow.regularizer.is_some() {
            return Err(Error::InvalidConfig(
                "set either esp or flow.regularizer, not both".into(),
            ));
        }
        self.flow.validate()?;
        if let Some(k) = self.esp.as_ref().or(self.flow.regularizer.as_ref()) {
            if !(k.beta >= 0.0
                && k.sigma_mm > 0.0
                && k.tol > 0.0
                && k.max_iter > 0
                && k.radius > 0
                && k.path_length > 0)
            {
                return Err(Error::InvalidConfig(format!(
                    "invalid coupling settings {k:?}"
                )));
            }
        }
        if self.swd.l_max == 0 && self.swd.n_max == 0 {
            return Err(Error::InvalidConfig(
                "swd orders must not both be zero".into(),
            ));
        }
        if self.swd.search.scale_samples < 3 || !(self.swd.search.coarse_step_deg > 0.0) {
            return Err(Error::InvalidConfig(
                "swd search needs >= 3 scale samples and a positive step".into(),
            ));
        }
        let a = self.panel.amplitude_scale;
        if !(a >= 0.0 && a.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "panel amplitude_scale must be >= 0, got {a}"
            )));
        }
        let plain = |c: char| c.is_ascii_alphanumeric() || c == '_' || c == '-';
        if self.panel.subject.is_empty() || !self.panel.subject.chars().all(plain) {
            return Err(Error::InvalidConfig(
                "panel subject must be a non-empty [A-Za-z0-9_-] name".into(),
            ));
        }
        Ok(())
    }

    /// Registration settings with the `esp` shorthand folded in.
    pub fn registration(&self) -> RegistrationConfig {
        let mut flow = self.flow.clone();
        if let Some(k) = &self.esp {
            flow.regularizer = Some(k.clone());
        }
        flow
    }

    /// The configuration as it actually runs, with shorthands folded in.
    pub fn resolved(&self) -> PipelineConfig {
        PipelineConfig {
            esp: None,
            flow: self.registration(),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::esp::CouplingKind;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(
            PipelineConfig::from_toml_str("").unwrap(),
            PipelineConfig::default()
        );
    }

    #[test]
    fn toml_round_trip() {
        let cfg = PipelineConfig {
            preconditioning: Preconditioning::SwdSimilarity,
            esp: Some(KernelSpec {
                kind: CouplingKind::GaussianStationary,
                sigma_mm: 3.0,
                ..Default::default()
            }),
            report_format: ReportFormat::Markdown,
            output_dir: Some("out".into()),
            ..Default::default()
        };
        let text = cfg.to_toml().unwrap();
        assert!(text.contains("preconditioning = \"swd-similarity\""));
        assert_eq!(PipelineConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn conflicting_regularizers_are_rejected() {
        let text = "[esp]\nkind = \"adjacency\"\n[flow.regularizer]\nkind = \"adjacency\"\n";
        assert!(matches!(
            PipelineConfig::from_toml_str(text),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn bad_values_are_rejected() {
        for text in [
            "[flow]\nepsilon = 2.0",
            "[panel]\namplitude_scale = -1.0",
            "[panel]\nsubject = \"a/b\"",
            "[panel]\nsubject = \"a.b\"",
            "[esp]\nsigma_mm = 0.0",
            "unknown_key = 1",
            "report_format = \"html\"",
        ] {
            assert!(PipelineConfig::from_toml_str(text).is_err(), "{text}");
        }
    }

    #[test]
    fn resolved_folds_the_shorthand() {
        let spec = KernelSpec {
            radius: 3,
            ..Default::default()
        };
        let cfg = PipelineConfig {
            esp: Some(spec.clone()),
            ..Default::default()
        };
        let r = cfg.resolved();
        assert!(r.esp.is_none());
        assert_eq!(r.flow.regularizer, Some(spec));
        r.validate().unwrap();
    }
}
