//! Run configuration: a flat-section TOML document plus flag overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use ymorse::morse_bott::{CascadeParams, HomologyOptions, SurveyOptions};
use ymorse::{Controller, EnergyBackend, Group, Lattice, OrientedCellComplex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Builder {
    TorusGrid,
    MinimalGenus,
    Sphere,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComplexSection {
    pub builder: Builder,
    pub n: usize,
    pub m: usize,
    pub genus: usize,
}

impl Default for ComplexSection {
    fn default() -> Self {
        Self { builder: Builder::TorusGrid, n: 2, m: 1, genus: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatticeSection {
    pub group: Group,
    pub backend: EnergyBackend,
    /// Perturbation bank JSON file.
    pub perturbation_bank: Option<PathBuf>,
    /// Clearance required between bank supports and critical points.
    pub admissibility_eps: f64,
}

impl Default for LatticeSection {
    fn default() -> Self {
        Self { group: Group::U1, backend: EnergyBackend::Wilson, perturbation_bank: None, admissibility_eps: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedSection {
    pub root: u64,
}

impl Default for SeedSection {
    fn default() -> Self {
        Self { root: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerSection {
    pub tol_g: f64,
    pub s_max: f64,
    pub max_step: f64,
    pub eps_shoot: f64,
    pub delta_match: f64,
}

impl Default for ControllerSection {
    fn default() -> Self {
        let ctl = Controller::default();
        let cascade = CascadeParams::default();
        Self { tol_g: ctl.tol_g, s_max: ctl.s_max, max_step: ctl.max_step, eps_shoot: cascade.epsilon, delta_match: cascade.delta_match }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurveySection {
    pub n_starts: usize,
}

impl Default for SurveySection {
    fn default() -> Self {
        Self { n_starts: SurveyOptions::default().n_starts }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Worker threads; 0 uses every core.
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("ymorse-out") }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub complex: ComplexSection,
    pub lattice: LatticeSection,
    pub seeds: SeedSection,
    pub controller: ControllerSection,
    pub survey: SurveySection,
    pub run: RunSection,
    pub output: OutputSection,
}

/// One flag per config key.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub builder: Option<Builder>,
    #[arg(long, global = true)]
    pub n: Option<usize>,
    #[arg(long, global = true)]
    pub m: Option<usize>,
    #[arg(long, global = true)]
    pub genus: Option<usize>,
    #[arg(long, global = true, value_parser = parse_group)]
    pub group: Option<Group>,
    #[arg(long, global = true, value_parser = parse_backend)]
    pub backend: Option<EnergyBackend>,
    #[arg(long, global = true)]
    pub perturbation_bank: Option<PathBuf>,
    #[arg(long, global = true)]
    pub admissibility_eps: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub tol_g: Option<f64>,
    #[arg(long, global = true)]
    pub s_max: Option<f64>,
    #[arg(long, global = true)]
    pub max_step: Option<f64>,
    #[arg(long, global = true)]
    pub eps_shoot: Option<f64>,
    #[arg(long, global = true)]
    pub delta_match: Option<f64>,
    #[arg(long, global = true)]
    pub n_starts: Option<usize>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

fn parse_group(s: &str) -> Result<Group, String> {
    match s {
        "u1" => Ok(Group::U1),
        "su2" => Ok(Group::Su2),
        _ => Err(format!("unknown group `{s}` (u1 | su2)")),
    }
}

fn parse_backend(s: &str) -> Result<EnergyBackend, String> {
    match s {
        "wilson" => Ok(EnergyBackend::Wilson),
        "lognorm" => Ok(EnergyBackend::LogNorm),
        _ => Err(format!("unknown backend `{s}` (wilson | lognorm)")),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Reads the config file (if any), applies flags and validates.
    pub fn resolve(o: &Overrides) -> Result<Self> {
        let mut c = match &o.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = &o.$flag { c.$($field).+ = v.clone(); })*
            };
        }
        set! {
            builder => complex.builder,
            n => complex.n,
            m => complex.m,
            genus => complex.genus,
            group => lattice.group,
            backend => lattice.backend,
            admissibility_eps => lattice.admissibility_eps,
            seed => seeds.root,
            tol_g => controller.tol_g,
            s_max => controller.s_max,
            max_step => controller.max_step,
            eps_shoot => controller.eps_shoot,
            delta_match => controller.delta_match,
            n_starts => survey.n_starts,
            threads => run.threads,
            out => output.dir,
        }
        if let Some(b) = &o.perturbation_bank {
            c.lattice.perturbation_bank = Some(b.clone());
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("controller.tol_g", self.controller.tol_g),
            ("controller.s_max", self.controller.s_max),
            ("controller.max_step", self.controller.max_step),
            ("controller.eps_shoot", self.controller.eps_shoot),
            ("controller.delta_match", self.controller.delta_match),
            ("lattice.admissibility_eps", self.lattice.admissibility_eps),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                bail!("{key} must be positive and finite, got {v}");
            }
        }
        if self.survey.n_starts == 0 {
            bail!("survey.n_starts must be at least 1");
        }
        Ok(())
    }

    pub fn complex(&self) -> Result<OrientedCellComplex> {
        let c = &self.complex;
        Ok(match c.builder {
            Builder::TorusGrid => OrientedCellComplex::torus_grid(c.n, c.m)?,
            Builder::MinimalGenus => OrientedCellComplex::minimal_genus(c.genus)?,
            Builder::Sphere => OrientedCellComplex::sphere(),
        })
    }

    pub fn lattice(&self) -> Result<Lattice> {
        Ok(Lattice::new(self.complex()?, self.lattice.group)?)
    }

    pub fn flow_controller(&self) -> Controller {
        Controller {
            tol_g: self.controller.tol_g,
            s_max: self.controller.s_max,
            max_step: self.controller.max_step,
            initial_step: self.controller.max_step.min(Controller::default().initial_step),
            ..Controller::default()
        }
    }

    pub fn homology_options(&self) -> HomologyOptions {
        HomologyOptions {
            survey: SurveyOptions { n_starts: self.survey.n_starts, ..Default::default() },
            cascade: CascadeParams {
                epsilon: self.controller.eps_shoot,
                delta_match: self.controller.delta_match,
                controller: self.flow_controller(),
                ..Default::default()
            },
        }
    }

    /// The experiment-defining part of the config, echoed in reports.
    /// The output directory is left out so reports compare across runs.
    pub fn echo(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("output");
            m.remove("run");
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn sections_parse() {
        let c = RunConfig::parse("[complex]\nbuilder = \"minimal-genus\"\ngenus = 2\n[lattice]\ngroup = \"su2\"\nbackend = \"lognorm\"\n").unwrap();
        assert_eq!(c.complex.builder, Builder::MinimalGenus);
        assert_eq!(c.lattice.group, Group::Su2);
        assert_eq!(c.lattice.backend, EnergyBackend::LogNorm);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = RunConfig::parse("[seeds]\nroot = 3\n\n[survey]\nn_start = 5\n").unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("line 5"), "{msg}");
        assert!(msg.contains("n_start"), "{msg}");
    }

    #[test]
    fn flags_override_file_values() {
        let o = Overrides { seed: Some(9), eps_shoot: Some(5e-4), n_starts: Some(7), ..Default::default() };
        let c = RunConfig::resolve(&o).unwrap();
        assert_eq!(c.seeds.root, 9);
        assert_eq!(c.homology_options().cascade.epsilon, 5e-4);
        assert_eq!(c.homology_options().survey.n_starts, 7);
    }

    #[test]
    fn nonpositive_tolerance_is_rejected() {
        let o = Overrides { delta_match: Some(0.0), ..Default::default() };
        assert!(RunConfig::resolve(&o).is_err());
    }
}
