//! Layered run configuration: built-in defaults, then an optional TOML file,
//! then command-line flags. File keys and flags share their names.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::Args;
use pstokes_core::mesh::DomainKind;
use pstokes_core::solver::Method;
use pstokes_core::PowerLaw;
use serde::{Deserialize, Serialize};

use crate::experiments::{rotated_gravity, ExperimentConfig, SignMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Experiment(pub DomainKind);

impl Experiment {
    pub fn as_str(&self) -> &'static str {
        match self.0 {
            DomainKind::IsmipB => "ismip-b",
            DomainKind::Block => "block",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "ismip-b" | "ismipb" => Ok(Experiment(DomainKind::IsmipB)),
            "block" => Ok(Experiment(DomainKind::Block)),
            _ => Err(format!("unknown experiment '{s}' (expected ismip-b or block)")),
        }
    }
}

/// (De)serializes `Option<T>` through `Display`/`FromStr`.
mod text {
    use std::fmt::Display;
    use std::str::FromStr;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<T: Display, S: Serializer>(v: &Option<T>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(v) => s.collect_str(v),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<Option<T>, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: Deserializer<'de>,
    {
        let raw: Option<String> = Option::deserialize(d)?;
        raw.map(|s| s.parse().map_err(serde::de::Error::custom)).transpose()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    /// ismip-b or block
    #[arg(long)]
    #[serde(default, with = "text", skip_serializing_if = "Option::is_none")]
    pub experiment: Option<Experiment>,
    /// Add the linear friction term to the initial Stokes solve.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_guess_friction: Option<bool>,
    /// Constant replacing the power-law factor in the initial solve, Pa·a.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_viscosity: Option<f64>,
    /// paper or conventional
    #[arg(long)]
    #[serde(default, with = "text", skip_serializing_if = "Option::is_none")]
    pub sign_mode: Option<SignMode>,
    /// Output directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct MeshSection {
    /// Cells per period along x.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nx: Option<usize>,
    /// Cells across the thickness.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ny: Option<usize>,
    /// Extra periods on each side of the glacier.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub copies: Option<usize>,
    /// Period / block length, m.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub length: Option<f64>,
    /// Surface slope, degrees.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_deg: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct ParamsSection {
    /// Regularization δ, 1/a (bulk and sliding).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// Diffusion μ0, Pa·a.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu0: Option<f64>,
    /// Friction coefficient τ (block only).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    /// Bulk exponent p.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    /// Sliding exponent s.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s: Option<f64>,
    /// Density, kg/m³.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    /// Hardness B, Pa·a^{p-1}.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hardness: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    /// picard, picard-exact, newton-armijo or newton-exact
    #[arg(long)]
    #[serde(default, with = "text", skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    /// Armijo constant.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// Smallest Armijo step; 0 disables.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_step: Option<f64>,
    /// Outer iteration cap.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_iters: Option<usize>,
    /// Relative Riesz-norm tolerance.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    /// Absolute Riesz-norm tolerance.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tol_abs: Option<f64>,
    /// Merit evaluations allowed per Armijo search.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_armijo_evals: Option<usize>,
    /// Merit evaluations allowed per exact search.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_bisect_evals: Option<usize>,
    /// Initial upper end of the bisection bracket.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bracket_b0: Option<f64>,
    /// Relative residual required from linear solves.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub linear_tol: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[command(flatten)]
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[command(flatten)]
    #[serde(default)]
    pub mesh: MeshSection,
    #[command(flatten)]
    #[serde(default)]
    pub params: ParamsSection,
    #[command(flatten)]
    #[serde(default)]
    pub solver: SolverSection,
}

macro_rules! overlay {
    ($dst:expr, $src:expr, $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl ConfigFile {
    /// Reads a config file, or the `[config]` part of a `run_meta.toml`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text)?;
        if table.contains_key("outcome") {
            if let Some(toml::Value::Table(inner)) = table.remove("config") {
                table = inner;
            }
        }
        Ok(ConfigFile::deserialize(toml::Value::Table(table))?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Values set in `top` win.
    pub fn overlay(mut self, top: &ConfigFile) -> Self {
        overlay!(self.experiment, top.experiment, experiment, initial_guess_friction, initial_viscosity, sign_mode, out);
        overlay!(self.mesh, top.mesh, nx, ny, copies, length, alpha_deg);
        overlay!(self.params, top.params, delta, mu0, tau, p, s, rho, hardness);
        overlay!(
            self.solver,
            top.solver,
            method,
            gamma,
            min_step,
            max_iters,
            tol,
            tol_abs,
            max_armijo_evals,
            max_bisect_evals,
            bracket_b0,
            linear_tol
        );
        self
    }

    pub fn kind(&self) -> DomainKind {
        self.experiment.experiment.map_or(DomainKind::IsmipB, |e| e.0)
    }

    /// Defaults of the chosen experiment with every set key applied.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::for_kind(self.kind());
        let e = &self.experiment;
        if let Some(v) = e.initial_guess_friction {
            cfg.initial_guess_friction = v;
        }
        if let Some(v) = e.initial_viscosity {
            cfg.initial_viscosity = v;
        }
        if let Some(v) = e.sign_mode {
            cfg.sign_mode = v;
        }

        let m = &self.mesh;
        let d = &mut cfg.domain;
        d.nx = m.nx.unwrap_or(d.nx);
        d.ny = m.ny.unwrap_or(d.ny);
        d.copies = m.copies.unwrap_or(d.copies);
        d.length = m.length.unwrap_or(d.length);
        if let Some(a) = m.alpha_deg {
            d.alpha = a.to_radians();
            cfg.params.alpha = d.alpha;
            cfg.params.gravity = rotated_gravity(d.alpha);
        }

        let p = &self.params;
        let prm = &mut cfg.params;
        let delta = p.delta.unwrap_or(prm.bulk.delta());
        let bulk_r = p.p.unwrap_or(prm.bulk.r());
        let slide_r = p.s.unwrap_or(prm.slide.r());
        prm.bulk = PowerLaw::new(bulk_r, delta, true).context("bulk law")?;
        prm.slide = PowerLaw::new(slide_r, delta, false).context("sliding law")?;
        prm.mu0 = p.mu0.unwrap_or(prm.mu0);
        prm.rho = p.rho.unwrap_or(prm.rho);
        prm.b = p.hardness.unwrap_or(prm.b);
        if let Some(t) = p.tau {
            if self.kind() == DomainKind::IsmipB && t != 0.0 {
                bail!("tau has no effect on ismip-b (the bed is frozen)");
            }
            prm.tau = t;
        }

        let s = &self.solver;
        let sc = &mut cfg.solver;
        sc.method = s.method.unwrap_or(sc.method);
        sc.gamma = s.gamma.unwrap_or(sc.gamma);
        sc.min_step = s.min_step.unwrap_or(sc.min_step);
        sc.max_outer = s.max_iters.unwrap_or(sc.max_outer);
        sc.tol_rel_ries = s.tol.unwrap_or(sc.tol_rel_ries);
        sc.tol_abs_ries = s.tol_abs.unwrap_or(sc.tol_abs_ries);
        sc.max_armijo_evals = s.max_armijo_evals.unwrap_or(sc.max_armijo_evals);
        sc.max_bisect_evals = s.max_bisect_evals.unwrap_or(sc.max_bisect_evals);
        sc.bracket_b0 = s.bracket_b0.unwrap_or(sc.bracket_b0);
        sc.linear_tol = s.linear_tol.unwrap_or(sc.linear_tol);

        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key filled in from a resolved configuration.
    pub fn from_resolved(cfg: &ExperimentConfig, out: Option<&Path>) -> Self {
        let (d, p, s) = (&cfg.domain, &cfg.params, &cfg.solver);
        ConfigFile {
            experiment: ExperimentSection {
                experiment: Some(Experiment(d.kind)),
                initial_guess_friction: Some(cfg.initial_guess_friction),
                initial_viscosity: Some(cfg.initial_viscosity),
                sign_mode: Some(cfg.sign_mode),
                out: out.map(Path::to_path_buf),
            },
            mesh: MeshSection {
                nx: Some(d.nx),
                ny: Some(d.ny),
                copies: Some(d.copies),
                length: Some(d.length),
                alpha_deg: Some(d.alpha.to_degrees()),
            },
            params: ParamsSection {
                delta: Some(p.bulk.delta()),
                mu0: Some(p.mu0),
                tau: Some(p.tau),
                p: Some(p.bulk.r()),
                s: Some(p.slide.r()),
                rho: Some(p.rho),
                hardness: Some(p.b),
            },
            solver: SolverSection {
                method: Some(s.method),
                gamma: Some(s.gamma),
                min_step: Some(s.min_step),
                max_iters: Some(s.max_outer),
                tol: Some(s.tol_rel_ries),
                tol_abs: Some(s.tol_abs_ries),
                max_armijo_evals: Some(s.max_armijo_evals),
                max_bisect_evals: Some(s.max_bisect_evals),
                bracket_b0: Some(s.bracket_b0),
                linear_tol: Some(s.linear_tol),
            },
        }
    }
}
