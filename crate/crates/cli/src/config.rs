//! Run configuration from a TOML file layered over the benchmark defaults,
//! then command-line overrides.

use std::path::{Path, PathBuf};

use act_core::pipeline::RunConfig;

use crate::args::{Common, ScheduleOverrides};
use crate::{CliError, OUT_ROOT_ENV};

/// Parses TOML text. Keys left out keep their benchmark values, including
/// keys inside a section that is only partly given.
pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    let user: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    let mut base = toml::Table::try_from(RunConfig::benchmark()).map_err(|e| CliError::Runtime(e.to_string()))?;
    merge(&mut base, user);
    base.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        None => Ok(RunConfig::benchmark()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            parse_config(&text).map_err(|e| match e {
                CliError::Config(m) => CliError::Config(format!("{}: {m}", p.display())),
                other => other,
            })
        }
    }
}

/// Loads the config, applies flag overrides and validates the result.
pub fn resolve(common: &Common, schedule: Option<&ScheduleOverrides>) -> Result<RunConfig, CliError> {
    let mut cfg = load_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(s) = schedule {
        let a = &mut cfg.adapt;
        for (slot, v) in [(&mut a.e1, s.e1), (&mut a.e2, s.e2), (&mut a.e3, s.e3), (&mut a.r2, s.r2), (&mut a.r3, s.r3)] {
            if let Some(v) = v {
                *slot = v;
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn output_dir(out: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if out.is_relative() => Path::new(&root).join(out),
        _ => out.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_section_keeps_benchmark_values() {
        let cfg = parse_config("seed = 7\n[cluster]\nmin_pts = 5\n").unwrap();
        let bench = RunConfig::benchmark();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.cluster.min_pts, 5);
        assert_eq!(cfg.cluster.rho, bench.cluster.rho);
        assert_eq!(cfg.synth, bench.synth);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        assert!(matches!(parse_config("[cluster]\nradius = 1.0\n"), Err(CliError::Config(_))));
        assert!(matches!(parse_config("seed = "), Err(CliError::Config(_))));
    }

    #[test]
    fn benchmark_survives_toml() {
        let text = toml::to_string(&RunConfig::benchmark()).unwrap();
        assert_eq!(parse_config(&text).unwrap(), RunConfig::benchmark());
    }
}
