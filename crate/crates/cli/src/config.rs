use std::path::Path;

use sha2::{Digest, Sha256};
use treeavg::simnet::SimConfig;

use crate::CliError;

fn parse_override(raw: &str) -> Result<(String, toml::Value), CliError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set `{raw}`: expected key=value")))?;
    let key = key.trim().to_string();
    if key.is_empty() {
        return Err(CliError::Config(format!("--set `{raw}`: empty key")));
    }
    // a bare word that is not valid TOML is taken as a string
    let value = match format!("v = {value}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed table has the key"),
        Err(_) => toml::Value::String(value.to_string()),
    };
    Ok((key, value))
}

/// Read the config file (if any), apply `--set` overrides and `--seed`,
/// and check the result.
pub fn resolve(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<SimConfig, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for raw in overrides {
        let (k, v) = parse_override(raw)?;
        table.insert(k, v);
    }
    if let Some(s) = seed {
        let s = i64::try_from(s).map_err(|_| CliError::Config("--seed must fit in 63 bits".into()))?;
        table.insert("base_seed".into(), toml::Value::Integer(s));
    }
    let cfg: SimConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

/// Sorted-key JSON of the resolved config, hashed. Key order in the source
/// file does not matter since only resolved values are serialised.
pub fn digest(cfg: &SimConfig) -> String {
    let canonical = serde_json::to_value(cfg).expect("config serialises");
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}
