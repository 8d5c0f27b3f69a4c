//! Config-file defaults. A TOML file holds one table per subcommand whose keys
//! are flag names. Each value becomes an extra argv word unless the user
//! already gave that flag, so command-line flags always win.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use clap::parser::ValueSource;
use clap::{ArgMatches, Command};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config {path}: {msg}")]
    Read { path: String, msg: String },
    #[error("config {path}: [{section}] has no flag '{key}'")]
    UnknownKey { path: String, section: String, key: String },
    #[error("config {path}: [{section}].{key} must be a string, number or boolean")]
    BadValue { path: String, section: String, key: String },
}

/// Flags from the config file for the chosen subcommand, as extra argv words.
/// Flags already given on the command line or through the environment are skipped.
pub fn config_args(path: &Path, cmd: &Command, sub: &str, given: &ArgMatches) -> Result<Vec<OsString>, ConfigError> {
    let p = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| ConfigError::Read {
        path: p.clone(),
        msg: e.to_string(),
    })?;
    let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Read {
        path: p.clone(),
        msg: e.message().to_string(),
    })?;
    for key in doc.keys() {
        if cmd.find_subcommand(key).is_none() {
            return Err(ConfigError::Read {
                path: p.clone(),
                msg: format!("unknown section [{key}]"),
            });
        }
    }
    let Some(section) = doc.get(sub) else {
        return Ok(Vec::new());
    };
    let Some(table) = section.as_table() else {
        return Err(ConfigError::Read {
            path: p,
            msg: format!("[{sub}] must be a table"),
        });
    };
    let subcmd = cmd.find_subcommand(sub).expect("checked above");
    let mut out = Vec::new();
    for (key, value) in table {
        let id = key.replace('-', "_");
        let unknown = || ConfigError::UnknownKey {
            path: p.clone(),
            section: sub.to_string(),
            key: key.clone(),
        };
        let arg = subcmd
            .get_arguments()
            .find(|a| a.get_id() == id.as_str())
            .ok_or_else(unknown)?;
        let long = arg.get_long().ok_or_else(unknown)?;
        let explicit = matches!(
            given.value_source(&id),
            Some(ValueSource::CommandLine) | Some(ValueSource::EnvVariable)
        );
        if explicit {
            continue;
        }
        let bad = || ConfigError::BadValue {
            path: p.clone(),
            section: sub.to_string(),
            key: key.clone(),
        };
        match value {
            toml::Value::Boolean(true) => out.push(format!("--{long}").into()),
            toml::Value::Boolean(false) => {}
            toml::Value::String(s) => out.push(format!("--{long}={s}").into()),
            toml::Value::Integer(i) => out.push(format!("--{long}={i}").into()),
            toml::Value::Float(f) => out.push(format!("--{long}={f}").into()),
            _ => return Err(bad()),
        }
    }
    Ok(out)
}
