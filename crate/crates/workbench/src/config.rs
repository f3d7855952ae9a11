//! Argument parsing plus config-file merging.
//!
//! A config file is a JSON object `{"schema": 1, ...}` whose keys are the
//! long flag names of the subcommand in snake_case. Precedence, lowest
//! first: built-in defaults, config file, command-line flags, and finally
//! `IFORGE_SEED` for the root seed.

use std::path::Path;

use clap::error::ErrorKind;
use clap::parser::ValueSource;
use clap::{ArgMatches, CommandFactory, FromArgMatches, Parser};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::cli::{Cli, Command, Runtime};
use crate::io;
use crate::WbError;

pub const SCHEMA_VERSION: u64 = 1;
pub const SEED_ENV: &str = "IFORGE_SEED";

/// `Ok(None)` when there is nothing left to run (help, version,
/// `--print-config`).
pub fn parse<I, T>(argv: I) -> Result<Option<Command>, WbError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{}", e.render());
            return Ok(None);
        }
        Err(e) => return Err(WbError::Usage(e.render().to_string())),
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| WbError::Usage(e.render().to_string()))?;
    let (_, sub) = matches.subcommand().ok_or_else(|| WbError::Usage("missing subcommand".into()))?;
    let mut cmd = cli.command;
    let name = cmd.name();
    macro_rules! merge_into {
        ($($v:ident),*) => {
            match &mut cmd {
                $(Command::$v(a) => {
                    let rt = a.rt.clone();
                    *a = merge(&*a, &rt, sub, name)?;
                    a.rt = rt;
                })*
            }
        };
    }
    merge_into!(Attack, Analyze, Verify, Correlate, Train, GenData, Report);
    if runtime(&cmd).print_config {
        print!("{}", io::to_json_string(&with_schema(&cmd_value(&cmd)?))?);
        return Ok(None);
    }
    Ok(Some(cmd))
}

pub fn runtime(cmd: &Command) -> &Runtime {
    match cmd {
        Command::Attack(a) => &a.rt,
        Command::Analyze(a) => &a.rt,
        Command::Verify(a) => &a.rt,
        Command::Correlate(a) => &a.rt,
        Command::Train(a) => &a.rt,
        Command::GenData(a) => &a.rt,
        Command::Report(a) => &a.rt,
    }
}

fn cmd_value(cmd: &Command) -> Result<Value, WbError> {
    Ok(match cmd {
        Command::Attack(a) => serde_json::to_value(a)?,
        Command::Analyze(a) => serde_json::to_value(a)?,
        Command::Verify(a) => serde_json::to_value(a)?,
        Command::Correlate(a) => serde_json::to_value(a)?,
        Command::Train(a) => serde_json::to_value(a)?,
        Command::GenData(a) => serde_json::to_value(a)?,
        Command::Report(a) => serde_json::to_value(a)?,
    })
}

fn with_schema(v: &Value) -> Value {
    let mut m = Map::new();
    m.insert("schema".into(), Value::from(SCHEMA_VERSION));
    if let Value::Object(o) = v {
        m.extend(o.clone());
    }
    Value::Object(m)
}

/// Default configuration of a subcommand, as printed in usage help.
pub fn schema_help(name: &str) -> String {
    let defaults = Cli::try_parse_from(["iforge", name]).ok().and_then(|c| cmd_value(&c.command).ok());
    match defaults {
        Some(v) => io::to_json_string(&with_schema(&v)).unwrap_or_default(),
        None => String::new(),
    }
}

fn config_err(name: &str, msg: impl Into<String>) -> WbError {
    WbError::Config { msg: msg.into(), help: schema_help(name) }
}

fn read_config(path: &Path, name: &str) -> Result<Map<String, Value>, WbError> {
    let text = std::fs::read_to_string(path).map_err(|source| WbError::Io { path: path.to_path_buf(), source })?;
    let value: Value = serde_json::from_str(&text).map_err(|e| config_err(name, format!("{}: {e}", path.display())))?;
    let Value::Object(mut map) = value else {
        return Err(config_err(name, format!("{}: top level must be an object", path.display())));
    };
    match map.remove("schema") {
        Some(v) if v.as_u64() == Some(SCHEMA_VERSION) => Ok(map),
        Some(v) => Err(config_err(name, format!("unsupported schema version {v}; expected {SCHEMA_VERSION}"))),
        None => Err(config_err(name, format!("missing \"schema\": {SCHEMA_VERSION}"))),
    }
}

fn merge<A: Serialize + DeserializeOwned>(args: &A, rt: &Runtime, sub: &ArgMatches, name: &str) -> Result<A, WbError> {
    let mut value = serde_json::to_value(args)?;
    let obj = value.as_object_mut().expect("argument structs serialize to objects");
    if let Some(path) = &rt.config {
        for (k, v) in read_config(path, name)? {
            if !obj.contains_key(&k) {
                return Err(config_err(name, format!("unknown key `{k}` for `{name}`")));
            }
            if sub.value_source(&k) != Some(ValueSource::CommandLine) {
                obj.insert(k, v);
            }
        }
    }
    if let Ok(s) = std::env::var(SEED_ENV) {
        if obj.contains_key("seed") {
            let seed: u64 = s
                .trim()
                .parse()
                .map_err(|_| config_err(name, format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?;
            obj.insert("seed".into(), Value::from(seed));
        }
    }
    serde_json::from_value(value).map_err(|e| config_err(name, e.to_string()))
}
