//! `key=value` run-config files merged under command-line flags.

use std::ffi::OsString;
use std::path::Path;

use clap::{ArgMatches, Command};

#[derive(Debug)]
pub struct ConfigError(pub String);

/// Parse UTF-8 `key=value` lines. Blank lines and `#` comments are skipped.
pub fn parse(text: &str, origin: &Path) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            ConfigError(format!("{}:{}: expected key=value, got `{line}`", origin.display(), i + 1))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError(format!("{}:{}: empty key", origin.display(), i + 1)));
        }
        if out.iter().any(|(seen, _): &(String, String)| seen == k) {
            return Err(ConfigError(format!("{}:{}: duplicate key `{k}`", origin.display(), i + 1)));
        }
        out.push((k.to_owned(), v.to_owned()));
    }
    Ok(out)
}

/// Pull `--config <path>` / `--config=<path>` out of `args`.
fn take_config_path(args: &mut Vec<OsString>) -> Option<OsString> {
    let mut found = None;
    let mut i = 1;
    while i < args.len() {
        let s = args[i].to_string_lossy();
        if s == "--" {
            break;
        }
        if s == "--config" && i + 1 < args.len() {
            found = Some(args.remove(i + 1));
            args.remove(i);
        } else if let Some(p) = s.strip_prefix("--config=") {
            found = Some(OsString::from(p));
            args.remove(i);
        } else {
            i += 1;
        }
    }
    found
}

/// Rewrite `args` so config entries become flags placed before the user's
/// own flags. Commands are built with `args_override_self`, so a flag given
/// on the command line replaces the config value.
pub fn merge(cmd: &Command, mut args: Vec<OsString>) -> Result<Vec<OsString>, ConfigError> {
    let Some(path) = take_config_path(&mut args) else {
        return Ok(args);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
    let entries = parse(&text, path)?;
    let Some(sub) = args
        .get(1)
        .and_then(|a| a.to_str())
        .and_then(|name| cmd.find_subcommand(name))
    else {
        return Err(ConfigError("--config needs a subcommand".into()));
    };
    let known: Vec<&str> = sub
        .get_arguments()
        .filter_map(|a| a.get_long())
        .filter(|l| !matches!(*l, "config" | "help"))
        .collect();
    let mut flags = Vec::with_capacity(entries.len());
    for (k, v) in entries {
        if !known.contains(&k.as_str()) {
            return Err(ConfigError(format!(
                "unknown key `{k}` in {} for `{}` (known: {})",
                path.display(),
                sub.get_name(),
                known.join(", ")
            )));
        }
        flags.push(OsString::from(format!("--{k}={v}")));
    }
    args.splice(2..2, flags);
    Ok(args)
}

/// Every resolved option of the chosen subcommand as `key=value` lines,
/// defaults included. The output is itself a valid config file.
pub fn echo(cmd: &Command, matches: &ArgMatches) -> String {
    let Some((name, sub_m)) = matches.subcommand() else {
        return String::new();
    };
    let sub = cmd.find_subcommand(name).expect("parsed subcommand exists");
    let mut out = format!("# resolved config: {name}\n");
    for arg in sub.get_arguments() {
        let Some(long) = arg.get_long().filter(|l| !matches!(*l, "config" | "help")) else {
            continue;
        };
        if let Ok(Some(vals)) = sub_m.try_get_raw(arg.get_id().as_str()) {
            let vals: Vec<_> = vals.map(|v| v.to_string_lossy().into_owned()).collect();
            out.push_str(&format!("{long}={}\n", vals.join(",")));
        }
    }
    out
}
