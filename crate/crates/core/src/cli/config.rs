//! `key = value` files whose entries act as flags placed before the ones on
//! the command line, so explicit flags win.

use std::ffi::OsString;
use std::path::Path;

use clap::{ArgAction, CommandFactory};

use super::Cli;
use crate::error::{Error, Result};

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
/// Keys may use `_` or `-`.
pub fn parse_config(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "{}:{}: expected `key = value`, found `{line}`",
                origin.display(),
                i + 1
            ))
        })?;
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() {
            return Err(Error::Config(format!("{}:{}: empty key", origin.display(), i + 1)));
        }
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}

fn take_config_path(argv: &mut Vec<OsString>) -> Result<Option<OsString>> {
    let Some(pos) = argv.iter().position(|a| {
        let a = a.to_string_lossy();
        a == "--config" || a.starts_with("--config=")
    }) else {
        return Ok(None);
    };
    let token = argv.remove(pos).to_string_lossy().into_owned();
    if let Some(v) = token.strip_prefix("--config=") {
        return Ok(Some(v.into()));
    }
    if pos < argv.len() {
        Ok(Some(argv.remove(pos)))
    } else {
        Err(Error::Config("`--config` needs a file path".into()))
    }
}

/// Replaces `--config <file>` by the file's entries, spliced in directly
/// after the subcommand name.
pub fn expand_argv(mut argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = take_config_path(&mut argv)? else {
        return Ok(argv);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries = parse_config(&text, path)?;

    let Some(sub_name) = argv.get(1).map(|s| s.to_string_lossy().into_owned()) else {
        return Ok(argv);
    };
    let cmd = Cli::command();
    let Some(sub) = cmd.find_subcommand(&sub_name) else {
        // let clap report the unknown subcommand
        return Ok(argv);
    };
    let mut injected: Vec<OsString> = Vec::new();
    for (key, value) in entries {
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| {
                Error::Config(format!(
                    "{}: unknown key `{key}` for `{sub_name}`",
                    path.display()
                ))
            })?;
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            let on: bool = value.parse().map_err(|_| {
                Error::Config(format!("{}: `{key}` expects true or false", path.display()))
            })?;
            if on {
                injected.push(format!("--{key}").into());
            }
        } else {
            injected.push(format!("--{key}").into());
            injected.push(value.into());
        }
    }
    argv.splice(2..2, injected);
    Ok(argv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_underscores() {
        let text = "# defaults\np = 0.8\n\nrepeats=3   # short run\nval_fraction = 0.2\n";
        let got = parse_config(text, Path::new("x.conf")).unwrap();
        assert_eq!(
            got,
            vec![
                ("p".to_string(), "0.8".to_string()),
                ("repeats".to_string(), "3".to_string()),
                ("val-fraction".to_string(), "0.2".to_string()),
            ]
        );
    }

    #[test]
    fn rejects_lines_without_equals() {
        let err = parse_config("p 0.8\n", Path::new("bad.conf")).unwrap_err();
        assert!(err.to_string().contains("bad.conf:1"));
    }
}
