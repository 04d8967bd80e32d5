//! Training configuration resolution: preset, then `PMP_SEED`, then a
//! `key = value` file, then explicit flags.

use std::path::Path;

use pmp_core::trainer::TrainConfig;

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "PMP_SEED";

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value, got {raw:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_assignment(s: &str) -> CliResult<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| CliError::Usage(format!("expected key=value, got {s:?}")))
}

/// Layers the sources in precedence order and validates the result.
pub fn resolve(
    preset: &str,
    file: Option<&Path>,
    env_seed: Option<&str>,
    flags: &[(String, String)],
) -> CliResult<TrainConfig> {
    let mut cfg = TrainConfig::preset(preset).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut apply = |k: &str, v: &str, origin: &str| {
        cfg.set(k, v)
            .map_err(|e| CliError::Usage(format!("{origin}: {e}")))
    };
    if let Some(seed) = env_seed {
        apply("seed", seed, SEED_ENV)?;
    }
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Input {
            path: path.display().to_string(),
            source,
        })?;
        for (k, v) in parse_config_text(&text)? {
            apply(&k, &v, &path.display().to_string())?;
        }
    }
    for (k, v) in flags {
        apply(k, v, "command line")?;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blank_lines() {
        let kv = parse_config_text("# header\nlr = 0.1  # inline\n\n seed=7\n").unwrap();
        assert_eq!(kv, vec![("lr".into(), "0.1".into()), ("seed".into(), "7".into())]);
        assert!(parse_config_text("oops").is_err());
    }

    #[test]
    fn precedence_is_preset_env_file_flags() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.txt");
        std::fs::write(&f, "seed = 5\nwarmup_updates = 7\n").unwrap();
        let c = resolve("desk", None, Some("9"), &[]).unwrap();
        assert_eq!(c.seed, 9);
        let c = resolve("desk", Some(&f), Some("9"), &[]).unwrap();
        assert_eq!((c.seed, c.warmup_updates), (5, 7));
        let c = resolve("desk", Some(&f), Some("9"), &[("seed".into(), "1".into())]).unwrap();
        assert_eq!((c.seed, c.warmup_updates), (1, 7));
    }

    #[test]
    fn unknown_preset_or_key_is_usage() {
        assert!(matches!(resolve("nope", None, None, &[]), Err(CliError::Usage(_))));
        let bad = [("not_a_key".to_string(), "1".to_string())];
        assert!(matches!(resolve("desk", None, None, &bad), Err(CliError::Usage(_))));
    }
}
