//! Flat key-value configuration files for the simulation commands.
//!
//! Format: one `key = value` pair per line, `#` starts a comment. Lists are
//! comma separated. Keys: `family`, `nu`, `lambda`, `m`, `p`, `q`, `n`,
//! `reps`, `seed`, `levels`, and optional `power_grid`.

use anyhow::{bail, Context, Result};
use std::collections::HashMap;
use std::path::Path;

use eiv::simulate::SimConfig;
use eiv::FamilyKind;

pub fn load_sim_config(path: &Path) -> Result<SimConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    let mut kv: HashMap<String, String> = HashMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{}:{}: expected `key = value`", path.display(), lineno + 1);
        };
        kv.insert(key.trim().to_string(), value.trim().to_string());
    }

    let get = |key: &str| -> Result<&String> {
        kv.get(key)
            .ok_or_else(|| anyhow::anyhow!("{}: missing required key `{key}`", path.display()))
    };
    let parse_usize = |key: &str| -> Result<usize> {
        get(key)?
            .parse::<usize>()
            .with_context(|| format!("key `{key}` must be a nonnegative integer"))
    };
    let parse_list = |value: &str, key: &str| -> Result<Vec<f64>> {
        value
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .with_context(|| format!("key `{key}`: bad number {tok:?}"))
            })
            .collect()
    };

    let family = match get("family")?.as_str() {
        "normal" => FamilyKind::Normal,
        "student_t" => FamilyKind::StudentT,
        "power_exponential" => FamilyKind::PowerExponential,
        other => bail!("unknown family {other:?} (expected normal | student_t | power_exponential)"),
    };
    let shape = match family {
        FamilyKind::Normal => None,
        FamilyKind::StudentT => Some(
            get("nu")?
                .parse::<f64>()
                .context("key `nu` must be a number")?,
        ),
        FamilyKind::PowerExponential => Some(
            get("lambda")?
                .parse::<f64>()
                .context("key `lambda` must be a number")?,
        ),
    };

    let m = parse_usize("m")?;
    let p = parse_usize("p")?;
    let q = parse_usize("q")?;
    let n = parse_usize("n")?;
    let reps = parse_usize("reps")?;
    let seed = get("seed")?
        .parse::<u64>()
        .context("key `seed` must be a 64-bit unsigned integer")?;
    let levels = parse_list(get("levels")?, "levels")?;

    let mut cfg = SimConfig::with_paper_defaults(family, shape, m, p, q, n, reps, seed, levels)
        .map_err(|e| anyhow::anyhow!(e.to_string()))?;
    if let Some(grid) = kv.get("power_grid") {
        cfg.power_grid = Some(parse_list(grid, "power_grid")?);
    }
    Ok(cfg)
}
