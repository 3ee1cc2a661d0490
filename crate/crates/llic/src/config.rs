//! Flat key=value configuration files and override handling.
//!
//! Precedence: built-in defaults < config file < `--set key=value` flags.
//! Unknown keys are rejected. `preset` selects the width preset the other
//! model keys then override.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{DistortionKind, TrainConfig, MSE_LAMBDAS};

pub type KeyValues = BTreeMap<String, String>;

const MODEL_KEYS: &[&str] = &[
    "preset",
    "n",
    "m",
    "hyper",
    "kernels_ga",
    "kernels_gs",
    "blocks_per_stage",
    "cond_hidden",
    "static_weights",
    "use_ffn",
    "linear_embedding",
    "disable_stb",
    "disable_ctb",
    "swap_stb_ctb",
];

const TRAIN_KEYS: &[&str] = &[
    "lambda",
    "lambda_index",
    "distortion",
    "steps",
    "batch_size",
    "lr_milestones",
    "patch_small",
    "patch_large",
    "patch_switch_step",
    "seed",
];

fn trimmed(line: &str) -> &str {
    match line.find('#') {
        Some(i) => line[..i].trim(),
        None => line.trim(),
    }
}

/// Parse `key = value` lines; '#' starts a comment.
pub fn parse_config_text(text: &str) -> Result<KeyValues> {
    let mut map = KeyValues::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = trimmed(raw);
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Format(format!(
                "config line {}: expected key=value, got '{line}'",
                ln + 1
            )));
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

pub fn load_config_file(path: &Path) -> Result<KeyValues> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io_path("reading config", path, e))?;
    parse_config_text(&text)
}

/// Overlay `--set key=value` pairs (flags win).
pub fn apply_overrides(map: &mut KeyValues, sets: &[String]) -> Result<()> {
    for s in sets {
        let Some((k, v)) = s.split_once('=') else {
            return Err(Error::Usage(format!("--set expects key=value, got '{s}'")));
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(())
}

pub fn reject_unknown_keys(map: &KeyValues) -> Result<()> {
    for key in map.keys() {
        if !MODEL_KEYS.contains(&key.as_str()) && !TRAIN_KEYS.contains(&key.as_str()) {
            return Err(Error::Usage(format!("unknown config key '{key}'")));
        }
    }
    Ok(())
}

fn parse_usize(map: &KeyValues, key: &str) -> Result<Option<usize>> {
    map.get(key)
        .map(|v| {
            v.parse::<usize>()
                .map_err(|_| Error::Format(format!("config key {key}: bad integer '{v}'")))
        })
        .transpose()
}

fn parse_u64(map: &KeyValues, key: &str) -> Result<Option<u64>> {
    map.get(key)
        .map(|v| {
            v.parse::<u64>()
                .map_err(|_| Error::Format(format!("config key {key}: bad integer '{v}'")))
        })
        .transpose()
}

fn parse_f64(map: &KeyValues, key: &str) -> Result<Option<f64>> {
    map.get(key)
        .map(|v| {
            v.parse::<f64>()
                .map_err(|_| Error::Format(format!("config key {key}: bad number '{v}'")))
        })
        .transpose()
}

fn parse_bool(map: &KeyValues, key: &str) -> Result<Option<bool>> {
    map.get(key)
        .map(|v| match v.as_str() {
            "1" | "true" | "yes" => Ok(true),
            "0" | "false" | "no" => Ok(false),
            _ => Err(Error::Format(format!("config key {key}: bad bool '{v}'"))),
        })
        .transpose()
}

fn parse_kernels(map: &KeyValues, key: &str) -> Result<Option<[usize; 4]>> {
    map.get(key)
        .map(|v| {
            let parts: Vec<&str> = v.split(',').map(str::trim).collect();
            if parts.len() != 4 {
                return Err(Error::Format(format!(
                    "config key {key}: expected 4 comma-separated kernels"
                )));
            }
            let mut out = [0usize; 4];
            for (i, p) in parts.iter().enumerate() {
                out[i] = p
                    .parse()
                    .map_err(|_| Error::Format(format!("config key {key}: bad kernel '{p}'")))?;
            }
            Ok(out)
        })
        .transpose()
}

pub fn model_config_from(map: &KeyValues) -> Result<ModelConfig> {
    let mut cfg = match map.get("preset").map(String::as_str) {
        None | Some("desk") => ModelConfig::desk(),
        Some("full") => ModelConfig::full(),
        Some(other) => {
            return Err(Error::Format(format!(
                "unknown preset '{other}' (expected desk or full)"
            )))
        }
    };
    if let Some(v) = parse_usize(map, "n")? {
        cfg.n = v;
    }
    if let Some(v) = parse_usize(map, "m")? {
        cfg.m = v;
    }
    if let Some(v) = parse_usize(map, "hyper")? {
        cfg.hyper = v;
    }
    if let Some(v) = parse_kernels(map, "kernels_ga")? {
        cfg.kernels_ga = v;
        // Default synthesis schedule mirrors the analysis one.
        cfg.kernels_gs = [v[3], v[2], v[1], v[0]];
    }
    if let Some(v) = parse_kernels(map, "kernels_gs")? {
        cfg.kernels_gs = v;
    }
    if let Some(v) = parse_usize(map, "blocks_per_stage")? {
        cfg.blocks_per_stage = v;
    }
    if let Some(v) = parse_usize(map, "cond_hidden")? {
        cfg.cond_hidden = v;
    }
    if let Some(v) = parse_bool(map, "static_weights")? {
        cfg.static_weights = v;
    }
    if let Some(v) = parse_bool(map, "use_ffn")? {
        cfg.use_ffn = v;
    }
    if let Some(v) = parse_bool(map, "linear_embedding")? {
        cfg.linear_embedding = v;
    }
    if let Some(v) = parse_bool(map, "disable_stb")? {
        cfg.disable_stb = v;
    }
    if let Some(v) = parse_bool(map, "disable_ctb")? {
        cfg.disable_ctb = v;
    }
    if let Some(v) = parse_bool(map, "swap_stb_ctb")? {
        cfg.swap_stb_ctb = v;
    }
    cfg.validate().map_err(Error::Format)?;
    Ok(cfg)
}

pub fn train_config_from(map: &KeyValues) -> Result<TrainConfig> {
    let total = parse_u64(map, "steps")?.unwrap_or(2_000_000);
    let mut cfg = TrainConfig::with_total_steps(total);
    if let Some(idx) = parse_usize(map, "lambda_index")? {
        let lambda = MSE_LAMBDAS
            .get(idx)
            .ok_or_else(|| Error::Format(format!("lambda_index {idx} out of range 0..6")))?;
        cfg.lambda = *lambda;
    }
    if let Some(v) = parse_f64(map, "lambda")? {
        cfg.lambda = v;
    }
    if let Some(v) = map.get("distortion") {
        cfg.distortion = match v.as_str() {
            "mse" => DistortionKind::Mse,
            "msssim" => DistortionKind::MsSsim,
            other => {
                return Err(Error::Format(format!(
                    "unknown distortion '{other}' (expected mse or msssim)"
                )))
            }
        };
    }
    if let Some(v) = parse_usize(map, "batch_size")? {
        cfg.batch_size = v;
    }
    if let Some(v) = map.get("lr_milestones") {
        let parts: Vec<&str> = v.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(Error::Format(
                "lr_milestones expects 4 comma-separated steps".into(),
            ));
        }
        let mut ms = [0u64; 4];
        for (i, p) in parts.iter().enumerate() {
            ms[i] = p
                .parse()
                .map_err(|_| Error::Format(format!("bad milestone '{p}'")))?;
        }
        cfg.lr_milestones = ms;
    }
    if let Some(v) = parse_usize(map, "patch_small")? {
        cfg.patch_small = v;
    }
    if let Some(v) = parse_usize(map, "patch_large")? {
        cfg.patch_large = v;
    }
    if let Some(v) = parse_u64(map, "patch_switch_step")? {
        cfg.patch_switch_step = v;
    }
    if let Some(v) = parse_u64(map, "seed")? {
        cfg.seed = v;
    }
    cfg.validate()?;
    Ok(cfg)
}
