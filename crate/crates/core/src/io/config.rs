//! `key = value` training configuration files.

use std::collections::HashSet;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::Reduction;
use crate::trainer::{DecoderInput, TrainConfig};

fn parse_num<V: FromStr>(key: &str, value: &str, kind: &str) -> std::result::Result<V, String> {
    value
        .parse()
        .map_err(|_| format!("key {key:?} expects {kind}, got {value:?}"))
}

fn set_key(cfg: &mut TrainConfig, key: &str, value: &str) -> std::result::Result<(), String> {
    let f = |v: &str| parse_num::<f64>(key, v, "a number");
    let u = |v: &str| parse_num::<usize>(key, v, "a non-negative integer");
    let u64_ = |v: &str| parse_num::<u64>(key, v, "a non-negative integer");
    match key {
        "batch_size" => cfg.batch_size = u(value)?,
        "real_fraction" => cfg.real_fraction = f(value)?,
        "views_per_real" => cfg.views_per_real = u(value)?,
        "learning_rate" => cfg.learning_rate = f(value)?,
        "beta1" => cfg.beta1 = f(value)?,
        "beta2" => cfg.beta2 = f(value)?,
        "epsilon" => cfg.epsilon = f(value)?,
        "weight_decay" => cfg.weight_decay = f(value)?,
        "steps_stage1" => cfg.steps_stage1 = u64_(value)?,
        "steps_stage2" => cfg.steps_stage2 = u64_(value)?,
        "seed" => cfg.seed = u64_(value)?,
        "w_s" => cfg.loss_weights.w_s = f(value)?,
        "w_t" => cfg.loss_weights.w_t = f(value)?,
        "w_batch" => cfg.loss_weights.w_batch = f(value)?,
        "w_loop" => cfg.loss_weights.w_loop = f(value)?,
        "reduction" => {
            cfg.reduction = match value {
                "sum" => Reduction::Sum,
                "mean" => Reduction::Mean,
                _ => return Err(format!("key \"reduction\" expects sum or mean, got {value:?}")),
            }
        }
        "image_width" => cfg.image_width = u(value)?,
        "image_height" => cfg.image_height = u(value)?,
        "encoder_seed" => cfg.encoder_seed = u64_(value)?,
        "encoder_grid" => cfg.encoder_grid = u(value)?,
        "feature_dim" => cfg.feature_dim = u(value)?,
        "identity_dim" => cfg.identity_dim = u(value)?,
        "hidden_dim" => cfg.hidden_dim = u(value)?,
        "decoder_input" => {
            cfg.decoder_input = match value {
                "features" => DecoderInput::Features,
                "identity" => DecoderInput::Identity,
                _ => return Err(format!("key \"decoder_input\" expects features or identity, got {value:?}")),
            }
        }
        "yaw_max_deg" => cfg.pose.yaw_max_deg = f(value)?,
        "pitch_max_deg" => cfg.pose.pitch_max_deg = f(value)?,
        "fov_deg" => cfg.pose.fov_deg = f(value)?,
        "frame_fraction" => cfg.pose.frame_fraction = f(value)?,
        "face_radius_mm" => cfg.pose.face_radius_mm = f(value)?,
        "near" => cfg.pose.near = f(value)?,
        "far" => cfg.pose.far = f(value)?,
        "max_pose_retries" => cfg.max_pose_retries = u(value)?,
        "real_pool_size" => cfg.real_pool_size = u(value)?,
        "real_pool_seed" => cfg.real_pool_seed = u64_(value)?,
        _ => return Err(format!("unknown key {key:?}")),
    }
    Ok(())
}

/// Parses a configuration over the defaults. Unknown or repeated keys and
/// malformed values are errors naming the key and line. The result is
/// validated.
pub fn parse_config(text: &str, name: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut seen = HashSet::new();
    let err = |line: usize, message: String| Error::Parse {
        path: name.to_string(),
        line,
        message,
    };
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(k + 1, format!("expected `key = value`, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        if !seen.insert(key.to_string()) {
            return Err(err(k + 1, format!("duplicate key {key:?}")));
        }
        set_key(&mut cfg, key, value).map_err(|m| err(k + 1, m))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<TrainConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, &path.display().to_string())
}

/// Canonical text form; parsing it gives back the same configuration.
pub fn config_to_text(cfg: &TrainConfig) -> String {
    let red = match cfg.reduction {
        Reduction::Sum => "sum",
        Reduction::Mean => "mean",
    };
    let input = match cfg.decoder_input {
        DecoderInput::Features => "features",
        DecoderInput::Identity => "identity",
    };
    let p = &cfg.pose;
    let w = &cfg.loss_weights;
    let pairs: Vec<(&str, String)> = vec![
        ("batch_size", cfg.batch_size.to_string()),
        ("real_fraction", format!("{:?}", cfg.real_fraction)),
        ("views_per_real", cfg.views_per_real.to_string()),
        ("learning_rate", format!("{:?}", cfg.learning_rate)),
        ("beta1", format!("{:?}", cfg.beta1)),
        ("beta2", format!("{:?}", cfg.beta2)),
        ("epsilon", format!("{:?}", cfg.epsilon)),
        ("weight_decay", format!("{:?}", cfg.weight_decay)),
        ("steps_stage1", cfg.steps_stage1.to_string()),
        ("steps_stage2", cfg.steps_stage2.to_string()),
        ("seed", cfg.seed.to_string()),
        ("w_s", format!("{:?}", w.w_s)),
        ("w_t", format!("{:?}", w.w_t)),
        ("w_batch", format!("{:?}", w.w_batch)),
        ("w_loop", format!("{:?}", w.w_loop)),
        ("reduction", red.to_string()),
        ("image_width", cfg.image_width.to_string()),
        ("image_height", cfg.image_height.to_string()),
        ("encoder_seed", cfg.encoder_seed.to_string()),
        ("encoder_grid", cfg.encoder_grid.to_string()),
        ("feature_dim", cfg.feature_dim.to_string()),
        ("identity_dim", cfg.identity_dim.to_string()),
        ("hidden_dim", cfg.hidden_dim.to_string()),
        ("decoder_input", input.to_string()),
        ("yaw_max_deg", format!("{:?}", p.yaw_max_deg)),
        ("pitch_max_deg", format!("{:?}", p.pitch_max_deg)),
        ("fov_deg", format!("{:?}", p.fov_deg)),
        ("frame_fraction", format!("{:?}", p.frame_fraction)),
        ("face_radius_mm", format!("{:?}", p.face_radius_mm)),
        ("near", format!("{:?}", p.near)),
        ("far", format!("{:?}", p.far)),
        ("max_pose_retries", cfg.max_pose_retries.to_string()),
        ("real_pool_size", cfg.real_pool_size.to_string()),
        ("real_pool_seed", cfg.real_pool_seed.to_string()),
    ];
    pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}
