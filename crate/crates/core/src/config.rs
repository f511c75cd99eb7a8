//! `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Every key must be known.
//! Model keys are bare (`embed_dim`), phase keys carry a prefix
//! (`pretrain.epochs`, `finetune.lr`).

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::parallel::Parallelism;

/// Optimization settings for one phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

/// Segmentation-specific settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SegOptions {
    pub num_classes: usize,
    pub use_abs_pos_embed: bool,
    pub decoder_shares_pretrained_blocks: bool,
    pub transfer_decoder_weights: bool,
    pub augment: bool,
}

impl Default for SegOptions {
    fn default() -> Self {
        SegOptions {
            num_classes: 3,
            use_abs_pos_embed: false,
            decoder_shares_pretrained_blocks: true,
            transfer_decoder_weights: false,
            augment: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub pretrain: PhaseConfig,
    /// Save a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    pub finetune: PhaseConfig,
    pub seg: SegOptions,
    pub seed: u64,
    pub parallel: bool,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelSpec::default(),
            pretrain: PhaseConfig {
                epochs: 50,
                batch_size: 48,
                lr: 1e-4,
                weight_decay: 0.0,
            },
            checkpoint_every: 0,
            finetune: PhaseConfig {
                epochs: 40,
                batch_size: 48,
                lr: 1e-4,
                weight_decay: 0.0,
            },
            seg: SegOptions::default(),
            seed: 0,
            parallel: true,
            data_dir: None,
            out_dir: None,
            checkpoint: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|s| parse(key, s.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Sets one model key. Returns `Ok(false)` if `key` is not a model key.
pub fn set_model_key(m: &mut ModelSpec, key: &str, value: &str) -> Result<bool> {
    match key {
        "encoder_variant" => m.encoder_variant = parse(key, value)?,
        "decoder_variant" => m.decoder_variant = parse(key, value)?,
        "decoder_embedding" => m.decoder_embedding = parse_bool(key, value)?,
        "use_abs_pos_embed" => m.use_abs_pos_embed = parse_bool(key, value)?,
        "image_size" => {
            let s = parse(key, value)?;
            m.image.image_h = s;
            m.image.image_w = s;
        }
        "channels" => m.image.channels = parse(key, value)?,
        "patch_side" => m.image.patch_side = parse(key, value)?,
        "embed_dim" => m.embed_dim = parse(key, value)?,
        "depths" => m.stage_depths = parse_list(key, value)?,
        "heads" => m.head_counts = parse_list(key, value)?,
        "window" => m.attn_window = parse(key, value)?,
        "mask_window" => m.mask_window_r = parse(key, value)?,
        "mask_ratio" => m.mask_ratio = parse(key, value)?,
        "mask_mode" => m.mask_mode = parse(key, value)?,
        "decoder_depth" => m.decoder_depth = parse(key, value)?,
        "decoder_heads" => m.decoder_heads = parse(key, value)?,
        "decoder_dim" => {
            m.decoder_dim = match value {
                "auto" => None,
                v => Some(parse(key, v)?),
            }
        }
        "norm_pix" => m.norm_pix = parse_bool(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Model keys and values, in a fixed order; [`set_model_key`] accepts
/// every pair.
pub fn model_pairs(m: &ModelSpec) -> Vec<(&'static str, String)> {
    vec![
        ("encoder_variant", m.encoder_variant.to_string()),
        ("decoder_variant", m.decoder_variant.to_string()),
        ("decoder_embedding", m.decoder_embedding.to_string()),
        ("use_abs_pos_embed", m.use_abs_pos_embed.to_string()),
        ("image_size", m.image.image_h.to_string()),
        ("channels", m.image.channels.to_string()),
        ("patch_side", m.image.patch_side.to_string()),
        ("embed_dim", m.embed_dim.to_string()),
        ("depths", join(&m.stage_depths)),
        ("heads", join(&m.head_counts)),
        ("window", m.attn_window.to_string()),
        ("mask_window", m.mask_window_r.to_string()),
        ("mask_ratio", m.mask_ratio.to_string()),
        ("mask_mode", m.mask_mode.to_string()),
        ("decoder_depth", m.decoder_depth.to_string()),
        ("decoder_heads", m.decoder_heads.to_string()),
        ("decoder_dim", m.decoder_dim.map_or("auto".into(), |d| d.to_string())),
        ("norm_pix", m.norm_pix.to_string()),
    ]
}

/// Rebuilds a model spec from stored pairs (e.g. checkpoint metadata).
/// Keys that are not model keys are ignored.
pub fn model_from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<ModelSpec> {
    let mut m = ModelSpec::default();
    for (k, v) in pairs {
        set_model_key(&mut m, k, v)?;
    }
    Ok(m)
}

fn set_phase(p: &mut PhaseConfig, key: &str, field: &str, value: &str) -> Result<bool> {
    match field {
        "epochs" => p.epochs = parse(key, value)?,
        "batch_size" => p.batch_size = parse(key, value)?,
        "lr" => p.lr = parse(key, value)?,
        "weight_decay" => p.weight_decay = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl RunConfig {
    /// Sets one key; unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let known = if set_model_key(&mut self.model, key, value)? {
            true
        } else if let Some(f) = key.strip_prefix("pretrain.") {
            if f == "checkpoint_every" {
                self.checkpoint_every = parse(key, value)?;
                true
            } else {
                set_phase(&mut self.pretrain, key, f, value)?
            }
        } else if let Some(f) = key.strip_prefix("finetune.") {
            match f {
                "num_classes" => self.seg.num_classes = parse(key, value)?,
                "abs_pos_embed" => self.seg.use_abs_pos_embed = parse_bool(key, value)?,
                "share_decoder_blocks" => self.seg.decoder_shares_pretrained_blocks = parse_bool(key, value)?,
                "transfer_decoder_weights" => self.seg.transfer_decoder_weights = parse_bool(key, value)?,
                "augment" => self.seg.augment = parse_bool(key, value)?,
                _ => return self.phase_or_unknown(key, f, value),
            }
            true
        } else {
            match key {
                "seed" => self.seed = parse(key, value)?,
                "parallel" => self.parallel = parse_bool(key, value)?,
                "data_dir" => self.data_dir = Some(PathBuf::from(value)),
                "out_dir" => self.out_dir = Some(PathBuf::from(value)),
                "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
                _ => return Err(Error::config(format!("unknown key {key:?}"))),
            }
            true
        };
        if known {
            Ok(())
        } else {
            Err(Error::config(format!("unknown key {key:?}")))
        }
    }

    fn phase_or_unknown(&mut self, key: &str, field: &str, value: &str) -> Result<()> {
        if set_phase(&mut self.finetune, key, field, value)? {
            Ok(())
        } else {
            Err(Error::config(format!("unknown key {key:?}")))
        }
    }

    /// Applies the lines of a config file on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = RunConfig::default();
        c.apply_text(&text)?;
        Ok(c)
    }

    pub fn parallelism(&self) -> Parallelism {
        if self.parallel {
            Parallelism::Parallel
        } else {
            Parallelism::Sequential
        }
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn resolved(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = model_pairs(&self.model)
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        for (prefix, p) in [("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            out.push((format!("{prefix}.epochs"), p.epochs.to_string()));
            out.push((format!("{prefix}.batch_size"), p.batch_size.to_string()));
            out.push((format!("{prefix}.lr"), p.lr.to_string()));
            out.push((format!("{prefix}.weight_decay"), p.weight_decay.to_string()));
        }
        out.push(("pretrain.checkpoint_every".into(), self.checkpoint_every.to_string()));
        let s = &self.seg;
        out.push(("finetune.num_classes".into(), s.num_classes.to_string()));
        out.push(("finetune.abs_pos_embed".into(), s.use_abs_pos_embed.to_string()));
        out.push(("finetune.share_decoder_blocks".into(), s.decoder_shares_pretrained_blocks.to_string()));
        out.push(("finetune.transfer_decoder_weights".into(), s.transfer_decoder_weights.to_string()));
        out.push(("finetune.augment".into(), s.augment.to_string()));
        out.push(("seed".into(), self.seed.to_string()));
        out.push(("parallel".into(), self.parallel.to_string()));
        let path = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        out.push(("data_dir".into(), path(&self.data_dir)));
        out.push(("out_dir".into(), path(&self.out_dir)));
        out.push(("checkpoint".into(), path(&self.checkpoint)));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nembed_dim = 8 # trailing\ndepths=1,1\nheads = 1, 1\npretrain.epochs=3\nfinetune.lr = 0.001\n")
            .unwrap();
        assert_eq!(c.model.embed_dim, 8);
        assert_eq!(c.model.stage_depths, vec![1, 1]);
        assert_eq!(c.pretrain.epochs, 3);
        assert_eq!(c.finetune.lr, 1e-3);
        assert!(c.apply_text("bogus = 1").is_err());
        assert!(c.apply_text("embed_dim").is_err());
        assert!(c.apply_text("embed_dim = x").is_err());
    }

    #[test]
    fn model_pairs_round_trip() {
        let mut m = ModelSpec::full_scale();
        m.decoder_dim = Some(512);
        m.norm_pix = true;
        let pairs = model_pairs(&m);
        let back = model_from_pairs(pairs.iter().map(|(k, v)| (*k, v.as_str()))).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn resolved_reparses() {
        let mut c = RunConfig::default();
        c.seed = 9;
        c.out_dir = Some("x".into());
        let mut d = RunConfig::default();
        for (k, v) in c.resolved() {
            if !v.is_empty() {
                d.set(&k, &v).unwrap();
            }
        }
        assert_eq!(c, d);
    }
}
