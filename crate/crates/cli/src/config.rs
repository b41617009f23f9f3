//! Flat key-value run configuration.
//!
//! One text format covers every subcommand: `section.key = value` lines,
//! `#` comments, blank lines ignored. The full key set is fixed; unknown
//! keys are rejected so a typo cannot silently fall back to a default.
//! Every run writes its fully-resolved configuration (all keys, sorted)
//! next to its outputs, and that sidecar parses back into the same run.

use mblab_core::{Error, Result};
use std::collections::BTreeMap;
use std::path::Path;

/// Every known key with its default value, the single source of truth for
/// the config surface. `seed` is the one section-less key; it is also
/// overridable by `--seed`.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    // Corpus generation (mirrors the generator's spec fields).
    ("corpus.vocab_size", "12"),
    ("corpus.n_general", "6"),
    ("corpus.n_audio_confusable_pairs", "2"),
    ("corpus.n_video_confusable_pairs", "1"),
    ("corpus.frames_per_token_audio", "4"),
    ("corpus.frames_per_token_video", "2"),
    ("corpus.feature_dim_audio", "16"),
    ("corpus.feature_dim_video", "12"),
    ("corpus.noise_std_audio", "0.3"),
    ("corpus.noise_std_video", "0.4"),
    ("corpus.min_len", "3"),
    ("corpus.max_len", "8"),
    ("corpus.n_utterances", "240"),
    // Model shape for fresh builds (checkpoint-loading commands take the
    // shape from the checkpoint instead).
    ("model.d_model", "64"),
    ("model.n_heads", "4"),
    ("model.d_ffn", "128"),
    ("model.n_audio_blocks", "2"),
    ("model.n_video_blocks", "2"),
    ("model.n_fusion_blocks", "1"),
    ("model.n_joint_blocks", "2"),
    ("model.n_decoder_blocks", "2"),
    ("model.max_len", "128"),
    ("model.intermediate_ctc_taps", "1,2"),
    ("model.disable_audio_to_video", "false"),
    // Training loop.
    ("train.epochs", "10"),
    ("train.batch_size", "16"),
    ("train.learning_rate", "5e-3"),
    ("train.warmup_steps", "30"),
    ("train.val_fraction", "0.1"),
    ("train.dropout_rate", "0.3"),
    ("train.lambda", "0.7"),
    ("train.w_kd", "0.5"),
    ("train.temperature", "1.0"),
    ("train.augment", "false"),
    ("train.adapter_rank", "4"),
    ("train.adapter_insert", "encoder"),
    // Decoding and evaluation suites.
    ("eval.decode_mode", "ctc_greedy"),
    ("eval.beam_width", "4"),
    ("eval.max_decode_len", "24"),
];

/// Resolved configuration: defaults, overlaid by a config file, overlaid by
/// dotted-key command-line overrides.
#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

impl RunConfig {
    pub fn defaults() -> Self {
        RunConfig {
            values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    /// Parse one `key = value` body (config file or sidecar) over the
    /// current values.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "{origin}:{}: expected 'key = value', got '{line}'",
                    lineno + 1
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !known(key) {
            return Err(Error::config(format!("unknown configuration key '{key}'")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Full sorted `key = value` rendering; parses back into this config.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    fn raw(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::config(format!("unknown configuration key '{key}'")))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        let v = self.raw(key)?;
        v.parse()
            .map_err(|_| Error::config(format!("{key}: expected a nonnegative integer, got '{v}'")))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        let v = self.raw(key)?;
        v.parse()
            .map_err(|_| Error::config(format!("{key}: expected a nonnegative integer, got '{v}'")))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        let v = self.raw(key)?;
        v.parse()
            .map_err(|_| Error::config(format!("{key}: expected a number, got '{v}'")))
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.raw(key)? {
            "true" => Ok(true),
            "false" => Ok(false),
            v => Err(Error::config(format!("{key}: expected true or false, got '{v}'"))),
        }
    }

    pub fn str(&self, key: &str) -> Result<&str> {
        self.raw(key)
    }

    /// Comma-separated positive integers ("1,2").
    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        let v = self.raw(key)?;
        v.split(',')
            .map(|s| {
                s.trim().parse().map_err(|_| {
                    Error::config(format!("{key}: expected comma-separated integers, got '{v}'"))
                })
            })
            .collect()
    }
}

/// Split dotted-key overrides out of the raw argument list before clap sees
/// it. `--train.epochs 12` and `--train.epochs=12` both work; an unknown
/// dotted key is a config error rather than a clap usage error so that the
/// message names the key.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match body.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (body, None),
        };
        if !name.contains('.') {
            rest.push(arg);
            continue;
        }
        if !known(name) {
            return Err(Error::config(format!("unknown configuration key '{name}'")));
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| {
                Error::config(format!("configuration override --{name} needs a value"))
            })?,
        };
        overrides.push((name.to_string(), value));
    }
    Ok((rest, overrides))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_cover_every_key_and_render_round_trips() {
        let cfg = RunConfig::defaults();
        let text = cfg.render();
        let mut again = RunConfig::defaults();
        again.apply_text(&text, "rendered").unwrap();
        assert_eq!(again.render(), text);
        assert_eq!(text.lines().count(), KEYS.len());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::defaults();
        let err = cfg.apply_text("train.optimizer = sgd\n", "t").unwrap_err();
        assert!(err.to_string().contains("unknown configuration key"));
        assert!(cfg.set("corpus.bogus", "1").is_err());
    }

    #[test]
    fn override_extraction_splits_and_validates() {
        let args: Vec<String> = ["mblab", "train", "--train.epochs", "12", "--seed", "7", "--train.lambda=0.5"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let (rest, ovr) = extract_overrides(args).unwrap();
        assert_eq!(rest, vec!["mblab", "train", "--seed", "7"]);
        assert_eq!(
            ovr,
            vec![
                ("train.epochs".to_string(), "12".to_string()),
                ("train.lambda".to_string(), "0.5".to_string())
            ]
        );
        let bad: Vec<String> = ["mblab", "--nope.key", "1"].iter().map(|s| s.to_string()).collect();
        assert!(extract_overrides(bad).is_err());
    }

    #[test]
    fn typed_getters_report_bad_values() {
        let mut cfg = RunConfig::defaults();
        cfg.set("train.epochs", "many").unwrap();
        assert!(cfg.usize("train.epochs").is_err());
        cfg.set("model.intermediate_ctc_taps", "1, 2").unwrap();
        assert_eq!(cfg.usize_list("model.intermediate_ctc_taps").unwrap(), vec![1, 2]);
        cfg.set("train.augment", "yes").unwrap();
        assert!(cfg.bool("train.augment").is_err());
    }
}
