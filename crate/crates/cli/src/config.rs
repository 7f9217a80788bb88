//! Flat key=value configuration with section prefixes, resolved from (in
//! increasing precedence) defaults, a config file, `BHASHA_*` environment
//! variables, and `--set key=value` flags.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};

/// Every key the toolkit understands, with its default value as a string.
/// Unknown keys are rejected up front so typos fail loudly.
pub const KNOWN_KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("threads", "0"), // 0 = all cores
    ("pipeline.min_words", "20"),
    ("pipeline.max_word_chars", "100"),
    ("pipeline.hindi_sentence_frac", "0.5"),
    ("pipeline.hindi_char_frac", "0.7"),
    ("pipeline.symbol_frac", "0.2"),
    ("pipeline.sentence_hindi_frac", "0.5"),
    ("pipeline.repeat_threshold", "3"),
    ("pipeline.boilerplate_frac", "0.5"),
    ("pipeline.boilerplate_min_chars", "15"),
    ("pipeline.boilerplate_index", "true"),
    ("dedup.shingle_size", "5"),
    ("dedup.num_perms", "128"),
    ("dedup.bands", "16"),
    ("dedup.rows_per_band", "8"),
    ("dedup.similarity_threshold", "0.8"),
    ("dedup.seed", "1592513733"),
    ("tokenizer.target_vocab", "32000"),
    ("tokenizer.extension_count", "1000"),
    ("embed.top_k", "5"),
    ("embed.noise_seed", "0"),
    ("expand.period", "4"),
    ("mix.ratio_a", "1"),
    ("mix.ratio_b", "1"),
    ("pack.context_length", "8192"),
    ("pack.eot_id", "0"),
    ("sft.oversample_factor", "3"),
    ("sft.control_base_id", "0"), // 0 = first id after the vocabulary
    ("eval.norm", "per-byte"),
    ("verify.tolerance", "1e-5"),
    ("verify.probes", "20"),
    ("verify.probe_len", "16"),
];

pub const ENV_PREFIX: &str = "BHASHA_";

/// Resolved configuration: every known key has a value, and the manifest
/// records all of them.
#[derive(Debug, Clone)]
pub struct Config {
    values: BTreeMap<String, String>,
}

fn check_known(key: &str) -> Result<()> {
    if KNOWN_KEYS.iter().any(|(k, _)| *k == key) {
        return Ok(());
    }
    let valid: Vec<&str> = KNOWN_KEYS.iter().map(|(k, _)| *k).collect();
    bail!("unknown config key {key:?}; valid keys: {}", valid.join(", "));
}

/// Environment variable name for a config key: `pipeline.min_words` →
/// `BHASHA_PIPELINE_MIN_WORDS`.
pub fn env_var_for(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.replace('.', "_").to_uppercase())
}

impl Config {
    pub fn resolve(file: Option<&Path>, sets: &[String]) -> Result<Config> {
        let mut values: BTreeMap<String, String> = KNOWN_KEYS
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config file {}", path.display()))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').with_context(|| {
                    format!("{}:{}: expected key=value", path.display(), lineno + 1)
                })?;
                let k = k.trim();
                check_known(k)?;
                values.insert(k.to_string(), v.trim().to_string());
            }
        }
        for (key, _) in KNOWN_KEYS {
            if let Ok(v) = std::env::var(env_var_for(key)) {
                values.insert(key.to_string(), v);
            }
        }
        for set in sets {
            let (k, v) = set
                .split_once('=')
                .with_context(|| format!("--set {set:?}: expected key=value"))?;
            check_known(k)?;
            values.insert(k.to_string(), v.to_string());
        }
        Ok(Config { values })
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn str(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("unregistered config key {key}"))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.str(key)
            .parse()
            .with_context(|| format!("config key {key} is not an unsigned integer"))
    }

    pub fn u32(&self, key: &str) -> Result<u32> {
        self.str(key)
            .parse()
            .with_context(|| format!("config key {key} is not a 32-bit id"))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.str(key)
            .parse()
            .with_context(|| format!("config key {key} is not an unsigned integer"))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.str(key)
            .parse()
            .with_context(|| format!("config key {key} is not a number"))
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.str(key)
            .parse()
            .with_context(|| format!("config key {key} is not true/false"))
    }
}
