//! Layered `key = value` settings: a config file first, then `--set` pairs,
//! then dedicated flags. Later entries win.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use cmfd_core::config::parse_kv_lines;

#[derive(Clone, Debug, Default)]
pub struct Settings {
    map: BTreeMap<String, String>,
}

impl Settings {
    pub fn load(config: Option<&Path>, sets: &[String], flags: Vec<(&str, Option<String>)>) -> Result<Self> {
        let mut s = Settings::default();
        if let Some(path) = config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            for (k, v) in parse_kv_lines(&text).with_context(|| format!("parsing {}", path.display()))? {
                s.insert(&k, &v);
            }
        }
        for kv in sets {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("--set expects KEY=VALUE, got `{kv}`");
            };
            s.insert(k.trim(), v.trim());
        }
        for (k, v) in flags {
            if let Some(v) = v {
                s.insert(k, &v);
            }
        }
        Ok(s)
    }

    fn insert(&mut self, k: &str, v: &str) {
        // flags spell keys with dashes
        self.map.insert(k.replace('-', "_"), v.to_string());
    }

    /// Remove and return a key.
    pub fn take(&mut self, k: &str) -> Option<String> {
        self.map.remove(k)
    }

    pub fn take_parsed<T: std::str::FromStr>(&mut self, k: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.take(k) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| anyhow::anyhow!("bad value `{v}` for `{k}`: {e}")),
        }
    }

    pub fn require(&mut self, k: &str) -> Result<String> {
        self.take(k).with_context(|| format!("missing required setting `{k}`"))
    }

    /// Drain every remaining key whose name satisfies `pred`.
    pub fn drain_matching(&mut self, pred: impl Fn(&str) -> bool) -> Vec<(String, String)> {
        let keys: Vec<String> = self.map.keys().filter(|k| pred(k)).cloned().collect();
        keys.into_iter().map(|k| {
            let v = self.map.remove(&k).unwrap();
            (k, v)
        }).collect()
    }

    /// Fail on anything nobody consumed.
    pub fn finish(self) -> Result<()> {
        if let Some(k) = self.map.keys().next() {
            bail!("unknown setting `{k}`");
        }
        Ok(())
    }
}

/// Keys routed to the model description rather than the training loop.
pub fn is_model_key(k: &str) -> bool {
    ["encoder.", "decoder.", "pcsd."].iter().any(|p| k.starts_with(p))
        || matches!(k, "image_height" | "image_width" | "image_size" | "model_seed")
}
