//! Flat `section.key = value` configuration files.
//!
//! The format is a plain UTF-8 text file: one assignment per line, `#` starts
//! a comment, blank lines are ignored. Lists are comma separated. Every key
//! must be consumed by the experiment that loads the file; leftovers are
//! reported as unknown keys with their line number.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::path::Path;

use thiserror::Error;

use rxsim::model::{Capacity, CostModel, Duration, Priority, Timestamp};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: expected `section.key = value`")]
    Syntax { line: usize },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { key: String, line: usize },
    #[error("{key}: {message}")]
    Value { key: String, message: String },
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("unknown key `{key}` (line {line})")]
    Unknown { key: String, line: usize },
}

pub struct ConfigFile {
    values: BTreeMap<String, (String, usize)>,
    used: std::cell::RefCell<BTreeSet<String>>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<ConfigFile, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        ConfigFile::parse(&text)
    }

    pub fn parse(text: &str) -> Result<ConfigFile, ConfigError> {
        let mut values = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let stripped = stripped.trim();
            if stripped.is_empty() {
                continue;
            }
            let (key, value) = stripped
                .split_once('=')
                .ok_or(ConfigError::Syntax { line })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() || !key.contains('.') {
                return Err(ConfigError::Syntax { line });
            }
            if values.contains_key(&key) {
                return Err(ConfigError::Duplicate { key, line });
            }
            values.insert(key, (value, line));
        }
        Ok(ConfigFile {
            values,
            used: std::cell::RefCell::new(BTreeSet::new()),
        })
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().insert(key.to_string());
        self.values.get(key).map(|(v, _)| v.as_str())
    }

    /// Keys matching `prefix.N.` for consecutive N starting at 0.
    pub fn indexed_sections(&self, prefix: &str) -> Vec<usize> {
        let mut indices = BTreeSet::new();
        for key in self.values.keys() {
            if let Some(rest) = key.strip_prefix(prefix) {
                if let Some(rest) = rest.strip_prefix('.') {
                    if let Some((n, _)) = rest.split_once('.') {
                        if let Ok(n) = n.parse::<usize>() {
                            indices.insert(n);
                        }
                    }
                }
            }
        }
        indices.into_iter().collect()
    }

    pub fn has(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    fn parse_with<T>(
        &self,
        key: &str,
        what: &str,
        parse: impl Fn(&str) -> Option<T>,
    ) -> Result<Option<T>, ConfigError> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => parse(v).map(Some).ok_or_else(|| ConfigError::Value {
                key: key.to_string(),
                message: format!("`{v}` is not a valid {what}"),
            }),
        }
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>, ConfigError> {
        self.parse_with(key, "unsigned integer", |v| v.parse().ok())
    }

    pub fn get_u64_or(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        Ok(self.get_u64(key)?.unwrap_or(default))
    }

    pub fn get_u32_or(&self, key: &str, default: u32) -> Result<u32, ConfigError> {
        self.parse_with(key, "unsigned integer", |v| v.parse().ok())
            .map(|v| v.unwrap_or(default))
    }

    pub fn get_u16(&self, key: &str) -> Result<Option<u16>, ConfigError> {
        self.parse_with(key, "port number", |v| v.parse().ok())
    }

    pub fn require_u16(&self, key: &str) -> Result<u16, ConfigError> {
        self.get_u16(key)?
            .ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    pub fn get_bool_or(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        self.parse_with(key, "boolean (true/false/on/off)", |v| {
            match v.to_ascii_lowercase().as_str() {
                "true" | "on" | "yes" | "1" => Some(true),
                "false" | "off" | "no" | "0" => Some(false),
                _ => None,
            }
        })
        .map(|v| v.unwrap_or(default))
    }

    pub fn get_string(&self, key: &str) -> Option<String> {
        self.raw(key).map(|s| s.to_string())
    }

    pub fn get_priority(&self, key: &str) -> Result<Option<Priority>, ConfigError> {
        self.parse_with(key, "priority level", |v| v.parse::<u8>().ok().map(Priority))
    }

    pub fn get_priority_or(&self, key: &str, default: Priority) -> Result<Priority, ConfigError> {
        Ok(self.get_priority(key)?.unwrap_or(default))
    }

    /// Duration given by a unit-suffixed key (`_ns`, `_us`, `_ms`, `_s`).
    pub fn get_duration(&self, key: &str) -> Result<Option<Duration>, ConfigError> {
        let factor = if key.ends_with("_ns") {
            1
        } else if key.ends_with("_us") {
            1_000
        } else if key.ends_with("_ms") {
            1_000_000
        } else if key.ends_with("_s") {
            1_000_000_000
        } else {
            return Err(ConfigError::Value {
                key: key.to_string(),
                message: "duration keys must end in _ns/_us/_ms/_s".into(),
            });
        };
        Ok(self.get_u64(key)?.map(|v| Duration(v * factor)))
    }

    pub fn get_duration_or(
        &self,
        key: &str,
        default: Duration,
    ) -> Result<Duration, ConfigError> {
        Ok(self.get_duration(key)?.unwrap_or(default))
    }

    /// Admission capacity: `unbounded` or a packet count per period.
    pub fn get_capacity_or(
        &self,
        key: &str,
        default: Capacity,
    ) -> Result<Capacity, ConfigError> {
        self.parse_with(key, "capacity (`unbounded` or packets per period)", |v| {
            if v.eq_ignore_ascii_case("unbounded") {
                Some(Capacity::Unbounded)
            } else {
                v.parse().ok().map(Capacity::PerPeriod)
            }
        })
        .map(|v| v.unwrap_or(default))
    }

    /// Rational fraction `num/den`.
    pub fn get_fraction_or(
        &self,
        key: &str,
        default: (u32, u32),
    ) -> Result<(u32, u32), ConfigError> {
        self.parse_with(key, "fraction like 1/2", |v| {
            let (num, den) = v.split_once('/')?;
            Some((num.trim().parse().ok()?, den.trim().parse().ok()?))
        })
        .map(|v| v.unwrap_or(default))
    }

    pub fn get_u64_list(&self, key: &str) -> Result<Option<Vec<u64>>, ConfigError> {
        self.parse_with(key, "comma-separated list of unsigned integers", |v| {
            v.split(',')
                .map(|item| item.trim().parse::<u64>().ok())
                .collect::<Option<Vec<u64>>>()
                .filter(|list| !list.is_empty())
        })
    }

    /// Fail on any key the caller never consumed.
    pub fn finish(&self) -> Result<(), ConfigError> {
        let used = self.used.borrow();
        for (key, (_, line)) in &self.values {
            if !used.contains(key) {
                return Err(ConfigError::Unknown {
                    key: key.clone(),
                    line: *line,
                });
            }
        }
        Ok(())
    }

    /// Apply `cost.*` overrides onto the default cost model.
    pub fn cost_model(&self) -> Result<CostModel, ConfigError> {
        let mut cost = CostModel::default();
        let fields: [(&str, &mut Duration); 10] = [
            ("cost.isr_regular_ns", &mut cost.isr_regular),
            ("cost.isr_shortcircuit_ns", &mut cost.isr_shortcircuit),
            ("cost.isr_prio_raise_ns", &mut cost.isr_prio_raise),
            ("cost.isr_recycle_raise_ns", &mut cost.isr_recycle_raise),
            ("cost.isr_mitigating_ns", &mut cost.isr_mitigating),
            (
                "cost.isr_eager_cache_extra_ns",
                &mut cost.isr_eager_cache_extra,
            ),
            ("cost.proto_processing_ns", &mut cost.proto_processing),
            ("cost.baseline_full_ns", &mut cost.baseline_full),
            (
                "cost.poll_batch_per_packet_ns",
                &mut cost.poll_batch_per_packet,
            ),
            ("cost.poll_fixed_overhead_ns", &mut cost.poll_fixed_overhead),
        ];
        for (key, slot) in fields {
            if let Some(d) = self.get_duration(key)? {
                *slot = d;
            }
        }
        Ok(cost)
    }

    pub fn timestamp_or(
        &self,
        key: &str,
        default: Timestamp,
    ) -> Result<Timestamp, ConfigError> {
        Ok(self
            .get_duration(key)?
            .map(|d| Timestamp(d.nanos()))
            .unwrap_or(default))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_comments_and_lists() {
        let cfg = ConfigFile::parse(
            "# header\nexperiment.kind = simulate\nsweep.rates = 1, 2,3 # inline\n\n",
        )
        .unwrap();
        assert_eq!(cfg.get_string("experiment.kind").unwrap(), "simulate");
        assert_eq!(cfg.get_u64_list("sweep.rates").unwrap().unwrap(), vec![1, 2, 3]);
        cfg.finish().unwrap();
    }

    #[test]
    fn rejects_bad_syntax_and_duplicates() {
        assert!(matches!(
            ConfigFile::parse("no equals sign"),
            Err(ConfigError::Syntax { line: 1 })
        ));
        assert!(matches!(
            ConfigFile::parse("a.b = 1\na.b = 2"),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
    }

    #[test]
    fn value_errors_name_the_key() {
        let cfg = ConfigFile::parse("sweep.rates = -5").unwrap();
        let err = cfg.get_u64_list("sweep.rates").unwrap_err();
        assert!(err.to_string().contains("sweep.rates"));
    }

    #[test]
    fn unknown_keys_are_reported() {
        let cfg = ConfigFile::parse("experiment.kind = simulate\nmystery.key = 1").unwrap();
        let _ = cfg.get_string("experiment.kind");
        let err = cfg.finish().unwrap_err();
        assert!(err.to_string().contains("mystery.key"));
    }

    #[test]
    fn duration_units_scale() {
        let cfg = ConfigFile::parse("a.x_us = 2\nb.y_ms = 3").unwrap();
        assert_eq!(cfg.get_duration("a.x_us").unwrap(), Some(Duration(2_000)));
        assert_eq!(cfg.get_duration("b.y_ms").unwrap(), Some(Duration(3_000_000)));
    }

    #[test]
    fn fraction_and_capacity_forms() {
        let cfg = ConfigFile::parse("r.t = 1/4\nf.c = unbounded\ng.c = 3").unwrap();
        assert_eq!(cfg.get_fraction_or("r.t", (1, 2)).unwrap(), (1, 4));
        assert_eq!(
            cfg.get_capacity_or("f.c", Capacity::PerPeriod(1)).unwrap(),
            Capacity::Unbounded
        );
        assert_eq!(
            cfg.get_capacity_or("g.c", Capacity::Unbounded).unwrap(),
            Capacity::PerPeriod(3)
        );
    }
}
