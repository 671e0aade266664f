//! Flat `name = value` documents used for parameter and configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Values are numbers,
//! simple fractions such as `1/15`, or the literals `true`/`false`.

use std::collections::BTreeMap;

use crate::error::ParamsError;

#[derive(Debug, Clone, Default)]
pub struct KvDocument {
    entries: BTreeMap<String, (usize, String)>,
}

impl KvDocument {
    pub fn parse(text: &str) -> Result<Self, ParamsError> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(ParamsError::Syntax { line: idx + 1 })?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() || value.is_empty() {
                return Err(ParamsError::Syntax { line: idx + 1 });
            }
            if entries
                .insert(key.to_string(), (idx + 1, value.to_string()))
                .is_some()
            {
                return Err(ParamsError::DuplicateKey(key.to_string()));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ParamsError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ParamsError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Rejects any key not in `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), ParamsError> {
        match self.entries.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(ParamsError::UnknownKey(k.clone())),
            None => Ok(()),
        }
    }

    pub fn f64(&self, key: &str) -> Result<Option<f64>, ParamsError> {
        let Some((line, value)) = self.entries.get(key) else {
            return Ok(None);
        };
        parse_number(value)
            .map(Some)
            .ok_or_else(|| ParamsError::BadValue {
                line: *line,
                key: key.to_string(),
                value: value.clone(),
            })
    }

    pub fn required_f64(&self, key: &str) -> Result<f64, ParamsError> {
        self.f64(key)?
            .ok_or_else(|| ParamsError::MissingKey(key.to_string()))
    }

    /// A positive limit, or `off`/`none` to disable it. Absent keys keep `default`.
    pub fn optional_limit(
        &self,
        key: &str,
        default: Option<f64>,
    ) -> Result<Option<f64>, ParamsError> {
        match self.entries.get(key) {
            None => Ok(default),
            Some((_, value)) if matches!(value.as_str(), "off" | "none") => Ok(None),
            Some(_) => self.f64(key),
        }
    }

    pub fn bool(&self, key: &str) -> Result<Option<bool>, ParamsError> {
        let Some((line, value)) = self.entries.get(key) else {
            return Ok(None);
        };
        match value.as_str() {
            "true" | "1" => Ok(Some(true)),
            "false" | "0" => Ok(Some(false)),
            _ => Err(ParamsError::BadValue {
                line: *line,
                key: key.to_string(),
                value: value.clone(),
            }),
        }
    }
}

fn parse_number(value: &str) -> Option<f64> {
    let parsed = match value.split_once('/') {
        Some((num, den)) => {
            let num: f64 = num.trim().parse().ok()?;
            let den: f64 = den.trim().parse().ok()?;
            num / den
        }
        None => value.parse().ok()?,
    };
    parsed.is_finite().then_some(parsed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_numbers_fractions_and_comments() {
        let doc = KvDocument::parse("# header\n m = 1800\nratio = 1/15\n\nflag = true\n").unwrap();
        assert_eq!(doc.f64("m").unwrap(), Some(1800.0));
        assert_eq!(doc.f64("ratio").unwrap(), Some(1.0 / 15.0));
        assert_eq!(doc.bool("flag").unwrap(), Some(true));
        assert_eq!(doc.f64("absent").unwrap(), None);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert_eq!(
            KvDocument::parse("m 1800").unwrap_err(),
            ParamsError::Syntax { line: 1 }
        );
        assert!(matches!(
            KvDocument::parse("m = 1\nm = 2").unwrap_err(),
            ParamsError::DuplicateKey(_)
        ));
        let doc = KvDocument::parse("m = heavy").unwrap();
        assert!(matches!(doc.f64("m"), Err(ParamsError::BadValue { .. })));
        let doc = KvDocument::parse("m = 1/0").unwrap();
        assert!(doc.f64("m").is_err());
    }

    #[test]
    fn unknown_keys_are_reported() {
        let doc = KvDocument::parse("m = 1\nwat = 2").unwrap();
        assert_eq!(
            doc.check_keys(&["m"]).unwrap_err(),
            ParamsError::UnknownKey("wat".into())
        );
    }
}
