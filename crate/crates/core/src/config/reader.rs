use super::yaml::Value;
use crate::error::{Error, Result};

/// Typed, path-aware view of one YAML map. Every key must be consumed before
/// [`Section::finish`], otherwise it is reported as unknown.
pub struct Section<'a> {
    path: String,
    entries: &'a [(String, Value)],
    used: Vec<bool>,
}

static EMPTY: [(String, Value); 0] = [];

impl<'a> Section<'a> {
    pub fn new(path: &str, value: Option<&'a Value>) -> Result<Self> {
        let entries: &'a [(String, Value)] = match value {
            None | Some(Value::Null) => &EMPTY,
            Some(Value::Map(m)) => m,
            Some(other) => return Err(Error::config(path, format!("expected a map, found {}", other.type_name()))),
        };
        Ok(Section {
            path: path.to_string(),
            entries,
            used: vec![false; entries.len()],
        })
    }

    pub fn key_path(&self, key: &str) -> String {
        if self.path.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.path)
        }
    }

    fn take(&mut self, key: &str) -> Option<&'a Value> {
        let i = self.entries.iter().position(|(k, _)| k == key)?;
        self.used[i] = true;
        match &self.entries[i].1 {
            Value::Null => None,
            v => Some(v),
        }
    }

    fn type_err(&self, key: &str, expected: &str, v: &Value) -> Error {
        Error::config(self.key_path(key), format!("expected {expected}, found {}", v.type_name()))
    }

    pub fn section(&mut self, key: &str) -> Result<Section<'a>> {
        let v = self.take(key);
        Section::new(&self.key_path(key), v)
    }

    /// Raw value of a nested section, marked as consumed.
    pub fn section_value(&mut self, key: &str) -> Value {
        self.take(key).cloned().unwrap_or(Value::Null)
    }

    pub fn opt_f64(&mut self, key: &str) -> Result<Option<f64>> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Int(i)) => Ok(Some(*i as f64)),
            Some(Value::Float(f)) => Ok(Some(*f)),
            Some(v) => Err(self.type_err(key, "a number", v)),
        }
    }

    pub fn f64(&mut self, key: &str, default: f64) -> Result<f64> {
        Ok(self.opt_f64(key)?.unwrap_or(default))
    }

    /// A number constrained to `[lo, hi]`.
    pub fn f64_in(&mut self, key: &str, default: f64, lo: f64, hi: f64) -> Result<f64> {
        let v = self.f64(key, default)?;
        if !(lo..=hi).contains(&v) {
            return Err(Error::config(self.key_path(key), format!("{v} is outside [{lo}, {hi}]")));
        }
        Ok(v)
    }

    pub fn opt_usize(&mut self, key: &str) -> Result<Option<usize>> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Int(i)) if *i >= 0 => Ok(Some(*i as usize)),
            Some(v) => Err(self.type_err(key, "a non-negative integer", v)),
        }
    }

    pub fn usize(&mut self, key: &str, default: usize) -> Result<usize> {
        Ok(self.opt_usize(key)?.unwrap_or(default))
    }

    pub fn positive(&mut self, key: &str, default: usize) -> Result<usize> {
        let v = self.usize(key, default)?;
        if v == 0 {
            return Err(Error::config(self.key_path(key), "must be positive"));
        }
        Ok(v)
    }

    pub fn u64(&mut self, key: &str, default: u64) -> Result<u64> {
        Ok(self.opt_usize(key)?.map(|v| v as u64).unwrap_or(default))
    }

    pub fn bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.take(key) {
            None => Ok(default),
            Some(Value::Bool(b)) => Ok(*b),
            Some(v) => Err(self.type_err(key, "true or false", v)),
        }
    }

    pub fn opt_str(&mut self, key: &str) -> Result<Option<String>> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Str(s)) => Ok(Some(s.clone())),
            Some(Value::Int(i)) => Ok(Some(i.to_string())),
            Some(v) => Err(self.type_err(key, "a string", v)),
        }
    }

    pub fn str(&mut self, key: &str, default: &str) -> Result<String> {
        Ok(self.opt_str(key)?.unwrap_or_else(|| default.to_string()))
    }

    pub fn required_str(&mut self, key: &str) -> Result<String> {
        self.opt_str(key)?
            .ok_or_else(|| Error::config(self.key_path(key), "required value is missing"))
    }

    /// Parses a string value with `FromStr`, reporting failures at the key.
    pub fn parsed<T: std::str::FromStr<Err = String>>(&mut self, key: &str, default: &str) -> Result<T> {
        let s = self.str(key, default)?;
        s.parse().map_err(|e: String| Error::config(self.key_path(key), e))
    }

    pub fn opt_str_list(&mut self, key: &str) -> Result<Option<Vec<String>>> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::List(items)) => items
                .iter()
                .map(|v| match v {
                    Value::Str(s) => Ok(s.clone()),
                    other => Err(self.type_err(key, "a list of strings", other)),
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
            Some(v) => Err(self.type_err(key, "a list", v)),
        }
    }

    /// Fails on any key that was never read.
    pub fn finish(self) -> Result<()> {
        for ((k, _), used) in self.entries.iter().zip(&self.used) {
            if !used {
                return Err(Error::config(self.key_path(k), "unknown key"));
            }
        }
        Ok(())
    }
}

/// Builder for the canonical (resolved) form of a config section.
#[derive(Default)]
pub struct MapBuilder(Vec<(String, Value)>);

impl MapBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(mut self, key: &str, v: impl Into<Value>) -> Self {
        self.0.push((key.to_string(), v.into()));
        self
    }

    pub fn put_opt<T: Into<Value>>(self, key: &str, v: Option<T>) -> Self {
        match v {
            Some(v) => self.put(key, v),
            None => self,
        }
    }

    pub fn build(self) -> Value {
        Value::Map(self.0)
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Float(v)
    }
}

impl From<usize> for Value {
    fn from(v: usize) -> Self {
        Value::Int(v as i64)
    }
}

impl From<u64> for Value {
    fn from(v: u64) -> Self {
        Value::Int(v as i64)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Str(v.to_string())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Str(v)
    }
}

impl From<Vec<String>> for Value {
    fn from(v: Vec<String>) -> Self {
        Value::List(v.into_iter().map(Value::Str).collect())
    }
}
