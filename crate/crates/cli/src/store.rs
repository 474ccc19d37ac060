//! Flat-file JSON store. Every entity lives in its own file, named by a
//! content hash.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use shiftflow::Result;

/// Hex id of the first 64 bits of `sha256(bytes)`.
pub fn content_id(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Collection {
    Scenarios,
    Jobs,
    Models,
    Summaries,
    Reports,
}

impl Collection {
    const ALL: [Collection; 5] = [Collection::Scenarios, Collection::Jobs, Collection::Models, Collection::Summaries, Collection::Reports];

    fn dir(self) -> &'static str {
        match self {
            Collection::Scenarios => "scenarios",
            Collection::Jobs => "jobs",
            Collection::Models => "models",
            Collection::Summaries => "summaries",
            Collection::Reports => "reports",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_hexdigit())
}

impl Store {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        for c in Collection::ALL {
            fs::create_dir_all(root.join(c.dir()))?;
        }
        Ok(Store { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, c: Collection, id: &str) -> PathBuf {
        self.root.join(c.dir()).join(format!("{id}.json"))
    }

    /// Raw file contents; `None` for unknown or malformed ids.
    pub fn get_raw(&self, c: Collection, id: &str) -> Result<Option<String>> {
        if !valid_id(id) {
            return Ok(None);
        }
        match fs::read_to_string(self.path(c, id)) {
            Ok(s) => Ok(Some(s)),
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn get<T: DeserializeOwned>(&self, c: Collection, id: &str) -> Result<Option<T>> {
        match self.get_raw(c, id)? {
            Some(s) => Ok(Some(serde_json::from_str(&s)?)),
            None => Ok(None),
        }
    }

    pub fn contains(&self, c: Collection, id: &str) -> bool {
        valid_id(id) && self.path(c, id).exists()
    }

    /// Writes through a temporary file and a rename, so readers never see a partial file.
    pub fn put_raw(&self, c: Collection, id: &str, text: &str) -> Result<()> {
        let path = self.path(c, id);
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, text)?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    pub fn put<T: Serialize>(&self, c: Collection, id: &str, value: &T) -> Result<()> {
        self.put_raw(c, id, &serde_json::to_string_pretty(value)?)
    }

    /// Stores `text` under its content id unless already present; returns the id.
    pub fn put_immutable(&self, c: Collection, text: &str) -> Result<String> {
        let id = content_id(text.as_bytes());
        if !self.contains(c, &id) {
            self.put_raw(c, &id, text)?;
        }
        Ok(id)
    }

    pub fn list<T: DeserializeOwned>(&self, c: Collection) -> Result<Vec<T>> {
        let mut names: Vec<PathBuf> = fs::read_dir(self.root.join(c.dir()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        names.retain(|p| p.extension().is_some_and(|e| e == "json"));
        names.sort();
        names.iter().map(|p| Ok(serde_json::from_str(&fs::read_to_string(p)?)?)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_stable_and_hex() {
        let a = content_id(b"abc");
        assert_eq!(a, "ba7816bf8f01cfea");
        assert!(valid_id(&a));
        assert!(!valid_id("../etc/passwd"));
    }

    #[test]
    fn immutable_puts_keep_the_first_copy() {
        let dir = tempfile::tempdir().unwrap();
        let s = Store::open(dir.path()).unwrap();
        let id = s.put_immutable(Collection::Models, "{\"a\":1}").unwrap();
        assert_eq!(s.put_immutable(Collection::Models, "{\"a\":1}").unwrap(), id);
        assert_eq!(s.get_raw(Collection::Models, &id).unwrap().unwrap(), "{\"a\":1}");
        assert!(s.get_raw(Collection::Models, "ffff").unwrap().is_none());
        assert!(s.get_raw(Collection::Models, "..").unwrap().is_none());
    }
}
