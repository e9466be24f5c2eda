//! Model files: a weight container followed by a text metadata trailer and
//! the trailer's byte length as a little-endian `u64`.

use std::collections::BTreeMap;
use std::path::Path;

use super::Model;
use crate::autodiff::{container, Params, Tensor};
use crate::{Error, Result};

const STATE_PREFIX: &str = "state/";

impl Model {
    pub fn to_bytes(&self) -> Vec<u8> {
        let state_names: Vec<String> = self.state.iter().map(|(k, _)| format!("{STATE_PREFIX}{k}")).collect();
        let entries = self.params.iter().map(|(k, v)| (k.as_str(), v)).chain(
            state_names
                .iter()
                .map(String::as_str)
                .zip(self.state.iter().map(|(_, v)| v)),
        );
        let mut out = container::encode(entries);
        let mut trailer = String::new();
        for (k, v) in self.metadata() {
            trailer.push_str(&format!("{k} = {v}\n"));
        }
        out.extend_from_slice(trailer.as_bytes());
        out.extend_from_slice(&(trailer.len() as u64).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
        if bytes.len() < 8 {
            return Err(Error::Format("model file too short".into()));
        }
        let n = bytes.len();
        let trailer_len = u64::from_le_bytes(bytes[n - 8..].try_into().unwrap()) as usize;
        if trailer_len > n - 8 {
            return Err(Error::Format("metadata trailer length exceeds the file".into()));
        }
        let split = n - 8 - trailer_len;
        let trailer = std::str::from_utf8(&bytes[split..n - 8])
            .map_err(|_| Error::Format("metadata trailer is not UTF-8".into()))?;
        let mut kv = BTreeMap::new();
        for line in trailer.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Format(format!("bad metadata line `{line}`")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let mut params = Params::new();
        let mut state = Params::new();
        for (name, t) in container::decode(&bytes[..split])? {
            match name.strip_prefix(STATE_PREFIX) {
                Some(s) => state.insert(s, t),
                None => params.insert(name, t),
            }
        }
        Model::from_parts(&kv, params, state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        Model::from_bytes(&std::fs::read(path)?)
    }

    /// Replaces the trainable tensors, keeping shapes.
    pub fn set_params(&mut self, params: Params) -> Result<()> {
        let same = params.len() == self.params.len()
            && params
                .iter()
                .zip(self.params.iter())
                .all(|((a, x), (b, y))| a == b && x.shape() == y.shape());
        if !same {
            return Err(Error::shape("replacement parameters do not match the model"));
        }
        self.params = params;
        Ok(())
    }

    /// The geography map, for grid models that use one.
    pub fn geography(&self) -> Option<&Tensor> {
        self.state.get("geography").ok()
    }
}
