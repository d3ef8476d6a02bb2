//! Path-addressed parameter registry and checkpoint files.
//!
//! Checkpoint layout, repeated per parameter in path order:
//! `u32 LE path length`, path bytes (UTF-8), tensor in dump format. A zero
//! path length terminates the list; the rest of the file is the config text.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::autodiff::{Tape, Var};
use crate::error::{Result, VineError};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VineParams {
    map: BTreeMap<String, Tensor>,
}

impl VineParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor) {
        let path = path.into();
        assert!(!path.is_empty());
        let prev = self.map.insert(path.clone(), t);
        assert!(prev.is_none(), "duplicate parameter path {path}");
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.map.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.map.get_mut(path)
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Binds every parameter onto `tape`. Paths for which `trainable` returns
    /// false become constants and never receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .map
            .iter()
            .map(|(k, t)| {
                let v = if trainable(k) {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W, config_text: &str) -> Result<()> {
        for (path, t) in &self.map {
            let len = u32::try_from(path.len())
                .map_err(|_| VineError::InvalidArgument(format!("path too long: {path}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(path.as_bytes())?;
            t.write_dump(w)?;
        }
        w.write_all(&0u32.to_le_bytes())?;
        w.write_all(config_text.as_bytes())?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(Self, String)> {
        let bad = |msg: String| VineError::Format {
            what: "checkpoint",
            msg,
        };
        let mut params = Self::new();
        loop {
            let mut b4 = [0u8; 4];
            r.read_exact(&mut b4)?;
            let len = u32::from_le_bytes(b4) as usize;
            if len == 0 {
                break;
            }
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            let path = String::from_utf8(buf).map_err(|e| bad(e.to_string()))?;
            let t = Tensor::read_dump(r)?;
            if params.map.insert(path.clone(), t).is_some() {
                return Err(bad(format!("duplicate path {path}")));
            }
        }
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        Ok((params, text))
    }
}

/// Parameters bound onto a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, path: &str) -> Var {
        *self
            .vars
            .get(path)
            .unwrap_or_else(|| panic!("unknown parameter path {path}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}
