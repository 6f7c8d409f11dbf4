use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default class names in id order; id 0 is background.
pub const DEFAULT_CLASS_NAMES: [&str; 9] = [
    "background",
    "crack",
    "cornerfracture",
    "seambroken",
    "patch",
    "repair",
    "slab",
    "track",
    "light",
];

pub const CRACK: u8 = 1;
pub const CORNER_FRACTURE: u8 = 2;
pub const SEAM_BROKEN: u8 = 3;
pub const PATCH: u8 = 4;
pub const REPAIR: u8 = 5;
pub const SLAB: u8 = 6;
pub const TRACK: u8 = 7;
pub const LIGHT: u8 = 8;

/// The label space: ids `0..C` with names.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTaxonomy {
    names: Vec<String>,
    background_id: u8,
}

impl Default for ClassTaxonomy {
    fn default() -> Self {
        Self {
            names: DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            background_id: 0,
        }
    }
}

impl ClassTaxonomy {
    /// Builds a taxonomy from `(id, name)` pairs, which must cover `0..C` exactly once.
    pub fn new(classes: Vec<(u8, String)>, background_id: u8) -> Result<Self> {
        let c = classes.len();
        if c == 0 || c > 256 {
            return Err(Error::Validation(format!("taxonomy must have 1..=256 classes, got {c}")));
        }
        let mut names = vec![None; c];
        for (id, name) in classes {
            let slot = names
                .get_mut(id as usize)
                .ok_or_else(|| Error::Validation(format!("class id {id} outside 0..{c}")))?;
            if slot.is_some() {
                return Err(Error::Validation(format!("duplicate class id {id}")));
            }
            *slot = Some(name);
        }
        if background_id as usize >= c {
            return Err(Error::Validation(format!("background id {background_id} outside 0..{c}")));
        }
        Ok(Self {
            names: names.into_iter().map(Option::unwrap).collect(),
            background_id,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn background_id(&self) -> u8 {
        self.background_id
    }

    pub fn name(&self, id: u8) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn is_valid(&self, id: u8) -> bool {
        (id as usize) < self.names.len()
    }

    pub fn classes(&self) -> impl Iterator<Item = (u8, &str)> {
        self.names.iter().enumerate().map(|(i, n)| (i as u8, n.as_str()))
    }

    /// Ids of all classes other than background, ascending.
    pub fn foreground_ids(&self) -> Vec<u8> {
        self.classes()
            .map(|(id, _)| id)
            .filter(|&id| id != self.background_id)
            .collect()
    }

    /// `id name` per line; the first line carries the background id.
    pub fn to_text(&self) -> String {
        let mut s = format!("# background {}\n", self.background_id);
        for (id, name) in self.classes() {
            let _ = writeln!(s, "{id} {name}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut background = 0u8;
        let mut classes = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("background") {
                    background = v.trim().parse().map_err(|_| {
                        Error::Load(format!("taxonomy line {}: bad background id", lineno + 1))
                    })?;
                }
                continue;
            }
            let (id, name) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| Error::Load(format!("taxonomy line {}: expected `id name`", lineno + 1)))?;
            let id: u8 = id
                .parse()
                .map_err(|_| Error::Load(format!("taxonomy line {}: bad id `{id}`", lineno + 1)))?;
            classes.push((id, name.trim().to_string()));
        }
        Self::new(classes, background)
    }
}
