//! Bilingual token inventory with CTC blank and the two mask symbols.
//!
//! Ids are dense from 0: `0 = <blank>`, `1 = <mask_A>` (stands in for a
//! language-A token inside the B-side target), `2 = <mask_B>`, then the
//! language-A and language-B tokens.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const BLANK: usize = 0;
pub const MASK_A: usize = 1;
pub const MASK_B: usize = 2;
pub const NUM_SPECIALS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Lang {
    A,
    B,
}

impl Lang {
    pub fn other(self) -> Lang {
        match self {
            Lang::A => Lang::B,
            Lang::B => Lang::A,
        }
    }

    /// Mask symbol that replaces tokens of this language in the other side's target.
    pub fn mask(self) -> usize {
        match self {
            Lang::A => MASK_A,
            Lang::B => MASK_B,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Lang::A => 0,
            Lang::B => 1,
        }
    }
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Lang::A => "A",
            Lang::B => "B",
        })
    }
}

impl FromStr for Lang {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(Lang::A),
            "B" => Ok(Lang::B),
            _ => Err(Error::Data(format!("unknown language tag {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tag {
    Special,
    Lang(Lang),
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::Special => f.write_str("special"),
            Tag::Lang(l) => l.fmt(f),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    tags: Vec<Tag>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Specials followed by `a00..` and `b00..` surfaces.
    pub fn synthetic(n_a: usize, n_b: usize) -> Self {
        let mut entries = vec![
            ("<blank>".to_string(), Tag::Special),
            ("<mask_A>".to_string(), Tag::Special),
            ("<mask_B>".to_string(), Tag::Special),
        ];
        entries.extend((0..n_a).map(|i| (format!("a{i:02}"), Tag::Lang(Lang::A))));
        entries.extend((0..n_b).map(|i| (format!("b{i:02}"), Tag::Lang(Lang::B))));
        Self::from_entries(entries).expect("synthetic inventory is valid")
    }

    fn from_entries(entries: Vec<(String, Tag)>) -> Result<Self> {
        if entries.len() < NUM_SPECIALS {
            return Err(Error::Data("vocabulary needs the three special tokens".into()));
        }
        for (i, (_, tag)) in entries.iter().enumerate() {
            let special = i < NUM_SPECIALS;
            if special != (*tag == Tag::Special) {
                return Err(Error::Data(format!(
                    "id {i} must be {}",
                    if special { "special" } else { "a language token" }
                )));
            }
        }
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (tok, _)) in entries.iter().enumerate() {
            if index.insert(tok.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate token surface {tok:?}")));
            }
        }
        let (tokens, tags) = entries.into_iter().unzip();
        Ok(Vocabulary { tokens, tags, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tag(&self, id: usize) -> Option<Tag> {
        self.tags.get(id).copied()
    }

    pub fn lang(&self, id: usize) -> Option<Lang> {
        match self.tag(id)? {
            Tag::Lang(l) => Some(l),
            Tag::Special => None,
        }
    }

    pub fn surface(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or("<oov>")
    }

    pub fn id(&self, surface: &str) -> Option<usize> {
        self.index.get(surface).copied()
    }

    pub fn lang_ids(&self, lang: Lang) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.lang(i) == Some(lang)).collect()
    }

    pub fn to_tsv(&self) -> String {
        self.tokens
            .iter()
            .zip(&self.tags)
            .enumerate()
            .map(|(i, (t, g))| format!("{i}\t{t}\t{g}\n"))
            .collect()
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [id, surface, tag] = fields.as_slice() else {
                return Err(Error::Data(format!("vocabulary line {}: expected 3 fields", lineno + 1)));
            };
            let id: usize = id
                .parse()
                .map_err(|_| Error::Data(format!("vocabulary line {}: bad id {id:?}", lineno + 1)))?;
            if id != entries.len() {
                return Err(Error::Data(format!(
                    "vocabulary line {}: ids must be dense and ordered, expected {}",
                    lineno + 1,
                    entries.len()
                )));
            }
            let tag = match *tag {
                "special" => Tag::Special,
                other => Tag::Lang(other.parse()?),
            };
            entries.push((surface.to_string(), tag));
        }
        Self::from_entries(entries)
    }

    /// SHA-256 of the TSV serialization.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_tsv().as_bytes()).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_partition() {
        let v = Vocabulary::synthetic(3, 2);
        assert_eq!(v.len(), 8);
        assert_eq!(v.tag(BLANK), Some(Tag::Special));
        assert_eq!(v.lang_ids(Lang::A), vec![3, 4, 5]);
        assert_eq!(v.lang_ids(Lang::B), vec![6, 7]);
        assert_eq!(v.surface(MASK_A), "<mask_A>");
        assert_eq!(v.id("b01"), Some(7));
        assert_eq!(Lang::A.mask(), MASK_A);
    }

    #[test]
    fn tsv_round_trip_and_validation() {
        let v = Vocabulary::synthetic(2, 2);
        let text = v.to_tsv();
        assert!(text.starts_with("0\t<blank>\tspecial\n1\t<mask_A>\tspecial\n"));
        assert_eq!(Vocabulary::from_tsv(&text).unwrap(), v);
        assert!(Vocabulary::from_tsv("0\t<blank>\tspecial\n2\tx\tA\n").is_err());
        assert!(Vocabulary::from_tsv("0\t<blank>\tspecial\n1\tm\tspecial\n2\tn\tA\n").is_err());
        assert!(Vocabulary::from_tsv("0\t<blank>\tspecial\n1\tm\tspecial\n2\tn\tspecial\n3\tq\tC\n").is_err());
    }
}
