//! Closed word-level vocabulary with four reserved specials.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const SEP: u32 = 2;
pub const PAD: u32 = 3;

const SPECIALS: [&str; 4] = ["⟨bos⟩", "⟨eos⟩", "⟨sep⟩", "⟨pad⟩"];

/// Provenance of a position inside a [`TokenSequence`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Segment {
    Src,
    Tgt,
    Mono,
    Prompt,
    Special,
}

/// Token ids with the per-position loss mask and segment tags.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub loss_mask: Vec<u8>,
    pub segment: Vec<Segment>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, id: u32, mask: u8, segment: Segment) {
        self.ids.push(id);
        self.loss_mask.push(mask);
        self.segment.push(segment);
    }

    pub fn extend(&mut self, ids: &[u32], mask: u8, segment: Segment) {
        for &id in ids {
            self.push(id, mask, segment);
        }
    }

    pub fn supervised(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m == 1).count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    id_of: HashMap<String, u32>,
    surface_of: Vec<String>,
}

impl Vocab {
    /// Specials first, then every distinct word in lexicographic order.
    pub fn build<'a, I, S>(words: I) -> Vocab
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str> + 'a,
    {
        let distinct: BTreeSet<String> = words
            .into_iter()
            .flat_map(|s| {
                s.as_ref()
                    .split_whitespace()
                    .map(str::to_owned)
                    .collect::<Vec<_>>()
            })
            .filter(|w| !SPECIALS.contains(&w.as_str()))
            .collect();
        let surface_of: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(distinct)
            .collect();
        Self::from_surfaces(surface_of)
    }

    fn from_surfaces(surface_of: Vec<String>) -> Vocab {
        let id_of = surface_of
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        Vocab { id_of, surface_of }
    }

    pub fn len(&self) -> usize {
        self.surface_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surface_of.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<u32> {
        self.id_of
            .get(word)
            .copied()
            .ok_or_else(|| Error::Oov(word.to_owned()))
    }

    pub fn surface(&self, id: u32) -> Result<&str> {
        self.surface_of
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| Error::Index(format!("token id {id} >= vocab size {}", self.len())))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<u32>> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let words: Vec<&str> = ids.iter().map(|&i| self.surface(i)).collect::<Result<_>>()?;
        Ok(words.join(" "))
    }

    /// Writes `id<TAB>surface` lines.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut buf = String::new();
        for (i, s) in self.surface_of.iter().enumerate() {
            buf.push_str(&format!("{i}\t{s}\n"));
        }
        f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Vocab> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut surfaces = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let perr = |msg: String| Error::Parse { line: i + 1, msg };
            let (id, surface) = line
                .split_once('\t')
                .ok_or_else(|| perr("missing tab".into()))?;
            let id: usize = id.parse().map_err(|_| perr(format!("bad id {id:?}")))?;
            if id != surfaces.len() {
                return Err(perr(format!("id {id} out of sequence")));
            }
            surfaces.push(surface.to_owned());
        }
        if surfaces.len() < SPECIALS.len() || surfaces[..4] != SPECIALS {
            return Err(Error::Parse {
                line: 1,
                msg: "vocab must start with the four special tokens".into(),
            });
        }
        Ok(Self::from_surfaces(surfaces))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordering_rule() {
        let v = Vocab::build(["b a", "a"]);
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("⟨bos⟩").unwrap(), BOS);
        assert_eq!(v.id("⟨eos⟩").unwrap(), EOS);
        assert_eq!(v.id("⟨sep⟩").unwrap(), SEP);
        assert_eq!(v.id("⟨pad⟩").unwrap(), PAD);
        assert_eq!(v.id("a").unwrap(), 4);
        assert_eq!(v.id("b").unwrap(), 5);
        assert_eq!(Vocab::build(["b a", "a"]), v);
    }

    #[test]
    fn decode_renders_specials() {
        let v = Vocab::build(["a b"]);
        assert_eq!(v.decode(&[0, 4, 1]).unwrap(), "⟨bos⟩ a ⟨eos⟩");
        assert!(matches!(v.decode(&[99]), Err(Error::Index(_))));
    }

    #[test]
    fn unknown_word_is_oov() {
        let v = Vocab::build(["a b"]);
        match v.encode("a zzz") {
            Err(Error::Oov(w)) => assert_eq!(w, "zzz"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn vocab_file_roundtrip() {
        let v = Vocab::build(["kato mibu", "sela"]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.tsv");
        v.save(&p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap().lines().next(), Some("0\t⟨bos⟩"));
        assert_eq!(Vocab::load(&p).unwrap(), v);
    }
}
