//! Synthetic parallel toy languages with known word-level alignment.
//!
//! Alpha is the pivot language. Beta and Gamma relabel every Alpha word through
//! a bijective lexicon map; Beta additionally moves the verb to the end (SOV).

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CONSONANTS: &[u8] = b"ptkbdgmnslrvzfh";
const VOWELS: &[u8] = b"aeiou";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PosTag {
    Det,
    Adj,
    Noun,
    Verb,
    Adv,
}

impl PosTag {
    pub const ALL: [PosTag; 5] = [
        PosTag::Det,
        PosTag::Adj,
        PosTag::Noun,
        PosTag::Verb,
        PosTag::Adv,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Lang {
    Alpha,
    Beta,
    Gamma,
}

impl Lang {
    pub const ALL: [Lang; 3] = [Lang::Alpha, Lang::Beta, Lang::Gamma];

    pub fn name(self) -> &'static str {
        match self {
            Lang::Alpha => "Alpha",
            Lang::Beta => "Beta",
            Lang::Gamma => "Gamma",
        }
    }
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Lang {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "alpha" => Ok(Lang::Alpha),
            "beta" => Ok(Lang::Beta),
            "gamma" => Ok(Lang::Gamma),
            _ => Err(Error::Config(format!("unknown language {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WordOrder {
    Svo,
    Sov,
}

/// Tagged word list of the pivot language.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    pub words: Vec<String>,
    pub pos_tags: Vec<PosTag>,
    pub seed: u64,
}

impl Lexicon {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn count(&self, tag: PosTag) -> usize {
        self.pos_tags.iter().filter(|&&t| t == tag).count()
    }
}

fn gen_surfaces(rng: &mut ChaCha8Rng, n: usize, taken: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.random_range(2..=3);
        let mut w = String::with_capacity(syllables * 2);
        for _ in 0..syllables {
            w.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char);
            w.push(VOWELS[rng.random_range(0..VOWELS.len())] as char);
        }
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn tag_layout(size: usize) -> Vec<PosTag> {
    let per = size / PosTag::ALL.len();
    let mut tags = Vec::with_capacity(size);
    for tag in PosTag::ALL {
        tags.extend(std::iter::repeat_n(tag, per));
    }
    tags.resize(size, PosTag::Noun);
    tags
}

/// Generates a pronounceable tagged lexicon; every tag class gets `size / 5` words.
pub fn gen_lexicon(seed: u64, size: usize) -> Result<Lexicon> {
    if size < 40 {
        return Err(Error::Config(format!("lexicon size {size} < 40")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = gen_surfaces(&mut rng, size, &mut HashSet::new());
    Ok(Lexicon {
        words,
        pos_tags: tag_layout(size),
        seed,
    })
}

/// One language: a relabelling of the pivot lexicon plus a word-order rule.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LanguageSpec {
    pub name: Lang,
    /// `lexicon_map[i]` is this language's surface for pivot word `i`.
    pub lexicon_map: Vec<String>,
    pub word_order: WordOrder,
    tags: Vec<PosTag>,
    index: HashMap<String, usize>,
}

impl LanguageSpec {
    fn new(name: Lang, lexicon_map: Vec<String>, tags: Vec<PosTag>, word_order: WordOrder) -> Self {
        let index = lexicon_map
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        LanguageSpec {
            name,
            lexicon_map,
            word_order,
            tags,
            index,
        }
    }

    pub fn tag_of(&self, pivot: usize) -> PosTag {
        self.tags[pivot]
    }

    /// Pivot index of a surface word.
    pub fn pivot_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn surface(&self, pivot: usize) -> &str {
        &self.lexicon_map[pivot]
    }

    fn words_with(&self, tag: PosTag) -> Vec<usize> {
        (0..self.tags.len()).filter(|&i| self.tags[i] == tag).collect()
    }

    /// Renders a clause in this language's surface and order.
    pub fn realize(&self, c: &Clause) -> Vec<String> {
        let mut subj = vec![c.subj_det];
        subj.extend(c.subj_adj);
        subj.push(c.subj_noun);
        let obj = [c.obj_det, c.obj_noun];
        let mut seq = subj;
        match self.word_order {
            WordOrder::Svo => {
                seq.push(c.verb);
                seq.extend(c.adv);
                seq.extend(obj);
            }
            WordOrder::Sov => {
                seq.extend(obj);
                seq.extend(c.adv);
                seq.push(c.verb);
            }
        }
        seq.into_iter().map(|i| self.lexicon_map[i].clone()).collect()
    }

    /// Recovers the clause structure of a sentence in this language.
    pub fn parse(&self, words: &[String]) -> Result<Clause> {
        let bad = |msg: &str| Error::Contract(format!("{} parse of {words:?}: {msg}", self.name));
        let ids: Vec<usize> = words
            .iter()
            .map(|w| self.pivot_of(w).ok_or_else(|| Error::Oov(w.clone())))
            .collect::<Result<_>>()?;
        let tags: Vec<PosTag> = ids.iter().map(|&i| self.tags[i]).collect();
        let mut pos = 0;
        let mut take = |want: PosTag, optional: bool| -> Result<Option<usize>> {
            if tags.get(pos) == Some(&want) {
                pos += 1;
                Ok(Some(ids[pos - 1]))
            } else if optional {
                Ok(None)
            } else {
                Err(bad(&format!("expected {want:?} at {pos}")))
            }
        };
        let subj_det = take(PosTag::Det, false)?.unwrap();
        let subj_adj = take(PosTag::Adj, true)?;
        let subj_noun = take(PosTag::Noun, false)?.unwrap();
        let (verb, adv, obj_det, obj_noun) = match self.word_order {
            WordOrder::Svo => {
                let v = take(PosTag::Verb, false)?.unwrap();
                let a = take(PosTag::Adv, true)?;
                let d = take(PosTag::Det, false)?.unwrap();
                let n = take(PosTag::Noun, false)?.unwrap();
                (v, a, d, n)
            }
            WordOrder::Sov => {
                let d = take(PosTag::Det, false)?.unwrap();
                let n = take(PosTag::Noun, false)?.unwrap();
                let a = take(PosTag::Adv, true)?;
                let v = take(PosTag::Verb, false)?.unwrap();
                (v, a, d, n)
            }
        };
        if pos != ids.len() {
            return Err(bad("trailing words"));
        }
        Ok(Clause {
            subj_det,
            subj_adj,
            subj_noun,
            verb,
            adv,
            obj_det,
            obj_noun,
        })
    }

    /// Translates a sentence of this language into `target`.
    pub fn translate(&self, words: &[String], target: &LanguageSpec) -> Result<Vec<String>> {
        Ok(target.realize(&self.parse(words)?))
    }
}

/// Language-neutral sentence content, as pivot word indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Clause {
    pub subj_det: usize,
    pub subj_adj: Option<usize>,
    pub subj_noun: usize,
    pub verb: usize,
    pub adv: Option<usize>,
    pub obj_det: usize,
    pub obj_noun: usize,
}

impl Clause {
    /// Stable FNV-1a fingerprint, used to partition sentence space into splits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let fields = [
            self.subj_det,
            self.subj_adj.map_or(usize::MAX, |v| v),
            self.subj_noun,
            self.verb,
            self.adv.map_or(usize::MAX, |v| v),
            self.obj_det,
            self.obj_noun,
        ];
        for f in fields {
            for b in (f as u64).to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// Which half of sentence space a generator draws from. The halves are
/// disjoint, so train and eval data never share a sentence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn admits(self, c: &Clause) -> bool {
        (c.fingerprint() & 1 == 0) == (self == Split::Train)
    }
}

/// The three toy languages built over one pivot lexicon.
#[derive(Clone, Debug)]
pub struct World {
    pub lexicon: Lexicon,
    pub alpha: LanguageSpec,
    pub beta: LanguageSpec,
    pub gamma: LanguageSpec,
}

impl World {
    /// Alpha keeps the pivot surfaces in SVO, Beta gets fresh surfaces in SOV,
    /// Gamma gets fresh surfaces in SVO.
    pub fn generate(seed: u64, lexicon_size: usize) -> Result<World> {
        let lexicon = gen_lexicon(seed, lexicon_size)?;
        let mut taken: HashSet<String> = lexicon.words.iter().cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut relabel = |rng: &mut ChaCha8Rng| {
            let mut s = gen_surfaces(rng, lexicon_size, &mut taken);
            s.shuffle(rng);
            s
        };
        let beta_words = relabel(&mut rng);
        let gamma_words = relabel(&mut rng);
        let tags = lexicon.pos_tags.clone();
        Ok(World {
            alpha: LanguageSpec::new(Lang::Alpha, lexicon.words.clone(), tags.clone(), WordOrder::Svo),
            beta: LanguageSpec::new(Lang::Beta, beta_words, tags.clone(), WordOrder::Sov),
            gamma: LanguageSpec::new(Lang::Gamma, gamma_words, tags, WordOrder::Svo),
            lexicon,
        })
    }

    pub fn spec(&self, lang: Lang) -> &LanguageSpec {
        match lang {
            Lang::Alpha => &self.alpha,
            Lang::Beta => &self.beta,
            Lang::Gamma => &self.gamma,
        }
    }
}

fn gen_clause(spec: &LanguageSpec, rng: &mut impl Rng) -> Clause {
    let pick = |tag: PosTag, rng: &mut dyn rand::RngCore| {
        let pool = spec.words_with(tag);
        pool[rng.random_range(0..pool.len())]
    };
    let subj_det = pick(PosTag::Det, rng);
    let subj_adj = rng.random_bool(0.5).then(|| pick(PosTag::Adj, rng));
    let subj_noun = pick(PosTag::Noun, rng);
    let verb = pick(PosTag::Verb, rng);
    let adv = rng.random_bool(0.5).then(|| pick(PosTag::Adv, rng));
    let obj_det = pick(PosTag::Det, rng);
    let obj_noun = pick(PosTag::Noun, rng);
    Clause {
        subj_det,
        subj_adj,
        subj_noun,
        verb,
        adv,
        obj_det,
        obj_noun,
    }
}

/// One sentence: `DET ADJ? NOUN VERB ADV? DET NOUN` in pivot order, then the
/// language's word-order rule.
pub fn gen_sentence(spec: &LanguageSpec, rng: &mut impl Rng) -> Vec<String> {
    spec.realize(&gen_clause(spec, rng))
}

fn gen_clauses(spec: &LanguageSpec, n: usize, seed: u64, split: Split) -> Vec<Clause> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let c = gen_clause(spec, &mut rng);
        if split.admits(&c) {
            out.push(c);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub src_lang: Lang,
    pub tgt_lang: Lang,
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

impl SentencePair {
    pub fn reversed(&self) -> SentencePair {
        SentencePair {
            src_lang: self.tgt_lang,
            tgt_lang: self.src_lang,
            src: self.tgt.clone(),
            tgt: self.src.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonoSentence {
    pub lang: Lang,
    pub words: Vec<String>,
}

pub fn gen_parallel_corpus(
    src: &LanguageSpec,
    tgt: &LanguageSpec,
    n: usize,
    seed: u64,
    split: Split,
) -> Result<Vec<SentencePair>> {
    if src.name == tgt.name {
        return Err(Error::Config(format!(
            "parallel corpus needs two languages, got {} twice",
            src.name
        )));
    }
    if n == 0 {
        return Err(Error::Config("parallel corpus of 0 pairs".into()));
    }
    Ok(gen_clauses(src, n, seed, split)
        .iter()
        .map(|c| SentencePair {
            src_lang: src.name,
            tgt_lang: tgt.name,
            src: src.realize(c),
            tgt: tgt.realize(c),
        })
        .collect())
}

pub fn gen_monolingual(spec: &LanguageSpec, n: usize, seed: u64, split: Split) -> Vec<MonoSentence> {
    gen_clauses(spec, n, seed, split)
        .iter()
        .map(|c| MonoSentence {
            lang: spec.name,
            words: spec.realize(c),
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ParallelRecord {
    src_lang: String,
    tgt_lang: String,
    src: String,
    tgt: String,
}

#[derive(Serialize, Deserialize)]
struct MonoRecord {
    lang: String,
    text: String,
}

fn split_words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

fn write_lines<I: Iterator<Item = String>>(path: &Path, lines: I) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for line in lines {
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_records<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, R)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map(|r| (i + 1, r))
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })
        })
        .collect()
}

fn parse_lang(line: usize, s: &str) -> Result<Lang> {
    s.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("unknown language {s:?}"),
    })
}

/// Writes parallel pairs, one JSON object per line.
pub fn write_corpus(path: impl AsRef<Path>, pairs: &[SentencePair]) -> Result<()> {
    write_lines(
        path.as_ref(),
        pairs.iter().map(|p| {
            serde_json::to_string(&ParallelRecord {
                src_lang: p.src_lang.to_string(),
                tgt_lang: p.tgt_lang.to_string(),
                src: p.src.join(" "),
                tgt: p.tgt.join(" "),
            })
            .expect("plain record serializes")
        }),
    )
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<SentencePair>> {
    read_records::<ParallelRecord>(path.as_ref())?
        .into_iter()
        .map(|(line, r)| {
            Ok(SentencePair {
                src_lang: parse_lang(line, &r.src_lang)?,
                tgt_lang: parse_lang(line, &r.tgt_lang)?,
                src: split_words(&r.src),
                tgt: split_words(&r.tgt),
            })
        })
        .collect()
}

pub fn write_mono(path: impl AsRef<Path>, sentences: &[MonoSentence]) -> Result<()> {
    write_lines(
        path.as_ref(),
        sentences.iter().map(|s| {
            serde_json::to_string(&MonoRecord {
                lang: s.lang.to_string(),
                text: s.words.join(" "),
            })
            .expect("plain record serializes")
        }),
    )
}

pub fn read_mono(path: impl AsRef<Path>) -> Result<Vec<MonoSentence>> {
    read_records::<MonoRecord>(path.as_ref())?
        .into_iter()
        .map(|(line, r)| {
            Ok(MonoSentence {
                lang: parse_lang(line, &r.lang)?,
                words: split_words(&r.text),
            })
        })
        .collect()
}

/// Sizes and seeds for a full toy dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub lexicon_size: usize,
    /// Monolingual training sentences per language; default budget is 10:3:1.
    pub mono_alpha: usize,
    pub mono_beta: usize,
    pub mono_gamma: usize,
    /// Training pairs for Alpha-Beta and Alpha-Gamma; each is also used reversed.
    pub pairs_alpha_beta: usize,
    pub pairs_alpha_gamma: usize,
    pub eval_pairs: usize,
    pub eval_mono: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 7,
            lexicon_size: 170,
            mono_alpha: 10_000,
            mono_beta: 3_000,
            mono_gamma: 1_000,
            pairs_alpha_beta: 4_000,
            pairs_alpha_gamma: 1_500,
            eval_pairs: 200,
            eval_mono: 500,
        }
    }
}

/// Everything generated from one [`CorpusConfig`].
#[derive(Clone, Debug)]
pub struct Dataset {
    pub world: World,
    pub mono_train: Vec<MonoSentence>,
    pub mono_eval: Vec<MonoSentence>,
    /// Training pairs in both directions for every language pair.
    pub pairs_train: Vec<SentencePair>,
    /// Held-out Alpha→Beta pairs.
    pub pairs_eval: Vec<SentencePair>,
}

impl Dataset {
    pub fn generate(cfg: &CorpusConfig) -> Result<Dataset> {
        let world = World::generate(cfg.seed, cfg.lexicon_size)?;
        let sub = |k: u64| cfg.seed.wrapping_mul(1_000_003).wrapping_add(k);
        let mut mono_train = Vec::new();
        for (k, (spec, n)) in [
            (&world.alpha, cfg.mono_alpha),
            (&world.beta, cfg.mono_beta),
            (&world.gamma, cfg.mono_gamma),
        ]
        .into_iter()
        .enumerate()
        {
            mono_train.extend(gen_monolingual(spec, n, sub(k as u64 + 1), Split::Train));
        }
        let mut mono_eval = Vec::new();
        for (k, spec) in [&world.alpha, &world.beta, &world.gamma].into_iter().enumerate() {
            mono_eval.extend(gen_monolingual(spec, cfg.eval_mono, sub(k as u64 + 11), Split::Eval));
        }
        let mut pairs_train = Vec::new();
        for (k, (tgt, n)) in [(&world.beta, cfg.pairs_alpha_beta), (&world.gamma, cfg.pairs_alpha_gamma)]
            .into_iter()
            .enumerate()
        {
            if n == 0 {
                continue;
            }
            let fwd = gen_parallel_corpus(&world.alpha, tgt, n, sub(k as u64 + 21), Split::Train)?;
            pairs_train.extend(fwd.iter().flat_map(|p| [p.clone(), p.reversed()]));
        }
        let pairs_eval = gen_parallel_corpus(&world.alpha, &world.beta, cfg.eval_pairs.max(1), sub(31), Split::Eval)?;
        Ok(Dataset {
            world,
            mono_train,
            mono_eval,
            pairs_train,
            pairs_eval,
        })
    }

    pub fn mono_eval_for(&self, lang: Lang) -> Vec<MonoSentence> {
        self.mono_eval.iter().filter(|s| s.lang == lang).cloned().collect()
    }

    /// Pairs in one direction, in generation order.
    pub fn train_pairs(&self, src: Lang, tgt: Lang) -> Vec<SentencePair> {
        self.pairs_train
            .iter()
            .filter(|p| p.src_lang == src && p.tgt_lang == tgt)
            .cloned()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> World {
        World::generate(7, 200).unwrap()
    }

    #[test]
    fn lexicon_is_deterministic_and_seeded() {
        assert_eq!(gen_lexicon(7, 200).unwrap(), gen_lexicon(7, 200).unwrap());
        assert_ne!(gen_lexicon(7, 200).unwrap().words, gen_lexicon(8, 200).unwrap().words);
    }

    #[test]
    fn lexicon_tag_classes_are_populated() {
        let lex = gen_lexicon(7, 200).unwrap();
        let unique: HashSet<_> = lex.words.iter().collect();
        assert_eq!(unique.len(), 200);
        for tag in PosTag::ALL {
            assert!(lex.count(tag) >= 200 / 25, "{tag:?}");
        }
        let small = gen_lexicon(1, 40).unwrap();
        assert!(PosTag::ALL.iter().all(|&t| small.count(t) >= 8));
        assert!(matches!(gen_lexicon(1, 39), Err(Error::Config(_))));
    }

    #[test]
    fn surfaces_are_disjoint_across_languages() {
        let w = world();
        let mut all = HashSet::new();
        for spec in [&w.alpha, &w.beta, &w.gamma] {
            for s in &spec.lexicon_map {
                assert!(all.insert(s.clone()), "{s} reused");
            }
        }
        assert_eq!(w.alpha.lexicon_map, w.lexicon.words);
    }

    #[test]
    fn sentence_shapes() {
        let w = world();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let a = gen_sentence(&w.alpha, &mut rng);
            assert!((5..=7).contains(&a.len()));
            let verb_at: Vec<usize> = (0..a.len())
                .filter(|&i| w.alpha.tag_of(w.alpha.pivot_of(&a[i]).unwrap()) == PosTag::Verb)
                .collect();
            assert!(verb_at == [2] || verb_at == [3], "{a:?}");

            let b = w.alpha.translate(&a, &w.beta).unwrap();
            let last = w.beta.pivot_of(b.last().unwrap()).unwrap();
            assert_eq!(w.beta.tag_of(last), PosTag::Verb);
            assert_eq!(w.beta.translate(&b, &w.alpha).unwrap(), a);
        }
    }

    #[test]
    fn parallel_corpus_counts_and_invariant() {
        let w = world();
        let pairs = gen_parallel_corpus(&w.alpha, &w.beta, 1000, 1, Split::Train).unwrap();
        assert_eq!(pairs.len(), 1000);
        for p in &pairs {
            assert_eq!((p.src_lang, p.tgt_lang), (Lang::Alpha, Lang::Beta));
            assert_eq!(w.alpha.translate(&p.src, &w.beta).unwrap(), p.tgt);
        }
        assert!(matches!(
            gen_parallel_corpus(&w.beta, &w.beta, 10, 1, Split::Train),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn train_and_eval_never_share_sentences() {
        let w = world();
        let train = gen_parallel_corpus(&w.alpha, &w.beta, 1000, 1, Split::Train).unwrap();
        let eval = gen_parallel_corpus(&w.alpha, &w.beta, 1000, 2, Split::Eval).unwrap();
        let seen: HashSet<_> = train.iter().map(|p| &p.src).collect();
        assert_eq!(eval.iter().filter(|p| seen.contains(&p.src)).count(), 0);
    }

    #[test]
    fn corpus_file_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let w = world();
        let pairs = gen_parallel_corpus(&w.alpha, &w.gamma, 50, 4, Split::Train).unwrap();
        let path = dir.path().join("p.jsonl");
        write_corpus(&path, &pairs).unwrap();
        assert_eq!(read_corpus(&path).unwrap(), pairs);

        let mono = gen_monolingual(&w.beta, 20, 5, Split::Eval);
        let mpath = dir.path().join("m.jsonl");
        write_mono(&mpath, &mono).unwrap();
        assert_eq!(read_mono(&mpath).unwrap(), mono);

        let empty = dir.path().join("e.jsonl");
        fs::write(&empty, "").unwrap();
        assert!(read_corpus(&empty).unwrap().is_empty());

        let bad = dir.path().join("bad.jsonl");
        fs::write(
            &bad,
            "{\"src_lang\":\"Alpha\",\"tgt_lang\":\"Beta\",\"src\":\"a\",\"tgt\":\"b\"}\n{\"src_lang\":\"Alpha\",\"tgt_lang\":\"Beta\",\"src\":\"a\"}\n",
        )
        .unwrap();
        match read_corpus(&bad) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("tgt"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn dataset_generation_is_byte_deterministic() {
        let cfg = CorpusConfig {
            mono_alpha: 100,
            mono_beta: 30,
            mono_gamma: 10,
            pairs_alpha_beta: 40,
            pairs_alpha_gamma: 10,
            eval_pairs: 10,
            eval_mono: 10,
            ..CorpusConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        write_corpus(&a, &Dataset::generate(&cfg).unwrap().pairs_train).unwrap();
        write_corpus(&b, &Dataset::generate(&cfg).unwrap().pairs_train).unwrap();
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
        let ds = Dataset::generate(&cfg).unwrap();
        assert_eq!(ds.pairs_train.len(), 100);
        assert_eq!(ds.train_pairs(Lang::Beta, Lang::Alpha).len(), 40);
    }
}
