//! Corpus file formats, vocabulary construction, a rule-based POS tagger
//! and seeded synthetic corpora.
//!
//! All formats are UTF-8 TSV with literal tabs and no quoting:
//!
//! * pairs: `source<TAB>target`, tokens separated by single spaces;
//! * gaze: `sentence_id<TAB>reader_id<TAB>token_index<TAB>token<TAB>duration_ms`;
//! * compression and tagged files: `token<TAB>value` lines, one block per
//!   sentence, blocks separated by blank lines.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embeddings::Vocabulary;
use crate::error::{Error, Result};
use crate::gaze_synth::{simulate_reading, GazeRecord, Lexicon, SimulatorParams};
use crate::numeric::Rng;
use crate::paragen::SentencePair;
use crate::sentcomp::DeletionExample;

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn split_tokens(field: &str) -> Vec<String> {
    field.split(' ').filter(|t| !t.is_empty()).map(String::from).collect()
}

pub fn read_pairs(path: &Path) -> Result<Vec<SentencePair>> {
    parse_pairs(&read_text(path)?, &path.display().to_string())
}

pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<SentencePair>> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (src, tgt) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(origin, i + 1, "expected source<TAB>target"))?;
        let pair = SentencePair::new(split_tokens(src), split_tokens(tgt))
            .map_err(|_| Error::format(origin, i + 1, "empty source or target"))?;
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn write_pairs<W: Write>(mut out: W, pairs: &[SentencePair]) -> std::io::Result<()> {
    for p in pairs {
        writeln!(out, "{}\t{}", p.source.join(" "), p.target.join(" "))?;
    }
    Ok(())
}

/// Records grouped by `(sentence_id, reader_id)` in order of first
/// appearance, each normalized to sum to one.
pub fn read_gaze(path: &Path) -> Result<Vec<GazeRecord>> {
    parse_gaze(&read_text(path)?, &path.display().to_string())
}

pub fn parse_gaze(text: &str, origin: &str) -> Result<Vec<GazeRecord>> {
    struct Row {
        line: usize,
        index: usize,
        token: String,
        duration: f64,
    }
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: HashMap<(String, String), Vec<Row>> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(Error::format(
                origin,
                lineno,
                format!("expected 5 tab-separated fields, found {}", f.len()),
            ));
        }
        let index: usize = f[2]
            .parse()
            .map_err(|_| Error::format(origin, lineno, format!("invalid token index '{}'", f[2])))?;
        let duration: f64 = f[4]
            .parse()
            .map_err(|_| Error::format(origin, lineno, format!("invalid duration '{}'", f[4])))?;
        if duration < 0.0 || !duration.is_finite() {
            return Err(Error::Domain(format!(
                "{origin}:{lineno}: duration {duration} is negative or not finite"
            )));
        }
        let key = (f[0].to_string(), f[1].to_string());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(Row {
            line: lineno,
            index,
            token: f[3].to_string(),
            duration,
        });
    }
    let mut records = Vec::with_capacity(order.len());
    for key in order {
        let mut rows = groups.remove(&key).expect("grouped");
        rows.sort_by_key(|r| r.index);
        for (expected, r) in rows.iter().enumerate() {
            if r.index != expected {
                return Err(Error::format(
                    origin,
                    r.line,
                    format!(
                        "token_index {} for {}/{} breaks the sequence at {expected}",
                        r.index, key.0, key.1
                    ),
                ));
            }
        }
        let durations: Vec<f64> = rows.iter().map(|r| r.duration).collect();
        if durations.iter().all(|d| *d == 0.0) {
            log::warn!(
                "{origin}: record {}/{} has all-zero durations, using uniform",
                key.0,
                key.1
            );
        }
        let rec = GazeRecord {
            sentence_id: key.0,
            reader_id: key.1,
            tokens: rows.into_iter().map(|r| r.token).collect(),
            durations,
            normalized: false,
        };
        records.push(rec.normalize());
    }
    Ok(records)
}

pub fn write_gaze<W: Write>(mut out: W, records: &[GazeRecord]) -> std::io::Result<()> {
    for r in records {
        for (i, (t, d)) in r.tokens.iter().zip(&r.durations).enumerate() {
            writeln!(out, "{}\t{}\t{i}\t{t}\t{d}", r.sentence_id, r.reader_id)?;
        }
    }
    Ok(())
}

/// Blank-line separated `token<TAB>field` blocks with their line numbers.
fn blocks(text: &str) -> Vec<Vec<(usize, &str)>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else {
            cur.push((i + 1, line));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn read_compression(path: &Path) -> Result<Vec<DeletionExample>> {
    parse_compression(&read_text(path)?, &path.display().to_string())
}

pub fn parse_compression(text: &str, origin: &str) -> Result<Vec<DeletionExample>> {
    blocks(text)
        .into_iter()
        .map(|block| {
            let mut tokens = Vec::with_capacity(block.len());
            let mut keep = Vec::with_capacity(block.len());
            for (lineno, line) in block {
                let (tok, flag) = line
                    .split_once('\t')
                    .ok_or_else(|| Error::format(origin, lineno, "expected token<TAB>keep_flag"))?;
                keep.push(match flag.trim() {
                    "1" => true,
                    "0" => false,
                    other => {
                        return Err(Error::format(
                            origin,
                            lineno,
                            format!("keep flag must be 0 or 1, got '{other}'"),
                        ))
                    }
                });
                tokens.push(tok.to_string());
            }
            DeletionExample::new(tokens, keep)
        })
        .collect()
}

pub fn write_compression<W: Write>(mut out: W, examples: &[DeletionExample]) -> std::io::Result<()> {
    for (i, ex) in examples.iter().enumerate() {
        if i > 0 {
            writeln!(out)?;
        }
        for (t, k) in ex.tokens.iter().zip(&ex.keep) {
            writeln!(out, "{t}\t{}", u8::from(*k))?;
        }
    }
    Ok(())
}

/// Tokens with `count >= min_count`, ordered by descending count then token.
pub fn build_vocab<I, S>(tokens: I, min_count: usize) -> Vocabulary
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut counts: HashMap<String, usize> = HashMap::new();
    for t in tokens {
        *counts.entry(t.as_ref().to_string()).or_default() += 1;
    }
    let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count.max(1)).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t))
}

/// Coarse universal-style part-of-speech tags.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PosTag {
    #[serde(rename = "NOUN")]
    Noun,
    #[serde(rename = "VERB")]
    Verb,
    #[serde(rename = "ADJ")]
    Adj,
    #[serde(rename = "ADV")]
    Adv,
    #[serde(rename = "PRON")]
    Pron,
    #[serde(rename = "DET")]
    Det,
    #[serde(rename = "ADP")]
    Adp,
    #[serde(rename = "CONJ")]
    Conj,
    #[serde(rename = "NUM")]
    Num,
    #[serde(rename = "PART")]
    Part,
    #[serde(rename = "OTHER")]
    Other,
}

/// Content versus function word classes; `None` tags are excluded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WordClass {
    Content,
    Function,
}

impl PosTag {
    pub const ALL: [PosTag; 11] = [
        PosTag::Noun,
        PosTag::Verb,
        PosTag::Adj,
        PosTag::Adv,
        PosTag::Pron,
        PosTag::Det,
        PosTag::Adp,
        PosTag::Conj,
        PosTag::Num,
        PosTag::Part,
        PosTag::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PosTag::Noun => "NOUN",
            PosTag::Verb => "VERB",
            PosTag::Adj => "ADJ",
            PosTag::Adv => "ADV",
            PosTag::Pron => "PRON",
            PosTag::Det => "DET",
            PosTag::Adp => "ADP",
            PosTag::Conj => "CONJ",
            PosTag::Num => "NUM",
            PosTag::Part => "PART",
            PosTag::Other => "OTHER",
        }
    }

    pub fn class(self) -> Option<WordClass> {
        match self {
            PosTag::Noun | PosTag::Verb | PosTag::Adj | PosTag::Adv => Some(WordClass::Content),
            PosTag::Pron | PosTag::Det | PosTag::Adp | PosTag::Conj | PosTag::Num | PosTag::Part => {
                Some(WordClass::Function)
            }
            PosTag::Other => None,
        }
    }
}

impl fmt::Display for PosTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PosTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PosTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Domain(format!("unknown POS tag '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSentence {
    pub tokens: Vec<String>,
    pub tags: Vec<PosTag>,
}

const DETERMINERS: &[&str] = &[
    "the", "a", "an", "this", "that", "these", "those", "every", "each", "some", "any", "no", "all", "both", "either",
    "neither", "another",
];
const PRONOUNS: &[&str] = &[
    "i",
    "me",
    "my",
    "mine",
    "you",
    "your",
    "yours",
    "he",
    "him",
    "his",
    "she",
    "her",
    "hers",
    "it",
    "its",
    "we",
    "us",
    "our",
    "ours",
    "they",
    "them",
    "their",
    "theirs",
    "who",
    "whom",
    "whose",
    "which",
    "what",
    "myself",
    "yourself",
    "himself",
    "herself",
    "itself",
    "ourselves",
    "themselves",
    "someone",
    "something",
    "anyone",
    "anything",
    "everyone",
    "everything",
    "nobody",
    "nothing",
];
const ADPOSITIONS: &[&str] = &[
    "in", "on", "at", "by", "for", "with", "about", "against", "between", "into", "through", "during", "before",
    "after", "above", "below", "from", "up", "down", "of", "off", "over", "under", "near", "behind", "across", "among",
    "around", "without", "within", "toward", "towards", "upon", "beside", "beyond", "since", "until",
];
const CONJUNCTIONS: &[&str] = &[
    "and", "or", "but", "nor", "so", "yet", "because", "although", "while", "if", "unless", "whereas",
];
const PARTICLES: &[&str] = &["to", "not", "n't", "'s"];
const NUMBER_WORDS: &[&str] = &[
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
    "twenty", "thirty", "hundred", "thousand", "million",
];
/// Verb stems for the inflection rules, plus common auxiliaries.
const VERB_STEMS: &[&str] = &[
    "be",
    "is",
    "am",
    "are",
    "was",
    "were",
    "been",
    "being",
    "have",
    "has",
    "had",
    "do",
    "does",
    "did",
    "can",
    "could",
    "will",
    "would",
    "shall",
    "should",
    "may",
    "might",
    "must",
    "go",
    "make",
    "take",
    "get",
    "see",
    "say",
    "know",
    "think",
    "come",
    "give",
    "find",
    "tell",
    "ask",
    "work",
    "seem",
    "feel",
    "try",
    "leave",
    "call",
    "help",
    "assist",
    "watch",
    "observe",
    "visit",
    "tour",
    "start",
    "launch",
    "need",
    "require",
    "want",
    "desire",
    "phone",
    "clean",
    "wash",
    "paint",
    "color",
    "repair",
    "fix",
    "move",
    "shift",
    "like",
    "enjoy",
    "open",
    "unlock",
    "show",
    "display",
    "follow",
    "track",
    "answer",
    "reply",
    "order",
    "request",
    "finish",
    "complete",
    "join",
    "enter",
    "reach",
    "contact",
    "travel",
    "walk",
    "jump",
    "play",
    "look",
    "use",
    "learn",
    "change",
    "turn",
    "talk",
    "live",
    "believe",
    "happen",
    "remember",
    "love",
    "buy",
    "purchase",
    "carry",
    "deliver",
    "bring",
    "build",
    "construct",
    "save",
    "rescue",
    "invite",
    "greet",
    "examine",
    "inspect",
    "assemble",
];

fn is_verb_stem(s: &str) -> bool {
    VERB_STEMS.contains(&s)
}

fn inflected_verb(word: &str) -> bool {
    let mut candidates: Vec<String> = Vec::new();
    for suffix in ["ing", "ed"] {
        if let Some(stem) = word.strip_suffix(suffix) {
            candidates.push(stem.to_string());
            candidates.push(format!("{stem}e"));
            // doubled consonant: stopped -> stop
            if stem.len() > 2 && stem.as_bytes()[stem.len() - 1] == stem.as_bytes()[stem.len() - 2] {
                candidates.push(stem[..stem.len() - 1].to_string());
            }
        }
    }
    if let Some(stem) = word.strip_suffix("ied") {
        candidates.push(format!("{stem}y"));
    }
    if let Some(stem) = word.strip_suffix("ies") {
        candidates.push(format!("{stem}y"));
    }
    if let Some(stem) = word.strip_suffix("es") {
        candidates.push(stem.to_string());
    }
    if let Some(stem) = word.strip_suffix('s') {
        candidates.push(stem.to_string());
    }
    candidates.iter().any(|c| is_verb_stem(c))
}

fn tag_word(token: &str) -> PosTag {
    let w = token.to_lowercase();
    let w = w.as_str();
    if DETERMINERS.contains(&w) {
        PosTag::Det
    } else if PRONOUNS.contains(&w) {
        PosTag::Pron
    } else if ADPOSITIONS.contains(&w) {
        PosTag::Adp
    } else if CONJUNCTIONS.contains(&w) {
        PosTag::Conj
    } else if PARTICLES.contains(&w) {
        PosTag::Part
    } else if NUMBER_WORDS.contains(&w) || w.parse::<f64>().is_ok() {
        PosTag::Num
    } else if w.chars().all(|c| c.is_ascii_punctuation()) {
        PosTag::Other
    } else if w.ends_with("ly") {
        PosTag::Adv
    } else if is_verb_stem(w) || inflected_verb(w) {
        PosTag::Verb
    } else if ["tion", "ness", "ment"].iter().any(|s| w.ends_with(s)) {
        PosTag::Noun
    } else if ["ous", "ful", "ive", "able"].iter().any(|s| w.ends_with(s)) {
        PosTag::Adj
    } else {
        PosTag::Noun
    }
}

/// Closed-class lookup, then suffix rules, then NOUN.
pub fn pos_tag(tokens: &[String]) -> TaggedSentence {
    TaggedSentence {
        tokens: tokens.to_vec(),
        tags: tokens.iter().map(|t| tag_word(t)).collect(),
    }
}

/// Pre-tagged `token<TAB>TAG` blocks, used instead of [`pos_tag`].
pub fn read_tagged(path: &Path) -> Result<Vec<TaggedSentence>> {
    parse_tagged(&read_text(path)?, &path.display().to_string())
}

pub fn parse_tagged(text: &str, origin: &str) -> Result<Vec<TaggedSentence>> {
    blocks(text)
        .into_iter()
        .map(|block| {
            let mut s = TaggedSentence {
                tokens: Vec::new(),
                tags: Vec::new(),
            };
            for (lineno, line) in block {
                let (tok, tag) = line
                    .split_once('\t')
                    .ok_or_else(|| Error::format(origin, lineno, "expected token<TAB>TAG"))?;
                let tag = tag
                    .trim()
                    .parse()
                    .map_err(|_| Error::format(origin, lineno, format!("unknown POS tag '{}'", tag.trim())))?;
                s.tokens.push(tok.to_string());
                s.tags.push(tag);
            }
            Ok(s)
        })
        .collect()
}

pub fn write_tagged<W: Write>(mut out: W, sentences: &[TaggedSentence]) -> std::io::Result<()> {
    for (i, s) in sentences.iter().enumerate() {
        if i > 0 {
            writeln!(out)?;
        }
        for (t, g) in s.tokens.iter().zip(&s.tags) {
            writeln!(out, "{t}\t{g}")?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic corpora
// ---------------------------------------------------------------------------

const G_DET: &[&str] = &["the", "a", "this", "that", "every", "some"];
const G_PREP: &[&str] = &["in", "near", "behind", "with", "after", "before", "under", "across"];
const G_NOUN: &[(&str, &str)] = &[
    ("car", "automobile"),
    ("house", "home"),
    ("child", "kid"),
    ("doctor", "physician"),
    ("road", "street"),
    ("city", "town"),
    ("shop", "store"),
    ("movie", "film"),
    ("teacher", "instructor"),
    ("friend", "companion"),
    ("job", "occupation"),
    ("gift", "present"),
    ("photo", "picture"),
    ("boat", "ship"),
    ("trip", "journey"),
    ("dog", "hound"),
    ("lawyer", "attorney"),
    ("student", "pupil"),
    ("river", "stream"),
    ("forest", "woods"),
    ("ocean", "sea"),
    ("garden", "yard"),
    ("meal", "dinner"),
    ("book", "novel"),
    ("song", "tune"),
    ("hat", "cap"),
    ("stone", "rock"),
    ("shoe", "boot"),
    ("hill", "mound"),
    ("chef", "cook"),
    ("error", "mistake"),
    ("problem", "issue"),
    ("answer", "solution"),
    ("baby", "infant"),
    ("couch", "sofa"),
    ("path", "trail"),
    ("village", "hamlet"),
    ("coat", "jacket"),
    ("lamp", "light"),
];
const G_VERB: &[(&str, &str)] = &[
    ("helped", "assisted"),
    ("watched", "observed"),
    ("visited", "toured"),
    ("started", "launched"),
    ("needed", "required"),
    ("wanted", "desired"),
    ("called", "phoned"),
    ("cleaned", "washed"),
    ("painted", "colored"),
    ("repaired", "fixed"),
    ("moved", "shifted"),
    ("liked", "enjoyed"),
    ("opened", "unlocked"),
    ("showed", "displayed"),
    ("followed", "tracked"),
    ("ordered", "requested"),
    ("finished", "completed"),
    ("joined", "entered"),
    ("reached", "contacted"),
    ("invited", "greeted"),
    ("carried", "delivered"),
    ("constructed", "assembled"),
    ("saved", "rescued"),
    ("examined", "inspected"),
];
const G_ADJ: &[(&str, &str)] = &[
    ("careful", "cautious"),
    ("famous", "glorious"),
    ("helpful", "useful"),
    ("massive", "enormous"),
    ("creative", "inventive"),
    ("beautiful", "gorgeous"),
    ("expensive", "valuable"),
    ("dangerous", "harmful"),
    ("curious", "inquisitive"),
    ("joyful", "cheerful"),
    ("nervous", "anxious"),
    ("comfortable", "agreeable"),
    ("peaceful", "restful"),
    ("powerful", "forceful"),
    ("generous", "charitable"),
    ("serious", "grievous"),
    ("active", "attentive"),
    ("delightful", "wonderful"),
    ("graceful", "tasteful"),
    ("portable", "movable"),
];
const G_ADV: &[(&str, &str)] = &[
    ("quickly", "rapidly"),
    ("slowly", "gradually"),
    ("happily", "gladly"),
    ("quietly", "silently"),
    ("suddenly", "abruptly"),
    ("carefully", "cautiously"),
    ("recently", "lately"),
    ("easily", "effortlessly"),
    ("finally", "eventually"),
    ("openly", "publicly"),
];

/// Every word the synthetic grammar can emit.
pub fn grammar_words() -> Vec<&'static str> {
    let mut w: Vec<&str> = G_DET.iter().chain(G_PREP).copied().collect();
    for list in [G_NOUN, G_VERB, G_ADJ, G_ADV] {
        for (a, b) in list {
            w.push(a);
            w.push(b);
        }
    }
    w
}

fn synonym(word: &str) -> Option<&'static str> {
    [G_NOUN, G_VERB, G_ADJ, G_ADV]
        .iter()
        .flat_map(|l| l.iter())
        .find_map(|(a, b)| {
            if *a == word {
                Some(*b)
            } else if *b == word {
                Some(*a)
            } else {
                None
            }
        })
}

fn pick<'a>(rng: &mut Rng, list: &[&'a str]) -> &'a str {
    list[rng.below(list.len())]
}

fn pick_pair(rng: &mut Rng, list: &[(&'static str, &'static str)]) -> &'static str {
    let (a, b) = list[rng.below(list.len())];
    if rng.bernoulli(0.5) {
        a
    } else {
        b
    }
}

/// A generated sentence with its gold keep mask (adjuncts deleted).
struct GrammarSentence {
    tokens: Vec<String>,
    keep: Vec<bool>,
}

fn grammar_sentence(rng: &mut Rng) -> GrammarSentence {
    let mut s = GrammarSentence {
        tokens: Vec::new(),
        keep: Vec::new(),
    };
    let push = |s: &mut GrammarSentence, w: &str, keep: bool| {
        s.tokens.push(w.to_string());
        s.keep.push(keep);
    };
    for role in 0..2 {
        push(&mut s, pick(rng, G_DET), true);
        if rng.bernoulli(0.5) {
            push(&mut s, pick_pair(rng, G_ADJ), false);
        }
        push(&mut s, pick_pair(rng, G_NOUN), true);
        if role == 0 {
            push(&mut s, pick_pair(rng, G_VERB), true);
        }
    }
    if rng.bernoulli(0.5) {
        push(&mut s, pick(rng, G_PREP), false);
        push(&mut s, pick(rng, G_DET), false);
        push(&mut s, pick_pair(rng, G_NOUN), false);
    }
    if rng.bernoulli(0.5) {
        push(&mut s, pick_pair(rng, G_ADV), false);
    }
    s
}

/// `n` seeded sentences from the template grammar.
pub fn grammar_sentences(seed: u64, n: usize) -> Vec<Vec<String>> {
    let rng = Rng::new(seed).fork("grammar");
    (0..n)
        .map(|i| grammar_sentence(&mut rng.fork_index("sentence", i as u64)).tokens)
        .collect()
}

/// Every word with a synonym swapped for it.
pub fn paraphrase(tokens: &[String]) -> Vec<String> {
    tokens
        .iter()
        .map(|t| synonym(t).map_or_else(|| t.clone(), String::from))
        .collect()
}

/// Seeded corpus counts for the grammar words: function words frequent,
/// content words spread over three orders of magnitude.
pub fn grammar_lexicon(seed: u64) -> Lexicon {
    let rng = Rng::new(seed).fork("lexicon");
    let mut lex = Lexicon::new();
    for (i, w) in grammar_words().into_iter().enumerate() {
        let mut r = rng.fork_index("word", i as u64);
        let function = G_DET.contains(&w) || G_PREP.contains(&w);
        let log10 = if function {
            r.uniform_range(4.0, 5.5)
        } else {
            r.uniform_range(1.0, 4.0)
        };
        lex.insert(w, 10f64.powf(log10).round() as u64);
    }
    lex
}

/// Reader model standing in for human eye tracking: slower, skips less,
/// more sensitive to length and regresses more than the default simulator.
pub fn human_simulator_params() -> SimulatorParams {
    SimulatorParams {
        skip_bias: -1.0,
        skip_length: 0.3,
        skip_frequency: 0.1,
        base_ms: 200.0,
        length_ms: 40.0,
        frequency_ms: 0.0,
        gamma_shape: 6.0,
        regression_prob: 0.2,
        ..SimulatorParams::default()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSizes {
    pub pairs: usize,
    pub compression: usize,
    pub gaze_sentences: usize,
    pub readers: usize,
}

impl Default for CorpusSizes {
    fn default() -> Self {
        CorpusSizes {
            pairs: 200,
            compression: 200,
            gaze_sentences: 100,
            readers: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpora {
    pub pairs: Vec<SentencePair>,
    pub compression: Vec<DeletionExample>,
    /// One record per (sentence, reader) from the "human" reader model.
    pub gaze: Vec<GazeRecord>,
    pub lexicon: Lexicon,
}

pub fn make_synthetic_task_corpora(seed: u64, sizes: CorpusSizes) -> Result<SyntheticCorpora> {
    make_synthetic_corpora_with(seed, sizes, &human_simulator_params())
}

/// [`make_synthetic_task_corpora`] with explicit simulated-reader parameters.
pub fn make_synthetic_corpora_with(seed: u64, sizes: CorpusSizes, human: &SimulatorParams) -> Result<SyntheticCorpora> {
    if [sizes.pairs, sizes.compression, sizes.gaze_sentences, sizes.readers].contains(&0) {
        return Err(Error::Contract(format!("corpus sizes must be positive: {sizes:?}")));
    }
    let root = Rng::new(seed);
    let pairs = grammar_sentences(root.fork("pairs").seed(), sizes.pairs)
        .into_iter()
        .map(|src| {
            let tgt = paraphrase(&src);
            SentencePair::new(src, tgt)
        })
        .collect::<Result<Vec<_>>>()?;
    let comp_rng = root.fork("compression").fork("grammar");
    let compression = (0..sizes.compression)
        .map(|i| {
            let s = grammar_sentence(&mut comp_rng.fork_index("sentence", i as u64));
            DeletionExample::new(s.tokens, s.keep)
        })
        .collect::<Result<Vec<_>>>()?;
    let lexicon = grammar_lexicon(root.fork("lexicon").seed());
    let gaze_rng = root.fork("gaze");
    let mut gaze = Vec::with_capacity(sizes.gaze_sentences * sizes.readers);
    for (i, sentence) in grammar_sentences(gaze_rng.fork("sentences").seed(), sizes.gaze_sentences)
        .iter()
        .enumerate()
    {
        for r in 0..sizes.readers {
            let seed = gaze_rng.fork_index("reader", (i * sizes.readers + r) as u64).seed();
            let mut rec = simulate_reading(sentence, &lexicon, human, seed)?;
            rec.sentence_id = format!("h{i}");
            rec.reader_id = format!("r{r}");
            gaze.push(rec.normalize());
        }
    }
    Ok(SyntheticCorpora {
        pairs,
        compression,
        gaze,
        lexicon,
    })
}

/// Per-tag counts, handy for reports.
pub fn tag_histogram(sentences: &[TaggedSentence]) -> BTreeMap<PosTag, usize> {
    let mut h = BTreeMap::new();
    for s in sentences {
        for t in &s.tags {
            *h.entry(*t).or_default() += 1;
        }
    }
    h
}
