//! Corpus loading, the held-out split, and a seeded synthetic text generator for when no
//! real text is at hand.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::math::RngState;
use crate::model::tokenize;

/// Tokenized text of one category, split into a training prefix and a held-out suffix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub category: String,
    pub train: Vec<usize>,
    pub held_out: Vec<usize>,
}

/// Held-out share: the last tenth of every corpus, rounded down.
pub fn split_tokens(tokens: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let held = tokens.len() / 10;
    let cut = tokens.len() - held;
    (tokens[..cut].to_vec(), tokens[cut..].to_vec())
}

/// Bytes of a file, or of every regular file in a directory in name order.
fn read_source(path: &Path) -> Result<Vec<u8>> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if !meta.is_dir() {
        return fs::read(path).map_err(|e| Error::io(path, e));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(path, e)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let mut bytes = Vec::new();
    for f in files {
        bytes.extend(fs::read(&f).map_err(|e| Error::io(&f, e))?);
    }
    Ok(bytes)
}

pub fn load_corpus(paths: &BTreeMap<String, PathBuf>) -> Result<Vec<Dataset>> {
    if paths.is_empty() {
        return Err(Error::Config("no corpus categories configured".into()));
    }
    paths
        .iter()
        .map(|(category, path)| {
            let bytes = read_source(path)?;
            if bytes.len() < 20 {
                return Err(Error::Config(format!(
                    "corpus '{category}' at {} holds {} bytes; at least 20 are needed",
                    path.display(),
                    bytes.len()
                )));
            }
            let (train, held_out) = split_tokens(&tokenize(&bytes));
            Ok(Dataset {
                category: category.clone(),
                train,
                held_out,
            })
        })
        .collect()
}

/// Categories the synthetic generator knows.
pub const SYNTHETIC_CATEGORIES: [&str; 3] = ["narrative", "technical", "dialogue"];

struct Lexicon {
    subjects: &'static [&'static str],
    verbs: &'static [&'static str],
    objects: &'static [&'static str],
    modifiers: &'static [&'static str],
    links: &'static [&'static str],
}

const NARRATIVE: Lexicon = Lexicon {
    subjects: &[
        "the old sailor",
        "a young girl",
        "the miller",
        "her brother",
        "the stranger",
        "the king",
    ],
    verbs: &[
        "walked toward",
        "looked at",
        "remembered",
        "carried",
        "followed",
        "forgot",
    ],
    objects: &[
        "the harbor",
        "a broken lantern",
        "the river",
        "the silent village",
        "an empty house",
        "the winter road",
    ],
    modifiers: &[
        "at dawn",
        "without a word",
        "in the rain",
        "for a long time",
        "once more",
    ],
    links: &["and then", "but", "while", "because", "until"],
};

const TECHNICAL: Lexicon = Lexicon {
    subjects: &[
        "the parser",
        "each worker",
        "the scheduler",
        "the cache",
        "this module",
        "the compiler",
    ],
    verbs: &[
        "allocates",
        "validates",
        "returns",
        "updates",
        "rejects",
        "serializes",
    ],
    objects: &[
        "the request buffer",
        "a sorted index",
        "every pending task",
        "the config file",
        "a checksum",
        "the output stream",
    ],
    modifiers: &[
        "in constant time",
        "before the commit",
        "on every call",
        "when the lock is held",
        "after startup",
    ],
    links: &["so that", "unless", "and", "because", "which means"],
};

const DIALOGUE: Lexicon = Lexicon {
    subjects: &["i", "you", "we", "they", "my friend", "nobody"],
    verbs: &[
        "really think",
        "never said",
        "want",
        "told me about",
        "heard",
        "asked for",
    ],
    objects: &[
        "that story",
        "the answer",
        "some coffee",
        "a second chance",
        "the truth",
        "your help",
    ],
    modifiers: &["right now", "yesterday", "honestly", "again", "tonight"],
    links: &["but", "and", "so", "if", "because"],
};

fn pick<'a>(rng: &mut RngState, items: &[&'a str]) -> &'a str {
    items[rng.below(items.len())]
}

fn clause(rng: &mut RngState, lex: &Lexicon, depth: usize, out: &mut String) {
    out.push_str(pick(rng, lex.subjects));
    out.push(' ');
    out.push_str(pick(rng, lex.verbs));
    out.push(' ');
    out.push_str(pick(rng, lex.objects));
    if rng.uniform() < 0.5 {
        out.push(' ');
        out.push_str(pick(rng, lex.modifiers));
    }
    if depth < 2 && rng.uniform() < 0.4 {
        out.push_str(", ");
        out.push_str(pick(rng, lex.links));
        out.push(' ');
        clause(rng, lex, depth + 1, out);
    }
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Seeded pseudo-English text of roughly `bytes` bytes in one of the
/// [`SYNTHETIC_CATEGORIES`]. Sentences nest up to three clauses.
pub fn synthetic_text(category: &str, bytes: usize, seed: u64) -> Result<String> {
    let (lex, index) = match category {
        "narrative" => (&NARRATIVE, 0),
        "technical" => (&TECHNICAL, 1),
        "dialogue" => (&DIALOGUE, 2),
        other => {
            return Err(Error::Config(format!(
                "unknown synthetic category '{other}'; expected one of {SYNTHETIC_CATEGORIES:?}"
            )))
        }
    };
    let mut rng = RngState::new(seed).fork(index);
    let mut text = String::with_capacity(bytes + 128);
    while text.len() < bytes {
        let mut sentence = String::new();
        clause(&mut rng, lex, 0, &mut sentence);
        if category == "dialogue" {
            text.push('"');
            text.push_str(&capitalize(&sentence));
            text.push_str(if rng.uniform() < 0.3 {
                "?\"\n"
            } else {
                ".\"\n"
            });
        } else {
            text.push_str(&capitalize(&sentence));
            text.push_str(". ");
            if rng.uniform() < 0.15 {
                text.push('\n');
            }
        }
    }
    text.truncate(bytes);
    Ok(text)
}

/// Writes one synthetic file per category into `dir` and returns the category map.
pub fn write_synthetic_corpus(
    dir: &Path,
    categories: &[&str],
    bytes: usize,
    seed: u64,
) -> Result<BTreeMap<String, PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for &c in categories {
        let path = dir.join(format!("{c}.txt"));
        fs::write(&path, synthetic_text(c, bytes, seed)?).map_err(|e| Error::io(&path, e))?;
        out.insert(c.to_string(), path);
    }
    Ok(out)
}
