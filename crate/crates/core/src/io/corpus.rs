//! Corpus text format.
//!
//! One example per line: prompt token ids separated by spaces, then
//! optionally a TAB and the target ids. A target may end with the terminal
//! id; it is implied otherwise. An empty target field means "no target", so
//! an empty target is written as the bare terminal id. Lines starting with
//! `#` and lines that are blank (no TAB) are skipped, so an empty prompt is
//! written with a TAB.
//! Prompt ids are assigned in file order starting at 0.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::seq::{Prompt, TokenId, TokenSequence, Vocabulary};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusEntry {
    pub prompt: Prompt,
    pub target: Option<TokenSequence>,
}

fn parse_err(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, column, message: message.into() }
}

/// Parses whitespace-separated ids starting at 1-based `col0`.
fn parse_ids(field: &str, line: usize, col0: usize) -> Result<Vec<(TokenId, usize)>> {
    let mut out = Vec::new();
    let mut chars = field.char_indices().peekable();
    while let Some(&(i, c)) = chars.peek() {
        if c == ' ' {
            chars.next();
            continue;
        }
        let start = i;
        let mut end = i;
        while let Some(&(j, c)) = chars.peek() {
            if c == ' ' {
                break;
            }
            end = j + c.len_utf8();
            chars.next();
        }
        let word = &field[start..end];
        let column = col0 + field[..start].chars().count();
        let id: TokenId = word
            .parse()
            .map_err(|_| parse_err(line, column, format!("malformed token id {word:?}")))?;
        out.push((id, column));
    }
    Ok(out)
}

pub fn parse_corpus_str(text: &str, vocab: &Vocabulary) -> Result<Vec<CorpusEntry>> {
    let mut entries = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        if raw.starts_with('#') || (!raw.contains('\t') && raw.trim().is_empty()) {
            continue;
        }
        let (prompt_part, target_part) = match raw.split_once('\t') {
            Some((p, t)) => (p, Some(t)),
            None => (raw, None),
        };
        if let Some(t) = target_part {
            if let Some(extra) = t.find('\t') {
                let column = prompt_part.chars().count() + 2 + t[..extra].chars().count();
                return Err(parse_err(line, column, "more than one TAB on a line"));
            }
        }

        let mut prompt = Vec::new();
        for (id, column) in parse_ids(prompt_part, line, 1)? {
            if id == vocab.terminal() {
                return Err(parse_err(line, column, "terminal token is not allowed in a prompt"));
            }
            if !vocab.is_ordinary(id) {
                return Err(parse_err(line, column, format!("token {id} outside vocabulary of size {}", vocab.size())));
            }
            prompt.push(id);
        }

        let target = match target_part {
            Some(t) if t.trim().is_empty() => None,
            None => None,
            Some(t) => {
                let col0 = prompt_part.chars().count() + 2;
                let ids = parse_ids(t, line, col0)?;
                let mut toks = Vec::with_capacity(ids.len());
                for (k, &(id, column)) in ids.iter().enumerate() {
                    if id == vocab.terminal() {
                        if k + 1 != ids.len() {
                            return Err(parse_err(line, column, "terminal token before the end of the target"));
                        }
                    } else if !vocab.is_ordinary(id) {
                        return Err(parse_err(
                            line,
                            column,
                            format!("token {id} outside vocabulary of size {}", vocab.size()),
                        ));
                    } else {
                        toks.push(id);
                    }
                }
                Some(TokenSequence::new(vocab, toks, true)?)
            }
        };
        let id = entries.len() as u32;
        entries.push(CorpusEntry { prompt: Prompt { id, tokens: prompt }, target });
    }
    Ok(entries)
}

pub fn parse_corpus(path: &Path, vocab: &Vocabulary) -> Result<Vec<CorpusEntry>> {
    parse_corpus_str(&std::fs::read_to_string(path)?, vocab)
}

fn join(ids: &[TokenId]) -> String {
    let mut s = String::new();
    for (i, t) in ids.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{t}").expect("writing to a String");
    }
    s
}

/// Renders entries in the corpus format. Terminals are left implicit except
/// for empty targets.
pub fn write_corpus(entries: &[CorpusEntry], vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&join(&e.prompt.tokens));
        match &e.target {
            Some(t) => {
                out.push('\t');
                if t.is_empty() {
                    write!(out, "{}", vocab.terminal()).expect("writing to a String");
                } else {
                    out.push_str(&join(t.tokens()));
                }
            }
            None if e.prompt.tokens.is_empty() => out.push('\t'),
            None => {}
        }
        out.push('\n');
    }
    out
}
