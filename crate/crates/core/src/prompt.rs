//! Prompt tokenization and source/edit word alignment.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::hash::{hash_str, ContentHasher};

/// A word of the prompt and the contiguous token range it occupies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordSpan {
    pub word: String,
    pub tokens: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedPrompt {
    pub text: String,
    pub token_ids: Vec<u32>,
    /// Ordered, non-overlapping; token 0 is the start token and never part of a word.
    pub word_spans: Vec<WordSpan>,
}

impl TokenizedPrompt {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.word_spans.iter().map(|w| w.word.as_str())
    }

    /// Token range of `word`, which must occur exactly once.
    pub fn unique_span(&self, word: &str) -> Result<(usize, Range<usize>)> {
        let hits: Vec<_> = self
            .word_spans
            .iter()
            .enumerate()
            .filter(|(_, w)| w.word == word)
            .collect();
        match hits.as_slice() {
            [] => Err(Error::UnknownWord { word: word.into(), prompt: self.text.clone() }),
            [(i, w)] => Ok((*i, w.tokens.clone())),
            _ => Err(Error::AmbiguousWord {
                word: word.into(),
                prompt: self.text.clone(),
                count: hits.len(),
            }),
        }
    }

    pub fn content_hash(&self) -> u64 {
        let mut h = ContentHasher::new("prompt");
        h.update(self.text.as_bytes());
        for id in &self.token_ids {
            h.update(&id.to_le_bytes());
        }
        h.finish()
    }

    fn validate(&self, context_length: usize) -> Result<()> {
        if self.token_ids.len() > context_length {
            return Err(Error::PromptTooLong { len: self.token_ids.len(), max: context_length });
        }
        let mut next = 1;
        for w in &self.word_spans {
            if w.tokens.start < next || w.tokens.end <= w.tokens.start || w.tokens.end > self.len() {
                return Err(Error::Tokenizer(format!(
                    "word span {:?} for `{}` is out of order or out of bounds",
                    w.tokens, w.word
                )));
            }
            next = w.tokens.end;
        }
        Ok(())
    }
}

pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Result<TokenizedPrompt>;
    /// Inverse of `tokenize` up to whitespace normalization; special tokens are skipped.
    fn detokenize(&self, token_ids: &[u32]) -> Result<String>;
    fn context_length(&self) -> usize;
}

pub const START_TOKEN: u32 = 0;
pub const DEFAULT_CONTEXT_LENGTH: usize = 77;

const CLOSING: &str = ".,;:!?)]}%";
const OPENING: &str = "([{";

/// Whitespace and punctuation tokenizer with hashed ids, one token per word.
///
/// Alphanumeric runs form words; every other non-space character is a word of its own.
pub struct WordTokenizer {
    context_length: usize,
    vocab: Mutex<HashMap<u32, String>>,
}

impl Default for WordTokenizer {
    fn default() -> Self {
        Self::new(DEFAULT_CONTEXT_LENGTH)
    }
}

impl WordTokenizer {
    pub fn new(context_length: usize) -> Self {
        Self { context_length, vocab: Mutex::new(HashMap::new()) }
    }

    pub fn token_id(piece: &str) -> u32 {
        (hash_str("word-token", piece) % (u32::MAX as u64 - 1)) as u32 + 1
    }
}

pub(crate) fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '_' {
            cur.push(ch);
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

impl Tokenizer for WordTokenizer {
    fn tokenize(&self, text: &str) -> Result<TokenizedPrompt> {
        let words = split_words(text);
        let mut token_ids = vec![START_TOKEN];
        let mut word_spans = Vec::with_capacity(words.len());
        let mut vocab = self.vocab.lock().expect("tokenizer vocabulary poisoned");
        for word in words {
            let id = Self::token_id(&word);
            match vocab.get(&id) {
                Some(existing) if existing != &word => {
                    return Err(Error::Tokenizer(format!(
                        "hash collision between `{existing}` and `{word}`"
                    )))
                }
                Some(_) => {}
                None => {
                    vocab.insert(id, word.clone());
                }
            }
            let pos = token_ids.len();
            token_ids.push(id);
            word_spans.push(WordSpan { word, tokens: pos..pos + 1 });
        }
        drop(vocab);
        let prompt = TokenizedPrompt { text: text.to_string(), token_ids, word_spans };
        prompt.validate(self.context_length)?;
        Ok(prompt)
    }

    fn detokenize(&self, token_ids: &[u32]) -> Result<String> {
        let vocab = self.vocab.lock().expect("tokenizer vocabulary poisoned");
        let mut out = String::new();
        let mut glue_next = true;
        for &id in token_ids {
            if id == START_TOKEN {
                continue;
            }
            let piece = vocab
                .get(&id)
                .ok_or_else(|| Error::Tokenizer(format!("unknown token id {id}")))?;
            let closing = piece.chars().count() == 1 && CLOSING.contains(piece.as_str());
            if !glue_next && !closing {
                out.push(' ');
            }
            out.push_str(piece);
            glue_next = piece.chars().count() == 1 && OPENING.contains(piece.as_str());
        }
        Ok(out)
    }

    fn context_length(&self) -> usize {
        self.context_length
    }
}

/// One replaced word: its token range in the source prompt and in the edit prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanPair {
    pub source: Range<usize>,
    pub edit: Range<usize>,
}

/// Which words are swapped between the source and edit prompts, plus the blender switches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditSpec {
    pairs: Vec<SpanPair>,
    enable_cross: bool,
    enable_spatial: bool,
    source_len: usize,
    edit_len: usize,
}

impl EditSpec {
    pub fn new(
        pairs: Vec<SpanPair>,
        enable_cross: bool,
        enable_spatial: bool,
        source_len: usize,
        edit_len: usize,
    ) -> Result<Self> {
        let spec = Self { pairs, enable_cross, enable_spatial, source_len, edit_len };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if self.enable_spatial && !self.enable_cross {
            return Err(Error::InvalidEditSpec(
                "spatial blending requires cross blending to be enabled".into(),
            ));
        }
        if self.enable_spatial && self.pairs.is_empty() {
            return Err(Error::InvalidEditSpec(
                "spatial blending needs at least one edited word".into(),
            ));
        }
        let check = |spans: Vec<&Range<usize>>, len: usize, side: &str| -> Result<usize> {
            let mut next = 1;
            let mut total = 0;
            for s in spans {
                if s.start < next || s.end <= s.start || s.end > len {
                    return Err(Error::InvalidEditSpec(format!(
                        "{side} span {s:?} out of order or out of bounds (length {len})"
                    )));
                }
                next = s.end;
                total += s.len();
            }
            Ok(total)
        };
        let src_total = check(self.pairs.iter().map(|p| &p.source).collect(), self.source_len, "source")?;
        let edit_total = check(self.pairs.iter().map(|p| &p.edit).collect(), self.edit_len, "edit")?;
        if self.source_len - src_total != self.edit_len - edit_total {
            return Err(Error::InvalidEditSpec(
                "prompts differ in length outside the edited spans".into(),
            ));
        }
        if !self.enable_cross && self.pairs.iter().any(|p| p.source.len() != p.edit.len()) {
            return Err(Error::InvalidEditSpec(
                "spans of unequal token length require cross blending".into(),
            ));
        }
        Ok(())
    }

    /// Same pairs with different blender switches.
    pub fn with_flags(self, enable_cross: bool, enable_spatial: bool) -> Result<Self> {
        Self::new(self.pairs, enable_cross, enable_spatial, self.source_len, self.edit_len)
    }

    pub fn pairs(&self) -> &[SpanPair] {
        &self.pairs
    }

    pub fn num_edits(&self) -> usize {
        self.pairs.len()
    }

    pub fn enable_cross(&self) -> bool {
        self.enable_cross
    }

    pub fn enable_spatial(&self) -> bool {
        self.enable_spatial
    }

    pub fn source_len(&self) -> usize {
        self.source_len
    }

    pub fn edit_len(&self) -> usize {
        self.edit_len
    }

    pub fn source_spans(&self) -> Vec<Range<usize>> {
        self.pairs.iter().map(|p| p.source.clone()).collect()
    }

    pub fn edit_spans(&self) -> Vec<Range<usize>> {
        self.pairs.iter().map(|p| p.edit.clone()).collect()
    }

    pub fn is_edited_token(&self, edit_token: usize) -> bool {
        self.pairs.iter().any(|p| p.edit.contains(&edit_token))
    }

    /// Source token aligned with a non-edited edit token; `None` inside edited spans.
    pub fn source_token_for(&self, edit_token: usize) -> Option<usize> {
        let mut shift: isize = 0;
        for p in &self.pairs {
            if p.edit.contains(&edit_token) {
                return None;
            }
            if p.edit.end <= edit_token {
                shift += p.source.len() as isize - p.edit.len() as isize;
            }
        }
        Some((edit_token as isize + shift) as usize)
    }

    /// Roles swapped: edit prompt becomes the source.
    pub fn mirrored(&self) -> Self {
        Self {
            pairs: self
                .pairs
                .iter()
                .map(|p| SpanPair { source: p.edit.clone(), edit: p.source.clone() })
                .collect(),
            enable_cross: self.enable_cross,
            enable_spatial: self.enable_spatial,
            source_len: self.edit_len,
            edit_len: self.source_len,
        }
    }
}

/// Aligns `(source word, edit word)` replacements between two prompts.
///
/// Only one-to-one replacements are supported: both prompts must have the
/// same word count, each replaced word sits at the same word position, and
/// every other token is identical. Both blenders are enabled when at least
/// one word is replaced.
pub fn align_edit_words(
    source: &TokenizedPrompt,
    edit: &TokenizedPrompt,
    word_pairs: &[(&str, &str)],
) -> Result<EditSpec> {
    if source.word_spans.len() != edit.word_spans.len() {
        return Err(Error::Misaligned(format!(
            "`{}` has {} words but `{}` has {}; only one-to-one replacements are supported",
            source.text,
            source.word_spans.len(),
            edit.text,
            edit.word_spans.len()
        )));
    }
    let mut located = Vec::with_capacity(word_pairs.len());
    for (sw, ew) in word_pairs {
        let (si, sspan) = source.unique_span(sw)?;
        let (ei, espan) = edit.unique_span(ew)?;
        if si != ei {
            return Err(Error::Misaligned(format!(
                "`{sw}` is word {si} of the source but `{ew}` is word {ei} of the edit prompt"
            )));
        }
        if located.iter().any(|(i, _)| *i == si) {
            return Err(Error::Misaligned(format!("word position {si} is edited twice")));
        }
        located.push((si, SpanPair { source: sspan, edit: espan }));
    }
    located.sort_by_key(|(i, _)| *i);
    let pairs: Vec<SpanPair> = located.into_iter().map(|(_, p)| p).collect();

    let kept = |prompt: &TokenizedPrompt, spans: Vec<&Range<usize>>| -> Vec<u32> {
        prompt
            .token_ids
            .iter()
            .enumerate()
            .filter(|(j, _)| !spans.iter().any(|s| s.contains(j)))
            .map(|(_, id)| *id)
            .collect()
    };
    let src_kept = kept(source, pairs.iter().map(|p| &p.source).collect());
    let edit_kept = kept(edit, pairs.iter().map(|p| &p.edit).collect());
    if src_kept != edit_kept {
        let diff = source
            .word_spans
            .iter()
            .zip(&edit.word_spans)
            .find(|(a, b)| {
                a.word != b.word && !pairs.iter().any(|p| p.source == a.tokens)
            })
            .map(|(a, b)| format!("`{}` vs `{}`", a.word, b.word))
            .unwrap_or_else(|| "token structure differs".into());
        return Err(Error::Misaligned(format!("non-edited words differ: {diff}")));
    }
    let spatial = !pairs.is_empty();
    EditSpec::new(pairs, true, spatial, source.len(), edit.len())
}

/// Parses `"src->edit"` pair notation.
pub fn parse_word_pair(s: &str) -> Result<(String, String)> {
    let (a, b) = s
        .split_once("->")
        .ok_or_else(|| Error::config("edit_words", format!("`{s}` is not of the form src->edit")))?;
    let (a, b) = (a.trim(), b.trim());
    if a.is_empty() || b.is_empty() {
        return Err(Error::config("edit_words", format!("`{s}` has an empty side")));
    }
    Ok((a.to_string(), b.to_string()))
}
