//! Byte-level BPE tokenizer.
//!
//! Every byte is a base token; merges apply in rank order (rank = position
//! in the merges file). Merges live in a [`MergeTable`] packed four entries
//! to a 64-byte line, and encoding walks a linked list of 16-byte
//! [`SymbolNode`]s held in reusable [`EncodeScratch`] so the steady-state
//! encode path does not allocate.

mod escape;
mod merge_table;
mod pretok;
pub mod synthetic;

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use escape::{escape, unescape};
pub use merge_table::{Bucket, MergeEntry, MergeTable, EMPTY_RANK};
pub use pretok::{byte_class, for_each_piece, pretokenize, pretokenize_with, Backend, ByteClass};

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("{file} line {line}: {msg}")]
    Parse { file: &'static str, line: usize, msg: String },
    #[error("merges line {line}: duplicate merge {left:?} {right:?}")]
    DuplicateMerge { line: usize, left: String, right: String },
    #[error("invalid token id {0}")]
    InvalidId(u32),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    /// Vocab file (`token<TAB>id` lines). Byte-level only when unset.
    pub vocab: Option<String>,
    /// Merges file (`left right` lines in rank order).
    pub merges: Option<String>,
}

const NONE: u32 = u32::MAX;

/// One symbol in the encode list.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SymbolNode {
    pub token: u32,
    pub prev: u32,
    pub next: u32,
    /// Bytes covered; 0 marks a node absorbed by its left neighbour.
    pub len: u32,
}

const _: () = assert!(std::mem::size_of::<SymbolNode>() == 16);

/// Per-worker state reused across encode calls.
#[derive(Debug, Default)]
pub struct EncodeScratch {
    nodes: Vec<SymbolNode>,
    heap: BinaryHeap<Reverse<(u32, u32, u32, u32)>>,
}

impl EncodeScratch {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(bytes: usize) -> Self {
        Self {
            nodes: Vec::with_capacity(bytes),
            heap: BinaryHeap::with_capacity(bytes),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    tokens: Vec<Option<Box<[u8]>>>,
    byte_ids: [u32; 256],
    merges: MergeTable,
    /// `(left, right)` in rank order, for writing merges back out.
    merge_list: Vec<(u32, u32)>,
    backend: Backend,
}

fn parse_err(file: &'static str, line: usize, msg: impl Into<String>) -> TokenizerError {
    TokenizerError::Parse {
        file,
        line,
        msg: msg.into(),
    }
}

struct Builder {
    tokens: Vec<Option<Box<[u8]>>>,
    ids: HashMap<Vec<u8>, u32>,
}

impl Builder {
    fn add(&mut self, bytes: Vec<u8>, id: u32) {
        let idx = id as usize;
        if self.tokens.len() <= idx {
            self.tokens.resize(idx + 1, None);
        }
        self.tokens[idx] = Some(bytes.clone().into_boxed_slice());
        self.ids.insert(bytes, id);
    }

    fn intern(&mut self, bytes: Vec<u8>) -> u32 {
        if let Some(&id) = self.ids.get(&bytes) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.add(bytes, id);
        id
    }
}

impl Tokenizer {
    /// Byte-level tokenizer with no merges.
    pub fn byte_level() -> Self {
        Self::from_merges(&[]).expect("no merges cannot fail")
    }

    /// Ids 0..=255 are the bytes; merged tokens get ids in rank order.
    pub fn from_merges(merges: &[(Vec<u8>, Vec<u8>)]) -> Result<Self, TokenizerError> {
        let mut b = Builder {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for byte in 0..=255u8 {
            b.add(vec![byte], byte as u32);
        }
        let mut pairs = Vec::with_capacity(merges.len());
        for (i, (l, r)) in merges.iter().enumerate() {
            let line = i + 1;
            let left = *b.ids.get(l).ok_or_else(|| parse_err("merges", line, format!("unknown token {:?}", escape(l))))?;
            let right = *b.ids.get(r).ok_or_else(|| parse_err("merges", line, format!("unknown token {:?}", escape(r))))?;
            let merged = [l.as_slice(), r.as_slice()].concat();
            b.intern(merged.clone());
            pairs.push((line, left, right, merged));
        }
        Self::finish(b, pairs)
    }

    fn finish(mut b: Builder, pairs: Vec<(usize, u32, u32, Vec<u8>)>) -> Result<Self, TokenizerError> {
        let mut table = MergeTable::with_capacity(pairs.len());
        let mut merge_list = Vec::with_capacity(pairs.len());
        for (rank, (line, left, right, merged)) in pairs.into_iter().enumerate() {
            let merged = b.intern(merged);
            if !table.insert(left, right, merged, rank as u32) {
                let name = |id: u32| escape(b.tokens[id as usize].as_deref().unwrap_or(&[]));
                return Err(TokenizerError::DuplicateMerge {
                    line,
                    left: name(left),
                    right: name(right),
                });
            }
            merge_list.push((left, right));
        }
        let mut byte_ids = [0u32; 256];
        for (byte, slot) in byte_ids.iter_mut().enumerate() {
            *slot = b.ids[&vec![byte as u8]];
        }
        Ok(Self {
            tokens: b.tokens,
            byte_ids,
            merges: table,
            merge_list,
            backend: Backend::Auto,
        })
    }

    /// Parses vocab and merges text. Bytes missing from the vocab get
    /// fresh ids after the largest listed id.
    pub fn load(vocab: &str, merges: &str) -> Result<Self, TokenizerError> {
        let mut b = Builder {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for (i, raw) in vocab.lines().enumerate() {
            let line = i + 1;
            if raw.is_empty() {
                continue;
            }
            let (tok, id) = raw
                .split_once('\t')
                .ok_or_else(|| parse_err("vocab", line, "expected token<TAB>id"))?;
            let bytes = unescape(tok).map_err(|m| parse_err("vocab", line, m))?;
            if bytes.is_empty() {
                return Err(parse_err("vocab", line, "empty token"));
            }
            let id: u32 = id
                .trim()
                .parse()
                .map_err(|_| parse_err("vocab", line, format!("bad id {id:?}")))?;
            if id == NONE {
                return Err(parse_err("vocab", line, "id out of range"));
            }
            if b.ids.contains_key(&bytes) {
                return Err(parse_err("vocab", line, format!("duplicate token {tok:?}")));
            }
            if b.tokens.get(id as usize).is_some_and(Option::is_some) {
                return Err(parse_err("vocab", line, format!("duplicate id {id}")));
            }
            b.add(bytes, id);
        }
        for byte in 0..=255u8 {
            b.intern(vec![byte]);
        }
        let mut pairs = Vec::new();
        for (i, raw) in merges.lines().enumerate() {
            let line = i + 1;
            if raw.is_empty() || raw.starts_with('#') {
                continue;
            }
            let mut fields = raw.split(' ');
            let (Some(l), Some(r), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(parse_err("merges", line, "expected `left right`"));
            };
            let l = unescape(l).map_err(|m| parse_err("merges", line, m))?;
            let r = unescape(r).map_err(|m| parse_err("merges", line, m))?;
            let left = *b
                .ids
                .get(&l)
                .ok_or_else(|| parse_err("merges", line, format!("unknown token {:?}", escape(&l))))?;
            let right = *b
                .ids
                .get(&r)
                .ok_or_else(|| parse_err("merges", line, format!("unknown token {:?}", escape(&r))))?;
            pairs.push((line, left, right, [l, r].concat()));
            // later merges may reference this one's output
            let merged = pairs.last().unwrap().3.clone();
            b.intern(merged);
        }
        Self::finish(b, pairs)
    }

    pub fn load_files(vocab: Option<&Path>, merges: Option<&Path>) -> Result<Self, TokenizerError> {
        let read = |p: Option<&Path>| -> Result<String, TokenizerError> {
            match p {
                None => Ok(String::new()),
                Some(p) => std::fs::read_to_string(p).map_err(|source| TokenizerError::Io {
                    path: p.display().to_string(),
                    source,
                }),
            }
        };
        Self::load(&read(vocab)?, &read(merges)?)
    }

    pub fn from_config(cfg: &TokenizerConfig) -> Result<Self, TokenizerError> {
        Self::load_files(cfg.vocab.as_deref().map(Path::new), cfg.merges.as_deref().map(Path::new))
    }

    pub fn with_backend(mut self, backend: Backend) -> Self {
        self.backend = backend;
        self
    }

    /// One past the largest token id.
    pub fn vocab_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn merge_count(&self) -> usize {
        self.merge_list.len()
    }

    pub fn merge_table(&self) -> &MergeTable {
        &self.merges
    }

    pub fn byte_id(&self, b: u8) -> u32 {
        self.byte_ids[b as usize]
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).and_then(|t| t.as_deref())
    }

    /// Ranked merge lookup on token ids.
    pub fn merge(&self, left: u32, right: u32) -> Option<(u32, u32)> {
        self.merges.lookup(left, right)
    }

    pub fn vocab_text(&self) -> String {
        let mut out = String::new();
        for (id, t) in self.tokens.iter().enumerate() {
            if let Some(t) = t {
                out.push_str(&format!("{}\t{id}\n", escape(t)));
            }
        }
        out
    }

    pub fn merges_text(&self) -> String {
        let mut out = String::new();
        for &(l, r) in &self.merge_list {
            let (l, r) = (self.token_bytes(l).unwrap(), self.token_bytes(r).unwrap());
            out.push_str(&format!("{} {}\n", escape(l), escape(r)));
        }
        out
    }

    pub fn encode(&self, text: &[u8]) -> Vec<u32> {
        let mut scratch = EncodeScratch::with_capacity(text.len());
        let mut out = Vec::with_capacity(text.len());
        self.encode_into(text, &mut scratch, &mut out);
        out
    }

    /// Appends the ids of `text` to `out`, reusing `scratch`.
    pub fn encode_into(&self, text: &[u8], scratch: &mut EncodeScratch, out: &mut Vec<u32>) {
        for_each_piece(text, self.backend, |r| self.encode_piece(&text[r], scratch, out));
    }

    fn push_pair(&self, scratch: &mut EncodeScratch, i: u32) {
        let left = scratch.nodes[i as usize];
        if left.next == NONE {
            return;
        }
        let right = scratch.nodes[left.next as usize];
        if let Some((_, rank)) = self.merges.lookup(left.token, right.token) {
            scratch.heap.push(Reverse((rank, i, left.token, right.token)));
        }
    }

    fn encode_piece(&self, piece: &[u8], scratch: &mut EncodeScratch, out: &mut Vec<u32>) {
        if piece.len() == 1 {
            out.push(self.byte_ids[piece[0] as usize]);
            return;
        }
        let n = piece.len() as u32;
        scratch.nodes.clear();
        scratch.nodes.extend(piece.iter().enumerate().map(|(i, &b)| {
            let i = i as u32;
            SymbolNode {
                token: self.byte_ids[b as usize],
                prev: if i == 0 { NONE } else { i - 1 },
                next: if i + 1 == n { NONE } else { i + 1 },
                len: 1,
            }
        }));
        scratch.heap.clear();
        for i in 0..n - 1 {
            self.push_pair(scratch, i);
        }
        while let Some(Reverse((_, i, lt, rt))) = scratch.heap.pop() {
            let left = scratch.nodes[i as usize];
            if left.len == 0 || left.token != lt || left.next == NONE {
                continue;
            }
            let j = left.next;
            let right = scratch.nodes[j as usize];
            if right.token != rt {
                continue;
            }
            let (merged, _) = self.merges.lookup(lt, rt).expect("pair was mergeable");
            let node = &mut scratch.nodes[i as usize];
            node.token = merged;
            node.len += right.len;
            node.next = right.next;
            scratch.nodes[j as usize].len = 0;
            if right.next != NONE {
                scratch.nodes[right.next as usize].prev = i;
            }
            if left.prev != NONE {
                self.push_pair(scratch, left.prev);
            }
            self.push_pair(scratch, i);
        }
        let mut i = 0;
        while i != NONE {
            let node = scratch.nodes[i as usize];
            out.push(node.token);
            i = node.next;
        }
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>, TokenizerError> {
        let mut out = Vec::new();
        self.decode_into(ids, &mut out)?;
        Ok(out)
    }

    pub fn decode_into(&self, ids: &[u32], out: &mut Vec<u8>) -> Result<(), TokenizerError> {
        for &id in ids {
            out.extend_from_slice(self.token_bytes(id).ok_or(TokenizerError::InvalidId(id))?);
        }
        Ok(())
    }
}

/// Streams text out of token ids, holding back bytes until they form
/// complete UTF-8 characters. Invalid sequences become U+FFFD.
#[derive(Debug, Default, Clone)]
pub struct IncrementalDecoder {
    pending: Vec<u8>,
}

impl IncrementalDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tok: &Tokenizer, ids: &[u32]) -> Result<String, TokenizerError> {
        tok.decode_into(ids, &mut self.pending)?;
        let mut text = String::new();
        let mut consumed = 0;
        loop {
            match std::str::from_utf8(&self.pending[consumed..]) {
                Ok(s) => {
                    text.push_str(s);
                    consumed = self.pending.len();
                    break;
                }
                Err(e) => {
                    let valid = e.valid_up_to();
                    text.push_str(std::str::from_utf8(&self.pending[consumed..consumed + valid]).unwrap());
                    consumed += valid;
                    match e.error_len() {
                        Some(bad) => {
                            text.push(char::REPLACEMENT_CHARACTER);
                            consumed += bad;
                        }
                        None => break,
                    }
                }
            }
        }
        self.pending.drain(..consumed);
        Ok(text)
    }

    /// Flushes held-back bytes.
    pub fn finish(&mut self) -> String {
        let s = String::from_utf8_lossy(&self.pending).into_owned();
        self.pending.clear();
        s
    }

    pub fn pending_bytes(&self) -> usize {
        self.pending.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abc() -> Tokenizer {
        Tokenizer::from_merges(&[(b"a".to_vec(), b"b".to_vec()), (b"ab".to_vec(), b"c".to_vec())]).unwrap()
    }

    #[test]
    fn merges_apply_in_rank_order() {
        let t = abc();
        let ids = t.encode(b"abc");
        assert_eq!(ids.len(), 1);
        assert_eq!(t.token_bytes(ids[0]).unwrap(), b"abc");
        assert!(t.encode(b"").is_empty());
    }

    #[test]
    fn load_assigns_file_order_ranks() {
        let t = Tokenizer::load("", "a b\nab c\n").unwrap();
        let ab = t.merge(t.byte_id(b'a'), t.byte_id(b'b')).unwrap();
        assert_eq!(ab.1, 0);
        assert_eq!(t.merge(ab.0, t.byte_id(b'c')).unwrap().1, 1);
    }

    #[test]
    fn duplicate_merge_rejected() {
        let err = Tokenizer::load("", "a b\nx y\na b\n").unwrap_err();
        assert!(matches!(err, TokenizerError::DuplicateMerge { line: 3, .. }), "{err}");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = Tokenizer::load("a\t0\nbad line\n", "").unwrap_err();
        assert!(matches!(err, TokenizerError::Parse { file: "vocab", line: 2, .. }));
        let err = Tokenizer::load("", "a\n").unwrap_err();
        assert!(matches!(err, TokenizerError::Parse { file: "merges", line: 1, .. }));
    }

    #[test]
    fn empty_merges_is_byte_level() {
        let t = Tokenizer::load("", "").unwrap();
        assert_eq!(t.vocab_len(), 256);
        assert_eq!(t.encode(b"hi"), vec![b'h' as u32, b'i' as u32]);
    }

    #[test]
    fn vocab_ids_are_respected() {
        let t = Tokenizer::load("hi\t1000\n", "h i\n").unwrap();
        assert_eq!(t.encode(b"hi"), vec![1000]);
        assert_eq!(t.decode(&[1000]).unwrap(), b"hi");
    }

    #[test]
    fn text_round_trip() {
        let t = abc();
        let again = Tokenizer::load(&t.vocab_text(), &t.merges_text()).unwrap();
        assert_eq!(again.encode(b"abcab abc"), t.encode(b"abcab abc"));
        let s = b"The quick brown fox";
        assert_eq!(t.decode(&t.encode(s)).unwrap(), s);
        assert!(t.decode(&[]).unwrap().is_empty());
        assert!(matches!(t.decode(&[99_999]), Err(TokenizerError::InvalidId(99_999))));
    }

    #[test]
    fn incremental_decoder_waits_for_full_chars() {
        let t = Tokenizer::byte_level();
        let bytes = "héllo".as_bytes();
        let mut d = IncrementalDecoder::new();
        assert_eq!(d.push(&t, &[bytes[0] as u32, bytes[1] as u32]).unwrap(), "h");
        assert_eq!(d.pending_bytes(), 1);
        let rest: Vec<u32> = bytes[2..].iter().map(|&b| b as u32).collect();
        assert_eq!(d.push(&t, &rest).unwrap(), "éllo");
        assert_eq!(d.push(&t, &[0xff]).unwrap(), "\u{fffd}");
        assert_eq!(d.finish(), "");
    }
}
