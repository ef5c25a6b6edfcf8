//! Byte-class pre-tokenization.
//!
//! Bytes fall into four classes: letters (ASCII letters and every byte
//! >= 0x80), digits, whitespace and everything else. A piece is a maximal
//! run of one class. A single space directly before a letter, digit or
//! punctuation run is glued to that run, taken from the end of the
//! preceding whitespace run.

use std::ops::Range;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ByteClass {
    Letter = 0,
    Digit = 1,
    Space = 2,
    Other = 3,
}

const fn classify(b: u8) -> ByteClass {
    match b {
        b'a'..=b'z' | b'A'..=b'Z' | 0x80..=0xff => ByteClass::Letter,
        b'0'..=b'9' => ByteClass::Digit,
        b' ' | b'\t' | b'\n' | 0x0b | 0x0c | b'\r' => ByteClass::Space,
        _ => ByteClass::Other,
    }
}

static CLASS: [ByteClass; 256] = {
    let mut t = [ByteClass::Other; 256];
    let mut i = 0;
    while i < 256 {
        t[i] = classify(i as u8);
        i += 1;
    }
    t
};

#[inline]
pub fn byte_class(b: u8) -> ByteClass {
    CLASS[b as usize]
}

/// Run-boundary detection strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Backend {
    /// Wide path when the CPU supports it, scalar otherwise.
    #[default]
    Auto,
    Scalar,
    Wide,
}

impl Backend {
    fn use_wide(self) -> bool {
        match self {
            Backend::Scalar => false,
            Backend::Wide | Backend::Auto => wide::available(),
        }
    }
}

mod wide {
    /// Class bit planes for 16 bytes: bit0 set for digit/other, bit1 for
    /// space/other.
    #[cfg(target_arch = "x86_64")]
    #[inline]
    pub fn class_bits(chunk: &[u8; 16]) -> (u16, u16) {
        use std::arch::x86_64::*;
        // SAFETY: SSE2 is part of the x86_64 baseline.
        unsafe {
            let v = _mm_loadu_si128(chunk.as_ptr().cast());
            let between = |lo: u8, hi: u8| {
                _mm_and_si128(
                    _mm_cmpgt_epi8(v, _mm_set1_epi8(lo as i8 - 1)),
                    _mm_cmplt_epi8(v, _mm_set1_epi8(hi as i8 + 1)),
                )
            };
            let high = _mm_cmplt_epi8(v, _mm_setzero_si128());
            let letter = _mm_or_si128(_mm_or_si128(between(b'a', b'z'), between(b'A', b'Z')), high);
            let digit = between(b'0', b'9');
            let space = _mm_or_si128(between(0x09, 0x0d), _mm_cmpeq_epi8(v, _mm_set1_epi8(b' ' as i8)));
            let l = _mm_movemask_epi8(letter) as u16;
            let d = _mm_movemask_epi8(digit) as u16;
            let s = _mm_movemask_epi8(space) as u16;
            let other = !(l | d | s);
            (d | other, s | other)
        }
    }

    /// Portable fallback with the same contract, used off x86_64.
    #[cfg(not(target_arch = "x86_64"))]
    #[inline]
    pub fn class_bits(chunk: &[u8; 16]) -> (u16, u16) {
        let (mut b0, mut b1) = (0u16, 0u16);
        for (i, &b) in chunk.iter().enumerate() {
            let c = super::byte_class(b) as u16;
            b0 |= (c & 1) << i;
            b1 |= (c >> 1) << i;
        }
        (b0, b1)
    }

    pub fn available() -> bool {
        cfg!(target_arch = "x86_64")
    }
}

/// Yields the end offset of each maximal same-class run.
struct RunEnds<'a> {
    text: &'a [u8],
    pos: usize,
    wide: bool,
    chunk_base: usize,
    chunk_mask: u32,
}

impl<'a> RunEnds<'a> {
    fn new(text: &'a [u8], wide: bool) -> Self {
        Self {
            text,
            pos: 0,
            wide,
            chunk_base: usize::MAX,
            chunk_mask: 0,
        }
    }

    /// Boundary mask of the chunk at `base`: bit i set when byte base+i
    /// starts a new run.
    fn load_chunk(&mut self, base: usize) {
        let mut buf = [0u8; 16];
        let n = (self.text.len() - base).min(16);
        buf[..n].copy_from_slice(&self.text[base..base + n]);
        let (b0, b1) = wide::class_bits(&buf);
        let (p0, p1) = if base == 0 {
            (b0 & 1, b1 & 1)
        } else {
            let c = byte_class(self.text[base - 1]) as u16;
            (c & 1, c >> 1)
        };
        let changes = (b0 ^ ((b0 << 1) | p0)) | (b1 ^ ((b1 << 1) | p1));
        let valid = if n == 16 { u16::MAX } else { (1u16 << n) - 1 };
        // past the end counts as a boundary
        self.chunk_mask = (changes & valid) as u32 | (!(valid as u32) & 0xffff);
        self.chunk_base = base;
    }

    fn next_wide(&mut self) -> usize {
        let start = self.pos;
        let mut base = start & !15;
        loop {
            if self.chunk_base != base {
                self.load_chunk(base);
            }
            let from = if base == (start & !15) { (start & 15) + 1 } else { 0 };
            let m = if from >= 16 { 0 } else { self.chunk_mask >> from << from };
            if m != 0 {
                return (base + m.trailing_zeros() as usize).min(self.text.len());
            }
            base += 16;
            if base >= self.text.len() {
                return self.text.len();
            }
        }
    }

    fn next_scalar(&self) -> usize {
        let class = byte_class(self.text[self.pos]);
        let mut end = self.pos + 1;
        while end < self.text.len() && byte_class(self.text[end]) == class {
            end += 1;
        }
        end
    }
}

impl Iterator for RunEnds<'_> {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        if self.pos >= self.text.len() {
            return None;
        }
        let end = if self.wide { self.next_wide() } else { self.next_scalar() };
        self.pos = end;
        Some(end)
    }
}

/// Calls `f` with every piece range, in order, without allocating.
pub fn for_each_piece(text: &[u8], backend: Backend, mut f: impl FnMut(Range<usize>)) {
    let mut runs = RunEnds::new(text, backend.use_wide());
    let mut start = 0;
    let mut carry = false;
    let mut next = runs.next();
    while let Some(end) = next {
        next = runs.next();
        let piece_start = if carry { start - 1 } else { start };
        carry = false;
        if byte_class(text[start]) == ByteClass::Space {
            if next.is_some() && text[end - 1] == b' ' {
                if end - 1 > start {
                    f(start..end - 1);
                }
                carry = true;
            } else {
                f(start..end);
            }
        } else {
            f(piece_start..end);
        }
        start = end;
    }
}

/// Piece boundaries of `text`.
pub fn pretokenize(text: &[u8]) -> Vec<Range<usize>> {
    pretokenize_with(text, Backend::Auto)
}

pub fn pretokenize_with(text: &[u8], backend: Backend) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    for_each_piece(text, backend, |r| out.push(r));
    out
}
