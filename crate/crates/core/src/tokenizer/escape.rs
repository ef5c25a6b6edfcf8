//! `\xNN` byte escaping used by vocab and merges files.
//!
//! Printable ASCII other than backslash is written literally; every other
//! byte becomes `\x` plus two uppercase hex digits.

pub fn escape(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len());
    for &b in bytes {
        if b.is_ascii_graphic() && b != b'\\' {
            out.push(b as char);
        } else {
            out.push_str(&format!("\\x{b:02X}"));
        }
    }
    out
}

/// Inverse of [`escape`]. Literal non-ASCII characters contribute their
/// UTF-8 bytes.
pub fn unescape(s: &str) -> Result<Vec<u8>, String> {
    let mut out = Vec::with_capacity(s.len());
    let bytes = s.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'\\' {
            let hex = bytes
                .get(i + 1..i + 4)
                .filter(|h| h[0] == b'x')
                .ok_or_else(|| format!("bad escape at byte {i}"))?;
            let text = std::str::from_utf8(&hex[1..]).map_err(|_| format!("bad escape at byte {i}"))?;
            let v = u8::from_str_radix(text, 16).map_err(|_| format!("bad hex {text:?} at byte {i}"))?;
            out.push(v);
            i += 4;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    Ok(out)
}
