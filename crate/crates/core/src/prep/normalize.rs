//! Escape recovery and case folding for raw payloads.
//!
//! One decoding round scans the payload left to right and decodes, in a
//! single pass, percent-encodings (`%3C`), C-style byte and unicode escapes
//! (`\x3c`, `\u003c`) and the common HTML entities (`&lt;`, `&#60;`,
//! `&#x3c;`). Anything that does not parse as a complete escape is copied
//! through verbatim. Rounds repeat until the text stops changing, so nested
//! encodings such as `%2527` unwrap fully and the result is a fixpoint.

/// Upper bound on decoding rounds. Every productive round shortens the text,
/// so real inputs reach the fixpoint long before this.
pub const MAX_DECODE_ROUNDS: usize = 64;

/// A payload as received. Invalid UTF-8 is tolerated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPayload {
    pub text: Vec<u8>,
    pub source_id: String,
}

impl RawPayload {
    pub fn new(text: impl Into<Vec<u8>>, source_id: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            source_id: source_id.into(),
        }
    }
}

fn hex_val(b: u8) -> Option<u8> {
    match b {
        b'0'..=b'9' => Some(b - b'0'),
        b'a'..=b'f' => Some(b - b'a' + 10),
        b'A'..=b'F' => Some(b - b'A' + 10),
        _ => None,
    }
}

fn hex_byte(hi: u8, lo: u8) -> Option<u8> {
    Some(hex_val(hi)? << 4 | hex_val(lo)?)
}

fn push_char(out: &mut Vec<u8>, c: char) {
    let mut buf = [0u8; 4];
    out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
}

/// Decodes `&name;` / `&#NN;` / `&#xHH;` starting at `input[0] == b'&'`.
/// Returns the decoded character and the number of bytes consumed.
fn html_entity(input: &[u8]) -> Option<(char, usize)> {
    let end = input.iter().take(12).position(|&b| b == b';')?;
    let body = &input[1..end];
    let c = match body {
        b"lt" => '<',
        b"gt" => '>',
        b"amp" => '&',
        b"quot" => '"',
        b"apos" => '\'',
        [b'#', b'x' | b'X', hex @ ..] if !hex.is_empty() => {
            let s = std::str::from_utf8(hex).ok()?;
            char::from_u32(u32::from_str_radix(s, 16).ok()?)?
        }
        [b'#', dec @ ..] if !dec.is_empty() && dec.iter().all(u8::is_ascii_digit) => {
            let s = std::str::from_utf8(dec).ok()?;
            char::from_u32(s.parse::<u32>().ok()?)?
        }
        _ => return None,
    };
    Some((c, end + 1))
}

/// One left-to-right decoding pass over raw bytes.
pub fn decode_round(input: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(input.len());
    let mut i = 0;
    while i < input.len() {
        let rest = &input[i..];
        match rest[0] {
            b'%' if rest.len() >= 3 => {
                if let Some(b) = hex_byte(rest[1], rest[2]) {
                    out.push(b);
                    i += 3;
                    continue;
                }
            }
            b'\\' if rest.len() >= 4 && (rest[1] == b'x' || rest[1] == b'X') => {
                if let Some(b) = hex_byte(rest[2], rest[3]) {
                    out.push(b);
                    i += 4;
                    continue;
                }
            }
            b'\\' if rest.len() >= 6 && (rest[1] == b'u' || rest[1] == b'U') => {
                let code = rest[2..6]
                    .iter()
                    .try_fold(0u32, |acc, &b| Some(acc << 4 | hex_val(b)? as u32));
                if let Some(c) = code.and_then(char::from_u32) {
                    push_char(&mut out, c);
                    i += 6;
                    continue;
                }
            }
            b'&' => {
                if let Some((c, used)) = html_entity(rest) {
                    push_char(&mut out, c);
                    i += used;
                    continue;
                }
            }
            _ => {}
        }
        out.push(rest[0]);
        i += 1;
    }
    out
}

/// Recovers escaped characters and lowercases the result.
pub fn normalize(raw: &RawPayload) -> String {
    normalize_bytes(&raw.text)
}

pub fn normalize_bytes(bytes: &[u8]) -> String {
    let mut text = String::from_utf8_lossy(bytes).to_lowercase();
    for _ in 0..MAX_DECODE_ROUNDS {
        let next = String::from_utf8_lossy(&decode_round(text.as_bytes())).to_lowercase();
        if next == text {
            break;
        }
        text = next;
    }
    text
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn norm(s: &str) -> String {
        normalize_bytes(s.as_bytes())
    }

    /// Plain RFC 3986 percent-decoder used as an oracle for percent-only inputs.
    fn percent_decode_oracle(s: &str) -> Vec<u8> {
        let b = s.as_bytes();
        let mut out = Vec::new();
        let mut i = 0;
        while i < b.len() {
            if b[i] == b'%' && i + 2 < b.len() {
                let h = (b[i + 1] as char).to_digit(16);
                let l = (b[i + 2] as char).to_digit(16);
                if let (Some(h), Some(l)) = (h, l) {
                    out.push((h * 16 + l) as u8);
                    i += 3;
                    continue;
                }
            }
            out.push(b[i]);
            i += 1;
        }
        out
    }

    #[test]
    fn percent_encoded_script_tag() {
        assert_eq!(percent_decode_oracle("%3Cscript%3E"), b"<script>");
        assert_eq!(norm("%3Cscript%3E"), "<script>");
    }

    #[test]
    fn lowercases_plain_text() {
        assert_eq!(norm("ABC"), "abc");
    }

    #[test]
    fn double_encoding_unwraps() {
        let once = percent_decode_oracle("%2527");
        assert_eq!(once, b"%27");
        assert_eq!(percent_decode_oracle(std::str::from_utf8(&once).unwrap()), b"'");
        assert_eq!(norm("%2527"), "'");
    }

    #[test]
    fn escape_forms() {
        assert_eq!(norm(r"\x3Cimg src"), "<img src");
        assert_eq!(norm("&lt;b&gt; &amp; &quot;x&quot; &#39;"), "<b> & \"x\" '");
        assert_eq!(norm("&#x3C;"), "<");
    }

    #[test]
    fn malformed_escapes_pass_through() {
        assert_eq!(norm("100%"), "100%");
        assert_eq!(norm("%zz%4"), "%zz%4");
        assert_eq!(norm(r"\xg1 \u12"), r"\xg1 \u12");
        assert_eq!(norm("&bogus; &#;"), "&bogus; &#;");
        assert_eq!(norm("&#xD800;"), "&#xd800;");
    }

    #[test]
    fn invalid_bytes_are_replaced() {
        let raw = RawPayload::new(vec![b'a', 0xff, b'B'], "t");
        assert_eq!(normalize(&raw), "a\u{fffd}b");
        assert_eq!(norm("%ff"), "\u{fffd}");
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let once = normalize_bytes(&bytes);
            prop_assert_eq!(normalize_bytes(once.as_bytes()), once);
        }

        #[test]
        fn normalize_is_idempotent_on_escape_heavy_text(s in "([%&#;\\\\xu0-9a-fA-FltgGT]|%25|&amp;){0,40}") {
            let once = norm(&s);
            prop_assert_eq!(norm(&once), once);
        }
    }
}
