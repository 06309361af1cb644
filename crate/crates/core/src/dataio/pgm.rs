//! Binary PGM (P5, maxval 255).

use std::path::Path;

use crate::error::{Error, Result};

pub fn encode(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a P5 file; `#` comments between header tokens are allowed.
pub fn decode(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|e| e.to_string())?);
    }
    if tokens[0] != "P5" {
        return Err(format!("expected P5 magic, found {:?}", tokens[0]));
    }
    let parse = |t: &str| t.parse::<usize>().map_err(|e| format!("bad header field {t:?}: {e}"));
    let (w, h, maxval) = (parse(tokens[1])?, parse(tokens[2])?, parse(tokens[3])?);
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = w * h;
    if w == 0 || h == 0 || bytes.len() < pos + n {
        return Err(format!("raster of {w}x{h} truncated"));
    }
    Ok((w, h, bytes[pos..pos + n].to_vec()))
}

pub fn read(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|r| Error::malformed(path, r))
}

pub fn write(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    std::fs::write(path, encode(width, height, pixels)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_layout_is_exact() {
        let b = encode(2, 1, &[7, 200]);
        assert_eq!(b, b"P5\n2 1\n255\n\x07\xc8");
        assert_eq!(decode(&b).unwrap(), (2, 1, vec![7, 200]));
    }

    #[test]
    fn comments_and_errors() {
        let b = b"P5\n# made by hand\n2 2\n255\n\x01\x02\x03\x04";
        assert_eq!(decode(b).unwrap().2, vec![1, 2, 3, 4]);
        assert!(decode(b"P2\n1 1\n255\n0").is_err());
        assert!(decode(b"P5\n4 4\n255\n\x00").is_err());
        assert!(decode(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }
}
