//! Plain-text `key=value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys may repeat; the
//! last occurrence wins when the pairs are folded into a map.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Parses `key=value` lines in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected key=value", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Format(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_map(text: &str) -> Result<BTreeMap<String, String>> {
    Ok(parse_pairs(text)?.into_iter().collect())
}

/// Renders a map back to `key=value` lines, sorted by key.
pub fn render_map(map: &BTreeMap<String, String>) -> String {
    map.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_whitespace() {
        let pairs = parse_pairs("# c\n\n a = 1 \nb=x=y\n").unwrap();
        assert_eq!(pairs, vec![("a".into(), "1".into()), ("b".into(), "x=y".into())]);
    }

    #[test]
    fn last_key_wins() {
        let m = parse_map("a=1\na=2\n").unwrap();
        assert_eq!(m["a"], "2");
        assert_eq!(parse_map(&render_map(&m)).unwrap(), m);
    }

    #[test]
    fn malformed_lines() {
        assert!(parse_pairs("novalue").is_err());
        assert!(parse_pairs("=3").is_err());
    }
}
