//! The `key = value` text format shared by sidecars, manifests and configs.
//! Blank lines and lines starting with `#` are ignored.

use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};

/// Entries in file order with their 1-based line numbers.
pub fn entries(text: &str, path: &Path) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("line {}: expected `key = value`", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::format(path, format!("line {}: empty key", i + 1)));
        }
        out.push((i + 1, k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses into a map, rejecting repeated keys.
pub fn parse(text: &str, path: &Path) -> Result<IndexMap<String, String>> {
    let mut map = IndexMap::new();
    for (line, k, v) in entries(text, path)? {
        if map.insert(k.clone(), v).is_some() {
            return Err(Error::format(path, format!("line {line}: duplicate key `{k}`")));
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_spacing() {
        let m = parse("# c\n\n a = 1 \nb=two words\n", Path::new("t")).unwrap();
        assert_eq!(m["a"], "1");
        assert_eq!(m["b"], "two words");
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert!(parse("a = 1\na = 2\n", Path::new("t")).is_err());
        assert!(parse("just words\n", Path::new("t")).is_err());
    }
}
