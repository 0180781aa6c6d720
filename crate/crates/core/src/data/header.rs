//! Textual `key=value` header blocks as found at the start of MSTAR chips.
//!
//! A header opens with a bracketed tag line such as `[PhoenixHeaderVer01.04]`
//! and closes with a bracketed line starting with `[End` such as
//! `[EndofPhoenixHeader]`. Raster data follows the closing line.

use crate::error::{Error, Result};

pub const MSTAR_BEGIN_TAG: &str = "[PhoenixHeaderVer01.04]";
pub const MSTAR_END_TAG: &str = "[EndofPhoenixHeader]";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    /// Key/value pairs in file order.
    pub fields: Vec<(String, String)>,
    /// Byte offset of the first byte after the closing delimiter line.
    pub data_offset: usize,
}

impl Header {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>> {
        self.get(key)
            .map(|v| {
                v.parse::<usize>()
                    .map_err(|_| Error::MalformedHeader(format!("{key}={v} is not a non-negative integer")))
            })
            .transpose()
    }
}

fn is_tag(line: &str) -> bool {
    line.len() >= 2 && line.starts_with('[') && line.ends_with(']')
}

fn is_end_tag(line: &str) -> bool {
    is_tag(line) && line[1..].to_ascii_lowercase().starts_with("end")
}

pub fn parse_header(raw: &[u8]) -> Result<Header> {
    let mut pos = 0;
    let mut fields = Vec::new();
    let mut first = true;
    while pos < raw.len() {
        let end = raw[pos..].iter().position(|&b| b == b'\n').map(|i| pos + i);
        let line_end = end.unwrap_or(raw.len());
        let next = end.map_or(raw.len(), |e| e + 1);
        let bytes = &raw[pos..line_end];
        if let Some(bad) = bytes.iter().position(|b| !b.is_ascii()) {
            return Err(Error::Encoding { offset: pos + bad });
        }
        // ASCII was checked above.
        let line = std::str::from_utf8(bytes).expect("ascii").trim();
        if first {
            if !is_tag(line) || is_end_tag(line) {
                return Err(Error::MalformedHeader(format!(
                    "expected an opening [tag] line, found {line:?}"
                )));
            }
            first = false;
        } else if is_end_tag(line) {
            return Ok(Header {
                fields,
                data_offset: next,
            });
        } else if let Some((k, v)) = line.split_once('=') {
            fields.push((k.trim().to_string(), v.trim().to_string()));
        }
        pos = next;
    }
    Err(Error::MalformedHeader(if first {
        "empty input".into()
    } else {
        "missing closing [End...] line".into()
    }))
}

/// Serialize a header block in the MSTAR `key= value` style.
pub fn write_header(begin_tag: &str, fields: &[(String, String)]) -> Vec<u8> {
    let mut out = String::new();
    out.push_str(begin_tag);
    out.push('\n');
    for (k, v) in fields {
        out.push_str(k);
        out.push_str("= ");
        out.push_str(v);
        out.push('\n');
    }
    out.push_str(MSTAR_END_TAG);
    out.push('\n');
    out.into_bytes()
}
