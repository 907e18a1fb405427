//! Shared text encoding for the line-oriented store files.
//!
//! Records are tab-separated. Scalars and short vectors are written as
//! shortest round-trip decimal; bulk arrays (images, depth maps, parameter
//! blocks) are base64 of little-endian IEEE-754 `f64` bytes. Both encodings
//! reproduce values bit for bit.

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;

use crate::error::{Error, Result};

pub(crate) fn encode_f64s(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub(crate) fn decode_f64s(text: &str, line: usize) -> Result<Vec<f64>> {
    let bytes = STANDARD.decode(text.trim()).map_err(|e| Error::Parse {
        line,
        msg: format!("invalid base64 payload: {e}"),
    })?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Parse {
            line,
            msg: format!("payload length {} is not a multiple of 8", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub(crate) fn join_floats(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:?}"))
        .collect::<Vec<_>>()
        .join(",")
}

pub(crate) fn parse_floats(text: &str, line: usize) -> Result<Vec<f64>> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|t| {
            t.trim().parse::<f64>().map_err(|e| Error::Parse {
                line,
                msg: format!("bad number {t:?}: {e}"),
            })
        })
        .collect()
}

pub(crate) fn parse_field<T: std::str::FromStr>(text: &str, what: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    text.trim().parse().map_err(|e| Error::Parse {
        line,
        msg: format!("bad {what} {text:?}: {e}"),
    })
}

/// Parses `key=value` header fields after the magic token.
pub(crate) fn header_value<'a>(fields: &[&'a str], key: &str, line: usize) -> Result<&'a str> {
    fields
        .iter()
        .find_map(|f| f.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .ok_or_else(|| Error::Parse {
            line,
            msg: format!("header is missing `{key}`"),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_bitwise() {
        let vals = [0.1, -0.0, 1e-300, f64::MAX, 2.0 / 3.0, -123456.789];
        let back = decode_f64s(&encode_f64s(&vals), 1).unwrap();
        let text = parse_floats(&join_floats(&vals), 1).unwrap();
        for ((a, b), c) in vals.iter().zip(&back).zip(&text) {
            assert_eq!(a.to_bits(), b.to_bits());
            assert_eq!(a.to_bits(), c.to_bits());
        }
    }

    #[test]
    fn bad_payload_reports_line() {
        match decode_f64s("AAAA", 7) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("{other:?}"),
        }
    }
}
