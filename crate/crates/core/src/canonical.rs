//! Canonical JSON encoding and SHA-256 digests.
//!
//! Object keys are sorted bytewise, there is no insignificant whitespace,
//! integers are written as-is and floats use the shortest round-trip decimal
//! form (always containing `.` or an exponent, so they re-parse as floats).

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::value::DataBatch;

pub fn canonical_serialize(batch: &DataBatch) -> Result<Vec<u8>> {
    to_canonical_string(batch).map(String::into_bytes)
}

pub fn deserialize_batch(bytes: &[u8]) -> Result<DataBatch> {
    serde_json::from_slice(bytes).map_err(|e| Error::Serialization(e.to_string()))
}

/// Lowercase hex SHA-256 of the canonical encoding.
pub fn digest(batch: &DataBatch) -> Result<String> {
    digest_of(batch)
}

/// Digest of any serializable value under the same canonical encoding.
pub fn digest_of<T: Serialize + ?Sized>(v: &T) -> Result<String> {
    let text = to_canonical_string(v)?;
    Ok(sha256_hex(text.as_bytes()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn to_canonical_string<T: Serialize + ?Sized>(v: &T) -> Result<String> {
    let json = serde_json::to_value(v).map_err(|e| Error::Serialization(e.to_string()))?;
    let mut out = String::new();
    write_canonical(&json, &mut out)?;
    Ok(out)
}

fn write_canonical(v: &serde_json::Value, out: &mut String) -> Result<()> {
    use serde_json::Value as J;
    match v {
        J::Null => out.push_str("null"),
        J::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        J::Number(n) => {
            if let Some(f) = n.as_f64().filter(|_| n.is_f64()) {
                if !f.is_finite() {
                    return Err(Error::Serialization("non-finite float".into()));
                }
            }
            out.push_str(&n.to_string());
        }
        J::String(s) => out.push_str(&serde_json::to_string(s)?),
        J::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out)?;
            }
            out.push(']');
        }
        J::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k)?);
                out.push(':');
                write_canonical(&map[k], out)?;
            }
            out.push('}');
        }
    }
    Ok(())
}
