//! Self-describing tagged values and their canonical binary encoding.
//!
//! Every persisted payload is an encoded [`Value`]. The encoding is
//! deterministic: a given value always produces the same bytes, and the
//! decoder accepts exactly the image of the encoder (anything else is
//! [`StoreError::MalformedEncoding`]).
//!
//! Binary grammar, all multi-byte integers little-endian:
//!
//! ```text
//! 00                              Null
//! 01 b                            Bool        (b in {00, 01})
//! 02 i64                          Int         (two's complement)
//! 03 f64                          Float       (IEEE-754 bits)
//! 04 u32 utf8[len]                Str
//! 05 u32 value*                   Seq         (count, then elements)
//! 06 u32 (bare, value)*           Rec         (insertion order, unique names)
//! 07 bare bare bare               Ref         (store, container, object)
//! 08 u32 byte[len]                Bytes
//! 09 u32 (bare, value)*           Map         (keys ascending byte order)
//! ```
//!
//! where `bare` is a u32 length followed by UTF-8 bytes, with no tag.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Result, StoreError};
use crate::refs::PersistentRef;

/// Maximum nesting depth accepted by the decoder.
pub const MAX_DECODE_DEPTH: usize = 256;

const TAG_NULL: u8 = 0x00;
const TAG_BOOL: u8 = 0x01;
const TAG_INT: u8 = 0x02;
const TAG_FLOAT: u8 = 0x03;
const TAG_STR: u8 = 0x04;
const TAG_SEQ: u8 = 0x05;
const TAG_REC: u8 = 0x06;
const TAG_REF: u8 = 0x07;
const TAG_BYTES: u8 = 0x08;
const TAG_MAP: u8 = 0x09;

/// A typed datum; the unit of persistence.
///
/// `Rec` preserves insertion order and requires unique, non-empty field
/// names. `Map` is sorted by key at all times. Floats compare bitwise, so
/// round trips are exact even for NaN and negative zero.
#[derive(Debug, Clone)]
pub enum Value {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    Bytes(Vec<u8>),
    Seq(Vec<Value>),
    Rec(Vec<(String, Value)>),
    Map(BTreeMap<String, Value>),
    Ref(PersistentRef),
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Value::Null, Value::Null) => true,
            (Value::Bool(a), Value::Bool(b)) => a == b,
            (Value::Int(a), Value::Int(b)) => a == b,
            // Bitwise: NaN == NaN, 0.0 != -0.0. Matches encoding equality.
            (Value::Float(a), Value::Float(b)) => a.to_bits() == b.to_bits(),
            (Value::Str(a), Value::Str(b)) => a == b,
            (Value::Bytes(a), Value::Bytes(b)) => a == b,
            (Value::Seq(a), Value::Seq(b)) => a == b,
            (Value::Rec(a), Value::Rec(b)) => a == b,
            (Value::Map(a), Value::Map(b)) => a == b,
            (Value::Ref(a), Value::Ref(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for Value {}

impl From<bool> for Value {
    fn from(b: bool) -> Self {
        Value::Bool(b)
    }
}

impl From<i64> for Value {
    fn from(i: i64) -> Self {
        Value::Int(i)
    }
}

impl From<f64> for Value {
    fn from(f: f64) -> Self {
        Value::Float(f)
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Str(s.to_owned())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::Str(s)
    }
}

impl Value {
    /// Builds a `Rec` from name/value pairs, in the given order.
    pub fn rec<I, N, V>(fields: I) -> Value
    where
        I: IntoIterator<Item = (N, V)>,
        N: Into<String>,
        V: Into<Value>,
    {
        Value::Rec(
            fields
                .into_iter()
                .map(|(n, v)| (n.into(), v.into()))
                .collect(),
        )
    }

    /// Encodes the value into its canonical byte form.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.encode_into(&mut out)?;
        Ok(out)
    }

    fn encode_into(&self, out: &mut Vec<u8>) -> Result<()> {
        match self {
            Value::Null => out.push(TAG_NULL),
            Value::Bool(b) => {
                out.push(TAG_BOOL);
                out.push(u8::from(*b));
            }
            Value::Int(i) => {
                out.push(TAG_INT);
                out.extend_from_slice(&i.to_le_bytes());
            }
            Value::Float(f) => {
                out.push(TAG_FLOAT);
                out.extend_from_slice(&f.to_le_bytes());
            }
            Value::Str(s) => {
                out.push(TAG_STR);
                encode_bare(s, out)?;
            }
            Value::Bytes(b) => {
                out.push(TAG_BYTES);
                let len = length_u32(b.len())?;
                out.extend_from_slice(&len.to_le_bytes());
                out.extend_from_slice(b);
            }
            Value::Seq(items) => {
                out.push(TAG_SEQ);
                let count = length_u32(items.len())?;
                out.extend_from_slice(&count.to_le_bytes());
                for item in items {
                    item.encode_into(out)?;
                }
            }
            Value::Rec(fields) => {
                for (i, (name, _)) in fields.iter().enumerate() {
                    if name.is_empty() {
                        return Err(StoreError::InvalidValue(
                            "record field name is empty".into(),
                        ));
                    }
                    if fields[..i].iter().any(|(n, _)| n == name) {
                        return Err(StoreError::InvalidValue(format!(
                            "duplicate record field name {name:?}"
                        )));
                    }
                }
                out.push(TAG_REC);
                let count = length_u32(fields.len())?;
                out.extend_from_slice(&count.to_le_bytes());
                for (name, value) in fields {
                    encode_bare(name, out)?;
                    value.encode_into(out)?;
                }
            }
            Value::Ref(r) => {
                out.push(TAG_REF);
                encode_bare(&r.store, out)?;
                encode_bare(&r.container, out)?;
                encode_bare(&r.object, out)?;
            }
            Value::Map(entries) => {
                out.push(TAG_MAP);
                let count = length_u32(entries.len())?;
                out.extend_from_slice(&count.to_le_bytes());
                // BTreeMap iterates in ascending byte order of the keys.
                for (key, value) in entries {
                    encode_bare(key, out)?;
                    value.encode_into(out)?;
                }
            }
        }
        Ok(())
    }

    /// Decodes a complete encoding; all input bytes must be consumed.
    pub fn decode(bytes: &[u8]) -> Result<Value> {
        let mut cur = Cursor { buf: bytes, pos: 0 };
        let value = decode_value(&mut cur, 0)?;
        if cur.pos != bytes.len() {
            return Err(StoreError::MalformedEncoding(format!(
                "{} trailing bytes after value",
                bytes.len() - cur.pos
            )));
        }
        Ok(value)
    }

    /// Renders the value in the canonical human-readable form.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        self.render(&mut out);
        out
    }

    fn render(&self, out: &mut String) {
        match self {
            Value::Null => out.push_str("null"),
            Value::Bool(true) => out.push_str("true"),
            Value::Bool(false) => out.push_str("false"),
            Value::Int(i) => {
                let _ = write!(out, "{i}");
            }
            Value::Float(f) => render_float(*f, out),
            Value::Str(s) => render_quoted(s, out),
            Value::Bytes(b) => {
                out.push_str("bytes(");
                for byte in b {
                    let _ = write!(out, "{byte:02x}");
                }
                out.push(')');
            }
            Value::Seq(items) => {
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    item.render(out);
                }
                out.push(']');
            }
            Value::Rec(fields) => {
                out.push('{');
                for (i, (name, value)) in fields.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    out.push_str(name);
                    out.push_str(": ");
                    value.render(out);
                }
                out.push('}');
            }
            Value::Map(entries) => {
                out.push_str("map{");
                for (i, (key, value)) in entries.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    render_quoted(key, out);
                    out.push_str(": ");
                    value.render(out);
                }
                out.push('}');
            }
            Value::Ref(r) => {
                out.push_str("ref(");
                render_quoted(&r.store, out);
                out.push_str(", ");
                render_quoted(&r.container, out);
                out.push_str(", ");
                render_quoted(&r.object, out);
                out.push(')');
            }
        }
    }
}

fn length_u32(len: usize) -> Result<u32> {
    u32::try_from(len)
        .map_err(|_| StoreError::InvalidValue(format!("length {len} exceeds u32 range")))
}

fn encode_bare(s: &str, out: &mut Vec<u8>) -> Result<()> {
    let len = length_u32(s.len())?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

/// Shortest round-trip rendering, with `.0` forced onto integral floats so
/// the text stays visibly a float.
fn render_float(f: f64, out: &mut String) {
    let start = out.len();
    let _ = write!(out, "{f}");
    if out[start..]
        .bytes()
        .all(|b| b.is_ascii_digit() || b == b'-')
    {
        out.push_str(".0");
    }
}

fn render_quoted(s: &str, out: &mut String) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            _ => out.push(c),
        }
    }
    out.push('"');
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(StoreError::MalformedEncoding(format!(
                "truncated: need {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn bare_string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| StoreError::MalformedEncoding("invalid UTF-8 in string".into()))
    }
}

fn decode_value(cur: &mut Cursor<'_>, depth: usize) -> Result<Value> {
    if depth > MAX_DECODE_DEPTH {
        return Err(StoreError::MalformedEncoding(format!(
            "nesting depth exceeds {MAX_DECODE_DEPTH}"
        )));
    }
    let tag = cur.u8()?;
    match tag {
        TAG_NULL => Ok(Value::Null),
        TAG_BOOL => match cur.u8()? {
            0 => Ok(Value::Bool(false)),
            1 => Ok(Value::Bool(true)),
            b => Err(StoreError::MalformedEncoding(format!(
                "bool byte {b:#04x} not 00 or 01"
            ))),
        },
        TAG_INT => {
            let b = cur.take(8)?;
            Ok(Value::Int(i64::from_le_bytes(b.try_into().unwrap())))
        }
        TAG_FLOAT => {
            let b = cur.take(8)?;
            Ok(Value::Float(f64::from_le_bytes(b.try_into().unwrap())))
        }
        TAG_STR => Ok(Value::Str(cur.bare_string()?)),
        TAG_BYTES => {
            let len = cur.u32()? as usize;
            Ok(Value::Bytes(cur.take(len)?.to_vec()))
        }
        TAG_SEQ => {
            let count = cur.u32()? as usize;
            let mut items = Vec::new();
            for _ in 0..count {
                items.push(decode_value(cur, depth + 1)?);
            }
            Ok(Value::Seq(items))
        }
        TAG_REC => {
            let count = cur.u32()? as usize;
            let mut fields: Vec<(String, Value)> = Vec::new();
            for _ in 0..count {
                let name = cur.bare_string()?;
                if name.is_empty() {
                    return Err(StoreError::MalformedEncoding(
                        "empty record field name".into(),
                    ));
                }
                if fields.iter().any(|(n, _)| *n == name) {
                    return Err(StoreError::MalformedEncoding(format!(
                        "duplicate record field name {name:?}"
                    )));
                }
                let value = decode_value(cur, depth + 1)?;
                fields.push((name, value));
            }
            Ok(Value::Rec(fields))
        }
        TAG_REF => {
            let store = cur.bare_string()?;
            let container = cur.bare_string()?;
            let object = cur.bare_string()?;
            Ok(Value::Ref(PersistentRef {
                store,
                container,
                object,
            }))
        }
        TAG_MAP => {
            let count = cur.u32()? as usize;
            let mut entries = BTreeMap::new();
            let mut last_key: Option<String> = None;
            for _ in 0..count {
                let key = cur.bare_string()?;
                // The encoder emits keys in strictly ascending byte order, so
                // anything else is not a canonical encoding.
                if let Some(prev) = &last_key {
                    if key.as_bytes() <= prev.as_bytes() {
                        return Err(StoreError::MalformedEncoding(format!(
                            "map keys not strictly ascending: {prev:?} then {key:?}"
                        )));
                    }
                }
                let value = decode_value(cur, depth + 1)?;
                last_key = Some(key.clone());
                entries.insert(key, value);
            }
            Ok(Value::Map(entries))
        }
        other => Err(StoreError::MalformedEncoding(format!(
            "unknown tag {other:#04x}"
        ))),
    }
}
