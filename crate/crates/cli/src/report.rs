//! Artifact emission: deterministic names, NaN refusal, checksums, manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::ser::{self, Serialize};
use serde::Serialize as DeriveSerialize;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// One file to emit, named `<base><suffix>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub suffix: String,
    pub contents: String,
}

impl Artifact {
    /// CSV artifact; every field that parses as a number must be finite.
    pub fn csv(suffix: &str, contents: String) -> Result<Self, CliError> {
        for (line_no, line) in contents.lines().enumerate() {
            for field in line.split(',') {
                let f = field.trim().to_ascii_lowercase();
                if matches!(f.as_str(), "nan" | "inf" | "-inf" | "+inf" | "infinity" | "-infinity") {
                    return Err(CliError::Numerical(format!(
                        "{suffix}: non-finite value on line {}",
                        line_no + 1
                    )));
                }
            }
        }
        Ok(Self {
            suffix: suffix.to_string(),
            contents,
        })
    }

    /// Pretty JSON artifact; refuses any non-finite float in `value`.
    pub fn json<T: Serialize>(suffix: &str, value: &T) -> Result<Self, CliError> {
        let mut check = FiniteCheck::default();
        // The checker never fails; it only records the first bad path.
        let _ = value.serialize(&mut check);
        if let Some(path) = check.bad {
            return Err(CliError::Numerical(format!("{suffix}: non-finite value at {path}")));
        }
        let mut contents = serde_json::to_string_pretty(value).map_err(|e| CliError::Numerical(e.to_string()))?;
        contents.push('\n');
        Ok(Self {
            suffix: suffix.to_string(),
            contents,
        })
    }

    /// Plain text (scripts).
    pub fn text(suffix: &str, contents: String) -> Self {
        Self {
            suffix: suffix.to_string(),
            contents,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, DeriveSerialize)]
pub struct OutputEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: usize,
}

/// Provenance of one run; lists every artifact it wrote.
#[derive(Debug, Clone, PartialEq, DeriveSerialize)]
pub struct RunManifest {
    pub toolkit_version: String,
    pub subcommand: String,
    pub scenario: String,
    /// SHA-256 of the scenario file bytes.
    pub scenario_hash: String,
    pub seed: u64,
    pub settings: serde_json::Value,
    /// Unix seconds; `SOURCE_DATE_EPOCH` pins both for reproducible manifests.
    pub started: u64,
    pub finished: u64,
    pub outputs: Vec<OutputEntry>,
}

/// Unix seconds, or `SOURCE_DATE_EPOCH` when set.
pub fn timestamp() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.trim().parse().ok()) {
        return t;
    }
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Writes every artifact under `out_dir` as `<base><suffix>` and returns the entries.
///
/// All artifacts are validated before any file is touched.
pub fn write_report(out_dir: &Path, base: &str, artifacts: &[Artifact]) -> Result<Vec<(PathBuf, OutputEntry)>, CliError> {
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::Io(format!("{}: {e}", out_dir.display())))?;
    let mut written = Vec::with_capacity(artifacts.len());
    for a in artifacts {
        let file = format!("{base}{}", a.suffix);
        let path = out_dir.join(&file);
        std::fs::write(&path, a.contents.as_bytes()).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        written.push((
            path,
            OutputEntry {
                file,
                sha256: sha256_hex(a.contents.as_bytes()),
                bytes: a.contents.len(),
            },
        ));
    }
    Ok(written)
}

/// Header plus rows, numbers with 17 significant digits.
pub fn csv_table(header: &str, rows: impl IntoIterator<Item = Vec<f64>>) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for row in rows {
        let mut first = true;
        for v in row {
            if !first {
                out.push(',');
            }
            first = false;
            let _ = write!(out, "{v:.16e}");
        }
        out.push('\n');
    }
    out
}

/// Serializer that visits every float and remembers the first non-finite one.
#[derive(Default)]
struct FiniteCheck {
    path: Vec<String>,
    bad: Option<String>,
}

impl FiniteCheck {
    fn float(&mut self, v: f64) {
        if !v.is_finite() && self.bad.is_none() {
            self.bad = Some(if self.path.is_empty() {
                "$".to_string()
            } else {
                self.path.join(".")
            });
        }
    }

    fn nested<T: Serialize + ?Sized>(&mut self, key: String, value: &T) -> Result<(), Never> {
        self.path.push(key);
        let r = value.serialize(&mut *self);
        self.path.pop();
        r
    }
}

#[derive(Debug)]
struct Never;

impl std::fmt::Display for Never {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("unreachable")
    }
}

impl std::error::Error for Never {}

impl ser::Error for Never {
    fn custom<T: std::fmt::Display>(_: T) -> Self {
        Never
    }
}

macro_rules! ignore_scalars {
    ($($name:ident: $ty:ty),*) => {
        $(fn $name(self, _: $ty) -> Result<(), Never> { Ok(()) })*
    };
}

impl<'a> ser::Serializer for &'a mut FiniteCheck {
    type Ok = ();
    type Error = Never;
    type SerializeSeq = Self;
    type SerializeTuple = Self;
    type SerializeTupleStruct = Self;
    type SerializeTupleVariant = Self;
    type SerializeMap = Self;
    type SerializeStruct = Self;
    type SerializeStructVariant = Self;

    ignore_scalars!(
        serialize_bool: bool, serialize_i8: i8, serialize_i16: i16, serialize_i32: i32, serialize_i64: i64,
        serialize_u8: u8, serialize_u16: u16, serialize_u32: u32, serialize_u64: u64, serialize_char: char,
        serialize_str: &str, serialize_bytes: &[u8]
    );

    fn serialize_f32(self, v: f32) -> Result<(), Never> {
        self.float(f64::from(v));
        Ok(())
    }
    fn serialize_f64(self, v: f64) -> Result<(), Never> {
        self.float(v);
        Ok(())
    }
    fn serialize_none(self) -> Result<(), Never> {
        Ok(())
    }
    fn serialize_some<T: Serialize + ?Sized>(self, value: &T) -> Result<(), Never> {
        value.serialize(self)
    }
    fn serialize_unit(self) -> Result<(), Never> {
        Ok(())
    }
    fn serialize_unit_struct(self, _: &'static str) -> Result<(), Never> {
        Ok(())
    }
    fn serialize_unit_variant(self, _: &'static str, _: u32, _: &'static str) -> Result<(), Never> {
        Ok(())
    }
    fn serialize_newtype_struct<T: Serialize + ?Sized>(self, _: &'static str, value: &T) -> Result<(), Never> {
        value.serialize(self)
    }
    fn serialize_newtype_variant<T: Serialize + ?Sized>(
        self,
        _: &'static str,
        _: u32,
        variant: &'static str,
        value: &T,
    ) -> Result<(), Never> {
        self.nested(variant.to_string(), value)
    }
    fn serialize_seq(self, _: Option<usize>) -> Result<Self, Never> {
        self.path.push("[]".into());
        Ok(self)
    }
    fn serialize_tuple(self, _: usize) -> Result<Self, Never> {
        self.path.push("[]".into());
        Ok(self)
    }
    fn serialize_tuple_struct(self, _: &'static str, _: usize) -> Result<Self, Never> {
        self.path.push("[]".into());
        Ok(self)
    }
    fn serialize_tuple_variant(self, _: &'static str, _: u32, v: &'static str, _: usize) -> Result<Self, Never> {
        self.path.push(v.to_string());
        Ok(self)
    }
    fn serialize_map(self, _: Option<usize>) -> Result<Self, Never> {
        self.path.push("{}".into());
        Ok(self)
    }
    fn serialize_struct(self, _: &'static str, _: usize) -> Result<Self, Never> {
        Ok(self)
    }
    fn serialize_struct_variant(self, _: &'static str, _: u32, v: &'static str, _: usize) -> Result<Self, Never> {
        self.path.push(v.to_string());
        Ok(self)
    }
}

macro_rules! seq_like {
    ($($tr:ident :: $method:ident),*) => {
        $(impl<'a> ser::$tr for &'a mut FiniteCheck {
            type Ok = ();
            type Error = Never;
            fn $method<T: Serialize + ?Sized>(&mut self, value: &T) -> Result<(), Never> {
                value.serialize(&mut **self)
            }
            fn end(self) -> Result<(), Never> {
                self.path.pop();
                Ok(())
            }
        })*
    };
}

seq_like!(
    SerializeSeq::serialize_element,
    SerializeTuple::serialize_element,
    SerializeTupleStruct::serialize_field,
    SerializeTupleVariant::serialize_field
);

impl<'a> ser::SerializeMap for &'a mut FiniteCheck {
    type Ok = ();
    type Error = Never;
    fn serialize_key<T: Serialize + ?Sized>(&mut self, _: &T) -> Result<(), Never> {
        Ok(())
    }
    fn serialize_value<T: Serialize + ?Sized>(&mut self, value: &T) -> Result<(), Never> {
        value.serialize(&mut **self)
    }
    fn end(self) -> Result<(), Never> {
        self.path.pop();
        Ok(())
    }
}

impl<'a> ser::SerializeStruct for &'a mut FiniteCheck {
    type Ok = ();
    type Error = Never;
    fn serialize_field<T: Serialize + ?Sized>(&mut self, key: &'static str, value: &T) -> Result<(), Never> {
        self.nested(key.to_string(), value)
    }
    fn end(self) -> Result<(), Never> {
        Ok(())
    }
}

impl<'a> ser::SerializeStructVariant for &'a mut FiniteCheck {
    type Ok = ();
    type Error = Never;
    fn serialize_field<T: Serialize + ?Sized>(&mut self, key: &'static str, value: &T) -> Result<(), Never> {
        self.nested(key.to_string(), value)
    }
    fn end(self) -> Result<(), Never> {
        self.path.pop();
        Ok(())
    }
}
