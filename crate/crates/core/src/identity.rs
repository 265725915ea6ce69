//! Canonical task encoding and task keys.
//!
//! Encoding version 1 is UTF-8 text, lines joined by a single `\n` with no
//! trailing newline:
//!
//! ```text
//! v=1
//! <name>=<tag>:<value>      one line per parameter, sorted bytewise by name
//! <name>=<tag>:<value>      then one line per setting, sorted bytewise by name
//! ```
//!
//! Tags: `s` string, `i` integer, `f` float, `b` boolean (`true`/`false`),
//! `n` null (empty value). In names and string values, `\` becomes `\\`,
//! a linefeed becomes `\n` and `=` becomes `\=`.
//!
//! Floats use the shortest decimal that round-trips: plain notation with at
//! least one fractional digit when `1e-5 <= |x| < 1e16` (`0.5`, `3.0`,
//! `-0.0`), otherwise scientific with no `+` sign (`1e16`, `2.5e-7`).
//!
//! The key is the SHA-256 of those bytes, rendered as 64 lowercase hex
//! characters.

use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigMatrix, ParamValue, Settings};
use crate::expand::Assignment;

pub const ENCODING_VERSION: u32 = 1;

/// SHA-256 digest identifying one task's inputs.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaskKey([u8; 32]);

impl TaskKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        TaskKey(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn digest(bytes: &[u8]) -> Self {
        TaskKey(Sha256::digest(bytes).into())
    }
}

impl fmt::Display for TaskKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for TaskKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TaskKey({})", &self.to_hex()[..12])
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid task key `{0}`: expected 64 lowercase hex characters")]
pub struct ParseKeyError(String);

impl FromStr for TaskKey {
    type Err = ParseKeyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 64 || !s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return Err(ParseKeyError(s.to_owned()));
        }
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).map_err(|_| ParseKeyError(s.to_owned()))?;
        Ok(TaskKey(out))
    }
}

impl serde::Serialize for TaskKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> serde::Deserialize<'de> for TaskKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodeError {
    #[error("non-finite float in `{0}`")]
    NonFinite(String),
}

/// Canonical float rendering shared by the encoding and by display.
pub fn format_float(x: f64) -> String {
    // `{:?}` is the shortest round-trip form with the notation switch
    // described in the module docs.
    format!("{x:?}")
}

fn escape_into(out: &mut String, s: &str) {
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '=' => out.push_str("\\="),
            c => out.push(c),
        }
    }
}

fn push_entry(out: &mut String, name: &str, value: &ParamValue) -> Result<(), EncodeError> {
    out.push('\n');
    escape_into(out, name);
    out.push('=');
    out.push(value.tag());
    out.push(':');
    match value {
        ParamValue::String(s) => escape_into(out, s),
        ParamValue::Integer(i) => out.push_str(&i.to_string()),
        ParamValue::Float(f) => {
            if !f.is_finite() {
                return Err(EncodeError::NonFinite(name.to_owned()));
            }
            out.push_str(&format_float(*f))
        }
        ParamValue::Boolean(b) => out.push_str(if *b { "true" } else { "false" }),
        ParamValue::Null => {}
    }
    Ok(())
}

fn push_block<'a>(
    out: &mut String,
    entries: impl Iterator<Item = (&'a String, &'a ParamValue)>,
) -> Result<(), EncodeError> {
    let mut entries: Vec<_> = entries.collect();
    entries.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
    for (name, value) in entries {
        push_entry(out, name, value)?;
    }
    Ok(())
}

/// Encodes a task's inputs in the versioned canonical form.
pub fn canonical_encode(assignment: &Assignment, settings: &Settings) -> Result<Vec<u8>, EncodeError> {
    let mut out = format!("v={ENCODING_VERSION}");
    push_block(&mut out, assignment.iter())?;
    push_block(&mut out, settings.iter())?;
    Ok(out.into_bytes())
}

/// SHA-256 of [`canonical_encode`].
pub fn task_key(assignment: &Assignment, settings: &Settings) -> Result<TaskKey, EncodeError> {
    Ok(TaskKey::digest(&canonical_encode(assignment, settings)?))
}

/// Digest of everything that determines a plan: dimensions and their values
/// in declaration order, settings, and the exclusion rules (order
/// independent). Runner and notification configuration are not included.
pub fn config_fingerprint(config: &ConfigMatrix) -> Result<TaskKey, EncodeError> {
    let mut out = format!("mxrun-plan v={ENCODING_VERSION}\n[parameters]");
    for (name, values) in &config.parameters {
        for v in values {
            push_entry(&mut out, name, v)?;
        }
    }
    out.push_str("\n[settings]");
    push_block(&mut out, config.settings.iter())?;
    out.push_str("\n[exclude]");
    let mut rules = Vec::with_capacity(config.exclusions.len());
    for rule in &config.exclusions {
        let mut line = String::new();
        push_block(&mut line, rule.predicate.iter())?;
        rules.push(line);
    }
    rules.sort();
    rules.dedup();
    for rule in rules {
        out.push_str("\n{");
        out.push_str(&rule);
        out.push_str("\n}");
    }
    Ok(TaskKey::digest(out.as_bytes()))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use indexmap::IndexMap;

    fn assignment(pairs: &[(&str, ParamValue)]) -> Assignment {
        Assignment::from_pairs(pairs.iter().map(|(k, v)| (k.to_string(), v.clone())))
    }

    #[test]
    fn encoding_of_simple_assignment() {
        let a = assignment(&[("b", ParamValue::Integer(1)), ("a", "x".into())]);
        let bytes = canonical_encode(&a, &Settings::new()).unwrap();
        assert_eq!(bytes, b"v=1\na=s:x\nb=i:1");
    }

    #[test]
    fn key_order_is_irrelevant() {
        let a = assignment(&[("b", ParamValue::Integer(1)), ("a", "x".into())]);
        let b = assignment(&[("a", "x".into()), ("b", ParamValue::Integer(1))]);
        assert_eq!(
            canonical_encode(&a, &Settings::new()).unwrap(),
            canonical_encode(&b, &Settings::new()).unwrap()
        );
    }

    #[test]
    fn settings_block_follows_parameters() {
        let a = assignment(&[("z", "x".into())]);
        let mut s = Settings::new();
        s.insert("n_fold".into(), ParamValue::Integer(5));
        let text = String::from_utf8(canonical_encode(&a, &s).unwrap()).unwrap();
        assert_eq!(text, "v=1\nz=s:x\nn_fold=i:5");
        assert!(text.ends_with("\nn_fold=i:5"));
    }

    #[test]
    fn every_tag() {
        let a = assignment(&[
            ("s", "a=b\\c\nd".into()),
            ("i", ParamValue::Integer(-7)),
            ("f", ParamValue::Float(0.1)),
            ("b", ParamValue::Boolean(false)),
            ("n", ParamValue::Null),
        ]);
        let text = String::from_utf8(canonical_encode(&a, &Settings::new()).unwrap()).unwrap();
        assert_eq!(text, "v=1\nb=b:false\nf=f:0.1\ni=i:-7\nn=n:\ns=s:a\\=b\\\\c\\nd");
    }

    #[test]
    fn float_rendering_is_pinned() {
        let cases = [
            (1.0, "1.0"),
            (0.1, "0.1"),
            (-0.0, "-0.0"),
            (2.5e-7, "2.5e-7"),
            (1e-5, "1e-5"),
            (1e-4, "0.0001"),
            (123456.789, "123456.789"),
            (1e15, "1000000000000000.0"),
            (1e16, "1e16"),
            (1e300, "1e300"),
            (f64::MAX, "1.7976931348623157e308"),
            (5e-324, "5e-324"),
        ];
        for (x, want) in cases {
            assert_eq!(format_float(x), want, "{x}");
            assert_eq!(format_float(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
    }

    #[test]
    fn non_finite_is_rejected() {
        let a = assignment(&[("x", ParamValue::Float(f64::NAN))]);
        assert_eq!(
            canonical_encode(&a, &Settings::new()),
            Err(EncodeError::NonFinite("x".into()))
        );
        let mut s = Settings::new();
        s.insert("y".into(), ParamValue::Float(f64::INFINITY));
        assert!(task_key(&assignment(&[]), &s).is_err());
    }

    #[test]
    fn type_tag_changes_key() {
        let a = assignment(&[("x", ParamValue::Integer(1))]);
        let b = assignment(&[("x", "1".into())]);
        assert_ne!(
            task_key(&a, &Settings::new()).unwrap(),
            task_key(&b, &Settings::new()).unwrap()
        );
    }

    #[test]
    fn golden_key() {
        // Computed with `printf 'v=1\na=s:x' | sha256sum`.
        let a = assignment(&[("a", "x".into())]);
        assert_eq!(
            task_key(&a, &Settings::new()).unwrap().to_hex(),
            "439b8bcdf734dd10c250ab91a3e8073f2c2a9700e75e2f6a35c4e77e9efe799b"
        );
    }

    #[test]
    fn key_parse_and_render() {
        let k = TaskKey::digest(b"abc");
        let hex = k.to_string();
        assert_eq!(hex.len(), 64);
        assert!(hex.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)));
        assert_eq!(hex.parse::<TaskKey>().unwrap(), k);
        assert!(hex.to_uppercase().parse::<TaskKey>().is_err());
        assert!("abc".parse::<TaskKey>().is_err());
    }

    #[test]
    fn fingerprint_ignores_exclusion_order_but_not_dimension_order() {
        use crate::config::ExclusionRule;
        let base = ConfigMatrix::new()
            .with_dimension("a", [1i64, 2])
            .with_dimension("b", [1i64, 2]);
        let r1 = ExclusionRule::new([("a", 1i64)]);
        let r2 = ExclusionRule::new([("b", 2i64), ("a", 2i64)]);
        let x = base.clone().with_exclusion(r1.clone()).with_exclusion(r2.clone());
        let y = base.clone().with_exclusion(r2).with_exclusion(r1);
        assert_eq!(config_fingerprint(&x).unwrap(), config_fingerprint(&y).unwrap());
        let swapped = ConfigMatrix::new()
            .with_dimension("b", [1i64, 2])
            .with_dimension("a", [1i64, 2]);
        assert_ne!(
            config_fingerprint(&base).unwrap(),
            config_fingerprint(&swapped).unwrap()
        );
        let reordered_values = ConfigMatrix::new()
            .with_dimension("a", [2i64, 1])
            .with_dimension("b", [1i64, 2]);
        assert_ne!(
            config_fingerprint(&base).unwrap(),
            config_fingerprint(&reordered_values).unwrap()
        );
        let with_setting = base.clone().with_setting("seed", 1i64);
        assert_ne!(
            config_fingerprint(&base).unwrap(),
            config_fingerprint(&with_setting).unwrap()
        );
    }

    /// Test-only inverse of the encoding. `dims` says which names belong to
    /// the parameter block.
    pub(crate) fn decode(bytes: &[u8], dims: &[String]) -> Option<(IndexMap<String, ParamValue>, Settings)> {
        let text = std::str::from_utf8(bytes).ok()?;
        let mut lines = text.split('\n');
        if lines.next()? != "v=1" {
            return None;
        }
        let mut params = IndexMap::new();
        let mut settings = Settings::new();
        for line in lines {
            let mut name = String::new();
            let mut chars = line.chars();
            loop {
                match chars.next()? {
                    '\\' => name.push(unescape(chars.next()?)?),
                    '=' => break,
                    c => name.push(c),
                }
            }
            let tag = chars.next()?;
            if chars.next()? != ':' {
                return None;
            }
            let mut raw = String::new();
            while let Some(c) = chars.next() {
                match c {
                    '\\' => raw.push(unescape(chars.next()?)?),
                    '=' => return None,
                    c => raw.push(c),
                }
            }
            let value = match tag {
                's' => ParamValue::String(raw),
                'i' => ParamValue::Integer(raw.parse().ok()?),
                'f' => ParamValue::Float(raw.parse().ok()?),
                'b' => ParamValue::Boolean(raw.parse().ok()?),
                'n' if raw.is_empty() => ParamValue::Null,
                _ => return None,
            };
            if dims.contains(&name) {
                params.insert(name, value);
            } else {
                settings.insert(name, value);
            }
        }
        Some((params, settings))
    }

    fn unescape(c: char) -> Option<char> {
        match c {
            '\\' => Some('\\'),
            'n' => Some('\n'),
            '=' => Some('='),
            _ => None,
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn value() -> impl Strategy<Value = ParamValue> {
            prop_oneof![
                "[ab=\\\\\n:]{0,4}".prop_map(ParamValue::String),
                (-3i64..3).prop_map(ParamValue::Integer),
                prop_oneof![Just(0.0), Just(-0.0), Just(1.0), Just(0.1), Just(1e16), Just(2.5e-7)]
                    .prop_map(ParamValue::Float),
                any::<bool>().prop_map(ParamValue::Boolean),
                Just(ParamValue::Null),
            ]
        }

        fn inputs() -> impl Strategy<Value = (Vec<(String, ParamValue)>, Vec<(String, ParamValue)>)> {
            (
                proptest::collection::btree_map("[pq=\\\\\n]{1,3}", value(), 0..4),
                proptest::collection::btree_map("[st]{1,3}", value(), 0..3),
            )
                .prop_map(|(p, s)| (p.into_iter().collect(), s.into_iter().collect()))
        }

        proptest! {
            #[test]
            fn encoding_decodes_back((params, settings) in inputs()) {
                let a = Assignment::from_pairs(params.iter().cloned());
                let s: Settings = settings.iter().cloned().collect();
                let bytes = canonical_encode(&a, &s).unwrap();
                let dims: Vec<String> = params.iter().map(|(k, _)| k.clone()).collect();
                let (dp, ds) = decode(&bytes, &dims).expect("decodable");
                let want_p: IndexMap<_, _> = params.into_iter().collect();
                prop_assert_eq!(dp.len(), want_p.len());
                for (k, v) in &want_p {
                    prop_assert_eq!(dp.get(k), Some(v));
                }
                prop_assert_eq!(ds.len(), s.len());
                for (k, v) in &s {
                    prop_assert_eq!(ds.get(k), Some(v));
                }
            }

            #[test]
            fn distinct_inputs_distinct_bytes(x in inputs(), y in inputs()) {
                // Same parameter-name set on both sides; settings names are disjoint by construction.
                let ax = Assignment::from_pairs(x.0.iter().cloned());
                let ay = Assignment::from_pairs(y.0.iter().cloned());
                let sx: Settings = x.1.iter().cloned().collect();
                let sy: Settings = y.1.iter().cloned().collect();
                let same_inputs = ax == ay && sx.len() == sy.len() && sx.iter().all(|(k, v)| sy.get(k) == Some(v));
                let same_bytes = canonical_encode(&ax, &sx).unwrap() == canonical_encode(&ay, &sy).unwrap();
                prop_assert_eq!(same_inputs, same_bytes);
            }
        }
    }
}
