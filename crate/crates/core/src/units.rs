//! Duration literals: `"500ns"`, `"0.5us"`, `"30us"`, `"10ms"`, `"2s"` or a
//! bare integer of nanoseconds. `"inf"` is accepted where a quantum is expected.

use serde::de::{self, Deserializer, Visitor};
use serde::Serializer;
use std::fmt;

/// Parses a duration literal into nanoseconds.
pub fn parse_duration_ns(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let split = s
        .find(|c: char| !(c.is_ascii_digit() || c == '.'))
        .unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    if num.is_empty() {
        return Err(format!("invalid duration {s:?}"));
    }
    let scale = match unit.trim() {
        "" | "ns" => 1.0,
        "us" | "µs" => 1e3,
        "ms" => 1e6,
        "s" => 1e9,
        other => return Err(format!("unknown duration unit {other:?} in {s:?}")),
    };
    let value: f64 = num.parse().map_err(|_| format!("invalid duration {s:?}"))?;
    let ns = value * scale;
    if !ns.is_finite() || ns < 0.0 || ns > u64::MAX as f64 {
        return Err(format!("duration out of range: {s:?}"));
    }
    Ok(ns.round() as u64)
}

/// Formats nanoseconds with the largest unit that divides them exactly.
pub fn format_duration_ns(ns: u64) -> String {
    if ns == 0 {
        return "0ns".into();
    }
    for (div, unit) in [(1_000_000_000, "s"), (1_000_000, "ms"), (1_000, "us")] {
        if ns.is_multiple_of(div) {
            return format!("{}{}", ns / div, unit);
        }
    }
    format!("{ns}ns")
}

struct DurationVisitor;

impl Visitor<'_> for DurationVisitor {
    type Value = u64;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a duration such as \"30us\" or an integer of nanoseconds")
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<u64, E> {
        Ok(v)
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<u64, E> {
        u64::try_from(v).map_err(|_| E::custom("negative duration"))
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<u64, E> {
        if v.is_finite() && v >= 0.0 {
            Ok(v.round() as u64)
        } else {
            Err(E::custom("invalid duration"))
        }
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<u64, E> {
        parse_duration_ns(v).map_err(E::custom)
    }
}

/// `#[serde(with = "crate::units::duration")]` helper.
pub mod duration {
    use super::*;

    pub fn serialize<S: Serializer>(ns: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_duration_ns(*ns))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        d.deserialize_any(DurationVisitor)
    }
}

/// Same as [`duration`] for `Option<u64>` fields.
pub mod opt_duration {
    use super::*;

    pub fn serialize<S: Serializer>(ns: &Option<u64>, s: S) -> Result<S::Ok, S::Error> {
        match ns {
            Some(v) => s.serialize_str(&format_duration_ns(*v)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<u64>, D::Error> {
        struct OptVisitor;
        impl<'de> Visitor<'de> for OptVisitor {
            type Value = Option<u64>;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an optional duration")
            }
            fn visit_none<E: de::Error>(self) -> Result<Self::Value, E> {
                Ok(None)
            }
            fn visit_unit<E: de::Error>(self) -> Result<Self::Value, E> {
                Ok(None)
            }
            fn visit_some<D2: Deserializer<'de>>(self, d: D2) -> Result<Self::Value, D2::Error> {
                d.deserialize_any(DurationVisitor).map(Some)
            }
        }
        d.deserialize_option(OptVisitor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_suffixes() {
        assert_eq!(parse_duration_ns("500"), Ok(500));
        assert_eq!(parse_duration_ns("500ns"), Ok(500));
        assert_eq!(parse_duration_ns("0.5us"), Ok(500));
        assert_eq!(parse_duration_ns("30us"), Ok(30_000));
        assert_eq!(parse_duration_ns("10ms"), Ok(10_000_000));
        assert_eq!(parse_duration_ns("2s"), Ok(2_000_000_000));
        assert!(parse_duration_ns("us").is_err());
        assert!(parse_duration_ns("5 parsecs").is_err());
    }

    #[test]
    fn formats_round_trip() {
        for ns in [0, 1, 500, 30_000, 10_000_000, 2_000_000_000, 1_500] {
            assert_eq!(parse_duration_ns(&format_duration_ns(ns)), Ok(ns));
        }
    }
}
