//! Rule-based answer verification.
//!
//! The final answer is the content of the last top-level `\boxed{...}` in a
//! response. Answers are compared exactly after normalization: rationals and
//! decimals by value, anything else as a normalized string. There is no
//! numeric tolerance, so `12.7` and `12.8` are different answers.

use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, Zero};
use rand::Rng;

use crate::{Error, Result};

const BOXED: &str = "\\boxed{";

/// Normalized form of an extracted answer or label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CanonicalAnswer {
    /// A fraction; always reduced with a positive denominator.
    Rational { value: BigRational, raw: String },
    /// A plain integer or decimal literal with trailing zeros trimmed.
    Decimal { digits: String, value: BigRational, raw: String },
    /// Anything else, whitespace-free and lowercased.
    Text { text: String, raw: String },
}

impl CanonicalAnswer {
    pub fn raw(&self) -> &str {
        match self {
            Self::Rational { raw, .. } | Self::Decimal { raw, .. } | Self::Text { raw, .. } => raw,
        }
    }

    /// Exact numeric value for the numeric kinds.
    pub fn value(&self) -> Option<&BigRational> {
        match self {
            Self::Rational { value, .. } | Self::Decimal { value, .. } => Some(value),
            Self::Text { .. } => None,
        }
    }

    pub fn is_numeric(&self) -> bool {
        self.value().is_some()
    }
}

impl fmt::Display for CanonicalAnswer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Rational { value, .. } => write!(f, "{}/{}", value.numer(), value.denom()),
            Self::Decimal { digits, .. } => f.write_str(digits),
            Self::Text { text, .. } => f.write_str(text),
        }
    }
}

/// Byte offsets of every top-level `\boxed{` with its balanced content.
fn boxed_spans(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut pos = 0;
    while let Some(found) = text[pos..].find(BOXED) {
        let open = pos + found + BOXED.len();
        let mut depth = 1usize;
        let mut end = None;
        for (i, &b) in bytes.iter().enumerate().skip(open) {
            match b {
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        end = Some(i);
                        break;
                    }
                }
                _ => {}
            }
        }
        match end {
            Some(close) => {
                spans.push(&text[open..close]);
                pos = close + 1;
            }
            // Unbalanced: nothing after this point can close either.
            None => break,
        }
    }
    spans
}

/// Content of the last balanced `\boxed{...}`, if any.
pub fn extract_boxed(text: &str) -> Option<String> {
    boxed_spans(text).last().map(|s| s.to_string())
}

fn strip_wrappers(raw: &str) -> String {
    let mut s = raw.trim().to_string();
    loop {
        let before = s.len();
        s = s.trim().to_string();
        while s.ends_with('.') || s.ends_with('$') {
            s.pop();
        }
        while s.starts_with('$') {
            s.remove(0);
        }
        for prefix in ["\\left", "\\right"] {
            s = s.replace(prefix, "");
        }
        s = s.replace("\\dfrac", "\\frac").replace("\\tfrac", "\\frac");
        s = s.replace("\\!", "").replace("\\,", "").replace("\\ ", "");
        if s.len() == before {
            return s.trim().to_string();
        }
    }
}

/// `-12.50` -> value and canonical digits `-12.5`. Accepts thousands separators.
fn parse_decimal(s: &str) -> Option<(String, BigRational)> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let body = if body.contains(',') {
        let groups: Vec<&str> = body.split('.').next()?.split(',').collect();
        let ok = groups[0].len() <= 3
            && !groups[0].is_empty()
            && groups[1..].iter().all(|g| g.len() == 3);
        if !ok {
            return None;
        }
        body.replace(',', "")
    } else {
        body.to_string()
    };
    let (int_part, frac_part) = match body.split_once('.') {
        Some((i, f)) => (i, f),
        None => (body.as_str(), ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.bytes().all(|b| b.is_ascii_digit()) || !frac_part.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let frac = frac_part.trim_end_matches('0');
    let int = int_part.trim_start_matches('0');
    let int = if int.is_empty() { "0" } else { int };
    let numer: BigInt = format!("{int}{frac}").parse().ok()?;
    let denom = num_traits::pow(BigInt::from(10), frac.len());
    let mut value = BigRational::new(numer, denom);
    if neg {
        value = -value;
    }
    let mut digits = if frac.is_empty() { int.to_string() } else { format!("{int}.{frac}") };
    if neg && !value.is_zero() {
        digits.insert(0, '-');
    }
    Some((digits, value))
}

/// Splits `{a}{b}` or the short form `ab` after `\frac`.
fn frac_args(s: &str) -> Option<(&str, &str, &str)> {
    fn group(s: &str) -> Option<(&str, &str)> {
        if let Some(rest) = s.strip_prefix('{') {
            let mut depth = 1;
            for (i, c) in rest.char_indices() {
                match c {
                    '{' => depth += 1,
                    '}' => {
                        depth -= 1;
                        if depth == 0 {
                            return Some((&rest[..i], &rest[i + 1..]));
                        }
                    }
                    _ => {}
                }
            }
            None
        } else {
            let c = s.chars().next()?;
            Some(s.split_at(c.len_utf8()))
        }
    }
    let (a, rest) = group(s)?;
    let (b, rest) = group(rest)?;
    Some((a, b, rest))
}

fn parse_fraction(s: &str) -> Option<BigRational> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    // optional whole part of a mixed number, e.g. 22\frac{1}{2}
    let (whole, frac) = match body.find("\\frac") {
        Some(0) => (None, &body[5..]),
        Some(i) => (Some(&body[..i]), &body[i + 5..]),
        None => {
            let (a, b) = body.split_once('/')?;
            let (_, num) = parse_decimal(a)?;
            let (_, den) = parse_decimal(b)?;
            if den.is_zero() {
                return None;
            }
            let v = num / den;
            return Some(if neg { -v } else { v });
        }
    };
    let (a, b, rest) = frac_args(frac)?;
    if !rest.is_empty() {
        return None;
    }
    let (_, num) = parse_decimal(a.trim())?;
    let (_, den) = parse_decimal(b.trim())?;
    if den.is_zero() || num.is_negative() || den.is_negative() {
        return None;
    }
    let mut v = num / den;
    if let Some(w) = whole {
        let (_, w) = parse_decimal(w)?;
        if !w.is_integer() || w.is_negative() {
            return None;
        }
        v += w;
    }
    Some(if neg { -v } else { v })
}

/// Normalizes an extracted answer or a label.
pub fn normalize_answer(raw: &str) -> CanonicalAnswer {
    let compact: String = strip_wrappers(raw).chars().filter(|c| !c.is_whitespace()).collect();
    let raw = raw.to_string();
    if let Some((digits, value)) = parse_decimal(&compact) {
        return CanonicalAnswer::Decimal { digits, value, raw };
    }
    if let Some(value) = parse_fraction(&compact) {
        return CanonicalAnswer::Rational { value, raw };
    }
    CanonicalAnswer::Text { text: compact.to_lowercase(), raw }
}

/// Exact equivalence: numeric kinds by value, text kinds by string.
pub fn answers_equivalent(a: &CanonicalAnswer, b: &CanonicalAnswer) -> bool {
    match (a, b) {
        (CanonicalAnswer::Text { text: x, .. }, CanonicalAnswer::Text { text: y, .. }) => x == y,
        _ => match (a.value(), b.value()) {
            (Some(x), Some(y)) => x == y,
            _ => false,
        },
    }
}

/// 1 iff a boxed answer can be extracted and it matches the label.
pub fn outcome_reward(response: &str, label: &str) -> f64 {
    match extract_boxed(response) {
        Some(ans) if answers_equivalent(&normalize_answer(&ans), &normalize_answer(label)) => 1.0,
        _ => 0.0,
    }
}

/// 1 iff a nonempty boxed answer can be extracted, right or wrong.
pub fn format_reward(response: &str) -> f64 {
    match extract_boxed(response) {
        Some(ans) if !ans.trim().is_empty() => 1.0,
        _ => 0.0,
    }
}

/// One draw of the label-corruption rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Perturbation {
    /// Offset added to the value (or numerator), in `[-10, 10] \ {0}`.
    pub delta: i64,
    /// Offset added to the denominator of a fraction.
    pub denom_delta: i64,
    pub flip_sign: bool,
}

impl Perturbation {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let offset = |rng: &mut R| {
            let k = rng.gen_range(1..=10i64);
            if rng.gen_bool(0.5) {
                k
            } else {
                -k
            }
        };
        let delta = offset(rng);
        let denom_delta = offset(rng);
        Self { delta, denom_delta, flip_sign: rng.gen_bool(0.5) }
    }
}

fn format_decimal(v: &BigRational, scale: usize) -> String {
    let factor = num_traits::pow(BigInt::from(10), scale);
    let scaled = (v * BigRational::from_integer(factor.clone())).to_integer();
    let neg = scaled.is_negative();
    let mag = scaled.abs().to_string();
    let s = if scale == 0 {
        mag
    } else {
        let padded = format!("{:0>width$}", mag, width = scale + 1);
        let (i, f) = padded.split_at(padded.len() - scale);
        format!("{i}.{f}")
    };
    if neg {
        format!("-{s}")
    } else {
        s
    }
}

/// Applies one perturbation to a numeric label. Returns `None` when the
/// draw is invalid for the label (a fraction whose denominator would not
/// stay positive).
pub fn apply_perturbation(label: &str, p: Perturbation) -> Result<Option<String>> {
    let canon = normalize_answer(label);
    let sign = |v: BigRational| if p.flip_sign { -v } else { v };
    match &canon {
        CanonicalAnswer::Decimal { digits, value, .. } => {
            let scale = digits.split_once('.').map_or(0, |(_, f)| f.len());
            let v = sign(value + BigRational::from_integer(p.delta.into()));
            Ok(Some(format_decimal(&v, scale)))
        }
        CanonicalAnswer::Rational { value, .. } => {
            let num = value.numer() + BigInt::from(p.delta);
            let den = value.denom() + BigInt::from(p.denom_delta);
            if !den.is_positive() {
                return Ok(None);
            }
            let v = sign(BigRational::new(num, den));
            Ok(Some(format!("{}/{}", v.numer(), v.denom())))
        }
        CanonicalAnswer::Text { .. } => Err(Error::UnsupportedLabel(label.to_string())),
    }
}

/// Replaces a numeric label by a random non-equivalent one.
pub fn perturb_label<R: Rng + ?Sized>(label: &str, rng: &mut R) -> Result<String> {
    let original = normalize_answer(label);
    if !original.is_numeric() {
        return Err(Error::UnsupportedLabel(label.to_string()));
    }
    loop {
        if let Some(out) = apply_perturbation(label, Perturbation::sample(rng))? {
            if !answers_equivalent(&normalize_answer(&out), &original) {
                return Ok(out);
            }
        }
    }
}
