//! Element counting for adsorbate SMILES labels and reduced bulk formulas.
//!
//! This is not a SMILES parser. Labels are read as symbols with optional
//! counts and parenthesized groups with multipliers (`NH2N(CH3)2`), which is
//! all the serializers need. Bond and charge characters are skipped.

use std::collections::BTreeMap;

use crate::elements::is_known_element;
use crate::error::{Error, Result};

pub type ElementCounts = BTreeMap<String, usize>;

/// Count the elements named in a SMILES-like label or chemical formula.
pub fn element_counts(label: &str) -> Result<ElementCounts> {
    let chars: Vec<char> = label.chars().collect();
    let mut stack: Vec<ElementCounts> = vec![ElementCounts::new()];
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            '(' | '[' => {
                stack.push(ElementCounts::new());
                i += 1;
            }
            ')' | ']' => {
                let group = stack
                    .pop()
                    .filter(|_| !stack.is_empty())
                    .ok_or_else(|| Error::Data(format!("unbalanced group in {label:?}")))?;
                i += 1;
                let (mult, next) = read_count(&chars, i);
                i = next;
                let top = stack.last_mut().expect("stack is non-empty");
                for (el, n) in group {
                    *top.entry(el).or_default() += n * mult;
                }
            }
            c if c.is_ascii_uppercase() || is_aromatic(c) => {
                let (symbol, next) = read_symbol(&chars, i, label)?;
                let (count, next) = read_count(&chars, next);
                i = next;
                *stack.last_mut().unwrap().entry(symbol).or_default() += count;
            }
            '*' | '=' | '#' | '+' | '-' | '@' | '/' | '\\' | '.' | ':' | '~' => i += 1,
            c if c.is_ascii_digit() => {
                // count with no preceding symbol (e.g. a charge magnitude)
                i += 1;
            }
            c if c.is_whitespace() => i += 1,
            other => {
                return Err(Error::Data(format!(
                    "unexpected character {other:?} in {label:?}"
                )))
            }
        }
    }
    if stack.len() != 1 {
        return Err(Error::Data(format!("unbalanced group in {label:?}")));
    }
    Ok(stack.pop().unwrap())
}

/// Total atom count of a label.
pub fn atom_count(label: &str) -> Result<usize> {
    Ok(element_counts(label)?.values().sum())
}

/// Sorted unique element symbols of a label.
pub fn unique_elements(label: &str) -> Result<Vec<String>> {
    Ok(element_counts(label)?.into_keys().collect())
}

fn is_aromatic(c: char) -> bool {
    matches!(c, 'b' | 'c' | 'n' | 'o' | 'p' | 's')
}

fn read_symbol(chars: &[char], start: usize, label: &str) -> Result<(String, usize)> {
    let first = chars[start];
    if is_aromatic(first) {
        return Ok((first.to_ascii_uppercase().to_string(), start + 1));
    }
    if let Some(&second) = chars.get(start + 1) {
        if second.is_ascii_lowercase() {
            let two: String = [first, second].iter().collect();
            if is_known_element(&two) {
                return Ok((two, start + 2));
            }
        }
    }
    let one = first.to_string();
    if is_known_element(&one) {
        Ok((one, start + 1))
    } else {
        Err(Error::UnknownElement(format!("{one} (in {label:?})")))
    }
}

fn read_count(chars: &[char], start: usize) -> (usize, usize) {
    let mut end = start;
    while end < chars.len() && chars[end].is_ascii_digit() {
        end += 1;
    }
    if end == start {
        return (1, start);
    }
    let digits: String = chars[start..end].iter().collect();
    (digits.parse().unwrap_or(1), end)
}
