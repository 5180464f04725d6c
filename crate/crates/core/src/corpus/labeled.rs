use std::io::Read;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A sentence with a binary depression label (`true` = depression-related).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub text: String,
    pub label: bool,
}

impl LabeledExample {
    pub fn new(text: impl Into<String>, label: bool) -> Self {
        LabeledExample { text: text.into(), label }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LabeledDataset {
    pub examples: Vec<LabeledExample>,
    pub positives: usize,
    pub negatives: usize,
}

/// Parses a two-column `text,label` CSV with a header row.
///
/// Comma separated, `"` quoting with `""` escapes, quoted fields may span
/// lines, trailing whitespace and CRLF tolerated. Labels must be `0` or `1`.
pub fn parse_labeled_csv<R: Read>(mut input: R, source_name: &str) -> Result<LabeledDataset> {
    let mut raw = String::new();
    input
        .read_to_string(&mut raw)
        .map_err(|e| Error::line(source_name, 0, format!("unreadable input: {e}")))?;
    let rows = CsvRows::new(&raw, source_name);
    let mut out = LabeledDataset::default();
    let mut header_seen = false;
    for row in rows {
        let (line, fields) = row?;
        if !header_seen {
            header_seen = true;
            continue;
        }
        if fields.len() != 2 {
            return Err(Error::line(source_name, line, format!("expected 2 fields, found {}", fields.len())));
        }
        let label = match fields[1].trim() {
            "0" => false,
            "1" => true,
            other => return Err(Error::line(source_name, line, format!("label must be 0 or 1, found {other:?}"))),
        };
        if label {
            out.positives += 1;
        } else {
            out.negatives += 1;
        }
        out.examples.push(LabeledExample {
            text: fields.into_iter().next().unwrap(),
            label,
        });
    }
    if !header_seen {
        return Err(Error::line(source_name, 1, "missing header row"));
    }
    Ok(out)
}

/// Iterator over CSV records as `(starting line, fields)`. Blank lines are skipped.
struct CsvRows<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    line: usize,
    source: &'a str,
}

impl<'a> CsvRows<'a> {
    fn new(raw: &'a str, source: &'a str) -> Self {
        let raw = raw.strip_prefix('\u{feff}').unwrap_or(raw);
        CsvRows {
            chars: raw.chars().peekable(),
            line: 1,
            source,
        }
    }

    fn read_record(&mut self) -> Result<Option<(usize, Vec<String>)>> {
        // skip blank lines
        loop {
            match self.chars.peek() {
                None => return Ok(None),
                Some('\n') => {
                    self.chars.next();
                    self.line += 1;
                }
                Some('\r') => {
                    self.chars.next();
                }
                Some(_) => break,
            }
        }
        let start_line = self.line;
        let mut fields = Vec::new();
        let mut field = String::new();
        loop {
            // start of a field
            while matches!(self.chars.peek(), Some(' ' | '\t')) {
                field.push(self.chars.next().unwrap());
            }
            if self.chars.peek() == Some(&'"') && field.trim().is_empty() {
                self.chars.next();
                field.clear();
                let quote_line = self.line;
                loop {
                    match self.chars.next() {
                        None => {
                            return Err(Error::line(self.source, quote_line, "unbalanced quote: quoted field never closed"))
                        }
                        Some('"') if self.chars.peek() == Some(&'"') => {
                            self.chars.next();
                            field.push('"');
                        }
                        Some('"') => break,
                        Some(c) => {
                            if c == '\n' {
                                self.line += 1;
                            }
                            field.push(c);
                        }
                    }
                }
                while matches!(self.chars.peek(), Some(' ' | '\t' | '\r')) {
                    self.chars.next();
                }
                match self.chars.peek() {
                    None | Some(',') | Some('\n') => {}
                    Some(_) => {
                        return Err(Error::line(self.source, self.line, "unexpected character after closing quote"));
                    }
                }
            } else {
                while let Some(&c) = self.chars.peek() {
                    if c == ',' || c == '\n' {
                        break;
                    }
                    field.push(c);
                    self.chars.next();
                }
                field.truncate(field.trim_end().len());
            }
            fields.push(std::mem::take(&mut field));
            match self.chars.next() {
                Some(',') => continue,
                Some('\n') => {
                    self.line += 1;
                    return Ok(Some((start_line, fields)));
                }
                None => return Ok(Some((start_line, fields))),
                Some(_) => unreachable!(),
            }
        }
    }
}

impl Iterator for CsvRows<'_> {
    type Item = Result<(usize, Vec<String>)>;

    fn next(&mut self) -> Option<Self::Item> {
        self.read_record().transpose()
    }
}

/// Stratified, seeded split. Each class contributes `round(n_class * fraction)`
/// examples to validation; both outputs are shuffled deterministically.
pub fn split_train_validation(
    examples: &[LabeledExample],
    validation_fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>)> {
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "validation fraction must be in (0, 1), got {validation_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for label in [false, true] {
        let mut class: Vec<&LabeledExample> = examples.iter().filter(|e| e.label == label).collect();
        if class.len() < 2 {
            return Err(Error::invalid(format!(
                "class {} has {} examples; at least 2 required to split",
                u8::from(label),
                class.len()
            )));
        }
        class.shuffle(&mut rng);
        let n_val = (class.len() as f64 * validation_fraction).round() as usize;
        let (val, tr) = class.split_at(n_val);
        validation.extend(val.iter().map(|e| (*e).clone()));
        train.extend(tr.iter().map(|e| (*e).clone()));
    }
    train.shuffle(&mut rng);
    validation.shuffle(&mut rng);
    Ok((train, validation))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<LabeledDataset> {
        parse_labeled_csv(s.as_bytes(), "test.csv")
    }

    #[test]
    fn counts_classes() {
        let d = parse("text,label\na,1\nb,0\n").unwrap();
        assert_eq!((d.positives, d.negatives), (1, 1));
        assert_eq!(d.examples[0], LabeledExample::new("a", true));
    }

    #[test]
    fn quoted_fields_and_crlf() {
        let d = parse("clean_text,is_depression\r\n\"hi, \"\"there\"\"\nsecond line\",1\r\nplain text  ,0  \r\n").unwrap();
        assert_eq!(d.examples[0].text, "hi, \"there\"\nsecond line");
        assert_eq!(d.examples[1].text, "plain text");
        assert_eq!(d.examples.len(), 2);
    }

    #[test]
    fn bad_label_reports_line() {
        match parse("text,label\na,1\nb,2\n") {
            Err(Error::Line { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn line_numbers_account_for_multiline_fields() {
        match parse("text,label\n\"a\nb\",1\nc,x\n") {
            Err(Error::Line { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unbalanced_quote_is_error() {
        assert!(matches!(parse("text,label\nabc,\"1\nx,0\n"), Err(Error::Line { line: 2, .. })));
        assert!(parse("text,label\n\"abc\"x,1\n").is_err());
    }

    #[test]
    fn missing_header() {
        assert!(parse("").is_err());
    }

    fn balanced(n: usize) -> Vec<LabeledExample> {
        (0..2 * n).map(|i| LabeledExample::new(format!("s{i}"), i % 2 == 0)).collect()
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let data = balanced(5);
        let (train, val) = split_train_validation(&data, 0.2, 7).unwrap();
        assert_eq!((train.len(), val.len()), (8, 2));
        assert_eq!(val.iter().filter(|e| e.label).count(), 1);
        let again = split_train_validation(&data, 0.2, 7).unwrap();
        assert_eq!((train, val), again);
    }

    #[test]
    fn split_size_at_dataset_scale() {
        let mut data: Vec<_> = (0..3831).map(|i| LabeledExample::new(format!("p{i}"), true)).collect();
        data.extend((0..3900).map(|i| LabeledExample::new(format!("n{i}"), false)));
        let (train, val) = split_train_validation(&data, 0.1, 1).unwrap();
        let expected = 7731.0 * 0.1;
        assert!((val.len() as f64 - expected).abs() <= 1.0, "{}", val.len());
        assert_eq!(train.len() + val.len(), 7731);
    }

    #[test]
    fn split_rejects_tiny_class() {
        let data = vec![LabeledExample::new("a", true), LabeledExample::new("b", false), LabeledExample::new("c", false)];
        assert!(split_train_validation(&data, 0.5, 0).is_err());
        assert!(split_train_validation(&balanced(3), 1.0, 0).is_err());
    }
}
