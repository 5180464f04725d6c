//! Sentence corpora and labeled training data.
//!
//! Sentence ids follow `<user_id>_<doc_index>_<sentence_index>`. Ids that do
//! not have that shape are kept as opaque keys with the structured fields unset.

mod labeled;
mod trec;

pub use labeled::{parse_labeled_csv, split_train_validation, LabeledDataset, LabeledExample};
pub use trec::{write_trec, write_trec_record, CorpusStats, TrecReader};

use serde::{Deserialize, Serialize};

/// One corpus sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub sentence_id: String,
    pub user_id: Option<String>,
    pub doc_index: Option<u32>,
    pub sentence_index: Option<u32>,
    pub text: String,
}

impl SentenceRecord {
    /// Builds a record from a raw DOCNO, decoding structure when present.
    pub fn from_id(sentence_id: impl Into<String>, text: impl Into<String>) -> Self {
        let sentence_id = sentence_id.into();
        let (user_id, doc_index, sentence_index) = match decode_sentence_id(&sentence_id) {
            Some((u, d, s)) => (Some(u.to_string()), Some(d), Some(s)),
            None => (None, None, None),
        };
        SentenceRecord {
            sentence_id,
            user_id,
            doc_index,
            sentence_index,
            text: text.into(),
        }
    }

    pub fn structured(user_id: &str, doc_index: u32, sentence_index: u32, text: impl Into<String>) -> Self {
        SentenceRecord {
            sentence_id: encode_sentence_id(user_id, doc_index, sentence_index),
            user_id: Some(user_id.to_string()),
            doc_index: Some(doc_index),
            sentence_index: Some(sentence_index),
            text: text.into(),
        }
    }
}

pub fn encode_sentence_id(user_id: &str, doc_index: u32, sentence_index: u32) -> String {
    format!("{user_id}_{doc_index}_{sentence_index}")
}

/// Splits an id into `(user, doc, sentence)`. User ids may themselves contain
/// underscores; the two numeric parts must be canonical decimals so that
/// decoding then encoding reproduces the input exactly.
pub fn decode_sentence_id(id: &str) -> Option<(&str, u32, u32)> {
    let mut parts = id.rsplitn(3, '_');
    let sentence = parse_canonical_u32(parts.next()?)?;
    let doc = parse_canonical_u32(parts.next()?)?;
    let user = parts.next()?;
    if user.is_empty() {
        return None;
    }
    Some((user, doc, sentence))
}

fn parse_canonical_u32(s: &str) -> Option<u32> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) || (s.len() > 1 && s.starts_with('0')) {
        return None;
    }
    s.parse().ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decodes_structured_ids() {
        assert_eq!(decode_sentence_id("u001_0_0"), Some(("u001", 0, 0)));
        assert_eq!(decode_sentence_id("subject_12_3_45"), Some(("subject_12", 3, 45)));
    }

    #[test]
    fn non_canonical_ids_are_opaque() {
        for id in ["plain", "u_1", "_1_2", "u_01_2", "u_1_+2", "u_1_x", "u_1_99999999999"] {
            assert_eq!(decode_sentence_id(id), None, "{id}");
        }
        let rec = SentenceRecord::from_id("doc-77", "hello");
        assert_eq!(rec.user_id, None);
        assert_eq!(rec.doc_index, None);
    }

    proptest! {
        #[test]
        fn id_round_trip(user in "[A-Za-z0-9_]{0,8}[A-Za-z0-9]", doc: u32, sent: u32) {
            let id = encode_sentence_id(&user, doc, sent);
            prop_assert_eq!(decode_sentence_id(&id), Some((user.as_str(), doc, sent)));
        }
    }
}
