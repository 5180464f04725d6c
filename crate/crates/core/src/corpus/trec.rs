use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::Serialize;

use super::SentenceRecord;
use crate::{Error, Result};

/// Counts collected while streaming a corpus.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CorpusStats {
    /// Distinct users among yielded records with structured ids.
    pub user_count: u64,
    /// Records yielded (non-empty text).
    pub sentence_count: u64,
    /// Well-formed blocks dropped because their text was empty after trimming.
    pub dropped_empty: u64,
    /// Blocks skipped in recover mode.
    pub malformed_blocks: u64,
    /// Yielded records whose DOCNO was kept as an opaque key.
    pub opaque_ids: u64,
}

impl CorpusStats {
    /// `sentence_count / user_count`, or `None` with no structured users.
    pub fn mean_sentences_per_user(&self) -> Option<f64> {
        (self.user_count > 0).then(|| self.sentence_count as f64 / self.user_count as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Outside,
    /// Skipping to the next `<DOC>` after a malformed block.
    Skipping,
    ExpectDocno,
    ExpectText,
    InText,
    ExpectClose,
}

/// Streaming parser over `<DOC><DOCNO>..</DOCNO><TEXT>..</TEXT></DOC>` blocks.
///
/// Memory use is bounded by the largest single block. Text may span lines; a
/// line consisting of exactly `<DOC>` always starts a new block, so an unclosed
/// block is reported at its own offset and the following block still parses
/// in recover mode.
///
/// In strict mode the iterator stops after the first error. With
/// [`TrecReader::recover`] each malformed block yields one `Err` and parsing
/// resumes at the next `<DOC>`.
pub struct TrecReader<R> {
    input: R,
    recover: bool,
    offset: u64,
    line: Vec<u8>,
    text: Vec<u8>,
    docno: Option<String>,
    block_start: u64,
    state: State,
    finished: bool,
    users: HashSet<String>,
    stats: CorpusStats,
    peak_buffer: usize,
}

impl<R: BufRead> TrecReader<R> {
    pub fn new(input: R) -> Self {
        TrecReader {
            input,
            recover: false,
            offset: 0,
            line: Vec::new(),
            text: Vec::new(),
            docno: None,
            block_start: 0,
            state: State::Outside,
            finished: false,
            users: HashSet::new(),
            stats: CorpusStats::default(),
            peak_buffer: 0,
        }
    }

    /// Enables skip-to-next-DOC recovery.
    pub fn recover(mut self, recover: bool) -> Self {
        self.recover = recover;
        self
    }

    /// Stats for everything consumed so far; complete once the iterator is exhausted.
    pub fn stats(&self) -> &CorpusStats {
        &self.stats
    }

    /// Largest internal buffer capacity seen, in bytes.
    pub fn peak_buffer_bytes(&self) -> usize {
        self.peak_buffer
    }

    fn fail(&mut self, offset: u64, message: impl Into<String>) -> Error {
        if self.recover {
            self.stats.malformed_blocks += 1;
        } else {
            self.finished = true;
        }
        self.docno = None;
        self.text.clear();
        self.state = State::Skipping;
        Error::Trec {
            offset,
            message: message.into(),
        }
    }

    /// Opens a new block at the current `<DOC>` line; returns the error for the block it interrupts.
    fn interrupt(&mut self, line_start: u64, what: &str) -> Error {
        let err = self.fail(self.block_start, format!("{what} before next <DOC>"));
        if self.recover {
            self.block_start = line_start;
            self.state = State::ExpectDocno;
        }
        err
    }

    fn read_line(&mut self) -> Result<Option<u64>> {
        self.line.clear();
        let start = self.offset;
        let n = self.input.read_until(b'\n', &mut self.line)?;
        self.peak_buffer = self.peak_buffer.max(self.line.capacity() + self.text.capacity());
        if n == 0 {
            return Ok(None);
        }
        self.offset += n as u64;
        Ok(Some(start))
    }

    fn finish_block(&mut self) -> Option<SentenceRecord> {
        let docno = self.docno.take().expect("docno set before text");
        let raw = std::mem::take(&mut self.text);
        self.state = State::Outside;
        let text = String::from_utf8(raw).expect("validated before finish");
        let trimmed = text.trim();
        if trimmed.is_empty() {
            self.stats.dropped_empty += 1;
            return None;
        }
        let rec = SentenceRecord::from_id(docno, trimmed);
        match &rec.user_id {
            Some(u) => {
                if !self.users.contains(u) {
                    self.users.insert(u.clone());
                    self.stats.user_count += 1;
                }
            }
            None => self.stats.opaque_ids += 1,
        }
        self.stats.sentence_count += 1;
        Some(rec)
    }

    fn step(&mut self) -> Option<Result<SentenceRecord>> {
        loop {
            let line_start = match self.read_line() {
                Ok(Some(s)) => s,
                Ok(None) => {
                    self.finished = true;
                    return match self.state {
                        State::Outside | State::Skipping => None,
                        State::InText => Some(Err(self.fail(self.block_start, "unclosed <TEXT> at end of input"))),
                        _ => Some(Err(self.fail(self.block_start, "unclosed <DOC> at end of input"))),
                    };
                }
                Err(e) => {
                    self.finished = true;
                    return Some(Err(e));
                }
            };
            let content = strip_eol(&self.line);
            let is_doc_open = content == b"<DOC>";
            match self.state {
                State::Outside | State::Skipping => {
                    if is_doc_open {
                        self.block_start = line_start;
                        self.state = State::ExpectDocno;
                    } else if self.state == State::Outside && !is_blank(content) {
                        return Some(Err(self.fail(line_start, "expected <DOC>")));
                    }
                }
                State::ExpectDocno => {
                    if is_doc_open {
                        return Some(Err(self.interrupt(line_start, "missing <DOCNO>")));
                    }
                    if is_blank(content) {
                        continue;
                    }
                    let id = content
                        .strip_prefix(b"<DOCNO>")
                        .and_then(|r| r.strip_suffix(b"</DOCNO>"))
                        .and_then(|r| std::str::from_utf8(r).ok())
                        .map(str::trim)
                        .filter(|id| !id.is_empty());
                    match id {
                        Some(id) => {
                            self.docno = Some(id.to_string());
                            self.state = State::ExpectText;
                        }
                        None => return Some(Err(self.fail(self.block_start, "missing or malformed <DOCNO>"))),
                    }
                }
                State::ExpectText => {
                    if is_doc_open {
                        return Some(Err(self.interrupt(line_start, "missing <TEXT>")));
                    }
                    if is_blank(content) {
                        continue;
                    }
                    let Some(rest) = self.line.strip_prefix(b"<TEXT>") else {
                        return Some(Err(self.fail(self.block_start, "expected <TEXT> after <DOCNO>")));
                    };
                    let rest = rest.to_vec();
                    if let Some(err) = self.consume_text(&rest) {
                        return Some(Err(err));
                    }
                }
                State::InText => {
                    if is_doc_open {
                        return Some(Err(self.interrupt(line_start, "unclosed <TEXT>")));
                    }
                    let rest = self.line.clone();
                    if let Some(err) = self.consume_text(&rest) {
                        return Some(Err(err));
                    }
                }
                State::ExpectClose => {
                    if is_doc_open {
                        return Some(Err(self.interrupt(line_start, "missing </DOC>")));
                    }
                    if is_blank(content) {
                        continue;
                    }
                    if content != b"</DOC>" {
                        return Some(Err(self.fail(self.block_start, "unexpected content after </TEXT>")));
                    }
                    if std::str::from_utf8(&self.text).is_err() {
                        return Some(Err(self.fail(self.block_start, "text is not valid UTF-8")));
                    }
                    if let Some(rec) = self.finish_block() {
                        return Some(Ok(rec));
                    }
                }
            }
        }
    }

    /// Appends text from one line, switching state when `</TEXT>` closes it.
    fn consume_text(&mut self, chunk: &[u8]) -> Option<Error> {
        match find(chunk, b"</TEXT>") {
            Some(pos) => {
                self.text.extend_from_slice(&chunk[..pos]);
                let tail = &chunk[pos + b"</TEXT>".len()..];
                if !is_blank(strip_eol(tail)) {
                    return Some(self.fail(self.block_start, "unexpected content after </TEXT>"));
                }
                self.state = State::ExpectClose;
            }
            None => {
                self.text.extend_from_slice(chunk);
                self.state = State::InText;
            }
        }
        None
    }
}

impl<R: BufRead> Iterator for TrecReader<R> {
    type Item = Result<SentenceRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.finished {
            return None;
        }
        self.step()
    }
}

fn strip_eol(line: &[u8]) -> &[u8] {
    let line = line.strip_suffix(b"\n").unwrap_or(line);
    line.strip_suffix(b"\r").unwrap_or(line)
}

fn is_blank(bytes: &[u8]) -> bool {
    bytes.iter().all(u8::is_ascii_whitespace)
}

fn find(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

/// Writes one record as a TREC block.
pub fn write_trec_record<W: Write>(out: &mut W, rec: &SentenceRecord) -> Result<()> {
    if rec.text.contains("</TEXT>") {
        return Err(Error::invalid(format!("text of {} contains </TEXT>", rec.sentence_id)));
    }
    if rec.sentence_id.is_empty() || rec.sentence_id.contains(['<', '\n', '\r']) {
        return Err(Error::invalid(format!("unencodable sentence id {:?}", rec.sentence_id)));
    }
    write!(
        out,
        "<DOC>\n<DOCNO>{}</DOCNO>\n<TEXT>{}</TEXT>\n</DOC>\n",
        rec.sentence_id, rec.text
    )?;
    Ok(())
}

pub fn write_trec<'a, W: Write>(out: &mut W, records: impl IntoIterator<Item = &'a SentenceRecord>) -> Result<()> {
    for rec in records {
        write_trec_record(out, rec)?;
    }
    Ok(())
}
