//! Corpus persistence.
//!
//! Binary layout (all integers and floats little endian):
//!
//! ```text
//! "MIAUG1"
//! u32 num_classes, u32 audio_dim, u32 text_dim, u64 record_count, u32 speaker_count
//! speaker_count x (u32 byte_len, utf-8 bytes)       speaker table
//! u32 byte_len, utf-8 bytes                          provenance note
//! record_count x (u32 speaker_index, u32 label, audio_dim x f64, text_dim x f64)
//! ```
//!
//! CSV layout: header `speaker,label,h_0..h_{d_a-1},t_0..t_{d_t-1}`, one row
//! per record. Floats are written in shortest round-trip form.

use std::collections::BTreeMap;
use std::path::Path;

use super::{Corpus, FeatureRecord};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"MIAUG1";

pub fn corpus_to_bytes(corpus: &Corpus) -> Vec<u8> {
    let speakers = corpus.speakers();
    let index: BTreeMap<&str, u32> = speakers
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i as u32))
        .collect();
    let stride = 8 + 8 * (corpus.audio_dim + corpus.text_dim);
    let mut out = Vec::with_capacity(64 + corpus.len() * stride);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(corpus.num_classes as u32).to_le_bytes());
    out.extend_from_slice(&(corpus.audio_dim as u32).to_le_bytes());
    out.extend_from_slice(&(corpus.text_dim as u32).to_le_bytes());
    out.extend_from_slice(&(corpus.len() as u64).to_le_bytes());
    out.extend_from_slice(&(speakers.len() as u32).to_le_bytes());
    for s in &speakers {
        put_str(&mut out, s);
    }
    put_str(&mut out, &corpus.provenance);
    for r in &corpus.records {
        out.extend_from_slice(&index[r.speaker.as_str()].to_le_bytes());
        out.extend_from_slice(&(r.label as u32).to_le_bytes());
        for v in r.audio.iter().chain(&r.text) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Cursor over a byte buffer that reports the offset of whatever it fails to read.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.offset(),
            message: message.into(),
        })
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return self.fail(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.remaining()
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn string(&mut self, what: &str) -> Result<String> {
        let start = self.offset();
        let len = self.u32(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
            offset: start,
            message: format!("{what} is not valid utf-8"),
        })
    }

    pub(crate) fn magic(&mut self) -> Result<()> {
        if self.take(MAGIC.len(), "magic")? != MAGIC {
            self.pos = 0;
            return self.fail("bad magic, expected MIAUG1");
        }
        Ok(())
    }
}

pub fn corpus_from_bytes(bytes: &[u8]) -> Result<Corpus> {
    let mut r = Reader::new(bytes);
    let corpus = read_corpus_body(&mut r)?;
    if r.remaining() != 0 {
        return r.fail(format!("{} trailing bytes after last record", r.remaining()));
    }
    Ok(corpus)
}

pub(crate) fn read_corpus_body(r: &mut Reader<'_>) -> Result<Corpus> {
    r.magic()?;
    let num_classes = r.u32("num_classes")? as usize;
    let audio_dim = r.u32("audio_dim")? as usize;
    let text_dim = r.u32("text_dim")? as usize;
    let count_offset = r.offset();
    let count = r.u64("record_count")?;
    let speaker_count = r.u32("speaker_count")? as usize;
    if num_classes == 0 {
        return r.fail("num_classes is zero");
    }
    if count == 0 {
        return Err(Error::Format {
            offset: count_offset,
            message: "corpus has no records".into(),
        });
    }
    let mut speakers = Vec::with_capacity(speaker_count.min(1 << 16));
    for _ in 0..speaker_count {
        speakers.push(r.string("speaker name")?);
    }
    let provenance = r.string("provenance")?;

    let stride = 8 + 8 * (audio_dim + text_dim);
    let needed = (count as usize).checked_mul(stride);
    if needed.is_none_or(|n| n > r.remaining()) {
        return r.fail(format!(
            "payload holds {} bytes but header declares {count} records of {stride} bytes \
             (audio_dim {audio_dim}, text_dim {text_dim})",
            r.remaining()
        ));
    }

    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let at = r.offset();
        let speaker = r.u32("speaker index")? as usize;
        let label = r.u32("label")? as usize;
        let Some(name) = speakers.get(speaker) else {
            return Err(Error::Format {
                offset: at,
                message: format!("speaker index {speaker} outside table of {speaker_count}"),
            });
        };
        if label >= num_classes {
            return Err(Error::Format {
                offset: at + 4,
                message: format!("label {label} outside {num_classes} classes"),
            });
        }
        let audio = (0..audio_dim)
            .map(|_| r.f64("audio feature"))
            .collect::<Result<Vec<_>>>()?;
        let text = (0..text_dim)
            .map(|_| r.f64("text feature"))
            .collect::<Result<Vec<_>>>()?;
        records.push(FeatureRecord {
            audio,
            text,
            label,
            speaker: name.clone(),
        });
    }
    Corpus::new(audio_dim, text_dim, num_classes, records, provenance)
}

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, corpus_to_bytes(corpus)).map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    corpus_from_bytes(&bytes)
}

pub(crate) fn csv_header(audio_dim: usize, text_dim: usize) -> Vec<String> {
    let mut header = vec!["speaker".to_string(), "label".to_string()];
    header.extend((0..audio_dim).map(|i| format!("h_{i}")));
    header.extend((0..text_dim).map(|i| format!("t_{i}")));
    header
}

pub fn write_corpus_csv(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(csv_header(corpus.audio_dim, corpus.text_dim))?;
    for r in &corpus.records {
        let mut row = vec![r.speaker.clone(), r.label.to_string()];
        row.extend(r.audio.iter().chain(&r.text).map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

/// Reads a CSV corpus. Without `num_classes`, the class count is `max label + 1`.
pub fn read_corpus_csv(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<Corpus> {
    let path = path.as_ref();
    let mut rd = csv::Reader::from_path(path)?;
    let header = rd.headers()?.clone();
    let audio_dim = header.iter().filter(|h| h.starts_with("h_")).count();
    let text_dim = header.iter().filter(|h| h.starts_with("t_")).count();
    let expected = csv_header(audio_dim, text_dim);
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Format {
            offset: 0,
            message: "csv header must be speaker,label,h_0..,t_0..".into(),
        });
    }
    let mut records = Vec::new();
    for row in rd.records() {
        let row = row?;
        let offset = row.position().map_or(0, |p| p.byte());
        let bad = |message: String| Error::Format { offset, message };
        if row.len() != expected.len() {
            return Err(bad(format!(
                "row has {} fields, header has {}",
                row.len(),
                expected.len()
            )));
        }
        let label = row[1]
            .parse::<usize>()
            .map_err(|e| bad(format!("label: {e}")))?;
        let values = row
            .iter()
            .skip(2)
            .map(|v| v.parse::<f64>().map_err(|e| bad(format!("feature `{v}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        records.push(FeatureRecord {
            speaker: row[0].to_string(),
            label,
            audio: values[..audio_dim].to_vec(),
            text: values[audio_dim..].to_vec(),
        });
    }
    let k = num_classes.unwrap_or_else(|| records.iter().map(|r| r.label + 1).max().unwrap_or(0));
    Corpus::new(
        audio_dim,
        text_dim,
        k,
        records,
        format!("csv:{}", path.display()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, SynthConfig};

    fn small() -> Corpus {
        synth_corpus(&SynthConfig {
            class_counts: vec![3, 4, 2, 5],
            audio_dim: 5,
            text_dim: 3,
            num_speakers: 3,
            ..SynthConfig::default()
        })
        .unwrap()
        .0
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let c = small();
        let bytes = corpus_to_bytes(&c);
        let back = corpus_from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(corpus_to_bytes(&back), bytes);
    }

    #[test]
    fn wrong_row_length_is_rejected() {
        // header says d_a = 768 but rows carry 700 audio values
        let mut c = small();
        let records: Vec<FeatureRecord> = c
            .records
            .iter()
            .map(|r| FeatureRecord {
                audio: vec![0.5; 700],
                ..r.clone()
            })
            .collect();
        c = Corpus::new(700, c.text_dim, c.num_classes, records, "x").unwrap();
        let mut bytes = corpus_to_bytes(&c);
        bytes[10..14].copy_from_slice(&768u32.to_le_bytes());
        let err = corpus_from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn empty_and_truncated_files_are_rejected() {
        let bytes = corpus_to_bytes(&small());
        let mut empty = bytes.clone();
        empty[18..26].copy_from_slice(&0u64.to_le_bytes());
        assert!(matches!(
            corpus_from_bytes(&empty),
            Err(Error::Format { offset: 18, .. })
        ));
        assert!(corpus_from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(matches!(
            corpus_from_bytes(b"NOTMIAUG"),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut trailing = bytes;
        trailing.push(0);
        assert!(corpus_from_bytes(&trailing).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let c = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        write_corpus_csv(&c, &path).unwrap();
        let back = read_corpus_csv(&path, Some(4)).unwrap();
        assert_eq!(back.records(), c.records());
        assert_eq!(back.audio_dim(), 5);
        assert_eq!(back.text_dim(), 3);
    }
}
