//! Feature corpora: records, synthetic generation, persistence and
//! leave-one-speaker-out fold planning.

pub(crate) mod io;
mod synth;

pub use io::{
    corpus_from_bytes, corpus_to_bytes, read_corpus, read_corpus_csv, write_corpus,
    write_corpus_csv, MAGIC,
};
pub use synth::{synth_corpus, OracleSpec, SynthConfig};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Matrix;

/// One utterance: audio feature, text feature, emotion label and speaker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub audio: Vec<f64>,
    pub text: Vec<f64>,
    pub label: usize,
    pub speaker: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    audio_dim: usize,
    text_dim: usize,
    num_classes: usize,
    records: Vec<FeatureRecord>,
    provenance: String,
}

impl Corpus {
    pub fn new(
        audio_dim: usize,
        text_dim: usize,
        num_classes: usize,
        records: Vec<FeatureRecord>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidInput("corpus needs at least one class".into()));
        }
        if records.is_empty() {
            return Err(Error::InvalidInput("corpus has no records".into()));
        }
        for (i, r) in records.iter().enumerate() {
            if r.audio.len() != audio_dim || r.text.len() != text_dim {
                return Err(Error::shape(
                    "Corpus::new",
                    format!("audio {audio_dim}, text {text_dim}"),
                    format!("record {i}: audio {}, text {}", r.audio.len(), r.text.len()),
                ));
            }
            if r.label >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: r.label,
                    classes: num_classes,
                });
            }
        }
        Ok(Self {
            audio_dim,
            text_dim,
            num_classes,
            records,
            provenance: provenance.into(),
        })
    }

    pub fn audio_dim(&self) -> usize {
        self.audio_dim
    }

    pub fn text_dim(&self) -> usize {
        self.text_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Distinct speaker ids in sorted order.
    pub fn speakers(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| r.speaker.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Records at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], provenance: impl Into<String>) -> Result<Corpus> {
        let records = indices.iter().map(|&i| self.records[i].clone()).collect();
        Corpus::new(
            self.audio_dim,
            self.text_dim,
            self.num_classes,
            records,
            provenance,
        )
    }

    pub fn audio_matrix(&self) -> Matrix {
        audio_matrix(&self.records)
    }

    pub fn text_matrix(&self) -> Matrix {
        text_matrix(&self.records)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn histogram(&self) -> Vec<usize> {
        class_histogram(&self.records, self.num_classes)
    }
}

pub fn audio_matrix(records: &[FeatureRecord]) -> Matrix {
    let rows: Vec<&[f64]> = records.iter().map(|r| r.audio.as_slice()).collect();
    Matrix::from_rows(&rows).expect("corpus records share a dimension")
}

pub fn text_matrix(records: &[FeatureRecord]) -> Matrix {
    let rows: Vec<&[f64]> = records.iter().map(|r| r.text.as_slice()).collect();
    Matrix::from_rows(&rows).expect("corpus records share a dimension")
}

/// Per-class record counts. Labels at or above `num_classes` are ignored.
pub fn class_histogram(records: &[FeatureRecord], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for r in records {
        if let Some(c) = counts.get_mut(r.label) {
            *c += 1;
        }
    }
    counts
}

/// One leave-one-speaker-out fold.
#[derive(Clone, Debug, PartialEq)]
pub struct Fold {
    pub held_out: String,
    pub train: Corpus,
    pub test: Corpus,
}

/// One fold per distinct speaker, in sorted speaker order.
pub fn loso_splits(corpus: &Corpus) -> Result<Vec<Fold>> {
    let speakers = corpus.speakers();
    if speakers.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "leave-one-speaker-out needs at least 2 speakers, found {}",
            speakers.len()
        )));
    }
    speakers
        .into_iter()
        .map(|speaker| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..corpus.len()).partition(|&i| corpus.records[i].speaker == speaker);
            Ok(Fold {
                train: corpus.subset(&train, format!("{} minus {speaker}", corpus.provenance))?,
                test: corpus.subset(&test, format!("{} speaker {speaker}", corpus.provenance))?,
                held_out: speaker,
            })
        })
        .collect()
}
