use std::io::Write;

use super::{MergeOutcome, MergeTag};

/// First line of every record stream.
pub const RECORD_SCHEMA: &str = "#schema=p4flow-run-record/1";

/// One row of a training record stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub merge: String,
    pub inverse_residual: Option<f64>,
    /// `(sign, ln|det|)` per tracked layer.
    pub dets: Vec<(i8, f64)>,
}

impl StepRecord {
    /// Summarizes merge outcomes: `none`, a single tag, or per-tag counts.
    pub fn summarize_merges(outcomes: &[MergeOutcome]) -> String {
        if outcomes.is_empty() {
            return "none".to_owned();
        }
        let first = outcomes[0].tag;
        if outcomes.iter().all(|o| o.tag == first) {
            return first.as_str().to_owned();
        }
        let tags = [
            MergeTag::Merged,
            MergeTag::ForcedMerge,
            MergeTag::SkippedIllConditioned,
            MergeTag::SkippedNonFinite,
        ];
        tags.iter()
            .map(|t| (t, outcomes.iter().filter(|o| o.tag == *t).count()))
            .filter(|(_, c)| *c > 0)
            .map(|(t, c)| format!("{t}={c}"))
            .collect::<Vec<_>>()
            .join(";")
    }
}

/// Append-only CSV sink for [`StepRecord`]s.
///
/// The column set is fixed by the first record written; `dets` must keep the
/// same length afterwards.
pub struct RecordWriter<W: Write> {
    inner: csv::Writer<W>,
    n_layers: Option<usize>,
}

impl<W: Write> RecordWriter<W> {
    pub fn new(mut sink: W) -> std::io::Result<Self> {
        writeln!(sink, "{RECORD_SCHEMA}")?;
        Ok(Self {
            inner: csv::WriterBuilder::new().flexible(false).from_writer(sink),
            n_layers: None,
        })
    }

    pub fn write(&mut self, rec: &StepRecord) -> csv::Result<()> {
        match self.n_layers {
            None => {
                let mut header = vec![
                    "step".to_owned(),
                    "loss".to_owned(),
                    "lr".to_owned(),
                    "merge".to_owned(),
                    "inverse_residual".to_owned(),
                ];
                for i in 0..rec.dets.len() {
                    header.push(format!("det_sign_{i}"));
                    header.push(format!("log_abs_det_{i}"));
                }
                self.inner.write_record(&header)?;
                self.n_layers = Some(rec.dets.len());
            }
            Some(n) => assert_eq!(n, rec.dets.len(), "layer count changed mid-stream"),
        }
        let mut row = vec![
            rec.step.to_string(),
            format!("{:e}", rec.loss),
            format!("{:e}", rec.lr),
            rec.merge.clone(),
            rec.inverse_residual
                .map(|r| format!("{r:e}"))
                .unwrap_or_default(),
        ];
        for (s, l) in &rec.dets {
            row.push(s.to_string());
            row.push(format!("{l:e}"));
        }
        self.inner.write_record(&row)
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }

    pub fn into_inner(self) -> W {
        self.inner
            .into_inner()
            .unwrap_or_else(|e| panic!("flushing record stream: {}", e.error()))
    }
}
