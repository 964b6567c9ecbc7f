use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{LcflError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Upload,
    Download,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Payload {
    Model,
    Generator,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Upload => "upload",
            Direction::Download => "download",
        })
    }
}

impl fmt::Display for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Payload::Model => "model",
            Payload::Generator => "generator",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferEvent {
    pub direction: Direction,
    pub payload: Payload,
    pub client: usize,
    pub bytes: usize,
}

/// Every simulated model or generator transfer, in order. Generators count
/// as model-sized transfers, so the transfer count is the log length.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TransmissionLedger {
    events: Vec<TransferEvent>,
}

impl TransmissionLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, direction: Direction, payload: Payload, client: usize, bytes: usize) {
        self.events.push(TransferEvent {
            direction,
            payload,
            client,
            bytes,
        });
    }

    pub fn model_transfers(&self) -> usize {
        self.events.len()
    }

    pub fn events(&self) -> &[TransferEvent] {
        &self.events
    }

    pub fn total_bytes(&self) -> usize {
        self.events.iter().map(|e| e.bytes).sum()
    }

    pub fn count(&self, direction: Direction, payload: Payload) -> usize {
        self.events
            .iter()
            .filter(|e| e.direction == direction && e.payload == payload)
            .count()
    }

    pub fn append(&mut self, other: &TransmissionLedger) {
        self.events.extend_from_slice(&other.events);
    }

    /// `seq,direction,payload,client,bytes`
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| LcflError::io("ledger.csv", e);
        writeln!(w, "seq,direction,payload,client,bytes").map_err(io)?;
        for (i, e) in self.events.iter().enumerate() {
            writeln!(
                w,
                "{i},{},{},{},{}",
                e.direction, e.payload, e.client, e.bytes
            )
            .map_err(io)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counter_matches_log() {
        let mut l = TransmissionLedger::new();
        l.record(Direction::Upload, Payload::Model, 0, 10);
        l.record(Direction::Upload, Payload::Generator, 0, 20);
        l.record(Direction::Download, Payload::Model, 0, 11);
        assert_eq!(l.model_transfers(), 3);
        assert_eq!(l.total_bytes(), 41);
        assert_eq!(l.count(Direction::Upload, Payload::Model), 1);
        let mut out = Vec::new();
        l.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text.lines().nth(2).unwrap(), "1,upload,generator,0,20");
    }
}
