//! Event-camera data: event streams, frame sequences, the threshold-crossing
//! simulator, voxel grids and on-disk formats.

mod io;
mod simulate;
mod voxel;

pub use io::{read_events, read_events_binary, read_events_text, write_events, write_events_binary, write_events_text};
pub use simulate::{simulate_events, DEFAULT_LOG_EPS};
pub use voxel::{voxelize, VoxelGrid, DEFAULT_BINS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn sign(self) -> f64 {
        match self {
            Polarity::Positive => 1.0,
            Polarity::Negative => -1.0,
        }
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    pub fn from_i64(p: i64) -> Option<Self> {
        match p {
            1 => Some(Polarity::Positive),
            -1 => Some(Polarity::Negative),
            _ => None,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Polarity::Positive => Polarity::Negative,
            Polarity::Negative => Polarity::Positive,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub x: u32,
    pub y: u32,
    /// Seconds.
    pub t: f64,
    pub p: Polarity,
}

impl Event {
    pub fn new(x: u32, y: u32, t: f64, p: Polarity) -> Self {
        Self { x, y, t, p }
    }
}

/// Time-sorted events from a `width x height` sensor over `[t_start, t_end]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EventStream {
    pub width: usize,
    pub height: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub events: Vec<Event>,
}

impl EventStream {
    /// Builds a stream and checks every invariant.
    pub fn new(width: usize, height: usize, t_start: f64, t_end: f64, events: Vec<Event>) -> Result<Self> {
        let s = Self {
            width,
            height,
            t_start,
            t_end,
            events,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn empty(width: usize, height: usize, t_start: f64, t_end: f64) -> Result<Self> {
        Self::new(width, height, t_start, t_end, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }

    /// Index of the first event violating an invariant, with a description.
    pub(crate) fn first_violation(&self) -> Option<(usize, String)> {
        let mut prev = f64::NEG_INFINITY;
        for (i, e) in self.events.iter().enumerate() {
            if e.x as usize >= self.width || e.y as usize >= self.height {
                return Some((i, format!("event ({}, {}) outside {}x{} sensor", e.x, e.y, self.width, self.height)));
            }
            if !e.t.is_finite() || e.t < self.t_start || e.t > self.t_end {
                return Some((i, format!("timestamp {} outside window [{}, {}]", e.t, self.t_start, self.t_end)));
            }
            if e.t < prev {
                return Some((i, format!("timestamp {} precedes {}", e.t, prev)));
            }
            prev = e.t;
        }
        None
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::MalformedStream("sensor geometry must be non-empty".into()));
        }
        if !(self.t_start.is_finite() && self.t_end.is_finite()) || self.t_end < self.t_start {
            return Err(Error::MalformedStream(format!(
                "invalid window [{}, {}]",
                self.t_start, self.t_end
            )));
        }
        match self.first_violation() {
            Some((i, msg)) => Err(Error::MalformedStream(format!("event {i}: {msg}"))),
            None => Ok(()),
        }
    }

    /// Events with `lo <= t < hi` (the final window is closed at `t_end`).
    pub fn slice_time(&self, lo: f64, hi: f64) -> Result<EventStream> {
        let inclusive_end = hi >= self.t_end;
        let events = self
            .events
            .iter()
            .filter(|e| e.t >= lo && (e.t < hi || (inclusive_end && e.t <= hi)))
            .copied()
            .collect();
        EventStream::new(self.width, self.height, lo, hi, events)
    }

    /// Maps event coordinates onto a new sensor size by nearest-pixel
    /// mapping of pixel centres.
    pub fn rescale(&self, width: usize, height: usize) -> Result<EventStream> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("rescale target must be non-empty"));
        }
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        let events = self
            .events
            .iter()
            .map(|e| {
                let x = (((e.x as f64 + 0.5) * sx) as usize).min(width - 1) as u32;
                let y = (((e.y as f64 + 0.5) * sy) as usize).min(height - 1) as u32;
                Event { x, y, ..*e }
            })
            .collect();
        EventStream::new(width, height, self.t_start, self.t_end, events)
    }

    /// Copy with every polarity negated.
    pub fn negated(&self) -> EventStream {
        let mut s = self.clone();
        for e in &mut s.events {
            e.p = e.p.flipped();
        }
        s
    }
}

/// Ordering used to merge per-pixel event lists deterministically.
pub(crate) fn event_order(a: &Event, b: &Event) -> std::cmp::Ordering {
    a.t.total_cmp(&b.t)
        .then(a.y.cmp(&b.y))
        .then(a.x.cmp(&b.x))
        .then(a.p.cmp(&b.p))
}

/// Grayscale frames (row-major, intensity in `[0, 1]`) with timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub width: usize,
    pub height: usize,
    pub frames: Vec<Vec<f64>>,
    pub timestamps: Vec<f64>,
}

impl FrameSequence {
    pub fn new(width: usize, height: usize, frames: Vec<Vec<f64>>, timestamps: Vec<f64>) -> Result<Self> {
        let s = Self {
            width,
            height,
            frames,
            timestamps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.timestamps.len() {
            return Err(Error::MalformedSequence(format!(
                "{} frames but {} timestamps",
                self.frames.len(),
                self.timestamps.len()
            )));
        }
        let n = self.width * self.height;
        if let Some(i) = self.frames.iter().position(|f| f.len() != n) {
            return Err(Error::MalformedSequence(format!(
                "frame {i} does not match {}x{} geometry",
                self.width, self.height
            )));
        }
        if let Some(i) = self
            .frames
            .iter()
            .position(|f| f.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0))
        {
            return Err(Error::MalformedSequence(format!("frame {i} has intensities outside [0, 1]")));
        }
        if let Some(w) = self.timestamps.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::MalformedSequence(format!(
                "timestamps not strictly increasing at frame {}",
                w + 1
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}
