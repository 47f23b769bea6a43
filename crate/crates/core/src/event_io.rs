//! Event-stream data model, the `EVS1` binary container, a synthetic
//! order-discrimination dataset and stride pooling.
//!
//! The container layout is little-endian throughout with no padding:
//!
//! ```text
//! "EVS1" | u16 version=1 | u32 channels | u32 classes | u32 sequences
//! per sequence: u32 label | u64 event count | (u64 timestamp_us, u32 channel)*
//! ```

use std::io::{self, Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"EVS1";
pub const FORMAT_VERSION: u16 = 1;
/// Bytes taken by the file header.
pub const HEADER_LEN: usize = 4 + 2 + 4 + 4 + 4;
/// Bytes taken by a sequence header (label + event count).
pub const SEQUENCE_HEADER_LEN: usize = 4 + 8;
/// Bytes taken by a single event record.
pub const EVENT_LEN: usize = 8 + 4;

#[derive(Debug, Error)]
pub enum EventIoError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}, expected \"EVS1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("stream truncated while reading {0}")]
    Truncated(&'static str),
    #[error("sequence {sequence}: timestamp {timestamp_us} at event {event} precedes {previous_us}")]
    NonMonotonicTimestamp {
        sequence: usize,
        event: usize,
        timestamp_us: u64,
        previous_us: u64,
    },
    #[error("sequence {sequence}: channel {channel} out of range for {num_channels} channels")]
    ChannelOutOfRange {
        sequence: usize,
        channel: u32,
        num_channels: u32,
    },
    #[error("sequence {sequence}: label {label} out of range for {num_classes} classes")]
    LabelOutOfRange {
        sequence: usize,
        label: u32,
        num_classes: u32,
    },
    #[error("too many items to encode: {0}")]
    TooLarge(&'static str),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

/// One input spike: when it happened and on which channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Event {
    pub timestamp_us: u64,
    pub channel: u32,
}

impl Event {
    pub fn new(timestamp_us: u64, channel: u32) -> Self {
        Self {
            timestamp_us,
            channel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventSequence {
    pub events: Vec<Event>,
    pub label: u32,
}

impl EventSequence {
    pub fn new(events: Vec<Event>, label: u32) -> Self {
        Self { events, label }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Same events in reverse order, with timestamps mirrored so they stay
    /// non-decreasing.
    pub fn time_reversed(&self) -> Self {
        let end = self.events.last().map_or(0, |e| e.timestamp_us);
        let start = self.events.first().map_or(0, |e| e.timestamp_us);
        let events = self
            .events
            .iter()
            .rev()
            .map(|e| Event::new(start + (end - e.timestamp_us), e.channel))
            .collect();
        Self::new(events, self.label)
    }

    fn validate(
        &self,
        index: usize,
        num_channels: u32,
        num_classes: u32,
    ) -> Result<(), EventIoError> {
        if self.label >= num_classes {
            return Err(EventIoError::LabelOutOfRange {
                sequence: index,
                label: self.label,
                num_classes,
            });
        }
        let mut previous = 0u64;
        for (i, ev) in self.events.iter().enumerate() {
            if ev.channel >= num_channels {
                return Err(EventIoError::ChannelOutOfRange {
                    sequence: index,
                    channel: ev.channel,
                    num_channels,
                });
            }
            if i > 0 && ev.timestamp_us < previous {
                return Err(EventIoError::NonMonotonicTimestamp {
                    sequence: index,
                    event: i,
                    timestamp_us: ev.timestamp_us,
                    previous_us: previous,
                });
            }
            previous = ev.timestamp_us;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventDataset {
    pub num_channels: u32,
    pub num_classes: u32,
    pub sequences: Vec<EventSequence>,
}

impl EventDataset {
    pub fn new(num_channels: u32, num_classes: u32, sequences: Vec<EventSequence>) -> Self {
        Self {
            num_channels,
            num_classes,
            sequences,
        }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Checks every sequence against the channel and class counts.
    pub fn validate(&self) -> Result<(), EventIoError> {
        for (i, seq) in self.sequences.iter().enumerate() {
            seq.validate(i, self.num_channels, self.num_classes)?;
        }
        Ok(())
    }

    /// Splits off the first `n` sequences as one dataset and the rest as another.
    pub fn split_at(&self, n: usize) -> (EventDataset, EventDataset) {
        let n = n.min(self.sequences.len());
        let (a, b) = self.sequences.split_at(n);
        (
            EventDataset::new(self.num_channels, self.num_classes, a.to_vec()),
            EventDataset::new(self.num_channels, self.num_classes, b.to_vec()),
        )
    }

    /// Number of bytes `write_dataset` will emit.
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN
            + self
                .sequences
                .iter()
                .map(|s| SEQUENCE_HEADER_LEN + s.events.len() * EVENT_LEN)
                .sum::<usize>()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, EventIoError> {
        let mut buf = Vec::with_capacity(self.encoded_len());
        write_dataset(self, &mut buf)?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EventIoError> {
        read_dataset(bytes)
    }
}

/// Serializes `dataset` into `sink`, returning the number of bytes written.
///
/// The dataset is validated before any byte is emitted.
pub fn write_dataset<W: Write>(dataset: &EventDataset, sink: W) -> Result<usize, EventIoError> {
    dataset.validate()?;
    let num_sequences: u32 = dataset
        .sequences
        .len()
        .try_into()
        .map_err(|_| EventIoError::TooLarge("sequence count"))?;

    let mut sink = io::BufWriter::new(sink);
    let mut written = 0usize;
    let mut put = |bytes: &[u8]| -> io::Result<()> {
        written += bytes.len();
        sink.write_all(bytes)
    };
    put(MAGIC)?;
    put(&FORMAT_VERSION.to_le_bytes())?;
    put(&dataset.num_channels.to_le_bytes())?;
    put(&dataset.num_classes.to_le_bytes())?;
    put(&num_sequences.to_le_bytes())?;
    for seq in &dataset.sequences {
        put(&seq.label.to_le_bytes())?;
        put(&(seq.events.len() as u64).to_le_bytes())?;
        for ev in &seq.events {
            put(&ev.timestamp_us.to_le_bytes())?;
            put(&ev.channel.to_le_bytes())?;
        }
    }
    sink.flush()?;
    Ok(written)
}

fn read_exact_or<R: Read>(
    source: &mut R,
    buf: &mut [u8],
    what: &'static str,
) -> Result<(), EventIoError> {
    source.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => EventIoError::Truncated(what),
        _ => EventIoError::Io(e),
    })
}

macro_rules! read_le {
    ($src:expr, $ty:ty, $what:expr) => {{
        let mut b = [0u8; std::mem::size_of::<$ty>()];
        read_exact_or($src, &mut b, $what)?;
        <$ty>::from_le_bytes(b)
    }};
}

/// Parses an `EVS1` container and validates every invariant.
pub fn read_dataset<R: Read>(source: R) -> Result<EventDataset, EventIoError> {
    let mut source = io::BufReader::new(source);
    let src = &mut source;

    let mut magic = [0u8; 4];
    read_exact_or(src, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(EventIoError::BadMagic(magic));
    }
    let version = read_le!(src, u16, "version");
    if version != FORMAT_VERSION {
        return Err(EventIoError::UnsupportedVersion(version));
    }
    let num_channels = read_le!(src, u32, "channel count");
    let num_classes = read_le!(src, u32, "class count");
    let num_sequences = read_le!(src, u32, "sequence count");

    // Counts come from untrusted input; cap the up-front reservation.
    let mut sequences = Vec::with_capacity((num_sequences as usize).min(1 << 16));
    for index in 0..num_sequences as usize {
        let label = read_le!(src, u32, "sequence label");
        let count = read_le!(src, u64, "event count");
        let mut events = Vec::with_capacity((count as usize).min(1 << 20));
        for _ in 0..count {
            let timestamp_us = read_le!(src, u64, "event timestamp");
            let channel = read_le!(src, u32, "event channel");
            events.push(Event::new(timestamp_us, channel));
        }
        let seq = EventSequence::new(events, label);
        seq.validate(index, num_channels, num_classes)?;
        sequences.push(seq);
    }
    Ok(EventDataset::new(num_channels, num_classes, sequences))
}

/// Parameters of the synthetic order-discrimination task.
///
/// Channels are split into one contiguous group per class. Every sequence
/// visits every group exactly once with `events_per_burst` events; the class
/// determines only the order in which groups are visited (class `c` starts at
/// group `c` and proceeds cyclically). With two classes this is "A then B"
/// versus "B then A".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_channels: u32,
    pub num_classes: u32,
    pub num_sequences: usize,
    pub events_per_burst: usize,
    /// Nominal spacing between consecutive events inside a burst.
    pub event_spacing_us: u64,
    /// Silence between the end of one burst and the start of the next.
    pub burst_gap_us: u64,
    /// Uniform timing jitter applied to every event, in `[0, jitter_us]`.
    pub jitter_us: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_channels: 8,
            num_classes: 2,
            num_sequences: 700,
            events_per_burst: 8,
            event_spacing_us: 1_000,
            burst_gap_us: 4_000,
            jitter_us: 300,
        }
    }
}

impl SyntheticSpec {
    fn check(&self) -> Result<(), EventIoError> {
        if self.num_classes < 2 {
            return Err(EventIoError::InvalidSpec("need at least 2 classes".into()));
        }
        if self.num_channels < self.num_classes {
            return Err(EventIoError::InvalidSpec(format!(
                "{} channels cannot form {} channel groups",
                self.num_channels, self.num_classes
            )));
        }
        if self.events_per_burst == 0 {
            return Err(EventIoError::InvalidSpec("events_per_burst is 0".into()));
        }
        Ok(())
    }

    /// Channel range `[start, end)` of group `g`.
    pub fn group_channels(&self, g: u32) -> std::ops::Range<u32> {
        let j = self.num_channels as u64;
        let k = self.num_classes as u64;
        let start = (g as u64 * j / k) as u32;
        let end = ((g as u64 + 1) * j / k) as u32;
        start..end
    }
}

/// Deterministically generates a dataset from `spec` and `seed`.
///
/// Labels alternate so every prefix of the dataset is class balanced. Within
/// a burst the channel multiset is fixed (round-robin over the group) and
/// only its order is shuffled, so per-channel counts are identical across
/// classes.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<EventDataset, EventIoError> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = spec.num_classes;
    let mut sequences = Vec::with_capacity(spec.num_sequences);
    for n in 0..spec.num_sequences {
        let label = (n as u64 % k as u64) as u32;
        let mut events = Vec::with_capacity(spec.events_per_burst * k as usize);
        let mut burst_start = rng.random_range(0..=spec.burst_gap_us);
        for step in 0..k {
            let group = (label + step) % k;
            let channels: Vec<u32> = spec.group_channels(group).collect();
            let mut burst: Vec<u32> = (0..spec.events_per_burst)
                .map(|i| channels[i % channels.len()])
                .collect();
            burst.shuffle(&mut rng);
            for (i, &channel) in burst.iter().enumerate() {
                let jitter = if spec.jitter_us > 0 {
                    rng.random_range(0..=spec.jitter_us)
                } else {
                    0
                };
                let t = burst_start + i as u64 * spec.event_spacing_us + jitter;
                events.push(Event::new(t, channel));
            }
            burst_start +=
                spec.events_per_burst as u64 * spec.event_spacing_us + spec.jitter_us + spec.burst_gap_us;
        }
        // Jitter can swap neighbours; restore time order without touching the
        // channel multiset.
        events.sort_by_key(|e| e.timestamp_us);
        sequences.push(EventSequence::new(events, label));
    }
    Ok(EventDataset::new(spec.num_channels, k, sequences))
}

/// Per-channel event counts of a sequence.
pub fn channel_histogram(seq: &EventSequence, num_channels: u32) -> Vec<u64> {
    let mut h = vec![0u64; num_channels as usize];
    for ev in &seq.events {
        h[ev.channel as usize] += 1;
    }
    h
}

/// A timestamped feature vector flowing between model stages.
#[derive(Debug, Clone, PartialEq)]
pub struct Timed {
    pub timestamp_us: u64,
    pub values: Vec<f64>,
}

impl Timed {
    pub fn new(timestamp_us: u64, values: Vec<f64>) -> Self {
        Self {
            timestamp_us,
            values,
        }
    }
}

/// Averages non-overlapping windows of `stride` consecutive items.
///
/// Each output carries the timestamp of the last item of its window; a
/// trailing partial window is averaged over its actual size.
///
/// # Panics
///
/// Panics if `stride` is zero.
pub fn pool_stride(items: &[Timed], stride: usize) -> Vec<Timed> {
    assert!(stride >= 1, "pool stride must be at least 1");
    if stride == 1 {
        return items.to_vec();
    }
    items
        .chunks(stride)
        .map(|window| {
            let dim = window[0].values.len();
            let mut acc = vec![0.0; dim];
            for item in window {
                for (a, v) in acc.iter_mut().zip(&item.values) {
                    *a += v;
                }
            }
            let n = window.len() as f64;
            acc.iter_mut().for_each(|a| *a /= n);
            Timed::new(window[window.len() - 1].timestamp_us, acc)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EventDataset {
        EventDataset::new(
            2,
            2,
            vec![EventSequence::new(vec![Event::new(5, 1)], 0)],
        )
    }

    #[test]
    fn empty_dataset_is_header_only() {
        let ds = EventDataset::new(2, 2, vec![]);
        let bytes = ds.to_bytes().unwrap();
        assert_eq!(bytes.len(), 18);
        assert_eq!(&bytes[..4], b"EVS1");
        assert_eq!(&bytes[4..6], &[1, 0]);
    }

    #[test]
    fn single_event_layout() {
        let bytes = tiny().to_bytes().unwrap();
        assert_eq!(bytes.len(), 42);
        assert_eq!(tiny().encoded_len(), 42);
        // label, count, timestamp, channel
        assert_eq!(&bytes[18..22], &0u32.to_le_bytes());
        assert_eq!(&bytes[22..30], &1u64.to_le_bytes());
        assert_eq!(&bytes[30..38], &5u64.to_le_bytes());
        assert_eq!(&bytes[38..42], &1u32.to_le_bytes());
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = tiny().to_bytes().unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(read_dataset(&bytes[..]), Err(EventIoError::BadMagic(_))));
    }

    #[test]
    fn truncated_rejected() {
        let bytes = tiny().to_bytes().unwrap();
        for cut in [3, 10, 20, 35, 41] {
            assert!(
                matches!(read_dataset(&bytes[..cut]), Err(EventIoError::Truncated(_))),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn out_of_range_channel_rejected_on_read() {
        let mut bytes = tiny().to_bytes().unwrap();
        bytes[38..42].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            read_dataset(&bytes[..]),
            Err(EventIoError::ChannelOutOfRange { channel: 2, .. })
        ));
    }

    #[test]
    fn out_of_range_label_rejected() {
        let mut bytes = tiny().to_bytes().unwrap();
        bytes[18..22].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            read_dataset(&bytes[..]),
            Err(EventIoError::LabelOutOfRange { label: 7, .. })
        ));
    }

    #[test]
    fn non_monotonic_rejected_before_writing() {
        let ds = EventDataset::new(
            2,
            2,
            vec![EventSequence::new(vec![Event::new(5, 0), Event::new(4, 1)], 0)],
        );
        let mut sink = Vec::new();
        assert!(matches!(
            write_dataset(&ds, &mut sink),
            Err(EventIoError::NonMonotonicTimestamp { .. })
        ));
        assert!(sink.is_empty());
    }

    #[test]
    fn synthetic_rejects_zero_events() {
        let spec = SyntheticSpec {
            events_per_burst: 0,
            ..Default::default()
        };
        assert!(matches!(
            generate_synthetic(&spec, 1),
            Err(EventIoError::InvalidSpec(_))
        ));
    }

    #[test]
    fn synthetic_class_orders() {
        let spec = SyntheticSpec {
            num_sequences: 2,
            jitter_us: 0,
            ..Default::default()
        };
        let ds = generate_synthetic(&spec, 3).unwrap();
        let first = &ds.sequences[0];
        let second = &ds.sequences[1];
        assert_eq!((first.label, second.label), (0, 1));
        assert!(first.events[0].channel < 4);
        assert!(first.events.last().unwrap().channel >= 4);
        assert!(second.events[0].channel >= 4);
        assert!(second.events.last().unwrap().channel < 4);
    }

    #[test]
    fn pool_hand_average() {
        let items = vec![Timed::new(10, vec![1.0]), Timed::new(20, vec![3.0])];
        let pooled = pool_stride(&items, 2);
        assert_eq!(pooled, vec![Timed::new(20, vec![2.0])]);
    }

    #[test]
    fn pool_identity_and_partial_window() {
        let items: Vec<Timed> = (0..5).map(|i| Timed::new(i, vec![i as f64])).collect();
        assert_eq!(pool_stride(&items, 1), items);
        let pooled = pool_stride(&items, 2);
        assert_eq!(pooled.len(), 3);
        assert_eq!(pooled[2], Timed::new(4, vec![4.0]));
        assert!(pool_stride(&[], 4).is_empty());
    }

    #[test]
    fn pool_reference_lengths() {
        let items: Vec<Timed> = (0..65_536).map(|i| Timed::new(i, vec![0.0])).collect();
        let once = pool_stride(&items, 16);
        assert_eq!(once.len(), 4_096);
        assert_eq!(pool_stride(&once, 16).len(), 256);
    }

    #[test]
    fn time_reversal_keeps_order() {
        let seq = EventSequence::new(vec![Event::new(1, 0), Event::new(4, 1), Event::new(9, 0)], 0);
        let rev = seq.time_reversed();
        assert_eq!(
            rev.events,
            vec![Event::new(1, 0), Event::new(6, 1), Event::new(9, 0)]
        );
    }
}
