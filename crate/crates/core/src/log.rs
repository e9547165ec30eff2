//! Prediction logs and the KFPL binary format.
//!
//! A [`PredictionLog`] holds the class probabilities a classifier assigned to
//! a fixed set of examples at every training epoch, plus the labels. It is the
//! interchange type between trainers and every analysis in this crate.
//!
//! KFPL layout (all integers little-endian):
//!
//! ```text
//! magic   "KFPL"                4 bytes
//! version u32 = 1               4 bytes
//! E       u32                   4 bytes
//! N       u32                   4 bytes
//! C       u32                   4 bytes
//! flags   u32                   4 bytes   bit0 = noise mask present, bits1-2 = split tag
//! labels  u32[N]                4N bytes
//! mask    packed bits           ceil(N/8) bytes, only when bit0 is set, LSB first
//! probs   f32[E*N*C]            4ENC bytes, epoch-major then example-major
//! ```

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::LogError;

pub const MAGIC: &[u8; 4] = b"KFPL";
pub const FORMAT_VERSION: u32 = 1;
/// Fixed-size prefix: magic, version, E, N, C, flags.
pub const HEADER_LEN: usize = 24;
/// Maximum deviation of a probability row sum from 1.
pub const SIMPLEX_TOLERANCE: f64 = 1e-4;

const FLAG_MASK: u32 = 1;
const SPLIT_SHIFT: u32 = 1;
const SPLIT_BITS: u32 = 0b11 << SPLIT_SHIFT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    #[default]
    Train,
    Validation,
    Test,
}

impl SplitTag {
    fn bits(self) -> u32 {
        match self {
            SplitTag::Train => 0,
            SplitTag::Validation => 1,
            SplitTag::Test => 2,
        }
    }

    fn from_bits(bits: u32) -> Result<Self, LogError> {
        match bits {
            0 => Ok(SplitTag::Train),
            1 => Ok(SplitTag::Validation),
            2 => Ok(SplitTag::Test),
            other => Err(LogError::InvalidSplitTag(other)),
        }
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Validation => "validation",
            SplitTag::Test => "test",
        })
    }
}

impl FromStr for SplitTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitTag::Train),
            "validation" | "val" => Ok(SplitTag::Validation),
            "test" => Ok(SplitTag::Test),
            other => Err(format!("unknown split tag {other:?}")),
        }
    }
}

/// Per-epoch class probabilities for a fixed example set.
///
/// Construct with [`PredictionLog::new`], which validates every invariant; the
/// fields are private so a log in hand is always valid.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionLog {
    epochs: usize,
    examples: usize,
    classes: usize,
    probs: Vec<f32>,
    labels: Vec<u32>,
    noise_mask: Option<Vec<bool>>,
    split: SplitTag,
}

impl PredictionLog {
    /// Builds a log from a flat `E*N*C` probability buffer.
    pub fn new(
        epochs: usize,
        examples: usize,
        classes: usize,
        probs: Vec<f32>,
        labels: Vec<u32>,
        noise_mask: Option<Vec<bool>>,
        split: SplitTag,
    ) -> Result<Self, LogError> {
        let log = Self { epochs, examples, classes, probs, labels, noise_mask, split };
        log.validate()?;
        Ok(log)
    }

    /// Builds a log from `f64` epoch tables (`tables[e]` is `N*C` row-major),
    /// downcasting to `f32`.
    pub fn from_epoch_tables(
        tables: &[Vec<f64>],
        classes: usize,
        labels: Vec<u32>,
        noise_mask: Option<Vec<bool>>,
        split: SplitTag,
    ) -> Result<Self, LogError> {
        let examples = labels.len();
        let mut probs = Vec::with_capacity(tables.len() * examples * classes);
        for (epoch, table) in tables.iter().enumerate() {
            if table.len() != examples * classes {
                return Err(LogError::Shape(format!(
                    "epoch {epoch} table has {} entries, expected {}",
                    table.len(),
                    examples * classes
                )));
            }
            probs.extend(table.iter().map(|&p| p as f32));
        }
        Self::new(tables.len(), examples, classes, probs, labels, noise_mask, split)
    }

    fn validate(&self) -> Result<(), LogError> {
        if self.epochs == 0 || self.examples == 0 || self.classes < 2 {
            return Err(LogError::Shape(format!(
                "need E >= 1, N >= 1, C >= 2; got E={}, N={}, C={}",
                self.epochs, self.examples, self.classes
            )));
        }
        for dim in [self.epochs, self.examples, self.classes] {
            if u32::try_from(dim).is_err() {
                return Err(LogError::Shape(format!("dimension {dim} exceeds u32")));
            }
        }
        let expected = self
            .epochs
            .checked_mul(self.examples)
            .and_then(|v| v.checked_mul(self.classes))
            .ok_or_else(|| LogError::Shape("E*N*C overflows".into()))?;
        if self.probs.len() != expected {
            return Err(LogError::Shape(format!(
                "probability buffer has {} entries, expected {expected}",
                self.probs.len()
            )));
        }
        if self.labels.len() != self.examples {
            return Err(LogError::Shape(format!("{} labels for {} examples", self.labels.len(), self.examples)));
        }
        if let Some(mask) = &self.noise_mask {
            if mask.len() != self.examples {
                return Err(LogError::Shape(format!(
                    "noise mask has {} entries for {} examples",
                    mask.len(),
                    self.examples
                )));
            }
        }
        for (example, &label) in self.labels.iter().enumerate() {
            if label as usize >= self.classes {
                return Err(LogError::LabelOutOfRange { example, label, classes: self.classes });
            }
        }
        for epoch in 0..self.epochs {
            for example in 0..self.examples {
                let row = self.row(epoch, example);
                let mut sum = 0.0f64;
                for &p in row {
                    if !(0.0..=1.0).contains(&p) {
                        return Err(LogError::ProbabilityOutOfRange { epoch, example, value: p });
                    }
                    sum += f64::from(p);
                }
                if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
                    return Err(LogError::SimplexViolation { epoch, example, sum });
                }
            }
        }
        Ok(())
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    pub fn examples(&self) -> usize {
        self.examples
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn noise_mask(&self) -> Option<&[bool]> {
        self.noise_mask.as_deref()
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    /// Flat probability payload, epoch-major then example-major.
    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    /// Probabilities of one example at one epoch.
    pub fn row(&self, epoch: usize, example: usize) -> &[f32] {
        let start = (epoch * self.examples + example) * self.classes;
        &self.probs[start..start + self.classes]
    }

    /// All `N*C` probabilities of one epoch.
    pub fn epoch_slice(&self, epoch: usize) -> &[f32] {
        let len = self.examples * self.classes;
        &self.probs[epoch * len..(epoch + 1) * len]
    }

    /// One epoch's probabilities widened to `f64`.
    pub fn epoch_f64(&self, epoch: usize) -> Vec<f64> {
        self.epoch_slice(epoch).iter().map(|&p| f64::from(p)).collect()
    }

    /// Returns a copy restricted to the given epochs, in the given order.
    pub fn select_epochs(&self, epochs: &[usize]) -> Result<Self, LogError> {
        let mut probs = Vec::with_capacity(epochs.len() * self.examples * self.classes);
        for &e in epochs {
            if e >= self.epochs {
                return Err(LogError::Shape(format!("epoch {e} out of range for {} epochs", self.epochs)));
            }
            probs.extend_from_slice(self.epoch_slice(e));
        }
        Self::new(
            epochs.len(),
            self.examples,
            self.classes,
            probs,
            self.labels.clone(),
            self.noise_mask.clone(),
            self.split,
        )
    }

    /// Exact size of this log in KFPL encoding.
    pub fn encoded_len(&self) -> usize {
        encoded_len(self.epochs, self.examples, self.classes, self.noise_mask.is_some())
            .expect("validated dimensions fit")
    }

    /// Encodes the log as KFPL bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        let flags = u32::from(self.noise_mask.is_some()) | (self.split.bits() << SPLIT_SHIFT);
        for v in [FORMAT_VERSION, self.epochs as u32, self.examples as u32, self.classes as u32, flags] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &label in &self.labels {
            out.extend_from_slice(&label.to_le_bytes());
        }
        if let Some(mask) = &self.noise_mask {
            let mut packed = vec![0u8; mask.len().div_ceil(8)];
            for (i, &bit) in mask.iter().enumerate() {
                if bit {
                    packed[i / 8] |= 1 << (i % 8);
                }
            }
            out.extend_from_slice(&packed);
        }
        for &p in &self.probs {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    /// Decodes and validates KFPL bytes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LogError> {
        if bytes.len() < 4 {
            return Err(LogError::Truncated { section: "magic", expected: HEADER_LEN, actual: bytes.len() });
        }
        if &bytes[..4] != MAGIC {
            let mut found = [0u8; 4];
            found.copy_from_slice(&bytes[..4]);
            return Err(LogError::BadMagic(found));
        }
        if bytes.len() < HEADER_LEN {
            return Err(LogError::Truncated { section: "header", expected: HEADER_LEN, actual: bytes.len() });
        }
        let word = |i: usize| {
            let at = 4 + 4 * i;
            u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
        };
        let version = word(0);
        if version != FORMAT_VERSION {
            return Err(LogError::UnsupportedVersion(version));
        }
        let (epochs, examples, classes, flags) = (word(1) as usize, word(2) as usize, word(3) as usize, word(4));
        if flags & !(FLAG_MASK | SPLIT_BITS) != 0 {
            return Err(LogError::UnknownFlags(flags));
        }
        let has_mask = flags & FLAG_MASK != 0;
        let split = SplitTag::from_bits((flags & SPLIT_BITS) >> SPLIT_SHIFT)?;
        let expected = encoded_len(epochs, examples, classes, has_mask)
            .ok_or_else(|| LogError::Shape("declared dimensions overflow".into()))?;
        if bytes.len() < expected {
            return Err(LogError::Truncated {
                section: truncated_section(bytes.len(), examples, has_mask),
                expected,
                actual: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(LogError::TrailingBytes { expected, actual: bytes.len() });
        }

        let mut at = HEADER_LEN;
        let labels: Vec<u32> = bytes[at..at + 4 * examples]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        at += 4 * examples;
        let noise_mask = if has_mask {
            let packed = &bytes[at..at + examples.div_ceil(8)];
            at += packed.len();
            if examples % 8 != 0 {
                let spare = packed[packed.len() - 1] >> (examples % 8);
                if spare != 0 {
                    return Err(LogError::MaskPadding);
                }
            }
            Some((0..examples).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect())
        } else {
            None
        };
        let probs: Vec<f32> =
            bytes[at..].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Self::new(epochs, examples, classes, probs, labels, noise_mask, split)
    }

    /// Writes the log and returns the number of bytes written. Nothing is
    /// written if the sink rejects the first write.
    pub fn write_to<W: Write>(&self, mut sink: W) -> Result<usize, LogError> {
        let bytes = self.to_bytes();
        sink.write_all(&bytes)?;
        sink.flush()?;
        Ok(bytes.len())
    }

    pub fn read_from<R: Read>(mut source: R) -> Result<Self, LogError> {
        let mut bytes = Vec::new();
        source.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<usize, LogError> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LogError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Byte size of a KFPL file with the given dimensions, or `None` on overflow.
pub fn encoded_len(epochs: usize, examples: usize, classes: usize, has_mask: bool) -> Option<usize> {
    let labels = examples.checked_mul(4)?;
    let mask = if has_mask { examples.div_ceil(8) } else { 0 };
    let probs = epochs.checked_mul(examples)?.checked_mul(classes)?.checked_mul(4)?;
    HEADER_LEN.checked_add(labels)?.checked_add(mask)?.checked_add(probs)
}

fn truncated_section(len: usize, examples: usize, has_mask: bool) -> &'static str {
    let labels_end = HEADER_LEN.saturating_add(examples.saturating_mul(4));
    let mask_end = labels_end.saturating_add(if has_mask { examples.div_ceil(8) } else { 0 });
    if len < labels_end {
        "labels"
    } else if len < mask_end {
        "noise mask"
    } else {
        "probabilities"
    }
}

/// Writes `log` to `destination`, returning the byte count.
pub fn write_log<W: Write>(log: &PredictionLog, destination: W) -> Result<usize, LogError> {
    log.write_to(destination)
}

/// Reads and validates a KFPL log.
pub fn read_log<R: Read>(source: R) -> Result<PredictionLog, LogError> {
    PredictionLog::read_from(source)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `bits[e][i]` is true when epoch `e` predicts example `i`'s label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrectnessMatrix {
    epochs: usize,
    examples: usize,
    bits: Vec<bool>,
}

impl CorrectnessMatrix {
    pub fn from_log(log: &PredictionLog) -> Self {
        let mut bits = Vec::with_capacity(log.epochs() * log.examples());
        for e in 0..log.epochs() {
            for (i, &label) in log.labels().iter().enumerate() {
                bits.push(argmax(log.row(e, i)) == label as usize);
            }
        }
        Self { epochs: log.epochs(), examples: log.examples(), bits }
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    pub fn examples(&self) -> usize {
        self.examples
    }

    pub fn get(&self, epoch: usize, example: usize) -> bool {
        self.bits[epoch * self.examples + example]
    }

    pub fn epoch(&self, epoch: usize) -> &[bool] {
        &self.bits[epoch * self.examples..(epoch + 1) * self.examples]
    }

    /// Number of correctly classified examples at `epoch`.
    pub fn correct_count(&self, epoch: usize) -> usize {
        self.epoch(epoch).iter().filter(|&&b| b).count()
    }
}

pub fn correctness(log: &PredictionLog) -> CorrectnessMatrix {
    CorrectnessMatrix::from_log(log)
}

/// Builds a log from a long-format CSV (`epoch,example,class,prob`) and a
/// labels sidecar (`example,label[,noisy]`). Dimensions are inferred from the
/// largest indices; every `(epoch, example, class)` cell must appear once.
pub fn import_csv<P: Read, L: Read>(probs_csv: P, labels_csv: L, split: SplitTag) -> Result<PredictionLog, LogError> {
    let mut label_rows: Vec<(usize, u32, Option<bool>)> = Vec::new();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(labels_csv);
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let field = |k: usize| -> Result<&str, LogError> {
            record.get(k).ok_or_else(|| LogError::Csv(format!("labels row {}: missing column {k}", line + 1)))
        };
        let example = parse_field::<usize>(field(0)?, "example", line)?;
        let label = parse_field::<u32>(field(1)?, "label", line)?;
        let noisy = match record.get(2) {
            Some(v) if !v.is_empty() => Some(parse_bool(v, line)?),
            _ => None,
        };
        label_rows.push((example, label, noisy));
    }
    let examples = label_rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    if examples == 0 {
        return Err(LogError::Csv("labels sidecar is empty".into()));
    }
    if examples > label_rows.len() {
        return Err(LogError::Csv(format!("{} label rows cannot cover examples 0..{examples}", label_rows.len())));
    }
    let mut labels = vec![None; examples];
    let mut mask = vec![None; examples];
    for &(example, label, noisy) in &label_rows {
        if labels[example].replace(label).is_some() {
            return Err(LogError::Csv(format!("example {example} labelled twice")));
        }
        mask[example] = noisy;
    }
    let labels: Vec<u32> = labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| LogError::Csv(format!("example {i} has no label"))))
        .collect::<Result<_, _>>()?;
    let noise_mask = if mask.iter().all(Option::is_some) {
        Some(mask.into_iter().map(Option::unwrap).collect())
    } else if mask.iter().all(Option::is_none) {
        None
    } else {
        return Err(LogError::Csv("noisy column must be given for all examples or none".into()));
    };

    let mut cells = Vec::new();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(probs_csv);
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != 4 {
            return Err(LogError::Csv(format!("probs row {}: expected 4 columns, found {}", line + 1, record.len())));
        }
        cells.push((
            parse_field::<usize>(&record[0], "epoch", line)?,
            parse_field::<usize>(&record[1], "example", line)?,
            parse_field::<usize>(&record[2], "class", line)?,
            parse_field::<f32>(&record[3], "prob", line)?,
        ));
    }
    let epochs = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
    let classes = cells.iter().map(|c| c.2 + 1).max().unwrap_or(0);
    if cells.iter().any(|c| c.1 >= examples) {
        return Err(LogError::Csv("probability row references an unlabelled example".into()));
    }
    let total = epochs
        .checked_mul(examples)
        .and_then(|v| v.checked_mul(classes))
        .filter(|&t| t == cells.len())
        .ok_or_else(|| {
            LogError::Csv(format!("{} probability rows do not cover {epochs}x{examples}x{classes} cells", cells.len()))
        })?;
    let mut probs = vec![f32::NAN; total];
    for (e, i, c, p) in cells {
        let slot = &mut probs[(e * examples + i) * classes + c];
        if !slot.is_nan() {
            return Err(LogError::Csv(format!("duplicate cell epoch={e} example={i} class={c}")));
        }
        *slot = p;
    }
    PredictionLog::new(epochs, examples, classes, probs, labels, noise_mask, split)
}

fn parse_field<T: FromStr>(raw: &str, what: &str, line: usize) -> Result<T, LogError> {
    raw.parse().map_err(|_| LogError::Csv(format!("row {}: bad {what} {raw:?}", line + 1)))
}

fn parse_bool(raw: &str, line: usize) -> Result<bool, LogError> {
    match raw {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        _ => Err(LogError::Csv(format!("row {}: bad noisy flag {raw:?}", line + 1))),
    }
}
