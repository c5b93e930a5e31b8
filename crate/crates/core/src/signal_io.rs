//! Record ingestion (WFDB format 16, CSV) and the `BSEG` segment container.
//!
//! WFDB headers follow the PhysioNet layout: a record line
//! `name n_signals fs n_samples`, then one signal-specification line per
//! signal. Only signal format 16 (interleaved little-endian `i16`) is read.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::preprocess::{NormStats, Segment, SegmentPair};

/// WFDB gain used when the header omits it (or gives 0).
pub const DEFAULT_GAIN: f64 = 200.0;
/// The only WFDB signal format this crate reads.
pub const FORMAT_16: u32 = 16;

const BSEG_MAGIC: &[u8; 4] = b"BSEG";
const BSEG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sex {
    Male,
    Female,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SubjectMeta {
    pub age: Option<f64>,
    pub sex: Option<Sex>,
}

/// One signal-specification line of a WFDB header.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSpec {
    pub file_name: String,
    pub format_code: u32,
    /// ADC units per physical unit.
    pub gain: f64,
    pub baseline: i32,
    pub units: String,
    pub adc_resolution: Option<u32>,
    pub adc_zero: i32,
    pub initial_value: Option<i32>,
    /// Parsed, never verified.
    pub checksum: Option<i32>,
    pub block_size: Option<u32>,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordHeader {
    pub record_name: String,
    pub n_signals: usize,
    pub fs: f64,
    pub n_samples: usize,
    pub signals: Vec<SignalSpec>,
    pub meta: SubjectMeta,
}

/// A raw multi-lead recording in physical units, shape `L x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    pub samples: Array2<f64>,
    pub fs: f64,
    pub lead_names: Vec<String>,
    pub meta: Option<SubjectMeta>,
}

impl EcgRecord {
    pub fn new(samples: Array2<f64>, fs: f64, lead_names: Vec<String>) -> Result<Self> {
        let record = Self {
            samples,
            fs,
            lead_names,
            meta: None,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn n_leads(&self) -> usize {
        self.samples.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.ncols() == 0 {
            return Err(Error::Structure("record has no leads".into()));
        }
        if self.lead_names.len() != self.samples.ncols() {
            return Err(Error::Structure(format!(
                "{} lead names for {} leads",
                self.lead_names.len(),
                self.samples.ncols()
            )));
        }
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return Err(Error::Structure(format!("sampling rate {} is not positive", self.fs)));
        }
        if self.samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("record samples".into()));
        }
        Ok(())
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Parses the text of a WFDB `.hea` file.
pub fn parse_wfdb_header(text: &str) -> Result<RecordHeader> {
    let mut meta = SubjectMeta::default();
    let mut lines = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = raw.trim();
        if let Some(comment) = trimmed.strip_prefix('#') {
            parse_comment(comment, &mut meta);
            continue;
        }
        if trimmed.is_empty() {
            continue;
        }
        lines.push((line_no, trimmed));
    }

    let (first_no, first) = *lines
        .first()
        .ok_or_else(|| parse_err(1, "header has no record line"))?;
    let fields: Vec<&str> = first.split_whitespace().collect();
    if fields.len() < 2 {
        return Err(parse_err(first_no, "record line needs at least a name and signal count"));
    }
    let record_name = fields[0].to_string();
    if record_name.contains('/') {
        return Err(Error::Structure("multi-segment records are not supported".into()));
    }
    let n_signals: usize = fields[1]
        .parse()
        .map_err(|_| parse_err(first_no, format!("bad signal count {:?}", fields[1])))?;
    if n_signals == 0 {
        return Err(parse_err(first_no, "record declares zero signals"));
    }
    let fs = match fields.get(2) {
        // "fs/counter_freq(base_counter)" -- only the sampling frequency matters here.
        Some(f) => {
            let f = f.split(['/', '(']).next().unwrap_or(f);
            f.parse::<f64>()
                .map_err(|_| parse_err(first_no, format!("bad sampling frequency {f:?}")))?
        }
        None => 250.0,
    };
    if !(fs > 0.0 && fs.is_finite()) {
        return Err(parse_err(first_no, format!("sampling frequency {fs} is not positive")));
    }
    let n_samples = match fields.get(3) {
        Some(n) => n
            .parse::<usize>()
            .map_err(|_| parse_err(first_no, format!("bad sample count {n:?}")))?,
        None => 0,
    };

    let spec_lines = &lines[1..];
    if spec_lines.len() != n_signals {
        return Err(Error::Structure(format!(
            "record line declares {n_signals} signals but {} signal lines follow",
            spec_lines.len()
        )));
    }
    let signals = spec_lines
        .iter()
        .enumerate()
        .map(|(i, (line_no, line))| parse_signal_line(*line_no, line, i))
        .collect::<Result<Vec<_>>>()?;

    Ok(RecordHeader {
        record_name,
        n_signals,
        fs,
        n_samples,
        signals,
        meta,
    })
}

fn parse_comment(comment: &str, meta: &mut SubjectMeta) {
    let Some((key, value)) = comment.split_once(':') else {
        return;
    };
    let value = value.trim();
    match key.trim().to_ascii_lowercase().as_str() {
        "age" => meta.age = value.parse().ok(),
        "sex" => {
            meta.sex = match value.to_ascii_lowercase().as_str() {
                "m" | "male" | "0" => Some(Sex::Male),
                "f" | "female" | "1" => Some(Sex::Female),
                _ => None,
            }
        }
        _ => {}
    }
}

fn parse_signal_line(line_no: usize, line: &str, index: usize) -> Result<SignalSpec> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() < 2 {
        return Err(parse_err(line_no, "signal line needs a file name and format"));
    }
    let file_name = fields[0].to_string();

    let fmt_digits: String = fields[1].chars().take_while(|c| c.is_ascii_digit()).collect();
    let format_code: u32 = fmt_digits
        .parse()
        .map_err(|_| parse_err(line_no, format!("bad format field {:?}", fields[1])))?;
    if format_code != FORMAT_16 {
        return Err(Error::UnsupportedFormat(format_code));
    }
    if fields[1][fmt_digits.len()..].starts_with('x') {
        return Err(Error::Structure("multi-frequency signals are not supported".into()));
    }

    let int_field = |pos: usize, what: &str| -> Result<Option<i64>> {
        fields
            .get(pos)
            .map(|s| {
                s.parse::<i64>()
                    .map_err(|_| parse_err(line_no, format!("bad {what} {s:?}")))
            })
            .transpose()
    };
    let adc_resolution = int_field(3, "ADC resolution")?.map(|v| v as u32);
    let adc_zero = int_field(4, "ADC zero")?.unwrap_or(0) as i32;
    let initial_value = int_field(5, "initial value")?.map(|v| v as i32);
    let checksum = int_field(6, "checksum")?.map(|v| v as i32);
    let block_size = int_field(7, "block size")?.map(|v| v as u32);

    let mut gain = DEFAULT_GAIN;
    let mut baseline = adc_zero;
    let mut units = "mV".to_string();
    if let Some(field) = fields.get(2) {
        let (gain_part, units_part) = match field.split_once('/') {
            Some((g, u)) => (g, Some(u)),
            None => (*field, None),
        };
        let (gain_txt, baseline_txt) = match gain_part.split_once('(') {
            Some((g, rest)) => {
                let b = rest
                    .strip_suffix(')')
                    .ok_or_else(|| parse_err(line_no, format!("unclosed baseline in {field:?}")))?;
                (g, Some(b))
            }
            None => (gain_part, None),
        };
        let parsed: f64 = gain_txt
            .parse()
            .map_err(|_| parse_err(line_no, format!("bad gain {gain_txt:?}")))?;
        if !parsed.is_finite() {
            return Err(parse_err(line_no, "gain is not finite"));
        }
        if parsed != 0.0 {
            gain = parsed;
        }
        if let Some(b) = baseline_txt {
            baseline = b
                .parse()
                .map_err(|_| parse_err(line_no, format!("bad baseline {b:?}")))?;
        }
        if let Some(u) = units_part {
            units = u.to_string();
        }
    }

    let description = if fields.len() > 8 {
        fields[8..].join(" ")
    } else {
        format!("sig{index}")
    };

    Ok(SignalSpec {
        file_name,
        format_code,
        gain,
        baseline,
        units,
        adc_resolution,
        adc_zero,
        initial_value,
        checksum,
        block_size,
        description,
    })
}

impl RecordHeader {
    /// Renders the header back to `.hea` text. Every field that
    /// [`parse_wfdb_header`] reads is written explicitly.
    pub fn to_header_text(&self) -> String {
        let mut out = format!(
            "{} {} {} {}\n",
            self.record_name, self.n_signals, self.fs, self.n_samples
        );
        for s in &self.signals {
            out.push_str(&format!(
                "{} {} {}({})/{} {} {} {} {} {} {}\n",
                s.file_name,
                s.format_code,
                s.gain,
                s.baseline,
                s.units,
                s.adc_resolution.unwrap_or(16),
                s.adc_zero,
                s.initial_value.unwrap_or(0),
                s.checksum.unwrap_or(0),
                s.block_size.unwrap_or(0),
                s.description
            ));
        }
        if let Some(age) = self.meta.age {
            out.push_str(&format!("# age: {age}\n"));
        }
        if let Some(sex) = self.meta.sex {
            let s = match sex {
                Sex::Male => "M",
                Sex::Female => "F",
            };
            out.push_str(&format!("# sex: {s}\n"));
        }
        out
    }
}

/// Decodes a format-16 signal stream into physical units.
pub fn read_wfdb_signals(header: &RecordHeader, data: &[u8]) -> Result<EcgRecord> {
    let n_sig = header.n_signals;
    let expected = header.n_samples * n_sig * 2;
    if data.len() != expected {
        return Err(Error::Length {
            expected,
            found: data.len(),
        });
    }
    let mut samples = Array2::<f64>::zeros((header.n_samples, n_sig));
    for (frame, chunk) in data.chunks_exact(n_sig * 2).enumerate() {
        for (lead, bytes) in chunk.chunks_exact(2).enumerate() {
            let adc = i16::from_le_bytes([bytes[0], bytes[1]]) as f64;
            let spec = &header.signals[lead];
            samples[[frame, lead]] = (adc - spec.baseline as f64) / spec.gain;
        }
    }
    let record = EcgRecord {
        samples,
        fs: header.fs,
        lead_names: header.signals.iter().map(|s| s.description.clone()).collect(),
        meta: Some(header.meta.clone()),
    };
    record.validate()?;
    Ok(record)
}

/// Reads a header file and the single format-16 data file it names.
pub fn read_wfdb_record(header_path: &Path) -> Result<EcgRecord> {
    let text = fs::read_to_string(header_path)?;
    let header = parse_wfdb_header(&text)?;
    let file = &header.signals[0].file_name;
    if header.signals.iter().any(|s| &s.file_name != file) {
        return Err(Error::Structure(
            "signals spread over several data files are not supported".into(),
        ));
    }
    let dir = header_path.parent().unwrap_or_else(|| Path::new("."));
    let data = fs::read(dir.join(file))?;
    read_wfdb_signals(&header, &data)
}

/// Writes `<name>.hea` and `<name>.dat` (format 16, gain [`DEFAULT_GAIN`],
/// baseline 0) into `dir`. Values are rounded and clamped to `i16`.
pub fn write_wfdb_record(record: &EcgRecord, dir: &Path, name: &str) -> Result<()> {
    record.validate()?;
    let file_name = format!("{name}.dat");
    let signals = record
        .lead_names
        .iter()
        .map(|lead| SignalSpec {
            file_name: file_name.clone(),
            format_code: FORMAT_16,
            gain: DEFAULT_GAIN,
            baseline: 0,
            units: "mV".into(),
            adc_resolution: Some(16),
            adc_zero: 0,
            initial_value: None,
            checksum: None,
            block_size: None,
            description: lead.clone(),
        })
        .collect();
    let header = RecordHeader {
        record_name: name.to_string(),
        n_signals: record.n_leads(),
        fs: record.fs,
        n_samples: record.len(),
        signals,
        meta: record.meta.clone().unwrap_or_default(),
    };
    let mut data = Vec::with_capacity(record.samples.len() * 2);
    for v in record.samples.iter() {
        let adc = (v * DEFAULT_GAIN).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        data.extend_from_slice(&adc.to_le_bytes());
    }
    fs::write(dir.join(format!("{name}.hea")), header.to_header_text())?;
    fs::write(dir.join(file_name), data)?;
    Ok(())
}

/// Parses comma-separated rows (one sample frame per row, one lead per column).
pub fn read_csv_record(text: &str, fs: f64, lead_names: &[String]) -> Result<EcgRecord> {
    let mut width = None;
    let mut values = Vec::new();
    let mut rows = 0;
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut count = 0;
        for (col, cell) in line.split(',').enumerate() {
            let cell = cell.trim();
            let v: f64 = cell.parse().map_err(|_| Error::Cell {
                row: idx + 1,
                column: col + 1,
                message: format!("not a number: {cell:?}"),
            })?;
            values.push(v);
            count += 1;
        }
        match width {
            None => width = Some(count),
            Some(w) if w != count => {
                return Err(Error::Structure(format!(
                    "row {} has {count} columns, expected {w}",
                    idx + 1
                )))
            }
            _ => {}
        }
        rows += 1;
    }
    let width = width.ok_or_else(|| Error::Structure("csv has no rows".into()))?;
    let names = if lead_names.is_empty() {
        (0..width).map(|i| format!("lead{i}")).collect()
    } else {
        lead_names.to_vec()
    };
    let samples = Array2::from_shape_vec((rows, width), values)
        .map_err(|e| Error::Structure(e.to_string()))?;
    EcgRecord::new(samples, fs, names)
}

/// Renders a record as CSV text, the inverse of [`read_csv_record`].
pub fn write_csv_record(record: &EcgRecord) -> String {
    let mut out = String::new();
    for row in record.samples.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Serializes a segment into the `BSEG` container.
pub fn encode_segment(segment: &Segment) -> Vec<u8> {
    let (t, c) = segment.samples.dim();
    let mut out = Vec::with_capacity(20 + 8 * c + 4 * t * c);
    out.extend_from_slice(BSEG_MAGIC);
    out.extend_from_slice(&BSEG_VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    out.extend_from_slice(&segment.fs.to_le_bytes());
    for s in &segment.norm_stats {
        out.extend_from_slice(&s.mean.to_le_bytes());
        out.extend_from_slice(&s.std.to_le_bytes());
    }
    for v in segment.samples.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses a `BSEG` container. `source_offset` is not persisted and reads back as 0.
pub fn decode_segment(bytes: &[u8]) -> Result<Segment> {
    let mut cursor = bytes;
    let mut magic = [0u8; 4];
    cursor
        .read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short for BSEG magic".into()))?;
    if &magic != BSEG_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected BSEG")));
    }
    let version = read_u32(&mut cursor, "version")?;
    if version != BSEG_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: BSEG_VERSION,
        });
    }
    let t = read_u32(&mut cursor, "T")? as usize;
    let c = read_u32(&mut cursor, "C")? as usize;
    let fs = read_f32(&mut cursor, "fs")?;
    let expected = 8 * c + 4 * t * c;
    if cursor.len() != expected {
        return Err(Error::Format(format!(
            "BSEG body is {} bytes, header implies {expected}",
            cursor.len()
        )));
    }
    let mut norm_stats = Vec::with_capacity(c);
    for _ in 0..c {
        let mean = read_f32(&mut cursor, "mean")?;
        let std = read_f32(&mut cursor, "std")?;
        norm_stats.push(NormStats { mean, std });
    }
    let data: Vec<f32> = cursor
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let samples =
        Array2::from_shape_vec((t, c), data).map_err(|e| Error::Format(e.to_string()))?;
    Ok(Segment {
        samples,
        fs,
        norm_stats,
        source_offset: 0,
    })
}

pub fn write_segment_file(segment: &Segment, path: &Path) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(&encode_segment(segment))?;
    Ok(())
}

pub fn read_segment_file(path: &Path) -> Result<Segment> {
    decode_segment(&fs::read(path)?)
}

/// Path of the future half that belongs to a context file `<name>.bseg`.
pub fn future_path(context: &Path) -> std::path::PathBuf {
    let stem = context.file_stem().and_then(|s| s.to_str()).unwrap_or("segment");
    context.with_file_name(format!("{stem}.future.bseg"))
}

/// Writes `<name>.bseg` (context) and `<name>.future.bseg` into `dir`.
pub fn write_pair_files(pair: &SegmentPair, dir: &Path, name: &str) -> Result<()> {
    let context = dir.join(format!("{name}.bseg"));
    write_segment_file(&pair.context, &context)?;
    let future = Segment {
        samples: pair.future.clone(),
        fs: pair.context.fs,
        norm_stats: pair.context.norm_stats.clone(),
        source_offset: 0,
    };
    write_segment_file(&future, &future_path(&context))
}

pub fn read_pair_files(context: &Path) -> Result<SegmentPair> {
    let ctx = read_segment_file(context)?;
    let fut = read_segment_file(&future_path(context))?;
    if fut.n_leads() != ctx.n_leads() {
        return Err(Error::Structure(format!(
            "future has {} leads, context has {}",
            fut.n_leads(),
            ctx.n_leads()
        )));
    }
    Ok(SegmentPair {
        context: ctx,
        future: fut.samples,
    })
}

/// All pairs in `dir`, in file-name order.
pub fn read_pair_dir(dir: &Path) -> Result<Vec<SegmentPair>> {
    let mut contexts: Vec<_> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.ends_with(".bseg") && !name.ends_with(".future.bseg")
        })
        .collect();
    contexts.sort();
    contexts.iter().map(|p| read_pair_files(p)).collect()
}

fn read_u32(cursor: &mut &[u8], what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    cursor
        .read_exact(&mut b)
        .map_err(|_| Error::Format(format!("truncated before {what}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32(cursor: &mut &[u8], what: &str) -> Result<f32> {
    read_u32(cursor, what).map(f32::from_bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TOY: &str = "toy 2 500 1000\n\
        toy.dat 16 200(0)/mV 16 0 0 0 0 I\n\
        toy.dat 16 200(0)/mV 16 0 0 0 0 II\n";

    fn frames(header: &RecordHeader, adc: &[i16]) -> Vec<u8> {
        assert_eq!(adc.len(), header.n_samples * header.n_signals);
        adc.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    #[test]
    fn wfdb_write_then_read() {
        let samples = Array2::from_shape_fn((300, 2), |(i, c)| ((i as f64) * 0.05 + c as f64).sin() * 1.5);
        let rec = EcgRecord::new(samples, 500.0, vec!["I".into(), "II".into()]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_wfdb_record(&rec, dir.path(), "r1").unwrap();
        let back = read_wfdb_record(&dir.path().join("r1.hea")).unwrap();
        assert_eq!(back.fs, 500.0);
        assert_eq!(back.lead_names, rec.lead_names);
        for (a, b) in back.samples.iter().zip(rec.samples.iter()) {
            assert!((a - b).abs() <= 0.5 / DEFAULT_GAIN + 1e-12);
        }
    }

    #[test]
    fn pair_files_roundtrip() {
        let samples = Array2::from_shape_fn((6, 2), |(i, c)| i as f32 - c as f32);
        let pair = SegmentPair {
            context: Segment {
                samples,
                fs: 250.0,
                norm_stats: vec![NormStats { mean: 0.5, std: 2.0 }; 2],
                source_offset: 0,
            },
            future: Array2::from_elem((3, 2), 0.25),
        };
        let dir = tempfile::tempdir().unwrap();
        write_pair_files(&pair, dir.path(), "p0").unwrap();
        write_pair_files(&pair, dir.path(), "p1").unwrap();
        let back = read_pair_dir(dir.path()).unwrap();
        assert_eq!(back, vec![pair.clone(), pair]);
    }

    #[test]
    fn toy_header() {
        let h = parse_wfdb_header(TOY).unwrap();
        assert_eq!(h.record_name, "toy");
        assert_eq!(h.n_signals, 2);
        assert_eq!(h.fs, 500.0);
        assert_eq!(h.n_samples, 1000);
        assert_eq!(h.signals[1].description, "II");
        assert_eq!(h.signals[0].gain, 200.0);
    }

    #[test]
    fn minimal_header_defaults() {
        let h = parse_wfdb_header("r 1 250 500\nr.dat 16\n").unwrap();
        assert_eq!(h.n_signals, 1);
        assert_eq!(h.signals[0].gain, DEFAULT_GAIN);
        assert_eq!(h.signals[0].baseline, 0);
        assert_eq!(h.signals[0].units, "mV");
    }

    #[test]
    fn zero_gain_means_default() {
        let h = parse_wfdb_header("r 1 250 500\nr.dat 16 0\n").unwrap();
        assert_eq!(h.signals[0].gain, DEFAULT_GAIN);
    }

    #[test]
    fn baseline_falls_back_to_adc_zero() {
        let h = parse_wfdb_header("r 1 250 4\nr.dat 16 100 12 7\n").unwrap();
        assert_eq!(h.signals[0].baseline, 7);
    }

    #[test]
    fn rejects_format_212() {
        let err = parse_wfdb_header("r 1 250 500\nr.dat 212 200\n").unwrap_err();
        assert!(matches!(err, Error::UnsupportedFormat(212)));
    }

    #[test]
    fn signal_count_mismatch() {
        let err = parse_wfdb_header("r 2 250 500\nr.dat 16 200\n").unwrap_err();
        assert!(matches!(err, Error::Structure(_)));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_wfdb_header("# c\nr 1 250 500\nr.dat 16 abc\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn comments_carry_subject_meta() {
        let h = parse_wfdb_header("r 1 250 1\nr.dat 16\n# age: 56\n# sex: F\n").unwrap();
        assert_eq!(h.meta.age, Some(56.0));
        assert_eq!(h.meta.sex, Some(Sex::Female));
    }

    #[test]
    fn physical_conversion() {
        let mut h = parse_wfdb_header("r 1 250 3\nr.dat 16 200(0)\n").unwrap();
        let rec = read_wfdb_signals(&h, &frames(&h, &[0, 1000, -400])).unwrap();
        assert_eq!(rec.samples.column(0).to_vec(), vec![0.0, 5.0, -2.0]);

        h.signals[0].baseline = 1000;
        let rec = read_wfdb_signals(&h, &frames(&h, &[1000, 1000, 1000])).unwrap();
        assert!(rec.samples.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn all_zero_stream() {
        let h = parse_wfdb_header(TOY).unwrap();
        let rec = read_wfdb_signals(&h, &vec![0u8; 4000]).unwrap();
        assert_eq!(rec.samples.dim(), (1000, 2));
        assert!(rec.samples.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn truncated_stream() {
        let h = parse_wfdb_header(TOY).unwrap();
        let err = read_wfdb_signals(&h, &[0u8; 3998]).unwrap_err();
        assert!(matches!(
            err,
            Error::Length {
                expected: 4000,
                found: 3998
            }
        ));
    }

    #[test]
    fn csv_cases() {
        let r = read_csv_record("0,0\n0,0\n0,0\n0,0\n", 250.0, &[]).unwrap();
        assert_eq!(r.samples.dim(), (4, 2));
        let r = read_csv_record("1.5\n", 250.0, &["I".into()]).unwrap();
        assert_eq!(r.samples[[0, 0]], 1.5);
        assert!(matches!(
            read_csv_record("1,2\n1,2,3\n", 250.0, &[]),
            Err(Error::Structure(_))
        ));
        match read_csv_record("1,2\n1,x\n", 250.0, &[]) {
            Err(Error::Cell { row, column, .. }) => assert_eq!((row, column), (2, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bseg_rejects_garbage() {
        assert!(matches!(decode_segment(b""), Err(Error::Format(_))));
        assert!(matches!(
            decode_segment(b"XXXX\x01\0\0\0"),
            Err(Error::Format(_))
        ));
        let seg = Segment {
            samples: Array2::zeros((2, 1)),
            fs: 250.0,
            norm_stats: vec![NormStats { mean: 0.0, std: 1.0 }],
            source_offset: 0,
        };
        let mut bytes = encode_segment(&seg);
        bytes[4] = 9;
        assert!(matches!(
            decode_segment(&bytes),
            Err(Error::UnsupportedVersion { found: 9, .. })
        ));
        let bytes = encode_segment(&seg);
        assert!(decode_segment(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn gain_and_baseline_law(
            adc in proptest::collection::vec(any::<i16>(), 1..64),
            gain in prop_oneof![-1000.0f64..-0.01, 0.01f64..1000.0],
            baseline in -30000i32..30000,
        ) {
            let text = format!("p 1 250 {}\np.dat 16 {}({})\n", adc.len(), gain, baseline);
            let h = parse_wfdb_header(&text).unwrap();
            let rec = read_wfdb_signals(&h, &frames(&h, &adc)).unwrap();
            prop_assert_eq!(rec.samples.dim(), (adc.len(), 1));
            for (a, v) in adc.iter().zip(rec.samples.iter()) {
                prop_assert_eq!(*v, (*a as f64 - baseline as f64) / gain);
            }
        }

        #[test]
        fn header_render_parse_identity(
            n_sig in 1usize..6,
            fs in 1u32..2000,
            n in 0usize..100_000,
            gains in proptest::collection::vec(1u32..5000, 6),
            baselines in proptest::collection::vec(-2000i32..2000, 6),
        ) {
            let signals = (0..n_sig).map(|i| SignalSpec {
                file_name: "x.dat".into(),
                format_code: 16,
                gain: gains[i] as f64 / 4.0,
                baseline: baselines[i],
                units: "mV".into(),
                adc_resolution: Some(16),
                adc_zero: 0,
                initial_value: Some(0),
                checksum: Some(0),
                block_size: Some(0),
                description: format!("V{i}"),
            }).collect();
            let h = RecordHeader {
                record_name: "x".into(),
                n_signals: n_sig,
                fs: fs as f64,
                n_samples: n,
                signals,
                meta: SubjectMeta { age: Some(40.0), sex: Some(Sex::Male) },
            };
            prop_assert_eq!(parse_wfdb_header(&h.to_header_text()).unwrap(), h);
        }
    }
}
