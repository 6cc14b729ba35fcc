//! Tag files, run manifests and the small CSV/JSON outputs of the runner.
//!
//! Two tag formats:
//! - CSV: a `# config_hash=<hex> seed=<n>` line, a `channel,time_ps` header,
//!   then one row per tag.
//! - Binary: the 8-byte magic `FRTAG001`, then 16-byte little-endian records
//!   (u64 time, u8 channel, 7 zero bytes). The layout has no room for
//!   provenance, which binary runs keep in the manifest next to the files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::ChshTerm;
use crate::coincidence::DelayHistogram;
use crate::config::{ExperimentConfig, TagFormat};
use crate::event_sim::{StreamOrigin, TimeTagStream};

pub const BINARY_MAGIC: &[u8; 8] = b"FRTAG001";
pub const MANIFEST_FILE: &str = "manifest.json";
const RECORD_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn origin_line(origin: &StreamOrigin) -> String {
    format!(
        "# config_hash={} seed={}\n",
        origin.config_hash.as_deref().unwrap_or("none"),
        origin.seed
    )
}

fn parse_origin_line(path: &Path, line: &str) -> Result<StreamOrigin, IoError> {
    let body = line
        .trim_end()
        .strip_prefix("# ")
        .ok_or_else(|| format_err(path, "missing provenance comment"))?;
    let mut origin = StreamOrigin::default();
    for field in body.split_whitespace() {
        match field.split_once('=') {
            Some(("config_hash", "none")) => origin.config_hash = None,
            Some(("config_hash", h)) => origin.config_hash = Some(h.to_string()),
            Some(("seed", s)) => {
                origin.seed = s.parse().map_err(|_| format_err(path, format!("bad seed `{s}`")))?;
            }
            _ => return Err(format_err(path, format!("unexpected field `{field}`"))),
        }
    }
    Ok(origin)
}

#[derive(Debug, Serialize, Deserialize)]
struct TagRow {
    channel: u8,
    time_ps: u64,
}

/// Writes one or more streams to a single CSV file, ordered by time then
/// channel.
pub fn write_tags_csv(path: &Path, streams: &[&TimeTagStream]) -> Result<(), IoError> {
    let origin = streams.first().map(|s| s.origin.clone()).unwrap_or_default();
    let mut file = BufWriter::new(File::create(path).map_err(io_err(path))?);
    file.write_all(origin_line(&origin).as_bytes()).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    for (channel, time_ps) in interleave(streams) {
        w.serialize(TagRow { channel, time_ps }).map_err(|source| IoError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a tag CSV back into per-channel streams, ordered by channel.
pub fn read_tags_csv(path: &Path) -> Result<Vec<TimeTagStream>, IoError> {
    let mut reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut first = String::new();
    std::io::BufRead::read_line(&mut reader, &mut first).map_err(io_err(path))?;
    let origin = parse_origin_line(path, &first)?;
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    let mut rows = Vec::new();
    for row in r.deserialize::<TagRow>() {
        let row = row.map_err(|source| IoError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        rows.push((row.channel, row.time_ps));
    }
    split_channels(path, rows, origin)
}

pub fn write_tags_binary(path: &Path, streams: &[&TimeTagStream]) -> Result<(), IoError> {
    let mut file = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let mut put = |bytes: &[u8]| file.write_all(bytes).map_err(io_err(path));
    put(BINARY_MAGIC)?;
    for (channel, time_ps) in interleave(streams) {
        let mut rec = [0u8; RECORD_LEN];
        rec[..8].copy_from_slice(&time_ps.to_le_bytes());
        rec[8] = channel;
        put(&rec)?;
    }
    file.flush().map_err(io_err(path))
}

pub fn read_tags_binary(path: &Path) -> Result<Vec<TimeTagStream>, IoError> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    if bytes.len() < BINARY_MAGIC.len() || &bytes[..8] != BINARY_MAGIC {
        return Err(format_err(path, "not a binary tag file"));
    }
    let body = &bytes[BINARY_MAGIC.len()..];
    if body.len() % RECORD_LEN != 0 {
        return Err(format_err(path, "truncated record"));
    }
    let rows = body
        .chunks_exact(RECORD_LEN)
        .map(|rec| (rec[8], u64::from_le_bytes(rec[..8].try_into().unwrap())))
        .collect();
    split_channels(path, rows, StreamOrigin::default())
}

/// Reads either format, chosen by the file's first bytes.
pub fn read_tags(path: &Path) -> Result<Vec<TimeTagStream>, IoError> {
    let mut magic = [0u8; 8];
    let n = File::open(path)
        .map_err(io_err(path))?
        .read(&mut magic)
        .map_err(io_err(path))?;
    if n == 8 && &magic == BINARY_MAGIC {
        read_tags_binary(path)
    } else {
        read_tags_csv(path)
    }
}

fn interleave(streams: &[&TimeTagStream]) -> Vec<(u8, u64)> {
    let mut rows: Vec<(u64, u8)> = streams
        .iter()
        .flat_map(|s| s.tags.iter().map(move |&t| (t, s.channel)))
        .collect();
    rows.sort_unstable();
    rows.into_iter().map(|(t, c)| (c, t)).collect()
}

fn split_channels(path: &Path, rows: Vec<(u8, u64)>, origin: StreamOrigin) -> Result<Vec<TimeTagStream>, IoError> {
    let mut channels: Vec<TimeTagStream> = Vec::new();
    for (channel, t) in rows {
        let stream = match channels.iter_mut().find(|s| s.channel == channel) {
            Some(s) => s,
            None => {
                channels.push(TimeTagStream {
                    channel,
                    tags: Vec::new(),
                    origin: origin.clone(),
                });
                channels.last_mut().unwrap()
            }
        };
        if stream.tags.last().is_some_and(|&last| last >= t) {
            return Err(format_err(path, format!("channel {channel} not strictly increasing at {t} ps")));
        }
        stream.tags.push(t);
    }
    channels.sort_by_key(|s| s.channel);
    Ok(channels)
}

/// Sidecar written next to the tag files of one simulated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    /// Hash of the configuration the CHSH term was derived from.
    pub base_config_hash: Option<String>,
    pub chsh_term: Option<ChshTerm>,
    pub seed: u64,
    pub tau_ps: f64,
    pub format: TagFormat,
    pub files: Vec<String>,
    pub config: ExperimentConfig,
}

/// Streams of a run read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub manifest: RunManifest,
    pub streams: [TimeTagStream; 4],
}

fn tag_file_name(format: TagFormat, channel: u8) -> String {
    match format {
        TagFormat::Csv => format!("ch{channel}.csv"),
        TagFormat::Binary => format!("ch{channel}.bin"),
    }
}

/// Writes one tag file per channel plus the manifest into `dir`.
pub fn write_run(dir: &Path, manifest_base: RunManifest, streams: &[TimeTagStream; 4]) -> Result<RunManifest, IoError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let format = manifest_base.format;
    let mut files = Vec::with_capacity(4);
    for s in streams {
        let name = tag_file_name(format, s.channel);
        let path = dir.join(&name);
        match format {
            TagFormat::Csv => write_tags_csv(&path, &[s])?,
            TagFormat::Binary => write_tags_binary(&path, &[s])?,
        }
        files.push(name);
    }
    let manifest = RunManifest { files, ..manifest_base };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_run(dir: &Path) -> Result<LoadedRun, IoError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: RunManifest = read_json(&manifest_path)?;
    if manifest.files.len() != 4 {
        return Err(format_err(&manifest_path, "expected four tag files"));
    }
    let mut streams = Vec::with_capacity(4);
    for (k, name) in manifest.files.iter().enumerate() {
        let path = dir.join(name);
        let mut read = read_tags(&path)?;
        let channel = k as u8 + 1;
        let mut stream = match read.iter().position(|s| s.channel == channel) {
            Some(i) if read.len() == 1 => read.swap_remove(i),
            None if read.is_empty() => TimeTagStream::new(channel, Vec::new()),
            _ => return Err(format_err(&path, format!("expected only channel {channel}"))),
        };
        match &stream.origin.config_hash {
            // binary files and empty CSV files carry no usable provenance
            None if manifest.format == TagFormat::Binary || stream.tags.is_empty() => {
                stream.origin = StreamOrigin {
                    seed: manifest.seed,
                    config_hash: Some(manifest.config_hash.clone()),
                };
            }
            Some(h) if *h == manifest.config_hash && stream.origin.seed == manifest.seed => {}
            _ => return Err(format_err(&path, "provenance does not match the manifest")),
        }
        streams.push(stream);
    }
    let streams: [TimeTagStream; 4] = streams.try_into().expect("four streams");
    Ok(LoadedRun { manifest, streams })
}

/// `bin_center_ps,count` rows after a provenance comment.
pub fn write_histogram_csv(path: &Path, hist: &DelayHistogram, config_hash: &str) -> Result<(), IoError> {
    let mut file = BufWriter::new(File::create(path).map_err(io_err(path))?);
    writeln!(file, "# config_hash={config_hash}").map_err(io_err(path))?;
    writeln!(file, "bin_center_ps,count").map_err(io_err(path))?;
    for (k, c) in hist.counts.iter().enumerate() {
        writeln!(file, "{},{}", hist.bin_center_ps(k), c).map_err(io_err(path))?;
    }
    file.flush().map_err(io_err(path))
}

/// Writes a header line and rows of numbers, preceded by a provenance comment.
pub fn write_table_csv(path: &Path, config_hash: &str, header: &[&str], rows: &[Vec<f64>]) -> Result<(), IoError> {
    let mut file = BufWriter::new(File::create(path).map_err(io_err(path))?);
    writeln!(file, "# config_hash={config_hash}").map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |source| IoError::Csv {
        path: path.to_path_buf(),
        source,
    };
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row.iter().map(|v| format!("{v}"))).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

/// Pretty JSON with a trailing newline.
pub fn to_json_string<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    std::fs::write(path, to_json_string(value)).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })
}
