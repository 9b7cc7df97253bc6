//! Output plumbing: JSON with full-precision floats, CSV, digests, the run
//! manifest, and key=value config injection.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// JSON formatter printing every float with 17 significant digits, so the
/// serialized value round-trips to the exact same double.
struct FullPrecision;

impl serde_json::ser::Formatter for FullPrecision {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + Write,
    {
        if value.is_finite() {
            write!(writer, "{value:.16e}")
        } else {
            writer.write_all(b"null")
        }
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> io::Result<()>
    where
        W: ?Sized + Write,
    {
        self.write_f64(writer, value as f64)
    }
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> io::Result<Vec<u8>> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FullPrecision);
    value
        .serialize(&mut ser)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    buf.push(b'\n');
    Ok(buf)
}

pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn csv_bytes(header: &[String], rows: &[Vec<f64>]) -> Vec<u8> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|&x| format_float(x)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out.into_bytes()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Full record of one command invocation: parameters, seeds, and the digests
/// of every file it wrote. Replaying the stored argv must reproduce the
/// digests byte for byte.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub seeds: Vec<u64>,
    pub outputs: BTreeMap<String, String>,
}

/// Collects outputs for one command, writing files and recording digests.
pub struct OutputSink {
    dir: PathBuf,
    outputs: BTreeMap<String, String>,
}

impl OutputSink {
    pub fn new(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(OutputSink {
            dir: dir.to_path_buf(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> io::Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> io::Result<()> {
        let bytes = to_json_bytes(value)?;
        self.write_bytes(name, &bytes)
    }

    pub fn write_csv(
        &mut self,
        name: &str,
        header: &[String],
        rows: &[Vec<f64>],
    ) -> io::Result<()> {
        self.write_bytes(name, &csv_bytes(header, rows))
    }

    pub fn finish(
        mut self,
        command: &str,
        argv: &[String],
        seeds: Vec<u64>,
    ) -> io::Result<Manifest> {
        let manifest = Manifest {
            command: command.to_string(),
            argv: argv.to_vec(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seeds,
            outputs: self.outputs.clone(),
        };
        let bytes = to_json_bytes(&manifest)?;
        fs::write(self.dir.join(format!("{command}_manifest.json")), bytes)?;
        self.outputs.clear();
        Ok(manifest)
    }
}

/// Splices `key=value` lines from a config file into the argument list as
/// `--key value` pairs placed right after the subcommand, so explicit flags
/// (which come later) win.
pub fn inject_config(mut argv: Vec<String>, subcommands: &[&str]) -> Result<Vec<String>, String> {
    let mut config_path: Option<String> = None;
    let mut i = 0;
    while i < argv.len() {
        if argv[i] == "--config" {
            if i + 1 >= argv.len() {
                return Err("--config requires a file path".to_string());
            }
            config_path = Some(argv.remove(i + 1));
            argv.remove(i);
        } else if let Some(rest) = argv[i].strip_prefix("--config=") {
            config_path = Some(rest.to_string());
            argv.remove(i);
        } else {
            i += 1;
        }
    }
    let Some(path) = config_path else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&path).map_err(|e| format!("cannot read config {path}: {e}"))?;
    let mut extra: Vec<String> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!("config line {}: expected key=value", lineno + 1));
        };
        // Explicit flags override the config: skip keys already present.
        let flag = format!("--{}", key.trim());
        let assigned = format!("{flag}=");
        if argv.iter().any(|a| *a == flag || a.starts_with(&assigned)) {
            continue;
        }
        extra.push(flag);
        extra.push(value.trim().to_string());
    }
    let sub_pos = argv
        .iter()
        .position(|a| subcommands.contains(&a.as_str()))
        .ok_or_else(|| "config given but no subcommand found".to_string())?;
    let tail: Vec<String> = argv.split_off(sub_pos + 1);
    argv.extend(extra);
    argv.extend(tail);
    Ok(argv)
}
