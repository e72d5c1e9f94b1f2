use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use ssc_core::io::{write_json, write_text};
use ssc_core::Error;

pub const USAGE: u8 = 2;
pub const DATA: u8 = 3;
pub const NUMERICAL: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: USAGE,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: DATA,
            message: message.into(),
        }
    }

    pub fn code(&self) -> u8 {
        self.code
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = if e.is_numerical() {
            NUMERICAL
        } else if e.is_data_format() || matches!(e, Error::MaskTooSmall { .. } | Error::SubjectMismatch) {
            DATA
        } else {
            USAGE
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// One output section (`<outdir>/<name>/`).
pub struct Section {
    dir: PathBuf,
}

impl Section {
    pub fn new(outdir: &Path, name: &str) -> Self {
        Self { dir: outdir.join(name) }
    }

    pub fn at(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf() }
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    pub fn text(&self, file: &str, contents: &str) -> CliResult<()> {
        Ok(write_text(&self.path(file), contents)?)
    }

    pub fn json<T: Serialize>(&self, file: &str, value: &T) -> CliResult<()> {
        Ok(write_json(&self.path(file), value)?)
    }
}

#[derive(Serialize)]
struct Metadata<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    threads: usize,
    finished_unix: u64,
}

/// Run details, including the only timestamp the tool writes.
pub fn write_metadata(section: &Section, command: &str, seed: u64) -> CliResult<()> {
    let finished_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    section.json(
        &format!("{command}.metadata.json"),
        &Metadata {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            threads: rayon::current_num_threads(),
            finished_unix,
        },
    )
}
