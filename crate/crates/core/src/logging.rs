//! Process-wide logger: stderr filtered by `IFL_LOG`, plus an optional
//! per-run log file.

use std::fs::File;
use std::io::{LineWriter, Write};
use std::path::Path;
use std::sync::{Mutex, OnceLock};

use log::{Level, LevelFilter, Log, Metadata, Record};

pub const ENV_VAR: &str = "IFL_LOG";

struct Logger {
    stderr_level: LevelFilter,
    file: Mutex<Option<LineWriter<File>>>,
}

static LOGGER: OnceLock<Logger> = OnceLock::new();

impl Log for Logger {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= Level::Debug
    }

    fn log(&self, record: &Record) {
        let level = record.level();
        if level <= self.stderr_level {
            eprintln!("[{level:5}] {}", record.args());
        }
        if level <= Level::Info {
            if let Some(f) = self.file.lock().expect("log file lock").as_mut() {
                let _ = writeln!(f, "[{level:5}] {}", record.args());
            }
        }
    }

    fn flush(&self) {
        if let Some(f) = self.file.lock().expect("log file lock").as_mut() {
            let _ = f.flush();
        }
    }
}

/// Parses an `IFL_LOG` value.
pub fn parse_level(s: &str) -> Option<LevelFilter> {
    match s.trim().to_ascii_lowercase().as_str() {
        "debug" => Some(LevelFilter::Debug),
        "info" => Some(LevelFilter::Info),
        "warn" => Some(LevelFilter::Warn),
        _ => None,
    }
}

/// Installs the logger once per process. Unrecognized `IFL_LOG` values fall
/// back to `info` with a warning.
pub fn init() {
    let mut bad = None;
    let logger = LOGGER.get_or_init(|| {
        let stderr_level = match std::env::var(ENV_VAR) {
            Ok(v) => parse_level(&v).unwrap_or_else(|| {
                bad = Some(v);
                LevelFilter::Info
            }),
            Err(_) => LevelFilter::Info,
        };
        Logger {
            stderr_level,
            file: Mutex::new(None),
        }
    });
    if log::set_logger(logger).is_ok() {
        log::set_max_level(LevelFilter::Debug);
    }
    if let Some(v) = bad {
        log::warn!("unrecognized {ENV_VAR}={v:?}; using info");
    }
}

/// Sends info-and-above records to `path` (truncated) until replaced.
pub fn attach_file(path: &Path) -> std::io::Result<()> {
    init();
    let f = LineWriter::new(File::create(path)?);
    if let Some(l) = LOGGER.get() {
        *l.file.lock().expect("log file lock") = Some(f);
    }
    Ok(())
}

pub fn detach_file() {
    if let Some(l) = LOGGER.get() {
        if let Some(mut f) = l.file.lock().expect("log file lock").take() {
            let _ = f.flush();
        }
    }
}
