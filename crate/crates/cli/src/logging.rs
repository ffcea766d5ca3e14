//! Human-readable log lines on stderr, plus JSON Lines events when enabled.
//!
//! The `log` facade allows a single global logger per process, so the logger
//! is installed once and each run swaps the sink state behind it.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::{Mutex, Once};
use std::time::Instant;

use log::{Level, LevelFilter, Log, Metadata, Record};
use serde_json::{json, Value};

struct Sink {
    level: LevelFilter,
    events: Option<BufWriter<File>>,
    start: Instant,
}

static SINK: Mutex<Option<Sink>> = Mutex::new(None);
static INSTALL: Once = Once::new();

struct CliLogger;

impl Log for CliLogger {
    fn enabled(&self, metadata: &Metadata) -> bool {
        SINK.lock().map(|s| s.as_ref().is_some_and(|s| metadata.level() <= s.level)).unwrap_or(false)
    }

    fn log(&self, record: &Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let message = record.args().to_string();
        human(record.level(), &message);
        write_event(json!({
            "level": record.level().as_str(),
            "target": record.target(),
            "message": message,
        }));
    }

    fn flush(&self) {
        if let Ok(mut s) = SINK.lock() {
            if let Some(w) = s.as_mut().and_then(|s| s.events.as_mut()) {
                let _ = w.flush();
            }
        }
    }
}

fn human(level: Level, message: &str) {
    match level {
        Level::Error => eprintln!("error: {message}"),
        Level::Warn => eprintln!("warning: {message}"),
        Level::Info => eprintln!("scalebound: {message}"),
        Level::Debug | Level::Trace => eprintln!("[{}] {message}", level.as_str().to_ascii_lowercase()),
    }
}

fn write_event(mut body: Value) {
    let Ok(mut guard) = SINK.lock() else { return };
    let Some(sink) = guard.as_mut() else { return };
    let t_ms = sink.start.elapsed().as_secs_f64() * 1e3;
    if let Some(w) = sink.events.as_mut() {
        body["t_ms"] = json!((t_ms * 1e3).round() / 1e3);
        let _ = writeln!(w, "{body}");
    }
}

/// Starts a run's logging. `events` names the JSON Lines file, if any.
pub fn start(level: LevelFilter, events: Option<&Path>) -> std::io::Result<()> {
    INSTALL.call_once(|| {
        if log::set_logger(&CliLogger).is_ok() {
            log::set_max_level(LevelFilter::Trace);
        }
    });
    let events = match events {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    *SINK.lock().expect("log sink lock") = Some(Sink {
        level,
        events,
        start: Instant::now(),
    });
    Ok(())
}

/// A named machine event with structured fields; also logged for humans at info level.
pub fn event(name: &str, fields: Value) {
    let enabled = SINK.lock().map(|s| s.as_ref().is_some_and(|s| Level::Info <= s.level)).unwrap_or(false);
    if enabled {
        human(Level::Info, &format!("{name} {fields}"));
    }
    write_event(json!({ "level": "INFO", "event": name, "fields": fields }));
}

/// A named event for `events.jsonl` only, for things already reported on stderr.
pub fn machine_event(name: &str, fields: Value) {
    write_event(json!({ "level": "INFO", "event": name, "fields": fields }));
}

/// Flushes and closes the events file.
pub fn finish() {
    if let Ok(mut s) = SINK.lock() {
        if let Some(mut sink) = s.take() {
            if let Some(w) = sink.events.as_mut() {
                let _ = w.flush();
            }
        }
    }
}
