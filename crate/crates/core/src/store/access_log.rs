//! Size-rolled plain-text access log in combined-log style.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::AuditRecord;

pub const ACCESS_LOG_MAX_BYTES: u64 = 64 * 1024 * 1024;
pub const ACCESS_LOG_KEEP: usize = 10;

/// `remote - subject [timestamp] "METHOD path" status bytes latency_us`
pub fn format_access_line(r: &AuditRecord) -> String {
    format!(
        "{} - {} [{}] \"{} {}\" {} {} {}\n",
        sanitize(&r.remote),
        sanitize(&r.subject),
        r.timestamp.format("%d/%b/%Y:%H:%M:%S %z"),
        sanitize(&r.method),
        r.path.replace('\\', "\\\\").replace('"', "\\\"").replace(['\n', '\r'], " "),
        r.status,
        r.bytes,
        r.latency_micros
    )
}

fn sanitize(s: &str) -> String {
    if s.is_empty() {
        return "-".into();
    }
    s.chars()
        .map(|c| if c.is_whitespace() || c == '"' { '_' } else { c })
        .collect()
}

pub struct RollingLog {
    dir: PathBuf,
    name: String,
    max_bytes: u64,
    keep: usize,
    out: BufWriter<File>,
    size: u64,
}

impl RollingLog {
    pub fn open(dir: impl AsRef<Path>, name: &str) -> io::Result<Self> {
        Self::with_limits(dir, name, ACCESS_LOG_MAX_BYTES, ACCESS_LOG_KEEP)
    }

    pub fn with_limits(
        dir: impl AsRef<Path>,
        name: &str,
        max_bytes: u64,
        keep: usize,
    ) -> io::Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let path = dir.join(name);
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        let size = file.metadata()?.len();
        Ok(RollingLog {
            dir,
            name: name.to_string(),
            max_bytes,
            keep: keep.max(1),
            out: BufWriter::new(file),
            size,
        })
    }

    pub fn current_path(&self) -> PathBuf {
        self.dir.join(&self.name)
    }

    /// Paths of the live file and every rolled file that exists.
    pub fn all_paths(&self) -> Vec<PathBuf> {
        let mut v = vec![self.current_path()];
        for i in 1..=self.keep {
            let p = self.rolled(i);
            if p.exists() {
                v.push(p);
            }
        }
        v
    }

    fn rolled(&self, i: usize) -> PathBuf {
        self.dir.join(format!("{}.{}", self.name, i))
    }

    pub fn write_line(&mut self, line: &str) -> io::Result<()> {
        if self.size > 0 && self.size + line.len() as u64 > self.max_bytes {
            self.roll()?;
        }
        self.out.write_all(line.as_bytes())?;
        self.size += line.len() as u64;
        Ok(())
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }

    fn roll(&mut self) -> io::Result<()> {
        self.out.flush()?;
        let oldest = self.rolled(self.keep);
        if oldest.exists() {
            fs::remove_file(&oldest)?;
        }
        for i in (1..self.keep).rev() {
            let from = self.rolled(i);
            if from.exists() {
                fs::rename(&from, self.rolled(i + 1))?;
            }
        }
        fs::rename(self.current_path(), self.rolled(1))?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.current_path())?;
        self.out = BufWriter::new(file);
        self.size = 0;
        Ok(())
    }
}
