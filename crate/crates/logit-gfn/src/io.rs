//! Output files. Every write goes to a temporary file in the target
//! directory and is renamed into place, so readers never see a partial file.

use std::io::Write;
use std::path::{Path, PathBuf};

use tempfile::NamedTempFile;

#[derive(Debug, thiserror::Error)]
#[error("{}: {source}", path.display())]
pub struct IoError {
    pub path: PathBuf,
    #[source]
    pub source: std::io::Error,
}

fn at(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError { path: path.to_owned(), source }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(at(dir))?;
    let mut tmp = temp_in(dir).map_err(at(path))?;
    tmp.write_all(bytes).map_err(at(path))?;
    tmp.as_file().sync_all().map_err(at(path))?;
    tmp.persist(path).map_err(|e| IoError { path: path.to_owned(), source: e.error })?;
    Ok(())
}

/// Temporary files default to owner-only access; outputs get the usual
/// umask-governed mode instead.
#[cfg(unix)]
fn temp_in(dir: &Path) -> std::io::Result<NamedTempFile> {
    use std::os::unix::fs::PermissionsExt;
    tempfile::Builder::new().permissions(std::fs::Permissions::from_mode(0o666)).tempfile_in(dir)
}

#[cfg(not(unix))]
fn temp_in(dir: &Path) -> std::io::Result<NamedTempFile> {
    NamedTempFile::new_in(dir)
}

/// A line-oriented file that is rewritten atomically after every append, so
/// it always ends on a complete line.
#[derive(Debug)]
pub struct LineLog {
    path: PathBuf,
    content: Vec<u8>,
}

impl LineLog {
    /// Starts an empty file at `path`, replacing any previous one.
    pub fn create(path: PathBuf) -> Result<Self, IoError> {
        write_atomic(&path, b"")?;
        Ok(LineLog { path, content: Vec::new() })
    }

    /// Starts with a header line.
    pub fn with_header(path: PathBuf, header: &str) -> Result<Self, IoError> {
        let mut log = LineLog { path, content: Vec::new() };
        log.append(header)?;
        Ok(log)
    }

    pub fn append(&mut self, line: &str) -> Result<(), IoError> {
        self.content.extend_from_slice(line.as_bytes());
        self.content.push(b'\n');
        write_atomic(&self.path, &self.content)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Renders rows as CSV, quoting fields when needed.
pub fn csv_bytes<I, R>(header: &[&str], rows: I) -> Vec<u8>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    if !header.is_empty() {
        w.write_record(header).expect("writing to memory");
    }
    for row in rows {
        w.write_record(row).expect("writing to memory");
    }
    w.into_inner().expect("writing to memory")
}

/// One CSV record as a line without the terminator.
pub fn csv_line<R: IntoIterator<Item = String>>(fields: R) -> String {
    let bytes = csv_bytes(&[], [fields]);
    let text = String::from_utf8(bytes).expect("CSV of UTF-8 fields is UTF-8");
    text.trim_end_matches(['\n', '\r']).to_owned()
}
