//! JSON Lines reading and atomic writing.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::marker::PhantomData;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Streaming reader yielding `(line_number, record)` pairs. Blank lines are skipped.
pub struct JsonLines<R, T> {
    reader: R,
    line: usize,
    buf: String,
    _marker: PhantomData<T>,
}

impl<R: BufRead, T: DeserializeOwned> JsonLines<R, T> {
    pub fn new(reader: R) -> Self {
        JsonLines {
            reader,
            line: 0,
            buf: String::new(),
            _marker: PhantomData,
        }
    }
}

impl<R: BufRead, T: DeserializeOwned> Iterator for JsonLines<R, T> {
    type Item = Result<(usize, T)>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            self.line += 1;
            match self.reader.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(source) => {
                    return Some(Err(Error::Json {
                        line: self.line,
                        source: serde_json::Error::io(source),
                    }))
                }
            }
            let text = self.buf.trim();
            if text.is_empty() {
                continue;
            }
            let line = self.line;
            return Some(
                serde_json::from_str(text)
                    .map(|v| (line, v))
                    .map_err(|source| Error::Json { line, source }),
            );
        }
    }
}

pub fn open<T: DeserializeOwned>(path: &Path) -> Result<JsonLines<BufReader<File>, T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(JsonLines::new(BufReader::new(file)))
}

/// Reads every record of a JSON Lines file, failing on the first bad line.
pub fn read_all<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    open(path)?.map(|r| r.map(|(_, v)| v)).collect()
}

/// Writes through a temp file in the destination directory, then renames into place.
pub fn write_atomic<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> std::io::Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut builder = tempfile::Builder::new();
    // Temp files default to 0600; outputs should look like ordinary files.
    #[cfg(unix)]
    builder.permissions(std::os::unix::fs::PermissionsExt::from_mode(0o644));
    let tmp = builder.tempfile_in(dir).map_err(|e| Error::io(dir, e))?;
    {
        let mut out = BufWriter::new(tmp.as_file());
        body(&mut out).map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_all<'a, T, I>(path: &Path, records: I) -> Result<()>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    write_atomic(path, |out| {
        for record in records {
            serde_json::to_writer(&mut *out, record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    })
}
