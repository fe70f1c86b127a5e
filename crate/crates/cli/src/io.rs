use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use tokadapt::corpus::{read_documents, Document};

use crate::error::{CliError, CliResult, WithPath};

/// On-disk layout of a corpus.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    /// One JSON document per line: `{"id", "text", "source"}`.
    #[default]
    Jsonl,
    /// One document per non-blank line of UTF-8 text.
    Lines,
}

pub fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::File { path: path.into(), source: e.into() })
}

pub fn read_corpus(path: &Path, format: CorpusFormat) -> CliResult<Vec<Document>> {
    let reader = open(path)?;
    match format {
        CorpusFormat::Jsonl => read_documents(reader).at(path),
        CorpusFormat::Lines => read_lines_corpus(reader, path),
    }
}

fn read_lines_corpus<R: BufRead>(mut reader: R, path: &Path) -> CliResult<Vec<Document>> {
    let source = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut docs = Vec::new();
    let mut buf = Vec::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        if reader.read_until(b'\n', &mut buf)? == 0 {
            break;
        }
        line_no += 1;
        let text = std::str::from_utf8(&buf)
            .map_err(|e| tokadapt::Error::Data {
                line: line_no,
                msg: format!("invalid UTF-8 at byte offset {}", e.valid_up_to()),
            })
            .at(path)?;
        let text = text.trim_end_matches(['\n', '\r']);
        if !text.trim().is_empty() {
            docs.push(Document::new(format!("{source}:{line_no}"), text, source.clone()));
        }
    }
    Ok(docs)
}

pub fn read_texts(path: &Path, format: CorpusFormat) -> CliResult<Vec<String>> {
    Ok(read_corpus(path, format)?.into_iter().map(|d| d.text).collect())
}

pub fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| CliError::File { path: path.into(), source: e.into() })
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let bytes = fs::read(path).map_err(|e| CliError::File { path: path.into(), source: e.into() })?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::File { path: path.into(), source: e.into() })
}

/// Writer for an optional output path; `None` means stdout.
pub fn output(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

pub fn input(path: Option<&Path>) -> CliResult<Box<dyn BufRead>> {
    Ok(match path {
        Some(p) => Box::new(open(p)?),
        None => Box::new(BufReader::new(io::stdin().lock())),
    })
}
