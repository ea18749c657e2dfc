//! JSON, JSONL and digest helpers.

use std::fs;
use std::path::Path;

use cirlab_core::dataset::{Benchmark, BenchmarkHeader, BenchmarkQuery};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(CliError::io(path))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    fs::write(path, bytes).map_err(CliError::io(path))
}

/// One compact JSON document per line, newline-terminated.
pub fn to_jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, it).expect("records serialize");
        out.push(b'\n');
    }
    out
}

pub fn parse_jsonl<T: DeserializeOwned>(path: &Path, bytes: &[u8]) -> Result<Vec<T>> {
    let text = std::str::from_utf8(bytes).map_err(|e| CliError::format(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    parse_jsonl(path, &read_bytes(path)?)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_bytes(path, &to_jsonl(items))
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("values serialize");
    v.push(b'\n');
    v
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read_bytes(path)?).map_err(|e| CliError::format(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, &to_json_pretty(value))
}

/// Benchmark files hold the header on the first line and one query per
/// following line.
pub fn benchmark_to_jsonl(b: &Benchmark) -> Vec<u8> {
    let mut out = to_jsonl(std::slice::from_ref(&b.header));
    out.extend(to_jsonl(&b.queries));
    out
}

pub fn read_benchmark(path: &Path) -> Result<Benchmark> {
    let bytes = read_bytes(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| CliError::format(path, e))?;
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    let header: BenchmarkHeader =
        serde_json::from_str(first).map_err(|e| CliError::format(path, format!("header: {e}")))?;
    let queries: Vec<BenchmarkQuery> = parse_jsonl(path, rest.as_bytes())?;
    let b = Benchmark { header, queries };
    b.validate().map_err(|e| CliError::format(path, e))?;
    Ok(b)
}
