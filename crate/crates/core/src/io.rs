//! On-disk formats: JSON-lines asset metadata, the binary embedding table and
//! canonical JSON documents (manifests, plans, reports).
//!
//! Embedding table layout:
//!
//! ```text
//! {"count":N,"dim":D,"dtype":"f32le","ids":[...]}\n
//! N*D little-endian f32, row-major, row i belongs to ids[i]
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{AssetRecord, EmbeddingTable, ReplayManifest, Split};

const DTYPE: &str = "f32le";

#[derive(Deserialize)]
struct RawRecord {
    asset_id: Option<String>,
    class_label: Option<String>,
    captions: Option<Vec<String>>,
    #[serde(default)]
    split: Split,
}

/// Parses JSON-lines metadata. Blank lines are ignored; line numbers in
/// errors are 1-based.
pub fn parse_metadata<R: BufRead>(reader: R) -> Result<Vec<AssetRecord>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let missing = |field| Error::MissingField {
            line: line_no,
            field,
        };
        let record = AssetRecord {
            asset_id: raw.asset_id.ok_or_else(|| missing("asset_id"))?,
            class_label: raw.class_label.ok_or_else(|| missing("class_label"))?,
            captions: raw.captions.ok_or_else(|| missing("captions"))?,
            split: raw.split,
        };
        record.validate()?;
        out.push(record);
    }
    Ok(out)
}

pub fn load_metadata(path: impl AsRef<Path>) -> Result<Vec<AssetRecord>> {
    parse_metadata(BufReader::new(File::open(path)?))
}

/// Writes one canonical JSON object per line.
pub fn write_metadata<'a, W, I>(mut writer: W, records: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a AssetRecord>,
{
    for record in records {
        let value = serde_json::to_value(record).map_err(|e| Error::Schema(e.to_string()))?;
        serde_json::to_writer(&mut writer, &value).map_err(|e| Error::Schema(e.to_string()))?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn save_metadata<'a, I>(path: impl AsRef<Path>, records: I) -> Result<()>
where
    I: IntoIterator<Item = &'a AssetRecord>,
{
    write_metadata(BufWriter::new(File::create(path)?), records)
}

#[derive(Serialize, Deserialize)]
struct TableHeader {
    count: usize,
    dim: usize,
    dtype: String,
    ids: Vec<String>,
}

pub fn read_embeddings<R: Read>(reader: R) -> Result<EmbeddingTable> {
    let mut reader = BufReader::new(reader);
    let mut header_line = Vec::new();
    reader.read_until(b'\n', &mut header_line)?;
    if header_line.last() != Some(&b'\n') {
        return Err(Error::HeaderMismatch(
            "header is not newline-terminated".into(),
        ));
    }
    let header: TableHeader =
        serde_json::from_slice(&header_line).map_err(|e| Error::HeaderMismatch(e.to_string()))?;
    if header.dtype != DTYPE {
        return Err(Error::HeaderMismatch(format!(
            "unsupported dtype `{}`",
            header.dtype
        )));
    }
    if header.ids.len() != header.count {
        return Err(Error::HeaderMismatch(format!(
            "count is {} but {} ids are listed",
            header.count,
            header.ids.len()
        )));
    }
    if header.dim == 0 && header.count > 0 {
        return Err(Error::HeaderMismatch("dim must be positive".into()));
    }

    let expected = header
        .count
        .checked_mul(header.dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::HeaderMismatch("table size overflows".into()))?;
    let mut body = Vec::with_capacity(expected);
    reader.read_to_end(&mut body)?;
    if body.len() < expected {
        return Err(Error::TruncatedBody {
            expected,
            found: body.len(),
        });
    }
    if body.len() > expected {
        return Err(Error::HeaderMismatch(format!(
            "{} trailing bytes after body",
            body.len() - expected
        )));
    }

    let mut table = EmbeddingTable::new(header.dim);
    let mut row = vec![0f32; header.dim];
    for (id, chunk) in header
        .ids
        .into_iter()
        .zip(body.chunks_exact(header.dim.max(1) * 4))
    {
        for (dst, bytes) in row.iter_mut().zip(chunk.chunks_exact(4)) {
            *dst = f32::from_le_bytes(bytes.try_into().expect("chunk of 4"));
        }
        table.insert(id, &row)?;
    }
    Ok(table)
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    read_embeddings(File::open(path)?)
}

pub fn write_embeddings<W: Write>(mut writer: W, table: &EmbeddingTable) -> Result<()> {
    let header = TableHeader {
        count: table.len(),
        dim: table.dim(),
        dtype: DTYPE.to_string(),
        ids: table.ids().to_vec(),
    };
    serde_json::to_writer(&mut writer, &header).map_err(|e| Error::Schema(e.to_string()))?;
    writer.write_all(b"\n")?;
    for x in table.as_slice() {
        writer.write_all(&x.to_le_bytes())?;
    }
    writer.flush()?;
    Ok(())
}

pub fn save_embeddings(path: impl AsRef<Path>, table: &EmbeddingTable) -> Result<()> {
    write_embeddings(BufWriter::new(File::create(path)?), table)
}

/// Serializes with object keys in sorted order, pretty-printed, trailing newline.
/// Equal values always produce identical bytes.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json::Value keeps objects in a BTreeMap, which gives the ordering.
    let value = serde_json::to_value(value).map_err(|e| Error::Schema(e.to_string()))?;
    let mut text =
        serde_json::to_string_pretty(&value).map_err(|e| Error::Schema(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

pub fn save_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    std::fs::write(path, to_canonical_json(value)?)?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Schema(e.to_string()))
}

pub fn save_manifest(manifest: &ReplayManifest, path: impl AsRef<Path>) -> Result<()> {
    save_json(path, manifest)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<ReplayManifest> {
    load_json(path)
}

/// Lowercase hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let mut file = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}
