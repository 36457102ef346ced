//! File formats: interaction logs (TSV), embedding tables (binary and text),
//! item category catalogs, and the shared binary reader/writer plumbing used
//! by the model and index files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{
    CategoryId, EmbeddingTable, EventType, GroundTruth, Interaction, InteractionLog, ItemId,
    UserId,
};

/// Interaction file encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogFormat {
    Tsv,
}

const UEMB_MAGIC: &[u8; 4] = b"UEMB";
const UEMB_VERSION: u32 = 1;
const META_MAGIC: &[u8; 4] = b"META";
const UEMB_TEXT_HEADER: &str = "uemb-text";

/// Parses `user<TAB>item<TAB>category<TAB>timestamp<TAB>event` records.
/// Blank lines and lines starting with `#` are skipped; line numbers in
/// errors refer to physical lines.
pub fn ingest_interactions(path: &Path, format: LogFormat) -> Result<InteractionLog> {
    let LogFormat::Tsv = format;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut interactions = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        interactions.push(parse_interaction_line(trimmed, line_no)?);
    }
    Ok(InteractionLog::from_interactions(interactions))
}

fn parse_interaction_line(line: &str, line_no: usize) -> Result<Interaction> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 5 {
        return Err(Error::Parse {
            line: line_no,
            message: format!("expected 5 tab-separated fields, found {}", fields.len()),
        });
    }
    let parse_u64 = |field: &str, name: &str| -> Result<u64> {
        field.parse::<u64>().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("invalid {name} '{field}'"),
        })
    };
    let user = UserId(parse_u64(fields[0], "user id")?);
    let item = ItemId(parse_u64(fields[1], "item id")?);
    let category = CategoryId(parse_u64(fields[2], "category id")?);
    let timestamp = parse_u64(fields[3], "timestamp")?;
    let event = EventType::parse(fields[4]).ok_or_else(|| {
        Error::Validation(format!("line {line_no}: unknown event token '{}'", fields[4]))
    })?;
    Ok(Interaction {
        user,
        item,
        category,
        timestamp,
        event,
    })
}

/// Writes a log in the TSV record format, optionally preceded by `#` comment
/// lines (one per entry; leading `# ` is added).
pub fn save_interactions(log: &InteractionLog, path: &Path, comments: &[String]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |s: &str| w.write_all(s.as_bytes()).map_err(|e| Error::io(path, e));
    for comment in comments {
        write(&format!("# {comment}\n"))?;
    }
    for i in log.interactions() {
        write(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            i.user, i.item, i.category, i.timestamp, i.event
        ))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Saves a table in the binary format: magic `UEMB`, u32 version, u64 count,
/// u32 dim, then per-record u64 id followed by dim little-endian f32 values,
/// records in id-ascending order.
pub fn save_embeddings(table: &EmbeddingTable, path: &Path) -> Result<()> {
    save_embeddings_with_meta(table, path, None)
}

/// Binary save with an optional trailing `META` block carrying the config
/// hash of the producing run. Readers accept files with or without it.
pub fn save_embeddings_with_meta(
    table: &EmbeddingTable,
    path: &Path,
    config_hash: Option<u64>,
) -> Result<()> {
    let mut w = BinWriter::create(path)?;
    w.bytes(UEMB_MAGIC)?;
    w.u32(UEMB_VERSION)?;
    w.u64(table.len() as u64)?;
    w.u32(table.dim() as u32)?;
    for (id, vector) in table.iter() {
        w.u64(id.0)?;
        for &v in vector {
            w.f32(v)?;
        }
    }
    if let Some(hash) = config_hash {
        w.bytes(META_MAGIC)?;
        w.u64(hash)?;
    }
    w.flush()
}

/// Loads a table, detecting the binary format by its magic bytes and falling
/// back to the text format otherwise.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    load_embeddings_with_meta(path).map(|(table, _)| table)
}

/// Load variant that also surfaces the `META` config hash if present.
pub fn load_embeddings_with_meta(path: &Path) -> Result<(EmbeddingTable, Option<u64>)> {
    let mut probe = [0u8; 4];
    {
        let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
        let n = file.read(&mut probe).map_err(|e| Error::io(path, e))?;
        if n < 4 {
            return Err(Error::Format(format!(
                "{}: too short to be an embedding file",
                path.display()
            )));
        }
    }
    if &probe == UEMB_MAGIC {
        load_embeddings_binary(path)
    } else {
        load_embeddings_text(path).map(|t| (t, None))
    }
}

fn load_embeddings_binary(path: &Path) -> Result<(EmbeddingTable, Option<u64>)> {
    let mut r = BinReader::open(path)?;
    r.expect_magic(UEMB_MAGIC)?;
    let version = r.u32()?;
    if version != UEMB_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported embedding file version {version}",
            path.display()
        )));
    }
    let count = r.u64()?;
    let dim = r.u32()? as usize;
    let mut table = EmbeddingTable::new(dim)?;
    for _ in 0..count {
        let id = ItemId(r.u64()?);
        let mut vector = Vec::with_capacity(dim);
        for _ in 0..dim {
            vector.push(r.f32()?);
        }
        table.insert(id, vector)?;
    }
    let meta = match r.remaining()? {
        0 => None,
        12 => {
            let mut magic = [0u8; 4];
            r.bytes(&mut magic)?;
            if &magic != META_MAGIC {
                return Err(Error::Format(format!(
                    "{}: unrecognized trailer after embedding records",
                    path.display()
                )));
            }
            Some(r.u64()?)
        }
        n => {
            return Err(Error::Format(format!(
                "{}: {n} unexpected trailing bytes after embedding records",
                path.display()
            )))
        }
    };
    Ok((table, meta))
}

/// Saves a table in the text format: a `uemb-text<TAB>1<TAB>count<TAB>dim`
/// header line, then `id<TAB>v0<TAB>v1...` rows. Float components use the
/// shortest representation that parses back to the identical value, so the
/// text round trip is also lossless.
pub fn save_embeddings_text(table: &EmbeddingTable, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |s: &str| w.write_all(s.as_bytes()).map_err(|e| Error::io(path, e));
    write(&format!(
        "{UEMB_TEXT_HEADER}\t{UEMB_VERSION}\t{}\t{}\n",
        table.len(),
        table.dim()
    ))?;
    for (id, vector) in table.iter() {
        let mut row = id.0.to_string();
        for &v in vector {
            row.push('\t');
            row.push_str(&v.to_string());
        }
        row.push('\n');
        write(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn load_embeddings_text(path: &Path) -> Result<EmbeddingTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| {
        Error::Format(format!("{}: empty embedding text file", path.display()))
    })?;
    let header = header.map_err(|e| Error::io(path, e))?;
    let head: Vec<&str> = header.trim_end().split('\t').collect();
    if head.len() != 4 || head[0] != UEMB_TEXT_HEADER {
        return Err(Error::Format(format!(
            "{}: missing '{UEMB_TEXT_HEADER}' header",
            path.display()
        )));
    }
    if head[1].parse::<u32>().ok() != Some(UEMB_VERSION) {
        return Err(Error::Format(format!(
            "{}: unsupported embedding text version '{}'",
            path.display(),
            head[1]
        )));
    }
    let count: usize = head[2].parse().map_err(|_| {
        Error::Format(format!("{}: invalid count '{}'", path.display(), head[2]))
    })?;
    let dim: usize = head[3].parse().map_err(|_| {
        Error::Format(format!("{}: invalid dim '{}'", path.display(), head[3]))
    })?;
    let mut table = EmbeddingTable::new(dim)?;
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != dim + 1 {
            return Err(Error::Format(format!(
                "line {line_no}: expected {} fields for dim {dim}, found {}",
                dim + 1,
                fields.len()
            )));
        }
        let id = ItemId(fields[0].parse::<u64>().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("invalid item id '{}'", fields[0]),
        })?);
        let mut vector = Vec::with_capacity(dim);
        for field in &fields[1..] {
            vector.push(field.parse::<f32>().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("invalid float '{field}'"),
            })?);
        }
        table.insert(id, vector)?;
    }
    if table.len() != count {
        return Err(Error::Format(format!(
            "{}: header declares {count} records, found {}",
            path.display(),
            table.len()
        )));
    }
    Ok(table)
}

/// Writes an `item<TAB>category` catalog.
pub fn save_item_categories(
    catalog: &BTreeMap<ItemId, CategoryId>,
    path: &Path,
    comments: &[String],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |s: &str| w.write_all(s.as_bytes()).map_err(|e| Error::io(path, e));
    for comment in comments {
        write(&format!("# {comment}\n"))?;
    }
    for (item, category) in catalog {
        write(&format!("{item}\t{category}\n"))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads an `item<TAB>category` catalog; comments and blanks are skipped.
pub fn load_item_categories(path: &Path) -> Result<BTreeMap<ItemId, CategoryId>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut catalog = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 2 tab-separated fields, found {}", fields.len()),
            });
        }
        let item = ItemId(fields[0].parse::<u64>().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("invalid item id '{}'", fields[0]),
        })?);
        let category = CategoryId(fields[1].parse::<u64>().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("invalid category id '{}'", fields[1]),
        })?);
        if catalog.insert(item, category).is_some() {
            return Err(Error::Validation(format!(
                "line {line_no}: duplicate item id {item}"
            )));
        }
    }
    Ok(catalog)
}

/// Writes a `user<TAB>item` ground-truth table, one row per held-out item.
pub fn save_truth(truth: &GroundTruth, path: &Path, comments: &[String]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |s: &str| w.write_all(s.as_bytes()).map_err(|e| Error::io(path, e));
    for comment in comments {
        write(&format!("# {comment}\n"))?;
    }
    for (user, items) in truth {
        for item in items {
            write(&format!("{user}\t{item}\n"))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a `user<TAB>item` ground-truth table; comments and blanks are
/// skipped, duplicate rows are rejected.
pub fn load_truth(path: &Path) -> Result<GroundTruth> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut truth = GroundTruth::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 2 tab-separated fields, found {}", fields.len()),
            });
        }
        let user = UserId(fields[0].parse::<u64>().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("invalid user id '{}'", fields[0]),
        })?);
        let item = ItemId(fields[1].parse::<u64>().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("invalid item id '{}'", fields[1]),
        })?);
        if !truth.entry(user).or_default().insert(item) {
            return Err(Error::Validation(format!(
                "line {line_no}: duplicate truth row {user}\t{item}"
            )));
        }
    }
    Ok(truth)
}

/// Little-endian binary writer that tracks a CRC32 of everything written.
pub(crate) struct BinWriter {
    w: BufWriter<File>,
    path: std::path::PathBuf,
    crc: crc32fast::Hasher,
}

impl BinWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(BinWriter {
            w: BufWriter::new(file),
            path: path.to_path_buf(),
            crc: crc32fast::Hasher::new(),
        })
    }

    pub fn bytes(&mut self, bytes: &[u8]) -> Result<()> {
        self.crc.update(bytes);
        self.w
            .write_all(bytes)
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f32(&mut self, v: f32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    /// CRC32 of all bytes written so far.
    pub fn crc(&self) -> u32 {
        self.crc.clone().finalize()
    }

    pub fn flush(&mut self) -> Result<()> {
        self.w.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Little-endian binary reader; mirrors `BinWriter`, including the CRC32.
pub(crate) struct BinReader {
    bytes: Vec<u8>,
    pos: usize,
    path: std::path::PathBuf,
}

impl BinReader {
    pub fn open(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(BinReader {
            bytes,
            pos: 0,
            path: path.to_path_buf(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Corruption(format!(
                "{}: unexpected end of file at byte {}",
                self.path.display(),
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub fn bytes(&mut self, out: &mut [u8]) -> Result<()> {
        let n = out.len();
        out.copy_from_slice(self.take(n)?);
        Ok(())
    }

    pub fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let mut found = [0u8; 4];
        self.bytes(&mut found)?;
        if &found != magic {
            return Err(Error::Format(format!(
                "{}: bad magic bytes (expected {:?})",
                self.path.display(),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Bytes left unread.
    pub fn remaining(&self) -> Result<usize> {
        Ok(self.bytes.len() - self.pos)
    }

    /// The full file contents, independent of the read position. Used by
    /// formats that verify a trailing checksum before parsing anything.
    pub fn peek_all(&self) -> &[u8] {
        &self.bytes
    }
}
