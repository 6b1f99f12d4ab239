use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{RowSource, SparseMatrix, StoreError};
use crate::model::SparseRow;

pub const STORE_MAGIC: [u8; 8] = *b"TWCOOC\0\x01";
pub const STORE_VERSION: u32 = 1;

const HEADER_LEN: u64 = 8 + 4 + 8 + 8 + 4 + 4 + 8;
const RECORD_LEN: u64 = 4 + 4 + 8;
const FLAG_LOG1P: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreHeader {
    pub n: u64,
    pub total_tokens: u64,
    pub window: u32,
    pub log1p: bool,
    pub records: u64,
}

impl StoreHeader {
    fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&STORE_MAGIC)?;
        w.write_u32::<LittleEndian>(STORE_VERSION)?;
        w.write_u64::<LittleEndian>(self.n)?;
        w.write_u64::<LittleEndian>(self.total_tokens)?;
        w.write_u32::<LittleEndian>(self.window)?;
        w.write_u32::<LittleEndian>(if self.log1p { FLAG_LOG1P } else { 0 })?;
        w.write_u64::<LittleEndian>(self.records)
    }

    fn read<R: Read>(mut r: R) -> Result<Self, StoreError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if magic != STORE_MAGIC {
            return Err(StoreError::Format("not a co-occurrence store".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != STORE_VERSION {
            return Err(StoreError::Format(format!(
                "unsupported store version {version}"
            )));
        }
        let n = r.read_u64::<LittleEndian>()?;
        let total_tokens = r.read_u64::<LittleEndian>()?;
        let window = r.read_u32::<LittleEndian>()?;
        let flags = r.read_u32::<LittleEndian>()?;
        let records = r.read_u64::<LittleEndian>()?;
        if n > u32::MAX as u64 + 1 {
            return Err(StoreError::Format(format!("n = {n} exceeds 32-bit ids")));
        }
        Ok(Self {
            n,
            total_tokens,
            window,
            log1p: flags & FLAG_LOG1P != 0,
            records,
        })
    }
}

type Record = (u32, u32, f64);

fn decode(buf: &[u8]) -> Record {
    (
        LittleEndian::read_u32(&buf[0..4]),
        LittleEndian::read_u32(&buf[4..8]),
        LittleEndian::read_f64(&buf[8..16]),
    )
}

/// Append-only writer. Records must arrive strictly sorted by `(row, col)`.
pub struct StoreWriter {
    out: BufWriter<File>,
    header: StoreHeader,
    last: Option<(u32, u32)>,
}

impl StoreWriter {
    pub fn create(
        path: &Path,
        n: u64,
        window: u32,
        total_tokens: u64,
        log1p: bool,
    ) -> Result<Self, StoreError> {
        let header = StoreHeader {
            n,
            total_tokens,
            window,
            log1p,
            records: 0,
        };
        let mut out = BufWriter::new(File::create(path)?);
        header.write(&mut out)?;
        Ok(Self {
            out,
            header,
            last: None,
        })
    }

    pub fn push(&mut self, row: u32, col: u32, weight: f64) -> Result<(), StoreError> {
        if row as u64 >= self.header.n || col as u64 >= self.header.n {
            return Err(StoreError::RowOutOfRange(row.max(col) as usize));
        }
        if self.last.is_some_and(|l| l >= (row, col)) {
            return Err(StoreError::Unsorted { row, col });
        }
        if !(weight.is_finite() && weight > 0.0) {
            return Err(StoreError::Weight { row, col, weight });
        }
        self.last = Some((row, col));
        self.out.write_u32::<LittleEndian>(row)?;
        self.out.write_u32::<LittleEndian>(col)?;
        self.out.write_f64::<LittleEndian>(weight)?;
        self.header.records += 1;
        Ok(())
    }

    pub fn set_total_tokens(&mut self, total: u64) {
        self.header.total_tokens = total;
    }

    /// Rewrites the header with the final record count and syncs.
    pub fn finish(mut self) -> Result<StoreHeader, StoreError> {
        self.out.flush()?;
        let mut file = self.out.into_inner().map_err(|e| e.into_error())?;
        file.seek(SeekFrom::Start(0))?;
        self.header.write(&mut file)?;
        file.sync_all()?;
        Ok(self.header)
    }
}

/// An opened store: header plus the per-row record offset index.
#[derive(Debug, Clone)]
pub struct CooccurrenceStore {
    path: PathBuf,
    header: StoreHeader,
    /// `offsets[i]..offsets[i + 1]` is row `i`'s record range.
    offsets: Vec<u64>,
}

impl CooccurrenceStore {
    /// Opens and validates a store, building the row offset index in one scan.
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let file = File::open(path)?;
        let len = file.metadata()?.len();
        let mut r = BufReader::new(file);
        let header = StoreHeader::read(&mut r)?;
        if len != HEADER_LEN + header.records * RECORD_LEN {
            return Err(StoreError::Format(format!(
                "file length {len} does not match {} records",
                header.records
            )));
        }
        let n = header.n as usize;
        let mut offsets = vec![0u64; n + 1];
        let mut last: Option<(u32, u32)> = None;
        let mut buf = [0u8; RECORD_LEN as usize];
        for _ in 0..header.records {
            r.read_exact(&mut buf)?;
            let (row, col, w) = decode(&buf);
            if row as usize >= n || col as usize >= n {
                return Err(StoreError::RowOutOfRange(row.max(col) as usize));
            }
            if last.is_some_and(|l| l >= (row, col)) {
                return Err(StoreError::Unsorted { row, col });
            }
            if !(w.is_finite() && w > 0.0) {
                return Err(StoreError::Weight {
                    row,
                    col,
                    weight: w,
                });
            }
            last = Some((row, col));
            offsets[row as usize + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        Ok(Self {
            path: path.to_path_buf(),
            header,
            offsets,
        })
    }

    pub fn header(&self) -> &StoreHeader {
        &self.header
    }

    pub fn n(&self) -> usize {
        self.header.n as usize
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Number of stored records in row `i`.
    pub fn row_len(&self, i: usize) -> u64 {
        self.offsets[i + 1] - self.offsets[i]
    }

    /// Sequential reader with its own file handle and a fresh cursor.
    pub fn reader(&self) -> Result<StoreReader, StoreError> {
        Ok(StoreReader {
            file: File::open(&self.path)?,
            n: self.n(),
            records: self.header.records,
            offsets: self.offsets.clone(),
            cursor: RowCursor::default(),
            last_row: None,
        })
    }

    /// Keyed lookup of a single row through the offset index.
    pub fn fetch_row_random(&self, i: usize) -> Result<SparseRow, StoreError> {
        if i >= self.n() {
            return Err(StoreError::RowOutOfRange(i));
        }
        let mut file = File::open(&self.path)?;
        let (start, end) = (self.offsets[i], self.offsets[i + 1]);
        file.seek(SeekFrom::Start(HEADER_LEN + start * RECORD_LEN))?;
        let mut buf = vec![0u8; ((end - start) * RECORD_LEN) as usize];
        file.read_exact(&mut buf)?;
        let mut row = SparseRow::empty(i);
        for rec in buf.chunks_exact(RECORD_LEN as usize) {
            let (_, c, w) = decode(rec);
            row.cols.push(c);
            row.weights.push(w);
        }
        Ok(row)
    }

    /// Reads every record into memory.
    pub fn load(&self) -> Result<SparseMatrix, StoreError> {
        let mut r = BufReader::new(File::open(&self.path)?);
        r.seek(SeekFrom::Start(HEADER_LEN))?;
        let mut buf = [0u8; RECORD_LEN as usize];
        let mut triplets = Vec::with_capacity(self.header.records as usize);
        for _ in 0..self.header.records {
            r.read_exact(&mut buf)?;
            triplets.push(decode(&buf));
        }
        let mut m = SparseMatrix::from_sorted_triplets(self.n(), triplets)?;
        m.window = self.header.window;
        m.total_tokens = self.header.total_tokens;
        m.log1p = self.header.log1p;
        Ok(m)
    }

    /// Integrity check that `X_ij == X_ji` for every stored cell.
    pub fn verify_symmetric(&self) -> Result<bool, StoreError> {
        Ok(self.load()?.is_symmetric())
    }
}

/// Monotone position in the physical record sequence.
#[derive(Debug, Clone, Default)]
pub struct RowCursor {
    /// Next record index not yet read from disk.
    next_record: u64,
    buffer: VecDeque<Record>,
    /// Records read from disk since creation.
    pub records_read: u64,
    /// Bounded reads issued since creation.
    pub probes: u64,
    /// Largest single probe, in records.
    pub max_probe: u64,
}

impl RowCursor {
    /// Index of the first record not yet handed out.
    pub fn position(&self) -> u64 {
        self.next_record - self.buffer.len() as u64
    }
}

/// Sequential row reader over a [`CooccurrenceStore`].
pub struct StoreReader {
    file: File,
    n: usize,
    records: u64,
    offsets: Vec<u64>,
    cursor: RowCursor,
    last_row: Option<SparseRow>,
}

impl StoreReader {
    pub fn cursor(&self) -> &RowCursor {
        &self.cursor
    }

    fn probe(&mut self) -> Result<(), StoreError> {
        let count = (self.records - self.cursor.next_record).min(self.n.max(1) as u64);
        self.file.seek(SeekFrom::Start(
            HEADER_LEN + self.cursor.next_record * RECORD_LEN,
        ))?;
        let mut buf = vec![0u8; (count * RECORD_LEN) as usize];
        self.file.read_exact(&mut buf)?;
        self.cursor
            .buffer
            .extend(buf.chunks_exact(RECORD_LEN as usize).map(decode));
        self.cursor.next_record += count;
        self.cursor.records_read += count;
        self.cursor.probes += 1;
        self.cursor.max_probe = self.cursor.max_probe.max(count);
        Ok(())
    }

    /// Returns row `i`, reading forward from the cursor in probes of at
    /// most `n` records. Rows must be requested in non-decreasing order.
    pub fn fetch_row(&mut self, i: usize) -> Result<SparseRow, StoreError> {
        if i >= self.n {
            return Err(StoreError::RowOutOfRange(i));
        }
        if let Some(prev) = &self.last_row {
            if i < prev.index {
                return Err(StoreError::StaleCursor {
                    requested: i,
                    last: prev.index,
                });
            }
            if i == prev.index {
                return Ok(prev.clone());
            }
        }
        let c = &mut self.cursor;
        while c.buffer.front().is_some_and(|r| (r.0 as usize) < i) {
            c.buffer.pop_front();
        }
        if c.buffer.is_empty() && c.next_record < self.offsets[i] {
            c.next_record = self.offsets[i];
        }
        let mut row = SparseRow::empty(i);
        loop {
            if self.cursor.buffer.is_empty() {
                if self.cursor.next_record >= self.records {
                    break;
                }
                self.probe()?;
            }
            match self.cursor.buffer.front() {
                Some(&(r, col, w)) if r as usize == i => {
                    row.cols.push(col);
                    row.weights.push(w);
                    self.cursor.buffer.pop_front();
                }
                _ => break,
            }
        }
        self.last_row = Some(row.clone());
        Ok(row)
    }
}

impl RowSource for StoreReader {
    fn n(&self) -> usize {
        self.n
    }

    fn rewind(&mut self) -> Result<(), StoreError> {
        self.cursor.next_record = 0;
        self.cursor.buffer.clear();
        self.last_row = None;
        Ok(())
    }

    fn next_row(&mut self, i: usize) -> Result<SparseRow, StoreError> {
        self.fetch_row(i)
    }
}

/// Writes a log1p-transformed copy of `src` to `dst`; `dst` may equal `src`.
pub fn apply_log1p_file(src: &Path, dst: &Path) -> Result<StoreHeader, StoreError> {
    let store = CooccurrenceStore::open(src)?;
    let h = *store.header();
    if h.log1p {
        return Err(StoreError::AlreadyTransformed);
    }
    let dir = dst
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    let mut writer = StoreWriter::create(tmp.path(), h.n, h.window, h.total_tokens, true)?;
    let mut r = BufReader::new(File::open(src)?);
    r.seek(SeekFrom::Start(HEADER_LEN))?;
    let mut buf = [0u8; RECORD_LEN as usize];
    for _ in 0..h.records {
        r.read_exact(&mut buf)?;
        let (row, col, w) = decode(&buf);
        writer.push(row, col, w.ln_1p())?;
    }
    let header = writer.finish()?;
    tmp.persist(dst).map_err(|e| StoreError::Io(e.error))?;
    Ok(header)
}
