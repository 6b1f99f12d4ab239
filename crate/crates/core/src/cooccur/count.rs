use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{SparseMatrix, StoreError, StoreHeader, StoreWriter, Vocabulary};
use crate::par::{self, Parallelism};

/// Largest supported window. Counts are accumulated exactly as integer
/// multiples of `1 / lcm(1..=k)`, which must stay below 2^53.
pub const MAX_WINDOW: usize = 40;

/// A re-readable stream of sentences. Each shard makes its own pass.
pub trait SentenceSource: Sync {
    fn for_each_sentence(
        &self,
        f: &mut dyn FnMut(&str) -> Result<(), StoreError>,
    ) -> Result<(), StoreError>;
}

impl<S: AsRef<str> + Sync> SentenceSource for [S] {
    fn for_each_sentence(
        &self,
        f: &mut dyn FnMut(&str) -> Result<(), StoreError>,
    ) -> Result<(), StoreError> {
        self.iter().try_for_each(|s| f(s.as_ref()))
    }
}

impl<S: AsRef<str> + Sync> SentenceSource for Vec<S> {
    fn for_each_sentence(
        &self,
        f: &mut dyn FnMut(&str) -> Result<(), StoreError>,
    ) -> Result<(), StoreError> {
        self.as_slice().for_each_sentence(f)
    }
}

/// UTF-8 corpus file, one sentence per line.
#[derive(Debug, Clone)]
pub struct CorpusFile(pub PathBuf);

impl SentenceSource for CorpusFile {
    fn for_each_sentence(
        &self,
        f: &mut dyn FnMut(&str) -> Result<(), StoreError>,
    ) -> Result<(), StoreError> {
        let reader = BufReader::new(File::open(&self.0)?);
        for line in reader.lines() {
            f(&line?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CountConfig {
    pub window: usize,
    /// Row-range shards counted independently.
    pub shards: usize,
    /// Accumulator entries per shard before a sorted run is spilled to disk.
    pub spill_threshold: usize,
    pub parallelism: Parallelism,
}

impl Default for CountConfig {
    fn default() -> Self {
        Self {
            window: 10,
            shards: 1,
            spill_threshold: 1 << 22,
            parallelism: Parallelism::default(),
        }
    }
}

fn lcm_upto(k: usize) -> u64 {
    fn gcd(a: u64, b: u64) -> u64 {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    (1..=k as u64).fold(1, |acc, d| acc / gcd(acc, d) * d)
}

type Cell = (u32, u32, u128);

const RUN_RECORD: usize = 4 + 4 + 16;

fn write_run(cells: &[Cell]) -> Result<File, StoreError> {
    let mut file = tempfile::tempfile()?;
    {
        let mut w = BufWriter::new(&mut file);
        for &(r, c, u) in cells {
            w.write_u32::<LittleEndian>(r)?;
            w.write_u32::<LittleEndian>(c)?;
            w.write_u128::<LittleEndian>(u)?;
        }
        w.flush()?;
    }
    file.seek(SeekFrom::Start(0))?;
    Ok(file)
}

struct RunReader {
    inner: BufReader<File>,
}

impl RunReader {
    fn next_cell(&mut self) -> Result<Option<Cell>, StoreError> {
        let mut buf = [0u8; RUN_RECORD];
        match self.inner.read_exact(&mut buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        let mut s = &buf[..];
        Ok(Some((
            s.read_u32::<LittleEndian>()?,
            s.read_u32::<LittleEndian>()?,
            s.read_u128::<LittleEndian>()?,
        )))
    }
}

/// Sorted, merged output of one shard.
enum ShardOutput {
    Memory(Vec<Cell>),
    Runs(Vec<File>),
}

impl ShardOutput {
    fn drain(self, sink: &mut dyn FnMut(Cell) -> Result<(), StoreError>) -> Result<(), StoreError> {
        match self {
            ShardOutput::Memory(cells) => cells.into_iter().try_for_each(sink),
            ShardOutput::Runs(files) => {
                let mut readers: Vec<RunReader> = files
                    .into_iter()
                    .map(|f| RunReader {
                        inner: BufReader::new(f),
                    })
                    .collect();
                let mut heap = BinaryHeap::new();
                for (k, r) in readers.iter_mut().enumerate() {
                    if let Some((row, col, u)) = r.next_cell()? {
                        heap.push(Reverse((row, col, k, u)));
                    }
                }
                let mut pending: Option<Cell> = None;
                while let Some(Reverse((row, col, k, u))) = heap.pop() {
                    if let Some(next) = readers[k].next_cell()? {
                        heap.push(Reverse((next.0, next.1, k, next.2)));
                    }
                    match pending.as_mut() {
                        Some(p) if (p.0, p.1) == (row, col) => p.2 += u,
                        _ => {
                            if let Some(p) = pending.replace((row, col, u)) {
                                sink(p)?;
                            }
                        }
                    }
                }
                if let Some(p) = pending {
                    sink(p)?;
                }
                Ok(())
            }
        }
    }
}

fn sorted_cells(acc: &mut HashMap<(u32, u32), u128>) -> Vec<Cell> {
    let mut cells: Vec<Cell> = acc.drain().map(|((r, c), u)| (r, c, u)).collect();
    cells.sort_unstable_by_key(|&(r, c, _)| (r, c));
    cells
}

fn count_shard(
    corpus: &dyn SentenceSource,
    vocab: &Vocabulary,
    window: usize,
    lcm: u64,
    rows: Range<u32>,
    spill_threshold: usize,
) -> Result<(ShardOutput, u64), StoreError> {
    let mut acc: HashMap<(u32, u32), u128> = HashMap::new();
    let mut runs = Vec::new();
    let mut tokens_seen = 0u64;
    let mut ids: Vec<Option<u32>> = Vec::new();
    corpus.for_each_sentence(&mut |sentence| {
        ids.clear();
        ids.extend(sentence.split_whitespace().map(|t| vocab.id(t)));
        tokens_seen += ids.len() as u64;
        for a in 0..ids.len() {
            let Some(u) = ids[a] else { continue };
            for dist in 1..=window {
                let Some(&Some(v)) = ids.get(a + dist) else {
                    continue;
                };
                let units = (lcm / dist as u64) as u128;
                if rows.contains(&u) {
                    *acc.entry((u, v)).or_default() += units;
                }
                if rows.contains(&v) {
                    *acc.entry((v, u)).or_default() += units;
                }
            }
        }
        if acc.len() >= spill_threshold {
            runs.push(write_run(&sorted_cells(&mut acc))?);
        }
        Ok(())
    })?;
    let out = if runs.is_empty() {
        ShardOutput::Memory(sorted_cells(&mut acc))
    } else {
        if !acc.is_empty() {
            runs.push(write_run(&sorted_cells(&mut acc))?);
        }
        ShardOutput::Runs(runs)
    };
    Ok((out, tokens_seen))
}

fn run_shards(
    corpus: &dyn SentenceSource,
    vocab: &Vocabulary,
    cfg: &CountConfig,
    sink: &mut dyn FnMut(Cell) -> Result<(), StoreError>,
) -> Result<(u64, u64), StoreError> {
    if cfg.window == 0 || cfg.window > MAX_WINDOW {
        return Err(StoreError::Window(cfg.window));
    }
    let lcm = lcm_upto(cfg.window);
    let n = vocab.len();
    let ranges = par::partition(n, cfg.shards.max(1));
    let threshold = cfg.spill_threshold.max(1);
    let outputs = par::map_indexed(cfg.parallelism, ranges.len(), |s| {
        let r = &ranges[s];
        count_shard(
            corpus,
            vocab,
            cfg.window,
            lcm,
            r.start as u32..r.end as u32,
            threshold,
        )
    });
    let mut total_tokens = 0u64;
    for out in outputs {
        let (shard, tokens) = out?;
        total_tokens = tokens;
        shard.drain(sink)?;
    }
    if ranges.is_empty() {
        corpus.for_each_sentence(&mut |s| {
            total_tokens += s.split_whitespace().count() as u64;
            Ok(())
        })?;
    }
    Ok((total_tokens, lcm))
}

fn to_weight(units: u128, lcm: u64) -> f64 {
    units as f64 / lcm as f64
}

/// Counts distance-weighted co-occurrences into memory.
///
/// Each cell is accumulated exactly and rounded once, so the result does
/// not depend on sentence order or sharding.
pub fn count_cooccurrences(
    corpus: &dyn SentenceSource,
    vocab: &Vocabulary,
    cfg: &CountConfig,
) -> Result<SparseMatrix, StoreError> {
    let mut triplets = Vec::new();
    let (total_tokens, lcm) = run_shards(corpus, vocab, cfg, &mut |cell| {
        triplets.push(cell);
        Ok(())
    })?;
    let mut m = SparseMatrix::from_sorted_triplets(
        vocab.len(),
        triplets
            .into_iter()
            .map(|(r, c, u)| (r, c, to_weight(u, lcm))),
    )?;
    m.window = cfg.window as u32;
    m.total_tokens = total_tokens;
    Ok(m)
}

/// Counts directly into a store file without holding the matrix in memory.
pub fn count_to_store(
    corpus: &dyn SentenceSource,
    vocab: &Vocabulary,
    cfg: &CountConfig,
    out: &Path,
) -> Result<StoreHeader, StoreError> {
    if cfg.window == 0 || cfg.window > MAX_WINDOW {
        return Err(StoreError::Window(cfg.window));
    }
    let lcm = lcm_upto(cfg.window);
    let mut writer = StoreWriter::create(out, vocab.len() as u64, cfg.window as u32, 0, false)?;
    let (total_tokens, _) = run_shards(corpus, vocab, cfg, &mut |(r, c, u)| {
        writer.push(r, c, to_weight(u, lcm))
    })?;
    writer.set_total_tokens(total_tokens);
    writer.finish()
}
