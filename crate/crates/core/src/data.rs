//! Tokenization, SFT examples, corpus packing, the replay-rate schedule, and
//! the reservoir buffer.

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use rand::Rng;
use std::path::Path;

/// Byte-level vocabulary: 256 raw bytes plus three specials.
pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const VOCAB_SIZE: usize = 259;

/// Identity mapping over bytes; specials are never produced from text.
pub fn tokenize(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| b as u32).collect()
}

pub fn detokenize(ids: &[u32]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&id| {
            u8::try_from(id).map_err(|_| Error::TokenOutOfRange {
                id,
                vocab: 256,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    Sft,
    Replay,
}

/// One supervised pair: context tokens and target tokens.
#[derive(Debug, Clone)]
pub struct Example {
    pub prompt: Vec<u32>,
    pub response: Vec<u32>,
    pub source: Source,
    pub task_id: String,
}

impl Example {
    pub fn sft(prompt: Vec<u32>, response: Vec<u32>, task_id: impl Into<String>) -> Self {
        Self {
            prompt,
            response,
            source: Source::Sft,
            task_id: task_id.into(),
        }
    }

    pub fn validate(&self, window: usize) -> Result<()> {
        if self.source == Source::Sft && self.response.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "sft example for task {} has empty response",
                self.task_id
            )));
        }
        // +2 for BOS and EOS
        let total = self.prompt.len() + self.response.len() + 2;
        if total > window {
            return Err(Error::SequenceTooLong {
                len: total,
                window,
            });
        }
        Ok(())
    }
}

/// `window` contiguous replay-corpus tokens, trained with an all-ones loss
/// mask over the shifted next-token targets.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CorpusWindow {
    pub tokens: Vec<u32>,
}

/// Chop a token stream into non-overlapping windows of exactly `window`
/// tokens, dropping the final partial window.
pub fn pack_corpus(tokens: &[u32], window: usize) -> Result<Vec<CorpusWindow>> {
    if window < 2 {
        return Err(Error::InvalidArgument(format!(
            "window must be >= 2, got {window}"
        )));
    }
    Ok(tokens
        .chunks_exact(window)
        .map(|c| CorpusWindow {
            tokens: c.to_vec(),
        })
        .collect())
}

/// Concatenated bytes of every `.txt` file under `dir`, read in
/// lexicographic filename order.
pub fn read_corpus_dir(dir: &Path) -> Result<Vec<u8>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().map(|e| e == "txt").unwrap_or(false))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        out.extend(std::fs::read(&p)?);
    }
    Ok(out)
}

/// The interleaving order of one fine-tuning run.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplaySchedule {
    pub order: Vec<Source>,
    pub rho: f64,
    pub seed: u64,
}

impl ReplaySchedule {
    pub fn sft_count(&self) -> usize {
        self.order.iter().filter(|&&s| s == Source::Sft).count()
    }

    pub fn replay_count(&self) -> usize {
        self.order.iter().filter(|&&s| s == Source::Replay).count()
    }
}

/// Interleave `round(rho)` replay items after each sft item. Integer rho is
/// exact alternation; fractional rho uses Bernoulli thinning with an exact
/// total correction at the end so that
/// `replay_count == round(rho * n_sft)` always holds.
pub fn schedule(n_sft: usize, rho: f64, seed: u64) -> Result<ReplaySchedule> {
    if rho < 0.0 || !rho.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "replay rate must be non-negative, got {rho}"
        )));
    }
    let mut rng = stream(seed, "replay-schedule");
    let whole = rho.floor() as usize;
    let frac = rho - rho.floor();
    let mut order = Vec::with_capacity(((1.0 + rho) * n_sft as f64) as usize + 1);
    for _ in 0..n_sft {
        order.push(Source::Sft);
        for _ in 0..whole {
            order.push(Source::Replay);
        }
        if frac > 0.0 && rng.gen::<f64>() < frac {
            order.push(Source::Replay);
        }
    }
    let target = (rho * n_sft as f64).round() as usize;
    let mut have = order.iter().filter(|&&s| s == Source::Replay).count();
    while have > target {
        let replay_positions: Vec<usize> = order
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == Source::Replay)
            .map(|(i, _)| i)
            .collect();
        let pick = replay_positions[rng.gen_range(0..replay_positions.len())];
        order.remove(pick);
        have -= 1;
    }
    while have < target {
        let pos = rng.gen_range(0..=order.len());
        order.insert(pos, Source::Replay);
        have += 1;
    }
    Ok(ReplaySchedule { order, rho, seed })
}

/// Fixed-capacity uniform sample over an unbounded stream (algorithm R).
#[derive(Debug, Clone)]
pub struct ReservoirBuffer<T> {
    capacity: usize,
    seen: usize,
    items: Vec<T>,
}

impl<T> ReservoirBuffer<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument(
                "reservoir capacity must be >= 1".into(),
            ));
        }
        Ok(Self {
            capacity,
            seen: 0,
            items: Vec::with_capacity(capacity),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn seen(&self) -> usize {
        self.seen
    }

    pub fn items(&self) -> &[T] {
        &self.items
    }

    /// Insert the `n`-th stream item; once full, it replaces a uniformly
    /// chosen slot with probability `capacity / n`.
    pub fn insert(&mut self, item: T, rng: &mut Stream) {
        self.seen += 1;
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            let j = rng.gen_range(0..self.seen);
            if j < self.capacity {
                self.items[j] = item;
            }
        }
    }

    /// Uniform sample of `m` distinct stored items.
    pub fn sample(&self, m: usize, rng: &mut Stream) -> Result<Vec<&T>> {
        if m > self.items.len() {
            return Err(Error::InvalidArgument(format!(
                "requested {m} items from a buffer holding {}",
                self.items.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.items.len()).collect();
        for i in 0..m {
            let j = rng.gen_range(i..idx.len());
            idx.swap(i, j);
        }
        Ok(idx[..m].iter().map(|&i| &self.items[i]).collect())
    }
}

/// One element of the interleaved training stream.
#[derive(Debug, Clone)]
pub enum Item {
    Sft(Example),
    Replay(CorpusWindow),
}

impl Item {
    pub fn source(&self) -> Source {
        match self {
            Item::Sft(_) => Source::Sft,
            Item::Replay(_) => Source::Replay,
        }
    }
}

/// A padded training batch in next-token form: row `r`, position `t` of
/// `tokens` is the input, `targets` holds the shifted next token, and `mask`
/// marks positions that contribute to the loss.
#[derive(Debug, Clone)]
pub struct Batch {
    pub batch: usize,
    pub seq: usize,
    pub tokens: Vec<u32>,
    pub targets: Vec<u32>,
    pub mask: Vec<bool>,
    pub sources: Vec<Source>,
    /// Per-row content hash of the input tokens; keys the base-logit cache.
    pub keys: Vec<u64>,
}

fn row_key(tokens: &[u32]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &t in tokens {
        for b in t.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

/// Layout: `BOS prompt response EOS`, loss mask over the response and EOS
/// targets only, PAD to width.
fn sft_row(ex: &Example, seq: usize) -> Result<(Vec<u32>, Vec<u32>, Vec<bool>)> {
    let mut full = Vec::with_capacity(ex.prompt.len() + ex.response.len() + 2);
    full.push(BOS);
    full.extend(&ex.prompt);
    full.extend(&ex.response);
    full.push(EOS);
    if full.len() - 1 > seq {
        return Err(Error::SequenceTooLong {
            len: full.len() - 1,
            window: seq,
        });
    }
    let p = ex.prompt.len();
    let r = ex.response.len();
    let mut tokens = vec![PAD; seq];
    let mut targets = vec![PAD; seq];
    let mut mask = vec![false; seq];
    for i in 0..full.len() - 1 {
        tokens[i] = full[i];
        targets[i] = full[i + 1];
        // response tokens plus the closing EOS
        mask[i] = i >= p && i <= p + r;
    }
    Ok((tokens, targets, mask))
}

fn replay_row(w: &CorpusWindow, seq: usize) -> Result<(Vec<u32>, Vec<u32>, Vec<bool>)> {
    if w.tokens.len() < 2 {
        return Err(Error::InvalidArgument(
            "replay window needs at least 2 tokens".into(),
        ));
    }
    if w.tokens.len() - 1 > seq {
        return Err(Error::SequenceTooLong {
            len: w.tokens.len() - 1,
            window: seq,
        });
    }
    let mut tokens = vec![PAD; seq];
    let mut targets = vec![PAD; seq];
    let mut mask = vec![false; seq];
    for i in 0..w.tokens.len() - 1 {
        tokens[i] = w.tokens[i];
        targets[i] = w.tokens[i + 1];
        mask[i] = true;
    }
    Ok((tokens, targets, mask))
}

pub fn build_batch(items: &[Item], seq: usize) -> Result<Batch> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut tokens = Vec::with_capacity(items.len() * seq);
    let mut targets = Vec::with_capacity(items.len() * seq);
    let mut mask = Vec::with_capacity(items.len() * seq);
    let mut sources = Vec::with_capacity(items.len());
    let mut keys = Vec::with_capacity(items.len());
    for item in items {
        let (t, y, m) = match item {
            Item::Sft(ex) => sft_row(ex, seq)?,
            Item::Replay(w) => replay_row(w, seq)?,
        };
        keys.push(row_key(&t));
        tokens.extend(t);
        targets.extend(y);
        mask.extend(m);
        sources.push(item.source());
    }
    Ok(Batch {
        batch: items.len(),
        seq,
        tokens,
        targets,
        mask,
        sources,
        keys,
    })
}

/// One line per record: `task_id<TAB>prompt<TAB>response`, UTF-8.
pub fn write_sft_file(path: &Path, examples: &[Example]) -> Result<()> {
    let mut out = String::new();
    for ex in examples {
        let prompt = String::from_utf8(detokenize(&ex.prompt)?)
            .map_err(|e| Error::InvalidArgument(format!("non-UTF8 prompt: {e}")))?;
        let response = String::from_utf8(detokenize(&ex.response)?)
            .map_err(|e| Error::InvalidArgument(format!("non-UTF8 response: {e}")))?;
        for (field, value) in [
            ("task_id", &ex.task_id),
            ("prompt", &prompt),
            ("response", &response),
        ] {
            if value.contains('\t') || value.contains('\n') {
                return Err(Error::InvalidArgument(format!(
                    "{field} contains a tab or newline: {value:?}"
                )));
            }
        }
        out.push_str(&ex.task_id);
        out.push('\t');
        out.push_str(&prompt);
        out.push('\t');
        out.push_str(&response);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_sft_file(path: &Path) -> Result<Vec<Example>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (task_id, prompt, response) = match (parts.next(), parts.next(), parts.next())
        {
            (Some(t), Some(p), Some(r)) => (t, p, r),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "{}:{}: expected task_id<TAB>prompt<TAB>response",
                    path.display(),
                    lineno + 1
                )))
            }
        };
        out.push(Example::sft(
            tokenize(prompt.as_bytes()),
            tokenize(response.as_bytes()),
            task_id,
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_roundtrip() {
        assert_eq!(tokenize(b""), Vec::<u32>::new());
        assert_eq!(detokenize(&[]).unwrap(), b"");
        assert_eq!(tokenize(b"ab"), vec![97, 98]);
        let s = b"hello, replay world\x00\xff";
        assert_eq!(detokenize(&tokenize(s)).unwrap(), s);
    }

    #[test]
    fn detokenize_rejects_specials() {
        assert!(detokenize(&[97, BOS]).is_err());
        assert!(detokenize(&[EOS]).is_err());
    }

    #[test]
    fn pack_drops_final_partial_window() {
        let tokens: Vec<u32> = (0..10).collect();
        let windows = pack_corpus(&tokens, 4).unwrap();
        assert_eq!(windows.len(), 2);
        assert_eq!(windows[0].tokens, vec![0, 1, 2, 3]);
        assert_eq!(windows[1].tokens, vec![4, 5, 6, 7]);
    }

    #[test]
    fn pack_exact_fit_covers_everything() {
        let tokens: Vec<u32> = (0..8).collect();
        let windows = pack_corpus(&tokens, 4).unwrap();
        assert_eq!(windows.len(), 2);
        let flat: Vec<u32> = windows.iter().flat_map(|w| w.tokens.clone()).collect();
        assert_eq!(flat, tokens);
    }

    #[test]
    fn pack_empty_stream_is_empty_not_error() {
        assert!(pack_corpus(&[], 4).unwrap().is_empty());
    }

    #[test]
    fn pack_windows_reproduce_prefix_of_source_text() {
        let text = b"The quick brown fox jumps over the lazy dog, repeatedly.";
        let tokens = tokenize(text);
        let windows = pack_corpus(&tokens, 10).unwrap();
        let flat: Vec<u32> = windows.iter().flat_map(|w| w.tokens.clone()).collect();
        let bytes = detokenize(&flat).unwrap();
        assert_eq!(&text[..bytes.len()], &bytes[..]);
    }

    #[test]
    fn schedule_no_replay() {
        let s = schedule(2, 0.0, 1).unwrap();
        assert_eq!(s.order, vec![Source::Sft, Source::Sft]);
    }

    #[test]
    fn schedule_unit_rate_alternates() {
        let s = schedule(2, 1.0, 1).unwrap();
        assert_eq!(
            s.order,
            vec![Source::Sft, Source::Replay, Source::Sft, Source::Replay]
        );
    }

    #[test]
    fn schedule_rho3_counts_and_sft_spacing() {
        let s = schedule(100, 3.0, 9).unwrap();
        assert_eq!(s.sft_count(), 100);
        assert_eq!(s.replay_count(), 300);
        for window in s.order.windows(8) {
            assert!(
                window.iter().any(|&x| x == Source::Sft),
                "8 consecutive items without an sft example"
            );
        }
    }

    #[test]
    fn schedule_rejects_negative_rho() {
        assert!(schedule(4, -0.5, 0).is_err());
    }

    #[test]
    fn schedule_fractional_rho_exact_total() {
        for seed in 0..20 {
            let s = schedule(40, 0.4, seed).unwrap();
            assert_eq!(s.replay_count(), 16, "seed {seed}");
            assert_eq!(s.sft_count(), 40);
        }
    }

    #[test]
    fn schedule_is_deterministic() {
        assert_eq!(schedule(50, 2.5, 7).unwrap(), schedule(50, 2.5, 7).unwrap());
    }

    #[test]
    fn reservoir_under_capacity_stores_everything() {
        let mut rng = stream(0, "res");
        let mut buf = ReservoirBuffer::new(4).unwrap();
        for i in 0..4 {
            buf.insert(i, &mut rng);
        }
        assert_eq!(buf.items(), &[0, 1, 2, 3]);
        assert_eq!(buf.seen(), 4);
    }

    #[test]
    fn reservoir_sample_too_large_errors() {
        let mut rng = stream(0, "res");
        let mut buf = ReservoirBuffer::new(4).unwrap();
        buf.insert(1, &mut rng);
        assert!(buf.sample(2, &mut rng).is_err());
        assert_eq!(buf.sample(1, &mut rng).unwrap(), vec![&1]);
    }

    #[test]
    fn sft_row_layout_and_mask() {
        // prompt "ab", response "c": BOS a b c EOS
        let ex = Example::sft(tokenize(b"ab"), tokenize(b"c"), "t");
        let b = build_batch(&[Item::Sft(ex)], 6).unwrap();
        assert_eq!(b.tokens, vec![BOS, 97, 98, 99, PAD, PAD]);
        assert_eq!(b.targets, vec![97, 98, 99, EOS, PAD, PAD]);
        assert_eq!(b.mask, vec![false, false, true, true, false, false]);
        assert_eq!(b.sources, vec![Source::Sft]);
    }

    #[test]
    fn replay_row_masks_every_real_position() {
        let w = CorpusWindow {
            tokens: vec![10, 11, 12, 13],
        };
        let b = build_batch(&[Item::Replay(w)], 5).unwrap();
        assert_eq!(b.tokens, vec![10, 11, 12, PAD, PAD]);
        assert_eq!(b.targets, vec![11, 12, 13, PAD, PAD]);
        assert_eq!(b.mask, vec![true, true, true, false, false]);
    }

    #[test]
    fn batch_rejects_overlong_rows() {
        let ex = Example::sft(tokenize(b"abcdef"), tokenize(b"g"), "t");
        assert!(build_batch(&[Item::Sft(ex)], 4).is_err());
    }

    #[test]
    fn row_keys_depend_on_content() {
        let a = Item::Sft(Example::sft(tokenize(b"x"), tokenize(b"1"), "t"));
        let b = Item::Sft(Example::sft(tokenize(b"x"), tokenize(b"2"), "t"));
        let batch = build_batch(&[a.clone(), a, b], 6).unwrap();
        assert_eq!(batch.keys[0], batch.keys[1]);
        assert_ne!(batch.keys[0], batch.keys[2]);
    }

    #[test]
    fn sft_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sft.tsv");
        let examples = vec![
            Example::sft(tokenize(b"color:red"), tokenize(b"The value of color is red."), "kv"),
            Example::sft(tokenize(b"size:XL"), tokenize(b"The value of size is XL."), "kv"),
        ];
        write_sft_file(&path, &examples).unwrap();
        let loaded = read_sft_file(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].prompt, examples[0].prompt);
        assert_eq!(loaded[1].response, examples[1].response);
        assert_eq!(loaded[0].task_id, "kv");
    }

    #[test]
    fn sft_file_rejects_malformed_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        std::fs::write(&path, "only_one_field\n").unwrap();
        assert!(read_sft_file(&path).is_err());
    }
}
