//! Interaction-log ingestion, k-core filtering, leave-one-out splitting,
//! user partitioning across simulated devices, the synthetic Markov corpus,
//! and the processed-dataset cache.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

/// One parsed interaction line, ordered by file position.
#[derive(Clone, Debug)]
pub struct RawEvent {
    pub user: String,
    pub item: String,
    pub ts: i64,
    pub order: usize,
}

/// A skipped input line and why.
#[derive(Clone, Debug)]
pub struct ParseWarning {
    pub line: usize,
    pub message: String,
}

/// Parse a `user<TAB>item<TAB>timestamp` file. An empty timestamp field falls
/// back to line order; malformed lines are skipped and reported.
pub fn load_interactions(path: &Path) -> Result<(Vec<RawEvent>, Vec<ParseWarning>)> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut events = Vec::new();
    let mut warnings = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            warnings.push(ParseWarning {
                line: lineno,
                message: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
            continue;
        }
        let (user, item, ts_str) = (fields[0].trim(), fields[1].trim(), fields[2].trim());
        if user.is_empty() || item.is_empty() {
            warnings.push(ParseWarning {
                line: lineno,
                message: "empty user or item field".into(),
            });
            continue;
        }
        let ts = if ts_str.is_empty() {
            lineno as i64
        } else {
            match ts_str.parse::<i64>() {
                Ok(v) => v,
                Err(_) => {
                    warnings.push(ParseWarning {
                        line: lineno,
                        message: format!("timestamp {ts_str:?} is not an integer"),
                    });
                    continue;
                }
            }
        };
        events.push(RawEvent {
            user: user.to_string(),
            item: item.to_string(),
            ts,
            order: events.len(),
        });
    }
    if events.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{}: no valid interaction lines",
            path.display()
        )));
    }
    Ok((events, warnings))
}

/// Iteratively drop users and items with fewer than `k` interactions until
/// every remaining count is at least `k`.
pub fn k_core_filter(mut events: Vec<RawEvent>, k: u32) -> Result<Vec<RawEvent>> {
    loop {
        let mut user_counts: HashMap<&str, u32> = HashMap::new();
        let mut item_counts: HashMap<&str, u32> = HashMap::new();
        for e in &events {
            *user_counts.entry(e.user.as_str()).or_insert(0) += 1;
            *item_counts.entry(e.item.as_str()).or_insert(0) += 1;
        }
        let keep: Vec<bool> = events
            .iter()
            .map(|e| user_counts[e.user.as_str()] >= k && item_counts[e.item.as_str()] >= k)
            .collect();
        let before = events.len();
        let mut idx = 0;
        events.retain(|_| {
            let keep_this = keep[idx];
            idx += 1;
            keep_this
        });
        if events.is_empty() {
            return Err(Error::EmptyDataset(format!(
                "{k}-core filtering removed every interaction"
            )));
        }
        if events.len() == before {
            return Ok(events);
        }
    }
}

/// The processed corpus: contiguous 1-based user and item ids (0 reserved for
/// padding) and per-user time-ordered item sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionDataset {
    pub num_users: u32,
    pub num_items: u32,
    /// Sequence of user `u` at index `u - 1`.
    sequences: Vec<Vec<u32>>,
    /// Original labels; index 0 is the padding placeholder.
    pub user_names: Vec<String>,
    pub item_names: Vec<String>,
    pub k: u32,
    pub max_seq_len: usize,
}

impl InteractionDataset {
    pub fn sequence(&self, user: u32) -> &[u32] {
        &self.sequences[user as usize - 1]
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn user_ids(&self) -> impl Iterator<Item = u32> {
        1..=self.num_users
    }
}

/// k-core filter, reindex to dense ids, order each user's events by
/// timestamp (ties keep file order), and truncate to the most recent
/// `max_seq_len` items.
pub fn build_dataset(
    events: Vec<RawEvent>,
    k: u32,
    max_seq_len: usize,
) -> Result<InteractionDataset> {
    let events = k_core_filter(events, k)?;

    let mut user_ids: HashMap<String, u32> = HashMap::new();
    let mut item_ids: HashMap<String, u32> = HashMap::new();
    let mut user_names = vec![String::new()];
    let mut item_names = vec![String::new()];
    let mut per_user: Vec<Vec<(i64, usize, u32)>> = Vec::new();
    for e in &events {
        let uid = *user_ids.entry(e.user.clone()).or_insert_with(|| {
            user_names.push(e.user.clone());
            per_user.push(Vec::new());
            user_names.len() as u32 - 1
        });
        let iid = *item_ids.entry(e.item.clone()).or_insert_with(|| {
            item_names.push(e.item.clone());
            item_names.len() as u32 - 1
        });
        per_user[uid as usize - 1].push((e.ts, e.order, iid));
    }
    let sequences = per_user
        .into_iter()
        .map(|mut evs| {
            evs.sort_by_key(|&(ts, order, _)| (ts, order));
            let mut seq: Vec<u32> = evs.into_iter().map(|(_, _, iid)| iid).collect();
            if seq.len() > max_seq_len {
                seq.drain(..seq.len() - max_seq_len);
            }
            seq
        })
        .collect::<Vec<_>>();

    Ok(InteractionDataset {
        num_users: user_names.len() as u32 - 1,
        num_items: item_names.len() as u32 - 1,
        sequences,
        user_names,
        item_names,
        k,
        max_seq_len,
    })
}

/// Leave-one-out split: last item is the test target, second-to-last the
/// validation target, the rest the train prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    train: Vec<Vec<u32>>,
    valid: Vec<u32>,
    test: Vec<u32>,
}

impl SplitDataset {
    pub fn train(&self, user: u32) -> &[u32] {
        &self.train[user as usize - 1]
    }

    pub fn valid(&self, user: u32) -> u32 {
        self.valid[user as usize - 1]
    }

    pub fn test(&self, user: u32) -> u32 {
        self.test[user as usize - 1]
    }

    pub fn num_users(&self) -> u32 {
        self.train.len() as u32
    }
}

pub fn leave_one_out_split(dataset: &InteractionDataset) -> Result<SplitDataset> {
    let mut train = Vec::with_capacity(dataset.num_users as usize);
    let mut valid = Vec::with_capacity(dataset.num_users as usize);
    let mut test = Vec::with_capacity(dataset.num_users as usize);
    for user in dataset.user_ids() {
        let seq = dataset.sequence(user);
        if seq.len() < 3 {
            return Err(Error::Contract(format!(
                "leave_one_out_split: user {user} has only {} interactions (need >= 3)",
                seq.len()
            )));
        }
        train.push(seq[..seq.len() - 2].to_vec());
        valid.push(seq[seq.len() - 2]);
        test.push(seq[seq.len() - 1]);
    }
    Ok(SplitDataset { train, valid, test })
}

/// How users are assigned to simulated devices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartitionStrategy {
    /// Shuffle users, then deal them round-robin.
    Uniform,
    /// Consecutive user-id blocks; recovers the per-client grouping of the
    /// synthetic generator.
    Contiguous,
}

impl std::str::FromStr for PartitionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(PartitionStrategy::Uniform),
            "contiguous" => Ok(PartitionStrategy::Contiguous),
            other => Err(Error::Config(format!(
                "unknown partition strategy {other:?} (expected uniform|contiguous)"
            ))),
        }
    }
}

impl std::fmt::Display for PartitionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PartitionStrategy::Uniform => write!(f, "uniform"),
            PartitionStrategy::Contiguous => write!(f, "contiguous"),
        }
    }
}

/// Consecutive chunk sizes that differ by at most one, largest first.
fn contiguous_chunks(total: usize, parts: usize) -> Vec<usize> {
    let base = total / parts;
    let extra = total % parts;
    (0..parts).map(|i| base + usize::from(i < extra)).collect()
}

/// Split users into `n` disjoint covering groups.
pub fn partition_clients(
    dataset: &InteractionDataset,
    n: usize,
    strategy: PartitionStrategy,
    seed: u64,
) -> Result<Vec<Vec<u32>>> {
    let users = dataset.num_users as usize;
    if n == 0 || n > users {
        return Err(Error::Contract(format!(
            "partition_clients: {n} clients for {users} users"
        )));
    }
    let mut ids: Vec<u32> = dataset.user_ids().collect();
    match strategy {
        PartitionStrategy::Uniform => {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            ids.shuffle(&mut rng);
            let mut groups = vec![Vec::new(); n];
            for (i, id) in ids.into_iter().enumerate() {
                groups[i % n].push(id);
            }
            Ok(groups)
        }
        PartitionStrategy::Contiguous => {
            let mut groups = Vec::with_capacity(n);
            let mut start = 0;
            for size in contiguous_chunks(users, n) {
                groups.push(ids[start..start + size].to_vec());
                start += size;
            }
            Ok(groups)
        }
    }
}

/// Synthetic corpus parameters.
#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub num_users: u32,
    pub num_items: u32,
    pub num_clients: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub seed: u64,
}

/// Minimum per-item occurrence the generator guarantees (matches the default
/// 5-core filter).
const SYNTH_MIN_ITEM_COUNT: usize = 5;

/// Build a corpus of per-client first-order Markov chains sharing a global
/// backbone. Every walk follows one corpus-wide item cycle half the time and
/// a client-specific cycle (plus client branch successors) otherwise, so the
/// federation has common structure worth aggregating while client transition
/// rows stay strongly divergent. Item popularity stays close to uniform.
/// Users are grouped by client in id order, so a contiguous partition with
/// the same client count recovers the generating assignment.
pub fn make_synthetic(cfg: &SyntheticConfig) -> Result<InteractionDataset> {
    if cfg.num_users == 0 || cfg.num_items == 0 || cfg.num_clients == 0 || cfg.len_min == 0 {
        return Err(Error::Config(
            "make_synthetic: all counts must be >= 1".into(),
        ));
    }
    if cfg.len_min > cfg.len_max {
        return Err(Error::Config(format!(
            "make_synthetic: len_min {} > len_max {}",
            cfg.len_min, cfg.len_max
        )));
    }
    if cfg.num_clients > cfg.num_users as usize {
        return Err(Error::Config(format!(
            "make_synthetic: {} clients for {} users",
            cfg.num_clients, cfg.num_users
        )));
    }
    let v = cfg.num_items as usize;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);

    // One shared cycle for the whole corpus, then per-client cycles and
    // branch successors. A step follows the shared cycle w.p. 0.50, the
    // client cycle w.p. 0.35, a client branch w.p. 0.10, and jumps uniformly
    // w.p. 0.05.
    const BRANCHES: usize = 3;
    let cycle_of = |rng: &mut ChaCha12Rng| {
        let mut perm: Vec<u32> = (1..=cfg.num_items).collect();
        perm.shuffle(rng);
        let mut next = vec![0u32; v + 1];
        for i in 0..v {
            next[perm[i] as usize] = perm[(i + 1) % v];
        }
        next
    };
    let shared_next = cycle_of(&mut rng);
    let mut cycle_next: Vec<Vec<u32>> = Vec::with_capacity(cfg.num_clients);
    let mut branches: Vec<Vec<u32>> = Vec::with_capacity(cfg.num_clients);
    for _ in 0..cfg.num_clients {
        cycle_next.push(cycle_of(&mut rng));
        let mut branch = vec![0u32; (v + 1) * BRANCHES];
        for item in 1..=v {
            for b in 0..BRANCHES {
                branch[item * BRANCHES + b] = rng.random_range(1..=cfg.num_items);
            }
        }
        branches.push(branch);
    }

    let chunk_sizes = contiguous_chunks(cfg.num_users as usize, cfg.num_clients);
    let mut sequences: Vec<Vec<u32>> = Vec::with_capacity(cfg.num_users as usize);
    for (client, &size) in chunk_sizes.iter().enumerate() {
        for _ in 0..size {
            let len = rng.random_range(cfg.len_min..=cfg.len_max);
            let mut seq = Vec::with_capacity(len);
            let mut cur: u32 = rng.random_range(1..=cfg.num_items);
            seq.push(cur);
            for _ in 1..len {
                let roll: f64 = rng.random();
                cur = if roll < 0.50 {
                    shared_next[cur as usize]
                } else if roll < 0.85 {
                    cycle_next[client][cur as usize]
                } else if roll < 0.95 {
                    let b = rng.random_range(0..BRANCHES);
                    branches[client][cur as usize * BRANCHES + b]
                } else {
                    rng.random_range(1..=cfg.num_items)
                };
                seq.push(cur);
            }
            sequences.push(seq);
        }
    }

    repair_item_counts(&mut sequences, v);

    let user_names = std::iter::once(String::new())
        .chain((1..=cfg.num_users).map(|u| format!("u{u}")))
        .collect();
    let item_names = std::iter::once(String::new())
        .chain((1..=cfg.num_items).map(|i| format!("i{i}")))
        .collect();
    Ok(InteractionDataset {
        num_users: cfg.num_users,
        num_items: cfg.num_items,
        sequences,
        user_names,
        item_names,
        k: SYNTH_MIN_ITEM_COUNT as u32,
        max_seq_len: cfg.len_max,
    })
}

/// Guarantee every item occurs at least [`SYNTH_MIN_ITEM_COUNT`] times by
/// re-pointing sequence start items (which were uniform draws anyway) from
/// over-represented items to deficient ones. Deterministic; a no-op on
/// corpora that are already covered.
fn repair_item_counts(sequences: &mut [Vec<u32>], num_items: usize) {
    let mut counts = vec![0usize; num_items + 1];
    for seq in sequences.iter() {
        for &it in seq.iter() {
            counts[it as usize] += 1;
        }
    }
    let mut deficient: Vec<u32> = (1..=num_items as u32)
        .filter(|&i| counts[i as usize] < SYNTH_MIN_ITEM_COUNT)
        .collect();
    if deficient.is_empty() {
        return;
    }
    let mut replaced = vec![false; sequences.len()];
    'outer: for item in deficient.drain(..) {
        while counts[item as usize] < SYNTH_MIN_ITEM_COUNT {
            // Donate from the start of a sequence whose first item can spare
            // an occurrence.
            let donor = (0..sequences.len()).find(|&u| {
                !replaced[u] && counts[sequences[u][0] as usize] > SYNTH_MIN_ITEM_COUNT + 1
            });
            match donor {
                Some(u) => {
                    counts[sequences[u][0] as usize] -= 1;
                    sequences[u][0] = item;
                    counts[item as usize] += 1;
                    replaced[u] = true;
                }
                None => break 'outer,
            }
        }
    }
}

const CACHE_FIELDS: usize = 5;

/// Write the processed-dataset cache: a header of little-endian u32 counts
/// (users, items, interactions, k, max_seq_len) followed by one id-prefixed
/// item list per user.
pub fn save_cache(path: &Path, dataset: &InteractionDataset) -> Result<()> {
    let mut buf: Vec<u8> = Vec::with_capacity(
        4 * (CACHE_FIELDS + dataset.num_interactions() + 2 * dataset.num_users as usize),
    );
    for header in [
        dataset.num_users,
        dataset.num_items,
        dataset.num_interactions() as u32,
        dataset.k,
        dataset.max_seq_len as u32,
    ] {
        buf.extend_from_slice(&header.to_le_bytes());
    }
    for user in dataset.user_ids() {
        let seq = dataset.sequence(user);
        buf.extend_from_slice(&user.to_le_bytes());
        buf.extend_from_slice(&(seq.len() as u32).to_le_bytes());
        for &item in seq {
            buf.extend_from_slice(&item.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Read a cache produced by [`save_cache`]. Original labels are not cached;
/// ids round-trip as their decimal form.
pub fn load_cache(path: &Path) -> Result<InteractionDataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut next_u32 = |what: &str| -> Result<u32> {
        if pos + 4 > bytes.len() {
            return Err(Error::Format(format!(
                "{}: truncated reading {what}",
                path.display()
            )));
        }
        let v = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes"));
        pos += 4;
        Ok(v)
    };
    let num_users = next_u32("user count")?;
    let num_items = next_u32("item count")?;
    let num_events = next_u32("interaction count")?;
    let k = next_u32("k")?;
    let max_seq_len = next_u32("max_seq_len")? as usize;
    let mut sequences = vec![Vec::new(); num_users as usize];
    let mut total = 0usize;
    for _ in 0..num_users {
        let user = next_u32("user id")?;
        if user == 0 || user > num_users {
            return Err(Error::Format(format!(
                "{}: user id {user} out of range",
                path.display()
            )));
        }
        let len = next_u32("sequence length")? as usize;
        let mut seq = Vec::with_capacity(len);
        for _ in 0..len {
            let item = next_u32("item id")?;
            if item == 0 || item > num_items {
                return Err(Error::Format(format!(
                    "{}: item id {item} out of range",
                    path.display()
                )));
            }
            seq.push(item);
        }
        total += len;
        sequences[user as usize - 1] = seq;
    }
    if total != num_events as usize {
        return Err(Error::Format(format!(
            "{}: header promises {num_events} interactions, found {total}",
            path.display()
        )));
    }
    let user_names = std::iter::once(String::new())
        .chain((1..=num_users).map(|u| u.to_string()))
        .collect();
    let item_names = std::iter::once(String::new())
        .chain((1..=num_items).map(|i| i.to_string()))
        .collect();
    Ok(InteractionDataset {
        num_users,
        num_items,
        sequences,
        user_names,
        item_names,
        k,
        max_seq_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_tsv(lines: &[&str]) -> tempfile::NamedTempFile {
        use std::io::Write as _;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for line in lines {
            writeln!(f, "{line}").unwrap();
        }
        f.flush().unwrap();
        f
    }

    fn event(user: &str, item: &str, ts: i64, order: usize) -> RawEvent {
        RawEvent {
            user: user.into(),
            item: item.into(),
            ts,
            order,
        }
    }

    #[test]
    fn parses_well_formed_lines() {
        let f = write_tsv(&["u1\ti1\t10", "u1\ti2\t20", "u2\ti1\t5"]);
        let (events, warnings) = load_interactions(f.path()).unwrap();
        assert_eq!(events.len(), 3);
        assert!(warnings.is_empty());
    }

    #[test]
    fn skips_two_field_lines_with_warning() {
        let f = write_tsv(&["u1\ti1\t10", "u1\ti2", "u2\ti1\t5"]);
        let (events, warnings) = load_interactions(f.path()).unwrap();
        assert_eq!(events.len(), 2);
        assert_eq!(warnings.len(), 1);
        assert_eq!(warnings[0].line, 2);
    }

    #[test]
    fn empty_timestamp_field_uses_line_order() {
        let f = write_tsv(&["u1\ti9\t", "u1\ti2\t"]);
        let (events, _) = load_interactions(f.path()).unwrap();
        assert_eq!(events[0].ts, 1);
        assert_eq!(events[1].ts, 2);
    }

    #[test]
    fn no_valid_lines_is_an_empty_dataset_error() {
        let f = write_tsv(&["nonsense", "also+bad"]);
        assert!(matches!(
            load_interactions(f.path()).unwrap_err(),
            Error::EmptyDataset(_)
        ));
    }

    #[test]
    fn sequences_sort_by_timestamp_with_stable_ties() {
        let f = write_tsv(&["u1\tc\t30", "u1\ta\t10", "u1\td\t30", "u1\tb\t20"]);
        let (events, _) = load_interactions(f.path()).unwrap();
        let ds = build_dataset(events.clone(), 1, 50).unwrap();
        let seq = ds.sequence(1);
        let names: Vec<&str> = seq
            .iter()
            .map(|&i| ds.item_names[i as usize].as_str())
            .collect();
        // Sort oracle over (ts, input order).
        let mut want: Vec<(i64, usize, &str)> = events
            .iter()
            .map(|e| (e.ts, e.order, e.item.as_str()))
            .collect();
        want.sort();
        let want: Vec<&str> = want.into_iter().map(|(_, _, i)| i).collect();
        assert_eq!(names, want);
        assert_eq!(names, ["a", "b", "c", "d"]);
    }

    #[test]
    fn k_core_keeps_already_dense_data() {
        let mut events = Vec::new();
        let mut order = 0;
        for u in 0..3 {
            for i in 0..5 {
                events.push(event(
                    &format!("u{u}"),
                    &format!("i{i}"),
                    order as i64,
                    order,
                ));
                order += 1;
            }
        }
        // 3 users x 5 items: users have 5 each, items 3 each -> 3-core keeps all.
        let kept = k_core_filter(events.clone(), 3).unwrap();
        assert_eq!(kept.len(), events.len());
    }

    #[test]
    fn k_core_removes_thin_user_and_recheck_reaches_fixpoint() {
        // Dense core: 6 users x 6 items (every user/item count 6).
        let mut events = Vec::new();
        let mut order = 0;
        for u in 0..6 {
            for i in 0..6 {
                events.push(event(
                    &format!("u{u}"),
                    &format!("i{i}"),
                    order as i64,
                    order,
                ));
                order += 1;
            }
        }
        // One thin user with 4 interactions on popular items.
        for i in 0..4 {
            events.push(event("thin", &format!("i{i}"), order as i64, order));
            order += 1;
        }
        let kept = k_core_filter(events.clone(), 5).unwrap();
        assert!(kept.iter().all(|e| e.user != "thin"));
        assert_eq!(kept.len(), 36);

        // Iterate-until-stable oracle: repeated single passes agree.
        let mut oracle = events;
        loop {
            let mut uc: HashMap<String, u32> = HashMap::new();
            let mut ic: HashMap<String, u32> = HashMap::new();
            for e in &oracle {
                *uc.entry(e.user.clone()).or_insert(0) += 1;
                *ic.entry(e.item.clone()).or_insert(0) += 1;
            }
            let next: Vec<RawEvent> = oracle
                .iter()
                .filter(|e| uc[&e.user] >= 5 && ic[&e.item] >= 5)
                .cloned()
                .collect();
            if next.len() == oracle.len() {
                break;
            }
            oracle = next;
        }
        assert_eq!(kept.len(), oracle.len());
    }

    #[test]
    fn k_core_empty_result_errors() {
        let events = vec![event("u1", "i1", 1, 0), event("u1", "i2", 2, 1)];
        assert!(matches!(
            k_core_filter(events, 5).unwrap_err(),
            Error::EmptyDataset(_)
        ));
    }

    #[test]
    fn k_core_filter_is_idempotent() {
        let mut events = Vec::new();
        let mut order = 0;
        for u in 0..8 {
            for i in 0..8 {
                if (u + i) % 3 != 0 {
                    events.push(event(
                        &format!("u{u}"),
                        &format!("i{i}"),
                        order,
                        order as usize,
                    ));
                    order += 1;
                }
            }
        }
        let once = k_core_filter(events, 5).unwrap();
        let twice = k_core_filter(once.clone(), 5).unwrap();
        assert_eq!(once.len(), twice.len());
    }

    #[test]
    fn sequences_truncate_to_most_recent_items() {
        let events: Vec<RawEvent> = (0..9)
            .map(|i| event("u", &format!("i{i}"), i as i64, i as usize))
            .collect();
        let ds = build_dataset(events, 1, 5).unwrap();
        let names: Vec<&str> = ds
            .sequence(1)
            .iter()
            .map(|&i| ds.item_names[i as usize].as_str())
            .collect();
        assert_eq!(names, ["i4", "i5", "i6", "i7", "i8"]);
    }

    #[test]
    fn split_examples() {
        let mk = |items: &[&str]| {
            let events: Vec<RawEvent> = items
                .iter()
                .enumerate()
                .map(|(i, it)| event("u", it, i as i64, i))
                .collect();
            build_dataset(events, 1, 50).unwrap()
        };
        let ds = mk(&["a", "b", "c", "d", "e"]);
        let split = leave_one_out_split(&ds).unwrap();
        assert_eq!(split.train(1).len(), 3);
        assert_eq!(ds.item_names[split.valid(1) as usize], "d");
        assert_eq!(ds.item_names[split.test(1) as usize], "e");

        let ds = mk(&["a", "b", "c"]);
        let split = leave_one_out_split(&ds).unwrap();
        assert_eq!(split.train(1).len(), 1);
        assert_eq!(ds.item_names[split.valid(1) as usize], "b");
        assert_eq!(ds.item_names[split.test(1) as usize], "c");

        let ds = mk(&["a", "b"]);
        assert!(matches!(
            leave_one_out_split(&ds).unwrap_err(),
            Error::Contract(_)
        ));
    }

    #[test]
    fn splits_reassemble_on_synthetic_corpus() {
        let ds = make_synthetic(&SyntheticConfig {
            num_users: 40,
            num_items: 30,
            num_clients: 4,
            len_min: 8,
            len_max: 14,
            seed: 5,
        })
        .unwrap();
        let split = leave_one_out_split(&ds).unwrap();
        for user in ds.user_ids() {
            let mut rebuilt = split.train(user).to_vec();
            rebuilt.push(split.valid(user));
            rebuilt.push(split.test(user));
            assert_eq!(rebuilt.as_slice(), ds.sequence(user));
            assert!(!split.train(user).is_empty());
        }
    }

    #[test]
    fn partition_single_client_takes_everyone() {
        let ds = make_synthetic(&SyntheticConfig {
            num_users: 10,
            num_items: 12,
            num_clients: 2,
            len_min: 6,
            len_max: 8,
            seed: 1,
        })
        .unwrap();
        let groups = partition_clients(&ds, 1, PartitionStrategy::Uniform, 0).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].len(), 10);
    }

    #[test]
    fn partition_sizes_differ_by_at_most_one() {
        let ds = make_synthetic(&SyntheticConfig {
            num_users: 10,
            num_items: 12,
            num_clients: 2,
            len_min: 6,
            len_max: 8,
            seed: 1,
        })
        .unwrap();
        for strategy in [PartitionStrategy::Uniform, PartitionStrategy::Contiguous] {
            let groups = partition_clients(&ds, 3, strategy, 7).unwrap();
            let mut sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
            sizes.sort_unstable();
            assert_eq!(sizes, vec![3, 3, 4]);
        }
    }

    #[test]
    fn partition_rejects_more_clients_than_users() {
        let ds = make_synthetic(&SyntheticConfig {
            num_users: 4,
            num_items: 10,
            num_clients: 2,
            len_min: 6,
            len_max: 8,
            seed: 1,
        })
        .unwrap();
        assert!(matches!(
            partition_clients(&ds, 5, PartitionStrategy::Uniform, 0).unwrap_err(),
            Error::Contract(_)
        ));
    }

    proptest! {
        /// Set oracle: every strategy yields a disjoint cover of the users.
        #[test]
        fn partition_is_disjoint_cover(
            users in 5u32..60,
            n in 1usize..5,
            seed in 0u64..500,
            uniform in proptest::bool::ANY,
        ) {
            prop_assume!(n <= users as usize);
            let ds = make_synthetic(&SyntheticConfig {
                num_users: users,
                num_items: 15,
                num_clients: 1,
                len_min: 5,
                len_max: 9,
                seed,
            }).unwrap();
            let strategy = if uniform {
                PartitionStrategy::Uniform
            } else {
                PartitionStrategy::Contiguous
            };
            let groups = partition_clients(&ds, n, strategy, seed).unwrap();
            let mut seen = std::collections::HashSet::new();
            for group in &groups {
                for &u in group {
                    prop_assert!(seen.insert(u), "user {u} assigned twice");
                }
            }
            prop_assert_eq!(seen.len(), users as usize);
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = SyntheticConfig {
            num_users: 30,
            num_items: 25,
            num_clients: 3,
            len_min: 8,
            len_max: 12,
            seed: 77,
        };
        let a = make_synthetic(&cfg).unwrap();
        let b = make_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synthetic_survives_five_core_unchanged() {
        let ds = make_synthetic(&SyntheticConfig {
            num_users: 200,
            num_items: 300,
            num_clients: 8,
            len_min: 20,
            len_max: 40,
            seed: 42,
        })
        .unwrap();
        let mut counts = vec![0usize; ds.num_items as usize + 1];
        for user in ds.user_ids() {
            assert!(ds.sequence(user).len() >= 20);
            for &item in ds.sequence(user) {
                counts[item as usize] += 1;
            }
        }
        assert!(
            counts[1..].iter().all(|&c| c >= 5),
            "every item occurs >= 5 times"
        );
    }

    #[test]
    fn synthetic_clients_have_divergent_transitions() {
        let ds = make_synthetic(&SyntheticConfig {
            num_users: 200,
            num_items: 300,
            num_clients: 8,
            len_min: 20,
            len_max: 40,
            seed: 42,
        })
        .unwrap();
        let groups = partition_clients(&ds, 8, PartitionStrategy::Contiguous, 0).unwrap();
        // Counting oracle: per-client empirical transition rows.
        let v = ds.num_items as usize;
        let count_rows = |users: &[u32]| {
            let mut rows = vec![HashMap::<u32, f64>::new(); v + 1];
            for &u in users {
                let seq = ds.sequence(u);
                for w in seq.windows(2) {
                    *rows[w[0] as usize].entry(w[1]).or_insert(0.0) += 1.0;
                }
            }
            rows
        };
        let a = count_rows(&groups[0]);
        let b = count_rows(&groups[1]);
        let mut tv_sum = 0.0;
        let mut shared = 0usize;
        for item in 1..=v {
            let (ra, rb) = (&a[item], &b[item]);
            if ra.is_empty() || rb.is_empty() {
                continue;
            }
            let za: f64 = ra.values().sum();
            let zb: f64 = rb.values().sum();
            let keys: std::collections::HashSet<u32> =
                ra.keys().chain(rb.keys()).cloned().collect();
            let tv: f64 = keys
                .iter()
                .map(|k| (ra.get(k).unwrap_or(&0.0) / za - rb.get(k).unwrap_or(&0.0) / zb).abs())
                .sum::<f64>()
                / 2.0;
            tv_sum += tv;
            shared += 1;
        }
        assert!(shared > 20, "need overlapping rows to compare");
        let mean_tv = tv_sum / shared as f64;
        assert!(mean_tv > 0.1, "mean total variation {mean_tv} too small");
    }

    #[test]
    fn cache_round_trips_sequences() {
        let ds = make_synthetic(&SyntheticConfig {
            num_users: 25,
            num_items: 20,
            num_clients: 2,
            len_min: 6,
            len_max: 10,
            seed: 3,
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.bin");
        save_cache(&path, &ds).unwrap();
        let loaded = load_cache(&path).unwrap();
        assert_eq!(loaded.num_users, ds.num_users);
        assert_eq!(loaded.num_items, ds.num_items);
        assert_eq!(loaded.k, ds.k);
        assert_eq!(loaded.max_seq_len, ds.max_seq_len);
        for user in ds.user_ids() {
            assert_eq!(loaded.sequence(user), ds.sequence(user));
        }
        // Byte-identical rewrite.
        let path2 = dir.path().join("cache2.bin");
        save_cache(&path2, &loaded).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn ingestion_reindexing_is_lossless() {
        let f = write_tsv(&[
            "alice\tbook\t1",
            "alice\tfilm\t2",
            "alice\tgame\t3",
            "bob\tbook\t1",
            "bob\tgame\t2",
            "bob\tfilm\t3",
            "carol\tfilm\t1",
            "carol\tbook\t2",
            "carol\tgame\t3",
        ]);
        let (events, _) = load_interactions(f.path()).unwrap();
        let ds = build_dataset(events.clone(), 3, 50).unwrap();
        // Map back and compare against the original (user, item) pairs.
        let mut rebuilt: Vec<(String, String)> = Vec::new();
        for user in ds.user_ids() {
            for &item in ds.sequence(user) {
                rebuilt.push((
                    ds.user_names[user as usize].clone(),
                    ds.item_names[item as usize].clone(),
                ));
            }
        }
        let mut original: Vec<(String, String)> = events
            .iter()
            .map(|e| (e.user.clone(), e.item.clone()))
            .collect();
        rebuilt.sort();
        original.sort();
        assert_eq!(rebuilt, original);
    }
}
