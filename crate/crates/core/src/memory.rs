//! Current-game and past-game history stores, plus the capacity-bounded
//! eviction rule that keeps the highest-scoring exemplars.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::game::{Action, GameRecord, StageOutcome};

/// Joint-action prefix of the ongoing game. Append-only while the game runs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CurrentHistory {
    pairs: Vec<(Action, Action)>,
}

impl CurrentHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: Vec<(Action, Action)>) -> Self {
        CurrentHistory { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(Action, Action)] {
        &self.pairs
    }

    /// Append the outcome of the stage that just finished. The outcome's turn
    /// must be exactly one past the recorded length.
    pub fn append_stage(&mut self, o: &StageOutcome) -> Result<()> {
        if o.turn != self.pairs.len() + 1 {
            return Err(Error::Sequencing(format!(
                "stage turn {} appended to a history of length {}",
                o.turn,
                self.pairs.len()
            )));
        }
        self.pairs.push((o.a_learner, o.a_opponent));
        Ok(())
    }

    pub fn clear(&mut self) {
        self.pairs.clear();
    }
}

/// Capacity-bounded store of terminated games.
///
/// Inserting at capacity removes the stored item with the smallest score
/// difference, counting the incoming record itself; ties evict the oldest.
#[derive(Debug, Clone, PartialEq)]
pub struct PastMemory {
    items: Vec<GameRecord>,
    capacity: usize,
    generation: u64,
}

impl PastMemory {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "memory capacity must be positive");
        PastMemory {
            items: Vec::new(),
            capacity,
            generation: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn items(&self) -> &[GameRecord] {
        &self.items
    }

    pub fn get(&self, idx: usize) -> &GameRecord {
        &self.items[idx]
    }

    /// Bumped on every mutation; lets read-side caches detect staleness.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Insert a terminated game, evicting the minimum-score-difference item
    /// (which may be the new record itself) once capacity is reached.
    pub fn insert_with_eviction(&mut self, rec: GameRecord) {
        self.items.push(rec);
        self.generation += 1;
        if self.items.len() > self.capacity {
            let mut min_idx = 0;
            for (i, item) in self.items.iter().enumerate() {
                if item.delta_r < self.items[min_idx].delta_r {
                    min_idx = i;
                }
            }
            self.items.remove(min_idx);
        }
    }

    /// One record per line: game name, opponent id, both action sequences as
    /// digit strings, then the three scores.
    pub fn save(&self, path: &Path, game_name: &str) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "# capacity {}", self.capacity)?;
        for rec in &self.items {
            let learner: String = rec
                .outcomes
                .iter()
                .map(|o| char::from_digit(o.a_learner.index() as u32, 10).unwrap())
                .collect();
            let opponent: String = rec
                .outcomes
                .iter()
                .map(|o| char::from_digit(o.a_opponent.index() as u32, 10).unwrap())
                .collect();
            writeln!(
                f,
                "{game_name}\t{}\t{learner}\t{opponent}\t{}\t{}\t{}",
                rec.opponent_id, rec.r_learner, rec.r_opponent, rec.delta_r
            )?;
        }
        Ok(())
    }

    /// Rebuild a memory from [`save`](Self::save) output. Rewards are
    /// re-derived from the named payoff table and cross-checked against the
    /// stored scores.
    pub fn load(path: &Path, matrix: &crate::game::PayoffMatrix) -> Result<PastMemory> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut capacity = None;
        let mut items = Vec::new();
        for (lineno, line) in f.lines().enumerate() {
            let line = line?;
            if let Some(rest) = line.strip_prefix("# capacity ") {
                capacity = Some(
                    rest.trim()
                        .parse::<usize>()
                        .map_err(|e| Error::Parse(format!("line {}: capacity: {e}", lineno + 1)))?,
                );
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 7 {
                return Err(Error::Parse(format!(
                    "line {}: expected 7 tab-separated fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            if fields[0] != matrix.game_name {
                return Err(Error::Parse(format!(
                    "line {}: record belongs to game '{}', memory is for '{}'",
                    lineno + 1,
                    fields[0],
                    matrix.game_name
                )));
            }
            let parse_seq = |s: &str| -> Result<Vec<Action>> {
                s.chars()
                    .map(|c| {
                        c.to_digit(10)
                            .map(|d| Action(d as u8))
                            .ok_or_else(|| Error::Parse(format!("bad action digit '{c}'")))
                    })
                    .collect()
            };
            let learner = parse_seq(fields[2])?;
            let opponent = parse_seq(fields[3])?;
            if learner.len() != opponent.len() {
                return Err(Error::Parse(format!(
                    "line {}: action sequences differ in length",
                    lineno + 1
                )));
            }
            let mut outcomes = Vec::with_capacity(learner.len());
            for (i, (&a_l, &a_o)) in learner.iter().zip(&opponent).enumerate() {
                outcomes.push(crate::game::play_stage(matrix, a_l, a_o, i + 1)?);
            }
            let rec = GameRecord::from_outcomes(outcomes, fields[1].to_string())?;
            let parse_f = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))
            };
            let (rl, ro, dr) = (parse_f(fields[4])?, parse_f(fields[5])?, parse_f(fields[6])?);
            if rec.r_learner != rl || rec.r_opponent != ro || rec.delta_r != dr {
                return Err(Error::Parse(format!(
                    "line {}: stored scores do not match the action sequences",
                    lineno + 1
                )));
            }
            items.push(rec);
        }
        let capacity = capacity.ok_or_else(|| Error::Parse("missing capacity header".into()))?;
        if items.len() > capacity {
            return Err(Error::Parse("memory file exceeds its own capacity".into()));
        }
        Ok(PastMemory {
            items,
            capacity,
            generation: 0,
        })
    }
}

/// A terminated game split into an m-turn prefix and the remaining suffix.
#[derive(Debug, Clone, PartialEq)]
pub struct HistorySplit {
    pub prefix: Vec<(Action, Action)>,
    pub suffix: Vec<(Action, Action)>,
}

/// Split a record after turn `m`, keeping both halves. Requires `1 <= m < n`.
pub fn split_at(rec: &GameRecord, m: usize) -> Result<HistorySplit> {
    let n = rec.len();
    if m < 1 || m >= n {
        return Err(Error::Domain(format!(
            "split point m={m} outside [1, {}] for a {n}-turn record",
            n - 1
        )));
    }
    let pairs: Vec<_> = rec.pairs().collect();
    Ok(HistorySplit {
        prefix: pairs[..m].to_vec(),
        suffix: pairs[m..].to_vec(),
    })
}

/// Which portion of the opponent's future the estimator is trained to encode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuffixMode {
    /// Only the opponent's move immediately after the split.
    OneStep,
    /// Every remaining opponent move.
    MultiStep,
}

impl SuffixMode {
    pub fn tag(self) -> &'static str {
        match self {
            SuffixMode::OneStep => "one_step",
            SuffixMode::MultiStep => "multi_step",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "one_step" => Ok(SuffixMode::OneStep),
            "multi_step" => Ok(SuffixMode::MultiStep),
            other => Err(Error::Config(format!("unknown suffix mode '{other}'"))),
        }
    }
}

/// Opponent actions drawn from the suffix of a split record.
pub fn suffix_opponent_actions(split: &HistorySplit, mode: SuffixMode) -> Result<Vec<Action>> {
    if split.suffix.is_empty() {
        return Err(Error::Domain("split has an empty suffix".into()));
    }
    Ok(match mode {
        SuffixMode::OneStep => vec![split.suffix[0].1],
        SuffixMode::MultiStep => split.suffix.iter().map(|&(_, o)| o).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{play_stage, PayoffMatrix};

    fn record_with_delta(delta: f64, tag: &str) -> GameRecord {
        // Synthetic two-stage record; scores are set directly so eviction
        // order is exactly controllable.
        let m = PayoffMatrix::prisoners_dilemma();
        let outcomes = vec![
            play_stage(&m, Action(0), Action(0), 1).unwrap(),
            play_stage(&m, Action(0), Action(0), 2).unwrap(),
        ];
        GameRecord {
            outcomes,
            r_learner: delta,
            r_opponent: 0.0,
            delta_r: delta,
            opponent_id: tag.to_string(),
        }
    }

    fn pd_record(learner: &str, opponent: &str) -> GameRecord {
        let m = PayoffMatrix::prisoners_dilemma();
        let outcomes: Vec<StageOutcome> = learner
            .chars()
            .zip(opponent.chars())
            .enumerate()
            .map(|(i, (l, o))| {
                let al = Action(if l == 'C' { 0 } else { 1 });
                let ao = Action(if o == 'C' { 0 } else { 1 });
                play_stage(&m, al, ao, i + 1).unwrap()
            })
            .collect();
        GameRecord::from_outcomes(outcomes, "scripted".into()).unwrap()
    }

    #[test]
    fn append_stage_tracks_turns() {
        let m = PayoffMatrix::prisoners_dilemma();
        let mut c = CurrentHistory::new();
        c.append_stage(&play_stage(&m, Action(0), Action(1), 1).unwrap()).unwrap();
        assert_eq!(c.len(), 1);
        let err = c.append_stage(&play_stage(&m, Action(0), Action(1), 5).unwrap());
        assert!(matches!(err, Err(Error::Sequencing(_))));
        for turn in 2..=50 {
            c.append_stage(&play_stage(&m, Action(1), Action(1), turn).unwrap()).unwrap();
        }
        assert_eq!(c.len(), 50);
    }

    #[test]
    fn insert_below_capacity_keeps_everything() {
        let mut p = PastMemory::new(3);
        p.insert_with_eviction(record_with_delta(0.5, "a"));
        p.insert_with_eviction(record_with_delta(-0.2, "b"));
        p.insert_with_eviction(record_with_delta(0.1, "c"));
        assert_eq!(p.len(), 3);
    }

    #[test]
    fn insert_at_capacity_evicts_global_minimum() {
        let mut p = PastMemory::new(2);
        p.insert_with_eviction(record_with_delta(0.5, "a"));
        p.insert_with_eviction(record_with_delta(-0.2, "b"));
        p.insert_with_eviction(record_with_delta(0.1, "c"));
        let deltas: Vec<f64> = p.items().iter().map(|r| r.delta_r).collect();
        assert_eq!(deltas, vec![0.5, 0.1]);
    }

    #[test]
    fn incoming_minimum_evicts_itself() {
        let mut p = PastMemory::new(2);
        p.insert_with_eviction(record_with_delta(0.5, "a"));
        p.insert_with_eviction(record_with_delta(0.4, "b"));
        p.insert_with_eviction(record_with_delta(-1.0, "c"));
        let deltas: Vec<f64> = p.items().iter().map(|r| r.delta_r).collect();
        assert_eq!(deltas, vec![0.5, 0.4]);
    }

    #[test]
    fn eviction_tie_break_removes_oldest() {
        let mut p = PastMemory::new(2);
        p.insert_with_eviction(record_with_delta(0.1, "old"));
        p.insert_with_eviction(record_with_delta(0.9, "keep"));
        p.insert_with_eviction(record_with_delta(0.1, "new"));
        let ids: Vec<&str> = p.items().iter().map(|r| r.opponent_id.as_str()).collect();
        assert_eq!(ids, vec!["keep", "new"]);
    }

    #[test]
    fn split_points_cover_range() {
        let rec = pd_record(&"C".repeat(50), &"D".repeat(50));
        let s = split_at(&rec, 1).unwrap();
        assert_eq!((s.prefix.len(), s.suffix.len()), (1, 49));
        let s = split_at(&rec, 49).unwrap();
        assert_eq!((s.prefix.len(), s.suffix.len()), (49, 1));
        assert!(split_at(&rec, 50).is_err());
        assert!(split_at(&rec, 0).is_err());
    }

    #[test]
    fn split_then_concat_is_identity() {
        let rec = pd_record("CDCDCC", "DDCCDC");
        for m in 1..rec.len() {
            let s = split_at(&rec, m).unwrap();
            let mut joined = s.prefix.clone();
            joined.extend_from_slice(&s.suffix);
            assert_eq!(joined, rec.pairs().collect::<Vec<_>>());
        }
    }

    #[test]
    fn suffix_extraction_modes() {
        let rec = pd_record("CCCD", "CDDC");
        let s = split_at(&rec, 2).unwrap();
        // suffix pairs: (C,D), (D,C)
        assert_eq!(
            suffix_opponent_actions(&s, SuffixMode::OneStep).unwrap(),
            vec![Action(1)]
        );
        assert_eq!(
            suffix_opponent_actions(&s, SuffixMode::MultiStep).unwrap(),
            vec![Action(1), Action(0)]
        );
        let empty = HistorySplit {
            prefix: vec![],
            suffix: vec![],
        };
        assert!(suffix_opponent_actions(&empty, SuffixMode::OneStep).is_err());
    }

    #[test]
    fn memory_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("memory.tsv");
        let m = PayoffMatrix::prisoners_dilemma();
        let mut p = PastMemory::new(10);
        p.insert_with_eviction(pd_record("CCDD", "CDCD"));
        p.insert_with_eviction(pd_record("DDDD", "CCCC"));
        p.save(&path, "pd").unwrap();
        let q = PastMemory::load(&path, &m).unwrap();
        assert_eq!(p.items(), q.items());
        assert_eq!(q.capacity(), 10);
        // Byte-identical re-serialization.
        let path2 = dir.path().join("memory2.tsv");
        q.save(&path2, "pd").unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }
}
