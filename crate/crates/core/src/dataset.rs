//! Train/validation/test corpora of puzzles with solver-order and
//! random-order trajectories, stored as JSON lines.

use std::collections::HashSet;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::sudoku::{self, Grid, Trajectory};
use crate::util::{derive_seed, rng_for};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.as_str())
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            _ => Err(Error::input(format!("unknown split {s:?}"))),
        }
    }
}

/// Which trajectory of a record is used as the training target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Order {
    Solver,
    Random,
}

impl Order {
    pub fn as_str(self) -> &'static str {
        match self {
            Order::Solver => "solver",
            Order::Random => "random",
        }
    }
}

impl FromStr for Order {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "solver" => Ok(Order::Solver),
            "random" => Ok(Order::Random),
            _ => Err(Error::input(format!("unknown order {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PuzzleRecord {
    pub id: String,
    pub puzzle: Grid,
    pub solver_order: Trajectory,
    pub random_order: Trajectory,
    pub split: Split,
}

impl PuzzleRecord {
    pub fn trajectory(&self, order: Order) -> &Trajectory {
        match order {
            Order::Solver => &self.solver_order,
            Order::Random => &self.random_order,
        }
    }

    pub fn side(&self) -> usize {
        self.puzzle.side()
    }

    /// Checks that both trajectories complete the puzzle and share moves.
    pub fn validate(&self) -> Result<()> {
        if self.solver_order.sorted_moves() != self.random_order.sorted_moves() {
            return Err(Error::input(
                "solver_order and random_order differ as move multisets",
            ));
        }
        for traj in [&self.solver_order, &self.random_order] {
            let done = self.puzzle.apply(traj)?;
            if !done.is_complete() {
                return Err(Error::input("trajectory does not complete the puzzle"));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    id: String,
    split: Split,
    side: usize,
    givens: String,
    solver_order: Vec<u8>,
    random_order: Vec<u8>,
}

impl From<&PuzzleRecord> for RecordLine {
    fn from(r: &PuzzleRecord) -> Self {
        RecordLine {
            id: r.id.clone(),
            split: r.split,
            side: r.puzzle.side(),
            givens: r.puzzle.to_givens_string(),
            solver_order: r.solver_order.to_flat(),
            random_order: r.random_order.to_flat(),
        }
    }
}

impl TryFrom<RecordLine> for PuzzleRecord {
    type Error = Error;

    fn try_from(l: RecordLine) -> Result<Self> {
        let rec = PuzzleRecord {
            id: l.id,
            puzzle: Grid::from_givens_str(l.side, &l.givens)?,
            solver_order: Trajectory::from_flat(&l.solver_order)?,
            random_order: Trajectory::from_flat(&l.random_order)?,
            split: l.split,
        };
        rec.validate()?;
        Ok(rec)
    }
}

pub fn record_to_json(r: &PuzzleRecord) -> String {
    serde_json::to_string(&RecordLine::from(r)).expect("record serializes")
}

pub fn record_from_json(line: &str) -> Result<PuzzleRecord> {
    let l: RecordLine = serde_json::from_str(line).map_err(|e| Error::input(e.to_string()))?;
    PuzzleRecord::try_from(l)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub side: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub givens_min: usize,
    pub givens_max: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            side: 9,
            n_train: 2000,
            n_val: 512,
            n_test: 512,
            givens_min: 30,
            givens_max: 36,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    /// Desk-scale 4x4 corpus. Four to six blanks per puzzle keep digit
    /// values learnable by the small model within minutes of CPU time.
    pub fn small(seed: u64) -> Self {
        CorpusConfig {
            side: 4,
            n_train: 2000,
            n_val: 128,
            n_test: 128,
            givens_min: 10,
            givens_max: 12,
            seed,
        }
    }

    fn check(&self) -> Result<()> {
        Grid::empty(self.side)?;
        let cells = self.side * self.side;
        if self.givens_min > self.givens_max || self.givens_max > cells {
            return Err(Error::input(format!(
                "givens range {}..={} invalid for {} cells",
                self.givens_min, self.givens_max, cells
            )));
        }
        Ok(())
    }
}

/// An in-memory corpus split three ways.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub train: Vec<PuzzleRecord>,
    pub validation: Vec<PuzzleRecord>,
    pub test: Vec<PuzzleRecord>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[PuzzleRecord] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<PuzzleRecord> {
        match split {
            Split::Train => &mut self.train,
            Split::Validation => &mut self.validation,
            Split::Test => &mut self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn side(&self) -> Option<usize> {
        Split::ALL
            .iter()
            .find_map(|&s| self.split(s).first().map(|r| r.side()))
    }

    /// Writes `train.jsonl`, `validation.jsonl` and `test.jsonl` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths = Vec::new();
        for split in Split::ALL {
            let path = dir.join(split.file_name());
            write_records(&path, self.split(split))?;
            paths.push(path);
        }
        Ok(paths)
    }

    /// Loads the three split files from `dir`; a missing file is an error.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut c = Corpus::default();
        for split in Split::ALL {
            let path = dir.join(split.file_name());
            let records = load_corpus(&path)?.collect::<Result<Vec<_>>>()?;
            *c.split_mut(split) = records;
        }
        Ok(c)
    }
}

pub fn write_records(path: &Path, records: &[PuzzleRecord]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        writeln!(w, "{}", record_to_json(r)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Streams records from a JSONL file in file order. Blank lines are skipped.
pub fn load_corpus(path: &Path) -> Result<impl Iterator<Item = Result<PuzzleRecord>>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let path = path.to_path_buf();
    Ok(BufReader::new(f)
        .lines()
        .enumerate()
        .filter_map(move |(i, line)| {
            let line = match line {
                Ok(l) => l,
                Err(e) => return Some(Err(Error::io(&path, e))),
            };
            if line.trim().is_empty() {
                return None;
            }
            Some(record_from_json(&line).map_err(|e| Error::Parse {
                path: path.clone(),
                line: i + 1,
                reason: e.to_string(),
            }))
        }))
}

struct Candidate {
    puzzle: Grid,
    solver_order: Trajectory,
    random_order: Trajectory,
}

fn candidate(config: &CorpusConfig, k: u64) -> Result<Candidate> {
    let mut rng = rng_for(config.seed, "givens", k);
    let givens = rng.random_range(config.givens_min..=config.givens_max);
    let (puzzle, solver_order) =
        sudoku::generate_puzzle(config.side, derive_seed(config.seed, "puzzle", k), givens)?;
    let random_order =
        sudoku::shuffle_trajectory(&solver_order, derive_seed(config.seed, "shuffle", k));
    Ok(Candidate {
        puzzle,
        solver_order,
        random_order,
    })
}

/// Generates a corpus in memory.
///
/// Candidates are produced from per-index seed streams (in parallel when
/// `exec` allows) and accepted strictly in index order, skipping any puzzle
/// already seen, so the result is independent of the execution mode and the
/// splits are disjoint by puzzle encoding.
pub fn generate_corpus(config: &CorpusConfig, exec: Execution) -> Result<Corpus> {
    config.check()?;
    let quotas = [
        (Split::Train, config.n_train),
        (Split::Validation, config.n_val),
        (Split::Test, config.n_test),
    ];
    let total: usize = quotas.iter().map(|q| q.1).sum();
    let mut corpus = Corpus::default();
    let mut seen = HashSet::new();
    let mut accepted = 0usize;
    let mut next = 0u64;
    let mut misses = 0usize;
    while accepted < total {
        let chunk = ((total - accepted) * 5 / 4 + 8) as u64;
        let ks: Vec<u64> = (next..next + chunk).collect();
        next += chunk;
        let cands = exec.try_map(&ks, |&k| candidate(config, k))?;
        for cand in cands {
            if accepted == total {
                break;
            }
            if !seen.insert(cand.puzzle.cells().to_vec()) {
                misses += 1;
                if misses > 100 * total + 1000 {
                    return Err(Error::input(
                        "could not find enough distinct puzzles for the requested corpus",
                    ));
                }
                continue;
            }
            let (split, index) = locate(&quotas, accepted);
            corpus.split_mut(split).push(PuzzleRecord {
                id: format!("{}-{:06}", split.as_str(), index),
                puzzle: cand.puzzle,
                solver_order: cand.solver_order,
                random_order: cand.random_order,
                split,
            });
            accepted += 1;
        }
    }
    Ok(corpus)
}

fn locate(quotas: &[(Split, usize)], mut n: usize) -> (Split, usize) {
    for &(split, q) in quotas {
        if n < q {
            return (split, n);
        }
        n -= q;
    }
    unreachable!("index within total quota")
}

/// Generates a corpus and writes the three split files into `dir`.
pub fn build_corpus(config: &CorpusConfig, dir: &Path, exec: Execution) -> Result<Vec<PathBuf>> {
    generate_corpus(config, exec)?.write_dir(dir)
}

/// Full oracle re-validation: structural checks plus solution uniqueness and
/// agreement of the replayed trajectory with the enumerated solution.
pub fn oracle_check(record: &PuzzleRecord) -> Result<()> {
    record.validate()?;
    let sols = sudoku::solve_all(&record.puzzle, 2);
    if sols.len() != 1 {
        return Err(Error::input(format!(
            "{}: expected a unique solution, found {}",
            record.id,
            sols.len()
        )));
    }
    if record.puzzle.apply(&record.solver_order)? != sols[0] {
        return Err(Error::input(format!(
            "{}: solver trajectory disagrees with the enumerated solution",
            record.id
        )));
    }
    Ok(())
}
