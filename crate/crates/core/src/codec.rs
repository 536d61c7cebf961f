//! Token layout for puzzles and trajectories.
//!
//! A sequence is `BOS, (r c v)* for each given in row-major order, SEP,
//! (r c v)* for each move of the trajectory, EOS`, right-padded with `PAD`.
//! Rows, columns and values share the digit tokens `0..=side`.

use std::collections::HashSet;

use crate::dataset::{Order, PuzzleRecord};
use crate::error::{Error, Result};
use crate::sudoku::{Grid, Move, Trajectory};
use crate::util::sha256_hex;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const SEP: u32 = 2;
pub const EOS: u32 = 3;
const DIGIT_BASE: u32 = 4;

/// Completion budget for the largest 9x9 puzzles (62 blanks, 3 tokens each).
pub const DEFAULT_MAX_NEW_TOKENS: usize = 186;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    side: usize,
}

impl Vocabulary {
    pub fn new(side: usize) -> Result<Self> {
        Grid::empty(side)?;
        Ok(Vocabulary { side })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Four special tokens plus the digits `0..=side`.
    pub fn size(&self) -> usize {
        DIGIT_BASE as usize + self.side + 1
    }

    pub fn digit(&self, d: u8) -> u32 {
        debug_assert!(d as usize <= self.side);
        DIGIT_BASE + d as u32
    }

    pub fn as_digit(&self, id: u32) -> Option<u8> {
        let d = id.checked_sub(DIGIT_BASE)? as usize;
        (d <= self.side).then_some(d as u8)
    }

    pub fn token_name(&self, id: u32) -> Option<String> {
        match id {
            PAD => Some("<pad>".into()),
            BOS => Some("<bos>".into()),
            SEP => Some("<sep>".into()),
            EOS => Some("<eos>".into()),
            _ => self.as_digit(id).map(|d| d.to_string()),
        }
    }

    /// Longest possible sequence: every cell appears once as a triplet, plus
    /// BOS, SEP and EOS.
    pub fn max_seq_len(&self) -> usize {
        3 * self.side * self.side + 3
    }

    /// `id<TAB>token` per line.
    pub fn dump(&self) -> String {
        (0..self.size() as u32)
            .map(|id| format!("{id}\t{}\n", self.token_name(id).expect("dense ids")))
            .collect()
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.dump().as_bytes())
    }
}

/// Encoded sequence with a loss mask over target tokens.
///
/// `loss_mask[i]` marks token `ids[i]` as a prediction target (it is scored
/// against the logits at position `i - 1`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub loss_mask: Vec<bool>,
    pub prompt_len: usize,
    /// Length before padding.
    pub len: usize,
}

impl TokenSequence {
    pub fn content(&self) -> &[u32] {
        &self.ids[..self.len]
    }

    pub fn completion(&self) -> &[u32] {
        &self.ids[self.prompt_len..self.len]
    }

    pub fn num_targets(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

fn push_move(out: &mut Vec<u32>, vocab: &Vocabulary, m: &Move) {
    out.extend([vocab.digit(m.row), vocab.digit(m.col), vocab.digit(m.val)]);
}

/// `BOS`, the givens as triplets, `SEP`.
pub fn encode_prompt(puzzle: &Grid, vocab: &Vocabulary) -> Result<Vec<u32>> {
    if puzzle.side() != vocab.side() {
        return Err(Error::input(format!(
            "puzzle side {} does not match vocabulary side {}",
            puzzle.side(),
            vocab.side()
        )));
    }
    let givens = puzzle.givens();
    let mut ids = Vec::with_capacity(givens.len() * 3 + 2);
    ids.push(BOS);
    for m in &givens {
        push_move(&mut ids, vocab, m);
    }
    ids.push(SEP);
    Ok(ids)
}

/// Completion tokens for a trajectory, terminated by `EOS`.
pub fn encode_trajectory(traj: &Trajectory, vocab: &Vocabulary) -> Vec<u32> {
    let mut ids = Vec::with_capacity(traj.len() * 3 + 1);
    for m in traj.iter() {
        push_move(&mut ids, vocab, m);
    }
    ids.push(EOS);
    ids
}

pub fn encode(
    record: &PuzzleRecord,
    order: Order,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<TokenSequence> {
    let mut ids = encode_prompt(&record.puzzle, vocab)?;
    let prompt_len = ids.len();
    ids.extend(encode_trajectory(record.trajectory(order), vocab));
    let len = ids.len();
    if len > max_len {
        return Err(Error::SequenceTooLong { len, max: max_len });
    }
    let mut loss_mask = vec![false; max_len];
    loss_mask[prompt_len..len].iter_mut().for_each(|m| *m = true);
    ids.resize(max_len, PAD);
    Ok(TokenSequence {
        ids,
        loss_mask,
        prompt_len,
        len,
    })
}

/// Parses generated tokens back into moves.
///
/// Tokens after the first `EOS` are ignored; the rest is read in groups of
/// three. A group is dropped if any token is not a digit, the row or column
/// is off the board, the value is outside `1..=side`, or the cell already
/// appeared in an earlier kept group. A trailing partial group is dropped.
/// Never fails.
pub fn decode_completion(ids: &[u32], vocab: &Vocabulary) -> Trajectory {
    let end = ids.iter().position(|&t| t == EOS).unwrap_or(ids.len());
    let side = vocab.side();
    let mut seen = HashSet::new();
    ids[..end]
        .chunks_exact(3)
        .filter_map(|t| {
            let r = vocab.as_digit(t[0])?;
            let c = vocab.as_digit(t[1])?;
            let v = vocab.as_digit(t[2])?;
            let ok = (r as usize) < side && (c as usize) < side && v >= 1;
            (ok && seen.insert((r, c))).then_some(Move::new(r, c, v))
        })
        .collect()
}
