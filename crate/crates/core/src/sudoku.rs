//! Sudoku boards, the reference solver that defines solver order, an
//! exhaustive backtracking enumerator, and seeded puzzle generation.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported side. Givens are serialized one character per cell.
pub const MAX_SIDE: usize = 9;

/// A single placement; indices are 0-based, values are `1..=side`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Move {
    pub row: u8,
    pub col: u8,
    pub val: u8,
}

impl Move {
    pub fn new(row: u8, col: u8, val: u8) -> Self {
        Move { row, col, val }
    }

    pub fn cell(&self) -> (u8, u8) {
        (self.row, self.col)
    }
}

impl fmt::Display for Move {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.row, self.col, self.val)
    }
}

/// An ordered list of placements.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Trajectory {
    pub moves: Vec<Move>,
}

impl Trajectory {
    pub fn new(moves: Vec<Move>) -> Self {
        Trajectory { moves }
    }

    pub fn len(&self) -> usize {
        self.moves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.moves.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Move> {
        self.moves.iter()
    }

    /// Flat `[r, c, v, r, c, v, ...]` form used by the corpus files.
    pub fn to_flat(&self) -> Vec<u8> {
        self.moves
            .iter()
            .flat_map(|m| [m.row, m.col, m.val])
            .collect()
    }

    pub fn from_flat(flat: &[u8]) -> Result<Self> {
        if !flat.len().is_multiple_of(3) {
            return Err(Error::input(format!(
                "flat trajectory length {} is not a multiple of 3",
                flat.len()
            )));
        }
        Ok(Trajectory {
            moves: flat
                .chunks_exact(3)
                .map(|t| Move::new(t[0], t[1], t[2]))
                .collect(),
        })
    }

    /// Moves sorted into a canonical order, for multiset comparison.
    pub fn sorted_moves(&self) -> Vec<Move> {
        let mut m = self.moves.clone();
        m.sort_unstable();
        m
    }
}

impl FromIterator<Move> for Trajectory {
    fn from_iter<I: IntoIterator<Item = Move>>(iter: I) -> Self {
        Trajectory {
            moves: iter.into_iter().collect(),
        }
    }
}

/// A square Sudoku board; `0` marks a blank cell.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Grid {
    side: usize,
    box_size: usize,
    cells: Vec<u8>,
}

impl Grid {
    /// An empty board of the given side, which must be a perfect square.
    pub fn empty(side: usize) -> Result<Self> {
        let box_size = (side as f64).sqrt().round() as usize;
        if side == 0 || box_size * box_size != side || side > MAX_SIDE {
            return Err(Error::input(format!(
                "side {side} must be a perfect square in 1..={MAX_SIDE}"
            )));
        }
        Ok(Grid {
            side,
            box_size,
            cells: vec![0; side * side],
        })
    }

    /// Builds a board from row-major cell values and checks the Sudoku rules.
    pub fn from_cells(side: usize, cells: Vec<u8>) -> Result<Self> {
        let mut g = Grid::empty(side)?;
        if cells.len() != side * side {
            return Err(Error::input(format!(
                "expected {} cells, got {}",
                side * side,
                cells.len()
            )));
        }
        if let Some(&v) = cells.iter().find(|&&v| v as usize > side) {
            return Err(Error::input(format!("cell value {v} exceeds side {side}")));
        }
        g.cells = cells;
        if !g.is_consistent() {
            return Err(Error::input("grid violates a row, column or box constraint"));
        }
        Ok(g)
    }

    /// Parses the row-major digit string form (`0` = blank).
    pub fn from_givens_str(side: usize, s: &str) -> Result<Self> {
        let cells = s
            .chars()
            .map(|ch| {
                ch.to_digit(10)
                    .map(|d| d as u8)
                    .ok_or_else(|| Error::input(format!("invalid givens character {ch:?}")))
            })
            .collect::<Result<Vec<u8>>>()?;
        Grid::from_cells(side, cells)
    }

    pub fn to_givens_string(&self) -> String {
        self.cells
            .iter()
            .map(|&v| char::from_digit(v as u32, 10).expect("side <= 9"))
            .collect()
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn box_size(&self) -> usize {
        self.box_size
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.cells[row * self.side + col]
    }

    pub fn num_givens(&self) -> usize {
        self.cells.iter().filter(|&&v| v != 0).count()
    }

    pub fn num_blanks(&self) -> usize {
        self.cells.len() - self.num_givens()
    }

    pub fn is_complete(&self) -> bool {
        self.cells.iter().all(|&v| v != 0)
    }

    fn box_of(&self, row: usize, col: usize) -> usize {
        (row / self.box_size) * self.box_size + col / self.box_size
    }

    /// Givens as moves in row-major order.
    pub fn givens(&self) -> Vec<Move> {
        let n = self.side;
        (0..n * n)
            .filter(|&i| self.cells[i] != 0)
            .map(|i| Move::new((i / n) as u8, (i % n) as u8, self.cells[i]))
            .collect()
    }

    /// True when no nonzero value repeats in any row, column or box.
    pub fn is_consistent(&self) -> bool {
        Masks::build(self).is_some()
    }

    fn check_bounds(&self, m: &Move) -> Result<()> {
        let n = self.side;
        if m.row as usize >= n || m.col as usize >= n {
            return Err(Error::input(format!(
                "move {m} is outside a {n}x{n} grid"
            )));
        }
        if m.val == 0 || m.val as usize > n {
            return Err(Error::input(format!("move {m} has value outside 1..={n}")));
        }
        Ok(())
    }

    /// Places a move after checking it is legal.
    pub fn place(&mut self, m: Move) -> Result<()> {
        if !is_valid_placement(self, m)? {
            return Err(Error::input(format!("illegal placement {m}")));
        }
        self.cells[m.row as usize * self.side + m.col as usize] = m.val;
        Ok(())
    }

    /// Returns the board reached by placing every move of `traj` in order.
    pub fn apply(&self, traj: &Trajectory) -> Result<Grid> {
        let mut g = self.clone();
        for &m in traj.iter() {
            g.place(m)?;
        }
        Ok(g)
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..self.side {
            let row: Vec<String> = (0..self.side)
                .map(|c| match self.get(r, c) {
                    0 => ".".to_string(),
                    v => v.to_string(),
                })
                .collect();
            writeln!(f, "{}", row.join(" "))?;
        }
        Ok(())
    }
}

/// Used-value bitmasks per row, column and box.
#[derive(Clone)]
struct Masks {
    side: usize,
    box_size: usize,
    rows: Vec<u32>,
    cols: Vec<u32>,
    boxes: Vec<u32>,
    cells: Vec<u8>,
}

impl Masks {
    fn build(g: &Grid) -> Option<Self> {
        let n = g.side;
        let mut m = Masks {
            side: n,
            box_size: g.box_size,
            rows: vec![0; n],
            cols: vec![0; n],
            boxes: vec![0; n],
            cells: g.cells.clone(),
        };
        for r in 0..n {
            for c in 0..n {
                let v = g.get(r, c);
                if v == 0 {
                    continue;
                }
                let bit = 1u32 << v;
                let b = g.box_of(r, c);
                if (m.rows[r] | m.cols[c] | m.boxes[b]) & bit != 0 {
                    return None;
                }
                m.rows[r] |= bit;
                m.cols[c] |= bit;
                m.boxes[b] |= bit;
            }
        }
        Some(m)
    }

    #[inline]
    fn box_of(&self, r: usize, c: usize) -> usize {
        (r / self.box_size) * self.box_size + c / self.box_size
    }

    #[inline]
    fn full(&self) -> u32 {
        ((1u32 << (self.side + 1)) - 1) & !1
    }

    #[inline]
    fn candidates(&self, r: usize, c: usize) -> u32 {
        self.full() & !(self.rows[r] | self.cols[c] | self.boxes[self.box_of(r, c)])
    }

    #[inline]
    fn set(&mut self, r: usize, c: usize, v: u8) {
        let bit = 1u32 << v;
        let b = self.box_of(r, c);
        self.rows[r] |= bit;
        self.cols[c] |= bit;
        self.boxes[b] |= bit;
        self.cells[r * self.side + c] = v;
    }

    #[inline]
    fn unset(&mut self, r: usize, c: usize, v: u8) {
        let bit = !(1u32 << v);
        let b = self.box_of(r, c);
        self.rows[r] &= bit;
        self.cols[c] &= bit;
        self.boxes[b] &= bit;
        self.cells[r * self.side + c] = 0;
    }

    fn to_grid(&self) -> Grid {
        Grid {
            side: self.side,
            box_size: self.box_size,
            cells: self.cells.clone(),
        }
    }
}

fn bits(mask: u32) -> impl Iterator<Item = u8> {
    (1..32u8).filter(move |&v| mask & (1 << v) != 0)
}

/// True iff `m` targets a blank cell and its value conflicts with nothing in
/// the same row, column or box.
pub fn is_valid_placement(grid: &Grid, m: Move) -> Result<bool> {
    grid.check_bounds(&m)?;
    let (r, c) = (m.row as usize, m.col as usize);
    if grid.get(r, c) != 0 {
        return Ok(false);
    }
    let n = grid.side;
    let b = grid.box_of(r, c);
    for i in 0..n {
        if grid.get(r, i) == m.val || grid.get(i, c) == m.val {
            return Ok(false);
        }
        let br = (b / grid.box_size) * grid.box_size + i / grid.box_size;
        let bc = (b % grid.box_size) * grid.box_size + i % grid.box_size;
        if grid.get(br, bc) == m.val {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Solves `puzzle` the way the reference solver does and returns the fill
/// order.
///
/// At each step the blank cell with the fewest candidates is filled, ties
/// broken row-major. A cell with a single candidate is filled directly;
/// otherwise the solver branches depth-first on that cell, trying values in
/// ascending order. Only the moves on the successful branch are recorded.
pub fn solve_reference(puzzle: &Grid) -> Result<Trajectory> {
    let mut masks = Masks::build(puzzle).ok_or(Error::NoSolution)?;
    let mut moves = Vec::with_capacity(puzzle.num_blanks());
    if reference_search(&mut masks, &mut moves) {
        Ok(Trajectory::new(moves))
    } else {
        Err(Error::NoSolution)
    }
}

fn reference_search(masks: &mut Masks, moves: &mut Vec<Move>) -> bool {
    let n = masks.side;
    loop {
        let mut best: Option<(usize, usize, u32)> = None;
        for r in 0..n {
            for c in 0..n {
                if masks.cells[r * n + c] != 0 {
                    continue;
                }
                let cand = masks.candidates(r, c);
                let count = cand.count_ones();
                if best.is_none_or(|(_, _, b)| count < b.count_ones()) {
                    best = Some((r, c, cand));
                    if count == 0 {
                        return false;
                    }
                }
            }
        }
        let Some((r, c, cand)) = best else {
            return true;
        };
        if cand.count_ones() == 1 {
            let v = bits(cand).next().expect("one candidate");
            masks.set(r, c, v);
            moves.push(Move::new(r as u8, c as u8, v));
            continue;
        }
        for v in bits(cand) {
            let snapshot = masks.clone();
            let depth = moves.len();
            masks.set(r, c, v);
            moves.push(Move::new(r as u8, c as u8, v));
            if reference_search(masks, moves) {
                return true;
            }
            *masks = snapshot;
            moves.truncate(depth);
        }
        return false;
    }
}

/// Enumerates up to `limit` complete solutions by plain backtracking over
/// blank cells in row-major order with values ascending.
pub fn solve_all(puzzle: &Grid, limit: usize) -> Vec<Grid> {
    let mut out = Vec::new();
    if limit == 0 {
        return out;
    }
    let Some(mut masks) = Masks::build(puzzle) else {
        return out;
    };
    let n = puzzle.side;
    let blanks: Vec<(usize, usize)> = (0..n * n)
        .filter(|&i| puzzle.cells[i] == 0)
        .map(|i| (i / n, i % n))
        .collect();
    enumerate(&mut masks, &blanks, 0, limit, &mut out);
    out
}

fn enumerate(
    masks: &mut Masks,
    blanks: &[(usize, usize)],
    depth: usize,
    limit: usize,
    out: &mut Vec<Grid>,
) {
    if depth == blanks.len() {
        out.push(masks.to_grid());
        return;
    }
    let (r, c) = blanks[depth];
    for v in bits(masks.candidates(r, c)) {
        masks.set(r, c, v);
        enumerate(masks, blanks, depth + 1, limit, out);
        masks.unset(r, c, v);
        if out.len() >= limit {
            return;
        }
    }
}

/// Number of solutions, capped at `limit`.
pub fn count_solutions(puzzle: &Grid, limit: usize) -> usize {
    solve_all(puzzle, limit).len()
}

/// Generates a puzzle with a unique solution together with its solver-order
/// trajectory. Deterministic in `(side, seed, target_givens)`.
///
/// A complete board is filled by randomized backtracking, then cells are
/// cleared in a seeded random order, skipping any removal that would admit a
/// second solution, until `target_givens` remain or nothing more can go.
pub fn generate_puzzle(side: usize, seed: u64, target_givens: usize) -> Result<(Grid, Trajectory)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let empty = Grid::empty(side)?;
    let mut masks = Masks::build(&empty).expect("empty grid is consistent");
    if !random_fill(&mut masks, 0, &mut rng) {
        unreachable!("an empty board always has a completion");
    }
    let mut grid = masks.to_grid();

    let mut order: Vec<usize> = (0..side * side).collect();
    order.shuffle(&mut rng);
    let mut givens = side * side;
    for idx in order {
        if givens <= target_givens {
            break;
        }
        let v = grid.cells[idx];
        grid.cells[idx] = 0;
        if count_solutions(&grid, 2) == 1 {
            givens -= 1;
        } else {
            grid.cells[idx] = v;
        }
    }
    let traj = solve_reference(&grid)?;
    Ok((grid, traj))
}

fn random_fill(masks: &mut Masks, idx: usize, rng: &mut ChaCha8Rng) -> bool {
    let n = masks.side;
    if idx == n * n {
        return true;
    }
    let (r, c) = (idx / n, idx % n);
    let mut vals: Vec<u8> = bits(masks.candidates(r, c)).collect();
    vals.shuffle(rng);
    for v in vals {
        masks.set(r, c, v);
        if random_fill(masks, idx + 1, rng) {
            return true;
        }
        masks.unset(r, c, v);
    }
    false
}

/// Uniformly permutes the move order with a seeded Fisher-Yates shuffle.
pub fn shuffle_trajectory(traj: &Trajectory, seed: u64) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut moves = traj.moves.clone();
    moves.shuffle(&mut rng);
    Trajectory::new(moves)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid9() -> Grid {
        Grid::empty(9).unwrap()
    }

    fn with(side: usize, placed: &[(usize, usize, u8)]) -> Grid {
        let mut cells = vec![0; side * side];
        for &(r, c, v) in placed {
            cells[r * side + c] = v;
        }
        Grid::from_cells(side, cells).unwrap()
    }

    #[test]
    fn placement_on_empty_grid() {
        assert!(is_valid_placement(&grid9(), Move::new(0, 0, 5)).unwrap());
    }

    #[test]
    fn placement_row_conflict() {
        let g = with(9, &[(0, 1, 5)]);
        assert!(!is_valid_placement(&g, Move::new(0, 0, 5)).unwrap());
    }

    #[test]
    fn placement_box_conflict() {
        let g = with(9, &[(1, 1, 5)]);
        assert!(!is_valid_placement(&g, Move::new(0, 0, 5)).unwrap());
    }

    #[test]
    fn placement_column_conflict_and_filled_cell() {
        let g = with(9, &[(4, 0, 5), (0, 0, 3)]);
        assert!(!is_valid_placement(&g, Move::new(8, 0, 5)).unwrap());
        assert!(!is_valid_placement(&g, Move::new(0, 0, 7)).unwrap());
    }

    #[test]
    fn placement_out_of_bounds_is_input_error() {
        let g = grid9();
        assert!(matches!(
            is_valid_placement(&g, Move::new(9, 0, 1)),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            is_valid_placement(&g, Move::new(0, 0, 10)),
            Err(Error::Input(_))
        ));
        assert!(is_valid_placement(&g, Move::new(0, 0, 0)).is_err());
    }

    #[test]
    fn non_square_side_rejected() {
        assert!(Grid::empty(6).is_err());
        assert!(Grid::empty(16).is_err());
        assert!(Grid::empty(4).is_ok());
    }

    #[test]
    fn conflicting_cells_rejected() {
        let mut cells = vec![0; 16];
        cells[0] = 1;
        cells[1] = 1;
        assert!(Grid::from_cells(4, cells).is_err());
    }

    #[test]
    fn empty_4x4_has_288_solutions() {
        let g = Grid::empty(4).unwrap();
        assert_eq!(solve_all(&g, 300).len(), 288);
        assert_eq!(solve_all(&g, 5).len(), 5);
    }

    #[test]
    fn solved_grid_enumerates_itself() {
        let (puzzle, traj) = generate_puzzle(4, 3, 6).unwrap();
        let solved = puzzle.apply(&traj).unwrap();
        assert_eq!(solve_all(&solved, 2), vec![solved.clone()]);
        assert!(solve_reference(&solved).unwrap().is_empty());
    }

    #[test]
    fn contradictory_givens_have_no_solutions() {
        // Row 0 needs a 4 at (0,3) but column 3 already holds one.
        let g = with(4, &[(0, 0, 1), (0, 1, 2), (0, 2, 3), (2, 3, 4)]);
        assert!(solve_all(&g, 10).is_empty());
        assert!(matches!(solve_reference(&g), Err(Error::NoSolution)));
    }

    #[test]
    fn single_blank_is_forced() {
        let (puzzle, traj) = generate_puzzle(9, 11, 30).unwrap();
        let mut solved = puzzle.apply(&traj).unwrap();
        let hole = traj.moves[17];
        solved.cells[hole.row as usize * 9 + hole.col as usize] = 0;
        let t = solve_reference(&solved).unwrap();
        assert_eq!(t.moves, vec![hole]);
    }

    #[test]
    fn reference_ties_break_row_major() {
        // Every cell of the empty 4x4 board has four candidates: the solver
        // branches on (0,0) and tries 1 first.
        let t = solve_reference(&Grid::empty(4).unwrap()).unwrap();
        assert_eq!(t.moves[0], Move::new(0, 0, 1));
        assert_eq!(t.len(), 16);
    }

    #[test]
    fn generation_is_deterministic_and_unique() {
        let a = generate_puzzle(9, 1, 30).unwrap();
        let b = generate_puzzle(9, 1, 30).unwrap();
        assert_eq!(a, b);
        assert_eq!(solve_all(&a.0, 2).len(), 1);
        assert_eq!(a.1.len(), 81 - a.0.num_givens());
        assert!(a.0.num_givens() >= 30);
    }

    #[test]
    fn shuffle_edge_cases() {
        assert!(shuffle_trajectory(&Trajectory::default(), 5).is_empty());
        let one = Trajectory::new(vec![Move::new(1, 2, 3)]);
        assert_eq!(shuffle_trajectory(&one, 5), one);
    }

    #[test]
    fn givens_string_round_trip() {
        let (p, _) = generate_puzzle(4, 9, 6).unwrap();
        let s = p.to_givens_string();
        assert_eq!(s.len(), 16);
        assert_eq!(Grid::from_givens_str(4, &s).unwrap(), p);
    }
}
