//! Periodic square-lattice geometry for the toric code.
//!
//! Spins live on bonds. Bond indices follow `2 * (y * lx + x) + o` with `o = 0`
//! for the horizontal bond `h(x, y)` (from vertex `(x, y)` to `(x + 1, y)`) and
//! `o = 1` for the vertical bond `v(x, y)` (from `(x, y)` to `(x, y + 1)`).
//!
//! Cells are numbered plaquettes first (`y * lx + x`), then stars
//! (`lx * ly + y * lx + x`). Each cell lists its four bonds in a fixed order:
//!
//! * plaquette `P(x, y) = [h(x, y), h(x, y+1), v(x, y), v(x+1, y)]`
//! * star `S(x, y) = [h(x, y), h(x-1, y), v(x, y), v(x, y-1)]`

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Orientation {
    Horizontal,
    Vertical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellKind {
    Plaquette,
    Star,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    X,
    Y,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LoopKind {
    /// Path along bonds; incidences pair bonds with stars.
    Direct,
    /// Path on the dual lattice crossing bonds; incidences pair bonds with plaquettes.
    Dual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LoopShape {
    /// Non-contractible straight loop winding along the given direction.
    Straight(Direction),
    /// Contractible elementary loop around the given cell.
    Around(usize),
}

/// A closed loop on the direct or dual lattice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopPath {
    pub kind: LoopKind,
    pub shape: LoopShape,
    /// Bonds traversed (direct) or crossed (dual), in path order.
    pub bonds: Vec<usize>,
    /// `(cell, bond)` pairs: every bond paired with both of its cells that lie on the loop.
    pub incidences: Vec<(usize, usize)>,
}

impl LoopPath {
    pub fn len(&self) -> usize {
        self.bonds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bonds.is_empty()
    }

    pub fn is_contractible(&self) -> bool {
        matches!(self.shape, LoopShape::Around(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LatticeDims", into = "LatticeDims")]
pub struct Lattice {
    lx: usize,
    ly: usize,
    cell_bonds: Vec<[usize; 4]>,
    /// Per bond: `[(cell, slot); 4]` = two plaquettes then two stars.
    bond_cells: Vec<[(usize, usize); 4]>,
}

/// Serialized form of a [`Lattice`]; index maps are rebuilt on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticeDims {
    pub lx: usize,
    pub ly: usize,
}

impl TryFrom<LatticeDims> for Lattice {
    type Error = Error;

    fn try_from(d: LatticeDims) -> Result<Self> {
        Lattice::new(d.lx, d.ly)
    }
}

impl From<Lattice> for LatticeDims {
    fn from(l: Lattice) -> Self {
        LatticeDims { lx: l.lx, ly: l.ly }
    }
}

impl Lattice {
    pub fn new(lx: usize, ly: usize) -> Result<Self> {
        if lx < 2 || ly < 2 {
            return Err(Error::DegenerateLattice { lx, ly });
        }
        let mut lat = Lattice {
            lx,
            ly,
            cell_bonds: Vec::new(),
            bond_cells: Vec::new(),
        };
        let n_cells = 2 * lx * ly;
        let mut cell_bonds = Vec::with_capacity(n_cells);
        for y in 0..ly as i64 {
            for x in 0..lx as i64 {
                cell_bonds.push([lat.h(x, y), lat.h(x, y + 1), lat.v(x, y), lat.v(x + 1, y)]);
            }
        }
        for y in 0..ly as i64 {
            for x in 0..lx as i64 {
                cell_bonds.push([lat.h(x, y), lat.h(x - 1, y), lat.v(x, y), lat.v(x, y - 1)]);
            }
        }
        let mut plaq: Vec<Vec<(usize, usize)>> = vec![Vec::new(); 2 * lx * ly];
        let mut star: Vec<Vec<(usize, usize)>> = vec![Vec::new(); 2 * lx * ly];
        for (cell, bonds) in cell_bonds.iter().enumerate() {
            for (slot, &b) in bonds.iter().enumerate() {
                if cell < lx * ly {
                    plaq[b].push((cell, slot));
                } else {
                    star[b].push((cell, slot));
                }
            }
        }
        lat.bond_cells = plaq
            .iter()
            .zip(&star)
            .map(|(p, s)| {
                debug_assert_eq!(p.len(), 2);
                debug_assert_eq!(s.len(), 2);
                [p[0], p[1], s[0], s[1]]
            })
            .collect();
        lat.cell_bonds = cell_bonds;
        Ok(lat)
    }

    pub fn lx(&self) -> usize {
        self.lx
    }

    pub fn ly(&self) -> usize {
        self.ly
    }

    pub fn n_spins(&self) -> usize {
        2 * self.lx * self.ly
    }

    pub fn n_plaquettes(&self) -> usize {
        self.lx * self.ly
    }

    pub fn n_stars(&self) -> usize {
        self.lx * self.ly
    }

    pub fn n_cells(&self) -> usize {
        2 * self.lx * self.ly
    }

    fn wrap(v: i64, n: usize) -> usize {
        v.rem_euclid(n as i64) as usize
    }

    /// Horizontal bond from vertex `(x, y)` to `(x + 1, y)`; coordinates are periodic.
    pub fn h(&self, x: i64, y: i64) -> usize {
        2 * (Self::wrap(y, self.ly) * self.lx + Self::wrap(x, self.lx))
    }

    /// Vertical bond from vertex `(x, y)` to `(x, y + 1)`.
    pub fn v(&self, x: i64, y: i64) -> usize {
        self.h(x, y) + 1
    }

    /// Inverse of the bond index map.
    pub fn bond_coords(&self, bond: usize) -> (usize, usize, Orientation) {
        let site = bond / 2;
        let o = if bond % 2 == 0 {
            Orientation::Horizontal
        } else {
            Orientation::Vertical
        };
        (site % self.lx, site / self.lx, o)
    }

    pub fn plaquette(&self, x: i64, y: i64) -> usize {
        Self::wrap(y, self.ly) * self.lx + Self::wrap(x, self.lx)
    }

    pub fn star(&self, x: i64, y: i64) -> usize {
        self.lx * self.ly + self.plaquette(x, y)
    }

    pub fn cell_kind(&self, cell: usize) -> CellKind {
        if cell < self.lx * self.ly {
            CellKind::Plaquette
        } else {
            CellKind::Star
        }
    }

    pub fn cell_coords(&self, cell: usize) -> (usize, usize) {
        let c = cell % (self.lx * self.ly);
        (c % self.lx, c / self.lx)
    }

    pub fn check_cell(&self, cell: usize) -> Result<()> {
        if cell < self.n_cells() {
            Ok(())
        } else {
            Err(Error::InvalidCell(cell))
        }
    }

    #[inline]
    pub fn cell_bonds(&self, cell: usize) -> &[usize; 4] {
        &self.cell_bonds[cell]
    }

    /// All `(cell, slot)` pairs containing `bond`: two plaquettes, then two stars.
    #[inline]
    pub fn bond_cells(&self, bond: usize) -> &[(usize, usize); 4] {
        &self.bond_cells[bond]
    }

    pub fn bond_plaquettes(&self, bond: usize) -> [usize; 2] {
        let c = &self.bond_cells[bond];
        [c[0].0, c[1].0]
    }

    pub fn bond_stars(&self, bond: usize) -> [usize; 2] {
        let c = &self.bond_cells[bond];
        [c[2].0, c[3].0]
    }

    /// Slot (0..4) of `bond` within `cell`.
    pub fn slot_of(&self, cell: usize, bond: usize) -> Result<usize> {
        self.check_cell(cell)?;
        self.cell_bonds[cell]
            .iter()
            .position(|&b| b == bond)
            .ok_or(Error::BondNotInCell { cell, bond })
    }

    pub fn plaquettes(&self) -> std::ops::Range<usize> {
        0..self.lx * self.ly
    }

    pub fn stars(&self) -> std::ops::Range<usize> {
        self.lx * self.ly..2 * self.lx * self.ly
    }

    /// Straight non-contractible dual loops. Direction `X` at row `y` crosses the
    /// vertical bonds `v(x, y)`; direction `Y` at column `x` crosses `h(x, y)`.
    pub fn straight_dual_loops(&self, direction: Direction) -> Vec<LoopPath> {
        let (lx, ly) = (self.lx as i64, self.ly as i64);
        match direction {
            Direction::X => (0..ly)
                .map(|y| self.dual_loop((0..lx).map(|x| self.v(x, y)).collect(), direction))
                .collect(),
            Direction::Y => (0..lx)
                .map(|x| self.dual_loop((0..ly).map(|y| self.h(x, y)).collect(), direction))
                .collect(),
        }
    }

    /// Straight non-contractible direct loops. Direction `X` at row `y` runs along
    /// `h(x, y)`; direction `Y` at column `x` runs along `v(x, y)`.
    pub fn straight_direct_loops(&self, direction: Direction) -> Vec<LoopPath> {
        let (lx, ly) = (self.lx as i64, self.ly as i64);
        match direction {
            Direction::X => (0..ly)
                .map(|y| {
                    self.direct_loop(
                        (0..lx).map(|x| self.h(x, y)).collect(),
                        LoopShape::Straight(direction),
                    )
                })
                .collect(),
            Direction::Y => (0..lx)
                .map(|x| {
                    self.direct_loop(
                        (0..ly).map(|y| self.v(x, y)).collect(),
                        LoopShape::Straight(direction),
                    )
                })
                .collect(),
        }
    }

    fn dual_loop(&self, bonds: Vec<usize>, direction: Direction) -> LoopPath {
        let incidences = bonds
            .iter()
            .flat_map(|&b| self.bond_plaquettes(b).map(|p| (p, b)))
            .collect();
        LoopPath {
            kind: LoopKind::Dual,
            shape: LoopShape::Straight(direction),
            bonds,
            incidences,
        }
    }

    fn direct_loop(&self, bonds: Vec<usize>, shape: LoopShape) -> LoopPath {
        let incidences = bonds
            .iter()
            .flat_map(|&b| self.bond_stars(b).map(|s| (s, b)))
            .collect();
        LoopPath {
            kind: LoopKind::Direct,
            shape,
            bonds,
            incidences,
        }
    }

    /// Contractible loop around a cell: a dual loop crossing the four bonds of a
    /// star, or a direct loop along the four bonds of a plaquette. Bonds are
    /// listed in cyclic order around the cell.
    pub fn elementary_loop(&self, cell: usize) -> Result<LoopPath> {
        self.check_cell(cell)?;
        let b = self.cell_bonds[cell];
        match self.cell_kind(cell) {
            CellKind::Star => {
                // east, north, west, south
                let bonds = vec![b[0], b[2], b[1], b[3]];
                let incidences = bonds
                    .iter()
                    .flat_map(|&bond| self.bond_plaquettes(bond).map(|p| (p, bond)))
                    .collect();
                Ok(LoopPath {
                    kind: LoopKind::Dual,
                    shape: LoopShape::Around(cell),
                    bonds,
                    incidences,
                })
            }
            CellKind::Plaquette => {
                // south, east, north, west
                let bonds = vec![b[0], b[3], b[1], b[2]];
                Ok(self.direct_loop(bonds, LoopShape::Around(cell)))
            }
        }
    }

    /// Bond permutation induced by translating every coordinate by `(dx, dy)`.
    pub fn translation(&self, dx: i64, dy: i64) -> Vec<usize> {
        (0..self.n_spins())
            .map(|b| {
                let (x, y, o) = self.bond_coords(b);
                let (x, y) = (x as i64 + dx, y as i64 + dy);
                match o {
                    Orientation::Horizontal => self.h(x, y),
                    Orientation::Vertical => self.v(x, y),
                }
            })
            .collect()
    }
}
