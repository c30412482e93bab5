//! The dihedral group on grids combined with background-preserving color
//! permutations.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::grid::{Grid, NUM_COLORS};
use super::task::{Example, Query, TaskInstance};

/// Flip (reverse columns) first, then rotate clockwise by `quarter_turns`,
/// then relabel colors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Augmentation {
    pub quarter_turns: u8,
    pub flip: bool,
    pub color_perm: [u8; NUM_COLORS],
}

/// Which augmentations preserve a task family's rule.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Equivariance {
    pub quarter_turns: Vec<u8>,
    pub flip: bool,
    pub color_perm: bool,
}

impl Equivariance {
    pub fn full() -> Self {
        Equivariance {
            quarter_turns: vec![0, 1, 2, 3],
            flip: true,
            color_perm: true,
        }
    }

    pub fn none() -> Self {
        Equivariance {
            quarter_turns: vec![0],
            flip: false,
            color_perm: false,
        }
    }
}

const IDENTITY_PERM: [u8; NUM_COLORS] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];

fn rotate_cw(g: &Grid) -> Grid {
    let (h, w) = (g.height(), g.width());
    Grid::from_fn(w, h, |r, c| g.get(h - 1 - c, r)).expect("rotation preserves validity")
}

fn flip_h(g: &Grid) -> Grid {
    let w = g.width();
    Grid::from_fn(g.height(), w, |r, c| g.get(r, w - 1 - c)).expect("flip preserves validity")
}

impl Default for Augmentation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Augmentation {
    pub fn identity() -> Self {
        Augmentation {
            quarter_turns: 0,
            flip: false,
            color_perm: IDENTITY_PERM,
        }
    }

    pub fn spatial(quarter_turns: u8, flip: bool) -> Self {
        Augmentation {
            quarter_turns: quarter_turns % 4,
            flip,
            color_perm: IDENTITY_PERM,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn apply(&self, g: &Grid) -> Grid {
        let mut out = if self.flip { flip_h(g) } else { g.clone() };
        for _ in 0..self.quarter_turns % 4 {
            out = rotate_cw(&out);
        }
        let cells = out.cells().iter().map(|&c| self.color_perm[c as usize]).collect();
        Grid::new(out.height(), out.width(), cells).expect("augmentation preserves validity")
    }

    /// The augmentation undoing `self`.
    pub fn invert(&self) -> Self {
        let mut perm = [0u8; NUM_COLORS];
        for (from, &to) in self.color_perm.iter().enumerate() {
            perm[to as usize] = from as u8;
        }
        // A reflection composed with a rotation is an involution.
        let quarter_turns = if self.flip {
            self.quarter_turns % 4
        } else {
            (4 - self.quarter_turns % 4) % 4
        };
        Augmentation {
            quarter_turns,
            flip: self.flip,
            color_perm: perm,
        }
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &Augmentation) -> Self {
        let (a, b) = (self.quarter_turns as i32, next.quarter_turns as i32);
        let turns = if next.flip { b - a } else { b + a };
        let mut perm = [0u8; NUM_COLORS];
        for (c, p) in perm.iter_mut().enumerate() {
            *p = next.color_perm[self.color_perm[c] as usize];
        }
        Augmentation {
            quarter_turns: turns.rem_euclid(4) as u8,
            flip: self.flip ^ next.flip,
            color_perm: perm,
        }
    }

    /// Sample uniformly from the augmentations allowed by `eq`.
    /// Color 0 (background) is always fixed.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, eq: &Equivariance) -> Self {
        let quarter_turns = *eq.quarter_turns.choose(rng).unwrap_or(&0);
        let flip = eq.flip && rng.random_bool(0.5);
        let mut color_perm = IDENTITY_PERM;
        if eq.color_perm {
            color_perm[1..].shuffle(rng);
        }
        Augmentation {
            quarter_turns,
            flip,
            color_perm,
        }
    }

    /// Apply to every grid of a task, inputs and outputs alike.
    pub fn apply_task(&self, task: &TaskInstance) -> TaskInstance {
        TaskInstance {
            demos: task
                .demos
                .iter()
                .map(|d| Example {
                    input: self.apply(&d.input),
                    output: self.apply(&d.output),
                })
                .collect(),
            queries: task
                .queries
                .iter()
                .map(|q| Query {
                    input: self.apply(&q.input),
                    expected: q.expected.as_ref().map(|e| self.apply(e)),
                })
                .collect(),
        }
    }
}

pub fn apply_augmentation(g: &Grid, a: &Augmentation) -> Grid {
    a.apply(g)
}

pub fn invert_augmentation(a: &Augmentation) -> Augmentation {
    a.invert()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_grid() -> Grid {
        Grid::from_rows(&[[1, 2, 0], [3, 4, 5]]).unwrap()
    }

    #[test]
    fn four_quarter_turns_is_identity() {
        let g = sample_grid();
        let r = Augmentation::spatial(1, false);
        let mut x = g.clone();
        for _ in 0..4 {
            x = r.apply(&x);
        }
        assert_eq!(x, g);
        assert_eq!(r.apply(&g), Grid::from_rows(&[[3, 1], [4, 2], [5, 0]]).unwrap());
    }

    #[test]
    fn double_flip_is_identity() {
        let g = sample_grid();
        let f = Augmentation::spatial(0, true);
        assert_eq!(f.apply(&g), Grid::from_rows(&[[0, 2, 1], [5, 4, 3]]).unwrap());
        assert_eq!(f.apply(&f.apply(&g)), g);
    }

    #[test]
    fn background_fixed_under_sampling() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let a = Augmentation::sample(&mut rng, &Equivariance::full());
            assert_eq!(a.color_perm[0], 0);
        }
        let a = Augmentation::sample(&mut rng, &Equivariance::none());
        assert!(a.is_identity());
    }
}
