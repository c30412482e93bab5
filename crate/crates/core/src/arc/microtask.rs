//! Procedural micro-task families, a desk-scale stand-in for synthetic ARC
//! data. Every generator is a pure function of `(family, seed)`.

use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::augment::Equivariance;
use super::grid::Grid;
use super::task::{task_from_value, Example, Query, TaskInstance};
use crate::error::{Error, Result};

/// Wall color used by [`Family::FloodFill`].
pub const WALL: u8 = 5;
const DEMOS_PER_TASK: usize = 3;
/// Upper bound on the BFS depth of a flood-fill region.
pub const FLOOD_MAX_DEPTH: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Family {
    Identity,
    ColorSwap,
    MirrorH,
    Gravity,
    FloodFill,
    BorderTrace,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Identity,
        Family::ColorSwap,
        Family::MirrorH,
        Family::Gravity,
        Family::FloodFill,
        Family::BorderTrace,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Identity => "IDENTITY",
            Family::ColorSwap => "COLOR_SWAP",
            Family::MirrorH => "MIRROR_H",
            Family::Gravity => "GRAVITY",
            Family::FloodFill => "FLOOD_FILL",
            Family::BorderTrace => "BORDER_TRACE",
        }
    }

    /// Families whose solution needs iterative propagation.
    pub fn is_recursive(self) -> bool {
        matches!(self, Family::FloodFill | Family::Gravity)
    }

    /// Augmentations that map a task of this family onto another valid task
    /// of the same family.
    pub fn equivariance(self) -> Equivariance {
        match self {
            Family::Identity | Family::ColorSwap | Family::BorderTrace => Equivariance::full(),
            Family::MirrorH => Equivariance {
                quarter_turns: vec![0, 2],
                flip: true,
                color_perm: true,
            },
            Family::Gravity => Equivariance {
                quarter_turns: vec![0],
                flip: true,
                color_perm: true,
            },
            Family::FloodFill => Equivariance {
                quarter_turns: vec![0, 1, 2, 3],
                flip: true,
                color_perm: false,
            },
        }
    }

    /// Inclusive range of grid side lengths the generator draws from.
    pub fn size_range(self) -> (usize, usize) {
        match self {
            Family::FloodFill => (4, 8),
            _ => (2, 10),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::contract(format!("unknown micro-task family {s:?}")))
    }
}

/// Reverse the column order.
pub fn mirror_h(g: &Grid) -> Grid {
    let w = g.width();
    Grid::from_fn(g.height(), w, |r, c| g.get(r, w - 1 - c)).unwrap()
}

/// Non-background cells fall to the bottom of their column, keeping order.
pub fn gravity(g: &Grid) -> Grid {
    let (h, w) = (g.height(), g.width());
    let mut out = Grid::filled(h, w, 0).unwrap();
    for c in 0..w {
        let mut dst = h;
        for r in (0..h).rev() {
            let v = g.get(r, c);
            if v != 0 {
                dst -= 1;
                out.set(dst, c, v);
            }
        }
    }
    out
}

pub fn swap_colors(g: &Grid, a: u8, b: u8) -> Grid {
    let cells = g
        .cells()
        .iter()
        .map(|&c| if c == a { b } else if c == b { a } else { c })
        .collect();
    Grid::new(g.height(), g.width(), cells).unwrap()
}

/// Background cells 8-adjacent to any non-background cell take `color`.
pub fn border_trace(g: &Grid, color: u8) -> Grid {
    let (h, w) = (g.height() as isize, g.width() as isize);
    Grid::from_fn(g.height(), g.width(), |r, c| {
        let v = g.get(r, c);
        if v != 0 {
            return v;
        }
        for dr in -1..=1isize {
            for dc in -1..=1isize {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if (dr, dc) != (0, 0) && rr >= 0 && cc >= 0 && rr < h && cc < w && g.get(rr as usize, cc as usize) != 0 {
                    return color;
                }
            }
        }
        0
    })
    .unwrap()
}

/// Every cell that is neither background nor wall spreads its color through
/// 4-connected background, relaxing to a fixpoint.
pub fn flood_fill(g: &Grid) -> Grid {
    let (h, w) = (g.height(), g.width());
    let mut cur = g.clone();
    loop {
        let mut next = cur.clone();
        for r in 0..h {
            for c in 0..w {
                if cur.get(r, c) != 0 {
                    continue;
                }
                let neighbors = [
                    (r.wrapping_sub(1), c),
                    (r + 1, c),
                    (r, c.wrapping_sub(1)),
                    (r, c + 1),
                ];
                if let Some(color) = neighbors
                    .iter()
                    .filter(|&&(rr, cc)| rr < h && cc < w)
                    .map(|&(rr, cc)| cur.get(rr, cc))
                    .find(|&v| v != 0 && v != WALL)
                {
                    next.set(r, c, color);
                }
            }
        }
        if next == cur {
            return cur;
        }
        cur = next;
    }
}

/// Number of relaxation rounds [`flood_fill`] needs (0 when nothing spreads).
fn fill_depth(g: &Grid) -> usize {
    let mut cur = g.clone();
    let mut depth = 0;
    loop {
        let next = flood_fill_step(&cur);
        if next == cur {
            return depth;
        }
        depth += 1;
        cur = next;
    }
}

fn flood_fill_step(g: &Grid) -> Grid {
    let (h, w) = (g.height(), g.width());
    Grid::from_fn(h, w, |r, c| {
        let v = g.get(r, c);
        if v != 0 {
            return v;
        }
        let neighbors = [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)];
        neighbors
            .iter()
            .filter(|&&(rr, cc)| rr < h && cc < w)
            .map(|&(rr, cc)| g.get(rr, cc))
            .find(|&v| v != 0 && v != WALL)
            .unwrap_or(0)
    })
    .unwrap()
}

fn random_dims(rng: &mut ChaCha8Rng, family: Family) -> (usize, usize) {
    let (lo, hi) = family.size_range();
    (rng.random_range(lo..=hi), rng.random_range(lo..=hi))
}

fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64, palette: &[u8]) -> Grid {
    Grid::from_fn(h, w, |_, _| {
        if rng.random_bool(density) {
            *palette.choose(rng).unwrap()
        } else {
            0
        }
    })
    .unwrap()
}

fn all_colors() -> Vec<u8> {
    (1..=9).collect()
}

/// Per-task rule parameters drawn once and shared by all pairs of a task.
enum Rule {
    Identity,
    Swap(u8, u8, Vec<u8>),
    Mirror,
    Gravity,
    Fill(u8),
    Trace(u8, Vec<u8>),
}

fn draw_rule(rng: &mut ChaCha8Rng, family: Family) -> Rule {
    let mut colors = all_colors();
    colors.shuffle(rng);
    match family {
        Family::Identity => Rule::Identity,
        Family::ColorSwap => {
            let extra = rng.random_range(0..=2);
            Rule::Swap(colors[0], colors[1], colors[..2 + extra].to_vec())
        }
        Family::MirrorH => Rule::Mirror,
        Family::Gravity => Rule::Gravity,
        Family::FloodFill => {
            let fill: Vec<u8> = colors.into_iter().filter(|&c| c != WALL).collect();
            Rule::Fill(fill[0])
        }
        Family::BorderTrace => {
            let n = rng.random_range(1..=3);
            Rule::Trace(colors[0], colors[1..1 + n].to_vec())
        }
    }
}

fn draw_pair(rng: &mut ChaCha8Rng, family: Family, rule: &Rule) -> Example {
    loop {
        let (h, w) = random_dims(rng, family);
        let pair = match rule {
            Rule::Identity => {
                let density = rng.random_range(0.2..0.7);
                let g = random_grid(rng, h, w, density, &all_colors());
                Some((g.clone(), g))
            }
            Rule::Mirror => {
                let density = rng.random_range(0.2..0.7);
                let g = random_grid(rng, h, w, density, &all_colors());
                Some((g.clone(), mirror_h(&g)))
            }
            Rule::Gravity => {
                let density = rng.random_range(0.15..0.45);
                let g = random_grid(rng, h, w, density, &all_colors());
                Some((g.clone(), gravity(&g)))
            }
            Rule::Swap(a, b, palette) => {
                let density = rng.random_range(0.3..0.7);
                let mut g = random_grid(rng, h, w, density, palette);
                // both swapped colors must be visible
                if h * w >= 2 {
                    let cells: Vec<usize> = (0..h * w).collect();
                    let picks: Vec<usize> = cells.choose_multiple(rng, 2).copied().collect();
                    g.set(picks[0] / w, picks[0] % w, *a);
                    g.set(picks[1] / w, picks[1] % w, *b);
                    Some((g.clone(), swap_colors(&g, *a, *b)))
                } else {
                    None
                }
            }
            Rule::Trace(color, palette) => {
                let density = rng.random_range(0.05..0.2);
                let g = random_grid(rng, h, w, density, palette);
                Some((g.clone(), border_trace(&g, *color)))
            }
            Rule::Fill(color) => {
                let density = rng.random_range(0.2..0.45);
                let mut g = random_grid(rng, h, w, density, &[WALL]);
                let open: Vec<usize> = (0..h * w).filter(|&i| g.cells()[i] == 0).collect();
                open.choose(rng).copied().and_then(|seed| {
                    g.set(seed / w, seed % w, *color);
                    let out = flood_fill(&g);
                    let filled = out.cells().iter().filter(|&&c| c == *color).count();
                    let depth = fill_depth(&g);
                    (filled >= 3 && depth <= FLOOD_MAX_DEPTH).then_some((g, out))
                })
            }
        };
        if let Some((input, output)) = pair {
            return Example { input, output };
        }
    }
}

fn family_stream(family: Family, seed: u64) -> ChaCha8Rng {
    let salt = (Family::ALL.iter().position(|&f| f == family).unwrap() as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    ChaCha8Rng::seed_from_u64(seed ^ salt)
}

/// Three demonstrations and one query with its expected output.
pub fn generate_microtask(family: Family, seed: u64) -> TaskInstance {
    let mut rng = family_stream(family, seed);
    let rule = draw_rule(&mut rng, family);
    let demos: Vec<Example> = (0..DEMOS_PER_TASK).map(|_| draw_pair(&mut rng, family, &rule)).collect();
    let q = draw_pair(&mut rng, family, &rule);
    TaskInstance {
        demos,
        queries: vec![Query {
            input: q.input,
            expected: Some(q.output),
        }],
    }
}

/// As [`generate_microtask`], resolving the family by name.
pub fn generate_named(family: &str, seed: u64) -> Result<TaskInstance> {
    Ok(generate_microtask(family.parse()?, seed))
}

/// One JSON-lines record of a micro-task dump.
pub fn dump_line(family: Family, seed: u64, task: &TaskInstance) -> String {
    let mut v = task.to_json();
    let obj = v.as_object_mut().expect("task json is an object");
    obj.insert("schema_version".into(), Value::from(1));
    obj.insert("family".into(), Value::String(family.name().into()));
    obj.insert("seed".into(), Value::from(seed));
    v.to_string()
}

pub fn read_dump_line(line: &str) -> Result<(Family, u64, TaskInstance)> {
    let v: Value = serde_json::from_str(line).map_err(|e| Error::Parse {
        path: "$".into(),
        message: e.to_string(),
    })?;
    let family = v
        .get("family")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Parse {
            path: "family".into(),
            message: "missing".into(),
        })?
        .parse()?;
    let seed = v.get("seed").and_then(Value::as_u64).ok_or_else(|| Error::Parse {
        path: "seed".into(),
        message: "missing".into(),
    })?;
    Ok((family, seed, task_from_value(&v)?))
}
