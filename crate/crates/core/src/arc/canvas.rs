//! Token layout of a task instance.
//!
//! A canvas is `n_task` TASK tokens followed by a dense `height x width`
//! block of IMAGE tokens in row-major order. The query grid is painted in
//! the top-left corner; every other image cell holds the PAD class. Each
//! TASK slot carries a normalized histogram of `(input color, output color)`
//! cell pairs over the demonstrations assigned to it, which the model
//! projects into the hidden space.

use serde::{Deserialize, Serialize};

use super::grid::{Grid, NUM_CLASSES, PAD_CLASS};
use super::task::{Example, TaskInstance};
use crate::error::{Error, Result};

/// Number of `(input class, output class)` pair bins per task slot.
pub const PAIR_BINS: usize = NUM_CLASSES * NUM_CLASSES;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanvasConfig {
    pub height: usize,
    pub width: usize,
    pub n_task_tokens: usize,
}

impl Default for CanvasConfig {
    fn default() -> Self {
        CanvasConfig {
            height: 12,
            width: 12,
            n_task_tokens: 8,
        }
    }
}

impl CanvasConfig {
    pub fn image_tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn tokens(&self) -> usize {
        self.n_task_tokens + self.image_tokens()
    }

    pub fn fits(&self, g: &Grid) -> bool {
        g.height() <= self.height && g.width() <= self.width
    }

    pub fn check_fits(&self, g: &Grid) -> Result<()> {
        if self.fits(g) {
            Ok(())
        } else {
            Err(Error::Capacity {
                grid_h: g.height(),
                grid_w: g.width(),
                canvas_h: self.height,
                canvas_w: self.width,
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenKind {
    Task,
    Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    pub config: CanvasConfig,
    /// Slot index for TASK tokens, color class (or PAD) for IMAGE tokens.
    pub tokens: Vec<usize>,
    pub kinds: Vec<TokenKind>,
    /// `(row, col)` for IMAGE tokens, `(0, 0)` for TASK tokens.
    pub coords: Vec<(usize, usize)>,
    /// One class label per IMAGE token when the expected output is known.
    pub target: Option<Vec<usize>>,
    /// `n_task x PAIR_BINS` normalized demo pair histograms.
    pub slot_features: Vec<f64>,
    pub query_dims: (usize, usize),
}

impl Canvas {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_task(&self) -> usize {
        self.config.n_task_tokens
    }

    pub fn image_tokens(&self) -> &[usize] {
        &self.tokens[self.config.n_task_tokens..]
    }

    /// Targets for every token row; TASK rows are `None`.
    pub fn row_targets(&self) -> Option<Vec<Option<usize>>> {
        let t = self.target.as_ref()?;
        let mut out = vec![None; self.config.n_task_tokens];
        out.extend(t.iter().map(|&c| Some(c)));
        Some(out)
    }

    /// The query grid, recovered from the IMAGE tokens.
    pub fn input_grid(&self) -> Grid {
        let one_hot: Vec<f64> = self
            .image_tokens()
            .iter()
            .flat_map(|&c| (0..NUM_CLASSES).map(move |k| if k == c { 1.0 } else { 0.0 }))
            .collect();
        decode_prediction(&one_hot, NUM_CLASSES, self.config.height, self.config.width)
    }

    /// Paint `grid` as class labels over the image block.
    pub fn paint(config: &CanvasConfig, grid: &Grid) -> Result<Vec<usize>> {
        config.check_fits(grid)?;
        let mut out = vec![PAD_CLASS; config.image_tokens()];
        for r in 0..grid.height() {
            for c in 0..grid.width() {
                out[r * config.width + c] = grid.get(r, c) as usize;
            }
        }
        Ok(out)
    }
}

fn add_pair_counts(hist: &mut [f64], demo: &Example) -> usize {
    let (a, b) = (&demo.input, &demo.output);
    let h = a.height().max(b.height());
    let w = a.width().max(b.width());
    for r in 0..h {
        for c in 0..w {
            let ci = if r < a.height() && c < a.width() { a.get(r, c) as usize } else { PAD_CLASS };
            let co = if r < b.height() && c < b.width() { b.get(r, c) as usize } else { PAD_CLASS };
            hist[ci * NUM_CLASSES + co] += 1.0;
        }
    }
    h * w
}

/// Demo `i` goes to slot `i mod n_task`; each slot's histogram is normalized
/// over all cells assigned to it. Unused slots stay zero.
pub fn slot_features(demos: &[Example], n_task: usize) -> Vec<f64> {
    let mut feats = vec![0.0; n_task * PAIR_BINS];
    if n_task == 0 {
        return feats;
    }
    let mut totals = vec![0usize; n_task];
    for (i, d) in demos.iter().enumerate() {
        let s = i % n_task;
        totals[s] += add_pair_counts(&mut feats[s * PAIR_BINS..(s + 1) * PAIR_BINS], d);
    }
    for (s, &t) in totals.iter().enumerate() {
        if t > 0 {
            for x in &mut feats[s * PAIR_BINS..(s + 1) * PAIR_BINS] {
                *x /= t as f64;
            }
        }
    }
    feats
}

/// Lay out query `query_index` of `task` together with its demo summary.
pub fn encode_canvas(task: &TaskInstance, query_index: usize, config: &CanvasConfig) -> Result<Canvas> {
    let query = task
        .queries
        .get(query_index)
        .ok_or_else(|| Error::contract(format!("query index {query_index} out of range ({} queries)", task.queries.len())))?;
    encode_pair(&task.demos, &query.input, query.expected.as_ref(), config)
}

/// Encode an explicit (demos, input, expected) triple; used for
/// leave-one-out adaptation where a demo acts as the query.
pub fn encode_pair(demos: &[Example], input: &Grid, expected: Option<&Grid>, config: &CanvasConfig) -> Result<Canvas> {
    let image = Canvas::paint(config, input)?;
    let target = expected.map(|e| Canvas::paint(config, e)).transpose()?;
    let n_task = config.n_task_tokens;
    let mut tokens: Vec<usize> = (0..n_task).collect();
    tokens.extend_from_slice(&image);
    let mut kinds = vec![TokenKind::Task; n_task];
    kinds.extend(std::iter::repeat_n(TokenKind::Image, config.image_tokens()));
    let mut coords = vec![(0, 0); n_task];
    for r in 0..config.height {
        for c in 0..config.width {
            coords.push((r, c));
        }
    }
    Ok(Canvas {
        config: *config,
        tokens,
        kinds,
        coords,
        target,
        slot_features: slot_features(demos, n_task),
        query_dims: (input.height(), input.width()),
    })
}

fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        // strict comparison keeps the lowest index on ties
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Argmax-decode per-IMAGE-token distributions into a grid.
///
/// The width is the run of non-PAD cells along row 0 and the height the run
/// along column 0. PAD cells inside that rectangle decode as background.
/// A prediction whose top-left cell is PAD decodes as a 1x1 background grid.
pub fn decode_prediction<T: PartialOrd + Copy>(probs: &[T], n_classes: usize, height: usize, width: usize) -> Grid {
    assert_eq!(probs.len(), n_classes * height * width, "one distribution per image token");
    let classes: Vec<usize> = probs.chunks(n_classes).map(argmax).collect();
    let is_pad = |r: usize, c: usize| classes[r * width + c] >= PAD_CLASS;
    let w = (0..width).take_while(|&c| !is_pad(0, c)).count();
    let h = (0..height).take_while(|&r| !is_pad(r, 0)).count();
    if w == 0 || h == 0 {
        return Grid::filled(1, 1, 0).expect("1x1 grid is valid");
    }
    Grid::from_fn(h, w, |r, c| {
        let k = classes[r * width + c];
        if k >= PAD_CLASS {
            0
        } else {
            k as u8
        }
    })
    .expect("decoded grid is valid")
}
