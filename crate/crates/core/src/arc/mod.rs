//! ARC grids, task JSON, canvas encoding, augmentations, and procedural
//! micro-task families.

pub mod augment;
pub mod canvas;
pub mod grid;
pub mod microtask;
pub mod task;

pub use augment::{apply_augmentation, invert_augmentation, Augmentation, Equivariance};
pub use canvas::{decode_prediction, encode_canvas, encode_pair, Canvas, CanvasConfig, TokenKind, PAIR_BINS};
pub use grid::{Grid, MAX_GRID, NUM_CLASSES, NUM_COLORS, PAD_CLASS};
pub use microtask::{dump_line, generate_microtask, generate_named, read_dump_line, Family};
pub use task::{parse_task, task_from_value, Example, Query, TaskInstance};
