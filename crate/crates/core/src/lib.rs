pub mod diagnoser;
pub mod error;
pub mod eval;
pub mod localizer;
pub mod oracle;
pub mod phantom;
pub mod preprocess;
pub mod seeds;
pub mod volume;

pub use error::{Error, FormatError, Result};
pub use volume::{Mask, PriorMap, Slice2D, SliceStack, Volume};
