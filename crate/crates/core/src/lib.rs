//! Pattern spotting and image retrieval over scanned document pages.
//!
//! The crate is organised around the two phases of a retrieval engine:
//!
//! * **offline**: pages are over-segmented ([`segmentation`]), merged into
//!   candidate regions by selective search ([`proposals`]), filtered for
//!   stains and blank margins, described by feature vectors ([`features`]),
//!   hashed into compact binary codes ([`hashing`]) and persisted as an
//!   immutable [`index::SearchIndex`];
//! * **online**: a query crop is described the same way and every candidate
//!   is ranked by Euclidean or Hamming distance ([`search`]), optionally
//!   de-duplicated, and scored with the IR/PS protocols in [`eval`].
//!
//! [`synth`] produces small page corpora with planted glyphs and exact ground
//! truth so the whole loop can be exercised without a real manuscript
//! collection.

pub mod bbox;
pub mod error;
pub mod eval;
pub mod features;
pub mod hashing;
pub mod imgproc;
pub mod index;
pub mod proposals;
pub mod search;
pub mod segmentation;
pub mod synth;

pub use bbox::{iou, BoundingBox};
pub use error::{Error, FormatError, Result};
