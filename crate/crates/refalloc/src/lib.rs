//! Bundled reference allocators.
//!
//! Each allocator is compiled into a shared object exporting the standard
//! `malloc`/`free`/`malloc_usable_size` entry points (plus `calloc`,
//! `realloc` and the aligned variants so it can also be preloaded or linked
//! into a standalone program):
//!
//! - `unsafe-unlink`: dlmalloc-style boundary tags, per-size fast bins, one
//!   unsorted doubly linked list, textbook unlink without integrity checks.
//! - `checked`: the same allocator with metadata checks; a failed check
//!   writes the glibc message of that check to stderr and traps.
//! - `page`: one object per mapping with an unmapped guard page after it and
//!   no in-place metadata.
//! - `counting`: bump allocator that logs every call to the file named by
//!   `HEAPSCOUT_COUNT_LOG`; used to audit hidden allocator traffic.
//!
//! All of them are single threaded.

use std::path::{Path, PathBuf};

/// Names accepted by [`shared_object`].
pub const NAMES: &[&str] = &["unsafe-unlink", "checked", "page", "counting"];

/// Abort messages the `checked` allocator can emit.
pub const CHECKED_MESSAGES: &[&str] = &[
    "corrupted double-linked list",
    "corrupted size vs. prev_size",
    "free(): corrupted unsorted chunks",
    "free(): invalid pointer",
    "free(): invalid size",
    "free(): invalid next size (fast)",
    "free(): invalid next size (normal)",
    "double free or corruption (fasttop)",
    "double free or corruption (top)",
    "double free or corruption (out)",
    "double free or corruption (!prev)",
    "malloc(): memory corruption (fast)",
    "malloc(): memory corruption",
];

/// Directory holding the compiled shared objects.
pub fn build_dir() -> &'static Path {
    Path::new(env!("REFALLOC_DIR"))
}

/// Path of the shared object for a bundled allocator.
pub fn shared_object(name: &str) -> Option<PathBuf> {
    NAMES
        .contains(&name)
        .then(|| build_dir().join(format!("libhs_{}.so", name.replace('-', "_"))))
}
