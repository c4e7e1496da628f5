//! Deterministic seed derivation: global -> case / client -> round -> shuffle.

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed of `parent` for the given `tag`.
pub fn derive(parent: u64, tag: u64) -> u64 {
    splitmix64(parent ^ splitmix64(tag.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// Folds a path of tags into one seed.
pub fn derive_path(root: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(root, |s, &t| derive(s, t))
}

// Domain tags keep sibling streams apart.
pub const TAG_CASE: u64 = 1;
pub const TAG_CLIENT: u64 = 2;
pub const TAG_SHUFFLE: u64 = 3;
pub const TAG_FOLDS: u64 = 4;
pub const TAG_BANDS: u64 = 5;
pub const TAG_SPLIT: u64 = 6;
pub const TAG_MODEL: u64 = 7;
