//! Stable seed derivation.

/// Mixes a base seed with a component name and an index. Stable across
/// platforms and releases (FNV-1a over the name, SplitMix64 finalizer).
pub fn derive_seed(base: u64, component: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in component.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(splitmix(base ^ h) ^ index)
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_and_distinct() {
        assert_eq!(derive_seed(1, "split", 0), derive_seed(1, "split", 0));
        assert_ne!(derive_seed(1, "split", 0), derive_seed(1, "split", 1));
        assert_ne!(derive_seed(1, "split", 0), derive_seed(1, "noise", 0));
        assert_ne!(derive_seed(1, "split", 0), derive_seed(2, "split", 0));
        // pinned so that a change of the mixer shows up
        assert_eq!(derive_seed(0, "", 0), 0x21fa_69a5_8f3d_62f5);
    }
}
