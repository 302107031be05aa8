//! Path-compressed binary trie keyed by address prefixes.
//!
//! Longest-prefix match walks at most one node per key bit plus the
//! root, so lookup cost depends on the key width, never on how many
//! entries are stored. Every node records its full prefix from the
//! root, which keeps splicing on removal trivial.

/// A prefix as (value bits right-aligned at `width`, prefix length).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Prefix {
    bits: u128,
    len: u8,
}

struct Node<V> {
    prefix: Prefix,
    value: Option<V>,
    child: [Option<Box<Node<V>>>; 2],
}

impl<V> Node<V> {
    fn leaf(prefix: Prefix, value: Option<V>) -> Box<Self> {
        Box::new(Node { prefix, value, child: [None, None] })
    }
}

pub struct PatriciaTrie<V> {
    width: u8,
    root: Option<Box<Node<V>>>,
    len: usize,
}

impl<V> PatriciaTrie<V> {
    /// New trie for keys of the given bit width (32, 48 or 128).
    pub fn new(width: u8) -> Self {
        Self { width, root: None, len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn bit(&self, bits: u128, i: u8) -> bool {
        debug_assert!(i < self.width);
        (bits >> (self.width - 1 - i)) & 1 == 1
    }

    /// Length of the common prefix of two prefixes, capped by both.
    fn common_len(&self, a: Prefix, b: Prefix) -> u8 {
        let shift = 128 - self.width as u32;
        let diff = (a.bits ^ b.bits) << shift;
        let agree = diff.leading_zeros().min(self.width as u32) as u8;
        agree.min(a.len).min(b.len)
    }

    /// Insert or replace the value stored at an exact prefix. Returns the
    /// previous value when the prefix was already present.
    pub fn insert(&mut self, bits: u128, len: u8, value: V) -> Option<V> {
        assert!(len <= self.width, "prefix length exceeds trie width");
        let new = Prefix { bits, len };
        let width = self.width;
        let shift = 128 - width as u32;
        let mut slot = &mut self.root;
        loop {
            match slot {
                None => {
                    *slot = Some(Node::leaf(new, Some(value)));
                    self.len += 1;
                    return None;
                }
                Some(node) => {
                    let cur = node.prefix;
                    let diff = (cur.bits ^ new.bits) << shift;
                    let agree = diff.leading_zeros().min(width as u32) as u8;
                    let common = agree.min(cur.len).min(new.len);
                    if common == cur.len && common == new.len {
                        // Same prefix.
                        let prev = node.value.replace(value);
                        if prev.is_none() {
                            self.len += 1;
                        }
                        return prev;
                    }
                    if common == cur.len {
                        // New prefix extends this node; descend.
                        let b = self.bit(new.bits, cur.len) as usize;
                        slot = &mut node.child[b];
                        continue;
                    }
                    // Diverges inside this node's prefix: split at `common`.
                    let old = slot.take().unwrap();
                    let old_bit = self.bit(old.prefix.bits, common) as usize;
                    let fork_prefix = Prefix {
                        bits: mask(new.bits, width, common),
                        len: common,
                    };
                    let mut fork = if common == new.len {
                        // The new prefix IS the fork point.
                        Node::leaf(new, Some(value))
                    } else {
                        Node::leaf(fork_prefix, None)
                    };
                    fork.child[old_bit] = Some(old);
                    if common != new.len {
                        let new_bit = self.bit(new.bits, common) as usize;
                        debug_assert_ne!(new_bit, old_bit);
                        fork.child[new_bit] = Some(Node::leaf(new, Some(value)));
                    }
                    *slot = Some(fork);
                    self.len += 1;
                    return None;
                }
            }
        }
    }

    pub fn get(&self, bits: u128, len: u8) -> Option<&V> {
        let mut node = self.root.as_deref();
        let target = Prefix { bits, len };
        while let Some(n) = node {
            if n.prefix.len > target.len
                || self.common_len(n.prefix, target) < n.prefix.len
            {
                return None;
            }
            if n.prefix.len == target.len {
                return if n.prefix.bits == target.bits { n.value.as_ref() } else { None };
            }
            node = n.child[self.bit(target.bits, n.prefix.len) as usize].as_deref();
        }
        None
    }

    /// Longest-prefix match for a full-width key. Returns the best value
    /// and the number of nodes visited.
    pub fn lookup_lpm(&self, key: u128) -> (Option<(u128, u8, &V)>, u32) {
        let full = Prefix { bits: key, len: self.width };
        let mut visits = 0u32;
        let mut best = None;
        let mut node = self.root.as_deref();
        while let Some(n) = node {
            visits += 1;
            if self.common_len(n.prefix, full) < n.prefix.len {
                break;
            }
            if let Some(v) = n.value.as_ref() {
                best = Some((n.prefix.bits, n.prefix.len, v));
            }
            if n.prefix.len == self.width {
                break;
            }
            node = n.child[self.bit(key, n.prefix.len) as usize].as_deref();
        }
        (best, visits)
    }

    /// All (bits, len, value) entries in lexicographic order.
    pub fn iter(&self) -> Vec<(u128, u8, &V)> {
        let mut out = Vec::with_capacity(self.len);
        let mut stack = Vec::new();
        if let Some(r) = self.root.as_deref() {
            stack.push(r);
        }
        // Depth-first, left child before right, node value before children.
        while let Some(n) = stack.pop() {
            if let Some(v) = n.value.as_ref() {
                out.push((n.prefix.bits, n.prefix.len, v));
            }
            if let Some(c) = n.child[1].as_deref() {
                stack.push(c);
            }
            if let Some(c) = n.child[0].as_deref() {
                stack.push(c);
            }
        }
        out
    }
}

impl<V> PatriciaTrie<V> {
    /// Remove the value at an exact prefix, splicing pass-through nodes
    /// back out so the visit bound keeps holding.
    pub fn remove(&mut self, bits: u128, len: u8) -> Option<V> {
        let target = Prefix { bits, len };
        fn rec<V>(
            slot: &mut Option<Box<Node<V>>>,
            target: Prefix,
            width: u8,
        ) -> Option<V> {
            let node = slot.as_deref_mut()?;
            let shift = 128 - width as u32;
            let diff = (node.prefix.bits ^ target.bits) << shift;
            let agree = diff.leading_zeros().min(width as u32) as u8;
            let common = agree.min(node.prefix.len).min(target.len);
            if common < node.prefix.len {
                return None; // diverges before this node
            }
            let removed = if node.prefix.len == target.len {
                if node.prefix.bits != target.bits {
                    return None;
                }
                node.value.take()
            } else {
                let b = ((target.bits >> (width - 1 - node.prefix.len)) & 1) as usize;
                rec(&mut node.child[b], target, width)
            };
            if removed.is_some() {
                // Clean up: drop empty leaves, splice pass-through nodes.
                cleanup(slot);
            }
            removed
        }
        fn cleanup<V>(slot: &mut Option<Box<Node<V>>>) {
            let Some(node) = slot.as_deref_mut() else { return };
            if node.value.is_some() {
                return;
            }
            let kids = node.child[0].is_some() as u8 + node.child[1].is_some() as u8;
            match kids {
                0 => {
                    *slot = None;
                }
                1 => {
                    let child = node.child[0].take().or_else(|| node.child[1].take());
                    *slot = child;
                }
                _ => {}
            }
        }
        let out = rec(&mut self.root, target, self.width);
        if out.is_some() {
            self.len -= 1;
        }
        out
    }
}

fn mask(bits: u128, width: u8, len: u8) -> u128 {
    if len == 0 {
        return 0;
    }
    let host = (width - len) as u32;
    (bits >> host) << host
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent longest-prefix-match oracle: linear scan over all
    /// stored prefixes, longest matching one wins.
    fn lpm_oracle<'a, V>(entries: &'a [(u128, u8, V)], key: u128, width: u8) -> Option<&'a V> {
        let mut best: Option<(u8, &V)> = None;
        for (bits, len, v) in entries {
            let matches = if *len == 0 {
                true
            } else {
                let host = (width - len) as u32;
                (key >> host) << host == *bits
            };
            if matches && best.map_or(true, |(bl, _)| *len > bl) {
                best = Some((*len, v));
            }
        }
        best.map(|(_, v)| v)
    }

    #[test]
    fn lpm_prefers_longer_prefix() {
        let mut t = PatriciaTrie::new(32);
        let p8 = (10u128) << 24;
        let p16 = (10u128 << 24) | (1 << 16);
        t.insert(p8, 8, "a");
        t.insert(p16, 16, "b");
        let key = (10u128 << 24) | (1 << 16) | (2 << 8) | 3; // 10.1.2.3
        let (hit, _) = t.lookup_lpm(key);
        assert_eq!(hit.map(|(_, _, v)| *v), Some("b"));
        // Host route wins over both.
        t.insert(key, 32, "c");
        let (hit, _) = t.lookup_lpm(key);
        assert_eq!(hit.map(|(_, _, v)| *v), Some("c"));
    }

    #[test]
    fn empty_store_misses() {
        let t: PatriciaTrie<u32> = PatriciaTrie::new(32);
        let (hit, visits) = t.lookup_lpm(12345);
        assert!(hit.is_none());
        assert_eq!(visits, 0);
    }

    #[test]
    fn randomized_against_linear_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let mut t = PatriciaTrie::new(32);
            let mut entries: Vec<(u128, u8, u32)> = Vec::new();
            let n = rng.gen_range(0..60);
            for i in 0..n {
                let len = rng.gen_range(0..=32u8);
                let bits = mask(rng.gen::<u32>() as u128, 32, len);
                if entries.iter().any(|(b, l, _)| *b == bits && *l == len) {
                    continue;
                }
                t.insert(bits, len, i);
                entries.push((bits, len, i));
            }
            for _ in 0..50 {
                let key = rng.gen::<u32>() as u128;
                let (hit, visits) = t.lookup_lpm(key);
                assert_eq!(
                    hit.map(|(_, _, v)| *v),
                    lpm_oracle(&entries, key, 32).copied(),
                    "key {key:x} entries {entries:?}"
                );
                assert!(visits <= 33, "visit bound violated: {visits}");
            }
        }
    }

    #[test]
    fn remove_restores_oracle_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut t = PatriciaTrie::new(32);
        let mut entries: Vec<(u128, u8, u32)> = Vec::new();
        for i in 0..200u32 {
            let len = rng.gen_range(4..=32u8);
            let bits = mask(rng.gen::<u32>() as u128, 32, len);
            if entries.iter().any(|(b, l, _)| *b == bits && *l == len) {
                continue;
            }
            t.insert(bits, len, i);
            entries.push((bits, len, i));
        }
        // Remove half, verify agreement after every removal.
        while entries.len() > 100 {
            let idx = rng.gen_range(0..entries.len());
            let (bits, len, v) = entries.swap_remove(idx);
            assert_eq!(t.remove(bits, len), Some(v));
            assert_eq!(t.len(), entries.len());
            for _ in 0..10 {
                let key = rng.gen::<u32>() as u128;
                let (hit, visits) = t.lookup_lpm(key);
                assert_eq!(hit.map(|(_, _, v)| *v), lpm_oracle(&entries, key, 32).copied());
                assert!(visits <= 33);
            }
        }
    }

    #[test]
    fn visit_bound_independent_of_size() {
        for n in [10usize, 1_000, 5_000, 10_000] {
            let mut t = PatriciaTrie::new(32);
            let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
            let mut stored = 0;
            while stored < n {
                let bits = rng.gen::<u32>() as u128;
                if t.insert(bits, 32, stored).is_none() {
                    stored += 1;
                }
            }
            let mut max_visits = 0;
            for _ in 0..1000 {
                let key = rng.gen::<u32>() as u128;
                let (_, visits) = t.lookup_lpm(key);
                max_visits = max_visits.max(visits);
            }
            assert!(max_visits <= 33, "n={n} max_visits={max_visits}");
        }
    }

    #[test]
    fn iter_is_lexicographic_and_complete() {
        let mut t = PatriciaTrie::new(32);
        t.insert(0x0a000000, 8, 1);
        t.insert(0x0a010000, 16, 2);
        t.insert(0x0a010203, 32, 3);
        t.insert(0x0b000000, 8, 4);
        let got: Vec<_> = t.iter().into_iter().map(|(b, l, v)| (b, l, *v)).collect();
        assert_eq!(
            got,
            vec![
                (0x0a000000, 8, 1),
                (0x0a010000, 16, 2),
                (0x0a010203, 32, 3),
                (0x0b000000, 8, 4)
            ]
        );
    }
}
