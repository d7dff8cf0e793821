use std::sync::Arc;

/// Compressed list of index groups over positions `0..span`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
    items: Vec<u32>,
    span: usize,
}

impl Segments {
    /// Groups `keys[i]` (each `< n_groups`) into per-key lists of positions `i`,
    /// preserving position order within every group.
    pub fn group_by(keys: &[u32], n_groups: usize) -> Self {
        let mut counts = vec![0usize; n_groups + 1];
        for &k in keys {
            counts[k as usize + 1] += 1;
        }
        for i in 0..n_groups {
            counts[i + 1] += counts[i];
        }
        let offsets = counts.clone();
        let mut fill = counts;
        let mut items = vec![0u32; keys.len()];
        for (pos, &k) in keys.iter().enumerate() {
            items[fill[k as usize]] = pos as u32;
            fill[k as usize] += 1;
        }
        Segments { offsets, items, span: keys.len() }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of positions covered.
    pub fn span(&self) -> usize {
        self.span
    }

    pub fn get(&self, i: usize) -> &[u32] {
        &self.items[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u32]> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }
}

/// Sparse bipartite relation between `n_left` and `n_right` tokens, stored as
/// an ordered list of (left, right) pairs plus per-side groupings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairList {
    n_left: usize,
    n_right: usize,
    left: Vec<u32>,
    right: Vec<u32>,
    by_left: Arc<Segments>,
    by_right: Arc<Segments>,
}

impl PairList {
    pub fn new(n_left: usize, n_right: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let (left, right): (Vec<u32>, Vec<u32>) = pairs
            .into_iter()
            .map(|(l, r)| {
                assert!(l < n_left && r < n_right, "pair ({l},{r}) out of range");
                (l as u32, r as u32)
            })
            .unzip();
        let by_left = Arc::new(Segments::group_by(&left, n_left));
        let by_right = Arc::new(Segments::group_by(&right, n_right));
        PairList { n_left, n_right, left, right, by_left, by_right }
    }

    pub fn n_left(&self) -> usize {
        self.n_left
    }

    pub fn n_right(&self) -> usize {
        self.n_right
    }

    pub fn len(&self) -> usize {
        self.left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.left.is_empty()
    }

    pub fn left(&self) -> &[u32] {
        &self.left
    }

    pub fn right(&self) -> &[u32] {
        &self.right
    }

    /// Pair positions grouped by their left token.
    pub fn by_left(&self) -> &Arc<Segments> {
        &self.by_left
    }

    /// Pair positions grouped by their right token.
    pub fn by_right(&self) -> &Arc<Segments> {
        &self.by_right
    }
}
