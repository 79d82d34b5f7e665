/// Rotating accumulator slots for one row sweep.
///
/// Output column `col` lives in slot `col % columns`; each slot holds the
/// `Q / V` vectors of one column. Columns enter in ascending order and
/// leave in ascending order, so the live set is always the contiguous range
/// `retired..loaded`. Every column is loaded from the task buffer once and
/// stored back once per sweep.
#[derive(Debug, Clone)]
pub struct AccumulatorRing<const V: usize> {
    slots: Vec<[f32; V]>,
    columns: usize,
    tile_vectors: usize,
    loaded: usize,
    retired: usize,
    pub loads: u64,
    pub stores: u64,
    pub peak: usize,
}

impl<const V: usize> AccumulatorRing<V> {
    pub fn new(columns: usize, tile_vectors: usize) -> Self {
        Self {
            slots: vec![[0.0; V]; columns * tile_vectors],
            columns,
            tile_vectors,
            loaded: 0,
            retired: 0,
            loads: 0,
            stores: 0,
            peak: 0,
        }
    }

    /// Starts a new sweep at column 0. The previous sweep must be finished.
    #[inline]
    pub fn restart(&mut self) {
        debug_assert_eq!(self.loaded, self.retired, "sweep restarted with live columns");
        self.loaded = 0;
        self.retired = 0;
    }

    /// Live accumulator vectors.
    #[inline]
    pub fn live(&self) -> usize {
        (self.loaded - self.retired) * self.tile_vectors
    }

    /// Moves past never-touched columns. Only valid when nothing is live.
    #[inline]
    pub fn skip_to(&mut self, col: usize) {
        if self.loaded < col {
            debug_assert_eq!(self.loaded, self.retired);
            self.loaded = col;
            self.retired = col;
        }
    }

    /// Loads every column up to and including `last` from `row`, the
    /// task buffer for this sweep (`tile_vectors` vectors per column).
    #[inline]
    pub fn load_through(&mut self, last: usize, row: &[[f32; V]]) {
        let qv = self.tile_vectors;
        while self.loaded <= last {
            let slot = (self.loaded % self.columns) * qv;
            self.slots[slot..slot + qv].copy_from_slice(&row[self.loaded * qv..][..qv]);
            self.loaded += 1;
            self.loads += qv as u64;
        }
        debug_assert!(self.loaded - self.retired <= self.columns, "ring overflow");
        self.peak = self.peak.max(self.live());
    }

    /// Stores the oldest live columns while `done(col)` holds.
    #[inline]
    pub fn retire_while(&mut self, row: &mut [[f32; V]], mut done: impl FnMut(usize) -> bool) {
        while self.retired < self.loaded && done(self.retired) {
            self.store_oldest(row);
        }
    }

    /// Stores every live column.
    #[inline]
    pub fn finish(&mut self, row: &mut [[f32; V]]) {
        while self.retired < self.loaded {
            self.store_oldest(row);
        }
    }

    #[inline]
    fn store_oldest(&mut self, row: &mut [[f32; V]]) {
        let qv = self.tile_vectors;
        let slot = (self.retired % self.columns) * qv;
        row[self.retired * qv..][..qv].copy_from_slice(&self.slots[slot..slot + qv]);
        self.retired += 1;
        self.stores += qv as u64;
    }

    /// The accumulator vectors of a live column.
    #[inline(always)]
    pub fn column_mut(&mut self, col: usize) -> &mut [[f32; V]] {
        debug_assert!(col >= self.retired && col < self.loaded, "column {col} is not live");
        let qv = self.tile_vectors;
        let slot = (col % self.columns) * qv;
        &mut self.slots[slot..slot + qv]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn each_column_round_trips_once() {
        let mut row: Vec<[f32; 4]> = (0..10).map(|i| [i as f32; 4]).collect();
        let mut ring = AccumulatorRing::<4>::new(3, 2);
        ring.restart();
        for x in 0..5 {
            ring.load_through((x + 1).min(4), &row);
            for v in ring.column_mut(x) {
                v[0] += 100.0;
            }
            ring.retire_while(&mut row, |c| c <= x);
        }
        ring.finish(&mut row);
        assert_eq!((ring.loads, ring.stores), (10, 10));
        assert!(ring.peak <= 6);
        for (i, v) in row.iter().enumerate() {
            assert_eq!(v[0], i as f32 + 100.0);
            assert_eq!(v[1], i as f32);
        }
    }

    #[test]
    fn skipped_columns_are_never_touched() {
        let mut row = vec![[1.0f32; 4]; 6];
        let mut ring = AccumulatorRing::<4>::new(2, 1);
        ring.load_through(0, &row);
        ring.finish(&mut row);
        ring.skip_to(3);
        ring.load_through(4, &row);
        ring.finish(&mut row);
        assert_eq!(ring.loads, 3);
    }
}
