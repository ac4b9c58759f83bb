/// Fixed-capacity ring buffer. Storage is allocated once in [`Ring::new`] and
/// never grows; pushing into a full ring overwrites the oldest entry.
#[derive(Debug, Clone)]
pub(crate) struct Ring<T> {
    slots: Box<[T]>,
    head: usize,
    len: usize,
}

impl<T: Copy + Default> Ring<T> {
    pub(crate) fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "ring capacity must be positive");
        Self {
            slots: vec![T::default(); capacity].into_boxed_slice(),
            head: 0,
            len: 0,
        }
    }

    /// Push a value, returning the evicted one when the ring was full.
    pub(crate) fn push(&mut self, value: T) -> Option<T> {
        let cap = self.slots.len();
        let tail = (self.head + self.len) % cap;
        if self.len == cap {
            let evicted = std::mem::replace(&mut self.slots[self.head], value);
            self.head = (self.head + 1) % cap;
            Some(evicted)
        } else {
            self.slots[tail] = value;
            self.len += 1;
            None
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.len
    }

    pub(crate) fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub(crate) fn is_full(&self) -> bool {
        self.len == self.slots.len()
    }

    pub(crate) fn oldest(&self) -> Option<T> {
        (self.len > 0).then(|| self.slots[self.head])
    }

    pub(crate) fn latest(&self) -> Option<T> {
        (self.len > 0).then(|| self.slots[(self.head + self.len - 1) % self.slots.len()])
    }

    /// Oldest to newest.
    pub(crate) fn iter(&self) -> impl Iterator<Item = T> + '_ {
        (0..self.len).map(move |i| self.slots[(self.head + i) % self.slots.len()])
    }

    pub(crate) fn heap_bytes(&self) -> usize {
        self.slots.len() * std::mem::size_of::<T>()
    }
}
