use super::config::ModelConfig;
use super::vocab::ModalityTag;
use crate::num::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CacheEntry {
    pub position: usize,
    pub tick: usize,
    pub expert: usize,
    pub tag: ModalityTag,
}

/// Keys and values of every processed token, whichever expert produced them.
#[derive(Clone, Debug)]
pub struct UnifiedKVCache {
    kv_dim: usize,
    entries: Vec<CacheEntry>,
    keys: Vec<Vec<Float>>,
    values: Vec<Vec<Float>>,
    next_position: usize,
}

impl UnifiedKVCache {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            kv_dim: config.kv_dim(),
            entries: Vec::new(),
            keys: vec![Vec::new(); config.n_layers],
            values: vec![Vec::new(); config.n_layers],
            next_position: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    /// Number of key rows stored for layer `l`.
    pub fn layer_len(&self, l: usize) -> usize {
        self.keys[l].len() / self.kv_dim
    }

    pub fn entries(&self) -> &[CacheEntry] {
        &self.entries
    }

    pub fn next_position(&self) -> usize {
        self.next_position
    }

    pub fn key(&self, layer: usize, i: usize) -> &[Float] {
        &self.keys[layer][i * self.kv_dim..(i + 1) * self.kv_dim]
    }

    pub fn value(&self, layer: usize, i: usize) -> &[Float] {
        &self.values[layer][i * self.kv_dim..(i + 1) * self.kv_dim]
    }

    pub(crate) fn keys_layer(&self, layer: usize) -> &[Float] {
        &self.keys[layer]
    }

    pub(crate) fn values_layer(&self, layer: usize) -> &[Float] {
        &self.values[layer]
    }

    pub(crate) fn push_entry(&mut self, e: CacheEntry) {
        debug_assert_eq!(e.position, self.next_position);
        self.entries.push(e);
        self.next_position = e.position + 1;
    }

    pub(crate) fn push_kv(&mut self, layer: usize, k: &[Float], v: &[Float]) {
        self.keys[layer].extend_from_slice(k);
        self.values[layer].extend_from_slice(v);
    }

    /// Keep entries for which `keep` holds. Survivors keep their positions and order.
    pub fn retain(&mut self, mut keep: impl FnMut(&CacheEntry) -> bool) -> usize {
        let flags: Vec<bool> = self.entries.iter().map(&mut keep).collect();
        let before = self.entries.len();
        let d = self.kv_dim;
        for store in self.keys.iter_mut().chain(self.values.iter_mut()) {
            let mut w = 0;
            for (i, &f) in flags.iter().enumerate() {
                if f {
                    if w != i {
                        store.copy_within(i * d..(i + 1) * d, w * d);
                    }
                    w += 1;
                }
            }
            store.truncate(w * d);
        }
        let mut it = flags.iter();
        self.entries.retain(|_| *it.next().unwrap());
        before - self.entries.len()
    }
}
