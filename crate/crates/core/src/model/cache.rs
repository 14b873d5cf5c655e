use crate::error::{Error, Result};

/// Keys and values of one layer, stored per kv-head as flat row-major
/// `[n × head_dim]` buffers. Every head holds the same number of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    head_dim: usize,
    len: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    next_position: usize,
}

impl LayerCache {
    pub fn new(kv_heads: usize, head_dim: usize) -> Self {
        Self {
            head_dim,
            len: 0,
            keys: vec![Vec::new(); kv_heads],
            values: vec![Vec::new(); kv_heads],
            next_position: 0,
        }
    }

    /// Builds a layer from per-head buffers; rejects ragged heads.
    pub fn from_heads(
        head_dim: usize,
        keys: Vec<Vec<f64>>,
        values: Vec<Vec<f64>>,
        next_position: usize,
    ) -> Result<Self> {
        if keys.len() != values.len() || keys.is_empty() || head_dim == 0 {
            return Err(Error::shape("key/value head counts differ or are zero"));
        }
        let len = keys[0].len() / head_dim;
        for buf in keys.iter().chain(&values) {
            if buf.len() != len * head_dim {
                return Err(Error::invariant(
                    "kv-heads of one layer must hold the same number of rows",
                ));
            }
        }
        Ok(Self {
            head_dim,
            len,
            keys,
            values,
            next_position,
        })
    }

    pub fn kv_heads(&self) -> usize {
        self.keys.len()
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Rows per head (`n_ℓ`).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn next_position(&self) -> usize {
        self.next_position
    }

    pub fn head_keys(&self, head: usize) -> &[f64] {
        &self.keys[head]
    }

    pub fn head_values(&self, head: usize) -> &[f64] {
        &self.values[head]
    }

    pub fn key_row(&self, head: usize, row: usize) -> &[f64] {
        &self.keys[head][row * self.head_dim..(row + 1) * self.head_dim]
    }

    pub fn value_row(&self, head: usize, row: usize) -> &[f64] {
        &self.values[head][row * self.head_dim..(row + 1) * self.head_dim]
    }

    /// Appends one row per head. `keys`/`values` are `[kv_heads × head_dim]`.
    pub fn push(&mut self, keys: &[f64], values: &[f64], position: usize) {
        let dh = self.head_dim;
        for h in 0..self.kv_heads() {
            self.keys[h].extend_from_slice(&keys[h * dh..(h + 1) * dh]);
            self.values[h].extend_from_slice(&values[h * dh..(h + 1) * dh]);
        }
        self.len += 1;
        self.next_position = self.next_position.max(position + 1);
    }

    /// Gathers `rows[h]` from each head into a new layer. All heads must
    /// request the same number of rows.
    pub fn gather(&self, rows: &[Vec<usize>]) -> Result<LayerCache> {
        if rows.len() != self.kv_heads() {
            return Err(Error::shape(format!(
                "selection names {} heads, layer has {}",
                rows.len(),
                self.kv_heads()
            )));
        }
        let count = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != count) {
            return Err(Error::invariant(
                "structured selection must keep the same count on every head",
            ));
        }
        let dh = self.head_dim;
        let mut keys = Vec::with_capacity(rows.len());
        let mut values = Vec::with_capacity(rows.len());
        for (h, head_rows) in rows.iter().enumerate() {
            let mut k = Vec::with_capacity(count * dh);
            let mut v = Vec::with_capacity(count * dh);
            for &r in head_rows {
                if r >= self.len {
                    return Err(Error::invariant(format!(
                        "row {r} out of range for a layer of {} rows",
                        self.len
                    )));
                }
                k.extend_from_slice(self.key_row(h, r));
                v.extend_from_slice(self.value_row(h, r));
            }
            keys.push(k);
            values.push(v);
        }
        Ok(LayerCache {
            head_dim: dh,
            len: count,
            keys,
            values,
            next_position: self.next_position,
        })
    }
}

/// Ragged-across-layers cache: `n_ℓ` may differ between layers, never
/// between the heads of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KVCache {
    layers: Vec<LayerCache>,
}

impl KVCache {
    pub fn empty(layers: usize, kv_heads: usize, head_dim: usize) -> Self {
        Self {
            layers: (0..layers)
                .map(|_| LayerCache::new(kv_heads, head_dim))
                .collect(),
        }
    }

    pub fn from_layers(layers: Vec<LayerCache>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[LayerCache] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &LayerCache {
        &self.layers[l]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut LayerCache {
        &mut self.layers[l]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Per-layer row counts `n_ℓ`.
    pub fn lens(&self) -> Vec<usize> {
        self.layers.iter().map(LayerCache::len).collect()
    }

    /// Position the next decoded token should take.
    pub fn next_position(&self) -> usize {
        self.layers
            .iter()
            .map(LayerCache::next_position)
            .max()
            .unwrap_or(0)
    }

    /// Cache entries (rows × head_dim, keys and values) across all layers.
    pub fn entry_count(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| 2 * (l.kv_heads() * l.len() * l.head_dim()) as u64)
            .sum()
    }
}
