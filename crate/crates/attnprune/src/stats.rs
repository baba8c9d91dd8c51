//! Attention statistics: per-channel means of the softmax outputs over the
//! training set, the pruning criterion.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Kahan-compensated per-channel running sum.
#[derive(Debug, Clone)]
struct LayerAccum {
    channels: usize,
    sum: Vec<f64>,
    comp: Vec<f64>,
    count: u64,
    /// per-class sums, K x C, when class tracking is on
    per_class: Option<Vec<Vec<f64>>>,
    class_counts: Option<Vec<u64>>,
}

impl LayerAccum {
    fn new(channels: usize, num_classes: Option<usize>) -> Self {
        LayerAccum {
            channels,
            sum: vec![0.0; channels],
            comp: vec![0.0; channels],
            count: 0,
            per_class: num_classes.map(|k| vec![vec![0.0; channels]; k]),
            class_counts: num_classes.map(|k| vec![0; k]),
        }
    }

    fn add(&mut self, c: usize, v: f64) {
        let y = v - self.comp[c];
        let t = self.sum[c] + y;
        self.comp[c] = (t - self.sum[c]) - y;
        self.sum[c] = t;
    }
}

/// Streaming accumulator over softmax outputs, one vector per layer.
#[derive(Debug, Clone)]
pub struct AttentionStats {
    layers: BTreeMap<String, LayerAccum>,
    finalized: bool,
    pub alpha: f64,
    num_classes: Option<usize>,
}

impl AttentionStats {
    /// `layer_channels` maps layer id -> C_l. Pass `num_classes` to also keep
    /// the per-class breakdown.
    pub fn new(layer_channels: &BTreeMap<String, usize>, alpha: f64, num_classes: Option<usize>) -> Self {
        AttentionStats {
            layers: layer_channels
                .iter()
                .map(|(id, &c)| (id.clone(), LayerAccum::new(c, num_classes)))
                .collect(),
            finalized: false,
            alpha,
            num_classes,
        }
    }

    pub fn layer_ids(&self) -> Vec<String> {
        self.layers.keys().cloned().collect()
    }

    /// Add a batch of softmax rows for one layer.
    pub fn accumulate(&mut self, layer_id: &str, s_batch: &Tensor, labels: Option<&[usize]>) -> Result<()> {
        if self.finalized {
            return Err(Error::InvalidState("statistics already finalized".into()));
        }
        let acc = self
            .layers
            .get_mut(layer_id)
            .ok_or_else(|| Error::InvalidState(format!("unknown statistics layer '{layer_id}'")))?;
        if s_batch.shape.len() != 2 || s_batch.shape[1] != acc.channels {
            return Err(Error::dim(
                format!("statistics for {layer_id}"),
                format!("N x {}", acc.channels),
                format!("{:?}", s_batch.shape),
            ));
        }
        let n = s_batch.shape[0];
        if let Some(labels) = labels {
            if labels.len() != n {
                return Err(Error::dim("statistics labels", n, labels.len()));
            }
        }
        for ni in 0..n {
            for c in 0..acc.channels {
                let v = s_batch.data[ni * acc.channels + c];
                acc.add(c, v);
                if let (Some(pc), Some(labels)) = (&mut acc.per_class, labels) {
                    pc[labels[ni]][c] += v;
                }
            }
            if let (Some(counts), Some(labels)) = (&mut acc.class_counts, labels) {
                counts[labels[ni]] += 1;
            }
        }
        acc.count += n as u64;
        Ok(())
    }

    /// Combine two shard accumulators; associative and commutative.
    pub fn merge(mut a: AttentionStats, b: AttentionStats) -> Result<AttentionStats> {
        if a.finalized || b.finalized {
            return Err(Error::InvalidState("cannot merge finalized statistics".into()));
        }
        if a.layers.len() != b.layers.len() {
            return Err(Error::dim("statistics merge", a.layers.len(), b.layers.len()));
        }
        for (id, rhs) in b.layers {
            let lhs = a
                .layers
                .get_mut(&id)
                .ok_or_else(|| Error::InvalidState(format!("merge layout mismatch at '{id}'")))?;
            if lhs.channels != rhs.channels {
                return Err(Error::dim(format!("merge channels for {id}"), lhs.channels, rhs.channels));
            }
            for c in 0..lhs.channels {
                lhs.add(c, rhs.sum[c]);
            }
            lhs.count += rhs.count;
            if let (Some(l), Some(r)) = (&mut lhs.per_class, &rhs.per_class) {
                for (lrow, rrow) in l.iter_mut().zip(r) {
                    for (lv, rv) in lrow.iter_mut().zip(rrow) {
                        *lv += rv;
                    }
                }
            }
            if let (Some(l), Some(r)) = (&mut lhs.class_counts, &rhs.class_counts) {
                for (lv, rv) in l.iter_mut().zip(r) {
                    *lv += rv;
                }
            }
        }
        Ok(a)
    }

    /// Elementwise means per layer. Marks the accumulator finalized.
    pub fn finalize(&mut self) -> Result<BTreeMap<String, Vec<f64>>> {
        let mut count = None;
        for (id, acc) in &self.layers {
            if acc.count == 0 {
                return Err(Error::InvalidState(format!("no samples accumulated for '{id}'")));
            }
            match count {
                None => count = Some(acc.count),
                Some(c) if c != acc.count => {
                    return Err(Error::InvalidState(format!(
                        "sample counts differ across layers ({c} vs {} for '{id}')",
                        acc.count
                    )))
                }
                _ => {}
            }
        }
        self.finalized = true;
        Ok(self
            .layers
            .iter()
            .map(|(id, acc)| {
                (
                    id.clone(),
                    acc.sum.iter().map(|s| s / acc.count as f64).collect(),
                )
            })
            .collect())
    }

    pub fn sample_count(&self) -> u64 {
        self.layers.values().next().map(|a| a.count).unwrap_or(0)
    }

    /// Serializable snapshot (also finalizes).
    pub fn to_file(&mut self) -> Result<StatsFile> {
        let means = self.finalize()?;
        let layers = self
            .layers
            .iter()
            .map(|(id, acc)| StatsLayer {
                id: id.clone(),
                channels: acc.channels,
                a: means[id].clone(),
            })
            .collect();
        let per_class = if self.num_classes.is_some() {
            Some(
                self.layers
                    .iter()
                    .map(|(id, acc)| {
                        let counts = acc.class_counts.as_ref().unwrap();
                        let rows = acc
                            .per_class
                            .as_ref()
                            .unwrap()
                            .iter()
                            .zip(counts)
                            .map(|(row, &n)| {
                                row.iter()
                                    .map(|v| if n > 0 { v / n as f64 } else { 0.0 })
                                    .collect()
                            })
                            .collect();
                        PerClassLayer {
                            id: id.clone(),
                            class_counts: counts.clone(),
                            a: rows,
                        }
                    })
                    .collect(),
            )
        } else {
            None
        };
        Ok(StatsFile {
            sample_count: self.sample_count(),
            alpha: self.alpha,
            layers,
            per_class,
        })
    }
}

/// The `stats.json` interchange schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsFile {
    pub sample_count: u64,
    pub alpha: f64,
    pub layers: Vec<StatsLayer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class: Option<Vec<PerClassLayer>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsLayer {
    pub id: String,
    pub channels: usize,
    pub a: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerClassLayer {
    pub id: String,
    pub class_counts: Vec<u64>,
    /// K x C per-class means
    pub a: Vec<Vec<f64>>,
}

impl StatsFile {
    pub fn criterion(&self) -> BTreeMap<String, Vec<f64>> {
        self.layers.iter().map(|l| (l.id.clone(), l.a.clone())).collect()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<StatsFile> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(pairs: &[(&str, usize)]) -> BTreeMap<String, usize> {
        pairs.iter().map(|(s, c)| (s.to_string(), *c)).collect()
    }

    fn rows(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn single_sample_mean() {
        let mut st = AttentionStats::new(&dims(&[("l1", 2)]), 0.06, None);
        st.accumulate("l1", &rows(&[1, 2], &[0.7, 0.3]), None).unwrap();
        let m = st.finalize().unwrap();
        assert_eq!(m["l1"], vec![0.7, 0.3]);
    }

    #[test]
    fn two_sample_mean() {
        let mut st = AttentionStats::new(&dims(&[("l1", 2)]), 0.0, None);
        st.accumulate("l1", &rows(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), None).unwrap();
        let m = st.finalize().unwrap();
        assert_eq!(m["l1"], vec![0.5, 0.5]);
    }

    #[test]
    fn matches_arithmetic_mean_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let c = 6;
        let mut st = AttentionStats::new(&dims(&[("l1", c)]), 0.0, None);
        let mut expected = vec![0.0; c];
        for _ in 0..1000 {
            let mut row: Vec<f64> = (0..c).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
            for (e, v) in expected.iter_mut().zip(&row) {
                *e += v;
            }
            st.accumulate("l1", &rows(&[1, c], &row), None).unwrap();
        }
        let m = st.finalize().unwrap();
        for (got, e) in m["l1"].iter().zip(&expected) {
            assert!((got - e / 1000.0).abs() < 1e-12);
        }
        // normalization carries through the mean
        let total: f64 = m["l1"].iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn accumulate_after_finalize_fails() {
        let mut st = AttentionStats::new(&dims(&[("l1", 2)]), 0.0, None);
        st.accumulate("l1", &rows(&[1, 2], &[0.5, 0.5]), None).unwrap();
        st.finalize().unwrap();
        assert!(st.accumulate("l1", &rows(&[1, 2], &[0.5, 0.5]), None).is_err());
    }

    #[test]
    fn finalize_without_samples_fails() {
        let mut st = AttentionStats::new(&dims(&[("l1", 2)]), 0.0, None);
        assert!(st.finalize().is_err());
    }

    #[test]
    fn mismatched_layer_counts_fail_finalize() {
        let mut st = AttentionStats::new(&dims(&[("l1", 2), ("l2", 2)]), 0.0, None);
        st.accumulate("l1", &rows(&[1, 2], &[0.5, 0.5]), None).unwrap();
        st.accumulate("l2", &rows(&[1, 2], &[0.5, 0.5]), None).unwrap();
        st.accumulate("l1", &rows(&[1, 2], &[0.5, 0.5]), None).unwrap();
        assert!(st.finalize().is_err());
    }

    #[test]
    fn merge_identity_and_commutativity() {
        let layout = dims(&[("l1", 3)]);
        let mut a = AttentionStats::new(&layout, 0.0, None);
        a.accumulate("l1", &rows(&[1, 3], &[0.2, 0.3, 0.5]), None).unwrap();
        let empty = AttentionStats::new(&layout, 0.0, None);
        let mut merged = AttentionStats::merge(a.clone(), empty.clone()).unwrap();
        assert_eq!(merged.finalize().unwrap()["l1"], vec![0.2, 0.3, 0.5]);

        let mut b = AttentionStats::new(&layout, 0.0, None);
        b.accumulate("l1", &rows(&[1, 3], &[0.6, 0.2, 0.2]), None).unwrap();
        let mut ab = AttentionStats::merge(a.clone(), b.clone()).unwrap();
        let mut ba = AttentionStats::merge(b, a).unwrap();
        assert_eq!(ab.finalize().unwrap()["l1"], ba.finalize().unwrap()["l1"]);
    }

    #[test]
    fn sharded_pass_equals_single_pass() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let layout = dims(&[("l1", 4)]);
        let samples: Vec<Vec<f64>> = (0..40)
            .map(|_| {
                let mut row: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
                row
            })
            .collect();
        let mut single = AttentionStats::new(&layout, 0.0, None);
        for s in &samples {
            single.accumulate("l1", &rows(&[1, 4], s), None).unwrap();
        }
        let mut shards: Vec<AttentionStats> = (0..4).map(|_| AttentionStats::new(&layout, 0.0, None)).collect();
        for (i, s) in samples.iter().enumerate() {
            shards[i % 4].accumulate("l1", &rows(&[1, 4], s), None).unwrap();
        }
        let mut merged = shards
            .into_iter()
            .reduce(|a, b| AttentionStats::merge(a, b).unwrap())
            .unwrap();
        let (m1, m2) = (single.finalize().unwrap(), merged.finalize().unwrap());
        for (a, b) in m1["l1"].iter().zip(&m2["l1"]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn per_class_rows_consistent_with_global_mean() {
        let layout = dims(&[("l1", 2)]);
        let mut st = AttentionStats::new(&layout, 0.0, Some(2));
        st.accumulate("l1", &rows(&[2, 2], &[0.8, 0.2, 0.4, 0.6]), Some(&[0, 1])).unwrap();
        st.accumulate("l1", &rows(&[1, 2], &[0.6, 0.4]), Some(&[0])).unwrap();
        let file = st.to_file().unwrap();
        let pc = &file.per_class.unwrap()[0];
        assert_eq!(pc.class_counts, vec![2, 1]);
        // class-frequency weighted per-class means reproduce the global mean
        let total: u64 = pc.class_counts.iter().sum();
        for c in 0..2 {
            let weighted: f64 = pc
                .a
                .iter()
                .zip(&pc.class_counts)
                .map(|(row, &n)| row[c] * n as f64 / total as f64)
                .sum();
            assert!((weighted - file.layers[0].a[c]).abs() < 1e-12);
        }
    }
}
