//! Order-blind reference classifier on per-channel event counts.

use serde::{Deserialize, Serialize};

use crate::event_io::{channel_histogram, EventDataset, EventSequence};
use crate::model::{argmax, softmax};

/// Multinomial logistic regression on normalized channel histograms.
/// It sees how often each channel fired but never in which order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountLogistic {
    pub num_channels: u32,
    /// `num_classes × (num_channels + 1)`, bias last.
    pub weights: Vec<Vec<f64>>,
}

impl CountLogistic {
    fn features(seq: &EventSequence, num_channels: u32) -> Vec<f64> {
        let hist = channel_histogram(seq, num_channels);
        let total = hist.iter().sum::<u64>().max(1) as f64;
        let mut f: Vec<f64> = hist.iter().map(|&c| c as f64 / total).collect();
        f.push(1.0);
        f
    }

    fn logits(&self, f: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w.iter().zip(f).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Full-batch gradient descent from zero weights.
    pub fn fit(dataset: &EventDataset, iterations: usize, learning_rate: f64) -> Self {
        let j = dataset.num_channels;
        let k = dataset.num_classes as usize;
        let feats: Vec<Vec<f64>> = dataset.sequences.iter().map(|s| Self::features(s, j)).collect();
        let mut model = Self {
            num_channels: j,
            weights: vec![vec![0.0; j as usize + 1]; k],
        };
        let n = feats.len().max(1) as f64;
        for _ in 0..iterations {
            let mut grad = vec![vec![0.0; j as usize + 1]; k];
            for (f, s) in feats.iter().zip(&dataset.sequences) {
                let mut p = softmax(&model.logits(f));
                p[s.label as usize] -= 1.0;
                for (g, pc) in grad.iter_mut().zip(&p) {
                    for (gi, fi) in g.iter_mut().zip(f) {
                        *gi += pc * fi / n;
                    }
                }
            }
            for (w, g) in model.weights.iter_mut().zip(&grad) {
                for (wi, gi) in w.iter_mut().zip(g) {
                    *wi -= learning_rate * gi;
                }
            }
        }
        model
    }

    pub fn predict(&self, seq: &EventSequence) -> usize {
        argmax(&self.logits(&Self::features(seq, self.num_channels)))
    }

    pub fn accuracy(&self, dataset: &EventDataset) -> f64 {
        let hits = dataset
            .sequences
            .iter()
            .filter(|s| self.predict(s) == s.label as usize)
            .count();
        hits as f64 / dataset.len().max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_io::Event;

    #[test]
    fn learns_a_count_separable_task() {
        let seqs = (0..20)
            .map(|i| {
                let ch = (i % 2) as u32;
                EventSequence::new((0..5).map(|t| Event::new(t * 10, ch)).collect(), ch)
            })
            .collect();
        let data = EventDataset::new(2, 2, seqs);
        let m = CountLogistic::fit(&data, 200, 1.0);
        assert_eq!(m.accuracy(&data), 1.0);
    }
}
