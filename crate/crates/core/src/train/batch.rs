use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Recording;
use crate::model::{ArchConfig, FrameBatch, ModelError};
use crate::tensor::Tensor;

/// A window addressed as (recording index, final frame).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WindowRef {
    pub rec: usize,
    pub t: usize,
}

/// Every stride-1 window of every recording, in recording order.
pub fn all_windows(recs: &[Recording], k: usize) -> Vec<WindowRef> {
    recs.iter()
        .enumerate()
        .flat_map(|(r, rec)| (k..rec.len()).map(move |t| WindowRef { rec: r, t }))
        .collect()
}

/// Uniform sampling without replacement within each epoch.
///
/// The permutation of epoch `e` is a pure function of `(seed, e)`, so the
/// batch of any step can be reproduced from the step number alone.
#[derive(Debug, Clone)]
pub struct WindowSampler {
    windows: Vec<WindowRef>,
    seed: u64,
    epoch: Option<(u64, Vec<usize>)>,
}

impl WindowSampler {
    pub fn new(windows: Vec<WindowRef>, seed: u64) -> Self {
        Self {
            windows,
            seed,
            epoch: None,
        }
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    fn order(&mut self, epoch: u64) -> &[usize] {
        if self.epoch.as_ref().map(|e| e.0) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5EED_0000_0000_0000);
            rng.set_stream(epoch);
            let mut idx: Vec<usize> = (0..self.windows.len()).collect();
            idx.shuffle(&mut rng);
            self.epoch = Some((epoch, idx));
        }
        &self.epoch.as_ref().expect("epoch order").1
    }

    /// Windows of 0-based training step `step`.
    pub fn batch(&mut self, step: u64, batch_size: usize) -> Vec<WindowRef> {
        let n = self.windows.len() as u64;
        (0..batch_size as u64)
            .map(|j| {
                let i = step * batch_size as u64 + j;
                let pos = self.order(i / n)[(i % n) as usize];
                self.windows[pos]
            })
            .collect()
    }
}

/// Stacks the distinct frames the windows touch and maps each window onto
/// them. Labels are `[B, 2]` (arousal, valence) at each window's last frame.
pub fn assemble(
    recs: &[Recording],
    windows: &[WindowRef],
    arch: &ArchConfig,
) -> Result<(FrameBatch, Tensor), ModelError> {
    let k = arch.window - 1;
    let mut slot: HashMap<(usize, usize), usize> = HashMap::new();
    let mut frames: Vec<(usize, usize)> = Vec::new();
    let mut index = Vec::with_capacity(windows.len());
    let mut labels = Vec::with_capacity(2 * windows.len());
    for w in windows {
        let rec = &recs[w.rec];
        if w.t < k || w.t >= rec.len() {
            return Err(ModelError::WindowLength {
                expected: arch.window,
                got: w.t.min(rec.len()) + 1,
            });
        }
        let rows = (w.t - k..=w.t)
            .map(|f| {
                *slot.entry((w.rec, f)).or_insert_with(|| {
                    frames.push((w.rec, f));
                    frames.len() - 1
                })
            })
            .collect();
        index.push(rows);
        let l = rec.labels()[w.t];
        labels.extend([l.arousal, l.valence]);
    }
    let images = if arch.visual {
        let s = arch.image_size;
        let want = [s, s, arch.image_channels];
        let mut data = Vec::with_capacity(frames.len() * arch.image_len());
        for &(r, f) in &frames {
            let img = &recs[r].images()[f];
            if [img.size(), img.size(), img.channels()] != want {
                return Err(ModelError::InputShape {
                    what: "image frame",
                    expected: want.to_vec(),
                    got: vec![img.size(), img.size(), img.channels()],
                });
            }
            data.extend_from_slice(img.data());
        }
        Some(Tensor::new(vec![frames.len(), s, s, arch.image_channels], data)?)
    } else {
        None
    };
    let audio = if arch.audio {
        let mut data = Vec::with_capacity(frames.len() * arch.audio_len);
        for &(r, f) in &frames {
            let a = recs[r].audio()[f].samples();
            if a.len() != arch.audio_len {
                return Err(ModelError::InputShape {
                    what: "audio frame",
                    expected: vec![arch.audio_len],
                    got: vec![a.len()],
                });
            }
            data.extend_from_slice(a);
        }
        Some(Tensor::new(vec![frames.len(), arch.audio_len, 1], data)?)
    } else {
        None
    };
    let batch = FrameBatch {
        images,
        audio,
        windows: index,
    };
    Ok((batch, Tensor::new(vec![windows.len(), 2], labels)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn refs(n: usize) -> Vec<WindowRef> {
        (0..n).map(|t| WindowRef { rec: 0, t }).collect()
    }

    #[test]
    fn each_epoch_visits_every_window_once() {
        let mut s = WindowSampler::new(refs(10), 3);
        let mut seen: Vec<usize> = (0..5).flat_map(|step| s.batch(step, 2)).map(|w| w.t).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batches_depend_only_on_seed_and_step() {
        let mut a = WindowSampler::new(refs(7), 1);
        let mut b = WindowSampler::new(refs(7), 1);
        let first: Vec<_> = (0..9).map(|s| a.batch(s, 3)).collect();
        assert_eq!(b.batch(8, 3), first[8]);
        assert_eq!(b.batch(2, 3), first[2]);
        let mut c = WindowSampler::new(refs(7), 2);
        assert_ne!((0..9).map(|s| c.batch(s, 3)).collect::<Vec<_>>(), first);
    }
}
