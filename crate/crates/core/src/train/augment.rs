use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecAugment {
    pub n_time: usize,
    pub max_time: usize,
    pub n_freq: usize,
    pub max_freq: usize,
}

impl Default for SpecAugment {
    fn default() -> Self {
        SpecAugment {
            n_time: 2,
            max_time: 5,
            n_freq: 2,
            max_freq: 2,
        }
    }
}

/// Spans zeroed by one augmentation draw, as `(start, width)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Masks {
    pub time: Vec<(usize, usize)>,
    pub freq: Vec<(usize, usize)>,
}

impl SpecAugment {
    pub fn disabled() -> Self {
        SpecAugment {
            n_time: 0,
            max_time: 0,
            n_freq: 0,
            max_freq: 0,
        }
    }

    /// Draws `n_time` time spans and `n_freq` frequency bands with widths
    /// uniform in `0..=max` (clamped to the axis) and uniform start.
    pub fn draw<G: Rng>(&self, frames: usize, feat_dim: usize, rng: &mut G) -> Masks {
        let span = |n: usize, max: usize, len: usize, rng: &mut G| -> Vec<(usize, usize)> {
            (0..n)
                .map(|_| {
                    let w = rng.gen_range(0..=max.min(len));
                    let s = rng.gen_range(0..=len - w);
                    (s, w)
                })
                .collect()
        };
        let time = span(self.n_time, self.max_time, frames, rng);
        let freq = span(self.n_freq, self.max_freq, feat_dim, rng);
        Masks { time, freq }
    }

    /// Zeroes the drawn spans of a row-major `frames x feat_dim` buffer.
    pub fn apply<G: Rng>(&self, features: &mut [f32], frames: usize, feat_dim: usize, rng: &mut G) -> Masks {
        let masks = self.draw(frames, feat_dim, rng);
        for &(s, w) in &masks.time {
            features[s * feat_dim..(s + w) * feat_dim].fill(0.0);
        }
        for &(s, w) in &masks.freq {
            for row in features.chunks_mut(feat_dim) {
                row[s..s + w].fill(0.0);
            }
        }
        masks
    }
}
