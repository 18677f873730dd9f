//! Frequency-domain channel descriptors.
//!
//! The feature map is split along channels into `n` equal groups; group `i`
//! is projected onto one unnormalized 2D-DCT basis `B_{u_i, v_i}` and the
//! per-channel projections are concatenated back in group order.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of frequency components used by default.
pub const DEFAULT_COMPONENTS: usize = 16;

/// `B[a,b] = cos(πu/h·(a+½))·cos(πv/w·(b+½))`.
pub fn dct_basis(h: usize, w: usize, u: usize, v: usize) -> Result<Tensor> {
    if u >= h || v >= w {
        return Err(Error::invalid(format!("frequency ({u},{v}) outside {h}×{w} grid")));
    }
    let mut data = Vec::with_capacity(h * w);
    for a in 0..h {
        let ca = (PI * u as f64 / h as f64 * (a as f64 + 0.5)).cos();
        for b in 0..w {
            data.push(ca * (PI * v as f64 / w as f64 * (b as f64 + 0.5)).cos());
        }
    }
    Tensor::new(vec![h, w], data)
}

/// Ordered `(u, v)` pairs, one per channel group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FrequencySelection {
    pairs: Vec<[usize; 2]>,
}

impl FrequencySelection {
    pub fn new(pairs: Vec<[usize; 2]>) -> Result<Self> {
        if pairs.first() != Some(&[0, 0]) {
            return Err(Error::invalid("frequency selection must start with (0,0)"));
        }
        for (i, p) in pairs.iter().enumerate() {
            if pairs[..i].contains(p) {
                return Err(Error::invalid(format!("duplicate frequency pair {p:?}")));
            }
        }
        Ok(Self { pairs })
    }

    /// The lowest `n` frequencies of the `min(4,h)×min(4,w)` block, ordered by
    /// `(u+v, u)`. `n` is capped at the number of available pairs.
    pub fn lowest(n: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("selection needs at least one pair"));
        }
        let mut all: Vec<[usize; 2]> = (0..h.min(4))
            .flat_map(|u| (0..w.min(4)).map(move |v| [u, v]))
            .collect();
        all.sort_by_key(|&[u, v]| (u + v, u));
        all.truncate(n);
        Self::new(all)
    }

    /// The largest lowest-frequency selection (at most 16 pairs) whose size divides `c`.
    pub fn for_shape(c: usize, h: usize, w: usize) -> Result<Self> {
        let avail = DEFAULT_COMPONENTS.min(h.min(4) * w.min(4));
        let n = (1..=avail).rev().find(|n| c % n == 0).unwrap_or(1);
        Self::lowest(n, h, w)
    }

    pub fn n(&self) -> usize {
        self.pairs.len()
    }

    pub fn pairs(&self) -> &[[usize; 2]] {
        &self.pairs
    }

    /// Per-channel projection weights `c×h×w`: channel `ch` carries the basis of its group.
    pub fn weights(&self, c: usize, h: usize, w: usize) -> Result<Tensor> {
        let n = self.n();
        if c % n != 0 {
            return Err(Error::invalid(format!("{n} frequency groups do not divide {c} channels")));
        }
        let per = c / n;
        let mut data = Vec::with_capacity(c * h * w);
        for &[u, v] in &self.pairs {
            let basis = dct_basis(h, w, u, v)?;
            for _ in 0..per {
                data.extend_from_slice(basis.data());
            }
        }
        Tensor::new(vec![c, h, w], data)
    }
}

/// Frequency-encoded channel vector `τ ∈ R^c` of a `c×h×w` map.
pub fn msa_encode(s: &Tensor, sel: &FrequencySelection) -> Result<Tensor> {
    s.expect_rank(3, "msa_encode")?;
    let [c, h, w] = [s.shape()[0], s.shape()[1], s.shape()[2]];
    let weights = sel.weights(c, h, w)?;
    encode_with(s, &weights)
}

/// Spatial mean per channel.
pub fn gap_encode(s: &Tensor) -> Result<Tensor> {
    s.expect_rank(3, "gap_encode")?;
    let [c, h, w] = [s.shape()[0], s.shape()[1], s.shape()[2]];
    encode_with(s, &gap_weights(c, h, w))
}

/// Weights that project every channel onto `B_{0,0}`, i.e. a selection whose
/// every group uses the DC term.
pub fn dc_weights(c: usize, h: usize, w: usize) -> Tensor {
    Tensor::ones(&[c, h, w])
}

pub(crate) fn gap_weights(c: usize, h: usize, w: usize) -> Tensor {
    Tensor::full(&[c, h, w], 1.0 / (h * w) as f64)
}

/// Projects each channel of `s` onto the matching plane of `weights`.
pub fn encode_with(s: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let out = crate::ops::channel_weighted_sum(s, weights)?;
    out.reshape(&[out.len()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dc_basis_is_all_ones() {
        assert_eq!(dct_basis(5, 5, 0, 0).unwrap(), Tensor::ones(&[5, 5]));
    }

    #[test]
    fn basis_entry_formula() {
        let b = dct_basis(2, 2, 1, 0).unwrap();
        assert!((b.at(&[0, 0]) - 2f64.sqrt() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn nonzero_frequencies_sum_to_zero() {
        for (h, w) in [(3, 3), (5, 5), (4, 7)] {
            for u in 0..h {
                for v in 0..w {
                    if u + v == 0 {
                        continue;
                    }
                    assert!(dct_basis(h, w, u, v).unwrap().sum().abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn out_of_range_frequency() {
        assert!(matches!(dct_basis(3, 3, 3, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn default_selection_order() {
        let sel = FrequencySelection::lowest(16, 5, 5).unwrap();
        assert_eq!(sel.n(), 16);
        assert_eq!(&sel.pairs()[..6], &[[0, 0], [0, 1], [1, 0], [0, 2], [1, 1], [2, 0]]);
        assert_eq!(sel.pairs()[15], [3, 3]);
        // small grids shrink n instead of padding
        assert_eq!(FrequencySelection::lowest(16, 3, 3).unwrap().n(), 9);
        assert_eq!(FrequencySelection::for_shape(8, 3, 3).unwrap().n(), 8);
        assert_eq!(FrequencySelection::for_shape(32, 5, 5).unwrap().n(), 16);
    }

    #[test]
    fn selection_invariants() {
        assert!(FrequencySelection::new(vec![[0, 1], [0, 0]]).is_err());
        assert!(FrequencySelection::new(vec![[0, 0], [0, 0]]).is_err());
        let sel = FrequencySelection::lowest(16, 5, 5).unwrap();
        let s = Tensor::zeros(&[24, 5, 5]);
        assert!(matches!(msa_encode(&s, &sel), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn all_ones_dc_encoding() {
        let s = Tensor::ones(&[16, 5, 5]);
        let tau = encode_with(&s, &dc_weights(16, 5, 5)).unwrap();
        assert!(tau.data().iter().all(|&t| t == 25.0));
    }

    #[test]
    fn constant_channels_vanish_on_ac_groups() {
        let sel = FrequencySelection::lowest(16, 5, 5).unwrap();
        let mut s = Tensor::zeros(&[32, 5, 5]);
        for ch in 0..32 {
            for i in 0..25 {
                s.data_mut()[ch * 25 + i] = ch as f64 + 1.0;
            }
        }
        let tau = msa_encode(&s, &sel).unwrap();
        for (ch, t) in tau.data().iter().enumerate() {
            if ch >= 2 {
                assert!(t.abs() < 1e-12);
            } else {
                assert!((t - 25.0 * (ch as f64 + 1.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn msa_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = Tensor::uniform(&[32, 5, 5], 1.0, &mut rng);
        let sel = FrequencySelection::lowest(16, 5, 5).unwrap();
        let tau = msa_encode(&s, &sel).unwrap();
        for ch in 0..32 {
            let [u, v] = sel.pairs()[ch / 2];
            let mut acc = 0.0;
            for a in 0..5 {
                for b in 0..5 {
                    let basis = (PI * u as f64 / 5.0 * (a as f64 + 0.5)).cos()
                        * (PI * v as f64 / 5.0 * (b as f64 + 0.5)).cos();
                    acc += s.at(&[ch, a, b]) * basis;
                }
            }
            assert!((tau.data()[ch] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn gap_matches_mean() {
        assert_eq!(gap_encode(&Tensor::ones(&[3, 4, 4])).unwrap(), Tensor::ones(&[3]));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = Tensor::uniform(&[4, 3, 5], 1.0, &mut rng);
        let g = gap_encode(&s).unwrap();
        for ch in 0..4 {
            let mean = s.data()[ch * 15..(ch + 1) * 15].iter().sum::<f64>() / 15.0;
            assert!((g.data()[ch] - mean).abs() < 1e-14);
        }
    }
}
