//! Pixel-permuting augmentations applied identically to image and mask.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An input image in `[0, 1]` with its binary ground-truth mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencySample {
    pub image: Tensor,
    pub mask: Tensor,
}

impl SaliencySample {
    pub fn new(image: Tensor, mask: Tensor) -> Result<Self> {
        let (c, h, w) = image.dims3()?;
        let (mc, mh, mw) = mask.dims3()?;
        if c != 3 || mc != 1 || (h, w) != (mh, mw) {
            return Err(Error::ShapeMismatch {
                op: "sample",
                lhs: image.shape().to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        if let Some(v) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidTensor(format!(
                "mask value {v} is not binary"
            )));
        }
        Ok(Self { image, mask })
    }
}

/// Mirrors a `[C, H, W]` tensor left to right.
pub fn hflip(t: &Tensor) -> Tensor {
    let (_, _, w) = t.dims3().expect("[C, H, W]");
    let mut data = t.data().to_vec();
    for row in data.chunks_mut(w) {
        row.reverse();
    }
    Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
}

/// Rotates a `[C, H, W]` tensor by `quarter_turns * 90°` counter-clockwise.
pub fn rot90(t: &Tensor, quarter_turns: usize) -> Tensor {
    let (c, h, w) = t.dims3().expect("[C, H, W]");
    match quarter_turns % 4 {
        0 => t.clone(),
        1 => Tensor::from_fn(&[c, w, h], |i| {
            let (ch, rem) = (i / (w * h), i % (w * h));
            let (y, x) = (rem / h, rem % h);
            t.at(&[ch, x, w - 1 - y])
        }),
        2 => {
            let mut data = t.data().to_vec();
            for plane in data.chunks_mut(h * w) {
                plane.reverse();
            }
            Tensor::new(vec![c, h, w], data).expect("shape preserved")
        }
        _ => Tensor::from_fn(&[c, w, h], |i| {
            let (ch, rem) = (i / (w * h), i % (w * h));
            let (y, x) = (rem / h, rem % h);
            t.at(&[ch, h - 1 - x, y])
        }),
    }
}

/// Horizontal flip with probability 1/2, then with probability 1/2 a
/// rotation by 90°, 180° or 270° chosen uniformly.
pub fn augment<R: Rng + ?Sized>(sample: &SaliencySample, rng: &mut R) -> SaliencySample {
    let flip = rng.gen_bool(0.5);
    let turns = if rng.gen_bool(0.5) {
        rng.gen_range(1..=3)
    } else {
        0
    };
    let apply = |t: &Tensor| {
        let t = if flip { hflip(t) } else { t.clone() };
        rot90(&t, turns)
    };
    SaliencySample {
        image: apply(&sample.image),
        mask: apply(&sample.mask),
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn rot90_moves_corner() {
        // [[1,2],[3,4]] rotated counter-clockwise is [[2,4],[1,3]]
        let t = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(rot90(&t, 1).data(), &[2.0, 4.0, 1.0, 3.0]);
        assert_eq!(rot90(&t, 2).data(), &[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(rot90(&t, 3).data(), &[3.0, 1.0, 4.0, 2.0]);
        assert_eq!(rot90(&rot90(&t, 1), 3), t);
    }

    #[test]
    fn non_square_rotation_swaps_axes() {
        let t = Tensor::from_fn(&[2, 2, 3], |i| i as f64);
        assert_eq!(rot90(&t, 1).shape(), &[2, 3, 2]);
        assert_eq!(rot90(&rot90(&t, 1), 1), rot90(&t, 2));
    }

    proptest! {
        #[test]
        fn flip_is_involution(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::from_fn(&[2, h, w], |_| rng.gen::<f64>());
            prop_assert_eq!(hflip(&hflip(&t)), t);
        }

        #[test]
        fn augmentation_keeps_mask_binary_and_foreground_count(seed in any::<u64>(), n in 2usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let side = 4 * n;
            let image = Tensor::from_fn(&[3, side, side], |_| rng.gen::<f64>());
            let mask = Tensor::from_fn(&[1, side, side], |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
            let sample = SaliencySample::new(image, mask.clone()).unwrap();
            let out = augment(&sample, &mut rng);
            prop_assert!(out.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            prop_assert_eq!(out.mask.sum(), mask.sum());
            prop_assert!((out.image.sum() - sample.image.sum()).abs() < 1e-9);
        }
    }
}
