use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Zero padding on each side before the random crop.
pub const PAD: usize = 4;

/// One image's random transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub flip: bool,
    /// Crop offset into the padded image, each in `0..=2 * PAD`.
    pub dy: usize,
    pub dx: usize,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        flip: false,
        dy: PAD,
        dx: PAD,
    };

    pub fn sample(rng: &mut Rng) -> Self {
        let flip = rng.bernoulli(0.5);
        let dy = rng.below(2 * PAD as u64 + 1) as usize;
        let dx = rng.below(2 * PAD as u64 + 1) as usize;
        AugmentDraw { flip, dy, dx }
    }
}

/// Applies a flip (left-right) followed by a pad-and-crop to one `C×H×W`
/// image. Pixels shifted in from outside are zero.
pub fn augment_image<T: Scalar>(src: &[T], [c, h, w]: [usize; 3], draw: AugmentDraw, dst: &mut [T]) {
    debug_assert_eq!(src.len(), c * h * w);
    debug_assert_eq!(dst.len(), c * h * w);
    for ch in 0..c {
        for y in 0..h {
            // Row in the unpadded image, if any.
            let sy = (y + draw.dy).checked_sub(PAD).filter(|&r| r < h);
            for x in 0..w {
                let sx = (x + draw.dx).checked_sub(PAD).filter(|&col| col < w);
                dst[(ch * h + y) * w + x] = match (sy, sx) {
                    (Some(r), Some(col)) => {
                        let col = if draw.flip { w - 1 - col } else { col };
                        src[(ch * h + r) * w + col]
                    }
                    _ => T::ZERO,
                };
            }
        }
    }
}

/// Augments every image of an `[N, C, H, W]` batch with draws from `rng`.
pub fn augment_with<T: Scalar>(batch: &Tensor<T>, rng: &mut Rng) -> Tensor<T> {
    let shape = batch.shape();
    let dims = [shape[1], shape[2], shape[3]];
    let img = dims.iter().product::<usize>();
    let mut out = Tensor::zeros(shape);
    for (src, dst) in batch.data().chunks_exact(img).zip(out.data_mut().chunks_exact_mut(img)) {
        augment_image(src, dims, AugmentDraw::sample(rng), dst);
    }
    out
}

pub fn augment<T: Scalar>(batch: &Tensor<T>, seed: u64) -> Tensor<T> {
    augment_with(batch, &mut Rng::new(seed))
}
