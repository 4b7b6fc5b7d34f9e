//! Convolution as a linear weight-sharing layer via input unfolding.
//!
//! Stride 1, same-padding, odd kernels. The unfolded input has one row
//! per spatial site holding the vectorised K×K patch across channels,
//! so the convolution becomes `unfolded · Wᵀ` with the kernel tensor
//! reshaped to `C_out × C_in K²`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Unfold a `C_in × H × W` image into an `HW × C_in K²` patch matrix.
/// Out-of-bounds samples are zero. Patch column order is (channel,
/// kernel row, kernel col), matching the kernel reshape.
pub fn conv_unfold(image: &Tensor, kernel: usize) -> Result<Tensor> {
    if image.rank() != 3 {
        return Err(Error::Rank("conv_unfold needs a rank-3 image".into()));
    }
    if kernel.is_multiple_of(2) {
        return Err(Error::Capability(format!(
            "even kernel size {kernel} unsupported under same-padding"
        )));
    }
    let (c_in, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let half = (kernel / 2) as isize;
    let mut out = Tensor::zeros(&[h * w, c_in * kernel * kernel]);
    for i in 0..h {
        for j in 0..w {
            let row = i * w + j;
            for c in 0..c_in {
                for ki in 0..kernel {
                    for kj in 0..kernel {
                        let src_i = i as isize + ki as isize - half;
                        let src_j = j as isize + kj as isize - half;
                        let col = (c * kernel + ki) * kernel + kj;
                        if src_i >= 0 && src_i < h as isize && src_j >= 0 && src_j < w as isize {
                            out.set(row, col, image.at3(c, src_i as usize, src_j as usize));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Unfold from the inter-layer representation (`HW × C_in` site matrix).
pub(super) fn unfold_site_matrix(
    sites: &Tensor,
    kernel: usize,
    c_in: usize,
    h: usize,
    w: usize,
) -> Result<Tensor> {
    let mut image = Tensor::zeros(&[c_in, h, w]);
    {
        let data = image.data_mut();
        for i in 0..h {
            for j in 0..w {
                for c in 0..c_in {
                    data[(c * h + i) * w + j] = sites.at(i * w + j, c);
                }
            }
        }
    }
    conv_unfold(&image, kernel)
}

/// Adjoint of the unfolding: scatter patch-cotangent columns back onto
/// the `HW × C_in` site matrix.
pub(super) fn conv_fold_back(
    d_unfolded: &Tensor,
    kernel: usize,
    c_in: usize,
    h: usize,
    w: usize,
) -> Result<Tensor> {
    let half = (kernel / 2) as isize;
    let mut out = Tensor::zeros(&[h * w, c_in]);
    for i in 0..h {
        for j in 0..w {
            let row = i * w + j;
            for c in 0..c_in {
                for ki in 0..kernel {
                    for kj in 0..kernel {
                        let src_i = i as isize + ki as isize - half;
                        let src_j = j as isize + kj as isize - half;
                        if src_i >= 0 && src_i < h as isize && src_j >= 0 && src_j < w as isize {
                            let col = (c * kernel + ki) * kernel + kj;
                            out.add_at(
                                (src_i as usize) * w + src_j as usize,
                                c,
                                d_unfolded.at(row, col),
                            );
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
