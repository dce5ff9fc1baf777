//! Fixed-kernel 2-D cross-correlation with replicate padding.

use crate::autodiff::conv3x3_forward;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
pub const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// Cross-correlates an `H x W` field with a `3 x 3` kernel. Out-of-range
/// neighbours take the value of the nearest edge cell. The output has the
/// input's shape.
pub fn fixed_conv2d(field: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (h, w) = field.dims2()?;
    if kernel.shape() != [3, 3] {
        return Err(Error::shape(
            "fixed_conv2d",
            format!("kernel must be 3x3, got {:?}", kernel.shape()),
        ));
    }
    if h < 3 || w < 3 {
        return Err(Error::shape(
            "fixed_conv2d",
            format!("{h}x{w} field is smaller than the 3x3 kernel"),
        ));
    }
    let k: [f64; 9] = kernel.data().try_into().expect("checked 3x3");
    let mut out = vec![0.0; h * w];
    conv3x3_forward(field.data(), &k, h, w, &mut out);
    Ok(Tensor::from_parts(vec![h, w], out))
}
