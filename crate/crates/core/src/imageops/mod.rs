//! Image tensors, resampling, histogram equalisation, position encoding,
//! quality metrics and file I/O.

mod histeq;
mod io;
mod metrics;
mod position;
mod resample;
mod tensor;

pub use histeq::histogram_equalize;
pub use io::{
    byte_to_unit_signed, load_png, load_tensor, read_pydt, save_png, save_tensor, to_rgb_bytes,
    unit_signed_to_byte, write_pydt, PYDT_MAGIC,
};
pub use metrics::{gaussian_window, psnr, ssim};
pub use position::position_encoding;
pub use resample::{downsample, upsample};
pub use tensor::ImageTensor;
