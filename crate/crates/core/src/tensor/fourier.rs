use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Unshifted 2-D DFT of a real `[h, w]` tensor, row-major complex output.
pub fn dft2_complex<T: Element>(x: &Tensor<T>) -> Result<(Vec<Complex64>, usize, usize)> {
    let &[h, w] = x.shape() else {
        return Err(Error::dim(format!("dft2 expects [h, w], got {:?}", x.shape())));
    };
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);

    let mut buf: Vec<Complex64> = x
        .data()
        .iter()
        .map(|v| Complex64::new(v.as_f64(), 0.0))
        .collect();
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            col[i] = buf[i * w + j];
        }
        col_fft.process(&mut col);
        for i in 0..h {
            buf[i * w + j] = col[i];
        }
    }
    Ok((buf, h, w))
}

/// Amplitude of the 2-D DFT with the zero frequency moved to `(h/2, w/2)`.
///
/// Analysis only: the result is not recorded on any tape.
pub fn dft2<T: Element>(x: &Tensor<T>) -> Result<Tensor<f64>> {
    let (spec, h, w) = dft2_complex(x)?;
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let si = (i + h / 2) % h;
            let sj = (j + w / 2) % w;
            out[si * w + sj] = spec[i * w + j].norm();
        }
    }
    Tensor::new([h, w], out)
}
