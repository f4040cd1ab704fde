use rand::Rng;

use crate::error::{Error, Result};
use crate::media::Frame;

/// Random `crop x crop` window, then a horizontal flip with probability 0.5
/// when `flip` is set.
pub fn augment_frame<R: Rng + ?Sized>(frame: &Frame, crop: usize, flip: bool, rng: &mut R) -> Result<Frame> {
    let (w, h) = (frame.width(), frame.height());
    if crop > w || crop > h {
        return Err(Error::shape(format!("crop {crop} larger than {w}x{h} frame")));
    }
    let x0 = rng.random_range(0..=w - crop);
    let y0 = rng.random_range(0..=h - crop);
    let out = frame.crop(x0, y0, crop, crop)?;
    Ok(if flip && rng.random_bool(0.5) {
        out.flip_horizontal()
    } else {
        out
    })
}
