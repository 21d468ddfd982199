//! Max-fusion of encoder features into the decoder tail, and how switching
//! it off leaves the decoder untouched.

use crossnorm::model::{fuse, SkipState};
use crossnorm::{Tape, Tensor};

fn main() -> crossnorm::Result<()> {
    let mut tape = Tape::<f32>::new();
    // two decoder channels, the second is the tail that fuses
    let dec = tape.constant(Tensor::from_vec(&[1, 2, 2, 2], vec![5.0, 6.0, 7.0, 8.0, 0.0, 2.0, -1.0, 3.0])?);
    let enc = tape.constant(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 1.0, 1.0, 1.0])?);

    let on = fuse(&mut tape, dec, Some(enc), SkipState::Active)?;
    let off = fuse(&mut tape, dec, Some(enc), SkipState::Inactive)?;
    println!("active   {:?}", tape.value(on).data());
    println!("inactive {:?}", tape.value(off).data());
    Ok(())
}
