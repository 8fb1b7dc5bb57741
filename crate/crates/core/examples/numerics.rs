//! Dense building blocks: matmul, row softmax, layer norm and a 3x3 convolution.

use stereo_seld::numerics::{conv2d_3x3, layer_norm_rows, matmul, softmax_rows, Tensor};

fn main() -> stereo_seld::Result<()> {
    let a = Tensor::new(vec![2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0])?;
    let b = Tensor::new(vec![3, 2], vec![1.0f32, 0.0, 0.0, 1.0, 1.0, 1.0])?;
    let c = matmul(&a, &b)?;
    println!("A * B = {:?}", c.data());

    let p = softmax_rows(&c)?;
    println!("row softmax = {:?}", p.data());

    let ln = layer_norm_rows(&a, &[1.0; 3], &[0.0; 3], 1e-5)?;
    println!("layer norm rows = {:?}", ln.data());

    // A centred delta kernel reproduces its input.
    let img = Tensor::from_fn(&[1, 4, 4], |i| i as f32);
    let mut k = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
    k.data_mut()[4] = 1.0;
    let y = conv2d_3x3(&img, &k, None)?;
    assert_eq!(y, img);
    println!("identity 3x3 convolution preserved a {:?} map", y.shape());
    Ok(())
}
