mod support;

use support::gradcheck;

#[test]
fn conv2d() {
    let e = gradcheck::conv2d();
    assert!(e < gradcheck::TOL, "relative error {e:e}");
}

#[test]
fn conv_transpose2d() {
    let e = gradcheck::conv_transpose2d();
    assert!(e < gradcheck::TOL, "relative error {e:e}");
}

#[test]
fn instance_norm2d() {
    let e = gradcheck::instance_norm2d();
    assert!(e < gradcheck::TOL, "relative error {e:e}");
}

#[test]
fn leaky_relu() {
    let e = gradcheck::leaky_relu();
    assert!(e < gradcheck::TOL, "relative error {e:e}");
}

#[test]
fn max_pool2d() {
    let e = gradcheck::max_pool2d();
    assert!(e < gradcheck::TOL, "relative error {e:e}");
}

#[test]
fn concat() {
    let e = gradcheck::concat();
    assert!(e < gradcheck::TOL, "relative error {e:e}");
}

#[test]
fn softmax() {
    let e = gradcheck::softmax();
    assert!(e < gradcheck::TOL, "relative error {e:e}");
}

#[test]
fn ce_dice() {
    let e = gradcheck::ce_dice();
    assert!(e < gradcheck::TOL, "relative error {e:e}");
}

#[test]
fn composite_unet_block() {
    let e = gradcheck::composite_unet_block();
    assert!(e < gradcheck::TOL, "relative error {e:e}");
}
