//! Central finite differences against autograd, in double precision.

mod common;

use common::{cpln_gradcheck, discriminator_gradcheck, generator_gradcheck, TOL};

#[test]
fn cpln_forward_matches_finite_differences() {
    let (err, at, n) = cpln_gradcheck();
    println!("cpln: {n} coordinates, worst relative error {err:.2e} at {at}");
    assert!(n > 50);
    assert!(err < TOL, "{err} at {at}");
}

#[test]
fn generator_total_loss_matches_finite_differences() {
    let (err, at, n) = generator_gradcheck();
    println!("generator: {n} coordinates, worst relative error {err:.2e} at {at}");
    assert!(n > 100);
    assert!(err < TOL, "{err} at {at}");
}

#[test]
fn discriminator_loss_matches_finite_differences() {
    let (err, at, n) = discriminator_gradcheck();
    println!("discriminator: {n} coordinates, worst relative error {err:.2e} at {at}");
    assert!(n > 40);
    assert!(err < TOL, "{err} at {at}");
}
