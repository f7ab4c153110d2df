//! Checks tape gradients of a small gated-MLP-like graph against central
//! differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ssm_shed::numerics::{gradcheck, Tensor};

fn main() -> ssm_shed::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn([4, 6], 1.0, &mut rng).with_requires_grad();
    let w_up = Tensor::randn([5, 6], 0.5, &mut rng).with_requires_grad();
    let w_gate = Tensor::randn([5, 6], 0.5, &mut rng).with_requires_grad();
    let targets = [0, 3, 1, 4];

    let reports = gradcheck::check(&[x, w_up, w_gate], 1e-3, |tape, v| {
        let up = tape.linear(v[0], v[1], None)?;
        let gate = tape.linear(v[0], v[2], None)?;
        let gate = tape.silu(gate);
        let h = tape.mul(up, gate)?;
        tape.cross_entropy(h, &targets)
    })?;
    for r in &reports {
        println!("input {}: relative error {:.2e}, max abs error {:.2e}", r.input, r.relative_error(), r.max_abs_error());
    }
    Ok(())
}
