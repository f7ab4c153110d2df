//! Runs the selective scan over a random sequence, both as a batch and one
//! token at a time through the recurrent step, and shows they agree.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ssm_shed::numerics::Tensor;
use ssm_shed::ssm::{scan_step, selective_scan, ScanState, SsmParams, StateMatrix};

fn main() -> ssm_shed::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (t, c, n) = (32, 8, 16);
    let x = Tensor::randn([t, c], 1.0, &mut rng);

    for kind in [StateMatrix::Diagonal, StateMatrix::ScalarIdentity] {
        let p = SsmParams::init(c, n, kind, &mut rng);
        let y = selective_scan(&p, &x)?;

        let mut state = ScanState::zeros(c, n);
        let mut worst = 0f32;
        for i in 0..t {
            let (yi, next) = scan_step(&p, &state, x.row(i))?;
            state = next;
            for (a, b) in yi.iter().zip(y.row(i)) {
                worst = worst.max((a - b).abs());
            }
        }
        println!("{kind:?}: {} params, y[T-1][0] = {:+.5}, batch vs step max |diff| = {worst:.2e}", p.param_count(), y.row(t - 1)[0]);
    }
    Ok(())
}
