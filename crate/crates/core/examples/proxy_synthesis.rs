//! Proxy Synthesis: Beta-weighted interpolation of two classes' embeddings
//! and proxies.

use novelaug::synthesis::{ps_interpolate, ps_synthesize, PsEndpoint, PsParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> novelaug::Result<()> {
    let s = 0.5f64.sqrt();
    let a = PsEndpoint {
        x: &[s, s, 0.0],
        p: &[1.0, 0.0, 0.0],
        label: 0,
    };
    let b = PsEndpoint {
        x: &[0.0, s, s],
        p: &[0.0, 1.0, 0.0],
        label: 1,
    };
    for lambda in [1.0, 0.5, 0.0] {
        let out = ps_interpolate(a, b, lambda)?;
        println!("lambda {lambda:.1}: proxy {:.3?}  embedding {:.3?}", out.proxy, out.x);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = PsParams::default();
    for _ in 0..3 {
        let out = ps_synthesize(a, b, &params, &mut rng)?;
        println!("sampled lambda {:.3}: proxy {:.3?}", out.lambda, out.proxy);
    }
    Ok(())
}
