//! Writes the synthetic 50-buoy Gulf of Mexico profile file used by the
//! ocean-recipe tests: `cargo run --example gen_gulf -- <out.csv>`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const DEPTHS: [f64; 33] = [
    0.0, 10.0, 20.0, 30.0, 50.0, 75.0, 100.0, 125.0, 150.0, 200.0, 250.0, 300.0, 400.0, 500.0, 600.0, 700.0,
    800.0, 900.0, 1000.0, 1100.0, 1200.0, 1300.0, 1400.0, 1500.0, 1750.0, 2000.0, 2500.0, 3000.0, 3500.0, 4000.0,
    4500.0, 5000.0, 5500.0,
];

fn main() {
    let out = std::env::args().nth(1).expect("usage: gen_gulf <out.csv>");
    let mut rng = ChaCha8Rng::seed_from_u64(2019);
    let mut body = String::from("node_id,pos_x,pos_y,x0,y,salinity\n");
    for id in 0..50 {
        let lat: f64 = rng.random_range(21.0..29.0);
        let lon: f64 = rng.random_range(-96.0..-84.0);
        let floor: f64 = rng.random_range(1500.0..5500.0);
        let surface = 27.5 - 0.45 * (lat - 21.0) + 0.05 * (lon + 90.0);
        let thermocline: f64 = rng.random_range(250.0..450.0);
        for &z in DEPTHS.iter().filter(|&&z| z <= floor) {
            let temp = 4.2 + (surface - 4.2) * (-z / thermocline).exp() + 0.15 * rng.sample::<f64, _>(StandardNormal);
            let sal = 34.9 + 1.3 * (-z / 300.0).exp() - 0.04 * (lat - 21.0) + 0.03 * rng.sample::<f64, _>(StandardNormal);
            body.push_str(&format!("{id},{lat:.4},{lon:.4},{z},{temp:.3},{sal:.3}\n"));
        }
    }
    std::fs::write(out, body).unwrap();
}
