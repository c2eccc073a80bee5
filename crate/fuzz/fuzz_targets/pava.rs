#![no_main]

use icipw::isotonic::{fitted_values, pava_fit, WeightedPoints};
use libfuzzer_sys::fuzz_target;

// Each 3-byte chunk decodes to one point: x in 0..=255, y in [-1, 1],
// w in (0, 2]. The first byte picks the minimum segment weight.
fuzz_target!(|data: &[u8]| {
    let Some((&min_byte, rest)) = data.split_first() else {
        return;
    };
    let chunks = rest.chunks_exact(3);
    if chunks.len() == 0 {
        return;
    }
    let (mut x, mut y, mut w) = (Vec::new(), Vec::new(), Vec::new());
    for c in chunks {
        x.push(f64::from(c[0]));
        y.push(f64::from(c[1]) / 127.5 - 1.0);
        w.push((f64::from(c[2]) + 1.0) / 128.0);
    }
    let points = WeightedPoints::new(x, y, w).expect("decoded points are valid");
    let min_segment = f64::from(min_byte % 16);
    let step = pava_fit(&points, min_segment).expect("fit succeeds on valid points");
    assert!(step.values().windows(2).all(|v| v[0] <= v[1]));
    let fit = fitted_values(&step, &points);
    assert!(fit.iter().all(|v| (-1.0..=1.0).contains(v)));
});
