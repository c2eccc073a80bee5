#![no_main]

use icipw::calibration::{read_weights, write_weight_columns};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    for level in [0, 1, 2] {
        let Ok(w) = read_weights(data, level) else {
            continue;
        };
        let mut buf = Vec::new();
        write_weight_columns(&mut buf, &[(level, &w)]).expect("writing parsed weights succeeds");
        let back = read_weights(buf.as_slice(), level).expect("round trip parses");
        assert_eq!(back.len(), w.len());
    }
});
