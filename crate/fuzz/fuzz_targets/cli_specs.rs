#![no_main]

use icipw::cli::WeightSpec;
use icipw::simulation::Method;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(WeightSpec::Trim(c) | WeightSpec::Drop(c)) = s.parse::<WeightSpec>() {
        assert!((0.0..=0.5).contains(&c));
    }
    if let Ok(methods) = Method::parse_list(s) {
        assert!(!methods.is_empty());
        for m in methods {
            assert_eq!(m.label().parse::<Method>().ok(), Some(m));
        }
    }
});
