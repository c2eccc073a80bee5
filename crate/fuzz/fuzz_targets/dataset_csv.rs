#![no_main]

use icipw::data::Dataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(ds) = Dataset::from_csv_reader(data, "a", "y") else {
        return;
    };
    let mut buf = Vec::new();
    ds.write_csv(&mut buf, "a", "y").expect("writing a parsed dataset succeeds");
    let back = Dataset::from_csv_reader(buf.as_slice(), "a", "y").expect("round trip parses");
    assert_eq!(back.n(), ds.n());
    assert_eq!(back.treatment(), ds.treatment());
});
