#![no_main]

use icipw::estimators::EstimateReport;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(report) = EstimateReport::parse(data) {
        let text = report.to_string();
        let back = EstimateReport::parse(text.as_bytes()).expect("round trip parses");
        assert_eq!(back.to_string(), text);
    }
});
