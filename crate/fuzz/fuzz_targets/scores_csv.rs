#![no_main]

use icipw::data::ScoreTable;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(table) = ScoreTable::from_csv_reader(data, None, None, &[]) else {
        return;
    };
    let mut buf = Vec::new();
    table.write_csv(&mut buf).expect("writing a parsed table succeeds");
    let back = ScoreTable::from_csv_reader(buf.as_slice(), Some(table.n()), None, &[])
        .expect("round trip parses");
    assert_eq!(back, table);
});
