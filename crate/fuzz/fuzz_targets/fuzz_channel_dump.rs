#![no_main]

use libfuzzer_sys::fuzz_target;
use nullspace_sched::channel::parse_channel_records;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(records) = parse_channel_records(text) {
            for r in &records {
                assert_eq!(r.matrix.as_slice().len(), r.matrix.rows() * r.matrix.cols());
            }
        }
    }
});
