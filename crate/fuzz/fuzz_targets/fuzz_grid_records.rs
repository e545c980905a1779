#![no_main]

use libfuzzer_sys::fuzz_target;
use nullspace_sched::output::parse_grid_records;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(records) = parse_grid_records(text) {
            assert!(records.iter().all(|r| !(r.alpha && r.punctured)));
        }
    }
});
