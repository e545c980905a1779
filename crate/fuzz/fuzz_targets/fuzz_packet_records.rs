#![no_main]

use libfuzzer_sys::fuzz_target;
use nullspace_sched::output::{packets_csv, read_packet_records};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(records) = read_packet_records(text) else { return };
    // Re-encoding what was accepted gives records that read back the same.
    let again = read_packet_records(&packets_csv(&records)).expect("writer output parses");
    assert_eq!(again, records);
});
