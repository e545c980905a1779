#![no_main]

use libfuzzer_sys::fuzz_target;
use nullspace_sched::config::parse_omega;
use nullspace_sched::scheduler::Policy;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok([mbb, llc]) = parse_omega(s) {
        assert_eq!(parse_omega(&format!("{mbb},{llc}")).unwrap(), [mbb, llc]);
    }
    if let Ok(p) = s.parse::<Policy>() {
        assert_eq!(p.name().parse::<Policy>().unwrap(), p);
    }
});
