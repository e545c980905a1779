#![no_main]

use libfuzzer_sys::fuzz_target;
use nullspace_sched::config::ScenarioConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = ScenarioConfig::from_toml_str(text) else { return };
    // Anything that validates must survive a write/read cycle unchanged.
    if cfg.validate().is_ok() {
        let again = ScenarioConfig::from_toml_str(&cfg.to_toml_string()).expect("own output parses");
        assert_eq!(again, cfg);
    }
});
