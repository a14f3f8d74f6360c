#![no_main]

use erft::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::parse(text) {
        // NaN fields parse but never compare equal; validation rejects them
        if cfg.validate().is_err() {
            return;
        }
        assert_eq!(RunConfig::parse(&cfg.to_text()).expect("printed config parses"), cfg);
    }
});
