#![no_main]

use libfuzzer_sys::fuzz_target;
use mesh_core::AdaptConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = AdaptConfig::parse(text) {
        let _ = cfg.validate();
        let again = AdaptConfig::parse(&cfg.to_text()).expect("reparse");
        assert_eq!(again.to_text(), cfg.to_text());
    }
});
