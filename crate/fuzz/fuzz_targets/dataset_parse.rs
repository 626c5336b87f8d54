#![no_main]

use libfuzzer_sys::fuzz_target;
use mesh_core::harness::Dataset;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(ds) = Dataset::parse(text) {
        // anything accepted must survive a round trip unchanged
        let again = Dataset::parse(&ds.to_text()).expect("reparse");
        assert_eq!(again, ds);
    }
});
