#![no_main]

use evidseg::dataset::SplitManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = SplitManifest::from_json(data) {
        for name in ["train", "val", "test"] {
            assert!(m.split(name).is_ok());
        }
        assert!(m.split("holdout").is_err());
    }
});
