#![no_main]

use evidseg::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::from_bytes(data) {
        let bytes = ck.to_bytes();
        let again = Checkpoint::from_bytes(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(again.to_bytes(), bytes);
    }
});
