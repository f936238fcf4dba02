#![no_main]

use evidseg::volume::Volume;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(v) = Volume::from_bytes(data) {
        // compare encodings, not values: NaN voxels are legal payload
        let bytes = v.to_bytes();
        let again = Volume::from_bytes(&bytes).expect("re-encoded volume decodes");
        assert_eq!(again.to_bytes(), bytes);
    }
});
