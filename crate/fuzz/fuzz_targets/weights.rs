#![no_main]

use erft::weights::WeightArchive;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(a) = WeightArchive::from_bytes(data) {
        let again = a.to_bytes().expect("decoded archive re-encodes");
        assert_eq!(WeightArchive::from_bytes(&again).expect("re-decodes"), a);
    }
});
