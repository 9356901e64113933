#![no_main]

use epan::data::DatasetManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(m) = DatasetManifest::parse(text) {
        let again = DatasetManifest::parse(&m.to_jsonl().unwrap()).unwrap();
        assert_eq!(again, m);
        let _ = m.verify();
    }
});
