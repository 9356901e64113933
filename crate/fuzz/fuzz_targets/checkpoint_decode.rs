#![no_main]

use epan::model::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::<f32>::decode(data) {
        // The metadata JSON may be laid out differently, but a second round
        // trip must be byte-stable.
        let bytes = ck.encode().expect("decoded checkpoint re-encodes");
        let again = Checkpoint::<f32>::decode(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(again.encode().unwrap(), bytes);
        let _ = ck.into_network();
    }
    let _ = Checkpoint::<f64>::decode(data);
});
