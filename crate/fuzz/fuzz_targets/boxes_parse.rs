#![no_main]

use epan::data::{importance_filter, nms, parse_boxes};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(records) = parse_boxes(text) {
        let boxes: Vec<_> = records.iter().map(|r| r.bbox).collect();
        let kept = nms(&boxes, 0.5).expect("valid boxes pass nms");
        let _ = importance_filter(&kept, 640, 480, 0.1);
    }
});
