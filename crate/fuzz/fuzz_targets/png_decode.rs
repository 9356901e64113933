#![no_main]

use epan::Image;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = Image::decode_png(data) {
        let (c, h, w) = img.dims();
        assert_eq!(img.data().len(), c * h * w);
        let _ = img.encode_png();
    }
});
