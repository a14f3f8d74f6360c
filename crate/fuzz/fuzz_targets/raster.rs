#![no_main]

use erft::raster::RasterImage;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = RasterImage::from_bytes(data) {
        let again = img.to_bytes().expect("decoded raster re-encodes");
        assert_eq!(RasterImage::from_bytes(&again).expect("re-decodes"), img);
    }
});
