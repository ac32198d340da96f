#![no_main]

use bikd::checkpoint::{model_from_container, model_to_container};
use bikd::container::Container;
use libfuzzer_sys::fuzz_target;

// Same framing as `container_decode`; decoded containers are then read as models.
fuzz_target!(|data: &[u8]| {
    let Some((len, rest)) = data.split_first_chunk::<2>() else {
        return;
    };
    let len = usize::from(u16::from_le_bytes(*len)).min(rest.len());
    let (manifest, blob) = rest.split_at(len);
    let Ok(manifest) = std::str::from_utf8(manifest) else {
        return;
    };
    let Ok(c) = Container::decode(manifest, blob) else {
        return;
    };
    if let Ok((m, seed)) = model_from_container::<f32>(&c) {
        let back = model_from_container::<f32>(&model_to_container(&m, seed).unwrap()).unwrap();
        assert_eq!(back.0, m);
    }
    let _ = model_from_container::<f64>(&c);
});
