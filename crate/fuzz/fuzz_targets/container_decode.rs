#![no_main]

use bikd::container::Container;
use libfuzzer_sys::fuzz_target;

// Input framing: u16 LE manifest length, manifest bytes, then the blob.
fuzz_target!(|data: &[u8]| {
    let Some((len, rest)) = data.split_first_chunk::<2>() else {
        return;
    };
    let len = usize::from(u16::from_le_bytes(*len)).min(rest.len());
    let (manifest, blob) = rest.split_at(len);
    let Ok(manifest) = std::str::from_utf8(manifest) else {
        return;
    };
    if let Ok(c) = Container::decode(manifest, blob) {
        let (m2, b2) = c.encode().expect("decoded containers re-encode");
        let again = Container::decode(&m2, &b2).expect("re-encoded containers decode");
        assert_eq!(again.arrays.len(), c.arrays.len());
    }
});
