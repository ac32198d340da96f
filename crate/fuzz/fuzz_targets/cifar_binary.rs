#![no_main]

use bikd::data::{parse_cifar10_bytes, ChannelNorm, CIFAR10_RECORD_LEN};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let norm = ChannelNorm {
        mean: [0.49, 0.48, 0.45],
        std: [0.25, 0.24, 0.26],
    };
    match parse_cifar10_bytes(data, &norm) {
        Ok(d) => {
            assert_eq!(data.len() % CIFAR10_RECORD_LEN, 0);
            assert_eq!(d.len(), data.len() / CIFAR10_RECORD_LEN);
            assert!(d.labels().iter().all(|&y| y < 10));
        }
        Err(e) => assert_eq!(e.code(), "E_FORMAT"),
    }
});
