#![no_main]

use libfuzzer_sys::fuzz_target;
use skinseg_core::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::decode(data) {
        // Anything that decodes must re-encode to a file that decodes the same.
        let again = Checkpoint::decode(&ckpt.encode()).expect("re-encoded checkpoint must decode");
        assert_eq!(again, ckpt);
        let _ = ckpt.architecture();
    }
});
