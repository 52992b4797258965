#![no_main]

use heft_core::harness::checkpoint::{decode_checkpoint, encode_checkpoint, ModelArtifact};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = decode_checkpoint(data) {
        // Anything that decodes must re-encode to the same tensors.
        let bytes = encode_checkpoint(&ck.config, ck.tensors.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
        let again = decode_checkpoint(&bytes).unwrap();
        assert_eq!(again.tensors.len(), ck.tensors.len());
        for (name, t) in &ck.tensors {
            assert!(again.tensors[name].bits_eq(t));
        }
    }
    let _ = ModelArtifact::decode(data);
});
