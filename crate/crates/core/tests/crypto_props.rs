use proptest::prelude::*;
use teerollup_core::crypto::{gen_keypair, sign, verify, SigBytes};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn any_byte_mutation_breaks_verification(
        seed in any::<[u8; 32]>(),
        msg in proptest::collection::vec(any::<u8>(), 1..64),
        pos in any::<prop::sample::Index>(),
        flip in 1u8..=255,
        in_sig in any::<bool>(),
    ) {
        let k = gen_keypair(seed);
        let sig = sign(&msg, &k);
        prop_assert!(verify(&msg, &sig, &k.public_key));
        if in_sig {
            let mut raw = sig.value.0;
            raw[pos.index(64)] ^= flip;
            let mut bad = sig;
            bad.value = SigBytes(raw);
            prop_assert!(!verify(&msg, &bad, &k.public_key));
        } else {
            let mut m = msg.clone();
            let i = pos.index(m.len());
            m[i] ^= flip;
            prop_assert!(!verify(&m, &sig, &k.public_key));
        }
    }
}
