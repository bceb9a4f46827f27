//! Cross-checks page sealing against an unrelated AES-GCM implementation.

use proptest::prelude::*;
use ring::aead::{Aad, LessSafeKey, Nonce, Tag, UnboundKey, AES_128_GCM};
use sealswap_core::pagecrypt::{CryptoError, PageCipher, PageKey, SwapOffset};
use sealswap_core::PAGE_SIZE;

fn ring_key(key: &[u8; 16]) -> LessSafeKey {
    LessSafeKey::new(UnboundKey::new(&AES_128_GCM, key).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn seal_agrees_with_ring(
        key in any::<[u8; 16]>(),
        salt in any::<[u8; 4]>(),
        offset in any::<u64>(),
        fill in any::<u64>(),
        skip in 0u64..4,
    ) {
        let page: Vec<u8> = (0..PAGE_SIZE as u64).map(|i| (i.wrapping_mul(fill) >> 7) as u8).collect();
        let cipher = PageCipher::with_salt(&PageKey::from_bytes(key), salt);
        for _ in 0..skip {
            cipher.seal(&page, SwapOffset(0)).unwrap();
        }
        let sealed = cipher.seal(&page, SwapOffset(offset)).unwrap();

        let mut expected_nonce = [0u8; 12];
        expected_nonce[..8].copy_from_slice(&skip.to_le_bytes());
        expected_nonce[8..].copy_from_slice(&salt);
        prop_assert_eq!(sealed.nonce, expected_nonce);

        let rk = ring_key(&key);
        let mut buf = page.clone();
        let tag = rk
            .seal_in_place_separate_tag(
                Nonce::assume_unique_for_key(expected_nonce),
                Aad::from(offset.to_le_bytes()),
                &mut buf,
            )
            .unwrap();
        prop_assert_eq!(&sealed.ciphertext[..], &buf[..]);
        prop_assert_eq!(&sealed.mac[..], tag.as_ref());

        // and ring opens what we sealed
        let mut ct = sealed.ciphertext.to_vec();
        ct.extend_from_slice(&sealed.mac);
        let opened = rk
            .open_in_place(Nonce::assume_unique_for_key(sealed.nonce), Aad::from(offset.to_le_bytes()), &mut ct)
            .unwrap();
        prop_assert_eq!(&opened[..], &page[..]);
    }

    #[test]
    fn ring_sealed_pages_open_only_at_their_offset(key in any::<[u8; 16]>(), nonce in any::<[u8; 12]>(), offset in any::<u64>(), other in any::<u64>()) {
        prop_assume!(offset != other);
        let page = vec![0xA5u8; PAGE_SIZE];
        let mut ct = page.clone();
        let tag: Tag = ring_key(&key)
            .seal_in_place_separate_tag(Nonce::assume_unique_for_key(nonce), Aad::from(offset.to_le_bytes()), &mut ct)
            .unwrap();
        let mac: [u8; 16] = tag.as_ref().try_into().unwrap();
        let cipher = PageCipher::with_salt(&PageKey::from_bytes(key), [0; 4]);
        prop_assert_eq!(&cipher.open_parts(&ct, &mac, &nonce, SwapOffset(offset)).unwrap()[..], &page[..]);
        prop_assert_eq!(
            cipher.open_parts(&ct, &mac, &nonce, SwapOffset(other)).unwrap_err(),
            CryptoError::IntegrityViolation
        );
    }
}
