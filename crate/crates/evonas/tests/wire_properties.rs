mod support;

use evonas::wire::{decode_frame, encode_frame, FrameDecoder, Message, MESSAGE_TYPES};
use proptest::prelude::*;
use support::messages::message;

fn drain(dec: &mut FrameDecoder, out: &mut Vec<Message>) {
    while let Some(m) = dec.next_message().unwrap() {
        out.push(m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn frame_roundtrip(msg in message()) {
        let frame = encode_frame(&msg).unwrap();
        let len = u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize;
        prop_assert_eq!(len, frame.len() - 4);
        prop_assert!(MESSAGE_TYPES.contains(&msg.type_name()));
        prop_assert_eq!(decode_frame(&frame).unwrap(), msg.clone());
        // the canonical payload is stable under a second pass
        prop_assert_eq!(encode_frame(&decode_frame(&frame).unwrap()).unwrap(), frame);
    }

    #[test]
    fn two_cut_fragmentation(msgs in prop::collection::vec(message(), 1..4), a in any::<prop::sample::Index>(), b in any::<prop::sample::Index>()) {
        let stream: Vec<u8> = msgs.iter().flat_map(|m| encode_frame(m).unwrap()).collect();
        let (mut x, mut y) = (a.index(stream.len() + 1), b.index(stream.len() + 1));
        if x > y {
            std::mem::swap(&mut x, &mut y);
        }
        let mut dec = FrameDecoder::new();
        let mut got = Vec::new();
        for piece in [&stream[..x], &stream[x..y], &stream[y..]] {
            dec.push(piece);
            drain(&mut dec, &mut got);
        }
        prop_assert_eq!(got, msgs);
        prop_assert_eq!(dec.buffered(), 0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn split_at_every_offset(msgs in prop::collection::vec(message(), 1..4)) {
        let stream: Vec<u8> = msgs.iter().flat_map(|m| encode_frame(m).unwrap()).collect();
        for cut in 0..=stream.len() {
            let mut dec = FrameDecoder::new();
            let mut got = Vec::new();
            dec.push(&stream[..cut]);
            drain(&mut dec, &mut got);
            dec.push(&stream[cut..]);
            drain(&mut dec, &mut got);
            prop_assert_eq!(&got, &msgs);
        }
    }

    #[test]
    fn byte_at_a_time(msgs in prop::collection::vec(message(), 1..4)) {
        let stream: Vec<u8> = msgs.iter().flat_map(|m| encode_frame(m).unwrap()).collect();
        let mut dec = FrameDecoder::new();
        let mut got = Vec::new();
        for byte in &stream {
            dec.push(std::slice::from_ref(byte));
            drain(&mut dec, &mut got);
        }
        prop_assert_eq!(got, msgs);
    }
}
