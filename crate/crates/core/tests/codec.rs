use hyperspawn_core::closure::{from_hex_dump, to_hex_dump, Argument, Closure, ClosureError, ProcedureImage};
use proptest::prelude::*;

fn fixture(name: &str) -> String {
    let path = format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(path).unwrap()
}

fn image8() -> ProcedureImage {
    ProcedureImage::new(3, vec![0xde, 0xad, 0xbe, 0xef, 0x01, 0x02, 0x03, 0x04]).unwrap()
}

#[test]
fn six_word_golden() {
    let c = Closure::new(vec![], vec![image8()]).unwrap();
    let dump = to_hex_dump(&c.encode().unwrap());
    assert_eq!(dump, fixture("closure_6word.hex"));
    let back = Closure::decode(&from_hex_dump(&dump).unwrap()).unwrap();
    assert_eq!(back, c);
}

#[test]
fn ten_word_golden() {
    let c = Closure::new(vec![Argument::ArrayRef(vec![5, 7])], vec![image8()]).unwrap();
    let dump = to_hex_dump(&c.encode().unwrap());
    assert_eq!(dump, fixture("closure_10word.hex"));
}

#[test]
fn rejects_malformed_images() {
    let good = Closure::new(vec![Argument::SingleVar(9)], vec![image8()])
        .unwrap()
        .encode()
        .unwrap();
    for cut in 0..good.len() {
        assert!(Closure::decode(&good[..cut]).is_err(), "prefix of {cut} words");
    }
    let mut trailing = good.clone();
    trailing.push(0);
    assert!(Closure::decode(&trailing).is_err());
    let mut bad_tag = good.clone();
    bad_tag[2] = 7;
    assert!(matches!(
        Closure::decode(&bad_tag),
        Err(ClosureError::Malformed { .. })
    ));
    assert!(Closure::decode(&[0, 0]).is_err());
    assert!(Closure::new(vec![], vec![]).is_err());
}

fn arg() -> impl Strategy<Value = Argument> {
    prop_oneof![
        any::<u32>().prop_map(Argument::ConstVal),
        any::<u32>().prop_map(Argument::SingleVar),
        prop::collection::vec(any::<u32>(), 0..40).prop_map(Argument::ArrayRef),
    ]
}

fn image() -> impl Strategy<Value = ProcedureImage> {
    (0u32..64, prop::collection::vec(any::<u8>(), 4..70))
        .prop_map(|(i, bytes)| ProcedureImage::new(i, bytes).unwrap())
}

fn closure() -> impl Strategy<Value = Closure> {
    (
        prop::collection::vec(arg(), 0..6),
        prop::collection::vec(image(), 1..4),
    )
        .prop_map(|(a, q)| Closure::new(a, q).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn round_trip(c in closure()) {
        let words = c.encode().unwrap();
        prop_assert_eq!(words.len(), c.encoded_len());
        prop_assert_eq!(Closure::decode(&words).unwrap(), c);
    }

    #[test]
    fn sizes_are_consistent(c in closure()) {
        let s = c.payload_sizes();
        prop_assert!(s.o <= s.n);
        prop_assert_eq!(c.encoded_len(), s.n + s.m + 2);
        let data: usize = c.args.iter().map(|a| match a {
            Argument::ArrayRef(v) => v.len(),
            Argument::SingleVar(_) => 1,
            Argument::ConstVal(_) => 0,
        }).sum();
        prop_assert_eq!(s.o, data);
    }

    #[test]
    fn hex_dump_round_trip(c in closure()) {
        let w = c.encode().unwrap();
        prop_assert_eq!(from_hex_dump(&to_hex_dump(&w)).unwrap(), w);
    }
}
