use proptest::prelude::*;
use steerkit::activation_store::{decode, encode, HEADER_LEN};
use steerkit::{pair_by_sample, read_records, write_records, ActivationRecord, Dims, Error, Role};

fn arb_records(dims: Dims, max: usize) -> impl Strategy<Value = Vec<ActivationRecord>> {
    let role = prop::sample::select(vec![Role::Untrusted, Role::TrustedGeneral, Role::TrustedQuery]);
    let rec = (0u64..40, role, 0..dims.layers, 0..dims.heads, prop::collection::vec(-1e6f32..1e6, dims.dim));
    prop::collection::vec(
        rec.prop_map(|(sample_id, role, layer, head, vector)| ActivationRecord {
            sample_id,
            role,
            layer,
            head,
            vector,
        }),
        0..max,
    )
}

fn unique(records: Vec<ActivationRecord>) -> Vec<ActivationRecord> {
    let mut seen = std::collections::HashSet::new();
    records
        .into_iter()
        .filter(|r| seen.insert((r.sample_id, r.layer, r.head)))
        .collect()
}

proptest! {
    #[test]
    fn bytes_and_records_round_trip(records in arb_records(Dims { layers: 3, heads: 5, dim: 4 }, 60)) {
        let dims = Dims::new(3, 5, 4).unwrap();
        let bytes = encode(dims, &records).unwrap();
        prop_assert_eq!(bytes.len(), HEADER_LEN + records.len() * dims.record_len());
        let (header, back) = decode(&bytes, "mem").unwrap();
        prop_assert_eq!(header.dims, dims);
        prop_assert_eq!(header.record_count, records.len() as u64);
        prop_assert_eq!(&back, &records);
        prop_assert_eq!(encode(dims, &back).unwrap(), bytes);
    }

    #[test]
    fn pair_count_is_symmetric(
        a in arb_records(Dims { layers: 2, heads: 2, dim: 2 }, 40),
        b in arb_records(Dims { layers: 2, heads: 2, dim: 2 }, 40),
    ) {
        let dims = Dims::new(2, 2, 2).unwrap();
        let (a, b) = (unique(a), unique(b));
        match (pair_by_sample(dims, &a, &b), pair_by_sample(dims, &b, &a)) {
            (Ok(ab), Ok(ba)) => {
                prop_assert_eq!(ab.paired.pair_count(), ba.paired.pair_count());
                prop_assert_eq!(ab.unmatched.len(), ba.unmatched.len());
            }
            // No shared key fails in both directions.
            (Err(Error::NoOverlap), Err(Error::NoOverlap)) => {}
            (x, y) => prop_assert!(false, "asymmetric outcome: {:?} vs {:?}", x.err(), y.err()),
        }
    }
}

#[test]
fn file_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let dims = Dims::new(2, 3, 5).unwrap();
    let records: Vec<ActivationRecord> = (0..50)
        .map(|i| ActivationRecord {
            sample_id: i / 6,
            role: Role::Untrusted,
            layer: (i % 6 / 3) as usize,
            head: (i % 3) as usize,
            vector: (0..5).map(|j| (i * 5 + j) as f32 * 0.25 - 3.0).collect(),
        })
        .collect();
    let first = dir.path().join("a.actv");
    let second = dir.path().join("b.actv");
    write_records(&first, dims, &records).unwrap();
    let (_, back) = read_records(&first).unwrap();
    write_records(&second, dims, &back).unwrap();
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
}
