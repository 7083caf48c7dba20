use diffcom::entropy::{
    ac_decode, ac_encode, laplace_cdf, laplace_pmf, laplace_table, pack_bitstream, unpack_bitstream, Bitstream,
    CdfTable, Header, HEADER_LEN,
};
use diffcom::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Shannon length of `symbols` under the integer table itself.
fn ideal_bits(symbols: &[i32], table: &CdfTable) -> f64 {
    let total = (1u64 << table.precision()) as f64;
    symbols.iter().map(|&s| -(table.freq(s as i64).unwrap() as f64 / total).log2()).sum()
}

fn sample(table: &CdfTable, n: usize, rng: &mut ChaCha8Rng) -> Vec<i32> {
    let total = 1u32 << table.precision();
    (0..n).map(|_| table.lookup(rng.gen_range(0..total)).0 as i32).collect()
}

#[test]
fn thousand_skewed_symbols_fit_in_fifty_bits() {
    let t = CdfTable::from_pmf(&[0.99, 0.01], 0, 16).unwrap();
    let syms = vec![0i32; 1000];
    let bytes = ac_encode(&syms, &vec![&t; 1000]).unwrap();
    assert!(bytes.len() * 8 <= 50, "{} bits", bytes.len() * 8);
    assert_eq!(ac_decode(&bytes, &vec![&t; 1000]).unwrap(), syms);
}

#[test]
fn length_is_close_to_ideal_for_mixed_tables() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tables: Vec<CdfTable> =
        (0..8).map(|i| laplace_table(rng.gen_range(-3.0..3.0), 0.2 + i as f64 * 0.5, 40, 16).unwrap()).collect();
    let n = 20_000;
    let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..tables.len())).collect();
    let syms: Vec<i32> = idx
        .iter()
        .map(|&i| tables[i].lookup(rng.gen_range(0..1 << 16)).0 as i32)
        .collect();
    let refs: Vec<&CdfTable> = idx.iter().map(|&i| &tables[i]).collect();
    let bytes = ac_encode(&syms, &refs).unwrap();
    let ideal: f64 = syms.iter().zip(&refs).map(|(&s, t)| ideal_bits(&[s], t)).sum();
    let bits = bytes.len() as f64 * 8.0;
    assert!(bits >= ideal - 1.0 && bits <= ideal + 32.0 + 1e-3 * ideal, "{bits} vs {ideal}");
    assert_eq!(ac_decode(&bytes, &refs).unwrap(), syms);
}

#[test]
fn wrong_tables_are_detected() {
    let a = laplace_table(0.0, 1.0, 20, 16).unwrap();
    let b = laplace_table(3.0, 0.3, 20, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let syms = sample(&a, 500, &mut rng);
    let bytes = ac_encode(&syms, &vec![&a; 500]).unwrap();
    match ac_decode(&bytes, &vec![&b; 500]) {
        Err(Error::CorruptStream(_)) => {}
        Ok(v) => assert_ne!(v, syms, "mismatched tables decoded the original symbols"),
        Err(e) => panic!("unexpected error {e}"),
    }
}

#[test]
fn zero_probability_symbol_is_rejected() {
    let t = CdfTable::from_pmf(&[0.5, 0.5], 0, 16).unwrap();
    assert!(matches!(ac_encode(&[5], &[&t]), Err(Error::ZeroProbability { symbol: 5 })));
    assert!(ac_encode(&[0, 1], &[&t]).is_err());
    assert!(ac_encode(&[], &[]).unwrap().is_empty());
}

#[test]
fn laplace_closed_forms() {
    assert!((laplace_pmf(0.0, 0.0, 1.0) - 0.393469).abs() < 1e-6);
    assert!((laplace_pmf(0.0, 0.0, 1.0) - (1.0 - (-0.5f64).exp())).abs() < 1e-12);
    // Off-centre bin by direct integration of the density.
    let (y, mu, b) = (2.0, 0.7, 1.3);
    let steps = 200_000;
    let h = 1.0 / steps as f64;
    let dens = |x: f64| (-(x - mu).abs() / b).exp() / (2.0 * b);
    let quad: f64 = (0..steps).map(|i| dens(y - 0.5 + (i as f64 + 0.5) * h) * h).sum();
    assert!((laplace_pmf(y, mu, b) - quad).abs() < 1e-9);
    assert_eq!(laplace_cdf(mu, mu, b), 0.5);
}

#[test]
fn header_has_fixed_length_and_detects_corruption() {
    let bs = Bitstream {
        header: Header {
            num_sparse: 19,
            feat_dim: 8,
            hyper_dim: 4,
            preserved_size: true,
            coord_bits: 16,
            center: [0.5, -1.0, 2.0],
            scale: 3.5,
            ddim_steps: 50,
            seed: 0xdead_beef,
            q_max: 255,
        },
        z: vec![1, 2, 3],
        coords: vec![9; 10],
        y: vec![],
    };
    let bytes = pack_bitstream(&bs).unwrap();
    assert_eq!(HEADER_LEN, 53);
    assert_eq!(bytes.len(), HEADER_LEN + 13 + 4);
    assert_eq!(unpack_bitstream(&bytes).unwrap(), bs);
    // Magic, version, payload bytes and the checksum itself are verified;
    // the checksum does not cover header fields.
    for i in [0, 4, HEADER_LEN + 1, HEADER_LEN + 5, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[i] ^= 0x10;
        assert!(unpack_bitstream(&bad).is_err(), "flip at {i} undetected");
    }
    assert!(unpack_bitstream(&bytes[..bytes.len() - 1]).is_err());
    assert!(unpack_bitstream(&bytes[..10]).is_err());
}

fn pmf_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 1..64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tables_are_monotone_and_complete(pmf in pmf_strategy(), offset in -100i64..100, precision in 8u32..=16) {
        prop_assume!(pmf.len() as u64 <= 1u64 << precision);
        let t = CdfTable::from_pmf(&pmf, offset, precision).unwrap();
        let cum = t.cum();
        prop_assert_eq!(cum[0], 0);
        prop_assert_eq!(*cum.last().unwrap(), 1u32 << precision);
        prop_assert!(cum.windows(2).all(|w| w[1] > w[0]));
        for (i, &p) in pmf.iter().enumerate() {
            for (j, &q) in pmf.iter().enumerate() {
                if p > q {
                    prop_assert!(t.freq(offset + i as i64) >= t.freq(offset + j as i64));
                }
            }
        }
    }

    #[test]
    fn range_coder_roundtrips(pmf in pmf_strategy(), seed in any::<u64>(), n in 0usize..400) {
        let t = CdfTable::from_pmf(&pmf, -3, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let syms = sample(&t, n, &mut rng);
        let tables = vec![&t; n];
        let bytes = ac_encode(&syms, &tables).unwrap();
        prop_assert_eq!(ac_decode(&bytes, &tables).unwrap(), syms.clone());
        let ideal = ideal_bits(&syms, &t);
        let bits = bytes.len() as f64 * 8.0;
        prop_assert!(bits <= ideal + 32.0 + 1e-3 * ideal, "{} > {}", bits, ideal);
    }

    #[test]
    fn laplace_tables_normalize(mu in -30.0f64..30.0, b in 0.05f64..20.0, q in 1i64..64) {
        let mass: f64 = (-q..=q).map(|k| {
            let y = k as f64;
            if k == -q { laplace_cdf(y + 0.5, mu, b) }
            else if k == q { 1.0 - laplace_cdf(y - 0.5, mu, b) }
            else { laplace_pmf(y, mu, b) }
        }).sum();
        prop_assert!((mass - 1.0).abs() < 1e-6);
        let t = laplace_table(mu, b, q, 16).unwrap();
        prop_assert_eq!(t.support() as i64, 2 * q + 1);
    }
}
