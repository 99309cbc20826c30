//! Dense enumeration of every ordered tuple as the reference partition.

use std::collections::BTreeMap;
use std::sync::Arc;

use poquim_core::{classify_quadruples, classify_triples, ClassKey, Design, IndexClassPartition};

use super::*;

pub fn brute_key(design: &Design, idx: &[usize]) -> ClassKey {
    let mut coeff = vec![if idx.iter().all(|&i| i == idx[0]) { 1.0 } else { 0.0 }];
    for term in design.terms() {
        let z = &term.matrix;
        coeff.push((0..z.ncols()).map(|c| idx.iter().map(|&i| z[(i, c)]).product::<f64>()).sum());
    }
    ClassKey { coeff }
}

pub fn for_each_tuple(n: usize, order: usize, mut f: impl FnMut(&[usize])) {
    let mut idx = vec![0usize; order];
    loop {
        f(&idx);
        let mut a = order;
        loop {
            if a == 0 {
                return;
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] < n {
                break;
            }
            idx[a] = 0;
        }
    }
}

/// Quantized key → (key, ordered count).
pub fn brute_classes(design: &Design, order: usize) -> BTreeMap<Vec<i64>, (ClassKey, u64)> {
    let mut out = BTreeMap::new();
    for_each_tuple(design.n_obs(), order, |idx| {
        let key = brute_key(design, idx);
        if !key.is_zero() {
            out.entry(key.quantized()).or_insert((key, 0)).1 += 1;
        }
    });
    out
}

pub fn check_partition(design: &Design, part: &IndexClassPartition, what: &str) {
    let order = part.order();
    let brute = brute_classes(design, order);
    assert_eq!(part.len(), brute.len(), "{what}: class count (order {order})");
    for class in part.classes() {
        let (key, count) = brute
            .get(&class.key.quantized())
            .unwrap_or_else(|| panic!("{what}: unexpected key {:?}", class.key.coeff));
        assert_eq!(class.cardinality, *count, "{what}: cardinality of {:?}", key.coeff);
        for (a, b) in class.key.coeff.iter().zip(&key.coeff) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{what}: key {a} vs {b}");
        }
    }
    // every stored member carries its own key, and multiplicities add up
    let mut counts = vec![0u64; part.len()];
    for m in part.members() {
        let key = brute_key(design, &m.indices[..order]);
        assert_eq!(key.quantized(), part.classes()[m.class].key.quantized(), "{what}: member key");
        counts[m.class] += u64::from(m.multiplicity);
    }
    assert_eq!(counts, part.cardinalities(), "{what}: member multiplicities");
}

pub fn templates() -> Vec<(String, Arc<Design>)> {
    let mut r = rng(11);
    let mut out = Vec::new();
    for (m, n) in [(2, 2), (3, 4), (4, 3), (2, 6), (6, 2)] {
        out.push((format!("one-way {m}x{n}"), one_way(m, n)));
    }
    for (m, n) in [(2, 2), (3, 4), (2, 5), (3, 3)] {
        out.push((format!("crossed {m}x{n}"), two_way(m, n)));
    }
    for sizes in [vec![1, 3, 5, 2], vec![4, 1, 1], vec![2, 2, 3, 3, 2]] {
        out.push((format!("nested {sizes:?}"), nested(&sizes, &mut r)));
    }
    for sizes in [vec![3, 4, 5], vec![2, 2, 2, 2], vec![6, 1]] {
        out.push((format!("intercept/slope {sizes:?}"), intercept_slope(&sizes, &mut r)));
    }
    out.push(("mixed loadings".into(), mixed_loadings(10, 3, &mut r)));
    out.push(("mixed loadings".into(), mixed_loadings(12, 4, &mut r)));
    out
}

pub fn sparse_enumeration_matches_dense_oracle() {
    for (what, design) in templates() {
        assert!(design.n_obs() <= 12);
        check_partition(&design, &classify_quadruples(&design).unwrap(), &what);
        check_partition(&design, &classify_triples(&design).unwrap(), &what);
    }
}

pub fn crossed_cardinalities() {
    for (m, n) in [(2u64, 2u64), (3, 4), (5, 3)] {
        let design = two_way(m as usize, n as usize);
        let part = classify_quadruples(&design).unwrap();
        assert_eq!(part.len(), 3);
        let find = |coeff: [f64; 3]| {
            part.classes()
                .iter()
                .find(|c| c.key.coeff == coeff)
                .unwrap_or_else(|| panic!("no class with key {coeff:?}"))
                .cardinality
        };
        assert_eq!(find([0.0, 1.0, 0.0]), m * n * (n.pow(3) - 1));
        assert_eq!(find([0.0, 0.0, 1.0]), n * m * (m.pow(3) - 1));
        assert_eq!(find([1.0, 1.0, 1.0]), m * n);
        assert_eq!(part.cardinalities(), vec![m * n * (n.pow(3) - 1), n * m * (m.pow(3) - 1), m * n]);
    }
}
