use proptest::prelude::*;

use salient::metrics::{bleu, meteor, pass_at_1, rouge};

fn sentence() -> impl Strategy<Value = Vec<&'static str>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e", "f"]), 1..=12)
}

/// Quadratic-time LCS by the textbook table, written independently of the library.
fn lcs(a: &[&str], b: &[&str]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] { t[i - 1][j - 1] + 1 } else { t[i - 1][j].max(t[i][j - 1]) };
        }
    }
    t[a.len()][b.len()]
}

fn in_unit(v: f64) -> bool {
    (0.0..=1.0 + 1e-12).contains(&v)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn metrics_stay_in_unit_interval(h in sentence(), r in sentence()) {
        let (h, r) = (h.join(" "), r.join(" "));
        prop_assert!(in_unit(bleu(&h, &r).unwrap()));
        let s = rouge(&h, &r).unwrap();
        prop_assert!(in_unit(s.rouge1) && in_unit(s.rouge2) && in_unit(s.rouge_l));
        prop_assert!(in_unit(meteor(&h, &r).unwrap()));
    }

    #[test]
    fn self_comparison_is_maximal(x in sentence(), y in sentence()) {
        let (x, y) = (x.join(" "), y.join(" "));
        prop_assert!(bleu(&x, &x).unwrap() >= bleu(&y, &x).unwrap() - 1e-12);
        let (rx, ry) = (rouge(&x, &x).unwrap(), rouge(&y, &x).unwrap());
        prop_assert!(rx.rouge1 >= ry.rouge1 - 1e-12);
        prop_assert!(rx.rouge2 >= ry.rouge2 - 1e-12);
        prop_assert!(rx.rouge_l >= ry.rouge_l - 1e-12);
        prop_assert!(meteor(&x, &x).unwrap() >= meteor(&y, &x).unwrap() - 1e-12);
    }

    #[test]
    fn rouge_l_matches_lcs_table(h in sentence(), r in sentence()) {
        let l = lcs(&h, &r) as f64;
        let want = if l == 0.0 { 0.0 } else {
            let (p, rec) = (l / h.len() as f64, l / r.len() as f64);
            2.0 * p * rec / (p + rec)
        };
        prop_assert!((rouge(&h.join(" "), &r.join(" ")).unwrap().rouge_l - want).abs() < 1e-12);
    }

    #[test]
    fn final_number_is_extracted(n in -1_000_000i64..1_000_000, noise in 0i64..100) {
        let text = format!("First {noise} then more steps, so the result is {n}.");
        prop_assert!(pass_at_1(&text, n as f64));
        let marked = format!("{n} is a guess\n#### {}", n + 1);
        prop_assert!(pass_at_1(&marked, (n + 1) as f64));
        prop_assert!(!pass_at_1(&marked, n as f64) || n == n + 1);
    }
}

#[test]
fn fixed_values() {
    assert!((bleu("the cat sat", "the cat sat down").unwrap() - (-1.0f64 / 3.0).exp()).abs() < 1e-6);
    let r = rouge("a b c", "a x c").unwrap();
    assert!((r.rouge1 - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(r.rouge2, 0.0);
    assert!((r.rouge_l - 2.0 / 3.0).abs() < 1e-12);
    assert!((meteor("the cat", "cat the").unwrap() - 0.5).abs() < 1e-9);
    assert!(pass_at_1("#### 1,234", 1234.0));
    assert!(!pass_at_1("no numbers here", 5.0));
}
