use mixrec::numeric::std_normal_cdf;
use mixrec::processes::ThetaLaw;
use mixrec::{simulate, ProcessConfig, ProcessKind};

const N: usize = 1_000_000;

fn two_sample_ks(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut worst) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        worst = worst.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    worst
}

fn kinds() -> Vec<ProcessKind> {
    vec![
        ProcessKind::Ar1Mixture { p: 0.3, r: 0.7, mu2: 2.5 },
        ProcessKind::MeanMixtureAr1 {
            theta_law: ThetaLaw::TruncNormal {
                mu: 0.0,
                sigma2: 1.0,
                lo: -3.0,
                hi: 3.0,
            },
            r: 0.7,
        },
        ProcessKind::MaQ {
            q: 3,
            psi: vec![0.6, 0.3],
            p: 0.3,
            mu2: 2.5,
        },
    ]
}

#[test]
fn halves_of_long_streams_share_a_marginal() {
    for kind in kinds() {
        let name = kind.name();
        let stream = simulate(&ProcessConfig { n: N, kind }, 3).unwrap();
        let (first, second) = stream.values().split_at(N / 2);
        let ks = two_sample_ks(first, second);
        assert!(ks < 0.01, "{name}: KS distance {ks}");
    }
}

#[test]
fn ar1_mixture_marginal_matches_mixture_cdf() {
    let config = ProcessConfig {
        n: N,
        kind: ProcessKind::Ar1Mixture { p: 0.3, r: 0.7, mu2: 2.5 },
    };
    let mut xs = simulate(&config, 5).unwrap().values().to_vec();
    xs.sort_by(f64::total_cmp);
    let cdf = |x: f64| 0.3 * std_normal_cdf(x) + 0.7 * std_normal_cdf(x - 2.5);
    let n = xs.len() as f64;
    let sup = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max);
    assert!(sup < 0.005, "sup distance {sup}");
}
