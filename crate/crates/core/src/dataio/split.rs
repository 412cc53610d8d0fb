use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, FeatureSet, Labels};

/// Stratified, seeded train/test partition of sample indices.
///
/// Samples are grouped by their smallest label. The global train size is
/// `round(fraction·n)`; per-class quotas use largest-remainder rounding, so
/// every class lands within one sample of its exact share. Both outputs are
/// shuffled.
pub fn split_indices(
    labels: &Labels,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::BadFraction(fraction));
    }
    let n = labels.len();
    let c = labels.classes();
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); c];
    for i in 0..n {
        groups[labels.primary(i)].push(i);
    }
    for (class, g) in groups.iter().enumerate() {
        if g.len() == 1 {
            return Err(DataError::ClassTooSmall { class, count: 1 });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for g in &mut groups {
        g.shuffle(&mut rng);
    }

    let target = (fraction * n as f64).round() as usize;
    let exact: Vec<f64> = groups.iter().map(|g| fraction * g.len() as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..c).filter(|&k| !groups[k].is_empty()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut remaining = target.saturating_sub(quota.iter().sum());
    for &k in order.iter().cycle().take(order.len() * 2) {
        if remaining == 0 {
            break;
        }
        if quota[k] < groups[k].len() {
            quota[k] += 1;
            remaining -= 1;
        }
    }

    let mut train = Vec::with_capacity(target);
    let mut test = Vec::with_capacity(n - target);
    for (g, &q) in groups.iter().zip(&quota) {
        train.extend_from_slice(&g[..q]);
        test.extend_from_slice(&g[q..]);
    }
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);
    Ok((train, test))
}

pub fn split(
    fs: &FeatureSet,
    fraction: f64,
    seed: u64,
) -> Result<(FeatureSet, FeatureSet), DataError> {
    let (train, test) = split_indices(&fs.labels, fraction, seed)?;
    if train.is_empty() || test.is_empty() {
        return Err(DataError::TooFewSamples {
            needed: 2,
            got: fs.len(),
        });
    }
    Ok((fs.subset(&train)?, fs.subset(&test)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(per_class: usize, classes: usize) -> Labels {
        Labels::single(
            classes,
            (0..per_class * classes).map(|i| i % classes).collect(),
        )
        .unwrap()
    }

    #[test]
    fn half_split_of_ten() {
        let (a, b) = split_indices(&labels(5, 2), 0.5, 1).unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));
        let one_class = Labels::single(2, vec![0; 10]).unwrap();
        let (a, b) = split_indices(&one_class, 0.5, 1).unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));
    }

    #[test]
    fn disjoint_exhaustive_and_deterministic() {
        let l = labels(13, 4);
        let (a, b) = split_indices(&l, 0.7, 42).unwrap();
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..52).collect::<Vec<_>>());
        assert_eq!(split_indices(&l, 0.7, 42).unwrap(), (a.clone(), b));
        assert_ne!(split_indices(&l, 0.7, 43).unwrap().0, a);
    }

    #[test]
    fn stratified_counts_within_one() {
        let l = labels(100, 8);
        let (train, test) = split_indices(&l, 0.7, 3).unwrap();
        assert_eq!(train.len(), 560);
        for c in 0..8 {
            let tr = train.iter().filter(|&&i| l.primary(i) == c).count();
            let te = test.iter().filter(|&&i| l.primary(i) == c).count();
            assert!(
                tr.abs_diff(70) <= 1 && te.abs_diff(30) <= 1,
                "class {c}: {tr}/{te}"
            );
        }
    }

    #[test]
    fn singleton_class_and_bad_fraction_are_errors() {
        let l = Labels::single(3, vec![0, 0, 1, 1, 2]).unwrap();
        assert!(matches!(
            split_indices(&l, 0.5, 0),
            Err(DataError::ClassTooSmall { class: 2, .. })
        ));
        assert!(matches!(
            split_indices(&labels(4, 2), 1.0, 0),
            Err(DataError::BadFraction(_))
        ));
        assert!(matches!(
            split_indices(&labels(4, 2), 0.0, 0),
            Err(DataError::BadFraction(_))
        ));
    }
}
