use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Index sets for one seed. Every list is sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub label_fraction: f64,
    pub test_idx: Vec<usize>,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub labelled_idx: Vec<usize>,
    pub set1_idx: Vec<usize>,
    pub set2_idx: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct SplitConfig {
    pub test_frac: f64,
    pub val_frac_of_remainder: f64,
    pub label_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            test_frac: 0.2,
            val_frac_of_remainder: 0.1,
            label_fraction: 1.0,
        }
    }
}

/// Allocates `counts[c]` items of each class to splits of the given total
/// `sizes` (which must sum to the number of items) so that every cell is the
/// floor or ceiling of its proportional share `counts[c] * sizes[s] / N`.
///
/// The fractional parts form a transportation problem with integral margins,
/// solved exactly as a bipartite flow; at most one unit per cell is rounded up.
pub fn apportion(counts: &[usize], sizes: &[usize]) -> Vec<Vec<usize>> {
    let total: usize = counts.iter().sum();
    assert_eq!(total, sizes.iter().sum::<usize>(), "split sizes must cover every item");
    let n_c = counts.len();
    let n_s = sizes.len();
    let mut out = vec![vec![0usize; n_s]; n_c];
    if total == 0 {
        return out;
    }
    // floor of n_c * size_s / N, exact in integer arithmetic
    let mut has_frac = vec![vec![false; n_s]; n_c];
    let mut row_need = vec![0usize; n_c];
    let mut col_need = sizes.to_vec();
    for c in 0..n_c {
        for s in 0..n_s {
            let num = counts[c] * sizes[s];
            out[c][s] = num / total;
            has_frac[c][s] = num % total != 0;
            col_need[s] -= out[c][s];
        }
        row_need[c] = counts[c] - out[c].iter().sum::<usize>();
    }
    // assign the remaining units: class c -> split s along cells with a fractional part
    let mut assigned = vec![vec![false; n_s]; n_c];
    let mut col_used = vec![0usize; n_s];
    for c in 0..n_c {
        for _ in 0..row_need[c] {
            let mut seen_s = vec![false; n_s];
            let ok = augment(c, &has_frac, &mut assigned, &mut col_used, &col_need, &mut seen_s);
            assert!(ok, "stratified rounding always exists for integral margins");
        }
    }
    for c in 0..n_c {
        for s in 0..n_s {
            if assigned[c][s] {
                out[c][s] += 1;
            }
        }
    }
    out
}

/// Finds an augmenting path giving class `c` one more rounded-up cell.
fn augment(
    c: usize,
    has_frac: &[Vec<bool>],
    assigned: &mut [Vec<bool>],
    col_used: &mut [usize],
    col_need: &[usize],
    seen_s: &mut [bool],
) -> bool {
    let n_s = col_need.len();
    for s in 0..n_s {
        if seen_s[s] || !has_frac[c][s] || assigned[c][s] {
            continue;
        }
        seen_s[s] = true;
        if col_used[s] < col_need[s] {
            assigned[c][s] = true;
            col_used[s] += 1;
            return true;
        }
        // column s is full: push one of its units from class c2 elsewhere
        for c2 in 0..assigned.len() {
            if c2 != c && assigned[c2][s] && augment(c2, has_frac, assigned, col_used, col_need, seen_s) {
                assigned[c2][s] = false;
                assigned[c][s] = true;
                return true;
            }
        }
    }
    false
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

fn by_class(y: &[usize], n_classes: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); n_classes];
    for (i, &c) in y.iter().enumerate() {
        groups[c].push(i);
    }
    groups
}

fn check_fraction(name: &str, f: f64, allow_one: bool) -> Result<()> {
    let ok = f > 0.0 && (f < 1.0 || (allow_one && f <= 1.0));
    if !ok {
        return Err(Error::Config(format!("{name} must be in (0, 1), got {f}")));
    }
    Ok(())
}

/// Stratified test / train / validation split plus a labelled subset of train.
///
/// Sizes: test = round(test_frac·N); validation = round(val_frac·(N − test));
/// labelled = round(label_fraction·|train|) raised to at least one per class.
/// Per-class counts come from [`apportion`]; which samples land where is drawn
/// from the `split` stream of `seed`.
pub fn make_split(y: &[usize], n_classes: usize, seed: u64, cfg: &SplitConfig) -> Result<SplitPlan> {
    check_fraction("test_frac", cfg.test_frac, false)?;
    check_fraction("val_frac_of_remainder", cfg.val_frac_of_remainder, false)?;
    check_fraction("label_fraction", cfg.label_fraction, true)?;
    let n = y.len();
    let groups = by_class(y, n_classes);
    let counts: Vec<usize> = groups.iter().map(Vec::len).collect();
    let n_test = round_half_up(cfg.test_frac * n as f64);
    let n_val = round_half_up(cfg.val_frac_of_remainder * (n - n_test) as f64);
    let n_train = n - n_test - n_val;
    let alloc = apportion(&counts, &[n_test, n_val, n_train]);
    for (c, row) in alloc.iter().enumerate() {
        if counts[c] > 0 && row.iter().any(|&k| k == 0) {
            return Err(Error::Stratification {
                class: c.to_string(),
                message: format!(
                    "has {} samples, too few to appear in test, validation and train ({:?})",
                    counts[c], row
                ),
            });
        }
    }

    let mut rng = Rng::new(seed, "split");
    let mut test = Vec::with_capacity(n_test);
    let mut val = Vec::with_capacity(n_val);
    let mut train_by_class = Vec::with_capacity(n_classes);
    for (c, group) in groups.iter().enumerate() {
        let mut g = group.clone();
        rng.shuffle(&mut g);
        let (t, rest) = g.split_at(alloc[c][0]);
        let (v, tr) = rest.split_at(alloc[c][1]);
        test.extend_from_slice(t);
        val.extend_from_slice(v);
        train_by_class.push(tr.to_vec());
    }
    let train_counts: Vec<usize> = train_by_class.iter().map(Vec::len).collect();
    let n_lab = round_half_up(cfg.label_fraction * n_train as f64).min(n_train);
    let lab_alloc = apportion(&train_counts, &[n_lab, n_train - n_lab]);
    let mut labelled = Vec::new();
    for (c, tr) in train_by_class.iter().enumerate() {
        let k = lab_alloc[c][0].max(1).min(tr.len());
        labelled.extend_from_slice(&tr[..k]);
    }
    let mut train: Vec<usize> = train_by_class.concat();
    for v in [&mut test, &mut val, &mut train, &mut labelled] {
        v.sort_unstable();
    }
    Ok(SplitPlan {
        seed,
        label_fraction: cfg.label_fraction,
        test_idx: test,
        train_idx: train,
        val_idx: val,
        labelled_idx: labelled,
        set1_idx: Vec::new(),
        set2_idx: Vec::new(),
    })
}

/// Splits the unlabelled part of train (train minus labelled) 50:50, stratified,
/// into Set 1 and Set 2. Odd class counts put the extra sample on one side; no
/// sample is dropped.
pub fn make_unmatched_split(plan: &SplitPlan, y: &[usize], n_classes: usize) -> Result<SplitPlan> {
    let labelled: std::collections::HashSet<usize> = plan.labelled_idx.iter().copied().collect();
    let unlabelled: Vec<usize> = plan.train_idx.iter().copied().filter(|i| !labelled.contains(i)).collect();
    if unlabelled.len() < 2 {
        return Err(Error::DatasetTooSmall(format!(
            "{} unlabelled training samples, need at least 2 for Set 1 / Set 2",
            unlabelled.len()
        )));
    }
    let mut groups = vec![Vec::new(); n_classes];
    for &i in &unlabelled {
        groups[y[i]].push(i);
    }
    let counts: Vec<usize> = groups.iter().map(Vec::len).collect();
    let half = unlabelled.len() / 2;
    let alloc = apportion(&counts, &[unlabelled.len() - half, half]);
    let mut rng = Rng::new(plan.seed, "split/unmatched");
    let mut set1 = Vec::new();
    let mut set2 = Vec::new();
    for (c, group) in groups.iter().enumerate() {
        let mut g = group.clone();
        rng.shuffle(&mut g);
        let (a, b) = g.split_at(alloc[c][0]);
        set1.extend_from_slice(a);
        set2.extend_from_slice(b);
    }
    set1.sort_unstable();
    set2.sort_unstable();
    Ok(SplitPlan {
        set1_idx: set1,
        set2_idx: set2,
        ..plan.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(counts: &[usize]) -> Vec<usize> {
        counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect()
    }

    #[test]
    fn exact_proportions() {
        let y = labels(&[60, 40]);
        let plan = make_split(&y, 2, 0, &SplitConfig::default()).unwrap();
        let test_counts = [0, 1].map(|c| plan.test_idx.iter().filter(|&&i| y[i] == c).count());
        assert_eq!(test_counts, [12, 8]);
    }

    #[test]
    fn full_label_fraction_is_train() {
        let y = labels(&[30, 30, 40]);
        let plan = make_split(&y, 3, 4, &SplitConfig::default()).unwrap();
        assert_eq!(plan.labelled_idx, plan.train_idx);
    }

    #[test]
    fn one_percent_of_ten_balanced_classes() {
        let y = labels(&[100; 10]);
        let cfg = SplitConfig {
            label_fraction: 0.01,
            ..Default::default()
        };
        let plan = make_split(&y, 10, 1, &cfg).unwrap();
        assert_eq!(plan.train_idx.len(), 720);
        assert_eq!(plan.labelled_idx.len(), 10);
    }

    #[test]
    fn tiny_class_is_named() {
        let y = labels(&[50, 2]);
        match make_split(&y, 2, 0, &SplitConfig::default()).unwrap_err() {
            Error::Stratification { class, .. } => assert_eq!(class, "1"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn unmatched_halves() {
        let y = labels(&[63, 63]);
        let plan = make_split(&y, 2, 9, &SplitConfig { label_fraction: 0.01, ..Default::default() }).unwrap();
        let un = make_unmatched_split(&plan, &y, 2).unwrap();
        let total = un.set1_idx.len() + un.set2_idx.len();
        assert_eq!(total, plan.train_idx.len() - plan.labelled_idx.len());
        assert!(un.set1_idx.iter().all(|i| !un.set2_idx.contains(i)));
    }

    #[test]
    fn apportion_fifty_fifty() {
        assert_eq!(apportion(&[50, 50], &[50, 50]), vec![vec![25, 25], vec![25, 25]]);
        let a = apportion(&[3, 3, 3], &[4, 5]);
        for row in &a {
            assert_eq!(row.iter().sum::<usize>(), 3);
        }
        assert_eq!(a.iter().map(|r| r[0]).sum::<usize>(), 4);
    }
}
