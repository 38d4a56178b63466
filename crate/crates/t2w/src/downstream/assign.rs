//! Exact linear assignment by bitmask dynamic programming. Instances here
//! are hidden-unit matchings (r up to 16 or so), where the 2^r table is
//! cheap and exactness is the point.

/// Maximizes total profit over all row-to-column bijections of a square
/// matrix. Returns the chosen column for each row. Ties resolve toward the
/// lexicographically earliest assignment (first strictly better wins).
pub fn max_profit_assignment(profit: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = profit.len();
    assert!(n >= 1, "empty assignment instance");
    assert!(n <= 20, "bitmask assignment is for small instances (n <= 20)");
    for row in profit {
        assert_eq!(row.len(), n, "profit matrix must be square");
    }
    let full = 1usize << n;
    // dp[mask] = best profit assigning the first popcount(mask) rows to the
    // column set `mask`
    let mut dp = vec![f64::NEG_INFINITY; full];
    let mut choice = vec![usize::MAX; full];
    dp[0] = 0.0;
    for mask in 0..full - 1 {
        if dp[mask] == f64::NEG_INFINITY {
            continue;
        }
        let row = mask.count_ones() as usize;
        for col in 0..n {
            if mask & (1 << col) != 0 {
                continue;
            }
            let next = mask | (1 << col);
            let value = dp[mask] + profit[row][col];
            if value > dp[next] {
                dp[next] = value;
                choice[next] = col;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    let mut mask = full - 1;
    for row in (0..n).rev() {
        let col = choice[mask];
        assignment[row] = col;
        mask &= !(1 << col);
    }
    (assignment, dp[full - 1])
}

/// Brute force over all n! permutations; the oracle the DP is checked
/// against at small n.
pub fn brute_force_assignment(profit: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = profit.len();
    assert!(n <= 8, "brute force is for tiny instances");
    let mut cols: Vec<usize> = (0..n).collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    permute(&mut cols, 0, &mut |perm| {
        let total: f64 = perm.iter().enumerate().map(|(r, &c)| profit[r][c]).sum();
        match &best {
            Some((_, b)) if *b >= total => {}
            _ => best = Some((perm.to_vec(), total)),
        }
    });
    best.expect("nonempty instance")
}

fn permute(items: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, visit);
        items.swap(k, i);
    }
}
