//! Marginal order statistics and rank permutations.
//!
//! A sample `x(1..n)` is split into the sorted marginal values `M_i` and
//! permutations `π_i` with `x_i(t) = M_i(π_i(t))`. Conditional on `M` the
//! permutations carry all the information about the dependence parameter.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CanonicalStatistic, Column, ColumnKind, Dataset, EvalError, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderPolicy {
    /// Numeric order for continuous, count and circular columns; declaration
    /// order for categorical ones. Ties are broken uniformly at random.
    Natural,
    /// Each column kept in the order it was observed, so every `π_i` is the
    /// identity. The conditional likelihood does not depend on the choice.
    #[default]
    Observational,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RankError {
    #[error("permutation {column} is not a bijection on 1..={n}")]
    NotBijection { column: usize, n: usize },
    #[error("column {column} has {found} order statistics, expected {n}")]
    Length { column: usize, n: usize, found: usize },
    #[error("{0} names/kinds for {1} columns")]
    Shape(usize, usize),
}

/// Sorted marginal values `M` and rank permutations `π` (0-based in memory,
/// 1-based when serialized).
#[derive(Debug, Clone, PartialEq)]
pub struct RankDecomposition {
    names: Vec<String>,
    kinds: Vec<ColumnKind>,
    sorted: Vec<Vec<Value>>,
    perms: Vec<Vec<usize>>,
    policy: OrderPolicy,
}

impl RankDecomposition {
    /// Builds a decomposition from explicit parts, checking that each
    /// permutation is a bijection and the shapes agree.
    pub fn from_parts(
        names: Vec<String>,
        kinds: Vec<ColumnKind>,
        sorted: Vec<Vec<Value>>,
        perms: Vec<Vec<usize>>,
        policy: OrderPolicy,
    ) -> Result<Self, RankError> {
        let d = sorted.len();
        if names.len() != d || kinds.len() != d || perms.len() != d {
            return Err(RankError::Shape(names.len().min(kinds.len()), d));
        }
        let n = sorted.first().map_or(0, Vec::len);
        for (i, (m, p)) in sorted.iter().zip(&perms).enumerate() {
            if m.len() != n || p.len() != n {
                return Err(RankError::Length {
                    column: i,
                    n,
                    found: m.len().max(p.len()),
                });
            }
            if !is_bijection(p) {
                return Err(RankError::NotBijection { column: i, n });
            }
        }
        Ok(RankDecomposition {
            names,
            kinds,
            sorted,
            perms,
            policy,
        })
    }

    pub fn n(&self) -> usize {
        self.sorted.first().map_or(0, Vec::len)
    }

    pub fn d(&self) -> usize {
        self.sorted.len()
    }

    pub fn policy(&self) -> OrderPolicy {
        self.policy
    }

    pub fn kinds(&self) -> &[ColumnKind] {
        &self.kinds
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// `M_i` for each column.
    pub fn sorted(&self) -> &[Vec<Value>] {
        &self.sorted
    }

    /// `π_i` (0-based) for each column.
    pub fn perms(&self) -> &[Vec<usize>] {
        &self.perms
    }

    /// `π_i` shifted to 1-based indices.
    pub fn perms_one_based(&self) -> Vec<Vec<usize>> {
        self.perms
            .iter()
            .map(|p| p.iter().map(|&k| k + 1).collect())
            .collect()
    }

    /// Quantified order statistics, `d` vectors of length `n`.
    pub fn sorted_numeric(&self) -> Vec<Vec<f64>> {
        self.sorted
            .iter()
            .map(|m| m.iter().map(|v| v.to_f64()).collect())
            .collect()
    }

    /// Same order statistics with different permutations.
    pub fn with_perms(&self, perms: Vec<Vec<usize>>) -> Result<Self, RankError> {
        Self::from_parts(
            self.names.clone(),
            self.kinds.clone(),
            self.sorted.clone(),
            perms,
            self.policy,
        )
    }

    /// Quantified row `t` of the recomposed data.
    pub fn row_numeric(&self, t: usize, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.sorted[i][self.perms[i][t]].to_f64();
        }
    }
}

#[derive(Serialize)]
struct RankView<'a> {
    policy: OrderPolicy,
    names: &'a [String],
    sorted: &'a [Vec<Value>],
    perms: Vec<Vec<usize>>,
}

impl Serialize for RankDecomposition {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        RankView {
            policy: self.policy,
            names: &self.names,
            sorted: &self.sorted,
            perms: self.perms_one_based(),
        }
        .serialize(s)
    }
}

fn is_bijection(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    for &k in p {
        if k >= p.len() || seen[k] {
            return false;
        }
        seen[k] = true;
    }
    true
}

/// Splits `data` into order statistics and rank permutations. Under
/// [`OrderPolicy::Natural`] tied values are assigned ranks uniformly at random
/// using `rng`; without ties the result does not depend on `rng`.
pub fn decompose<R: Rng + ?Sized>(
    data: &Dataset,
    policy: OrderPolicy,
    rng: &mut R,
) -> RankDecomposition {
    let n = data.n_rows();
    let mut sorted = Vec::with_capacity(data.n_cols());
    let mut perms = Vec::with_capacity(data.n_cols());
    for col in data.columns() {
        match policy {
            OrderPolicy::Observational => {
                sorted.push(col.values.clone());
                perms.push((0..n).collect());
            }
            OrderPolicy::Natural => {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(rng);
                order.sort_by(|&a, &b| col.values[a].natural_cmp(&col.values[b]));
                let mut perm = vec![0; n];
                for (r, &t) in order.iter().enumerate() {
                    perm[t] = r;
                }
                sorted.push(order.iter().map(|&t| col.values[t]).collect());
                perms.push(perm);
            }
        }
    }
    RankDecomposition {
        names: data.columns().iter().map(|c| c.name.clone()).collect(),
        kinds: data.kinds(),
        sorted,
        perms,
        policy,
    }
}

/// Rebuilds the rows `x(t) = (M∘π)(t)`.
pub fn recompose(dec: &RankDecomposition) -> Dataset {
    let columns = (0..dec.d())
        .map(|i| {
            Column::new(
                dec.names[i].clone(),
                dec.kinds[i].clone(),
                dec.perms[i].iter().map(|&k| dec.sorted[i][k]).collect(),
            )
        })
        .collect();
    // Values come from a validated dataset, so this cannot fail.
    Dataset::new(columns).expect("recomposition of a valid decomposition")
}

/// `h_*(π) = Σ_t h((M∘π)(t))`.
pub fn h_star(dec: &RankDecomposition, h: &CanonicalStatistic) -> Result<Vec<f64>, EvalError> {
    let mut total = vec![0.0; h.dim()];
    let mut row = vec![0.0; dec.d()];
    let mut out = vec![0.0; h.dim()];
    for t in 0..dec.n() {
        dec.row_numeric(t, &mut row);
        h.eval_into(&row, &mut out)?;
        for (a, b) in total.iter_mut().zip(&out) {
            *a += b;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;

    fn worked_example() -> Dataset {
        let c1 = Column::new(
            "x1",
            ColumnKind::categorical(["a", "b", "c"]),
            [2, 2, 1, 0].iter().map(|&l| Value::Level(l)).collect(),
        );
        let c2 = Column::count("x2", &[2, 1, 2, 1]);
        Dataset::new(vec![c1, c2]).unwrap()
    }

    #[test]
    fn worked_example_ties_are_randomized() {
        let data = worked_example();
        let mut counts = [0usize; 2];
        for s in 0..400 {
            let dec = decompose(&data, OrderPolicy::Natural, &mut seed::rng(s));
            assert_eq!(
                dec.sorted()[0],
                vec![Value::Level(0), Value::Level(1), Value::Level(2), Value::Level(2)]
            );
            assert_eq!(
                dec.sorted()[1],
                vec![Value::Int(1), Value::Int(1), Value::Int(2), Value::Int(2)]
            );
            match dec.perms_one_based()[0].as_slice() {
                [3, 4, 2, 1] => counts[0] += 1,
                [4, 3, 2, 1] => counts[1] += 1,
                other => panic!("inadmissible {other:?}"),
            }
            assert_eq!(recompose(&dec), data);
        }
        // 400 fair coin flips: 3σ = 30
        assert!((counts[0] as i64 - 200).abs() <= 30, "{counts:?}");
    }

    #[test]
    fn worked_example_recomposition() {
        let data = worked_example();
        let dec = decompose(&data, OrderPolicy::Natural, &mut seed::rng(0));
        let fixed = dec
            .with_perms(vec![vec![2, 3, 1, 0], vec![2, 0, 3, 1]])
            .unwrap();
        assert_eq!(recompose(&fixed), data);
    }

    #[test]
    fn singleton() {
        let data = Dataset::from_rows(&[vec![1.5, -2.0]]).unwrap();
        let dec = decompose(&data, OrderPolicy::Natural, &mut seed::rng(1));
        assert_eq!(dec.perms(), &[vec![0], vec![0]]);
        assert_eq!(dec.sorted()[0], vec![Value::Real(1.5)]);
    }

    #[test]
    fn distinct_data_is_seed_independent() {
        let data = Dataset::from_rows(&[vec![0.3, 2.0], vec![-1.0, 5.0], vec![2.2, 1.0]]).unwrap();
        let a = decompose(&data, OrderPolicy::Natural, &mut seed::rng(1));
        let b = decompose(&data, OrderPolicy::Natural, &mut seed::rng(99));
        assert_eq!(a, b);
        assert_eq!(a.perms_one_based(), vec![vec![2, 1, 3], vec![2, 3, 1]]);
    }

    #[test]
    fn identity_permutations_zip_sorted() {
        let data = Dataset::from_rows(&[vec![3.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let dec = decompose(&data, OrderPolicy::Natural, &mut seed::rng(0));
        let id = dec.with_perms(vec![vec![0, 1], vec![0, 1]]).unwrap();
        let r = recompose(&id);
        assert_eq!(r.row(0), vec![Value::Real(1.0), Value::Real(1.0)]);
        assert_eq!(r.row(1), vec![Value::Real(3.0), Value::Real(2.0)]);
    }

    #[test]
    fn malformed_permutation_is_rejected() {
        let data = Dataset::from_rows(&[vec![3.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let dec = decompose(&data, OrderPolicy::Natural, &mut seed::rng(0));
        assert!(matches!(
            dec.with_perms(vec![vec![0, 0], vec![0, 1]]),
            Err(RankError::NotBijection { column: 0, .. })
        ));
    }

    #[test]
    fn h_star_sums_rows() {
        let data = Dataset::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let h = CanonicalStatistic::product(2, &[0, 1]);
        for policy in [OrderPolicy::Natural, OrderPolicy::Observational] {
            let dec = decompose(&data, policy, &mut seed::rng(0));
            assert_eq!(h_star(&dec, &h).unwrap(), vec![14.0]);
        }
    }

    #[test]
    fn h_star_worked_example_indicator_statistic() {
        let data = worked_example();
        let kinds = data.kinds();
        let h = crate::statlang::build(&["ind(x2 == 2) * x1".to_string()], &{
            let mut k = kinds.clone();
            if let ColumnKind::Categorical { quantified, .. } = &mut k[0] {
                *quantified = true;
            }
            k
        })
        .unwrap();
        let dec = decompose(&data, OrderPolicy::Natural, &mut seed::rng(0));
        // rows (c,2),(c,1),(b,2),(a,1) → 2·1 + 0 + 1·1 + 0
        assert_eq!(h_star(&dec, &h).unwrap(), vec![3.0]);
    }

    #[test]
    fn serialized_permutations_are_one_based() {
        let data = Dataset::from_rows(&[vec![3.0], vec![1.0]]).unwrap();
        let dec = decompose(&data, OrderPolicy::Natural, &mut seed::rng(0));
        let text = format!("{:?}", dec.perms_one_based());
        assert_eq!(text, "[[2, 1]]");
    }

    proptest! {
        #[test]
        fn round_trip(rows in prop::collection::vec(prop::array::uniform3(-3i64..4), 1..20), s in any::<u64>()) {
            let cols = (0..3).map(|i| {
                let v: Vec<i64> = rows.iter().map(|r| r[i].abs()).collect();
                Column::count(format!("c{i}"), &v)
            }).collect();
            let data = Dataset::new(cols).unwrap();
            for policy in [OrderPolicy::Natural, OrderPolicy::Observational] {
                let dec = decompose(&data, policy, &mut seed::rng(s));
                for m in dec.sorted() {
                    if policy == OrderPolicy::Natural {
                        prop_assert!(m.windows(2).all(|w| w[0].natural_cmp(&w[1]).is_le()));
                    }
                }
                prop_assert_eq!(recompose(&dec), data.clone());
            }
        }
    }
}
