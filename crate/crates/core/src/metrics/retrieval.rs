use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gallery orderings per query plus, per query, which gallery indices are
/// relevant (same identity).
#[derive(Clone, Debug, PartialEq)]
pub struct RankedRetrieval {
    rankings: Vec<Vec<usize>>,
    relevant: Vec<Vec<bool>>,
}

impl RankedRetrieval {
    /// `rankings[q]` must be a permutation of `0..relevant[q].len()`, and each
    /// query needs at least one relevant item.
    pub fn new(rankings: Vec<Vec<usize>>, relevant: Vec<Vec<bool>>) -> Result<Self> {
        if rankings.len() != relevant.len() {
            return Err(Error::invalid(format!(
                "{} rankings but {} relevance rows",
                rankings.len(),
                relevant.len()
            )));
        }
        for (q, (rank, rel)) in rankings.iter().zip(&relevant).enumerate() {
            let mut seen = vec![false; rel.len()];
            if rank.len() != rel.len() {
                return Err(Error::invalid(format!("query {q}: ranking is not a permutation")));
            }
            for &i in rank {
                if i >= rel.len() || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::invalid(format!("query {q}: ranking is not a permutation")));
                }
            }
            if !rel.iter().any(|&r| r) {
                return Err(Error::invalid(format!("query {q} has no relevant gallery item")));
            }
        }
        Ok(Self { rankings, relevant })
    }

    /// Ranks the gallery for each query by descending cosine similarity.
    /// Ties keep gallery order.
    pub fn from_embeddings(
        query: &[Tensor],
        query_labels: &[usize],
        gallery: &[Tensor],
        gallery_labels: &[usize],
    ) -> Result<Self> {
        if query.len() != query_labels.len() || gallery.len() != gallery_labels.len() {
            return Err(Error::invalid("embedding and label counts differ"));
        }
        let unit = |t: &Tensor| -> Result<Vec<f64>> {
            let n = t.norm_l2();
            if n == 0.0 {
                return Err(Error::invalid("zero embedding cannot be ranked"));
            }
            Ok(t.data().iter().map(|v| v / n).collect())
        };
        let g: Vec<Vec<f64>> = gallery.iter().map(unit).collect::<Result<_>>()?;
        let mut rankings = Vec::with_capacity(query.len());
        let mut relevant = Vec::with_capacity(query.len());
        for (qt, &ql) in query.iter().zip(query_labels) {
            let qv = unit(qt)?;
            if g.iter().any(|gv| gv.len() != qv.len()) {
                return Err(Error::shape("from_embeddings", "query and gallery dims differ"));
            }
            let sims: Vec<f64> = g
                .iter()
                .map(|gv| gv.iter().zip(&qv).map(|(a, b)| a * b).sum())
                .collect();
            let mut order: Vec<usize> = (0..g.len()).collect();
            order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
            rankings.push(order);
            relevant.push(gallery_labels.iter().map(|&l| l == ql).collect());
        }
        Self::new(rankings, relevant)
    }

    pub fn n_queries(&self) -> usize {
        self.rankings.len()
    }

    pub fn gallery_size(&self) -> usize {
        self.relevant.first().map_or(0, Vec::len)
    }

    /// 1-based positions of relevant items in query `q`'s ranking.
    fn hit_positions(&self, q: usize) -> Vec<usize> {
        self.rankings[q]
            .iter()
            .enumerate()
            .filter(|(_, &g)| self.relevant[q][g])
            .map(|(pos, _)| pos + 1)
            .collect()
    }

    fn require_queries(&self) -> Result<()> {
        if self.rankings.is_empty() {
            return Err(Error::invalid("retrieval has no queries"));
        }
        Ok(())
    }
}

/// Fraction of queries with a relevant item in the top `k`.
pub fn cmc_rank_k(r: &RankedRetrieval, k: usize) -> Result<f64> {
    r.require_queries()?;
    if k == 0 {
        return Err(Error::invalid("rank k must be at least 1"));
    }
    if let Some(q) = r.rankings.iter().position(|rank| k > rank.len()) {
        return Err(Error::invalid(format!(
            "rank {k} exceeds gallery size {} of query {q}",
            r.rankings[q].len()
        )));
    }
    let hits = (0..r.n_queries()).filter(|&q| r.hit_positions(q)[0] <= k).count();
    Ok(hits as f64 / r.n_queries() as f64)
}

pub fn mean_ap(r: &RankedRetrieval) -> Result<f64> {
    r.require_queries()?;
    let total: f64 = (0..r.n_queries())
        .map(|q| {
            let pos = r.hit_positions(q);
            pos.iter()
                .enumerate()
                .map(|(i, &p)| (i + 1) as f64 / p as f64)
                .sum::<f64>()
                / pos.len() as f64
        })
        .sum();
    Ok(total / r.n_queries() as f64)
}

/// Mean inverse negative penalty: per query, the number of relevant items
/// over the position of the last one.
pub fn m_inp(r: &RankedRetrieval) -> Result<f64> {
    r.require_queries()?;
    let total: f64 = (0..r.n_queries())
        .map(|q| {
            let pos = r.hit_positions(q);
            pos.len() as f64 / *pos.last().expect("at least one relevant") as f64
        })
        .sum();
    Ok(total / r.n_queries() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Single query whose ranking is the identity and whose relevant items sit
    /// at the given 1-based positions.
    fn at_positions(g: usize, pos: &[usize]) -> RankedRetrieval {
        let rel = (1..=g).map(|p| pos.contains(&p)).collect();
        RankedRetrieval::new(vec![(0..g).collect()], vec![rel]).unwrap()
    }

    #[test]
    fn closed_form_examples() {
        let r = at_positions(3, &[3]);
        assert_eq!(cmc_rank_k(&r, 1).unwrap(), 0.0);
        assert_eq!(cmc_rank_k(&r, 3).unwrap(), 1.0);
        assert!(cmc_rank_k(&r, 4).is_err());
        assert!(cmc_rank_k(&r, 0).is_err());

        assert_eq!(mean_ap(&at_positions(2, &[1, 2])).unwrap(), 1.0);
        assert_eq!(mean_ap(&at_positions(4, &[2])).unwrap(), 0.5);
        let ap = mean_ap(&at_positions(6, &[1, 3, 5])).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0 + 3.0 / 5.0) / 3.0).abs() < 1e-15);

        assert_eq!(m_inp(&at_positions(5, &[1, 2, 3])).unwrap(), 1.0);
        assert_eq!(m_inp(&at_positions(5, &[2, 4])).unwrap(), 0.5);
    }

    #[test]
    fn validation() {
        assert!(RankedRetrieval::new(vec![vec![0, 0]], vec![vec![true, false]]).is_err());
        assert!(RankedRetrieval::new(vec![vec![0, 2]], vec![vec![true, false]]).is_err());
        assert!(RankedRetrieval::new(vec![vec![0, 1]], vec![vec![false, false]]).is_err());
        assert!(RankedRetrieval::new(vec![vec![0]], vec![]).is_err());
        let empty = RankedRetrieval::new(vec![], vec![]).unwrap();
        assert!(mean_ap(&empty).is_err());
    }

    #[test]
    fn from_embeddings_ranks_by_cosine() {
        let t = |v: &[f64]| Tensor::new(vec![v.len()], v.to_vec()).unwrap();
        let q = [t(&[1.0, 0.0])];
        let g = [t(&[0.0, 1.0]), t(&[2.0, 0.1]), t(&[1.0, 1.0])];
        let r = RankedRetrieval::from_embeddings(&q, &[7], &g, &[3, 7, 7]).unwrap();
        assert_eq!(r.rankings[0], vec![1, 2, 0]);
        assert_eq!(cmc_rank_k(&r, 1).unwrap(), 1.0);
        assert!(RankedRetrieval::from_embeddings(&q, &[9], &g, &[3, 7, 7]).is_err());
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for i in 0..=p.len() {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn exhaustive_enumeration_oracle() {
        for g in 1..=5usize {
            for mask in 1u32..(1 << g) {
                let rel: Vec<bool> = (0..g).map(|i| mask >> i & 1 == 1).collect();
                let n_rel = rel.iter().filter(|&&b| b).count();
                for perm in permutations(g) {
                    // oracle: walk the ranking counting hits
                    let mut hits = 0usize;
                    let mut first = None;
                    let mut last = 0;
                    let mut prec_sum = 0.0;
                    for (i, &item) in perm.iter().enumerate() {
                        if rel[item] {
                            hits += 1;
                            first.get_or_insert(i + 1);
                            last = i + 1;
                            prec_sum += hits as f64 / (i + 1) as f64;
                        }
                    }
                    let r = RankedRetrieval::new(vec![perm.clone()], vec![rel.clone()]).unwrap();
                    for k in 1..=g {
                        let expect = if first.unwrap() <= k { 1.0 } else { 0.0 };
                        assert_eq!(cmc_rank_k(&r, k).unwrap(), expect);
                    }
                    let ap = mean_ap(&r).unwrap();
                    assert!((ap - prec_sum / n_rel as f64).abs() < 1e-12);
                    let inp = m_inp(&r).unwrap();
                    assert!((inp - n_rel as f64 / last as f64).abs() < 1e-12);
                    // cross-checks that hold for every ranking
                    let full_recall = last == n_rel;
                    assert_eq!(inp == 1.0, full_recall);
                    if full_recall {
                        assert_eq!(cmc_rank_k(&r, n_rel).unwrap(), 1.0);
                    }
                    assert!(inp > 0.0 && inp <= 1.0 && ap > 0.0 && ap <= 1.0);
                }
            }
        }
    }

    #[test]
    fn random_rank1_matches_one_over_g() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = 10;
        let mut rel = vec![false; g];
        rel[0] = true;
        let trials = 10_000;
        let rankings: Vec<Vec<usize>> = (0..trials)
            .map(|_| {
                let mut p: Vec<usize> = (0..g).collect();
                p.shuffle(&mut rng);
                p
            })
            .collect();
        let r = RankedRetrieval::new(rankings, vec![rel; trials]).unwrap();
        let est = cmc_rank_k(&r, 1).unwrap();
        // 4 standard errors of a Bernoulli(0.1) mean
        let se = (0.1f64 * 0.9 / trials as f64).sqrt();
        assert!((est - 0.1).abs() < 4.0 * se, "{est}");
    }
}
