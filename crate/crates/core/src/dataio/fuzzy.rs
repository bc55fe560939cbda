use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeProposal {
    pub first: String,
    pub second: String,
    pub score: f64,
}

fn lcs_len(a: &[char], b: &[char]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &ca in a {
        for (j, &cb) in b.iter().enumerate() {
            cur[j + 1] = if ca == cb { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Normalized indel similarity in `[0, 100]`:
/// `100 · (|a| + |b| − indel(a, b)) / (|a| + |b|)`, where `indel` is the
/// edit distance with insertions and deletions only.
pub fn indel_similarity(a: &str, b: &str) -> f64 {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let total = a.len() + b.len();
    if total == 0 {
        return 100.0;
    }
    let indel = total - 2 * lcs_len(&a, &b);
    100.0 * (total - indel) as f64 / total as f64
}

/// All roster pairs scoring strictly above `threshold`, best first. These are
/// proposals only; merging applies an explicitly approved list.
pub fn fuzzy_merge_species(roster: &[String], threshold: f64) -> Vec<MergeProposal> {
    let mut out = Vec::new();
    for i in 0..roster.len() {
        for j in i + 1..roster.len() {
            let score = indel_similarity(&roster[i], &roster[j]);
            if score > threshold {
                out.push(MergeProposal {
                    first: roster[i].clone(),
                    second: roster[j].clone(),
                    score,
                });
            }
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_disjoint() {
        assert_eq!(indel_similarity("Carex cespitosa", "Carex cespitosa"), 100.0);
        assert_eq!(indel_similarity("abc", "xyz"), 0.0);
    }

    #[test]
    fn reference_name_pairs_within_three_points() {
        // (pair, reported score)
        let cases = [
            ("Echinochloa crus-galli", "Echinochloa crusgalli", 98.0),
            ("Carex caespitosa", "Carex cespitosa", 97.0),
            ("Calamagrostis epigeios", "Calamagrostis epigejos", 95.0),
            ("Solidago virga-aurea", "Solidago virgaurea", 95.0),
            ("Poa alpigena", "Poa alpina", 91.0),
            ("Carex acuta", "Carex acutata", 92.0),
        ];
        for (a, b, reported) in cases {
            let s = indel_similarity(a, b);
            assert!((s - reported).abs() <= 3.0, "{a} / {b}: {s}");
        }
        assert!(indel_similarity("Echinochloa crus-galli", "Echinochloa crusgalli") >= 95.0);
    }

    #[test]
    fn proposals_sorted_and_thresholded() {
        let roster: Vec<String> = ["Poa alpina", "Poa alpigena", "Quercus alba", "Poa alpinaa"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let p = fuzzy_merge_species(&roster, 90.0);
        assert!(p.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(p.iter().all(|m| m.score > 90.0));
        assert!(p
            .iter()
            .all(|m| m.first != "Quercus alba" && m.second != "Quercus alba"));
    }
}
