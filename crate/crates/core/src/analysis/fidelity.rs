//! SimUser fidelity: lexicon-profile correlation between generated text and
//! the user's own posts, against a random same-stratum user as baseline.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::stats::{cohens_d, mean, paired_t, pearson};
use super::AnalysisError;
use crate::features::{Lexicon, LexiconCounts};

#[derive(Debug, Clone, PartialEq)]
pub struct FidelityInput {
    pub user_id: String,
    pub stratum: usize,
    pub generated: Vec<String>,
    pub own_posts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityUser {
    pub user_id: String,
    pub stratum: usize,
    pub random_partner: String,
    pub r_actual: f64,
    pub r_random: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityRow {
    pub stratum: usize,
    pub n_users: usize,
    pub s_actual: f64,
    pub s_random: f64,
    /// (s_actual − s_random) / |s_random| × 100.
    pub pct_diff: f64,
    /// Pooled-sd d between the r_actual and r_random samples.
    pub cohens_d: f64,
    pub paired_t: f64,
    pub df: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FidelityReport {
    pub rows: Vec<FidelityRow>,
    pub users: Vec<FidelityUser>,
    /// Human-readable notes on skipped strata and users.
    pub flags: Vec<String>,
}

/// Category proportions of a set of texts taken together.
fn profile(texts: &[String], lexicon: &Lexicon) -> Vec<f64> {
    let mut total = LexiconCounts::zeros(lexicon.len());
    for t in texts {
        total.add(&lexicon.counts(t));
    }
    total.proportions()
}

pub fn fidelity_eval(inputs: &[FidelityInput], lexicon: &Lexicon, seed: u64) -> FidelityReport {
    let mut by_stratum: BTreeMap<usize, Vec<&FidelityInput>> = BTreeMap::new();
    for u in inputs {
        by_stratum.entry(u.stratum).or_default().push(u);
    }
    let mut report = FidelityReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (stratum, mut users) in by_stratum {
        users.sort_by(|a, b| a.user_id.cmp(&b.user_id));
        if users.len() < 2 {
            report.flags.push(format!("stratum {stratum}: {} user(s), skipped", users.len()));
            continue;
        }
        let own: Vec<Vec<f64>> = users.iter().map(|u| profile(&u.own_posts, lexicon)).collect();
        let mut r_actual = Vec::new();
        let mut r_random = Vec::new();
        for (i, u) in users.iter().enumerate() {
            let others: Vec<usize> = (0..users.len()).filter(|&j| j != i).collect();
            let partner = *others.choose(&mut rng).expect("at least one other user");
            let generated = profile(&u.generated, lexicon);
            match (pearson(&generated, &own[i]), pearson(&generated, &own[partner])) {
                (Ok(a), Ok(r)) => {
                    r_actual.push(a);
                    r_random.push(r);
                    report.users.push(FidelityUser {
                        user_id: u.user_id.clone(),
                        stratum,
                        random_partner: users[partner].user_id.clone(),
                        r_actual: a,
                        r_random: r,
                    });
                }
                (Err(e), _) | (_, Err(e)) => report.flags.push(format!("user {}: {e}, skipped", u.user_id)),
            }
        }
        match stratum_row(stratum, &r_actual, &r_random) {
            Ok(row) => report.rows.push(row),
            Err(e) => report.flags.push(format!("stratum {stratum}: {e}")),
        }
    }
    report
}

fn stratum_row(stratum: usize, r_actual: &[f64], r_random: &[f64]) -> Result<FidelityRow, AnalysisError> {
    let diffs: Vec<f64> = r_actual.iter().zip(r_random).map(|(a, r)| a - r).collect();
    let t = paired_t(&diffs)?;
    let s_actual = mean(r_actual);
    let s_random = mean(r_random);
    Ok(FidelityRow {
        stratum,
        n_users: r_actual.len(),
        s_actual,
        s_random,
        pct_diff: (s_actual - s_random) / s_random.abs() * 100.0,
        cohens_d: cohens_d(r_actual, r_random)?,
        paired_t: t.t_statistic,
        df: t.degrees_of_freedom,
        p_value: t.p_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex() -> Lexicon {
        Lexicon::parse("%\n1\tcalm\n2\tfear\n3\tsocial\n%\npeace*\t1\nquiet\t1\nafraid\t2\nscared\t2\nfriend*\t3\nparty\t3\n")
            .unwrap()
    }

    #[test]
    fn self_copy_beats_random() {
        let posts = [
            vec!["peace and quiet today".to_string(), "peaceful quiet friend".to_string()],
            vec!["so afraid and scared".to_string(), "scared of the party".to_string()],
            vec!["friends party friends".to_string(), "a quiet party".to_string()],
        ];
        let inputs: Vec<FidelityInput> = posts
            .iter()
            .enumerate()
            .map(|(i, p)| FidelityInput { user_id: format!("u{i}"), stratum: 0, generated: p.clone(), own_posts: p.clone() })
            .collect();
        let r = fidelity_eval(&inputs, &lex(), 3);
        assert_eq!(r.users.len(), 3);
        for u in &r.users {
            assert!((u.r_actual - 1.0).abs() < 1e-12);
            assert!(u.r_random < 1.0);
            assert_ne!(u.random_partner, u.user_id);
        }
        assert!(r.rows[0].s_actual > r.rows[0].s_random);
    }

    #[test]
    fn singleton_stratum_is_flagged() {
        let one = FidelityInput {
            user_id: "solo".into(),
            stratum: 4,
            generated: vec!["quiet".into()],
            own_posts: vec!["afraid".into()],
        };
        let r = fidelity_eval(&[one], &lex(), 0);
        assert!(r.rows.is_empty());
        assert!(r.flags[0].contains("stratum 4"));
    }
}
