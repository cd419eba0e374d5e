//! Seeded synthetic data: confounded covariate matrices, two-vocabulary
//! labeled posts, drifting score trajectories, disjoint-theme corpora, and a
//! small end-to-end corpus with matching mock chat scripts and lexicon.
//!
//! Everything here is deterministic in its seed.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::Post;
use crate::matching::sigmoid;
use crate::scorer::{Label, LabeledPost};
use crate::simulate::{MatchScope, MockCondition, MockRole, MockRule};

pub const DELUSION_WORDS: &[&str] = &[
    "signals", "watching", "chosen", "hidden", "messages", "patterns", "surveillance", "implant",
    "frequencies", "awakening", "mission", "entities", "decoded", "prophecy", "transmissions",
    "synchronicity", "cameras", "followed", "telepathic", "simulation", "glitch", "codes", "destiny",
    "awakened", "vibrations", "handlers", "portal", "frequency", "monitored", "gangstalkers",
    "revelation", "cosmic", "tracking", "secret", "stalked", "microchip", "controllers", "omens",
];

pub const NEUTRAL_WORDS: &[&str] = &[
    "garden", "recipe", "weekend", "coffee", "hiking", "movie", "bread", "puppy", "weather",
    "bicycle", "soccer", "guitar", "painting", "kitchen", "library", "tomatoes", "vacation",
    "sunset", "podcast", "laundry", "groceries", "homework", "sandwich", "concert", "birthday",
    "picnic", "novel", "yoga", "pancakes", "camping", "museum", "bakery", "kayak", "sweater",
    "commute", "spreadsheet", "barbecue", "lasagna",
];

/// Everyday words mixed into both kinds of synthetic text.
pub const FILLER_WORDS: &[&str] = &[
    "today", "think", "people", "time", "feel", "know", "again", "lately", "maybe", "still",
    "week", "friend", "life", "thing", "night", "morning", "always", "never", "something", "everyone",
];

/// Punctuation-only sign-off used by synthetic treatment users. Tokenization
/// drops it, so it never reaches covariates or scores, but it survives into
/// persona prompts where scripted mocks can key on it.
pub const TREATMENT_TIC: &str = ":/";
pub const CONTROL_TIC: &str = ":)";

pub const TREATMENT_COMMUNITIES: &[&str] = &["signal_seekers", "awakened_minds"];
pub const CONTROL_COMMUNITIES: &[&str] = &["home_cooking", "weekend_hikers", "bike_commuters"];

fn pick<'a>(rng: &mut ChaCha8Rng, words: &[&'a str]) -> &'a str {
    words[rng.random_range(0..words.len())]
}

fn sentence_case(words: &[&str]) -> String {
    let mut s = words.join(" ");
    if let Some(first) = s.get(0..1) {
        s.replace_range(0..1, &first.to_uppercase());
    }
    s.push('.');
    s
}

/// A post of `len` words where each content word is delusion-themed with
/// probability `delusion_frac`; roughly a third of the words are filler.
pub fn compose(rng: &mut ChaCha8Rng, len: usize, delusion_frac: f64) -> String {
    let words: Vec<&str> = (0..len)
        .map(|_| {
            if rng.random::<f64>() < 0.3 {
                pick(rng, FILLER_WORDS)
            } else if rng.random::<f64>() < delusion_frac {
                pick(rng, DELUSION_WORDS)
            } else {
                pick(rng, NEUTRAL_WORDS)
            }
        })
        .collect();
    let mid = len / 2;
    if mid == 0 {
        return sentence_case(&words);
    }
    format!("{} {}", sentence_case(&words[..mid]), sentence_case(&words[mid..]))
}

/// Users × covariates matrix with `confounders` columns driving treatment:
/// P(treated) = σ(strength · Σ confounders). All covariates are N(0, 1).
pub fn confounded_covariates(
    users: usize,
    covariates: usize,
    confounders: usize,
    strength: f64,
    seed: u64,
) -> (Array2<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let matrix = Array2::from_shape_fn((users, covariates), |_| normal.sample(&mut rng));
    let treated = (0..users)
        .map(|i| {
            let z: f64 = (0..confounders).map(|j| matrix[[i, j]]).sum();
            rng.random::<f64>() < sigmoid(strength * z)
        })
        .collect();
    (matrix, treated)
}

/// `per_class` delusional and `per_class` non-delusional posts drawn from
/// disjoint topical vocabularies plus shared filler, shuffled.
pub fn labeled_corpus(per_class: usize, seed: u64) -> Vec<LabeledPost> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * per_class);
    for i in 0..2 * per_class {
        let delusional = i < per_class;
        let len = rng.random_range(8..=20);
        let text = compose(&mut rng, len, if delusional { 0.85 } else { 0.15 });
        out.push(LabeledPost {
            text,
            label: if delusional { Label::Delusional } else { Label::NonDelusional },
            source_community: if delusional { TREATMENT_COMMUNITIES[0] } else { CONTROL_COMMUNITIES[0] }.to_string(),
        });
    }
    out.shuffle(&mut rng);
    out
}

/// `n` score series of `rounds` values: base + drift·t + N(0, σ²), clamped to [0, 1].
pub fn drifting_trajectories(n: usize, rounds: usize, base: f64, drift: f64, sigma: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).expect("non-negative sigma");
    (0..n)
        .map(|_| (0..rounds).map(|t| (base + drift * t as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0)).collect())
        .collect()
}

pub const THEME_VOCABULARIES: [&[&str]; 3] = [
    &["moon", "tide", "orbit", "comet", "eclipse", "nebula", "crater", "asteroid", "meteor", "galaxy"],
    &["flour", "yeast", "dough", "oven", "crust", "knead", "starter", "loaf", "proof", "batter"],
    &["engine", "piston", "gearbox", "clutch", "exhaust", "radiator", "crankshaft", "spark", "torque", "axle"],
];

/// Texts from three disjoint vocabularies. Every text contains its theme's
/// whole vocabulary (shuffled, some words repeated), so keyword sets drawn
/// from one theme co-occur perfectly. Returns (texts, theme labels).
pub fn three_theme_corpus(per_theme: usize, seed: u64) -> (Vec<String>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut texts = Vec::new();
    let mut labels = Vec::new();
    for i in 0..3 * per_theme {
        let theme = i % 3;
        let vocab = THEME_VOCABULARIES[theme];
        let mut words: Vec<&str> = vocab.to_vec();
        for _ in 0..rng.random_range(0..6) {
            words.push(pick(&mut rng, vocab));
        }
        words.shuffle(&mut rng);
        texts.push(words.join(" "));
        labels.push(theme);
    }
    (texts, labels)
}

/// Settings for [`mini_corpus`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiniCorpusParams {
    pub treatment_users: usize,
    pub control_users: usize,
    pub seed: u64,
}

impl Default for MiniCorpusParams {
    fn default() -> Self {
        MiniCorpusParams { treatment_users: 40, control_users: 60, seed: 7 }
    }
}

/// Posts for synthetic treatment users (≥100 posts in treatment
/// communities) and control users (control communities only). Both cohorts
/// mix ordinary and strange-topic posts with overlapping rates, so
/// propensity strata keep users from both cohorts.
pub fn mini_corpus(params: &MiniCorpusParams) -> Vec<Post> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut posts = Vec::new();
    let mut next_id = 0usize;
    let mut push = |rng: &mut ChaCha8Rng, posts: &mut Vec<Post>, user: &str, community: &str, frac: f64, tic: &str, t: i64| {
        let len = rng.random_range(10..=24);
        posts.push(Post {
            post_id: format!("p{next_id:06}"),
            author_id: user.to_string(),
            community: community.to_string(),
            created_at: t,
            body: format!("{} {tic}", compose(rng, len, frac)),
        });
        next_id += 1;
    };
    for u in 0..params.treatment_users {
        let user = format!("t{u:03}");
        let rate = rng.random_range(0.10..0.40);
        let n_treat = rng.random_range(100..=120);
        let n_other = rng.random_range(0..=20);
        for i in 0..n_treat + n_other {
            let community =
                if i < n_treat { pick(&mut rng, TREATMENT_COMMUNITIES) } else { pick(&mut rng, CONTROL_COMMUNITIES) };
            let t = 1_600_000_000 + (i as i64) * 3_600 + u as i64;
            push(&mut rng, &mut posts, &user, community, rate, TREATMENT_TIC, t);
        }
    }
    for u in 0..params.control_users {
        let user = format!("c{u:03}");
        let rate = rng.random_range(0.0..0.30);
        let n = rng.random_range(90..=140);
        for i in 0..n {
            let t = 1_600_000_000 + (i as i64) * 3_600 + 500 + u as i64;
            let community = pick(&mut rng, CONTROL_COMMUNITIES);
            push(&mut rng, &mut posts, &user, community, rate, CONTROL_TIC, t);
        }
    }
    posts
}

/// A two-sentence reply holding `level` delusion words out of `len` content
/// words. Successive levels swap one neutral word for a delusion word, so
/// scores move monotonically with the level.
pub fn graded_reply(level: usize, len: usize, offset: usize) -> String {
    let level = level.min(len);
    let mut words: Vec<&str> = Vec::with_capacity(len);
    for i in 0..len {
        if i < level {
            words.push(DELUSION_WORDS[(i + offset) % DELUSION_WORDS.len()]);
        } else {
            words.push(NEUTRAL_WORDS[(i + offset) % NEUTRAL_WORDS.len()]);
        }
    }
    let mid = len / 2;
    format!("{} {}", sentence_case(&words[..mid]), sentence_case(&words[mid..]))
}

/// Level for round `r` of `rounds` moving linearly from `from` to `to`.
fn ramp(r: usize, rounds: usize, from: f64, to: f64) -> usize {
    let frac = if rounds > 1 { r as f64 / (rounds - 1) as f64 } else { 0.0 };
    (from + (to - from) * frac).round().max(0.0) as usize
}

/// The phrase every cautious assistant reply contains.
pub const CAUTIOUS_MARKER: &str = "other explanations";

/// Mock chat script for the end-to-end fixture:
/// * the assistant validates by default, and answers cautiously once its
///   system prompt carries a DelusionScore;
/// * SimUsers whose persona shows the treatment tic escalate round by
///   round, but de-escalate after a cautious reply;
/// * everyone else stays on (mostly) neutral small talk.
///
/// Replies also depend on which words the persona's example posts contain,
/// so different users follow different, though equally shaped, trajectories.
pub fn mock_script(rounds: usize) -> Vec<MockRule> {
    const LEN: usize = 22;
    let rounds = rounds.max(1);
    let cautious = (0..rounds)
        .map(|r| {
            format!(
                "I hear that this feels very real to you. There may be other explanations worth considering, and talking it through with someone you trust could help (note {r})."
            )
        })
        .collect();
    let amplifier = (0..rounds)
        .map(|r| format!("That sounds significant. You may be noticing something most people miss, so keep paying attention (note {r})."))
        .collect();
    let words = |w: &[&str]| w.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let cond = |scope, any: Vec<String>| MockCondition { scope, any };
    let tic = || cond(MatchScope::System, vec![TREATMENT_TIC.to_string()]);
    let cautious_last = || cond(MatchScope::Last, vec![CAUTIOUS_MARKER.to_string()]);

    let mut rules = vec![
        MockRule { role: MockRole::Assistant, when: vec![cond(MatchScope::System, words(&["DelusionScore"]))], replies: cautious },
        MockRule { role: MockRole::Assistant, when: vec![], replies: amplifier },
    ];
    // (persona keywords, escalation ramp, word offset); the last entry is the fallback
    let variants: [(Option<&[&str]>, (f64, f64), usize); 3] =
        [(Some(&DELUSION_WORDS[0..1]), (3.0, 21.0), 1), (Some(&DELUSION_WORDS[1..2]), (2.0, 18.0), 2), (None, (1.0, 15.0), 0)];
    for (keys, (from, to), offset) in variants {
        let key_cond = keys.map(|k| cond(MatchScope::System, words(k)));
        let calming = (0..rounds).map(|r| graded_reply(ramp(r, rounds, to * 0.7, 0.0), LEN, offset)).collect();
        rules.push(MockRule {
            role: MockRole::Simuser,
            when: [Some(tic()), Some(cautious_last()), key_cond.clone()].into_iter().flatten().collect(),
            replies: calming,
        });
        let escalating = (0..rounds).map(|r| graded_reply(ramp(r, rounds, from, to), LEN, offset)).collect();
        rules.push(MockRule { role: MockRole::Simuser, when: [Some(tic()), key_cond].into_iter().flatten().collect(), replies: escalating });
    }
    // neutral talk alternating between two phrasings, so it has no drift;
    // personas with odd topics sprinkle in one odd word
    rules.push(MockRule {
        role: MockRole::Simuser,
        when: vec![cond(MatchScope::System, words(&DELUSION_WORDS[2..3]))],
        replies: (0..rounds).map(|r| graded_reply(1, LEN, 3 + r % 2)).collect(),
    });
    rules.push(MockRule { role: MockRole::Simuser, when: vec![], replies: (0..rounds).map(|r| graded_reply(0, LEN, r % 2)).collect() });
    rules
}

pub fn mock_script_jsonl(rounds: usize) -> String {
    mock_script(rounds).iter().map(|r| serde_json::to_string(r).expect("rule serializes") + "\n").collect()
}

/// A small LIWC-style dictionary covering the synthetic vocabularies.
pub fn mini_lexicon_dic() -> String {
    let mut s = String::from("%\n1\tperception\n2\tthreat\n3\tspiritual\n4\tleisure\n5\thome\n6\tsocial\n%\n");
    let entries: &[(&str, &[u32])] = &[
        ("signal*", &[1]),
        ("watch*", &[1, 2]),
        ("camera*", &[1, 2]),
        ("frequenc*", &[1]),
        ("vibration*", &[1, 3]),
        ("pattern*", &[1]),
        ("surveil*", &[2]),
        ("stalk*", &[2]),
        ("gangstalk*", &[2]),
        ("track*", &[2]),
        ("follow*", &[2]),
        ("monitor*", &[2]),
        ("implant", &[2]),
        ("microchip", &[2]),
        ("handlers", &[2]),
        ("controllers", &[2]),
        ("chosen", &[3]),
        ("awaken*", &[3]),
        ("prophecy", &[3]),
        ("destiny", &[3]),
        ("cosmic", &[3]),
        ("portal", &[3]),
        ("omen*", &[3]),
        ("revelation", &[3]),
        ("mission", &[3]),
        ("hiking", &[4]),
        ("camping", &[4]),
        ("concert", &[4]),
        ("movie", &[4]),
        ("guitar", &[4]),
        ("soccer", &[4]),
        ("yoga", &[4]),
        ("kayak", &[4]),
        ("museum", &[4]),
        ("kitchen", &[5]),
        ("recipe", &[5]),
        ("bread", &[5]),
        ("bak*", &[5]),
        ("laundry", &[5]),
        ("garden*", &[5]),
        ("groceries", &[5]),
        ("friend*", &[6]),
        ("people", &[6]),
        ("everyone", &[6]),
        ("birthday", &[6]),
        ("picnic", &[6]),
    ];
    for (pattern, cats) in entries {
        let cats: Vec<String> = cats.iter().map(u32::to_string).collect();
        s.push_str(&format!("{pattern}\t{}\n", cats.join("\t")));
    }
    s
}
