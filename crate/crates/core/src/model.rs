//! Domain types shared by every stage: problems, submissions, KC sets and
//! their problem- and code-level assignments, plus attempt pairing and
//! opportunity counting.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Full score is the default notion of a correct submission.
pub const DEFAULT_CORRECT_THRESHOLD: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub problem_id: String,
    pub statement: String,
    /// Submissions known to be fully correct, sorted by id.
    #[serde(default)]
    pub correct_solution_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub submission_id: String,
    pub student_id: String,
    pub problem_id: String,
    /// 1-based position within the (student, problem) group.
    pub attempt_index: u32,
    pub timestamp: DateTime<Utc>,
    pub score: f64,
    pub code: String,
}

/// First and last attempt of one student on one problem.
#[derive(Debug, Clone, PartialEq)]
pub struct AttemptPair {
    pub student_id: String,
    pub problem_id: String,
    pub first: Submission,
    pub last: Submission,
}

impl AttemptPair {
    pub fn key(&self) -> (String, String) {
        (self.student_id.clone(), self.problem_id.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KcOrigin {
    Human,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeComponent {
    pub kc_id: String,
    pub name: String,
    pub description: String,
    pub origin: KcOrigin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KcSetKind {
    Human,
    Generated,
    Selected,
}

impl KcSetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            KcSetKind::Human => "human",
            KcSetKind::Generated => "generated",
            KcSetKind::Selected => "selected",
        }
    }
}

impl fmt::Display for KcSetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for KcSetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "human" => Ok(KcSetKind::Human),
            "generated" => Ok(KcSetKind::Generated),
            "selected" => Ok(KcSetKind::Selected),
            other => Err(Error::Config(format!("unknown KC set kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KcSet {
    pub set_id: String,
    pub kind: KcSetKind,
    pub components: Vec<KnowledgeComponent>,
}

impl KcSet {
    pub fn new(
        set_id: impl Into<String>,
        kind: KcSetKind,
        components: Vec<KnowledgeComponent>,
    ) -> Result<Self> {
        let set_id = set_id.into();
        if components.is_empty() {
            return Err(Error::Validation(format!("KC set `{set_id}` is empty")));
        }
        let mut seen = BTreeSet::new();
        for kc in &components {
            if !seen.insert(kc.kc_id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate kc_id `{}` in KC set `{set_id}`",
                    kc.kc_id
                )));
            }
        }
        Ok(KcSet {
            set_id,
            kind,
            components,
        })
    }

    pub fn get(&self, kc_id: &str) -> Option<&KnowledgeComponent> {
        self.components.iter().find(|kc| kc.kc_id == kc_id)
    }

    pub fn contains(&self, kc_id: &str) -> bool {
        self.get(kc_id).is_some()
    }

    pub fn ids(&self) -> BTreeSet<String> {
        self.components.iter().map(|kc| kc.kc_id.clone()).collect()
    }

    /// Components for the given ids, in set order. Unknown ids are an error.
    pub fn select(&self, ids: &BTreeSet<String>) -> Result<Vec<KnowledgeComponent>> {
        if let Some(unknown) = ids.iter().find(|id| !self.contains(id)) {
            return Err(Error::Validation(format!(
                "kc_id `{unknown}` is not part of KC set `{}`",
                self.set_id
            )));
        }
        Ok(self
            .components
            .iter()
            .filter(|kc| ids.contains(&kc.kc_id))
            .cloned()
            .collect())
    }
}

/// Anything that resolves a (student, problem) to the KCs it exercises.
pub trait KcAssignment {
    fn kcs_for(&self, student_id: &str, problem_id: &str) -> Option<&BTreeSet<String>>;
}

/// Problem → KC mapping (q_jk = 1 iff KC k is mapped to problem j).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QMatrix {
    pub entries: BTreeMap<String, BTreeSet<String>>,
}

impl QMatrix {
    pub fn insert(&mut self, problem_id: impl Into<String>, kc_id: impl Into<String>) {
        self.entries
            .entry(problem_id.into())
            .or_default()
            .insert(kc_id.into());
    }

    pub fn get(&self, problem_id: &str) -> Option<&BTreeSet<String>> {
        self.entries.get(problem_id)
    }

    /// Number of problems each KC is mapped to.
    pub fn kc_frequencies(&self) -> BTreeMap<String, usize> {
        let mut freq = BTreeMap::new();
        for kcs in self.entries.values() {
            for kc in kcs {
                *freq.entry(kc.clone()).or_insert(0) += 1;
            }
        }
        freq
    }
}

impl KcAssignment for QMatrix {
    fn kcs_for(&self, _student_id: &str, problem_id: &str) -> Option<&BTreeSet<String>> {
        self.entries.get(problem_id)
    }
}

/// (student, problem) → KC mapping produced by nearest-exemplar selection.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CodeKcMap {
    pub entries: BTreeMap<(String, String), BTreeSet<String>>,
}

impl CodeKcMap {
    pub fn insert(&mut self, student_id: &str, problem_id: &str, kcs: BTreeSet<String>) {
        self.entries
            .insert((student_id.to_string(), problem_id.to_string()), kcs);
    }

    /// Checks every entry is non-empty and a subset of the problem's KCs in `qmatrix`.
    pub fn check_subset_of(&self, qmatrix: &QMatrix) -> Result<()> {
        for ((student, problem), kcs) in &self.entries {
            if kcs.is_empty() {
                return Err(Error::Validation(format!(
                    "empty KC assignment for ({student}, {problem})"
                )));
            }
            let parent = qmatrix.get(problem).ok_or_else(|| {
                Error::Validation(format!("code KC map references unmapped problem `{problem}`"))
            })?;
            if !kcs.is_subset(parent) {
                return Err(Error::Validation(format!(
                    "KC assignment for ({student}, {problem}) is not a subset of the problem's KCs"
                )));
            }
        }
        Ok(())
    }
}

impl KcAssignment for CodeKcMap {
    fn kcs_for(&self, student_id: &str, problem_id: &str) -> Option<&BTreeSet<String>> {
        self.entries
            .get(&(student_id.to_string(), problem_id.to_string()))
    }
}

/// Prior-opportunity counts T for every (student, problem, KC) first attempt.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpportunityTable {
    pub entries: BTreeMap<(String, String, String), u32>,
}

impl OpportunityTable {
    pub fn get(&self, student_id: &str, problem_id: &str, kc_id: &str) -> Option<u32> {
        self.entries
            .get(&(
                student_id.to_string(),
                problem_id.to_string(),
                kc_id.to_string(),
            ))
            .copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn is_problem_correct(submission: &Submission, threshold: f64) -> bool {
    submission.score >= threshold
}

/// Groups submissions by (student, problem) and picks first and last attempts.
///
/// Output is sorted by (student, problem), so input order does not matter.
pub fn build_attempt_pairs(submissions: &[Submission]) -> Result<Vec<AttemptPair>> {
    if submissions.is_empty() {
        return Err(Error::Precondition("no submissions to pair".into()));
    }
    let mut groups: BTreeMap<(&str, &str), Vec<&Submission>> = BTreeMap::new();
    for s in submissions {
        groups
            .entry((s.student_id.as_str(), s.problem_id.as_str()))
            .or_default()
            .push(s);
    }

    let mut pairs = Vec::with_capacity(groups.len());
    for ((student, problem), mut group) in groups {
        group.sort_by_key(|s| s.attempt_index);
        for (expected, s) in (1u32..).zip(&group) {
            if s.attempt_index != expected {
                let indices: Vec<u32> = group.iter().map(|s| s.attempt_index).collect();
                return Err(Error::Validation(format!(
                    "attempt indices for (student `{student}`, problem `{problem}`) \
                     are not contiguous from 1: {indices:?}"
                )));
            }
        }
        pairs.push(AttemptPair {
            student_id: student.to_string(),
            problem_id: problem.to_string(),
            first: (*group.first().expect("group is non-empty")).clone(),
            last: (*group.last().expect("group is non-empty")).clone(),
        });
    }
    Ok(pairs)
}

/// Counts, for each student's first attempts in time order, how many earlier
/// pairs exercised the same KC. Ties on timestamp go to the smaller problem id.
pub fn opportunity_counts(
    pairs: &[AttemptPair],
    kc_map: &dyn KcAssignment,
) -> Result<OpportunityTable> {
    let missing: Vec<String> = pairs
        .iter()
        .filter(|p| kc_map.kcs_for(&p.student_id, &p.problem_id).is_none())
        .map(|p| format!("({}, {})", p.student_id, p.problem_id))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "no KC assignment for {} pair(s): {}",
            missing.len(),
            missing.join(", ")
        )));
    }

    let mut by_student: BTreeMap<&str, Vec<&AttemptPair>> = BTreeMap::new();
    for p in pairs {
        by_student.entry(p.student_id.as_str()).or_default().push(p);
    }

    let mut table = OpportunityTable::default();
    for (student, mut timeline) in by_student {
        timeline.sort_by(|a, b| {
            a.first
                .timestamp
                .cmp(&b.first.timestamp)
                .then_with(|| a.problem_id.cmp(&b.problem_id))
        });
        let mut seen: HashMap<&str, u32> = HashMap::new();
        for pair in timeline {
            let kcs = kc_map
                .kcs_for(student, &pair.problem_id)
                .expect("checked above");
            for kc in kcs {
                let count = seen.entry(kc.as_str()).or_insert(0);
                table.entries.insert(
                    (student.to_string(), pair.problem_id.clone(), kc.clone()),
                    *count,
                );
                *count += 1;
            }
        }
    }
    Ok(table)
}


#[cfg(test)]
mod tests {
    use super::fixtures::submission;
    use super::*;
    use proptest::prelude::*;

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn pairs_pick_first_and_last() {
        let subs = vec![
            submission("s1", "p1", 2, 20, 0.5),
            submission("s1", "p1", 1, 10, 0.0),
            submission("s1", "p1", 3, 30, 1.0),
        ];
        let pairs = build_attempt_pairs(&subs).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].first.attempt_index, 1);
        assert_eq!(pairs[0].last.attempt_index, 3);
    }

    #[test]
    fn single_attempt_pairs_with_itself() {
        let pairs = build_attempt_pairs(&[submission("s1", "p1", 1, 0, 1.0)]).unwrap();
        assert_eq!(pairs[0].first, pairs[0].last);
    }

    #[test]
    fn one_pair_per_group() {
        let subs = vec![
            submission("s1", "p1", 1, 0, 0.0),
            submission("s1", "p1", 2, 1, 1.0),
            submission("s1", "p2", 1, 2, 1.0),
        ];
        assert_eq!(build_attempt_pairs(&subs).unwrap().len(), 2);
    }

    #[test]
    fn gaps_and_duplicates_are_rejected() {
        let gap = vec![
            submission("s1", "p1", 1, 0, 0.0),
            submission("s1", "p1", 3, 1, 1.0),
        ];
        let err = build_attempt_pairs(&gap).unwrap_err().to_string();
        assert!(err.contains("s1") && err.contains("p1"), "{err}");

        let dup = vec![
            submission("s1", "p1", 1, 0, 0.0),
            submission("s1", "p1", 1, 1, 1.0),
        ];
        assert!(build_attempt_pairs(&dup).is_err());
        assert!(build_attempt_pairs(&[]).is_err());
    }

    #[test]
    fn correctness_threshold() {
        assert!(is_problem_correct(&submission("s", "p", 1, 0, 1.0), 1.0));
        assert!(!is_problem_correct(&submission("s", "p", 1, 0, 0.8), 1.0));
        assert!(is_problem_correct(&submission("s", "p", 1, 0, 0.8), 0.5));
    }

    #[test]
    fn opportunity_counts_follow_timeline() {
        let subs = vec![
            submission("s1", "P1", 1, 1, 1.0),
            submission("s1", "P2", 1, 2, 1.0),
            submission("s1", "P3", 1, 3, 1.0),
        ];
        let mut q = QMatrix::default();
        for (p, kcs) in [("P1", &["A", "B"][..]), ("P2", &["A"]), ("P3", &["A", "B"])] {
            for kc in kcs {
                q.insert(p, *kc);
            }
        }
        let pairs = build_attempt_pairs(&subs).unwrap();
        let t = opportunity_counts(&pairs, &q).unwrap();
        assert_eq!(t.get("s1", "P1", "A"), Some(0));
        assert_eq!(t.get("s1", "P1", "B"), Some(0));
        assert_eq!(t.get("s1", "P2", "A"), Some(1));
        assert_eq!(t.get("s1", "P2", "B"), None);
        assert_eq!(t.get("s1", "P3", "A"), Some(2));
        assert_eq!(t.get("s1", "P3", "B"), Some(1));
    }

    #[test]
    fn timestamp_ties_go_to_smaller_problem_id() {
        let subs = vec![
            submission("s1", "p2", 1, 5, 1.0),
            submission("s1", "p1", 1, 5, 1.0),
        ];
        let mut q = QMatrix::default();
        q.insert("p1", "A");
        q.insert("p2", "A");
        let t = opportunity_counts(&build_attempt_pairs(&subs).unwrap(), &q).unwrap();
        assert_eq!(t.get("s1", "p1", "A"), Some(0));
        assert_eq!(t.get("s1", "p2", "A"), Some(1));
    }

    #[test]
    fn unmapped_pairs_are_listed() {
        let subs = vec![
            submission("s1", "p1", 1, 0, 1.0),
            submission("s2", "p9", 1, 0, 1.0),
        ];
        let mut q = QMatrix::default();
        q.insert("p1", "A");
        let err = opportunity_counts(&build_attempt_pairs(&subs).unwrap(), &q)
            .unwrap_err()
            .to_string();
        assert!(err.contains("(s2, p9)"), "{err}");
    }

    #[test]
    fn code_map_subset_check() {
        let mut q = QMatrix::default();
        q.insert("p1", "A");
        q.insert("p1", "B");
        let mut m = CodeKcMap::default();
        m.insert("s1", "p1", set(&["A"]));
        assert!(m.check_subset_of(&q).is_ok());
        m.insert("s2", "p1", set(&["C"]));
        assert!(m.check_subset_of(&q).is_err());
    }

    fn arb_history() -> impl Strategy<Value = (Vec<Submission>, QMatrix, CodeKcMap)> {
        // up to 4 students × 6 problems over KCs a..d
        let kcs = ["a", "b", "c", "d"];
        (
            proptest::collection::vec(proptest::sample::subsequence(kcs.to_vec(), 1..=4), 6),
            proptest::collection::vec((0i64..20, 1u32..4, any::<u64>()), 4 * 6),
        )
            .prop_map(move |(qrows, attempts)| {
                let mut q = QMatrix::default();
                for (j, row) in qrows.iter().enumerate() {
                    for kc in row {
                        q.insert(format!("p{j}"), *kc);
                    }
                }
                let mut subs = Vec::new();
                let mut map = CodeKcMap::default();
                for (idx, (t, m, bits)) in attempts.into_iter().enumerate() {
                    let (s, j) = (idx / 6, idx % 6);
                    let (student, problem) = (format!("s{s}"), format!("p{j}"));
                    for a in 1..=m {
                        subs.push(submission(&student, &problem, a, t + a as i64, 1.0));
                    }
                    let parent: Vec<&String> = q.get(&problem).unwrap().iter().collect();
                    let mut chosen: BTreeSet<String> = parent
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| bits >> i & 1 == 1)
                        .map(|(_, k)| (*k).clone())
                        .collect();
                    if chosen.is_empty() {
                        chosen.insert(parent[0].clone());
                    }
                    map.insert(&student, &problem, chosen);
                }
                (subs, q, map)
            })
    }

    proptest! {
        #[test]
        fn pairing_is_permutation_invariant(
            (subs, _, _) in arb_history(),
            seed in any::<u64>(),
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut shuffled = subs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(build_attempt_pairs(&subs).unwrap(), build_attempt_pairs(&shuffled).unwrap());
        }

        #[test]
        fn opportunities_step_by_one((subs, q, _) in arb_history()) {
            let pairs = build_attempt_pairs(&subs).unwrap();
            let table = opportunity_counts(&pairs, &q).unwrap();
            // Per (student, kc), sorted T values must be exactly 0, 1, 2, ...
            let mut per: BTreeMap<(String, String), Vec<u32>> = BTreeMap::new();
            for ((s, _, k), t) in &table.entries {
                per.entry((s.clone(), k.clone())).or_default().push(*t);
            }
            for (_, mut ts) in per {
                ts.sort_unstable();
                let expected: Vec<u32> = (0..ts.len() as u32).collect();
                prop_assert_eq!(ts, expected);
            }
        }

        #[test]
        fn code_map_counts_bounded_by_qmatrix((subs, q, map) in arb_history()) {
            let pairs = build_attempt_pairs(&subs).unwrap();
            let full = opportunity_counts(&pairs, &q).unwrap();
            let selected = opportunity_counts(&pairs, &map).unwrap();
            for (key, t) in &selected.entries {
                prop_assert!(*t <= full.entries[key]);
            }
        }
    }
}
