use std::collections::{HashMap, HashSet, VecDeque};

use super::records::InteractionRecord;

pub const MIN_INTERACTIONS: usize = 5;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FilterReport {
    pub removed_u: Vec<String>,
    pub removed_v: Vec<String>,
    pub records_removed: usize,
}

/// Keeps the largest sub-log in which every user on either side has at
/// least [`MIN_INTERACTIONS`] interactions. Peeling order does not matter:
/// the k-core is unique.
pub fn five_core_filter(records: &[InteractionRecord]) -> (Vec<InteractionRecord>, FilterReport) {
    let mut u_deg: HashMap<&str, usize> = HashMap::new();
    let mut v_deg: HashMap<&str, usize> = HashMap::new();
    let mut u_recs: HashMap<&str, Vec<usize>> = HashMap::new();
    let mut v_recs: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        *u_deg.entry(&r.u_id).or_default() += 1;
        *v_deg.entry(&r.v_id).or_default() += 1;
        u_recs.entry(&r.u_id).or_default().push(i);
        v_recs.entry(&r.v_id).or_default().push(i);
    }

    let mut alive = vec![true; records.len()];
    let mut removed_u: HashSet<&str> = HashSet::new();
    let mut removed_v: HashSet<&str> = HashSet::new();
    // (is_u, id)
    let mut queue: VecDeque<(bool, &str)> = VecDeque::new();
    for (&id, &d) in &u_deg {
        if d < MIN_INTERACTIONS {
            queue.push_back((true, id));
        }
    }
    for (&id, &d) in &v_deg {
        if d < MIN_INTERACTIONS {
            queue.push_back((false, id));
        }
    }
    while let Some((is_u, id)) = queue.pop_front() {
        let newly = if is_u {
            removed_u.insert(id)
        } else {
            removed_v.insert(id)
        };
        if !newly {
            continue;
        }
        let recs = if is_u { &u_recs[id] } else { &v_recs[id] };
        for &ri in recs {
            if !alive[ri] {
                continue;
            }
            alive[ri] = false;
            let r = &records[ri];
            let (other, deg, gone) = if is_u {
                (r.v_id.as_str(), &mut v_deg, &removed_v)
            } else {
                (r.u_id.as_str(), &mut u_deg, &removed_u)
            };
            let d = deg.get_mut(other).expect("degree entry");
            *d -= 1;
            if *d == MIN_INTERACTIONS - 1 && !gone.contains(other) {
                queue.push_back((!is_u, other));
            }
        }
    }

    let kept: Vec<InteractionRecord> = records
        .iter()
        .zip(&alive)
        .filter(|(_, &a)| a)
        .map(|(r, _)| r.clone())
        .collect();
    let mut removed_u: Vec<String> = removed_u.into_iter().map(String::from).collect();
    let mut removed_v: Vec<String> = removed_v.into_iter().map(String::from).collect();
    removed_u.sort();
    removed_v.sort();
    let report = FilterReport {
        removed_u,
        removed_v,
        records_removed: records.len() - kept.len(),
    };
    (kept, report)
}
