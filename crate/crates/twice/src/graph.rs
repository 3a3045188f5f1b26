//! Worker–firm mobility graph: connected components, largest-connected-set
//! extraction, and the job-transition event study.
//!
//! Two-way fixed effects are only identified within a connected component of
//! the bipartite graph whose edges are employment spells, so estimation is
//! restricted to the largest such component. The event study tracks wages of
//! workers moving between firms grouped by coworker pay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::Panel;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("empty panel")]
    EmptyInput,
    #[error("panel spans {span} years; the event study needs at least 4")]
    ShortPanel { span: i64 },
}

/// Union–find with path compression and union by size.
struct DisjointSets {
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        Self { parent: (0..n as u32).collect(), size: vec![1; n] }
    }

    fn find(&mut self, x: u32) -> u32 {
        let mut root = x;
        while self.parent[root as usize] != root {
            root = self.parent[root as usize];
        }
        let mut cur = x;
        while self.parent[cur as usize] != root {
            let next = self.parent[cur as usize];
            self.parent[cur as usize] = root;
            cur = next;
        }
        root
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        let (big, small) =
            if self.size[ra as usize] >= self.size[rb as usize] { (ra, rb) } else { (rb, ra) };
        self.parent[small as usize] = big;
        self.size[big as usize] += self.size[small as usize];
    }
}

/// Component labels over the workers and firms appearing in `rows`. Labels
/// are dense 0-based, ordered by first appearance in the row scan.
pub struct ComponentLabels {
    pub worker_component: BTreeMap<u32, u32>,
    pub firm_component: BTreeMap<u32, u32>,
    pub n_components: usize,
}

pub fn component_labels(panel: &Panel, rows: &[usize]) -> ComponentLabels {
    let nw = panel.worker_key_count();
    let nf = panel.firm_key_count();
    let mut sets = DisjointSets::new(nw + nf);
    for &r in rows {
        let obs = &panel.rows()[r];
        sets.union(obs.worker.0, nw as u32 + obs.firm.0);
    }
    let mut label_of_root: BTreeMap<u32, u32> = BTreeMap::new();
    let mut worker_component = BTreeMap::new();
    let mut firm_component = BTreeMap::new();
    for &r in rows {
        let obs = &panel.rows()[r];
        let root = sets.find(obs.worker.0);
        let next = label_of_root.len() as u32;
        let label = *label_of_root.entry(root).or_insert(next);
        worker_component.insert(obs.worker.0, label);
        firm_component.insert(obs.firm.0, label);
    }
    ComponentLabels { worker_component, firm_component, n_components: label_of_root.len() }
}

/// Mobility-graph summary before and after restricting to the largest
/// connected component.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConnectivityStats {
    pub workers_before: usize,
    pub firms_before: usize,
    pub rows_before: usize,
    pub workers_after: usize,
    pub firms_after: usize,
    pub rows_after: usize,
    pub n_components: usize,
    /// Mean distinct employers per retained worker.
    pub mean_firms_per_worker: f64,
    /// Mean distinct workers per retained firm.
    pub mean_workers_per_firm: f64,
    /// Share of retained workers observed at three or more firms.
    pub share_workers_three_plus_firms: f64,
    pub worker_retention: f64,
}

/// Restricts the panel to its largest connected component. Size is measured
/// in nodes (workers + firms); ties go to the component with more rows, then
/// to the one containing the lexicographically smallest firm id.
pub fn largest_connected_set(panel: &Panel) -> Result<(Panel, ConnectivityStats), GraphError> {
    let rows = panel.all_rows();
    if rows.is_empty() {
        return Err(GraphError::EmptyInput);
    }
    let labels = component_labels(panel, &rows);
    let n = labels.n_components;
    let mut nodes = vec![0usize; n];
    let mut row_counts = vec![0usize; n];
    let mut min_firm_id: Vec<Option<&str>> = vec![None; n];
    for (&_w, &c) in &labels.worker_component {
        nodes[c as usize] += 1;
    }
    for (&f, &c) in &labels.firm_component {
        nodes[c as usize] += 1;
        let id = panel.firm_id(crate::panel::FirmKey(f));
        let slot = &mut min_firm_id[c as usize];
        if slot.map_or(true, |cur| id < cur) {
            *slot = Some(id);
        }
    }
    for &r in &rows {
        row_counts[labels.worker_component[&panel.rows()[r].worker.0] as usize] += 1;
    }
    let best = (0..n)
        .max_by(|&a, &b| {
            nodes[a]
                .cmp(&nodes[b])
                .then(row_counts[a].cmp(&row_counts[b]))
                .then_with(|| min_firm_id[b].cmp(&min_firm_id[a])) // smaller id wins
        })
        .expect("at least one component");
    let kept: Vec<usize> = rows
        .iter()
        .copied()
        .filter(|&r| labels.worker_component[&panel.rows()[r].worker.0] as usize == best)
        .collect();
    let filtered = panel.filter_rows(&kept);

    let mut firms_of_worker: BTreeMap<u32, std::collections::BTreeSet<u32>> = BTreeMap::new();
    let mut workers_of_firm: BTreeMap<u32, std::collections::BTreeSet<u32>> = BTreeMap::new();
    for &r in &kept {
        let obs = &panel.rows()[r];
        firms_of_worker.entry(obs.worker.0).or_default().insert(obs.firm.0);
        workers_of_firm.entry(obs.firm.0).or_default().insert(obs.worker.0);
    }
    let workers_after = firms_of_worker.len();
    let firms_after = workers_of_firm.len();
    let three_plus = firms_of_worker.values().filter(|s| s.len() >= 3).count();
    let stats = ConnectivityStats {
        workers_before: panel.n_workers(),
        firms_before: panel.n_firms(),
        rows_before: rows.len(),
        workers_after,
        firms_after,
        rows_after: kept.len(),
        n_components: n,
        mean_firms_per_worker: firms_of_worker.values().map(|s| s.len() as f64).sum::<f64>()
            / workers_after as f64,
        mean_workers_per_firm: workers_of_firm.values().map(|s| s.len() as f64).sum::<f64>()
            / firms_after as f64,
        share_workers_three_plus_firms: three_plus as f64 / workers_after as f64,
        worker_retention: workers_after as f64 / panel.n_workers() as f64,
    };
    Ok((filtered, stats))
}

/// Mean log wage at one event time for one origin→destination quartile pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventStudyCell {
    pub origin_q: u8,
    pub dest_q: u8,
    /// Years relative to the move; 0 is the first year at the new firm.
    pub event_time: i32,
    pub mean_log_wage: f64,
    pub n: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventStudyTable {
    /// One entry per quartile pair and event time with at least one mover.
    pub cells: Vec<EventStudyCell>,
    pub movers: u64,
    /// Quartile pairs with no qualifying mover.
    pub insufficient: Vec<(u8, u8)>,
    /// Spell length requirement used on each side of the move.
    pub min_spell: usize,
}

/// Wage trajectories around firm-to-firm moves, with firms grouped into
/// quartiles of coworker pay.
///
/// Firm quartiles come from leave-one-out coworker mean wages: within each
/// firm-year with at least two workers the coworker means average to the
/// firm-year mean, so the firm score is the average of its multi-worker
/// firm-year means (single-worker firm-years carry no coworker information
/// and are skipped; firms with no multi-worker year stay unclassified).
/// A mover contributes when it spends `min_spell` consecutive years at an
/// origin firm immediately followed by `min_spell` at a destination firm;
/// wages are reported at event times −2..=+1.
pub fn event_study(panel: &Panel, min_spell: usize) -> Result<EventStudyTable, GraphError> {
    let rows = panel.all_rows();
    if rows.is_empty() {
        return Err(GraphError::EmptyInput);
    }
    let min_spell = min_spell.max(2);
    let years: Vec<i32> = rows.iter().map(|&r| panel.rows()[r].year).collect();
    let span = (*years.iter().max().unwrap() - *years.iter().min().unwrap()) as i64;
    if span < 3 {
        return Err(GraphError::ShortPanel { span });
    }

    // firm scores: average of multi-worker firm-year mean wages
    let mut firm_year: BTreeMap<(u32, i32), (f64, u64)> = BTreeMap::new();
    for &r in &rows {
        let obs = &panel.rows()[r];
        let e = firm_year.entry((obs.firm.0, obs.year)).or_insert((0.0, 0));
        e.0 += obs.log_wage;
        e.1 += 1;
    }
    let mut firm_scores: BTreeMap<u32, (f64, u64)> = BTreeMap::new();
    for (&(f, _), &(sum, count)) in &firm_year {
        if count >= 2 {
            let e = firm_scores.entry(f).or_insert((0.0, 0));
            e.0 += sum / count as f64;
            e.1 += 1;
        }
    }
    let mut ranked: Vec<(u32, f64)> =
        firm_scores.iter().map(|(&f, &(sum, n))| (f, sum / n as f64)).collect();
    ranked.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .expect("finite wages")
            .then_with(|| panel.firm_id(crate::panel::FirmKey(a.0)).cmp(panel.firm_id(crate::panel::FirmKey(b.0))))
    });
    let nf = ranked.len();
    let quartile_of: BTreeMap<u32, u8> = ranked
        .iter()
        .enumerate()
        .map(|(i, &(f, _))| (f, (4 * i / nf) as u8 + 1))
        .collect();

    // per-worker year → (firm, wage); the panel holds one row per worker-year
    let mut history: BTreeMap<u32, BTreeMap<i32, (u32, f64)>> = BTreeMap::new();
    for &r in &rows {
        let obs = &panel.rows()[r];
        history.entry(obs.worker.0).or_default().insert(obs.year, (obs.firm.0, obs.log_wage));
    }

    let mut acc: BTreeMap<(u8, u8, i32), (f64, u64)> = BTreeMap::new();
    let mut movers = 0u64;
    for (_, per_year) in &history {
        let timeline: Vec<(i32, u32, f64)> =
            per_year.iter().map(|(&y, &(f, wage))| (y, f, wage)).collect();
        // candidate move at index i: timeline[i] starts a new firm
        for i in 1..timeline.len() {
            let (y0, dest, _) = timeline[i];
            let origin = timeline[i - 1].1;
            if origin == dest {
                continue;
            }
            // verify min_spell consecutive years each side
            let pre_ok = (1..=min_spell).all(|s| {
                i >= s
                    && timeline[i - s].1 == origin
                    && timeline[i - s].0 == y0 - s as i32
            });
            let post_ok = (0..min_spell).all(|s| {
                i + s < timeline.len()
                    && timeline[i + s].1 == dest
                    && timeline[i + s].0 == y0 + s as i32
            });
            if !pre_ok || !post_ok {
                continue;
            }
            let (Some(&oq), Some(&dq)) = (quartile_of.get(&origin), quartile_of.get(&dest))
            else {
                continue;
            };
            movers += 1;
            for t in -2i32..=1 {
                let wage = timeline[(i as i32 + t) as usize].2;
                let e = acc.entry((oq, dq, t)).or_insert((0.0, 0));
                e.0 += wage;
                e.1 += 1;
            }
        }
    }

    let cells: Vec<EventStudyCell> = acc
        .iter()
        .map(|(&(oq, dq, t), &(sum, n))| EventStudyCell {
            origin_q: oq,
            dest_q: dq,
            event_time: t,
            mean_log_wage: sum / n as f64,
            n,
        })
        .collect();
    let mut insufficient = Vec::new();
    for oq in 1..=4u8 {
        for dq in 1..=4u8 {
            if !acc.contains_key(&(oq, dq, 0)) {
                insufficient.push((oq, dq));
            }
        }
    }
    Ok(EventStudyTable { cells, movers, insufficient, min_spell })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ColumnSchema;
    use crate::panel::PanelBuilder;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn panel_from_edges(edges: &[(&str, &str, i32, f64)]) -> Panel {
        let mut b = PanelBuilder::new(ColumnSchema::new(vec![]));
        for &(w, f, y, wage) in edges {
            b.push_row(w, f, y, wage, vec![]).unwrap();
        }
        b.finish().unwrap()
    }

    #[test]
    fn single_pair_is_retained_unchanged() {
        let panel = panel_from_edges(&[("w1", "f1", 2000, 1.0), ("w1", "f1", 2001, 1.1)]);
        let (kept, stats) = largest_connected_set(&panel).unwrap();
        assert_eq!(kept.n_rows(), 2);
        assert_eq!(stats.n_components, 1);
        assert_eq!(stats.worker_retention, 1.0);
        assert_eq!(stats.mean_firms_per_worker, 1.0);
    }

    #[test]
    fn row_count_breaks_node_count_ties() {
        let panel = panel_from_edges(&[
            ("w1", "f1", 2000, 1.0),
            ("w1", "f1", 2001, 1.0),
            ("w1", "f1", 2002, 1.0),
            ("w2", "f2", 2000, 2.0),
        ]);
        let (kept, stats) = largest_connected_set(&panel).unwrap();
        assert_eq!(kept.n_rows(), 3);
        assert_eq!(stats.n_components, 2);
        assert_eq!(kept.rows()[0].log_wage, 1.0);
        assert!((stats.worker_retention - 0.5).abs() < 1e-12);
    }

    #[test]
    fn components_match_breadth_first_search_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (nw, nf) = (120, 80);
        let mut next_year: BTreeMap<usize, i32> = BTreeMap::new();
        let mut edges = Vec::new();
        for _ in 0..160 {
            let w = rng.gen_range(0..nw);
            let f = rng.gen_range(0..nf);
            let year = next_year.entry(w).or_insert(2000);
            edges.push((format!("w{w:03}"), format!("f{f:03}"), *year, 1.0));
            *year += 1;
        }
        let rows: Vec<(&str, &str, i32, f64)> =
            edges.iter().map(|(w, f, y, g)| (w.as_str(), f.as_str(), *y, *g)).collect();
        let panel = panel_from_edges(&rows);
        let all = panel.all_rows();
        let labels = component_labels(&panel, &all);

        // oracle: breadth-first search over an explicit adjacency list keyed
        // by id strings
        let mut adj: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (w, f, _, _) in &edges {
            adj.entry(format!("W:{w}")).or_default().push(format!("F:{f}"));
            adj.entry(format!("F:{f}")).or_default().push(format!("W:{w}"));
        }
        let mut oracle: BTreeMap<String, u32> = BTreeMap::new();
        let mut next = 0u32;
        let nodes: Vec<String> = adj.keys().cloned().collect();
        for start in nodes {
            if oracle.contains_key(&start) {
                continue;
            }
            let mut queue = std::collections::VecDeque::from([start]);
            while let Some(node) = queue.pop_front() {
                if oracle.contains_key(&node) {
                    continue;
                }
                oracle.insert(node.clone(), next);
                for nb in &adj[&node] {
                    queue.push_back(nb.clone());
                }
            }
            next += 1;
        }
        assert_eq!(labels.n_components, next as usize);
        // same partition: equal labels under the library iff equal under BFS
        let worker_pairs: Vec<(u32, u32)> =
            labels.worker_component.iter().map(|(&w, &c)| (w, c)).collect();
        for i in 0..worker_pairs.len() {
            for j in (i + 1)..worker_pairs.len() {
                let (wa, ca) = worker_pairs[i];
                let (wb, cb) = worker_pairs[j];
                let oa = oracle[&format!("W:{}", panel.worker_id(crate::panel::WorkerKey(wa)))];
                let ob = oracle[&format!("W:{}", panel.worker_id(crate::panel::WorkerKey(wb)))];
                assert_eq!(ca == cb, oa == ob);
            }
        }
    }

    #[test]
    fn largest_connected_set_is_idempotent_and_counts_partition_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut next_year: BTreeMap<usize, i32> = BTreeMap::new();
        let mut edges = Vec::new();
        for _ in 0..120 {
            let w = rng.gen_range(0..40);
            let f = rng.gen_range(0..25);
            let year = next_year.entry(w).or_insert(2000);
            edges.push((format!("w{w}"), format!("f{f}"), *year, 0.5));
            *year += 1;
        }
        let rows: Vec<(&str, &str, i32, f64)> =
            edges.iter().map(|(w, f, y, g)| (w.as_str(), f.as_str(), *y, *g)).collect();
        let panel = panel_from_edges(&rows);
        let labels = component_labels(&panel, &panel.all_rows());
        let mut per_component = vec![0usize; labels.n_components];
        for r in panel.rows() {
            per_component[labels.worker_component[&r.worker.0] as usize] += 1;
        }
        assert_eq!(per_component.iter().sum::<usize>(), panel.n_rows());

        let (once, s1) = largest_connected_set(&panel).unwrap();
        let (twice_, s2) = largest_connected_set(&once).unwrap();
        assert_eq!(once.n_rows(), twice_.n_rows());
        assert_eq!(s2.n_components, 1);
        assert_eq!(s1.rows_after, s2.rows_after);
    }

    /// Four firms with stationary coworker pairs pin the quartiles; one
    /// mover goes from the bottom firm to the top with wages (1,1,2,2).
    fn mover_panel() -> Panel {
        let mut edges: Vec<(String, String, i32, f64)> = Vec::new();
        for (fi, base) in [(1, 1.0f64), (2, 2.0), (3, 3.0), (4, 4.0)] {
            for w in 0..2 {
                for y in 2000..=2003 {
                    edges.push((format!("s{fi}{w}"), format!("f{fi}"), y, base));
                }
            }
        }
        for (y, wage) in [(2000, 1.0), (2001, 1.0), (2002, 2.0), (2003, 2.0)] {
            edges.push(("mover".into(), if y < 2002 { "f1" } else { "f4" }.into(), y, wage));
        }
        let rows: Vec<(&str, &str, i32, f64)> =
            edges.iter().map(|(w, f, y, g)| (w.as_str(), f.as_str(), *y, *g)).collect();
        panel_from_edges(&rows)
    }

    #[test]
    fn single_mover_profile_is_reported_exactly() {
        let table = event_study(&mover_panel(), 2).unwrap();
        assert_eq!(table.movers, 1);
        assert_eq!(table.insufficient.len(), 15);
        assert!(!table.insufficient.contains(&(1, 4)));
        let mut profile: Vec<(i32, f64, u64)> = table
            .cells
            .iter()
            .filter(|c| c.origin_q == 1 && c.dest_q == 4)
            .map(|c| (c.event_time, c.mean_log_wage, c.n))
            .collect();
        profile.sort_by_key(|&(t, _, _)| t);
        assert_eq!(
            profile,
            vec![(-2, 1.0, 1), (-1, 1.0, 1), (0, 2.0, 1), (1, 2.0, 1)]
        );
    }

    #[test]
    fn stationary_panel_reports_all_pairs_insufficient() {
        let panel = panel_from_edges(&[
            ("w1", "f1", 2000, 1.0),
            ("w1", "f1", 2001, 1.0),
            ("w1", "f1", 2002, 1.0),
            ("w1", "f1", 2003, 1.0),
            ("w2", "f1", 2000, 2.0),
            ("w2", "f1", 2001, 2.0),
            ("w2", "f1", 2002, 2.0),
            ("w2", "f1", 2003, 2.0),
        ]);
        let table = event_study(&panel, 2).unwrap();
        assert_eq!(table.movers, 0);
        assert_eq!(table.insufficient.len(), 16);
        assert!(table.cells.is_empty());
    }

    #[test]
    fn upward_and_downward_moves_are_symmetric_by_construction() {
        // add a mirror-image mover to the single-mover panel
        let base = mover_panel();
        let mut b = PanelBuilder::new(ColumnSchema::new(vec![]));
        for r in base.rows() {
            b.push_row(
                base.worker_id(r.worker),
                base.firm_id(r.firm),
                r.year,
                r.log_wage,
                vec![],
            )
            .unwrap();
        }
        for (y, wage) in [(2000, 4.0), (2001, 4.0), (2002, 3.0), (2003, 3.0)] {
            b.push_row("down", if y < 2002 { "f4" } else { "f1" }, y, wage, vec![]).unwrap();
        }
        let panel = b.finish().unwrap();
        let table = event_study(&panel, 2).unwrap();
        let gain = |oq: u8, dq: u8| -> f64 {
            let at = |t: i32| {
                table
                    .cells
                    .iter()
                    .find(|c| c.origin_q == oq && c.dest_q == dq && c.event_time == t)
                    .unwrap()
                    .mean_log_wage
            };
            at(0) - at(-1)
        };
        assert!((gain(1, 4) + gain(4, 1)).abs() < 1e-12);
    }

    #[test]
    fn short_panels_are_rejected() {
        let panel = panel_from_edges(&[("w1", "f1", 2000, 1.0), ("w1", "f1", 2001, 1.0)]);
        match event_study(&panel, 2) {
            Err(GraphError::ShortPanel { span }) => assert_eq!(span, 1),
            other => panic!("expected ShortPanel, got {other:?}"),
        }
    }
}
