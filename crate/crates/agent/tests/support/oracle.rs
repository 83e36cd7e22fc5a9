//! Brute-force reference for settled change detection over a scripted
//! sequence of directory states.

use std::collections::{BTreeMap, BTreeSet};

/// One observed state of a file: (size, mtime, content).
pub type Obs = (u64, i64, Vec<u8>);

/// `steps[0]` is the baseline. Returns (created, modified) for each later
/// step, computed from the whole history at once.
pub fn reference(steps: &[BTreeMap<String, Obs>]) -> Vec<(BTreeSet<String>, BTreeSet<String>)> {
    let settled_at = |path: &str, i: usize| -> bool {
        if i == 0 {
            return steps[0].contains_key(path);
        }
        match (steps[i].get(path), steps[i - 1].get(path)) {
            (Some(a), Some(b)) => a.0 == b.0 && a.1 == b.1,
            _ => false,
        }
    };
    let mut out = Vec::new();
    for i in 1..steps.len() {
        let mut created = BTreeSet::new();
        let mut modified = BTreeSet::new();
        for (path, now) in &steps[i] {
            if !settled_at(path, i) {
                continue;
            }
            // What the file looked like the last time it was settled.
            let reference = (0..i).rev().find(|&j| settled_at(path, j)).map(|j| &steps[j][path]);
            match reference {
                None => {
                    created.insert(path.clone());
                }
                Some(r) if (r.0, r.1) != (now.0, now.1) && r.2 != now.2 => {
                    modified.insert(path.clone());
                }
                Some(_) => {}
            }
        }
        out.push((created, modified));
    }
    out
}

/// One scripted mutation of the watched directory.
#[derive(Debug, Clone)]
pub enum Op {
    Write { file: usize, content: u8, len: usize },
    Touch { file: usize },
    Delete { file: usize },
}

fn name(file: usize) -> String {
    if file % 3 == 0 {
        format!("sub{}/f{file}.dat", file % 4)
    } else {
        format!("f{file}.dat")
    }
}

fn observe(root: &std::path::Path) -> BTreeMap<String, Obs> {
    let snap = labpipe_agent::scan::scan_dir(root, labpipe_core::Timestamp::from_millis(0)).unwrap();
    snap.entries
        .iter()
        .map(|(p, s)| (p.clone(), (s.size_bytes, s.mtime_ns, std::fs::read(root.join(p)).unwrap())))
        .collect()
}

/// Random script: up to `max_files` files and `max_steps` scans.
pub fn random_script(rng: &mut impl rand::Rng, max_files: usize, max_steps: usize) -> (usize, Vec<Vec<Op>>) {
    let files = rng.gen_range(1..=max_files);
    let steps = (0..rng.gen_range(1..=max_steps))
        .map(|_| {
            (0..rng.gen_range(0..6))
                .map(|_| {
                    let file = rng.gen_range(0..files);
                    match rng.gen_range(0..7) {
                        0..=3 => Op::Write { file, content: rng.gen_range(0..4), len: rng.gen_range(0..64) },
                        4 | 5 => Op::Touch { file },
                        _ => Op::Delete { file },
                    }
                })
                .collect()
        })
        .collect();
    (files, steps)
}

/// Applies the script to a real directory, feeding each state to the
/// agent's detector, and compares against [`reference`].
pub fn check_script(files: usize, steps: &[Vec<Op>]) -> Result<(), String> {
    use labpipe_agent::scan::{hash_all, scan_dir, ChangeDetector};
    use labpipe_core::digest::sha256_file;
    use labpipe_core::Timestamp;

    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    // Unique mtimes: a write always moves the stat.
    let mut clock = 1_000_000u64;
    for f in (0..files).step_by(5) {
        clock += 1;
        super::write_file(&root.join(name(f)), format!("base{f}").as_bytes(), clock);
    }
    let mut baseline = scan_dir(root, Timestamp::from_millis(0)).unwrap();
    hash_all(root, &mut baseline);
    let mut detector = ChangeDetector::new(&baseline);
    let mut history = vec![observe(root)];
    let mut actual = Vec::new();
    for step in steps {
        for op in step {
            clock += 1;
            match *op {
                Op::Write { file, content, len } => {
                    super::write_file(&root.join(name(file)), &vec![content; len], clock);
                }
                Op::Touch { file } => {
                    let p = root.join(name(file));
                    if p.exists() {
                        super::set_mtime(&p, clock);
                    }
                }
                Op::Delete { file } => {
                    let _ = std::fs::remove_file(root.join(name(file)));
                }
            }
        }
        let snap = scan_dir(root, Timestamp::from_millis(0)).unwrap();
        let changes = detector.observe(&snap, |p| sha256_file(&root.join(p)).map(|(h, _)| h));
        actual.push((changes.created.into_iter().collect(), changes.modified.into_iter().collect()));
        history.push(observe(root));
    }
    let expected = reference(&history);
    match actual.iter().zip(&expected).position(|(a, e)| a != e) {
        None => Ok(()),
        Some(i) => Err(format!("step {}: agent {:?}, reference {:?}", i + 1, actual[i], expected[i])),
    }
}
