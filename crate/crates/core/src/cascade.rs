//! Cascade records and the retweet-path text format.
//!
//! One cascade per line:
//!
//! ```text
//! id<TAB>root<TAB>t0<TAB>n<TAB>path_1 path_2 ... path_n
//! ```
//!
//! Each path is `u0/u1/.../uk:t`, the forwarding chain from the root to a
//! participant followed by the participant's timestamp relative to `t0`.
//! The root's own path is the single user `u0:0`. The last two users of a
//! longer path are the (parent, child) pair of one repost.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Repost {
    pub parent: u64,
    pub user: u64,
    /// Time since publication.
    pub time: f64,
}

/// One diffusion record. Repost times are relative to `publish_time` and
/// sorted ascending; every parent joined before its child.
#[derive(Debug, Clone, PartialEq)]
pub struct Cascade {
    pub id: u64,
    pub root: u64,
    pub publish_time: f64,
    events: Vec<Repost>,
}

impl Cascade {
    /// Validates and stores a cascade. Events are stably sorted by time
    /// before parents are checked.
    pub fn new(id: u64, root: u64, publish_time: f64, mut events: Vec<Repost>) -> Result<Self> {
        Self::validate(root, &mut events, 0)?;
        Ok(Self {
            id,
            root,
            publish_time,
            events,
        })
    }

    fn validate(root: u64, events: &mut [Repost], line: usize) -> Result<()> {
        if let Some(e) = events.iter().find(|e| !(e.time >= 0.0) || !e.time.is_finite()) {
            return Err(Error::Parse {
                line,
                msg: format!("invalid repost time {}", e.time),
            });
        }
        events.sort_by(|a, b| a.time.total_cmp(&b.time));
        let mut seen = std::collections::HashSet::with_capacity(events.len() + 1);
        seen.insert(root);
        for e in events.iter() {
            if !seen.contains(&e.parent) {
                return Err(Error::Ordering { line, parent: e.parent });
            }
            if !seen.insert(e.user) {
                return Err(Error::Parse {
                    line,
                    msg: format!("user {} joins the cascade twice", e.user),
                });
            }
        }
        Ok(())
    }

    pub fn events(&self) -> &[Repost] {
        &self.events
    }

    /// Participants including the root.
    pub fn size(&self) -> usize {
        self.events.len() + 1
    }

    /// Cumulative popularity `P(t)`: the root plus reposts at or before `t`.
    pub fn popularity_at(&self, t: f64) -> usize {
        1 + self.events.partition_point(|e| e.time <= t)
    }

    pub fn observed_participants(&self, t_o: f64) -> usize {
        self.popularity_at(t_o)
    }

    /// Incremental popularity `P(t_p) - P(t_o)`.
    pub fn increment(&self, t_o: f64, t_p: f64) -> usize {
        self.popularity_at(t_p) - self.popularity_at(t_o)
    }

    pub fn to_line(&self) -> String {
        let mut chain: HashMap<u64, String> = HashMap::with_capacity(self.size());
        chain.insert(self.root, self.root.to_string());
        let mut paths = Vec::with_capacity(self.size());
        paths.push(format!("{}:0", self.root));
        for e in &self.events {
            let p = format!("{}/{}", chain[&e.parent], e.user);
            paths.push(format!("{p}:{}", e.time));
            chain.insert(e.user, p);
        }
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.id,
            self.root,
            self.publish_time,
            paths.len(),
            paths.join(" ")
        )
    }

    pub fn parse_line(line: &str, line_no: usize) -> Result<Self> {
        let bad = |msg: String| Error::Parse { line: line_no, msg };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(bad(format!("expected 5 tab-separated fields, got {}", fields.len())));
        }
        let id: u64 = fields[0].trim().parse().map_err(|e| bad(format!("id: {e}")))?;
        let root: u64 = fields[1].trim().parse().map_err(|e| bad(format!("root: {e}")))?;
        let publish_time: f64 = fields[2].trim().parse().map_err(|e| bad(format!("t0: {e}")))?;
        let n: usize = fields[3].trim().parse().map_err(|e| bad(format!("count: {e}")))?;
        let paths: Vec<&str> = fields[4].split_whitespace().collect();
        if paths.len() != n {
            return Err(bad(format!("declared {n} paths, found {}", paths.len())));
        }
        let mut events = Vec::with_capacity(n.saturating_sub(1));
        let mut saw_root = false;
        for p in paths {
            let (chain, t) = p.rsplit_once(':').ok_or_else(|| bad(format!("path {p:?} lacks ':time'")))?;
            let time: f64 = t.parse().map_err(|e| bad(format!("time in {p:?}: {e}")))?;
            let users = chain
                .split('/')
                .map(|u| u.parse::<u64>().map_err(|e| bad(format!("user in {p:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            match users.as_slice() {
                [u] if *u == root => {
                    if saw_root {
                        return Err(bad("root path appears twice".into()));
                    }
                    saw_root = true;
                }
                [u] => return Err(bad(format!("single-user path {u} is not the root {root}"))),
                [.., parent, child] => events.push(Repost {
                    parent: *parent,
                    user: *child,
                    time,
                }),
                [] => unreachable!("split yields at least one item"),
            }
        }
        if !saw_root {
            return Err(bad("missing root path".into()));
        }
        Self::validate(root, &mut events, line_no)?;
        Ok(Self {
            id,
            root,
            publish_time,
            events,
        })
    }
}

pub fn parse_dataset_str(text: &str) -> Result<Vec<Cascade>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| Cascade::parse_line(l, i + 1))
        .collect()
}

pub fn parse_dataset(path: impl AsRef<Path>) -> Result<Vec<Cascade>> {
    parse_dataset_str(&fs::read_to_string(path)?)
}

pub fn format_dataset(cascades: &[Cascade]) -> String {
    let mut s = String::new();
    for c in cascades {
        s.push_str(&c.to_line());
        s.push('\n');
    }
    s
}

pub fn write_dataset(path: impl AsRef<Path>, cascades: &[Cascade]) -> Result<()> {
    fs::write(path, format_dataset(cascades))?;
    Ok(())
}
