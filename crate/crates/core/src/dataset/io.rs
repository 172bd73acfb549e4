//! Tab-separated readers and writers for catalogs, interaction logs,
//! conversation records and id-map sidecars.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Catalog, ConversationRecord, Dataset, IdMap, InteractionLog, UserHistory, Vocab};
use crate::error::{Error, Result};

pub const CATALOG_FILE: &str = "item_attrs.tsv";
pub const INTERACTIONS_FILE: &str = "interactions.tsv";
pub const CONVERSATIONS_FILE: &str = "conversations.tsv";
const ITEM_MAP_FILE: &str = "items.map.tsv";
const ATTRIBUTE_MAP_FILE: &str = "attributes.map.tsv";
const USER_MAP_FILE: &str = "users.map.tsv";

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Non-blank lines with 1-based line numbers, split on tabs.
fn records(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| (n + 1, l.trim_end_matches('\r').split('\t').collect()))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn expect_fields(path: &Path, line: usize, fields: &[&str], n: usize) -> Result<()> {
    if fields.len() != n {
        return Err(parse_err(
            path,
            line,
            format!("expected {n} fields, found {}", fields.len()),
        ));
    }
    Ok(())
}

fn split_list(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').map(str::trim).filter(|a| !a.is_empty())
}

/// Reads `item<TAB>attr,attr,...` lines. Items are numbered in file order.
/// When `vocab.attributes` is already populated it is treated as the closed
/// attribute vocabulary; otherwise attributes are numbered by first use.
pub fn read_catalog(path: &Path, vocab: &mut Vocab) -> Result<Catalog> {
    let text = read_text(path)?;
    let closed = !vocab.attributes.is_empty();
    let mut items = IdMap::for_items();
    let mut lists = Vec::new();
    for (line, fields) in records(&text) {
        expect_fields(path, line, &fields, 2)?;
        let raw_item = fields[0].trim();
        if items.get(raw_item).is_some() {
            return Err(Error::DuplicateItem(raw_item.to_string()));
        }
        items.intern(raw_item);
        let mut attrs = Vec::new();
        for raw in split_list(fields[1]) {
            let id = if closed {
                vocab
                    .attributes
                    .get(raw)
                    .ok_or_else(|| Error::UnknownAttribute(raw.to_string()))?
            } else {
                vocab.attributes.intern(raw)
            };
            attrs.push(id);
        }
        if attrs.is_empty() {
            return Err(Error::EmptyAttributeSet(raw_item.to_string()));
        }
        attrs.sort_unstable();
        if attrs.windows(2).any(|w| w[0] == w[1]) {
            return Err(parse_err(
                path,
                line,
                format!("item `{raw_item}` repeats an attribute"),
            ));
        }
        lists.push(attrs);
    }
    vocab.items = items;
    Catalog::new(lists, vocab.attributes.len())
}

/// Reads `user<TAB>item<TAB>timestamp` lines into per-user sequences sorted
/// by timestamp, ties in file order. Users are numbered by first appearance
/// unless `vocab.users` is already populated.
pub fn read_interactions(path: &Path, vocab: &mut Vocab) -> Result<InteractionLog> {
    let text = read_text(path)?;
    let closed = !vocab.users.is_empty();
    let mut events: Vec<Vec<(i64, u32)>> = vec![Vec::new(); vocab.users.len()];
    for (line, fields) in records(&text) {
        expect_fields(path, line, &fields, 3)?;
        let user = if closed {
            vocab
                .users
                .get(fields[0])
                .ok_or_else(|| Error::UnknownUser(fields[0].to_string()))?
        } else {
            vocab.users.intern(fields[0])
        };
        let item = vocab
            .items
            .get(fields[1])
            .ok_or_else(|| Error::UnknownItem(fields[1].to_string()))?;
        let ts: i64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad timestamp `{}`", fields[2])))?;
        if events.len() <= user as usize {
            events.resize(user as usize + 1, Vec::new());
        }
        events[user as usize].push((ts, item));
    }
    let users = events
        .into_iter()
        .map(|mut ev| {
            ev.sort_by_key(|&(t, _)| t);
            UserHistory {
                items: ev.iter().map(|&(_, i)| i).collect(),
                timestamps: ev.iter().map(|&(t, _)| t).collect(),
            }
        })
        .collect();
    Ok(InteractionLog { users })
}

/// Reads `user<TAB>attr,attr,...<TAB>target<TAB>history_cutoff` lines.
/// Attribute order is kept: it is the order of confirmation.
pub fn read_conversations(path: &Path, vocab: &Vocab) -> Result<Vec<ConversationRecord>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (line, fields) in records(&text) {
        expect_fields(path, line, &fields, 4)?;
        let user = vocab
            .users
            .get(fields[0])
            .ok_or_else(|| Error::UnknownUser(fields[0].to_string()))?;
        let attributes = split_list(fields[1])
            .map(|a| {
                vocab
                    .attributes
                    .get(a)
                    .ok_or_else(|| Error::UnknownAttribute(a.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        if attributes.is_empty() {
            return Err(parse_err(path, line, "empty attribute sequence"));
        }
        let target = vocab
            .items
            .get(fields[2])
            .ok_or_else(|| Error::UnknownItem(fields[2].to_string()))?;
        let history_cutoff = fields[3]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad history cutoff `{}`", fields[3])))?;
        out.push(ConversationRecord {
            user,
            attributes,
            target,
            history_cutoff,
        });
    }
    Ok(out)
}

/// Reads a `raw<TAB>internal` sidecar. Internal ids must be dense and start
/// at `offset`.
pub fn read_id_map(path: &Path, offset: u32) -> Result<IdMap> {
    let text = read_text(path)?;
    let mut map = IdMap::new(offset);
    for (line, fields) in records(&text) {
        expect_fields(path, line, &fields, 2)?;
        let id: u32 = fields[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad id `{}`", fields[1])))?;
        let expected = map.len() as u32 + offset;
        if id != expected || map.get(fields[0]).is_some() {
            return Err(parse_err(
                path,
                line,
                format!("id map not dense: expected {expected}, found {id}"),
            ));
        }
        map.intern(fields[0]);
    }
    Ok(map)
}

fn raw_or_id(map: &IdMap, id: u32) -> String {
    map.raw(id)
        .map(str::to_string)
        .unwrap_or_else(|| id.to_string())
}

pub fn write_catalog(path: &Path, catalog: &Catalog, vocab: &Vocab) -> Result<()> {
    let mut s = String::new();
    for item in catalog.items() {
        let attrs: Vec<String> = catalog
            .item_attributes(item)
            .iter()
            .map(|&a| raw_or_id(&vocab.attributes, a))
            .collect();
        let _ = writeln!(s, "{}\t{}", raw_or_id(&vocab.items, item), attrs.join(","));
    }
    write_text(path, &s)
}

pub fn write_interactions(path: &Path, log: &InteractionLog, vocab: &Vocab) -> Result<()> {
    let mut s = String::new();
    for (u, h) in log.users.iter().enumerate() {
        let user = raw_or_id(&vocab.users, u as u32);
        for (&i, &t) in h.items.iter().zip(&h.timestamps) {
            let _ = writeln!(s, "{user}\t{}\t{t}", raw_or_id(&vocab.items, i));
        }
    }
    write_text(path, &s)
}

pub fn write_conversations(
    path: &Path,
    records: &[ConversationRecord],
    vocab: &Vocab,
) -> Result<()> {
    let mut s = String::new();
    for r in records {
        let attrs: Vec<String> = r
            .attributes
            .iter()
            .map(|&a| raw_or_id(&vocab.attributes, a))
            .collect();
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}",
            raw_or_id(&vocab.users, r.user),
            attrs.join(","),
            raw_or_id(&vocab.items, r.target),
            r.history_cutoff
        );
    }
    write_text(path, &s)
}

pub fn write_id_map(path: &Path, map: &IdMap) -> Result<()> {
    let mut s = String::new();
    for (raw, id) in map.iter() {
        let _ = writeln!(s, "{raw}\t{id}");
    }
    write_text(path, &s)
}

impl Dataset {
    /// Loads a dataset directory. Id-map sidecars, when present, fix the
    /// attribute and user numbering; the conversation file is optional.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut vocab = Vocab::default();
        let attr_map = dir.join(ATTRIBUTE_MAP_FILE);
        if attr_map.exists() {
            vocab.attributes = read_id_map(&attr_map, 1)?;
        }
        let user_map = dir.join(USER_MAP_FILE);
        if user_map.exists() {
            vocab.users = read_id_map(&user_map, 0)?;
        }
        let catalog = read_catalog(&dir.join(CATALOG_FILE), &mut vocab)?;
        let item_map = dir.join(ITEM_MAP_FILE);
        if item_map.exists() && read_id_map(&item_map, 2)? != vocab.items {
            return Err(Error::Config(format!(
                "{} disagrees with the catalog line order",
                item_map.display()
            )));
        }
        let log = read_interactions(&dir.join(INTERACTIONS_FILE), &mut vocab)?;
        let conv = dir.join(CONVERSATIONS_FILE);
        let records = if conv.exists() {
            read_conversations(&conv, &vocab)?
        } else {
            Vec::new()
        };
        let data = Dataset {
            catalog,
            log,
            records,
            vocab,
        };
        data.validate()?;
        Ok(data)
    }

    /// Writes every file `load_dir` reads.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.save_inputs(dir)?;
        write_conversations(&dir.join(CONVERSATIONS_FILE), &self.records, &self.vocab)
    }

    /// Writes catalog, interactions and id maps, but no conversation file.
    pub fn save_inputs(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_catalog(&dir.join(CATALOG_FILE), &self.catalog, &self.vocab)?;
        write_interactions(&dir.join(INTERACTIONS_FILE), &self.log, &self.vocab)?;
        write_id_map(&dir.join(ITEM_MAP_FILE), &self.vocab.items)?;
        write_id_map(&dir.join(ATTRIBUTE_MAP_FILE), &self.vocab.attributes)?;
        write_id_map(&dir.join(USER_MAP_FILE), &self.vocab.users)
    }
}
