use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::Triple;
use crate::error::{Error, Result};

/// Suffix appended to a relation name to name its inverse.
pub const INVERSE_MARKER: &str = "^-1";

/// Dense name/id mapping for entities and relations.
///
/// Ids follow first appearance across the input files; `relation_names`
/// holds the raw relations followed by their inverses.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    entity_names: Vec<String>,
    relation_names: Vec<String>,
    entity_ids: HashMap<String, usize>,
    relation_ids: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from explicit raw name lists.
    pub fn from_names(entities: Vec<String>, relations: Vec<String>) -> Result<Self> {
        let mut v = Vocab::default();
        for e in entities {
            if v.entity_ids.insert(e.clone(), v.entity_names.len()).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate entity `{e}`")));
            }
            v.entity_names.push(e);
        }
        for r in relations {
            if r.contains(INVERSE_MARKER) {
                return Err(Error::InvalidArgument(format!(
                    "relation `{r}` contains the reserved inverse marker"
                )));
            }
            if v.relation_ids.insert(r.clone(), v.relation_names.len()).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate relation `{r}`")));
            }
            v.relation_names.push(r);
        }
        v.push_inverses();
        Ok(v)
    }

    fn push_inverses(&mut self) {
        let n = self.relation_names.len();
        for i in 0..n {
            let name = format!("{}{INVERSE_MARKER}", self.relation_names[i]);
            self.relation_ids.insert(name.clone(), n + i);
            self.relation_names.push(name);
        }
    }

    pub fn num_entities(&self) -> usize {
        self.entity_names.len()
    }

    /// Number of raw relations (half the length of [`Vocab::relation_names`]).
    pub fn num_relations(&self) -> usize {
        self.relation_names.len() / 2
    }

    pub fn entity_names(&self) -> &[String] {
        &self.entity_names
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relation_names
    }

    pub fn entity_id(&self, name: &str) -> Option<usize> {
        self.entity_ids.get(name).copied()
    }

    /// Looks up any relation id, inverse names included.
    pub fn relation_id(&self, name: &str) -> Option<usize> {
        self.relation_ids.get(name).copied()
    }

    /// Reads back the two files written by [`Vocab::export`].
    pub fn import(entities: &Path, relations: &Path) -> Result<Self> {
        let entity_names = read_vocab_file(entities)?;
        let mut relation_names = read_vocab_file(relations)?;
        let expected = relation_names.clone();
        relation_names.truncate(relation_names.len() / 2);
        let v = Vocab::from_names(entity_names, relation_names)?;
        if v.relation_names != expected {
            return Err(Error::InvalidArgument(format!(
                "{}: inverse relation names do not follow the raw ones",
                relations.display()
            )));
        }
        Ok(v)
    }

    /// Writes `id<TAB>name` lines for entities and relations to two files.
    pub fn export(&self, entities: &Path, relations: &Path) -> Result<()> {
        write_names(entities, &self.entity_names)?;
        write_names(relations, &self.relation_names)
    }
}

fn write_names(path: &Path, names: &[String]) -> Result<()> {
    let mut buf = Vec::new();
    for (i, n) in names.iter().enumerate() {
        writeln!(buf, "{i}\t{n}").expect("write to Vec");
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Writes raw triples as `head<TAB>relation<TAB>tail` name lines.
pub fn write_triples(path: &Path, triples: &[Triple], vocab: &Vocab) -> Result<()> {
    let mut buf = Vec::new();
    for t in triples {
        let name = |names: &[String], id: usize| {
            names.get(id).cloned().ok_or_else(|| Error::InvalidArgument(format!("id {id} not in vocabulary")))
        };
        writeln!(
            buf,
            "{}\t{}\t{}",
            name(&vocab.entity_names, t.head)?,
            name(&vocab.relation_names, t.relation)?,
            name(&vocab.entity_names, t.tail)?
        )
        .expect("write to Vec");
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads an `id<TAB>name` file written by [`Vocab::export`].
pub fn read_vocab_file(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut names = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let (id, name) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            found: 1,
        })?;
        if id.parse::<usize>().ok() != Some(names.len()) {
            return Err(Error::BadHeader(format!(
                "{}:{}: ids must be dense and ordered",
                path.display(),
                i + 1
            )));
        }
        names.push(name.to_owned());
    }
    Ok(names)
}

/// Iterates the `(line number, [head, relation, tail])` records of a triple file.
fn records<'a>(path: &Path, text: &'a str) -> impl Iterator<Item = Result<(usize, [String; 3])>> + 'a {
    let path = path.to_owned();
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim_end_matches('\r').is_empty())
        .map(move |(i, line)| {
            let fields: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
            match fields.as_slice() {
                [h, r, t] => Ok((i + 1, [h.to_string(), r.to_string(), t.to_string()])),
                _ => Err(Error::Parse {
                    path: path.clone(),
                    line: i + 1,
                    found: fields.len(),
                }),
            }
        })
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Assigns dense ids in first-appearance order over all files (in the given
/// order), then appends one inverse name per relation.
pub fn build_vocab<P: AsRef<Path>>(files: &[P]) -> Result<Vocab> {
    if files.is_empty() {
        return Err(Error::NoInput);
    }
    let mut v = Vocab::default();
    for file in files {
        let path = file.as_ref();
        let text = read(path)?;
        for rec in records(path, &text) {
            let (line, [h, r, t]) = rec?;
            for name in [&h, &r, &t] {
                if name.contains(INVERSE_MARKER) {
                    return Err(Error::ReservedName {
                        path: path.to_owned(),
                        line,
                        token: name.clone(),
                    });
                }
            }
            for e in [h, t] {
                if !v.entity_ids.contains_key(&e) {
                    v.entity_ids.insert(e.clone(), v.entity_names.len());
                    v.entity_names.push(e);
                }
            }
            if !v.relation_ids.contains_key(&r) {
                v.relation_ids.insert(r.clone(), v.relation_names.len());
                v.relation_names.push(r);
            }
        }
    }
    v.push_inverses();
    Ok(v)
}

/// Encodes a triple file with an existing vocabulary, preserving line order.
/// Inverse relation names are rejected; raw files only name raw relations.
pub fn load_triples(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Vec<Triple>> {
    let path = path.as_ref();
    let text = read(path)?;
    let n_r = vocab.num_relations();
    let unknown = |line, kind, token: &str| Error::UnknownToken {
        path: path.to_owned(),
        line,
        kind,
        token: token.to_owned(),
    };
    records(path, &text)
        .map(|rec| {
            let (line, [h, r, t]) = rec?;
            let head = vocab.entity_id(&h).ok_or_else(|| unknown(line, "entity", &h))?;
            let tail = vocab.entity_id(&t).ok_or_else(|| unknown(line, "entity", &t))?;
            let relation = vocab
                .relation_id(&r)
                .filter(|&id| id < n_r)
                .ok_or_else(|| unknown(line, "relation", &r))?;
            Ok(Triple::new(head, relation, tail))
        })
        .collect()
}
