//! `id,c0,c1,...` multi-hot label files.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabelTable {
    pub classes: Vec<String>,
    rows: Vec<(String, Vec<u8>)>,
    index: HashMap<String, usize>,
}

impl LabelTable {
    pub fn new(classes: Vec<String>) -> Self {
        LabelTable {
            classes,
            ..Default::default()
        }
    }

    pub fn insert(&mut self, id: String, flags: Vec<u8>) -> Result<()> {
        if flags.len() != self.classes.len() {
            return Err(Error::Contract(format!(
                "label row for `{id}` has {} flags, expected {}",
                flags.len(),
                self.classes.len()
            )));
        }
        if self.index.contains_key(&id) {
            return Err(Error::Contract(format!("duplicate id `{id}`")));
        }
        self.index.insert(id.clone(), self.rows.len());
        self.rows.push((id, flags));
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[u8]> {
        self.index.get(id).map(|&i| self.rows[i].1.as_slice())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, &[u8])> {
        self.rows.iter().map(|(id, f)| (id.as_str(), f.as_slice()))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id");
        for c in &self.classes {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (id, flags) in &self.rows {
            out.push_str(id);
            for f in flags {
                out.push(',');
                out.push(if *f == 1 { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }
}

pub fn parse_labels_csv(text: &str) -> Result<LabelTable> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Err(Error::Parse {
            line: 1,
            detail: "missing header".into(),
        });
    };
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols[0] != "id" || cols.len() < 2 {
        return Err(Error::Parse {
            line: 1,
            detail: format!("header must be `id,<class>,...`, got `{header}`"),
        });
    }
    let mut table = LabelTable::new(cols[1..].iter().map(|s| s.to_string()).collect());
    for (i, line) in lines {
        let lineno = i + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse {
                line: lineno,
                detail: format!("expected {} fields, found {}", cols.len(), fields.len()),
            });
        }
        if fields[0].is_empty() {
            return Err(Error::Parse {
                line: lineno,
                detail: "missing id".into(),
            });
        }
        let flags = fields[1..]
            .iter()
            .map(|f| match *f {
                "0" => Ok(0),
                "1" => Ok(1),
                other => Err(Error::Parse {
                    line: lineno,
                    detail: format!("flag `{other}` is not 0 or 1"),
                }),
            })
            .collect::<Result<Vec<u8>>>()?;
        table
            .insert(fields[0].to_string(), flags)
            .map_err(|e| Error::Parse {
                line: lineno,
                detail: e.to_string(),
            })?;
    }
    Ok(table)
}

pub fn load_labels_csv(path: &Path) -> Result<LabelTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels_csv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn single_row() {
        let t = parse_labels_csv("id,c0,c1\nimg1,1,0").unwrap();
        assert_eq!(t.get("img1"), Some(&[1u8, 0][..]));
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn errors_carry_line_numbers() {
        match parse_labels_csv("id,c0,c1\na,1,0\nb,2,0\n") {
            Err(Error::Parse { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_labels_csv("id,c0,c1\na,1\n") {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_labels_csv("id,c0\n,1\n") {
            Err(Error::Parse { line: 2, detail }) => assert!(detail.contains("id")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn thousand_rows_match_split_oracle() {
        let mut r = rng::seeded(9);
        let mut text = String::from("id,c0,c1,c2\n");
        for i in 0..1000 {
            let f: Vec<u8> = (0..3).map(|_| r.gen_range(0..2)).collect();
            text.push_str(&format!("s{i},{},{},{}\n", f[0], f[1], f[2]));
        }
        let t = parse_labels_csv(&text).unwrap();
        assert_eq!(t.len(), 1000);
        for line in text.lines().skip(1) {
            let parts: Vec<&str> = line.split(',').collect();
            let want: Vec<u8> = parts[1..].iter().map(|p| p.parse().unwrap()).collect();
            assert_eq!(t.get(parts[0]).unwrap(), want.as_slice());
        }
        assert_eq!(parse_labels_csv(&t.to_csv()).unwrap(), t);
    }
}
