//! Converters from the common MIL benchmark distributions to bag CSV.
//!
//! Supported inputs:
//! - `label-first`: headerless `label,bag_id,f0,...` rows, one per instance.
//! - `c45`: the UCI `clean1.data` / `clean2.data` layout,
//!   `molecule,conformation,f1,...,fD,class.`

use std::collections::HashMap;
use std::io::BufRead;

use clap::ValueEnum;

use mildrop::data::{Bag, Dataset};
use mildrop::tensor::Matrix;
use mildrop::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SourceFormat {
    /// Guess from the first line.
    Auto,
    LabelFirst,
    C45,
}

fn parse_label(field: &str, line: usize) -> Result<u8> {
    let t = field.trim().trim_end_matches('.');
    match t.parse::<f64>() {
        Ok(v) if v == 0.0 => Ok(0),
        Ok(v) if v == 1.0 => Ok(1),
        _ => Err(Error::Parse {
            line,
            msg: format!("label must be 0 or 1, got {field:?}"),
        }),
    }
}

fn parse_features(fields: &[&str], line: usize) -> Result<Vec<f64>> {
    fields
        .iter()
        .enumerate()
        .map(|(j, f)| {
            f.trim().parse::<f64>().map_err(|_| Error::Parse {
                line,
                msg: format!("feature {j} is not a number: {f:?}"),
            })
        })
        .collect()
}

fn detect(first: &str) -> SourceFormat {
    let head = first.split(',').next().unwrap_or("").trim();
    if head.parse::<f64>().is_ok() {
        SourceFormat::LabelFirst
    } else {
        SourceFormat::C45
    }
}

/// Reads either supported layout into a dataset.
pub fn convert<R: BufRead>(reader: R, format: SourceFormat, provenance: &str) -> Result<Dataset> {
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut bags: Vec<(String, u8, Vec<f64>)> = Vec::new();
    let mut dim: Option<usize> = None;
    let mut format = format;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if format == SourceFormat::Auto {
            format = detect(line);
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            return Err(Error::Parse {
                line: line_no,
                msg: "too few fields".into(),
            });
        }
        let (id, label, feats) = match format {
            SourceFormat::LabelFirst => (
                fields[1].trim().to_string(),
                parse_label(fields[0], line_no)?,
                parse_features(&fields[2..], line_no)?,
            ),
            SourceFormat::C45 => (
                fields[0].trim().to_string(),
                parse_label(fields[fields.len() - 1], line_no)?,
                parse_features(&fields[2..fields.len() - 1], line_no)?,
            ),
            SourceFormat::Auto => unreachable!("resolved above"),
        };
        match dim {
            None => dim = Some(feats.len()),
            Some(d) if d != feats.len() => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected {d} features, found {}", feats.len()),
                })
            }
            _ => {}
        }
        match index.get(&id) {
            Some(&slot) => {
                if bags[slot].1 != label {
                    return Err(Error::Integrity(format!(
                        "bag {id:?} has rows with different labels (line {line_no})"
                    )));
                }
                bags[slot].2.extend(feats);
            }
            None => {
                index.insert(id.clone(), bags.len());
                bags.push((id, label, feats));
            }
        }
    }
    let dim = dim.ok_or_else(|| Error::Config("input has no rows".into()))?;
    let bags = bags
        .into_iter()
        .map(|(id, label, data)| {
            Ok(Bag {
                id,
                label,
                instances: Matrix::new(data.len() / dim, dim, data)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(bags, provenance)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_first_rows() {
        let text = "1,7,1,2\n1,7,3,4\n0,8,5,6\n";
        let d = convert(text.as_bytes(), SourceFormat::Auto, "t").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.bags[0].id, "7");
        assert_eq!(d.bags[0].instances.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(d.bags[1].label, 0);
    }

    #[test]
    fn c45_rows() {
        let text = "MUSK-188,188_1+1,46,-108,1.\nMUSK-188,188_1+2,41,-188,1.\nNON-MUSK-j146,j146_2+1,40,-173,0.\n";
        let d = convert(text.as_bytes(), SourceFormat::Auto, "t").unwrap();
        assert_eq!(d.dim, 2);
        assert_eq!(d.bags[0].id, "MUSK-188");
        assert_eq!(d.bags[0].len(), 2);
        assert_eq!(d.num_positive(), 1);
    }

    #[test]
    fn conflicting_labels_rejected() {
        let text = "1,7,1,2\n0,7,3,4\n";
        assert!(matches!(
            convert(text.as_bytes(), SourceFormat::LabelFirst, "t"),
            Err(Error::Integrity(_))
        ));
    }
}
