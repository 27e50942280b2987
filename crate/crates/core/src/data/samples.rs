use std::io::{self, Write};

use super::{DataError, Dataset, FeatureSchema, Field, GroupKind, Sample, SparseVector};

/// Parses `<label>\t<field1>\t...\t<fieldK>` lines. Blank lines are skipped.
pub fn parse_samples<'a, I>(lines: I, schema: &FeatureSchema) -> Result<Dataset, DataError>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut samples = Vec::new();
    for (i, line) in lines.into_iter().enumerate() {
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        samples.push(parse_line(line, schema).map_err(|msg| DataError::Sample { line: i + 1, msg })?);
    }
    Ok(Dataset {
        schema: schema.clone(),
        samples,
    })
}

fn parse_line(line: &str, schema: &FeatureSchema) -> Result<Sample, String> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != schema.len() + 1 {
        return Err(format!(
            "wrong field count: expected {}, got {}",
            schema.len(),
            cols.len() - 1
        ));
    }
    let label = match cols[0].trim() {
        "0" => 0,
        "1" => 1,
        other => return Err(format!("label must be 0 or 1, got {other:?}")),
    };
    let mut fields = Vec::with_capacity(schema.len());
    for (col, group) in cols[1..].iter().zip(schema.groups()) {
        let field = match group.kind {
            GroupKind::Sparse => {
                let mut pairs = Vec::new();
                for tok in col.split_whitespace() {
                    let (i, v) = tok
                        .split_once(':')
                        .ok_or_else(|| format!("expected idx:val, got {tok:?}"))?;
                    let idx: u64 = i.parse().map_err(|_| format!("bad index {i:?}"))?;
                    let val = parse_finite(v)?;
                    if idx >= group.dim as u64 {
                        return Err(format!(
                            "index out of range: {idx} >= {} in group {}",
                            group.dim, group.name
                        ));
                    }
                    pairs.push((idx as u32, val));
                }
                Field::Sparse(SparseVector::from_pairs(pairs)?)
            }
            GroupKind::Dense => {
                let vals = if col.trim().is_empty() {
                    Vec::new()
                } else {
                    col.split(',').map(|t| parse_finite(t.trim())).collect::<Result<Vec<_>, _>>()?
                };
                if vals.len() != group.dim {
                    return Err(format!(
                        "group {} expects {} values, got {}",
                        group.name,
                        group.dim,
                        vals.len()
                    ));
                }
                Field::Dense(vals)
            }
        };
        fields.push(field);
    }
    Ok(Sample { label, fields })
}

fn parse_finite(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("bad number {s:?}"))?;
    if !v.is_finite() {
        return Err(format!("non-finite value {s:?}"));
    }
    Ok(v)
}

pub fn write_samples<W: Write>(ds: &Dataset, mut out: W) -> io::Result<()> {
    let mut line = String::new();
    for s in &ds.samples {
        line.clear();
        format_sample(s, &mut line);
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    Ok(())
}

pub fn format_samples(ds: &Dataset) -> String {
    let mut out = String::new();
    for s in &ds.samples {
        format_sample(s, &mut out);
        out.push('\n');
    }
    out
}

fn format_sample(s: &Sample, out: &mut String) {
    use std::fmt::Write as _;
    let _ = write!(out, "{}", s.label);
    for f in &s.fields {
        out.push('\t');
        match f {
            Field::Sparse(sv) => {
                for (k, (i, v)) in sv.iter().enumerate() {
                    if k > 0 {
                        out.push(' ');
                    }
                    let _ = write!(out, "{i}:{v}");
                }
            }
            Field::Dense(vals) => {
                for (k, v) in vals.iter().enumerate() {
                    if k > 0 {
                        out.push(',');
                    }
                    let _ = write!(out, "{v}");
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::parse_schema;
    use proptest::prelude::*;

    fn schema() -> FeatureSchema {
        parse_schema("query sparse 49292 embed\ncounts dense 5 raw\n").unwrap()
    }

    #[test]
    fn parses_sparse_and_dense_fields() {
        let ds = parse_samples(["1\t3:1 7:2\t0.5,0.1,0,0,0"], &schema()).unwrap();
        let s = &ds.samples[0];
        assert_eq!(s.label, 1);
        match &s.fields[0] {
            Field::Sparse(sv) => {
                assert_eq!(sv.indices(), &[3, 7]);
                assert_eq!(sv.values(), &[1.0, 2.0]);
            }
            _ => panic!("expected sparse"),
        }
        assert_eq!(s.fields[1], Field::Dense(vec![0.5, 0.1, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn empty_sparse_field_is_allowed() {
        let ds = parse_samples(["0\t\t0,0,0,0,0"], &schema()).unwrap();
        assert_eq!(ds.samples[0].label, 0);
        assert_eq!(ds.samples[0].fields[0], Field::Sparse(SparseVector::default()));
        assert_eq!(ds.samples[0].fields[1], Field::Dense(vec![0.0; 5]));
    }

    #[test]
    fn index_at_dim_is_out_of_range() {
        let err = parse_samples(["1\t2:1\t0,0,0,0,0", "1\t49292:1\t0,0,0,0,0"], &schema()).unwrap_err();
        match err {
            DataError::Sample { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("index out of range"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_field_count_and_non_finite() {
        assert!(matches!(
            parse_samples(["1\t3:1"], &schema()).unwrap_err(),
            DataError::Sample { line: 1, .. }
        ));
        let err = parse_samples(["1\t3:1\tNaN,0,0,0,0"], &schema()).unwrap_err();
        assert!(err.to_string().contains("non-finite"), "{err}");
        let err = parse_samples(["1\t3:inf\t0,0,0,0,0"], &schema()).unwrap_err();
        assert!(err.to_string().contains("non-finite"), "{err}");
    }

    #[test]
    fn blank_lines_are_skipped_and_order_kept() {
        let ds = parse_samples(["0\t\t1,0,0,0,0", "", "1\t\t2,0,0,0,0"], &schema()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.samples[1].label, 1);
    }

    fn arb_dataset() -> impl Strategy<Value = Dataset> {
        let sparse = proptest::collection::btree_map(0u32..50, 0.5f64..100.0, 0..6);
        let dense = proptest::collection::vec(-1e6f64..1e6, 3);
        let sample = (0u8..2, sparse, dense).prop_map(|(label, sp, de)| Sample {
            label,
            fields: vec![
                Field::Sparse(SparseVector::from_pairs(sp.into_iter().collect()).unwrap()),
                Field::Dense(de),
            ],
        });
        proptest::collection::vec(sample, 0..20).prop_map(|samples| Dataset {
            schema: parse_schema("tok sparse 50 embed\nnum dense 3 raw").unwrap(),
            samples,
        })
    }

    proptest! {
        #[test]
        fn format_then_parse_is_identity(ds in arb_dataset()) {
            let text = format_samples(&ds);
            let back = parse_samples(text.lines(), &ds.schema).unwrap();
            prop_assert_eq!(back, ds);
        }
    }
}
