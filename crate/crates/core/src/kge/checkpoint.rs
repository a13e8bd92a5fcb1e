//! Text checkpoints: a self-describing header followed by row-major blocks
//! of decimal floats written in shortest round-trip form.

use std::fmt::Write as _;
use std::path::Path;

use super::{KgeKind, KgeModel};
use crate::error::{Error, Result};
use crate::graph::KnowledgeGraph;

const MAGIC: &str = "kgsel-kge 1";

pub fn save_kge(model: &KgeModel, path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "{MAGIC}");
    let _ = writeln!(s, "kind {}", model.kind());
    let _ = writeln!(s, "dims {} {}", model.entity_dim(), model.relation_dim());
    let _ = writeln!(s, "entities {}", model.num_entities());
    let _ = writeln!(s, "relations {}", model.num_relations());
    let ro = model.num_entities() * model.entity_dim();
    let co = ro + model.num_relations() * model.relation_dim();
    write_block(&mut s, "entity", &model.params[..ro], model.entity_dim());
    write_block(&mut s, "relation", &model.params[ro..co], model.relation_dim());
    if model.kind() == KgeKind::TuckER {
        write_block(&mut s, "core", &model.params[co..], model.entity_dim());
    }
    crate::graph::write_file(path.as_ref(), &s)
}

fn write_block(s: &mut String, name: &str, data: &[f64], width: usize) {
    let _ = writeln!(s, "{name}");
    for row in data.chunks(width) {
        let line: Vec<String> = row.iter().map(|x| format!("{x}")).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Loads a checkpoint and, when `graph` is given, checks the entity and
/// relation counts against it.
pub fn load_kge(path: impl AsRef<Path>, graph: Option<&KnowledgeGraph>) -> Result<KgeModel> {
    let path = path.as_ref();
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = content.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad(format!("{}: missing `{MAGIC}` header", path.display())));
    }
    let mut field = |name: &str| -> Result<Vec<String>> {
        let line = lines.next().ok_or_else(|| bad(format!("missing `{name}` line")))?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(name) {
            return Err(bad(format!("expected `{name}`, found `{line}`")));
        }
        Ok(parts.map(str::to_string).collect())
    };
    let kind: KgeKind = field("kind")?.first().ok_or_else(|| bad("empty kind"))?.parse()?;
    let dims = field("dims")?;
    let num = |v: &str| v.parse::<usize>().map_err(|_| bad(format!("bad integer `{v}`")));
    let (de, dr) = match dims.as_slice() {
        [a, b] => (num(a)?, num(b)?),
        _ => return Err(bad("dims needs two values")),
    };
    let ne = num(field("entities")?.first().ok_or_else(|| bad("empty entities"))?)?;
    let nr = num(field("relations")?.first().ok_or_else(|| bad("empty relations"))?)?;
    if let Some(g) = graph {
        if g.num_entities() != ne || g.num_relations() != nr {
            return Err(bad(format!(
                "checkpoint has {ne} entities / {nr} relations, graph has {} / {}",
                g.num_entities(),
                g.num_relations()
            )));
        }
    }
    let mut model = KgeModel::zeros(kind, ne, nr, de, dr);
    let ro = ne * de;
    let co = ro + nr * dr;
    let mut blocks = vec![("entity", 0, ro, de), ("relation", ro, co, dr)];
    if kind == KgeKind::TuckER {
        blocks.push(("core", co, model.params.len(), de));
    }
    let mut rest = content.lines().skip(5);
    for (name, start, end, width) in blocks {
        if rest.next() != Some(name) {
            return Err(bad(format!("expected block `{name}`")));
        }
        let rows = (end - start) / width;
        for row in 0..rows {
            let line = rest
                .next()
                .ok_or_else(|| bad(format!("block `{name}` truncated at row {row}")))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|_| bad(format!("bad float `{v}` in `{name}` row {row}"))))
                .collect::<Result<_>>()?;
            if vals.len() != width {
                return Err(bad(format!("block `{name}` row {row}: {} values, expected {width}", vals.len())));
            }
            let o = start + row * width;
            model.params[o..o + width].copy_from_slice(&vals);
        }
    }
    if !crate::math::all_finite(&model.params) {
        return Err(Error::NonFinite(format!("{}: parameters", path.display())));
    }
    Ok(model)
}
