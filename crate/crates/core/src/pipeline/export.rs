//! CSV dump of the six subspace vectors per labeled user.

use std::io::Write;
use std::path::Path;

use crate::config::Variant;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{DropoutCtx, Tape};
use crate::scalar::Scalar;
use crate::subspace::Mode;

use super::train::Prepared;

/// Fixed leading columns; `h0 .. h{d-1}` follow.
pub const EXPORT_HEADER: [&str; 4] = ["user_id", "label", "mode", "space"];

pub fn export_hidden_to<T: Scalar, W: Write>(model: &Model<T>, data: &Prepared<T>, w: W) -> Result<usize> {
    if model.cfg.variant == Variant::Base {
        return Err(Error::Config("the BASE variant has no subspace representations".into()));
    }
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &data.inputs, &data.structure, None, &mut DropoutCtx::eval(), None)?;
    let bundle = fwd.bundle.expect("non-BASE variants project");
    let d = model.cfg.hidden;

    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = EXPORT_HEADER.iter().map(|s| s.to_string()).collect();
    header.extend((0..d).map(|i| format!("h{i}")));
    out.write_record(&header)?;

    let mut rows = 0;
    for i in data.graph.labeled() {
        let u = data.graph.user(i);
        let label = if u.label.expect("labeled") == crate::data::Label::Bot { "bot" } else { "human" };
        for (space, vars) in [("invariant", bundle.invariant), ("specific", bundle.specific)] {
            for m in Mode::ALL {
                let row = tape.value(vars[m.index()]).row(i);
                let mut rec = vec![u.id.clone(), label.into(), m.tag().into(), space.into()];
                rec.extend(row.iter().map(|x| format!("{:e}", x.as_f64())));
                out.write_record(&rec)?;
                rows += 1;
            }
        }
    }
    out.flush()?;
    Ok(rows)
}

/// Writes the export to `path` and returns the number of data rows.
pub fn export_hidden<T: Scalar>(model: &Model<T>, data: &Prepared<T>, path: impl AsRef<Path>) -> Result<usize> {
    let f = std::fs::File::create(path)?;
    export_hidden_to(model, data, std::io::BufWriter::new(f))
}
