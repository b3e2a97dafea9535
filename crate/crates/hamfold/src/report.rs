//! Machine-readable reports: JSON with stable key order (struct declaration
//! order) and floats at 17 significant digits so identical runs produce
//! byte-identical output, plus the trajectory CSV format.

use std::io;

use serde::Serialize;

use crate::dynamics::Trajectory;
use crate::error::Result;
use crate::model::{LagrangianSystem, Partition};

/// Compact JSON formatter printing every float with 17 significant digits
/// (round-trip exact for f64).
struct F17;

impl serde_json::ser::Formatter for F17 {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        write!(writer, "{value:.16e}")
    }
}

/// Serialize to deterministic JSON.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, F17);
    value
        .serialize(&mut ser)
        .map_err(|e| crate::error::Error::Internal(format!("serialization failed: {e}")))?;
    String::from_utf8(out)
        .map_err(|e| crate::error::Error::Internal(format!("non-utf8 report: {e}")))
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Trajectory CSV: `t,<coordinate labels>,p1..p<np>,H0,residual,rF`.
/// Coordinates appear in model-file order.
pub fn trajectory_csv(sys: &LagrangianSystem, partition: &Partition, traj: &Trajectory) -> String {
    let mut out = String::new();
    out.push('t');
    for label in &sys.coord_labels {
        out.push(',');
        out.push_str(label);
    }
    for i in 1..=partition.n_p {
        out.push_str(&format!(",p{i}"));
    }
    out.push_str(",H0,residual,rF\n");
    for ((t, state), diag) in traj.times.iter().zip(&traj.states).zip(&traj.diagnostics) {
        out.push_str(&fmt17(*t));
        let q = partition.to_original(&state.q_c, &state.q_nc);
        for v in q {
            out.push(',');
            out.push_str(&fmt17(v));
        }
        for v in &state.p {
            out.push(',');
            out.push_str(&fmt17(*v));
        }
        out.push(',');
        out.push_str(&fmt17(diag.h0));
        out.push(',');
        out.push_str(&fmt17(diag.eom_residual));
        out.push_str(&format!(",{}\n", diag.r_f));
    }
    out
}
