//! JSON rendering of instruction programs, used for golden-file tests.

use mupdit_core::tp::{Instr, PsiFn, TpProgram};
use serde_json::{json, Value};

fn psi_json(psi: &PsiFn) -> Value {
    match psi {
        PsiFn::Normalize { eps } => json!({ "name": psi.name(), "eps": eps }),
        _ => json!({ "name": psi.name() }),
    }
}

/// Serialize a program as a JSON instruction list.
pub fn program_to_json(program: &TpProgram) -> Value {
    let instrs: Vec<Value> = program
        .instrs
        .iter()
        .map(|instr| match instr {
            Instr::Avg { dst, src } => json!({ "op": "avg", "dst": dst, "src": src }),
            Instr::MatMul { dst, mat, vec, transpose } => json!({
                "op": "matmul", "dst": dst, "mat": mat, "vec": vec, "transpose": transpose
            }),
            Instr::OuterNonlin { dst, psi, vecs, scalars, order } => json!({
                "op": "outer_nonlin", "dst": dst, "psi": psi_json(psi),
                "vecs": vecs, "scalars": scalars, "order": order
            }),
            Instr::ScalarFn { dst, psi, args } => json!({
                "op": "scalar_fn", "dst": dst, "psi": psi.name(), "args": args
            }),
        })
        .collect();
    json!({ "instructions": instrs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use mupdit_core::tp::build_dit_program;

    #[test]
    fn serialization_is_stable() {
        let program = build_dit_program(0.0);
        let a = serde_json::to_string_pretty(&program_to_json(&program)).unwrap();
        let b = serde_json::to_string_pretty(&program_to_json(&program)).unwrap();
        assert_eq!(a, b);
        assert!(a.contains("\"op\": \"avg\""));
        assert!(a.contains("mul_triple"));
    }
}
