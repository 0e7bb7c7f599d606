//! The token-level, sentence-level and gated hybrid losses on a toy batch,
//! and the gate drifting toward the cheaper loss.
//!
//!     cargo run --example distill_losses

use kdlab::distill::{
    hybrid_loss, sentence_level_loss_per_sequence, token_level_loss_per_sequence, train_gate_on_constant_losses,
    truncate_top_k, GateMode, GateState,
};
use kdlab::tensor::{Graph, Tensor};

fn main() -> kdlab::Result<()> {
    let (b, m, v) = (2, 3, 6);
    let mut g = Graph::<f64>::new();
    let logits = Tensor::from_fn(vec![b, m, v], |i| ((i * 7) % 5) as f64 * 0.3);
    let x = g.leaf(logits)?;
    let student = g.log_softmax(x)?;

    // Teacher: sharp distributions, truncated to the top 3 ids.
    let mut dists = Vec::new();
    for r in 0..b * m {
        let raw: Vec<f64> = (0..v).map(|k| if k == 4 + r % 2 { 0.7 } else { 0.06 }).collect();
        let sparse = truncate_top_k(&raw, 3);
        let mut row = vec![0.0; v];
        for (id, p) in sparse {
            row[id] = f64::from(p);
        }
        dists.extend(row);
    }
    let teacher = Tensor::new(vec![b, m, v], dists)?;
    let pad = vec![false, false, false, false, false, true];
    let pseudo = vec![4, 5, 2, 5, 2, 0];

    let tok = token_level_loss_per_sequence(&mut g, student, &teacher, &pad)?;
    let sen = sentence_level_loss_per_sequence(&mut g, student, &pseudo, &pad)?;
    println!("token-level per sequence:    {:.4?}", g.value(tok).data());
    println!("sentence-level per sequence: {:.4?}", g.value(sen).data());

    let gate = GateState::new(GateMode::Scalar, 1);
    let gates = gate.values(&mut g, None, b, 0)?;
    println!("initial gate: {:.4}", g.value(gates).data()[0]);
    let hybrid = hybrid_loss(&mut g, gates, tok, sen)?;
    g.backward(hybrid)?;
    println!("hybrid loss: {:.4}", g.value(hybrid).data()[0]);

    let trace = train_gate_on_constant_losses(1.0, 2.0, 100, 1.0)?;
    for step in [0, 10, 25, 50, 100] {
        println!("gate after {step:>3} steps of L_tok=1, L_sent=2: {:.4}", trace[step]);
    }
    Ok(())
}
