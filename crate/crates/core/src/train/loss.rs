use crate::autodiff::{AutodiffError, Graph, Var};
use crate::vit::SwitchVars;

/// Cross-entropy plus L1 penalties on the switch masks. A frozen mask adds
/// nothing to the loss.
pub fn privit_loss(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    switches: &SwitchVars,
    frozen: (bool, bool),
    lambda_g: f64,
    lambda_s: f64,
) -> Result<Var, AutodiffError> {
    let mut loss = g.cross_entropy(logits, labels)?;
    for (mask, is_frozen, lambda) in [
        (switches.gelu, frozen.0, lambda_g),
        (switches.softmax, frozen.1, lambda_s),
    ] {
        if is_frozen || lambda == 0.0 {
            continue;
        }
        let l1 = g.abs(mask);
        let l1 = g.sum(l1);
        let l1 = g.scale(l1, lambda);
        loss = g.add(loss, l1)?;
    }
    Ok(loss)
}

/// `T² · KL(softmax(teacher/T) ‖ softmax(student/T))`, averaged over the
/// batch. `teacher` should be a constant.
pub fn kd_loss(
    g: &mut Graph,
    student: Var,
    teacher: Var,
    temperature: f64,
) -> Result<Var, AutodiffError> {
    if g.shape(student) != g.shape(teacher) {
        return Err(AutodiffError::ShapeMismatch {
            op: "kd_loss",
            left: g.shape(student).to_vec(),
            right: g.shape(teacher).to_vec(),
        });
    }
    if !(temperature > 0.0) {
        return Err(AutodiffError::InvalidArgument {
            op: "kd_loss",
            msg: format!("temperature must be positive, got {temperature}"),
        });
    }
    let batch = g.shape(student)[0] as f64;
    let inv_t = 1.0 / temperature;
    let s = g.scale(student, inv_t);
    let t = g.scale(teacher, inv_t);
    let log_p_s = g.log_softmax(s)?;
    let log_p_t = g.log_softmax(t)?;
    let p_t = g.softmax(t)?;
    let diff = g.sub(log_p_t, log_p_s)?;
    let kl = g.mul(p_t, diff)?;
    let kl = g.sum(kl);
    Ok(g.scale(kl, temperature * temperature / batch))
}
