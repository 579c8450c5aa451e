use super::network::Param;

/// One momentum SGD step with coupled weight decay:
/// `buf = momentum * buf + grad + weight_decay * param; param -= lr * buf`.
///
/// Decay applies to every tensor, biases included.
pub fn sgd_step(params: &mut [&mut Param], grads: &[&[f64]], lr: f64, momentum: f64, weight_decay: f64) {
    assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
    for (p, g) in params.iter_mut().zip(grads) {
        assert_eq!(p.value.len(), g.len(), "gradient shape mismatch");
        for ((v, b), &gi) in p.value.iter_mut().zip(p.buf.iter_mut()).zip(g.iter()) {
            *b = momentum * *b + gi + weight_decay * *v;
            *v -= lr * *b;
        }
    }
}
