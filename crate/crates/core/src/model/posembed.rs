/// Fixed separable 3-D sinusoidal embedding of token `(t, h, w)`.
///
/// `dim` is split into three groups of `2f` entries with `f = dim / 6`; group
/// `g` holds `sin(p·ω_i)` for `i < f` followed by `cos(p·ω_i)`, where `p` is
/// the t, h or w coordinate and `ω_i = base^(-i/f)`. The `dim - 6f` trailing
/// entries are zero.
pub fn positional_embedding(t: usize, h: usize, w: usize, dim: usize, base: f64) -> Vec<f64> {
    let f = dim / 6;
    let mut out = vec![0.0; dim];
    for (g, pos) in [t, h, w].into_iter().enumerate() {
        let off = g * 2 * f;
        for i in 0..f {
            let omega = base.powf(-(i as f64) / f as f64);
            let a = pos as f64 * omega;
            out[off + i] = a.sin();
            out[off + f + i] = a.cos();
        }
    }
    out
}
