//! Convolutional encoder/decoder and the future-branch cross-attention.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use swm_autograd::{AttnSpec, Bound, Float, ParamStore, Tape, Tensor, Var};

use crate::Role;

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct NetShape {
    pub c1: usize,
    pub c2: usize,
    pub groups: usize,
    pub embed_dim: usize,
}

pub(crate) fn prefix(role: Role) -> &'static str {
    match role {
        Role::Observed => "obs",
        Role::Future => "fut",
    }
}

fn uniform_tensor<F: Float, R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    Tensor::new(shape, (0..n).map(|_| F::lit(dist.sample(rng))).collect())
}

fn add_conv<F: Float, R: Rng>(p: &mut ParamStore<F>, name: &str, o: usize, i: usize, k: usize, rng: &mut R) {
    let bound = 1.0 / ((i * k * k) as f64).sqrt();
    p.insert(format!("{name}.w"), uniform_tensor(&[o, i, k, k], bound, rng));
    p.insert(format!("{name}.b"), uniform_tensor(&[o], bound, rng));
}

fn add_norm<F: Float>(p: &mut ParamStore<F>, name: &str, c: usize) {
    p.insert(format!("{name}.g"), Tensor::full(&[c], F::one()));
    p.insert(format!("{name}.b"), Tensor::zeros(&[c]));
}

/// Registers encoder and decoder parameters for one role.
pub fn init_branch<F: Float, R: Rng>(p: &mut ParamStore<F>, role: Role, s: NetShape, rng: &mut R) {
    let r = prefix(role);
    let e = s.embed_dim;
    add_conv(p, &format!("{r}.enc.c0"), s.c1, 3, 3, rng);
    add_norm(p, &format!("{r}.enc.n0"), s.c1);
    add_conv(p, &format!("{r}.enc.c1"), s.c2, s.c1, 3, rng);
    add_norm(p, &format!("{r}.enc.n1"), s.c2);
    add_conv(p, &format!("{r}.enc.c2"), s.c2, s.c2, 3, rng);
    add_norm(p, &format!("{r}.enc.n2"), s.c2);
    add_conv(p, &format!("{r}.enc.c3"), e, s.c2, 1, rng);

    add_conv(p, &format!("{r}.dec.c0"), s.c2, e, 3, rng);
    add_norm(p, &format!("{r}.dec.n0"), s.c2);
    add_conv(p, &format!("{r}.dec.c1"), s.c1, s.c2, 3, rng);
    add_norm(p, &format!("{r}.dec.n1"), s.c1);
    add_conv(p, &format!("{r}.dec.c2"), s.c1, s.c1, 3, rng);
    add_norm(p, &format!("{r}.dec.n2"), s.c1);
    add_conv(p, &format!("{r}.dec.c3"), 3, s.c1, 3, rng);
}

pub fn init_cross_attention<F: Float, R: Rng>(p: &mut ParamStore<F>, embed_dim: usize, rng: &mut R) {
    let bound = 1.0 / (embed_dim as f64).sqrt();
    for m in ["wq", "wk", "wv", "wo"] {
        p.insert(format!("fut.xattn.{m}"), uniform_tensor(&[embed_dim, embed_dim], bound, rng));
    }
}

fn conv<F: Float>(t: &mut Tape<F>, b: &Bound, name: &str, x: Var, stride: usize, pad: usize) -> Var {
    t.conv2d(x, b.get(&format!("{name}.w")), Some(b.get(&format!("{name}.b"))), stride, pad)
}

fn norm_act<F: Float>(t: &mut Tape<F>, b: &Bound, name: &str, x: Var, groups: usize) -> Var {
    let y = t.group_norm(x, b.get(&format!("{name}.g")), b.get(&format!("{name}.b")), groups, NORM_EPS);
    t.silu(y)
}

/// `(n, 3, H, W)` pixels in `[-1, 1]` to `(n, E, H/4, W/4)` latents.
pub fn encode<F: Float>(t: &mut Tape<F>, b: &Bound, role: Role, groups: usize, x: Var) -> Var {
    let r = prefix(role);
    let h = conv(t, b, &format!("{r}.enc.c0"), x, 1, 1);
    let h = norm_act(t, b, &format!("{r}.enc.n0"), h, groups);
    let h = conv(t, b, &format!("{r}.enc.c1"), h, 2, 1);
    let h = norm_act(t, b, &format!("{r}.enc.n1"), h, groups);
    let h = conv(t, b, &format!("{r}.enc.c2"), h, 2, 1);
    let h = norm_act(t, b, &format!("{r}.enc.n2"), h, groups);
    conv(t, b, &format!("{r}.enc.c3"), h, 1, 0)
}

/// `(n, E, h, w)` latents to `(n, 3, 4h, 4w)` pixels.
pub fn decode<F: Float>(t: &mut Tape<F>, b: &Bound, role: Role, groups: usize, z: Var) -> Var {
    let r = prefix(role);
    let h = conv(t, b, &format!("{r}.dec.c0"), z, 1, 1);
    let h = norm_act(t, b, &format!("{r}.dec.n0"), h, groups);
    let h = t.upsample2x(h);
    let h = conv(t, b, &format!("{r}.dec.c1"), h, 1, 1);
    let h = norm_act(t, b, &format!("{r}.dec.n1"), h, groups);
    let h = t.upsample2x(h);
    let h = conv(t, b, &format!("{r}.dec.c2"), h, 1, 1);
    let h = norm_act(t, b, &format!("{r}.dec.n2"), h, groups);
    conv(t, b, &format!("{r}.dec.c3"), h, 1, 1)
}

/// Adds `CrossAttn(f, context)` to the future latents `f` (`(n, E, B, B)`).
///
/// `contexts[i]` holds the context cells (`m_i x E`) attended by sample `i`.
pub fn cross_attend<F: Float, R: Rng>(
    t: &mut Tape<F>,
    b: &Bound,
    heads: usize,
    f: Var,
    contexts: &[Tensor<F>],
    rng: &mut R,
) -> Var {
    let (n, _e, hh, ww) = t.value(f).dims4();
    assert_eq!(contexts.len(), n, "one context per future sample required");
    let cells = t.to_cells(f);
    let per = hh * ww;
    let (wq, wk, wv, wo) = (b.get("fut.xattn.wq"), b.get("fut.xattn.wk"), b.get("fut.xattn.wv"), b.get("fut.xattn.wo"));
    let mut acc: Option<Var> = None;
    for (i, ctx) in contexts.iter().enumerate() {
        let rows: Vec<usize> = (i * per..(i + 1) * per).collect();
        let qi = t.gather_rows(cells, &rows);
        let q = t.linear(qi, wq, None);
        let c = t.constant(ctx.clone());
        let k = t.linear(c, wk, None);
        let v = t.linear(c, wv, None);
        let limits = vec![ctx.dims2().0; per];
        let a = t.attention(q, k, v, &AttnSpec { heads, limits: &limits, dropout: 0.0 }, rng);
        let o = t.linear(a, wo, None);
        let placed = t.scatter_rows(o, &rows, n * per);
        acc = Some(match acc {
            Some(s) => t.add(s, placed),
            None => placed,
        });
    }
    let delta = acc.expect("at least one sample");
    let sum = t.add(cells, delta);
    t.from_cells(sum, n, hh, ww)
}
