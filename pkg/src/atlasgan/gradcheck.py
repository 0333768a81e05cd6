"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor, grad, precision


class NonFiniteError(FloatingPointError):
    pass


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def numeric_grad(fn: Callable[[Tensor], Tensor], x: np.ndarray, eps: float) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    g = out.reshape(-1)
    # grad stays enabled: fn may itself take gradients (R1-style penalties)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(fn(Tensor(x)).data)
        flat[i] = orig - eps
        fm = float(fn(Tensor(x)).data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite function value perturbing coordinate {tuple(int(k) for k in np.unravel_index(i, x.shape))}")
        g[i] = (fp - fm) / (2 * eps)
    return out


def grad_check(fn: Callable[[Tensor], Tensor], x, eps: float = 1e-3, dtype=np.float64,
               return_grads: bool = False):
    """Max relative error between the analytic and central-difference gradient.

    ``fn`` maps a tensor to a scalar tensor.  Both sides are evaluated at
    ``dtype`` (float64 by default, so rounding noise does not swamp the
    difference quotient).
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    with precision(dtype):
        xt = Tensor(x.astype(dtype), requires_grad=True)
        y = fn(xt)
        if y.data.size != 1:
            raise ValueError(f"grad_check: function must be scalar-valued, got {y.shape}")
        (ga,) = grad(y, [xt])
        gn = numeric_grad(fn, x.astype(dtype), eps)
    err = relative_error(ga.data, gn)
    if return_grads:
        return err, ga.data, gn
    return err


# -- the full suite ------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def ok(self):
        return np.isfinite(self.error) and self.error < self.tol


def _cases(rng):
    """Yield (name, fn, x, tol, eps).  Every fn ends in a random projection so
    all output coordinates matter."""
    from . import geometry, layers, networks
    from . import objectives as O
    from . import tensor as T

    def proj(shape):
        return Tensor(rng.standard_normal(shape))

    def unary(name, op, shape, pos=False, tol=1e-3, eps=1e-6):
        x = rng.standard_normal(shape)
        if pos:
            x = np.abs(x) + 0.5
        w = None

        def fn(t):
            nonlocal w
            y = op(t)
            if w is None:
                w = proj(y.shape)
            return T.sum_(T.mul(y, w))
        return name, fn, x, tol, eps

    def binary(name, op, sa, sb, which, pos_b=False):
        a = rng.standard_normal(sa)
        b = rng.standard_normal(sb)
        if pos_b:
            b = np.abs(b) + 0.5
        w = None

        def fn(t):
            nonlocal w
            y = op(t, Tensor(b)) if which == 0 else op(Tensor(a), t)
            if w is None:
                w = proj(y.shape)
            return T.sum_(T.mul(y, w))
        return f"{name}[{'ab'[which]}]", fn, (a if which == 0 else b), 1e-3, 1e-6

    # primitives
    for nm, op in (("add", T.add), ("sub", T.sub), ("mul", T.mul)):
        yield binary(nm, op, (3, 4), (1, 4), 0)
        yield binary(nm, op, (3, 4), (1, 4), 1)
    yield binary("div", T.div, (3, 4), (3, 4), 0, pos_b=True)
    yield binary("div", T.div, (3, 4), (3, 4), 1, pos_b=True)
    yield binary("matmul", T.matmul, (3, 5), (5, 2), 0)
    yield binary("matmul", T.matmul, (3, 5), (5, 2), 1)
    yield unary("square", T.square, (2, 5))
    yield unary("sqrt", T.sqrt, (2, 5), pos=True)
    yield unary("tanh", T.tanh, (2, 5))
    yield unary("leaky_relu", lambda t: T.leaky_relu(t, 0.2), (2, 5))
    yield unary("sum_axis", lambda t: T.sum_(t, axis=1), (3, 4, 2))
    yield unary("mean", lambda t: T.mean(T.square(t)), (3, 4))
    yield unary("reshape", lambda t: T.reshape(t, (4, 6)), (2, 3, 4))
    yield unary("transpose", lambda t: T.transpose(t, (2, 0, 1)), (2, 3, 4))
    yield unary("broadcast_to", lambda t: T.BroadcastTo.apply(t, shape=(3, 4, 5)), (1, 4, 1))
    yield unary("sum_to", lambda t: T.SumTo.apply(t, shape=(1, 4, 1)), (3, 4, 5))
    wk = rng.standard_normal((3, 2, 3, 3))
    xk = rng.standard_normal((2, 2, 7, 6))
    for s in (1, 2):
        yield binary(f"conv2d_s{s}", lambda a, b, s=s: T.Conv2d.apply(a, b, stride=s), xk.shape, wk.shape, 0)
        yield binary(f"conv2d_s{s}", lambda a, b, s=s: T.Conv2d.apply(a, b, stride=s), xk.shape, wk.shape, 1)
    gshape = T.Conv2d.apply(Tensor(xk), Tensor(wk), stride=2).shape
    yield binary("conv2d_dx", lambda g, w: T.ConvDx.apply(g, w, stride=2, x_shape=xk.shape), gshape, wk.shape, 0)
    yield binary("conv2d_dx", lambda g, w: T.ConvDx.apply(g, w, stride=2, x_shape=xk.shape), gshape, wk.shape, 1)
    yield binary("conv2d_dw", lambda x, g: T.ConvDw.apply(x, g, stride=2, w_shape=wk.shape), xk.shape, gshape, 0)
    yield binary("conv2d_dw", lambda x, g: T.ConvDw.apply(x, g, stride=2, w_shape=wk.shape), xk.shape, gshape, 1)
    yield unary("pad_reflect", lambda t: T.pad_reflect(t, 2), (1, 2, 5, 6))
    yield unary("pad_reflect_adj", lambda t: T.PadReflectAdj.apply(t, p=1, out_shape=(1, 2, 4, 5)), (1, 2, 6, 7))
    yield unary("crop", lambda t: T.crop(t, (1, 4, 2, 5)), (1, 2, 6, 7))
    yield unary("crop_adj", lambda t: T.CropAdj.apply(t, box=(1, 4, 2, 5), out_shape=(1, 2, 6, 7)), (1, 2, 3, 3))
    yield unary("concat", lambda t: T.concat([t, T.square(t)], axis=1), (2, 2, 3, 3))
    yield unary("slice_axis", lambda t: T.slice_axis(t, 1, 1, 3), (2, 4, 3))
    yield unary("slice_axis_adj", lambda t: T.SliceAxisAdj.apply(t, axis=1, start=1, out_shape=(2, 5, 3)), (2, 2, 3))
    yield unary("upsample2x", T.upsample2x, (1, 2, 4, 5))
    yield unary("upsample2x_adj", lambda t: T.Upsample2xAdj.apply(t), (1, 2, 6, 4))
    yield unary("box_sum", lambda t: T.box_sum(t, 3), (1, 1, 6, 7))
    idx = np.stack([rng.permutation(20) for _ in range(2)])
    idx[:, :3] = idx[:, 3:6]  # duplicates exercise accumulation in the adjoint
    yield unary("gather", lambda t: T.gather(t, idx), (2, 3, 4, 5))
    yield unary("scatter", lambda t: T.Scatter.apply(t, index=idx), (2, 3, 4, 5))
    img = rng.standard_normal((2, 1, 6, 7))
    u0 = rng.uniform(-1.3, 1.3, size=(2, 2, 6, 7))
    u0 = np.where(np.abs(u0 - np.round(u0)) < 0.05, u0 + 0.1, u0)  # keep clear of bilinear kinks
    yield binary("warp", T.warp, img.shape, u0.shape, 0)
    name, fn, _, tol, eps = binary("warp", T.warp, img.shape, u0.shape, 1)
    yield name, (lambda t, a=img, fn=fn: fn(t)), u0, tol, eps

    # layers
    conv = layers.Conv(2, 3, rng, stride=2)
    yield unary("layer.conv", conv, (2, 2, 8, 8))
    sn = layers.Conv(2, 3, rng, sn=True).eval()
    yield unary("layer.conv_sn[x]", sn, (1, 2, 6, 6))
    xs = rng.standard_normal((1, 2, 6, 6))

    def sn_w(t, proj_=proj((1, 3, 6, 6))):
        sn.weight = t
        sn.sn._W = t
        return T.sum_(T.mul(sn(Tensor(xs)), proj_))
    yield "layer.conv_sn[w]", sn_w, sn.weight.data.astype(np.float64), 1e-3, 1e-6
    dense = layers.Dense(4, 3, rng)
    yield unary("layer.dense", dense, (5, 4))
    gb = rng.standard_normal((2, 3)) + 1
    yield unary("layer.film", lambda t: layers.film_modulate(t, Tensor(gb), Tensor(gb * 0.3)), (2, 3, 4, 4))
    res = layers.ResBlockSN(3, rng).eval()
    yield unary("layer.resblock_sn", res, (1, 3, 5, 5))
    emb = layers.ConditionEmbedding(3, [2, 4], rng)
    for p in emb.proj:
        p.weight.data[...] = rng.normal(0, 0.3, size=p.weight.shape)
    yield unary("layer.condition_embedding", lambda t: T.concat([g for pair in emb(t) for g in pair], axis=1), (2, 3))

    # geometry
    yield unary("integrate_svf", lambda t: geometry.integrate_svf(t, 3),
                (1, 2, 6, 6), eps=1e-6)
    yield unary("upscale_flow", geometry.upscale_flow, (1, 2, 4, 4))

    # losses
    fixed = rng.standard_normal((1, 1, 12, 12))
    yield "loss.lncc", (lambda t: O.lncc_loss(t, Tensor(fixed), 5)), rng.standard_normal((1, 1, 12, 12)), 5e-3, 1e-6
    hist = O.DeformationHistory()
    hist.push(np.array([0.2, -0.1]))
    wts = O.LossWeights()
    for red in ("sum", "mean"):
        yield (f"loss.deformation_regularizer[{red}]", (lambda t, red=red: O.deformation_regularizer(t, hist, wts, red)),
               rng.standard_normal((2, 2, 5, 6)), 1e-3, 1e-6)
    fake = rng.standard_normal((2, 1, 3, 3))
    yield "loss.lsgan_d", (lambda t: O.lsgan_losses(t, Tensor(fake))[0]), rng.standard_normal((2, 1, 3, 3)), 1e-3, 1e-6
    yield "loss.lsgan_g", (lambda t: O.lsgan_losses(Tensor(fake), t)[1]), rng.standard_normal((2, 1, 3, 3)), 1e-3, 1e-6
    yield "loss.symmetry", O.symmetry_penalty, rng.standard_normal((1, 1, 4, 5)), 1e-3, 1e-6
    yield unary("loss.diffaug", lambda t: O.diffaug(t, ("translate", "dihedral"), np.random.default_rng(3)),
                (2, 1, 8, 8))
    disc = networks.Discriminator(rng, base=2, n_cat=2, n_con=1).eval()
    disc.head.init_embeddings(rng)
    cond = networks.encode_conditions([{"age": 10, "cohort": "A"}], networks.age_cohort_schema(40))
    xr = rng.standard_normal((1, 1, 32, 32))

    def r1_of_weight(t):
        disc.trunk[0].weight = t
        disc.trunk[0].sn._W = t
        return O.r1_penalty(disc, Tensor(xr), cond, 1.0)
    yield "loss.r1[second_order]", r1_of_weight, disc.trunk[0].weight.data.astype(np.float64), 1e-3, 1e-6
    yield "loss.r1[input]", (lambda t: O.r1_penalty(disc, t, cond, 1.0)), xr, 1e-3, 1e-6
    yield unary("network.discriminator", lambda t: disc(t, cond), (1, 1, 32, 32))

    # composite: template -> register -> LNCC, w.r.t. a registration encoder weight
    avg = np.abs(rng.standard_normal((32, 32))) + 0.2
    gen = networks.TemplateGenerator(avg, np.ones((32, 32)), rng, width=2, c0=2, n_res=1, z_dim=3).eval()
    reg = networks.RegistrationNet(rng, width=2, steps=3)
    reg.flow.weight.data[...] = rng.normal(0, 0.3, size=reg.flow.weight.shape)
    z = np.array([[0.3, 1.0, 0.0]])
    fixed32 = rng.standard_normal((1, 1, 32, 32))

    def composite(t):
        reg.enc[0].weight = t
        _, _, moved = reg(gen(z), Tensor(fixed32))
        return O.lncc_loss(moved, Tensor(fixed32), 5)
    yield "composite.template_register_lncc", composite, reg.enc[0].weight.data.astype(np.float64), 5e-3, 1e-6

    def composite_p(t):
        gen.P = t
        _, _, moved = reg(gen(z), Tensor(fixed32))
        return O.lncc_loss(moved, Tensor(fixed32), 5)
    yield "composite.template_parameter_array", composite_p, gen.P.data.astype(np.float64), 5e-3, 1e-6


def run_suite(seed: int = 0, verbose: bool = False, stream=None) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name, fn, x, tol, eps in _cases(rng):
        try:
            err = grad_check(fn, x, eps=eps)
        except NonFiniteError:
            err = float("inf")
        res = CheckResult(name, err, tol)
        out.append(res)
        if verbose:
            print(f"{'PASS' if res.ok else 'FAIL'} {name:40s} max_rel_err={err:.3e} tol={tol:g}", file=stream)
    return out
