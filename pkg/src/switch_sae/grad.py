"""Hand-derived backward passes and a central-difference gradient checker.

Losses are batch means over samples (not over the d coordinates):

    recon = (1/T) sum_t ||x_t - x_hat_t||^2
    total = recon + alpha * d * aux,   aux = N * sum_i f_i P_i

``f_i`` (fraction of samples routed to expert i) is piecewise constant, so the
load-balancing gradient flows only through ``P_i``. Non-differentiable points
(ReLU/L1 at 0, top-k ties, argmax ties) use the forward-selected mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import (
    ArchSpec,
    DenseSaeParams,
    RoutingRecord,
    SparseLatents,
    SwitchSaeParams,
    _check_batch,
    encode_topk,
    relu_sae_forward,
    router_probs,
    sparse_decode,
    switch_sae_forward,
    topk_sae_forward,
)
from .numerics import Rng, topk_mask


@dataclass(frozen=True)
class LossBreakdown:
    recon: float
    aux: float
    alpha: float
    d: int

    @property
    def total(self) -> float:
        return self.recon + self.alpha * self.d * self.aux


def aux_loss(f: np.ndarray, P: np.ndarray) -> float:
    return float(len(f) * np.dot(f, P))


def _scatter(idx: np.ndarray, vals: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((idx.shape[0], width))
    np.put_along_axis(out, idx, vals, axis=1)
    return out


def _dense_topk_grads(w_enc, w_dec, u, idx, vals, de, post_relu):
    """Backprop ``de = dL/d(W_dec z)`` through one TopK SAE (no bias terms).

    Returns ``(dW_enc, dW_dec, du)``; only selected features get nonzero rows.
    """
    dvals = np.einsum("td,tkd->tk", de, w_dec.T[idx])
    if post_relu:
        dvals = dvals * (vals > 0)
    dz = _scatter(idx, dvals, w_enc.shape[0])
    z = _scatter(idx, vals, w_enc.shape[0])
    return dz.T @ u, de.T @ z, dz @ w_enc


# --- losses (used by the checker and by training diagnostics) ---------------


def topk_sae_loss(params: DenseSaeParams, x, k: int, post_relu: bool = False) -> LossBreakdown:
    _, x_hat = topk_sae_forward(params, x, k, post_relu)
    return LossBreakdown(float(np.mean(np.sum((x_hat - x) ** 2, axis=1))), 0.0, 0.0, params.d)


def relu_sae_loss(params: DenseSaeParams, x, l1_coeff: float) -> tuple[LossBreakdown, float]:
    """Returns the breakdown and the L1-inclusive objective actually optimized."""
    z, x_hat = relu_sae_forward(params, x)
    recon = float(np.mean(np.sum((x_hat - x) ** 2, axis=1)))
    return LossBreakdown(recon, 0.0, 0.0, params.d), recon + l1_coeff * float(np.mean(z.sum(axis=1)))


def switch_sae_loss(params: SwitchSaeParams, x, k: int, alpha: float, f=None, post_relu: bool = False):
    """Switch SAE loss; pass ``f`` to hold routed fractions fixed."""
    routing, _, x_hat = switch_sae_forward(params, x, k, post_relu)
    f = routing.f if f is None else f
    recon = float(np.mean(np.sum((x_hat - x) ** 2, axis=1)))
    return LossBreakdown(recon, aux_loss(f, routing.P), alpha, params.d)


# --- backward passes ---------------------------------------------------------


def topk_sae_backward(params: DenseSaeParams, x, k: int, post_relu: bool = False,
                      return_latents: bool = False):
    params.validate()
    x = _check_batch(x, params.d)
    T = x.shape[0]
    u = x - params.b_pre
    idx, vals = encode_topk(params.w_enc, u, k, post_relu)
    x_hat = sparse_decode(params.w_dec, idx, vals) + params.b_pre
    r = x_hat - x
    g = (2.0 / T) * r
    dw_enc, dw_dec, du = _dense_topk_grads(params.w_enc, params.w_dec, u, idx, vals, g, post_relu)
    grads = DenseSaeParams(dw_enc, dw_dec, g.sum(axis=0) - du.sum(axis=0))
    loss = LossBreakdown(float(np.sum(r * r) / T), 0.0, 0.0, params.d)
    if return_latents:
        return grads, loss, SparseLatents(params.num_features, idx, vals)
    return grads, loss


def relu_sae_backward(params: DenseSaeParams, x, l1_coeff: float, return_latents: bool = False):
    if l1_coeff < 0:
        raise ValueError("l1_coeff must be non-negative")
    params.validate()
    x = _check_batch(x, params.d)
    T = x.shape[0]
    u = x - params.b_pre
    pre = u @ params.w_enc.T
    active = pre > 0
    z = np.where(active, pre, 0.0)
    r = z @ params.w_dec.T + params.b_pre - x
    g = (2.0 / T) * r
    dz = g @ params.w_dec + (l1_coeff / T) * active
    dpre = dz * active
    du = dpre @ params.w_enc
    grads = DenseSaeParams(dpre.T @ u, g.T @ z, g.sum(axis=0) - du.sum(axis=0))
    loss = LossBreakdown(float(np.sum(r * r) / T), 0.0, 0.0, params.d)
    return (grads, loss, z) if return_latents else (grads, loss)


def switch_sae_backward(params: SwitchSaeParams, x, k: int, alpha: float, post_relu: bool = False,
                        return_latents: bool = False):
    """Gradients of ``recon + alpha * d * aux``.

    Returns ``(grads, LossBreakdown, RoutingRecord)``. Experts that receive no
    samples get exactly zero gradient.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    params.validate()
    x = _check_batch(x, params.d)
    if not 1 <= k <= params.expert_width:
        raise ValueError(f"k={k} out of range [1, {params.expert_width}]")
    T, d = x.shape
    N = params.num_experts
    v = x - params.b_router
    routing = RoutingRecord.from_probs(router_probs(params, x))
    p_sel = routing.selected_prob
    u = x - params.b_pre

    grads = params.zeros_like()
    dp_sel = np.zeros(T)
    lat_idx = np.zeros((T, k), dtype=np.int64)
    lat_vals = np.zeros((T, k))
    sq_err = 0.0
    for i in range(N):
        rows = np.flatnonzero(routing.selected == i)
        if rows.size == 0:
            continue
        ui = u[rows]
        idx, vals = encode_topk(params.w_enc[i], ui, k, post_relu)
        lat_idx[rows], lat_vals[rows] = idx, vals
        e = sparse_decode(params.w_dec[i], idx, vals)
        r = p_sel[rows, None] * e + params.b_pre - x[rows]
        sq_err += float(np.sum(r * r))
        g = (2.0 / T) * r
        dp_sel[rows] = np.sum(g * e, axis=1)
        dw_enc, dw_dec, du = _dense_topk_grads(
            params.w_enc[i], params.w_dec[i], ui, idx, vals, p_sel[rows, None] * g, post_relu
        )
        grads.w_enc[i] = dw_enc
        grads.w_dec[i] = dw_dec
        grads.b_pre += g.sum(axis=0) - du.sum(axis=0)

    dp = np.zeros((T, N))
    dp[np.arange(T), routing.selected] = dp_sel
    dp += (alpha * d * N / T) * routing.f
    probs = routing.probs
    dlogits = probs * (dp - np.sum(dp * probs, axis=1, keepdims=True))
    grads.w_router = dlogits.T @ v
    grads.b_router = -(dlogits @ params.w_router).sum(axis=0)

    loss = LossBreakdown(sq_err / T, aux_loss(routing.f, routing.P), alpha, d)
    if return_latents:
        return grads, loss, routing, SparseLatents(params.expert_width, lat_idx, lat_vals, routing.selected)
    return grads, loss, routing


# --- finite-difference checking ---------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: dict[str, float] = field(default_factory=dict)
    skipped: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)
    h: float = 1e-4

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    def passed(self, tol: float = 1e-5) -> bool:
        return self.worst <= tol


def relative_error(g_fd, g) -> np.ndarray:
    g_fd, g = np.asarray(g_fd), np.asarray(g)
    return np.abs(g_fd - g) / np.maximum(np.maximum(np.abs(g_fd), np.abs(g)), 1e-8)


def compare_gradients(loss_fn, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray], h: float = 1e-4,
                      signature_fn=None) -> GradCheckReport:
    """Central differences over every coordinate of ``arrays``.

    ``loss_fn`` maps a dict of arrays to a float. If ``signature_fn`` is given,
    any perturbation that changes its value (a discrete selection flipped) is
    recorded in ``report.skipped`` and left out of the comparison.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    work = {name: np.array(a, dtype=np.float64) for name, a in arrays.items()}
    base_sig = signature_fn(work) if signature_fn else None
    report = GradCheckReport(h=h)
    for name, a in work.items():
        worst = 0.0
        for pos in np.ndindex(a.shape):
            orig = a[pos]
            a[pos] = orig + h
            lp, sp = loss_fn(work), signature_fn(work) if signature_fn else None
            a[pos] = orig - h
            lm, sm = loss_fn(work), signature_fn(work) if signature_fn else None
            a[pos] = orig
            if signature_fn and not (np.array_equal(sp, base_sig) and np.array_equal(sm, base_sig)):
                report.skipped.append((name, pos))
                continue
            worst = max(worst, float(relative_error((lp - lm) / (2 * h), grads[name][pos])))
        report.max_rel_err[name] = worst
    return report


def random_instance(arch: ArchSpec, seed: int, T: int | None = None, margin: float = 1e-3,
                    max_tries: int = 1000):
    """Random parameters and batch whose discrete choices have gaps > ``margin``.

    Top-k gaps (k-th vs (k+1)-th pre-activation), router gaps (best vs second
    logit) and, for ReLU, distance of every pre-activation from zero are all
    kept above ``margin``. Returns ``(params, x)``.
    """
    T = T or (6 if arch.kind == "switch" else 5)
    d, M, N = arch.d, arch.M, arch.N
    root = Rng(seed)
    for attempt in range(max_tries):
        rng = root.spawn(attempt)
        x = rng.normal((T, d))
        if arch.kind == "switch":
            m = M // N
            w_dec = rng.normal((N, d, m))
            w_dec /= np.linalg.norm(w_dec, axis=1, keepdims=True)
            params = SwitchSaeParams(
                rng.normal((N, m, d)), w_dec, rng.normal((N, d)), 0.3 * rng.normal(d), 0.3 * rng.normal(d)
            )
            logits = (x - params.b_router) @ params.w_router.T
            top2 = np.sort(logits, axis=1)[:, -2:] if N > 1 else None
            ok = N == 1 or np.all(top2[:, 1] - top2[:, 0] > margin)
            sel = np.argmax(logits, axis=1)
            pre = np.einsum("tmd,td->tm", params.w_enc[sel], x - params.b_pre)
        else:
            w_dec = rng.normal((d, M))
            w_dec /= np.linalg.norm(w_dec, axis=0, keepdims=True)
            params = DenseSaeParams(rng.normal((M, d)), w_dec, 0.3 * rng.normal(d))
            pre = (x - params.b_pre) @ params.w_enc.T
            ok = True
        if arch.kind == "relu":
            ok = ok and np.all(np.abs(pre) > margin)
        else:
            s = np.sort(pre, axis=1)
            width = s.shape[1]
            if arch.k < width:
                ok = ok and np.all(s[:, width - arch.k] - s[:, width - arch.k - 1] > margin)
        if ok:
            return params, x
    raise RuntimeError(f"no instance with margin {margin} found in {max_tries} tries")


def _selection_signature(arch: ArchSpec, x):
    def sig(arrs):
        if arch.kind == "switch":
            p = SwitchSaeParams(**arrs)
            sel = np.argmax((x - p.b_router) @ p.w_router.T, axis=1)
            pre = np.einsum("tmd,td->tm", p.w_enc[sel], x - p.b_pre)
            return np.concatenate([sel[:, None], topk_mask(pre, arch.k)], axis=1)
        p = DenseSaeParams(**arrs)
        pre = (x - p.b_pre) @ p.w_enc.T
        return pre > 0 if arch.kind == "relu" else topk_mask(pre, arch.k)

    return sig


def finite_diff_check(arch: ArchSpec, seed: int = 0, h: float = 1e-4, alpha: float = 3.0,
                      l1_coeff: float = 0.1) -> GradCheckReport:
    """Compare analytic gradients with central differences on a random instance."""
    params, x = random_instance(arch, seed, margin=10 * h)
    if arch.kind == "topk":
        grads, _ = topk_sae_backward(params, x, arch.k)
        loss = lambda a: topk_sae_loss(DenseSaeParams(**a), x, arch.k).total
    elif arch.kind == "relu":
        grads, _ = relu_sae_backward(params, x, l1_coeff)
        loss = lambda a: relu_sae_loss(DenseSaeParams(**a), x, l1_coeff)[1]
    else:
        grads, _, routing = switch_sae_backward(params, x, arch.k, alpha)
        loss = lambda a: switch_sae_loss(SwitchSaeParams(**a), x, arch.k, alpha, f=routing.f).total
    return compare_gradients(loss, params.arrays(), grads.arrays(), h, _selection_signature(arch, x))
