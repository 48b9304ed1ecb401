"""Shared test utilities: independent oracles and finite-difference checks.

The oracles are deliberately written as plain nested loops over numpy arrays
so they share no code path with the implementations they check.
"""

from __future__ import annotations

import numpy as np
import torch


# ------------------------------------------------------------------- oracles


def conv2d_oracle(
    x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int
) -> np.ndarray:
    """Valid cross-correlation with loops. x: (N,C,H,W), weight: (O,C,kh,kw)."""
    n, c, h, w = x.shape
    out_c, _, kh, kw = weight.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    out = np.zeros((n, out_c, oh, ow))
    for b in range(n):
        for o in range(out_c):
            for i in range(oh):
                for j in range(ow):
                    acc = bias[o]
                    for ch in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += (
                                    weight[o, ch, di, dj]
                                    * x[b, ch, i * stride + di, j * stride + dj]
                                )
                    out[b, o, i, j] = acc
    return out


def conv_transpose2d_oracle(
    x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int
) -> np.ndarray:
    """Unpadded transposed conv by scatter-add. weight: (C,O,kh,kw)."""
    n, c, h, w = x.shape
    _, out_c, kh, kw = weight.shape
    oh = (h - 1) * stride + kh
    ow = (w - 1) * stride + kw
    out = np.zeros((n, out_c, oh, ow))
    for b in range(n):
        for ch in range(c):
            for i in range(h):
                for j in range(w):
                    for o in range(out_c):
                        for di in range(kh):
                            for dj in range(kw):
                                out[b, o, i * stride + di, j * stride + dj] += (
                                    x[b, ch, i, j] * weight[ch, o, di, dj]
                                )
    out += bias.reshape(1, out_c, 1, 1)
    return out


def gru_oracle(
    x: np.ndarray,
    h: np.ndarray,
    w_ih: np.ndarray,
    w_hh: np.ndarray,
    b_ih: np.ndarray,
    b_hh: np.ndarray,
) -> np.ndarray:
    """Scalar-loop GRU step. Gate rows in w_* are ordered reset/update/new."""

    def sigmoid(v: float) -> float:
        return 1.0 / (1.0 + np.exp(-v))

    batch, hidden = h.shape
    out = np.zeros_like(h)
    for b in range(batch):
        gi = w_ih @ x[b] + b_ih
        gh = w_hh @ h[b] + b_hh
        for k in range(hidden):
            r = sigmoid(gi[k] + gh[k])
            u = sigmoid(gi[hidden + k] + gh[hidden + k])
            n = np.tanh(gi[2 * hidden + k] + r * gh[2 * hidden + k])
            out[b, k] = (1 - u) * n + u * h[b, k]
    return out


def upsample_by_lcm_oracle(image: np.ndarray, out_side: int) -> np.ndarray:
    """Area averaging via integer upsampling to the least common multiple."""
    n = image.shape[0]
    lcm = np.lcm(n, out_side)
    rep = lcm // n
    big = np.repeat(np.repeat(image, rep, axis=0), rep, axis=1)
    block = lcm // out_side
    return big.reshape(out_side, block, out_side, block).mean(axis=(1, 3))


# -------------------------------------------------------- gradient utilities


def finite_diff_entry(
    fn, param: torch.Tensor, index: tuple[int, ...], step: float = 1e-5
) -> float:
    """Central difference of ``fn()`` w.r.t. one parameter entry."""
    with torch.no_grad():
        original = param[index].item()
        param[index] = original + step
        plus = float(fn())
        param[index] = original - step
        minus = float(fn())
        param[index] = original
    return (plus - minus) / (2 * step)


def check_param_gradients(
    fn,
    params: dict[str, torch.Tensor],
    rng: np.random.Generator,
    entries_per_param: int = 3,
    rtol: float = 1e-3,
    atol: float = 1e-8,
    step: float = 1e-5,
) -> list[str]:
    """Compare autograd against finite differences on sampled entries.

    ``fn`` recomputes the scalar objective from current parameter values.
    Returns a list of failure descriptions (empty when all entries agree).
    """
    value = fn()
    grads = torch.autograd.grad(
        value, list(params.values()), allow_unused=True
    )
    failures = []
    for (name, param), grad in zip(params.items(), grads):
        flat_size = param.numel()
        count = min(entries_per_param, flat_size)
        chosen = rng.choice(flat_size, size=count, replace=False)
        for flat_idx in chosen:
            index = np.unravel_index(int(flat_idx), param.shape)
            fd = finite_diff_entry(fn, param, index, step)
            ag = 0.0 if grad is None else float(grad[index])
            tol = atol + rtol * max(abs(fd), abs(ag))
            if abs(fd - ag) > tol:
                failures.append(
                    f"{name}{list(index)}: autograd {ag:.6g} vs fd {fd:.6g}"
                )
    return failures


def module_param_dict(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return dict(module.named_parameters())
