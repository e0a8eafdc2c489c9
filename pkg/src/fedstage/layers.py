"""Differentiable layer primitives with explicit forward/backward passes.

Every operation here is a pure function over numpy arrays: inputs are never
mutated and identical inputs give bit-identical outputs.  Production code
runs in float32; the same functions accept float64 arrays so verification
harnesses (and the finite-difference oracle) can run entirely in double
precision.  Forward passes and the optimizer step check their results for
NaN/Inf and raise instead of silently propagating divergence.

Shape conventions, single example (no batch axis at this level):

    image    [C, H, W]
    kernels  [O, C, kH, kW]     (valid cross-correlation, stride 1)
    dense x  [n_in], weight [n_out, n_in], bias [n_out]
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass
class LayerGrads:
    """Result of a layer backward pass.

    params maps parameter name to a gradient array of the parameter's
    shape; input_grad has the shape of the layer's input, ready to be
    passed to the previous layer.
    """

    params: dict[str, np.ndarray]
    input_grad: np.ndarray


def _ensure_finite(what: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"{what} produced non-finite values")


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _check_conv_shapes(image: np.ndarray, kernels: np.ndarray, bias: np.ndarray | None) -> None:
    if image.ndim != 3:
        raise ValueError(f"conv2d: image must be rank 3 [C,H,W], got rank {image.ndim}")
    if kernels.ndim != 4:
        raise ValueError(f"conv2d: kernels must be rank 4 [O,C,kH,kW], got rank {kernels.ndim}")
    c, h, w = image.shape
    o, kc, kh, kw = kernels.shape
    if kc != c:
        raise ValueError(f"conv2d: kernel channel count {kc} does not match image channel count {c}")
    if kh > h:
        raise ValueError(f"conv2d: kernel height {kh} exceeds image height {h}")
    if kw > w:
        raise ValueError(f"conv2d: kernel width {kw} exceeds image width {w}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match output channel count {o}")


def conv2d_forward(image: np.ndarray, kernels: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Valid cross-correlation with stride 1.

    out[o, y, x] = bias[o] + sum_{c,i,j} image[c, y+i, x+j] * kernels[o, c, i, j]
    Output shape [O, H-kH+1, W-kW+1].
    """
    _check_conv_shapes(image, kernels, bias)
    kh, kw = kernels.shape[2], kernels.shape[3]
    # windows: [C, H', W', kH, kW], a view, no copy
    windows = sliding_window_view(image, (kh, kw), axis=(1, 2))
    out = np.tensordot(kernels, windows, axes=[(1, 2, 3), (0, 3, 4)])
    out = out + bias[:, None, None]
    _ensure_finite("conv2d_forward", out)
    return out


def conv2d_backward(image: np.ndarray, kernels: np.ndarray, upstream: np.ndarray) -> LayerGrads:
    """Gradients of a valid cross-correlation.

    upstream has the forward output shape [O, H', W'].  Returns gradients
    for "kernels" and "bias" plus the gradient with respect to the image.
    """
    _check_conv_shapes(image, kernels, None)
    o, _, kh, kw = kernels.shape
    hp = image.shape[1] - kh + 1
    wp = image.shape[2] - kw + 1
    if upstream.shape != (o, hp, wp):
        raise ValueError(
            f"conv2d: upstream shape {upstream.shape} does not match output shape {(o, hp, wp)}"
        )

    grad_bias = upstream.sum(axis=(1, 2))

    windows = sliding_window_view(image, (kh, kw), axis=(1, 2))  # [C,H',W',kH,kW]
    grad_kernels = np.tensordot(upstream, windows, axes=[(1, 2), (1, 2)])  # [O,C,kH,kW]

    # Input gradient is the full correlation of upstream with flipped kernels.
    padded = np.pad(upstream, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    up_windows = sliding_window_view(padded, (kh, kw), axis=(1, 2))  # [O,H,W,kH,kW]
    flipped = kernels[:, :, ::-1, ::-1]
    grad_input = np.tensordot(up_windows, flipped, axes=[(0, 3, 4), (0, 2, 3)])  # [H,W,C]
    grad_input = np.ascontiguousarray(grad_input.transpose(2, 0, 1))

    return LayerGrads(
        params={"kernels": grad_kernels, "bias": grad_bias},
        input_grad=grad_input,
    )


# ---------------------------------------------------------------------------
# 2x2 max pooling, stride 2
# ---------------------------------------------------------------------------

def maxpool2x2_forward(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping 2x2 max pooling.

    Returns (pooled [C,H/2,W/2], argmax_map [C,H/2,W/2]).  The argmax map
    holds, per window, the flat index of the winning element in the input
    array; ties go to the first element in row-major scan order, which is
    what argmax over the window cells yields.
    """
    if image.ndim != 3:
        raise ValueError(f"maxpool2x2: image must be rank 3 [C,H,W], got rank {image.ndim}")
    c, h, w = image.shape
    if h % 2 != 0:
        raise ValueError(f"maxpool2x2: height {h} is not even")
    if w % 2 != 0:
        raise ValueError(f"maxpool2x2: width {w} is not even")

    hp, wp = h // 2, w // 2
    # cells[c, y, x, k] = image[c, 2y + k//2, 2x + k%2]: row-major window order
    cells = image.reshape(c, hp, 2, wp, 2).transpose(0, 1, 3, 2, 4).reshape(c, hp, wp, 4)
    win = cells.argmax(axis=3)
    pooled = cells.max(axis=3)

    chan = np.arange(c)[:, None, None]
    rows = 2 * np.arange(hp)[None, :, None] + win // 2
    cols = 2 * np.arange(wp)[None, None, :] + win % 2
    argmax_map = (chan * h + rows) * w + cols
    return pooled, argmax_map.astype(np.int64)


def maxpool2x2_backward(argmax_map: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Route upstream gradients to the winning input positions.

    Positions that did not win receive zero.  The input shape is recovered
    from the upstream shape (windows are non-overlapping 2x2).
    """
    if argmax_map.shape != upstream.shape:
        raise ValueError(
            f"maxpool2x2: argmax map shape {argmax_map.shape} does not match "
            f"upstream shape {upstream.shape}"
        )
    c, hp, wp = upstream.shape
    grad_input = np.zeros((c, 2 * hp, 2 * wp), dtype=upstream.dtype)
    grad_input.ravel()[argmax_map.ravel()] = upstream.ravel()
    return grad_input


# ---------------------------------------------------------------------------
# Dense (fully connected)
# ---------------------------------------------------------------------------

def _check_dense_shapes(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None) -> None:
    if x.ndim != 1:
        raise ValueError(f"dense: input must be rank 1, got rank {x.ndim}")
    if weight.ndim != 2:
        raise ValueError(f"dense: weight must be rank 2 [n_out,n_in], got rank {weight.ndim}")
    if weight.shape[1] != x.shape[0]:
        raise ValueError(
            f"dense: weight input width {weight.shape[1]} does not match input length {x.shape[0]}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(
            f"dense: bias shape {bias.shape} does not match output length {weight.shape[0]}"
        )


def dense_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map: weight @ x + bias."""
    _check_dense_shapes(x, weight, bias)
    out = weight @ x + bias
    _ensure_finite("dense_forward", out)
    return out


def dense_backward(x: np.ndarray, weight: np.ndarray, upstream: np.ndarray) -> LayerGrads:
    """Gradients of the affine map for upstream of shape [n_out]."""
    _check_dense_shapes(x, weight, None)
    if upstream.shape != (weight.shape[0],):
        raise ValueError(
            f"dense: upstream shape {upstream.shape} does not match output length {weight.shape[0]}"
        )
    return LayerGrads(
        params={"weight": np.outer(upstream, x), "bias": upstream.copy()},
        input_grad=weight.T @ upstream,
    )


# ---------------------------------------------------------------------------
# ReLU
# ---------------------------------------------------------------------------

def relu_forward(x: np.ndarray) -> np.ndarray:
    """Elementwise max(x, 0)."""
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Pass upstream where the forward input was strictly positive.

    The subgradient at exactly zero is taken as zero.
    """
    if x.shape != upstream.shape:
        raise ValueError(f"relu: upstream shape {upstream.shape} does not match input shape {x.shape}")
    return upstream * (x > 0)


# ---------------------------------------------------------------------------
# Softmax cross-entropy
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-shifted softmax over a rank-1 logit vector."""
    if logits.ndim != 1:
        raise ValueError(f"softmax: logits must be rank 1, got rank {logits.ndim}")
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def softmax_cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray, np.ndarray]:
    """Fused softmax and negative log-likelihood.

    Returns (loss, grad_logits, probs).  The max shift keeps exp() in
    range; the loss is returned as a Python float (64-bit) so callers can
    accumulate it without float32 rounding, and grad_logits is simply
    probs minus the one-hot label.
    """
    if logits.ndim != 1:
        raise ValueError(f"softmax_cross_entropy: logits must be rank 1, got rank {logits.ndim}")
    k = logits.shape[0]
    if k < 2:
        raise ValueError(f"softmax_cross_entropy: need at least 2 classes, got {k}")
    if not 0 <= int(label) < k:
        raise ValueError(f"softmax_cross_entropy: label {label} out of range for {k} classes")
    label = int(label)

    shifted = logits - logits.max()
    e = np.exp(shifted)
    total = e.sum()
    probs = e / total
    loss = float(np.log(total) - shifted[label])
    grad = probs.copy()
    grad[label] -= 1
    if not np.isfinite(loss):
        raise FloatingPointError("softmax_cross_entropy produced a non-finite loss")
    _ensure_finite("softmax_cross_entropy", grad)
    return loss, grad, probs


# ---------------------------------------------------------------------------
# SGD step
# ---------------------------------------------------------------------------

def sgd_step(
    weights: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float,
) -> dict[str, np.ndarray]:
    """One vanilla gradient step: w <- w - lr * g, per tensor.

    weights and grads must have identical key sets and matching shapes.
    Returns a new mapping; the inputs are left untouched.
    """
    if weights.keys() != grads.keys():
        missing = sorted(set(weights) ^ set(grads))
        raise ValueError(f"sgd_step: weight/gradient key mismatch: {missing}")
    out: dict[str, np.ndarray] = {}
    for name, w in weights.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(
                f"sgd_step: gradient shape {g.shape} does not match weight shape {w.shape} for {name}"
            )
        stepped = w - lr * g
        _ensure_finite(f"sgd_step({name})", stepped)
        out[name] = stepped
    return out


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

def gradient_check(
    loss_and_grads,
    weights: dict[str, np.ndarray],
    eps: float = 1e-3,
    n_samples: int = 200,
    seed: int = 0,
) -> float:
    """Compare analytic gradients against central differences.

    loss_and_grads(weights) must return (loss, grads) where grads is keyed
    like weights.  Everything is evaluated in float64: the weights are
    upcast once, the analytic gradient is taken from one call, and each
    sampled coordinate is perturbed by +-eps for the two-sided difference
    (L(w+eps) - L(w-eps)) / (2 eps).

    Sampling is stratified so every tensor contributes at least two
    coordinates (tiny bias vectors included), with the remaining budget
    spread proportionally to tensor size.  Returns the maximum relative
    error max|a - n| / max(|a|, |n|, 1e-8) over the sample.

    Max-pool ties and ReLU kinks make the loss piecewise-smooth, so a
    stencil that straddles a kink produces a meaningless difference
    quotient.  Whenever a coordinate disagrees with the analytic value,
    the step is halved until two successive quotients agree, which
    recovers coordinates whose stencil merely crosses a nearby kink.  A
    coordinate that still disagrees sits on a kink itself, where the
    centered quotient returns the average of the two one-sided slopes;
    if the analytic value matches the forward or the backward slope it
    is a valid one-sided derivative there and the coordinate is
    excluded.  A genuinely wrong gradient matches neither side and is
    still reported.
    """
    if eps <= 0:
        raise ValueError(f"gradient_check: eps must be positive, got {eps}")
    if n_samples < 1:
        raise ValueError(f"gradient_check: n_samples must be >= 1, got {n_samples}")

    work = {name: np.asarray(w, dtype=np.float64).copy() for name, w in weights.items()}
    base_loss, analytic = loss_and_grads(work)

    total = sum(w.size for w in work.values())
    rng = np.random.default_rng(seed)
    picks: list[tuple[str, int]] = []
    for name, w in work.items():
        share = max(2, round(n_samples * w.size / total))
        share = min(share, w.size)
        for flat in rng.choice(w.size, size=share, replace=False):
            picks.append((name, int(flat)))

    def relative(a: float, n: float) -> float:
        return abs(a - n) / max(abs(a), abs(n), 1e-8)

    worst = 0.0
    for name, flat in picks:
        arr = work[name]
        orig = arr.flat[flat]

        def quotient(step: float) -> float:
            arr.flat[flat] = orig + step
            loss_hi, _ = loss_and_grads(work)
            arr.flat[flat] = orig - step
            loss_lo, _ = loss_and_grads(work)
            arr.flat[flat] = orig
            return (loss_hi - loss_lo) / (2 * step)

        numeric = quotient(eps)
        a = float(np.asarray(analytic[name]).flat[flat])
        rel = relative(a, numeric)
        if rel > 1e-4:
            step = eps
            for _ in range(6):
                finer = quotient(step / 2)
                step /= 2
                drift = relative(numeric, finer)
                numeric = finer
                if drift <= 1e-4:
                    break
            rel = relative(a, numeric)
            if rel > 1e-4:
                arr.flat[flat] = orig + step
                loss_hi, _ = loss_and_grads(work)
                arr.flat[flat] = orig - step
                loss_lo, _ = loss_and_grads(work)
                arr.flat[flat] = orig
                fwd = (loss_hi - base_loss) / step
                bwd = (base_loss - loss_lo) / step
                if min(relative(a, fwd), relative(a, bwd)) <= 1e-3:
                    continue
        worst = max(worst, rel)
    return worst
