"""Three-scale convolutional network and its training loss.

The network is a coarse-to-fine pyramid over grid sizes N/4, N/2, N.
The coarsest stack sees the 4 input frames downsampled; each finer
stack sees its downsampled frames plus the upsampled prediction of the
scale below, concatenated channel-wise. Every conv applies ReLU except
the last of each scale, which stays linear so negative densities can
come out.

Architecture is data-driven: a small text file lists, per scale, the
kernel sizes and hidden channel widths (coarsest scale first). The
default shipped spec has 17 convs and 422,419 parameters.

The loss combines the mean squared field error with a mean squared
error of the spatial gradients (4th-order central stencil inside,
2nd-order near the borders), weighted 0.98 / 0.02.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np

from . import ops
from .precision import dtype_of

N_INPUT_FRAMES = 4
N_SCALES = 3
LOSS_WEIGHTS = (0.98, 0.02)  # field term, gradient term


@dataclass(frozen=True)
class LayerSpec:
    kernel: int
    in_ch: int
    out_ch: int
    activation: str  # relu | linear


class ArchError(ValueError):
    pass


def parse_arch(text: str) -> list[dict]:
    """Parse an architecture spec: one `scale` line per scale.

    Format, coarsest scale first::

        scale kernels=7,5,3,5,7 hidden=16,32,32,16

    hidden lists the widths between convs, so len(kernels) must be
    len(hidden)+1; the last conv of each scale outputs 1 channel.
    """
    scales = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] != "scale":
            raise ArchError(f"line {lineno}: expected 'scale ...', got {raw!r}")
        fields = dict(p.split("=", 1) for p in parts[1:])
        try:
            kernels = [int(v) for v in fields["kernels"].split(",")]
            hidden = [int(v) for v in fields["hidden"].split(",")] if fields["hidden"] else []
        except (KeyError, ValueError) as exc:
            raise ArchError(f"line {lineno}: bad scale spec ({exc})") from exc
        if len(kernels) != len(hidden) + 1:
            raise ArchError(f"line {lineno}: need len(kernels) == len(hidden)+1")
        if any(k % 2 == 0 or k < 1 for k in kernels):
            raise ArchError(f"line {lineno}: kernel sizes must be odd and positive")
        if any(c < 1 for c in hidden):
            raise ArchError(f"line {lineno}: channel widths must be positive")
        scales.append({"kernels": kernels, "hidden": hidden})
    if len(scales) != N_SCALES:
        raise ArchError(f"expected exactly {N_SCALES} scales, got {len(scales)}")
    return scales


def arch_text(scales: list[dict]) -> str:
    lines = []
    for s in scales:
        k = ",".join(str(v) for v in s["kernels"])
        h = ",".join(str(v) for v in s["hidden"])
        lines.append(f"scale kernels={k} hidden={h}")
    return "\n".join(lines) + "\n"


def arch_hash(scales: list[dict]) -> str:
    return hashlib.sha256(arch_text(scales).encode()).hexdigest()[:16]


def load_arch(source: str) -> list[dict]:
    """Load an architecture: 'default', 'desk', or a file path."""
    if source in ("default", "desk"):
        text = resources.files("reprowave").joinpath(f"data/arch_{source}.txt").read_text()
    else:
        with open(source) as fh:
            text = fh.read()
    return parse_arch(text)


def arch_layers(scales: list[dict]) -> list[list[LayerSpec]]:
    """Expand the per-scale spec into concrete conv layer shapes."""
    out = []
    for si, s in enumerate(scales):
        in_ch = N_INPUT_FRAMES if si == 0 else N_INPUT_FRAMES + 1
        widths = [in_ch] + s["hidden"] + [1]
        layers = []
        for li, k in enumerate(s["kernels"]):
            act = "linear" if li == len(s["kernels"]) - 1 else "relu"
            layers.append(LayerSpec(k, widths[li], widths[li + 1], act))
        out.append(layers)
    return out


def count_parameters(scales: list[dict]) -> int:
    total = 0
    for layers in arch_layers(scales):
        for l in layers:
            total += l.out_ch * l.in_ch * l.kernel * l.kernel + l.out_ch
    return total


class MultiScaleNet:
    """Pyramid CNN; parameters live in a flat name -> array dict."""

    def __init__(self, scales: list[dict], precision: str = "double"):
        self.scales = scales
        self.layers = arch_layers(scales)
        self.precision = precision
        self.dtype = dtype_of(precision)
        self.arch_hash = arch_hash(scales)
        self.params: dict[str, np.ndarray] = {}
        for si, layers in enumerate(self.layers):
            for li, spec in enumerate(layers):
                self.params[f"s{si}.c{li}.weight"] = np.zeros(
                    (spec.out_ch, spec.in_ch, spec.kernel, spec.kernel), dtype=self.dtype
                )
                self.params[f"s{si}.c{li}.bias"] = np.zeros(spec.out_ch, dtype=self.dtype)
        self._ctx = None

    @property
    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def init_weights(self, rng: np.random.Generator) -> None:
        """He init, drawn in a fixed layer order from the given generator."""
        for si, layers in enumerate(self.layers):
            for li, spec in enumerate(layers):
                w, b = ops.he_init(spec.out_ch, spec.in_ch, spec.kernel, rng, self.dtype)
                self.params[f"s{si}.c{li}.weight"] = w
                self.params[f"s{si}.c{li}.bias"] = b

    def load_params(self, arrays: dict[str, np.ndarray]) -> None:
        for name in self.params:
            arr = arrays[name]
            if arr.shape != self.params[name].shape:
                raise ArchError(f"parameter {name}: shape {arr.shape} does not match")
            self.params[name] = arr.astype(self.dtype, copy=True)

    def _scale_sizes(self, n: int) -> list[int]:
        return [n >> (N_SCALES - 1 - si) for si in range(N_SCALES)]

    def forward(self, x: np.ndarray, policy, keep_ctx: bool = False,
                capture_featured: bool = False):
        """Map (B, 4, N, N) normalized frames to a (B, 1, N, N) prediction.

        capture_featured additionally returns the per-scale outputs
        (quarter, half, full). keep_ctx stores what backward() needs.
        """
        if x.ndim != 4 or x.shape[1] != N_INPUT_FRAMES:
            raise ValueError(f"expected (batch, {N_INPUT_FRAMES}, n, n) input, got {x.shape}")
        n = x.shape[2]
        if n % 4 != 0 or x.shape[3] != n:
            raise ValueError(f"input grid must be square with side divisible by 4, got {x.shape}")
        if x.dtype != self.dtype:
            raise ValueError(f"input dtype {x.dtype} does not match model precision {self.precision}")

        sizes = self._scale_sizes(n)
        ctx = {"n": n, "sizes": sizes, "layers": []} if keep_ctx else None
        pred = None
        featured = []
        for si, layers in enumerate(self.layers):
            hs = sizes[si]
            xs = x if hs == n else ops.resample_bilinear(x, hs, hs)
            if pred is None:
                cur = xs
            else:
                cur = np.concatenate([xs, ops.resample_bilinear(pred, hs, hs)], axis=1)
            for li, spec in enumerate(layers):
                pad = (spec.kernel - 1) // 2
                xpad = ops.replication_pad(cur, pad)
                z = ops.conv2d_forward(
                    xpad, self.params[f"s{si}.c{li}.weight"],
                    self.params[f"s{si}.c{li}.bias"], policy,
                )
                if keep_ctx:
                    ctx["layers"].append((si, li, xpad, z if spec.activation == "relu" else None))
                cur = ops.relu(z) if spec.activation == "relu" else z
            pred = cur
            if capture_featured:
                featured.append(pred)
        if keep_ctx:
            self._ctx = ctx
        if capture_featured:
            return pred, featured
        return pred

    def backward(self, grad_pred: np.ndarray, policy) -> dict[str, np.ndarray]:
        """Parameter gradients for the last keep_ctx forward pass."""
        if self._ctx is None:
            raise RuntimeError("backward() requires a forward(..., keep_ctx=True) first")
        ctx = self._ctx
        self._ctx = None
        saved = {(si, li): (xpad, z) for si, li, xpad, z in ctx["layers"]}
        grads: dict[str, np.ndarray] = {}
        grad = grad_pred
        for si in range(N_SCALES - 1, -1, -1):
            layers = self.layers[si]
            for li in range(len(layers) - 1, -1, -1):
                spec = layers[li]
                xpad, z = saved[(si, li)]
                if spec.activation == "relu":
                    grad = ops.relu_backward(grad, z)
                # the coarsest scale's first conv sees only data: skip its
                # input gradient
                need_gx = not (si == 0 and li == 0)
                gx, gw, gb = ops.conv2d_backward(
                    xpad, self.params[f"s{si}.c{li}.weight"], grad, policy,
                    need_grad_input=need_gx,
                )
                grads[f"s{si}.c{li}.weight"] = gw
                grads[f"s{si}.c{li}.bias"] = gb
                if need_gx:
                    grad = ops.replication_pad_adjoint(gx, (spec.kernel - 1) // 2)
            if si > 0:
                # input was concat(frames, upsampled coarser prediction):
                # only the prediction channel continues the chain
                coarse = ctx["sizes"][si - 1]
                grad = ops.resample_bilinear_backward(
                    np.ascontiguousarray(grad[:, N_INPUT_FRAMES:]), coarse, coarse
                )
        return grads


@lru_cache(maxsize=32)
def _stencil(n: int) -> np.ndarray:
    """Dense differentiation matrix: 4th-order central inside, 2nd-order
    one-sided/central on the two lines nearest each border, spacing 1."""
    if n < 5:
        raise ValueError(f"spatial gradient needs >= 5 points per dimension, got {n}")
    d = np.zeros((n, n))
    d[0, 0:3] = (-1.5, 2.0, -0.5)
    d[1, 0:3] = (-0.5, 0.0, 0.5)
    for i in range(2, n - 2):
        d[i, i - 2 : i + 3] = (1 / 12, -2 / 3, 0.0, 2 / 3, -1 / 12)
    d[n - 2, n - 3 : n] = (-0.5, 0.0, 0.5)
    d[n - 1, n - 3 : n] = (0.5, -2.0, 1.5)
    d.flags.writeable = False
    return d


def _stencil_for(n: int, dtype) -> np.ndarray:
    return _stencil(n).astype(dtype)


def spatial_gradient(field: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """d/dx, d/dy of (..., H, W) fields via the finite-difference stencil."""
    h, w = field.shape[-2], field.shape[-1]
    dx = field @ _stencil_for(w, field.dtype).T
    dy = _stencil_for(h, field.dtype) @ field
    return dx, dy


def loss_terms(prediction: np.ndarray, target: np.ndarray) -> tuple[float, float]:
    """(field MSE, gradient MSE) halves of the loss, unweighted."""
    if prediction.shape != target.shape:
        raise ValueError(f"shape mismatch: {prediction.shape} vs {target.shape}")
    diff = prediction - target
    dx, dy = spatial_gradient(diff)
    return float(np.mean(diff * diff)), float(np.mean(dx * dx + dy * dy))


def loss_and_grad(prediction: np.ndarray, target: np.ndarray,
                  weights: tuple[float, float] = LOSS_WEIGHTS):
    """Total loss, its two unweighted parts, and d(total)/d(prediction).

    total = w_field * mean(diff^2) + w_grad * mean(dx^2 + dy^2), means
    taken over every element of the batch.
    """
    if prediction.shape != target.shape:
        raise ValueError(f"shape mismatch: {prediction.shape} vs {target.shape}")
    w_field, w_grad = weights
    diff = prediction - target
    dx, dy = spatial_gradient(diff)
    l2 = float(np.mean(diff * diff))
    gdl = float(np.mean(dx * dx + dy * dy))
    total = w_field * l2 + w_grad * gdl

    m = diff.size
    h, w = diff.shape[-2], diff.shape[-1]
    sx = _stencil_for(w, diff.dtype)
    sy = _stencil_for(h, diff.dtype)
    grad = (2.0 * w_field / m) * diff
    grad += (2.0 * w_grad / m) * ((dx @ sx) + (sy.T @ dy))
    return total, l2, gdl, grad
