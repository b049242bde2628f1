"""
Layer operations, the Adam optimizer and a finite-difference gradient checker.

Tensors are torch tensors: reverse-mode differentiation comes from torch
autograd, the functions here pin down the conventions both networks rely on
(cross-correlation, "valid" / zero-filled "same" padding, dilation, batch-norm
modes) and validate their inputs.
"""

import math
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from src.errors import DomainError, ShapeError

PADDING_MODES = ("valid", "same")
GRADCHECK_TOL = 1e-4
# Relative errors are measured against max(|analytic|, |numeric|, REL_FLOOR)
REL_FLOOR = 1e-6


def _same_padding(length: int, kernel: int, stride: int, dilation: int) -> Tuple[int, int]:
    """Zero padding (left, right) so that the output length is ceil(length / stride)."""
    out = -(-length // stride)
    total = max((out - 1) * stride + dilation * (kernel - 1) + 1 - length, 0)
    return total // 2, total - total // 2


def conv1d(x: torch.Tensor, kernel: torch.Tensor, bias: Optional[torch.Tensor] = None,
           stride: int = 1, dilation: int = 1, padding: str = "valid") -> torch.Tensor:
    """
    out[i] = sum_t k[t] * x[i * stride + t * dilation]  (no kernel flip).

    x is [N, C_in, L] (or a bare 1-D signal), kernel is [C_out, C_in, K] (or a bare
    1-D kernel, in which case the result is 1-D too).
    """
    squeeze = x.dim() == 1 and kernel.dim() == 1
    if squeeze:
        x, kernel = x.view(1, 1, -1), kernel.view(1, 1, -1)
    if x.dim() != 3 or kernel.dim() != 3:
        raise ShapeError(f"conv1d expects [N, C, L] input and [C_out, C_in, K] kernel, got {tuple(x.shape)} and {tuple(kernel.shape)}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv1d channel mismatch: input has {x.shape[1]}, kernel expects {kernel.shape[1]}")
    if dilation < 1 or stride < 1:
        raise DomainError(f"stride and dilation must be >= 1, got {stride} and {dilation}")
    if padding not in PADDING_MODES:
        raise DomainError(f"Unknown padding mode: {padding}")

    if padding == "same":
        x = F.pad(x, _same_padding(x.shape[-1], kernel.shape[-1], stride, dilation))
    if x.shape[-1] < dilation * (kernel.shape[-1] - 1) + 1:
        raise ShapeError(f"conv1d input of length {x.shape[-1]} is shorter than the dilated kernel")

    out = F.conv1d(x, kernel, bias, stride=stride, dilation=dilation)
    return out.view(-1) if squeeze else out


def conv2d(x: torch.Tensor, kernel: torch.Tensor, bias: Optional[torch.Tensor] = None,
           stride: Union[int, Tuple[int, int]] = 1, padding: str = "valid") -> torch.Tensor:
    """2-D cross-correlation; x is [N, C_in, H, W] (or a bare 2-D image with a bare 2-D kernel)."""
    squeeze = x.dim() == 2 and kernel.dim() == 2
    if squeeze:
        x, kernel = x.view(1, 1, *x.shape), kernel.view(1, 1, *kernel.shape)
    if x.dim() != 4 or kernel.dim() != 4:
        raise ShapeError(f"conv2d expects [N, C, H, W] input and [C_out, C_in, KH, KW] kernel, got {tuple(x.shape)} and {tuple(kernel.shape)}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[1]}, kernel expects {kernel.shape[1]}")
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    if sh < 1 or sw < 1:
        raise DomainError(f"stride must be >= 1, got {stride}")
    if padding not in PADDING_MODES:
        raise DomainError(f"Unknown padding mode: {padding}")

    if padding == "same":
        top, bottom = _same_padding(x.shape[-2], kernel.shape[-2], sh, 1)
        left, right = _same_padding(x.shape[-1], kernel.shape[-1], sw, 1)
        x = F.pad(x, (left, right, top, bottom))
    if x.shape[-2] < kernel.shape[-2] or x.shape[-1] < kernel.shape[-1]:
        raise ShapeError(f"conv2d input {tuple(x.shape[-2:])} is smaller than kernel {tuple(kernel.shape[-2:])}")

    out = F.conv2d(x, kernel, bias, stride=(sh, sw))
    return out[0, 0] if squeeze else out


def batch_norm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor,
               running_mean: Optional[torch.Tensor] = None, running_var: Optional[torch.Tensor] = None,
               mode: str = "train", momentum: float = 0.1, eps: float = 1e-5) -> torch.Tensor:
    """
    Per-channel batch normalization over every axis but the channel axis (1).

    train: batch statistics, running stats updated in place by exponential moving
    average when given. infer: running statistics.
    """
    if mode not in ("train", "infer"):
        raise DomainError(f"Unknown batch-norm mode: {mode}")
    if mode == "train" and x.shape[0] < 2:
        raise DomainError("batch_norm in train mode needs a batch of at least 2")
    if mode == "infer" and (running_mean is None or running_var is None):
        raise DomainError("batch_norm in infer mode needs running statistics")
    return F.batch_norm(x, running_mean, running_var, gamma, beta,
                        training=mode == "train", momentum=momentum, eps=eps)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def leaky_relu(x: torch.Tensor, slope: float = 0.2) -> torch.Tensor:
    return F.leaky_relu(x, negative_slope=slope)


def prelu(x: torch.Tensor, slope: torch.Tensor) -> torch.Tensor:
    return F.prelu(x, slope)


def tanh(x: torch.Tensor) -> torch.Tensor:
    return torch.tanh(x)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def dense(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    if x.shape[-1] != weight.shape[-1]:
        raise ShapeError(f"dense: input features {x.shape[-1]} do not match weight {tuple(weight.shape)}")
    return F.linear(x, weight, bias)


class AdamState:
    """
    Adam moments and hyper-parameters for one parameter group.

    Wraps torch.optim.Adam (bias-corrected update); `m`, `v` and `step_count`
    expose its per-parameter state.
    """

    def __init__(self, params: Iterable[torch.Tensor], lr: float = 1e-4, beta1: float = 0.5,
                 beta2: float = 0.999, eps: float = 1e-8):
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise DomainError(f"Adam betas must lie in [0, 1), got {beta1}, {beta2}")
        if lr < 0 or eps <= 0:
            raise DomainError(f"Adam needs lr >= 0 and eps > 0, got {lr}, {eps}")
        self.params: List[torch.Tensor] = list(params)
        self.optimizer = torch.optim.Adam(self.params, lr=lr, betas=(beta1, beta2), eps=eps, foreach=False)

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    @property
    def beta1(self) -> float:
        return self.optimizer.param_groups[0]["betas"][0]

    @property
    def beta2(self) -> float:
        return self.optimizer.param_groups[0]["betas"][1]

    @property
    def eps(self) -> float:
        return self.optimizer.param_groups[0]["eps"]

    @property
    def step_count(self) -> int:
        state = self.optimizer.state.get(self.params[0], {}) if self.params else {}
        return int(state["step"]) if "step" in state else 0

    @property
    def m(self) -> List[Optional[torch.Tensor]]:
        return [self.optimizer.state.get(p, {}).get("exp_avg") for p in self.params]

    @property
    def v(self) -> List[Optional[torch.Tensor]]:
        return [self.optimizer.state.get(p, {}).get("exp_avg_sq") for p in self.params]

    def zero_grad(self):
        self.optimizer.zero_grad(set_to_none=True)


def adam_step(params: Sequence[torch.Tensor], grads: Optional[Sequence[torch.Tensor]], state: AdamState):
    """
    One bias-corrected Adam update of `params` in place.

    `grads` may be None to use the gradients already accumulated in `.grad`.
    """
    params = list(params)
    if len(params) != len(state.params) or any(p is not q for p, q in zip(params, state.params)):
        raise ShapeError("adam_step: params do not match the optimizer state")
    if grads is not None:
        grads = list(grads)
        if len(grads) != len(params):
            raise ShapeError(f"adam_step: {len(grads)} gradients for {len(params)} parameters")
        for p, g in zip(params, grads):
            if g.shape != p.shape:
                raise ShapeError(f"adam_step: gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
            p.grad = g.detach().to(p.dtype).clone()
    state.optimizer.step()
    return params, state


def grad_check(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, h: Optional[float] = None) -> float:
    """
    Max relative error between the reverse-mode gradient of scalar f at x and
    central finite differences (f(x + h e_i) - f(x - h e_i)) / 2h, in float64.

    With h=None the step is 1e-5 * max(1, |x_i|) per coordinate.
    """
    x = x.detach().to(torch.float64).clone().requires_grad_(True)
    y = f(x)
    if y.numel() != 1:
        raise ShapeError(f"grad_check needs a scalar function, got output shape {tuple(y.shape)}")
    (analytic,) = torch.autograd.grad(y, x)
    analytic = analytic.reshape(-1)

    point = x.detach().clone()
    flat = point.view(-1)
    worst = 0.0
    with torch.no_grad():
        for i in range(flat.numel()):
            original = flat[i].item()
            step = h if h is not None else 1e-5 * max(1.0, abs(original))
            flat[i] = original + step
            f_plus = f(point).item()
            flat[i] = original - step
            f_minus = f(point).item()
            flat[i] = original
            numeric = (f_plus - f_minus) / (2.0 * step)
            exact = analytic[i].item()
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), REL_FLOOR)
            if not math.isfinite(error):
                return math.inf
            worst = max(worst, error)
    return worst


def _weighted_sum(out: torch.Tensor, generator: torch.Generator) -> Callable[[torch.Tensor], torch.Tensor]:
    weights = torch.randn(out.shape, generator=generator, dtype=torch.float64)
    return lambda y: (y * weights).sum()


def layer_suite(seed: int) -> List[Tuple[str, Callable[[torch.Tensor], torch.Tensor], torch.Tensor]]:
    """
    (name, scalar function, point) triples covering every differentiable layer,
    with inputs and parameters drawn from `seed`. Each layer is checked with
    respect to its input and its weights.
    """
    g = torch.Generator().manual_seed(seed)

    def rand(*shape):
        return torch.randn(*shape, generator=g, dtype=torch.float64)

    def away_from_zero(*shape):
        # Keeps piecewise-linear activations away from their kink.
        u = rand(*shape)
        return torch.sign(u) * (0.1 + u.abs())

    cases = []

    for d in (1, 2, 3, 15):
        x, k, b = rand(2, 2, 40), rand(3, 2, 3), rand(3)
        reduce = _weighted_sum(conv1d(x, k, b, dilation=d, padding="same"), g)
        cases.append((f"conv1d[dilation={d}].input", lambda t, k=k, b=b, d=d, r=reduce: r(conv1d(t, k, b, dilation=d, padding="same")), x))
        cases.append((f"conv1d[dilation={d}].kernel", lambda t, x=x, b=b, d=d, r=reduce: r(conv1d(x, t, b, dilation=d, padding="same")), k))

    x, k = rand(2, 2, 6, 5), rand(3, 2, 3, 3)
    reduce = _weighted_sum(conv2d(x, k, stride=2, padding="same"), g)
    cases.append(("conv2d.input", lambda t, k=k, r=reduce: r(conv2d(t, k, stride=2, padding="same")), x))
    cases.append(("conv2d.kernel", lambda t, x=x, r=reduce: r(conv2d(x, t, stride=2, padding="same")), k))

    x, gamma, beta = rand(4, 3, 5), rand(3), rand(3)
    reduce = _weighted_sum(x, g)
    cases.append(("batch_norm.input", lambda t, gm=gamma, bt=beta, r=reduce: r(batch_norm(t, gm, bt)), x))
    cases.append(("batch_norm.gamma", lambda t, x=x, bt=beta, r=reduce: r(batch_norm(x, t, bt)), gamma))

    x = away_from_zero(3, 4, 5)
    slope = torch.rand(4, generator=g, dtype=torch.float64) * 0.5
    reduce = _weighted_sum(x, g)
    cases.append(("relu", lambda t, r=reduce: r(relu(t)), x))
    cases.append(("leaky_relu", lambda t, r=reduce: r(leaky_relu(t, 0.2)), x))
    cases.append(("prelu.input", lambda t, s=slope, r=reduce: r(prelu(t, s)), x))
    cases.append(("prelu.slope", lambda t, x=x, r=reduce: r(prelu(x, t)), slope))
    cases.append(("tanh", lambda t, r=reduce: r(tanh(t)), x))
    cases.append(("sigmoid", lambda t, r=reduce: r(sigmoid(t)), x))

    x, w, b = rand(3, 6), rand(4, 6), rand(4)
    reduce = _weighted_sum(dense(x, w, b), g)
    cases.append(("dense.input", lambda t, w=w, b=b, r=reduce: r(dense(t, w, b)), x))
    cases.append(("dense.weight", lambda t, x=x, b=b, r=reduce: r(dense(x, t, b)), w))

    return cases


def run_layer_checks(seeds: Iterable[int], tol: float = GRADCHECK_TOL) -> List[Tuple[str, int, float, bool]]:
    """Run `layer_suite` for every seed; rows are (name, seed, max rel err, passed)."""
    rows = []
    for seed in seeds:
        for name, fn, point in layer_suite(seed):
            error = grad_check(fn, point)
            rows.append((name, seed, error, error < tol))
    return rows
