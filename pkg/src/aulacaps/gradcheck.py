"""Finite-difference checks of every layer, the capsule block and the whole model.

Each check runs in float64 and compares tape gradients of a random linear
read-out of the layer output against central differences. Layer checks are
coordinate-wise; the end-to-end check uses random directions per parameter
tensor to stay fast.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import capsules as caps
from . import layers as nn
from . import losses as L
from . import model as M
from .autodiff import Tensor

F64 = np.float64
LAYER_TOL = 1e-4
END_TO_END_TOL = 1e-3
# tensors whose gradient is this far below the layer's overall gradient norm are
# compared in absolute terms (their numeric side is round-off)
SCALE_FLOOR = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tolerance


def _readout(out: Tensor, rng) -> Tensor:
    r = Tensor(rng.standard_normal(out.shape), dtype=F64)
    return ad.tsum(out * r)


def check_function(fn, inputs: dict[str, np.ndarray], eps: float = 1e-6) -> float:
    """Max relative error over all inputs of scalar ``fn(**tensors)``."""
    tensors = {k: Tensor(v, requires_grad=True, dtype=F64) for k, v in inputs.items()}
    with ad.use_tape(ad.Tape()):
        ad.backward(fn(**tensors))
    pairs = []
    for k, v in inputs.items():
        def f(x, k=k):
            args = {n: Tensor(x if n == k else inputs[n], dtype=F64) for n in inputs}
            with ad.no_grad():
                return fn(**args).item()

        g = tensors[k].grad if tensors[k].grad is not None else np.zeros_like(v)
        pairs.append((g, ad.finite_difference_grad(f, v, eps)))
    return _worst(pairs)


def _worst(pairs) -> float:
    """Max per-tensor relative error, floored at a fraction of the overall gradient norm."""
    scale = np.sqrt(sum(float((a.astype(F64) ** 2).sum()) for a, _ in pairs))
    return max(ad.relative_error(a, n, SCALE_FLOOR * scale) for a, n in pairs)


def check_module(module: nn.Module, make_out, x: np.ndarray, rng, eps: float = 1e-6) -> float:
    """Check d(readout)/d(x) and d(readout)/d(every parameter) of a float64 module."""
    module.astype(F64)
    r = rng.standard_normal(make_out(module, Tensor(x, dtype=F64)).shape)

    def scalar(xt):
        return ad.tsum(make_out(module, xt) * Tensor(r, dtype=F64))

    params = list(module.named_parameters())
    xt = Tensor(x, requires_grad=True, dtype=F64)
    ad.zero_grad(p for _, p in params)
    with ad.use_tape(ad.Tape()):
        ad.backward(scalar(xt))
    pairs = [(xt.grad, ad.finite_difference_grad(lambda v: _eval(scalar, Tensor(v, dtype=F64)), x, eps))]
    for _, p in params:
        analytic = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        base = p.data.copy()

        def f(v, p=p):
            p.data = v
            return _eval(scalar, Tensor(x, dtype=F64))

        numeric = ad.finite_difference_grad(f, base, eps)
        p.data = base
        pairs.append((analytic, numeric))
    ad.zero_grad(p for _, p in params)
    return _worst(pairs)


def _eval(scalar, xt) -> float:
    with ad.no_grad():
        return scalar(xt).item()


def _train_mode_call(m, x):
    # running statistics must not drift between finite-difference evaluations
    for sub in m.modules():
        if isinstance(sub, nn.BatchNorm):
            sub.track_stats = False
    m.train()
    return m(x)


def layer_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []

    def add(name, err):
        out.append(CheckResult(name, err, LAYER_TOL))

    add("conv2d", check_module(nn.Conv(2, 3, (3, 3), rng, stride=2, padding=1), lambda m, x: m(x),
                               rng.standard_normal((2, 2, 5, 5)), rng))
    add("conv3d", check_module(nn.Conv(2, 2, (3, 3, 3), rng), lambda m, x: m(x),
                               rng.standard_normal((1, 2, 3, 4, 4)), rng))
    add("transposed_conv2d", check_module(nn.ConvTranspose2d(2, 2, 5, rng), lambda m, x: m(x),
                                          rng.standard_normal((1, 2, 3, 3)), rng))
    add("linear", check_module(nn.Linear(6, 4, rng), lambda m, x: m(x), rng.standard_normal((3, 6)), rng))
    add("batchnorm", check_module(nn.BatchNorm(3), _train_mode_call, rng.standard_normal((4, 3, 2, 2)), rng))
    add("leaky_relu", check_function(lambda x: _readout(ad.leaky_relu(x, 0.2), np.random.default_rng(seed)),
                                     {"x": rng.standard_normal((4, 5))}))
    add("relu", check_function(lambda x: _readout(ad.relu(x), np.random.default_rng(seed)),
                               {"x": rng.standard_normal((4, 5))}))
    add("tanh", check_function(lambda x: _readout(ad.tanh(x), np.random.default_rng(seed)),
                               {"x": rng.standard_normal((4, 5))}))
    add("maxpool2d", check_function(lambda x: _readout(nn.maxpool(x, 2), np.random.default_rng(seed)),
                                    {"x": rng.standard_normal((2, 2, 4, 5))}))
    add("maxpool3d", check_function(lambda x: _readout(nn.maxpool(x, 2), np.random.default_rng(seed)),
                                    {"x": rng.standard_normal((1, 2, 5, 4, 4))}))
    add("residual_block_2d", check_module(nn.ResidualBlock2d(2, 3, rng), _train_mode_call,
                                          rng.standard_normal((2, 2, 4, 4)), rng))
    add("conv_block_3d", check_module(nn.ConvBlock3d(1, 2, rng, kernel=3), _train_mode_call,
                                      rng.standard_normal((2, 1, 3, 3, 3)), rng))
    add("squash", check_function(lambda s: _readout(caps.squash(s), np.random.default_rng(seed)),
                                 {"s": rng.standard_normal((3, 4, 5))}))
    add("capsule_lengths", check_function(lambda v: _readout(caps.capsule_lengths(v), np.random.default_rng(seed)),
                                          {"v": rng.standard_normal((3, 4, 5))}))
    add("primary_capsules", check_function(
        lambda f: _readout(caps.primary_capsules(f, 4), np.random.default_rng(seed)),
        {"f": rng.standard_normal((2, 8, 2, 2))}))
    add("capsule_block", capsule_block_check(rng))
    labels = rng.integers(0, 2, (3, 12))
    loss_cfg = L.LossConfig(weights=rng.uniform(0.5, 2.0, 12))
    add("margin_loss", check_function(lambda p: L.margin_loss(p, labels, loss_cfg),
                                      {"p": rng.uniform(0.02, 0.98, (3, 12))}))
    add("reconstruction_loss", check_function(lambda a, b: L.reconstruction_loss(a, b),
                                              {"a": rng.standard_normal((2, 5)), "b": rng.standard_normal((2, 5))}))
    return out


def capsule_block_check(rng, iterations: int = 3) -> float:
    """Votes + routing + lengths, with the couplings pinned at the evaluation point."""
    u = caps._squash_np(rng.standard_normal((2, 6, 4)))
    W = rng.standard_normal((6, 3, 5, 4)) * 0.5
    with ad.no_grad():
        _, state = caps.route(Tensor(u, dtype=F64), Tensor(W, dtype=F64), iterations)
    r = rng.standard_normal((2, 3))

    def fn(u, W):
        with caps.pinned_couplings(state.couplings):
            v, _ = caps.route(u, W, iterations)
        return ad.tsum(caps.capsule_lengths(v) * Tensor(r, dtype=F64))

    return check_function(fn, {"u": u, "W": W})


def tiny_config() -> M.ModelConfig:
    return M.desk_config(
        stem2d_filters=2, stem2d_kernel=3, res_filters=(2, 2), caps2d_filters=16,
        stem3d_filters=2, stem3d_kernel=3, block3d_filters=(2, 2), caps3d_filters=16,
        caps_kernel=3, decoder_seed_channels=2, decoder_filters=(2, 2, 2, 2), decoder_kernel=3,
    )


def end_to_end_check(seed: int = 0, directions: int = 2, eps: float = 1e-6, debug: bool = False):
    """Total loss of a tiny model: input and every parameter tensor, along random directions."""
    rng = np.random.default_rng(seed)
    cfg = tiny_config()
    model = M.build(cfg, seed=seed).astype(F64)
    for sub in model.modules():
        if isinstance(sub, nn.BatchNorm):
            sub.track_stats = False
    # zero-initialised biases leave ReLU inputs exactly on the kink
    for name, p in model.named_parameters():
        if name.endswith("bias") or name.endswith("beta"):
            p.data = rng.uniform(-0.1, 0.1, p.shape)
    x = rng.uniform(-1, 1, (2, cfg.window_length, cfg.input_size, cfg.input_size, 1))
    y = rng.integers(0, 2, (2, cfg.au_count)).astype(F64)
    loss_cfg = L.LossConfig(weights=rng.uniform(0.5, 2.0, cfg.au_count))

    with ad.no_grad():
        pinned = M.forward(model, Tensor(x, dtype=F64), True, y).routing.couplings

    # the reconstruction target is data, not a function of the perturbed input
    target = M.to_channel_first(Tensor(x, dtype=F64), cfg)[:, :, cfg.window_N].detach()

    def loss_of(xt):
        with caps.pinned_couplings(pinned):
            res = M.forward(model, xt, True, y)
        rec = L.reconstruction_loss(target, res.reconstruction)
        return L.total_loss(L.margin_loss(res.au_probs, y, loss_cfg), rec, loss_cfg)

    params = list(model.named_parameters())
    xt = Tensor(x, requires_grad=True, dtype=F64)
    ad.zero_grad(p for _, p in params)
    with ad.use_tape(ad.Tape()):
        ad.backward(loss_of(xt))
    targets = [("input", xt, x)] + [(n, p, p.data.copy()) for n, p in params]
    pairs = []
    for name, t, base in targets:
        g = t.grad if t.grad is not None else np.zeros_like(base)
        a_dir, n_dir = [], []
        for _ in range(directions):
            d = rng.standard_normal(base.shape)
            d /= np.linalg.norm(d)
            analytic = float((g * d).sum())

            def f(a, t=t, base=base, d=d, name=name):
                moved = base + a[0] * d
                if name == "input":
                    return _eval(loss_of, Tensor(moved, dtype=F64))
                t.data = moved
                try:
                    return _eval(loss_of, Tensor(x, dtype=F64))
                finally:
                    t.data = base

            a_dir.append(analytic)
            n_dir.append(float(ad.finite_difference_grad(f, np.zeros(1), eps)[0]))
        pairs.append((np.array(a_dir), np.array(n_dir)))
    ad.zero_grad(p for _, p in params)
    if debug:
        return [(name, a, n) for (name, _, _), (a, n) in zip(targets, pairs)]
    return _worst(pairs)


def run_suite(seeds=(0, 1, 2, 3, 4)) -> tuple[list[CheckResult], float]:
    """Per-check worst error over ``seeds``; returns results and elapsed seconds."""
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    for s in seeds:
        for r in layer_checks(s):
            worst[r.name] = max(worst.get(r.name, 0.0), r.max_rel_error)
        worst["end_to_end"] = max(worst.get("end_to_end", 0.0), end_to_end_check(s))
    results = [CheckResult(n, e, END_TO_END_TOL if n == "end_to_end" else LAYER_TOL) for n, e in worst.items()]
    return results, time.perf_counter() - t0
