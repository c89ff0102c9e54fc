"""Classifier backbones shared by the student and teacher.

A model is a plain ordered dict of named parameter arrays plus an
:class:`Architecture` object that knows how to run it.  Every forward pass
yields the globally average-pooled last-convolution activation (the feature
vector ``z``) and softmax probabilities over the three quality classes; the
feature dimension is fixed per architecture, independent of input masking.

Two families are provided:

* ``small_cnn`` (default): four 3x3-conv/ReLU/2x-maxpool blocks with widths
  16-32-64-64, global average pooling to a 64-d feature, one affine head.
  Trains in minutes on a CPU at 64x64 inputs.
* ``resnet34``: the standard 34-layer residual network with batch norm,
  for running the method at clinical scale.  Functionally supported but
  slow in this pure-numpy implementation.

The teacher is never gradient-trained: its parameters track the student as
an exponential moving average via :func:`ema_update`, batch-norm running
statistics included.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers
from .data import Slice
from .errors import ConfigError

Params = dict[str, np.ndarray]


@dataclass(eq=False)
class ForwardOutput:
    """Single-input forward result: pooled feature z and class probabilities."""

    feature: np.ndarray
    probs: np.ndarray


@dataclass(eq=False)
class BatchResult:
    """Batched forward result; ``tape`` is kept only when grads are needed."""

    features: np.ndarray  # (B, F)
    logits: np.ndarray  # (B, 3)
    probs: np.ndarray  # (B, 3)
    tape: list | None = None
    stat_updates: Params | None = None  # refreshed batch-norm running stats


def _as_batch(x: np.ndarray, dtype) -> np.ndarray:
    x = np.asarray(x, dtype=dtype)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ValueError(f"expected (H, W) or (B, H, W) input, got shape {x.shape}")
    return x[:, None, :, :]  # single grayscale channel


class Architecture:
    """Shared plumbing; subclasses define the convolutional trunk."""

    arch_id: str = ""
    n_classes: int = 3
    feature_dim: int = 0
    buffer_names: frozenset[str] = frozenset()

    def __init__(self, image_size: int):
        self.image_size = image_size

    # -- subclass hooks -----------------------------------------------------
    def _trunk_forward(self, params: Params, h, *, training, need_grad, tape, updates):
        raise NotImplementedError

    def _trunk_backward(self, params: Params, tape, dh, grads):
        raise NotImplementedError

    def _init_trunk(self, rng, dtype) -> Params:
        raise NotImplementedError

    # -- public surface -----------------------------------------------------
    def init_params(self, rng: np.random.Generator, dtype=np.float32) -> Params:
        params = self._init_trunk(rng, dtype)
        params["head.w"] = _he(rng, (self.feature_dim, self.n_classes), self.feature_dim, dtype)
        params["head.b"] = np.zeros(self.n_classes, dtype=dtype)
        return params

    def forward_batch(
        self,
        params: Params,
        x: np.ndarray,
        *,
        training: bool = False,
        need_grad: bool = False,
        update_stats: bool = False,
    ) -> BatchResult:
        dtype = params["head.w"].dtype
        h = _as_batch(x, dtype)
        if h.shape[2] != self.image_size or h.shape[3] != self.image_size:
            raise ValueError(
                f"input is {h.shape[2]}x{h.shape[3]}, model expects "
                f"{self.image_size}x{self.image_size}"
            )
        tape: list | None = [] if need_grad else None
        updates: Params | None = {} if (training and update_stats) else None
        h = self._trunk_forward(
            params, h, training=training, need_grad=need_grad, tape=tape, updates=updates
        )
        z, gap_shape = layers.global_avg_pool_forward(h)
        logits, dense_x = layers.dense_forward(z, params["head.w"], params["head.b"])
        layers.check_finite(logits, "head")
        probs = layers.softmax(logits)
        if tape is not None:
            tape.append(("gap", gap_shape))
            tape.append(("dense", dense_x, params["head.w"]))
        return BatchResult(
            features=z, logits=logits, probs=probs, tape=tape, stat_updates=updates
        )

    def backward(
        self,
        params: Params,
        tape: list,
        d_logits: np.ndarray,
        d_feature: np.ndarray | None = None,
    ) -> Params:
        """Gradients of a scalar loss given its logit and feature gradients."""
        if tape is None:
            raise ValueError("forward pass was run without need_grad=True")
        op = tape[-1]
        assert op[0] == "dense"
        dz, dw, db = layers.dense_backward(d_logits, op[1], op[2])
        grads: Params = {"head.w": dw, "head.b": db}
        if d_feature is not None:
            dz = dz + d_feature
        op = tape[-2]
        assert op[0] == "gap"
        dh = layers.global_avg_pool_backward(dz, op[1])
        self._trunk_backward(params, tape[:-2], dh, grads)
        return grads

    def forward(
        self, params: Params, s: Slice | np.ndarray, perturbation=None
    ) -> ForwardOutput:
        """Single-slice inference; applies ``perturbation`` to the input if given."""
        pixels = s.pixels if isinstance(s, Slice) else np.asarray(s)
        if perturbation is not None:
            pixels = perturbation.apply(pixels)
        res = self.forward_batch(params, pixels[None], training=False, need_grad=False)
        return ForwardOutput(feature=res.features[0], probs=res.probs[0])


def _he(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


# ---------------------------------------------------------------------------
# Small reference CNN
# ---------------------------------------------------------------------------

class SmallCNN(Architecture):
    """conv3x3/ReLU/maxpool2 blocks, then global average pool and affine head."""

    def __init__(self, image_size: int, channels: tuple[int, ...] = (16, 32, 64, 64)):
        super().__init__(image_size)
        if image_size % (2 ** len(channels)) != 0:
            raise ConfigError(
                f"image_size {image_size} not divisible by {2 ** len(channels)}"
            )
        self.channels = tuple(channels)
        self.feature_dim = channels[-1]
        self.arch_id = "small_cnn" if channels == (16, 32, 64, 64) else (
            "small_cnn:" + ",".join(str(c) for c in channels)
        )

    def _init_trunk(self, rng, dtype) -> Params:
        params: Params = {}
        c_in = 1
        for i, c_out in enumerate(self.channels, start=1):
            fan_in = c_in * 9
            params[f"conv{i}.w"] = _he(rng, (c_out, c_in, 3, 3), fan_in, dtype)
            params[f"conv{i}.b"] = np.zeros(c_out, dtype=dtype)
            c_in = c_out
        return params

    def _trunk_forward(self, params, h, *, training, need_grad, tape, updates):
        for i in range(1, len(self.channels) + 1):
            h, c_conv = layers.conv2d_forward(
                h, params[f"conv{i}.w"], params[f"conv{i}.b"], stride=1, pad=1
            )
            layers.check_finite(h, f"conv{i}")
            h, mask = layers.relu_forward(h)
            h, c_pool = layers.maxpool_forward(h, k=2, stride=2)
            if tape is not None:
                tape.append(("block", i, c_conv, mask, c_pool))
        return h

    def _trunk_backward(self, params, tape, dh, grads):
        for op in reversed(tape):
            _, i, c_conv, mask, c_pool = op
            dh = layers.maxpool_backward(dh, c_pool)
            dh = layers.relu_backward(dh, mask)
            dh, dw, db = layers.conv2d_backward(dh, c_conv)
            grads[f"conv{i}.w"] = dw
            grads[f"conv{i}.b"] = db
        return dh


# ---------------------------------------------------------------------------
# ResNet-34
# ---------------------------------------------------------------------------

_RESNET34_STAGES = ((64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2))


class ResNet34(Architecture):
    """Standard 34-layer residual network (basic blocks, batch norm)."""

    arch_id = "resnet34"

    def __init__(self, image_size: int):
        super().__init__(image_size)
        if image_size % 32 != 0:
            raise ConfigError("resnet34 needs image_size divisible by 32")
        self.feature_dim = _RESNET34_STAGES[-1][0]
        names: list[str] = []
        self._blocks: list[tuple[str, int, int, int, bool]] = []
        c_in = 64
        for stage, (width, depth, stride) in enumerate(_RESNET34_STAGES, start=1):
            for b in range(depth):
                s = stride if b == 0 else 1
                down = b == 0 and (s != 1 or c_in != width)
                prefix = f"layer{stage}.{b}"
                self._blocks.append((prefix, c_in, width, s, down))
                names += [f"{prefix}.bn1.{x}" for x in ("running_mean", "running_var")]
                names += [f"{prefix}.bn2.{x}" for x in ("running_mean", "running_var")]
                if down:
                    names += [
                        f"{prefix}.down.bn.{x}" for x in ("running_mean", "running_var")
                    ]
                c_in = width
        names += ["stem.bn.running_mean", "stem.bn.running_var"]
        self.buffer_names = frozenset(names)

    def _init_bn(self, params: Params, prefix: str, c: int, dtype) -> None:
        params[f"{prefix}.gamma"] = np.ones(c, dtype=dtype)
        params[f"{prefix}.beta"] = np.zeros(c, dtype=dtype)
        params[f"{prefix}.running_mean"] = np.zeros(c, dtype=dtype)
        params[f"{prefix}.running_var"] = np.ones(c, dtype=dtype)

    def _init_trunk(self, rng, dtype) -> Params:
        params: Params = {}
        params["stem.conv.w"] = _he(rng, (64, 1, 7, 7), 49, dtype)
        self._init_bn(params, "stem.bn", 64, dtype)
        for prefix, c_in, c_out, _, down in self._blocks:
            params[f"{prefix}.conv1.w"] = _he(rng, (c_out, c_in, 3, 3), c_in * 9, dtype)
            self._init_bn(params, f"{prefix}.bn1", c_out, dtype)
            params[f"{prefix}.conv2.w"] = _he(rng, (c_out, c_out, 3, 3), c_out * 9, dtype)
            self._init_bn(params, f"{prefix}.bn2", c_out, dtype)
            if down:
                params[f"{prefix}.down.conv.w"] = _he(rng, (c_out, c_in, 1, 1), c_in, dtype)
                self._init_bn(params, f"{prefix}.down.bn", c_out, dtype)
        return params

    def _bn(self, params, prefix, h, *, training, updates):
        y, cache, new_mean, new_var = layers.batchnorm_forward(
            h,
            params[f"{prefix}.gamma"],
            params[f"{prefix}.beta"],
            params[f"{prefix}.running_mean"],
            params[f"{prefix}.running_var"],
            training=training,
        )
        if updates is not None:
            updates[f"{prefix}.running_mean"] = new_mean
            updates[f"{prefix}.running_var"] = new_var
        return y, cache

    def _conv_bn(self, params, conv, bn, h, stride, pad, *, training, updates):
        w = params[f"{conv}.w"]
        zero_b = np.zeros(w.shape[0], dtype=w.dtype)
        h, c_conv = layers.conv2d_forward(h, w, zero_b, stride=stride, pad=pad)
        h, c_bn = self._bn(params, bn, h, training=training, updates=updates)
        layers.check_finite(h, conv)
        return h, (c_conv, c_bn)

    def _trunk_forward(self, params, h, *, training, need_grad, tape, updates):
        h, c_stem = self._conv_bn(
            params, "stem.conv", "stem.bn", h, 2, 3, training=training, updates=updates
        )
        h, stem_mask = layers.relu_forward(h)
        h, c_pool = layers.maxpool_forward(h, k=3, stride=2, pad=1)
        if tape is not None:
            tape.append(("stem", c_stem, stem_mask, c_pool))
        for prefix, _, _, stride, down in self._blocks:
            identity = h
            out, c1 = self._conv_bn(
                params, f"{prefix}.conv1", f"{prefix}.bn1", h, stride, 1,
                training=training, updates=updates,
            )
            out, m1 = layers.relu_forward(out)
            out, c2 = self._conv_bn(
                params, f"{prefix}.conv2", f"{prefix}.bn2", out, 1, 1,
                training=training, updates=updates,
            )
            c_down = None
            if down:
                identity, c_down = self._conv_bn(
                    params, f"{prefix}.down.conv", f"{prefix}.down.bn", h, stride, 0,
                    training=training, updates=updates,
                )
            out = out + identity
            out, m2 = layers.relu_forward(out)
            if tape is not None:
                tape.append(("resblock", prefix, c1, m1, c2, c_down, m2))
            h = out
        return h

    def _unwind_conv_bn(self, dh, conv_name, caches, grads):
        c_conv, c_bn = caches
        dh, dgamma, dbeta = layers.batchnorm_backward(dh, c_bn)
        bn_name = conv_name.replace("conv", "bn") if ".down." not in conv_name else (
            conv_name.replace("down.conv", "down.bn")
        )
        grads[f"{bn_name}.gamma"] = dgamma
        grads[f"{bn_name}.beta"] = dbeta
        dh, dw, _ = layers.conv2d_backward(dh, c_conv)
        grads[f"{conv_name}.w"] = dw
        return dh

    def _trunk_backward(self, params, tape, dh, grads):
        for op in reversed(tape):
            if op[0] == "resblock":
                _, prefix, c1, m1, c2, c_down, m2 = op
                dh = layers.relu_backward(dh, m2)
                d_identity = dh
                dmain = self._unwind_conv_bn(dh, f"{prefix}.conv2", c2, grads)
                dmain = layers.relu_backward(dmain, m1)
                dmain = self._unwind_conv_bn(dmain, f"{prefix}.conv1", c1, grads)
                if c_down is not None:
                    d_identity = self._unwind_conv_bn(
                        d_identity, f"{prefix}.down.conv", c_down, grads
                    )
                dh = dmain + d_identity
            else:
                _, c_stem, stem_mask, c_pool = op
                dh = layers.maxpool_backward(dh, c_pool)
                dh = layers.relu_backward(dh, stem_mask)
                dh = self._unwind_conv_bn(dh, "stem.conv", c_stem, grads)
        return dh


# ---------------------------------------------------------------------------
# Registry, cloning, EMA
# ---------------------------------------------------------------------------

def build_architecture(arch_id: str, image_size: int) -> Architecture:
    """Instantiate an architecture by id (``small_cnn``, ``tiny_cnn``, ``resnet34``)."""
    if arch_id == "small_cnn":
        return SmallCNN(image_size)
    if arch_id == "tiny_cnn":
        return SmallCNN(image_size, channels=(8, 16))
    if arch_id.startswith("small_cnn:"):
        channels = tuple(int(c) for c in arch_id.split(":", 1)[1].split(","))
        return SmallCNN(image_size, channels=channels)
    if arch_id == "resnet34":
        return ResNet34(image_size)
    raise ConfigError(f"unknown architecture id {arch_id!r}")


def clone_params(params: Params) -> Params:
    """Deep copy; mutating the clone never touches the original."""
    return {name: arr.copy() for name, arr in params.items()}


def ema_update(teacher: Params, student: Params, alpha: float) -> Params:
    """teacher <- alpha * teacher + (1 - alpha) * student, entry by entry.

    Applies to every entry, batch-norm running statistics included.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if teacher.keys() != student.keys():
        raise ValueError("teacher and student parameter names differ")
    out: Params = {}
    for name, t in teacher.items():
        s = student[name]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {name}: {t.shape} vs {s.shape}")
        out[name] = alpha * t + (1.0 - alpha) * s
    return out
