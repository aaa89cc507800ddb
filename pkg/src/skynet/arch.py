"""Declarative network specifications and their evaluation.

A network is an ordered list of bundles (short layer sequences), pooling
positions between bundles, at most one bypass connection carrying a
space-to-depth-reordered feature map forward, and a detection head that
emits 10 channels (2 anchors x 5 values). Everything here is immutable;
``forward`` is a pure function of (spec, weights, input).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ShapeError, ValidationError
from .tensor import Array, ConvWeights

DW_CONV3 = "dw_conv3"
PW_CONV1 = "pw_conv1"
BATCHNORM = "batchnorm"
RELU = "relu"
RELU6 = "relu6"
MAXPOOL2 = "maxpool2"
SPACE_TO_DEPTH = "space_to_depth"
BYPASS_CONCAT = "bypass_concat"

LAYER_KINDS = frozenset({
    DW_CONV3, PW_CONV1, BATCHNORM, RELU, RELU6, MAXPOOL2,
    SPACE_TO_DEPTH, BYPASS_CONCAT,
})
CONV_KINDS = frozenset({DW_CONV3, PW_CONV1})

# synthesized plan step: reorder + stash the bypass tensor at its source
_STASH = "stash_reorder"


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a bundle or head."""

    kind: str
    out_channels: int | None = None   # pw_conv1 only
    source: int | None = None         # bypass_concat only: source bundle index

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValidationError(f"unknown layer kind {self.kind!r}")
        if self.kind == PW_CONV1:
            if self.out_channels is None or self.out_channels < 1:
                raise ValidationError("pw_conv1 needs out_channels >= 1")
        elif self.out_channels is not None:
            raise ValidationError(f"{self.kind} takes no out_channels")
        if self.kind == BYPASS_CONCAT:
            if self.source is None or self.source < 0:
                raise ValidationError("bypass_concat needs a source bundle index")
        elif self.source is not None:
            raise ValidationError(f"{self.kind} takes no source")

    @staticmethod
    def dw() -> "LayerSpec":
        return LayerSpec(DW_CONV3)

    @staticmethod
    def pw(out_channels: int) -> "LayerSpec":
        return LayerSpec(PW_CONV1, out_channels=out_channels)

    @staticmethod
    def bn() -> "LayerSpec":
        return LayerSpec(BATCHNORM)

    @staticmethod
    def act() -> "LayerSpec":
        return LayerSpec(RELU)

    @staticmethod
    def act6() -> "LayerSpec":
        return LayerSpec(RELU6)

    @staticmethod
    def pool() -> "LayerSpec":
        return LayerSpec(MAXPOOL2)

    @staticmethod
    def reorder() -> "LayerSpec":
        return LayerSpec(SPACE_TO_DEPTH)

    @staticmethod
    def bypass(source: int) -> "LayerSpec":
        return LayerSpec(BYPASS_CONCAT, source=source)


@dataclass(frozen=True)
class Bundle:
    """A short ordered layer sequence used as a repeatable building block."""

    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValidationError("bundle must contain at least one layer")


@dataclass(frozen=True)
class NetSpec:
    """Full network description: bundles, pooling, optional bypass, head.

    The head is addressed as section index ``len(bundles)`` wherever layers
    are keyed by (section, layer).
    """

    input_shape: tuple[int, int, int]
    bundles: tuple[Bundle, ...]
    pool_after: frozenset[int] = field(default_factory=frozenset)
    head: tuple[LayerSpec, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "bundles", tuple(self.bundles))
        object.__setattr__(self, "pool_after", frozenset(int(i) for i in self.pool_after))
        object.__setattr__(self, "head", tuple(self.head))
        if len(self.input_shape) != 3:
            raise ValidationError(f"input_shape must be (C,H,W), got {self.input_shape}")

    @property
    def head_section(self) -> int:
        return len(self.bundles)

    @property
    def bypass(self) -> tuple[int, int] | None:
        """(source bundle index, destination section index), or None."""
        for section, layers in self._sections():
            for layer in layers:
                if layer.kind == BYPASS_CONCAT:
                    return layer.source, section
        return None

    def _sections(self) -> Iterator[tuple[int, tuple[LayerSpec, ...]]]:
        for i, bundle in enumerate(self.bundles):
            yield i, bundle.layers
        yield self.head_section, self.head


@dataclass(frozen=True)
class Step:
    """One executable unit of a network plan."""

    kind: str
    section: int
    layer: int            # -1 for synthesized pool / stash steps
    label: str
    out_channels: int | None = None
    source: int | None = None
    weight_key: tuple[int, int] | None = None


def plan(net: NetSpec) -> list[Step]:
    """Flatten a spec into execution order.

    Pools declared in ``pool_after`` run after their bundle; the bypass
    tensor is reordered and stashed at its source bundle's output, before
    any pool at that position.
    """
    bypass = net.bypass
    steps: list[Step] = []

    def layer_step(section: int, j: int, layer: LayerSpec, prefix: str) -> Step:
        key = (section, j) if layer.kind in (DW_CONV3, PW_CONV1, BATCHNORM) else None
        return Step(
            kind=layer.kind, section=section, layer=j,
            label=f"{prefix}.layer{j}({layer.kind})",
            out_channels=layer.out_channels, source=layer.source, weight_key=key,
        )

    for i, bundle in enumerate(net.bundles):
        for j, layer in enumerate(bundle.layers):
            steps.append(layer_step(i, j, layer, f"bundle{i}"))
        if bypass is not None and bypass[0] == i:
            steps.append(Step(kind=_STASH, section=i, layer=-1,
                              label=f"bypass_reorder(bundle{i})", source=i))
        if i in net.pool_after:
            steps.append(Step(kind=MAXPOOL2, section=i, layer=-1,
                              label=f"pool_after[{i}]"))
    for j, layer in enumerate(net.head):
        steps.append(layer_step(net.head_section, j, layer, "head"))
    return steps


def plan_with_shapes(net: NetSpec) -> list[tuple[Step, tuple, tuple, tuple | None]]:
    """Plan steps annotated with (in_shape, out_shape, stash_shape).

    ``stash_shape`` is set only on bypass_concat steps. Raises
    ValidationError naming the first offending layer.
    """
    steps = plan(net)
    out: list[tuple[Step, tuple, tuple, tuple | None]] = []
    shape = net.input_shape
    stash_shape: tuple | None = None
    for step in steps:
        c, h, w = shape
        concat_src: tuple | None = None
        if step.kind in (DW_CONV3, BATCHNORM, RELU, RELU6):
            new = shape
        elif step.kind == PW_CONV1:
            new = (step.out_channels, h, w)
        elif step.kind == MAXPOOL2:
            if h % 2 or w % 2:
                raise ValidationError(
                    f"{step.label}: pooling requires even spatial dims, got ({h},{w})"
                )
            new = (c, h // 2, w // 2)
        elif step.kind in (SPACE_TO_DEPTH, _STASH):
            if h % 2 or w % 2:
                raise ValidationError(
                    f"{step.label}: reorder requires even spatial dims, got ({h},{w})"
                )
            if step.kind == _STASH:
                stash_shape = (4 * c, h // 2, w // 2)
                out.append((step, shape, stash_shape, None))
                continue  # main path unchanged
            new = (4 * c, h // 2, w // 2)
        elif step.kind == BYPASS_CONCAT:
            if stash_shape is None:
                raise ValidationError(
                    f"{step.label}: no bypass tensor available (source must come first)"
                )
            if stash_shape[1:] != (h, w):
                raise ValidationError(
                    f"{step.label}: bypass spatial dims {stash_shape[1:]} "
                    f"do not match main path ({h},{w})"
                )
            concat_src = stash_shape
            new = (c + stash_shape[0], h, w)
        else:  # pragma: no cover - plan only emits known kinds
            raise ValidationError(f"{step.label}: unknown kind {step.kind!r}")
        out.append((step, shape, new, concat_src))
        shape = new
    return out


def infer_shapes(net: NetSpec) -> list[tuple[str, tuple[int, int, int]]]:
    """Per-step (label, output shape) in execution order."""
    return [(step.label, out_shape) for step, _, out_shape, _ in plan_with_shapes(net)]


def validate(net: NetSpec) -> list[str]:
    """Structural check; returns a list of violations (empty means valid)."""
    v: list[str] = []
    n = len(net.bundles)
    if n == 0:
        v.append("net must contain at least one bundle")
    for i in sorted(net.pool_after):
        if not 0 <= i < n:
            v.append(f"pool_after index {i} out of range")
    concats = [
        (section, layer)
        for section, layers in net._sections()
        for layer in layers
        if layer.kind == BYPASS_CONCAT
    ]
    if len(concats) > 1:
        v.append("single bypass supported")
    for section, layer in concats:
        if layer.source >= n:
            v.append(f"bypass source {layer.source} is not a bundle")
        if layer.source >= section:
            v.append("bypass must be forward")
    if not net.head:
        v.append("head must not be empty")
    else:
        last = net.head[-1]
        if last.kind != PW_CONV1 or last.out_channels != 10:
            v.append("head must emit 10 channels")
    if not v:
        try:
            plan_with_shapes(net)
        except ValidationError as e:
            v.extend(e.violations)
    return v


def count_params(net: NetSpec) -> dict[str, int]:
    """Exact scalar counts: 9C per depthwise, Cout*Cin per pointwise,
    4C per batch norm; bytes_f32 assumes 4 bytes per scalar."""
    conv = 0
    bn = 0
    for step, in_shape, out_shape, _ in plan_with_shapes(net):
        c_in = in_shape[0]
        if step.kind == DW_CONV3:
            conv += 9 * c_in
        elif step.kind == PW_CONV1:
            conv += c_in * out_shape[0]
        elif step.kind == BATCHNORM:
            bn += 4 * c_in
    return {"conv_weights": conv, "bn_params": bn, "bytes_f32": 4 * (conv + bn)}


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------

@dataclass
class WeightSet:
    """Per-layer parameters keyed by (section, layer index); the head is
    section ``len(bundles)``."""

    layers: dict[tuple[int, int], ConvWeights] = field(default_factory=dict)

    def total_scalars(self) -> int:
        return sum(cw.scalar_count() for cw in self.layers.values())

    def _get(self, key: tuple[int, int], label: str) -> ConvWeights:
        try:
            return self.layers[key]
        except KeyError:
            raise ShapeError(f"{label}: no weights stored for {key}") from None


def init_weights(net: NetSpec, seed: int = 0, dtype=np.float32,
                 bn_eps: float = 1e-5) -> WeightSet:
    """Seeded weight initialization: conv weights uniform in [-0.05, 0.05],
    batch norm at identity (gamma=1, beta=0, mean=0, var=1)."""
    rng = np.random.default_rng(seed)
    ws = WeightSet()
    for step, in_shape, out_shape, _ in plan_with_shapes(net):
        c_in = in_shape[0]
        if step.kind == DW_CONV3:
            w = rng.uniform(-0.05, 0.05, size=(c_in, 3, 3)).astype(dtype)
            ws.layers[step.weight_key] = ConvWeights(depthwise=w)
        elif step.kind == PW_CONV1:
            w = rng.uniform(-0.05, 0.05, size=(out_shape[0], c_in)).astype(dtype)
            ws.layers[step.weight_key] = ConvWeights(pointwise=w)
        elif step.kind == BATCHNORM:
            ws.layers[step.weight_key] = ConvWeights(
                bn_gamma=np.ones(c_in, dtype=dtype),
                bn_beta=np.zeros(c_in, dtype=dtype),
                bn_mean=np.zeros(c_in, dtype=dtype),
                bn_var=np.ones(c_in, dtype=dtype),
                bn_eps=bn_eps,
            )
    return ws


def _layer_arrays(ws: WeightSet, step: Step, in_shape, out_shape):
    """Fetch and shape-check the arrays a step needs."""
    c_in = in_shape[0]
    cw = ws._get(step.weight_key, step.label)
    if step.kind == DW_CONV3:
        w = cw.depthwise
        if w is None or w.shape != (c_in, 3, 3):
            raise ShapeError(
                f"{step.label}: expected depthwise weights ({c_in},3,3), "
                f"got {None if w is None else w.shape}"
            )
        return (w,)
    if step.kind == PW_CONV1:
        w = cw.pointwise
        if w is None or w.shape != (out_shape[0], c_in):
            raise ShapeError(
                f"{step.label}: expected pointwise weights ({out_shape[0]},{c_in}), "
                f"got {None if w is None else w.shape}"
            )
        return (w,)
    if step.kind == BATCHNORM:
        parts = (cw.bn_gamma, cw.bn_beta, cw.bn_mean, cw.bn_var)
        if any(p is None or p.shape != (c_in,) for p in parts):
            raise ShapeError(f"{step.label}: batch-norm vectors must have length {c_in}")
        return parts + (cw.bn_eps,)
    return ()


def forward(net: NetSpec, weights: WeightSet, x) -> Array:
    """Evaluate the network on one (C,H,W) input."""
    out, _ = _forward_tape(net, weights, x, keep_tape=False)
    return out


def _forward_tape(net: NetSpec, weights: WeightSet, x, keep_tape: bool = True):
    """Forward pass, optionally recording (step, inputs) for backprop."""
    x = np.asarray(x)
    if x.shape != net.input_shape:
        raise ShapeError(
            f"input: expected shape {net.input_shape}, got {x.shape}"
        )
    tape: list[tuple[Step, tuple]] = []
    cur = x
    stash: Array | None = None
    for step, in_shape, out_shape, _ in plan_with_shapes(net):
        if step.kind == DW_CONV3:
            (w,) = _layer_arrays(weights, step, in_shape, out_shape)
            nxt = T.dw_conv3(cur, w)
            rec = (cur, w)
        elif step.kind == PW_CONV1:
            (w,) = _layer_arrays(weights, step, in_shape, out_shape)
            nxt = T.pw_conv1(cur, w)
            rec = (cur, w)
        elif step.kind == BATCHNORM:
            args = _layer_arrays(weights, step, in_shape, out_shape)
            nxt = T.batchnorm_infer(cur, *args)
            rec = (cur,) + args
        elif step.kind == RELU:
            nxt = T.relu(cur)
            rec = (cur,)
        elif step.kind == RELU6:
            nxt = T.relu6(cur)
            rec = (cur,)
        elif step.kind == MAXPOOL2:
            nxt = T.maxpool2(cur)
            rec = (cur,)
        elif step.kind == SPACE_TO_DEPTH:
            nxt = T.space_to_depth(cur)
            rec = (cur,)
        elif step.kind == _STASH:
            stash = T.space_to_depth(cur)
            if keep_tape:
                tape.append((step, (cur,)))
            continue  # main path unchanged
        elif step.kind == BYPASS_CONCAT:
            nxt = T.concat_channels(cur, stash)
            rec = (cur, stash)
        else:  # pragma: no cover
            raise ShapeError(f"{step.label}: unknown kind {step.kind!r}")
        if keep_tape:
            tape.append((step, rec))
        cur = nxt
    return cur, tape


def _backward_tape(tape, grad_out):
    """Walk a tape backwards; returns (grad wrt input, per-key weight grads).

    Weight grads are dicts field -> array under each (section, layer) key;
    batch-norm mean/var grads are included but trainers may ignore them.
    """
    grads: dict[tuple[int, int], dict[str, Array]] = {}
    g = np.asarray(grad_out)
    pending_stash: Array | None = None
    for step, rec in reversed(tape):
        if step.kind == DW_CONV3:
            g, gw = T.backward(T.dw_conv3, rec, g)
            grads[step.weight_key] = {"depthwise": gw}
        elif step.kind == PW_CONV1:
            g, gw = T.backward(T.pw_conv1, rec, g)
            grads[step.weight_key] = {"pointwise": gw}
        elif step.kind == BATCHNORM:
            g, ggamma, gbeta, gmean, gvar = T.backward(T.batchnorm_infer, rec, g)
            grads[step.weight_key] = {
                "bn_gamma": ggamma, "bn_beta": gbeta,
                "bn_mean": gmean, "bn_var": gvar,
            }
        elif step.kind == RELU:
            (g,) = T.backward(T.relu, rec, g)
        elif step.kind == RELU6:
            (g,) = T.backward(T.relu6, rec, g)
        elif step.kind == MAXPOOL2:
            (g,) = T.backward(T.maxpool2, rec, g)
        elif step.kind == SPACE_TO_DEPTH:
            (g,) = T.backward(T.space_to_depth, rec, g)
        elif step.kind == _STASH:
            if pending_stash is not None:
                g = g + T.depth_to_space(pending_stash)
                pending_stash = None
        elif step.kind == BYPASS_CONCAT:
            g, pending_stash = T.backward(T.concat_channels, rec, g)
    return g, grads


# ---------------------------------------------------------------------------
# builders and feature addition
# ---------------------------------------------------------------------------

_STAGE_WIDTHS = (48, 96, 192, 384, 512)
_BYPASS_SOURCE = 2          # third bundle's post-activation output
_HEAD_MID_WIDTH = {"B": 48, "C": 96}


def _conv_bundle(width: int) -> Bundle:
    return Bundle((
        LayerSpec.dw(), LayerSpec.bn(), LayerSpec.act6(),
        LayerSpec.pw(width), LayerSpec.bn(), LayerSpec.act6(),
    ))


def _bypass_head(source: int, mid_width: int) -> tuple[LayerSpec, ...]:
    return (
        LayerSpec.bypass(source),
        LayerSpec.dw(), LayerSpec.bn(), LayerSpec.act6(),
        LayerSpec.pw(mid_width), LayerSpec.bn(), LayerSpec.act6(),
        LayerSpec.pw(10),
    )


def build_skynet(variant: str, input_hw: tuple[int, int] = (160, 320)) -> NetSpec:
    """The three stock configurations.

    Five bundles with pointwise widths 48/96/192/384/512 and pools after the
    first three. Variant A has a bare PW(10) head; B and C add the bypass
    (reordered third-bundle output concatenated before the head's depthwise
    layer) with a middle pointwise width of 48 or 96.
    """
    variant = variant.upper()
    if variant not in ("A", "B", "C"):
        raise ValidationError(f"unknown variant {variant!r}; expected A, B or C")
    h, w = input_hw
    bundles = tuple(_conv_bundle(width) for width in _STAGE_WIDTHS)
    if variant == "A":
        head: tuple[LayerSpec, ...] = (LayerSpec.pw(10),)
    else:
        head = _bypass_head(_BYPASS_SOURCE, _HEAD_MID_WIDTH[variant])
    net = NetSpec(
        input_shape=(3, h, w),
        bundles=bundles,
        pool_after=frozenset({0, 1, 2}),
        head=head,
    )
    violations = validate(net)
    if violations:
        raise ValidationError(violations)
    return net


def add_features(net: NetSpec, *, bypass_reorder: tuple[int, int] | None = None,
                 relu6: bool = False) -> NetSpec:
    """Return a new spec with the requested features.

    ``bypass_reorder=(source, mid_width)`` rebuilds the head around a
    reordered bypass from ``source``; ``relu6=True`` upgrades every plain
    relu activation to relu6.
    """
    result = net
    if relu6:
        def upgrade(layers):
            return tuple(
                LayerSpec.act6() if l.kind == RELU else l for l in layers
            )
        result = replace(
            result,
            bundles=tuple(Bundle(upgrade(b.layers)) for b in result.bundles),
            head=upgrade(result.head),
        )
    if bypass_reorder is not None:
        if result.bypass is not None:
            raise ValidationError("single bypass supported")
        source, mid_width = bypass_reorder
        result = replace(result, head=_bypass_head(source, mid_width))
    violations = validate(result)
    if violations:
        raise ValidationError(violations)
    return result


# ---------------------------------------------------------------------------
# dict round-trip (JSON lives in modelfile / cli)
# ---------------------------------------------------------------------------

def _layer_to_dict(layer: LayerSpec) -> dict:
    d: dict = {"kind": layer.kind}
    if layer.out_channels is not None:
        d["out_channels"] = layer.out_channels
    if layer.source is not None:
        d["source"] = layer.source
    return d


def _layer_from_dict(d: dict) -> LayerSpec:
    return LayerSpec(
        kind=d["kind"],
        out_channels=d.get("out_channels"),
        source=d.get("source"),
    )


def netspec_to_dict(net: NetSpec) -> dict:
    return {
        "input_shape": list(net.input_shape),
        "bundles": [
            {"layers": [_layer_to_dict(l) for l in b.layers]} for b in net.bundles
        ],
        "pool_after": sorted(net.pool_after),
        "head": [_layer_to_dict(l) for l in net.head],
    }


def netspec_from_dict(d: dict) -> NetSpec:
    try:
        return NetSpec(
            input_shape=tuple(d["input_shape"]),
            bundles=tuple(
                Bundle(tuple(_layer_from_dict(l) for l in b["layers"]))
                for b in d["bundles"]
            ),
            pool_after=frozenset(d.get("pool_after", ())),
            head=tuple(_layer_from_dict(l) for l in d.get("head", ())),
        )
    except (KeyError, TypeError) as e:
        raise ValidationError(f"malformed network document: {e}") from e
