"""Network definitions and flat parameter packing.

Networks are pure functions of a :class:`ParamVector`: a flat vector of
trainable values in canonical layer order plus a separate block of
normalization running statistics (``aux``). Merging algebra works on these
flat vectors directly.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np

from mergelab import tensor_core as tc
from mergelab.tensor_core import ShapeError, Tensor

logger = logging.getLogger(__name__)

ARCH_KINDS = ("mlp", "mlp_norm", "tiny_cnn")
BN_MOMENTUM = 0.1


class ArchMismatchError(ValueError):
    """Raised when two parameter vectors do not share an architecture."""


@dataclass(frozen=True)
class ArchDescriptor:
    """Architecture of a network; equality defines merge compatibility.

    ``widths`` are the layer widths for MLPs (input, hidden..., classes) and
    the channel counts for the tiny CNN (input channels, block channels...).
    """

    kind: str
    widths: tuple[int, ...]
    input_shape: tuple[int, ...]
    class_count: int
    norm: tuple[bool, ...]
    bn_eps: float = 1e-5

    def __post_init__(self) -> None:
        if self.kind not in ARCH_KINDS:
            raise ValueError(f"Unknown architecture kind {self.kind!r}")
        if any(int(w) <= 0 for w in self.widths) or self.class_count <= 0:
            raise ValueError(f"Zero-width layer in {self.widths} / classes {self.class_count}")
        if any(int(d) <= 0 for d in self.input_shape):
            raise ValueError(f"Invalid input shape {self.input_shape}")
        if self.kind == "tiny_cnn":
            if len(self.input_shape) != 3 or self.input_shape[0] != self.widths[0]:
                raise ValueError(f"tiny_cnn needs (C, H, W) input matching widths[0], got {self.input_shape}")
            blocks = len(self.widths) - 1
            side = 2**blocks
            if self.input_shape[1] % side or self.input_shape[2] % side:
                raise ValueError(f"tiny_cnn input sides must be divisible by {side}")
        else:
            if len(self.widths) < 2 or self.widths[-1] != self.class_count:
                raise ValueError(f"MLP widths {self.widths} must end with the class count {self.class_count}")
            if self.input_shape != (self.widths[0],):
                raise ValueError(f"MLP input shape {self.input_shape} must equal ({self.widths[0]},)")
        if len(self.norm) != self.hidden_blocks:
            raise ValueError(f"Expected {self.hidden_blocks} normalization flags, got {len(self.norm)}")
        if self.bn_eps <= 0:
            raise ValueError("bn_eps must be positive")

    @property
    def hidden_blocks(self) -> int:
        return len(self.widths) - (1 if self.kind == "tiny_cnn" else 2)

    @property
    def has_norm(self) -> bool:
        return any(self.norm)

    def canonical(self) -> str:
        """Text form used in checkpoints and config hashes."""
        widths = ",".join(str(w) for w in self.widths)
        shape = ",".join(str(d) for d in self.input_shape)
        norm = ",".join("1" if n else "0" for n in self.norm)
        return f"kind={self.kind};widths={widths};input={shape};classes={self.class_count};norm={norm};eps={self.bn_eps!r}"

    @classmethod
    def from_canonical(cls, text: str) -> "ArchDescriptor":
        fields = dict(part.split("=", 1) for part in text.split(";") if part)
        try:
            return cls(
                kind=fields["kind"],
                widths=tuple(int(w) for w in fields["widths"].split(",")),
                input_shape=tuple(int(d) for d in fields["input"].split(",")),
                class_count=int(fields["classes"]),
                norm=tuple(flag == "1" for flag in fields["norm"].split(",") if flag),
                bn_eps=float(fields["eps"]),
            )
        except KeyError as exc:
            raise ValueError(f"Architecture text missing field {exc}") from None


def mlp(widths: Sequence[int], *, norm: bool = False, bn_eps: float = 1e-5) -> ArchDescriptor:
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2:
        raise ValueError("An MLP needs at least input and output widths")
    return ArchDescriptor(
        kind="mlp_norm" if norm else "mlp",
        widths=widths,
        input_shape=(widths[0],),
        class_count=widths[-1],
        norm=tuple([norm] * (len(widths) - 2)),
        bn_eps=bn_eps,
    )


def tiny_cnn(
    input_shape: Sequence[int] = (3, 32, 32),
    class_count: int = 10,
    channels: Sequence[int] = (16, 32),
    bn_eps: float = 1e-5,
) -> ArchDescriptor:
    input_shape = tuple(int(d) for d in input_shape)
    return ArchDescriptor(
        kind="tiny_cnn",
        widths=(input_shape[0],) + tuple(int(c) for c in channels),
        input_shape=input_shape,
        class_count=int(class_count),
        norm=tuple([True] * len(channels)),
        bn_eps=bn_eps,
    )


# ----------------------------------------------------------------------
@dataclass(frozen=True)
class Slot:
    name: str
    shape: tuple[int, ...]
    role: str  # weight | bias | scale | shift
    offset: int
    block: int  # hidden block index, -1 for the head
    normalized: bool = False

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class Layout:
    slots: tuple[Slot, ...]
    aux_slots: tuple[Slot, ...]
    size: int
    aux_size: int

    def slot(self, name: str) -> Slot:
        for s in self.slots:
            if s.name == name:
                return s
        raise KeyError(name)


@lru_cache(maxsize=32)
def layout(arch: ArchDescriptor) -> Layout:
    """Canonical parameter order for ``arch``."""
    slots: list[Slot] = []
    aux: list[Slot] = []
    offset = 0
    aux_offset = 0

    def _add(name: str, shape: tuple[int, ...], role: str, block: int, normalized: bool = False) -> None:
        nonlocal offset
        slot = Slot(name, shape, role, offset, block, normalized)
        slots.append(slot)
        offset += slot.size

    def _add_stats(block: int, channels: int) -> None:
        nonlocal aux_offset
        for stat in ("mean", "var"):
            slot = Slot(f"block{block}.running_{stat}", (channels,), stat, aux_offset, block)
            aux.append(slot)
            aux_offset += channels

    if arch.kind == "tiny_cnn":
        for block in range(arch.hidden_blocks):
            c_in, c_out = arch.widths[block], arch.widths[block + 1]
            _add(f"block{block}.kernel", (c_out, c_in, 3, 3), "weight", block, normalized=True)
            _add(f"block{block}.bn_scale", (c_out,), "scale", block)
            _add(f"block{block}.bn_shift", (c_out,), "shift", block)
            _add_stats(block, c_out)
        side_h = arch.input_shape[1] // 2**arch.hidden_blocks
        side_w = arch.input_shape[2] // 2**arch.hidden_blocks
        features = arch.widths[-1] * side_h * side_w
        _add("head.weight", (arch.class_count, features), "weight", -1)
        _add("head.bias", (arch.class_count,), "bias", -1)
    else:
        for block in range(arch.hidden_blocks):
            fan_in, width = arch.widths[block], arch.widths[block + 1]
            normed = arch.norm[block]
            _add(f"block{block}.weight", (width, fan_in), "weight", block, normalized=normed)
            if normed:
                _add(f"block{block}.bn_scale", (width,), "scale", block)
                _add(f"block{block}.bn_shift", (width,), "shift", block)
                _add_stats(block, width)
            else:
                _add(f"block{block}.bias", (width,), "bias", block)
        _add("head.weight", (arch.class_count, arch.widths[-2]), "weight", -1)
        _add("head.bias", (arch.class_count,), "bias", -1)
    return Layout(tuple(slots), tuple(aux), offset, aux_offset)


def parameter_count(arch: ArchDescriptor) -> int:
    return layout(arch).size


def decay_mask(arch: ArchDescriptor) -> np.ndarray:
    """1 for weights and normalization scales, 0 for biases and shifts."""
    mask = np.zeros(layout(arch).size, dtype=np.float64)
    for slot in layout(arch).slots:
        if slot.role in ("weight", "scale"):
            mask[slot.offset : slot.offset + slot.size] = 1.0
    return mask


def variance_mask(arch: ArchDescriptor) -> np.ndarray:
    """Boolean mask of aux entries holding running variances."""
    lay = layout(arch)
    mask = np.zeros(lay.aux_size, dtype=bool)
    for slot in lay.aux_slots:
        if slot.role == "var":
            mask[slot.offset : slot.offset + slot.size] = True
    return mask


def normalized_groups(arch: ArchDescriptor) -> list[Slot]:
    """Weight tensors feeding a normalization layer (scale-invariant groups)."""
    return [s for s in layout(arch).slots if s.normalized]


def hidden_weight_groups(arch: ArchDescriptor) -> list[Slot]:
    return [s for s in layout(arch).slots if s.role == "weight" and s.block >= 0]


# ----------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat trainable values plus normalization running statistics."""

    arch: ArchDescriptor
    values: np.ndarray
    aux: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.float32))

    def __post_init__(self) -> None:
        lay = layout(self.arch)
        values = np.asarray(self.values)
        aux = np.asarray(self.aux, dtype=values.dtype if values.dtype.kind == "f" else np.float32)
        # writable inputs may still belong to the caller
        if values.flags.writeable:
            values = values.copy()
        if aux.flags.writeable:
            aux = aux.copy()
        if values.shape != (lay.size,):
            raise ShapeError(f"Parameter vector of shape {values.shape} does not match {lay.size} for {self.arch.kind}")
        if aux.shape != (lay.aux_size,):
            raise ShapeError(f"Aux block of shape {aux.shape} does not match {lay.aux_size}")
        if lay.aux_size and np.any(aux[variance_mask(self.arch)] <= 0):
            raise ValueError("Running variances must be strictly positive")
        values.setflags(write=False)
        aux.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "aux", aux)

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    def __len__(self) -> int:
        return int(self.values.size)

    def with_values(self, values: np.ndarray, aux: Optional[np.ndarray] = None) -> "ParamVector":
        values = np.array(values, copy=True)
        new_aux = self.aux if aux is None else np.array(aux, dtype=values.dtype, copy=True)
        if new_aux.dtype != values.dtype:
            new_aux = new_aux.astype(values.dtype)
        return ParamVector(self.arch, values, new_aux)

    def astype(self, dtype: np.dtype) -> "ParamVector":
        return ParamVector(self.arch, self.values.astype(dtype), self.aux.astype(dtype))

    def compatible(self, other: "ParamVector") -> bool:
        return self.arch == other.arch

    def require_compatible(self, other: "ParamVector") -> None:
        if not self.compatible(other):
            raise ArchMismatchError(f"Incompatible architectures: {self.arch.canonical()} vs {other.arch.canonical()}")

    def unpack(self) -> dict[str, np.ndarray]:
        return unpack(self)

    def equals(self, other: "ParamVector") -> bool:
        """Bitwise equality of architecture, values and statistics."""
        return (
            self.arch == other.arch
            and self.values.dtype == other.values.dtype
            and self.values.tobytes() == other.values.tobytes()
            and self.aux.tobytes() == other.aux.tobytes()
        )


def pack(arch: ArchDescriptor, tensors: dict[str, np.ndarray], stats: Optional[dict[str, np.ndarray]] = None) -> ParamVector:
    lay = layout(arch)
    dtype = next(iter(tensors.values())).dtype if tensors else tc.default_dtype()
    values = np.empty(lay.size, dtype=dtype)
    for slot in lay.slots:
        arr = np.asarray(tensors[slot.name])
        if arr.shape != slot.shape:
            raise ShapeError(f"{slot.name}: expected {slot.shape}, got {arr.shape}")
        values[slot.offset : slot.offset + slot.size] = arr.reshape(-1)
    aux = default_aux(arch, dtype)
    for slot in lay.aux_slots:
        if stats and slot.name in stats:
            aux[slot.offset : slot.offset + slot.size] = np.asarray(stats[slot.name]).reshape(-1)
    return ParamVector(arch, values, aux)


def unpack(params: ParamVector) -> dict[str, np.ndarray]:
    lay = layout(params.arch)
    out = {s.name: params.values[s.offset : s.offset + s.size].reshape(s.shape) for s in lay.slots}
    out.update({s.name: params.aux[s.offset : s.offset + s.size] for s in lay.aux_slots})
    return out


def default_aux(arch: ArchDescriptor, dtype: np.dtype) -> np.ndarray:
    aux = np.zeros(layout(arch).aux_size, dtype=dtype)
    aux[variance_mask(arch)] = 1.0
    return aux


def build(arch: ArchDescriptor, seed: int) -> ParamVector:
    """Kaiming-uniform weights (relu gain), zero biases, unit/zero norm affine."""
    rng = np.random.default_rng(seed)
    dtype = tc.default_dtype()
    lay = layout(arch)
    values = np.zeros(lay.size, dtype=dtype)
    for slot in lay.slots:
        chunk = values[slot.offset : slot.offset + slot.size]
        if slot.role == "weight":
            fan_in = int(np.prod(slot.shape[1:]))
            bound = np.sqrt(2.0) * np.sqrt(3.0 / fan_in)
            chunk[:] = rng.uniform(-bound, bound, size=slot.size).astype(dtype)
        elif slot.role == "scale":
            chunk[:] = 1.0
    logger.debug("Built %s with %d parameters (seed %d)", arch.kind, lay.size, seed)
    return ParamVector(arch, values, default_aux(arch, dtype))


# ----------------------------------------------------------------------
@dataclass
class ForwardResult:
    logits: Tensor
    aux: np.ndarray


def _check_batch(arch: ArchDescriptor, inputs: np.ndarray) -> None:
    if tuple(inputs.shape[1:]) != arch.input_shape:
        raise ShapeError(f"Batch of shape {inputs.shape} does not match input shape {arch.input_shape}")


def forward(
    params: ParamVector,
    inputs: np.ndarray | Tensor,
    mode: str = "eval",
    *,
    weights: Optional[Tensor] = None,
    stats_momentum: float = BN_MOMENTUM,
) -> ForwardResult:
    """Logits for a batch. Train mode returns updated running statistics.

    ``weights`` replaces ``params.values`` with a (possibly taped) flat tensor
    of the same length so gradients can flow to it.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"Unknown mode {mode!r}")
    arch = params.arch
    lay = layout(arch)
    flat = weights if weights is not None else Tensor(params.values)
    if flat.shape != (lay.size,):
        raise ShapeError(f"Weight tensor {flat.shape} does not match {lay.size} parameters")
    x_data = inputs.data if isinstance(inputs, Tensor) else np.asarray(inputs)
    _check_batch(arch, x_data)
    x = inputs if isinstance(inputs, Tensor) else Tensor(x_data.astype(flat.dtype, copy=False))
    aux = np.array(params.aux, copy=True)
    training = mode == "train"

    def p(name: str) -> Tensor:
        slot = lay.slot(name)
        return tc.segment(flat, slot.offset, slot.shape)

    def norm(h: Tensor, block: int) -> Tensor:
        mean_slot = lay.aux_slots[2 * block_index[block]]
        var_slot = lay.aux_slots[2 * block_index[block] + 1]
        rm = aux[mean_slot.offset : mean_slot.offset + mean_slot.size]
        rv = aux[var_slot.offset : var_slot.offset + var_slot.size]
        result = tc.batch_norm(
            h,
            p(f"block{block}.bn_scale"),
            p(f"block{block}.bn_shift"),
            rm,
            rv,
            training=training,
            momentum=stats_momentum,
            eps=arch.bn_eps,
        )
        if training:
            aux[mean_slot.offset : mean_slot.offset + mean_slot.size] = result.running_mean
            aux[var_slot.offset : var_slot.offset + var_slot.size] = result.running_var
        return result.out

    block_index = {}
    for block in range(arch.hidden_blocks):
        if arch.norm[block]:
            block_index[block] = len(block_index)

    h = x
    if arch.kind == "tiny_cnn":
        for block in range(arch.hidden_blocks):
            h = tc.conv2d(h, p(f"block{block}.kernel"), stride=1, pad=1)
            h = tc.relu(norm(h, block))
            h = tc.max_pool2d(h, 2)
        h = tc.flatten(h)
    else:
        for block in range(arch.hidden_blocks):
            h = tc.matmul(h, tc.transpose(p(f"block{block}.weight")))
            if arch.norm[block]:
                h = norm(h, block)
            else:
                h = tc.add(h, p(f"block{block}.bias"))
            h = tc.relu(h)
    logits = tc.add(tc.matmul(h, tc.transpose(p("head.weight"))), p("head.bias"))
    return ForwardResult(logits, aux)


def logits(params: ParamVector, inputs: np.ndarray) -> np.ndarray:
    """Eval-mode logits as a plain array."""
    return forward(params, inputs, "eval").logits.data


def loss_closure(params: ParamVector, inputs: np.ndarray, labels: np.ndarray, mode: str = "eval") -> Callable[[Tensor], Tensor]:
    """Map a flat weight tensor to the mean cross-entropy on a fixed batch."""

    def _loss(flat: Tensor) -> Tensor:
        result = forward(params, inputs, mode, weights=flat)
        return tc.softmax_cross_entropy(result.logits, labels)

    return _loss


@dataclass
class StepResult:
    loss: float
    grad: np.ndarray
    aux: np.ndarray


def loss_and_grad(
    params: ParamVector, inputs: np.ndarray, labels: np.ndarray, mode: str = "train", *, checked: bool = False
) -> StepResult:
    """Cross-entropy, its gradient w.r.t. the flat values, and new statistics."""
    with tc.Tape(checked=checked) as tape:
        flat = tape.watch(Tensor(params.values))
        result = forward(params, inputs, mode, weights=flat)
        loss = tc.softmax_cross_entropy(result.logits, labels)
        grad = tape.gradient(loss, [flat])[flat.node_id]
    return StepResult(float(loss.data), grad.data, result.aux)


def evaluate(params: ParamVector, inputs: np.ndarray, labels: np.ndarray, batch_size: int = 1024) -> tuple[float, float]:
    """Eval-mode mean cross-entropy and accuracy over a labelled set."""
    n = int(labels.shape[0])
    if n == 0:
        return float("nan"), float("nan")
    total_loss = 0.0
    correct = 0
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for start in range(0, n, batch_size):
            x = inputs[start : start + batch_size]
            y = labels[start : start + batch_size]
            out = forward(params, x, "eval").logits
            total_loss += float(tc.softmax_cross_entropy(out, y).data) * y.shape[0]
            correct += int(np.sum(np.argmax(out.data, axis=1) == y))
    return total_loss / n, correct / n


def batch_statistics(params: ParamVector, inputs: np.ndarray) -> ParamVector:
    """Replace running statistics with the statistics of one batch."""
    if not params.arch.has_norm:
        return params
    result = forward(params, inputs, "train", stats_momentum=1.0)
    return params.with_values(params.values, result.aux)


def scale_hidden_weights(params: ParamVector, factor: float) -> ParamVector:
    """Multiply every pre-normalization (hidden) weight tensor by ``factor``."""
    values = np.array(params.values, copy=True)
    for slot in hidden_weight_groups(params.arch):
        values[slot.offset : slot.offset + slot.size] *= values.dtype.type(factor)
    return params.with_values(values)


def check_scale_invariance(
    params: ParamVector, scale: float, eval_batch: np.ndarray, *, eps: Optional[float] = 1e-12
) -> float:
    """Max |logits(θ) − logits(scale·θ)| over the evaluation batch in eval mode.

    Statistics are recomputed on the evaluation batch for both networks. ``eps``
    overrides the normalization epsilon (invariance-test mode); pass ``None``
    to keep the architecture's value. Runs in 64-bit.
    """
    if scale <= 0:
        raise ValueError(f"Scale must be positive, got {scale}")
    arch = params.arch if eps is None or not params.arch.has_norm else replace(params.arch, bn_eps=eps)
    base = ParamVector(arch, params.values.astype(np.float64), params.aux.astype(np.float64))
    batch = np.asarray(eval_batch, dtype=np.float64)
    with tc.precision(64):
        reference = batch_statistics(base, batch)
        scaled = batch_statistics(scale_hidden_weights(base, scale), batch)
        diff = np.abs(logits(reference, batch) - logits(scaled, batch))
    return float(diff.max()) if diff.size else 0.0
