"""Encoder/head model family, zero-padded fusion, cross-encoding, and
parameter flattening plus binary checkpoints.

The architecture is fixed: a dense input adapter (modality dim -> hidden,
relu) followed by a body of [hidden -> hidden dense, optional whitening,
relu] and a final hidden -> feature dense. All encoders of a model share
the body topology, which is what lets one modality's adapter feed another
modality's body during cross-encoding. Modality slots concatenate in
ascending modality id; absent slots are zero-filled.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, FormatError, ValidationError
from .nncore import (
    Array,
    DenseLayer,
    WhiteningState,
    _batch_whiten_core,
    activation_backward,
    activation_forward,
    batch_whitening_backward,
    batch_whitening_forward,
    dense_backward,
    dense_forward,
    whiten_batch,
)

TASK_KINDS = ("multi-label", "single-label")

CHECKPOINT_MAGIC = b"MFMM"
CHECKPOINT_VERSION = 1


@dataclass
class Stage:
    """One encoder stage: dense map, optional whitening, optional activation."""

    dense: DenseLayer
    whitening: WhiteningState | None = None
    activation: str | None = None


@dataclass
class Encoder:
    """Modality-specific backbone: input adapter plus shared-topology body."""

    modality_id: int
    adapter: Stage
    body: list[Stage]

    def __post_init__(self):
        if self.adapter.dense.out_dim != self.body[0].dense.in_dim:
            raise DimensionError(
                f"adapter output {self.adapter.dense.out_dim} does not match "
                f"body input {self.body[0].dense.in_dim}"
            )

    @property
    def input_dim(self) -> int:
        return self.adapter.dense.in_dim

    @property
    def hidden_dim(self) -> int:
        return self.adapter.dense.out_dim

    @property
    def feature_dim(self) -> int:
        return self.body[-1].dense.out_dim

    def stages(self) -> list[Stage]:
        return [self.adapter] + self.body


@dataclass
class TaskHead:
    """Shared classifier over the concatenated modality slots."""

    layer: DenseLayer
    task_kind: str

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise ValidationError(f"unknown task kind {self.task_kind!r}")

    @property
    def n_labels(self) -> int:
        return self.layer.out_dim


@dataclass
class Prediction:
    """Class probabilities, one row per sample."""

    probabilities: Array


@dataclass
class GlobalModelSet:
    """Per-modality encoders plus the shared head; the unit of aggregation."""

    encoders: list[Encoder]
    head: TaskHead
    round: int = 0

    def __post_init__(self):
        dims = {enc.feature_dim for enc in self.encoders}
        if len(dims) != 1:
            raise DimensionError(f"encoders disagree on feature dim: {sorted(dims)}")
        expected = len(self.encoders) * self.encoders[0].feature_dim
        if self.head.layer.in_dim != expected:
            raise DimensionError(
                f"head input {self.head.layer.in_dim} != "
                f"modalities * feature dim = {expected}"
            )

    @property
    def n_modalities(self) -> int:
        return len(self.encoders)

    @property
    def feature_dim(self) -> int:
        return self.encoders[0].feature_dim


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def init_dense(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> DenseLayer:
    weight = rng.standard_normal((n_in, n_out)) * (gain / n_in) ** 0.5
    return DenseLayer(weight=weight, bias=np.zeros(n_out))


def build_encoder(
    modality_id: int,
    input_dim: int,
    hidden_dim: int,
    feature_dim: int,
    use_whitening: bool,
    rng: np.random.Generator,
    eps: float = 0.1,
    momentum: float = 0.1,
) -> Encoder:
    """Standard encoder: whitening, when enabled, sits on the adapter output.

    That placement aligns each client's first-layer activations before any
    shared body weights consume them; placing it deeper leaves the early
    layers exposed to the raw per-client distributions. The eps default
    keeps the amplification of weakly observed covariance directions
    bounded at desk-scale batch sizes.
    """
    adapter = Stage(
        init_dense(rng, input_dim, hidden_dim, 2.0),
        WhiteningState.create(hidden_dim, eps=eps, momentum=momentum) if use_whitening else None,
        "relu",
    )
    mid = Stage(init_dense(rng, hidden_dim, hidden_dim, 2.0), None, "relu")
    out = Stage(init_dense(rng, hidden_dim, feature_dim, 1.0), None, None)
    return Encoder(modality_id=modality_id, adapter=adapter, body=[mid, out])


def build_model(
    input_dims: list[int],
    hidden_dim: int,
    feature_dim: int,
    n_labels: int,
    task_kind: str,
    use_whitening: bool,
    rng: np.random.Generator,
) -> GlobalModelSet:
    encoders = [
        build_encoder(m, dim, hidden_dim, feature_dim, use_whitening, rng)
        for m, dim in enumerate(input_dims)
    ]
    head = TaskHead(
        layer=init_dense(rng, len(input_dims) * feature_dim, n_labels, 1.0),
        task_kind=task_kind,
    )
    return GlobalModelSet(encoders=encoders, head=head)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def _stage_forward(stage: Stage, x: Array, mode: str) -> Array:
    z = dense_forward(stage.dense, x)
    if stage.whitening is not None:
        st = stage.whitening
        if mode == "eval" and not st.stats_ready:
            # never-calibrated statistics (e.g. a freshly aggregated global
            # model): align to the evaluation batch instead of erroring out
            z = whiten_batch(z, st.gamma, st.beta, st.eps)
        else:
            z = batch_whitening_forward(z, st, mode)
    if stage.activation is not None:
        z = activation_forward(z, stage.activation)
    return z


def encode(encoder: Encoder, x: Array, mode: str) -> Array:
    """Run ``x`` through adapter and body; whitening layers respect ``mode``."""
    if x.ndim != 2 or x.shape[1] != encoder.input_dim:
        raise DimensionError(
            f"modality {encoder.modality_id}: input {x.shape} does not match "
            f"expected dim {encoder.input_dim}"
        )
    out = x
    for stage in encoder.stages():
        out = _stage_forward(stage, out, mode)
    return out


@dataclass
class EncodeCache:
    """Per-stage inputs and pre-activation values from a train forward."""

    inputs: list[Array] = field(default_factory=list)
    preact: list[Array] = field(default_factory=list)


def encode_train(encoder: Encoder, x: Array) -> tuple[Array, EncodeCache]:
    """Train-mode forward that keeps the caches the backward pass needs."""
    if x.ndim != 2 or x.shape[1] != encoder.input_dim:
        raise DimensionError(
            f"modality {encoder.modality_id}: input {x.shape} does not match "
            f"expected dim {encoder.input_dim}"
        )
    cache = EncodeCache()
    out = x
    for stage in encoder.stages():
        cache.inputs.append(out)
        z = dense_forward(stage.dense, out)
        if stage.whitening is not None:
            z = batch_whitening_forward(z, stage.whitening, "train")
        cache.preact.append(z)
        out = activation_forward(z, stage.activation) if stage.activation else z
    return out, cache


def encode_backward(encoder: Encoder, cache: EncodeCache, grad_out: Array) -> Array:
    """Backprop through a cached train forward; returns a flat gradient
    aligned with :func:`flatten_params` of the encoder."""
    stages = encoder.stages()
    grads: list[list[Array]] = [[] for _ in stages]
    g = grad_out
    for i in reversed(range(len(stages))):
        stage = stages[i]
        if stage.activation is not None:
            g = activation_backward(cache.preact[i], stage.activation, g)
        pieces = []
        if stage.whitening is not None:
            g, grad_gamma, grad_beta = batch_whitening_backward(stage.whitening, g)
            pieces = [grad_gamma, grad_beta]
        g, grad_w, grad_b = dense_backward(stage.dense, cache.inputs[i], g)
        grads[i] = [grad_w.ravel(), grad_b] + pieces
    return np.concatenate([arr for stage_grads in grads for arr in stage_grads])


def fuse(features: Array, slot: int, n_modalities: int) -> Array:
    """Place ``features`` in its modality slot, zero-filling the others."""
    if not 0 <= slot < n_modalities:
        raise ValidationError(f"slot {slot} out of range for {n_modalities} modalities")
    b, d = features.shape
    out = np.zeros((b, n_modalities * d))
    out[:, slot * d : (slot + 1) * d] = features
    return out


def fuse_full(
    features_by_modality: list[Array | None], n_modalities: int, feature_dim: int
) -> Array:
    """Concatenate present modality features in slot order; absent slots are zero."""
    if len(features_by_modality) != n_modalities:
        raise DimensionError(
            f"expected {n_modalities} feature blocks, got {len(features_by_modality)}"
        )
    present = [f for f in features_by_modality if f is not None]
    if not present:
        raise ValidationError("fusion needs at least one present modality")
    rows = {f.shape[0] for f in present}
    if len(rows) != 1:
        raise DimensionError(f"modality feature blocks disagree on rows: {sorted(rows)}")
    b = present[0].shape[0]
    out = np.zeros((b, n_modalities * feature_dim))
    for m, f in enumerate(features_by_modality):
        if f is None:
            continue
        if f.shape[1] != feature_dim:
            raise DimensionError(
                f"modality {m} features have dim {f.shape[1]}, expected {feature_dim}"
            )
        out[:, m * feature_dim : (m + 1) * feature_dim] = f
    return out


def head_forward(head: TaskHead, z: Array) -> Prediction:
    logits = dense_forward(head.layer, z)
    if head.task_kind == "multi-label":
        probs = activation_forward(logits, "sigmoid")
    else:
        probs = activation_forward(logits, "softmax-rows")
    return Prediction(probabilities=probs)


# ---------------------------------------------------------------------------
# cross-encoding
# ---------------------------------------------------------------------------


@dataclass
class CrossEncodeCache:
    x: Array
    adapter_preact: Array
    adapter_whiten_w: Array | None
    body_inputs: list[Array]
    body_preact: list[Array]
    body_whiten_w: list[Array | None]
    local: Encoder
    global_other: Encoder


def _cross_forward(local: Encoder, global_other: Encoder, x: Array, cache: CrossEncodeCache | None):
    if x.ndim != 2 or x.shape[1] != local.input_dim:
        raise DimensionError(
            f"modality {local.modality_id}: input {x.shape} does not match "
            f"expected dim {local.input_dim}"
        )
    if local.adapter.dense.out_dim != global_other.body[0].dense.in_dim:
        raise DimensionError(
            f"adapter output {local.adapter.dense.out_dim} does not match "
            f"body input {global_other.body[0].dense.in_dim} of modality "
            f"{global_other.modality_id}"
        )
    z = dense_forward(local.adapter.dense, x)
    if local.adapter.whitening is not None:
        # the client's own alignment layer, on this batch's statistics;
        # nothing is read from or written to the running estimates
        st = local.adapter.whitening
        z, _, _, adapter_w, _ = _batch_whiten_core(z, st.gamma, st.beta, st.eps)
        if cache is not None:
            cache.adapter_whiten_w = adapter_w
    if cache is not None:
        cache.adapter_preact = z
    h = activation_forward(z, local.adapter.activation) if local.adapter.activation else z
    for stage in global_other.body:
        if cache is not None:
            cache.body_inputs.append(h)
        z = dense_forward(stage.dense, h)
        whiten_w = None
        if stage.whitening is not None:
            st = stage.whitening
            z, _, _, whiten_w, _ = _batch_whiten_core(z, st.gamma, st.beta, st.eps)
        if cache is not None:
            cache.body_preact.append(z)
            cache.body_whiten_w.append(whiten_w)
        h = activation_forward(z, stage.activation) if stage.activation else z
    return h


def cross_encode(local: Encoder, global_other: Encoder, x: Array) -> Array:
    """Local adapter feeding another modality's body.

    The other model's parameters act as constants: no statistics are read
    or written on its whitening layers (the batch's own statistics are
    used) and no gradient ever reaches its parameters.
    """
    return _cross_forward(local, global_other, x, None)


def cross_encode_with_cache(
    local: Encoder, global_other: Encoder, x: Array
) -> tuple[Array, CrossEncodeCache]:
    cache = CrossEncodeCache(
        x=x,
        adapter_preact=np.empty(0),
        adapter_whiten_w=None,
        body_inputs=[],
        body_preact=[],
        body_whiten_w=[],
        local=local,
        global_other=global_other,
    )
    out = _cross_forward(local, global_other, x, cache)
    return out, cache


def cross_encode_backward(cache: CrossEncodeCache, grad_out: Array):
    """Gradient of a cross-encoded output wrt the local adapter (weight, bias).

    The other model's parameters receive no gradient by construction;
    whitening statistics are treated as constants.
    """
    g = grad_out
    for i in reversed(range(len(cache.global_other.body))):
        stage = cache.global_other.body[i]
        if stage.activation is not None:
            g = activation_backward(cache.body_preact[i], stage.activation, g)
        if stage.whitening is not None:
            g = (g * stage.whitening.gamma) @ cache.body_whiten_w[i]
        g = g @ stage.dense.weight.T
    adapter = cache.local.adapter
    if adapter.activation is not None:
        g = activation_backward(cache.adapter_preact, adapter.activation, g)
    if adapter.whitening is not None:
        g = (g * adapter.whitening.gamma) @ cache.adapter_whiten_w
    _, grad_w, grad_b = dense_backward(adapter.dense, cache.x, g)
    return grad_w, grad_b


# ---------------------------------------------------------------------------
# flattening
# ---------------------------------------------------------------------------


def _stage_param_arrays(stage: Stage) -> list[Array]:
    arrays = [stage.dense.weight.ravel(), stage.dense.bias]
    if stage.whitening is not None:
        arrays += [stage.whitening.gamma, stage.whitening.beta]
    return arrays


def flatten_params(part) -> Array:
    """Canonical flat parameter vector.

    Order: per stage (adapter first, body in order) weight, bias, then
    gamma and beta when the stage whitens; a model set lists encoders in
    modality order with the head last. Running statistics are excluded.
    """
    if isinstance(part, Encoder):
        return np.concatenate(
            [arr for stage in part.stages() for arr in _stage_param_arrays(stage)]
        )
    if isinstance(part, TaskHead):
        return np.concatenate([part.layer.weight.ravel(), part.layer.bias])
    if isinstance(part, GlobalModelSet):
        return np.concatenate(
            [flatten_params(enc) for enc in part.encoders] + [flatten_params(part.head)]
        )
    raise ValidationError(f"cannot flatten object of type {type(part).__name__}")


def param_count(part) -> int:
    return flatten_params(part).size


def _take(flat: Array, cursor: int, n: int) -> tuple[Array, int]:
    return flat[cursor : cursor + n], cursor + n


def _unflatten_stage(flat: Array, cursor: int, template: Stage) -> tuple[Stage, int]:
    w_shape = template.dense.weight.shape
    w, cursor = _take(flat, cursor, w_shape[0] * w_shape[1])
    b, cursor = _take(flat, cursor, w_shape[1])
    dense = DenseLayer(weight=w.reshape(w_shape).copy(), bias=b.copy())
    whitening = None
    if template.whitening is not None:
        t = template.whitening
        gamma, cursor = _take(flat, cursor, t.dim)
        beta, cursor = _take(flat, cursor, t.dim)
        whitening = WhiteningState(
            gamma=gamma.copy(),
            beta=beta.copy(),
            running_mean=t.running_mean.copy(),
            running_cov=t.running_cov.copy(),
            eps=t.eps,
            momentum=t.momentum,
            stats_ready=t.stats_ready,
        )
    return Stage(dense=dense, whitening=whitening, activation=template.activation), cursor


def unflatten_params(flat: Array, template):
    """Rebuild a model part from a flat vector.

    Parameters come from ``flat``; whitening running statistics are copied
    from ``template`` (they are state, not parameters). Forward caches are
    dropped.
    """
    flat = np.asarray(flat, dtype=np.float64)
    expected = param_count(template)
    if flat.shape != (expected,):
        raise DimensionError(
            f"flat vector has {flat.shape} entries, template needs ({expected},)"
        )
    if isinstance(template, Encoder):
        cursor = 0
        adapter, cursor = _unflatten_stage(flat, cursor, template.adapter)
        body = []
        for stage in template.body:
            new_stage, cursor = _unflatten_stage(flat, cursor, stage)
            body.append(new_stage)
        return Encoder(modality_id=template.modality_id, adapter=adapter, body=body)
    if isinstance(template, TaskHead):
        cursor = 0
        stage, cursor = _unflatten_stage(flat, cursor, Stage(template.layer))
        return TaskHead(layer=stage.dense, task_kind=template.task_kind)
    if isinstance(template, GlobalModelSet):
        cursor = 0
        encoders = []
        for enc in template.encoders:
            n = param_count(enc)
            piece, cursor = _take(flat, cursor, n)
            encoders.append(unflatten_params(piece, enc))
        head = unflatten_params(flat[cursor:], template.head)
        return GlobalModelSet(encoders=encoders, head=head, round=template.round)
    raise ValidationError(f"cannot unflatten into type {type(template).__name__}")


def clone_encoder(encoder: Encoder) -> Encoder:
    return unflatten_params(flatten_params(encoder), encoder)


def clone_head(head: TaskHead) -> TaskHead:
    return unflatten_params(flatten_params(head), head)


def clone_model(model: GlobalModelSet) -> GlobalModelSet:
    return unflatten_params(flatten_params(model), model)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


class _ByteReader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(
                f"file truncated: needed {n} more bytes", offset=self.offset
            )
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, n: int) -> Array:
        raw = self.take(8 * n)
        return np.frombuffer(raw, dtype="<f8").copy()

    def expect_end(self):
        if self.offset != len(self.data):
            raise FormatError("trailing bytes after payload", offset=self.offset)


def _whitening_states(model: GlobalModelSet) -> list[WhiteningState]:
    return [
        stage.whitening
        for enc in model.encoders
        for stage in enc.stages()
        if stage.whitening is not None
    ]


def save_model(model: GlobalModelSet, path) -> None:
    """Write the checkpoint: header, flat parameters, running statistics."""
    enc0 = model.encoders[0]
    uses_whitening = any(s.whitening is not None for s in enc0.stages())
    header = CHECKPOINT_MAGIC
    header += struct.pack("<H", CHECKPOINT_VERSION)
    header += struct.pack("<H", model.n_modalities)
    for enc in model.encoders:
        header += struct.pack("<I", enc.input_dim)
    header += struct.pack(
        "<IIIBBI",
        enc0.hidden_dim,
        model.feature_dim,
        model.head.n_labels,
        TASK_KINDS.index(model.head.task_kind),
        1 if uses_whitening else 0,
        model.round,
    )
    payload = [flatten_params(model).astype("<f8").tobytes()]
    for st in _whitening_states(model):
        stats = np.concatenate(
            [
                [1.0 if st.stats_ready else 0.0, st.eps, st.momentum],
                st.running_mean,
                st.running_cov.ravel(),
            ]
        )
        payload.append(stats.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(header)
        for chunk in payload:
            fh.write(chunk)


def load_model(path) -> GlobalModelSet:
    with open(path, "rb") as fh:
        reader = _ByteReader(fh.read())
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise FormatError("bad magic, not a model checkpoint", offset=0)
    (version,) = reader.unpack("<H")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    (n_modalities,) = reader.unpack("<H")
    if n_modalities < 1:
        raise FormatError("checkpoint declares zero modalities", offset=6)
    input_dims = [reader.unpack("<I")[0] for _ in range(n_modalities)]
    hidden_dim, feature_dim, n_labels, task_idx, whiten_flag, round_idx = reader.unpack(
        "<IIIBBI"
    )
    if task_idx >= len(TASK_KINDS):
        raise FormatError(f"unknown task kind code {task_idx}", offset=reader.offset - 6)
    template = build_model(
        input_dims=input_dims,
        hidden_dim=hidden_dim,
        feature_dim=feature_dim,
        n_labels=n_labels,
        task_kind=TASK_KINDS[task_idx],
        use_whitening=bool(whiten_flag),
        rng=np.random.default_rng(0),
    )
    template.round = round_idx
    flat = reader.floats(param_count(template))
    if not np.all(np.isfinite(flat)):
        raise FormatError("checkpoint parameters contain non-finite values")
    model = unflatten_params(flat, template)
    for st in _whitening_states(model):
        offset = reader.offset
        header = reader.floats(3)
        mean = reader.floats(st.dim)
        cov = reader.floats(st.dim * st.dim).reshape(st.dim, st.dim)
        stats = np.concatenate([header, mean, cov.ravel()])
        if not np.all(np.isfinite(stats)):
            raise FormatError(
                "checkpoint running statistics contain non-finite values",
                offset=offset,
            )
        st.stats_ready = bool(header[0])
        st.eps = float(header[1])
        st.momentum = float(header[2])
        st.running_mean = mean
        st.running_cov = cov
    reader.expect_end()
    return model
