"""Synthetic paired multi-modal datasets, decentralization scenarios,
binary shard serialization, and deterministic batching.

Every site draws a latent vector from a group-shifted Gaussian; modality 0
observes a linear projection of it and modality 1 a tanh-squashed one, so
the modalities are complementary views of the same underlying signal.
Group membership drives the non-IID scenarios: skewed shards hold sites
from disjoint group subsets, which shifts both features and label
marginals between clients.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError, ValidationError
from .nncore import Array

SHARD_MAGIC = b"MFSH"
SHARD_VERSION = 1

SCENARIO_KINDS = ("iid", "group-skew", "group-skew-mixed", "missing-A", "missing-B")
TASK_KINDS = ("multi-label", "single-label")

_SCENARIO_STREAM = 17
_PREVALENCE_LOW = 0.2
_PREVALENCE_HIGH = 0.5


@dataclass
class DatasetSpec:
    """Everything that determines a synthetic dataset given its seed."""

    n_sites: int = 2000
    latent_dim: int = 16
    modality_dims: tuple[int, ...] = (24, 40)
    n_labels: int = 8
    task_kind: str = "multi-label"
    n_groups: int = 7
    noise_sigma: float = 0.1
    group_shift: float = 1.0
    seed: int | None = None

    def __post_init__(self):
        self.modality_dims = tuple(int(v) for v in self.modality_dims)
        if self.n_sites < 5:
            raise ValidationError("n_sites must be at least 5")
        if self.latent_dim < 1 or self.n_labels < 2:
            raise ValidationError("latent_dim must be >= 1 and n_labels >= 2")
        if not self.modality_dims or any(v < 1 for v in self.modality_dims):
            raise ValidationError("modality_dims must be positive")
        if self.task_kind not in TASK_KINDS:
            raise ValidationError(f"unknown task kind {self.task_kind!r}")
        if self.n_groups < 1:
            raise ValidationError("n_groups must be >= 1")
        if self.noise_sigma < 0.0 or self.group_shift < 0.0:
            raise ValidationError("noise_sigma and group_shift must be non-negative")

    @property
    def n_modalities(self) -> int:
        return len(self.modality_dims)


@dataclass
class ScenarioSpec:
    """How the training set is carved into client shards."""

    kind: str = "iid"
    missing_fraction: float = 0.5
    jitter: float = 0.5

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ValidationError(f"unknown scenario kind {self.kind!r}")
        if not 0.0 <= self.missing_fraction <= 1.0:
            raise ValidationError("missing_fraction must lie in [0, 1]")
        if self.jitter < 0.0:
            raise ValidationError("jitter must be non-negative")


@dataclass
class Sample:
    geo_key: int
    modality_id: int
    features: Array
    labels: Array | int


@dataclass
class Shard:
    """Columnar store of one modality's samples; immutable by convention."""

    modality_id: int
    task_kind: str
    geo_keys: Array  # int64 [n]
    features: Array  # float64 [n, dim]
    labels: Array  # float64 [n, n_labels] for multi-label, int64 [n] otherwise

    def __post_init__(self):
        self.geo_keys = np.ascontiguousarray(self.geo_keys, dtype=np.int64)
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        if self.task_kind not in TASK_KINDS:
            raise ValidationError(f"unknown task kind {self.task_kind!r}")
        if self.task_kind == "multi-label":
            self.labels = np.ascontiguousarray(self.labels, dtype=np.float64)
            if self.labels.ndim != 2 or self.labels.shape[0] != self.n:
                raise ValidationError("multi-label labels must be [n, n_labels]")
        else:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.n,):
                raise ValidationError("single-label labels must be [n]")
        if self.features.ndim != 2 or self.features.shape[0] != self.n:
            raise ValidationError("features must be [n, dim]")

    @property
    def n(self) -> int:
        return self.geo_keys.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def sample(self, i: int) -> Sample:
        labels = self.labels[i] if self.task_kind == "multi-label" else int(self.labels[i])
        return Sample(
            geo_key=int(self.geo_keys[i]),
            modality_id=self.modality_id,
            features=self.features[i],
            labels=labels,
        )

    def select(self, idx) -> "Shard":
        return Shard(
            modality_id=self.modality_id,
            task_kind=self.task_kind,
            geo_keys=self.geo_keys[idx].copy(),
            features=self.features[idx].copy(),
            labels=self.labels[idx].copy(),
        )


@dataclass
class SyntheticDataset:
    spec: DatasetSpec
    train: list[Shard]  # one shard per modality, aligned by row
    test: list[Shard]
    site_group: Array  # int64 [n_sites], group id per geo_key


_GROUP_LABEL_MIX = 0.35  # fraction of the group shift that leaks into label space
_NUISANCE_SCALE = 3.0  # std of label-orthogonal latent directions vs label directions


def _label_basis(label_proj):
    q, _ = np.linalg.qr(label_proj)
    return q


def _group_offsets(rng, spec, q_label):
    """Per-group latent offsets, dominated by label-orthogonal directions.

    Group shifts model acquisition nuisances: most of each offset lies in
    the orthogonal complement of the label projection (so it moves features
    without moving labels), plus a smaller label-aligned component that
    skews per-group label marginals.
    """
    raw = rng.standard_normal((spec.n_groups, spec.latent_dim))
    parallel = raw @ q_label @ q_label.T
    orthogonal = raw - parallel
    return spec.group_shift * (orthogonal + _GROUP_LABEL_MIX * parallel)


def _anisotropic_noise(rng, n, q_label, latent_dim):
    """Unit-variance label directions, inflated label-orthogonal directions.

    The dominant variance is nuisance: that is what makes decorrelation
    worthwhile downstream and mirrors acquisition variability dwarfing the
    class signal in the raw measurements.
    """
    eps = rng.standard_normal((n, latent_dim))
    parallel = eps @ q_label @ q_label.T
    return parallel + _NUISANCE_SCALE * (eps - parallel)


def gen_synthetic(spec: DatasetSpec) -> SyntheticDataset:
    """Generate paired train/test shards for every modality.

    Both modality views of a site always land in the same split. Multi-label
    thresholds are calibrated on the training split so every label's
    prevalence falls inside [0.2, 0.5].
    """
    if spec.seed is None:
        raise ValidationError("dataset seed must be resolved before generation")
    rng = np.random.default_rng(spec.seed)
    n = spec.n_sites
    groups = np.arange(n, dtype=np.int64) % spec.n_groups
    label_proj = rng.standard_normal((spec.latent_dim, spec.n_labels))
    q_label = _label_basis(label_proj)
    group_means = _group_offsets(rng, spec, q_label)
    latents = group_means[groups] + _anisotropic_noise(rng, n, q_label, spec.latent_dim)

    views = []
    for m, dim in enumerate(spec.modality_dims):
        mix = rng.standard_normal((spec.latent_dim, dim)) / spec.latent_dim**0.5
        raw = latents @ mix
        if m % 2 == 1:
            raw = np.tanh(raw)
        views.append(raw + spec.noise_sigma * rng.standard_normal((n, dim)))

    perm = rng.permutation(n)
    n_train = int(round(n * 0.8))
    train_sites = np.sort(perm[:n_train])
    test_sites = np.sort(perm[n_train:])

    if spec.task_kind == "multi-label":
        scores = latents @ label_proj
        thresholds = np.empty(spec.n_labels)
        for lbl in range(spec.n_labels):
            ok = False
            for _ in range(100):
                target = rng.uniform(0.25, 0.45)
                thr = np.quantile(scores[train_sites, lbl], 1.0 - target)
                prevalence = float((scores[train_sites, lbl] > thr).mean())
                if _PREVALENCE_LOW <= prevalence <= _PREVALENCE_HIGH:
                    thresholds[lbl] = thr
                    ok = True
                    break
            if not ok:
                raise DataError(
                    f"could not calibrate label {lbl} prevalence into "
                    f"[{_PREVALENCE_LOW}, {_PREVALENCE_HIGH}] after 100 attempts"
                )
        labels = (scores > thresholds).astype(np.float64)
    else:
        labels = np.argmax(latents @ label_proj, axis=1).astype(np.int64)

    def shards_for(sites: Array) -> list[Shard]:
        return [
            Shard(
                modality_id=m,
                task_kind=spec.task_kind,
                geo_keys=sites,
                features=views[m][sites],
                labels=labels[sites],
            )
            for m in range(spec.n_modalities)
        ]

    return SyntheticDataset(
        spec=spec,
        train=shards_for(train_sites),
        test=shards_for(test_sites),
        site_group=groups,
    )


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------


def clients_per_modality(k_clients: int, n_modalities: int) -> list[int]:
    """Split K clients across modalities as evenly as possible."""
    if k_clients < n_modalities:
        raise ValidationError(
            f"need at least one client per modality: K={k_clients}, "
            f"modalities={n_modalities}"
        )
    base = k_clients // n_modalities
    return [base + (1 if m < k_clients % n_modalities else 0) for m in range(n_modalities)]


def client_modalities(k_clients: int, n_modalities: int) -> list[int]:
    """Modality id per client, clients grouped contiguously by modality."""
    counts = clients_per_modality(k_clients, n_modalities)
    out: list[int] = []
    for m, c in enumerate(counts):
        out.extend([m] * c)
    return out


def build_scenario(
    dataset: SyntheticDataset, scenario: ScenarioSpec, k_clients: int
) -> list[Shard]:
    """Carve the training set into K client shards, one modality each."""
    spec = dataset.spec
    counts = clients_per_modality(k_clients, spec.n_modalities)
    rng = np.random.default_rng([spec.seed, _SCENARIO_STREAM])
    shards: list[Shard] = []

    if scenario.kind in ("group-skew", "group-skew-mixed"):
        if spec.n_groups < max(counts):
            raise DataError(
                f"group-skew needs at least {max(counts)} groups, have {spec.n_groups}"
            )
        for m, n_m in enumerate(counts):
            train = dataset.train[m]
            site_groups = dataset.site_group[train.geo_keys]
            for j in range(n_m):
                idx = np.nonzero(site_groups % n_m == j)[0]
                shards.append(train.select(idx))
        if scenario.kind == "group-skew-mixed":
            # extra per-group noise emulates a second axis of heterogeneity
            sigmas = rng.uniform(0.0, scenario.jitter, size=spec.n_groups)
            for shard in shards:
                shard_groups = dataset.site_group[shard.geo_keys]
                noise = rng.standard_normal(shard.features.shape)
                shard.features = shard.features + sigmas[shard_groups, None] * noise
    elif scenario.kind in ("iid", "missing-A", "missing-B"):
        drop_modality = {"missing-A": 0, "missing-B": 1}.get(scenario.kind)
        for m, n_m in enumerate(counts):
            train = dataset.train[m]
            if drop_modality is not None and m == drop_modality:
                n_remove = int(train.n * scenario.missing_fraction)
                removed = rng.choice(train.n, size=n_remove, replace=False)
                keep = np.setdiff1d(np.arange(train.n), removed)
                train = train.select(keep)
            order = rng.permutation(train.n)
            for chunk in np.array_split(order, n_m):
                shards.append(train.select(np.sort(chunk)))
    else:  # pragma: no cover - ScenarioSpec already validates
        raise ValidationError(f"unknown scenario kind {scenario.kind!r}")

    for client_id, shard in enumerate(shards):
        if shard.n == 0:
            raise DataError(f"client {client_id} received an empty shard")
    return shards


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def batches(n_samples: int, batch_size: int, rng: np.random.Generator):
    """Yield index batches for one shuffled epoch.

    The trailing batch is dropped when it has fewer than 2 samples: both
    whitening and the contrastive loss are undefined on singletons.
    """
    if batch_size < 2:
        raise ConfigError(f"batch size must be at least 2, got {batch_size}")
    order = rng.permutation(n_samples)
    for start in range(0, n_samples, batch_size):
        chunk = order[start : start + batch_size]
        if chunk.size < 2:
            break
        yield chunk


# ---------------------------------------------------------------------------
# shard files and manifests
# ---------------------------------------------------------------------------


def _shard_dtype(dim: int, n_label_cols: int) -> np.dtype:
    return np.dtype(
        [("geo", "<u8"), ("feat", "<f8", (dim,)), ("lab", "<f8", (n_label_cols,))]
    )


def save_shard(shard: Shard, path, n_labels: int | None = None) -> None:
    """Write the binary shard format (see :func:`load_shard`)."""
    if shard.task_kind == "multi-label":
        n_label_cols = shard.labels.shape[1]
        lab = shard.labels
    else:
        n_label_cols = 1
        lab = shard.labels[:, None].astype(np.float64)
    declared_labels = n_labels if n_labels is not None else (
        shard.labels.shape[1] if shard.task_kind == "multi-label" else n_label_cols
    )
    header = SHARD_MAGIC + struct.pack(
        "<HHBIII",
        SHARD_VERSION,
        shard.modality_id,
        TASK_KINDS.index(shard.task_kind),
        shard.n,
        shard.dim,
        declared_labels,
    )
    records = np.empty(shard.n, dtype=_shard_dtype(shard.dim, n_label_cols))
    records["geo"] = shard.geo_keys
    records["feat"] = shard.features
    records["lab"] = lab
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(records.tobytes())


def load_shard(path) -> Shard:
    """Read a shard file.

    Layout: magic ``MFSH``, u16 version, u16 modality id, u8 task kind,
    u32 sample count, u32 feature dim, u32 label count, then per sample a
    u64 geo key, the features, and the labels as little-endian float64.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != SHARD_MAGIC:
        raise FormatError("bad magic, not a shard file", offset=0)
    header_size = 4 + struct.calcsize("<HHBIII")
    if len(data) < header_size:
        raise FormatError("file truncated inside header", offset=len(data))
    version, modality_id, task_idx, count, dim, n_labels = struct.unpack(
        "<HHBIII", data[4:header_size]
    )
    if version != SHARD_VERSION:
        raise FormatError(f"unsupported shard version {version}", offset=4)
    if task_idx >= len(TASK_KINDS):
        raise FormatError(f"unknown task kind code {task_idx}", offset=8)
    task_kind = TASK_KINDS[task_idx]
    n_label_cols = n_labels if task_kind == "multi-label" else 1
    dtype = _shard_dtype(dim, n_label_cols)
    expected = count * dtype.itemsize
    body = data[header_size:]
    if len(body) != expected:
        raise FormatError(
            f"payload is {len(body)} bytes, expected {expected}",
            offset=header_size + min(len(body), expected),
        )
    records = np.frombuffer(body, dtype=dtype)
    geo = records["geo"].astype(np.int64)
    feats = records["feat"].reshape(count, dim).copy()
    raw_labels = records["lab"].reshape(count, n_label_cols)
    if count and not (np.all(np.isfinite(feats)) and np.all(np.isfinite(raw_labels))):
        raise FormatError("shard payload contains non-finite values", offset=header_size)
    if task_kind == "multi-label":
        labels = raw_labels.copy()
    else:
        labels = raw_labels[:, 0].astype(np.int64)
    return Shard(
        modality_id=modality_id,
        task_kind=task_kind,
        geo_keys=geo,
        features=feats,
        labels=labels,
    )


def shards_equal(a: Shard, b: Shard) -> bool:
    return (
        a.modality_id == b.modality_id
        and a.task_kind == b.task_kind
        and a.geo_keys.tobytes() == b.geo_keys.tobytes()
        and a.features.tobytes() == b.features.tobytes()
        and a.labels.tobytes() == b.labels.tobytes()
    )


def write_manifest(
    path,
    shard_paths: dict[str, list[str]],
    scenario_kind: str,
    spec: DatasetSpec,
) -> None:
    payload = {
        "format": "fedmm-manifest",
        "version": 1,
        "scenario_kind": scenario_kind,
        "seed": spec.seed,
        "dataset": {
            "n_sites": spec.n_sites,
            "latent_dim": spec.latent_dim,
            "modality_dims": list(spec.modality_dims),
            "n_labels": spec.n_labels,
            "task_kind": spec.task_kind,
            "n_groups": spec.n_groups,
            "noise_sigma": spec.noise_sigma,
            "group_shift": spec.group_shift,
            "seed": spec.seed,
        },
        "shards": shard_paths,
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from None
    if payload.get("format") != "fedmm-manifest":
        raise FormatError("not a dataset manifest")
    return payload
