"""Synchronous round-based federated training.

Each round: broadcast the global parameters, run every client's local
update (serially or on a thread pool; results are identical either way
because each client owns its state and RNG stream and the global snapshot
is read-only), aggregate per-modality encoders and the shared head, then
optionally evaluate. Aggregation accumulates client deltas around the
broadcast reference in ascending client-id order, which makes "all clients
returned the broadcast unchanged" an exact fixed point and keeps the
result independent of completion order.

Whitening running statistics never leave a client: the first broadcast
initializes them and later broadcasts overwrite parameters only.
"""

from __future__ import annotations

import dataclasses
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, config_to_dict
from .data import Shard, batches, build_scenario, gen_synthetic
from .errors import DataError, DimensionError
from .losses import LossConfig, local_objective
from .metrics import MetricsReport, evaluate, parse_mode, report_from_predictions
from .models import (
    Encoder,
    GlobalModelSet,
    TaskHead,
    build_encoder,
    clone_encoder,
    clone_head,
    encode,
    flatten_params,
    fuse,
    head_forward,
    init_dense,
    param_count,
    save_model,
    unflatten_params,
)
from .nncore import AdamState, adam_step

_MODEL_STREAM = 1
_CLIENT_STREAM = 2

CSV_COLUMNS = (
    "round",
    "mode",
    "micro_f1",
    "macro_f1",
    "accuracy",
    "mean_ce",
    "mean_ntx",
    "bytes_exchanged",
)


def model_rng(seed: int, part: int) -> np.random.Generator:
    """Initialization stream for one model part.

    Encoder for modality m draws from part=m; a head for the model whose
    first slot is modality m draws from part=P+m. With one modality the
    single-modality baseline therefore initializes identically to the full
    run, which is what makes the two coincide exactly at P=1.
    """
    return np.random.default_rng([seed, _MODEL_STREAM, part])


def client_rng(seed: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, _CLIENT_STREAM, client_id])


def init_model(cfg: ExperimentConfig) -> GlobalModelSet:
    spec = cfg.resolved_dataset()
    p = spec.n_modalities
    encoders = [
        build_encoder(
            m,
            spec.modality_dims[m],
            cfg.d_hidden,
            cfg.d_feature,
            cfg.use_fw,
            model_rng(cfg.seed, m),
        )
        for m in range(p)
    ]
    head = TaskHead(
        layer=init_dense(model_rng(cfg.seed, p), p * cfg.d_feature, spec.n_labels, 1.0),
        task_kind=spec.task_kind,
    )
    return GlobalModelSet(encoders=encoders, head=head)


def _baseline_submodel(cfg: ExperimentConfig, spec, modality: int) -> GlobalModelSet:
    p = spec.n_modalities
    encoder = build_encoder(
        0,
        spec.modality_dims[modality],
        cfg.d_hidden,
        cfg.d_feature,
        False,
        model_rng(cfg.seed, modality),
    )
    head = TaskHead(
        layer=init_dense(
            model_rng(cfg.seed, p + modality), cfg.d_feature, spec.n_labels, 1.0
        ),
        task_kind=spec.task_kind,
    )
    return GlobalModelSet(encoders=[encoder], head=head)


@dataclass
class ClientState:
    """One client's private shard, local model copy, optimizer, and RNG."""

    client_id: int
    modality_id: int
    shard: Shard
    encoder: Encoder
    head: TaskHead
    adam: AdamState
    rng: np.random.Generator


@dataclass
class ClientUpdate:
    client_id: int
    modality_id: int  # slot within the model being aggregated
    encoder_flat: np.ndarray
    head_flat: np.ndarray
    n_samples: int
    mean_ce: float
    mean_ntx: float


@dataclass
class AggregationPlan:
    """Data-proportional weights: global per client and normalized per group."""

    alpha: dict[int, float]
    group_weights: dict[int, dict[int, float]]


@dataclass
class RoundLog:
    round_index: int
    client_ce: dict[int, float]
    client_ntx: dict[int, float]
    seconds: float
    bytes_exchanged: int
    evals: dict[str, MetricsReport] = field(default_factory=dict)

    @property
    def mean_ce(self) -> float:
        return float(np.mean(list(self.client_ce.values()))) if self.client_ce else 0.0

    @property
    def mean_ntx(self) -> float:
        return float(np.mean(list(self.client_ntx.values()))) if self.client_ntx else 0.0


@dataclass
class ExperimentLog:
    config: ExperimentConfig
    initial_evals: dict[str, MetricsReport]
    rounds: list[RoundLog]
    model: GlobalModelSet | None = None
    baseline_models: list[GlobalModelSet] | None = None

    def final_eval(self, mode: str) -> MetricsReport:
        for rlog in reversed(self.rounds):
            if rlog.evals:
                return rlog.evals[mode]
        return self.initial_evals[mode]


def make_client(
    client_id: int,
    shard: Shard,
    encoder_template: Encoder,
    head_template: TaskHead,
    cfg: ExperimentConfig,
) -> ClientState:
    if shard.n == 0:
        raise DataError(f"client {client_id} has an empty shard")
    encoder = clone_encoder(encoder_template)
    head = clone_head(head_template)
    adam = AdamState.create(
        param_count(encoder) + param_count(head),
        lr=cfg.lr,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        weight_decay=cfg.weight_decay,
    )
    return ClientState(
        client_id=client_id,
        modality_id=shard.modality_id,
        shard=shard,
        encoder=encoder,
        head=head,
        adam=adam,
        rng=client_rng(cfg.seed, client_id),
    )


def client_update(
    client: ClientState,
    global_model: GlobalModelSet,
    cfg: ExperimentConfig,
    loss_cfg: LossConfig,
) -> ClientUpdate:
    """Copy the broadcast parameters in, run E local epochs, return the result.

    The client keeps its own whitening running statistics across rounds;
    only parameters are overwritten by the broadcast. Other-modality
    encoders of ``global_model`` are read-only throughout.
    """
    if client.shard.n == 0:
        raise DataError(f"client {client.client_id} has an empty shard")
    slot = client.encoder.modality_id
    client.encoder = unflatten_params(
        flatten_params(global_model.encoders[slot]), client.encoder
    )
    client.head = unflatten_params(flatten_params(global_model.head), client.head)

    n_enc = param_count(client.encoder)
    ce_total = ntx_total = 0.0
    n_batches = 0
    for _ in range(cfg.local_epochs):
        for idx in batches(client.shard.n, cfg.batch_size, client.rng):
            res = local_objective(
                client.shard.features[idx],
                client.shard.labels[idx],
                client.encoder,
                client.head,
                global_model,
                loss_cfg,
            )
            flat = np.concatenate(
                [flatten_params(client.encoder), flatten_params(client.head)]
            )
            grad = np.concatenate([res.grad_encoder, res.grad_head])
            flat = adam_step(flat, grad, client.adam)
            client.encoder = unflatten_params(flat[:n_enc], client.encoder)
            client.head = unflatten_params(flat[n_enc:], client.head)
            ce_total += res.ce
            ntx_total += res.ntx
            n_batches += 1
    return ClientUpdate(
        client_id=client.client_id,
        modality_id=slot,
        encoder_flat=flatten_params(client.encoder),
        head_flat=flatten_params(client.head),
        n_samples=client.shard.n,
        mean_ce=ce_total / n_batches if n_batches else 0.0,
        mean_ntx=ntx_total / n_batches if n_batches else 0.0,
    )


def build_aggregation_plan(updates: list[ClientUpdate]) -> AggregationPlan:
    total = sum(u.n_samples for u in updates)
    alpha = {u.client_id: u.n_samples / total for u in updates}
    group_weights: dict[int, dict[int, float]] = {}
    for u in updates:
        group_weights.setdefault(u.modality_id, {})[u.client_id] = u.n_samples
    for m, weights in group_weights.items():
        group_total = sum(weights.values())
        group_weights[m] = {cid: n / group_total for cid, n in weights.items()}
    return AggregationPlan(alpha=alpha, group_weights=group_weights)


def aggregate(updates: list[ClientUpdate], model: GlobalModelSet) -> GlobalModelSet:
    """Weighted-average client parameters into a new global model.

    Encoders average within their modality group with renormalized
    data-proportional weights; the head averages over all clients. Sums
    run in ascending client-id order over deltas from the broadcast
    parameters; a single-member group copies its update verbatim.
    """
    if not updates:
        raise DataError("aggregation needs at least one client update")
    updates = sorted(updates, key=lambda u: u.client_id)
    plan = build_aggregation_plan(updates)
    new_encoders = []
    for m, enc in enumerate(model.encoders):
        group = [u for u in updates if u.modality_id == m]
        if not group:
            raise DataError(f"no client update for modality {m} this round")
        base = flatten_params(enc)
        for u in group:
            if u.encoder_flat.shape != base.shape:
                raise DimensionError(
                    f"client {u.client_id} encoder has {u.encoder_flat.shape}, "
                    f"expected {base.shape}"
                )
        if len(group) == 1:
            flat = group[0].encoder_flat.copy()
        else:
            flat = base.copy()
            for u in group:
                flat += plan.group_weights[m][u.client_id] * (u.encoder_flat - base)
        new_encoders.append(unflatten_params(flat, enc))

    base_head = flatten_params(model.head)
    for u in updates:
        if u.head_flat.shape != base_head.shape:
            raise DimensionError(
                f"client {u.client_id} head has {u.head_flat.shape}, "
                f"expected {base_head.shape}"
            )
    if len(updates) == 1:
        head_flat = updates[0].head_flat.copy()
    else:
        head_flat = base_head.copy()
        for u in updates:
            head_flat += plan.alpha[u.client_id] * (u.head_flat - base_head)
    new_head = unflatten_params(head_flat, model.head)
    return GlobalModelSet(encoders=new_encoders, head=new_head, round=model.round + 1)


def _run_updates(
    clients: list[ClientState],
    model: GlobalModelSet,
    cfg: ExperimentConfig,
    loss_cfg: LossConfig,
    parallel: bool,
) -> list[ClientUpdate]:
    if parallel and len(clients) > 1:
        with ThreadPoolExecutor(max_workers=min(8, len(clients))) as pool:
            return list(
                pool.map(lambda c: client_update(c, model, cfg, loss_cfg), clients)
            )
    return [client_update(c, model, cfg, loss_cfg) for c in clients]


def run_round(
    model: GlobalModelSet,
    clients: list[ClientState],
    cfg: ExperimentConfig,
    loss_cfg: LossConfig,
    parallel: bool = False,
) -> tuple[GlobalModelSet, RoundLog]:
    started = time.perf_counter()
    updates = _run_updates(clients, model, cfg, loss_cfg, parallel)
    new_model = aggregate(updates, model)
    payload = sum(u.encoder_flat.size + u.head_flat.size for u in updates)
    log = RoundLog(
        round_index=new_model.round,
        client_ce={u.client_id: u.mean_ce for u in updates},
        client_ntx={u.client_id: u.mean_ntx for u in updates},
        seconds=time.perf_counter() - started,
        bytes_exchanged=2 * 8 * payload,  # broadcast + upload of float64 payloads
    )
    return new_model, log


def run_experiment(cfg: ExperimentConfig, parallel: bool = False) -> ExperimentLog:
    """Full framework run: R rounds plus scheduled multi-mode evaluations."""
    cfg.validate()
    dataset = gen_synthetic(cfg.resolved_dataset())
    shards = build_scenario(dataset, cfg.scenario, cfg.k_clients)
    model = init_model(cfg)
    loss_cfg = LossConfig(
        tau=cfg.tau,
        lambda_mim=cfg.lambda_mim if cfg.use_mim else 0.0,
        ntxent_variant=cfg.ntxent_variant,
    )
    clients = [
        make_client(i, shard, model.encoders[shard.modality_id], model.head, cfg)
        for i, shard in enumerate(shards)
    ]
    initial = {mode: evaluate(model, dataset.test, mode) for mode in cfg.inference_modes}
    rounds: list[RoundLog] = []
    for r in range(1, cfg.rounds + 1):
        model, rlog = run_round(model, clients, cfg, loss_cfg, parallel)
        if r % cfg.eval_every == 0 or r == cfg.rounds:
            rlog.evals = {
                mode: evaluate(model, dataset.test, mode) for mode in cfg.inference_modes
            }
        rounds.append(rlog)
    log = ExperimentLog(config=cfg, initial_evals=initial, rounds=rounds, model=model)
    if cfg.output_dir:
        write_outputs(log, cfg.output_dir)
    return log


# ---------------------------------------------------------------------------
# single-modality federated baseline with late fusion
# ---------------------------------------------------------------------------


def evaluate_late_fusion(
    submodels: list[GlobalModelSet], test_shards: list[Shard], mode: str
) -> MetricsReport:
    """Average per-modality predicted probabilities over available modalities."""
    only = parse_mode(mode, len(submodels))
    wanted = [only] if only is not None else list(range(len(submodels)))
    prob_sum = None
    for m in wanted:
        feats = encode(submodels[m].encoders[0], test_shards[m].features, "eval")
        probs = head_forward(submodels[m].head, fuse(feats, 0, 1)).probabilities
        prob_sum = probs if prob_sum is None else prob_sum + probs
    fused = prob_sum / len(wanted)
    labels = test_shards[wanted[0]].labels
    return report_from_predictions(fused, labels, submodels[0].head.task_kind)


def baseline_fedavg_latefusion(
    cfg: ExperimentConfig, parallel: bool = False
) -> ExperimentLog:
    """Independent per-modality federated averaging, fused only at inference.

    Each modality trains its own encoder and private head (feature dim in,
    labels out) with plain weighted averaging; no whitening, no contrastive
    term. Inference averages the per-modality probabilities; single-modality
    modes use that modality's model alone.
    """
    cfg.validate()
    spec = cfg.resolved_dataset()
    dataset = gen_synthetic(spec)
    shards = build_scenario(dataset, cfg.scenario, cfg.k_clients)
    p = spec.n_modalities
    submodels = [_baseline_submodel(cfg, spec, m) for m in range(p)]
    loss_cfg = LossConfig(tau=cfg.tau, lambda_mim=0.0, ntxent_variant=cfg.ntxent_variant)
    clients_by_modality: list[list[ClientState]] = [[] for _ in range(p)]
    for i, shard in enumerate(shards):
        m = shard.modality_id
        clients_by_modality[m].append(
            make_client(i, shard, submodels[m].encoders[0], submodels[m].head, cfg)
        )
    initial = {
        mode: evaluate_late_fusion(submodels, dataset.test, mode)
        for mode in cfg.inference_modes
    }
    rounds: list[RoundLog] = []
    for r in range(1, cfg.rounds + 1):
        started = time.perf_counter()
        client_ce: dict[int, float] = {}
        payload = 0
        for m in range(p):
            updates = _run_updates(
                clients_by_modality[m], submodels[m], cfg, loss_cfg, parallel
            )
            submodels[m] = aggregate(updates, submodels[m])
            payload += sum(u.encoder_flat.size + u.head_flat.size for u in updates)
            client_ce.update({u.client_id: u.mean_ce for u in updates})
        rlog = RoundLog(
            round_index=r,
            client_ce=client_ce,
            client_ntx={cid: 0.0 for cid in client_ce},
            seconds=time.perf_counter() - started,
            bytes_exchanged=2 * 8 * payload,
        )
        if r % cfg.eval_every == 0 or r == cfg.rounds:
            rlog.evals = {
                mode: evaluate_late_fusion(submodels, dataset.test, mode)
                for mode in cfg.inference_modes
            }
        rounds.append(rlog)
    log = ExperimentLog(
        config=cfg, initial_evals=initial, rounds=rounds, baseline_models=submodels
    )
    if cfg.output_dir:
        write_outputs(log, cfg.output_dir)
    return log


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------

ABLATION_ROWS = (
    ("MF", False, False),
    ("MF+MIM", False, True),
    ("MF+FW", True, False),
    ("MF+FW+MIM", True, True),
)

DEFAULT_ABLATION_SCENARIOS = ("iid", "group-skew", "group-skew-mixed")


@dataclass
class AblationTable:
    rows: list[str]
    scenarios: list[str]
    micro_f1: dict[tuple[str, str], float]

    def to_csv(self) -> str:
        lines = ["modules," + ",".join(self.scenarios)]
        for row in self.rows:
            cells = [repr(self.micro_f1[(row, s)]) for s in self.scenarios]
            lines.append(f"{row}," + ",".join(cells))
        return "\n".join(lines) + "\n"


def run_ablation(
    cfg: ExperimentConfig, scenarios: tuple[str, ...] = DEFAULT_ABLATION_SCENARIOS
) -> AblationTable:
    """Run the module on/off grid with shared seeds across rows.

    Every cell is the final-round fused-inference micro F1 of one run; all
    runs of a column share the identical dataset, shards, and RNG streams,
    so rows are paired comparisons.
    """
    table: dict[tuple[str, str], float] = {}
    for kind in scenarios:
        for name, use_fw, use_mim in ABLATION_ROWS:
            run_cfg = dataclasses.replace(
                cfg,
                scenario=dataclasses.replace(cfg.scenario, kind=kind),
                use_fw=use_fw,
                use_mim=use_mim,
                output_dir=None,
            )
            log = run_experiment(run_cfg)
            table[(name, kind)] = log.final_eval("both").micro_f1
    return AblationTable(
        rows=[r[0] for r in ABLATION_ROWS], scenarios=list(scenarios), micro_f1=table
    )


# ---------------------------------------------------------------------------
# logs on disk
# ---------------------------------------------------------------------------


def _csv_row(round_index, mode, report, mean_ce, mean_ntx, bytes_exchanged) -> str:
    return ",".join(
        [
            str(round_index),
            mode,
            repr(float(report.micro_f1)),
            repr(float(report.macro_f1)),
            repr(float(report.accuracy)),
            repr(float(mean_ce)),
            repr(float(mean_ntx)),
            str(bytes_exchanged),
        ]
    )


def experiment_csv(log: ExperimentLog) -> str:
    """Deterministic per-round, per-mode metric rows (no wall-clock columns)."""
    lines = [",".join(CSV_COLUMNS)]
    for mode in log.config.inference_modes:
        lines.append(_csv_row(0, mode, log.initial_evals[mode], 0.0, 0.0, 0))
    for rlog in log.rounds:
        for mode in log.config.inference_modes:
            if mode in rlog.evals:
                lines.append(
                    _csv_row(
                        rlog.round_index,
                        mode,
                        rlog.evals[mode],
                        rlog.mean_ce,
                        rlog.mean_ntx,
                        rlog.bytes_exchanged,
                    )
                )
    return "\n".join(lines) + "\n"


def timings_csv(log: ExperimentLog) -> str:
    """Wall-clock sidecar; kept out of the main log to keep it reproducible."""
    lines = ["round,seconds"]
    for rlog in log.rounds:
        lines.append(f"{rlog.round_index},{rlog.seconds:.6f}")
    return "\n".join(lines) + "\n"


def write_outputs(log: ExperimentLog, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "log.csv").write_text(experiment_csv(log))
    (out / "timings.csv").write_text(timings_csv(log))
    (out / "config.json").write_text(
        json.dumps(config_to_dict(log.config), indent=2, sort_keys=True) + "\n"
    )
    if log.model is not None:
        save_model(log.model, out / "model.ckpt")
    if log.baseline_models is not None:
        for m, sub in enumerate(log.baseline_models):
            save_model(sub, out / f"baseline_m{m}.ckpt")
