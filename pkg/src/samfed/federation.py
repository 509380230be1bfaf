"""Server/client orchestration: initialisation, local semi-supervised rounds,
FedAvg for homogeneous clients and condensation/fusion for heterogeneous ones.
"""
from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .agreement import STRATEGIES, PseudoLabelSet, agreement_rate, export_agreement_image
from .config import ExperimentConfig
from .data import generate_mixed, partition, write_pgm_dataset
from .errors import (
    EmptyPublicSet,
    FingerprintMismatch,
    MissingSoftLabels,
    NotInitialized,
    ZeroWeight,
)
from .losses import batch_unsup_loss, kl_fusion_loss
from .metrics import MetricResult, dice, evaluate
from .models import (
    LoraAdapter,
    LoraForward,
    ModelParams,
    SegModel,
    apply_lora,
    make_optimizer,
    predict_proba,
    save_checkpoint,
    stack_batch,
    train_supervised,
)

log = logging.getLogger(__name__)

REPORT_HEADER = ("round", "client", "dice", "hd95", "mean_lambda", "agreement_rate", "unsup_loss")
EVAL_BATCH = 8


@dataclass
class ClientState:
    id: str
    index: int
    model: SegModel
    unlabeled: np.ndarray  # [n, H, W]
    test: list
    val: list = field(default_factory=list)
    cached_teacher_maps: Optional[np.ndarray] = None  # [n, H, W, N]
    pseudo: list = field(default_factory=list)
    last_unsup_loss: float = float("nan")

    @property
    def n_samples(self) -> int:
        return len(self.unlabeled)


@dataclass
class ServerState:
    teacher: LoraForward
    global_model: SegModel
    public_data: list
    mode: str
    round: int = 0
    soft_labels: Optional[np.ndarray] = None


@dataclass
class RoundReport:
    round: int
    clients: list  # per client: dict with REPORT_HEADER[1:] keys

    def means(self) -> dict:
        keys = REPORT_HEADER[2:]
        return {k: float(np.mean([c[k] for c in self.clients])) for k in keys}


# -- initialisation ------------------------------------------------------------------

def _copy_model(m: SegModel) -> SegModel:
    return SegModel(m.cfg, m.params.copy(), m.net)


def _cached(cache: Optional[dict], key, build):
    if cache is None:
        return build()
    if key not in cache:
        cache[key] = build()
    return cache[key]


def build_teacher(cfg: ExperimentConfig, public: list, cache: Optional[dict] = None) -> LoraForward:
    """Broadly pretrain a wide network, then low-rank fine-tune it on the public set."""

    def build():
        foundation, _ = generate_mixed(cfg.foundation_count, cfg.image_size, cfg.foundation_styles,
                                       cfg.foundation_noise_sd, cfg.seed + 1000,
                                       cfg.foundation_contrast)
        base = SegModel.build(cfg.teacher_config, cfg.seed + 1)
        train_supervised(base, foundation, cfg.foundation_epochs, cfg.pretrain_lr, cfg.seed + 1,
                         cfg.batch_size, cfg.optimizer)
        adapter = LoraAdapter.init(base.params, cfg.lora_layers, cfg.lora_rank, cfg.lora_alpha,
                                   cfg.lora_dropout, seed=cfg.seed + 2)
        teacher = apply_lora(base.params, adapter, base.net)
        train_supervised(teacher, public, cfg.teacher_epochs, cfg.pretrain_lr, cfg.seed + 2,
                         cfg.batch_size, cfg.optimizer)
        return teacher

    key = ("teacher", cfg.seed, cfg.image_size, cfg.styles, cfg.noise_sd, cfg.contrast,
           cfg.partition_spec, cfg.teacher_config, cfg.foundation_count, cfg.foundation_styles,
           cfg.foundation_noise_sd, cfg.foundation_contrast, cfg.foundation_epochs,
           cfg.teacher_epochs, cfg.lora_targets, cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout,
           cfg.pretrain_lr, cfg.optimizer, cfg.batch_size)
    return _cached(cache, key, build)


def pretrain(cfg: ExperimentConfig, net_cfg, model_seed: int, public: list,
             cache: Optional[dict] = None) -> SegModel:
    """A fresh network trained on the public labeled set (returned as a private copy)."""

    def build():
        m = SegModel.build(net_cfg, model_seed)
        train_supervised(m, public, cfg.pretrain_epochs, cfg.pretrain_lr, cfg.seed + 3,
                         cfg.batch_size, cfg.optimizer)
        return m

    key = ("pretrain", net_cfg, model_seed, cfg.seed, cfg.image_size, cfg.styles, cfg.noise_sd,
           cfg.contrast, cfg.partition_spec, cfg.pretrain_epochs, cfg.pretrain_lr, cfg.optimizer, cfg.batch_size)
    return _copy_model(_cached(cache, key, build))


def make_data(cfg: ExperimentConfig):
    spec = cfg.partition_spec
    total = spec.public_count + sum(spec.client_counts)
    data, groups = generate_mixed(total, cfg.image_size, cfg.styles, cfg.noise_sd, cfg.seed,
                                  cfg.contrast)
    return partition(data, spec, cfg.seed, groups)


def initialize(cfg: ExperimentConfig, cache: Optional[dict] = None):
    """Train teacher and global model on the public set, pretrain every client
    on it, and cache the teacher's maps for each client's unlabeled images."""
    cfg.validate()
    parts = make_data(cfg)
    if not parts.public:
        raise EmptyPublicSet("public labeled set is empty")
    teacher = build_teacher(cfg, parts.public, cache)
    global_model = pretrain(cfg, cfg.global_config, cfg.seed + 10, parts.public, cache)
    server = ServerState(teacher, global_model, parts.public, cfg.mode)
    clients = []
    homogeneous = cfg.mode == "homogeneous"
    for k, (net_cfg, split) in enumerate(zip(cfg.client_configs(), parts.clients)):
        model_seed = cfg.seed + 20 if homogeneous else cfg.seed + 20 + k
        model = pretrain(cfg, net_cfg, model_seed, parts.public, cache)
        unlabeled = np.stack([img for img, _ in split.train])
        maps = predict_proba(teacher, unlabeled, EVAL_BATCH)
        clients.append(ClientState(f"C{k + 1}", k, model, unlabeled, split.test, split.val, maps))
    return server, clients


# -- local rounds --------------------------------------------------------------------

def client_round(c: ClientState, cfg: ExperimentConfig, round_idx: int,
                 epochs: Optional[int] = None, lr: Optional[float] = None) -> ClientState:
    """Regenerate pseudo-labels from the current client predictions at every
    step and minimise the confidence-weighted loss on the unlabeled set."""
    if c.cached_teacher_maps is None:
        raise NotInitialized(f"{c.id}: teacher maps missing; run initialize() first")
    epochs = cfg.epochs if epochs is None else epochs
    lr = cfg.lr if lr is None else lr
    strategy = STRATEGIES[cfg.pseudo_label]
    rng = np.random.default_rng([cfg.seed, round_idx, c.index])
    opt = make_optimizer(cfg.optimizer, c.model.trainable(), lr)
    n = c.n_samples
    pseudo: list = [None] * n
    loss_sum = 0.0
    for _ in range(epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            x = stack_batch(c.unlabeled[idx])
            with T.Tape() as tape:
                logits = c.model.logits(x)
                client_probs = T.softmax_np(logits.data)
                fused = strategy(c.cached_teacher_maps[idx], client_probs)
                items = []
                for j, k in enumerate(idx):
                    pl = PseudoLabelSet(fused.labels[j], fused.weights[j], fused.agreement_mask[j])
                    pseudo[k] = pl
                    items.append((T.take(logits, j), pl))
                loss = batch_unsup_loss(items)
            T.backward(tape, loss)
            opt.step()
            loss_sum += loss.item() * len(idx)
    if epochs == 0:
        probs = c.model.predict_proba(c.unlabeled, EVAL_BATCH)
        fused = strategy(c.cached_teacher_maps, probs)
        pseudo = [PseudoLabelSet(fused.labels[k], fused.weights[k], fused.agreement_mask[k])
                  for k in range(n)]
    c.pseudo = pseudo
    c.last_unsup_loss = loss_sum / n if epochs else float("nan")
    return c


# -- aggregation -----------------------------------------------------------------------

def fedavg(clients: Sequence[ModelParams], weights: Sequence[float]) -> ModelParams:
    """Data-weighted parameter average ``Σ n_c θ_c / Σ n_c`` in a fixed client order."""
    if not clients:
        raise ValueError("fedavg needs at least one client")
    fp = clients[0].arch_fingerprint
    if any(c.arch_fingerprint != fp or c.names() != clients[0].names() for c in clients):
        raise FingerprintMismatch("fedavg requires identical architectures")
    if len(weights) != len(clients):
        raise ValueError("one weight per client required")
    if any(w <= 0 for w in weights):
        raise ZeroWeight("client weights must be positive")
    total = float(sum(weights))
    entries = []
    for j, name in enumerate(clients[0].names()):
        acc = np.zeros(clients[0].tensors()[j].shape, dtype=np.float64)
        for c, w in zip(clients, weights):
            acc += float(w) * c.tensors()[j].data.astype(np.float64)
        entries.append((name, T.Tensor((acc / total).astype(T.DTYPE), requires_grad=True)))
    return ModelParams(entries, fp)


def broadcast(params: ModelParams, clients: Sequence[ClientState]) -> None:
    for c in clients:
        c.model.params.load_arrays(params.arrays())


def regularity_condensation(clients: Sequence, public_data: Sequence) -> np.ndarray:
    """Dice-weighted ensemble of client predictions on the public set.

    ``clients`` holds :class:`ClientState` objects or any objects exposing
    ``predict_proba(images)``; alternatively pass precomputed maps as
    ``[K, P, H, W, N]`` arrays. Returns ``[P, H, W, N]`` soft labels.
    """
    images = np.stack([img for img, _ in public_data])
    masks = [m for _, m in public_data]
    if isinstance(clients, np.ndarray):
        maps = clients
    else:
        maps = np.stack([_predict(c, images) for c in clients])
    n_cls = maps.shape[-1]
    out = np.empty(maps.shape[1:], dtype=np.float64)
    for p in range(len(images)):
        preds = maps[:, p].argmax(axis=-1)
        w = np.array([np.mean([dice(pred, masks[p], cls) for cls in range(1, n_cls)])
                      for pred in preds])
        if w.sum() <= 0:
            w = np.ones(len(w))
        w = w / w.sum()
        soft = np.tensordot(w, maps[:, p].astype(np.float64), axes=1)
        out[p] = soft / soft.sum(axis=-1, keepdims=True)
    return out


def _predict(c, images: np.ndarray) -> np.ndarray:
    model = c.model if isinstance(c, ClientState) else c
    return model.predict_proba(images, EVAL_BATCH)


def regularity_fusion(c: ClientState, public_data: Sequence, soft_labels: Optional[np.ndarray],
                      beta: float, cfg: ExperimentConfig, round_idx: int = 0,
                      epochs: Optional[int] = None) -> ClientState:
    """Gradient steps on ``beta · KL(soft ‖ client)`` over the public images."""
    if soft_labels is None or len(soft_labels) != len(public_data):
        raise MissingSoftLabels(f"{c.id}: soft labels must cover the public set")
    epochs = cfg.rf_epochs if epochs is None else epochs
    if beta == 0 or epochs == 0:
        return c
    rng = np.random.default_rng([cfg.seed, round_idx, c.index, 1])
    opt = make_optimizer(cfg.optimizer, c.model.trainable(), cfg.lr)
    images = np.stack([img for img, _ in public_data])
    for _ in range(epochs):
        order = rng.permutation(len(images))
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            with T.Tape() as tape:
                probs = T.softmax_channels(c.model.logits(stack_batch(images[idx])))
                loss = T.mul_scalar(kl_fusion_loss(probs, soft_labels[idx]), beta)
            T.backward(tape, loss)
            opt.step()
    return c


def mean_kl(c: ClientState, public_data: Sequence, soft_labels: np.ndarray) -> float:
    images = np.stack([img for img, _ in public_data])
    probs = c.model.predict_proba(images, EVAL_BATCH).astype(np.float64)
    q = np.maximum(probs, 1e-12)
    p = soft_labels
    return float(np.mean(np.where(p > 0, p * (np.log(np.maximum(p, 1e-12)) - np.log(q)), 0.0).sum(-1)))


# -- evaluation ------------------------------------------------------------------------

def evaluate_model(model: SegModel, data: Sequence) -> MetricResult:
    """Mean Dice/HD95 over ``(image, mask)`` pairs (per-image metrics averaged)."""
    if not data:
        return MetricResult(float("nan"), float("nan"))
    images = np.stack([img for img, _ in data])
    preds = model.predict_proba(images, EVAL_BATCH).argmax(axis=-1)
    results = [evaluate(p, m, model.cfg.num_classes) for p, (_, m) in zip(preds, data)]
    return MetricResult(float(np.mean([r.dice for r in results])),
                        float(np.mean([r.hd95 for r in results])))


def _client_row(c: ClientState) -> dict:
    res = evaluate_model(c.model, c.test)
    return {
        "client": c.id,
        "dice": res.dice,
        "hd95": res.hd95,
        "mean_lambda": float(np.mean([p.weights.mean() for p in c.pseudo])),
        "agreement_rate": float(np.mean([agreement_rate(p) for p in c.pseudo])),
        "unsup_loss": c.last_unsup_loss,
    }


# -- full protocol ---------------------------------------------------------------------

@dataclass
class ExperimentResult:
    server: ServerState
    clients: list
    reports: list


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def run_rounds(cfg: ExperimentConfig, server: ServerState, clients: list,
               agreement_dir: Optional[Path] = None) -> list[RoundReport]:
    reports = []
    for r in range(1, cfg.rounds + 1):
        _map(lambda c: client_round(c, cfg, r), clients, cfg.threads)
        # barrier: every client finished round r before aggregation
        if cfg.mode == "homogeneous":
            avg = fedavg([c.model.params for c in clients], [c.n_samples for c in clients])
            broadcast(avg, clients)
            server.global_model.params.load_arrays(avg.arrays())
        else:
            server.soft_labels = regularity_condensation(clients, server.public_data)
            _map(lambda c: regularity_fusion(c, server.public_data, server.soft_labels,
                                             cfg.beta, cfg, r), clients, cfg.threads)
        server.round = r
        if agreement_dir is not None:
            for c in clients:
                export_agreement_image(c.pseudo[0], agreement_dir / f"round{r}_client{c.index + 1}.pgm")
        rows = _map(_client_row, clients, cfg.threads)
        reports.append(RoundReport(r, rows))
        means = reports[-1].means()
        log.info("round %d: dice %.4f hd95 %.3f agree %.4f", r, means["dice"], means["hd95"],
                 means["agreement_rate"])
    return reports


def reports_to_csv(reports: Sequence[RoundReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for rep in reports:
        for row in rep.clients:
            w.writerow([rep.round, row["client"]] + [f"{row[k]:.6f}" for k in REPORT_HEADER[2:]])
    return buf.getvalue()


def run_experiment(cfg: ExperimentConfig, out_dir=None, cache: Optional[dict] = None) -> ExperimentResult:
    """Initialise, run ``cfg.rounds`` federated rounds and (optionally) write
    ``report.csv``, ``ckpt/*.bin``, ``agreement/*.pgm`` and ``test/<client>/``."""
    server, clients = initialize(cfg, cache)
    agreement_dir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        agreement_dir = out_dir / "agreement"
        agreement_dir.mkdir(parents=True, exist_ok=True)
    reports = run_rounds(cfg, server, clients, agreement_dir)
    if out_dir is not None:
        (out_dir / "report.csv").write_text(reports_to_csv(reports))
        ckpt = out_dir / "ckpt"
        ckpt.mkdir(exist_ok=True)
        for c in clients:
            save_checkpoint(ckpt / f"{c.id}.bin", c.model.params)
            write_pgm_dataset(out_dir / "test" / c.id, c.test)
        save_checkpoint(ckpt / "teacher.bin", server.teacher.merged())
        save_checkpoint(ckpt / "global.bin", server.global_model.params)
    return ExperimentResult(server, clients, reports)
