"""Training, evaluation and ablation on top of the hybrid network."""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .checkpoint import _buffer_owners, load_checkpoint, save_checkpoint
from .data import CellRecord, Dataset, ZScoreStats, augment, stack, zscore_apply, zscore_fit
from .losses import LossWeights, inverse_frequency_alpha, total_loss
from .metrics import EvalReport, build_report
from .model import HybridNet, ModelConfig
from .tensorcore import NumericalError, Rng, derive_seed, no_grad

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr_init: float = 1e-3
    lr_final: float = 1e-5
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 5.0
    seed: int = 0
    variant: str = "full"
    augment: bool = True
    class_weighting: str = "inverse_frequency"  # inverse_frequency | uniform
    checkpoint_every: int = 0
    eval_batch_size: int = 128
    train_eval_max: int = 0  # >0: epoch-end train metrics on a fixed subset of this size
    loss: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (the Pearson term needs variance)")
        if self.class_weighting not in ("inverse_frequency", "uniform"):
            raise ValueError(f"unknown class_weighting {self.class_weighting!r}")

    def model_config(self) -> ModelConfig:
        return self.model.for_variant(self.variant)

    def loss_weights(self) -> LossWeights:
        """Loss weights with the disabled task's terms zeroed for single-task variants."""
        w = self.loss
        if self.variant == "cls_only":
            w = replace(w, lambda_reg=0.0)
        elif self.variant == "reg_only":
            w = replace(w, lambda_cls=0.0)
        return w

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["loss"]["alpha"] = list(self.loss.alpha)
        return d


_SECTIONS = {"train": TrainConfig, "loss": LossWeights, "model": ModelConfig}


def parse_config(text: str) -> TrainConfig:
    """Read a TOML config with optional ``[train]``, ``[loss]`` and ``[model]`` tables.

    Every field has a default; unknown tables or keys raise ``ValueError``.
    """
    raw = tomllib.loads(text)
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ValueError(f"unknown config table(s): {sorted(unknown)}")
    kwargs = {}
    for section, klass in _SECTIONS.items():
        table = raw.get(section, {})
        allowed = {f.name for f in fields(klass)} - ({"loss", "model"} if klass is TrainConfig else set())
        bad = set(table) - allowed
        if bad:
            raise ValueError(f"unknown key(s) in [{section}]: {sorted(bad)}")
        kwargs[section] = table
    loss = LossWeights(**kwargs["loss"])
    model = ModelConfig.from_dict(kwargs["model"])
    return TrainConfig(**kwargs["train"], loss=loss, model=model)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Cosine decay from ``lr_init`` at epoch 0 to ``lr_final`` at the last epoch."""
    if cfg.epochs == 1:
        return cfg.lr_init
    frac = epoch / (cfg.epochs - 1)
    return cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Adam with decoupled weight decay; decay applies to tensors with ndim >= 2.

    Parameters that received no gradient in a step are left untouched.
    """

    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.t = {k: 0 for k in params}

    def step(self) -> None:
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.t[k] += 1
            t = self.t[k]
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** t)
            vhat = v / (1 - self.b2 ** t)
            update = mhat / (np.sqrt(vhat) + self.eps)
            if self.wd and p.value.ndim >= 2:
                update = update + self.wd * p.value
            p.value = (p.value - p.value.dtype.type(self.lr) * update).astype(p.value.dtype, copy=False)


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(scale)
    return total


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)
    fusion_trajectory: list[list[float]] = field(default_factory=list)
    timing: list[float] = field(default_factory=list)

    def __eq__(self, other) -> bool:  # wall-clock excluded
        return (isinstance(other, TrainLog) and self.epochs == other.epochs
                and self.fusion_trajectory == other.fusion_trajectory)

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "fusion_trajectory": self.fusion_trajectory}

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        a = out / "train_log.json"
        a.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        b = out / "timing.json"
        b.write_text(json.dumps({"epoch_seconds": self.timing}, indent=2) + "\n", encoding="utf-8")
        return [a, b]


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, last_good: Path | None = None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainResult:
    model: HybridNet
    log: TrainLog
    stats: ZScoreStats
    best_state: dict[str, np.ndarray]
    best_epoch: int
    checkpoints: dict[str, Path] = field(default_factory=dict)


def _snapshot(model: HybridNet) -> dict[str, np.ndarray]:
    state = {k: p.value.copy() for k, p in model.named_parameters()}
    state.update({f"buffer:{k}": b.copy() for k, b in model.named_buffers()})
    return state


def _restore(model: HybridNet, state: dict[str, np.ndarray]) -> None:
    for k, p in model.named_parameters():
        p.value = state[k].copy()
    owners = dict(_buffer_owners(model))
    for key, arr in state.items():
        if key.startswith("buffer:"):
            path = key[len("buffer:"):]
            mp, _, name = path.rpartition(".")
            owners[mp]._buffers[name] = arr.copy()


def predict(model: HybridNet, images: np.ndarray, batch_size: int = 128) -> tuple[np.ndarray | None, np.ndarray | None]:
    """Eval-mode forward over ``images`` in batches; returns (cls_probs, reg_values)."""
    model.eval()
    probs, regs = [], []
    with no_grad():
        for i in range(0, len(images), batch_size):
            p = model(images[i:i + batch_size])
            if p.cls_probs is not None:
                probs.append(p.cls_probs.value.astype(np.float64))
            if p.reg_values is not None:
                regs.append(p.reg_values.value.astype(np.float64))
    cls = np.concatenate(probs) if probs else None
    reg = np.concatenate(regs) if regs else None
    return cls, reg


def evaluate_arrays(model: HybridNet, images, labels, markers, class_names=None, marker_names=None,
                    batch_size: int = 128) -> tuple[EvalReport, np.ndarray | None, np.ndarray | None]:
    cls, reg = predict(model, images, batch_size)
    kwargs = {}
    if class_names is not None:
        kwargs["class_names"] = class_names
    if marker_names is not None:
        kwargs["marker_names"] = marker_names
    report = build_report(cls, labels if cls is not None else None, reg, markers if reg is not None else None, **kwargs)
    if cls is None:
        report.n_samples = len(markers)
    return report, cls, reg


def _selection_score(report: EvalReport) -> float:
    parts = [v for v in (report.accuracy, report.mean_r) if v is not None]
    return float(np.mean(parts)) if parts else 0.0


def train(cfg: TrainConfig, dataset: Dataset, out_dir=None, train_split: str = "train",
          val_split: str = "val") -> TrainResult:
    """Fit a model on ``train_split``; select the best epoch on ``val_split``.

    Deterministic given ``cfg.seed``. With ``out_dir`` the ``best`` and
    ``last`` checkpoints and the training log are written there.
    """
    train_recs = dataset.split(train_split)
    val_recs = dataset.split(val_split)
    if not train_recs or not val_recs:
        raise ValueError("training needs non-empty train and val splits")
    stats = zscore_fit(train_recs)
    train_recs = zscore_apply(train_recs, stats)
    val_recs = zscore_apply(val_recs, stats)
    tr_img, tr_lab, tr_mk = stack(train_recs)
    probe = np.arange(len(train_recs))
    if 0 < cfg.train_eval_max < len(probe):
        probe = np.sort(Rng(derive_seed(cfg.seed, "probe")).permutation(len(probe))[:cfg.train_eval_max])
    va_img, va_lab, va_mk = stack(val_recs)

    weights = cfg.loss_weights()
    if cfg.class_weighting == "inverse_frequency":
        weights = replace(weights, alpha=inverse_frequency_alpha(tr_lab, cfg.model.n_classes))
    model = HybridNet(cfg.model_config(), seed=cfg.seed)
    params = dict(model.named_parameters())
    opt = AdamW(params, cfg.lr_init, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)
    order_rng = Rng(derive_seed(cfg.seed, "order"))
    out = Path(out_dir) if out_dir is not None else None
    meta = {"zscore": stats.to_dict(), "train_config": cfg.to_dict(), "alpha": list(weights.alpha)}

    log_ = TrainLog()
    best_score, best_epoch, best_state = -np.inf, -1, _snapshot(model)
    last_good: Path | None = None
    checkpoints: dict[str, Path] = {}
    n = len(train_recs)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        opt.lr = lr_at(epoch, cfg)
        order = order_rng.permutation(n)
        if cfg.augment:
            aug_rng = Rng(derive_seed(cfg.seed, f"augment:{epoch}"))
            batch_imgs = np.stack([augment(train_recs[i], aug_rng).image for i in order])
        else:
            batch_imgs = tr_img[order]
        sums: dict[str, float] = {}
        steps = 0
        model.train()
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            x = batch_imgs[start:start + len(idx)]
            try:
                preds = model(x)
                losses = total_loss(preds, tr_lab[idx], tr_mk[idx], weights)
                if not np.isfinite(losses.total.value):
                    raise NumericalError(f"non-finite loss at epoch {epoch}, step {steps}: {losses.terms}")
            except NumericalError as e:
                if out is not None:
                    last_good = save_checkpoint(model_from_state(model, best_state), out / "last_good", meta)
                raise TrainingAborted(f"training aborted: {e}", last_good) from e
            model.zero_grad()
            if losses.total.requires_grad:
                losses.total.backward()
            clip_grad_norm(params.values(), cfg.grad_clip)
            opt.step()
            for k, v in losses.terms.items():
                sums[k] = sums.get(k, 0.0) + v
            sums["total"] = sums.get("total", 0.0) + float(losses.total.value)
            steps += 1

        tr_report, _, _ = evaluate_arrays(model, tr_img[probe], tr_lab[probe], tr_mk[probe], batch_size=cfg.eval_batch_size)
        va_report, _, _ = evaluate_arrays(model, va_img, va_lab, va_mk, batch_size=cfg.eval_batch_size)
        fusion = model.fuse.weights().value.astype(float).tolist() if cfg.model_config().fusion == "learned" \
            else ([1.0, 0.0] if cfg.model_config().fusion == "cnn_only" else [0.0, 1.0])
        entry = {
            "epoch": epoch,
            "lr": opt.lr,
            "loss": {k: v / max(steps, 1) for k, v in sorted(sums.items())},
            "train_accuracy": tr_report.accuracy,
            "train_mean_r": tr_report.mean_r,
            "val_accuracy": va_report.accuracy,
            "val_mean_r": va_report.mean_r,
        }
        if not all(np.isfinite(v) for v in entry["loss"].values()):
            raise TrainingAborted(f"non-finite epoch loss at epoch {epoch}", last_good)
        log_.epochs.append(entry)
        log_.fusion_trajectory.append(fusion)
        score = _selection_score(va_report)
        if score > best_score:
            best_score, best_epoch, best_state = score, epoch, _snapshot(model)
        if out is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            last_good = save_checkpoint(model, out / f"epoch_{epoch:04d}", meta)
        log_.timing.append(time.perf_counter() - t0)
        log.info("epoch %d lr %.2e loss %.4f train_acc %s val_acc %s val_r %s", epoch, opt.lr,
                 entry["loss"].get("total", 0.0), entry["train_accuracy"], entry["val_accuracy"], entry["val_mean_r"])

    if out is not None:
        checkpoints["last"] = save_checkpoint(model, out / "last", meta)
        checkpoints["best"] = save_checkpoint(model_from_state(model, best_state), out / "best",
                                              {**meta, "best_epoch": best_epoch})
        log_.write(out)
    return TrainResult(model, log_, stats, best_state, best_epoch, checkpoints)


def model_from_state(model: HybridNet, state: dict[str, np.ndarray]) -> HybridNet:
    clone = copy.deepcopy(model)
    _restore(clone, state)
    return clone


def evaluate(checkpoint, records: list[CellRecord], cfg: ModelConfig | None = None,
             stats: ZScoreStats | None = None, batch_size: int = 128):
    """Eval-mode metrics for ``records`` using a model or a checkpoint path.

    Checkpoints carry their Z-score statistics; records are normalised with them.
    Returns (report, cls_probs, reg_values).
    """
    if isinstance(checkpoint, HybridNet):
        model = checkpoint
    else:
        model, manifest = load_checkpoint(checkpoint, cfg)
        if stats is None and "zscore" in manifest.get("meta", {}):
            stats = ZScoreStats.from_dict(manifest["meta"]["zscore"])
    if stats is not None:
        records = zscore_apply(records, stats)
    images, labels, markers = stack(records)
    return evaluate_arrays(model, images, labels, markers, batch_size=batch_size)


ABLATION_VARIANTS = ("full", "cnn_only", "vit_only", "cls_only", "reg_only")


@dataclass
class AblationRow:
    variant: str
    seeds: list[int]
    reports: list[EvalReport]

    def _collect(self, getter):
        vals = [getter(r) for r in self.reports]
        vals = [v for v in vals if v is not None]
        return vals

    def summary(self) -> dict:
        metrics = {
            "accuracy": lambda r: r.accuracy,
            "macro_f1": lambda r: None if r.classification is None else r.classification["macro_f1"],
            "pearson_r": lambda r: r.mean_r,
            "rmse": lambda r: None if r.regression is None else r.regression["mean"]["rmse"],
        }
        out = {"variant": self.variant}
        for name, get in metrics.items():
            vals = self._collect(get)
            out[f"{name}_mean"] = float(np.mean(vals)) if vals else None
            out[f"{name}_std"] = float(np.std(vals)) if vals else None
        return out


def ablate(cfg: TrainConfig, dataset: Dataset, variants=ABLATION_VARIANTS, seeds=(0, 1, 2),
           test_split: str = "test", out_dir=None) -> list[AblationRow]:
    """Train every variant for every seed on the same data; evaluate the best epoch on ``test_split``."""
    if len(seeds) < 1:
        raise ValueError("at least one seed is required")
    rows = []
    test = dataset.split(test_split)
    for variant in variants:
        reports = []
        for seed in seeds:
            run_cfg = replace(cfg, variant=variant, seed=int(seed))
            run_dir = None if out_dir is None else Path(out_dir) / variant / f"seed_{seed}"
            result = train(run_cfg, dataset, run_dir)
            best = model_from_state(result.model, result.best_state)
            report, _, _ = evaluate(best, test, stats=result.stats, batch_size=cfg.eval_batch_size)
            reports.append(report)
        rows.append(AblationRow(variant, list(seeds), reports))
    return rows
