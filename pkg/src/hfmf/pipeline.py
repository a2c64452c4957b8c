"""Training, ensembling, evaluation and ablation harness."""
from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .calibration import PlattParams, calibrated_logit, fit_platt
from .config import ModelConfig
from .dataset import Corpus, Split, require_both_classes
from .errors import ConfigurationError, ContractError
from .fusion import M1Model
from .nn import MLPHead, Module
from .optim import Adam
from .streams import M2Model

log = logging.getLogger(__name__)

EVAL_SPLITS = ("val", "test")


@dataclass
class TrainConfig:
    seed: int = 42
    max_epochs: int = 100
    early_stop_patience: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    split_fractions: tuple[float, float, float] = (0.70, 0.15, 0.15)
    min_delta: float = 1e-3  # val-loss drop needed to reset the patience counter

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be >= 1")
        if self.early_stop_patience < 1:
            raise ConfigurationError("early_stop_patience must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.min_delta < 0:
            raise ConfigurationError("min_delta must be >= 0")
        fr = tuple(float(f) for f in self.split_fractions)
        if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigurationError(f"split fractions must be 3 non-negatives summing to 1, got {fr}")
        self.split_fractions = fr


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: Module
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    stopped_early: bool = False
    seconds: float = 0.0

    @property
    def epochs_run(self) -> int:
        return len(self.history)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------
def confusion_counts(preds, labels) -> tuple[int, int, int, int]:
    p = np.asarray(preds).astype(np.int64).ravel()
    y = np.asarray(labels).astype(np.int64).ravel()
    tp = int(np.sum((p == 1) & (y == 1)))
    fp = int(np.sum((p == 1) & (y == 0)))
    tn = int(np.sum((p == 0) & (y == 0)))
    fn = int(np.sum((p == 0) & (y == 1)))
    return tp, fp, tn, fn


def metrics_from_counts(tp: int, fp: int, tn: int, fn: int) -> Metrics:
    total = tp + fp + tn + fn
    if total == 0:
        raise ContractError("metrics of an empty split")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return Metrics((tp + tn) / total, precision, recall, f1, tp, fp, tn, fn)


def compute_metrics(preds, labels) -> Metrics:
    """Positive class is fake (1)."""
    return metrics_from_counts(*confusion_counts(preds, labels))


def decide(logits: np.ndarray) -> np.ndarray:
    """Argmax with exact ties resolved to real (0)."""
    logits = np.asarray(logits)
    return (logits[..., 1] > logits[..., 0]).astype(np.int64)


# --------------------------------------------------------------------------
# batched inference
# --------------------------------------------------------------------------
def _slice(arrays: tuple[np.ndarray, ...], idx) -> tuple[np.ndarray, ...]:
    return tuple(a[idx] for a in arrays)


def predict_logits(model: Module, prepared: tuple[np.ndarray, ...], batch_size: int = 128) -> np.ndarray:
    n = len(prepared[0])
    out = []
    with T.no_grad():
        for s in range(0, n, batch_size):
            out.append(model(*_slice(prepared, slice(s, s + batch_size))).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, 2))


def _loss_acc(logits: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    lsm = T.log_softmax_np(logits)
    loss = float(-lsm[np.arange(len(labels)), labels].mean())
    return loss, float(np.mean(decide(logits) == labels))


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("HFMF_THREADS", "1")))
    except ValueError:
        return 1


def evaluate(model: Module, split: Split, prepared: tuple[np.ndarray, ...] | None = None,
             workers: int | None = None) -> Metrics:
    """Argmax decisions on ``split``; shards across ``HFMF_THREADS`` workers and
    merges confusion counts."""
    if len(split) == 0:
        raise ContractError("evaluate on an empty split")
    prepared = prepared if prepared is not None else model.prepare(split.images)
    workers = workers or _threads()
    n = len(split)
    bounds = np.linspace(0, n, min(workers, n) + 1).astype(int)

    def shard(i):
        sl = slice(bounds[i], bounds[i + 1])
        preds = decide(predict_logits(model, _slice(prepared, sl)))
        return np.array(confusion_counts(preds, split.labels[sl]))

    if len(bounds) > 2:
        with ThreadPoolExecutor(max_workers=len(bounds) - 1) as ex:
            counts = sum(ex.map(shard, range(len(bounds) - 1)))
    else:
        counts = shard(0)
    return metrics_from_counts(*(int(c) for c in counts))


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------
def train_module(model: Module, corpus: Corpus, config: TrainConfig,
                 prepared: dict[str, tuple[np.ndarray, ...]] | None = None) -> TrainResult:
    """Adam + cross-entropy with early stopping on validation loss.

    Stops once validation loss has not dropped by more than ``min_delta``
    below its reference value for ``early_stop_patience`` epochs.  The
    weights restored are those of the lowest validation loss seen, whatever
    the size of the improvement.
    """
    train, val = corpus["train"], corpus["val"]
    require_both_classes(train, "train")
    require_both_classes(val, "val")
    prepared = prepared or {}
    p_train = prepared.get("train") or model.prepare(train.images)
    p_val = prepared.get("val") or model.prepare(val.images)
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.parameters(), lr=config.learning_rate)
    result = TrainResult(model)
    best_state = model.state_dict()
    wait = 0
    ref_loss = float("inf")
    t0 = time.perf_counter()
    n = len(train)
    for epoch in range(1, config.max_epochs + 1):
        perm = rng.permutation(n)
        tot_loss = 0.0
        correct = 0
        for s in range(0, n, config.batch_size):
            idx = perm[s:s + config.batch_size]
            logits = model(*_slice(p_train, idx))
            loss = T.cross_entropy(logits, train.labels[idx])
            loss.backward()
            opt.step()
            tot_loss += loss.item() * len(idx)
            correct += int(np.sum(decide(logits.data) == train.labels[idx]))
        val_loss, val_acc = _loss_acc(predict_logits(model, p_val), val.labels)
        result.history.append({"epoch": epoch, "train_loss": tot_loss / n, "train_acc": correct / n,
                               "val_loss": val_loss, "val_acc": val_acc})
        log.info("epoch %d train_loss %.4f train_acc %.4f val_loss %.4f val_acc %.4f",
                 epoch, tot_loss / n, correct / n, val_loss, val_acc)
        if val_loss < result.best_val_loss:
            result.best_val_loss = val_loss
            result.best_epoch = epoch
            best_state = model.state_dict()
        if val_loss < ref_loss - config.min_delta:
            ref_loss = val_loss
            wait = 0
        else:
            wait += 1
            if wait >= config.early_stop_patience:
                result.stopped_early = True
                break
    model.load_state_dict(best_state)
    result.seconds = time.perf_counter() - t0
    return result


# --------------------------------------------------------------------------
# ensemble
# --------------------------------------------------------------------------
def m1_scalar_logit(logits: np.ndarray) -> np.ndarray:
    """Two-logit output -> scalar ``z = logit_fake - logit_real``."""
    logits = np.asarray(logits)
    return logits[..., 1] - logits[..., 0]


class EnsembleModel(Module):
    """[calibrated M1 log-odds, M2 logits] -> MLP (3 -> 16 -> 2).

    The sub-models are held in underscore attributes so they are excluded
    from ``parameters()`` and never touched by the ensemble optimizer.
    """

    kind = "ensemble"

    def __init__(self, m1: M1Model, m2: M2Model, platt: PlattParams, cfg: ModelConfig | None = None,
                 seed: int = 0):
        cfg = cfg or m1.cfg
        self.cfg = cfg
        self._m1 = m1
        self._m2 = m2
        self._platt = platt
        self.mlp = MLPHead(3, cfg.ensemble_hidden, 2, np.random.default_rng(seed))

    def prepare(self, images: np.ndarray) -> tuple[np.ndarray, ...]:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        z = m1_scalar_logit(predict_logits(self._m1, self._m1.prepare(images)))
        m2_logits = predict_logits(self._m2, self._m2.prepare(images))
        return (ensemble_inputs(z, m2_logits, self._platt),)

    def forward(self, inputs) -> T.Tensor:
        return self.mlp(inputs)


def ensemble_inputs(m1_z: np.ndarray, m2_logits: np.ndarray, platt: PlattParams) -> np.ndarray:
    feats = np.column_stack([calibrated_logit(m1_z, platt), np.asarray(m2_logits)])
    if not np.all(np.isfinite(feats)):
        raise ContractError("ensemble inputs must be finite")
    return feats


def ensemble_forward(model: EnsembleModel, inp) -> T.Tensor:
    """Final logits for one ``[m1_calibrated_logit, m2_logit_0, m2_logit_1]`` row."""
    return model(T.as_tensor(inp))


def train_ensemble(m1: M1Model, m2: M2Model, platt: PlattParams, corpus: Corpus, config: TrainConfig,
                   seed: int | None = None) -> TrainResult:
    model = EnsembleModel(m1, m2, platt, seed=config.seed if seed is None else seed)
    return train_module(model, corpus, config)


def fit_m1_platt(m1: M1Model, split: Split) -> PlattParams:
    """Platt fit on M1's scalar logits for ``split`` (the validation split)."""
    z = m1_scalar_logit(predict_logits(m1, m1.prepare(split.images)))
    return fit_platt(z, split.labels)


# --------------------------------------------------------------------------
# full pipeline + ablations
# --------------------------------------------------------------------------
@dataclass
class PipelineResult:
    m1: TrainResult
    m2: TrainResult
    platt: PlattParams
    ensemble: TrainResult


def train_pipeline(corpus: Corpus, config: TrainConfig, model_cfg: ModelConfig | None = None) -> PipelineResult:
    model_cfg = model_cfg or ModelConfig(image_size=corpus.manifest.image_size)
    m1 = train_module(M1Model(model_cfg, seed=config.seed), corpus, config)
    m2 = train_module(M2Model(model_cfg, seed=config.seed + 1), corpus, config)
    platt = fit_m1_platt(m1.model, corpus["val"])
    ens = train_ensemble(m1.model, m2.model, platt, corpus, config, seed=config.seed + 2)
    return PipelineResult(m1, m2, platt, ens)


def accuracy_row(model: Module, corpus: Corpus, splits=EVAL_SPLITS) -> dict:
    row = {s: evaluate(model, corpus[s]).accuracy for s in splits}
    row["mean"] = float(np.mean([row[s] for s in splits]))
    return row


M1_ABLATION_ROWS = ("ViT-only", "CNN-only", "M1 (ViT+CNN)", "HFMF (M1+M2)")
M2_ABLATION_ROWS = ("Global+Sobel", "Region+Sobel", "Global+Region", "M2 (Region+Global+Sobel)", "HFMF (M1+M2)")
M2_SUBSETS = {"Global+Sobel": ("global", "sobel"), "Region+Sobel": ("region", "sobel"),
              "Global+Region": ("region", "global")}


@dataclass
class AblationTables:
    splits: tuple[str, ...]
    m1: dict[str, dict]
    m2: dict[str, dict]

    def to_dict(self) -> dict:
        return {"splits": list(self.splits), "m1": self.m1, "m2": self.m2}


def ablation_report(corpus: Corpus, config: TrainConfig, model_cfg: ModelConfig | None = None,
                    pipeline: PipelineResult | None = None) -> AblationTables:
    """Train every variant and tabulate split accuracies plus their mean."""
    model_cfg = model_cfg or ModelConfig(image_size=corpus.manifest.image_size)
    pipeline = pipeline or train_pipeline(corpus, config, model_cfg)
    hfmf_row = accuracy_row(pipeline.ensemble.model, corpus)
    m1_rows: dict[str, dict] = {}
    for name, variant in (("ViT-only", "vit_only"), ("CNN-only", "cnn_only")):
        res = train_module(M1Model(model_cfg, seed=config.seed, variant=variant), corpus, config)
        m1_rows[name] = accuracy_row(res.model, corpus)
    m1_rows["M1 (ViT+CNN)"] = accuracy_row(pipeline.m1.model, corpus)
    m1_rows["HFMF (M1+M2)"] = hfmf_row
    m2_rows: dict[str, dict] = {}
    for name, streams in M2_SUBSETS.items():
        res = train_module(M2Model(model_cfg, seed=config.seed + 1, streams=streams), corpus, config)
        m2_rows[name] = accuracy_row(res.model, corpus)
    m2_rows["M2 (Region+Global+Sobel)"] = accuracy_row(pipeline.m2.model, corpus)
    m2_rows["HFMF (M1+M2)"] = hfmf_row
    return AblationTables(EVAL_SPLITS, m1_rows, m2_rows)


def format_table(title: str, rows: dict[str, dict], columns) -> str:
    """Aligned plain-text table; values printed as percentages with 2 decimals."""
    name_w = max(len("Method"), *(len(r) for r in rows))
    cols = list(columns)
    col_w = max(8, *(len(c) for c in cols))
    lines = [title, f"{'Method':<{name_w}}  " + "  ".join(f"{c:>{col_w}}" for c in cols)]
    for name, row in rows.items():
        lines.append(f"{name:<{name_w}}  " + "  ".join(f"{100 * row[c]:>{col_w - 1}.2f}%" for c in cols))
    return "\n".join(lines)
