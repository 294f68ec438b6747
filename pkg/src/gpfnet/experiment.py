"""Train / evaluate / ablate / gradient-check pipelines shared by the CLI and tests."""

from __future__ import annotations

import dataclasses
import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .data import Dataset
from .evaluation import EvalReport, evaluate
from .model import ABLATION_MODES, GpfModel, ModelConfig
from .training import Batch, TrainConfig, TrainResult, total_loss, train

log = logging.getLogger(__name__)

PK_KEYS = ("p_identities", "k_instances", "batch_size")

BASELINE_NOTE = (
    "baseline: image projection + identity classifier only; no text, no fusion, no encoder"
)


def fit_pk_shape(cfg: RunConfig, labels) -> tuple[int, int]:
    """PK shape for this dataset.

    Settings given explicitly are used as-is. Otherwise the default 16x4 shape
    is kept when the data supports it, and shrinks to ``p = min(16, ids with
    >= 2 samples), k = 2`` when it does not.
    """
    if any(k in cfg.explicit for k in PK_KEYS):
        return cfg.p_identities, cfg.k_instances
    counts = Counter(np.asarray(labels).tolist())
    if sum(c >= cfg.k_instances for c in counts.values()) >= cfg.p_identities:
        return cfg.p_identities, cfg.k_instances
    p = min(cfg.p_identities, sum(c >= 2 for c in counts.values()))
    log.info("dataset too small for %dx%d PK batches; using %dx2", cfg.p_identities, cfg.k_instances, p)
    return p, 2


def resolve_configs(cfg: RunConfig, dataset: Dataset) -> tuple[ModelConfig, TrainConfig]:
    p, k = fit_pk_shape(cfg, dataset.labels)
    mcfg = cfg.model_config(dataset.img_dim, dataset.txt_dim, dataset.num_identities)
    if (mcfg.img_dim, mcfg.txt_dim) != (dataset.img_dim, dataset.txt_dim):
        raise ValueError(
            f"configured dims img={mcfg.img_dim}/txt={mcfg.txt_dim} do not match "
            f"dataset dims img={dataset.img_dim}/txt={dataset.txt_dim}"
        )
    # an explicit batch size is kept so a p*k mismatch is reported, not hidden
    batch = cfg.batch_size if "batch_size" in cfg.explicit else p * k
    return mcfg, cfg.train_config(p_identities=p, k_instances=k, batch_size=batch)


def fit(cfg: RunConfig, dataset: Dataset) -> tuple[GpfModel, TrainResult]:
    mcfg, tcfg = resolve_configs(cfg, dataset)
    model = GpfModel.init(mcfg, cfg.seed)
    return model, train(dataset, model, tcfg)


def check_eval_dims(model: GpfModel, ds: Dataset, name: str) -> None:
    mc = model.config
    if (ds.img_dim, ds.txt_dim) != (mc.img_dim, mc.txt_dim):
        raise ValueError(
            f"{name} dims img={ds.img_dim}/txt={ds.txt_dim} do not match checkpoint dims "
            f"img={mc.img_dim}/txt={mc.txt_dim}"
        )


@dataclass
class AblationRow:
    mode: str
    report: EvalReport
    final_loss: float

    def to_dict(self) -> dict:
        row = {"mode": self.mode, "mAP": self.report.map}
        for k, v in self.report.cmc.items():
            row[f"Rank-{k}"] = v
        row["num_queries"] = self.report.num_queries
        row["final_loss"] = self.final_loss
        return row


def ablate(
    cfg: RunConfig,
    train_set: Dataset,
    query: Dataset | None = None,
    gallery: Dataset | None = None,
    modes=ABLATION_MODES,
) -> list[AblationRow]:
    """Train and evaluate every ablation mode with identical seed and data."""
    query = train_set if query is None else query
    gallery = query if gallery is None else gallery
    rows = []
    for mode in modes:
        run = _with(cfg, ablation_mode=mode)
        model, result = fit(run, train_set)
        report = evaluate(model, query, gallery, cfg.ks)
        log.info("%s: mAP %.4f", mode, report.map)
        rows.append(AblationRow(mode, report, result.history[-1]))
    return rows


def ablation_table(rows: list[AblationRow]) -> dict:
    return {"rows": [r.to_dict() for r in rows], "note": BASELINE_NOTE}


def _with(cfg: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(cfg, **changes, explicit=cfg.explicit | frozenset(changes))


# gradient check --------------------------------------------------------------

def micro_batch(img_dim: int, txt_dim: int, seed: int, n_tokens: int = 3) -> Batch:
    """Two identities with two samples each, standard-normal inputs.

    Inputs carry no identity signal, so the untrained triplet hinge is
    usually active and its gradient path gets exercised.
    """
    rng = np.random.default_rng(seed)
    images = rng.normal(size=(4, img_dim))
    tokens = [rng.normal(size=(n_tokens, txt_dim)) for _ in range(4)]
    return Batch(images, tokens, np.array([0, 1, 0, 1]))


def gradcheck_groups(
    model: GpfModel,
    batch: Batch,
    tcfg: TrainConfig,
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Max relative error of backprop vs central differences, per parameter tensor.

    ``max_coords`` caps the coordinates checked per tensor (random subset);
    ``None`` checks every coordinate.
    """
    rng = np.random.default_rng(seed)
    errors = {}
    for name, param in model.named_parameters():

        def loss_of(_p, _batch=batch):
            return total_loss(_batch, model, tcfg).total

        coords = None
        if max_coords is not None and param.data.size > max_coords:
            coords = np.sort(rng.choice(param.data.size, size=max_coords, replace=False))
        model.zero_grad()
        errors[name] = ad.grad_check(loss_of, param, eps=eps, coords=coords)
    model.zero_grad()
    return errors
