"""Run-level plumbing shared by the command line and the acceptance suite."""

from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import encoder as enc
from . import evaluation as ev
from . import trainer
from .augment import augment, plain_view
from .config import RunConfig, dump_run_config, with_train
from .dataio import CIFAR_CLASSES, Dataset, SyntheticSpec, load_cifar10, make_synthetic, split_per_class
from .errors import ContractError

log = logging.getLogger(__name__)

RESOLVED_CONFIG = "config.resolved.yaml"


def load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    ds = cfg.dataset
    if ds.kind == "cifar10":
        path = os.path.expandvars(ds.path)
        return load_cifar10(path, "train", ds.train_limit), load_cifar10(path, "test", ds.test_limit)
    spec = SyntheticSpec(
        num_clusters=ds.num_clusters,
        points_per_cluster=ds.points_per_cluster + ds.test_points_per_cluster,
        dim=ds.dim,
        cluster_spread=ds.cluster_spread,
        seed=ds.seed,
    )
    return split_per_class(make_synthetic(spec), ds.test_points_per_cluster, seed=ds.seed)


def class_names(cfg: RunConfig):
    return CIFAR_CLASSES if cfg.dataset.kind == "cifar10" else None


def embedding_set(params: enc.EncoderParams, ds: Dataset, cfg: RunConfig) -> ev.EmbeddingSet:
    feats = enc.embed_numpy(params, plain_view(ds.pixels, cfg.train.augment))
    return ev.EmbeddingSet(np.arange(len(ds)), feats, ds.labels)


def train_run(cfg: RunConfig, out_dir=None, train_ds: Dataset | None = None, resume=None):
    """Train per ``cfg``; with ``out_dir`` the resolved config and all artifacts land there."""
    if train_ds is None:
        train_ds, _ = load_datasets(cfg)
    state = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        dump_run_config(cfg, out_dir / RESOLVED_CONFIG)
        if resume is None:
            for name in ("metrics.csv", "timing.csv"):
                (out_dir / name).unlink(missing_ok=True)
    if resume is not None:
        state = trainer.load_checkpoint(resume, cfg.train.encoder)
    return trainer.train(cfg.train, train_ds, out_dir, state=state)


@dataclass
class EvalResult:
    report: ev.EvalReport
    histograms: dict[str, ev.SimilarityHistograms]


def evaluate(params: enc.EncoderParams, cfg: RunConfig, train_ds: Dataset, test_ds: Dataset) -> EvalResult:
    e = cfg.eval
    tr, te = embedding_set(params, train_ds, cfg), embedding_set(params, test_ds, cfg)
    k = min(e.knn_k, len(tr))
    knn = ev.weighted_knn(tr, te, k=k, tau=e.knn_tau)
    try:
        linear = ev.linear_probe(tr, te, epochs=e.probe_epochs, lr=e.probe_lr, num_classes=train_ds.num_classes)
    except ContractError as exc:
        log.warning("linear probe skipped: %s", exc)
        linear = None
    ks = tuple(x for x in e.recall_ks if x < len(te))
    recall = ev.recall_at_k(te, ks) if ks else {}
    nmi = ev.clustering_nmi(te, restarts=e.nmi_restarts, seed=cfg.train.master_seed)
    hists = {"class": ev.similarity_histograms(te, knn=e.histogram_knn)}
    names = class_names(cfg)
    for name, mapping in e.regroup.items():
        hists[name] = ev.similarity_histograms(te, regroup=mapping, knn=e.histogram_knn, class_names=names)
    report = ev.EvalReport(
        knn_accuracy=knn,
        linear_accuracy=linear,
        recall_at=recall,
        nmi=nmi,
        histogram_median_gap=hists["class"].median_gap,
        knn_k=k,
        num_train=len(tr),
        num_test=len(te),
    )
    return EvalResult(report, hists)


def write_eval(result: EvalResult, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result.report.to_json(out_dir / "report.json")
    for name, h in result.histograms.items():
        h.to_csv(out_dir / ("histograms.csv" if name == "class" else f"histograms_{name}.csv"))


def invariance_spread(params: enc.EncoderParams, ds: Dataset, cfg: RunConfig, seed: int = 0) -> tuple[float, float]:
    """Mean cos(f_i, f̂_i) against mean cross-instance cosine on ``ds``."""
    aug = cfg.train.augment
    plain = enc.embed_numpy(params, plain_view(ds.pixels, aug))
    views = np.stack([augment(p, aug, seed + i) for i, p in enumerate(ds.pixels)])
    return ev.invariance_spread(plain, enc.embed_numpy(params, views))


# ---------------------------------------------------------------- ablation sweeps

AXES = ("augmentation", "sampling")


def sweep_points(cfg: RunConfig, axis: str) -> list[tuple[str, RunConfig]]:
    """Named sweep points; each differs from "Full" in exactly one setting."""
    t = cfg.train
    if axis == "augmentation":
        return [
            ("Full", cfg),
            ("w/o R", with_train(cfg, augment=t.augment.without("crop"))),
            ("w/o G", with_train(cfg, augment=t.augment.without("grayscale"))),
            ("w/o C", with_train(cfg, augment=t.augment.without("jitter"))),
            ("w/o F", with_train(cfg, augment=t.augment.without("flip"))),
        ]
    if axis == "sampling":
        return [
            ("Full", cfg),
            ("No DA", with_train(cfg, no_augmentation=True)),
            ("Hard", with_train(cfg, loss=dataclasses.replace(t.loss, negative_filter="hard_top_half"))),
            ("Easy", with_train(cfg, loss=dataclasses.replace(t.loss, negative_filter="easy_bottom_half"))),
        ]
    raise ContractError(f"unknown sweep axis {axis!r}; expected one of {AXES}")


def config_diff(base, other, prefix: str = "") -> list[str]:
    """Dotted paths of every leaf setting that differs between two configs."""
    out = []
    for f in dataclasses.fields(base):
        a, b = getattr(base, f.name), getattr(other, f.name)
        path = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(a):
            out.extend(config_diff(a, b, path + "."))
        elif a != b:
            out.append(path)
    return out


def slug(label: str) -> str:
    return label.replace("/", "").replace(" ", "_").lower()
