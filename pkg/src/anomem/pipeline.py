"""End-to-end protocol run: split, stage 1, optional stage 2, scoring, AUROC."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from anomem.config import ExperimentConfig
from anomem.data import LabeledImageSet, gen_synthetic, load_cifar_file, make_one_vs_all_split
from anomem.detect import AnomalyScore, detector_score
from anomem.evaluate import auroc
from anomem.train import Stage1Result, Stage2Result, train_stage1, train_stage2


def load_data(config: ExperimentConfig, seed: int) -> LabeledImageSet:
    """Synthetic data are regenerated per seed; CIFAR files are read as given."""
    normal = config.protocol.normal_class
    if config.data.source == "synthetic":
        return gen_synthetic(config.data.synthetic, seed, normal)
    parts = [load_cifar_file(Path(p), normal) for p in config.data.cifar_files]
    return LabeledImageSet(
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
        np.concatenate([p.class_ids for p in parts]),
    )


@dataclass
class PipelineResult:
    seed: int
    auroc: float
    per_scale_auroc: list[float]
    scores: list[AnomalyScore]
    test_labels: np.ndarray  # 1 = normal
    stage1: Stage1Result
    stage2: Stage2Result

    @property
    def fused(self) -> np.ndarray:
        return np.array([s.fused for s in self.scores])


def score_split(config, stage1, stage2, test: LabeledImageSet, scales=None):
    lambdas = config.scale_weights().lambdas
    mode = config.mode
    scores = detector_score(
        test.images,
        stage1.encoder,
        stage1.memories,
        lambdas,
        mode,
        stage2.heads or None,
        config.active_scales if scales is None else scales,
        config.normalize_before_memory,
    )
    anomalous = 1 - np.asarray(test.labels)
    fused = auroc([s.fused for s in scores], anomalous)
    per_scale = [auroc([s.per_scale[i] for s in scores], anomalous) for i in range(len(scores[0].per_scale))]
    return scores, fused, per_scale


def run_pipeline(
    config: ExperimentConfig,
    seed: int,
    data: LabeledImageSet | None = None,
    telemetry_path: str | Path | None = None,
) -> PipelineResult:
    config.validate()
    data = load_data(config, seed) if data is None else data
    pr = config.protocol
    split = make_one_vs_all_split(data, pr.normal_class, pr.gamma, seed, pr.n_test, pr.n_train_normal)
    train, test = split.train_set(data), split.test_set(data)
    stage1_set = train if config.mode == "ssad" else train.subset(np.flatnonzero(train.labels == 1))
    s1 = train_stage1(config, stage1_set, seed, telemetry_path)
    s2 = train_stage2(config, train, s1.encoder, s1.memories, seed)
    scores, fused, per_scale = score_split(config, s1, s2, test)
    return PipelineResult(seed, fused, per_scale, scores, np.asarray(test.labels), s1, s2)
