"""Synthetic multimodal tasks driven by one shared latent factor.

Every modality is a noisy linear view of the same latent u, so any modality
carries information about any other; per-modality noise scales make some
modalities weaker than others.
"""

import itertools
import json
import logging
import typing
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .configuration import DatasetConfig
from .errors import ConfigError, ContractError, ShapeError

logger = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "finetune", "test")


@dataclass
class ModalBatch:
    modalities: list[np.ndarray]
    presence: np.ndarray
    labels: np.ndarray
    task: str

    def __post_init__(self) -> None:
        self.presence = np.asarray(self.presence, dtype=bool)
        if self.presence.shape != (self.size, len(self.modalities)):
            raise ShapeError(f"presence shape {self.presence.shape} does not match batch ({self.size}, {len(self.modalities)})")
        for i, x in enumerate(self.modalities):
            if x.shape[0] != self.size:
                raise ShapeError(f"modality {i} has {x.shape[0]} rows, labels have {self.size}")
        if self.size and not np.all(self.presence.any(axis=1)):
            raise ContractError("every row needs at least one present modality")
        # absent entries are placeholders
        self.modalities = [np.where(self.presence[:, [i]], x, 0.0) for i, x in enumerate(self.modalities)]

    @property
    def size(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_modalities(self) -> int:
        return len(self.modalities)

    @property
    def output_dim(self) -> int:
        return int(self.labels.shape[1])

    def subset(self, rows: typing.Sequence[int] | np.ndarray) -> "ModalBatch":
        rows = np.asarray(rows)
        return ModalBatch([x[rows] for x in self.modalities], self.presence[rows], self.labels[rows], self.task)

    def complete_rows(self) -> np.ndarray:
        return np.flatnonzero(self.presence.all(axis=1))

    def with_missing(self, missing: typing.Iterable[int]) -> "ModalBatch":
        """Evaluation scenario: the given modalities are absent on every row."""
        presence = self.presence.copy()
        for i in missing:
            if not 0 <= i < self.n_modalities:
                raise ConfigError(f"modality index {i} out of range 0..{self.n_modalities - 1}")
            presence[:, i] = False
        return ModalBatch(self.modalities, presence, self.labels, self.task)


class Splits(typing.NamedTuple):
    train: ModalBatch
    finetune: ModalBatch
    test: ModalBatch


def generate(config: DatasetConfig) -> Splits:
    """Draw the pretraining, fine-tune and test splits; same config gives the same bytes."""
    rng = np.random.default_rng(config.seed)
    p = config.latent_dim
    mixing = [rng.normal(size=(n, p)) / np.sqrt(p) for n in config.modality_dims]
    if config.task == "regression":
        w = rng.normal(size=p)
        w /= np.linalg.norm(w)
    elif config.n_classes <= p:
        # orthonormal rows: every class has equal mass under isotropic u
        q, _ = np.linalg.qr(rng.normal(size=(p, config.n_classes)))
        class_dirs = q.T
    else:
        class_dirs = rng.normal(size=(config.n_classes, p))
        class_dirs /= np.linalg.norm(class_dirs, axis=1, keepdims=True)

    def draw(n: int) -> ModalBatch:
        u = rng.normal(size=(n, p))
        xs = [u @ a.T + s * rng.normal(size=(n, a.shape[0])) for a, s in zip(mixing, config.noise_scales)]
        if config.task == "regression":
            labels = (u @ w + 0.05 * rng.normal(size=n))[:, None]
        else:
            labels = np.eye(config.n_classes)[np.argmax(u @ class_dirs.T, axis=1)]
        return ModalBatch(xs, np.ones((n, config.n_modalities), dtype=bool), labels, config.task)

    splits = Splits(draw(config.n_samples), draw(config.n_finetune), draw(config.n_test))
    logger.debug("Generated splits %s", [s.size for s in splits])
    return splits


def apply_masks(batch: ModalBatch, missing_fraction: float, seed: int) -> ModalBatch:
    """Mark round(fraction * B) rows absent per modality, then repair rows left with nothing."""
    if not 0.0 <= missing_fraction < 1.0:
        raise ConfigError(f"missing fraction must be in [0, 1), got {missing_fraction}")
    rng = np.random.default_rng(seed)
    n_rows, n_mod = batch.size, batch.n_modalities
    n_absent = int(np.floor(missing_fraction * n_rows + 0.5))
    presence = batch.presence.copy()
    for j in range(n_mod):
        presence[rng.choice(n_rows, size=n_absent, replace=False), j] = False

    empty = np.flatnonzero(~presence.any(axis=1))
    for row in empty:
        j = int(rng.integers(n_mod))
        donors = np.flatnonzero(presence[:, j] & (presence.sum(axis=1) >= 2))
        presence[row, j] = True
        # swap the absence onto a row that can spare it, keeping the marginal rate
        if donors.size:
            presence[int(rng.choice(donors)), j] = False
    if empty.size:
        logger.debug("Repaired %d rows with no present modality", empty.size)
    return ModalBatch(batch.modalities, presence, batch.labels, batch.task)


def missing_scenarios(n_modalities: int) -> list[tuple[int, ...]]:
    """Every set of missing modalities that leaves at least one present, including none."""
    out: list[tuple[int, ...]] = []
    for k in range(n_modalities):
        out.extend(itertools.combinations(range(n_modalities), k))
    return out


def scenario_name(missing: typing.Iterable[int]) -> str:
    missing = tuple(missing)
    return "missing=" + (",".join(str(i) for i in missing) if missing else "none")


def parse_scenario(text: str) -> tuple[int, ...]:
    key, _, value = text.partition("=")
    if key.strip() != "missing":
        raise ConfigError(f"scenario must look like missing=0,2 (got {text!r})")
    value = value.strip()
    if value in ("", "none"):
        return ()
    try:
        return tuple(sorted({int(v) for v in value.split(",")}))
    except ValueError as e:
        raise ConfigError(f"bad scenario indices in {text!r}") from e


def save_splits(directory: str | Path, splits: Splits, config: DatasetConfig, float_format: str = "%.17g") -> list[Path]:
    directory = Path(directory)
    written = []
    for name, batch in zip(SPLIT_NAMES, splits):
        split_dir = directory / name
        split_dir.mkdir(parents=True, exist_ok=True)
        for i, x in enumerate(batch.modalities):
            path = split_dir / f"modality_{i}.csv"
            pd.DataFrame(x).to_csv(path, index=False, float_format=float_format)
            written.append(path)
        pd.DataFrame(batch.presence.astype(int)).to_csv(split_dir / "presence.csv", index=False)
        pd.DataFrame(batch.labels).to_csv(split_dir / "labels.csv", index=False, float_format=float_format)
        written += [split_dir / "presence.csv", split_dir / "labels.csv"]
    dataset_manifest = directory / "dataset.json"
    dataset_manifest.write_text(json.dumps({"config": config.model_dump(mode="json"), "seed": config.seed}, indent=2))
    written.append(dataset_manifest)
    logger.info("Saved dataset to %s", directory)
    return written


def load_splits(directory: str | Path) -> tuple[Splits, DatasetConfig]:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "dataset.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"{directory} is not a dataset directory: {e}") from e
    config = DatasetConfig.model_validate(meta["config"])
    batches = []
    for name in SPLIT_NAMES:
        split_dir = directory / name
        xs = [pd.read_csv(split_dir / f"modality_{i}.csv").to_numpy(dtype=np.float64) for i in range(config.n_modalities)]
        presence = pd.read_csv(split_dir / "presence.csv").to_numpy().astype(bool)
        labels = pd.read_csv(split_dir / "labels.csv").to_numpy(dtype=np.float64)
        batches.append(ModalBatch(xs, presence, labels, config.task))
    return Splits(*batches), config
