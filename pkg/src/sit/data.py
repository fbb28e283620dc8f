"""Dataset index files and the seeded synthetic feature generator.

``index.csv`` has header ``path,score``; relative paths resolve against the
index file's directory.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import FeatureMap, load_feature_map, save_feature_map
from .errors import EmptyDataset, IoFailure
from .rng import SYNTH_STREAM, RngStream

log = logging.getLogger(__name__)

SCORE_RANGE = (1.0, 5.0)
FEATURE_HW = (7, 7)


@dataclass
class DatasetIndex:
    root: Path
    records: list[tuple[str, float]]

    def __len__(self) -> int:
        return len(self.records)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p


def read_index(path) -> DatasetIndex:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["path", "score"]:
                raise IoFailure(f"{path}: header must be 'path,score'")
            records = [(row["path"].strip(), float(row["score"])) for row in reader]
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise IoFailure(f"{path}: malformed row ({exc})") from exc
    for rel, score in records:
        if not SCORE_RANGE[0] <= score <= SCORE_RANGE[1]:
            log.warning("%s: score %g for %s lies outside [1, 5]", path, score, rel)
    return DatasetIndex(path.parent, records)


def write_index(path, records) -> None:
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", "score"])
            for rel, score in records:
                w.writerow([rel, repr(float(score))])
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_dataset(index_path, expected_shape=None) -> tuple[np.ndarray, np.ndarray, DatasetIndex]:
    """Load every referenced feature map; all files are validated before returning.

    With no ``expected_shape`` the first file fixes the shape for the rest.
    """
    index = read_index(index_path)
    if not index.records:
        raise EmptyDataset(f"{index_path}: no records")
    maps = []
    for rel, _ in index.records:
        fm = load_feature_map(index.resolve(rel), expected_shape)
        expected_shape = fm.shape
        maps.append(fm.data)
    scores = np.array([s for _, s in index.records], dtype=np.float64)
    return np.stack(maps), scores, index


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def synth_oracle_weights(seed: int, channels: int) -> np.ndarray:
    return RngStream(seed, SYNTH_STREAM).normal(channels, scale=2.0 / np.sqrt(channels))


def synth_score(fm: np.ndarray, w: np.ndarray) -> float:
    """Oracle score ``1 + 4 * sigmoid(<w, GAP(F)>)``."""
    return float(1.0 + 4.0 * sigmoid(np.dot(w, fm.mean(axis=(0, 1)))))


def synth_feature_maps(n: int, seed: int, channels: int) -> np.ndarray:
    """Nonnegative maps ``n x 7 x 7 x C`` with per-sample channel intensities.

    Each channel is a uniform intensity in ``[0, 2)`` times uniform spatial
    noise, so channel means vary across samples.  Values are rounded to float32
    so they survive an SITF roundtrip exactly.
    """
    rng = RngStream(seed, SYNTH_STREAM)
    rng.counter = 1  # draw 0 of this stream is the oracle weight vector
    intensity = rng.uniform((n, 1, 1, channels), 0.0, 2.0)
    noise = rng.uniform((n, *FEATURE_HW, channels))
    return (intensity * noise).astype(np.float32).astype(np.float64)


def synthesize(n: int, seed: int, channels: int, out_dir) -> DatasetIndex:
    if n < 1:
        raise EmptyDataset("n must be >= 1")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out}: {exc}") from exc
    w = synth_oracle_weights(seed, channels)
    maps = synth_feature_maps(n, seed, channels)
    records = []
    width = max(4, len(str(n - 1)))
    for i, fm in enumerate(maps):
        name = f"sample_{i:0{width}d}.sitf"
        save_feature_map(FeatureMap(fm), out / name)
        records.append((name, synth_score(fm, w)))
    write_index(out / "index.csv", records)
    return DatasetIndex(out, records)
