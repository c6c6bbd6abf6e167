"""Frame stream -> per-second aggregates -> aligned ST/JT records -> dataset.

Stages, in order: average frames within each second, turn mean volumes into
spectral efficiency, pair every ST second with a JT second of the same
primary BS, drop pairs whose JT efficiency collapsed below a fraction of the
ST efficiency, then lay out 17 features (16 RSRPs + SE) with the JT
efficiency as label.

Aggregates are kept as DataFrames with the columns ``AGG_COLUMNS`` (plus an
``se`` column once :func:`add_spectral_efficiency` has run); aligned pairs are
:class:`AlignedRecord` objects.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
import pandas as pd
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import min_weight_full_bipartite_matching

from .errors import DegenerateFeatureError, InvalidArgumentError, MalformedRecordError
from .simgen import JT, RSRP_COLUMNS, ST, SystemConfig, iter_frame_chunks

PIPELINE_VERSION = 1
NUM_FEATURES = 17
DEFAULT_CLEAN_THRESHOLD = 0.85
FEATURE_NAMES = RSRP_COLUMNS + ["se"]
AGG_COLUMNS = [
    "second_index",
    "primary_bs_id",
    "secondary_bs_id",
    "mode",
    "mean_volume_bits",
    "frame_count",
    *RSRP_COLUMNS,
]


@dataclass(frozen=True)
class AlignedRecord:
    se: float
    cse: float
    rsrps_dbm: tuple
    primary_bs_id: int
    secondary_bs_id: int
    st_second: int
    jt_second: int


@dataclass
class Dataset:
    """Standardized features, raw labels and named row-index splits."""

    features: np.ndarray
    labels: np.ndarray
    feature_means: np.ndarray
    feature_stds: np.ndarray
    split: dict = field(default_factory=dict)
    seed: Optional[int] = None

    def part(self, name):
        idx = self.split[name]
        return self.features[idx], self.labels[idx]

    @property
    def raw_se(self):
        """SE column mapped back to bit/s/Hz."""
        return self.features[:, 16] * self.feature_stds[16] + self.feature_means[16]


# -- step 1: second-level means --------------------------------------------

def aggregate_seconds(frames: pd.DataFrame) -> pd.DataFrame:
    """Mean of all frames sharing a second, a mode and a BS pair.

    RSRP columns are averaged position-wise; they stay NaN for ST groups.
    """
    if len(frames) == 0:
        return pd.DataFrame(columns=AGG_COLUMNS)
    frames = frames.sort_values("timestamp_ms", kind="stable")
    keyed = frames.assign(second_index=frames["timestamp_ms"].to_numpy() // 1000)
    keys = ["second_index", "mode", "primary_bs_id", "secondary_bs_id"]
    grouped = keyed.groupby(keys, dropna=False, sort=True)
    out = grouped[["data_volume_bits", *RSRP_COLUMNS]].mean()
    out["frame_count"] = grouped.size()
    out = out.rename(columns={"data_volume_bits": "mean_volume_bits"}).reset_index()
    out["secondary_bs_id"] = out["secondary_bs_id"].astype("Int64")
    return out[AGG_COLUMNS].reset_index(drop=True)


def aggregate_frame_chunks(chunks: Iterable[pd.DataFrame]) -> pd.DataFrame:
    """:func:`aggregate_seconds` over time-ordered chunks of one frame stream.

    The last second of each chunk is carried into the next one so a second
    split across a chunk boundary is still averaged as one group.
    """
    parts = []
    carry = None
    for chunk in chunks:
        if carry is not None:
            chunk = pd.concat([carry, chunk], ignore_index=True)
        if len(chunk) == 0:
            continue
        seconds = chunk["timestamp_ms"].to_numpy() // 1000
        last = seconds.max()
        parts.append(aggregate_seconds(chunk[seconds < last]))
        carry = chunk[seconds == last]
    if carry is not None and len(carry):
        parts.append(aggregate_seconds(carry))
    parts = [p for p in parts if len(p)]
    if not parts:
        return pd.DataFrame(columns=AGG_COLUMNS)
    out = pd.concat(parts, ignore_index=True)
    return out.sort_values(["second_index", "mode", "primary_bs_id"], kind="stable").reset_index(drop=True)


# -- step 2: spectral efficiency -------------------------------------------

def spectral_efficiency(mean_volume_bits, config: SystemConfig):
    """bit/s/Hz from a mean per-frame volume (scalar or array)."""
    vol = np.asarray(mean_volume_bits, dtype=float)
    if np.any(vol < 0):
        raise InvalidArgumentError("mean volume must be non-negative")
    se = vol * config.frames_per_second / config.bandwidth_hz
    return float(se) if se.ndim == 0 else se


def add_spectral_efficiency(aggregates: pd.DataFrame, config: SystemConfig) -> pd.DataFrame:
    return aggregates.assign(se=spectral_efficiency(aggregates["mean_volume_bits"].to_numpy(), config))


# -- step 3: alignment -----------------------------------------------------

def _components(st, jt, window):
    """Split two sorted second arrays into runs that no window edge crosses."""
    events = sorted([(s, 0, i) for i, s in enumerate(st)] + [(s, 1, j) for j, s in enumerate(jt)])
    run, last = [], None
    for ev in events:
        if last is not None and ev[0] - last > window:
            yield run
            run = []
        run.append(ev)
        last = ev[0]
    if run:
        yield run


def match_seconds(st_seconds, jt_seconds, window_s: int) -> list[tuple[int, int]]:
    """One-to-one ST/JT pairing by time, as index pairs into the inputs.

    Among all pairings with ``|jt - st| <= window_s`` the chosen one has the
    most pairs, then the smallest total ``|jt - st|``, then the smallest total
    ``jt - st`` (ties lean to the earlier JT second).
    """
    if window_s < 0:
        raise InvalidArgumentError("window_s must be >= 0")
    st_seconds = np.asarray(st_seconds, dtype=np.int64)
    jt_seconds = np.asarray(jt_seconds, dtype=np.int64)
    w = int(window_s)
    pairs = []
    for run in _components(st_seconds, jt_seconds, w):
        st_idx = [i for _, side, i in run if side == 0]
        jt_idx = [j for _, side, j in run if side == 1]
        if not st_idx or not jt_idx:
            continue
        n = len(st_idx)
        # integer costs encode the lexicographic objective exactly in float64
        q = (2 * w + 1) * n + 1
        c_max = 1 + w * q + 2 * w
        dummy = n * c_max + 1
        if dummy * n >= 2**53:
            raise InvalidArgumentError("alignment component too large for exact matching")
        rows, cols, costs = [], [], []
        for r, i in enumerate(st_idx):
            for c, j in enumerate(jt_idx):
                delta = int(jt_seconds[j] - st_seconds[i])
                if abs(delta) <= w:
                    rows.append(r)
                    cols.append(c)
                    costs.append(1 + abs(delta) * q + (delta + w))
            rows.append(r)
            cols.append(len(jt_idx) + r)
            costs.append(dummy)
        graph = csr_matrix((np.asarray(costs, dtype=float), (rows, cols)), shape=(n, len(jt_idx) + n))
        row_ind, col_ind = min_weight_full_bipartite_matching(graph)
        for r, c in zip(row_ind, col_ind):
            if c < len(jt_idx):
                pairs.append((st_idx[r], jt_idx[c]))
    pairs.sort()
    return pairs


def align_modes(st: pd.DataFrame, jt: pd.DataFrame, window_s: int = 1) -> list[AlignedRecord]:
    """Pair ST and JT aggregates of the same primary BS within ``window_s``.

    Both frames need an ``se`` column; the JT side's value becomes the CSE.
    """
    if window_s < 0:
        raise InvalidArgumentError("window_s must be >= 0")
    records = []
    jt_groups = {k: g for k, g in jt.groupby("primary_bs_id", sort=True)}
    for bs, st_g in st.groupby("primary_bs_id", sort=True):
        jt_g = jt_groups.get(bs)
        if jt_g is None:
            continue
        st_g = st_g.sort_values("second_index", kind="stable")
        jt_g = jt_g.sort_values("second_index", kind="stable")
        st_sec = st_g["second_index"].to_numpy()
        jt_sec = jt_g["second_index"].to_numpy()
        st_se = st_g["se"].to_numpy()
        jt_se = jt_g["se"].to_numpy()
        jt_rsrp = jt_g[RSRP_COLUMNS].to_numpy(dtype=float)
        jt_secondary = jt_g["secondary_bs_id"].to_numpy()
        for i, j in match_seconds(st_sec, jt_sec, window_s):
            records.append(
                AlignedRecord(
                    se=float(st_se[i]),
                    cse=float(jt_se[j]),
                    rsrps_dbm=tuple(float(x) for x in jt_rsrp[j]),
                    primary_bs_id=int(bs),
                    secondary_bs_id=int(jt_secondary[j]),
                    st_second=int(st_sec[i]),
                    jt_second=int(jt_sec[j]),
                )
            )
    records.sort(key=lambda r: (r.st_second, r.primary_bs_id))
    return records


# -- step 4: cleaning ------------------------------------------------------

def clean_outliers(records, threshold: float = DEFAULT_CLEAN_THRESHOLD):
    """Split records into (kept, removed); removed iff ``cse < threshold * se``."""
    kept, removed = [], []
    for r in records:
        (removed if r.cse < threshold * r.se else kept).append(r)
    return kept, removed


# -- features and splits ---------------------------------------------------

def build_features(record: AlignedRecord):
    if len(record.rsrps_dbm) != 16:
        raise MalformedRecordError(f"expected 16 RSRPs, got {len(record.rsrps_dbm)}")
    x = np.empty(NUM_FEATURES)
    x[:16] = record.rsrps_dbm
    x[16] = record.se
    return x, float(record.cse)


def build_feature_matrix(records):
    """Stack :func:`build_features` over records into ``(X, y)``."""
    X = np.empty((len(records), NUM_FEATURES))
    y = np.empty(len(records))
    for k, r in enumerate(records):
        X[k], y[k] = build_features(r)
    return X, y


def apply_standardization(X, means, stds):
    return (np.asarray(X, dtype=float) - means) / stds


def standardize_and_split(pairs, sizes, seed: int) -> Dataset:
    """Random train/val/test split; z-score statistics from the train rows only.

    Rows of the returned dataset are ordered train, val, test; extra input
    rows beyond ``sum(sizes)`` are dropped.
    """
    X, y = pairs
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n_train, n_val, n_test = (int(s) for s in sizes)
    if min(n_train, n_val, n_test) < 1:
        raise InvalidArgumentError("all split sizes must be >= 1")
    total = n_train + n_val + n_test
    if total > len(X):
        raise InvalidArgumentError(f"need {total} pairs for the requested splits, have {len(X)}")
    order = np.random.default_rng(seed).permutation(len(X))[:total]
    X, y = X[order], y[order]
    train = X[:n_train]
    means = train.mean(axis=0)
    stds = train.std(axis=0)
    for k, s in enumerate(stds):
        if not s > 1e-12 * max(1.0, abs(means[k])):
            raise DegenerateFeatureError(k)
    split = {
        "train": np.arange(0, n_train),
        "val": np.arange(n_train, n_train + n_val),
        "test": np.arange(n_train + n_val, total),
    }
    return Dataset(apply_standardization(X, means, stds), y, means, stds, split, seed)


def standardize_with(pairs, means, stds, split_name="case") -> Dataset:
    """Dataset for held-out rows, reusing statistics fitted elsewhere."""
    X, y = pairs
    X = apply_standardization(X, means, stds)
    return Dataset(X, np.asarray(y, dtype=float), np.asarray(means), np.asarray(stds),
                   {split_name: np.arange(len(X))})


# -- end to end ------------------------------------------------------------

def records_from_aggregates(aggregates, config, window_s=1, threshold=DEFAULT_CLEAN_THRESHOLD):
    """Steps 2-4 on already aggregated seconds; returns ``(kept, removed)``."""
    aggs = add_spectral_efficiency(aggregates, config)
    st = aggs[aggs["mode"] == ST]
    jt = aggs[aggs["mode"] == JT]
    return clean_outliers(align_modes(st, jt, window_s), threshold)


def simulate_records(config: SystemConfig, num_seconds: int, window_s=1,
                     threshold=DEFAULT_CLEAN_THRESHOLD, chunk_seconds=2000):
    """Generate frames in memory and run the whole pipeline on them."""
    aggs = aggregate_frame_chunks(iter_frame_chunks(config, num_seconds, chunk_seconds))
    return records_from_aggregates(aggs, config, window_s, threshold)


# -- dataset file ----------------------------------------------------------

def _fmt(x):
    return "%.9g" % x


def write_dataset(dataset: Dataset, path, header_lines=()):
    """Comment header (statistics, splits, provenance) then CSV rows."""
    sizes = ",".join(f"{k}={len(v)}" for k, v in dataset.split.items())
    tag = np.empty(len(dataset.labels), dtype=object)
    for name, idx in dataset.split.items():
        tag[idx] = name
    with open(path, "w", newline="") as fh:
        fh.write("# comp_cse dataset\n")
        fh.write(f"# pipeline_version: {PIPELINE_VERSION}\n")
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write(f"# seed: {dataset.seed if dataset.seed is not None else ''}\n")
        fh.write(f"# split_sizes: {sizes}\n")
        fh.write("# feature_means: " + ",".join(repr(float(v)) for v in dataset.feature_means) + "\n")
        fh.write("# feature_stds: " + ",".join(repr(float(v)) for v in dataset.feature_stds) + "\n")
        fh.write(",".join(["split", *FEATURE_NAMES, "label"]) + "\n")
        for k in range(len(dataset.labels)):
            fields = [tag[k], *map(_fmt, dataset.features[k]), _fmt(dataset.labels[k])]
            fh.write(",".join(fields) + "\n")


def read_dataset(path) -> Dataset:
    meta = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].strip().partition(":")
            meta[key.strip()] = value.strip()
    if meta.get("pipeline_version") != str(PIPELINE_VERSION):
        raise InvalidArgumentError(f"{path}: unsupported dataset version {meta.get('pipeline_version')!r}")
    table = pd.read_csv(path, comment="#")
    means = np.array([float(v) for v in meta["feature_means"].split(",")])
    stds = np.array([float(v) for v in meta["feature_stds"].split(",")])
    tags = table["split"].to_numpy()
    split = {}
    for name in dict.fromkeys(tags):
        split[name] = np.flatnonzero(tags == name)
    seed = int(meta["seed"]) if meta.get("seed") else None
    return Dataset(
        table[FEATURE_NAMES].to_numpy(dtype=float),
        table["label"].to_numpy(dtype=float),
        means,
        stds,
        split,
        seed,
    )
