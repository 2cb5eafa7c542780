"""Dataset ingestion, normalization, masking, and windowing.

Conventions used throughout the package:

* a series is a (T, K) float64 value matrix plus a (T, K) mask
  (1.0 = observed, 0.0 = missing); unobserved cells hold the sentinel 0.0
  and are never read by downstream math,
* timestamps are a nondecreasing float vector of length T (the row index
  when the source has no time column),
* the per-cell time gap since the last observation is 0 on the first row,
  the step gap when the previous cell was observed, and accumulates across
  missing rows otherwise.
"""

import csv
import dataclasses
from dataclasses import dataclass, field

import numpy as np

TIME_COLUMN_NAMES = {"t", "time", "timestamp", "ts"}


@dataclass
class TimeSeriesDataset:
    values: np.ndarray          # (T, K), 0.0 sentinel where mask == 0
    mask: np.ndarray            # (T, K), 1.0 observed / 0.0 missing
    timestamps: np.ndarray      # (T,), nondecreasing
    feature_names: list
    meta: dict = field(default_factory=dict)

    @property
    def n_steps(self):
        return self.values.shape[0]

    @property
    def n_features(self):
        return self.values.shape[1]


@dataclass
class NormStats:
    mean: np.ndarray            # (K,)
    std: np.ndarray             # (K,), floored strictly above 0


@dataclass
class MaskSplit:
    train_mask: np.ndarray      # (T, K)
    eval_mask: np.ndarray       # (T, K), disjoint from train, union = mask
    meta: dict = field(default_factory=dict)


@dataclass
class Window:
    """One contiguous, possibly right-padded chunk of a series.

    ``delta_fwd`` is the time-gap matrix of the window read forward;
    ``delta_bwd`` the gaps of the valid segment read in reverse (both
    restart at zero on their first row). Rows past ``length`` are padding
    with mask 0.
    """
    values: np.ndarray          # (W, K)
    mask: np.ndarray            # (W, K)
    delta_fwd: np.ndarray       # (W, K)
    delta_bwd: np.ndarray       # (W, K)
    start: int
    length: int

    @property
    def padded(self):
        return self.length < self.values.shape[0]


def load_csv(path, missing_token="", time_column="auto"):
    """Read a header-ed CSV into a :class:`TimeSeriesDataset`.

    The first column is treated as a numeric timestamp when its header is
    one of ``t/time/timestamp/ts`` (or always/never with
    ``time_column=True/False``); otherwise timestamps default to the row
    index. Cells equal to ``missing_token`` (or empty) are missing. Rows
    are sorted by timestamp if needed, with ``meta['sorted'] = True``.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows = [row for row in reader if row and any(c.strip() for c in row)]

    if not rows:
        raise ValueError(f"{path}: zero rows")
    header = [h.strip() for h in header]

    if time_column == "auto":
        has_time = bool(header) and header[0].lower() in TIME_COLUMN_NAMES
    else:
        has_time = bool(time_column)
    first_feature = 1 if has_time else 0
    feature_names = header[first_feature:]
    K = len(feature_names)
    if K == 0:
        raise ValueError(f"{path}: zero feature columns")

    T = len(rows)
    values = np.zeros((T, K))
    mask = np.zeros((T, K))
    timestamps = np.arange(T, dtype=float)
    token = missing_token.strip()

    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise ValueError(
                f"{path}: row {i + 1} has {len(row)} cells, expected {len(header)}")
        if has_time:
            try:
                timestamps[i] = float(row[0])
            except ValueError:
                raise ValueError(
                    f"{path}: row {i + 1}: unparseable timestamp {row[0]!r}") from None
        for j, cell in enumerate(row[first_feature:]):
            cell = cell.strip()
            if cell == "" or cell == token:
                continue
            try:
                values[i, j] = float(cell)
            except ValueError:
                raise ValueError(
                    f"{path}: row {i + 1}: unparseable value {cell!r} "
                    f"in column {feature_names[j]!r}") from None
            mask[i, j] = 1.0

    meta = {"path": str(path), "missing_token": missing_token, "sorted": False}
    if np.any(np.diff(timestamps) < 0):
        order = np.argsort(timestamps, kind="stable")
        values, mask, timestamps = values[order], mask[order], timestamps[order]
        meta["sorted"] = True

    values = values * mask  # enforce the sentinel
    return TimeSeriesDataset(values, mask, timestamps, feature_names, meta)


def compute_deltas(timestamps, mask):
    """Per-cell time gap since the last observation.

    delta[0] = 0; delta[t] = gap(t) if the cell was observed at t-1, else
    gap(t) + delta[t-1].
    """
    timestamps = np.asarray(timestamps, dtype=float)
    mask = np.asarray(mask, dtype=float)
    T, K = mask.shape
    delta = np.zeros((T, K))
    if T == 1:
        return delta
    gaps = np.diff(timestamps)
    for t in range(1, T):
        carry = np.where(mask[t - 1] > 0.0, 0.0, delta[t - 1])
        delta[t] = gaps[t - 1] + carry
    return delta


def fit_normalizer(dataset, std_floor=1e-5):
    """Per-feature mean and (population) std over observed cells only."""
    v, m = dataset.values, dataset.mask
    counts = m.sum(axis=0)
    for k, cnt in enumerate(counts):
        if cnt == 0:
            raise ValueError(
                f"feature {dataset.feature_names[k]!r} has no observed values")
    mean = (v * m).sum(axis=0) / counts
    var = (((v - mean) * m) ** 2).sum(axis=0) / counts
    std = np.maximum(np.sqrt(var), std_floor)
    return NormStats(mean=mean, std=std)


def normalize(dataset, stats):
    """Standardize observed cells; missing cells stay at the 0 sentinel."""
    vals = (dataset.values - stats.mean) / stats.std * dataset.mask
    meta = dict(dataset.meta, normalized=True)
    return dataclasses.replace(dataset, values=vals, meta=meta)


def denormalize(dataset, stats):
    vals = (dataset.values * stats.std + stats.mean) * dataset.mask
    meta = dict(dataset.meta, normalized=False)
    return dataclasses.replace(dataset, values=vals, meta=meta)


def normalize_matrix(values, stats):
    return (values - stats.mean) / stats.std


def denormalize_matrix(values, stats):
    return values * stats.std + stats.mean


def make_mcar_split(dataset, rate, seed):
    """Hide each originally observed cell independently with prob ``rate``.

    Hidden cells form the evaluation set; the rate is relative to observed
    cells (not to all cells), which the returned metadata records.
    """
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"missing rate must lie in [0, 1), got {rate}")
    rng = np.random.default_rng(seed)
    draw = rng.random(dataset.mask.shape)
    eval_mask = np.where((draw < rate) & (dataset.mask > 0.0), 1.0, 0.0)
    train_mask = dataset.mask - eval_mask
    meta = {"rate": rate, "seed": int(seed),
            "rate_convention": "fraction of originally observed cells"}
    return MaskSplit(train_mask=train_mask, eval_mask=eval_mask, meta=meta)


def export_split(split, path):
    """Write (t, k, split) triples for every originally observed cell."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "k", "split"])
        T, K = split.train_mask.shape
        for t in range(T):
            for k in range(K):
                if split.train_mask[t, k] > 0.0:
                    writer.writerow([t, k, "train"])
                elif split.eval_mask[t, k] > 0.0:
                    writer.writerow([t, k, "eval"])


def make_windows(values, mask, timestamps, window_length):
    """Chop a series into contiguous windows of fixed length.

    Time gaps restart at each window boundary (windows are treated as
    independent series); the final partial window is zero-padded with
    mask 0.
    """
    if window_length < 1:
        raise ValueError("window_length must be >= 1")
    T, K = values.shape
    windows = []
    for start in range(0, T, window_length):
        stop = min(start + window_length, T)
        length = stop - start
        v = np.zeros((window_length, K))
        mm = np.zeros((window_length, K))
        v[:length] = values[start:stop]
        mm[:length] = mask[start:stop]
        times = timestamps[start:stop]
        d_f = np.zeros((window_length, K))
        d_b = np.zeros((window_length, K))
        d_f[:length] = compute_deltas(times, mm[:length])
        d_b[:length] = compute_deltas(-times[::-1], mm[:length][::-1])
        windows.append(Window(values=v, mask=mm, delta_fwd=d_f, delta_bwd=d_b,
                              start=start, length=length))
    return windows


def batch_iter(dataset, window_length, batch_size, seed, shuffle=True):
    """Yield batches (lists) of windows in a seed-deterministic order."""
    windows = make_windows(dataset.values, dataset.mask, dataset.timestamps,
                           window_length)
    order = np.arange(len(windows))
    if shuffle:
        np.random.default_rng(seed).shuffle(order)
    for i in range(0, len(order), batch_size):
        yield [windows[j] for j in order[i:i + batch_size]]


def reverse_valid(arr, length):
    """Reverse the first ``length`` rows of ``arr``, leaving padding put."""
    out = arr.copy()
    out[:length] = arr[length - 1::-1]
    return out


def visible_normalized(values, visible_mask, stats):
    """Standardized copy of ``values`` with non-visible cells zeroed.

    Cells outside ``visible_mask`` (originally missing or held out for
    evaluation) are zeroed before normalization so they cannot leak into
    any computation.
    """
    vis = np.where(visible_mask > 0.0, values, 0.0)
    return (vis - stats.mean) / stats.std * visible_mask


def build_model_inputs(values, visible_mask, timestamps, stats, window_length):
    """Normalize visible cells, zero everything else, and window the result."""
    norm = visible_normalized(values, visible_mask, stats)
    return make_windows(norm, visible_mask, timestamps, window_length)


def make_synthetic(n_steps=2000, n_features=10, noise_std=0.1, seed=0):
    """Built-in benchmark: grouped multichannel sinusoids plus noise.

    Features share one of three base periods (with per-feature phase and
    amplitude), so same-group channels carry linearly recoverable
    cross-feature structure, mirroring the multi-sensor layout of the real
    datasets this harness targets. Fully observed.
    """
    rng = np.random.default_rng(seed)
    periods = rng.uniform(10.0, 24.0, size=3)
    group = np.arange(n_features) % 3
    phase = rng.uniform(0.0, 2.0 * np.pi, size=n_features)
    amp = rng.uniform(0.7, 1.3, size=n_features)
    t = np.arange(n_steps, dtype=float)
    signal = amp * np.sin(2.0 * np.pi * t[:, None] / periods[group] + phase)
    values = signal + noise_std * rng.standard_normal((n_steps, n_features))
    names = [f"ch{k}" for k in range(n_features)]
    meta = {"generator": "synthetic-sinusoids", "seed": int(seed),
            "noise_std": noise_std, "periods": periods.tolist(),
            "groups": group.tolist()}
    return TimeSeriesDataset(values=values, mask=np.ones_like(values),
                             timestamps=t, feature_names=names, meta=meta)
